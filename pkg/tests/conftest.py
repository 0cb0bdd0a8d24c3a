"""Shared fixtures: small hand-built containers, the converted synth-blobs dataset and gradient checks."""

import numpy as np
import pytest
from hypothesis import strategies as st

from core import graph
from core.container import Interval, Provenance, SourceDescriptor, SplitDescriptor, write_container
from core.context import StreamSignal
from core.downloads import convert, download
from core.graph import evaluate, grad
from core.rng import Rng
from core.stream import Stream

BLOBS_COMMAND_LINE = "kiln convert synth-blobs --raw data --out blobs.bfdc"


def ramp_container(path, num_rows=4):
    """
    Container with `x` i64 [n, 2] holding 10*row + col and `y` u8 [n, 1] = row,
    split into train [0, n-1) and test [n-1, n) with `y` unavailable in test.
    """
    rows = np.arange(num_rows, dtype=np.int64)
    x = (10 * rows[:, None] + np.arange(2, dtype=np.int64)[None, :]).astype(np.int64)
    y = rows.astype(np.uint8).reshape(num_rows, 1)
    cut = max(num_rows - 1, 0)
    return write_container(
        path,
        [
            (SourceDescriptor("x", "i64", [num_rows, 2], ["batch", "feature"]), x),
            (SourceDescriptor("y", "u8", [num_rows, 1], ["batch", "index"]), y),
        ],
        [
            SplitDescriptor("train", {"x": Interval(0, cut), "y": Interval(0, cut)}),
            SplitDescriptor("test", {"x": Interval(cut, num_rows), "y": None}),
        ],
        Provenance(created_by="tests", command_line="pytest"),
    )


def random_array(seed, shape, low=-1.0, high=1.0):
    rng = Rng.from_seed(seed)
    count = int(np.prod(shape))
    values = [low + (high - low) * rng.uniform() for _ in range(count)]
    return np.array(values, dtype=np.float64).reshape(shape)


def _rewinder(cg):
    """Restores every generator of cg to its current state when called."""
    if cg is None:
        return lambda: None
    saved = {key: rng.copy() for key, rng in graph.generators(cg).items()}
    live = graph.generators(cg)
    return lambda: [live[key].load_state_dict(rng.state_dict()) for key, rng in saved.items()]


def numeric_grad(cost, param, bindings, eps=1e-6, rewind=lambda: None):
    """Central differences of cost with respect to param's storage."""
    base = param.value.copy()
    out = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        plus, minus = base.copy(), base.copy()
        plus[idx] += eps
        minus[idx] -= eps
        rewind()
        (f_plus,) = evaluate([cost], {**bindings, param: plus})
        rewind()
        (f_minus,) = evaluate([cost], {**bindings, param: minus})
        out[idx] = (f_plus - f_minus) / (2 * eps)
    return out


def assert_gradients_match(cost, params, bindings, rewind=None):
    """Relative error below 1e-5 (absolute 1e-7 near zero); rewind is a graph whose generators are replayed."""
    restore = _rewinder(rewind)
    grads = grad(cost, params)
    symbolic = evaluate(grads, bindings)
    for param, value in zip(params, symbolic):
        np.testing.assert_allclose(value, numeric_grad(cost, param, bindings, rewind=restore), rtol=1e-5, atol=1e-7)


class ListStream(Stream):
    """Replays fixed items, one epoch, then EXHAUSTED."""

    kind = "list"

    def __init__(self, items, sources):
        self.items = list(items)
        self._sources = list(sources)
        self.position = 0

    @property
    def sources(self):
        return self._sources

    def get_next(self):
        if self.position > len(self.items):
            return StreamSignal.EXHAUSTED
        self.position += 1
        if self.position > len(self.items):
            return StreamSignal.EPOCH_END
        return self.items[self.position - 1]

    def _state(self):
        return {"position": self.position}

    def _load(self, state):
        self.position = int(state["position"])

    def _config(self):
        return {}


@pytest.fixture
def ramp_path(tmp_path):
    """Path of a fresh 4-row ramp container."""
    return ramp_container(tmp_path / "ramp.bfdc").path


@pytest.fixture(scope="session")
def blobs_container(tmp_path_factory):
    """synth-blobs downloaded and converted once per test session."""
    root = tmp_path_factory.mktemp("blobs")
    download("synth-blobs", root)
    return convert("synth-blobs", root, root / "blobs.bfdc", command_line=BLOBS_COMMAND_LINE).path


@pytest.fixture(scope="session")
def mixed_container(tmp_path_factory):
    """
    Nine examples with every kind of source a pipeline transforms:
    `tokens` i32 [9, 6] zero-padded with `lengths` i32 [9, 1] in [2, 6],
    `features` f64 [9, 4, 4] ramp images and `labels` u8 [9, 1].
    """
    n = 9
    lengths = np.array([[2 + (3 * i) % 5] for i in range(n)], dtype=np.int32)
    tokens = np.zeros((n, 6), dtype=np.int32)
    for i in range(n):
        tokens[i, : lengths[i, 0]] = 1 + (np.arange(lengths[i, 0]) + i) % 7
    features = np.arange(n * 16, dtype=np.float64).reshape(n, 4, 4)
    labels = (np.arange(n) % 3).astype(np.uint8).reshape(n, 1)
    everything = Interval(0, n)
    return write_container(
        tmp_path_factory.mktemp("mixed") / "mixed.bfdc",
        [
            (SourceDescriptor("tokens", "i32", [n, 6], ["batch", "time"]), tokens),
            (SourceDescriptor("lengths", "i32", [n, 1], ["batch", "index"]), lengths),
            (SourceDescriptor("features", "f64", [n, 4, 4], ["batch", "height", "width"]), features),
            (SourceDescriptor("labels", "u8", [n, 1], ["batch", "index"]), labels),
        ],
        [SplitDescriptor("train", {name: everything for name in ("tokens", "lengths", "features", "labels")})],
        Provenance(created_by="tests", command_line="pytest"),
    ).path


TRIM_TOKENS = {"kind": "mapping", "function": "trim_to_length", "params": {"source": "tokens", "length_source": "lengths"}}


@st.composite
def pipeline_specs(draw):
    """
    Random two-epoch pipeline specs over mixed_container (without the
    container path): a shuffled or bootstrap example-wise scheme, then
    crops and mappings, then one of batch, ngrams (+ batch) or
    ragged batch + padding.
    """
    seeds = st.integers(min_value=0, max_value=2**32 - 1)
    scheme = {
        "kind": draw(st.sampled_from(["shuffled", "bootstrap"])),
        "batch_size": 1,
        "seed": draw(seeds),
        "examplewise": True,
    }
    layers = []
    height = width = 4
    if draw(st.booleans()):
        height, width = draw(st.integers(1, 4)), draw(st.integers(1, 4))
        layers.append({"kind": "random_crop", "crop_h": height, "crop_w": width, "seed": draw(seeds)})
    if draw(st.booleans()):
        factor = draw(st.sampled_from([0.5, -2.0, 3.0]))
        layers.append({"kind": "mapping", "function": "scale_by", "params": {"factor": factor, "sources": ["features"]}})

    batch = {"kind": "batch", "size": draw(st.integers(1, 4)), "policy": draw(st.sampled_from(["keep", "drop"]))}
    tail = draw(st.sampled_from(["batch", "ngrams", "padding"]))
    if tail == "batch":
        layers.append(batch)
        if draw(st.booleans()):
            layers.append({"kind": "random_crop", "crop_h": draw(st.integers(1, height)),
                           "crop_w": draw(st.integers(1, width)), "seed": draw(seeds)})
    elif tail == "ngrams":
        layers += [TRIM_TOKENS, {"kind": "ngrams", "n": draw(st.integers(1, 3)), "source": "tokens"}]
        if draw(st.booleans()):
            layers.append(batch)
    else:
        layers += [TRIM_TOKENS, {**batch, "ragged": ["tokens"]},
                   {"kind": "padding", "exempt": ["lengths", "features", "labels"]}]
    return {"split": "train", "scheme": scheme, "num_epochs": 2, "transformers": layers}
