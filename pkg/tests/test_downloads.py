"""
Tests for the dataset registry, downloads and converters.

Network access is mocked; synthetic datasets are generated locally.

Run with: pytest tests/test_downloads.py -v
"""

import hashlib
import json

import numpy as np
import pytest
import requests

from core.api_retry import RetryConfig
from core.container import read_header
from core.dataset import Dataset
from core.downloads import (
    MANIFEST_NAME,
    DatasetEntry,
    convert,
    download,
    generate_blobs,
    generate_seq,
    load_registry,
)
from core.errors import DatasetError, DigestMismatchError, MissingRawFilesError, UnknownDatasetError
from core.rng import Rng

PAYLOAD = [b"x0,x1,label\n", b"0.5,0.25,1\n"]
PAYLOAD_SHA256 = hashlib.sha256(b"".join(PAYLOAD)).hexdigest()
FAST_RETRY = RetryConfig(max_attempts=3, base_delay=0.0, jitter=False, log_retries=False)


def url_registry(sha256=PAYLOAD_SHA256):
    return {
        "remote-blobs": DatasetEntry.from_dict("remote-blobs", {
            "kind": "url",
            "converter": "blobs",
            "files": [{"filename": "blobs.csv", "url": "https://example.org/blobs.csv", "sha256": sha256}],
        })
    }


@pytest.fixture
def fake_get(mocker):
    """requests.get returning the two-chunk payload."""
    response = mocker.Mock()
    response.iter_content.return_value = PAYLOAD
    response.raise_for_status.return_value = None
    return mocker.patch("core.downloads.requests.get", return_value=response)


class TestRegistry:
    """Tests for registry loading and entries."""

    def test_builtin_entries(self):
        """The built-in registry carries the synthetic datasets."""
        registry = load_registry()
        assert {"synth-blobs", "synth-seq"} <= set(registry)
        assert registry["synth-blobs"].converter == "blobs"

    def test_overlay(self, tmp_path):
        """Entries from an extra registry file are added."""
        extra = tmp_path / "registry.json"
        extra.write_text(json.dumps({
            "tiny-blobs": {
                "kind": "synthetic", "generator": "blobs", "converter": "blobs",
                "files": ["blobs.csv"], "params": {"seed": 1, "num_examples": 10},
            }
        }), encoding="utf-8")
        registry = load_registry(extra)
        assert "tiny-blobs" in registry and "synth-blobs" in registry

    def test_unreadable_overlay(self, tmp_path):
        """A broken registry file raises DatasetError."""
        extra = tmp_path / "registry.json"
        extra.write_text("{", encoding="utf-8")
        with pytest.raises(DatasetError):
            load_registry(extra)

    def test_url_entry_needs_digest(self):
        """URL files must carry a sha256."""
        with pytest.raises(DatasetError):
            DatasetEntry.from_dict("x", {
                "kind": "url", "converter": "blobs",
                "files": [{"filename": "a.csv", "url": "https://example.org/a.csv"}],
            })

    def test_unknown_kind(self):
        """Entries are synthetic or url."""
        with pytest.raises(DatasetError):
            DatasetEntry.from_dict("x", {"kind": "ftp", "converter": "blobs", "files": []})

    def test_unknown_dataset(self, tmp_path):
        """Unregistered names raise UnknownDatasetError."""
        with pytest.raises(UnknownDatasetError):
            download("mnist-but-not-really", tmp_path)


class TestGenerators:
    """Tests for the synthetic generators."""

    def test_blobs_draw_order(self):
        """Per example: label = bounded(2), then two normals around the label's center."""
        oracle = Rng.from_seed(5)
        expected = []
        for _ in range(4):
            label = oracle.bounded(2)
            mean = 2.0 if label == 1 else -2.0
            expected.append((mean + 0.5 * oracle.normal(), mean + 0.5 * oracle.normal(), label))
        frame = generate_blobs(seed=5, num_examples=4)
        assert [tuple(row) for row in frame.itertuples(index=False)] == expected

    def test_seq_lengths_and_vocab(self):
        """Lengths lie in [min, max] and tokens in [1, vocab)."""
        frame = generate_seq(seed=2, num_sequences=20, vocab_size=5, min_length=3, max_length=6)
        lengths = frame.groupby("sequence_id").size()
        assert lengths.between(3, 6).all()
        assert frame["token"].between(1, 4).all()

    def test_seq_bad_parameters(self):
        """min_length above max_length is rejected."""
        with pytest.raises(DatasetError):
            generate_seq(seed=2, num_sequences=2, vocab_size=5, min_length=6, max_length=3)


class TestSyntheticDownload:
    """Tests for generated raw files."""

    def test_creates_files_and_manifest(self, tmp_path):
        """The raw CSV and a digest manifest land in <dest>/<name>."""
        (path,) = download("synth-blobs", tmp_path)
        assert path == tmp_path / "synth-blobs" / "blobs.csv"
        manifest = json.loads((tmp_path / "synth-blobs" / MANIFEST_NAME).read_text())
        assert manifest == {"blobs.csv": hashlib.sha256(path.read_bytes()).hexdigest()}

    def test_idempotent(self, tmp_path, mocker):
        """A second download leaves intact files alone."""
        download("synth-blobs", tmp_path)
        generate = mocker.patch("core.downloads._generate")
        download("synth-blobs", tmp_path)
        assert generate.call_count == 0

    def test_tampered_file_regenerated(self, tmp_path):
        """A modified raw file is detected and generated again."""
        (path,) = download("synth-blobs", tmp_path)
        original = path.read_bytes()
        path.write_bytes(original + b"1,1,1\n")
        download("synth-blobs", tmp_path)
        assert path.read_bytes() == original

    def test_same_seed_same_bytes(self, tmp_path):
        """Generation is byte-reproducible."""
        (a,) = download("synth-seq", tmp_path / "a")
        (b,) = download("synth-seq", tmp_path / "b")
        assert a.read_bytes() == b.read_bytes()


class TestUrlDownload:
    """Tests for fetched raw files (network mocked)."""

    def test_fetch(self, tmp_path, fake_get):
        """Chunks are written and the digest checked."""
        (path,) = download("remote-blobs", tmp_path, registry=url_registry(), retry_config=FAST_RETRY)
        assert path.read_bytes() == b"".join(PAYLOAD)
        assert fake_get.call_count == 1
        assert fake_get.call_args.args[0] == "https://example.org/blobs.csv"

    def test_idempotent(self, tmp_path, fake_get):
        """Files already matching their digest are not fetched again."""
        download("remote-blobs", tmp_path, registry=url_registry(), retry_config=FAST_RETRY)
        download("remote-blobs", tmp_path, registry=url_registry(), retry_config=FAST_RETRY)
        assert fake_get.call_count == 1

    def test_digest_mismatch(self, tmp_path, fake_get):
        """A payload with the wrong digest is rejected, not retried, and not kept."""
        with pytest.raises(DigestMismatchError):
            download("remote-blobs", tmp_path, registry=url_registry("0" * 64), retry_config=FAST_RETRY)
        assert fake_get.call_count == 1
        assert sorted(p.name for p in (tmp_path / "remote-blobs").iterdir()) == []

    def test_retries_connection_errors(self, tmp_path, fake_get):
        """A transient connection error is retried."""
        response = fake_get.return_value
        fake_get.side_effect = [requests.ConnectionError("reset"), response]
        (path,) = download("remote-blobs", tmp_path, registry=url_registry(), retry_config=FAST_RETRY)
        assert fake_get.call_count == 2
        assert path.read_bytes() == b"".join(PAYLOAD)

    def test_broken_stream_leaves_no_partial_file(self, tmp_path, fake_get):
        """A connection dropped mid-body removes the .part file on every attempt."""
        def broken_body(chunk_size):
            yield PAYLOAD[0]
            raise requests.ConnectionError("reset mid-body")

        fake_get.return_value.iter_content.side_effect = broken_body
        with pytest.raises(requests.ConnectionError):
            download("remote-blobs", tmp_path, registry=url_registry(), retry_config=FAST_RETRY)
        assert fake_get.call_count == 3
        assert sorted(p.name for p in (tmp_path / "remote-blobs").iterdir()) == []

    def test_broken_stream_then_recovery(self, tmp_path, fake_get):
        """A retry after a mid-body failure writes the full payload."""
        def broken_body(chunk_size):
            yield PAYLOAD[0]
            raise requests.ConnectionError("reset mid-body")

        fake_get.return_value.iter_content.side_effect = [broken_body(0), iter(PAYLOAD)]
        (path,) = download("remote-blobs", tmp_path, registry=url_registry(), retry_config=FAST_RETRY)
        assert path.read_bytes() == b"".join(PAYLOAD)
        assert not path.with_name("blobs.csv.part").exists()

    def test_gives_up(self, tmp_path, fake_get):
        """After max_attempts the network error propagates."""
        fake_get.side_effect = requests.ConnectionError("down")
        with pytest.raises(requests.ConnectionError):
            download("remote-blobs", tmp_path, registry=url_registry(), retry_config=FAST_RETRY)
        assert fake_get.call_count == 3


class TestConvert:
    """Tests for raw file conversion."""

    def test_blobs_container(self, blobs_container):
        """synth-blobs converts to features f64 [200, 2] and targets u8 [200, 1], split 80/20."""
        header = read_header(blobs_container)
        shapes = {s.name: (s.dtype, s.shape) for s in header.sources}
        assert shapes == {"features": ("f64", [200, 2]), "targets": ("u8", [200, 1])}
        assert Dataset.open(blobs_container, "test").num_examples == 40

    def test_blobs_values_round_trip(self, tmp_path):
        """Container features equal the generated floats bit for bit."""
        download("synth-blobs", tmp_path)
        path = convert("synth-blobs", tmp_path, tmp_path / "blobs.bfdc").path
        frame = generate_blobs(seed=1234, num_examples=200)
        features = Dataset.open(path, "train").get_examples(list(range(160)))["features"]
        np.testing.assert_array_equal(features, frame[["x0", "x1"]].to_numpy()[:160])

    def test_seq_padding(self, tmp_path):
        """synth-seq pads tokens with 0 up to the longest sequence."""
        download("synth-seq", tmp_path)
        path = convert("synth-seq", tmp_path, tmp_path / "seq.bfdc").path
        batch = Dataset.open(path, "train").get_examples(list(range(40)))
        tokens, lengths = batch["tokens"], batch["lengths"][:, 0]
        assert tokens.dtype == np.int32
        for row, length in zip(tokens, lengths):
            assert np.all(row[:length] > 0)
            assert np.all(row[length:] == 0)

    def test_default_command_line(self, tmp_path):
        """The provenance records the equivalent convert invocation."""
        download("synth-blobs", tmp_path)
        out = tmp_path / "blobs.bfdc"
        container = convert("synth-blobs", tmp_path, out)
        assert container.header.command_line == f"kiln convert synth-blobs --raw {tmp_path} --out {out}"

    def test_missing_raw_files(self, tmp_path):
        """Converting before downloading fails."""
        with pytest.raises(MissingRawFilesError):
            convert("synth-blobs", tmp_path, tmp_path / "blobs.bfdc")

    def test_tampered_raw_file(self, tmp_path):
        """Raw files that changed after download are refused."""
        (path,) = download("synth-blobs", tmp_path)
        path.write_bytes(path.read_bytes().replace(b"1\n", b"0\n", 1))
        with pytest.raises(DigestMismatchError):
            convert("synth-blobs", tmp_path, tmp_path / "blobs.bfdc")
