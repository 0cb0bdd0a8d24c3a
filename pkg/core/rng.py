"""
Deterministic random numbers for every stochastic component.

PCG32 (XSH-RR output, 64-bit LCG state) seeded through splitmix64. All
arithmetic is done on Python ints masked to 64/32 bits, so the stream is
identical on every platform and can be ported bit-for-bit.

Usage:
    rng = Rng.from_seed(42)
    rng.next_u32()
    rng.bounded(10)
    rng.normal()
"""

import math
import struct
from typing import Any, Dict, Optional

from core.errors import ContractViolation

MASK_64 = (1 << 64) - 1
MASK_32 = (1 << 32) - 1

PCG_MULTIPLIER = 6364136223846793005
SPLITMIX_GAMMA = 0x9E3779B97F4A7C15

_TWO_PI = 2.0 * math.pi
_INV_2_53 = 1.0 / (1 << 53)


def splitmix64_next(x: int) -> tuple:
    """
    One splitmix64 step.

    Args:
        x: Current 64-bit generator state

    Returns:
        (new_state, output)
    """
    x = (x + SPLITMIX_GAMMA) & MASK_64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK_64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK_64
    return x, z ^ (z >> 31)


def splitmix64(x: int) -> int:
    """First splitmix64 output for state x."""
    return splitmix64_next(x & MASK_64)[1]


class Rng:
    """
    PCG32 generator.

    Attributes:
        state: 64-bit LCG state
        inc: 64-bit odd increment

    A pending Box-Muller value is part of the generator state: normal()
    hands out both outputs of each transform before drawing again.
    """

    __slots__ = ("state", "inc", "_spare")

    def __init__(self, state: int, inc: int, spare: Optional[float] = None):
        if not inc & 1:
            raise ContractViolation("PCG32 increment must be odd")
        self.state = state & MASK_64
        self.inc = inc & MASK_64
        self._spare = spare

    @classmethod
    def from_seed(cls, user_seed: int) -> "Rng":
        """
        Seed a generator from a 64-bit user seed.

        Two successive splitmix64 outputs give the state and the increment
        (low bit forced on).
        """
        if user_seed < 0:
            raise ContractViolation(f"seed must be non-negative, got {user_seed}")
        x, state = splitmix64_next(user_seed & MASK_64)
        _, inc = splitmix64_next(x)
        return cls(state, inc | 1)

    @classmethod
    def derive(cls, seed: int, key: int) -> "Rng":
        """Independent generator for (seed, key), e.g. (rewrite seed, variable id)."""
        return cls.from_seed(splitmix64((seed & MASK_64) ^ splitmix64(key & MASK_64)))

    # -------------------------------------------------------------------------
    # Draws
    # -------------------------------------------------------------------------

    def next_u32(self) -> int:
        old = self.state
        self.state = (old * PCG_MULTIPLIER + self.inc) & MASK_64
        xorshifted = (((old >> 18) ^ old) >> 27) & MASK_32
        rot = old >> 59
        return ((xorshifted >> rot) | (xorshifted << ((-rot) & 31))) & MASK_32

    def bounded(self, n: int) -> int:
        """
        Unbiased integer in [0, n) (Lemire's multiply-shift with rejection).

        Raises:
            ContractViolation: if n is not in [1, 2**32)
        """
        if n < 1 or n > MASK_32:
            raise ContractViolation(f"bounded() needs 1 <= n < 2**32, got {n}")
        m = self.next_u32() * n
        low = m & MASK_32
        if low < n:
            threshold = ((1 << 32) - n) % n
            while low < threshold:
                m = self.next_u32() * n
                low = m & MASK_32
        return m >> 32

    def uniform(self) -> float:
        """Uniform double in [0, 1) from 53 bits of two draws (high word first)."""
        high = self.next_u32()
        low = self.next_u32()
        return (((high << 32) | low) >> 11) * _INV_2_53

    def normal(self) -> float:
        """
        Standard normal via Box-Muller; both outputs are used in order.

        With u1, u2 the next two uniform() draws, the pair is
        r*cos(2*pi*u2) then r*sin(2*pi*u2) where r = sqrt(-2*log(1 - u1)).
        The 1 - u1 form is part of the stream contract: other implementations
        must use it to reproduce the same values.
        """
        if self._spare is not None:
            value, self._spare = self._spare, None
            return value
        u1 = self.uniform()
        u2 = self.uniform()
        # 1 - u1 lies in (0, 1], keeping log() finite.
        radius = math.sqrt(-2.0 * math.log(1.0 - u1))
        theta = _TWO_PI * u2
        self._spare = radius * math.sin(theta)
        return radius * math.cos(theta)

    def permutation(self, n: int) -> list:
        """Fisher-Yates shuffle of range(n): for i from n-1 down to 1, swap i with bounded(i+1)."""
        order = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.bounded(i + 1)
            order[i], order[j] = order[j], order[i]
        return order

    # -------------------------------------------------------------------------
    # Serialization
    # -------------------------------------------------------------------------

    def to_bytes(self) -> bytes:
        """(state, inc) as two little-endian u64."""
        return struct.pack("<QQ", self.state, self.inc)

    @classmethod
    def from_bytes(cls, payload: bytes) -> "Rng":
        state, inc = struct.unpack("<QQ", payload)
        return cls(state, inc)

    def state_dict(self) -> Dict[str, Any]:
        spare = None
        if self._spare is not None:
            spare = "0x%016x" % struct.unpack("<Q", struct.pack("<d", self._spare))[0]
        return {
            "state": "0x%016x" % self.state,
            "inc": "0x%016x" % self.inc,
            "spare": spare,
        }

    @classmethod
    def from_state_dict(cls, data: Dict[str, Any]) -> "Rng":
        try:
            state = int(data["state"], 16)
            inc = int(data["inc"], 16)
            spare_hex = data.get("spare")
        except (KeyError, TypeError, ValueError) as e:
            raise ContractViolation(f"malformed rng state: {data!r}") from e
        spare = None
        if spare_hex is not None:
            spare = struct.unpack("<d", struct.pack("<Q", int(spare_hex, 16)))[0]
        return cls(state, inc, spare)

    def load_state_dict(self, data: Dict[str, Any]) -> None:
        """Overwrite this generator in place with a saved state."""
        restored = Rng.from_state_dict(data)
        self.state, self.inc, self._spare = restored.state, restored.inc, restored._spare

    def copy(self) -> "Rng":
        return Rng(self.state, self.inc, self._spare)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Rng):
            return NotImplemented
        return (self.state, self.inc, self._spare) == (other.state, other.inc, other._spare)

    def __repr__(self) -> str:
        return f"Rng(state=0x{self.state:016x}, inc=0x{self.inc:016x})"
