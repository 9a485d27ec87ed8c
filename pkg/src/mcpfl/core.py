"""Shared value types: parameter vectors with named layouts, tagged random streams,
and per-round records.

Every random draw in the simulator comes from a :class:`RandomStream`, which is
keyed by ``(seed, domain_tag)`` and backed by the counter-based Philox4x64
generator.  Two streams with equal keys replay the same sequence bit for bit,
and streams with different tags are independent, so adding a new consumer of
randomness never perturbs an existing one.
"""

from __future__ import annotations

import hashlib
import threading
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import LayoutError


@dataclass(frozen=True)
class Block:
    name: str
    offset: int
    length: int


Layout = tuple[Block, ...]


def make_layout(sizes: Iterable[tuple[str, int]]) -> Layout:
    """Build a contiguous layout from ``(block_name, length)`` pairs."""
    blocks = []
    offset = 0
    seen = set()
    for name, length in sizes:
        if name in seen:
            raise LayoutError(f"duplicate block name {name!r}")
        if length < 0:
            raise LayoutError(f"negative block length for {name!r}")
        seen.add(name)
        blocks.append(Block(name, offset, int(length)))
        offset += int(length)
    return tuple(blocks)


def _frozen(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64, copy=True).reshape(-1)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class ModelVector:
    """Flat float64 vector whose coordinates are partitioned into named blocks."""

    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values))
        object.__setattr__(self, "layout", tuple(self.layout))
        expected = 0
        for blk in self.layout:
            if blk.offset != expected:
                raise LayoutError(f"block {blk.name!r} is not contiguous")
            expected += blk.length
        if expected != self.values.size:
            raise LayoutError(
                f"layout covers {expected} values but vector has {self.values.size}"
            )

    @classmethod
    def zeros(cls, layout: Layout) -> "ModelVector":
        n = sum(b.length for b in layout)
        return cls(np.zeros(n), layout)

    def __len__(self) -> int:
        return self.values.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, ModelVector):
            return NotImplemented
        return self.layout == other.layout and np.array_equal(self.values, other.values)

    def block(self, name: str) -> np.ndarray:
        for blk in self.layout:
            if blk.name == name:
                return self.values[blk.offset : blk.offset + blk.length]
        raise KeyError(name)

    def block_names(self) -> list[str]:
        return [b.name for b in self.layout]

    def with_values(self, values) -> "ModelVector":
        return ModelVector(values, self.layout)

    def _check(self, other: "ModelVector") -> None:
        if self.layout != other.layout:
            raise LayoutError("vectors have different layouts")

    def __add__(self, other: "ModelVector") -> "ModelVector":
        return vec_axpy(1.0, other, self)

    def __sub__(self, other: "ModelVector") -> "ModelVector":
        return vec_axpy(-1.0, other, self)

    def scale(self, a: float) -> "ModelVector":
        return ModelVector(a * self.values, self.layout)

    def dot(self, other: "ModelVector") -> float:
        self._check(other)
        return float(np.dot(self.values, other.values))


def vec_axpy(a: float, x: ModelVector, y: ModelVector) -> ModelVector:
    """Return ``a * x + y``; both operands must share a layout."""
    if x.layout != y.layout:
        raise LayoutError("vec_axpy on vectors with different layouts")
    return ModelVector(a * x.values + y.values, y.layout)


def l2_norm(x: ModelVector) -> float:
    return float(np.linalg.norm(x.values))


@dataclass(frozen=True)
class RandomStream:
    """Deterministic random source keyed by ``(seed, domain_tag)``.

    Each call to :meth:`generator` starts the stream from its beginning, so a
    stream value can be shared freely; callers that need a continuing sequence
    hold on to the returned generator.
    """

    seed: int
    domain_tag: str

    def key(self) -> int:
        digest = hashlib.blake2b(
            f"{int(self.seed) & 0xFFFFFFFFFFFFFFFF}|{self.domain_tag}".encode(),
            digest_size=16,
        ).digest()
        return int.from_bytes(digest, "little")

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=self.key()))

    def child(self, tag: str) -> "RandomStream":
        return RandomStream(self.seed, f"{self.domain_tag}/{tag}")

    def gaussian(self, n: int) -> np.ndarray:
        return stream_draw_gaussian(self, n)

    def uniform(self, n: int) -> np.ndarray:
        return self.generator().random(n)

    def raw_uint64(self, n: int) -> np.ndarray:
        """Full-range 64-bit words straight from the bit generator."""
        if n == 0:
            return np.zeros(0, dtype=np.uint64)
        return _rekeyed_philox(self.key()).random_raw(n).astype(np.uint64)


_local = threading.local()


def _rekeyed_philox(key: int) -> np.random.Philox:
    """A per-thread Philox reset to the start of stream ``key``.

    Same output as ``Philox(key=key)`` but skips the OS-entropy seeding that
    the constructor performs even when a key is given; masking calls this
    hundreds of times per round.  Only safe when the caller consumes the
    draws before the next call on the same thread.
    """
    bg = getattr(_local, "philox", None)
    if bg is None:
        bg = _local.philox = np.random.Philox(key=0)
    mask64 = (1 << 64) - 1
    bg.state = {
        "bit_generator": "Philox",
        "state": {
            "counter": np.zeros(4, dtype=np.uint64),
            "key": np.array([key & mask64, (key >> 64) & mask64], dtype=np.uint64),
        },
        "buffer": np.zeros(4, dtype=np.uint64),
        "buffer_pos": 4,
        "has_uint32": 0,
        "uinteger": 0,
    }
    return bg


def stream_draw_gaussian(s: RandomStream, n: int) -> np.ndarray:
    if n < 0:
        raise ValueError("n must be non-negative")
    return s.generator().standard_normal(n)


@dataclass
class RoundRecord:
    round: int
    roster: frozenset[int]
    alpha: Mapping[int, int]
    dropouts: frozenset[int]
    global_model: ModelVector
    metrics: dict[str, float] = field(default_factory=dict)
    declined: frozenset[int] = frozenset()
    empty: bool = False

    def __post_init__(self):
        if self.round < 1:
            raise ValueError("round numbers start at 1")
        self.roster = frozenset(self.roster)
        self.dropouts = frozenset(self.dropouts)
        self.declined = frozenset(self.declined)
        if not self.dropouts <= self.roster:
            raise ValueError("dropouts must be a subset of the roster")
        selected = {k for k, a in self.alpha.items() if a}
        if not selected <= self.roster:
            raise ValueError("every selected client must be in the roster")


def sorted_ids(ids: Sequence[int] | Iterable[int]) -> list[int]:
    return sorted(int(i) for i in ids)
