"""Fixed-point encoding over Z_{2^64} and pairwise additive masking.

For every pair ``i < j`` in a round's roster both clients expand the same
pseudorandom vector from their shared seed; ``i`` adds it and ``j`` subtracts
it, so the masks cancel exactly in the modular sum while each individual
masked vector looks uniformly random.  Arithmetic relies on numpy's uint64
wraparound.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import RandomStream
from .errors import EncodingOverflow, ProtocolError, RoundAbort

logger = logging.getLogger(__name__)

DEFAULT_FRAC_BITS = 24
_ENCODE_LIMIT = float(2**62)


@dataclass(frozen=True, eq=False)
class FieldVector:
    values: np.ndarray
    frac_bits: int = DEFAULT_FRAC_BITS

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.uint64, copy=True).reshape(-1)
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    @property
    def scale(self) -> float:
        return float(2**self.frac_bits)

    def __len__(self) -> int:
        return self.values.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, FieldVector):
            return NotImplemented
        return self.frac_bits == other.frac_bits and np.array_equal(self.values, other.values)

    def __add__(self, other: "FieldVector") -> "FieldVector":
        _check_compatible(self, other)
        return FieldVector(self.values + other.values, self.frac_bits)


def _check_compatible(a: FieldVector, b: FieldVector) -> None:
    if a.frac_bits != b.frac_bits or len(a) != len(b):
        raise ProtocolError("field vectors differ in length or scale")


def encode_fixed(v, frac_bits: int = DEFAULT_FRAC_BITS) -> FieldVector:
    """``round(v * 2^f) mod 2^64`` with negatives in two's complement."""
    scaled = np.asarray(v, dtype=np.float64).reshape(-1) * float(2**frac_bits)
    if not np.all(np.isfinite(scaled)) or np.any(np.abs(scaled) >= _ENCODE_LIMIT):
        raise EncodingOverflow(f"value too large for {frac_bits} fractional bits")
    return FieldVector(np.rint(scaled).astype(np.int64).view(np.uint64), frac_bits)


def decode_fixed(fv: FieldVector, max_abs_hint: float | None = None) -> np.ndarray:
    """Map residues to the signed range ``[-2^63, 2^63)`` and unscale."""
    out = fv.values.view(np.int64).astype(np.float64) / fv.scale
    if max_abs_hint is not None and out.size and np.max(np.abs(out)) > max_abs_hint:
        logger.warning("decoded magnitude exceeds hint %.3g; aggregate may have wrapped", max_abs_hint)
    return out


@dataclass(frozen=True)
class PairwiseSeeds:
    """Shared 64-bit seeds for unordered client pairs, provisioned by the harness."""

    seeds: Mapping[frozenset, int] = field(default_factory=dict)

    def get(self, i: int, j: int) -> int:
        try:
            return self.seeds[frozenset((i, j))]
        except KeyError:
            raise ProtocolError(f"no pairwise seed for clients {i} and {j}") from None

    @classmethod
    def provision(
        cls, roster: Iterable[int], master_seed: int, round_: int, attempt: int = 0
    ) -> "PairwiseSeeds":
        """Fresh seeds per (round, attempt) so a retried round never reuses masks."""
        ids = sorted(roster)
        pairs = [(i, j) for a, i in enumerate(ids) for j in ids[a + 1 :]]
        # one word per pair, handed out in ascending (i, j) order
        words = RandomStream(master_seed, f"pairseed:{round_}:{attempt}").raw_uint64(len(pairs))
        return cls({frozenset(pair): int(w) for pair, w in zip(pairs, words)})


def pair_mask(seed: int, round_: int, i: int, j: int, n: int) -> np.ndarray:
    lo, hi = min(i, j), max(i, j)
    return RandomStream(seed, f"mask:{round_}:{lo}:{hi}").raw_uint64(n)


def mask(
    update: FieldVector,
    self_id: int,
    roster: Sequence[int],
    seeds: PairwiseSeeds,
    round_: int,
) -> FieldVector:
    if self_id not in roster:
        raise ProtocolError(f"client {self_id} is not in the masking roster")
    out = update.values.copy()
    n = out.size
    for j in sorted(roster):
        if j == self_id:
            continue
        m = pair_mask(seeds.get(self_id, j), round_, self_id, j, n)
        if j > self_id:
            out += m
        else:
            out -= m
    return FieldVector(out, update.frac_bits)


@dataclass(frozen=True)
class MaskedUpdate:
    client_id: int
    round: int
    vector: FieldVector
    weight: float
    absent: tuple = ()

    def __post_init__(self):
        if not self.weight > 0:
            raise ProtocolError("masked update weight must be positive")


def aggregate_unmask(masked: Sequence[MaskedUpdate], roster: Iterable[int]) -> FieldVector:
    """Modular sum of the roster's masked vectors, in ascending client order.

    Raises :class:`RoundAbort` if any roster member is missing, since its
    pairwise masks would otherwise remain in the sum.
    """
    roster = set(roster)
    by_id = {}
    for mu in masked:
        if mu.client_id not in roster:
            raise ProtocolError(f"update from client {mu.client_id} outside the roster")
        if mu.client_id in by_id:
            raise ProtocolError(f"duplicate update from client {mu.client_id}")
        by_id[mu.client_id] = mu
    missing = roster - set(by_id)
    if missing:
        raise RoundAbort(sorted(missing))
    if not by_id:
        raise ProtocolError("nothing to aggregate")
    ids = sorted(by_id)
    total = by_id[ids[0]].vector.values.copy()
    for k in ids[1:]:
        _check_compatible(by_id[ids[0]].vector, by_id[k].vector)
        total += by_id[k].vector.values
    return FieldVector(total, by_id[ids[0]].vector.frac_bits)


def weighted_mean(masked: Sequence[MaskedUpdate], roster: Iterable[int]) -> np.ndarray:
    """Decode the unmasked sum of pre-weighted updates and divide by the total weight."""
    total = aggregate_unmask(masked, roster)
    weight = sum(mu.weight for mu in sorted(masked, key=lambda m: m.client_id))
    return decode_fixed(total) / weight
