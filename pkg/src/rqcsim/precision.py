"""Half-precision storage emulation, power-of-two scaling and path filtering.

Values are stored as IEEE binary16 (numpy ``float16``, round-to-nearest-even)
and computed in single precision.  A complex element underflows when it is
nonzero before rounding and exactly zero after; it overflows when it is
finite before and has an infinite part after.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .engine import DenseTensor, Precision

HALF_MAX = 65504.0
HALF_MIN_SUBNORMAL = 2.0**-24


class PrecisionError(ValueError):
    pass


def half_bits(x: float) -> int:
    """The binary16 bit pattern of ``x`` after rounding."""
    return int(np.array(x, dtype=np.float16).view(np.uint16))


def half_from_bits(bits: int) -> float:
    return float(np.array(bits, dtype=np.uint16).view(np.float16))


@dataclass(frozen=True)
class Flags:
    underflow_hit: bool = False
    overflow_hit: bool = False

    def __or__(self, other: "Flags") -> "Flags":
        return Flags(self.underflow_hit or other.underflow_hit, self.overflow_hit or other.overflow_hit)

    @property
    def any(self) -> bool:
        return self.underflow_hit or self.overflow_hit


@dataclass
class ScalingState:
    scale_exp: int = 0
    max_abs_seen: float = 0.0


@dataclass
class PathResult:
    value: np.ndarray | complex
    scale_exp: int = 0
    flags: Flags = field(default_factory=Flags)

    def logical(self):
        return np.ldexp(1.0, self.scale_exp) * np.asarray(self.value, dtype=np.complex128)


def round_to_half(t: DenseTensor) -> tuple[DenseTensor, Flags]:
    z = t.array()
    pairs = np.stack([z.real, z.imag], axis=-1).reshape(-1).astype(np.float32)
    with np.errstate(over="ignore"):
        half = pairs.astype(np.float16)
    before = pairs.reshape(-1, 2)
    after = half.reshape(-1, 2)
    nonzero = np.any(before != 0, axis=1)
    underflow = bool(np.any(nonzero & np.all(after == 0, axis=1)))
    finite = np.all(np.isfinite(before), axis=1)
    overflow = bool(np.any(finite & np.any(np.isinf(after), axis=1)))
    out = DenseTensor(t.indices, t.dims, half, Precision.HALF_STORED, t.scale_exp)
    return out, Flags(underflow, overflow)


def adaptive_scale(t: DenseTensor, state: ScalingState | None = None) -> DenseTensor:
    """Rescale by a power of two so the largest magnitude lies in [1, 2)."""
    z = t.array()
    peak = float(np.max(np.abs(z))) if z.size else 0.0
    if state is not None:
        state.max_abs_seen = max(state.max_abs_seen, peak)
    if peak == 0.0 or not math.isfinite(peak):
        return t
    e = math.floor(math.log2(peak))
    scaled = np.empty(z.shape, dtype=np.complex64)
    scaled.real = np.ldexp(z.real, -e)
    scaled.imag = np.ldexp(z.imag, -e)
    out = DenseTensor.from_array(t.indices, scaled, t.scale_exp + e)
    if state is not None:
        state.scale_exp = out.scale_exp
    return out


def flush_noise(t: DenseTensor, rel: float = 2.0**-24) -> DenseTensor:
    """Zero elements below ``rel`` times the tensor peak.

    Such values sit under the single-precision resolution of the tensor's
    largest entries (typically cancellation residue of exact zeros), so
    dropping them loses nothing the single-precision reference holds.
    """
    z = t.array()
    if not z.size:
        return t
    peak = float(np.max(np.abs(z)))
    small = np.abs(z) < rel * peak
    if not small.any():
        return t
    return DenseTensor(t.indices, t.dims, np.where(small, 0, z).astype(np.complex64).reshape(-1), t.precision, t.scale_exp)


def half_store(t: DenseTensor, flush: bool = True) -> tuple[DenseTensor, Flags]:
    """Scale, optionally flush sub-resolution noise, then store in binary16."""
    t = adaptive_scale(t)
    if flush:
        t = flush_noise(t)
    return round_to_half(t)


def filter_paths(results: Sequence[PathResult]) -> tuple[list[PathResult], float]:
    if not results:
        raise PrecisionError("no path results")
    kept = [r for r in results if not r.flags.any]
    if not kept:
        raise PrecisionError("every path was flagged")
    return kept, (len(results) - len(kept)) / len(results)


def filtered_estimate(results: Sequence[PathResult]):
    """Sum of unflagged paths rescaled by total/kept (equal-contribution assumption)."""
    kept, _ = filter_paths(results)
    total = sum(r.logical() for r in kept)
    return total * (len(results) / len(kept))


class BlockAccumulator:
    """Per-block partial sums of mixed results and their single references."""

    def __init__(self, block_size: int = 90):
        if block_size < 1:
            raise PrecisionError("block_size must be positive")
        self.block_size = block_size
        self._mixed: list = []
        self._single: list = []
        self._flagged: list[bool] = []

    def add(self, mixed: PathResult | complex | np.ndarray, single=None) -> None:
        if isinstance(mixed, PathResult):
            self._flagged.append(mixed.flags.any)
            mixed = mixed.logical()
        else:
            self._flagged.append(False)
        self._mixed.append(np.asarray(mixed, dtype=np.complex128))
        self._single.append(None if single is None else np.asarray(single, dtype=np.complex128))

    def __len__(self) -> int:
        return len(self._mixed)

    @property
    def num_blocks(self) -> int:
        return len(self._mixed) // self.block_size

    @property
    def discarded_fraction(self) -> float:
        return sum(self._flagged) / len(self._flagged) if self._flagged else 0.0

    def block_sums(self) -> tuple[list, list, list[int]]:
        """Per complete block: mixed sum over unflagged paths, single sum, kept count."""
        mixed, single, kept = [], [], []
        for k in range(self.num_blocks):
            sl = slice(k * self.block_size, (k + 1) * self.block_size)
            if any(s is None for s in self._single[sl]):
                raise PrecisionError("reference sums are missing for some paths")
            m = [v for v, f in zip(self._mixed[sl], self._flagged[sl]) if not f]
            mixed.append(sum(m) if m else np.zeros_like(self._single[sl][0]))
            single.append(sum(self._single[sl]))
            kept.append(len(m))
        return mixed, single, kept


def error_curve(acc: BlockAccumulator, reference: str = "prefix") -> list[float]:
    """Relative error after aggregating the first k blocks, k = 1..num_blocks.

    ``reference="prefix"`` compares the mixed sum of the first k blocks with
    the single sum of the same blocks.  ``reference="total"`` compares the
    running estimate -- kept-path sum rescaled to all paths, as if the first
    k blocks were a fraction of the full computation -- with the single sum
    over every complete block.  Flagged paths are dropped and compensated by
    the kept-fraction rescale in both modes.
    """
    if reference not in ("prefix", "total"):
        raise PrecisionError(f"unknown reference mode {reference!r}")
    mixed, single, kept = acc.block_sums()
    if not mixed:
        return []
    full = sum(single)
    out = []
    m_run = np.zeros_like(mixed[0])
    s_run = np.zeros_like(single[0])
    kept_run = 0
    for k in range(len(mixed)):
        m_run = m_run + mixed[k]
        s_run = s_run + single[k]
        kept_run += kept[k]
        paths = (k + 1) * acc.block_size
        if kept_run == 0:
            raise PrecisionError("every path in the aggregated blocks was flagged")
        est = m_run * (paths / kept_run)
        if reference == "total":
            est = est * (len(mixed) / (k + 1))
            ref = full
        else:
            ref = s_run
        denom = float(np.linalg.norm(np.ravel(ref)))
        if denom == 0.0:
            raise PrecisionError("reference sum has zero magnitude")
        out.append(float(np.linalg.norm(np.ravel(est - ref))) / denom)
    return out


def curve_slope(curve: Sequence[float]) -> float:
    """Least-squares slope of the curve against block index."""
    if len(curve) < 2:
        return 0.0
    return float(np.polyfit(np.arange(len(curve)), np.asarray(curve), 1)[0])


def write_error_curve_csv(curve: Sequence[float], path: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["block_index", "relative_error"])
        for k, e in enumerate(curve, start=1):
            w.writerow([k, repr(float(e))])
