"""Dense complex tensors and pairwise contraction kernels.

Three contraction routes share one ``ContractionSpec``:

* ``contract_pair_naive`` -- explicit loops, complex128 accumulation; the oracle.
* ``contract_pair_ttgt`` -- the smaller operand is permuted once into a matrix,
  the larger one is streamed through a small scratch block whose layout comes
  from a precomputed position array, and GEMM results are written straight
  into the requested output order.
* ``contract_pair_unfused`` -- permute A, permute B, GEMM, permute C.  Used as
  the baseline in benchmarks.

All kernels count 8 real flops per complex multiply-add; permutations are free.
"""

from __future__ import annotations

import enum
import itertools
import math
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import Sequence

import numba
import numpy as np

# Two streamed operand blocks plus an output tile of complex64 fit in 256 KB.
SCRATCH_ELEMS = 1 << 13
GEMM_BLOCK = 64
# K * Ns at or below this uses the streaming kernel instead of BLAS blocks.
SMALL_TILE = 256
# Smallest scratch block the fused kernel accepts (a 4x4 GEMM tile).
MIN_TILE = 16


class EngineError(ValueError):
    pass


class Precision(enum.Enum):
    SINGLE = "single"
    HALF_STORED = "half"


@dataclass
class DenseTensor:
    """Row-major complex tensor; logical value is ``data * 2**scale_exp``.

    ``data`` is a flat complex64 array for SINGLE and a flat float16 array of
    interleaved (re, im) pairs for HALF_STORED.
    """

    indices: tuple[int, ...]
    dims: tuple[int, ...]
    data: np.ndarray
    precision: Precision = Precision.SINGLE
    scale_exp: int = 0

    def __post_init__(self):
        self.indices = tuple(int(i) for i in self.indices)
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.indices) != len(self.dims):
            raise EngineError("indices and dims differ in length")
        if len(set(self.indices)) != len(self.indices):
            raise EngineError(f"repeated index in {self.indices}")
        if any(d < 1 for d in self.dims):
            raise EngineError("dims must be positive")
        size = math.prod(self.dims)
        expect = 2 * size if self.precision is Precision.HALF_STORED else size
        if self.data.ndim != 1 or self.data.size != expect:
            raise EngineError(f"data holds {self.data.size} values, expected {expect}")

    @classmethod
    def from_array(cls, indices: Sequence[int], arr: np.ndarray, scale_exp: int = 0) -> "DenseTensor":
        arr = np.asarray(arr)
        data = np.ascontiguousarray(arr, dtype=np.complex64).reshape(-1)
        return cls(tuple(indices), arr.shape, data, Precision.SINGLE, scale_exp)

    @property
    def rank(self) -> int:
        return len(self.dims)

    @property
    def size(self) -> int:
        return math.prod(self.dims)

    def array(self) -> np.ndarray:
        """Stored values (without the scale) as a shaped complex64 array."""
        if self.precision is Precision.HALF_STORED:
            # float32 pairs viewed as complex64 keep infinities intact
            return self.data.astype(np.float32).view(np.complex64).reshape(self.dims)
        return self.data.reshape(self.dims)

    def logical(self) -> np.ndarray:
        """True value in complex128, scale applied."""
        return np.ldexp(1.0, self.scale_exp) * self.array().astype(np.complex128)

    def axis(self, index_id: int) -> int:
        return self.indices.index(index_id)


class FlopCounter:
    """Monotone, thread-safe running flop total."""

    def __init__(self):
        self._total = 0
        self._lock = threading.Lock()

    def add(self, flops: int) -> None:
        if flops < 0:
            raise EngineError("flop increments are non-negative")
        with self._lock:
            self._total += int(flops)

    @property
    def total(self) -> int:
        return self._total


def flop_counter() -> FlopCounter:
    return FlopCounter()


@dataclass(frozen=True)
class ContractionSpec:
    """Pairing of axes between A and B.

    ``contracted`` pairs are summed.  ``batch`` pairs are shared but kept
    (a hyperedge that continues elsewhere); they appear once in the output
    under A's index id.  ``output_order`` lists the surviving index ids.
    """

    contracted: tuple[tuple[int, int], ...]
    output_order: tuple[int, ...]
    batch: tuple[tuple[int, int], ...] = field(default=())

    @classmethod
    def by_ids(
        cls, a_indices: Sequence[int], b_indices: Sequence[int], keep: Sequence[int] = (), output_order=None
    ) -> "ContractionSpec":
        """Build a spec from index ids: shared ids are summed unless listed in ``keep``."""
        a_indices, b_indices = tuple(a_indices), tuple(b_indices)
        keep = set(keep)
        contracted, batch = [], []
        for pa, ix in enumerate(a_indices):
            if ix in b_indices:
                (batch if ix in keep else contracted).append((pa, b_indices.index(ix)))
        if output_order is None:
            shared = set(a_indices) & set(b_indices)
            output_order = [i for i in a_indices if i not in shared or i in keep]
            output_order += [i for i in b_indices if i not in shared]
        return cls(tuple(contracted), tuple(output_order), tuple(batch))


@dataclass
class _Plan:
    a_con: list[int]
    b_con: list[int]
    a_bat: list[int]
    b_bat: list[int]
    a_free: list[int]
    b_free: list[int]
    out_ids: tuple[int, ...]
    out_dims: tuple[int, ...]
    k: int
    flops: int


def _plan(a: DenseTensor, b: DenseTensor, spec: ContractionSpec) -> _Plan:
    pairs = list(spec.contracted) + list(spec.batch)
    a_used = [p for p, _ in pairs]
    b_used = [q for _, q in pairs]
    if len(set(a_used)) != len(a_used) or len(set(b_used)) != len(b_used):
        raise EngineError("an axis is paired twice")
    for p, q in pairs:
        if not (0 <= p < a.rank and 0 <= q < b.rank):
            raise EngineError(f"axis pair {(p, q)} out of range")
        if a.dims[p] != b.dims[q]:
            raise EngineError(f"dim mismatch on pair {(p, q)}: {a.dims[p]} vs {b.dims[q]}")
    a_free = [p for p in range(a.rank) if p not in a_used]
    b_free = [q for q in range(b.rank) if q not in b_used]
    surviving = [a.indices[p] for p in a_free] + [a.indices[p] for p, _ in spec.batch] + [b.indices[q] for q in b_free]
    if len(set(surviving)) != len(surviving):
        raise EngineError("surviving index ids collide")
    if sorted(spec.output_order) != sorted(surviving):
        raise EngineError(f"output_order {spec.output_order} is not a permutation of {surviving}")
    dim_of = {a.indices[p]: a.dims[p] for p in range(a.rank)}
    dim_of.update({b.indices[q]: b.dims[q] for q in b_free})
    out_dims = tuple(dim_of[i] for i in spec.output_order)
    k = math.prod(a.dims[p] for p, _ in spec.contracted)
    return _Plan(
        a_con=[p for p, _ in spec.contracted],
        b_con=[q for _, q in spec.contracted],
        a_bat=[p for p, _ in spec.batch],
        b_bat=[q for _, q in spec.batch],
        a_free=a_free,
        b_free=b_free,
        out_ids=tuple(spec.output_order),
        out_dims=out_dims,
        k=k,
        flops=8 * math.prod(out_dims) * k,
    )


def _result(plan: _Plan, a: DenseTensor, b: DenseTensor, arr: np.ndarray, counter: FlopCounter | None) -> DenseTensor:
    if counter is not None:
        counter.add(plan.flops)
    data = np.ascontiguousarray(arr, dtype=np.complex64).reshape(-1)
    return DenseTensor(plan.out_ids, plan.out_dims, data, Precision.SINGLE, a.scale_exp + b.scale_exp)


def contraction_flops(a: DenseTensor, b: DenseTensor, spec: ContractionSpec) -> int:
    return _plan(a, b, spec).flops


# ---------------------------------------------------------------------------
# permutation


def permute(t: DenseTensor, perm: Sequence[int]) -> DenseTensor:
    perm = list(perm)
    if sorted(perm) != list(range(t.rank)):
        raise EngineError(f"{perm} is not a permutation of 0..{t.rank - 1}")
    if t.precision is Precision.HALF_STORED:
        arr = t.data.reshape(t.dims + (2,))
        data = np.ascontiguousarray(np.transpose(arr, perm + [t.rank])).reshape(-1)
    else:
        data = np.ascontiguousarray(np.transpose(t.data.reshape(t.dims), perm)).reshape(-1)
    return DenseTensor(
        tuple(t.indices[p] for p in perm), tuple(t.dims[p] for p in perm), data, t.precision, t.scale_exp
    )


def _strides(dims: Sequence[int]) -> list[int]:
    out = [1] * len(dims)
    for i in range(len(dims) - 2, -1, -1):
        out[i] = out[i + 1] * dims[i + 1]
    return out


def _positions(dims: Sequence[int], strides: Sequence[int]) -> np.ndarray:
    """Flat offsets of every assignment of ``dims`` (row-major) under ``strides``."""
    pos = np.zeros(1, dtype=np.int64)
    for d, s in zip(dims, strides):
        pos = (pos[:, None] + np.arange(d, dtype=np.int64)[None, :] * s).reshape(-1)
    return pos


# ---------------------------------------------------------------------------
# kernels


def gemm(a: np.ndarray, b: np.ndarray, counter: FlopCounter | None = None, block: int = GEMM_BLOCK) -> np.ndarray:
    """Blocked complex matrix product with float32 accumulation per block."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise EngineError(f"gemm shape mismatch {a.shape} x {b.shape}")
    m, k = a.shape
    n = b.shape[1]
    a = a.astype(np.complex64, copy=False)
    b = b.astype(np.complex64, copy=False)
    if counter is not None:
        counter.add(8 * m * n * k)
    if k <= 4 * block:
        return a @ b
    out = np.zeros((m, n), dtype=np.complex64)
    for k0 in range(0, k, 4 * block):
        out += a[:, k0 : k0 + 4 * block] @ b[k0 : k0 + 4 * block]
    return out


def _broadcast_to_output(arr: np.ndarray, ids: list[int], out_ids: tuple[int, ...]) -> np.ndarray:
    """View ``arr`` (axes labelled ``ids``) with one axis per output id, size 1 where absent."""
    present = [i for i in out_ids if i in ids]
    arr = np.transpose(arr, [ids.index(i) for i in present])
    return arr.reshape([arr.shape[present.index(i)] if i in present else 1 for i in out_ids])


def contract_pair_naive(
    a: DenseTensor, b: DenseTensor, spec: ContractionSpec, counter: FlopCounter | None = None
) -> DenseTensor:
    """Reference contraction: an explicit loop over contracted assignments,
    accumulating outer products in complex128."""
    plan = _plan(a, b, spec)
    av = a.array().astype(np.complex128)
    bv = b.array().astype(np.complex128)
    a_ids = [a.indices[p] for p in range(a.rank) if p not in plan.a_con]
    b_ids = []
    for q in range(b.rank):
        if q in plan.b_bat:
            b_ids.append(a.indices[plan.a_bat[plan.b_bat.index(q)]])
        elif q not in plan.b_con:
            b_ids.append(b.indices[q])
    out = np.zeros(plan.out_dims, dtype=np.complex128)
    for cv in itertools.product(*(range(a.dims[p]) for p in plan.a_con)):
        ai: list = [slice(None)] * a.rank
        bi: list = [slice(None)] * b.rank
        for (p, q), v in zip(spec.contracted, cv):
            ai[p] = v
            bi[q] = v
        out += _broadcast_to_output(av[tuple(ai)], a_ids, plan.out_ids) * _broadcast_to_output(
            bv[tuple(bi)], b_ids, plan.out_ids
        )
    return _result(plan, a, b, out, counter)


def contract_pair_unfused(
    a: DenseTensor, b: DenseTensor, spec: ContractionSpec, counter: FlopCounter | None = None
) -> DenseTensor:
    """Permute A, permute B, GEMM, permute C, as separate passes."""
    plan = _plan(a, b, spec)
    ap = permute(a, plan.a_bat + plan.a_free + plan.a_con)
    bp = permute(b, plan.b_bat + plan.b_con + plan.b_free)
    nb = math.prod(a.dims[p] for p in plan.a_bat)
    m = math.prod(a.dims[p] for p in plan.a_free)
    n = math.prod(b.dims[q] for q in plan.b_free)
    am = ap.array().reshape(nb, m, plan.k)
    bm = bp.array().reshape(nb, plan.k, n)
    cm = np.stack([gemm(am[i], bm[i]) for i in range(nb)])
    mid_ids = [a.indices[p] for p in plan.a_bat + plan.a_free] + [b.indices[q] for q in plan.b_free]
    mid_dims = [a.dims[p] for p in plan.a_bat + plan.a_free] + [b.dims[q] for q in plan.b_free]
    c = DenseTensor.from_array(mid_ids, cm.reshape(mid_dims))
    c = permute(c, [mid_ids.index(i) for i in plan.out_ids])
    return _result(plan, a, b, c.array(), counter)



@numba.njit(cache=True, nogil=True, fastmath=True, error_model="numpy")
def _stream_kernel(flat, outer_in, outer_out, inner_pos, con_pos, inner_out, smat, small_out, out):
    # Single pass over the big operand for one group of outer assignments at a
    # time: the block is read through the position arrays, multiplied by the
    # small matrix in a scratch tile, and the tile is written at its output
    # positions.  Real arithmetic on interleaved pairs.
    ni = inner_pos.size
    k = con_pos.size
    ns = smat.shape[1]
    fr = flat.view(np.float32)
    orr = out.view(np.float32)
    xr = np.empty(ni, np.float32)
    xi = np.empty(ni, np.float32)
    accr = np.empty((ns, ni), np.float32)
    acci = np.empty((ns, ni), np.float32)
    for o in range(outer_in.size):
        bi = outer_in[o]
        bo = outer_out[o]
        accr[:] = 0
        acci[:] = 0
        for c in range(k):
            base = bi + con_pos[c]
            for i in range(ni):
                p = 2 * (base + inner_pos[i])
                xr[i] = fr[p]
                xi[i] = fr[p + 1]
            for j in range(ns):
                sr = smat[c, j].real
                si = smat[c, j].imag
                ar = accr[j]
                ai = acci[j]
                for i in range(ni):
                    ar[i] += xr[i] * sr - xi[i] * si
                    ai[i] += xr[i] * si + xi[i] * sr
        for i in range(ni):
            ob = bo + inner_out[i]
            for j in range(ns):
                q = 2 * (ob + small_out[j])
                orr[q] = accr[j, i]
                orr[q + 1] = acci[j, i]


def contract_pair_ttgt(
    a: DenseTensor,
    b: DenseTensor,
    spec: ContractionSpec,
    counter: FlopCounter | None = None,
    scratch_elems: int = SCRATCH_ELEMS,
) -> DenseTensor:
    """Fused permute + GEMM contraction.

    The smaller operand ``S`` is permuted once into a ``(K, Ns)`` matrix.  The
    larger operand ``L`` is never permuted as a whole: its free axes are split
    into an inner group (the trailing ones that fit in the scratch block
    alongside all contracted axes) and an outer group.  A position array maps
    the inner block to ``(inner_free, K)`` order; each group of outer
    assignments is gathered through it, multiplied, and written into the
    output buffer at precomputed positions in ``output_order``.  When ``K``
    alone exceeds the scratch block it is consumed in chunks and the partial
    products are accumulated.
    """
    plan = _plan(a, b, spec)
    if scratch_elems < MIN_TILE:
        raise EngineError(f"scratch block of {scratch_elems} elements is below one tile ({MIN_TILE})")
    swap = b.size > a.size
    big, small = (b, a) if swap else (a, b)
    if swap:
        big_con, small_con = plan.b_con, plan.a_con
        big_bat, small_bat = plan.b_bat, plan.a_bat
        big_free, small_free = plan.b_free, plan.a_free
    else:
        big_con, small_con = plan.a_con, plan.b_con
        big_bat, small_bat = plan.a_bat, plan.b_bat
        big_free, small_free = plan.a_free, plan.b_free

    # ids as they appear in the output (batch axes carry A's id)
    def out_id(t: DenseTensor, p: int, is_a: bool) -> int:
        if not is_a and p in plan.b_bat:
            return a.indices[plan.a_bat[plan.b_bat.index(p)]]
        return t.indices[p]

    out_strides = dict(zip(plan.out_ids, _strides(plan.out_dims)))

    sm = small.array()
    nb = math.prod(small.dims[p] for p in small_bat)
    ns = math.prod(small.dims[p] for p in small_free)
    small_mat = np.ascontiguousarray(np.transpose(sm, small_bat + small_con + small_free)).reshape(nb, plan.k, ns)
    small_out = _positions(
        [small.dims[p] for p in small_free], [out_strides[out_id(small, p, swap)] for p in small_free]
    )

    # split the big operand's free axes into outer / inner groups
    big_strides = _strides(big.dims)
    inner: list[int] = []
    kc = min(plan.k, scratch_elems)
    block = kc
    for p in reversed(big_free):
        if block * big.dims[p] > scratch_elems:
            break
        inner.insert(0, p)
        block *= big.dims[p]
    outer = [p for p in big_free if p not in inner]
    inner_pos = _positions([big.dims[p] for p in inner], [big_strides[p] for p in inner])
    con_pos = _positions([big.dims[p] for p in big_con], [big_strides[p] for p in big_con])
    ni = math.prod(big.dims[p] for p in inner)
    inner_out = _positions([big.dims[p] for p in inner], [out_strides[out_id(big, p, not swap)] for p in inner])
    tile_out = (inner_out[:, None] + small_out[None, :]).reshape(-1)

    outer_dims = [big.dims[p] for p in outer]
    outer_in = _positions(outer_dims, [big_strides[p] for p in outer])
    outer_out = _positions(outer_dims, [out_strides[out_id(big, p, not swap)] for p in outer])
    group = max(1, scratch_elems // block)

    bat_dims = [big.dims[p] for p in big_bat]
    bat_in_big = _positions(bat_dims, [big_strides[p] for p in big_bat])
    bat_out = _positions(bat_dims, [out_strides[out_id(big, p, not swap)] for p in big_bat])

    flat = big.array().reshape(-1)
    out = np.empty(math.prod(plan.out_dims), dtype=np.complex64)
    if plan.k * ns <= SMALL_TILE and kc == plan.k:
        for bi in range(nb):
            _stream_kernel(
                flat, outer_in + bat_in_big[bi], outer_out + bat_out[bi], inner_pos, con_pos, inner_out,
                np.ascontiguousarray(small_mat[bi]), small_out, out,
            )
        return _result(plan, a, b, out.reshape(plan.out_dims), counter)
    contiguous = np.array_equal(tile_out, np.arange(tile_out.size)) and nb == 1
    chunks = [(k0, min(k0 + kc, plan.k)) for k0 in range(0, plan.k, kc)]
    in_chunks = [(inner_pos[:, None] + con_pos[None, k0:k1]).reshape(-1) for k0, k1 in chunks]
    for bi in range(nb):
        smat = small_mat[bi]
        for g0 in range(0, outer_in.size, group):
            bases = outer_in[g0 : g0 + group] + bat_in_big[bi]
            res = None
            for (k0, k1), inner_in in zip(chunks, in_chunks):
                blk = np.take(flat, (bases[:, None] + inner_in[None, :]).reshape(-1))
                part = gemm(blk.reshape(bases.size * ni, k1 - k0), smat[k0:k1])
                res = part if res is None else res + part
            obases = outer_out[g0 : g0 + group] + bat_out[bi]
            if contiguous and np.all(np.diff(obases) == tile_out.size):
                start = int(obases[0])
                out[start : start + res.size] = res.reshape(-1)
            else:
                out[(obases[:, None] + tile_out[None, :]).reshape(-1)] = res.reshape(-1)
    return _result(plan, a, b, out.reshape(plan.out_dims), counter)


# ---------------------------------------------------------------------------
# benchmark suite: a rank-20 dim-2 operand against a rank-4 one


def imbalanced_suite(seed: int = 1, cases: int = 6, big_rank: int = 20) -> list[tuple[DenseTensor, DenseTensor, ContractionSpec]]:
    """Imbalanced cases, half with natural and half with shuffled output order."""
    rng = np.random.default_rng(seed)

    def rand(ids, dims):
        return DenseTensor.from_array(ids, (rng.standard_normal(dims) + 1j * rng.standard_normal(dims)).astype(np.complex64))

    out = []
    for case in range(cases):
        perm = rng.permutation(big_rank)
        a = rand(list(range(big_rank)), [2] * big_rank)
        b = rand([int(perm[0]), int(perm[1]), 100, 101], [2] * 4)
        spec = ContractionSpec.by_ids(a.indices, b.indices)
        if case % 2:
            spec = ContractionSpec(spec.contracted, tuple(rng.permutation(spec.output_order).tolist()), spec.batch)
        out.append((a, b, spec))
    return out


def bench_fusion(cases, repeats: int = 5) -> dict:
    """Best-of-``repeats`` wall time of the fused kernel and the unfused baseline."""

    def best(fn, a, b, spec):
        ts = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn(a, b, spec)
            ts.append(time.perf_counter() - t0)
        return min(ts)

    for a, b, spec in cases[:1]:  # compile and warm caches
        contract_pair_ttgt(a, b, spec)
        contract_pair_unfused(a, b, spec)
    fused = sum(best(contract_pair_ttgt, *c) for c in cases)
    unfused = sum(best(contract_pair_unfused, *c) for c in cases)
    return {"cases": len(cases), "fused_s": fused, "unfused_s": unfused, "ratio": fused / unfused}


# ---------------------------------------------------------------------------
# dump format: magic, rank, precision, scale_exp, dims, then float32 pairs

_MAGIC = b"RQTD"


def dump_tensor(t: DenseTensor) -> bytes:
    head = _MAGIC + struct.pack("<IIi", t.rank, 1 if t.precision is Precision.HALF_STORED else 0, t.scale_exp)
    head += struct.pack(f"<{t.rank}q", *t.indices) + struct.pack(f"<{t.rank}Q", *t.dims)
    body = t.array().astype("<c8").tobytes()
    return head + body


def load_tensor(blob: bytes) -> DenseTensor:
    if blob[:4] != _MAGIC:
        raise EngineError("not a tensor dump")
    rank, prec, scale = struct.unpack_from("<IIi", blob, 4)
    off = 16
    indices = struct.unpack_from(f"<{rank}q", blob, off)
    off += 8 * rank
    dims = struct.unpack_from(f"<{rank}Q", blob, off)
    off += 8 * rank
    data = np.frombuffer(blob, dtype="<c8", offset=off).astype(np.complex64)
    t = DenseTensor(indices, dims, data, Precision.SINGLE, scale)
    if prec:
        pairs = np.stack([data.real, data.imag], axis=1).astype(np.float16).reshape(-1)
        t = DenseTensor(indices, dims, pairs, Precision.HALF_STORED, scale)
    return t
