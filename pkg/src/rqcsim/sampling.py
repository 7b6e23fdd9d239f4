"""Amplitude batches, frugal rejection sampling and statistical checks."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import stats

from .circuit import Circuit
from .executor import RunConfig, execute
from .pathopt import ContractionTree, SlicingPlan, anneal_path, general_slicing, greedy_path
from .tensornet import build_network, expand_bits, simplify

MAX_OPEN = 12
ENVELOPE = 10.0


class SamplingError(ValueError):
    pass


@dataclass
class AmplitudeBatch:
    """Amplitudes over all assignments of the open qubits.

    Entry ``j`` sets open qubit ``open_qubits[k]`` to bit ``k`` of ``j``.
    """

    open_qubits: tuple[int, ...]
    fixed_bits: str
    amplitudes: np.ndarray
    num_qubits: int
    circuit_id: str = ""
    path_id: str = ""
    flops: int = 0

    def __post_init__(self):
        if self.amplitudes.size != 1 << len(self.open_qubits):
            raise SamplingError("batch length must be 2**len(open_qubits)")

    def bitstring(self, j: int) -> str:
        bits = []
        fixed = iter(self.fixed_bits)
        pos = {q: k for k, q in enumerate(self.open_qubits)}
        for q in range(self.num_qubits):
            bits.append(str(j >> pos[q] & 1) if q in pos else next(fixed))
        return "".join(bits)


@dataclass
class SampleSet:
    bitstrings: list[str]
    method: str
    fidelity_estimate: float | None = None
    acceptance_rate: float | None = None
    candidates_used: int = 0


@dataclass
class XebReport:
    n: int
    num_samples: int
    f_xeb: float
    sigma: float


@dataclass
class PorterThomasReport:
    edges: np.ndarray
    counts: np.ndarray
    expected: np.ndarray
    chi2: float
    dof: int
    p_value: float
    extra: dict = field(default_factory=dict)


def _plan_for(net, path: str, seed: int, budget: int, mem_cap_log2: float | None) -> tuple[ContractionTree, SlicingPlan]:
    if path == "greedy":
        tree = greedy_path(net)
        plan = general_slicing(net, tree, mem_cap_log2) if mem_cap_log2 is not None else SlicingPlan()
    elif path == "anneal":
        tree, plan, _ = anneal_path(net, budget, seed=seed, log2_mem_cap=mem_cap_log2)
    else:
        raise SamplingError(f"unknown path method {path!r}")
    return tree, plan


def batch_network(circuit: Circuit, fixed_bits: str, open_qubits: Sequence[int], simplified: bool = True):
    net = build_network(circuit, fixed_bits, open_qubits)
    return simplify(net) if simplified else net


def compute_batch(
    circuit: Circuit,
    fixed_bits: str,
    open_qubits: Sequence[int],
    config: RunConfig | None = None,
    path: str = "greedy",
    budget: int = 200,
    seed: int = 0,
) -> AmplitudeBatch:
    open_qubits = tuple(open_qubits)
    if len(open_qubits) > MAX_OPEN:
        raise SamplingError(f"at most {MAX_OPEN} open qubits")
    config = config or RunConfig()
    net = batch_network(circuit, fixed_bits, open_qubits)
    tree, plan = _plan_for(net, path, seed, budget, config.memory_cap_log2)
    res = execute(net, tree, plan, config)
    return to_batch(circuit, fixed_bits, open_qubits, res.amplitudes, path, res.flops)


def to_batch(
    circuit: Circuit, fixed_bits: str, open_qubits: Sequence[int], arr: np.ndarray, path_id: str = "", flops: int = 0
) -> AmplitudeBatch:
    """Wrap an executor result whose axes follow ``open_qubits``."""
    open_qubits = tuple(open_qubits)
    arr = np.asarray(arr)
    flat = np.transpose(arr, list(range(arr.ndim))[::-1]).reshape(-1) if arr.ndim else arr.reshape(1)
    fixed, _ = expand_bits(circuit.num_qubits, fixed_bits, open_qubits)
    canonical = "".join(str(fixed[q]) for q in sorted(fixed))
    return AmplitudeBatch(
        open_qubits, canonical, flat.astype(np.complex128), circuit.num_qubits, circuit.digest(), path_id, flops
    )


def corner_block(rows: int, cols: int, k: int) -> list[int]:
    """``k`` qubits packed into the bottom-right corner, row by row from the end."""
    if not 0 <= k <= rows * cols:
        raise SamplingError("k out of range")
    side = max(1, math.ceil(math.sqrt(k)))
    out = []
    for r in range(rows - 1, -1, -1):
        for c in range(cols - min(side, cols), cols):
            if len(out) < k:
                out.append(r * cols + c)
    for q in range(rows * cols - 1, -1, -1):
        if len(out) < k and q not in out:
            out.append(q)
    return sorted(out)


def batch_overhead(
    circuit: Circuit,
    open_qubits: Sequence[int],
    seed: int = 0,
    budget: int = 500,
    restarts: int = 4,
) -> dict:
    """Analytic flops of a 2^k batch versus one amplitude with the same fixed bits.

    Both networks get the same search effort: the best of ``restarts``
    annealing runs.
    """
    n = circuit.num_qubits
    rng = np.random.default_rng(seed)
    fixed = "".join(rng.choice(["0", "1"], size=n - len(open_qubits)))
    rest = [q for q in range(n) if q not in open_qubits]
    single_bits = dict(zip(rest, fixed))
    single_bits.update({q: "0" for q in open_qubits})
    single = batch_network(circuit, "".join(single_bits[q] for q in range(n)), ())
    batch = batch_network(circuit, fixed, open_qubits)

    def best(net):
        return min(anneal_path(net, budget, seed=seed + r)[2].total_flops for r in range(restarts))

    fs, fb = best(single), best(batch)
    return {"k": len(open_qubits), "single_flops": fs, "batch_flops": fb, "ratio": fb / fs}


def frugal_rejection_sample(
    batches: Iterable[AmplitudeBatch], M: int, seed: int, c: float = ENVELOPE
) -> SampleSet:
    """Accept each candidate string with probability min(1, |a|^2 2^n / c)."""
    if M < 0:
        raise SamplingError("M must be non-negative")
    rng = np.random.default_rng(seed)
    out: list[str] = []
    used = 0
    if M == 0:
        return SampleSet([], "frugal", None, None, 0)
    for batch in batches:
        x = np.abs(batch.amplitudes) ** 2 * 2.0**batch.num_qubits
        u = rng.random(x.size)
        accept = u < np.minimum(1.0, x / c)
        for j in range(x.size):
            used += 1
            if accept[j]:
                out.append(batch.bitstring(j))
                if len(out) == M:
                    return SampleSet(out, "frugal", None, len(out) / used, used)
    raise SamplingError(f"amplitude stream exhausted after {used} candidates with {len(out)} of {M} accepted")


def exact_sample(probs: np.ndarray, M: int, seed: int) -> SampleSet:
    n = int(round(math.log2(probs.size)))
    rng = np.random.default_rng(seed)
    idx = rng.choice(probs.size, size=M, p=probs / probs.sum())
    return SampleSet([_bits(int(i), n) for i in idx], "exact")


def uniform_sample(n: int, M: int, seed: int) -> SampleSet:
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, 1 << n, size=M)
    return SampleSet([_bits(int(i), n) for i in idx], "uniform")


def _bits(index: int, n: int) -> str:
    return "".join("1" if index >> q & 1 else "0" for q in range(n))


def _index(bits: str) -> int:
    return sum(1 << q for q, b in enumerate(bits) if b == "1")


def xeb(samples: SampleSet | Sequence[str], prob_oracle: Callable[[str], float] | np.ndarray, n: int) -> XebReport:
    strings = samples.bitstrings if isinstance(samples, SampleSet) else list(samples)
    if not strings:
        raise SamplingError("no samples")
    if isinstance(prob_oracle, np.ndarray):
        p = prob_oracle[[_index(s) for s in strings]]
    else:
        p = np.array([prob_oracle(s) for s in strings], dtype=float)
    x = p * 2.0**n
    m = len(strings)
    sigma = float(np.std(x, ddof=1) / math.sqrt(m)) if m > 1 else float("inf")
    report = XebReport(n, m, float(np.mean(x) - 1.0), sigma)
    if isinstance(samples, SampleSet):
        samples.fidelity_estimate = report.f_xeb
    return report


def porter_thomas_check(probs: np.ndarray, bins: int = 20, csv_path: str | None = None) -> PorterThomasReport:
    """Chi-square of x = 2^n p against Exp(1), over equal-probability bins."""
    probs = np.asarray(probs, dtype=float)
    if abs(probs.sum() - 1.0) > 1e-6:
        raise SamplingError(f"probabilities sum to {probs.sum()}, not 1")
    if bins < 20:
        raise SamplingError("use at least 20 bins")
    x = probs * probs.size
    q = np.arange(bins + 1) / bins
    edges = -np.log1p(-q[:-1])
    edges = np.append(edges, np.inf)
    counts, _ = np.histogram(x, bins=edges)
    expected = np.full(bins, probs.size / bins)
    chi2 = float(np.sum((counts - expected) ** 2 / expected))
    dof = bins - 1
    rep = PorterThomasReport(edges, counts, expected, chi2, dof, float(stats.chi2.sf(chi2, dof)))
    if csv_path:
        write_histogram_csv(rep, csv_path)
    return rep


def write_histogram_csv(rep: PorterThomasReport, path: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "count", "expected"])
        for k in range(len(rep.counts)):
            w.writerow([repr(float(rep.edges[k])), repr(float(rep.edges[k + 1])), int(rep.counts[k]), repr(float(rep.expected[k]))])


def write_samples(samples: SampleSet, path: str, circuit_id: str = "") -> None:
    with open(path, "w") as fh:
        fh.write(f"# circuit {circuit_id} method {samples.method} f_xeb {samples.fidelity_estimate}\n")
        for s in samples.bitstrings:
            fh.write(s + "\n")


def read_samples(path: str) -> list[str]:
    with open(path) as fh:
        return [line.strip() for line in fh if line.strip() and not line.startswith("#")]
