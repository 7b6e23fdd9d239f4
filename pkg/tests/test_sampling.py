import csv
import math

import numpy as np
import pytest
from scipy import stats

from rqcsim.circuit import generate_rqc
from rqcsim.oracle import all_probs, amplitude, simulate
from rqcsim.sampling import (
    ENVELOPE,
    AmplitudeBatch,
    SamplingError,
    SampleSet,
    batch_overhead,
    compute_batch,
    corner_block,
    exact_sample,
    frugal_rejection_sample,
    porter_thomas_check,
    read_samples,
    uniform_sample,
    write_samples,
    xeb,
)


def _index(bits):
    return sum(1 << q for q, b in enumerate(bits) if b == "1")


def oracle_batches(amps, n, open_qubits, seed):
    """Endless stream of batches cut from a state vector, fixed bits uniformly random."""
    rng = np.random.default_rng(seed)
    rest = [q for q in range(n) if q not in open_qubits]
    k = len(open_qubits)
    while True:
        fixed = rng.integers(0, 2, len(rest))
        base = sum(int(b) << q for q, b in zip(rest, fixed))
        idx = [base + sum(((j >> t) & 1) << q for t, q in enumerate(open_qubits)) for j in range(1 << k)]
        yield AmplitudeBatch(tuple(open_qubits), "".join(map(str, fixed)), amps[idx], n)


def test_empty_open_set():
    c = generate_rqc(3, 3, 6, 1, "cz")
    sv = simulate(c)
    bits = "011010011"
    b = compute_batch(c, bits, ())
    assert b.amplitudes.shape == (1,) and b.bitstring(0) == bits
    assert abs(b.amplitudes[0] - amplitude(sv, bits)) <= 1e-6 * abs(amplitude(sv, bits))


@pytest.mark.parametrize("style", ["cz", "fsim"])
def test_all_open_is_state_vector(style):
    c = generate_rqc(3, 3, 6, 2, style)
    sv = simulate(c)
    b = compute_batch(c, "", range(9))
    want = np.array([amplitude(sv, b.bitstring(j)) for j in range(512)])
    assert np.max(np.abs(b.amplitudes - want)) <= 1e-6 * np.max(np.abs(want))
    # with every qubit open in natural order the batch is the state vector itself
    assert np.max(np.abs(b.amplitudes - sv.amps)) <= 1e-6


def test_marginal_consistency():
    c = generate_rqc(3, 4, 8, 3, "fsim")
    open_q = (1, 5, 6, 10)
    fixed = "01101110"
    big = compute_batch(c, fixed, open_q)
    for pos, q in enumerate(open_q):
        for v in (0, 1):
            rest = [x for x in open_q if x != q]
            full = ["*"] * 12
            for qq, bit in zip([x for x in range(12) if x not in open_q], fixed):
                full[qq] = bit
            full[q] = str(v)
            small = compute_batch(c, "".join(full), rest)
            half = [j for j in range(16) if (j >> pos) & 1 == v]
            assert np.allclose(small.amplitudes, big.amplitudes[half], rtol=1e-6, atol=1e-9)


def test_batch_length_invariant():
    with pytest.raises(SamplingError):
        AmplitudeBatch((0, 1), "0", np.zeros(3, complex), 3)


def test_too_many_open():
    c = generate_rqc(4, 4, 2, 0, "cz")
    with pytest.raises(SamplingError):
        compute_batch(c, "000", range(13))


def test_corner_block():
    assert corner_block(6, 6, 9) == [21, 22, 23, 27, 28, 29, 33, 34, 35]
    assert corner_block(4, 4, 0) == []
    assert corner_block(2, 2, 4) == [0, 1, 2, 3]
    assert len(set(corner_block(5, 3, 7))) == 7
    with pytest.raises(SamplingError):
        corner_block(2, 2, 5)


def test_batch_overhead_six_by_six():
    c = generate_rqc(6, 6, 12, 0, "cz")
    rep = batch_overhead(c, corner_block(6, 6, 9))
    assert rep["k"] == 9
    assert rep["ratio"] < 2


def test_uniform_acceptance_rate():
    n = 10
    amps = np.full(1 << n, 2 ** (-n / 2), dtype=complex)
    s = frugal_rejection_sample(oracle_batches(amps, n, (0, 1, 2, 3), 0), 2000, seed=1)
    assert len(s.bitstrings) == 2000
    # accepted ~ Binomial(candidates, 0.1)
    sd = math.sqrt(0.1 * 0.9 / s.candidates_used)
    assert abs(s.acceptance_rate - 1 / ENVELOPE) < 4 * sd + 1 / s.candidates_used


def test_zero_samples():
    s = frugal_rejection_sample(iter(()), 0, seed=0)
    assert s.bitstrings == [] and s.method == "frugal"


def test_stream_exhausted():
    amps = np.full(4, 0.5, dtype=complex)
    batches = [AmplitudeBatch((0, 1), "", amps, 2)]
    with pytest.raises(SamplingError):
        frugal_rejection_sample(batches, 100, seed=0)
    with pytest.raises(SamplingError):
        frugal_rejection_sample(batches, -1, seed=0)


def _ten_qubit_case():
    c = generate_rqc(2, 5, 24, 4, "fsim")
    probs = all_probs(simulate(c))
    return c, simulate(c).amps, probs


def test_frugal_frequencies_match_distribution():
    c, amps, probs = _ten_qubit_case()
    n = c.num_qubits
    # acceptance is min(1, 2^n p / c); with every 2^n p below c the target is p itself
    assert probs.max() * 2**n < ENVELOPE
    s = frugal_rejection_sample(oracle_batches(amps, n, (0, 3, 4, 7, 8, 9), 2), 100_000, seed=3)
    counts = np.bincount([_index(b) for b in s.bitstrings], minlength=1 << n)
    # pool low-probability strings so every expected count is at least 5
    order = np.argsort(probs)
    groups, cur, mass = [], [], 0.0
    for i in order:
        cur.append(i)
        mass += probs[i]
        if mass * 100_000 >= 5:
            groups.append(cur)
            cur, mass = [], 0.0
    groups[-1] += cur
    obs = np.array([counts[g].sum() for g in groups])
    exp = np.array([probs[g].sum() for g in groups]) * 100_000
    _, p = stats.chisquare(obs, exp * obs.sum() / exp.sum())
    assert p > 0.01


def test_frugal_deterministic_and_exchangeable():
    c, amps, _ = _ten_qubit_case()
    n = c.num_qubits
    open_q = (0, 1, 2, 3, 4)
    a = frugal_rejection_sample(oracle_batches(amps, n, open_q, 5), 20_000, seed=7)
    again = frugal_rejection_sample(oracle_batches(amps, n, open_q, 5), 20_000, seed=7)
    assert a.bitstrings == again.bitstrings
    b = frugal_rejection_sample(oracle_batches(amps, n, open_q, 6), 20_000, seed=8)
    ca = np.bincount([_index(s) for s in a.bitstrings], minlength=1 << n)
    cb = np.bincount([_index(s) for s in b.bitstrings], minlength=1 << n)
    # strings accepted from one batch share its fixed bits, so bins must mix
    # batches: group strings by probability rank rather than by index
    order = np.argsort(_ten_qubit_case()[2]).reshape(32, -1)
    table = np.array([ca[order].sum(1), cb[order].sum(1)])
    _, p, _, _ = stats.chi2_contingency(table)
    assert p > 0.01


def test_xeb_hand_value():
    # |psi> = (|00> + |01> + |10> + i|11>) / 2 has uniform p = 1/4
    p = np.full(4, 0.25)
    assert xeb(["11"], p, 2).f_xeb == 0.0
    # Bell-like state: p(00) = p(11) = 1/2
    bell = np.array([0.5, 0, 0, 0.5])
    rep = xeb(["00"], bell, 2)
    assert rep.f_xeb == 4 * 0.5 - 1 == 1.0 and rep.num_samples == 1


def test_xeb_callable_oracle_and_errors():
    probs = all_probs(simulate(generate_rqc(2, 2, 6, 0, "fsim")))
    strings = ["0110", "1111", "0000"]
    a = xeb(strings, probs, 4)
    b = xeb(strings, lambda s: probs[_index(s)], 4)
    assert a.f_xeb == b.f_xeb
    with pytest.raises(SamplingError):
        xeb([], probs, 4)


def test_xeb_uniform_and_exact():
    c = generate_rqc(3, 4, 24, 1, "fsim")
    n = c.num_qubits
    probs = all_probs(simulate(c))
    m = 100_000
    uni = xeb(uniform_sample(n, m, seed=0), probs, n)
    assert abs(uni.f_xeb) < 3 * uni.sigma
    # exact samples estimate 2^n sum p^2 - 1, the collision value of this circuit
    target = 2**n * float(np.sum(probs**2)) - 1
    ex_set = exact_sample(probs, m, seed=1)
    ex = xeb(ex_set, probs, n)
    assert abs(ex.f_xeb - target) < 3 * ex.sigma
    assert ex_set.fidelity_estimate == ex.f_xeb


def test_porter_thomas_uniform_fails():
    rep = porter_thomas_check(np.full(1 << 10, 2.0**-10))
    assert rep.p_value < 1e-6
    assert rep.counts.sum() == 1 << 10


def test_porter_thomas_random_state_passes(tmp_path):
    rng = np.random.default_rng(0)
    z = rng.standard_normal(1 << 14) + 1j * rng.standard_normal(1 << 14)
    probs = np.abs(z) ** 2
    probs /= probs.sum()
    path = tmp_path / "hist.csv"
    rep = porter_thomas_check(probs, bins=25, csv_path=str(path))
    assert rep.p_value > 0.001 and rep.dof == 24
    assert rep.counts.sum() == 1 << 14
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["bin_lo", "bin_hi", "count", "expected"] and len(rows) == 26
    assert sum(int(r[2]) for r in rows[1:]) == 1 << 14


def test_porter_thomas_errors():
    with pytest.raises(SamplingError):
        porter_thomas_check(np.full(16, 0.1))
    with pytest.raises(SamplingError):
        porter_thomas_check(np.full(16, 1 / 16), bins=10)


def test_samples_file_round_trip(tmp_path):
    s = SampleSet(["0101", "1110"], "exact", 0.25)
    path = tmp_path / "s.txt"
    write_samples(s, str(path), "abc")
    assert read_samples(str(path)) == ["0101", "1110"]
    assert open(path).readline().startswith("# circuit abc method exact")
