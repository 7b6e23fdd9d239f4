import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def kron_state(circuit):
    """Independent reference: build each layer as a dense 2^n operator by Kronecker products."""
    n = circuit.num_qubits
    from rqcsim.circuit import gate_unitary

    psi = np.zeros(1 << n, dtype=complex)
    psi[0] = 1
    for layer in circuit.cycles:
        for g in layer:
            psi = full_operator(gate_unitary(g), g.qubits, n) @ psi
    return psi


def full_operator(u, qubits, n):
    """Dense operator acting on ``qubits`` (qubit 0 = least significant bit)."""
    dim = 1 << n
    k = len(qubits)
    out = np.zeros((dim, dim), dtype=complex)
    for col in range(dim):
        sub_in = sum(((col >> q) & 1) << (k - 1 - j) for j, q in enumerate(qubits))
        for sub_out in range(1 << k):
            amp = u[sub_out, sub_in]
            if amp == 0:
                continue
            row = col
            for j, q in enumerate(qubits):
                bit = (sub_out >> (k - 1 - j)) & 1
                row = (row & ~(1 << q)) | (bit << q)
            out[row, col] += amp
    return out


def fuzz_case(rng, max_elems=2**20):
    """A random (A, B, spec) pair.

    Half the cases are wide (one operand up to rank 20, all dims 2), the other
    half deep (ranks up to 6, dims up to 32).  Shared indices are summed or,
    with probability 0.3, kept as batch pairs; the output order is shuffled.
    """
    from rqcsim.engine import ContractionSpec, DenseTensor

    if rng.random() < 0.5:
        ra, rb = int(rng.integers(1, 21)), int(rng.integers(1, 7))
        pick = lambda: 2  # noqa: E731
    else:
        ra, rb = int(rng.integers(1, 7)), int(rng.integers(1, 7))
        pick = lambda: int(rng.choice([1, 2, 3, 4, 8, 16, 32]))  # noqa: E731
    nshared = int(rng.integers(0, min(ra, rb) + 1))
    ids_a = [int(i) for i in rng.permutation(40)[:ra]]
    ids_b = ids_a[:nshared] + [int(i) for i in rng.permutation(np.arange(40, 80))[: rb - nshared]]
    ids_b = [int(i) for i in rng.permutation(ids_b)]
    dim = {i: pick() for i in set(ids_a) | set(ids_b)}
    while np.prod([dim[i] for i in dim], dtype=float) > max_elems:
        k = max(dim, key=dim.get)
        dim[k] = max(1, dim[k] // 2)

    def rand(ids):
        shape = [dim[i] for i in ids]
        return DenseTensor.from_array(ids, rng.standard_normal(shape) + 1j * rng.standard_normal(shape))

    a, b = rand(ids_a), rand(ids_b)
    keep = [i for i in ids_a[:nshared] if rng.random() < 0.3]
    spec = ContractionSpec.by_ids(a.indices, b.indices, keep=keep)
    if spec.output_order:
        order = tuple(int(x) for x in rng.permutation(spec.output_order))
        spec = ContractionSpec(spec.contracted, order, spec.batch)
    return a, b, spec


def brute_force(a, b, spec):
    """Independent reference by enumerating every index assignment in pure Python."""
    import itertools

    dim = dict(zip(a.indices, a.dims))
    dim.update(zip(b.indices, b.dims))
    # B's batch axes carry A's id
    b_ids = list(b.indices)
    for p, q in spec.batch:
        b_ids[q] = a.indices[p]
    for p, q in spec.contracted:
        b_ids[q] = a.indices[p]
    summed = [a.indices[p] for p, _ in spec.contracted]
    out_ids = list(spec.output_order)
    av, bv = a.logical(), b.logical()
    out = np.zeros([dim[i] for i in out_ids], dtype=complex)
    for ov in itertools.product(*(range(dim[i]) for i in out_ids)):
        val = dict(zip(out_ids, ov))
        acc = 0j
        for sv in itertools.product(*(range(dim[i]) for i in summed)):
            val.update(zip(summed, sv))
            acc += av[tuple(val[i] for i in a.indices)] * bv[tuple(val[i] for i in b_ids)]
        out[ov] = acc
    return out
