"""Brute-force state-vector simulation, the ground truth for amplitude tests.

Qubit 0 is the least significant bit of the state index.  Bitstrings are
written qubit-0 first, so ``"10"`` on two qubits is state index 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .circuit import Circuit, Gate, gate_unitary

MAX_QUBITS = 20


class OracleError(ValueError):
    pass


@dataclass
class StateVector:
    n: int
    amps: np.ndarray

    def norm(self) -> float:
        return float(np.vdot(self.amps, self.amps).real)


def zero_state(n: int) -> StateVector:
    amps = np.zeros(1 << n, dtype=np.complex128)
    amps[0] = 1.0
    return StateVector(n, amps)


def apply_gate(sv: StateVector, gate: Gate) -> None:
    """Apply ``gate`` in place."""
    n = sv.n
    u = gate_unitary(gate)
    psi = sv.amps.reshape((2,) * n)
    # axis of qubit q in the C-order reshape
    axes = [n - 1 - q for q in gate.qubits]
    k = len(axes)
    ut = u.reshape((2,) * (2 * k))
    psi = np.tensordot(ut, psi, axes=(list(range(k, 2 * k)), axes))
    psi = np.moveaxis(psi, list(range(k)), axes)
    sv.amps = np.ascontiguousarray(psi).reshape(-1)


def simulate(circuit: Circuit, max_qubits: int = MAX_QUBITS, check_norm: bool = False) -> StateVector:
    n = circuit.num_qubits
    if n > max_qubits:
        raise OracleError(f"{n} qubits exceeds the state-vector cap of {max_qubits}")
    sv = zero_state(n)
    for layer in circuit.cycles:
        for gate in layer:
            apply_gate(sv, gate)
        if check_norm and abs(sv.norm() - 1.0) > 1e-9:
            raise OracleError("norm drifted beyond 1e-9")
    return sv


def bits_to_index(bits: str) -> int:
    return sum(1 << q for q, b in enumerate(bits) if b == "1")


def index_to_bits(index: int, n: int) -> str:
    return "".join("1" if index >> q & 1 else "0" for q in range(n))


def amplitude(sv: StateVector, bitstring: str) -> complex:
    if len(bitstring) != sv.n or set(bitstring) - {"0", "1"}:
        raise OracleError(f"bitstring must be {sv.n} characters of 0/1")
    return complex(sv.amps[bits_to_index(bitstring)])


def all_probs(sv: StateVector) -> np.ndarray:
    return np.abs(sv.amps) ** 2
