"""Random quantum circuits on a rectangular qubit lattice.

Qubit ``q`` sits at row ``q // cols``, column ``q % cols``.  A circuit is an
ordered list of layers (cycles); layer 0 is the Hadamard layer, the last
layer is the measurement-basis layer, and the ``depth`` middle layers carry
the patterned two-qubit gates.

Two-qubit unitaries use the basis ordering ``2 * bit(qubits[0]) + bit(qubits[1])``.
"""

from __future__ import annotations

import enum
import hashlib
import math
from dataclasses import dataclass, field

import numpy as np


class CircuitError(ValueError):
    """Malformed or inconsistent circuit."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class GateTag(enum.Enum):
    H = "h"
    SQRT_X = "sx"
    SQRT_Y = "sy"
    SQRT_W = "sw"
    T = "t"
    CZ = "cz"
    ISWAP = "iswap"
    FSIM = "fsim"

    @property
    def arity(self) -> int:
        return 2 if self in _TWO_QUBIT else 1

    @property
    def num_params(self) -> int:
        return 2 if self is GateTag.FSIM else 0


_TWO_QUBIT = frozenset({GateTag.CZ, GateTag.ISWAP, GateTag.FSIM})


class Style(enum.Enum):
    CZ = "cz"
    FSIM = "fsim"


@dataclass(frozen=True)
class GateKind:
    tag: GateTag
    params: tuple[float, ...] = ()

    def __post_init__(self):
        if len(self.params) != self.tag.num_params:
            raise CircuitError(
                f"{self.tag.value} takes {self.tag.num_params} params, got {len(self.params)}"
            )

    @property
    def arity(self) -> int:
        return self.tag.arity

    def is_diagonal(self) -> bool:
        if self.tag in (GateTag.T, GateTag.CZ):
            return True
        if self.tag is GateTag.FSIM:
            return math.sin(self.params[0]) == 0.0
        return False


@dataclass(frozen=True)
class Gate:
    kind: GateKind
    qubits: tuple[int, ...]
    cycle: int

    def __post_init__(self):
        if len(self.qubits) != self.kind.arity:
            raise CircuitError(
                f"{self.kind.tag.value} acts on {self.kind.arity} qubit(s), got {len(self.qubits)}"
            )
        if len(set(self.qubits)) != len(self.qubits):
            raise CircuitError(f"repeated qubit in {self.kind.tag.value} gate")
        if self.cycle < 0:
            raise CircuitError("negative cycle")


H = GateKind(GateTag.H)
SQRT_X = GateKind(GateTag.SQRT_X)
SQRT_Y = GateKind(GateTag.SQRT_Y)
SQRT_W = GateKind(GateTag.SQRT_W)
T = GateKind(GateTag.T)
CZ = GateKind(GateTag.CZ)
ISWAP = GateKind(GateTag.ISWAP)


def fsim(theta: float, phi: float) -> GateKind:
    return GateKind(GateTag.FSIM, (float(theta), float(phi)))


SYCAMORE_FSIM = fsim(math.pi / 2, math.pi / 6)


def _sqrt_of_pauli(p: np.ndarray) -> np.ndarray:
    # p is Hermitian with p @ p == I, so sqrt(p) = (1+i)/2 I + (1-i)/2 p
    return 0.5 * (1 + 1j) * np.eye(2) + 0.5 * (1 - 1j) * p


_X = np.array([[0, 1], [1, 0]], dtype=complex)
_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
_W = (_X + _Y) / math.sqrt(2)

_FIXED_UNITARIES = {
    GateTag.H: np.array([[1, 1], [1, -1]], dtype=complex) / math.sqrt(2),
    GateTag.SQRT_X: _sqrt_of_pauli(_X),
    GateTag.SQRT_Y: _sqrt_of_pauli(_Y),
    GateTag.SQRT_W: _sqrt_of_pauli(_W),
    GateTag.T: np.diag([1, np.exp(1j * math.pi / 4)]),
    GateTag.CZ: np.diag([1, 1, 1, -1]).astype(complex),
    GateTag.ISWAP: np.array(
        [[1, 0, 0, 0], [0, 0, 1j, 0], [0, 1j, 0, 0], [0, 0, 0, 1]], dtype=complex
    ),
}


def kind_unitary(kind: GateKind) -> np.ndarray:
    """Unitary matrix (2x2 or 4x4, complex128) for a gate kind."""
    if kind.tag is GateTag.FSIM:
        theta, phi = kind.params
        c, s = math.cos(theta), math.sin(theta)
        return np.array(
            [
                [1, 0, 0, 0],
                [0, c, -1j * s, 0],
                [0, -1j * s, c, 0],
                [0, 0, 0, np.exp(-1j * phi)],
            ],
            dtype=complex,
        )
    return _FIXED_UNITARIES[kind.tag].copy()


def gate_unitary(gate: Gate) -> np.ndarray:
    return kind_unitary(gate.kind)


@dataclass(frozen=True)
class Circuit:
    rows: int
    cols: int
    cycles: tuple[tuple[Gate, ...], ...]
    disabled: frozenset[int] = field(default_factory=frozenset)

    @property
    def num_qubits(self) -> int:
        return self.rows * self.cols

    @property
    def depth(self) -> int:
        return max(len(self.cycles) - 2, 0)

    @property
    def gates(self) -> list[Gate]:
        return [g for layer in self.cycles for g in layer]

    def coords(self, q: int) -> tuple[int, int]:
        return divmod(q, self.cols)

    def validate(self) -> "Circuit":
        if self.rows < 1 or self.cols < 1:
            raise CircuitError("lattice dimensions must be positive")
        n = self.num_qubits
        for q in self.disabled:
            if not 0 <= q < n:
                raise CircuitError(f"disabled qubit {q} out of range")
        for k, layer in enumerate(self.cycles):
            seen: set[int] = set()
            for g in layer:
                if g.cycle != k:
                    raise CircuitError(f"gate filed under cycle {k} claims cycle {g.cycle}")
                for q in g.qubits:
                    if not 0 <= q < n:
                        raise CircuitError(f"qubit {q} out of range in cycle {k}")
                    if q in self.disabled:
                        raise CircuitError(f"gate on disabled qubit {q} in cycle {k}")
                    if q in seen:
                        raise CircuitError(f"qubit {q} used twice in cycle {k}")
                    seen.add(q)
                if g.kind.arity == 2:
                    (r0, c0), (r1, c1) = self.coords(g.qubits[0]), self.coords(g.qubits[1])
                    if abs(r0 - r1) + abs(c0 - c1) != 1:
                        raise CircuitError(
                            f"two-qubit gate on non-adjacent qubits {g.qubits} in cycle {k}"
                        )
        return self

    def digest(self) -> str:
        return hashlib.sha256(serialize_circuit(self).encode()).hexdigest()[:16]


# --------------------------------------------------------------------------
# text format

_TAGS = {t.value: t for t in GateTag}
_LAYERS_PRAGMA = "# layers"


def parse_circuit(text: str) -> Circuit:
    """Parse the whitespace-separated circuit format.

    Line 1 is ``rows cols [disabled ...]``; every following non-blank line is
    ``cycle tag q0 [q1] [params ...]``.  ``#`` starts a comment, except that a
    ``# layers K`` line pads the circuit with trailing empty layers.
    """
    header = None
    layers_hint = 0
    entries: list[tuple[int, int, GateKind, tuple[int, ...]]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if stripped.startswith(_LAYERS_PRAGMA):
            try:
                layers_hint = int(stripped[len(_LAYERS_PRAGMA):].split()[0])
            except (ValueError, IndexError):
                raise CircuitError("bad layers pragma", lineno) from None
            continue
        tokens = raw.split("#", 1)[0].split()
        if not tokens:
            continue
        if header is None:
            try:
                nums = [int(t) for t in tokens[0:2]] + [
                    int(t) for t in " ".join(tokens[2:]).replace(",", " ").split()
                ]
            except ValueError:
                raise CircuitError("header must be 'rows cols [disabled ...]'", lineno) from None
            if len(nums) < 2:
                raise CircuitError("header must be 'rows cols [disabled ...]'", lineno)
            header = (nums[0], nums[1], frozenset(nums[2:]))
            continue
        if len(tokens) < 3:
            raise CircuitError("expected 'cycle tag qubit ...'", lineno)
        try:
            cycle = int(tokens[0])
        except ValueError:
            raise CircuitError(f"bad cycle number {tokens[0]!r}", lineno) from None
        tag = _TAGS.get(tokens[1].lower())
        if tag is None:
            raise CircuitError(f"unknown gate tag {tokens[1]!r}", lineno)
        rest = tokens[2:]
        if len(rest) != tag.arity + tag.num_params:
            raise CircuitError(
                f"{tag.value} expects {tag.arity} qubit(s) and {tag.num_params} param(s)", lineno
            )
        try:
            qubits = tuple(int(t) for t in rest[: tag.arity])
            params = tuple(float(t) for t in rest[tag.arity:])
        except ValueError:
            raise CircuitError("non-numeric qubit or parameter", lineno) from None
        try:
            kind = GateKind(tag, params)
            Gate(kind, qubits, cycle)
        except CircuitError as e:
            raise CircuitError(str(e), lineno) from None
        entries.append((lineno, cycle, kind, qubits))

    if header is None:
        raise CircuitError("empty circuit file", 1)
    rows, cols, disabled = header
    if rows < 1 or cols < 1:
        raise CircuitError("lattice dimensions must be positive", 1)
    n = rows * cols
    used = sorted({c for _, c, _, _ in entries})
    if used != list(range(len(used))):
        raise CircuitError(f"cycle numbers not contiguous from 0: {used[:10]}")
    num_layers = max(len(used), layers_hint)
    layers: list[list[Gate]] = [[] for _ in range(num_layers)]
    occupied: list[set[int]] = [set() for _ in range(num_layers)]
    for lineno, cycle, kind, qubits in entries:
        for q in qubits:
            if not 0 <= q < n:
                raise CircuitError(f"qubit {q} out of range (n={n})", lineno)
            if q in occupied[cycle]:
                raise CircuitError(f"qubit {q} already used in cycle {cycle}", lineno)
            occupied[cycle].add(q)
        layers[cycle].append(Gate(kind, qubits, cycle))
    circuit = Circuit(rows, cols, tuple(tuple(layer) for layer in layers), disabled)
    return circuit.validate()


def serialize_circuit(circuit: Circuit) -> str:
    """Canonical text form: gates sorted by (cycle, first qubit)."""
    head = [str(circuit.rows), str(circuit.cols)] + [str(q) for q in sorted(circuit.disabled)]
    out = [" ".join(head)]
    last_used = max((k for k, layer in enumerate(circuit.cycles) if layer), default=-1)
    if len(circuit.cycles) > last_used + 1:
        out.append(f"{_LAYERS_PRAGMA} {len(circuit.cycles)}")
    for layer in circuit.cycles:
        for g in sorted(layer, key=lambda g: g.qubits[0]):
            parts = [str(g.cycle), g.kind.tag.value, *map(str, g.qubits)]
            parts += [repr(p) for p in g.kind.params]
            out.append(" ".join(parts))
    return "\n".join(out) + "\n"


# --------------------------------------------------------------------------
# generation

# (orientation, parity of the pair's leading coordinate, parity of the other one);
# the 8 classes partition the lattice edges so each edge fires once per 8 cycles.
PATTERN_ORDER = (
    ("h", 0, 0), ("v", 0, 0), ("h", 1, 1), ("v", 1, 1),
    ("h", 0, 1), ("v", 0, 1), ("h", 1, 0), ("v", 1, 0),
)


def pattern_pairs(rows: int, cols: int, pattern: int) -> list[tuple[int, int]]:
    orient, lead, other = PATTERN_ORDER[pattern % 8]
    pairs = []
    if orient == "h":
        for r in range(rows):
            for c in range(cols - 1):
                if c % 2 == lead and r % 2 == other:
                    pairs.append((r * cols + c, r * cols + c + 1))
    else:
        for r in range(rows - 1):
            for c in range(cols):
                if r % 2 == lead and c % 2 == other:
                    pairs.append((r * cols + c, (r + 1) * cols + c))
    return pairs


_SINGLE_QUBIT_SETS = {
    Style.CZ: (SQRT_X, SQRT_Y, T),
    Style.FSIM: (SQRT_X, SQRT_Y, SQRT_W),
}


def generate_rqc(rows: int, cols: int, depth: int, seed: int, style: Style | str = Style.CZ) -> Circuit:
    """Generate a random circuit with ``1 + depth + 1`` layers.

    Middle cycle ``k`` applies two-qubit gates on pattern ``(k - 1) % 8`` and a
    random single-qubit gate on every other qubit, never repeating the
    previous single-qubit gate of that qubit.
    """
    style = Style(style)
    if rows < 1 or cols < 1 or depth < 0:
        raise CircuitError("need rows, cols >= 1 and depth >= 0")
    rng = np.random.default_rng(seed)
    n = rows * cols
    two_qubit = CZ if style is Style.CZ else SYCAMORE_FSIM
    pool = _SINGLE_QUBIT_SETS[style]
    last: list[GateKind] = [H] * n

    layers = [tuple(Gate(H, (q,), 0) for q in range(n))]
    for k in range(1, depth + 1):
        pairs = pattern_pairs(rows, cols, k - 1)
        busy = {q for p in pairs for q in p}
        layer = [Gate(two_qubit, p, k) for p in pairs]
        for q in range(n):
            if q in busy:
                continue
            choices = [g for g in pool if g != last[q]]
            kind = choices[rng.integers(len(choices))]
            last[q] = kind
            layer.append(Gate(kind, (q,), k))
        layers.append(tuple(sorted(layer, key=lambda g: g.qubits[0])))
    final = depth + 1
    if style is Style.CZ:
        layers.append(tuple(Gate(H, (q,), final) for q in range(n)))
    else:
        layers.append(())
    return Circuit(rows, cols, tuple(layers)).validate()
