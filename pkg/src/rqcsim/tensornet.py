"""Circuit -> tensor network conversion and structural simplification.

Indices are integer ids with a dimension; an index may touch more than two
nodes (a hyperedge), which is how diagonal gates share the worldline of the
qubits they act on.  Gate tensors are not built until they are needed:
a node either carries a payload or a ``source`` that ``materialize`` turns
into an array.

Gate tensors are laid out as ``(in..., out...)`` and boundary vectors have a
single axis.
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any, Iterable

import numpy as np

from .circuit import Circuit, Gate, GateKind, kind_unitary

ORIGINS = ("gate", "input", "output", "merged", "site")


class NetworkError(ValueError):
    pass


@dataclass(frozen=True)
class TensorNode:
    node_id: int
    indices: tuple[int, ...]
    origin: str
    payload: np.ndarray | None = field(default=None, compare=False, repr=False)
    source: Any = field(default=None, compare=False, repr=False)

    @property
    def rank(self) -> int:
        return len(self.indices)


class TensorNetwork:
    """Immutable hypergraph of tensor nodes."""

    def __init__(
        self,
        nodes: Iterable[TensorNode],
        dims: dict[int, int],
        open_indices: Iterable[int] = (),
        meta: dict | None = None,
    ):
        self.nodes: dict[int, TensorNode] = {n.node_id: n for n in nodes}
        self.open_indices: tuple[int, ...] = tuple(open_indices)
        used = {ix for n in self.nodes.values() for ix in n.indices} | set(self.open_indices)
        self.dims: dict[int, int] = {ix: dims[ix] for ix in sorted(used)}
        self.meta = dict(meta or {})
        table: dict[int, list[int]] = defaultdict(list)
        for nid in sorted(self.nodes):
            for ix in self.nodes[nid].indices:
                table[ix].append(nid)
        self.index_table: dict[int, tuple[int, ...]] = {ix: tuple(v) for ix, v in table.items()}

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def node_ids(self) -> list[int]:
        return sorted(self.nodes)

    def shape(self, node_id: int) -> tuple[int, ...]:
        return tuple(self.dims[ix] for ix in self.nodes[node_id].indices)

    def check(self) -> None:
        for ix in self.dims:
            if ix not in self.index_table and ix not in self.open_indices:
                raise NetworkError(f"index {ix} touches no node and is not open")
        for nid, node in self.nodes.items():
            if len(set(node.indices)) != len(node.indices):
                raise NetworkError(f"node {nid} repeats an index")
            if node.payload is not None and node.payload.shape != self.shape(nid):
                raise NetworkError(f"node {nid} payload shape {node.payload.shape} != {self.shape(nid)}")
            for ix in node.indices:
                if nid not in self.index_table[ix]:
                    raise NetworkError("incidence table out of sync")
        for ix, nids in self.index_table.items():
            for nid in nids:
                if ix not in self.nodes[nid].indices:
                    raise NetworkError("incidence table out of sync")

    def materialize(self, node_id: int, pins: dict[int, int] | None = None) -> np.ndarray:
        """Dense complex128 array of a node, with ``pins`` (index -> value) applied.

        Pinned axes are dropped; the remaining axes follow the node's index order.
        """
        node = self.nodes[node_id]
        pins = {ix: v for ix, v in (pins or {}).items() if ix in node.indices}
        if node.payload is not None:
            arr = node.payload
        else:
            kind = node.source[0]
            if kind == "site":
                return node.source[1].site_tensor(node.source[2], pins)
            arr = _source_array(node.source)
        if pins:
            sel = tuple(pins[ix] if ix in pins else slice(None) for ix in node.indices)
            arr = arr[sel]
        return np.asarray(arr, dtype=np.complex128)

    def signature(self) -> tuple:
        return (
            tuple((nid, self.nodes[nid].indices) for nid in self.node_ids),
            tuple(sorted(self.dims.items())),
            self.open_indices,
        )

    def renumbered(self, mapping: dict[int, int]) -> "TensorNetwork":
        nodes = [
            TensorNode(mapping[n.node_id], n.indices, n.origin, n.payload, n.source)
            for n in self.nodes.values()
        ]
        return TensorNetwork(nodes, self.dims, self.open_indices, self.meta)

    # -- JSON -------------------------------------------------------------

    def to_json(self) -> str:
        doc = {
            "dims": {str(ix): d for ix, d in self.dims.items()},
            "nodes": [
                {"id": nid, "indices": list(self.nodes[nid].indices), "origin": self.nodes[nid].origin}
                for nid in self.node_ids
            ],
            "open": list(self.open_indices),
        }
        if "lattice" in self.meta:
            doc["lattice"] = self.meta["lattice"]
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "TensorNetwork":
        """Structure-only network (no payloads), for path finding."""
        doc = json.loads(text)
        dims = {int(k): int(v) for k, v in doc["dims"].items()}
        nodes = [TensorNode(int(n["id"]), tuple(n["indices"]), n.get("origin", "merged")) for n in doc["nodes"]]
        meta = {"lattice": doc["lattice"]} if "lattice" in doc else {}
        return cls(nodes, dims, doc.get("open", ()), meta)


def _source_array(source) -> np.ndarray:
    kind = source[0]
    if kind == "input":
        return np.array([1.0, 0.0], dtype=np.complex128)
    if kind == "output":
        v = np.zeros(2, dtype=np.complex128)
        v[source[1]] = 1.0
        return v
    if kind == "gate":
        return gate_tensor(source[1].kind)
    raise NetworkError(f"cannot materialize source {kind!r}")


@lru_cache(maxsize=None)
def _gate_tensor_cached(kind: GateKind) -> np.ndarray:
    u = kind_unitary(kind)
    if u.shape == (2, 2):
        t = u.T
    else:
        t = u.reshape(2, 2, 2, 2).transpose(2, 3, 0, 1)
    t = np.ascontiguousarray(t)
    t.setflags(write=False)
    return t


def gate_tensor(kind: GateKind) -> np.ndarray:
    """Gate tensor with axes ``(in..., out...)``."""
    return _gate_tensor_cached(kind)


def expand_bits(n: int, fixed_bits: str, open_qubits: Iterable[int]) -> tuple[dict[int, int], tuple[int, ...]]:
    open_qubits = tuple(open_qubits)
    if len(set(open_qubits)) != len(open_qubits):
        raise NetworkError("open qubits repeat")
    for q in open_qubits:
        if not 0 <= q < n:
            raise NetworkError(f"open qubit {q} out of range")
    fixed_q = [q for q in range(n) if q not in open_qubits]
    if len(fixed_bits) == n and open_qubits and len(fixed_q) != n:
        # full-length string: positions of open qubits must be wildcards
        if any(fixed_bits[q] in "01" for q in open_qubits):
            raise NetworkError("fixed_bits assigns a value to an open qubit")
        fixed_bits = "".join(fixed_bits[q] for q in fixed_q)
    if len(fixed_bits) != len(fixed_q) or set(fixed_bits) - {"0", "1"}:
        raise NetworkError(
            f"fixed_bits must give one 0/1 per non-open qubit ({len(fixed_q)}), got {fixed_bits!r}"
        )
    return {q: int(b) for q, b in zip(fixed_q, fixed_bits)}, open_qubits


def build_network(circuit: Circuit, fixed_bits: str = "", open_qubits: Iterable[int] = ()) -> TensorNetwork:
    """Network whose full contraction is ``<fixed, x| U |0...0>`` over open assignments ``x``.

    ``fixed_bits`` lists the output bits of the non-open qubits in ascending
    qubit order.  The open indices follow ``open_qubits`` order.
    """
    n = circuit.num_qubits
    fixed, open_qubits = expand_bits(n, fixed_bits, open_qubits)
    nodes: list[TensorNode] = []
    dims: dict[int, int] = {}

    def new_index() -> int:
        ix = len(dims)
        dims[ix] = 2
        return ix

    cur = {}
    for q in range(n):
        cur[q] = new_index()
        nodes.append(TensorNode(len(nodes), (cur[q],), "input", source=("input",)))
    for layer in circuit.cycles:
        for gate in layer:
            ins = tuple(cur[q] for q in gate.qubits)
            outs = tuple(new_index() for _ in gate.qubits)
            nodes.append(TensorNode(len(nodes), ins + outs, "gate", source=("gate", gate)))
            for q, o in zip(gate.qubits, outs):
                cur[q] = o
    for q in range(n):
        if q in fixed:
            nodes.append(TensorNode(len(nodes), (cur[q],), "output", source=("output", fixed[q])))
    open_indices = [cur[q] for q in open_qubits]
    return TensorNetwork(nodes, dims, open_indices, {"num_qubits": n})


# ---------------------------------------------------------------------------
# site-coarsened lattice network


@lru_cache(maxsize=None)
def schmidt_halves(kind: GateKind) -> tuple[np.ndarray, np.ndarray]:
    """Operator-Schmidt split of a two-qubit gate.

    Returns ``(A, B)`` of shapes ``(r, 2, 2)`` with
    ``U[(o0,o1),(i0,i1)] = sum_k A[k,o0,i0] * B[k,o1,i1]``.
    """
    u = kind_unitary(kind).reshape(2, 2, 2, 2).transpose(0, 2, 1, 3).reshape(4, 4)
    x, s, yh = np.linalg.svd(u)
    r = int(np.sum(s > 1e-12 * s[0]))
    root = np.sqrt(s[:r])
    a = (x[:, :r] * root).T.reshape(r, 2, 2)
    b = (root[:, None] * yh[:r]).reshape(r, 2, 2)
    return a, b


class _SiteContext:
    """Per-qubit gate sequences for lazily building site tensors."""

    def __init__(self, circuit: Circuit, fixed: dict[int, int], open_qubits: tuple[int, ...]):
        self.circuit = circuit
        self.fixed = fixed
        self.open_qubits = open_qubits
        n = circuit.num_qubits
        self.events: list[list[tuple]] = [[] for _ in range(n)]
        # edge (lo, hi) -> list of Schmidt ranks in time order
        self.edge_ranks: dict[tuple[int, int], list[int]] = defaultdict(list)
        for layer in circuit.cycles:
            for g in layer:
                if g.kind.arity == 1:
                    for q in g.qubits:
                        self.events[q].append(("u", kind_unitary(g.kind)))
                    continue
                a, b = schmidt_halves(g.kind)
                q0, q1 = g.qubits
                edge = (min(q0, q1), max(q0, q1))
                pos = len(self.edge_ranks[edge])
                self.edge_ranks[edge].append(a.shape[0])
                self.events[q0].append(("half", a, edge, pos))
                self.events[q1].append(("half", b, edge, pos))
        self.edge_index: dict[tuple[int, int], int] = {}
        self.edge_dim: dict[tuple[int, int], int] = {}
        for k, edge in enumerate(sorted(self.edge_ranks)):
            self.edge_index[edge] = k
            self.edge_dim[edge] = math.prod(self.edge_ranks[edge])
        self.open_index = {q: len(self.edge_index) + j for j, q in enumerate(open_qubits)}

    def site_edges(self, q: int) -> list[tuple[int, int]]:
        return sorted(e for e in self.edge_index if q in e)

    def site_indices(self, q: int) -> tuple[int, ...]:
        ixs = [self.edge_index[e] for e in self.site_edges(q)]
        if q in self.open_index:
            ixs.append(self.open_index[q])
        return tuple(ixs)

    def site_tensor(self, q: int, pins: dict[int, int]) -> np.ndarray:
        digits: dict[tuple[tuple[int, int], int], int] = {}
        for edge in self.site_edges(q):
            ix = self.edge_index[edge]
            if ix in pins:
                v = pins[ix]
                ranks = self.edge_ranks[edge]
                for pos in range(len(ranks) - 1, -1, -1):
                    v, digits[(edge, pos)] = divmod(v, ranks[pos])
        t = np.array([1.0, 0.0], dtype=np.complex128)
        labels: list[tuple[tuple[int, int], int]] = []  # bond axes after the worldline axis
        for ev in self.events[q]:
            if ev[0] == "u":
                t = np.tensordot(ev[1], t, axes=(1, 0))
                continue
            _, halves, edge, pos = ev
            if (edge, pos) in digits:
                t = np.tensordot(halves[digits[(edge, pos)]], t, axes=(1, 0))
            else:
                t = np.tensordot(halves, t, axes=(2, 0))  # (k, out, ...)
                t = np.moveaxis(t, 0, -1)
                labels.append((edge, pos))
        if q in self.fixed:
            t = t[self.fixed[q]]
        else:
            t = np.moveaxis(t, 0, -1)
        order: list[int] = []
        shape: list[int] = []
        for edge in self.site_edges(q):
            if self.edge_index[edge] in pins:
                continue
            axes = sorted((i for i, lab in enumerate(labels) if lab[0] == edge), key=lambda i: labels[i][1])
            order += axes
            shape.append(self.edge_dim[edge])
        if q not in self.fixed:
            order.append(len(labels))
            shape.append(2)
        return np.ascontiguousarray(np.transpose(t, order)).reshape(shape)


def build_site_network(circuit: Circuit, fixed_bits: str = "", open_qubits: Iterable[int] = ()) -> TensorNetwork:
    """One node per qubit: the qubit's whole worldline collapsed into a site tensor.

    Two-qubit gates are split by operator-Schmidt decomposition and all bonds
    along a lattice edge are fused into one index, so the result is a
    PEPS-like grid with one bond per active lattice edge.
    """
    fixed, open_qubits = expand_bits(circuit.num_qubits, fixed_bits, open_qubits)
    ctx = _SiteContext(circuit, fixed, open_qubits)
    dims = {ctx.edge_index[e]: ctx.edge_dim[e] for e in ctx.edge_index}
    dims.update({ix: 2 for ix in ctx.open_index.values()})
    nodes = [
        TensorNode(q, ctx.site_indices(q), "site", source=("site", ctx, q))
        for q in range(circuit.num_qubits)
    ]
    edges = {f"{a},{b}": ctx.edge_index[(a, b)] for a, b in ctx.edge_index}
    meta = {"num_qubits": circuit.num_qubits, "lattice": {"rows": circuit.rows, "cols": circuit.cols, "edges": edges}}
    return TensorNetwork(nodes, dims, [ctx.open_index[q] for q in open_qubits], meta)


# ---------------------------------------------------------------------------
# simplification


def _einsum_pair(a: np.ndarray, ia: tuple, b: np.ndarray, ib: tuple, out: tuple) -> np.ndarray:
    labels = {ix: k for k, ix in enumerate(dict.fromkeys(ia + ib))}
    return np.einsum(a, [labels[i] for i in ia], b, [labels[i] for i in ib], [labels[i] for i in out])


class _Scratch:
    """Mutable working copy of a network used by ``simplify``."""

    def __init__(self, net: TensorNetwork):
        self.net = net
        self.indices: dict[int, tuple[int, ...]] = {nid: n.indices for nid, n in net.nodes.items()}
        self.payload: dict[int, np.ndarray | None] = {nid: n.payload for nid, n in net.nodes.items()}
        self.origin = {nid: n.origin for nid, n in net.nodes.items()}
        self.source = {nid: n.source for nid, n in net.nodes.items()}
        self.dims = dict(net.dims)
        self.open = list(net.open_indices)
        self.where: dict[int, set[int]] = defaultdict(set)
        for nid, ixs in self.indices.items():
            for ix in ixs:
                self.where[ix].add(nid)

    def array(self, nid: int) -> np.ndarray:
        if self.payload[nid] is None:
            self.payload[nid] = self.net.materialize(nid) if nid in self.net.nodes else None
        return self.payload[nid]

    def set_indices(self, nid: int, ixs: tuple[int, ...]) -> None:
        for ix in self.indices.get(nid, ()):
            self.where[ix].discard(nid)
        self.indices[nid] = ixs
        for ix in ixs:
            self.where[ix].add(nid)

    def remove(self, nid: int) -> None:
        for ix in self.indices[nid]:
            self.where[ix].discard(nid)
        for d in (self.indices, self.payload, self.origin, self.source):
            del d[nid]

    def merged_indices(self, x: int, y: int) -> tuple[int, ...]:
        ix, iy = self.indices[x], self.indices[y]
        keep = []
        for i in dict.fromkeys(iy + ix):
            if i in self.open or self.where[i] - {x, y}:
                keep.append(i)
        return tuple(keep)

    def merge_into(self, x: int, y: int) -> None:
        out = self.merged_indices(x, y)
        arr = _einsum_pair(self.array(y), self.indices[y], self.array(x), self.indices[x], out)
        self.remove(x)
        self.payload[y] = arr
        self.origin[y] = "merged"
        self.source[y] = None
        self.set_indices(y, out)


def _rewrite_diagonal(s: _Scratch) -> bool:
    changed = False
    for nid in sorted(s.indices):
        src = s.source.get(nid)
        if s.origin[nid] != "gate" or src is None or src[0] != "gate":
            continue
        gate: Gate = src[1]
        if not gate.kind.is_diagonal():
            continue
        k = gate.kind.arity
        ixs = s.indices[nid]
        ins, outs = ixs[:k], ixs[k:]
        diag = np.diag(kind_unitary(gate.kind)).reshape((2,) * k)
        s.payload[nid] = diag.astype(np.complex128)
        s.origin[nid] = "merged"
        s.source[nid] = None
        s.set_indices(nid, ins)
        for i, o in zip(ins, outs):
            for other in list(s.where[o]):
                s.set_indices(other, tuple(i if j == o else j for j in s.indices[other]))
            s.open = [i if j == o else j for j in s.open]
            del s.where[o]
        changed = True
    return changed


def _absorb_small(s: _Scratch) -> bool:
    changed = False
    for x in sorted(s.indices):
        if x not in s.indices or len(s.indices) == 1:
            continue
        rank = len(s.indices[x])
        if rank > 2:
            continue
        if rank == 0:
            y = min(n for n in s.indices if n != x)
            s.merge_into(x, y)
            changed = True
            continue
        neighbours = sorted({n for ix in s.indices[x] for n in s.where[ix]} - {x})
        for y in neighbours:
            if len(s.merged_indices(x, y)) <= len(s.indices[y]):
                s.merge_into(x, y)
                changed = True
                break
    return changed


def _fuse_parallel(s: _Scratch) -> bool:
    changed = False
    pairs: dict[tuple[int, int], list[int]] = defaultdict(list)
    for ix, where in s.where.items():
        if len(where) == 2 and ix not in s.open:
            pairs[tuple(sorted(where))].append(ix)
    next_ix = max(s.dims) + 1 if s.dims else 0
    for (x, y), shared in sorted(pairs.items()):
        if len(shared) < 2:
            continue
        shared = sorted(shared)
        fused = next_ix
        next_ix += 1
        s.dims[fused] = math.prod(s.dims[i] for i in shared)
        for nid in (x, y):
            ixs = s.indices[nid]
            rest = [i for i in ixs if i not in shared]
            arr = s.array(nid)
            arr = np.transpose(arr, [ixs.index(i) for i in rest + shared])
            arr = arr.reshape([s.dims[i] for i in rest] + [s.dims[fused]])
            s.payload[nid] = np.ascontiguousarray(arr)
            if s.origin[nid] == "gate":
                s.origin[nid] = "merged"
            s.source[nid] = None
            s.set_indices(nid, tuple(rest) + (fused,))
        for i in shared:
            del s.where[i]
        changed = True
    return changed


def simplify(net: TensorNetwork) -> TensorNetwork:
    """Value-preserving reductions, applied to a fixpoint.

    Diagonal gates become hyperedge nodes on their input worldlines, rank-1
    and rank-2 nodes are absorbed into a neighbour when that does not raise
    the neighbour's rank, and parallel indices between a node pair are fused.
    """
    s = _Scratch(net)
    _rewrite_diagonal(s)
    while True:
        changed = _absorb_small(s)
        changed |= _fuse_parallel(s)
        if not changed:
            break
    nodes = []
    for nid in sorted(s.indices):
        payload = s.payload[nid]
        if payload is not None and s.source[nid] is not None:
            payload = None  # still lazily reproducible
        nodes.append(TensorNode(nid, s.indices[nid], s.origin[nid], payload, s.source[nid]))
    return TensorNetwork(nodes, s.dims, s.open, net.meta)


def network_stats(net: TensorNetwork) -> dict:
    """Structural summary; never materializes a tensor."""
    total = 0
    max_rank = 0
    for nid, node in net.nodes.items():
        max_rank = max(max_rank, node.rank)
        total += math.prod(net.dims[ix] for ix in node.indices)
    return {
        "num_nodes": len(net.nodes),
        "num_indices": len(net.dims),
        "max_rank": max_rank,
        "log2_total_dim": math.log2(total) if total else 0.0,
    }


def contract_all_naive(net: TensorNetwork) -> np.ndarray:
    """Contract the whole network in node-id order with numpy (complex128).

    Reference path for small networks; the result axes follow ``open_indices``.
    """
    ids = net.node_ids
    if not ids:
        raise NetworkError("empty network")
    where: dict[int, set[int]] = {ix: set(v) for ix, v in net.index_table.items()}
    cur_ix = net.nodes[ids[0]].indices
    cur = net.materialize(ids[0])
    done = {ids[0]}
    for nid in ids[1:]:
        done.add(nid)
        nix = net.nodes[nid].indices
        out = tuple(
            i for i in dict.fromkeys(cur_ix + nix) if i in net.open_indices or where[i] - done
        )
        cur = _einsum_pair(cur, cur_ix, net.materialize(nid), nix, out)
        cur_ix = out
    return np.transpose(cur, [cur_ix.index(i) for i in net.open_indices]) if net.open_indices else cur
