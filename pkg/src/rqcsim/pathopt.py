"""Contraction orders, their cost, and slicing plans.

A contraction tree is stored as an ordered list of steps ``(left, right, new)``.
Leaves are network node ids; internal ids are allocated above the largest
leaf id.  An index survives a step when it is open or still touches a leaf
outside the merged subtree; shared indices that survive are carried as
batch (hyperedge) axes.  The surviving index order is the left operand's
kept indices followed by the right operand's new ones, and the executor
relies on exactly this order.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .tensornet import TensorNetwork


class PathError(ValueError):
    pass


class SlicingError(PathError):
    pass


# ---------------------------------------------------------------------------
# trees and cost


@dataclass(frozen=True)
class ContractionTree:
    leaves: tuple[int, ...]
    steps: tuple[tuple[int, int, int], ...]

    @property
    def root(self) -> int:
        if self.steps:
            return self.steps[-1][2]
        if len(self.leaves) != 1:
            raise PathError("tree without steps must have exactly one leaf")
        return self.leaves[0]

    def children(self) -> dict[int, tuple[int, int]]:
        return {new: (l, r) for l, r, new in self.steps}

    def heights(self) -> dict[int, int]:
        h = {leaf: 0 for leaf in self.leaves}
        for l, r, new in self.steps:
            h[new] = 1 + max(h[l], h[r])
        return h

    def validate(self, net: TensorNetwork | None = None) -> "ContractionTree":
        alive = set(self.leaves)
        if len(alive) != len(self.leaves):
            raise PathError("leaf listed twice")
        if net is not None and alive != set(net.nodes):
            raise PathError("leaves do not cover the network nodes exactly once")
        for l, r, new in self.steps:
            if l not in alive or r not in alive or l == r:
                raise PathError(f"step {(l, r, new)} uses a consumed or unknown operand")
            if new in alive or new in self.leaves:
                raise PathError(f"step id {new} reused")
            alive -= {l, r}
            alive.add(new)
        if len(alive) != 1:
            raise PathError(f"tree leaves {len(alive)} disconnected results")
        return self

    def to_json(self, sliced: Sequence[int] = ()) -> str:
        return json.dumps(
            {"leaves": list(self.leaves), "steps": [list(s) for s in self.steps], "sliced": list(sliced)}
        )

    @classmethod
    def from_json(cls, text: str) -> tuple["ContractionTree", tuple[int, ...]]:
        doc = json.loads(text)
        steps = tuple(tuple(int(x) for x in s) for s in doc["steps"])
        leaves = doc.get("leaves")
        if leaves is None:
            made = {s[2] for s in steps}
            leaves = sorted({x for s in steps for x in s[:2]} - made)
        return cls(tuple(int(x) for x in leaves), steps).validate(), tuple(int(x) for x in doc.get("sliced", ()))


@dataclass
class StepCost:
    left: int
    right: int
    new: int
    shapes: tuple[tuple[int, ...], tuple[int, ...], tuple[int, ...]]
    flops: int
    log2_flops: float
    density: float
    height: int


@dataclass
class CostReport:
    """Cost of one tree under a set of sliced indices.

    ``total_flops`` and ``log2_flops`` cover all slices; per-step flops are
    per slice task.
    """

    log2_flops: float
    max_rank: int
    log2_max_intermediate: float
    compute_density: float
    per_step: list[StepCost]
    num_slices: int = 1
    total_flops: int = 0

    @property
    def task_flops(self) -> int:
        return sum(s.flops for s in self.per_step)

    @property
    def log2_macs(self) -> float:
        """Complex multiply-adds (flops / 8)."""
        return self.log2_flops - 3.0


@dataclass(frozen=True)
class LossWeights:
    w_complexity: float = 1.0
    w_density: float = 0.0
    density_target: float = 1.0

    def __post_init__(self):
        if self.w_complexity < 0 or self.w_density < 0:
            raise PathError("loss weights must be non-negative")
        if self.w_complexity == 0 and self.w_density == 0:
            raise PathError("at least one loss weight must be positive")
        if self.density_target <= 0:
            raise PathError("density_target must be positive")


class CostModel:
    """Incidence bitmasks over the leaves of a network, for fast step costing."""

    def __init__(self, net: TensorNetwork, sliced: Iterable[int] = ()):
        self.net = net
        self.sliced = frozenset(sliced)
        for ix in self.sliced:
            if ix not in net.dims:
                raise PathError(f"sliced index {ix} not in network")
            if ix in net.open_indices:
                raise PathError(f"cannot slice open index {ix}")
        self.open = frozenset(net.open_indices)
        self.dims = net.dims
        self.bit = {nid: 1 << k for k, nid in enumerate(net.node_ids)}
        self.inc: dict[int, int] = {}
        for ix, nids in net.index_table.items():
            m = 0
            for nid in nids:
                m |= self.bit[nid]
            self.inc[ix] = m
            if len(nids) == 1 and ix not in self.open and ix not in self.sliced:
                raise PathError(f"index {ix} touches one node and is not open")
        self.leaf_ix = {
            nid: tuple(i for i in node.indices if i not in self.sliced) for nid, node in net.nodes.items()
        }

    def size(self, ixs: Iterable[int]) -> int:
        return math.prod(self.dims[i] for i in ixs)

    def keep(self, ix: int, mask: int) -> bool:
        return ix in self.open or bool(self.inc[ix] & ~mask)

    def merge(self, ixl: Sequence[int], ixr: Sequence[int], mask: int) -> tuple[tuple[int, ...], int]:
        """Surviving indices (in executor order) and the step flop count."""
        kept = [i for i in ixl if self.keep(i, mask)]
        left = set(ixl)
        kept += [i for i in ixr if i not in left and self.keep(i, mask)]
        union = left.union(ixr)
        return tuple(kept), 8 * self.size(union)


def evaluate(net: TensorNetwork, tree: ContractionTree, sliced: Iterable[int] = ()):
    """Index tuples of every tree node and the full cost report."""
    model = CostModel(net, sliced)
    ixs = dict(model.leaf_ix)
    masks = dict(model.bit)
    heights = {leaf: 0 for leaf in tree.leaves}
    steps: list[StepCost] = []
    moved = 0
    for l, r, new in tree.steps:
        masks[new] = masks[l] | masks[r]
        out, flops = model.merge(ixs[l], ixs[r], masks[new])
        ixs[new] = out
        heights[new] = 1 + max(heights[l], heights[r])
        sa, sb, sc = model.size(ixs[l]), model.size(ixs[r]), model.size(out)
        moved += sa + sb + sc
        steps.append(
            StepCost(
                l, r, new,
                tuple(tuple(model.dims[i] for i in ixs[x]) for x in (l, r, new)),
                flops, math.log2(flops), flops / (sa + sb + sc), heights[new],
            )
        )
    num_slices = model.size(model.sliced)
    task = sum(s.flops for s in steps)
    total = task * num_slices
    sizes = [model.size(v) for v in ixs.values()]
    report = CostReport(
        log2_flops=math.log2(total) if total else 0.0,
        max_rank=max(len(v) for v in ixs.values()),
        log2_max_intermediate=math.log2(max(sizes)),
        compute_density=task / moved if moved else 0.0,
        per_step=steps,
        num_slices=num_slices,
        total_flops=total,
    )
    return ixs, report


def tree_cost(net: TensorNetwork, tree: ContractionTree, sliced: Iterable[int] = ()) -> CostReport:
    return evaluate(net, tree, sliced)[1]


def loss(report: CostReport, weights: LossWeights) -> float:
    task = report.task_flops
    penalty = 0.0
    if task:
        for s in report.per_step:
            penalty += max(0.0, weights.density_target - s.density) * (s.flops / task)
    return weights.w_complexity * report.log2_flops + weights.w_density * penalty


# ---------------------------------------------------------------------------
# greedy and linear orders


def linear_path(net: TensorNetwork) -> ContractionTree:
    ids = net.node_ids
    nxt = max(ids) + 1
    steps = []
    cur = ids[0]
    for nid in ids[1:]:
        steps.append((cur, nid, nxt))
        cur = nxt
        nxt += 1
    return ContractionTree(tuple(ids), tuple(steps))


def greedy_path(net: TensorNetwork, seed: int | None = None, temperature: float = 0.0) -> ContractionTree:
    """Repeatedly contract the connected pair minimizing size(out) - size(a) - size(b).

    Ties go to the lowest (min id, max id) pair.  With ``temperature > 0`` the
    size change is normalised by the operand sizes and perturbed by Gumbel
    noise drawn from ``seed``.
    """
    model = CostModel(net)
    rng = np.random.default_rng(seed) if temperature > 0 else None
    ixs = dict(model.leaf_ix)
    masks = dict(model.bit)
    sizes = {nid: model.size(v) for nid, v in ixs.items()}
    alive = set(ixs)
    where: dict[int, set[int]] = {}
    for nid, v in ixs.items():
        for i in v:
            where.setdefault(i, set()).add(nid)
    nxt = max(alive) + 1
    heap: list = []

    def push(x: int, y: int) -> None:
        x, y = min(x, y), max(x, y)
        out, _ = model.merge(ixs[x], ixs[y], masks[x] | masks[y])
        cost = model.size(out) - sizes[x] - sizes[y]
        if rng is not None:
            cost = cost / (sizes[x] + sizes[y]) - temperature * rng.gumbel()
        heapq.heappush(heap, (cost, x, y))

    seen = set()
    for i in sorted(where):
        for x in sorted(where[i]):
            for y in sorted(where[i]):
                if x < y and (x, y) not in seen:
                    seen.add((x, y))
                    push(x, y)

    steps = []
    while len(alive) > 1:
        while heap and not (heap[0][1] in alive and heap[0][2] in alive):
            heapq.heappop(heap)
        if heap:
            _, x, y = heapq.heappop(heap)
        else:
            # disconnected components: outer products, smallest first
            x, y = sorted(alive, key=lambda n: (sizes[n], n))[:2]
        new = nxt
        nxt += 1
        masks[new] = masks[x] | masks[y]
        ixs[new], _ = model.merge(ixs[x], ixs[y], masks[new])
        sizes[new] = model.size(ixs[new])
        steps.append((x, y, new))
        alive -= {x, y}
        for i in set(ixs[x]) | set(ixs[y]):
            where[i] -= {x, y}
        for i in ixs[new]:
            where[i].add(new)
        neighbours = {n for i in ixs[new] for n in where[i]} - {new}
        alive.add(new)
        for n in sorted(neighbours):
            push(n, new)
    return ContractionTree(tuple(net.node_ids), tuple(steps))


# ---------------------------------------------------------------------------
# annealing search


class _Search:
    """Mutable tree with cached per-node costs for local moves."""

    def __init__(self, model: CostModel, tree: ContractionTree, weights: LossWeights):
        self.model = model
        self.weights = weights
        self.kids: dict[int, list[int]] = {new: [l, r] for l, r, new in tree.steps}
        self.parent: dict[int, int] = {}
        for new, (l, r) in self.kids.items():
            self.parent[l] = new
            self.parent[r] = new
        self.root = tree.root
        self.leaves = tree.leaves
        self.ixs: dict[int, frozenset] = {nid: frozenset(v) for nid, v in model.leaf_ix.items()}
        self.mask: dict[int, int] = dict(model.bit)
        self.size: dict[int, int] = {nid: model.size(v) for nid, v in self.ixs.items()}
        self.flops: dict[int, int] = {}
        self.pen: dict[int, float] = {}
        for l, r, new in tree.steps:
            self._recompute(new)
        self.total = sum(self.flops.values())
        self.ptotal = sum(self.pen[n] * self.flops[n] for n in self.flops)

    def _recompute(self, n: int) -> None:
        l, r = self.kids[n]
        m = self.mask[l] | self.mask[r]
        self.mask[n] = m
        union = self.ixs[l] | self.ixs[r]
        kept = frozenset(i for i in union if self.model.keep(i, m))
        self.ixs[n] = kept
        self.size[n] = self.model.size(kept)
        f = 8 * self.model.size(union)
        self.flops[n] = f
        dens = f / (self.size[l] + self.size[r] + self.size[n])
        self.pen[n] = max(0.0, self.weights.density_target - dens)

    def loss(self) -> float:
        if not self.total:
            return 0.0
        return self.weights.w_complexity * math.log2(self.total) + self.weights.w_density * self.ptotal / self.total

    def _apply(self, changes: list[tuple[int, list[int]]]) -> list[tuple[int, list[int]]]:
        """Set children for nodes (bottom-up order) and refresh their costs; return undo list."""
        undo = [(n, list(self.kids[n])) for n, _ in changes]
        for n, kids in changes:
            self.kids[n] = list(kids)
            for k in kids:
                self.parent[k] = n
        for n, _ in changes:
            self.total -= self.flops[n]
            self.ptotal -= self.pen[n] * self.flops[n]
            self._recompute(n)
            self.total += self.flops[n]
            self.ptotal += self.pen[n] * self.flops[n]
        return undo

    def propose(self, rng: np.random.Generator) -> list[tuple[int, list[int]]] | None:
        internal = sorted(self.kids)
        x = internal[rng.integers(len(internal))]
        a, b = self.kids[x]
        a_in, b_in = a in self.kids, b in self.kids
        if not (a_in or b_in):
            return None
        if a_in and b_in and rng.random() < 0.5:
            a1, a2 = self.kids[a]
            b1, b2 = self.kids[b]
            if rng.random() < 0.5:
                return [(a, [a1, b1]), (b, [a2, b2]), (x, [a, b])]
            return [(a, [a1, b2]), (b, [b1, a2]), (x, [a, b])]
        if b_in and (not a_in or rng.random() < 0.5):
            other, inner = a, b
        else:
            other, inner = b, a
        q1, q2 = self.kids[inner]
        if rng.random() < 0.5:
            q1, q2 = q2, q1
        # (other, (q1, q2)) -> ((other, q1), q2)
        return [(inner, [other, q1]), (x, [inner, q2])]

    def tree(self) -> ContractionTree:
        steps = []
        stack = [(self.root, False)]
        while stack:
            n, done = stack.pop()
            if n not in self.kids:
                continue
            if done:
                l, r = self.kids[n]
                steps.append((l, r, n))
            else:
                stack.append((n, True))
                for k in reversed(self.kids[n]):
                    stack.append((k, False))
        return ContractionTree(self.leaves, tuple(steps))


def anneal_path(
    net: TensorNetwork,
    budget_iters: int = 2000,
    weights: LossWeights | None = None,
    seed: int = 0,
    log2_mem_cap: float | None = None,
    restart_prob: float = 0.05,
) -> tuple[ContractionTree, "SlicingPlan", CostReport]:
    """Random-restart greedy plus local subtree moves, accepting strict improvements.

    Iteration 0 is the deterministic greedy tree, so the result never scores
    worse than greedy.  Slicing is applied afterwards when a memory cap is set.
    """
    if budget_iters < 1:
        raise PathError("budget_iters must be >= 1")
    weights = weights or LossWeights()
    rng = np.random.default_rng(seed)
    model = CostModel(net)
    cur = _Search(model, greedy_path(net), weights)
    cur_loss = cur.loss()
    for _ in range(1, budget_iters):
        if len(cur.kids) < 2:
            break
        if rng.random() < restart_prob:
            cand = _Search(
                model,
                greedy_path(net, seed=int(rng.integers(2**32)), temperature=float(rng.uniform(0.01, 0.5))),
                weights,
            )
            cand_loss = cand.loss()
            if cand_loss < cur_loss:
                cur, cur_loss = cand, cand_loss
            continue
        move = cur.propose(rng)
        if move is None:
            continue
        undo = cur._apply(move)
        new_loss = cur.loss()
        if new_loss < cur_loss - 1e-12:
            cur_loss = new_loss
        else:
            cur._apply(undo)
    tree = cur.tree().validate(net)
    plan = SlicingPlan()
    if log2_mem_cap is not None:
        plan = general_slicing(net, tree, log2_mem_cap)
    return tree, plan, tree_cost(net, tree, plan.sliced_indices)


# ---------------------------------------------------------------------------
# slicing


@dataclass(frozen=True)
class LatticeParams:
    N: int
    d: int
    b: int
    S: int
    L: int
    rank_cap: int

    @property
    def m(self) -> int:
        return (self.N + self.b) // 2

    @property
    def log2_space_formula(self) -> float:
        """log2 of L**(N+b), the sliced space bound in elements."""
        return self.rank_cap * math.log2(self.L)

    @property
    def log2_time_formula(self) -> float:
        """log2 of 2 * L**(3N) complex multiply-adds."""
        return 1 + 3 * self.N * math.log2(self.L)


@dataclass
class SlicingPlan:
    sliced_indices: tuple[int, ...] = ()
    dims: dict[int, int] = field(default_factory=dict)
    overhead: float = 1.0
    lattice: LatticeParams | None = None

    @property
    def num_tasks(self) -> int:
        return math.prod(self.dims[i] for i in self.sliced_indices)

    @property
    def S(self) -> int:
        return len(self.sliced_indices)

    def assignment(self, task: int) -> dict[int, int]:
        """Mixed-radix decode of a task ordinal; the first sliced index is most significant."""
        if not 0 <= task < self.num_tasks:
            raise PathError(f"task {task} out of range")
        out = {}
        for ix in reversed(self.sliced_indices):
            task, out[ix] = divmod(task, self.dims[ix])
        return {ix: out[ix] for ix in self.sliced_indices}


def general_slicing(net: TensorNetwork, tree: ContractionTree, log2_mem_cap: float) -> SlicingPlan:
    """Slice indices of the largest tensor until every tensor fits under the cap.

    Among the largest tensor's sliceable indices, the one giving the lowest
    total flops is chosen (ties: lowest id).
    """
    base = tree_cost(net, tree).total_flops
    sliced: list[int] = []
    while True:
        ixs, rep = evaluate(net, tree, sliced)
        if rep.log2_max_intermediate <= log2_mem_cap + 1e-9:
            break
        model_dims = net.dims
        largest = max(ixs, key=lambda n: (math.prod(model_dims[i] for i in ixs[n]), -n))
        cands = [i for i in ixs[largest] if i not in net.open_indices]
        if not cands:
            raise SlicingError(
                f"tensor {largest} holds only open indices and exceeds the cap of 2^{log2_mem_cap}"
            )
        best = min(cands, key=lambda i: (tree_cost(net, tree, sliced + [i]).total_flops, i))
        sliced.append(best)
    return SlicingPlan(
        tuple(sliced), {i: net.dims[i] for i in sliced}, rep.total_flops / base if base else 1.0
    )


# ---------------------------------------------------------------------------
# lattice scheme


def lattice_slicing_params(N: int, d: int) -> LatticeParams:
    if N < 1 or d < 1:
        raise PathError("need N >= 1 and d >= 1")
    b = 1 if N % 2 else 2
    return LatticeParams(N=N, d=d, b=b, S=3 * (N - b) // 2, L=2 ** math.ceil(d / 8), rank_cap=N + b)


def lattice_order(N: int, b: int) -> tuple[list[list[int]], list[tuple[int, int]]]:
    """Site absorption order per half and the sliced midline edges.

    Rows count from the bottom (row 0).  Each half builds its lower-left
    m x m corner, then a downward tensor from the top row to row m, joins the
    two, and absorbs the remaining lower block site by site.
    """
    side = 2 * N
    m = (N + b) // 2
    S = 3 * (N - b) // 2
    phases = []
    for mirror in (False, True):
        col = (lambda c: side - 1 - c) if mirror else (lambda c: c)
        site = lambda r, c: r * side + col(c)  # noqa: E731
        corner = [site(r, c) for r in range(m) for c in range(m)]
        down = [site(r, c) for r in range(side - 1, m - 1, -1) for c in range(N)]
        rest = [site(r, c) for r in range(m - 1, -1, -1) for c in range(m, N)]
        phases.append([corner, down, rest])
    cut = [(r * side + N - 1, r * side + N) for r in range(side - S, side)]
    return phases, cut


def lattice_contraction_tree(net: TensorNetwork, params: LatticeParams) -> tuple[ContractionTree, SlicingPlan]:
    """Structured tree for a site network of a 2N x 2N lattice circuit."""
    lat = net.meta.get("lattice")
    side = 2 * params.N
    if not lat or lat["rows"] != side or lat["cols"] != side or set(net.nodes) != set(range(side * side)):
        raise PathError(f"network is not a {side}x{side} site-coarsened lattice")
    phases, cut = lattice_order(params.N, params.b)
    nxt = side * side
    steps: list[tuple[int, int, int]] = []

    def join(x: int, y: int) -> int:
        nonlocal nxt
        steps.append((x, y, nxt))
        nxt += 1
        return nxt - 1

    def chain(ids: list[int], start: int | None = None) -> int:
        cur = start
        for q in ids:
            cur = q if cur is None else join(cur, q)
        return cur

    halves = []
    for corner, down, rest in phases:
        c = chain(corner)
        dn = chain(down)
        halves.append(chain(rest, join(dn, c)))
    join(halves[0], halves[1])
    tree = ContractionTree(tuple(range(side * side)), tuple(steps)).validate(net)

    edges = lat["edges"]
    sliced = tuple(edges[f"{a},{b}"] for a, b in cut if f"{a},{b}" in edges)
    base = tree_cost(net, tree).total_flops
    after = tree_cost(net, tree, sliced).total_flops
    plan = SlicingPlan(sliced, {i: net.dims[i] for i in sliced}, after / base if base else 1.0, params)
    return tree, plan
