"""Sliced contraction: enumerate tasks, run them on a thread pool, reduce.

Each task pins the sliced indices while leaf tensors are materialized, so a
task never holds more than its sliced tensors.  With ``deterministic_reduce``
partial results are combined by a pairwise binary-counter reducer in
ascending task ordinal, which makes the output bit-identical for any worker
count or completion order.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import os
import queue
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import engine
from .engine import ContractionSpec, DenseTensor, FlopCounter
from .pathopt import ContractionTree, SlicingPlan, evaluate
from .precision import Flags, half_store
from .tensornet import TensorNetwork

CHECKPOINT_VERSION = 1


class ExecutorError(RuntimeError):
    pass


class MemoryCapError(ExecutorError):
    pass


class CheckpointError(ExecutorError):
    pass


@dataclass
class RunConfig:
    workers: int = 1
    precision_mode: str = "single"  # or "mixed"
    deterministic_reduce: bool = True
    memory_cap_log2: float | None = None
    checkpoint_path: str | None = None
    single_levels: int = 2
    fidelity_fraction: float = 1.0
    seed: int = 0
    max_tasks: int | None = None
    checkpoint_every: int = 16
    flush_noise: bool = True

    def __post_init__(self):
        if self.workers < 1:
            raise ExecutorError("workers must be >= 1")
        if self.precision_mode not in ("single", "mixed"):
            raise ExecutorError(f"unknown precision mode {self.precision_mode!r}")
        if not 0 < self.fidelity_fraction <= 1:
            raise ExecutorError("fidelity_fraction must lie in (0, 1]")

    def digest(self) -> str:
        keys = {k: getattr(self, k) for k in ("precision_mode", "single_levels", "fidelity_fraction", "seed", "flush_noise")}
        return hashlib.sha256(json.dumps(keys, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class SliceTask:
    assignment: dict[int, int]
    ordinal: int


@dataclass
class PartialSum:
    """Result of one task: a complex128 array over the open indices (scale applied)."""

    value: np.ndarray
    tasks_done: int = 1
    flops: int = 0
    flags: Flags = field(default_factory=Flags)
    max_elems: int = 0
    max_rank: int = 0


@dataclass
class RunResult:
    amplitudes: np.ndarray
    flops: int
    wall_time: float
    tasks: int
    tasks_run: int
    discarded_fraction: float
    complete: bool
    memory_high_water: int
    worker_busy: list[float]

    def report(self) -> dict:
        return {
            "flops": self.flops,
            "wall_time": self.wall_time,
            "tasks": self.tasks,
            "tasks_run": self.tasks_run,
            "discarded_fraction": self.discarded_fraction,
            "complete": self.complete,
            "memory_high_water_elems": self.memory_high_water,
            "per_worker_utilization": [b / self.wall_time if self.wall_time else 0.0 for b in self.worker_busy],
        }


def enumerate_tasks(plan: SlicingPlan) -> Iterator[SliceTask]:
    for k in range(plan.num_tasks):
        yield SliceTask(plan.assignment(k), k)


class _Prepared:
    """Per-run constants shared by every task."""

    def __init__(self, net: TensorNetwork, tree: ContractionTree, plan: SlicingPlan):
        self.net = net
        self.tree = tree
        self.plan = plan
        self.ixs, self.report = evaluate(net, tree, plan.sliced_indices)
        self.heights = tree.heights()
        self.specs = {}
        for l, r, new in tree.steps:
            shared = set(self.ixs[l]) & set(self.ixs[r])
            keep = [i for i in shared if i in self.ixs[new]]
            self.specs[new] = ContractionSpec.by_ids(self.ixs[l], self.ixs[r], keep, self.ixs[new])
        root_ix = self.ixs[tree.root]
        self.out_perm = [root_ix.index(i) for i in net.open_indices]
        self.out_shape = tuple(net.dims[i] for i in net.open_indices)


def prepare(net: TensorNetwork, tree: ContractionTree, plan: SlicingPlan) -> _Prepared:
    """Per-run constants for repeated ``run_slice`` calls on one plan."""
    return _Prepared(net, tree, plan)


def run_slice(
    net: TensorNetwork,
    tree: ContractionTree,
    task: SliceTask,
    config: RunConfig,
    prepared: _Prepared | None = None,
    plan: SlicingPlan | None = None,
) -> PartialSum:
    if prepared is None:
        plan = plan or SlicingPlan(tuple(task.assignment), {i: net.dims[i] for i in task.assignment})
        prepared = _Prepared(net, tree, plan)
    if set(task.assignment) != set(prepared.plan.sliced_indices):
        raise ExecutorError("task assignment does not match the slicing plan")
    cap = None if config.memory_cap_log2 is None else 2.0**config.memory_cap_log2
    counter = FlopCounter()
    flags = Flags()
    high = 0
    top_rank = 0
    live: dict[int, DenseTensor] = {}
    for leaf in tree.leaves:
        arr = net.materialize(leaf, task.assignment)
        t = DenseTensor.from_array(prepared.ixs[leaf], arr)
        high = max(high, t.size)
        top_rank = max(top_rank, t.rank)
        live[leaf] = t
    if cap is not None and high > cap:
        raise MemoryCapError(f"a leaf tensor of {high} elements exceeds the cap of {cap:.0f}")
    mixed = config.precision_mode == "mixed"
    for l, r, new in tree.steps:
        a, b = live.pop(l), live.pop(r)
        if mixed and prepared.heights[new] > config.single_levels:
            a, fa = half_store(a, config.flush_noise)
            b, fb = half_store(b, config.flush_noise)
            flags = flags | fa | fb
        c = engine.contract_pair_ttgt(a, b, prepared.specs[new], counter)
        if cap is not None and c.size > cap:
            raise MemoryCapError(f"step {(l, r, new)} produces {c.size} elements, above the cap of {cap:.0f}")
        high = max(high, c.size)
        top_rank = max(top_rank, c.rank)
        live[new] = c
    out = live[tree.root]
    value = np.transpose(out.logical(), prepared.out_perm) if out.rank else out.logical()
    return PartialSum(np.asarray(value).reshape(prepared.out_shape), 1, counter.total, flags, high, top_rank)


class PairwiseReducer:
    """Binary-counter summation in ascending ordinal order.

    Results may arrive in any order; out-of-order ones are buffered until
    their predecessors are in.  ``None`` marks a task that contributes
    nothing (filtered or skipped) but still advances the ordinal.
    """

    def __init__(self, shape: tuple[int, ...]):
        self.shape = shape
        self.next = 0
        self.stack: list[tuple[int, np.ndarray]] = []
        self.pending: dict[int, np.ndarray | None] = {}

    def add(self, ordinal: int, value: np.ndarray | None) -> None:
        if ordinal < self.next or ordinal in self.pending:
            raise ExecutorError(f"ordinal {ordinal} reduced twice")
        self.pending[ordinal] = value
        while self.next in self.pending:
            v = self.pending.pop(self.next)
            self.next += 1
            if v is None:
                continue
            level = 0
            while self.stack and self.stack[-1][0] == level:
                _, top = self.stack.pop()
                v = top + v
                level += 1
            self.stack.append((level, v))

    def total(self) -> np.ndarray:
        acc = np.zeros(self.shape, dtype=np.complex128)
        for _, v in self.stack:
            acc = acc + v
        return acc


def plan_digest(net: TensorNetwork, tree: ContractionTree, plan: SlicingPlan) -> str:
    h = hashlib.sha256()
    h.update(repr(net.signature()).encode())
    h.update(tree.to_json(plan.sliced_indices).encode())
    return h.hexdigest()[:16]


@dataclass
class _State:
    reducer: PairwiseReducer
    done: np.ndarray
    flops: int = 0
    flagged: int = 0
    considered: int = 0
    high: int = 0


def _save_checkpoint(path: str, state: _State, header: dict) -> None:
    arrays = {"done": np.packbits(state.done)}
    levels = []
    for k, (lvl, v) in enumerate(state.reducer.stack):
        arrays[f"stack{k}"] = v
        levels.append(lvl)
    pend = []
    for k, (ordv, v) in enumerate(sorted(state.reducer.pending.items())):
        pend.append([ordv, v is not None])
        if v is not None:
            arrays[f"pending{k}"] = v
    meta = dict(header)
    meta.update(
        next=state.reducer.next, levels=levels, pending=pend, flops=state.flops,
        flagged=state.flagged, considered=state.considered, high=state.high, ntasks=int(state.done.size),
    )
    arrays["header"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def _load_checkpoint(path: str, header: dict, shape: tuple[int, ...], ntasks: int) -> _State:
    with np.load(path) as z:
        meta = json.loads(bytes(z["header"]).decode())
        for key in ("version", "plan_hash", "config_hash"):
            if meta.get(key) != header[key]:
                raise CheckpointError(f"checkpoint {key} mismatch: {meta.get(key)} != {header[key]}")
        if meta["ntasks"] != ntasks:
            raise CheckpointError("checkpoint task count mismatch")
        red = PairwiseReducer(shape)
        red.next = meta["next"]
        red.stack = [(lvl, z[f"stack{k}"]) for k, lvl in enumerate(meta["levels"])]
        red.pending = {o: (z[f"pending{k}"] if has else None) for k, (o, has) in enumerate(meta["pending"])}
        done = np.unpackbits(z["done"])[:ntasks].astype(bool)
    return _State(red, done, meta["flops"], meta["flagged"], meta["considered"], meta["high"])


def _selected_tasks(n: int, config: RunConfig) -> np.ndarray:
    if config.fidelity_fraction >= 1.0:
        return np.ones(n, dtype=bool)
    keep = max(1, math.ceil(config.fidelity_fraction * n))
    sel = np.zeros(n, dtype=bool)
    sel[np.random.default_rng(config.seed).permutation(n)[:keep]] = True
    return sel


def execute(net: TensorNetwork, tree: ContractionTree, plan: SlicingPlan, config: RunConfig) -> RunResult:
    """Run every slice task and reduce the results over the open indices.

    In mixed mode flagged tasks are dropped and the sum is rescaled by
    selected/kept; with ``fidelity_fraction < 1`` a seeded subset of tasks is
    run and the sum rescaled by total/selected.
    """
    start = time.perf_counter()
    prepared = _Prepared(net, tree, plan)
    ntasks = plan.num_tasks
    shape = prepared.out_shape
    selected = _selected_tasks(ntasks, config)
    header = {"version": CHECKPOINT_VERSION, "plan_hash": plan_digest(net, tree, plan), "config_hash": config.digest()}
    if config.checkpoint_path and os.path.exists(config.checkpoint_path):
        state = _load_checkpoint(config.checkpoint_path, header, shape, ntasks)
    else:
        state = _State(PairwiseReducer(shape), np.zeros(ntasks, dtype=bool))
    todo = [k for k in range(ntasks) if not state.done[k]]
    if config.max_tasks is not None:
        todo = todo[: config.max_tasks]

    lock = threading.Lock()
    loose: list[np.ndarray] = []
    errors: list[BaseException] = []
    busy = [0.0] * config.workers
    tasks_q: queue.Queue = queue.Queue()
    for k in todo:
        tasks_q.put(k)
    since_save = 0

    def record(k: int, part: PartialSum | None) -> None:
        nonlocal since_save
        value = None
        if part is not None:
            state.flops += part.flops
            state.high = max(state.high, part.max_elems)
            state.considered += 1
            if config.precision_mode == "mixed" and part.flags.any:
                state.flagged += 1
            else:
                value = part.value
        if config.deterministic_reduce:
            state.reducer.add(k, value)
        elif value is not None:
            loose.append(value)
        state.done[k] = True
        since_save += 1
        if config.checkpoint_path and config.deterministic_reduce and since_save >= config.checkpoint_every:
            _save_checkpoint(config.checkpoint_path, state, header)
            since_save = 0

    def worker(w: int) -> None:
        while not errors:
            try:
                k = tasks_q.get_nowait()
            except queue.Empty:
                return
            t0 = time.perf_counter()
            try:
                part = run_slice(net, tree, SliceTask(plan.assignment(k), k), config, prepared) if selected[k] else None
            except BaseException as exc:  # surfaced after the pool drains
                with lock:
                    errors.append(exc)
                return
            busy[w] += time.perf_counter() - t0
            with lock:
                record(k, part)

    if config.workers == 1:
        worker(0)
    else:
        threads = [threading.Thread(target=worker, args=(w,), daemon=True) for w in range(config.workers)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    if errors:
        raise errors[0]

    complete = bool(state.done.all())
    if config.checkpoint_path and config.deterministic_reduce:
        _save_checkpoint(config.checkpoint_path, state, header)
    if config.deterministic_reduce:
        total = state.reducer.total()
    else:
        total = np.zeros(shape, dtype=np.complex128)
        for v in loose:
            total = total + v
    n_sel = int(selected.sum())
    kept = state.considered - state.flagged
    if complete:
        if kept == 0:
            raise ExecutorError("every task was filtered")
        total = total * (n_sel / kept) * (ntasks / n_sel)
    return RunResult(
        amplitudes=total,
        flops=state.flops,
        wall_time=time.perf_counter() - start,
        tasks=ntasks,
        tasks_run=len(todo),
        discarded_fraction=state.flagged / state.considered if state.considered else 0.0,
        complete=complete,
        memory_high_water=state.high,
        worker_busy=busy,
    )


def config_dict(config: RunConfig) -> dict:
    return asdict(config)
