import numpy as np
import pytest

from rqcsim.circuit import generate_rqc, parse_circuit
from rqcsim.executor import (
    CheckpointError,
    ExecutorError,
    MemoryCapError,
    PairwiseReducer,
    RunConfig,
    SliceTask,
    enumerate_tasks,
    execute,
    plan_digest,
    run_slice,
)
from rqcsim.oracle import all_probs, amplitude, index_to_bits, simulate
from rqcsim.pathopt import SlicingPlan, anneal_path, evaluate, general_slicing, greedy_path, lattice_slicing_params, tree_cost
from rqcsim.tensornet import build_network, build_site_network, simplify

BITS16 = "0110100110010110"


def oracle_bits(c, seed=0):
    """A bitstring drawn from the output distribution, so its amplitude is not an exact zero."""
    probs = all_probs(simulate(c))
    return index_to_bits(int(np.random.default_rng(seed).choice(len(probs), p=probs)), c.num_qubits)


@pytest.fixture(scope="module")
def sliced_4x4():
    """4x4 depth-8 site network with an annealed tree, sliced to at least 64 tasks."""
    c = generate_rqc(4, 4, 8, 0, "cz")
    net = build_site_network(c, oracle_bits(c))
    tree = anneal_path(net, budget_iters=300, seed=0)[0]
    cap = tree_cost(net, tree).log2_max_intermediate
    plan = SlicingPlan()
    while plan.num_tasks < 64:
        cap -= 1
        plan = general_slicing(net, tree, cap)
    return c, net, tree, plan


def test_enumerate_empty_plan():
    tasks = list(enumerate_tasks(SlicingPlan()))
    assert len(tasks) == 1 and tasks[0].assignment == {} and tasks[0].ordinal == 0


def test_enumerate_two_binary_indices():
    tasks = list(enumerate_tasks(SlicingPlan((3, 8), {3: 2, 8: 2})))
    assert [(t.assignment[3], t.assignment[8]) for t in tasks] == [(0, 0), (0, 1), (1, 0), (1, 1)]
    assert [t.ordinal for t in tasks] == [0, 1, 2, 3]


def test_lattice_task_count():
    p = lattice_slicing_params(5, 40)
    assert p.L**p.S == 32**6 == 2**30


def test_single_hadamard_slice():
    c = parse_circuit("1 1\n0 h 0\n")
    net = build_network(c, "0")
    part = run_slice(net, greedy_path(net), SliceTask({}, 0), RunConfig())
    assert abs(complex(part.value) - 2**-0.5) < 1e-7


def test_slice_rank_matches_prediction(sliced_4x4):
    _, net, tree, plan = sliced_4x4
    ixs, report = evaluate(net, tree, plan.sliced_indices)
    part = run_slice(net, tree, SliceTask(plan.assignment(5), 5), RunConfig(), plan=plan)
    assert part.max_elems == 2 ** round(report.log2_max_intermediate)
    assert part.max_rank == report.max_rank == max(len(v) for v in ixs.values())


def test_four_tasks_sum_to_unsliced():
    c = generate_rqc(3, 3, 8, 2, "fsim")
    net = simplify(build_network(c, "010110", range(3)))
    tree = greedy_path(net)
    candidates = [i for i in net.dims if i not in net.open_indices and net.dims[i] == 2]
    plan = SlicingPlan(tuple(candidates[:2]), {i: 2 for i in candidates[:2]})
    full = run_slice(net, tree, SliceTask({}, 0), RunConfig(), plan=SlicingPlan()).value
    parts = sum(run_slice(net, tree, t, RunConfig(), plan=plan).value for t in enumerate_tasks(plan))
    assert plan.num_tasks == 4
    assert np.max(np.abs(parts - full)) <= 1e-6 * np.max(np.abs(full))


def test_assignment_must_match_plan(sliced_4x4):
    _, net, tree, plan = sliced_4x4
    with pytest.raises(ExecutorError):
        run_slice(net, tree, SliceTask({}, 0), RunConfig(), plan=plan)


def test_matches_oracle(sliced_4x4):
    c, net, tree, plan = sliced_4x4
    want = amplitude(simulate(c), oracle_bits(c))
    got = complex(execute(net, tree, plan, RunConfig()).amplitudes)
    assert abs(got - want) <= 1e-6 * abs(want)


def test_worker_invariance(sliced_4x4):
    _, net, tree, plan = sliced_4x4
    outs = [execute(net, tree, plan, RunConfig(workers=w)).amplitudes for w in (1, 2, 4, 8)]
    assert all(o.tobytes() == outs[0].tobytes() for o in outs)


def test_flops_match_analytic(sliced_4x4):
    _, net, tree, plan = sliced_4x4
    res = execute(net, tree, plan, RunConfig())
    assert res.flops == tree_cost(net, tree, plan.sliced_indices).total_flops
    report = res.report()
    assert report["tasks"] == plan.num_tasks and report["complete"]
    assert set(report) >= {"flops", "wall_time", "discarded_fraction", "per_worker_utilization"}


def test_unsliced_flops_match_analytic():
    c = generate_rqc(4, 4, 8, 1, "cz")
    net = simplify(build_network(c, BITS16))
    tree = greedy_path(net)
    res = execute(net, tree, SlicingPlan(), RunConfig())
    assert res.flops == tree_cost(net, tree).total_flops


def test_pairwise_reducer_any_order():
    rng = np.random.default_rng(0)
    vals = [np.array(rng.standard_normal() + 0j) for _ in range(37)]
    ref = PairwiseReducer(())
    for k, v in enumerate(vals):
        ref.add(k, v)
    for seed in range(3):
        red = PairwiseReducer(())
        for k in np.random.default_rng(seed).permutation(37):
            red.add(int(k), vals[k])
        assert red.total().tobytes() == ref.total().tobytes()
    with pytest.raises(ExecutorError):
        ref.add(3, vals[3])


def test_checkpoint_at_zero(sliced_4x4, tmp_path):
    _, net, tree, plan = sliced_4x4
    fresh = execute(net, tree, plan, RunConfig()).amplitudes
    path = str(tmp_path / "ck.npz")
    empty = execute(net, tree, plan, RunConfig(checkpoint_path=path, max_tasks=0))
    assert not empty.complete and empty.tasks_run == 0
    resumed = execute(net, tree, plan, RunConfig(checkpoint_path=path))
    assert resumed.amplitudes.tobytes() == fresh.tobytes()


def test_checkpoint_at_half(sliced_4x4, tmp_path):
    _, net, tree, plan = sliced_4x4
    fresh = execute(net, tree, plan, RunConfig())
    path = str(tmp_path / "ck.npz")
    half = plan.num_tasks // 2
    first = execute(net, tree, plan, RunConfig(checkpoint_path=path, max_tasks=half, checkpoint_every=5))
    assert not first.complete and first.tasks_run == half
    second = execute(net, tree, plan, RunConfig(checkpoint_path=path, workers=3))
    assert second.complete and second.tasks_run == plan.num_tasks - half
    assert second.amplitudes.tobytes() == fresh.amplitudes.tobytes()
    assert second.flops == fresh.flops


def test_checkpoint_plan_mismatch(sliced_4x4, tmp_path):
    _, net, tree, plan = sliced_4x4
    path = str(tmp_path / "ck.npz")
    execute(net, tree, plan, RunConfig(checkpoint_path=path, max_tasks=3))
    other = general_slicing(net, tree, tree_cost(net, tree).log2_max_intermediate - 1)
    assert plan_digest(net, tree, other) != plan_digest(net, tree, plan)
    with pytest.raises(CheckpointError):
        execute(net, tree, other, RunConfig(checkpoint_path=path))
    with pytest.raises(CheckpointError):
        execute(net, tree, plan, RunConfig(checkpoint_path=path, precision_mode="mixed"))


def test_memory_cap(sliced_4x4):
    _, net, tree, plan = sliced_4x4
    need = tree_cost(net, tree, plan.sliced_indices).log2_max_intermediate
    res = execute(net, tree, plan, RunConfig(memory_cap_log2=need))
    assert res.memory_high_water <= 2**need
    with pytest.raises(MemoryCapError):
        execute(net, tree, plan, RunConfig(memory_cap_log2=need - 1))


def test_mixed_mode_close_to_single(sliced_4x4):
    c, net, tree, plan = sliced_4x4
    single = complex(execute(net, tree, plan, RunConfig()).amplitudes)
    mixed = execute(net, tree, plan, RunConfig(precision_mode="mixed"))
    assert 0 <= mixed.discarded_fraction < 1
    assert abs(complex(mixed.amplitudes) - single) <= 0.05 * abs(single)


def test_fidelity_fraction(sliced_4x4):
    _, net, tree, plan = sliced_4x4
    res = execute(net, tree, plan, RunConfig(fidelity_fraction=0.25, seed=3))
    assert res.complete and res.tasks_run == plan.num_tasks
    # only the selected quarter is contracted
    per_task = tree_cost(net, tree, plan.sliced_indices).task_flops
    assert res.flops == per_task * plan.num_tasks // 4
    again = execute(net, tree, plan, RunConfig(fidelity_fraction=0.25, seed=3))
    assert again.amplitudes.tobytes() == res.amplitudes.tobytes()


def test_config_validation():
    for kwargs in ({"workers": 0}, {"precision_mode": "double"}, {"fidelity_fraction": 0.0}):
        with pytest.raises(ExecutorError):
            RunConfig(**kwargs)
