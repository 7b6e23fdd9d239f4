"""Command-line entry point: ``rqcsim <subcommand> ...``.

Every output file carries the hash of a run manifest (subcommand, flags,
input hashes, tool version, seed).  JSON outputs embed the manifest; text and
CSV outputs start with a ``# manifest <hash>`` line and get a sidecar
``<out>.manifest.json``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from typing import Sequence

import numpy as np

from . import __version__
from .circuit import Circuit, CircuitError, generate_rqc, parse_circuit, serialize_circuit
from .engine import EngineError, bench_fusion, imbalanced_suite
from .executor import ExecutorError, RunConfig, execute
from .oracle import MAX_QUBITS, OracleError, amplitude, all_probs, simulate
from .pathopt import (
    ContractionTree,
    PathError,
    SlicingPlan,
    anneal_path,
    general_slicing,
    greedy_path,
    lattice_contraction_tree,
    lattice_slicing_params,
    tree_cost,
)
from .precision import PrecisionError
from .sampling import (
    SamplingError,
    compute_batch,
    corner_block,
    frugal_rejection_sample,
    porter_thomas_check,
    read_samples,
    to_batch,
    uniform_sample,
    xeb,
)
from .tensornet import NetworkError, build_network, build_site_network, network_stats, simplify

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

_MODULE_ERRORS = (
    (CircuitError, "circuit"),
    (OracleError, "oracle"),
    (NetworkError, "tensornet"),
    (PathError, "pathopt"),
    (EngineError, "engine"),
    (PrecisionError, "precision"),
    (ExecutorError, "executor"),
    (SamplingError, "sampling"),
)


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# manifests and output helpers


def _file_hash(path: str) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def build_manifest(args: argparse.Namespace) -> dict:
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "out")}
    inputs = {}
    for key in ("circuit", "path", "amplitudes", "samples"):
        path = getattr(args, key, None)
        if path:
            inputs[key] = _file_hash(path)
    return {
        "subcommand": args.command,
        "config": config,
        "inputs": inputs,
        "version": __version__,
        "seed": getattr(args, "seed", None),
    }


def manifest_hash(manifest: dict) -> str:
    return hashlib.sha256(json.dumps(manifest, sort_keys=True).encode()).hexdigest()[:16]


def _write_json(path: str | None, doc: dict, manifest: dict) -> None:
    doc = {"manifest_hash": manifest_hash(manifest), "manifest": manifest, **doc}
    text = json.dumps(doc, indent=1, sort_keys=False) + "\n"
    if path is None:
        sys.stdout.write(text)
        return
    with open(path, "w") as fh:
        fh.write(text)


def _write_text(path: str | None, body: str, manifest: dict) -> None:
    text = f"# manifest {manifest_hash(manifest)}\n" + body
    if path is None:
        sys.stdout.write(text)
        return
    with open(path, "w") as fh:
        fh.write(text)
    with open(path + ".manifest.json", "w") as fh:
        json.dump({"manifest_hash": manifest_hash(manifest), "manifest": manifest}, fh, indent=1)
        fh.write("\n")


def _rows_csv(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in row))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# shared argument handling


def _load_circuit(path: str | None) -> Circuit:
    if not path:
        raise UsageError("--circuit is required")
    try:
        with open(path) as fh:
            return parse_circuit(fh.read())
    except OSError as exc:
        raise UsageError(f"cannot read circuit file: {exc}") from None


def _open_qubits(spec: str | None, circuit: Circuit) -> tuple[int, ...]:
    if not spec:
        return ()
    if spec.startswith("corner:"):
        return tuple(corner_block(circuit.rows, circuit.cols, int(spec.split(":", 1)[1])))
    try:
        return tuple(int(q) for q in spec.replace(",", " ").split())
    except ValueError:
        raise UsageError(f"bad --open value {spec!r}") from None


def _bits(args: argparse.Namespace, circuit: Circuit, open_qubits: Sequence[int]) -> str:
    if args.bits is not None:
        return args.bits
    return "0" * (circuit.num_qubits - len(open_qubits))


def _network(args: argparse.Namespace, circuit: Circuit, bits: str, open_qubits: Sequence[int]):
    if args.network == "site":
        return build_site_network(circuit, bits, open_qubits)
    net = build_network(circuit, bits, open_qubits)
    return net if args.network == "raw" else simplify(net)


def _find_path(args, net) -> tuple[ContractionTree, SlicingPlan, str]:
    cap = args.mem_cap_log2
    if getattr(args, "path", None):
        with open(args.path) as fh:
            doc = json.load(fh)
        if doc.get("network_signature") and doc["network_signature"] != _net_hash(net):
            raise UsageError("path file was built for a different network (check --bits/--open/--network)")
        tree, sliced = ContractionTree.from_json(json.dumps(doc["tree"]))
        tree.validate(net)
        return tree, SlicingPlan(tuple(sliced), {i: net.dims[i] for i in sliced}), "file"
    method = args.plan
    if method == "greedy":
        tree = greedy_path(net)
        plan = general_slicing(net, tree, cap) if cap is not None else SlicingPlan()
    elif method == "anneal":
        tree, plan, _ = anneal_path(net, args.budget, seed=args.seed, log2_mem_cap=cap)
    elif method == "lattice":
        lat = net.meta.get("lattice")
        if not lat or lat["rows"] != lat["cols"] or lat["rows"] % 2:
            raise UsageError("--plan lattice needs --network site on a 2N x 2N lattice")
        tree, plan = lattice_contraction_tree(net, lattice_slicing_params(lat["rows"] // 2, args.depth_hint))
    else:
        raise UsageError(f"unknown plan method {method!r}")
    return tree, plan, method


def _net_hash(net) -> str:
    return hashlib.sha256(repr(net.signature()).encode()).hexdigest()[:16]


def _workers_default() -> int:
    env = os.environ.get("RQCSIM_WORKERS")
    if env is None:
        return 1
    try:
        value = int(env)
    except ValueError:
        raise UsageError(f"RQCSIM_WORKERS must be an integer, got {env!r}") from None
    if value < 1:
        raise UsageError("RQCSIM_WORKERS must be >= 1")
    return value


def _run_config(args) -> RunConfig:
    return RunConfig(
        workers=args.workers if args.workers is not None else _workers_default(),
        precision_mode=args.precision,
        deterministic_reduce=args.deterministic_reduce,
        memory_cap_log2=args.mem_cap_log2,
        checkpoint_path=args.checkpoint,
        single_levels=args.single_levels,
        fidelity_fraction=args.fidelity,
        seed=args.seed,
    )


def _amps_json(amps: np.ndarray) -> list[list[float]]:
    return [[float(a.real), float(a.imag)] for a in np.ravel(amps)]


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> int:
    circuit = generate_rqc(args.rows, args.cols, args.depth, args.seed, args.style)
    _write_text(args.out, serialize_circuit(circuit), build_manifest(args))
    return EXIT_OK


def cmd_stats(args) -> int:
    circuit = _load_circuit(args.circuit)
    open_qubits = _open_qubits(args.open, circuit)
    bits = _bits(args, circuit, open_qubits)
    raw = build_network(circuit, bits, open_qubits)
    doc = {
        "num_qubits": circuit.num_qubits,
        "depth": circuit.depth,
        "num_gates": len(circuit.gates),
        "circuit_digest": circuit.digest(),
        "raw": network_stats(raw),
        "simplified": network_stats(simplify(raw)),
        "site": network_stats(build_site_network(circuit, bits, open_qubits)),
    }
    _write_json(args.out, doc, build_manifest(args))
    return EXIT_OK


def cmd_optimize(args) -> int:
    circuit = _load_circuit(args.circuit)
    open_qubits = _open_qubits(args.open, circuit)
    bits = _bits(args, circuit, open_qubits)
    args.depth_hint = circuit.depth
    net = _network(args, circuit, bits, open_qubits)
    tree, plan, method = _find_path(args, net)
    rep = tree_cost(net, tree, plan.sliced_indices)
    doc = {
        "method": method,
        "network": args.network,
        "network_signature": _net_hash(net),
        "bits": bits,
        "open": list(open_qubits),
        "tree": json.loads(tree.to_json(plan.sliced_indices)),
        "cost": {
            "log2_flops": rep.log2_flops,
            "log2_macs": rep.log2_macs,
            "max_rank": rep.max_rank,
            "log2_max_intermediate": rep.log2_max_intermediate,
            "compute_density": rep.compute_density,
            "num_slices": rep.num_slices,
            "total_flops": rep.total_flops,
        },
    }
    _write_json(args.out, doc, build_manifest(args))
    return EXIT_OK


def _lattice_estimate(circuit: Circuit) -> dict:
    if circuit.rows != circuit.cols or circuit.rows % 2:
        raise UsageError("the lattice scheme needs a 2N x 2N circuit")
    params = lattice_slicing_params(circuit.rows // 2, circuit.depth)
    net = build_site_network(circuit, "0" * circuit.num_qubits)
    tree, plan = lattice_contraction_tree(net, params)
    rep = tree_cost(net, tree, plan.sliced_indices)
    return {
        "N": params.N,
        "d": params.d,
        "b": params.b,
        "S": params.S,
        "L": params.L,
        "rank_cap": params.rank_cap,
        "num_tasks": plan.num_tasks,
        "log2_flops": rep.log2_flops,
        "log2_macs": rep.log2_macs,
        "max_rank": rep.max_rank,
        "log2_time_formula_macs": params.log2_time_formula,
        # sliced tensor size: the L**(N+b) bound versus the largest tensor this tree builds
        "log2_space_formula_elems": params.log2_space_formula,
        "log2_space_counted_elems": rep.log2_max_intermediate,
        "space_formula_bytes_c64": 8 * 2.0**params.log2_space_formula,
        "space_counted_bytes_c64": 8 * 2.0**rep.log2_max_intermediate,
    }


def _ladder(circuit: Circuit, budget: int, seed: int, samples: int = 8) -> list[dict]:
    """Site-network complexity for successively better path strategies."""
    net = build_site_network(circuit, "0" * circuit.num_qubits)
    rng = np.random.default_rng(seed)
    worst = max(
        tree_cost(net, greedy_path(net, seed=int(rng.integers(2**32)), temperature=1.0)).log2_flops
        for _ in range(samples)
    )
    rows = [
        {"strategy": f"worst of {samples} randomized greedy", "log2_flops": worst},
        {"strategy": "greedy", "log2_flops": tree_cost(net, greedy_path(net)).log2_flops},
        {"strategy": f"anneal budget {budget}", "log2_flops": anneal_path(net, budget, seed=seed)[2].log2_flops},
    ]
    if circuit.rows == circuit.cols and circuit.rows % 2 == 0:
        rows.append({"strategy": "lattice", "log2_flops": _lattice_estimate(circuit)["log2_flops"]})
    return rows


def cmd_estimate(args) -> int:
    if args.circuit:
        circuit = _load_circuit(args.circuit)
    elif args.rows and args.cols and args.depth is not None:
        circuit = generate_rqc(args.rows, args.cols, args.depth, args.seed, args.style)
    else:
        raise UsageError("give --circuit or --rows/--cols/--depth")
    doc: dict = {"rows": circuit.rows, "cols": circuit.cols, "depth": circuit.depth}
    if args.scheme == "lattice":
        doc["lattice"] = _lattice_estimate(circuit)
    if args.ladder:
        doc["ladder"] = _ladder(circuit, args.budget, args.seed)
    _write_json(args.out, doc, build_manifest(args))
    return EXIT_OK


def cmd_run(args) -> int:
    circuit = _load_circuit(args.circuit)
    open_qubits = _open_qubits(args.open, circuit)
    bits = _bits(args, circuit, open_qubits)
    args.depth_hint = circuit.depth
    net = _network(args, circuit, bits, open_qubits)
    tree, plan, method = _find_path(args, net)
    config = _run_config(args)
    res = execute(net, tree, plan, config)
    manifest = build_manifest(args)
    if not res.complete:
        report = {"complete": False, **res.report()}
        _write_json(args.out, {"report": report}, manifest)
        return EXIT_OK
    batch = to_batch(circuit, bits, open_qubits, res.amplitudes, method, res.flops)
    doc = {
        "circuit_digest": circuit.digest(),
        "open_qubits": list(batch.open_qubits),
        "fixed_bits": batch.fixed_bits,
        "amplitudes": _amps_json(batch.amplitudes),
    }
    _write_json(args.out, doc, manifest)
    # timing and utilization vary run to run, so they go beside the result
    report_path = (args.out + ".report.json") if args.out else None
    if report_path:
        with open(report_path, "w") as fh:
            json.dump({"manifest_hash": manifest_hash(manifest), **res.report()}, fh, indent=1)
            fh.write("\n")
    else:
        sys.stderr.write(json.dumps(res.report()) + "\n")
    return EXIT_OK


def cmd_sample(args) -> int:
    circuit = _load_circuit(args.circuit)
    n = circuit.num_qubits
    k = min(args.open_count, n)
    open_qubits = tuple(corner_block(circuit.rows, circuit.cols, k))
    rng = np.random.default_rng(args.seed)
    config = _run_config(args)

    def batches():
        for _ in range(args.max_batches):
            fixed = "".join(rng.choice(["0", "1"], size=n - k))
            yield compute_batch(circuit, fixed, open_qubits, config, path=args.plan, budget=args.budget, seed=args.seed)

    samples = frugal_rejection_sample(batches(), args.num_samples, args.seed, args.envelope)
    body = "".join(s + "\n" for s in samples.bitstrings)
    _write_text(args.out, body, build_manifest(args))
    sys.stderr.write(
        json.dumps({"accepted": len(samples.bitstrings), "candidates": samples.candidates_used}) + "\n"
    )
    return EXIT_OK


def cmd_validate(args) -> int:
    circuit = _load_circuit(args.circuit)
    if circuit.num_qubits > MAX_QUBITS:
        raise UsageError(f"validation uses the state-vector oracle, limited to {MAX_QUBITS} qubits")
    state = simulate(circuit)
    manifest = build_manifest(args)
    results: dict = {}
    ok = True
    if args.amplitudes:
        with open(args.amplitudes) as fh:
            doc = json.load(fh)
        if "amplitudes" not in doc:
            raise UsageError("amplitude file holds no amplitudes (incomplete run?)")
        open_qubits = tuple(doc["open_qubits"])
        amps = np.array([complex(re, im) for re, im in doc["amplitudes"]])
        batch = to_batch(circuit, doc["fixed_bits"], open_qubits, amps.reshape(-1))
        worst = 0.0
        for j, got in enumerate(batch.amplitudes):
            want = amplitude(state, batch.bitstring(j))
            # relative error, with an absolute floor of 1e-9 near zero
            worst = max(worst, abs(got - want) / max(abs(want), 1e-9 / args.tol))
        passed = bool(worst < args.tol)
        results["oracle"] = {"max_rel_error": float(worst), "tol": args.tol, "pass": passed}
        ok &= passed
    if args.porter_thomas:
        rep = porter_thomas_check(all_probs(state), bins=args.bins)
        passed = bool(rep.p_value > args.alpha)
        results["porter_thomas"] = {"chi2": rep.chi2, "dof": rep.dof, "p_value": rep.p_value, "pass": passed}
        ok &= passed
        if args.histogram:
            rows = [
                (float(rep.edges[i]), float(rep.edges[i + 1]), int(rep.counts[i]), float(rep.expected[i]))
                for i in range(len(rep.counts))
            ]
            _write_text(args.histogram, _rows_csv(["bin_lo", "bin_hi", "count", "expected"], rows), manifest)
    if args.samples:
        strings = read_samples(args.samples)
        probs = all_probs(state)
        rep = xeb(strings, probs, circuit.num_qubits)
        base = xeb(uniform_sample(circuit.num_qubits, len(strings), args.seed), probs, circuit.num_qubits)
        results["xeb"] = {"f_xeb": rep.f_xeb, "sigma": rep.sigma, "uniform_f_xeb": base.f_xeb, "uniform_sigma": base.sigma}
    if not results:
        raise UsageError("nothing to validate: give --amplitudes, --porter-thomas or --samples")
    results["status"] = "PASS" if ok else "FAIL"
    _write_json(args.out, results, manifest)
    print(results["status"], file=sys.stderr)
    return EXIT_OK if ok else EXIT_FAIL


def scaling_instance(seed: int, num_tasks: int):
    """A 4x4 depth-8 site network sliced into exactly ``num_tasks`` tasks (a power of two)."""
    circuit = generate_rqc(4, 4, 8, seed, "cz")
    net = build_site_network(circuit, "0" * 16)
    tree = greedy_path(net)
    cap = tree_cost(net, tree).log2_max_intermediate
    plan = general_slicing(net, tree, cap)
    while plan.num_tasks < num_tasks and cap > 0:
        cap -= 1
        plan = general_slicing(net, tree, cap)
    # any prefix of the sliced indices is itself a valid plan
    chosen, count = [], 1
    for i in plan.sliced_indices:
        if count >= num_tasks:
            break
        chosen.append(i)
        count *= net.dims[i]
    if count != num_tasks:
        raise UsageError(f"cannot slice this instance into exactly {num_tasks} tasks")
    return net, tree, SlicingPlan(tuple(chosen), {i: net.dims[i] for i in chosen})


def cmd_bench(args) -> int:
    manifest = build_manifest(args)
    if args.kind == "fusion":
        res = bench_fusion(imbalanced_suite(args.seed), repeats=args.repeats)
        rows = [(res["cases"], res["fused_s"], res["unfused_s"], res["ratio"])]
        _write_text(args.out, _rows_csv(["cases", "fused_s", "unfused_s", "ratio"], rows), manifest)
        return EXIT_OK
    net, tree, plan = scaling_instance(args.seed, args.tasks)
    workers = [int(w) for w in args.workers_list.split(",")]
    rows, base, ref = [], None, None
    for w in workers:
        res = execute(net, tree, plan, RunConfig(workers=w))
        base = base or res.wall_time
        identical = ref is None or res.amplitudes.tobytes() == ref
        ref = ref or res.amplitudes.tobytes()
        rows.append((w, plan.num_tasks, res.wall_time, base / res.wall_time, identical))
    _write_text(args.out, _rows_csv(["workers", "tasks", "wall_s", "speedup", "bit_identical"], rows), manifest)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--workers", type=int, default=None, help="default: $RQCSIM_WORKERS or 1")
    p.add_argument("--precision", choices=("single", "mixed"), default="single")
    p.add_argument("--deterministic-reduce", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--single-levels", type=int, default=2)
    p.add_argument("--fidelity", type=float, default=1.0, help="fraction of slice tasks to run")


def _add_net_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--circuit", required=True)
    p.add_argument("--bits", default=None, help="fixed output bits (non-open qubits, qubit order)")
    p.add_argument("--open", default=None, help="open qubits, e.g. '0,1,2' or 'corner:4'")
    p.add_argument("--network", choices=("simplified", "raw", "site"), default="simplified")


def _add_path_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--path", default=None, help="path JSON written by 'optimize'")
    p.add_argument("--plan", choices=("greedy", "anneal", "lattice"), default="greedy")
    p.add_argument("--budget", type=int, default=2000)
    p.add_argument("--mem-cap-log2", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rqcsim", description="Tensor-network simulator for random quantum circuits.")
    parser.add_argument("--version", action="version", version=f"rqcsim {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a random circuit file")
    p.add_argument("--rows", type=int, required=True)
    p.add_argument("--cols", type=int, required=True)
    p.add_argument("--depth", type=int, required=True)
    p.add_argument("--style", choices=("cz", "fsim"), default="cz")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("stats", help="network statistics before and after simplification")
    _add_net_flags(p)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("optimize", help="find a contraction path and slicing plan")
    _add_net_flags(p)
    _add_path_flags(p)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("estimate", help="analytic cost of the lattice scheme and a path-strategy ladder")
    p.add_argument("--circuit", default=None)
    p.add_argument("--rows", type=int, default=None)
    p.add_argument("--cols", type=int, default=None)
    p.add_argument("--depth", type=int, default=None)
    p.add_argument("--style", choices=("cz", "fsim"), default="cz")
    p.add_argument("--scheme", choices=("lattice", "none"), default="lattice")
    p.add_argument("--ladder", action="store_true")
    p.add_argument("--budget", type=int, default=300)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("run", help="contract the network and write amplitudes")
    _add_net_flags(p)
    _add_path_flags(p)
    _add_run_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sample", help="frugal rejection sampling from amplitude batches")
    p.add_argument("--circuit", required=True)
    p.add_argument("--num-samples", type=int, required=True)
    p.add_argument("--open-count", type=int, default=9)
    p.add_argument("--envelope", type=float, default=10.0)
    p.add_argument("--max-batches", type=int, default=1000)
    p.add_argument("--plan", choices=("greedy", "anneal"), default="greedy")
    p.add_argument("--budget", type=int, default=200)
    p.add_argument("--mem-cap-log2", type=float, default=None)
    _add_run_flags(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("validate", help="check results against the state-vector oracle")
    p.add_argument("--circuit", required=True)
    p.add_argument("--amplitudes", default=None, help="amplitude JSON written by 'run'")
    p.add_argument("--against-oracle", action="store_true", help="accepted for clarity; the oracle is always used")
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--porter-thomas", action="store_true")
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--alpha", type=float, default=1e-3)
    p.add_argument("--histogram", default=None, help="CSV path for the Porter-Thomas histogram")
    p.add_argument("--samples", default=None, help="sample file for an XEB estimate")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("bench", help="fused-kernel or worker-scaling benchmark")
    p.add_argument("--kind", choices=("fusion", "scaling"), default="fusion")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--tasks", type=int, default=256)
    p.add_argument("--workers-list", default="1,2,4,8")
    p.set_defaults(func=cmd_bench)

    for name, action in sub.choices.items():
        action.add_argument("--seed", type=int, default=0)
        action.add_argument("--out", default=None, help="output file (default: stdout)")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"rqcsim: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"rqcsim: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _all_module_errors() as exc:
        module = next(name for cls, name in _MODULE_ERRORS if isinstance(exc, cls))
        print(f"rqcsim {module}: {exc}", file=sys.stderr)
        return EXIT_USAGE


def _all_module_errors() -> tuple[type, ...]:
    return tuple(cls for cls, _ in _MODULE_ERRORS)


if __name__ == "__main__":
    sys.exit(main())
