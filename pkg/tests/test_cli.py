import json
import subprocess
import sys

import pytest

from rqcsim.circuit import parse_circuit
from rqcsim.cli import main


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def circuit_file(tmp_path):
    path = tmp_path / "c.txt"
    assert run("gen", "--rows", 4, "--cols", 4, "--depth", 8, "--style", "cz", "--seed", 7, "--out", path) == 0
    return path


def test_gen_deterministic(tmp_path, circuit_file):
    again = tmp_path / "again.txt"
    run("gen", "--rows", 4, "--cols", 4, "--depth", 8, "--style", "cz", "--seed", 7, "--out", again)
    assert circuit_file.read_bytes() == again.read_bytes()
    text = circuit_file.read_text()
    assert text.startswith("# manifest ")
    c = parse_circuit(text)
    assert (c.rows, c.cols, c.depth) == (4, 4, 8)
    side = json.loads((tmp_path / "c.txt.manifest.json").read_text())
    assert side["manifest"]["seed"] == 7 and text.split()[2] == side["manifest_hash"]
    other = tmp_path / "other.txt"
    run("gen", "--rows", 4, "--cols", 4, "--depth", 8, "--seed", 8, "--out", other)
    assert other.read_text() != text


def test_estimate_ten_by_ten(tmp_path):
    out = tmp_path / "est.json"
    assert run("estimate", "--rows", 10, "--cols", 10, "--depth", 40, "--out", out) == 0
    doc = json.loads(out.read_text())
    lat = doc["lattice"]
    assert (lat["S"], lat["L"], lat["b"], lat["rank_cap"]) == (6, 32, 1, 6)
    assert abs(lat["log2_macs"] - 76) <= 2
    assert lat["num_tasks"] == 32**6
    assert lat["log2_space_formula_elems"] == lat["log2_space_counted_elems"] == 30
    assert doc["manifest"]["subcommand"] == "estimate" and len(doc["manifest_hash"]) == 16


def test_estimate_ladder_is_ordered(tmp_path):
    out = tmp_path / "ladder.json"
    run("estimate", "--rows", 6, "--cols", 6, "--depth", 16, "--ladder", "--budget", 100, "--out", out)
    ladder = json.loads(out.read_text())["ladder"]
    values = [row["log2_flops"] for row in ladder]
    assert [row["strategy"] for row in ladder][-1] == "lattice"
    # greedy beats the worst randomized try and annealing never loses to greedy
    assert values[1] <= values[0] and values[2] <= values[1]


def test_run_then_validate(tmp_path, circuit_file):
    amps = tmp_path / "amps.json"
    assert run("run", "--circuit", circuit_file, "--open", "0,5,10", "--bits", "0110110011001", "--out", amps) == 0
    doc = json.loads(amps.read_text())
    assert len(doc["amplitudes"]) == 8 and doc["open_qubits"] == [0, 5, 10]
    report = json.loads((tmp_path / "amps.json.report.json").read_text())
    assert report["complete"] and report["manifest_hash"] == doc["manifest_hash"]
    verdict = tmp_path / "v.json"
    code = run("validate", "--circuit", circuit_file, "--amplitudes", amps, "--against-oracle", "--tol", 1e-6, "--out", verdict)
    res = json.loads(verdict.read_text())
    assert code == 0 and res["status"] == "PASS" and res["oracle"]["max_rel_error"] < 1e-6


@pytest.mark.parametrize("plan", ["anneal", "lattice"])
def test_run_with_other_plans(tmp_path, circuit_file, plan):
    amps = tmp_path / "amps.json"
    args = ["run", "--circuit", circuit_file, "--plan", plan, "--budget", 50, "--bits", "0" * 16, "--out", amps]
    if plan == "lattice":
        args += ["--network", "site"]
    assert run(*args) == 0
    assert run("validate", "--circuit", circuit_file, "--amplitudes", amps) == 0


def test_optimize_path_is_reused(tmp_path, circuit_file):
    path = tmp_path / "path.json"
    assert run("optimize", "--circuit", circuit_file, "--plan", "anneal", "--budget", 50, "--mem-cap-log2", 6, "--out", path) == 0
    doc = json.loads(path.read_text())
    assert doc["cost"]["log2_max_intermediate"] <= 6
    amps = tmp_path / "amps.json"
    assert run("run", "--circuit", circuit_file, "--path", path, "--workers", 2, "--out", amps) == 0
    assert run("validate", "--circuit", circuit_file, "--amplitudes", amps) == 0
    # a path for a different network is refused
    assert run("run", "--circuit", circuit_file, "--path", path, "--network", "raw", "--out", amps) == 2


def test_run_is_byte_reproducible(tmp_path, circuit_file):
    outs = []
    for w in (1, 3):
        out = tmp_path / f"a{w}.json"
        run("run", "--circuit", circuit_file, "--open", "corner:4", "--mem-cap-log2", 5, "--workers", w, "--out", out)
        outs.append(json.loads(out.read_text()))
    assert outs[0]["amplitudes"] == outs[1]["amplitudes"]


def test_validate_fails_on_wrong_amplitudes(tmp_path, circuit_file):
    amps = tmp_path / "amps.json"
    run("run", "--circuit", circuit_file, "--out", amps)
    doc = json.loads(amps.read_text())
    doc["amplitudes"][0][0] += 1e-3
    amps.write_text(json.dumps(doc))
    assert run("validate", "--circuit", circuit_file, "--amplitudes", amps) == 1


def test_validate_porter_thomas_and_samples(tmp_path):
    circ = tmp_path / "c.txt"
    run("gen", "--rows", 3, "--cols", 3, "--depth", 16, "--style", "fsim", "--seed", 1, "--out", circ)
    samples = tmp_path / "s.txt"
    assert run("sample", "--circuit", circ, "--num-samples", 50, "--open-count", 4, "--seed", 2, "--out", samples) == 0
    lines = samples.read_text().splitlines()
    assert lines[0].startswith("# manifest") and len(lines) == 51 and all(len(s) == 9 for s in lines[1:])
    hist = tmp_path / "h.csv"
    out = tmp_path / "v.json"
    code = run("validate", "--circuit", circ, "--porter-thomas", "--histogram", hist, "--samples", samples, "--out", out)
    res = json.loads(out.read_text())
    assert code in (0, 1) and "p_value" in res["porter_thomas"] and "f_xeb" in res["xeb"]
    rows = hist.read_text().splitlines()
    assert rows[1] == "bin_lo,bin_hi,count,expected" and len(rows) == 22


def test_stats(tmp_path, circuit_file):
    out = tmp_path / "s.json"
    assert run("stats", "--circuit", circuit_file, "--out", out) == 0
    doc = json.loads(out.read_text())
    assert doc["simplified"]["num_nodes"] <= doc["raw"]["num_nodes"]
    assert doc["site"]["num_nodes"] == 16


def test_bench_fusion(tmp_path):
    out = tmp_path / "b.csv"
    assert run("bench", "--kind", "fusion", "--repeats", 1, "--out", out) == 0
    lines = out.read_text().splitlines()
    assert lines[1] == "cases,fused_s,unfused_s,ratio"


def test_bench_scaling(tmp_path):
    out = tmp_path / "b.csv"
    assert run("bench", "--kind", "scaling", "--tasks", 16, "--workers-list", "1,2", "--out", out) == 0
    rows = [r.split(",") for r in out.read_text().splitlines()[2:]]
    assert [r[0] for r in rows] == ["1", "2"] and all(r[1] == "16" for r in rows)
    assert all(r[-1] == "True" for r in rows)


def test_usage_errors(tmp_path, circuit_file, capsys):
    assert run("gen", "--rows", 2) == 2
    assert run("frobnicate") == 2
    assert run("run", "--circuit", tmp_path / "missing.txt") == 2
    assert run("validate", "--circuit", circuit_file) == 2
    assert run("run", "--circuit", circuit_file, "--bits", "01") == 2
    err = capsys.readouterr().err
    assert "rqcsim tensornet:" in err
    bad = tmp_path / "bad.txt"
    bad.write_text("2 2\n0 hh 0\n")
    assert run("stats", "--circuit", bad) == 2
    assert "rqcsim circuit:" in capsys.readouterr().err


def test_workers_env(tmp_path, circuit_file, monkeypatch):
    out = tmp_path / "a.json"
    monkeypatch.setenv("RQCSIM_WORKERS", "3")
    assert run("run", "--circuit", circuit_file, "--out", out) == 0
    report = json.loads((tmp_path / "a.json.report.json").read_text())
    assert len(report["per_worker_utilization"]) == 3
    assert run("run", "--circuit", circuit_file, "--workers", 2, "--out", out) == 0
    report = json.loads((tmp_path / "a.json.report.json").read_text())
    assert len(report["per_worker_utilization"]) == 2
    monkeypatch.setenv("RQCSIM_WORKERS", "zero")
    assert run("run", "--circuit", circuit_file, "--out", out) == 2


def test_module_entry_point():
    cmd = [sys.executable, "-m", "rqcsim.cli"]
    proc = subprocess.run(cmd + ["gen", "--rows", "1", "--cols", "2", "--depth", "1"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("# manifest")
    proc = subprocess.run(cmd + ["--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "rqcsim" in proc.stdout
