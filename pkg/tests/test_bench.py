import json
import math
from collections import Counter

import pytest

from disagg_nvm.bench.crashmatrix import crash_matrix, load_script, plan_points
from disagg_nvm.bench.runner import bank, run, sweep
from disagg_nvm.bench.workload import WorkloadSpec, ZipfKeys, generate_ops, value_for, value_matches
from disagg_nvm.cli import main
from disagg_nvm.errors import ConfigError
from disagg_nvm.frontend import Mode
from disagg_nvm.structures import Kind


@pytest.mark.parametrize("kw", [
    dict(put_ratio=30), dict(distribution="pareto"), dict(ops=-1), dict(keys=0),
    dict(cache_fraction=1.5), dict(writers=0), dict(kind="stack", writers=2),
    dict(kind="queue", readers=1),
])
def test_spec_rejects_bad_values(kw):
    with pytest.raises(ConfigError):
        WorkloadSpec(**kw).validate()


def test_zipf_is_seeded_and_skewed():
    a, b = ZipfKeys(1000, 0.99, seed=4), ZipfKeys(1000, 0.99, seed=4)
    xs = a.take(20_000)
    assert xs == b.take(20_000)
    assert all(0 <= x < 1000 for x in xs)
    top = Counter(xs).most_common(1)[0][1] / len(xs)
    h = sum(1 / k ** 0.99 for k in range(1, 1001))
    assert math.isclose(top, 1 / h, rel_tol=0.1)


def test_values_carry_their_key():
    assert value_matches(7, value_for(7, 3))
    assert not value_matches(8, value_for(7, 3))


def test_put_ratio_is_respected():
    spec = WorkloadSpec(kind="hash", put_ratio=50, ops=4000, keys=100, seed=1)
    ops = generate_ops(spec)
    puts = sum(op[0] in ("insert", "update") for op in ops)
    assert len(ops) == 4000 and abs(puts / 4000 - 0.5) < 0.05


def test_zero_op_run():
    r = run(WorkloadSpec(ops=0, keys=10))
    assert r.ok and r.ops == 0 and r.throughput == 0


def test_runs_are_reproducible():
    spec = WorkloadSpec(kind="hash", mode="RC", put_ratio=50, ops=300, keys=500, seed=9)
    assert run(spec).to_json() == run(spec).to_json()
    other = run(WorkloadSpec(kind="hash", mode="RC", put_ratio=50, ops=300, keys=500, seed=10))
    assert other.trace_digest != run(spec).trace_digest


def test_run_with_readers_reports_reader_throughput():
    r = run(WorkloadSpec(kind="bst", mode="RCB", ops=400, keys=1000, preload=200,
                         readers=2, reader_ops=300, seed=2))
    assert r.ok and r.reader_ops == 600 and r.reader_throughput > 0


def test_sweep_batch_size():
    reports = sweep(WorkloadSpec(kind="mvbst", ops=300, keys=1000, seed=1), "batch_size", ["1", "16"])
    assert [r.name for r in reports] == ["batch_size=1", "batch_size=16"]
    assert all(r.ok for r in reports)
    assert reports[1].write_verbs < reports[0].write_verbs
    with pytest.raises(ConfigError):
        sweep(WorkloadSpec(), "colour", [1])


@pytest.mark.parametrize("index", ["hash", "bpt"])
def test_bank_conserves_money(index):
    r = bank(accounts=20, txs=400, index=index, seed=3)
    assert r.ok, r.violations


def test_bank_survives_a_crash():
    r = bank(accounts=10, txs=300, seed=5, crash_at=100)
    assert r.ok, r.violations
    assert r.recovery


def test_bank_rejects_bad_args():
    with pytest.raises(ConfigError):
        bank(index="list")
    with pytest.raises(ConfigError):
        bank(accounts=0)


def test_small_crash_matrix():
    rep = crash_matrix(total=16, seed=2, n_ops=12)
    assert rep.ok and rep.cases == 16
    assert rep.digest == crash_matrix(total=16, seed=2, n_ops=12).digest


def test_plan_covers_kinds_and_nodes():
    pts = plan_points(total=64, seed=0, n_ops=12)
    assert len(pts) == 64
    assert len(plan_points(total=10, seed=0, n_ops=12)) == 10
    assert {p.node for p in pts} == {"frontend", "backend"}
    assert len({p.kind for p in pts}) == len(Kind)


def test_script_loading(tmp_path):
    path = tmp_path / "pts.json"
    path.write_text(json.dumps([
        {"kind": "bst", "mode": "R", "node": "frontend", "phase": "any", "nth": 3, "ops": 12},
        {"kind": "queue", "node": "backend", "at_event": 40},
    ]))
    pts = load_script(path)
    assert pts[0].kind is Kind.BST and pts[0].at_event is not None
    assert pts[1].mode is Mode.RCB and pts[1].at_event == 40
    path.write_text(json.dumps([{"kind": "bst", "node": "switch"}]))
    with pytest.raises(ConfigError):
        load_script(path)


# -- CLI ----------------------------------------------------------------------


def test_cli_run_prints_table(capsys):
    assert main(["run", "--kind", "hash", "--ops", "50", "--keys", "100"]) == 0
    assert "HASH" in capsys.readouterr().out


def test_cli_jsonl_to_stdout(capsys):
    assert main(["bank", "--accounts", "5", "--txs", "40", "--jsonl", "-"]) == 0
    rec = json.loads(capsys.readouterr().out.strip())
    assert rec["name"] == "bank" and rec["violations"] == []


def test_cli_jsonl_to_file(tmp_path):
    out = tmp_path / "s.jsonl"
    assert main(["sweep", "--kind", "bst", "--ops", "40", "--keys", "100", "--param", "batch_size",
                 "--values", "1,8", "--jsonl", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 2


def test_cli_crash_matrix(capsys):
    assert main(["crash-matrix", "--points", "8", "--ops", "12", "--kinds", "stack,hash"]) == 0
    assert "cases 8  passed 8" in capsys.readouterr().out


def test_cli_config_errors_exit_2(capsys, tmp_path):
    assert main(["run", "--kind", "stack", "--writers", "2", "--ops", "10"]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps([{"kind": "bst", "node": "switch"}]))
    assert main(["crash-matrix", "--script", str(bad)]) == 2
    assert "error:" in capsys.readouterr().err


def test_cli_usage_errors():
    with pytest.raises(SystemExit) as e:
        main(["run", "--put", "42"])
    assert e.value.code == 2
    with pytest.raises(SystemExit):
        main([])
