import csv
import json

import pytest

from goodsched.cli import SchemaMismatch, comparison_csv, load_reports, main
from goodsched.config import ReplicaSpec, RunConfig
from goodsched.core import ConfigError
from goodsched.metrics import GoodputLevel

FAST = ["--set", 'length_source="oracle"']


# --- config ---------------------------------------------------------------------------

def test_config_roundtrip(tmp_path):
    cfg = RunConfig(policy="edf", B=8, replicas=[ReplicaSpec(4, 2.0)], waiting_time=None,
                    goodput={"level": "request", "weights": None})
    path = tmp_path / "c.json"
    cfg.save(path)
    back = RunConfig.load(path)
    assert back == cfg and back.goodput.level is GoodputLevel.REQUEST


@pytest.mark.parametrize("kw", [dict(p=0.0), dict(p=1.5), dict(policy="lifo"), dict(K=3),
                                dict(q=1.0), dict(waiting_time=-1), dict(f=2.0),
                                dict(subdeadline_mode="median")])
def test_config_rejects(kw):
    with pytest.raises(ConfigError):
        RunConfig(**kw)


def test_config_unknown_key():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"batch": 4})


# --- commands ------------------------------------------------------------------------------

def test_gen_is_byte_identical(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert main(["gen", "--kind", "mixed", "--count", "50", "--seed", "3", "--out", str(a)]) == 0
    assert main(["gen", "--kind", "mixed", "--count", "50", "--seed", "3", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_gen_default_name(tmp_path, monkeypatch):
    monkeypatch.setenv("GOODSCHED_OUT", str(tmp_path))
    assert main(["gen", "--kind", "chatbot", "--count", "5"]) == 0
    assert (tmp_path / "chatbot_5_s0.jsonl").exists()


def test_gen_unknown_kind(tmp_path):
    assert main(["gen", "--kind", "nope", "--out", str(tmp_path / "x")]) == 2
    assert not (tmp_path / "x").exists()


def test_run_and_report(tmp_path):
    trace = tmp_path / "mix.jsonl"
    main(["gen", "--kind", "mixed", "--count", "40", "--seed", "1", "--rate", "0.5",
          "--out", str(trace)])
    for pol in ("gmax", "fcfs"):
        assert main(["run", str(trace), "--policy", pol, "--out-dir", str(tmp_path)] + FAST) == 0
    results = [tmp_path / "mix_gmax.json", tmp_path / "mix_fcfs.json"]
    reports = load_reports(results)
    assert [r.policy for r in reports] == ["gmax", "fcfs"]
    with open(tmp_path / "mix_gmax.csv") as fh:
        assert next(csv.reader(fh)) == ["policy", "metric", "value"]
    out = tmp_path / "cmp.csv"
    assert main(["report"] + [str(p) for p in results] + ["--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert {r["policy"] for r in rows} == {"gmax", "fcfs"}
    assert max(float(r["goodput_ratio"]) for r in rows) == 1.0


def test_slo_scale_is_applied(tmp_path):
    trace = tmp_path / "c.jsonl"
    main(["gen", "--kind", "deepresearch", "--count", "5", "--out", str(trace)])
    main(["run", str(trace), "--policy", "fcfs", "--slo-scale", "1.5", "--out-dir",
          str(tmp_path)] + FAST)
    res = json.loads((tmp_path / "c_fcfs.json").read_text())
    assert res["config"]["slo_scale"] == 1.5
    assert all(r["slo"]["e2el_s"] == pytest.approx(30.0) for r in res["records"])


def test_config_file_and_overrides(tmp_path):
    cfg = tmp_path / "cfg.json"
    RunConfig(policy="edf", B=4, length_source="oracle").save(cfg)
    trace = tmp_path / "t.jsonl"
    main(["gen", "--kind", "chatbot", "--count", "10", "--out", str(trace)])
    assert main(["run", str(trace), "--config", str(cfg), "--B", "2", "--out-dir",
                 str(tmp_path)]) == 0
    res = json.loads((tmp_path / "t_edf.json").read_text())
    assert res["config"]["B"] == 2 and res["config"]["policy"] == "edf"


def test_missing_trace_leaves_nothing(tmp_path):
    assert main(["run", str(tmp_path / "none.jsonl"), "--out-dir", str(tmp_path)] + FAST) == 2
    assert list(tmp_path.iterdir()) == []


def test_bad_config_exits_nonzero(tmp_path):
    trace = tmp_path / "t.jsonl"
    main(["gen", "--kind", "chatbot", "--count", "3", "--out", str(trace)])
    assert main(["run", str(trace), "--set", "p=7", "--out-dir", str(tmp_path)]) == 2
    assert main(["run", str(trace), "--set", "nokey", "--out-dir", str(tmp_path)]) == 2
    assert sorted(p.name for p in tmp_path.iterdir()) == ["t.jsonl"]


def test_report_schema_errors(tmp_path):
    with pytest.raises(SchemaMismatch):
        load_reports([])
    with pytest.raises(SchemaMismatch):
        comparison_csv([])
    bogus = tmp_path / "x.json"
    bogus.write_text('{"hello": 1}')
    assert main(["report", str(bogus), "--out", str(tmp_path / "o.csv")]) == 2
    assert main(["report", "--out", str(tmp_path / "o.csv")]) == 2
    assert not (tmp_path / "o.csv").exists()


def test_analyze_small(tmp_path):
    out = tmp_path / "a.json"
    assert main(["analyze", "--instances", "3", "--grid", "100", "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert 0.117 <= rep["bound_p1"] <= 0.129
    assert rep["edf_goodput"] == pytest.approx(9) and rep["oracle_edf"] == 100
    assert rep["oracle_violations"] == 0
