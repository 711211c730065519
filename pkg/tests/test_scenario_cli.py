import csv
import json

import numpy as np
import pytest

from manip_recal import cli
from manip_recal import scenario as sc
from manip_recal.boed import BoedTrace
from manip_recal.calib import NotConverged


def run(argv):
    return cli.main(argv + ["--quiet"])


def write_cfg(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def test_builtin_scenarios_validate():
    names = sc.builtin_names()
    assert {"test1", "nominal", "zero_fault", "unfixable", "joint6_detect"} <= set(names)
    for n in names:
        sc.builtin(n)


@pytest.mark.parametrize(
    "patch",
    [
        {"bogus": 1},
        {"boed": {"iterations": 0}},
        {"boed": {"alpha1": 0.7, "alpha2": 0.7}},
        {"noise": {"sigma_p": -1}},
        {"true_delta": {"phi9": 0.1}},
        {"mask": ["phi1", "zz"]},
        {"fault_script": [{"time": 1.0, "joint": 8, "bias": 0.1}]},
        {"fault_script": [{"time": 2.0, "joint": 1, "bias": 0.1}, {"time": 1.0, "joint": 1, "bias": 0.1}]},
        {"monsid": {"persistence": 0}},
        {"chain": "puma"},
    ],
)
def test_schema_rejects(patch):
    cfg = sc.builtin("test1")
    cfg.update(patch)
    with pytest.raises(sc.ConfigError):
        sc.prepare(cfg)


def test_seed_override():
    cfg = sc.prepare(sc.builtin("test1"), seed=99)
    assert cfg["seed"] == 99
    assert not np.array_equal(sc.rng_for(cfg, 1).random(3), sc.rng_for(sc.builtin("test1"), 1).random(3))


def test_ground_truth_sign():
    truth = sc.ground_truth(sc.builtin("test1"), sc.build_chain(sc.builtin("test1")))
    assert truth == {"phi7": pytest.approx(0.5235)}
    assert sc.ground_truth(sc.builtin("unfixable"), sc.build_chain(sc.builtin("unfixable"))) == {}


def test_malformed_config_exit_3_no_artifacts(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    out = tmp_path / "out"
    assert run(["calibrate", "--config", str(bad), "--out", str(out)]) == 3
    assert not out.exists()
    p = write_cfg(tmp_path, {"seed": 1, "unknown": 2})
    for sub in ("calibrate", "detect", "mission", "ambiguity"):
        assert run([sub, "--config", p, "--out", str(out)]) == 3
    assert not out.exists()
    assert run(["calibrate", "--out", str(out)]) == 3


def test_calibrate_test1(tmp_path):
    assert run(["calibrate", "--config", "test1", "--out", str(tmp_path)]) == 0
    d = json.loads((tmp_path / "calibration.json").read_text())
    assert d["accuracy"]["phi7"] >= 90.0
    assert d["validation"]["passed"]
    trace = BoedTrace.from_csv(tmp_path / "boed_trace.csv")
    assert len(trace) == 38
    with open(tmp_path / "validation.csv") as fh:
        assert len(list(csv.reader(fh))) == 1 + 3 * 10


def test_calibrate_zero_fault(tmp_path):
    assert run(["calibrate", "--config", "zero_fault", "--out", str(tmp_path)]) == 0
    d = json.loads((tmp_path / "calibration.json").read_text())
    assert "accuracy" not in d and d["validation"]["passed"]


def test_calibrate_validation_failure_exit_1(tmp_path):
    cfg = sc.builtin("test1")
    cfg["qp_bounds"] = {"angle": 0.05, "length": 0.05}
    assert run(["calibrate", "--config", write_cfg(tmp_path, cfg), "--out", str(tmp_path / "o")]) == 1
    assert not json.loads((tmp_path / "o" / "calibration.json").read_text())["validation"]["passed"]


def test_calibrate_not_converged_exit_2(tmp_path, monkeypatch):
    import manip_recal.pipeline as pl

    def boom(cfg):
        raise NotConverged("stalled", None)

    monkeypatch.setattr(pl, "run_calibration", boom)
    assert run(["calibrate", "--config", "test1", "--out", str(tmp_path)]) == 2


def test_detect_joint6(tmp_path):
    assert run(["detect", "--config", "joint6_detect", "--out", str(tmp_path)]) == 0
    recs = [json.loads(l) for l in (tmp_path / "health.jsonl").read_text().splitlines()]
    faulty = [r for r in recs if r["event"] == "faulty"]
    assert len(faulty) == 1 and faulty[0]["elements"] == ["J6_Angle_Pos"]
    state = json.loads((tmp_path / "engine_state.json").read_text())
    assert abs(state["slices_processed"] - 500) <= 1 and state["slices_dropped"] == 0


def test_detect_nominal_no_faulty(tmp_path):
    cfg = sc.builtin("joint6_detect")
    cfg["fault_script"] = []
    assert run(["detect", "--config", write_cfg(tmp_path, cfg), "--out", str(tmp_path)]) == 0
    recs = [json.loads(l) for l in (tmp_path / "health.jsonl").read_text().splitlines()]
    assert not any(r["event"] == "faulty" for r in recs)


def test_mission_exit_codes(tmp_path):
    assert run(["mission", "--config", "test1", "--out", str(tmp_path / "a")]) == 0
    log = [json.loads(l) for l in (tmp_path / "a" / "mission.jsonl").read_text().splitlines()]
    states = [r["state"] for r in log]
    assert "HALTED" in states and "RECALIBRATING" in states and log[-1]["event"] == "mission_complete"
    assert run(["mission", "--config", "nominal", "--out", str(tmp_path / "b")]) == 0
    assert "HALTED" not in (tmp_path / "b" / "mission.jsonl").read_text()
    assert run(["mission", "--config", "unfixable", "--out", str(tmp_path / "c")]) == 4
    assert run(["mission", "--config", "joint6_detect", "--out", str(tmp_path / "d")]) == 3


def test_ambiguity_counts(tmp_path, capsys):
    assert cli.main(["ambiguity", "--out", str(tmp_path)]) == 0
    assert "15 groups" in capsys.readouterr().out
    d = json.loads((tmp_path / "ambiguity_groups.json").read_text())
    assert len(d["groups"]) == 15
    cli.main(["ambiguity", "--joints", "1", "--out", str(tmp_path)])
    assert "3 groups" in capsys.readouterr().out
    cli.main(["ambiguity", "--duplicate-encoders", "--out", str(tmp_path)])
    assert "22 groups" in capsys.readouterr().out


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("MANIP_RECAL_OUT", str(tmp_path / "env"))
    assert run(["ambiguity"]) == 0
    assert (tmp_path / "env" / "ambiguity_groups.json").exists()


def test_quiet_prints_nothing(tmp_path, capsys):
    run(["detect", "--config", "joint6_detect", "--out", str(tmp_path)])
    assert capsys.readouterr().out == ""


def test_runs_are_byte_identical(tmp_path):
    for sub, files in (("calibrate", ("boed_trace.csv", "calibration.json", "validation.csv")),
                       ("detect", ("health.jsonl", "engine_state.json"))):
        cfg = "test1" if sub == "calibrate" else "joint6_detect"
        run([sub, "--config", cfg, "--out", str(tmp_path / "x")])
        run([sub, "--config", cfg, "--out", str(tmp_path / "y")])
        for f in files:
            assert (tmp_path / "x" / f).read_bytes() == (tmp_path / "y" / f).read_bytes()


def test_seed_flag_changes_output(tmp_path):
    run(["detect", "--config", "joint6_detect", "--out", str(tmp_path / "x")])
    run(["detect", "--config", "joint6_detect", "--seed", "5", "--out", str(tmp_path / "y")])
    assert (tmp_path / "x" / "health.jsonl").read_bytes() != (tmp_path / "y" / "health.jsonl").read_bytes()
