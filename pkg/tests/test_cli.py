import json
import subprocess
import sys

import pytest

from dualsrc.cli import main


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen -> train-buy (priced and plain) -> train-coord, on a very small world."""
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen", "--products", "6", "--horizon", "30", "--seed", "2", "--out", str(d / "w.dsw")]) == 0
    common = ["--world", str(d / "w.dsw"), "--batches", "2", "--train-horizon", "12", "--seed", "1"]
    assert main(["train-buy", *common, "--mode", "priced", "--batch-size", "3", "--out", str(d / "p.ckpt")]) == 0
    assert main(["train-buy", *common, "--batch-size", "3", "--out", str(d / "b.ckpt"),
                 "--log", str(d / "b.log")]) == 0
    assert main(["train-coord", *common, "--buy", str(d / "p.ckpt"), "--out", str(d / "c.ckpt")]) == 0
    return d


def test_gen_is_deterministic(tmp_path, capsys):
    for name in ("a.dsw", "b.dsw"):
        code, out, _ = run(capsys, "gen", "--products", "4", "--horizon", "12", "--seed", "9",
                           "--out", tmp_path / name)
        assert code == 0
    assert (tmp_path / "a.dsw").read_bytes() == (tmp_path / "b.dsw").read_bytes()
    assert json.loads(out)["products"] == 4
    assert json.loads((tmp_path / "a.dsw.run.json").read_text())["seed"] == 9


def test_out_dir_from_environment(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("DUALSRC_OUT", str(tmp_path / "envout"))
    assert run(capsys, "gen", "--products", "2", "--horizon", "5")[0] == 0
    assert (tmp_path / "envout" / "world.dsw").exists()


def test_usage_errors_exit_two(capsys):
    with pytest.raises(SystemExit) as e:
        main(["backtest"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main(["nonsense"])
    assert e.value.code == 2


def test_validation_errors_exit_one(tmp_path, capsys):
    code, _, err = run(capsys, "backtest", "--world", tmp_path / "missing.dsw")
    assert code == 1
    assert json.loads(err)["error"] == "ValidationError"
    (tmp_path / "bad.dsw").write_text("#DSW {\"version\": 1}\n")
    code, _, err = run(capsys, "backtest", "--world", tmp_path / "bad.dsw")
    assert code == 1
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"llt_discount_max": 1.5}))
    code, _, err = run(capsys, "gen", "--spec", spec, "--out", tmp_path / "x.dsw")
    assert code == 1 and json.loads(err)["error"] == "DomainError"


def test_config_file_and_flag_precedence(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"products": 3, "horizon": 7, "seed": 4}))
    run(capsys, "gen", "--config", cfg, "--out", tmp_path / "a.dsw")
    run(capsys, "gen", "--config", cfg, "--products", "5", "--out", tmp_path / "b.dsw")
    a = json.loads((tmp_path / "a.dsw.run.json").read_text())
    b = json.loads((tmp_path / "b.dsw.run.json").read_text())
    assert (a["products"], a["horizon"], a["seed"]) == (3, 7, 4)
    assert (b["products"], b["horizon"]) == (5, 7)
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"colour": "red"}))
    with pytest.raises(SystemExit):
        main(["gen", "--config", str(bad)])


def test_backtest_with_zero_network(pipeline, capsys):
    d = pipeline
    code, out, _ = run(capsys, "backtest", "--world", d / "w.dsw", "--split", "20", "--dualsrc", "zero",
                       "--alpha", "0.5", "--out", d / "zero.json")
    assert code == 0
    pct = json.loads(out)["pct_of_baseline"]
    assert pct["bsht"] == 100.0 and set(pct) == {"bsht", "tbs", "dualsrc-rl"}


def test_full_backtest_is_reproducible(pipeline, capsys):
    d = pipeline
    args = ["backtest", "--world", d / "w.dsw", "--split", "20", "--dualsrc", d / "b.ckpt",
            "--priced", d / "p.ckpt", "--coord", d / "c.ckpt", "--mpc", "--mpc-iter", "5",
            "--paths", "2", "--path-seed", "3", "--seed", "1", "--trajectories", d / "traj"]
    assert run(capsys, *args, "--out", d / "r1.json")[0] == 0
    assert run(capsys, *args, "--out", d / "r2.json")[0] == 0
    assert (d / "r1.json").read_bytes() == (d / "r2.json").read_bytes()
    report = json.loads((d / "r1.json").read_text())
    assert set(report["constrained"]) == {"none", "neural", "mpc"}
    assert len(list((d / "traj").glob("*.csv"))) == 6

    code, out, _ = run(capsys, "report", "--report", d / "r1.json")
    assert code == 0 and "M1" in out and "dualsrc-rl" in out
    code, out, _ = run(capsys, "report", "--report", d / "r1.json", "--format", "csv")
    assert out.splitlines()[0] == "policy,reward,pct_of_baseline"


def test_criteria_file_sets_exit_code(pipeline, tmp_path, capsys):
    d = pipeline
    good = tmp_path / "good.json"
    good.write_text(json.dumps([{"metric": "pct_of_baseline.bsht", "op": "==", "value": 100.0}]))
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps([{"metric": "pct_of_baseline.tbs", "op": ">", "value": 1e9}]))
    base = ["backtest", "--world", d / "w.dsw", "--split", "20", "--alpha", "0.5", "--out", tmp_path / "r.json"]
    assert run(capsys, *base, "--criteria", good)[0] == 0
    code, _, err = run(capsys, *base, "--criteria", bad)
    assert code == 1 and "criterion failed" in err


def test_training_outputs(pipeline):
    d = pipeline
    rows = (d / "b.log").read_text().splitlines()
    assert rows[0].startswith("batch,objective") and len(rows) == 3
    assert json.loads((d / "c.ckpt.run.json").read_text())["buy"].endswith("p.ckpt")


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "dualsrc.cli", "gen", "--products", "2", "--horizon", "4",
                           "--out", str(tmp_path / "w.dsw")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "w.dsw").exists()
