import csv
import json
import subprocess
import sys

import pytest

from replidecay.cli import main

SMALL = ["--n-servers", "30", "--lam", "1", "--mu", "1", "--n-files", "60",
         "--horizon", "1", "--samples", "5", "--replicas", "3"]


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_simulate_outputs(tmp_path, capsys):
    out = tmp_path / "sim"
    assert main(["simulate", "--seed", "4", "--out", str(out)] + SMALL) == 0
    line = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert line["command"] == "simulate" and line["check_passed"] is True
    assert (out / "replica_0000.csv").exists() and (out / "replica_0002.json").exists()
    agg = read_csv(out / "aggregate.csv")
    assert agg[0] == ["t", "alive_fraction_mean", "ci_lo", "ci_hi", "replicas"]
    assert len(agg) == 7 and float(agg[1][1]) == 1.0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["replicas"] == 3 and summary["config"]["params"]["seed"] == 4


def test_same_seed_same_bytes(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["simulate", "--seed", "9", "--out", str(a)] + SMALL) == 0
    assert main(["simulate", "--seed", "9", "--out", str(b)] + SMALL) == 0
    for name in ("replica_0000.csv", "replica_0001.csv", "aggregate.csv", "durability.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    c = tmp_path / "c"
    assert main(["simulate", "--seed", "10", "--out", str(c)] + SMALL) == 0
    assert (a / "aggregate.csv").read_bytes() != (c / "aggregate.csv").read_bytes()


def test_invalid_config_exit_2(tmp_path, capsys):
    assert main(["simulate", "--n-servers", "1", "--d", "2", "--out", str(tmp_path)]) == 2
    assert main(["simulate", "--mu", "0", "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert main(["simulate", "--config", str(tmp_path / "missing.json")]) == 2
    assert "invalid configuration" in capsys.readouterr().err


def test_failed_check_exit_3(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"delta_list": [0.9], "extra": {"check_all_finite": True}}))
    args = ["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")] + SMALL
    args[args.index("--horizon") + 1] = "0.05"
    assert main(args) == 0
    assert main(args + ["--check"]) == 3


def test_config_file_and_override(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"params": {"n_servers": 20, "lam": 0.5, "mu": 2.0, "seed": 1,
                                          "horizon": 0.5, "n_samples": 4},
                               "replicas": 2}))
    out = tmp_path / "o"
    assert main(["simulate", "--config", str(cfg), "--lam", "0.0", "--out", str(out)]) == 0
    s = json.loads((out / "summary.json").read_text())
    assert s["config"]["params"]["lam"] == 0.0 and s["config"]["params"]["mu"] == 2.0
    assert s["replicas"] == 2


def test_figure3_command(tmp_path):
    out = tmp_path / "f"
    assert main(["figure3", "--d-list", "1,2,3", "--rho-list", "0.5,1", "--out", str(out),
                 "--check"]) == 0
    rows = read_csv(out / "figure3.csv")
    assert rows[0] == ["d", "rho", "kappa_bar", "kappa_plus", "ratio"]
    d1 = [r for r in rows[1:] if r[0] == "1"]
    assert d1 and all(float(r[4]) == 1.0 for r in d1)
    assert all(float(r[4]) >= 1.0 for r in rows[1:])
    assert (out / "figure3.dat").exists()


def test_meanfield_command(tmp_path):
    out = tmp_path / "m"
    assert main(["meanfield", "--lam", "1", "--mu", "1", "--d", "2", "--horizon", "2",
                 "--samples", "20", "--out", str(out)]) == 0
    assert (out / "fp_final_law.json").exists()
    assert json.loads((out / "summary.json").read_text())


def test_coupling_command(tmp_path):
    out = tmp_path / "c"
    assert main(["coupling", "--n-servers", "30", "--d", "3", "--lam", "1", "--n-files", "40",
                 "--horizon", "1", "--replicas", "3", "--out", str(out), "--check"]) == 0
    rows = read_csv(out / "coupling.csv")
    assert rows[0] == ["t", "L_alg_per_server", "L_dom_per_server"]
    assert all(float(r[1]) <= float(r[2]) for r in rows[1:])


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "replidecay.cli", "figure3", "--d-list", "2",
                        "--rho-list", "1", "--out", str(tmp_path)], capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    with pytest.raises(SystemExit):
        main(["nonsense"])
