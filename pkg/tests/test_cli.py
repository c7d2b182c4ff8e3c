import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from icmsm.cli import main
from icmsm.em import unfortunate_estimate
from icmsm.graph import illness_death
from icmsm.prodint import write_estimate_csv

MODELS = Path(__file__).resolve().parent.parent / "models"
SCENARIOS = Path(__file__).resolve().parent.parent / "src" / "icmsm" / "scenarios"


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert main(["simulate", str(SCENARIOS / "scenario1.toml"), "--n", "100", "--reps", "3",
                 "--seed", "7", "--out", str(out)]) == 0
    return out


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_simulate_is_reproducible(sim_dir, tmp_path):
    names = sorted(p.name for p in sim_dir.glob("rep_*.csv"))
    assert names == ["rep_1.csv", "rep_2.csv", "rep_3.csv"]
    again = tmp_path / "again"
    main(["simulate", str(SCENARIOS / "scenario1.toml"), "--n", "100", "--reps", "3",
          "--seed", "7", "--out", str(again)])
    for n in names:
        assert (sim_dir / n).read_bytes() == (again / n).read_bytes()
    manifest = json.loads((sim_dir / "manifest.json").read_text())
    assert manifest["seed"] == 7


def test_simulate_usage_errors(tmp_path):
    assert main(["simulate", str(SCENARIOS / "scenario1.toml"), "--n", "10", "--reps", "0",
                 "--out", str(tmp_path)]) == 2
    assert main(["simulate", "--n", "10", "--out", str(tmp_path)]) == 2


def test_simulate_exact_arrivals(tmp_path):
    assert main(["simulate", str(SCENARIOS / "scenario4.toml"), "--n", "60", "--out",
                 str(tmp_path)]) == 0
    rows = read_rows(next(tmp_path.glob("rep_*.csv")))
    # exact arrivals fall between the scheduled visits, off any common lattice
    dead = [r for r in rows if r["state"] in ("3", "4")]
    assert dead


def test_fit_happy_path_and_artifacts(sim_dir, tmp_path):
    out = tmp_path / "fit"
    code = main(["fit", str(sim_dir / "model.toml"), str(sim_dir / "rep_1.csv"),
                 "--estimator", "multinomial", "--tol", "1e-3", "--out", str(out), "-q"])
    assert code == 0
    for f in ("estimate.csv", "trace.csv", "reduced_gradient.csv", "model.toml",
              "manifest.json"):
        assert (out / f).is_file()
    man = json.loads((out / "manifest.json").read_text())
    assert man["stop_reason"] == "intensity_tol"
    assert read_rows(out / "estimate.csv")[0].keys() == {"from", "to", "bin", "tau", "alpha"}
    out2 = tmp_path / "fit2"
    main(["fit", str(sim_dir / "model.toml"), str(sim_dir / "rep_1.csv"), "--tol", "1e-3",
          "--out", str(out2), "-q", "--threads", "3"])
    assert (out / "estimate.csv").read_bytes() == (out2 / "estimate.csv").read_bytes()


def test_fit_every_estimator(sim_dir, tmp_path):
    for est in ("poisson", "canonical", "multinoulli"):
        assert main(["fit", str(sim_dir / "model.toml"), str(sim_dir / "rep_2.csv"),
                     "--estimator", est, "--tol", "1e-3", "--out", str(tmp_path / est),
                     "-q"]) == 0


def test_fit_poisson_with_exact_states_is_config_error(sim_dir, tmp_path):
    model = tmp_path / "id_exact.toml"
    model.write_text('states = 3\ntransitions = [[1, 2], [1, 3], [2, 3]]\nexact = [3]\n')
    assert main(["fit", str(model), str(sim_dir / "rep_1.csv"), "--estimator", "poisson",
                 "--out", str(tmp_path / "o"), "-q"]) == 2


def test_fit_init_file_recorded_in_manifest(sim_dir, tmp_path):
    first = tmp_path / "first"
    main(["fit", str(sim_dir / "model.toml"), str(sim_dir / "rep_1.csv"), "--tol", "1e-3",
          "--out", str(first), "-q"])
    taus = np.array(sorted({float(r["tau"]) for r in read_rows(first / "estimate.csv")}))
    init = tmp_path / "unfortunate.csv"
    write_estimate_csv(unfortunate_estimate(illness_death(), taus), init)
    out = tmp_path / "fit"
    assert main(["fit", str(sim_dir / "model.toml"), str(sim_dir / "rep_1.csv"), "--init",
                 "file", "--init-file", str(init), "--tol", "1e-3", "--out", str(out),
                 "-q"]) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["config"]["init"] == "file"
    assert man["inputs"]["init"]["path"] == str(init)


def test_fit_nonconvergence_and_bad_data(sim_dir, tmp_path):
    assert main(["fit", str(sim_dir / "model.toml"), str(sim_dir / "rep_1.csv"),
                 "--max-iter", "2", "--out", str(tmp_path / "a"), "-q"]) == 5
    bad = tmp_path / "bad.csv"
    bad.write_text("id,time,state\n1,0,3\n1,1,1\n")
    assert main(["fit", str(sim_dir / "model.toml"), str(bad), "--out",
                 str(tmp_path / "b"), "-q"]) == 3
    assert main(["fit", str(sim_dir / "model.toml"), str(sim_dir / "rep_1.csv"),
                 "--tol", "-1", "--out", str(tmp_path / "c"), "-q"]) == 2


def test_probs(sim_dir, tmp_path, capsys):
    fit = tmp_path / "fit"
    main(["fit", str(sim_dir / "model.toml"), str(sim_dir / "rep_1.csv"), "--tol", "1e-3",
          "--out", str(fit), "-q"])
    out = tmp_path / "p.csv"
    assert main(["probs", str(fit), "--grid", "4:4:1", "--from", "4", "--out", str(out)]) == 0
    rows = read_rows(out)
    for r in rows:
        assert float(r["prob"]) == (1.0 if r["from"] == r["to"] else 0.0)
    assert main(["probs", str(fit), "--grid", "0:15:0.5", "--state", "1"]) == 0
    text = capsys.readouterr().out.splitlines()
    assert text[0] == "from,to,s,t,prob"
    rows = list(csv.DictReader(text))
    for t in {r["t"] for r in rows}:
        total = sum(float(r["prob"]) for r in rows if r["t"] == t)
        assert total == pytest.approx(1.0, abs=1e-10)
    main(["probs", str(fit), "--grid", "0:15:0.5", "--state", "3"])
    rows = list(csv.DictReader(capsys.readouterr().out.splitlines()))
    assert all(float(r["prob"]) == (1.0 if r["to"] == "3" else 0.0) for r in rows)


def test_metrics(sim_dir, tmp_path, capsys):
    for j in (1, 2, 3):
        main(["fit", str(sim_dir / "model.toml"), str(sim_dir / f"rep_{j}.csv"), "--tol",
              "1e-3", "--out", str(tmp_path / f"fit_{j}"), "-q"])
    out = tmp_path / "m.csv"
    assert main(["metrics", str(tmp_path / "fit_*"), str(SCENARIOS / "scenario1.toml"),
                 "--targets", "A:1:2,P:1:3@0", "--grid", "0:15:0.5", "--out", str(out)]) == 0
    rows = read_rows(out)
    assert {r["target"] for r in rows} == {"cumintensity", "transprob"}
    assert main(["metrics", str(tmp_path / "fit_*"), str(tmp_path / "nope.toml")]) == 3
    assert "nope.toml" in capsys.readouterr().err


def test_console_help():
    res = subprocess.run([sys.executable, "-m", "icmsm", "fit", "--help"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "--estimator" in res.stdout
