import json

import numpy as np
import pytest
import yaml

from lrtwostage.cli import main

FAST_BART = {"m": 20, "n_burn": 50, "n_keep": 20}


def dump(path, doc):
    path.write_text(yaml.safe_dump(doc))
    return str(path)


def test_missing_config_names_path(tmp_path, capsys):
    assert main(["simulate", "--config", str(tmp_path / "nope.yaml")]) == 1
    assert "nope.yaml" in capsys.readouterr().err


def test_unknown_key_rejected(tmp_path, capsys):
    cfg = dump(tmp_path / "c.yaml", {"scenario": {"outcome": "binary"}, "replications": 3})
    assert main(["simulate", "--config", cfg]) == 1
    assert "replications" in capsys.readouterr().err


def test_yaml_error_has_line(tmp_path, capsys):
    p = tmp_path / "c.yaml"
    p.write_text("scenario:\n  outcome: binary\n R: [1\n")
    assert main(["simulate", "--config", str(p)]) == 1
    assert "line" in capsys.readouterr().err


SIM = {"scenario": {"outcome": "continuous"}, "n_total": 200, "R": 2, "n_mc": 100000,
       "bart": FAST_BART}


def test_simulate_deterministic(tmp_path):
    cfg = dump(tmp_path / "c.yaml", SIM)
    for d in ("a", "b"):
        assert main(["simulate", "--config", cfg, "--seed", "3", "--out-dir", str(tmp_path / d)]) == 0
    for f in ("metrics.csv", "metrics.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    prov = json.loads((tmp_path / "a" / "metrics.json").read_text())
    assert prov["config"]["base_seed"] == 3
    assert prov["seeds"] == [3, 4]


def test_simulate_strict_flag(tmp_path):
    # scores above 6 are rare: LR is estimable in the oracle but mostly empty per replication
    doc = dict(SIM, rule={"cutpoints": [6.0], "labels": ["UR", "LR"]})
    cfg = dump(tmp_path / "c.yaml", doc)
    assert main(["simulate", "--config", cfg, "--out-dir", str(tmp_path / "o")]) == 0
    assert main(["simulate", "--config", cfg, "--strict", "--out-dir", str(tmp_path / "o")]) == 2


def test_simulate_oracle_failure_is_clean(tmp_path, capsys):
    doc = dict(SIM, rule={"cutpoints": [1e6], "labels": ["UR", "LR"]})
    assert main(["simulate", "--config", dump(tmp_path / "c.yaml", doc)]) == 1
    assert "empty" in capsys.readouterr().err


def test_oracle_command(tmp_path):
    out = tmp_path / "o"
    assert main(["oracle", "--outcome", "binary", "--n-mc", "1000000", "--out-dir", str(out)]) == 0
    doc = json.loads((out / "oracle.json").read_text())
    assert doc["delta"]["UR"] == pytest.approx(-0.512, abs=0.02)
    assert doc["delta"]["LR"] == pytest.approx(0.524, abs=0.02)
    assert doc["seed"] == 0


def test_generate_then_analyze(tmp_path, capsys):
    assert main(["generate", "--outcome", "binary", "--n", "300", "--seed", "4",
                 "--out-dir", str(tmp_path)]) == 0
    csv = tmp_path / "trial.csv"
    lines = csv.read_text().splitlines()
    # blank out one covariate to exercise complete-case handling
    cells = lines[5].split(",")
    cells[2] = ""
    lines[5] = ",".join(cells)
    csv.write_text("\n".join(lines) + "\n")
    cols = [{"name": f"x{j}", "role": "covariate"} for j in range(1, 11)]
    cols += [{"name": "t", "role": "treatment"}, {"name": "y", "role": "outcome"}]
    cfg = dump(tmp_path / "a.yaml", {
        "schema": {"outcome": "binary", "columns": cols},
        "rule": {"cutpoints": [0.5], "labels": ["UR", "LR"]},
        "repetitions": 2, "bart": FAST_BART,
    })
    capsys.readouterr()
    assert main(["analyze", str(csv), "--config", cfg, "--out-dir", str(tmp_path / "r")]) == 0
    doc = json.loads((tmp_path / "r" / "mccv.json").read_text())
    assert doc["data"] == {"n_read": 300, "n_dropped": 1, "n_complete": 299}
    assert {r["method"] for r in doc["rows"]} == {"naive_bart", "corrected_bart"}


def test_analyze_bad_treatment(tmp_path, capsys):
    (tmp_path / "d.csv").write_text("x1,t,y\n0.1,1,0\n0.2,5,1\n")
    cfg = dump(tmp_path / "a.yaml", {
        "schema": {"columns": [{"name": "x1", "role": "covariate"},
                               {"name": "t", "role": "treatment"},
                               {"name": "y", "role": "outcome"}]},
        "rule": {"cutpoints": [0.5], "labels": ["UR", "LR"]},
    })
    assert main(["analyze", str(tmp_path / "d.csv"), "--config", cfg]) == 1
    assert "row 3" in capsys.readouterr().err


@pytest.fixture(scope="module")
def trial_csv(tmp_path_factory):
    d = tmp_path_factory.mktemp("diag")
    assert main(["generate", "--outcome", "binary", "--n", "400", "--seed", "1",
                 "--out-dir", str(d)]) == 0
    return d / "trial.csv"


def test_diagnostics_vip_from_chain(trial_csv, tmp_path):
    out = tmp_path / "v"
    assert main(["diagnostics", "vip", "--data", str(trial_csv), "--m", "20",
                 "--out-dir", str(out)]) == 0
    assert (out / "chain.json").is_file()
    out2 = tmp_path / "v2"
    assert main(["diagnostics", "vip", "--chain", str(out / "chain.json"),
                 "--out-dir", str(out2)]) == 0
    import pandas as pd
    df = pd.read_csv(out2 / "vip.csv", comment="#")
    assert df["vip"].sum() == pytest.approx(1.0, abs=1e-12)


def test_diagnostics_ppc_and_overlap(trial_csv, tmp_path):
    out = tmp_path / "p"
    assert main(["diagnostics", "ppc", "--data", str(trial_csv), "--m", "50",
                 "--seed", "2", "--out-dir", str(out)]) == 0
    p = json.loads((out / "ppc.json").read_text())["p_value"]
    assert 0.01 <= p <= 0.99
    assert main(["diagnostics", "overlap", "--chain", str(out / "chain.json"),
                 "--data", str(trial_csv), "--out-dir", str(out)]) == 0
    assert (out / "overlap_ecdf.csv").read_text().startswith("# provenance: ")


def test_diagnostics_needs_data(tmp_path, capsys):
    assert main(["diagnostics", "ppc", "--out-dir", str(tmp_path)]) == 1
    assert "--data" in capsys.readouterr().err
