import csv
import json

import pytest

from cfnoma import cli, harness

from test_harness import tiny_dict


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(tiny_dict(tmp_path)))
    return p


def test_generate(cfg_path, tmp_path, capsys):
    assert cli.main(["generate", "--config", str(cfg_path)]) == 0
    for s in ("train", "val", "test"):
        assert (tmp_path / "run" / "data" / f"{s}.npz").exists()
    assert "test" in capsys.readouterr().out


def test_evaluate_optimizer(cfg_path, tmp_path):
    out = tmp_path / "ev"
    assert cli.main(["evaluate", "--config", str(cfg_path), "--method", "admm_centralized",
                     "--out", str(out)]) == 0
    with open(out / "results.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == harness.TABLE_HEADERS and rows[1][0] == "Centralized ADMM"
    assert json.loads((out / "result_admm_centralized.json").read_text())["method"] == "admm_centralized"


def test_train_then_evaluate(cfg_path, tmp_path):
    assert cli.main(["train", "--config", str(cfg_path), "--method", "fixed_gnn"]) == 0
    ck = tmp_path / "run" / "checkpoint_fixed_gnn.json"
    assert ck.exists()
    assert cli.main(["evaluate", "--config", str(cfg_path), "--method", "fixed_gnn",
                     "--checkpoint", str(ck), "--out", str(tmp_path / "e")]) == 0


def test_missing_checkpoint_is_error(cfg_path, tmp_path, capsys):
    rc = cli.main(["evaluate", "--config", str(cfg_path), "--method", "autognn",
                   "--checkpoint", str(tmp_path / "none.json")])
    assert rc == 2 and "checkpoint not found" in capsys.readouterr().err


def test_bad_pattern_and_missing_config(cfg_path, tmp_path, capsys):
    rc = cli.main(["evaluate", "--config", str(cfg_path), "--method", "beta_frozen_oracle",
                   "--override", "pattern=[[0,1],[1,0]]"])
    assert rc == 2 and "mutual-SIC" in capsys.readouterr().err
    assert cli.main(["compare", "--config", str(tmp_path / "nope.json")]) == 2


def test_compare_and_export(cfg_path, tmp_path):
    rc = cli.main(["compare", "--config", str(cfg_path), "--override",
                   'methods=["admm_distributed","beta_frozen_oracle"]'])
    assert rc == 0
    with open(tmp_path / "run" / "results.csv") as f:
        assert len(list(csv.reader(f))) == 3
    assert cli.main(["export-plots", "--config", str(cfg_path)]) == 0
    assert (tmp_path / "run" / "plotdata" / "sum_rate_per_sample_beta_frozen_oracle.tsv").exists()


def test_sweep_values(cfg_path, tmp_path):
    rc = cli.main(["sweep", "--config", str(cfg_path), "--values", "0.2,0.4",
                   "--override", 'methods=["admm_distributed"]'])
    assert rc == 0
    with open(tmp_path / "run" / "results.csv") as f:
        assert len(list(csv.DictReader(f))) == 2


def test_unknown_command():
    with pytest.raises(SystemExit):
        cli.main(["frobnicate"])
