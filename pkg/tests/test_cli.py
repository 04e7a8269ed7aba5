import csv
import json

import jsonschema
import pytest

from rwf.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, apply_override, load_config, main, parse_values
from rwf.evaluation import ExperimentConfig

from report_schema import REPORT_SCHEMA

TINY = {
    "method": "RwF",
    "model": {"depth": 2, "d": 16, "heads": 2, "m": 4, "k": 1, "backbone_mode": "frozen_random"},
    "stream": {"T": 2, "classes_per_task": 2, "samples_per_class": 10, "L_in": 4, "input_dim": 8,
               "noise_std": 0.5},
    "optim": {"lr": 0.01, "batch_size": 8},
    "seeds": [0],
}


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(TINY))
    return p


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_run_writes_all_outputs(cfg_path, tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", str(cfg_path), "--out", str(out), "--override", "seeds=[1,2,3]"]) == EXIT_OK
    report = json.loads((out / "report.json").read_text())
    jsonschema.validate(report, REPORT_SCHEMA)
    assert [r["seed"] for r in report["per_seed"]] == [1, 2, 3]
    assert len(_rows(out / "summary.csv")) == 3
    assert (out / "checkpoint.bin").stat().st_size > 0
    resolved = json.loads((out / "resolved_config.json").read_text())
    assert resolved["model"]["num_classes"] == 4
    assert "wall_clock_seconds" in json.loads((out / "metadata.json").read_text())
    assert '"seeds"' in capsys.readouterr().out


def test_rerun_is_byte_identical(cfg_path, tmp_path):
    for name in ("a", "b"):
        assert main(["run", str(cfg_path), "--out", str(tmp_path / name)]) == EXIT_OK
    for f in ("report.json", "summary.csv", "checkpoint.bin", "resolved_config.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_missing_config_names_path(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    assert main(["run", str(missing)]) == EXIT_CONFIG
    assert str(missing) in capsys.readouterr().err


def test_unknown_key_is_config_error(cfg_path, capsys):
    assert main(["run", str(cfg_path), "--override", "model.kk=3"]) == EXIT_CONFIG
    assert "kk" in capsys.readouterr().err


def test_invalid_value_is_config_error(cfg_path):
    assert main(["run", str(cfg_path), "--override", "model.k=5"]) == EXIT_CONFIG


def test_runtime_failure_exit_code(cfg_path, tmp_path):
    # a huge learning rate diverges; non-finite values abort the run
    code = main(["run", str(cfg_path), "--out", str(tmp_path / "o"), "--override", "optim.lr=1e300"])
    assert code == EXIT_RUNTIME


def test_seed_env_has_lowest_precedence(tmp_path, monkeypatch):
    doc = {k: v for k, v in TINY.items() if k != "seeds"}
    p = tmp_path / "noseed.json"
    p.write_text(json.dumps(doc))
    monkeypatch.setenv("RWF_SEED", "7")
    assert load_config(p).seeds == [7]
    assert load_config(p, ["seeds=[3]"]).seeds == [3]
    p2 = tmp_path / "seeded.json"
    p2.write_text(json.dumps(TINY))
    assert load_config(p2).seeds == [0]


def test_override_parsing():
    doc = apply_override({}, "model.beta=0.5")
    doc = apply_override(doc, "model.placement=Last")
    doc = apply_override(doc, "seeds=[4, 5]")
    assert doc == {"model": {"beta": 0.5, "placement": "Last"}, "seeds": [4, 5]}
    assert parse_values("0,1,3") == [0, 1, 3]
    assert parse_values("[1.0, 0.5]") == [1.0, 0.5]
    assert parse_values("First,Last") == ["First", "Last"]


def test_sweep_k_csv(cfg_path, tmp_path):
    out = tmp_path / "sw"
    assert main(["sweep", str(cfg_path), "--axis", "k", "--values", "0,1,2",
                 "--override", "seeds=[0,1]", "--out", str(out)]) == EXIT_OK
    rows = _rows(out / "sweep_k.csv")
    assert len(rows) == 6
    assert [r["k"] for r in rows] == ["0", "0", "1", "1", "2", "2"]


def test_sweep_tasks_keeps_total_classes(cfg_path, tmp_path):
    out = tmp_path / "sw"
    assert main(["sweep", str(cfg_path), "--axis", "tasks", "--values", "1,4",
                 "--out", str(out)]) == EXIT_OK
    assert [r["T"] for r in _rows(out / "sweep_tasks.csv")] == ["1", "4"]
    assert main(["sweep", str(cfg_path), "--axis", "tasks", "--values", "3",
                 "--out", str(out)]) == EXIT_CONFIG


def test_sweep_fraction_and_placement(cfg_path, tmp_path):
    assert main(["sweep", str(cfg_path), "--axis", "fraction", "--values", "1.0,0.5",
                 "--out", str(tmp_path / "f")]) == EXIT_OK
    assert main(["sweep", str(cfg_path), "--axis", "placement", "--values", "First,Last",
                 "--out", str(tmp_path / "p")]) == EXIT_OK
    assert main(["sweep", str(cfg_path), "--axis", "placement", "--values", "Middle",
                 "--out", str(tmp_path / "p")]) == EXIT_CONFIG


def test_probe_fresh_and_checkpoint(cfg_path, tmp_path):
    out = tmp_path / "pr"
    assert main(["probe", str(cfg_path), "--override", "model.k=2", "--out", str(out)]) == EXIT_OK
    rows = _rows(out / "probe.csv")
    assert len(rows) == 2 * 3
    for layer in ("0", "1"):
        med = [float(r["median_ratio"]) for r in rows if r["layer"] == layer]
        assert med == sorted(med)
    run_out = tmp_path / "run"
    assert main(["run", str(cfg_path), "--out", str(run_out)]) == EXIT_OK
    assert main(["probe", str(cfg_path), "--checkpoint", str(run_out / "checkpoint.bin"),
                 "--out", str(tmp_path / "pc")]) == EXIT_OK
    assert len(_rows(tmp_path / "pc" / "probe.csv")) == 3


def test_probe_without_routers(cfg_path, tmp_path, capsys):
    out = tmp_path / "pr"
    assert main(["probe", str(cfg_path), "--override", "model.k=0", "--out", str(out)]) == EXIT_OK
    assert _rows(out / "probe.csv") == []
    assert "no routing layers" in capsys.readouterr().out


def test_verify_energy(capsys):
    assert main(["verify", "energy"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "3/3 checks passed" in out and "FAIL" not in out


def test_bundled_configs_parse():
    from rwf.cli import bundled_config

    for name in ("default", "tasks40"):
        exp = ExperimentConfig.from_dict(json.loads(bundled_config(name).read_text()))
        assert exp.seeds == [0, 1, 2]
