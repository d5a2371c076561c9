import csv
import json

import numpy as np
import pytest
import yaml

from hcpinn import cli
from hcpinn import diffcore as dc
from hcpinn.train import ConfigError


def bundled(name):
    return cli.read_config(name)


@pytest.fixture(scope="module")
def ex1_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("runs") / "ex1"
    code = cli.main(["train", "--config", "example1_option1", "--iterations", "3", "--out", str(out)])
    assert code == cli.EXIT_OK
    return out


def test_list_configs(capsys):
    assert cli.main(["list-configs"]) == cli.EXIT_OK
    names = capsys.readouterr().out.split()
    for n in ("example1_alg1", "example1_option1", "example1_option2", "example1b_option1",
              "example2_option1", "example3_option1", "example4_option1"):
        assert n in names


def test_bundled_configs_all_parse():
    for name in cli.bundled_configs():
        doc = cli.read_config(name)
        if doc.get("option") == "II":
            doc.setdefault("aux_dir", "aux")
        cfg = cli.parse_config(doc)
        assert cfg.adam.iterations >= 1
        for k in ("M", "MB", "MG"):
            assert cfg.samples[k] >= 1


def test_read_config_name_with_or_without_extension(tmp_path):
    assert cli.read_config("example1_option1") == cli.read_config("example1_option1.yaml")
    assert cli.read_config("example1_option1.cfg") == cli.read_config("example1_option1")
    p = tmp_path / "mine.yaml"
    p.write_text(yaml.safe_dump(bundled("example1_option1")))
    assert cli.read_config(str(p)) == bundled("example1_option1")


def test_unknown_config_is_config_error(capsys):
    with pytest.raises(ConfigError):
        cli.read_config("no_such_config")
    assert cli.main(["train", "--config", "no_such_config"]) == cli.EXIT_CONFIG
    assert "no_such_config" in capsys.readouterr().err


def test_non_mapping_config(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        cli.read_config(str(p))


def write_cfg(tmp_path, mutate):
    doc = bundled("example1_option1")
    mutate(doc)
    p = tmp_path / "cfg.yaml"
    p.write_text(yaml.safe_dump(doc))
    return str(p)


@pytest.mark.parametrize("mutate, word", [
    (lambda d: d["weights"].update(w_y_r=-1.0), "w_y_r"),
    (lambda d: d["samples"].update(M=0), "samples.M"),
    (lambda d: d.update(algorithm="alg3"), "algorithm"),
    (lambda d: d.update(option="III"), "option"),
    (lambda d: d.update(problem="9"), "problem"),
    (lambda d: d.pop("adam"), "adam"),
    (lambda d: d["adam"].update(schedule=[[0, 1e-3]]), "schedule"),
    (lambda d: d.update(option="II"), "aux_dir"),
])
def test_invalid_configs_exit_2_and_name_the_field(tmp_path, capsys, mutate, word):
    path = write_cfg(tmp_path, mutate)
    assert cli.main(["train", "--config", path, "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    assert word in capsys.readouterr().err


def test_overrides():
    doc = bundled("example1_option1")
    cfg = cli.parse_config(doc, seed=7, out="/x/y", iterations=12)
    assert cfg.network.seed == 7 and cfg.samples["seed"] == 7
    assert cfg.output == "/x/y"
    assert cfg.adam.iterations == 12
    # the source document is untouched
    assert doc["adam"]["iterations"] == 40000


def test_train_run_directory(ex1_run):
    for f in ("config.yaml", "y.json", "p.json", "loss.csv", "report.json"):
        assert (ex1_run / f).is_file(), f
    echo = yaml.safe_load((ex1_run / "config.yaml").read_text())
    assert echo["adam"]["iterations"] == 3
    assert echo["output"] == str(ex1_run)
    with open(ex1_run / "loss.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][0] == "iteration"
    assert len(rows) > 1
    rep = json.loads((ex1_run / "report.json").read_text())
    assert rep["training"]["status"] in ("completed", "max_iterations", "converged")
    ev = rep["evaluation"]
    assert np.isfinite(ev["u_error"]["abs"]) and np.isfinite(ev["u_error"]["rel"])
    assert ev["hard_constraints"]["boundary_max"] <= 1e-12
    assert ev["hard_constraints"]["interface_jump_max"] <= 1e-12
    assert ev["control_feasibility"]["feasible"]


def test_untrained_hard_constraints(tmp_path):
    out = tmp_path / "zero"
    assert cli.main(["train", "--config", "example1_option1", "--iterations", "0", "--out", str(out)]) == 0
    hc = json.loads((out / "report.json").read_text())["evaluation"]["hard_constraints"]
    assert hc["boundary_max"] <= 1e-12 and hc["interface_jump_max"] <= 1e-12


def test_same_seed_reproduces_checkpoints(tmp_path, ex1_run):
    out = tmp_path / "again"
    assert cli.main(["train", "--config", "example1_option1", "--iterations", "3", "--out", str(out)]) == 0
    assert (out / "y.json").read_bytes() == (ex1_run / "y.json").read_bytes()
    assert (out / "p.json").read_bytes() == (ex1_run / "p.json").read_bytes()


def test_different_seed_changes_weights(tmp_path, ex1_run):
    out = tmp_path / "seed5"
    assert cli.main(["train", "--config", "example1_option1", "--iterations", "3", "--seed", "5",
                     "--out", str(out)]) == 0
    a, _ = dc.load_params(out / "y.json")
    b, _ = dc.load_params(ex1_run / "y.json")
    assert not np.array_equal(a.flat(), b.flat())


def test_evaluate_outputs(ex1_run, capsys):
    code = cli.main(["evaluate", str(ex1_run), "--grid", "20", "--grid-sizes", "16", "32"])
    assert code == cli.EXIT_OK
    for f in ("grid_y.csv", "grid_p.csv", "grid_u.csv", "multires.csv", "evaluation.json"):
        assert (ex1_run / f).is_file(), f
    ev = json.loads((ex1_run / "evaluation.json").read_text())
    assert ev["N"] == 20
    assert [r["N"] for r in ev["multires"]] == [16, 32]
    assert set(ev["grids"]) == {"y", "p", "u"}
    out = capsys.readouterr().out
    assert "err(u)" in out
    first = (ex1_run / "evaluation.json").read_bytes()
    assert cli.main(["evaluate", str(ex1_run), "--grid", "20", "--grid-sizes", "16", "32"]) == 0
    assert (ex1_run / "evaluation.json").read_bytes() == first


def test_evaluate_without_exact_has_no_error_columns(tmp_path):
    out = tmp_path / "ex2"
    assert cli.main(["train", "--config", "example2_option1", "--iterations", "1", "--out", str(out)]) == 0
    assert cli.main(["evaluate", str(out), "--grid", "8"]) == 0
    ev = json.loads((out / "evaluation.json").read_text())
    assert ev["grids"] == {}
    assert "multires" not in ev and "u_error" not in ev
    header = (out / "grid_u.csv").read_text().splitlines()[0]
    assert "exact" not in header and "error" not in header


def test_evaluate_missing_run_exit_6(tmp_path, capsys):
    assert cli.main(["evaluate", str(tmp_path / "nothing")]) == cli.EXIT_MISSING
    run = tmp_path / "half"
    run.mkdir()
    (run / "config.yaml").write_text(yaml.safe_dump(bundled("example1_option1")))
    assert cli.main(["evaluate", str(run)]) == cli.EXIT_MISSING
    assert "y.json" in capsys.readouterr().err


def test_option2_missing_aux_exit_6(tmp_path):
    path = write_cfg(tmp_path, lambda d: d.update(option="II", aux_dir=str(tmp_path / "aux")))
    assert cli.main(["train", "--config", path, "--iterations", "1", "--out", str(tmp_path / "o")]) \
        == cli.EXIT_MISSING


def test_pretrain_without_section_is_config_error(tmp_path):
    assert cli.main(["pretrain-aux", "--config", "example1_option1", "--out", str(tmp_path)]) \
        == cli.EXIT_CONFIG


def test_verify_small(capsys):
    code = cli.main(["verify", "--examples", "1", "--nets", "1", "--samples", "200"])
    out = capsys.readouterr().out
    assert code == cli.EXIT_OK
    assert out.strip().splitlines()[-1] == "PASS"


def test_format_multires():
    s = cli.format_multires([{"N": 16, "u": 1e-3, "y": 2e-3}, {"N": 32, "u": 5e-4, "y": 1e-3}])
    lines = s.splitlines()
    assert len(lines) == 3
    assert lines[0].split() == ["N", "err(u)", "err(y)"]
    assert lines[2].split()[0] == "32"
