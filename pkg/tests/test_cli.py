import json
import xml.etree.ElementTree as ET
import zipfile

import numpy as np
import pytest

from neuralfmu.cli import EXIT_CONFIG, EXIT_DIVERGED, EXIT_NUMERIC, EXIT_OK, ConfigError, load_run_config, main
from neuralfmu.descio import read_trajectory_csv, serialize_model_description, write_archive
from neuralfmu.models import make_frictionless_pendulum, make_linear_model

from conftest import analytic_s

SMALL = """\
[data]
t_end = 1.0
n_samples = 100

[train]
epochs = {epochs}
learning_rate = {lr}
seed = 0

[output]
dir = {out}
checkpoint_epochs = 1
"""


def write_config(path, out="run", epochs=3, lr="1e-3", extra=""):
    path.write_text(SMALL.format(out=out, epochs=epochs, lr=lr) + extra)
    return str(path)


def read_csv(path):
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2), path.read_text().splitlines()[0].split(",")


def svg_ok(path):
    root = ET.parse(path).getroot()
    assert root.tag.endswith("svg")
    assert any(el.tag.endswith("polyline") for el in root.iter())


# -- simulate -------------------------------------------------------------------------


def test_simulate_records_one_variable(tmp_path, capsys):
    out = tmp_path / "traj.csv"
    code = main(["simulate", "--model", "frictionless", "--t0", "0", "--t1", "10", "--record", "mass.s", "--out", str(out)])
    assert code == EXIT_OK
    data, header = read_csv(out)
    assert header == ["t", "mass.s"] and data.shape[1] == 2
    assert np.max(np.abs(data[:, 1] - analytic_s(data[:, 0]))) < 1e-5
    assert "steps=" in capsys.readouterr().out


def test_simulate_cs_and_svg(tmp_path):
    out, svg = tmp_path / "traj.csv", tmp_path / "traj.svg"
    assert main(["simulate", "--kind", "cs", "--t1", "1", "--dt", "0.1", "--out", str(out), "--svg", str(svg)]) == EXIT_OK
    data, header = read_csv(out)
    assert header == ["t", "mass.s", "mass.v"]
    assert data[1, 1] == pytest.approx(0.529751, abs=1e-5)
    svg_ok(svg)


def test_simulate_friction_reports_events(tmp_path, capsys):
    out = tmp_path / "traj.csv"
    assert main(["simulate", "--model", "friction", "--t1", "5", "--out", str(out)]) == EXIT_OK
    text = capsys.readouterr().out
    assert "events=0" not in text


def test_simulate_from_description(tmp_path):
    xml = tmp_path / "modelDescription.xml"
    xml.write_bytes(serialize_model_description(make_frictionless_pendulum().description))
    out = tmp_path / "traj.csv"
    assert main(["simulate", "--description", str(xml), "--t1", "1", "--out", str(out)]) == EXIT_OK
    assert read_trajectory_csv(out).states[-1, 0] == pytest.approx(float(analytic_s(1.0)), abs=1e-6)


def test_simulate_unknown_record_name(tmp_path, capsys):
    code = main(["simulate", "--record", "mass.q", "--out", str(tmp_path / "x.csv")])
    assert code == EXIT_CONFIG
    assert "mass.q" in capsys.readouterr().err


def test_simulate_unknown_model_name(tmp_path):
    md = make_linear_model([[0.0]]).description
    from dataclasses import replace

    xml = tmp_path / "m.xml"
    xml.write_bytes(serialize_model_description(replace(md, model_name="Foreign")))
    assert main(["simulate", "--description", str(xml), "--out", str(tmp_path / "x.csv")]) == EXIT_CONFIG


def test_simulate_solver_failure(tmp_path, capsys):
    # x' = 1000 x overflows long before t = 10
    path = tmp_path / "lin.fmu"
    write_archive(path, make_linear_model([[1000.0]], x_start=[1.0]).description)
    with np.errstate(over="ignore", invalid="ignore"):
        code = main(["simulate", "--description", str(path), "--t1", "10", "--record", "x[1]", "--out", str(tmp_path / "x.csv")])
    assert code == EXIT_NUMERIC
    assert "numeric failure" in capsys.readouterr().err


def test_simulate_is_byte_identical(tmp_path):
    paths = [tmp_path / "a.csv", tmp_path / "b.csv"]
    for p in paths:
        main(["simulate", "--model", "friction", "--t1", "3", "--out", str(p)])
    assert paths[0].read_bytes() == paths[1].read_bytes()


# -- describe -----------------------------------------------------------------------------


def test_describe_builtin(capsys):
    assert main(["describe", "--model", "frictionless"]) == EXIT_OK
    text = capsys.readouterr().out
    assert "mass.s" in text and "mass.v" in text


def test_describe_json_archive(tmp_path, capsys):
    path = tmp_path / "p.fmu"
    write_archive(path, make_frictionless_pendulum().description, binaries={"linux64/p.so": b""})
    assert main(["describe", str(path), "--json"]) == EXIT_OK
    info = json.loads(capsys.readouterr().out)
    assert info["n_states"] == 2 and info["binaries"] == ["linux64"]


def test_describe_archive_without_description(tmp_path):
    path = tmp_path / "bad.fmu"
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr("resources/a", b"")
    assert main(["describe", str(path)]) == EXIT_CONFIG


def test_describe_parse_error_has_location(tmp_path, capsys):
    path = tmp_path / "bad.xml"
    path.write_text("<fmiModelDescription>\n<x>\n")
    assert main(["describe", str(path)]) == EXIT_CONFIG
    assert "line" in capsys.readouterr().err


# -- config ---------------------------------------------------------------------------------


def test_config_defaults(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("")
    cfg = load_run_config(str(path))
    assert cfg.train.epochs == 2500 and cfg.n_samples == 400 and cfg.t_end == 4.0
    assert cfg.train_x0 == (0.5, 0.0) and cfg.test_x0 == (1.0, -1.5)
    assert cfg.fmu.s0 == 0.1 and cfg.reference.f_stribeck == 0.5


@pytest.mark.parametrize(
    "text",
    [
        "[train]\nepochs = 0\n",
        "[train]\nepochs = many\n",
        "[bogus]\n",
        "[fmu]\nmass = 2\n",
        "[fmu]\nm = -1\n",
        "[data]\nn_samples = 3\nt_end = 0.1\n",
        "[train]\ninit = Xavier\n",
        "[train]\noptimizer = RMSProp\n",
        "[output]\ncheckpoint_epochs = 99999\n",
        "not an ini file",
    ],
)
def test_config_errors(tmp_path, text):
    path = tmp_path / "c.ini"
    path.write_text(text)
    with pytest.raises(ConfigError):
        load_run_config(str(path))


def test_train_missing_config(tmp_path):
    assert main(["train", str(tmp_path / "none.ini")]) == EXIT_CONFIG


# -- train / evaluate / extract ----------------------------------------------------------------


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    cfg = write_config(base / "run.ini")
    assert main(["train", cfg]) == EXIT_OK
    return base / "run"


def test_train_artifacts(trained):
    for name in ("checkpoint.bin", "checkpoint_1.bin", "loss.csv", "summary.json"):
        assert (trained / name).is_file()
    loss, header = read_csv(trained / "loss.csv")
    assert header == ["epoch", "loss"] and loss.shape == (4, 2)
    summary = json.loads((trained / "summary.json").read_text())
    assert summary["final_loss"] < summary["initial_loss"]
    assert summary["config"]["train"]["epochs"] == 3


def test_train_rerun_is_byte_identical(trained, tmp_path):
    cfg = write_config(tmp_path / "run.ini")
    assert main(["train", cfg]) == EXIT_OK
    for name in ("loss.csv", "checkpoint.bin"):
        assert (tmp_path / "run" / name).read_bytes() == (trained / name).read_bytes()


def test_train_divergence_exit_code(tmp_path, capsys):
    cfg = write_config(tmp_path / "run.ini", epochs=40, lr="1e8")
    text = open(cfg).read().replace("seed = 0", "seed = 0\noptimizer = GradientDescent\ninit = PaperInit")
    open(cfg, "w").write(text)
    with np.errstate(over="ignore", invalid="ignore"):
        code = main(["train", cfg])
    assert code == EXIT_DIVERGED
    assert "diverged" in capsys.readouterr().err


@pytest.mark.parametrize("scenario", ["train", "test"])
def test_evaluate_writes_overlays(trained, tmp_path, scenario):
    assert main(["evaluate", str(trained / "checkpoint.bin"), "--scenario", scenario, "--out", str(tmp_path)]) == EXIT_OK
    data, header = read_csv(tmp_path / f"{scenario}.csv")
    assert header == ["t", "fmu_s", "fmu_v", "reference_s", "reference_v", "neuralfmu_s", "neuralfmu_v"]
    x0 = (0.5, 0.0) if scenario == "train" else (1.0, -1.5)
    np.testing.assert_allclose(data[0, 1:], list(x0) * 3)
    for ch in ("s", "v"):
        svg_ok(tmp_path / f"{scenario}_{ch}.svg")


def test_evaluate_missing_checkpoint(tmp_path):
    assert main(["evaluate", str(tmp_path / "none.bin"), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_evaluate_corrupt_checkpoint(tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"garbage")
    assert main(["evaluate", str(bad), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_extract_friction(trained, tmp_path):
    assert main(["extract", str(trained / "checkpoint.bin"), "--which", "friction", "--out", str(tmp_path)]) == EXIT_OK
    data, header = read_csv(tmp_path / "friction.csv")
    assert header == ["v", "f_learned", "f_reference"] and data.shape == (201, 3)
    assert data[0, 0] == -2.0 and data[-1, 0] == 2.0
    assert data[-1, 2] == pytest.approx(0.25 + 0.05 * 2 + 0.5 * np.exp(-4.0))
    svg_ok(tmp_path / "friction.svg")


def test_extract_displacement_of_untrained_top_is_zero(tmp_path):
    cfg = write_config(tmp_path / "run.ini", epochs=1, lr="0")
    assert main(["train", cfg]) == EXIT_OK
    out = tmp_path / "x"
    assert main(["extract", str(tmp_path / "run" / "checkpoint.bin"), "--which", "displacement", "--out", str(out)]) == EXIT_OK
    data, header = read_csv(out / "displacement.csv")
    assert header[:4] == ["t", "s", "top_ds", "top_dv"]
    assert np.all(data[:, 2:5] == 0.0)
    np.testing.assert_allclose(data[:, 5], -0.1)
    svg_ok(out / "displacement.svg")


def test_extract_is_byte_identical(trained, tmp_path):
    for d in ("a", "b"):
        main(["extract", str(trained / "checkpoint.bin"), "--out", str(tmp_path / d)])
    assert (tmp_path / "a" / "friction.csv").read_bytes() == (tmp_path / "b" / "friction.csv").read_bytes()
    assert (tmp_path / "a" / "friction.svg").read_bytes() == (tmp_path / "b" / "friction.svg").read_bytes()


def test_config_inline_comments(tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text("[train]\nepochs = 7   ; short run\nseed = 3 # fixed\n[data]\nt_end = 1.0\nn_samples = 100\n")
    rc = load_run_config(str(cfg))
    assert rc.train.epochs == 7 and rc.train.rng_seed == 3
