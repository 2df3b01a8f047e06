import configparser

import numpy as np
import pytest

from advkit import cli, harness
from advkit.config import ExperimentConfig
from advkit.data import write_idx_dataset
from advkit.metrics import read_csv, read_pnm
from advkit.model import load_weights


@pytest.fixture(scope="module")
def workdir(tmp_path_factory, digits):
    train, test = digits
    d = tmp_path_factory.mktemp("cli")
    write_idx_dataset(train.subset(np.arange(120)), d / "data", "train")
    write_idx_dataset(test.subset(np.arange(40)), d / "data", "test")
    rc = cli.main(["train", "--dataset", str(d / "data"), "--out", str(d / "model"), "--epochs", "2", "--lr", "3e-3"])
    assert rc == 0
    return d


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_train_outputs(workdir):
    m = load_weights(workdir / "model" / "small-a.weights")
    assert m.name == "small-a"
    head, rows = read_csv(workdir / "model" / "train_log.csv")
    assert head == ["epoch", "loss", "accuracy"] and len(rows) == 2


def test_train_is_seed_deterministic(workdir, tmp_path):
    run("train", "--dataset", workdir / "data", "--out", tmp_path, "--epochs", "2", "--lr", "3e-3")
    assert (tmp_path / "small-a.weights").read_bytes() == (workdir / "model" / "small-a.weights").read_bytes()


def test_attack_one_image_one_row(workdir, tmp_path):
    w = workdir / "model" / "small-a.weights"
    assert run("attack", "--dataset", workdir / "data", "--weights", w, "--attacks", "fgsm", "--samples", 1, "--out", tmp_path) == 0
    head, rows = read_csv(tmp_path / "table.csv")
    assert len(rows) == 1 and rows[0][1] == "fgsm"
    assert (tmp_path / "table.md").exists()
    assert (tmp_path / "curves" / "fgsm_000.csv").exists()
    assert (tmp_path / "images" / "fgsm_000_rho.pgm").exists()
    cfg = configparser.ConfigParser()
    cfg.read(tmp_path / "config.ini")
    assert cfg["fgsm"]["epsilon"] == "0.1" and cfg["run"]["samples"] == "1"


def test_attack_reports_are_byte_identical(workdir, tmp_path):
    w = workdir / "model" / "small-a.weights"
    args = ["attack", "--dataset", workdir / "data", "--weights", w, "--attacks", "pgd,finefool", "--samples", 5, "--seed", 3]
    run(*args, "--out", tmp_path / "a")
    run(*args, "--out", tmp_path / "b")
    for name in ("table.csv", "config.ini", "curves/pgd_000.csv"):
        assert (tmp_path / "a" / name).read_bytes() != b""
        assert (tmp_path / "a" / name).read_bytes().replace(b"/a", b"/b") == (tmp_path / "b" / name).read_bytes()


def test_eps_sweep_asr_non_decreasing(workdir, tmp_path):
    w = workdir / "model" / "small-a.weights"
    rates = []
    for eps in (0.0, 0.05, 0.1, 0.2):
        out = tmp_path / str(eps)
        run("attack", "--dataset", workdir / "data", "--weights", w, "--attacks", "bim", "--eps", eps, "--samples", 20, "--out", out)
        rates.append(float(read_csv(out / "table.csv")[1][0][-1]))
    assert rates == sorted(rates) and rates[0] == 0.0


def test_config_precedence(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[attack]\neps = 0.2\niters = 7\n[finefool]\nmu = 0.5\neps = 0.3\n[defense]\nsigma = 2\nkernel = 5\n")
    conf = ExperimentConfig.read(ini)
    cfgs = harness.attack_configs(["fgsm", "finefool", "deepfool"], conf.attack_base(), conf.per_attack(["finefool"]), {"iters": 3})
    assert cfgs["fgsm"].epsilon == 0.2 and cfgs["fgsm"].iters == 3
    assert cfgs["finefool"].epsilon == 0.3 and cfgs["finefool"].mu == 0.5
    # built-in per-attack default sits below the [attack] section
    assert cfgs["deepfool"].epsilon == 0.2
    assert harness.attack_configs(["deepfool"])["deepfool"].epsilon == 1.0
    assert conf.defense() == {"sigma": 2.0, "kernel_size": 5}


def test_config_rejects_unknown_key(tmp_path, workdir):
    ini = tmp_path / "c.ini"
    ini.write_text("[attack]\nepsilonn = 0.2\n")
    w = workdir / "model" / "small-a.weights"
    assert run("attack", "--config", ini, "--dataset", workdir / "data", "--weights", w, "--out", tmp_path / "o") != 0


def test_defend(workdir, tmp_path):
    w = workdir / "model" / "small-a.weights"
    assert run("defend", "--dataset", workdir / "data", "--weights", w, "--attacks", "fgsm", "--samples", 10, "--out", tmp_path) == 0
    head, rows = read_csv(tmp_path / "defense.csv")
    assert head == ["attack", "defense", "ASR", "accuracy"]
    assert [r[0] for r in rows[:3]] == ["clean"] * 3
    for r in rows:
        assert float(r[2]) + float(r[3]) == pytest.approx(100.0, abs=0.01)
    # the undefended column matches the white-box table
    run("attack", "--dataset", workdir / "data", "--weights", w, "--attacks", "fgsm", "--samples", 10, "--out", tmp_path / "wb")
    wb = float(read_csv(tmp_path / "wb" / "table.csv")[1][0][-1])
    assert float([r for r in rows if r[:2] == ["fgsm", "none"]][0][2]) == wb


def test_transfer_matrix(workdir, tmp_path):
    w = workdir / "model" / "small-a.weights"
    run("train", "--dataset", workdir / "data", "--out", tmp_path, "--model", "small-c", "--epochs", "1")
    c = tmp_path / "small-c.weights"
    assert run("transfer", "--dataset", workdir / "data", "--substitutes", w, c, "--targets", w, c,
               "--attacks", "fgsm", "--samples", 5, "--out", tmp_path / "t") == 0
    head, rows = read_csv(tmp_path / "t" / "transfer.csv")
    assert len(rows) == 2 and len(head) == 4 + 2
    md = (tmp_path / "t" / "transfer.md").read_text()
    assert md.count("*") >= 2
    # diagonal reproduces the white-box number
    run("attack", "--dataset", workdir / "data", "--weights", w, "--attacks", "fgsm", "--samples", 5, "--out", tmp_path / "wb")
    assert float(rows[0][4]) == float(read_csv(tmp_path / "wb" / "table.csv")[1][0][-1])


def test_visualize(workdir, tmp_path):
    w = workdir / "model" / "small-a.weights"
    assert run("visualize", "--dataset", workdir / "data", "--weights", w, "--attacks", "fgsm,finefool", "--attention", "--out", tmp_path) == 0
    grids = sorted(tmp_path.glob("grid_*.pgm"))
    assert len(grids) == 1 and len(list(tmp_path.glob("attention_*.pgm"))) == 1
    img = read_pnm(grids[0])
    assert img.shape == (2 * 30 + 2, 3 * 30 + 2)  # 2 rows, attacks + 1 columns, 2px padding


def test_errors_exit_nonzero(workdir, tmp_path, capsys):
    w = workdir / "model" / "small-a.weights"
    assert run("attack", "--dataset", tmp_path / "missing", "--weights", w, "--out", tmp_path / "o") != 0
    assert "missing" in capsys.readouterr().err
    assert run("attack", "--dataset", workdir / "data", "--weights", tmp_path / "none.w", "--out", tmp_path / "o") != 0
    assert "none.w" in capsys.readouterr().err
    assert run("attack", "--dataset", workdir / "data", "--weights", w, "--samples", 0, "--out", tmp_path / "o") != 0
    assert run("attack", "--dataset", workdir / "data", "--weights", w, "--attacks", "zoo", "--out", tmp_path / "o") != 0
    assert run("attack", "--dataset", workdir / "data", "--weights", w, "--model", "small-b", "--out", tmp_path / "o") != 0
    with pytest.raises(SystemExit):
        cli.main(["attack"])
