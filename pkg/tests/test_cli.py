import csv
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from tnad import cli, mpo, training
from tnad.config import git_blob_hash, load_config
from tnad.data import write_tabular_csv
from tnad.embedding import EmbeddingSpec
from tnad.mpo import MpoModel, MpoShape, init_mpo
from tnad.training import TrainingDiverged, substream

CONFIG = """\
dataset = tabular
name = toy
data = toy.csv
embedding = trig
n_sites = auto
phys_dim = 2
spacing = 1
bond_dim = 3
alpha = 0.1
batch_size = 8
cold_epochs = {cold}
main_epochs = {main}
init_stddev = 0.5
seeds = {seeds}
"""


@pytest.fixture
def workspace(tmp_path, monkeypatch):
    rng = np.random.default_rng(0)
    X = np.vstack([rng.normal(scale=0.5, size=(40, 4)), rng.normal(loc=3.0, size=(6, 4))])
    y = np.r_[np.zeros(40, int), np.ones(6, int)]
    write_tabular_csv(tmp_path / "toy.csv", X, y)
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv(cli.OUT_DIR_ENV, raising=False)
    return tmp_path


def write_config(path, cold=2, main=6, seeds="0"):
    path.write_text(CONFIG.format(cold=cold, main=main, seeds=seeds))
    return path


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_train_writes_outputs(workspace, capsys):
    cfg = write_config(workspace / "toy.cfg")
    assert run("train", "--config", cfg, "--out", workspace / "o") == cli.EXIT_OK
    out = workspace / "o"
    assert {p.name for p in out.iterdir()} == {"model.tnad", "history.log", "manifest.cfg", "scaler.csv"}
    assert len((out / "history.log").read_text().splitlines()) == 8
    manifest = (out / "manifest.cfg").read_text()
    assert "n_sites = 4" in manifest and "seeds = 0" in manifest
    assert f"hash.data = {git_blob_hash(workspace / 'toy.csv')}" in manifest
    model = mpo.load(out / "model.tnad")
    assert model.shape == MpoShape(4, 2, 3, 1)
    assert model.embedding == EmbeddingSpec("trig", 2)
    assert "wrote" in capsys.readouterr().out


def test_manifest_reproduces_model_bitwise(workspace):
    cfg = write_config(workspace / "toy.cfg", seeds="5")
    assert run("train", "--config", cfg, "--out", workspace / "a") == 0
    assert run("train", "--config", workspace / "a" / "manifest.cfg", "--out", workspace / "b") == 0
    assert (workspace / "a/model.tnad").read_bytes() == (workspace / "b/model.tnad").read_bytes()
    assert (workspace / "a/manifest.cfg").read_text() == (workspace / "b/manifest.cfg").read_text()


def test_zero_epochs_writes_seeded_initialization(workspace):
    cfg = write_config(workspace / "toy.cfg", cold=0, main=0, seeds="3")
    assert run("train", "--config", cfg, "--out", workspace / "z") == 0
    ref = init_mpo(MpoShape(4, 2, 3, 1), 0.5, substream(3, "init"), EmbeddingSpec("trig", 2))
    assert (workspace / "z/model.tnad").read_bytes() == mpo.dumps(ref)
    assert (workspace / "z/history.log").read_text() == ""


def test_several_seeds_get_subdirectories(workspace):
    cfg = write_config(workspace / "toy.cfg", main=1, seeds="1,2")
    assert run("train", "--config", cfg, "--out", workspace / "m") == 0
    assert (workspace / "m/seed1/model.tnad").is_file() and (workspace / "m/seed2/model.tnad").is_file()
    assert run("train", "--config", cfg, "--out", workspace / "n", "--seeds", "9") == 0
    assert "seeds = 9" in (workspace / "n/manifest.cfg").read_text()


def test_output_dir_precedence(workspace, monkeypatch):
    cfg = write_config(workspace / "toy.cfg", cold=0, main=0)
    assert run("train", "--config", cfg) == 0
    assert (workspace / cli.DEFAULT_OUT_DIR / "model.tnad").is_file()
    monkeypatch.setenv(cli.OUT_DIR_ENV, str(workspace / "env"))
    assert run("train", "--config", cfg) == 0
    assert (workspace / "env/model.tnad").is_file()
    cfg.write_text(cfg.read_text() + "out_dir = fromcfg\n")
    assert run("train", "--config", cfg) == 0
    assert (workspace / "fromcfg/model.tnad").is_file()


def test_missing_dataset_is_usage_error_without_outputs(workspace, capsys):
    cfg = write_config(workspace / "toy.cfg")
    (workspace / "toy.csv").unlink()
    assert run("train", "--config", cfg, "--out", workspace / "none") == cli.EXIT_USAGE
    assert not (workspace / "none").exists()
    assert "dataset file not found" in capsys.readouterr().err


@pytest.mark.parametrize("extra,code,msg", [
    ("bond_dim = zero\n", cli.EXIT_USAGE, "config field 'bond_dim'"),
    ("colour = blue\n", cli.EXIT_USAGE, "unknown key"),
    ("n_sites = 9\n", cli.EXIT_USAGE, "N=9 but the data has 4"),
])
def test_config_errors(workspace, capsys, extra, code, msg):
    cfg = write_config(workspace / "toy.cfg")
    cfg.write_text(cfg.read_text() + extra)
    assert run("train", "--config", cfg, "--out", workspace / "o") == code
    assert msg in capsys.readouterr().err


def test_bad_arguments_are_usage_errors(workspace):
    assert run("frobnicate") == cli.EXIT_USAGE
    assert run("train") == cli.EXIT_USAGE
    assert run("train", "--config", "x.cfg", "--seeds", "a,b") == cli.EXIT_USAGE
    assert run("train", "--config", workspace / "absent.cfg") == cli.EXIT_USAGE


def test_bad_csv_is_data_error(workspace, capsys):
    (workspace / "toy.csv").write_text("a,b,c,d,label\n1,2,3,x,0\n")
    cfg = write_config(workspace / "toy.cfg")
    assert run("train", "--config", cfg) == cli.EXIT_DATA
    assert "non-numeric cell 'x'" in capsys.readouterr().err


def test_changed_input_detected_from_manifest(workspace, capsys):
    cfg = write_config(workspace / "toy.cfg", cold=0, main=0)
    assert run("train", "--config", cfg, "--out", workspace / "a") == 0
    with open(workspace / "toy.csv", "a") as f:
        f.write("0,0,0,0,0\n")
    assert run("train", "--config", workspace / "a/manifest.cfg", "--out", workspace / "b") == cli.EXIT_DATA
    assert "manifest records" in capsys.readouterr().err


def test_divergence_exit_code(workspace, monkeypatch, capsys):
    def diverge(*a):
        raise TrainingDiverged(3, 1)

    monkeypatch.setattr(training, "_train_once", diverge)
    cfg = write_config(workspace / "toy.cfg")
    assert run("train", "--config", cfg, "--out", workspace / "d") == cli.EXIT_DIVERGED
    assert "epoch 3, step 1" in capsys.readouterr().err
    assert run("evaluate", "--config", cfg, "--out", workspace / "e") == cli.EXIT_DIVERGED
    err = capsys.readouterr().err
    assert "all 1 trials failed" in err and "seed 0" in err


def test_evaluate_reports_and_excludes_failed_trials(workspace, monkeypatch, capsys):
    real = training._train_once

    def flaky(X, shape, spec, cfg, progress):
        if cfg.seed == 1:
            raise TrainingDiverged(0, 0)
        return real(X, shape, spec, cfg, progress)

    monkeypatch.setattr(training, "_train_once", flaky)
    cfg = write_config(workspace / "toy.cfg", seeds="0,1,2")
    assert run("evaluate", "--config", cfg, "--out", workspace / "e") == 0
    summary = (workspace / "e/summary.txt").read_text()
    assert "over 2 trials" in summary and "1 failed trials excluded: seeds 1" in summary
    rows = list(csv.reader(open(workspace / "e/results.csv")))
    assert [r[2] for r in rows[1:]] == ["0", "2"]


def test_evaluate_single_seed_and_roc(workspace, capsys):
    cfg = write_config(workspace / "toy.cfg", seeds="4")
    assert run("evaluate", "--config", cfg, "--out", workspace / "e", "--roc") == 0
    summary = (workspace / "e/summary.txt").read_text()
    assert "+- 0.0000 over 1 trials" in summary
    assert (workspace / "e/roc_seed4.csv").read_text().startswith("fpr,tpr")
    rows = list(csv.reader(open(workspace / "e/results.csv")))
    assert rows[0] == ["dataset", "inlier_class", "seed", "auroc", "n_train", "n_test", "epochs", "wall_seconds"]
    assert rows[1][:3] == ["toy", "", "4"] and rows[1][4:7] == ["20", "26", "8"]


def test_parallel_evaluate_matches_serial_in_seed_order(workspace):
    cfg = write_config(workspace / "toy.cfg", main=3, seeds="3,1,2")
    assert run("evaluate", "--config", cfg, "--out", workspace / "s") == 0
    assert run("evaluate", "--config", cfg, "--out", workspace / "p", "--jobs", "2") == 0
    serial = list(csv.reader(open(workspace / "s/results.csv")))
    parallel = list(csv.reader(open(workspace / "p/results.csv")))
    assert [r[2] for r in parallel[1:]] == ["3", "1", "2"]
    assert [r[:7] for r in serial] == [r[:7] for r in parallel]


def test_score_after_training(workspace, capsys):
    cfg = write_config(workspace / "toy.cfg", cold=5, main=80, seeds="0")
    assert run("train", "--config", cfg, "--out", workspace / "o") == 0
    capsys.readouterr()
    assert run("score", "--model", workspace / "o/model.tnad", "--data", workspace / "toy.csv") == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "index,decision_log" and len(lines) == 47
    scores = np.array([float(l.split(",")[1]) for l in lines[1:]])
    assert [int(l.split(",")[0]) for l in lines[1:]] == list(range(46))
    # the training half of the normals sits near the target log-norm of 1
    from tnad.evaluation import split_normals
    tr, _ = split_normals(40, 0)
    assert abs(scores[tr].mean() - 1.0) < 0.25


def test_score_unlabelled_csv_and_mismatch(workspace, capsys):
    cfg = write_config(workspace / "toy.cfg", cold=0, main=1)
    assert run("train", "--config", cfg, "--out", workspace / "o") == 0
    (workspace / "u.csv").write_text("a,b,c,d\n0,0,0,0\n1,1,1,1\n")
    capsys.readouterr()
    assert run("score", "--model", workspace / "o/model.tnad", "--data", workspace / "u.csv") == 0
    assert len(capsys.readouterr().out.splitlines()) == 3
    (workspace / "w.csv").write_text("a,b\n0,0\n")
    assert run("score", "--model", workspace / "o/model.tnad", "--data", workspace / "w.csv") == cli.EXIT_DATA
    assert "model has N=4 sites but the data has 2 features" in capsys.readouterr().err


def test_identity_model_gives_constant_scores(workspace, capsys):
    eye = np.eye(2).reshape(1, 1, 2, 2)
    model = MpoModel(MpoShape(3, 2, 1, 1), [eye] * 3, EmbeddingSpec("trig", 2))
    mpo.save(model, workspace / "id.tnad")
    (workspace / "d.csv").write_text("a,b,c\n0.1,5,-3\n2,0.5,0\n7,7,7\n")
    assert run("score", "--model", workspace / "id.tnad", "--data", workspace / "d.csv") == 0
    scores = [float(l.split(",")[1]) for l in capsys.readouterr().out.splitlines()[1:]]
    np.testing.assert_allclose(scores, 0.0, atol=1e-14)


def test_score_idx_images(workspace, capsys):
    from tnad.data import write_idx
    rng = np.random.default_rng(0)
    write_idx(workspace / "imgs-idx3-ubyte", rng.integers(0, 256, size=(3, 28, 28), dtype=np.uint8))
    model = init_mpo(MpoShape(196, 2, 2, 8), 0.5, 0, EmbeddingSpec("trig", 2))
    mpo.save(model, workspace / "img.tnad")
    assert run("score", "--model", workspace / "img.tnad", "--data", workspace / "imgs-idx3-ubyte") == 0
    assert len(capsys.readouterr().out.splitlines()) == 4


def test_scrambled_model_is_data_error(workspace, capsys):
    (workspace / "bad.tnad").write_bytes(b"XXXX" + bytes(40))
    (workspace / "d.csv").write_text("a\n1\n")
    assert run("score", "--model", workspace / "bad.tnad", "--data", workspace / "d.csv") == cli.EXIT_DATA
    assert run("inspect", "--model", workspace / "bad.tnad") == cli.EXIT_DATA
    assert "magic" in capsys.readouterr().err
    assert run("inspect", "--model", workspace / "absent.tnad") == cli.EXIT_USAGE


def test_inspect(workspace, capsys):
    model = init_mpo(MpoShape(13, 4, 5, 1), 0.1189, 0, EmbeddingSpec("trig", 4))
    mpo.save(model, workspace / "m.tnad")
    assert run("inspect", "--model", workspace / "m.tnad") == 0
    out = capsys.readouterr().out
    assert "sites N     13" in out and "dim W = 6.711e+07" in out and "trigonometric p=4" in out
    assert f"{mpo.fnorm_log(model):.6g}" in out


def test_console_script_entry_point(workspace):
    r = subprocess.run([sys.executable, "-m", "tnad.cli", "inspect", "--model", "nope"],
                       capture_output=True, text=True)
    assert r.returncode == cli.EXIT_USAGE
    assert "model file not found" in r.stderr


def test_wine_preset_trains_full_schedule(data_dir, tmp_path):
    """The Wine preset produces a model and one history line per epoch."""
    preset = Path(__file__).resolve().parents[1] / "presets" / "wine.cfg"
    assert run("train", "--config", preset, "--out", tmp_path, "--seeds", "0") == 0
    assert len((tmp_path / "history.log").read_text().splitlines()) == 300
    assert load_config(tmp_path / "manifest.cfg").shape() == MpoShape(13, 4, 5, 1)
