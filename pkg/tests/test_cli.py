import numpy as np
import pytest

from perturbgan import checkpoint as ckpt
from perturbgan import ptns
from perturbgan.cli import main
from perturbgan.noisegen import MaskKey, make_mask
from perturbgan.presets import TINY_CONFIG
from perturbgan.trainer import read_ppm


@pytest.fixture
def config_file(tmp_path):
    cfg = TINY_CONFIG.replace(iterations=2, n_critic=1, n_data=32, dtype="float32")
    path = tmp_path / "run.cfg"
    path.write_text("# tiny run\n" + cfg.to_text())
    return path


def test_count_params_compare(capsys):
    assert main(["count-params", "--model", "PGv1", "--compare", "CG"]) == 0
    out = capsys.readouterr().out
    assert "0.48" in out and "5,570,944" in out
    assert "per-stage 1/9 law: holds" in out
    assert "stage g.s0.tpm / g.s0.up = 1/9" in out


def test_count_params_critics(capsys):
    assert main(["count-params", "--model", "PD", "--compare", "CD"]) == 0
    assert "0.13" in capsys.readouterr().out


def test_maskgen_writes_reproducible_mask(tmp_path, capsys):
    out = tmp_path / "m.ptns"
    assert main(["maskgen", "--key", "7,2,3,8x8,MT19937,SND", "--out", str(out)]) == 0
    np.testing.assert_array_equal(ptns.load(out), make_mask(MaskKey(7, 2, 3, (8, 8))))
    assert "shape=(8, 8)" in capsys.readouterr().out


def test_rng_test_randu(tmp_path, capsys):
    out = tmp_path / "t.csv"
    assert main(["rng-test", "--rng", "RANDU", "--n", "2000", "--out", str(out)]) == 0
    assert "residue_zero_fraction=1" in capsys.readouterr().out
    lines = out.read_text().splitlines()
    assert lines[0] == "x,y,z" and len(lines) == 2001


def test_make_synth(tmp_path):
    assert main(["make-synth", "--spec", "two-mode", "--n", "16", "--out", str(tmp_path)]) == 0
    assert ptns.load(tmp_path / "images.ptns").shape == (16, 3, 32, 32)
    assert ptns.load(tmp_path / "labels.ptns").tolist() == [0.0, 1.0] * 8
    assert read_ppm(tmp_path / "preview.ppm").shape == (128, 128, 3)


def test_train_generate_eval(tmp_path, config_file, capsys):
    run = tmp_path / "run"
    assert main(["train", "--config", str(config_file), "--out", str(run)]) == 0
    ck = ckpt.load(run / "checkpoint_2.bin", run / "arch.json")
    # deterministic mode (the default) pins 64-bit arithmetic
    assert ck.meta["config"]["dtype"] == "float64"
    assert not any("mask" in k for k in ck.tensors)
    assert main(["generate", "--checkpoint", str(run / "checkpoint_2.bin"), "--n", "4",
                 "--out", str(tmp_path / "gen")]) == 0
    assert ptns.load(tmp_path / "gen" / "images.ptns").shape == (4, 3, 32, 32)
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(run / "checkpoint_2.bin"), "--n", "8"]) == 0
    header, row = capsys.readouterr().out.splitlines()
    assert header == "iteration,proxy_is,moment_distance,n_images"
    assert row.startswith("2,,") and row.endswith(",8")


def test_no_deterministic_keeps_config_dtype(tmp_path, config_file):
    run = tmp_path / "run"
    assert main(["--no-deterministic", "train", "--config", str(config_file), "--out", str(run)]) == 0
    assert ckpt.load(run / "checkpoint_2.bin").meta["config"]["dtype"] == "float32"


def test_sweep_and_classifier(tmp_path, config_file, capsys):
    clf = tmp_path / "clf.bin"
    assert main(["fit-classifier", "--n", "128", "--steps", "20", "--out", str(clf)]) == 0
    assert main(["sweep", "--config", str(config_file), "--seeds", "1,2",
                 "--classifier", str(clf), "--out", str(tmp_path / "sw")]) == 0
    lines = (tmp_path / "sw" / "sweep.csv").read_text().splitlines()
    assert lines[0].startswith("mask_seed,") and len(lines) == 4


def test_exit_code_contract_violation(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("batch_sise = 4\n")
    assert main(["train", "--config", str(bad)]) == 1
    assert "unknown key" in capsys.readouterr().err
    assert main(["maskgen", "--key", "1,2"]) == 1


def test_exit_code_io_error(tmp_path):
    assert main(["train", "--config", str(tmp_path / "missing.cfg")]) == 2
    assert main(["generate", "--checkpoint", str(tmp_path / "none.bin")]) == 2


def test_exit_code_hash_or_format_error(tmp_path):
    junk = tmp_path / "junk.bin"
    junk.write_bytes(b"not a checkpoint")
    assert main(["eval", "--checkpoint", str(junk)]) == 1


def test_module_entry_point():
    import subprocess
    import sys
    r = subprocess.run([sys.executable, "-m", "perturbgan", "count-params", "--model", "PD"],
                       capture_output=True, text=True)
    assert r.returncode == 0 and "PD" in r.stdout
