import subprocess
import sys

import numpy as np
import pytest
from cli_runs import COMMANDS, GRAPHS, determinism_report, run

from lpbn.data import RECORD_BYTES, CifarSource, load_cifar, read_cifar_records, scale_pixels


def write_batch(path, labels, pixels):
    rec = np.concatenate([np.asarray(labels, np.uint8)[:, None], np.asarray(pixels, np.uint8)], axis=1)
    rec.tofile(path)
    return path


def ramp(n):
    return (np.arange(n * 3072) % 256).reshape(n, 3072)


# -- CIFAR reader -----------------------------------------------------------------


def test_pixel_scaling_extremes():
    assert scale_pixels(np.full(4, 255, np.uint8)).tolist() == [1.0] * 4
    assert scale_pixels(np.zeros(4, np.uint8)).tolist() == [-1.0] * 4
    assert scale_pixels(np.array([0, 255], np.uint8)).dtype == np.float32


def test_known_record(tmp_path):
    f = write_batch(tmp_path / "test_batch.bin", [3], ramp(1))
    px, lab = read_cifar_records(f)
    assert lab.tolist() == [3] and px.shape == (1, 3072) and px[0, 300] == 300 % 256
    d = load_cifar(CifarSource(str(f), flatten=False), "test")
    assert d.x.shape == (1, 3, 32, 32)
    # channel-major layout: byte 1024 is the first green pixel
    assert d.x[0, 1, 0, 0] == np.float32(1024 % 256) / np.float32(127.5) - 1
    assert d.y.tolist() == [3]


def test_bad_length(tmp_path):
    f = tmp_path / "short.bin"
    f.write_bytes(b"\x00" * (RECORD_BYTES - 1))
    with pytest.raises(ValueError, match="multiple"):
        read_cifar_records(f)


def test_bad_label(tmp_path):
    f = write_batch(tmp_path / "b.bin", [1, 10], ramp(2))
    with pytest.raises(ValueError, match="record 1 has label 10"):
        read_cifar_records(f)


def test_directory_and_subset(tmp_path):
    labels = np.arange(20) % 10
    for name in ("data_batch_1.bin", "data_batch_2.bin"):
        write_batch(tmp_path / name, labels, ramp(20))
    write_batch(tmp_path / "test_batch.bin", labels, ramp(20))
    src = CifarSource(str(tmp_path), n_train=7, n_test=5, seed=2)
    tr, te = load_cifar(src, "train"), load_cifar(src, "test")
    assert len(tr) == 7 and len(te) == 5 and tr.x.shape == (7, 3072)
    again = load_cifar(src, "train")
    assert np.array_equal(tr.x, again.x) and np.array_equal(tr.y, again.y)


def test_missing_and_out_of_scope(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_cifar(CifarSource(str(tmp_path)), "train")
    with pytest.raises(ValueError, match="ImageNet"):
        load_cifar(CifarSource(str(tmp_path / "imagenet")), "train")


# -- CLI --------------------------------------------------------------------------


def test_every_command_is_deterministic(tmp_path):
    same = determinism_report(tmp_path)
    assert set(same) == set(COMMANDS)
    assert all(same.values()), same


def test_validate_exit_codes(tmp_path):
    assert run(["validate", str(GRAPHS / "fc_stack.json")], tmp_path)[0] == 0
    code, _, err = run(["validate", str(GRAPHS / "conv_relu_conv.json")], tmp_path)
    assert code == 1 and "conv_relu_conv.json:" in err


def test_curve_csv(tmp_path):
    code, _, _ = run(["curve", "--scheme", "l4", "--min", "-1", "--max", "1", "--step", "0.5"], tmp_path)
    lines = (tmp_path / "curve_L4.csv").read_text().splitlines()
    assert code == 0 and lines[0] == "x,q,logpdf_t3" and len(lines) == 6
    assert lines[3].startswith("0.000000,0.125,")


def test_out_env_and_flag(tmp_path, monkeypatch):
    from lpbn.cli import main

    monkeypatch.setenv("LPBN_OUT", str(tmp_path / "env"))
    assert main(["curve", "--scheme", "L3", "--no-density"]) == 0
    assert (tmp_path / "env" / "curve_L3.csv").read_text().startswith("x,q\n")
    assert main(["--out", str(tmp_path / "flag"), "curve", "--scheme", "L3"]) == 0
    assert (tmp_path / "flag" / "curve_L3.csv").exists()


def test_errors_are_reported(tmp_path, monkeypatch):
    monkeypatch.delenv("LPBN_CIFAR_DIR", raising=False)
    code, _, err = run(["curve", "--scheme", "Q7"], tmp_path)
    assert code == 1 and "unknown quantization scheme" in err
    code, _, err = run(["train", "--cifar-dir", str(tmp_path / "nowhere"), "--epochs", "1"], tmp_path)
    assert code == 1 and "does not exist" in err
    code, _, err = run(["train", "--epochs", "1"], tmp_path)
    assert code == 1 and "LPBN_CIFAR_DIR" in err


def test_train_on_cifar_fixture(tmp_path):
    labels = np.arange(40) % 10
    write_batch(tmp_path / "data_batch_1.bin", labels, np.random.default_rng(0).integers(0, 256, (40, 3072)))
    write_batch(tmp_path / "test_batch.bin", labels[:20], np.random.default_rng(1).integers(0, 256, (20, 3072)))
    code, _, err = run(["train", "--cifar-dir", str(tmp_path), "--width", "2", "--epochs", "1", "--batch-size", "20", "--quiet"], tmp_path / "o")
    assert code == 0, err
    assert (tmp_path / "o" / "history.csv").read_text().count("\n") == 3


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "lpbn", "--out", str(tmp_path), "validate", str(GRAPHS / "postact_residual.json")],
                          capture_output=True, text=True)
    assert proc.returncode == 1 and proc.stderr.strip()
