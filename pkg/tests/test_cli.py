import csv
import subprocess
import sys

import numpy as np
import pytest

from fovseg.checkpoint import save_checkpoint
from fovseg.cli import main, read_config
from fovseg.storage import load_labels, load_map_sidecar
from fovseg.trainer import SeedStreams, TrainConfig, build_models, model_state

SMALL = ["--set", "fovs=8,16,24", "--set", "out_size=8", "--set", "lowres_rate=0.25",
         "--set", "seg_widths=4,8", "--set", "fov_hidden=4,4", "--set", "val_every=5", "--set", "lr0=1e-3"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(["synth", "--out", str(out), "--n-images", "5", "--size", "64", "--seed", "4"]) == 0
    return out


def train(tmp, data_dir, name, mode, iterations=10):
    out = tmp / name
    rc = main(["train", "--out", str(out), "--data", str(data_dir), "--mode", mode,
               "--iterations", str(iterations)] + SMALL)
    assert rc == 0
    return out


def files(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_synth_single_image(tmp_path):
    out = tmp_path / "one"
    assert main(["synth", "--out", str(out), "--n-images", "1", "--size", "64"]) == 0
    assert len(list((out / "images").iterdir())) == 1
    assert len(list((out / "labels").iterdir())) == 1
    assert (out / "manifest.csv").exists()
    assert read_config(out / "config.txt")["n_images"] == "1"
    manifest = read_config(out / "manifest.txt")
    assert manifest["command"] == "synth" and "file.manifest.csv" in manifest


def test_synth_too_small(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "x"), "--size", "32"]) == 2


def test_train_fixed_then_eval(tmp_path, data_dir):
    run = train(tmp_path, data_dir, "fixed0", "fixed-0")
    for name in ("model.ckpt", "best.ckpt", "runlog.csv", "config.txt", "manifest.txt"):
        assert (run / name).exists()
    assert main(["eval", "--out", str(tmp_path / "ev"), "--run", str(run), "--data", str(data_dir),
                 "--split", "val"]) == 0
    lines = (tmp_path / "ev" / "scores.csv").read_text().splitlines()
    assert lines[0] == "class,iou,pixel_accuracy" and lines[-1].startswith("mean,")
    # the same numbers when scoring written predictions
    assert main(["infer", "--out", str(tmp_path / "inf"), "--run", str(run), "--data", str(data_dir),
                 "--split", "val"]) == 0
    assert main(["eval", "--out", str(tmp_path / "ev2"), "--pred", str(tmp_path / "inf" / "pred"),
                 "--data", str(data_dir), "--split", "val"]) == 0
    assert (tmp_path / "ev2" / "scores.csv").read_text() == (tmp_path / "ev" / "scores.csv").read_text()


def test_infer_writes_indexed_png(tmp_path, data_dir):
    from PIL import Image
    run = train(tmp_path, data_dir, "mean", "mean", iterations=3)
    assert main(["infer", "--out", str(tmp_path / "inf"), "--run", str(run), "--data", str(data_dir),
                 "--split", "test"]) == 0
    preds = sorted((tmp_path / "inf" / "pred").iterdir())
    assert len(preds) == 1
    with Image.open(preds[0]) as im:
        assert im.mode == "P" and im.size == (64, 64)
    assert load_labels(preds[0]).max() < 4


def zero_run(tmp_path, fovs=(8, 16, 24)):
    cfg = TrainConfig(mode="mean", fovs=fovs, out_size=8, lowres_rate=0.25, seg_widths=(4, 8), fov_hidden=(4, 4))
    fov, seg = build_models(cfg, SeedStreams(0))
    fov.zero_()
    seg.zero_()
    run = tmp_path / "zero"
    run.mkdir()
    save_checkpoint(run / "model.ckpt", model_state(fov, seg))
    lines = [f"{k} = {','.join(map(str, v)) if isinstance(v, tuple) else v}"
             for k, v in vars(cfg).items() if v is not None]
    (run / "config.txt").write_text("\n".join(lines) + "\n")
    return run


def test_fovmap_zero_model_is_half(tmp_path, data_dir):
    run = zero_run(tmp_path)
    out = tmp_path / "fm"
    assert main(["fovmap", "--out", str(out), "--run", str(run), "--data", str(data_dir), "--split", "train"]) == 0
    maps = sorted((out / "maps").glob("*.png"))
    assert len(maps) == 3
    for m in maps:
        np.testing.assert_allclose(load_map_sidecar(m), 0.5, atol=1e-12)
    with open(out / "fovmap_summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert all(float(r["mean"]) == 0.5 and float(r["mean_fine"]) == 0.5 for r in rows)


def test_goldstd(tmp_path, data_dir):
    baselines = [train(tmp_path, data_dir, f"b{d}", f"fixed-{d}", iterations=4) for d in range(3)]
    ours = train(tmp_path, data_dir, "ours", "mean", iterations=4)
    out = tmp_path / "gs"
    rc = main(["goldstd", "--out", str(out), "--baselines", *map(str, baselines), "--run", str(ours),
               "--data", str(data_dir), "--split", "val"])
    assert rc == 0
    gold = load_map_sidecar(next((out / "gold").glob("*.png")))
    assert gold.shape == (8, 8) and np.all((gold >= 0) & (gold <= 1))
    rows = list(csv.reader(open(out / "mse.csv")))
    assert rows[0] == ["id", "mse"] and rows[-2][0] == "mean"


def test_goldstd_wrong_order(tmp_path, data_dir):
    b = [train(tmp_path, data_dir, f"w{d}", f"fixed-{d}", iterations=1) for d in (1, 0, 2)]
    assert main(["goldstd", "--out", str(tmp_path / "gs"), "--baselines", *map(str, b),
                 "--data", str(data_dir)]) == 2


@pytest.mark.parametrize("argv", [
    ["train", "--out", "{t}/o"],
    ["train", "--out", "{t}/o", "--data", "{t}/missing"],
    ["train", "--out", "{t}/o", "--data", "{d}", "--set", "bogus=1"],
    ["train", "--out", "{t}/o", "--data", "{d}", "--set", "iterations=abc"],
    ["train", "--out", "{t}/o", "--data", "{d}", "--mode", "fixed-9"],
    ["infer", "--out", "{t}/o", "--run", "{t}/nowhere", "--data", "{d}"],
    ["eval", "--out", "{t}/o", "--data", "{d}"],
    ["train", "--out", "{t}/o", "--config", "{t}/none.txt"],
])
def test_usage_errors_exit_2(tmp_path, data_dir, argv):
    argv = [a.format(t=tmp_path, d=data_dir) for a in argv]
    assert main(argv) == 2


def test_runtime_failure_exit_1(tmp_path, data_dir):
    run = zero_run(tmp_path)
    (run / "model.ckpt").write_bytes(b"not a checkpoint")
    assert main(["infer", "--out", str(tmp_path / "o"), "--run", str(run), "--data", str(data_dir)]) == 1


def test_argparse_usage_exit_2():
    proc = subprocess.run([sys.executable, "-m", "fovseg", "train"], capture_output=True)
    assert proc.returncode == 2


def test_help_lists_commands():
    proc = subprocess.run([sys.executable, "-m", "fovseg", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("synth", "train", "infer", "fovmap", "goldstd", "eval"):
        assert cmd in proc.stdout


def test_threads_from_environment(tmp_path, data_dir, monkeypatch):
    monkeypatch.setenv("FOVSEG_THREADS", "3")
    run = train(tmp_path, data_dir, "env", "fixed-1", iterations=1)
    assert read_config(run / "config.txt")["threads"] == "3"
    rc = main(["train", "--out", str(tmp_path / "flag"), "--data", str(data_dir), "--iterations", "1",
               "--threads", "2"] + SMALL)
    assert rc == 0 and read_config(tmp_path / "flag" / "config.txt")["threads"] == "2"


def test_rerun_from_config_is_bitwise(tmp_path, data_dir):
    run = train(tmp_path, data_dir, "first", "gsm", iterations=6)
    assert main(["train", "--out", str(tmp_path / "second"), "--config", str(run / "config.txt")]) == 0
    assert files(run) == files(tmp_path / "second")
