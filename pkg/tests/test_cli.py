import json

import numpy as np
import pytest

from mixc import store
from mixc.cli import main


def run(*argv):
    try:
        return main([str(a) for a in argv])
    except SystemExit as e:  # argparse flag errors
        return e.code


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("data") / "ds"
    assert main(["gen-data", "--out", str(d), "--counts", "6,6,6,6", "--size", "16", "--seed", "1"]) == 0
    return d


def test_gen_data_default_summary(tmp_path, capsys):
    assert run("gen-data", "--out", tmp_path / "d", "--size", "16") == 0
    first = capsys.readouterr().out.splitlines()[0]
    # 75/15/10 of 878 by largest remainder
    assert first == "total 878, splits 658/132/88"


def test_gen_data_reproducible(tmp_path):
    for name in ("a", "b"):
        assert run("gen-data", "--out", tmp_path / name, "--counts", "4,4,4,4", "--seed", "1", "--size", "16") == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_gen_data_png_and_run_root(tmp_path, monkeypatch):
    monkeypatch.setenv("MIXC_RUN_ROOT", str(tmp_path))
    assert run("gen-data", "--out", "rel", "--counts", "2,2,2,2", "--size", "16", "--format", "png") == 0
    assert (tmp_path / "rel" / "manifest.json").is_file()
    assert any(p.suffix == ".png" for p in (tmp_path / "rel" / "images").iterdir())


@pytest.mark.parametrize("argv", [
    ["gen-data", "--out", "x", "--size", "8"],
    ["gen-data", "--out", "x", "--counts", "1,2,3"],
    ["gen-data"],
    ["nonsense"],
])
def test_usage_errors_exit_2(tmp_path, argv, capsys):
    assert run("--run-root", tmp_path, *argv) == 2
    assert not (tmp_path / "x").exists()


def test_size_error_message(tmp_path, capsys):
    run("gen-data", "--out", tmp_path / "x", "--size", "8")
    assert "size < 16" in capsys.readouterr().err


def test_missing_data_dir_exit_2(tmp_path, capsys):
    assert run("mixup-preview", "--data", tmp_path / "nope", "--out", tmp_path / "p.png") == 2
    assert "not found" in capsys.readouterr().err
    assert run("train", "--data", tmp_path / "nope", "--out", tmp_path / "r") == 2


def test_runtime_failure_exit_1(tmp_path, dataset, capsys):
    bad = tmp_path / "bad.mxc"
    bad.write_bytes(b"junk")
    assert run("eval", "--data", dataset, "--checkpoint", bad, "--out", tmp_path / "e") == 1
    assert "CheckpointError" in capsys.readouterr().err


def test_invalid_train_flags_exit_2(tmp_path, dataset):
    assert run("train", "--data", dataset, "--out", tmp_path / "r", "--rot", "45") == 2
    assert run("train", "--data", dataset, "--out", tmp_path / "r", "--alpha", "0.2", "--batch-size", "1") == 2
    assert not (tmp_path / "r").exists()


TRAIN = ["--epochs", "2", "--size", "16", "--batch-size", "4", "--seed", "3"]


def test_train_writes_artifact_and_is_reproducible(tmp_path, dataset, capsys):
    for name in ("r1", "r2"):
        assert run("train", "--data", dataset, "--alpha", "0.2", "--shift", "0.1", "--hflip",
                   "--out", tmp_path / name, *TRAIN) == 0
    out = capsys.readouterr().out
    assert "pipeline: mixup(alpha=0.2) -> shift -> hflip" in out
    assert "test acc" in out
    a, b = tree_bytes(tmp_path / "r1"), tree_bytes(tmp_path / "r2")
    assert set(a) == {"config.json", "history.csv", "best.mxc", "metrics.json", "report.json", "report.txt"}
    assert a == b
    cfg = json.loads(a["config.json"])["config"]
    assert (cfg["alpha"], cfg["shift_max"], cfg["hflip"], cfg["max_epochs"]) == (0.2, 0.1, True, 2)
    assert len(a["history.csv"].decode().splitlines()) == 3


def test_desk_preset_and_eval(tmp_path, dataset, capsys):
    assert run("train", "--data", dataset, "--desk", "--epochs", "1", "--size", "16", "--out", tmp_path / "r") == 0
    cfg = json.loads((tmp_path / "r" / "config.json").read_text())["config"]
    assert (cfg["plateau_patience"], cfg["early_stop_patience"]) == (3, 15)
    assert run("eval", "--data", dataset, "--checkpoint", tmp_path / "r" / "best.mxc", "--size", "16",
               "--split", "all", "--out", tmp_path / "e") == 0
    rep = json.loads((tmp_path / "e" / "report.json").read_text())
    assert np.array(rep["confusion_matrix"]).sum() == 24
    assert "precision" in capsys.readouterr().out


def test_compare_command(tmp_path, dataset, capsys):
    for name, alpha in (("base", "0"), ("mix", "0.4")):
        assert run("train", "--data", dataset, "--alpha", alpha, "--out", tmp_path / name, *TRAIN) == 0
    capsys.readouterr()
    assert run("compare", tmp_path / "base", tmp_path / "mix", "--names", "Baseline,alpha=0.4",
               "--out", tmp_path / "cmp.csv") == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].split()[0] == "Model" and lines[1].startswith("Baseline") and lines[2].startswith("alpha=0.4")
    assert (tmp_path / "cmp.csv").read_text().startswith("name,train_acc,gap,test_acc")
    assert run("compare", tmp_path / "base") == 2


def test_cv_command(tmp_path, dataset):
    assert run("cv", "--data", dataset, "--k", "3", "--out", tmp_path / "cv", *TRAIN) == 0
    res = json.loads((tmp_path / "cv" / "cv.json").read_text())
    assert len(res["fold_accs"]) == 3 and sum(res["fold_sizes"]) == 24
    assert run("cv", "--data", dataset, "--k", "10", "--out", tmp_path / "cv2", *TRAIN) == 1


def test_corrupt_command(tmp_path, dataset, capsys):
    assert run("corrupt", "--data", dataset, "--mode", "random", "--fraction", "0.5", "--seed", "2",
               "--out", tmp_path / "c") == 0
    assert "random" in capsys.readouterr().out
    m = store.load_manifest(tmp_path / "c")
    assert sum(e.meta.corrupted for e in m.entries) == 12
    # relocated manifest still resolves its images
    imgs, _, _ = store.load_split(tmp_path / "c", "train")
    assert len(imgs) == m.split_sizes()["train"]
    assert run("corrupt", "--data", dataset, "--mode", "random", "--fraction", "2", "--out", tmp_path / "d") == 2


def test_preview_single_cell(tmp_path, dataset):
    assert run("mixup-preview", "--data", dataset, "--grid", "1x1", "--out", tmp_path / "p.png") == 0
    img = store.read_image(tmp_path / "p.png")
    assert img.shape == (16, 16, 1)
    side = json.loads((tmp_path / "p.json").read_text())
    assert len(side["cells"]) == 1


def test_preview_lambda_distance_grows_with_alpha(tmp_path, dataset):
    dist = []
    for alpha in ("0.2", "0.4", "0.6"):
        out = tmp_path / f"g{alpha}.png"
        assert run("mixup-preview", "--data", dataset, "--alpha", alpha, "--grid", "10x10", "--seed", "5",
                   "--out", out) == 0
        assert store.read_image(out).shape == (160, 160, 1)
        cells = json.loads(out.with_suffix(".json").read_text())["cells"]
        dist.append(np.mean([min(c["lambda"], 1 - c["lambda"]) for c in cells]))
    assert dist[0] < dist[1] < dist[2]
