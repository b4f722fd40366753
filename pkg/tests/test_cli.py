import csv
import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from ckd_transbts.cli import ABLATION_COLUMNS, OVERLAY_COLORS, main, overlay_slice
from ckd_transbts.data import LABEL_FILE, load_subject
from ckd_transbts.metrics import CSV_COLUMNS


def run(*argv):
    return main([str(a) for a in argv])


def files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != "manifest.json"}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    assert run("phantom", "--n", 2, "--dims", 32, "--seed", 5, "--out", out) == 0
    return out


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = out / "cfg.json"
    cfg.write_text(json.dumps({"base_embed": 8, "crop_size": 32, "epochs": 5, "base_lr": 1e-3, "seed": 1}))
    assert run("--deterministic", "train", "--config", cfg, "--data", dataset, "--out", out, "--epochs", 2) == 0
    return out


class TestPhantom:
    def test_index_and_manifest(self, dataset):
        index = json.loads((dataset / "index.json").read_text())
        assert index["subjects"] == ["case_000", "case_001"]
        manifest = json.loads((dataset / "manifest.json").read_text())
        assert manifest["command"] == "phantom" and manifest["seed"] == 5
        assert load_subject(dataset / "case_000").dims == (32, 32, 32)

    def test_rerun_identical(self, dataset, tmp_path):
        assert run("phantom", "--n", 2, "--dims", 32, "--seed", 5, "--out", tmp_path) == 0
        assert files(tmp_path) == files(dataset)

    def test_non_multiple_dims(self, tmp_path):
        assert run("phantom", "--n", 1, "--dims", 30, "--out", tmp_path) == 0
        assert load_subject(tmp_path / "case_000").dims == (30, 30, 30)


class TestTrain:
    def test_artifacts(self, trained):
        records = [json.loads(l) for l in (trained / "log.jsonl").read_text().splitlines()]
        assert len(records) == 2
        assert (trained / "best.ckpt").exists() and (trained / "last.ckpt").exists()
        manifest = json.loads((trained / "manifest.json").read_text())
        assert manifest["config"]["epochs"] == 2 and manifest["config"]["base_embed"] == 8
        assert manifest["deterministic"] is True

    def test_malformed_config(self, dataset, tmp_path, capsys):
        cfg = tmp_path / "bad.json"
        cfg.write_text("{not json")
        assert run("train", "--config", cfg, "--data", dataset, "--out", tmp_path / "o") == 2
        assert "ConfigError" in capsys.readouterr().err

    def test_invalid_value(self, dataset, tmp_path):
        assert run("train", "--data", dataset, "--out", tmp_path, "--base-embed", 7) == 2

    def test_missing_data(self, tmp_path):
        assert run("train", "--data", tmp_path / "nowhere", "--out", tmp_path, "--base-embed", 8,
                   "--crop-size", 32) == 3

    def test_rerun_identical_log(self, dataset, trained, tmp_path):
        cfg = trained / "cfg.json"
        assert run("--deterministic", "train", "--config", cfg, "--data", dataset, "--out", tmp_path,
                   "--epochs", 2) == 0
        assert (tmp_path / "log.jsonl").read_text() == (trained / "log.jsonl").read_text()
        assert (tmp_path / "best.ckpt").read_bytes() == (trained / "best.ckpt").read_bytes()


class TestEval:
    def test_report(self, dataset, trained, tmp_path):
        prefix = tmp_path / "rep"
        assert run("eval", "--checkpoint", trained / "best.ckpt", "--data", dataset, "--out", prefix,
                   "--save-predictions") == 0
        with open(prefix.with_suffix(".csv")) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == list(CSV_COLUMNS)
        body = json.loads(prefix.with_suffix(".json").read_text())
        assert body["model"] == "best"
        assert len(body["subjects"]) == 2
        pred = np.fromfile(tmp_path / "rep_predictions" / "case_000.u8raw", dtype=np.uint8)
        assert pred.size == 32 ** 3 and set(np.unique(pred)) <= {0, 1, 2, 4}

    def test_deterministic_report(self, dataset, trained, tmp_path):
        for name in ("a", "b"):
            assert run("--deterministic", "eval", "--checkpoint", trained / "best.ckpt", "--data", dataset,
                       "--out", tmp_path / name) == 0
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_missing_label(self, dataset, trained, tmp_path, capsys):
        import shutil

        data = tmp_path / "data"
        shutil.copytree(dataset, data)
        (data / "case_001" / LABEL_FILE).unlink()
        assert run("eval", "--checkpoint", trained / "best.ckpt", "--data", data, "--out", tmp_path / "r") == 3
        assert "MissingLabelError" in capsys.readouterr().err

    def test_architecture_mismatch(self, dataset, trained, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"base_embed": 16, "crop_size": 32}))
        assert run("eval", "--checkpoint", trained / "best.ckpt", "--config", cfg, "--data", dataset,
                   "--out", tmp_path / "r") == 2

    def test_missing_checkpoint(self, dataset, tmp_path):
        assert run("eval", "--checkpoint", tmp_path / "none.ckpt", "--data", dataset, "--out", tmp_path / "r") == 3


def read_ablation(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def one_subject(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("one")
    assert run("phantom", "--n", 1, "--dims", 32, "--seed", 5, "--out", out) == 0
    return out


class TestAblate:
    def test_table2(self, one_subject, tmp_path):
        assert run("ablate", "--suite", "table2", "--data", one_subject, "--out", tmp_path, "--steps", 2) == 0
        rows = read_ablation(tmp_path / "ablation.csv")
        assert list(rows[0]) == ABLATION_COLUMNS
        assert [r["preset"] for r in rows] == [f"TABLE2_ROW{i}" for i in range(1, 9)]
        flags = [{k for k in ("fusion", "calibration", "hybrid") if r[k] == "True"} for r in rows]
        params = [int(r["params"]) for r in rows]
        for i in range(8):
            for j in range(8):
                if flags[i] < flags[j]:
                    assert params[i] < params[j]

    def test_table3(self, one_subject, tmp_path):
        assert run("ablate", "--suite", "TABLE3", "--data", one_subject, "--out", tmp_path, "--steps", 2) == 0
        rows = read_ablation(tmp_path / "ablation.csv")
        assert [r["grouping"] for r in rows] == ["per_modality", "input_concat", "swap_1", "swap_2", "clinical"]
        params = [int(r["params"]) for r in rows]
        assert params[1] < params[0] < params[4]
        assert params[2] == params[3] == params[4]

    def test_unknown_suite(self, one_subject, tmp_path):
        with pytest.raises(SystemExit) as exc:
            run("ablate", "--suite", "table4", "--data", one_subject, "--out", tmp_path)
        assert exc.value.code == 2


class TestPlot:
    def test_overlay_colors(self):
        image = np.zeros((4, 4))
        label = np.array([[0, 1, 2, 4]] * 4)
        rgb = overlay_slice(image, label, alpha=1.0)
        assert tuple(rgb[0, 0]) == (0, 0, 0)
        assert tuple(rgb[0, 1]) == OVERLAY_COLORS[1] == (255, 0, 0)
        assert tuple(rgb[0, 2]) == OVERLAY_COLORS[2] == (0, 255, 0)
        assert tuple(rgb[0, 3]) == OVERLAY_COLORS[4] == (255, 255, 0)

    def test_blend(self):
        image = np.array([[0.0, 1.0]])
        rgb = overlay_slice(image, np.array([[2, 0]]), alpha=0.5)
        assert tuple(rgb[0, 0]) == (0, 128, 0) and tuple(rgb[0, 1]) == (255, 255, 255)

    def test_empty_prediction_is_grayscale(self, dataset, tmp_path):
        pred = tmp_path / "p.u8raw"
        np.zeros(32 ** 3, dtype=np.uint8).tofile(pred)
        out = tmp_path / "o.png"
        assert run("plot", "--subject", dataset / "case_000", "--prediction", pred, "--out", out) == 0
        arr = np.asarray(Image.open(out))
        assert arr.shape == (32, 32, 3)
        assert np.array_equal(arr[..., 0], arr[..., 1]) and np.array_equal(arr[..., 1], arr[..., 2])
        subject = load_subject(dataset / "case_000")
        flair = subject.images[3][:, :, 16].T
        expected = np.round((flair - flair.min()) / (flair.max() - flair.min()) * 255)
        assert np.array_equal(arr[..., 0], expected.astype(np.uint8))

    def test_ground_truth_and_determinism(self, dataset, tmp_path):
        outs = [tmp_path / f"{i}.png" for i in range(2)]
        for out in outs:
            assert run("plot", "--subject", dataset / "case_000", "--ground-truth", "--out", out) == 0
        assert outs[0].read_bytes() == outs[1].read_bytes()
        arr = np.asarray(Image.open(outs[0])).astype(int)
        assert np.any(arr[..., 0] != arr[..., 2])

    def test_missing_prediction(self, dataset, tmp_path):
        assert run("plot", "--subject", dataset / "case_000", "--prediction", tmp_path / "nope",
                   "--out", tmp_path / "o.png") == 3


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "ckd_transbts", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip()
