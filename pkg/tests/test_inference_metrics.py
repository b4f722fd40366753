import csv
import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from ckd_transbts.data import Subject, cluster_regions
from ckd_transbts.errors import IoError, MissingLabelError, ShapeError
from ckd_transbts.inference import (
    Blend,
    axis_starts,
    blend_weights,
    compose_prediction,
    plan_windows,
    predict_subject,
    sliding_window_infer,
)
from ckd_transbts.metrics import (
    CSV_COLUMNS,
    HD95_SENTINEL,
    MetricsReport,
    SubjectMetrics,
    dice_score,
    emit_report,
    evaluate,
    hd95,
    read_report,
    score_masks,
    surface,
)


# ---------------------------------------------------------------------------
# oracles


def dice_oracle(p, g):
    inter = ps = gs = 0
    for idx in np.ndindex(p.shape):
        ps += int(p[idx])
        gs += int(g[idx])
        inter += int(p[idx] and g[idx])
    if ps + gs == 0:
        return 1.0
    return 2.0 * inter / (ps + gs)


def surface_oracle(mask):
    pts = []
    dims = mask.shape
    for idx in zip(*np.nonzero(mask)):
        for axis in range(3):
            for step in (-1, 1):
                n = list(idx)
                n[axis] += step
                if not 0 <= n[axis] < dims[axis] or not mask[tuple(n)]:
                    pts.append(idx)
                    break
            else:
                continue
            break
    return np.array(pts, dtype=np.float64).reshape(-1, 3)


def percentile_oracle(values, q):
    v = sorted(values)
    pos = (len(v) - 1) * q / 100.0
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (v[hi] - v[lo]) * (pos - lo)


def hd95_oracle(p, g, spacing):
    if not p.any() and not g.any():
        return 0.0
    if not (p.any() and g.any()):
        return HD95_SENTINEL
    sp, sg = surface_oracle(p) * spacing, surface_oracle(g) * spacing
    d = np.sqrt(((sp[:, None, :] - sg[None, :, :]) ** 2).sum(-1))
    pooled = list(d.min(axis=1)) + list(d.min(axis=0))
    return percentile_oracle(pooled, 95)


def coverage_oracle(dims, plan):
    cover = np.zeros(dims, dtype=np.int32)
    for start in plan.windows():
        for s, r, d in zip(start, plan.roi, dims):
            assert 0 <= s and s + r <= d
        sl = tuple(slice(s, s + r) for s, r in zip(start, plan.roi))
        cover[sl] += 1
    return cover


def random_mask_pair(rng, shape=(12, 12, 12)):
    kind = rng.integers(0, 3)
    if kind == 0:
        p = rng.random(shape) < rng.uniform(0.01, 0.4)
        g = rng.random(shape) < rng.uniform(0.01, 0.4)
    else:
        grid = np.indices(shape).transpose(1, 2, 3, 0)
        c1, c2 = rng.uniform(2, 10, 3), rng.uniform(2, 10, 3)
        p = np.linalg.norm(grid - c1, axis=-1) < rng.uniform(1, 5)
        g = np.linalg.norm(grid - c2, axis=-1) < rng.uniform(1, 5)
    return p, g


class ConstantModel(torch.nn.Module):
    def __init__(self, logit, channels=3):
        super().__init__()
        self.logit, self.channels = logit, channels

    def forward(self, x):
        return torch.full((x.shape[0], self.channels) + tuple(x.shape[2:]), self.logit, dtype=x.dtype)


class ThresholdModel(torch.nn.Module):
    """Logits equal to the scaled first three input channels."""

    def forward(self, x):
        return 50.0 * x[:, :3]


def region_subject(label, id="r"):
    masks = cluster_regions(label).stack().astype(np.float32)
    images = np.concatenate([1.0 + masks, np.ones((1,) + label.shape, np.float32)])
    return Subject(id, images, (1.0, 1.0, 1.0), label)


# ---------------------------------------------------------------------------


class TestPlan:
    def test_examples(self):
        assert plan_windows(16, 8, 0.5).starts[0] == (0, 4, 8)
        assert plan_windows(160, 128, 0.6).starts[0] == (0, 32)
        assert plan_windows(32, 32, 0.6).starts == ((0,), (0,), (0,))

    def test_stride_rule(self):
        assert axis_starts(160, 128, 0.6)[1] == 32
        assert axis_starts(300, 128, 0.6) == (0, 51, 102, 153, 172)

    @given(st.tuples(*[st.integers(1, 40)] * 3), st.tuples(*[st.integers(1, 40)] * 3), st.floats(0, 0.95))
    def test_coverage_oracle(self, dims, roi, overlap):
        roi = tuple(min(r, d) for r, d in zip(roi, dims))
        plan = plan_windows(dims, roi, overlap)
        assert np.all(coverage_oracle(dims, plan) >= 1)
        for d, r, starts in zip(dims, roi, plan.starts):
            stride = max(1, math.floor(r * (1 - overlap) + 1e-9))
            expected = sorted({min(s, d - r) for s in range(0, d - r + stride, stride)})
            assert list(starts) == expected

    def test_roi_too_large(self):
        with pytest.raises(ShapeError):
            plan_windows((16, 16, 16), 32)

    def test_gaussian_weights(self):
        w = blend_weights((8, 8, 8), Blend.GAUSSIAN)
        assert w.max() == 1.0 and w.min() > 0
        assert np.allclose(w, w[::-1, ::-1, ::-1])


class TestSlidingWindow:
    def test_single_window_equals_forward(self):
        torch.manual_seed(0)
        model = torch.nn.Conv3d(4, 3, 3, padding=1)
        vol = np.random.default_rng(0).normal(size=(4, 8, 8, 8)).astype(np.float32)
        probs = sliding_window_infer(model, vol, plan_windows((8, 8, 8), 8))
        with torch.no_grad():
            ref = torch.sigmoid(model(torch.from_numpy(vol)[None]))[0].numpy()
        assert np.allclose(probs, ref, atol=1e-6)

    @pytest.mark.parametrize("blend", [Blend.CONSTANT, Blend.GAUSSIAN])
    def test_constant_model_exact(self, blend):
        model = ConstantModel(0.7)
        c = np.float32(1 / (1 + np.exp(-0.7)))
        probs = sliding_window_infer(model, np.zeros((4, 16, 16, 16), np.float32), plan_windows(16, 8, 0.5, blend))
        assert np.all(probs == probs.flat[0])
        assert abs(float(probs.flat[0]) - float(c)) < 1e-7

    def test_probabilities_in_unit_interval(self):
        torch.manual_seed(1)
        model = torch.nn.Conv3d(4, 3, 1)
        vol = np.random.default_rng(1).normal(size=(4, 12, 10, 9)).astype(np.float32) * 10
        probs = sliding_window_infer(model, vol, plan_windows((12, 10, 9), (8, 8, 8), 0.6))
        assert probs.shape == (3, 12, 10, 9) and probs.dtype == np.float32
        assert probs.min() >= 0 and probs.max() <= 1

    def test_plan_mismatch(self):
        with pytest.raises(ShapeError):
            sliding_window_infer(ConstantModel(0.0), np.zeros((4, 8, 8, 8)), plan_windows(16, 8))

    def test_predict_subject_pads_small_volumes(self):
        label = np.zeros((20, 24, 18), np.uint8)
        label[5:9, 6:10, 4:8] = 2
        label[6:8, 7:9, 5:7] = 4
        s = region_subject(label)
        probs = predict_subject(ThresholdModel(), s, roi=32, overlap=0.5)
        assert probs.shape == (3, 20, 24, 18)
        masks = compose_prediction(probs)
        gt = cluster_regions(label)
        for r in ("et", "tc", "wt"):
            assert np.array_equal(getattr(masks, r), getattr(gt, r))


class TestCompose:
    def test_closure(self):
        probs = np.zeros((3, 1, 1, 2), np.float32)
        probs[:, 0, 0, 0] = (0.9, 0.2, 0.1)
        m = compose_prediction(probs)
        assert m.et[0, 0, 0] and m.tc[0, 0, 0] and m.wt[0, 0, 0]
        assert not (m.et[0, 0, 1] or m.tc[0, 0, 1] or m.wt[0, 0, 1])

    @given(st.integers(0, 2 ** 31 - 1))
    def test_inclusion(self, seed):
        m = compose_prediction(np.random.default_rng(seed).random((3, 4, 4, 4)))
        assert np.all(m.et <= m.tc) and np.all(m.tc <= m.wt)


class TestDice:
    def test_examples(self):
        g = np.zeros((8, 8, 8), bool)
        g[:4, :4, :4] = True
        p = np.zeros_like(g)
        p[2:6, :4, :4] = True
        assert dice_score(g, g) == 1.0
        assert dice_score(p, g) == 0.5
        far = np.zeros_like(g)
        far[6:, 6:, 6:] = True
        assert dice_score(far, g) == 0.0

    def test_empty_conventions(self):
        e, g = np.zeros((3, 3, 3), bool), np.ones((3, 3, 3), bool)
        assert dice_score(e, e) == 1.0
        assert dice_score(e, g) == 0.0 and dice_score(g, e) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            dice_score(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))

    @given(st.integers(0, 2 ** 31 - 1))
    def test_oracle(self, seed):
        p, g = random_mask_pair(np.random.default_rng(seed), (6, 6, 6))
        assert abs(dice_score(p, g) - dice_oracle(p, g)) < 1e-12


class TestHD95:
    def test_identical(self):
        m = np.zeros((8, 8, 8), bool)
        m[2:5, 2:6, 1:4] = True
        assert hd95(m, m) == 0.0

    def test_single_voxels(self):
        a, b = np.zeros((8, 8, 8), bool), np.zeros((8, 8, 8), bool)
        a[1, 4, 4] = True
        b[4, 4, 4] = True
        assert hd95(a, b) == 3.0
        assert hd95(a, b, (2.0, 1.0, 1.0)) == 6.0

    def test_empty_conventions(self):
        e, g = np.zeros((4, 4, 4), bool), np.zeros((4, 4, 4), bool)
        g[1, 1, 1] = True
        assert hd95(e, e) == 0.0
        assert hd95(e, g) == HD95_SENTINEL and hd95(g, e) == HD95_SENTINEL

    def test_surface_oracle(self):
        rng = np.random.default_rng(0)
        m = rng.random((7, 7, 7)) < 0.6
        ours = np.argwhere(surface(m)).astype(np.float64)
        assert np.array_equal(ours, surface_oracle(m))

    @given(st.integers(0, 2 ** 31 - 1))
    def test_oracle(self, seed):
        rng = np.random.default_rng(seed)
        p, g = random_mask_pair(rng, (8, 8, 8))
        spacing = tuple(rng.uniform(0.5, 2.0, 3))
        assert abs(hd95(p, g, spacing) - hd95_oracle(p, g, np.array(spacing))) < 1e-6


class TestReports:
    def make_report(self):
        subjects = [
            SubjectMetrics("a", {"et": 0.5, "tc": 0.6, "wt": 0.7}, {"et": 1.0, "tc": 2.0, "wt": 3.0}),
            SubjectMetrics("b", {"et": 0.1, "tc": 0.2, "wt": 0.3}, {"et": 5.0, "tc": 6.0, "wt": HD95_SENTINEL}),
        ]
        return MetricsReport("m", subjects)

    def test_aggregates(self):
        agg = self.make_report().aggregates
        assert agg["dice_et"] == pytest.approx(0.3)
        assert agg["dice_mean"] == pytest.approx(np.mean([0.3, 0.4, 0.5]))
        assert agg["hd95_wt"] == pytest.approx((3.0 + HD95_SENTINEL) / 2)

    def test_csv_header(self, tmp_path):
        path = emit_report(self.make_report(), tmp_path / "r.csv", "csv")
        with open(path) as fh:
            rows = list(csv.reader(fh))
        assert ",".join(rows[0]) == "model,dice_et,dice_tc,dice_wt,dice_mean,hd95_et,hd95_tc,hd95_wt,hd95_mean"
        assert rows[0] == CSV_COLUMNS and rows[1][0] == "m"

    def test_json_roundtrip(self, tmp_path):
        report = self.make_report()
        back = read_report(emit_report(report, tmp_path / "r.json", "json"))
        assert back == report

    def test_bad_path(self, tmp_path):
        with pytest.raises(IoError):
            emit_report(self.make_report(), tmp_path / "missing" / "r.csv")

    def test_score_masks_gt(self):
        label = np.zeros((10, 10, 10), np.uint8)
        label[2:6, 2:6, 2:6] = 2
        label[3:5, 3:5, 3:5] = 1
        gt = cluster_regions(label)
        m = score_masks("x", gt, gt, (1, 1, 1))
        assert m.dice == {"et": 1.0, "tc": 1.0, "wt": 1.0}
        assert m.hd95 == {"et": 0.0, "tc": 0.0, "wt": 0.0}


class TestEvaluate:
    def labels(self):
        out = []
        for k in range(2):
            label = np.zeros((24, 24, 24), np.uint8)
            label[4 + k:14, 5:15, 6:16] = 2
            label[6 + k:11, 7:12, 8:13] = 1
            label[8:10, 8:10, 9:11 + k] = 4
            out.append(label)
        return out

    def test_perfect_model(self):
        subjects = [region_subject(l, f"s{i}") for i, l in enumerate(self.labels())]
        report = evaluate(ThresholdModel(), subjects, 32, 0.6)
        agg = report.aggregates
        assert all(agg[f"dice_{r}"] == 1.0 for r in ("et", "tc", "wt", "mean"))
        assert all(agg[f"hd95_{r}"] == 0.0 for r in ("et", "tc", "wt", "mean"))

    def test_empty_prediction(self):
        subjects = [region_subject(l) for l in self.labels()[:1]]
        report = evaluate(ConstantModel(-10.0), subjects, 32)
        s = report.subjects[0]
        assert s.dice == {"et": 0.0, "tc": 0.0, "wt": 0.0}
        assert s.hd95 == {"et": HD95_SENTINEL, "tc": HD95_SENTINEL, "wt": HD95_SENTINEL}

    def test_aggregates_are_row_means(self):
        torch.manual_seed(0)
        model = torch.nn.Conv3d(4, 3, 3, padding=1)
        subjects = [region_subject(l, f"s{i}") for i, l in enumerate(self.labels())]
        report = evaluate(model, subjects, 32)
        for r in ("et", "tc", "wt"):
            assert report.aggregates[f"dice_{r}"] == pytest.approx(np.mean([s.dice[r] for s in report.subjects]))
        again = evaluate(model, subjects, 32)
        assert again == report

    def test_missing_label(self):
        with pytest.raises(MissingLabelError):
            evaluate(ConstantModel(0.0), [Subject("x", np.ones((4, 8, 8, 8)))], 8)

    def test_predictions_collected(self):
        subjects = [region_subject(self.labels()[0], "s0")]
        preds = {}
        evaluate(ThresholdModel(), subjects, 32, predictions=preds)
        assert np.array_equal(preds["s0"].to_label(), subjects[0].label)
