import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from defencekit.metrics import (
    adaptive_threshold,
    dataset_report,
    f_measure,
    mae,
    pr_curve,
    precision_recall,
)
from defencekit.tensor import ShapeError
from oracles import mae_loops, pr_curve_counting, precision_recall_counting


class TestPrecisionRecall:
    def test_perfect(self):
        g = np.zeros((4, 4))
        g[1:3, 1:3] = 1
        assert precision_recall(g, g) == (1.0, 1.0)

    def test_counting(self):
        b = np.zeros(20)
        g = np.zeros(20)
        b[:10] = 1          # |B| = 10
        g[4:12] = 1         # |G| = 8, intersection = 6
        assert precision_recall(b, g) == (0.6, 0.75)

    def test_empty_prediction(self):
        g = np.ones((3, 3))
        assert precision_recall(np.zeros((3, 3)), g) == (1.0, 0.0)

    def test_both_empty(self):
        z = np.zeros((3, 3))
        assert precision_recall(z, z) == (1.0, 1.0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            precision_recall(np.zeros((2, 2)), np.zeros((3, 3)))

    def test_exhaustive_4x4_against_counting(self):
        # every 4x4 binary prediction against one fixed truth
        g = np.array([[1, 0, 0, 1], [0, 1, 1, 0], [0, 0, 1, 0], [1, 0, 0, 0]])
        bits = (np.arange(1 << 16)[:, None] >> np.arange(16)) & 1
        maps = bits.reshape(-1, 4, 4)
        inter = (maps & g).sum(axis=(1, 2))
        nb = maps.sum(axis=(1, 2))
        ng = g.sum()
        for idx in range(0, 1 << 16, 257):  # spot-check the loop oracle too
            b = maps[idx]
            assert precision_recall(b, g) == precision_recall_counting(b, g)
        # vectorized full sweep
        got = [precision_recall(maps[i], g) for i in range(0, 1 << 16, 37)]
        want = [((1.0 if nb[i] == 0 else inter[i] / nb[i]), inter[i] / ng)
                for i in range(0, 1 << 16, 37)]
        assert got == want


class TestFMeasure:
    def test_table_anchors(self):
        assert f_measure(0.955, 0.917) == pytest.approx(0.946, abs=5e-4)
        assert f_measure(0.953, 0.898) == pytest.approx(0.940, abs=5e-4)

    def test_fixed_points(self):
        assert f_measure(1.0, 1.0) == 1.0
        assert f_measure(0.5, 0.5) == 0.5

    def test_both_zero(self):
        assert f_measure(0.0, 0.0) == 0.0

    @settings(max_examples=100, deadline=None)
    @given(st.floats(1e-6, 1.0))
    def test_equal_inputs_are_fixed_points(self, p):
        assert f_measure(p, p) == pytest.approx(p, rel=1e-12)


class TestAdaptiveThreshold:
    def test_half_and_half(self):
        b = np.zeros((4, 4))
        b[:2] = 1.0
        out = adaptive_threshold(b)
        assert np.array_equal(out, b)

    def test_constant_map_all_zero(self):
        out = adaptive_threshold(np.full((5, 5), 0.42))
        assert not out.any()

    def test_mean_matches_loops(self, rng):
        b = rng.uniform(size=(6, 6))
        t = sum(b.ravel().tolist()) / b.size
        got = adaptive_threshold(b, k=1.0)
        assert np.array_equal(got, (b > t).astype(float))


class TestMae:
    def test_identical(self, rng):
        b = (rng.uniform(size=(4, 4)) > 0.5).astype(float)
        assert mae(b, b) == 0.0

    def test_opposite(self):
        assert mae(np.ones((3, 3)), np.zeros((3, 3))) == 1.0

    def test_matches_loops(self, rng):
        b = rng.uniform(size=(4, 4))
        g = (rng.uniform(size=(4, 4)) > 0.5).astype(float)
        assert mae(b, g) == pytest.approx(mae_loops(b, g), abs=1e-12)


class TestPrCurve:
    def test_perfect_map(self):
        g = np.zeros((4, 4))
        g[1:3, 1:3] = 1.0
        curve = pr_curve(g, g)
        for t in range(255):
            assert curve[t] == (1.0, 1.0)

    def test_inverted_map(self):
        g = np.zeros((4, 4))
        g[0] = 1.0
        curve = pr_curve(1.0 - g, g)
        for p, r in curve[:255]:
            assert p == 0.0

    def test_matches_exhaustive_counting(self, rng):
        b = rng.uniform(size=(4, 4))
        g = (rng.uniform(size=(4, 4)) > 0.5).astype(float)
        assert pr_curve(b, g) == pr_curve_counting(b, g)

    def test_recall_non_increasing(self, rng):
        for _ in range(5):
            b = rng.uniform(size=(8, 8))
            g = (rng.uniform(size=(8, 8)) > 0.6).astype(float)
            recalls = [r for _, r in pr_curve(b, g)]
            assert all(r1 >= r2 for r1, r2 in zip(recalls, recalls[1:]))


class TestDatasetReport:
    def _entry(self, rng, name):
        g = (rng.uniform(size=(8, 8)) > 0.6).astype(float)
        pred = np.clip(g * 0.8 + rng.uniform(size=(8, 8)) * 0.2, 0, 1)
        return (name, g), pred

    def test_single_image_aggregate(self, rng):
        (entry, pred) = self._entry(rng, "a.pgm")
        report = dataset_report([entry], {"a.pgm": pred})
        path, p, r, f, m = report.rows[0]
        assert (report.mean_precision, report.mean_recall) == (p, r)
        assert (report.mean_f, report.mean_mae) == (f, m)

    def test_two_identical_images(self, rng):
        (entry, pred) = self._entry(rng, "a.pgm")
        entries = [entry, ("b.pgm", entry[1])]
        report = dataset_report(entries, {"a.pgm": pred, "b.pgm": pred})
        assert report.mean_f == report.rows[0][3]

    def test_three_image_hand_average(self, rng):
        entries, outputs = [], {}
        for name in ("a", "b", "c"):
            (entry, pred) = self._entry(rng, name)
            entries.append(entry)
            outputs[name] = pred
        report = dataset_report(entries, outputs)
        by_hand = np.mean([row[3] for row in report.rows])
        assert report.mean_f == pytest.approx(by_hand, abs=1e-15)

    def test_missing_output(self, rng):
        (entry, _) = self._entry(rng, "a.pgm")
        with pytest.raises(KeyError):
            dataset_report([entry], {})

    def test_report_file_format(self, rng, tmp_path):
        (entry, pred) = self._entry(rng, "a.pgm")
        report = dataset_report([entry], {"a.pgm": pred})
        rp = tmp_path / "report.csv"
        cp = tmp_path / "curve.csv"
        report.write(rp, cp)
        lines = rp.read_text(encoding="utf-8").strip().splitlines()
        assert lines[0].startswith("a.pgm,")
        assert lines[-1].startswith("AGGREGATE,")
        assert len(lines[0].split(",")) == 5
        curve_lines = cp.read_text(encoding="utf-8").strip().splitlines()
        assert len(curve_lines) == 256
        assert curve_lines[0].split(",")[0] == "0"
