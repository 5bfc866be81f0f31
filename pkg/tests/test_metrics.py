import math

import numpy as np
import pytest

from acacr.metrics import MetricReport, MetricRow, compute_report, mae, mse, psnr, sam, ssim

L = 255.0
K1, K2 = 0.01, 0.03
C1 = (K1 * L) ** 2
C2 = (K2 * L) ** 2


def pair(seed, shape=(16, 16, 3)):
    rng = np.random.default_rng(seed)
    return rng.random(shape) * L, rng.random(shape) * L


# -- naive double-loop references (independent oracles) ---------------------

def ref_mae(x, y):
    total = 0.0
    n = 0
    for idx in np.ndindex(x.shape):
        total += abs(x[idx] - y[idx])
        n += 1
    return total / n


def ref_mse(x, y):
    total = 0.0
    n = 0
    for idx in np.ndindex(x.shape):
        total += (x[idx] - y[idx]) ** 2
        n += 1
    return total / n


def ref_psnr(x, y):
    return 10.0 * math.log10(L * L / ref_mse(x, y))


def ref_global_ssim(x, y):
    vals = []
    for b in range(x.shape[2]):
        xb, yb = x[:, :, b], y[:, :, b]
        n = xb.size
        mx = sum(xb[i, j] for i in range(xb.shape[0]) for j in range(xb.shape[1])) / n
        my = sum(yb[i, j] for i in range(yb.shape[0]) for j in range(yb.shape[1])) / n
        vx = sum((xb[i, j] - mx) ** 2 for i in range(xb.shape[0]) for j in range(xb.shape[1])) / n
        vy = sum((yb[i, j] - my) ** 2 for i in range(yb.shape[0]) for j in range(yb.shape[1])) / n
        cov = sum((xb[i, j] - mx) * (yb[i, j] - my)
                  for i in range(xb.shape[0]) for j in range(xb.shape[1])) / n
        vals.append((2 * mx * my + C1) * (2 * cov + C2)
                    / ((mx * mx + my * my + C1) * (vx + vy + C2)))
    return sum(vals) / len(vals)


def ref_sam(x, y):
    angles = []
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            a = x[i, j]
            b = y[i, j]
            na = math.sqrt(sum(v * v for v in a))
            nb = math.sqrt(sum(v * v for v in b))
            if na == 0 or nb == 0:
                continue
            cosang = sum(p * q for p, q in zip(a, b)) / (na * nb)
            angles.append(math.degrees(math.acos(max(-1.0, min(1.0, cosang)))))
    return sum(angles) / len(angles)


class TestAgainstNaiveReferences:
    @pytest.mark.parametrize("seed", range(4))
    def test_all_metrics_match(self, seed):
        x, y = pair(seed)
        assert abs(mae(x, y) - ref_mae(x, y)) < 1e-6
        assert abs(mse(x, y) - ref_mse(x, y)) < 1e-6
        assert abs(psnr(x, y) - ref_psnr(x, y)) < 1e-6
        assert abs(ssim(x, y) - ref_global_ssim(x, y)) < 1e-6
        assert abs(sam(x, y) - ref_sam(x, y)) < 1e-6


class TestMae:
    def test_identical(self):
        x, _ = pair(0)
        assert mae(x, x) == 0.0

    def test_constant_offset(self):
        x, _ = pair(1)
        assert abs(mae(x, x + 1.0) - 1.0) < 1e-12

    def test_hand_value(self):
        assert mae(np.array([0.0, 2.0]), np.array([1.0, 1.0])) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mae(np.zeros(3), np.zeros(4))


class TestPsnr:
    def test_zero_db_when_mse_equals_peak_squared(self):
        x = np.zeros((4, 4))
        y = np.full((4, 4), L)
        assert abs(psnr(x, y)) < 1e-12

    def test_unit_mse(self):
        x = np.zeros((4, 4))
        y = np.ones((4, 4))
        assert abs(psnr(x, y) - 20 * math.log10(255)) < 1e-9

    def test_identical_is_infinite(self):
        x, _ = pair(2)
        assert psnr(x, x) == math.inf

    def test_monotone_in_noise(self):
        x, _ = pair(3)
        rng = np.random.default_rng(0)
        noise = rng.normal(size=x.shape)
        values = [psnr(x, x + amp * noise) for amp in (0.5, 1.0, 2.0, 4.0, 8.0)]
        assert all(a > b for a, b in zip(values, values[1:]))


class TestSsim:
    def test_identical_both_modes(self):
        x, _ = pair(4)
        assert abs(ssim(x, x, mode="global") - 1.0) < 1e-12
        assert abs(ssim(x, x, mode="windowed") - 1.0) < 1e-9

    def test_against_constant_image_formula(self):
        x, _ = pair(5, shape=(16, 16, 1))
        const = np.full_like(x, 90.0)
        mx, my = x.mean(), 90.0
        expected = ((2 * mx * my + C1) / (mx * mx + my * my + C1)) * (C2 / (x.var() + C2))
        assert abs(ssim(x, const) - expected) < 1e-9

    def test_windowed_requires_window_sized_image(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)), mode="windowed")

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((16, 16)), np.zeros((16, 16)), mode="local")


class TestSam:
    def test_identical_nonzero(self):
        x = np.abs(pair(6)[0]) + 1.0
        assert abs(sam(x, x)) < 1e-6

    def test_orthogonal_vectors(self):
        x = np.zeros((1, 1, 2))
        y = np.zeros((1, 1, 2))
        x[0, 0] = [1.0, 0.0]
        y[0, 0] = [0.0, 1.0]
        assert abs(sam(x, y) - 90.0) < 1e-9

    def test_hand_cosine(self):
        x = np.array([[[1.0, 1.0]]])
        y = np.array([[[1.0, 0.0]]])
        assert abs(sam(x, y) - 45.0) < 1e-9

    def test_scale_invariance(self):
        x, y = pair(7)
        assert abs(sam(3.7 * x, y) - sam(x, y)) < 1e-9

    def test_zero_norm_pixels_skipped(self):
        x = np.ones((2, 1, 2))
        y = np.ones((2, 1, 2))
        x[0, 0] = 0.0
        value, skipped = sam(x, y, return_skipped=True)
        assert skipped == 1
        assert abs(value) < 1e-5  # arccos loses precision near cos = 1

    def test_all_zero_rejected(self):
        with pytest.raises(ValueError):
            sam(np.zeros((2, 2, 3)), np.ones((2, 2, 3)))


class TestReport:
    def test_csv_layout_and_inf(self):
        report = MetricReport()
        report.add(MetricRow("a", 0.0, 0.0, math.inf, 1.0, 0.0))
        report.add(MetricRow("b", 1.0, 2.0, 30.0, 0.9, 1.5))
        csv = report.to_csv()
        lines = csv.strip().split("\n")
        assert lines[0] == "sample_id,mae,mse,psnr_db,ssim,sam_deg"
        assert lines[1].startswith("a,0,0,inf,1,")
        assert lines[3].startswith("MEAN,")

    def test_compute_report_rescales_to_255(self):
        x = np.full((8, 8, 3), 0.5)
        y = np.full((8, 8, 3), 0.25)
        report = compute_report([("s0", x, y)])
        assert abs(report.rows[0].mae - 0.25 * 255) < 1e-9

    def test_mean_row(self):
        report = MetricReport()
        report.add(MetricRow("a", 1.0, 1.0, 10.0, 0.5, 2.0))
        report.add(MetricRow("b", 3.0, 3.0, 20.0, 1.0, 4.0))
        mean = report.mean_row()
        assert mean.sample_id == "MEAN"
        assert mean.mae == 2.0
        assert mean.psnr_db == 15.0
