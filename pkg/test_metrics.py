import math

import numpy as np
import pytest
import torch

from errors import InvalidArgument
from metrics import (
    aggregate, cqa_quality_metric, gaussian_window, mae, plcc, psnr, sample_metrics, srcc, ssim,
)
from networks import CQANet


def _image(seed=0, size=32):
    rng = np.random.default_rng(seed)
    return np.clip(0.5 + 0.2 * rng.standard_normal((size, size)), 0, 1)


def _brute_force_ssim(x, y, metal=None):
    w = gaussian_window()
    k = w.shape[0]
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    values = []
    for i in range(x.shape[0] - k + 1):
        for j in range(x.shape[1] - k + 1):
            if metal is not None and metal[i:i + k, j:j + k].any():
                continue
            a, b = x[i:i + k, j:j + k], y[i:i + k, j:j + k]
            mx, my = (w * a).sum(), (w * b).sum()
            vx, vy = (w * a * a).sum() - mx ** 2, (w * b * b).sum() - my ** 2
            cov = (w * a * b).sum() - mx * my
            values.append(((2 * mx * my + c1) * (2 * cov + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2)))
    return float(np.mean(values))


class TestPSNR:
    def test_identical(self):
        x = _image()
        assert psnr(x, x) == math.inf

    @pytest.mark.parametrize("offset, expected", [(0.1, 20.0), (0.01, 40.0)])
    def test_closed_form(self, offset, expected):
        gt = np.full((16, 16), 0.3)
        assert psnr(gt + offset, gt) == pytest.approx(expected, abs=1e-9)

    def test_metal_excluded(self):
        gt = np.full((16, 16), 0.3)
        pred = gt + 0.1
        metal = np.zeros((16, 16), bool)
        metal[4:8, 4:8] = True
        pred[metal] = 1.0
        assert psnr(pred, gt, metal) == pytest.approx(20.0, abs=1e-9)

    def test_decreases_with_noise(self):
        gt = _image(1)
        noise = np.random.default_rng(2).standard_normal(gt.shape)
        values = [psnr(gt + a * noise, gt) for a in (0.01, 0.02, 0.05)]
        assert values[0] > values[1] > values[2]

    def test_torch_input(self):
        gt = torch.full((1, 1, 16, 16), 0.3, dtype=torch.float64)
        assert psnr(gt + 0.1, gt) == pytest.approx(20.0, abs=1e-9)


class TestSSIM:
    def test_identical(self):
        x = _image()
        assert ssim(x, x) == pytest.approx(1.0)

    def test_constant_images(self):
        assert ssim(np.full((16, 16), 0.4), np.full((16, 16), 0.4)) == pytest.approx(1.0)

    def test_inverted_matches_brute_force(self):
        x = _image(3, 24)
        value = ssim(1 - x, x)
        assert value < 1
        assert value == pytest.approx(_brute_force_ssim(1 - x, x), abs=1e-6)

    def test_metal_windows_excluded(self):
        x, y = _image(4, 24), _image(5, 24)
        metal = np.zeros((24, 24), bool)
        metal[2:5, 2:5] = True
        assert ssim(x, y, metal) == pytest.approx(_brute_force_ssim(x, y, metal), abs=1e-6)

    def test_symmetric(self):
        x, y = _image(6), _image(7)
        assert ssim(x, y) == pytest.approx(ssim(y, x), abs=1e-12)

    def test_bounds(self):
        value = ssim(_image(8), _image(9))
        assert -1 <= value <= 1

    def test_too_small(self):
        with pytest.raises(InvalidArgument):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)))

    def test_all_windows_touch_metal(self):
        metal = np.zeros((16, 16), bool)
        metal[8, 8] = True
        with pytest.raises(InvalidArgument):
            ssim(_image(size=16), _image(1, 16), metal)


class TestCorrelations:
    def test_srcc_examples(self):
        assert srcc([0.1, 0.2, 0.3], [1, 2, 3]) == pytest.approx(1.0)
        assert srcc([0.3, 0.2, 0.1], [1, 2, 3]) == pytest.approx(-1.0)
        assert srcc([3, 3, 5], [1, 1, 2]) == pytest.approx(1.0)

    def test_srcc_monotone_invariance(self):
        rng = np.random.default_rng(0)
        a, b = rng.random(50), rng.random(50)
        assert srcc(np.exp(3 * a), b) == pytest.approx(srcc(a, b), abs=1e-12)

    def test_plcc_examples(self):
        true = np.array([1.0, 4.0, 2.0, 8.0])
        assert plcc(2 * true + 1, true) == pytest.approx(1.0)
        assert plcc(-true, true) == pytest.approx(-1.0)

    def test_plcc_brute_force(self):
        rng = np.random.default_rng(1)
        a, b = rng.random(100), rng.random(100)
        da, db = a - a.mean(), b - b.mean()
        expected = (da * db).sum() / math.sqrt((da * da).sum() * (db * db).sum())
        assert plcc(a, b) == pytest.approx(expected, abs=1e-9)
        assert plcc(3 * a + 2, 0.5 * b - 1) == pytest.approx(expected, abs=1e-9)

    def test_constant_is_undefined(self):
        assert math.isnan(srcc([1, 1, 1], [1, 2, 3]))
        assert math.isnan(plcc([1, 2, 3], [5, 5, 5]))

    def test_length_checks(self):
        with pytest.raises(InvalidArgument):
            srcc([1.0], [2.0])
        with pytest.raises(InvalidArgument):
            plcc([1.0, 2.0], [1.0, 2.0, 3.0])


class TestCQAQuality:
    def test_repeatable_and_linear(self, tiny_cqa_config):
        cqa = CQANet(tiny_cqa_config)
        images = torch.rand(4, 1, 32, 32)
        first = cqa_quality_metric(cqa, images[:1])
        assert cqa_quality_metric(cqa, images[:1]) == first
        singles = [cqa_quality_metric(cqa, images[i:i + 1]) for i in range(4)]
        assert cqa_quality_metric(cqa, images, batch_size=4) == pytest.approx(np.mean(singles), abs=1e-5)
        assert 1 <= first <= 10


class TestReport:
    def test_aggregate_skips_infinite_psnr(self):
        gt = _image(10)
        metal = np.zeros_like(gt, dtype=bool)
        rows = [
            sample_metrics("a", "clinical", "output", gt, gt, metal),
            sample_metrics("b", "clinical", "output", gt + 0.1, gt, metal),
            sample_metrics("c", "simulated", "input", gt + 0.01, gt, metal),
        ]
        assert rows[0].psnr == math.inf
        means = {(r.domain, r.method): r for r in aggregate(rows)}
        assert means[("clinical", "output")].psnr == pytest.approx(20.0, abs=1e-9)
        assert means[("clinical", "output")].mae == pytest.approx(0.05)
        assert means[("simulated", "input")].psnr == pytest.approx(40.0, abs=1e-9)

    def test_mae(self):
        gt = np.zeros((8, 8))
        assert mae(gt + 0.25, gt) == pytest.approx(0.25)
