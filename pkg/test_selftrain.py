import copy
import math

import numpy as np
import pytest
import torch
from torch import nn

from config import MARConfig, TrainConfig
from errors import InvalidArgument
from models import QualityRange
from networks import CQANet, MARNet
from selftrain import (
    RiseTrainer, assess_pseudo, build_pseudo_pairs, cli_loss, ema_update, non_metal_l1, param_hash,
    pretrain_supervised, sim_loss, total_loss, train_rise,
)


class ConstantNet(nn.Module):
    """Adds a fixed offset to its input; stands in for a trained student in loss checks"""

    def __init__(self, offset=0.0, input_mode="artifact"):
        super().__init__()
        self.offset = nn.Parameter(torch.tensor(float(offset), dtype=torch.float64))
        self.input_mode = input_mode

    @property
    def needs_li(self):
        return False

    def forward(self, x, li=None):
        return x + self.offset


class FixedQualityCQA(nn.Module):
    """Puts all probability mass on one quality class, whatever the image"""

    def __init__(self, quality):
        super().__init__()
        self.quality = quality

    def forward(self, x):
        prob = torch.zeros(x.shape[0], 10, dtype=x.dtype, device=x.device)
        prob[:, self.quality - 1] = 1.0
        return prob, torch.nn.functional.normalize(torch.ones(x.shape[0], 4, dtype=x.dtype), dim=1)


def _metal(b=2, size=16):
    m = torch.zeros(b, 1, size, size)
    m[:, :, 6:9, 6:9] = 1.0
    return m


class TestSimLoss:
    def test_identity_on_equal_images(self):
        x = torch.rand(2, 1, 16, 16)
        assert sim_loss(ConstantNet(), x, x.clone(), _metal()).item() == 0.0

    def test_constant_offset(self):
        x = torch.rand(2, 1, 16, 16, dtype=torch.float64)
        net = ConstantNet(0.1).double()
        assert sim_loss(net, x, x, _metal().double()).item() == pytest.approx(0.1, abs=1e-12)

    def test_brute_force(self):
        g = torch.Generator().manual_seed(0)
        pred, target = torch.rand(3, 1, 8, 8, generator=g), torch.rand(3, 1, 8, 8, generator=g)
        metal = (torch.rand(3, 1, 8, 8, generator=g) > 0.8).float()
        expected = []
        for b in range(3):
            total, count = 0.0, 0
            for i in range(8):
                for j in range(8):
                    if metal[b, 0, i, j] == 0:
                        total += abs(float(pred[b, 0, i, j]) - float(target[b, 0, i, j]))
                        count += 1
            expected.append(total / count)
        assert non_metal_l1(pred, target, metal).mean().item() == pytest.approx(np.mean(expected), abs=1e-7)

    def test_shape_mismatch(self):
        with pytest.raises(InvalidArgument):
            sim_loss(ConstantNet(), torch.rand(1, 1, 16, 16), torch.rand(1, 1, 8, 8), _metal(1))


class TestQualityRange:
    def test_contains_is_inclusive(self):
        q_range = QualityRange(lower=4, upper=7)
        q = torch.tensor([3.99, 4.0, 5.5, 7.0, 7.01, math.nan])
        assert q_range.contains(q).tolist() == [False, True, True, True, False, False]
        assert q_range.contains(np.array([4.0, 8.0])).tolist() == [True, False]
        assert q_range.contains(7.0)


class TestPseudoPairs:
    def test_zero_residual(self):
        x, y_prime = torch.rand(2, 1, 16, 16), torch.rand(2, 1, 16, 16)
        pairs = build_pseudo_pairs(x, x.clone(), y_prime, torch.tensor([8.0, 9.0]), QualityRange())
        assert torch.equal(pairs.residual, torch.zeros_like(x))
        assert torch.equal(pairs.x_prime, y_prime)

    def test_residual_transfer_identity(self):
        g = torch.Generator().manual_seed(1)
        x, y_tilde, y_prime = (torch.rand(4, 1, 16, 16, generator=g, dtype=torch.float64) for _ in range(3))
        pairs = build_pseudo_pairs(x, y_tilde, y_prime, torch.full((4,), 8.0), QualityRange())
        assert torch.equal(pairs.x_prime_raw, y_prime + (x - y_tilde))
        torch.testing.assert_close(pairs.x_prime_raw - y_prime, x - y_tilde, rtol=0, atol=1e-15)
        assert pairs.x_prime.min() >= 0 and pairs.x_prime.max() <= 1

    def test_gate(self):
        x = torch.rand(3, 1, 16, 16)
        pairs = build_pseudo_pairs(x, x, x, torch.tensor([6.99, 7.0, 10.0]), QualityRange(lower=7, upper=10))
        assert pairs.accepted.tolist() == [False, True, True]

    def test_accept_all(self):
        x = torch.rand(2, 1, 16, 16)
        pairs = build_pseudo_pairs(x, x, x, torch.tensor([math.nan, 1.0]), QualityRange(), accept_all=True)
        assert pairs.accepted.all()

    def test_li_follows_residual_transfer(self):
        x, y_tilde, y_prime, li = (torch.rand(1, 1, 16, 16, dtype=torch.float64) for _ in range(4))
        pairs = build_pseudo_pairs(x, y_tilde, y_prime, torch.tensor([8.0]), QualityRange(), li=li)
        assert torch.equal(pairs.li_prime, li + (y_prime - y_tilde))


class TestCliLoss:
    def test_rejected_is_zero(self):
        x = torch.rand(2, 1, 16, 16)
        pairs = build_pseudo_pairs(x, x * 0.5, torch.rand(2, 1, 16, 16), torch.tensor([2.0, 3.0]), QualityRange())
        assert cli_loss(ConstantNet(0.3), pairs, _metal()).item() == 0.0

    def test_perfect_student(self):
        x = torch.rand(2, 1, 16, 16, dtype=torch.float64)
        y_prime = torch.rand(2, 1, 16, 16, dtype=torch.float64) * 0.5 + 0.25
        pairs = build_pseudo_pairs(x, x.clone(), y_prime, torch.tensor([8.0, 9.0]), QualityRange())
        assert cli_loss(ConstantNet().double(), pairs, _metal().double()).item() == pytest.approx(0.0, abs=1e-12)

    def test_brute_force_average(self):
        g = torch.Generator().manual_seed(2)
        x, y_tilde, y_prime = (torch.rand(2, 1, 16, 16, generator=g, dtype=torch.float64) for _ in range(3))
        q = torch.tensor([8.0, 2.0])
        pairs = build_pseudo_pairs(x, y_tilde, y_prime, q, QualityRange())
        net = ConstantNet(0.05).double()
        metal = _metal().double()
        keep = metal[0, 0] == 0

        def l1(a, b):
            return float((a - b).abs()[keep].mean())

        first = 0.5 * (l1(x[0, 0] + 0.05, y_tilde[0, 0]) + l1(pairs.x_prime[0, 0] + 0.05, y_prime[0, 0]))
        expected = (first + 0.0) / 2
        assert cli_loss(net, pairs, metal).item() == pytest.approx(expected, abs=1e-7)


class TestTotalLoss:
    def test_sum(self):
        assert total_loss(torch.tensor(0.3), torch.tensor(0.2)).item() == pytest.approx(0.5)
        assert total_loss(torch.tensor(0.0), torch.tensor(0.0)).item() == 0.0

    def test_supervised_only(self):
        assert total_loss(torch.tensor(0.3)).item() == pytest.approx(0.3)


class TestEMA:
    def test_scalar_update(self):
        phi, theta = [torch.tensor([1.0], dtype=torch.float64)], [torch.tensor([0.0], dtype=torch.float64)]
        ema_update(phi, theta, 0.999)
        assert phi[0].item() == pytest.approx(0.999, abs=1e-12)

    def test_zero_decay_copies(self):
        phi, theta = [torch.randn(5)], [torch.randn(5)]
        ema_update(phi, theta, 0.0)
        assert torch.equal(phi[0], theta[0])

    def test_geometric_convergence(self):
        eta = 0.999
        phi, theta = [torch.tensor([1.0], dtype=torch.float64)], [torch.tensor([0.0], dtype=torch.float64)]
        for step in range(1, 101):
            ema_update(phi, theta, eta)
            assert phi[0].item() == pytest.approx(eta ** step, abs=1e-9)

    def test_commutes_with_linear_map(self):
        eta = 0.9
        a = torch.randn(4, 4, dtype=torch.float64)
        phi, theta = torch.randn(4, dtype=torch.float64), torch.randn(4, dtype=torch.float64)
        mapped = [a @ phi]
        ema_update(mapped, [a @ theta], eta)
        direct = [phi.clone()]
        ema_update(direct, [theta], eta)
        torch.testing.assert_close(mapped[0], a @ direct[0])

    def test_structure_mismatch(self):
        with pytest.raises(InvalidArgument):
            ema_update([torch.zeros(3)], [torch.zeros(4)], 0.5)
        with pytest.raises(InvalidArgument):
            ema_update(MARNet(MARConfig(depth=2, base_width=4)), MARNet(MARConfig(depth=3, base_width=4)), 0.5)

    def test_decay_range(self):
        with pytest.raises(InvalidArgument):
            ema_update([torch.zeros(1)], [torch.zeros(1)], 1.0)

    def test_modules(self):
        teacher, student = MARNet(MARConfig(depth=2, base_width=4)), MARNet(MARConfig(depth=2, base_width=4))
        before = copy.deepcopy(teacher.state_dict())
        ema_update(teacher, student, 0.5)
        after, theta = teacher.state_dict(), student.state_dict()
        for k, v in after.items():
            if v.is_floating_point():
                torch.testing.assert_close(v, 0.5 * before[k] + 0.5 * theta[k])


class TestAssessPseudo:
    def test_deterministic_and_bounded(self, tiny_cqa_config):
        teacher, cqa = MARNet(MARConfig(depth=2, base_width=4)), CQANet(tiny_cqa_config)
        x = torch.rand(3, 1, 32, 32)
        y1, q1 = assess_pseudo(teacher, cqa, x)
        y2, q2 = assess_pseudo(teacher, cqa, x)
        assert torch.equal(y1, y2) and torch.equal(q1, q2)
        assert torch.all(q1 >= 1) and torch.all(q1 <= 10)
        assert not y1.requires_grad and not q1.requires_grad

    def test_without_cqa(self):
        _, q = assess_pseudo(MARNet(MARConfig(depth=2, base_width=4)), None, torch.rand(2, 1, 16, 16))
        assert torch.isnan(q).all()


def _domain_arrays(n, size=32, seed=0, shift=0.0):
    rng = np.random.default_rng(seed)
    clean = rng.random((n, size, size)).astype(np.float32) * 0.5 + 0.25
    metal = np.zeros((n, size, size), np.float32)
    metal[:, 14:17, 14:17] = 1.0
    artifact = np.clip(clean + shift + 0.05 * rng.standard_normal((n, size, size)), 0, 1).astype(np.float32)
    return {"artifact": artifact, "clean": clean, "li": artifact.copy(), "metal": metal,
            "roi": 1.0 - metal}


@pytest.fixture
def splits(make_split):
    return {
        "sim": make_split("sim_train", _domain_arrays(6, seed=0)),
        "cli": make_split("cli_train", _domain_arrays(6, seed=1, shift=0.05), "clinical"),
        "pool": make_split("cli_clean", _domain_arrays(4, seed=2), "clinical"),
        "eval": make_split("cli_test", _domain_arrays(2, seed=3, shift=0.05), "clinical"),
    }


class TestWarmStart:
    def test_teacher_is_copy(self, splits, tmp_path):
        cfg = TrainConfig(batch_size=2, seed=0)
        student = MARNet(MARConfig(depth=2, base_width=4))
        path = str(tmp_path / "warm.pt")
        warm = pretrain_supervised(student, splits["sim"], epochs=1, cfg=cfg, checkpoint_path=path)
        x = torch.rand(2, 1, 32, 32)
        warm.student.eval(), warm.teacher.eval()
        torch.testing.assert_close(warm.teacher(x), warm.student(x))
        assert warm.teacher is not warm.student
        assert len(warm.stats) == 1
        assert (tmp_path / "warm.pt").exists()

    def test_li_mode_needs_li(self, make_split):
        arrays = _domain_arrays(2)
        del arrays["li"]
        split = make_split("no_li", arrays)
        with pytest.raises(InvalidArgument):
            pretrain_supervised(MARNet(MARConfig(depth=2, base_width=4), "concat"), split, epochs=1)


class TestRiseTrainer:
    def _trainer(self, splits, cqa, **overrides):
        cfg = TrainConfig(batch_size=2, epochs=1, seed=0, eval_samples=2, **overrides)
        student = MARNet(MARConfig(depth=2, base_width=4))
        teacher = copy.deepcopy(student)
        return RiseTrainer(student, teacher, cqa, cfg, splits["sim"], splits["cli"], splits["pool"],
                           eval_out=splits["eval"])

    def test_requires_cqa(self, splits):
        with pytest.raises(InvalidArgument):
            self._trainer(splits, None)

    def test_no_cqa_accepts_everything(self, splits):
        trainer = self._trainer(splits, None, no_cqa=True)
        assert (trainer.q_range.lower, trainer.q_range.upper) == (1, 10)
        stats = trainer.train_epoch(1)
        assert stats.accepted_count == stats.seen_count == 6

    def test_no_ema_freezes_teacher(self, splits, tiny_cqa_config):
        trainer = self._trainer(splits, CQANet(tiny_cqa_config), no_ema=True)
        before = param_hash(trainer.teacher)
        trainer.fit()
        assert param_hash(trainer.teacher) == before

    def test_no_gradient_leakage(self, splits, tiny_cqa_config):
        cqa = CQANet(tiny_cqa_config)
        trainer = self._trainer(splits, cqa, q_lower=1, q_upper=10, no_ema=True)
        cqa_before, teacher_before = param_hash(cqa), param_hash(trainer.teacher)
        student_before = param_hash(trainer.student)
        for _ in range(3):
            trainer.step(np.array([0, 1]), np.array([2, 3]))
        assert param_hash(cqa) == cqa_before
        assert param_hash(trainer.teacher) == teacher_before
        assert param_hash(trainer.student) != student_before

    def test_gate_soundness(self, splits, tiny_cqa_config):
        trainer = self._trainer(splits, CQANet(tiny_cqa_config), q_lower=4, q_upper=7)
        stats = trainer.fit()
        assert all(e.gate_violations == 0 for e in stats.epochs)
        assert stats.epochs[0].seen_count == 6
        assert 0 <= stats.epochs[0].accepted_count <= 6

    def test_gate_rejects_low_quality(self, splits):
        trainer = self._trainer(splits, FixedQualityCQA(1))
        student_before = param_hash(trainer.student)
        stats = trainer.train_epoch(1)
        assert stats.accepted_count == 0 and stats.seen_count == 6
        assert stats.cli_loss == 0.0
        assert stats.mean_pseudo_quality == pytest.approx(1.0)
        assert stats.gate_violations == 0
        assert param_hash(trainer.student) != student_before

    def test_gate_accepts_high_quality(self, splits):
        stats = self._trainer(splits, FixedQualityCQA(9)).train_epoch(1)
        assert stats.accepted_count == 6
        assert stats.cli_loss > 0

    def test_supervised_only(self, splits):
        trainer = self._trainer(splits, None, no_cqa=True, no_cli_loss=True)
        stats = trainer.train_epoch(1)
        assert math.isnan(stats.cli_loss)
        assert not math.isnan(stats.eval_psnr_out)

    def test_train_rise(self, splits, tiny_cqa_config, tmp_path):
        cfg = TrainConfig(batch_size=3, epochs=2, seed=1, eval_samples=2)
        student = MARNet(MARConfig(depth=2, base_width=4))
        path = str(tmp_path / "rise.pt")
        student, teacher, stats = train_rise(cfg, splits["sim"], splits["cli"], CQANet(tiny_cqa_config),
                                             student, copy.deepcopy(student), splits["pool"],
                                             eval_out=splits["eval"], checkpoint_path=path)
        assert len(stats.accepted_series) == 2
        assert all(e.accepted_count <= e.seen_count for e in stats.epochs)
        assert (tmp_path / "rise.pt").exists()
