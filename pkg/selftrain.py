"""
Self-training of the MAR student: supervised warm start on simulated pairs,
then teacher pseudo ground-truths on the clinical domain gated by CQA quality,
residual-transfer pseudo pairs, and an EMA teacher.
"""
import copy
import hashlib
import math
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn
from tqdm import tqdm

from config import TrainConfig, config
from cqa import prob2qua
from dataset import ArraySplit, random_flip_rotate
from errors import InvalidArgument
from metrics import evaluate_images, predict_split
from models import EpochStats, QualityRange, TrainStats
from networks import MARNet, freeze, save_checkpoint

logger = logging.getLogger(__name__)

FULL_RANGE = QualityRange(lower=1, upper=10)


def non_metal_l1(pred: torch.Tensor, target: torch.Tensor, metal_mask: torch.Tensor) -> torch.Tensor:
    """Per-sample mean |pred - target| over non-metal pixels, shape (B,)"""
    if pred.shape != target.shape or metal_mask.shape != target.shape:
        raise InvalidArgument(f"shape mismatch: pred {tuple(pred.shape)}, target {tuple(target.shape)}, "
                              f"mask {tuple(metal_mask.shape)}")
    keep = (metal_mask < 0.5).to(pred.dtype)
    count = keep.flatten(1).sum(dim=1)
    if (count == 0).any():
        raise InvalidArgument("sample without non-metal pixels")
    return ((pred - target).abs() * keep).flatten(1).sum(dim=1) / count


def sim_loss(student: MARNet, x_sim: torch.Tensor, y_sim: torch.Tensor, metal_mask: torch.Tensor,
             li: Optional[torch.Tensor] = None) -> torch.Tensor:
    return non_metal_l1(student(x_sim, li), y_sim, metal_mask).mean()


@torch.no_grad()
def assess_pseudo(teacher: MARNet, cqa: Optional[nn.Module], x_cli: torch.Tensor,
                  li: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """Teacher prediction and its CQA quality; q is nan when no CQA is given"""
    teacher.eval()
    y_tilde = teacher(x_cli, li)
    if cqa is None:
        return y_tilde, torch.full((x_cli.shape[0],), math.nan, device=x_cli.device)
    cqa.eval()
    prob, _ = cqa(y_tilde)
    return y_tilde, prob2qua(prob)


@dataclass
class PseudoPairSet:
    x: torch.Tensor
    y_tilde: torch.Tensor
    x_prime: torch.Tensor  # clipped to [0, 1]
    x_prime_raw: torch.Tensor
    y_prime: torch.Tensor
    q: torch.Tensor
    accepted: torch.Tensor  # (B,) bool, gate applied per sample
    li: Optional[torch.Tensor] = None
    li_prime: Optional[torch.Tensor] = None

    @property
    def residual(self) -> torch.Tensor:
        return self.x - self.y_tilde


def build_pseudo_pairs(x_cli: torch.Tensor, y_tilde: torch.Tensor, y_prime: torch.Tensor, q: torch.Tensor,
                       q_range: QualityRange, accept_all: bool = False,
                       li: Optional[torch.Tensor] = None) -> PseudoPairSet:
    if x_cli.shape != y_tilde.shape or y_prime.shape != x_cli.shape:
        raise InvalidArgument("pseudo pair inputs must share one shape")
    residual = x_cli - y_tilde
    x_prime_raw = y_prime + residual
    q = torch.as_tensor(q, device=x_cli.device).reshape(-1)
    if accept_all:
        accepted = torch.ones_like(q, dtype=torch.bool)
    else:
        accepted = q_range.contains(q)
    li_prime = li + (y_prime - y_tilde) if li is not None else None
    return PseudoPairSet(
        x=x_cli, y_tilde=y_tilde, x_prime=x_prime_raw.clamp(0.0, 1.0), x_prime_raw=x_prime_raw,
        y_prime=y_prime, q=q, accepted=accepted, li=li, li_prime=li_prime,
    )


def cli_loss_terms(student: MARNet, pairs: PseudoPairSet, metal_mask: torch.Tensor,
                   metal_mask_prime: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Per-sample gated clinical loss, shape (B,)"""
    gate = pairs.accepted.to(pairs.x.dtype)
    if not pairs.accepted.any():
        return gate * 0.0
    mask2 = metal_mask if metal_mask_prime is None else torch.maximum(metal_mask, metal_mask_prime)
    l1_pair1 = non_metal_l1(student(pairs.x, pairs.li), pairs.y_tilde, metal_mask)
    l1_pair2 = non_metal_l1(student(pairs.x_prime, pairs.li_prime), pairs.y_prime, mask2)
    return gate * 0.5 * (l1_pair1 + l1_pair2)


def cli_loss(student: MARNet, pairs: PseudoPairSet, metal_mask: torch.Tensor,
             metal_mask_prime: Optional[torch.Tensor] = None) -> torch.Tensor:
    return cli_loss_terms(student, pairs, metal_mask, metal_mask_prime).mean()


def total_loss(sim: torch.Tensor, cli: Optional[torch.Tensor] = None) -> torch.Tensor:
    return sim if cli is None else sim + cli


Params = Union[nn.Module, Sequence[torch.Tensor]]


def _tensors(params: Params) -> Dict[str, torch.Tensor]:
    if isinstance(params, nn.Module):
        return {k: v for k, v in params.state_dict().items() if v.is_floating_point()}
    return {str(i): p for i, p in enumerate(params)}


@torch.no_grad()
def ema_update(teacher: Params, student: Params, eta: float) -> Params:
    """phi <- eta * phi + (1 - eta) * theta, in place"""
    if not 0 <= eta < 1:
        raise InvalidArgument(f"EMA decay must lie in [0, 1), got {eta}")
    phi, theta = _tensors(teacher), _tensors(student)
    if phi.keys() != theta.keys() or any(phi[k].shape != theta[k].shape for k in phi):
        raise InvalidArgument("teacher and student parameter structures differ")
    for k, p in phi.items():
        p.mul_(eta).add_(theta[k].to(p), alpha=1 - eta)
    return teacher


def param_hash(model: nn.Module) -> str:
    digest = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def make_optimizer(model: nn.Module, cfg: TrainConfig):
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=tuple(cfg.betas))
    scheduler = torch.optim.lr_scheduler.StepLR(optimizer, step_size=cfg.lr_step, gamma=cfg.lr_gamma)
    return optimizer, scheduler


def _batch(data: Dict[str, torch.Tensor], index: np.ndarray, names: Sequence[str], device) -> Dict[str, torch.Tensor]:
    idx = torch.from_numpy(np.asarray(index, dtype=np.int64))
    return {name: data[name][idx].to(device) for name in names}


def _input_arrays(net: MARNet) -> List[str]:
    return ["artifact", "li"] if net.needs_li else ["artifact"]


def _check_li(split: ArraySplit, net: MARNet) -> None:
    if net.needs_li and "li" not in split.data:
        raise InvalidArgument(f"input mode {net.input_mode} needs LI images, split "
                              f"{split.manifest.split} has none")


@dataclass
class WarmStart:
    student: MARNet
    teacher: MARNet
    stats: List[dict]


def pretrain_supervised(student: MARNet, sim_dataset: ArraySplit, epochs: int = 10,
                        cfg: Optional[TrainConfig] = None, checkpoint_path: Optional[str] = None,
                        config_hash: str = "", seed: Optional[int] = None) -> WarmStart:
    """Supervised warm start with sim_loss only; the teacher starts as a copy of the result"""
    cfg = cfg or TrainConfig()
    if len(sim_dataset) == 0:
        raise InvalidArgument("warm start needs a non-empty simulated split")
    _check_li(sim_dataset, student)
    seed = cfg.seed if seed is None else seed
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    device = next(student.parameters()).device
    optimizer, scheduler = make_optimizer(student, cfg)
    names = _input_arrays(student) + ["clean", "metal"]
    history = []

    for epoch in range(1, epochs + 1):
        student.train()
        order = rng.permutation(len(sim_dataset))
        losses = []
        steps = range(0, len(order), cfg.batch_size)
        for start in tqdm(steps, desc=f"warm {epoch}/{epochs}", disable=not config.PROGRESS, leave=False):
            b = _batch(sim_dataset.data, order[start:start + cfg.batch_size], names, device)
            if cfg.flip_rotate:
                b = random_flip_rotate(b, rng)
            loss = sim_loss(student, b["artifact"], b["clean"], b["metal"], b.get("li"))
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
        scheduler.step()
        history.append({"epoch": epoch, "sim_loss": float(np.mean(losses))})
        logger.info(f"Warm start epoch {epoch}/{epochs}: sim_loss={history[-1]['sim_loss']:.5f}")

    if checkpoint_path:
        save_checkpoint(checkpoint_path, student, optimizer=optimizer, scheduler=scheduler, epoch=epochs,
                        np_rng=rng, stats=history, config_hash=config_hash)
        logger.info(f"Saved warm-start checkpoint {checkpoint_path}")
    teacher = copy.deepcopy(student)
    return WarmStart(student=student, teacher=teacher, stats=history)


@dataclass
class StepResult:
    sim_loss: float
    cli_loss: float
    q: List[float]
    accepted: int
    seen: int
    violations: int


class RiseTrainer:
    """
    Owns the student, the teacher and a frozen CQA for one self-training run.
    Per step: sim batch and cli batch, teacher prediction, CQA gate, pseudo
    pairs, combined loss, student update, then the EMA teacher update.
    """

    def __init__(self, student: MARNet, teacher: MARNet, cqa: Optional[nn.Module], cfg: TrainConfig,
                 sim_dataset: ArraySplit, cli_dataset: ArraySplit, clean_pool: Optional[ArraySplit] = None,
                 eval_in: Optional[ArraySplit] = None, eval_out: Optional[ArraySplit] = None):
        if cqa is None and not cfg.no_cqa:
            raise InvalidArgument("a pretrained CQA is required unless the no_cqa ablation is set")
        if not cfg.no_cli_loss and (clean_pool is None or len(clean_pool) == 0):
            raise InvalidArgument("clinical loss needs a non-empty artifact-free clinical pool")
        if len(sim_dataset) == 0 or len(cli_dataset) == 0:
            raise InvalidArgument("self-training needs non-empty simulated and clinical splits")
        if student.input_mode != teacher.input_mode:
            raise InvalidArgument("teacher and student must share an input mode")
        for split in (sim_dataset, cli_dataset, eval_in, eval_out):
            if split is not None:
                _check_li(split, student)

        self.cfg = cfg
        self.student = student
        self.teacher = freeze(teacher)
        self.cqa = freeze(cqa) if cqa is not None else None
        self.sim = sim_dataset
        self.cli = cli_dataset
        self.pool = clean_pool
        self.eval_in = eval_in
        self.eval_out = eval_out
        self.q_range = FULL_RANGE if cfg.no_cqa else QualityRange(lower=cfg.q_lower, upper=cfg.q_upper)
        self.device = next(student.parameters()).device
        self.optimizer, self.scheduler = make_optimizer(student, cfg)
        self.rng = np.random.default_rng(cfg.seed)
        torch.manual_seed(cfg.seed)
        self.stats = TrainStats()

    def step(self, sim_index: np.ndarray, cli_index: np.ndarray) -> StepResult:
        cfg = self.cfg
        inputs = _input_arrays(self.student)
        s = _batch(self.sim.data, sim_index, inputs + ["clean", "metal"], self.device)
        c = _batch(self.cli.data, cli_index, inputs + ["metal"], self.device)
        if cfg.flip_rotate:
            s, c = random_flip_rotate(s, self.rng), random_flip_rotate(c, self.rng)

        self.student.train()
        l_sim = sim_loss(self.student, s["artifact"], s["clean"], s["metal"], s.get("li"))
        y_tilde, q = assess_pseudo(self.teacher, self.cqa, c["artifact"], c.get("li"))

        l_cli = None
        accepted = violations = 0
        if not cfg.no_cli_loss:
            pool_index = self.rng.integers(len(self.pool), size=len(cli_index))
            p = _batch(self.pool.data, pool_index, ["clean", "metal"], self.device)
            if cfg.flip_rotate:
                p = random_flip_rotate(p, self.rng)
            pairs = build_pseudo_pairs(c["artifact"], y_tilde, p["clean"], q, self.q_range,
                                       accept_all=cfg.no_cqa, li=c.get("li"))
            terms = cli_loss_terms(self.student, pairs, c["metal"], p["metal"])
            l_cli = terms.mean()
            accepted = int(pairs.accepted.sum())
            contributing = terms.detach() > 0
            in_range = pairs.accepted if cfg.no_cqa else self.q_range.contains(q)
            violations = int((contributing & ~in_range).sum())
        elif cfg.no_cqa or self.cqa is None:
            accepted = len(cli_index)
        else:
            accepted = int(self.q_range.contains(q).sum())

        loss = total_loss(l_sim, l_cli)
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        if not cfg.no_ema:
            ema_update(self.teacher, self.student, cfg.ema_decay)

        return StepResult(
            sim_loss=l_sim.item(), cli_loss=l_cli.item() if l_cli is not None else math.nan,
            q=q.detach().cpu().tolist(), accepted=accepted, seen=len(cli_index), violations=violations,
        )

    def evaluate(self) -> Dict[str, float]:
        out = {"eval_psnr_in": math.nan, "eval_psnr_out": math.nan,
               "eval_ssim_out": math.nan, "eval_cqa_out": math.nan}
        limit = self.cfg.eval_samples
        if self.eval_in is not None and len(self.eval_in):
            rows = self._eval_rows(self.eval_in, limit, cqa=None)
            out["eval_psnr_in"] = _finite_mean([r.psnr for r in rows])
        if self.eval_out is not None and len(self.eval_out):
            rows = self._eval_rows(self.eval_out, limit, cqa=self.cqa)
            out["eval_psnr_out"] = _finite_mean([r.psnr for r in rows])
            out["eval_ssim_out"] = float(np.mean([r.ssim for r in rows]))
            out["eval_cqa_out"] = float(np.mean([r.cqa_quality for r in rows]))
        return out

    def _eval_rows(self, split: ArraySplit, limit: int, cqa):
        n = min(limit, len(split)) if limit else len(split)
        data = {k: v[:n] for k, v in split.data.items()}
        outputs = predict_split(self.student, data)
        return evaluate_images(split.ids[:n], split.manifest.domain_tag, "output", outputs, data, cqa)

    def train_epoch(self, epoch: int) -> EpochStats:
        bs = self.cfg.batch_size
        cli_order = self.rng.permutation(len(self.cli))
        sim_order = self.rng.integers(len(self.sim), size=len(cli_order))
        sim_l, cli_l, qs = [], [], []
        accepted = seen = violations = 0
        for start in tqdm(range(0, len(cli_order), bs), desc=f"rise {epoch}", disable=not config.PROGRESS,
                          leave=False):
            result = self.step(sim_order[start:start + bs], cli_order[start:start + bs])
            sim_l.append(result.sim_loss)
            cli_l.append(result.cli_loss)
            qs.extend(result.q)
            accepted += result.accepted
            seen += result.seen
            violations += result.violations
        self.scheduler.step()
        if violations:
            logger.error(f"Epoch {epoch}: {violations} pseudo pairs outside {self.q_range.label} contributed loss")

        stats = EpochStats(
            epoch=epoch, accepted_count=accepted, seen_count=seen,
            mean_pseudo_quality=_finite_mean(qs), sim_loss=float(np.mean(sim_l)),
            cli_loss=_finite_mean(cli_l), gate_violations=violations, **self.evaluate(),
        )
        logger.info(
            f"RISE epoch {epoch}: accepted {accepted}/{seen} in {self.q_range.label}, "
            f"mean q={stats.mean_pseudo_quality:.3f}, sim={stats.sim_loss:.5f}, cli={stats.cli_loss:.5f}, "
            f"psnr in/out={stats.eval_psnr_in:.2f}/{stats.eval_psnr_out:.2f}"
        )
        return stats

    def fit(self, epochs: Optional[int] = None, checkpoint_path: Optional[str] = None,
            config_hash: str = "") -> TrainStats:
        epochs = epochs or self.cfg.epochs
        for epoch in range(1, epochs + 1):
            self.stats.epochs.append(self.train_epoch(epoch))
            if checkpoint_path:
                save_checkpoint(checkpoint_path, self.student, optimizer=self.optimizer,
                                scheduler=self.scheduler, ema_model=self.teacher, epoch=epoch,
                                np_rng=self.rng, stats=[e.model_dump() for e in self.stats.epochs],
                                config_hash=config_hash)
        return self.stats


def _finite_mean(values: Sequence[float]) -> float:
    finite = [v for v in values if math.isfinite(v)]
    return float(np.mean(finite)) if finite else math.nan


def train_rise(cfg: TrainConfig, sim_dataset: ArraySplit, cli_dataset: ArraySplit, cqa: Optional[nn.Module],
               student: MARNet, teacher: MARNet, clean_pool: Optional[ArraySplit] = None,
               eval_in: Optional[ArraySplit] = None, eval_out: Optional[ArraySplit] = None,
               checkpoint_path: Optional[str] = None,
               config_hash: str = "") -> Tuple[MARNet, MARNet, TrainStats]:
    trainer = RiseTrainer(student, teacher, cqa, cfg, sim_dataset, cli_dataset, clean_pool, eval_in, eval_out)
    stats = trainer.fit(checkpoint_path=checkpoint_path, config_hash=config_hash)
    return trainer.student, trainer.teacher, stats
