"""
Quality scoring for MAR outputs: prob2qua, the compound CE + supervised
contrastive loss with a FIFO memory bank, the synthetic quality oracle that
stands in for radiologist annotation, and the two DQAug augmentations.
"""
import json
import logging
from collections import deque
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from config import DEFAULT_ORACLE_THRESHOLDS
from ctphys import ArtifactPair
from errors import InvalidArgument
from networks import MARNet, mar_forward

logger = logging.getLogger(__name__)

N_CLASSES = 10
CE_EPS = 1e-12
LAMBDA_SCL = 0.01
BANK_CAPACITY = 300
DEFAULT_TAU = 0.5
MIXUP_ALPHA = 0.4

ArrayLike = Union[np.ndarray, torch.Tensor]


class QualityLabel(int):
    """Integer quality class in 1..10"""

    def __new__(cls, value):
        label = int(value)
        if label != value or not 1 <= label <= N_CLASSES:
            raise InvalidArgument(f"quality label must be an integer in 1..{N_CLASSES}, got {value!r}")
        return super().__new__(cls, label)


def _prob_tolerance(p: torch.Tensor) -> float:
    return 1e-6 if p.dtype == torch.float64 else 1e-5


def validate_prob(p: ArrayLike) -> torch.Tensor:
    """Returns `p` as a tensor of shape (..., 10) after checking it is a distribution"""
    p = torch.as_tensor(p)
    if not p.is_floating_point():
        p = p.double()
    if p.shape[-1:] != (N_CLASSES,):
        raise InvalidArgument(f"probability vector must have {N_CLASSES} entries, got shape {tuple(p.shape)}")
    tol = _prob_tolerance(p)
    if not torch.isfinite(p).all() or (p < 0).any():
        raise InvalidArgument("probability vector has negative or non-finite entries")
    if ((p.sum(dim=-1) - 1).abs() > tol).any():
        raise InvalidArgument(f"probability vector does not sum to 1 (tolerance {tol:g})")
    return p


def class_values(like: torch.Tensor) -> torch.Tensor:
    return torch.arange(1, N_CLASSES + 1, dtype=like.dtype, device=like.device)


def prob2qua(p: ArrayLike) -> torch.Tensor:
    """Expected quality sum_k k * p[k]; one value per row"""
    p = validate_prob(p)
    return (p * class_values(p)).sum(dim=-1)


def _labels(label, batch: int, device) -> torch.Tensor:
    labels = torch.as_tensor(label, device=device).reshape(-1)
    if labels.is_floating_point():
        if not torch.equal(labels, labels.round()):
            raise InvalidArgument(f"quality labels must be integers, got {labels.tolist()}")
    labels = labels.long()
    if labels.numel() == 1 and batch > 1:
        labels = labels.expand(batch)
    if labels.numel() != batch:
        raise InvalidArgument(f"{labels.numel()} labels for a batch of {batch}")
    if ((labels < 1) | (labels > N_CLASSES)).any():
        raise InvalidArgument(f"quality labels must lie in 1..{N_CLASSES}")
    return labels


def ce_loss(p_pred: torch.Tensor, label) -> torch.Tensor:
    """-log p_pred[label], averaged over the batch; zero probabilities are clamped to 1e-12"""
    p = validate_prob(p_pred).reshape(-1, N_CLASSES)
    labels = _labels(label, p.shape[0], p.device)
    picked = p.gather(1, (labels - 1).unsqueeze(1)).squeeze(1)
    return -picked.clamp_min(CE_EPS).log().mean()


# -------------------------
# Memory bank and contrastive loss
# -------------------------
class MemoryBank:
    """FIFO buffer of (unit latent, label) pairs; stored latents are detached copies"""

    def __init__(self, capacity: int = BANK_CAPACITY, tau: float = DEFAULT_TAU):
        if capacity < 1 or tau <= 0:
            raise InvalidArgument("memory bank needs capacity >= 1 and tau > 0")
        self.capacity = capacity
        self.tau = tau
        self._entries: deque = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._entries)

    def push(self, latent: torch.Tensor, label) -> None:
        latent = latent.detach().reshape(-1, latent.shape[-1])
        labels = _labels(label, latent.shape[0], "cpu")
        _check_unit(latent)
        for z, y in zip(latent, labels.tolist()):
            self._entries.append((z.clone().cpu(), QualityLabel(y)))

    def latents(self) -> torch.Tensor:
        return torch.stack([z for z, _ in self._entries])

    def labels(self) -> torch.Tensor:
        return torch.tensor([y for _, y in self._entries], dtype=torch.long)

    def state_dict(self) -> dict:
        if not self._entries:
            return {"bank_latents": torch.empty(0), "bank_labels": torch.empty(0, dtype=torch.long)}
        return {"bank_latents": self.latents(), "bank_labels": self.labels()}

    def load_state_dict(self, state: dict) -> None:
        self._entries.clear()
        latents, labels = state.get("bank_latents"), state.get("bank_labels")
        if latents is None or latents.numel() == 0:
            return
        for z, y in zip(latents, labels.tolist()):
            self._entries.append((z.clone(), QualityLabel(y)))


def _check_unit(latent: torch.Tensor, tol: float = 1e-3) -> None:
    norms = latent.detach().norm(dim=-1)
    if ((norms - 1).abs() > tol).any():
        raise InvalidArgument("latent vectors must be unit-norm")


def bank_push(bank: MemoryBank, latent: torch.Tensor, label) -> MemoryBank:
    bank.push(latent, label)
    return bank


class SCLResult(NamedTuple):
    value: torch.Tensor
    status: str  # ok | empty-bank | no-positives
    anchors: int


def scl_loss(latent: torch.Tensor, label, bank: MemoryBank, tau: Optional[float] = None) -> SCLResult:
    """
    Supervised contrastive loss of each anchor against the bank. The
    denominator runs over bank entries only. Anchors without a same-label
    entry are skipped; the batch value is the mean over the remaining ones.
    """
    tau = tau or bank.tau
    z = latent.reshape(-1, latent.shape[-1])
    _check_unit(z)
    labels = _labels(label, z.shape[0], z.device)
    zero = z.sum() * 0.0
    if len(bank) == 0:
        return SCLResult(zero, "empty-bank", 0)

    bank_z = bank.latents().to(z)
    bank_y = bank.labels().to(z.device)
    logits = z @ bank_z.T / tau
    log_prob = logits - torch.logsumexp(logits, dim=1, keepdim=True)
    positives = (labels[:, None] == bank_y[None, :]).to(z.dtype)
    n_pos = positives.sum(dim=1)
    valid = n_pos > 0
    if not valid.any():
        return SCLResult(zero, "no-positives", 0)
    per_anchor = -(positives * log_prob).sum(dim=1)[valid] / n_pos[valid]
    return SCLResult(per_anchor.mean(), "ok", int(valid.sum()))


class CQALoss(NamedTuple):
    total: torch.Tensor
    ce: torch.Tensor
    scl: torch.Tensor
    scl_status: str


def cqa_loss(p_pred: torch.Tensor, latent: torch.Tensor, label, bank: MemoryBank,
             lambda_scl: float = LAMBDA_SCL, use_scl: bool = True) -> CQALoss:
    ce = ce_loss(p_pred, label)
    if not use_scl:
        return CQALoss(ce, ce, ce.new_zeros(()), "disabled")
    scl = scl_loss(latent, label, bank)
    return CQALoss(ce + lambda_scl * scl.value, ce, scl.value, scl.status)


# -------------------------
# Quality oracle
# -------------------------
def _check_thresholds(thresholds: Sequence[float]) -> np.ndarray:
    t = np.asarray(thresholds, dtype=np.float64)
    if t.shape != (N_CLASSES - 1,) or t[0] <= 0 or np.any(np.diff(t) <= 0):
        raise InvalidArgument("oracle thresholds must be 9 strictly increasing positive values")
    return t


def roi_error(pred: ArrayLike, gt: ArrayLike, roi_mask: ArrayLike) -> float:
    pred, gt, roi = (np.asarray(a.detach().cpu() if torch.is_tensor(a) else a) for a in (pred, gt, roi_mask))
    pred, gt, roi = np.squeeze(pred), np.squeeze(gt), np.squeeze(roi).astype(bool)
    if pred.shape != gt.shape or roi.shape != gt.shape:
        raise InvalidArgument(f"shape mismatch: pred {pred.shape}, gt {gt.shape}, roi {roi.shape}")
    if not roi.any():
        raise InvalidArgument("quality oracle needs a non-empty roi")
    return float(np.abs(pred.astype(np.float64) - gt.astype(np.float64))[roi].mean())


def error_to_label(error: float, thresholds: Sequence[float] = DEFAULT_ORACLE_THRESHOLDS) -> QualityLabel:
    """Decreasing step function: error below the first threshold is 10, at or above the last is 1"""
    t = _check_thresholds(thresholds)
    return QualityLabel(N_CLASSES - int(np.searchsorted(t, error, side="right")))


def quality_oracle(pred: ArrayLike, gt: ArrayLike, roi_mask: ArrayLike,
                   thresholds: Optional[Sequence[float]] = None) -> QualityLabel:
    if thresholds is None:
        thresholds = DEFAULT_ORACLE_THRESHOLDS
    return error_to_label(roi_error(pred, gt, roi_mask), thresholds)


def corruption_errors(pairs: Sequence[ArtifactPair], n: int, seed: int) -> np.ndarray:
    """ROI errors of synthetic predictions spanning identity to severe corruption"""
    if not pairs:
        raise InvalidArgument("calibration needs at least one artifact pair")
    rng = np.random.default_rng(seed)
    errors = np.empty(n)
    for i in range(n):
        pair = pairs[rng.integers(len(pairs))]
        # Blend toward the artifact image, optionally past it, plus white noise.
        alpha = rng.uniform(0.0, 1.5)
        sigma = rng.uniform(0.0, 0.01)
        pred = pair.clean_image + alpha * (pair.artifact_image - pair.clean_image)
        pred = pred + sigma * rng.standard_normal(pred.shape)
        errors[i] = roi_error(pred, pair.clean_image, pair.roi_mask)
    return errors


def calibrate_oracle_thresholds(pairs: Sequence[ArtifactPair], n: int = 1000, seed: int = 4000) -> List[float]:
    """Nine thresholds placed at the deciles of the corruption error distribution"""
    errors = corruption_errors(pairs, n, seed)
    t = np.quantile(errors, np.linspace(0.1, 0.9, N_CLASSES - 1))
    t[0] = max(t[0], 1e-9)
    for k in range(1, len(t)):
        t[k] = max(t[k], t[k - 1] * (1 + 1e-6) + 1e-12)
    logger.info(f"Calibrated oracle thresholds from {n} samples: {np.round(t, 5).tolist()}")
    return t.tolist()


def save_thresholds(path: str, thresholds: Sequence[float], config_hash: str) -> None:
    _check_thresholds(thresholds)
    with open(path, "w") as f:
        json.dump({"thresholds": list(map(float, thresholds)), "config_hash": config_hash}, f, indent=2)


def load_thresholds(path: str) -> List[float]:
    with open(path) as f:
        thresholds = json.load(f)["thresholds"]
    return _check_thresholds(thresholds).tolist()


# -------------------------
# DQAug
# -------------------------
def _as_input(image: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))[None, None]


@torch.no_grad()
def dqaug_moderate(pair: ArtifactPair, undertrained_mar: MARNet,
                   thresholds: Optional[Sequence[float]] = None) -> Tuple[np.ndarray, QualityLabel]:
    """Moderate-quality sample: an under-trained MAR output labelled by the oracle"""
    undertrained_mar.eval()
    device = next(undertrained_mar.parameters()).device
    li = None
    if undertrained_mar.needs_li:
        if pair.li_image is None:
            raise InvalidArgument("under-trained MAR needs LI images")
        li = _as_input(pair.li_image).to(device)
    out = mar_forward(undertrained_mar, _as_input(pair.artifact_image).to(device), li)
    image = out[0, 0].cpu().numpy()
    return image, quality_oracle(image, pair.clean_image, pair.roi_mask, thresholds)


def mixup_label(lam: float, label_a: int, label_b: int) -> QualityLabel:
    mixed = lam * label_a + (1 - lam) * label_b
    return QualityLabel(int(np.clip(np.floor(mixed + 0.5), 1, N_CLASSES)))


def dqaug_mixup(a: Tuple[ArrayLike, int], b: Tuple[ArrayLike, int], lam: Optional[float] = None,
                rng: Optional[np.random.Generator] = None,
                alpha: float = MIXUP_ALPHA) -> Tuple[ArrayLike, QualityLabel]:
    """Convex image blend with a rounded (half-up) blended label; lam ~ Beta(alpha, alpha) when not given"""
    (image_a, label_a), (image_b, label_b) = a, b
    if tuple(image_a.shape) != tuple(image_b.shape):
        raise InvalidArgument(f"mixup images differ in shape: {tuple(image_a.shape)} vs {tuple(image_b.shape)}")
    if lam is None:
        lam = float((rng or np.random.default_rng()).beta(alpha, alpha))
    if not 0.0 <= lam <= 1.0:
        raise InvalidArgument(f"mixup weight must lie in [0, 1], got {lam}")
    image = lam * image_a + (1 - lam) * image_b
    return image, mixup_label(lam, int(label_a), int(label_b))


# -------------------------
# Scoring
# -------------------------
@torch.no_grad()
def score_images(cqa, images: torch.Tensor, batch_size: int = 16) -> torch.Tensor:
    """prob2qua of every image in an (N, 1, H, W) stack"""
    cqa.eval()
    device = next(cqa.parameters()).device
    scores = []
    for start in range(0, images.shape[0], batch_size):
        prob, _ = cqa(images[start:start + batch_size].to(device))
        scores.append(prob2qua(prob).cpu())
    return torch.cat(scores) if scores else torch.empty(0)
