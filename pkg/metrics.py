"""
Evaluation metrics on normalized [0, 1] images with metal pixels excluded.
PSNR uses a peak of 1.0 and returns inf for identical images; the rank and
linear correlations return nan for constant input.
"""
import math
import logging
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from scipy import signal, stats

from cqa import score_images
from errors import InvalidArgument
from models import SampleMetrics

logger = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
DATA_RANGE = 1.0


def _to_numpy(a) -> np.ndarray:
    if torch.is_tensor(a):
        a = a.detach().cpu().numpy()
    return np.squeeze(np.asarray(a, dtype=np.float64))


def _prepare(pred, gt, metal_mask):
    pred, gt = _to_numpy(pred), _to_numpy(gt)
    if pred.shape != gt.shape:
        raise InvalidArgument(f"shape mismatch: pred {pred.shape}, gt {gt.shape}")
    metal = np.zeros(gt.shape, dtype=bool) if metal_mask is None else _to_numpy(metal_mask).astype(bool)
    if metal.shape != gt.shape:
        raise InvalidArgument(f"metal mask shape {metal.shape} does not match image {gt.shape}")
    return pred, gt, metal


def mse(pred, gt, metal_mask=None) -> float:
    pred, gt, metal = _prepare(pred, gt, metal_mask)
    keep = ~metal
    if not keep.any():
        raise InvalidArgument("no non-metal pixels to evaluate")
    return float(np.mean((pred[keep] - gt[keep]) ** 2))


def psnr(pred, gt, metal_mask=None) -> float:
    err = mse(pred, gt, metal_mask)
    if err == 0:
        return math.inf
    return 10.0 * math.log10(DATA_RANGE ** 2 / err)


def mae(pred, gt, metal_mask=None) -> float:
    pred, gt, metal = _prepare(pred, gt, metal_mask)
    keep = ~metal
    if not keep.any():
        raise InvalidArgument("no non-metal pixels to evaluate")
    return float(np.mean(np.abs(pred[keep] - gt[keep])))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_map(pred, gt, window: Optional[np.ndarray] = None) -> np.ndarray:
    """SSIM at every window position fully inside the image"""
    pred, gt = _to_numpy(pred), _to_numpy(gt)
    window = gaussian_window() if window is None else window
    if pred.ndim != 2 or min(pred.shape) < window.shape[0]:
        raise InvalidArgument(f"image {pred.shape} is smaller than the {window.shape[0]}x{window.shape[0]} SSIM window")

    def filt(a):
        return signal.correlate(a, window, mode="valid", method="direct")

    c1 = (SSIM_K1 * DATA_RANGE) ** 2
    c2 = (SSIM_K2 * DATA_RANGE) ** 2
    mu_x, mu_y = filt(pred), filt(gt)
    var_x = filt(pred * pred) - mu_x ** 2
    var_y = filt(gt * gt) - mu_y ** 2
    cov = filt(pred * gt) - mu_x * mu_y
    return ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / ((mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2))


def valid_windows(metal_mask, image_shape, size: int = SSIM_WINDOW) -> np.ndarray:
    """True where a size x size window touches no metal pixel"""
    if metal_mask is None:
        return np.ones((image_shape[0] - size + 1, image_shape[1] - size + 1), dtype=bool)
    metal = _to_numpy(metal_mask).astype(np.float64)
    hits = signal.correlate(metal, np.ones((size, size)), mode="valid", method="direct")
    return hits < 0.5


def ssim(pred, gt, metal_mask=None) -> float:
    pred, gt, _ = _prepare(pred, gt, metal_mask)
    values = ssim_map(pred, gt)
    keep = valid_windows(metal_mask, gt.shape)
    if not keep.any():
        raise InvalidArgument("every SSIM window overlaps metal")
    return float(values[keep].mean())


def _check_scores(pred_scores, true_scores):
    pred, true = np.asarray(pred_scores, dtype=np.float64), np.asarray(true_scores, dtype=np.float64)
    if pred.ndim != 1 or pred.shape != true.shape:
        raise InvalidArgument("score lists must be one-dimensional and of equal length")
    if pred.size < 2:
        raise InvalidArgument("correlation needs at least two scores")
    return pred, true


def _constant(a: np.ndarray) -> bool:
    return bool(np.all(a == a[0]))


def srcc(pred_scores: Sequence[float], true_scores: Sequence[float]) -> float:
    """Spearman rank correlation with mean ranks for ties"""
    pred, true = _check_scores(pred_scores, true_scores)
    if _constant(pred) or _constant(true):
        return math.nan
    return float(stats.spearmanr(pred, true)[0])


def plcc(pred_scores: Sequence[float], true_scores: Sequence[float]) -> float:
    pred, true = _check_scores(pred_scores, true_scores)
    if _constant(pred) or _constant(true):
        return math.nan
    return float(stats.pearsonr(pred, true)[0])


def cqa_quality_metric(cqa, images, batch_size: int = 16) -> float:
    """Mean prob2qua of a frozen CQA over an (N, 1, H, W) stack"""
    images = torch.as_tensor(images, dtype=torch.float32)
    if images.ndim == 2:
        images = images[None, None]
    elif images.ndim == 3:
        images = images[:, None]
    scores = score_images(cqa, images, batch_size)
    return float(scores.mean()) if scores.numel() else math.nan


# -------------------------
# Model evaluation over a split
# -------------------------
def sample_metrics(sample_id: str, domain: str, method: str, pred, gt, metal_mask,
                   cqa_quality: float = math.nan) -> SampleMetrics:
    return SampleMetrics(
        sample_id=sample_id, domain=domain, method=method,
        psnr=psnr(pred, gt, metal_mask), ssim=ssim(pred, gt, metal_mask),
        mae=mae(pred, gt, metal_mask), cqa_quality=cqa_quality,
    )


@torch.no_grad()
def predict_split(net, data: Dict[str, torch.Tensor], batch_size: int = 8) -> torch.Tensor:
    """MAR outputs for every sample of a preloaded split"""
    net.eval()
    device = next(net.parameters()).device
    outputs = []
    for start in range(0, data["artifact"].shape[0], batch_size):
        x = data["artifact"][start:start + batch_size].to(device)
        li = data["li"][start:start + batch_size].to(device) if net.needs_li else None
        outputs.append(net(x, li).cpu())
    return torch.cat(outputs)


def evaluate_images(ids: Sequence[str], domain: str, method: str, images: torch.Tensor,
                    data: Dict[str, torch.Tensor], cqa=None, batch_size: int = 8) -> List[SampleMetrics]:
    scores = score_images(cqa, images, batch_size).tolist() if cqa is not None else [math.nan] * len(ids)
    return [
        sample_metrics(sid, domain, method, images[i], data["clean"][i], data["metal"][i], scores[i])
        for i, sid in enumerate(ids)
    ]


def aggregate(rows: Sequence[SampleMetrics]) -> List[SampleMetrics]:
    """One mean row per (domain, method); inf PSNR values are left out of the PSNR mean"""
    groups: Dict[tuple, List[SampleMetrics]] = {}
    for row in rows:
        groups.setdefault((row.domain, row.method), []).append(row)
    out = []
    for (domain, method), group in groups.items():
        finite_psnr = [r.psnr for r in group if math.isfinite(r.psnr)]
        out.append(SampleMetrics(
            sample_id="mean", domain=domain, method=method,
            psnr=float(np.mean(finite_psnr)) if finite_psnr else math.inf,
            ssim=float(np.mean([r.ssim for r in group])),
            mae=float(np.mean([r.mae for r in group])),
            cqa_quality=float(np.mean([r.cqa_quality for r in group])),
        ))
    return out
