import os
import json
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from config import MARConfig, CQANetConfig
from errors import InvalidArgument, CorruptCheckpoint

logger = logging.getLogger(__name__)

N_CLASSES = 10
INPUT_MODES = ("artifact", "li", "concat")


def NormLayer(norm: str, num_channels: int):
    if norm == "batch":
        return nn.BatchNorm2d(num_channels)
    elif norm == "group":
        return nn.GroupNorm(min(8, num_channels), num_channels)
    else:
        raise InvalidArgument(f"Unknown norm type: {norm}")


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


# -------------------------
# MAR backbone: attention U-Net
# -------------------------
class DoubleConv(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, norm: str):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, 3, padding=1, bias=False),
            NormLayer(norm, out_channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False),
            NormLayer(norm, out_channels),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.block(x)


class SpatialAttentionGate(nn.Module):
    """Additive attention map in [0, 1] over the skip features, driven by the decoder signal"""

    def __init__(self, gate_channels: int, skip_channels: int, inter_channels: int, norm: str):
        super().__init__()
        self.W_g = nn.Sequential(nn.Conv2d(gate_channels, inter_channels, 1, bias=False), NormLayer(norm, inter_channels))
        self.W_x = nn.Sequential(nn.Conv2d(skip_channels, inter_channels, 1, bias=False), NormLayer(norm, inter_channels))
        self.psi = nn.Sequential(nn.Conv2d(inter_channels, 1, 1), nn.Sigmoid())
        self.relu = nn.ReLU(inplace=True)

    def forward(self, g: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        psi = self.psi(self.relu(self.W_g(g) + self.W_x(x)))
        return x * psi


class ChannelAttentionGate(nn.Module):
    """Squeeze-and-excitation weights in [0, 1] per skip channel"""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(4, channels // reduction)
        self.fc = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Conv2d(channels, hidden, 1),
            nn.GELU(),
            nn.Conv2d(hidden, channels, 1),
            nn.Sigmoid(),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.fc(x)


class Down(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, norm: str):
        super().__init__()
        self.block = nn.Sequential(nn.MaxPool2d(2), DoubleConv(in_channels, out_channels, norm))

    def forward(self, x):
        return self.block(x)


class Up(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, norm: str):
        super().__init__()
        self.up = nn.ConvTranspose2d(in_channels, out_channels, 2, stride=2)
        self.spatial_gate = SpatialAttentionGate(out_channels, out_channels, max(out_channels // 2, 4), norm)
        self.channel_gate = ChannelAttentionGate(out_channels)
        self.conv = DoubleConv(out_channels * 2, out_channels, norm)

    def forward(self, x1, x2):
        x1 = self.up(x1)
        x2 = self.channel_gate(self.spatial_gate(x1, x2))
        return self.conv(torch.cat([x2, x1], dim=1))


class MARNet(nn.Module):
    """
    Attention U-Net that predicts a residual correction of its primary input:
    the artifact image (artifact, concat modes) or the LI image (li mode).
    """

    def __init__(self, config: Optional[MARConfig] = None, input_mode: str = "artifact"):
        super().__init__()
        config = config or MARConfig()
        if input_mode not in INPUT_MODES:
            raise InvalidArgument(f"input_mode must be one of {INPUT_MODES}, got {input_mode!r}")
        if config.depth < 2:
            raise InvalidArgument("MARNet depth must be >= 2")
        self.config = config
        self.input_mode = input_mode

        widths = [config.base_width * 2 ** i for i in range(config.depth)]
        in_channels = 2 if input_mode == "concat" else 1
        self.inc = DoubleConv(in_channels, widths[0], config.norm)
        self.downs = nn.ModuleList(Down(widths[i - 1], widths[i], config.norm) for i in range(1, config.depth))
        self.ups = nn.ModuleList(Up(widths[i], widths[i - 1], config.norm) for i in reversed(range(1, config.depth)))
        self.outc = nn.Conv2d(widths[0], 1, 1)

    @property
    def needs_li(self) -> bool:
        return self.input_mode in ("li", "concat")

    def forward(self, x: torch.Tensor, li: Optional[torch.Tensor] = None) -> torch.Tensor:
        if self.needs_li and li is None:
            raise InvalidArgument(f"input_mode {self.input_mode!r} requires LI images")
        if self.input_mode == "artifact":
            inp, base = x, x
        elif self.input_mode == "li":
            inp, base = li, li
        else:
            inp, base = torch.cat([x, li], dim=1), x

        # Pad to a multiple of the pooling factor, crop back after decoding.
        h, w = inp.shape[-2:]
        factor = 2 ** (self.config.depth - 1)
        ph, pw = -h % factor, -w % factor
        if ph or pw:
            mode = "reflect" if ph < h and pw < w else "replicate"
            inp = F.pad(inp, (0, pw, 0, ph), mode=mode)

        skips = [self.inc(inp)]
        for down in self.downs:
            skips.append(down(skips[-1]))
        out = skips.pop()
        for up in self.ups:
            out = up(out, skips.pop())
        return base + self.outc(out)[..., :h, :w]


def mar_forward(net: MARNet, x: torch.Tensor, li: Optional[torch.Tensor] = None) -> torch.Tensor:
    return net(x, li)


# -------------------------
# CQA encoder: spatial-frequency transformer
# -------------------------
class OverlapPatchEmbed(nn.Module):
    def __init__(self, in_channels: int, dim: int, kernel_size: int, stride: int):
        super().__init__()
        self.proj = nn.Conv2d(in_channels, dim, kernel_size, stride=stride, padding=kernel_size // 2)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # (B, C, H, W) -> (B, H', W', dim)
        return self.norm(self.proj(x).permute(0, 2, 3, 1))


class WindowAttention(nn.Module):
    """Multi-head self-attention inside non-overlapping windows, optional relative position bias"""

    def __init__(self, dim: int, window_size: int, num_heads: int, use_rel_pos: bool = True):
        super().__init__()
        if dim % num_heads:
            raise InvalidArgument(f"dim {dim} is not divisible by {num_heads} heads")
        self.window_size = window_size
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.use_rel_pos = use_rel_pos
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        if use_rel_pos:
            self.rel_bias = nn.Parameter(torch.zeros((2 * window_size - 1) ** 2, num_heads))
            nn.init.trunc_normal_(self.rel_bias, std=0.02)

    def _bias(self, w: int, device) -> torch.Tensor:
        coords = torch.stack(torch.meshgrid(torch.arange(w, device=device), torch.arange(w, device=device), indexing="ij")).flatten(1)
        rel = coords[:, :, None] - coords[:, None, :] + (self.window_size - 1)
        index = rel[0] * (2 * self.window_size - 1) + rel[1]
        return self.rel_bias[index].permute(2, 0, 1)  # heads, N, N

    def forward(self, x: torch.Tensor, w: Optional[int] = None,
                key_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        # x: (num_windows * B, N, C) with N = w * w; key_mask: (num_windows * B, N), True = real token
        bw, n, c = x.shape
        w = w or self.window_size
        qkv = self.qkv(x).reshape(bw, n, 3, self.num_heads, c // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q * self.scale) @ k.transpose(-2, -1)
        if self.use_rel_pos:
            attn = attn + self._bias(w, x.device).unsqueeze(0)
        if key_mask is not None:
            attn = attn.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        out = (attn.softmax(dim=-1) @ v).transpose(1, 2).reshape(bw, n, c)
        return self.proj(out)


class FrequencyConv(nn.Module):
    """Learned per-channel complex transfer function applied to the 2-D DFT of the features"""

    def __init__(self, dim: int, size: int):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(dim, size, size // 2 + 1, 2) * 0.02)

    def transfer(self, h: int, w: int) -> torch.Tensor:
        weight = self.weight
        if weight.shape[1:3] != (h, w // 2 + 1):
            weight = F.interpolate(weight.permute(0, 3, 1, 2), size=(h, w // 2 + 1),
                                   mode="bilinear", align_corners=True).permute(0, 2, 3, 1)
        return torch.view_as_complex(weight.contiguous())

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, C, H, W)
        h, w = x.shape[-2:]
        spectrum = torch.fft.rfft2(x, norm="ortho")
        return torch.fft.irfft2(spectrum * self.transfer(h, w), s=(h, w), norm="ortho")


class SpatialFrequencyBlock(nn.Module):
    def __init__(self, dim: int, num_heads: int, window_size: int, mlp_ratio: float,
                 size: int, use_rel_pos: bool = True, use_freq: bool = True):
        super().__init__()
        self.window_size = window_size
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, window_size, num_heads, use_rel_pos)
        self.spatial_conv = nn.Conv2d(dim, dim, 3, padding=1, groups=dim)
        self.freq_conv = FrequencyConv(dim, size) if use_freq else None
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def _window_attention(self, x: torch.Tensor) -> torch.Tensor:
        b, h, w, c = x.shape
        ws = min(self.window_size, h, w)
        ph, pw = -h % ws, -w % ws
        key_mask = None
        if ph or pw:
            # Zero-pad to whole windows; padded tokens are never attended to.
            x = F.pad(x, (0, 0, 0, pw, 0, ph))
            valid = torch.zeros(h + ph, w + pw, dtype=torch.bool, device=x.device)
            valid[:h, :w] = True
            key_mask = self._partition(valid.expand(b, -1, -1).unsqueeze(-1), ws).squeeze(-1)
        hp, wp = h + ph, w + pw
        out = self.attn(self._partition(x, ws), ws, key_mask)
        out = out.reshape(b, hp // ws, wp // ws, ws, ws, c).permute(0, 1, 3, 2, 4, 5).reshape(b, hp, wp, c)
        return out[:, :h, :w]

    @staticmethod
    def _partition(x: torch.Tensor, ws: int) -> torch.Tensor:
        b, h, w, c = x.shape
        return x.reshape(b, h // ws, ws, w // ws, ws, c).permute(0, 1, 3, 2, 4, 5).reshape(-1, ws * ws, c)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, H, W, C)
        h = self.norm1(x)
        h_chw = h.permute(0, 3, 1, 2)
        mixed = self._window_attention(h) + self.spatial_conv(h_chw).permute(0, 2, 3, 1)
        if self.freq_conv is not None:
            mixed = mixed + self.freq_conv(h_chw).permute(0, 2, 3, 1)
        x = x + mixed
        return x + self.mlp(self.norm2(x))


class CQANet(nn.Module):
    """
    Three-scale spatial-frequency transformer encoder, a vectorization layer
    (average pool per scale, concatenate, unit-normalize) and a 10-way
    quality head.
    """

    def __init__(self, config: Optional[CQANetConfig] = None):
        super().__init__()
        config = config or CQANetConfig()
        if not (len(config.embed_dims) == len(config.strides) == len(config.kernel_sizes) == len(config.num_heads) == 3):
            raise InvalidArgument("CQANet needs exactly 3 scales")
        self.config = config

        self.embeds = nn.ModuleList()
        self.stages = nn.ModuleList()
        self.norms = nn.ModuleList()
        in_channels, size = 1, config.image_size
        for dim, stride, kernel, heads in zip(config.embed_dims, config.strides, config.kernel_sizes, config.num_heads):
            size //= stride
            self.embeds.append(OverlapPatchEmbed(in_channels, dim, kernel, stride))
            self.stages.append(nn.Sequential(*[
                SpatialFrequencyBlock(dim, heads, config.window_size, config.mlp_ratio, size,
                                      config.use_rel_pos, config.use_freq)
                for _ in range(config.blocks_per_scale)
            ]))
            self.norms.append(nn.LayerNorm(dim))
            in_channels = dim

        latent_dim = sum(config.embed_dims)
        self.head = nn.Sequential(
            nn.Linear(latent_dim, config.head_hidden),
            nn.GELU(),
            nn.Linear(config.head_hidden, N_CLASSES),
        )

    def features(self, x: torch.Tensor) -> List[torch.Tensor]:
        if x.ndim != 4 or x.shape[-1] != x.shape[-2]:
            raise InvalidArgument(f"CQA input must be a batch of square images, got {tuple(x.shape)}")
        maps = []
        for embed, stage, norm in zip(self.embeds, self.stages, self.norms):
            x = norm(stage(embed(x)))
            maps.append(x)
            x = x.permute(0, 3, 1, 2)
        return maps

    def vectorize(self, maps: List[torch.Tensor]) -> torch.Tensor:
        pooled = torch.cat([m.mean(dim=(1, 2)) for m in maps], dim=1)
        return F.normalize(pooled, dim=1)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        latent = self.vectorize(self.features(x))
        prob = self.head(latent).softmax(dim=-1)
        return prob, latent


def cqa_forward(net: CQANet, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    return net(x)


def freeze(model: nn.Module) -> nn.Module:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


# -------------------------
# Checkpoints
# -------------------------
@dataclass
class Checkpoint:
    model_state: Dict[str, torch.Tensor]
    meta: dict
    optimizer_state: Optional[dict] = None
    scheduler_state: Optional[dict] = None
    ema_state: Optional[Dict[str, torch.Tensor]] = None
    extra: Dict[str, torch.Tensor] = field(default_factory=dict)
    torch_rng: Optional[torch.Tensor] = None

    @property
    def epoch(self) -> int:
        return int(self.meta.get("epoch", 0))


def architecture(model: nn.Module) -> dict:
    if isinstance(model, MARNet):
        return {"kind": "mar", "config": model.config.model_dump(), "input_mode": model.input_mode}
    if isinstance(model, CQANet):
        return {"kind": "cqa", "config": model.config.model_dump()}
    raise InvalidArgument(f"unsupported model type {type(model).__name__}")


def save_checkpoint(path, model: nn.Module, *, optimizer=None, scheduler=None,
                    ema_model: Optional[nn.Module] = None, epoch: int = 0,
                    np_rng: Optional[np.random.Generator] = None, stats: Optional[list] = None,
                    config_hash: str = "", extra: Optional[Dict[str, torch.Tensor]] = None) -> None:
    meta = {
        "arch": architecture(model),
        "epoch": epoch,
        "config_hash": config_hash,
        "numpy_rng": np_rng.bit_generator.state if np_rng is not None else None,
        "stats": stats or [],
    }
    payload = {
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "scheduler": scheduler.state_dict() if scheduler is not None else None,
        "ema": ema_model.state_dict() if ema_model is not None else None,
        "extra": extra or {},
        "torch_rng": torch.get_rng_state(),
        "meta": json.dumps(meta),
    }
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = f"{path}.tmp"
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    if not os.path.isfile(path):
        raise CorruptCheckpoint(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
        meta = json.loads(payload["meta"])
        return Checkpoint(
            model_state=payload["model"],
            meta=meta,
            optimizer_state=payload.get("optimizer"),
            scheduler_state=payload.get("scheduler"),
            ema_state=payload.get("ema"),
            extra=payload.get("extra") or {},
            torch_rng=payload.get("torch_rng"),
        )
    except CorruptCheckpoint:
        raise
    except Exception as e:
        raise CorruptCheckpoint(f"cannot read checkpoint {path}: {e}") from e


def build_model(arch: dict) -> nn.Module:
    if arch.get("kind") == "mar":
        return MARNet(MARConfig(**arch["config"]), arch["input_mode"])
    if arch.get("kind") == "cqa":
        return CQANet(CQANetConfig(**arch["config"]))
    raise CorruptCheckpoint(f"unknown architecture {arch!r}")


def model_from_checkpoint(ckpt: Checkpoint, use_ema: bool = False) -> nn.Module:
    model = build_model(ckpt.meta.get("arch", {}))
    state = ckpt.ema_state if use_ema else ckpt.model_state
    if state is None:
        raise CorruptCheckpoint("checkpoint has no EMA state" if use_ema else "checkpoint has no model state")
    try:
        model.load_state_dict(state)
    except RuntimeError as e:
        raise CorruptCheckpoint(f"parameters do not match the stored architecture: {e}") from e
    return model


def restore_rng(ckpt: Checkpoint, np_rng: Optional[np.random.Generator] = None) -> None:
    if ckpt.torch_rng is not None:
        torch.set_rng_state(ckpt.torch_rng)
    if np_rng is not None and ckpt.meta.get("numpy_rng"):
        np_rng.bit_generator.state = ckpt.meta["numpy_rng"]
