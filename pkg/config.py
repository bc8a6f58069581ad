import os
import json
import hashlib
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Iterable, get_origin

from dotenv import load_dotenv, dotenv_values
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from errors import ConfigError

load_dotenv()


class Config:
    DEVICE = os.getenv("RISE_DEVICE", "cpu")
    WORKERS = int(os.getenv("RISE_WORKERS", 1))
    LOG_LEVEL = os.getenv("RISE_LOG_LEVEL", "INFO")
    PROGRESS = os.getenv("RISE_PROGRESS", "1").lower() not in ("0", "false", "no")

config = Config()


# Linear attenuation in 1/mm per energy bin. Non-metal materials are derived
# from "water" in ctphys (same spectral shape, scaled by 1 + HU/1000).
SPECTRA = {
    "spec-a": {
        "energies": [40.0, 70.0, 100.0],
        "weights": [0.30, 0.50, 0.20],
        "reference": 1,
        "material_mu": {
            "water": [0.0268, 0.0193, 0.0171],
            "metal": [1.08, 0.27, 0.18],
        },
    },
    "spec-b": {
        "energies": [50.0, 80.0, 110.0],
        "weights": [0.20, 0.45, 0.35],
        "reference": 1,
        "material_mu": {
            "water": [0.0227, 0.0184, 0.0167],
            "metal": [0.62, 0.21, 0.14],
        },
    },
}

# Quality ranges of the ablation sweep, in table order.
Q_SWEEP: List[Tuple[float, float]] = [(1, 4), (4, 7), (7, 10), (9, 10), (1, 10)]

DEFAULT_ORACLE_THRESHOLDS = [0.0010, 0.0016, 0.0025, 0.0040, 0.0060, 0.0090, 0.0135, 0.0200, 0.0300]


class Section(BaseModel):
    """Config section; list fields also accept comma-separated strings"""
    model_config = ConfigDict(extra="forbid")

    @model_validator(mode="before")
    @classmethod
    def _split_lists(cls, data):
        if not isinstance(data, dict):
            return data
        for name, field in cls.model_fields.items():
            value = data.get(name)
            if isinstance(value, str) and get_origin(field.annotation) in (list, tuple):
                data[name] = [part.strip() for part in value.split(",") if part.strip()]
        return data


class GeometryConfig(Section):
    image_size: int = 128
    n_angles: int = 180
    pixel_spacing: float = 1.0  # mm


class DomainConfig(Section):
    domain_tag: Literal["simulated", "clinical"]
    spectrum_id: str
    photon_count: float
    n_detectors: int
    detector_spacing: float  # mm
    metal_family: Literal["ellipse", "rod"]
    profiles: List[Literal["torso-like", "dental-like"]]
    n_train: int
    n_test: int
    n_clean_pool: int = 0
    seed: int

    @model_validator(mode="after")
    def _known_spectrum(self):
        if self.spectrum_id not in SPECTRA:
            raise ValueError(f"unknown spectrum id {self.spectrum_id!r}")
        return self


class CQADataConfig(Section):
    n_samples: int = 1000
    val_fraction: float = 0.2
    mixup_fraction: float = 0.1
    seed: int = 3000


class OracleConfig(Section):
    thresholds: List[float] = Field(default_factory=lambda: list(DEFAULT_ORACLE_THRESHOLDS))
    calibrate: bool = True
    n_calibration: int = 1000
    seed: int = 4000

    @model_validator(mode="after")
    def _thresholds_increasing(self):
        t = self.thresholds
        if len(t) != 9 or any(b <= a for a, b in zip(t, t[1:])) or t[0] <= 0:
            raise ValueError("oracle thresholds must be 9 strictly increasing positive values")
        return self


class MARConfig(Section):
    depth: int = 4
    base_width: int = 32
    norm: Literal["group", "batch"] = "group"


class CQANetConfig(Section):
    image_size: int = 128
    embed_dims: List[int] = Field(default_factory=lambda: [32, 64, 128])
    strides: List[int] = Field(default_factory=lambda: [4, 2, 2])
    kernel_sizes: List[int] = Field(default_factory=lambda: [7, 3, 3])
    num_heads: List[int] = Field(default_factory=lambda: [1, 2, 4])
    blocks_per_scale: int = 2
    window_size: int = 8
    mlp_ratio: float = 4.0
    head_hidden: int = 256
    use_rel_pos: bool = True
    use_freq: bool = True


class CQATrainConfig(Section):
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-4
    betas: List[float] = Field(default_factory=lambda: [0.5, 0.999])
    lr_step: int = 20
    lr_gamma: float = 0.5
    lambda_scl: float = 0.01
    tau: float = 0.5
    bank_capacity: int = 300
    use_scl: bool = True
    dqaug_moderate: bool = True
    dqaug_mixup: bool = True
    p_moderate: float = 0.3
    p_mixup: float = 0.3
    mixup_alpha: float = 0.4
    undertrained_epochs: int = 1
    flip_rotate: bool = True
    seed: int = 5000


class TrainConfig(Section):
    q_lower: float = 7.0
    q_upper: float = 10.0
    ema_decay: float = 0.999
    warm_epochs: int = 10
    epochs: int = 30
    batch_size: int = 1
    lr: float = 1e-4
    betas: List[float] = Field(default_factory=lambda: [0.5, 0.999])
    lr_step: int = 20
    lr_gamma: float = 0.5
    input_mode: Literal["artifact", "li", "concat"] = "artifact"
    student_init: Literal["warm", "undertrained"] = "warm"
    no_cli_loss: bool = False
    no_ema: bool = False
    no_cqa: bool = False
    flip_rotate: bool = True
    eval_samples: int = 50
    seed: int = 6000

    @model_validator(mode="after")
    def _ranges(self):
        if not 1 <= self.q_lower <= self.q_upper <= 10:
            raise ValueError("quality range must satisfy 1 <= q_lower <= q_upper <= 10")
        if not 0 <= self.ema_decay < 1:
            raise ValueError("ema_decay must lie in [0, 1)")
        return self


class EvalConfig(Section):
    batch_size: int = 8
    n_previews: int = 4
    display_window: List[float] = Field(default_factory=lambda: [-300.0, 300.0])


def _sim_domain() -> DomainConfig:
    return DomainConfig(
        domain_tag="simulated", spectrum_id="spec-a", photon_count=1e6,
        n_detectors=192, detector_spacing=1.0, metal_family="ellipse",
        profiles=["torso-like", "dental-like"], n_train=800, n_test=100, seed=1000,
    )


def _cli_domain() -> DomainConfig:
    return DomainConfig(
        domain_tag="clinical", spectrum_id="spec-b", photon_count=2e5,
        n_detectors=256, detector_spacing=0.75, metal_family="rod",
        profiles=["torso-like", "dental-like"], n_train=400, n_test=100,
        n_clean_pool=400, seed=2000,
    )


class ExperimentConfig(Section):
    output_dir: str = "runs/desk"
    geometry: GeometryConfig = Field(default_factory=GeometryConfig)
    sim: DomainConfig = Field(default_factory=_sim_domain)
    cli: DomainConfig = Field(default_factory=_cli_domain)
    cqa_data: CQADataConfig = Field(default_factory=CQADataConfig)
    oracle: OracleConfig = Field(default_factory=OracleConfig)
    mar: MARConfig = Field(default_factory=MARConfig)
    cqa_net: CQANetConfig = Field(default_factory=CQANetConfig)
    cqa_train: CQATrainConfig = Field(default_factory=CQATrainConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    @model_validator(mode="before")
    @classmethod
    def _merge_domains(cls, data):
        # Partial domain overrides are merged onto the domain defaults.
        if isinstance(data, dict):
            for key, factory in (("sim", _sim_domain), ("cli", _cli_domain)):
                if isinstance(data.get(key), dict):
                    data[key] = {**factory().model_dump(), **data[key]}
        return data

    @model_validator(mode="after")
    def _same_image_size(self):
        if self.cqa_net.image_size != self.geometry.image_size:
            raise ValueError(f"cqa_net.image_size={self.cqa_net.image_size} differs from "
                             f"geometry.image_size={self.geometry.image_size}")
        return self


def read_experiment_file(path, _seen: Optional[frozenset] = None) -> Dict[str, str]:
    """Flat key/value pairs of an experiment file, with `include=` resolved"""
    path = Path(path).resolve()
    seen = _seen or frozenset()
    if path in seen:
        raise ConfigError(f"include cycle through {path}")
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")

    values = dotenv_values(path)
    merged: Dict[str, str] = {}
    include = values.pop("include", None)
    if include:
        merged.update(read_experiment_file(path.parent / include, seen | {path}))
    merged.update({k: v for k, v in values.items() if v is not None})
    return merged


def _nest(flat: Dict[str, str]) -> dict:
    nested: dict = {}
    for key, value in flat.items():
        node = nested
        *parents, leaf = key.split(".")
        for part in parents:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"key {key!r} conflicts with a scalar value")
        node[leaf] = value
    return nested


def load_experiment(path=None, overrides: Iterable[str] = ()) -> ExperimentConfig:
    flat = read_experiment_file(path) if path else {}
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override must look like key=value, got {item!r}")
        flat[key.strip()] = value.strip()
    try:
        return ExperimentConfig.model_validate(_nest(flat))
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def config_hash(cfg) -> str:
    data = cfg.model_dump(mode="json") if isinstance(cfg, BaseModel) else cfg
    payload = json.dumps(data, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]
