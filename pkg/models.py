import csv
import os
from typing import List, Dict, Optional, Literal, Sequence

from pydantic import BaseModel, Field, model_validator


class QualityRange(BaseModel):
    lower: float = 7.0
    upper: float = 10.0

    @model_validator(mode="after")
    def _check(self):
        if not 1 <= self.lower <= self.upper <= 10:
            raise ValueError(f"quality range [{self.lower}, {self.upper}] must satisfy 1 <= lower <= upper <= 10")
        return self

    def contains(self, q):
        """Elementwise for tensors and arrays"""
        return (q >= self.lower) & (q <= self.upper)

    @property
    def label(self) -> str:
        return f"[{self.lower:g},{self.upper:g}]"


class AnnotationRecord(BaseModel):
    id: str
    quality: int = Field(ge=1, le=10)
    provenance: Literal["oracle-paired", "oracle-rule", "mixup-derived"]
    pair_id: Optional[str] = None  # source pair in the cqa_pairs split


class DatasetManifest(BaseModel):
    split: str
    domain_tag: Literal["simulated", "clinical", "mixed"]
    spectrum_id: str  # comma-joined when a split mixes domains
    photon_count: Optional[float] = None
    geometry: Dict[str, float]
    seeds: Dict[str, int]
    shape: List[int]
    arrays: List[str]  # one sub-directory of <id>.f32 files per array
    samples: List[str]
    annotations: Optional[str] = None  # JSON-lines file name, CQA splits only
    config_hash: str


class EpochStats(BaseModel):
    epoch: int
    accepted_count: int = 0
    seen_count: int = 0
    mean_pseudo_quality: float = float("nan")
    sim_loss: float = float("nan")
    cli_loss: float = float("nan")
    eval_psnr_in: float = float("nan")
    eval_psnr_out: float = float("nan")
    eval_ssim_out: float = float("nan")
    eval_cqa_out: float = float("nan")
    gate_violations: int = 0


class TrainStats(BaseModel):
    epochs: List[EpochStats] = Field(default_factory=list)

    @property
    def accepted_series(self) -> List[int]:
        return [e.accepted_count for e in self.epochs]


class CQAEpochLog(BaseModel):
    epoch: int
    ce: float
    scl: float
    loss: float
    srcc: float
    plcc: float


class SampleMetrics(BaseModel):
    sample_id: str
    domain: str
    method: str  # input, li, output
    psnr: float
    ssim: float
    mae: float
    cqa_quality: float = float("nan")


class MetricReport(BaseModel):
    rows: List[SampleMetrics] = Field(default_factory=list)
    aggregates: List[SampleMetrics] = Field(default_factory=list)


class DynamicsRow(BaseModel):
    q_range: str
    epoch: int
    accepted_count: int
    seen_count: int
    mean_pseudo_quality: float


class SweepRow(BaseModel):
    q_range: str
    eval_psnr_in: float
    eval_psnr_out: float
    eval_ssim_out: float
    eval_cqa_out: float
    final_accepted: int
    warm_start_hash: str


def write_csv(path: str, rows: Sequence[BaseModel], config_hash: str,
              columns: Optional[List[str]] = None) -> None:
    """CSV with a `# config_hash:` first line; floats keep 'inf'/'nan' sentinels"""
    if not rows and columns is None:
        raise ValueError("cannot infer CSV columns from an empty row list")
    columns = columns or list(type(rows[0]).model_fields)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as f:
        f.write(f"# config_hash: {config_hash}\n")
        writer = csv.DictWriter(f, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row.model_dump())


def read_csv(path: str) -> List[Dict[str, str]]:
    with open(path, newline="") as f:
        lines = [line for line in f if not line.startswith("#")]
    return list(csv.DictReader(lines))


def read_csv_hash(path: str) -> Optional[str]:
    with open(path) as f:
        first = f.readline()
    if first.startswith("# config_hash:"):
        return first.split(":", 1)[1].strip()
    return None
