"""
Experiment steps behind the CLI verbs. Everything lives under `output_dir`:

    data/<split>/                 manifests and float32 arrays
    data/oracle_thresholds.json   frozen quality-oracle thresholds
    cqa/                          cqa.pt, undertrained_mar.pt, cqa_log.csv
    mar/warm_<mode>_e<n>.pt       warm starts shared by all runs of an input mode
    mar/<run>/                    rise.pt, train_stats.csv, run.json
    eval/<run>/                   report.csv, summary.txt, previews/
    sweep/                        sweep.csv, dynamics.csv
"""
import io
import os
import copy
import json
import logging
from dataclasses import dataclass
from itertools import zip_longest
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from rich.console import Console
from rich.table import Table

from config import Q_SWEEP, ExperimentConfig, TrainConfig, config, config_hash
from cqa import (calibrate_oracle_thresholds, dqaug_mixup, load_thresholds, quality_oracle,
                 save_thresholds)
from cqa_trainer import train_cqa
from dataset import (POOL_OFFSET, TEST_OFFSET, ArraySplit, domain_tasks, prepare_output_dir,
                     synthesize_pairs, pair_arrays, write_domain_split, write_split)
from errors import CorruptCheckpoint, MissingPrerequisite
from image_processor import ImageProcessor
from metrics import aggregate, evaluate_images, predict_split
from models import (AnnotationRecord, DatasetManifest, DynamicsRow, MetricReport, SweepRow, TrainStats,
                    QualityRange, write_csv)
from networks import CQANet, MARNet, freeze, load_checkpoint, model_from_checkpoint
from selftrain import param_hash, pretrain_supervised, train_rise

logger = logging.getLogger(__name__)

PAIRED = ["artifact", "clean", "li", "metal", "roi"]
CLI_UNPAIRED = ["artifact", "li", "metal", "roi"]
CLEAN_POOL = ["clean", "metal", "roi"]
CQA_OFFSET = 300_000
STAMP = ".config_hash"

TRAIN_STATS_COLUMNS = ["epoch", "accepted_count", "seen_count", "mean_pseudo_quality", "sim_loss", "cli_loss",
                       "eval_psnr_in", "eval_psnr_out", "eval_ssim_out", "eval_cqa_out", "gate_violations"]
CQA_LOG_COLUMNS = ["epoch", "ce", "scl", "srcc", "plcc"]
REPORT_COLUMNS = ["sample_id", "domain", "method", "psnr", "ssim", "mae", "cqa_quality"]


@dataclass
class Layout:
    root: str

    @property
    def data(self) -> str:
        return os.path.join(self.root, "data")

    @property
    def thresholds(self) -> str:
        return os.path.join(self.data, "oracle_thresholds.json")

    @property
    def cqa(self) -> str:
        return os.path.join(self.root, "cqa")

    @property
    def mar(self) -> str:
        return os.path.join(self.root, "mar")

    @property
    def sweep(self) -> str:
        return os.path.join(self.root, "sweep")

    def split(self, name: str) -> str:
        return os.path.join(self.data, name)

    def run(self, name: str) -> str:
        return os.path.join(self.mar, name)

    def eval(self, name: str) -> str:
        return os.path.join(self.root, "eval", name)

    def warm(self, input_mode: str, epochs: int) -> str:
        return os.path.join(self.mar, f"warm_{input_mode}_e{epochs}.pt")


def run_name(train: TrainConfig) -> str:
    parts = [f"q{train.q_lower:g}-{train.q_upper:g}"]
    parts += [flag for flag in ("no_cli_loss", "no_ema", "no_cqa") if getattr(train, flag)]
    if train.input_mode != "artifact":
        parts.append(train.input_mode)
    if train.student_init != "warm":
        parts.append(train.student_init)
    return "_".join(parts)


def claim_dir(path: str, cfg_hash: str, force: bool = False) -> None:
    """A run directory is reused only by the config that created it"""
    stamp = os.path.join(path, STAMP)
    if os.path.isdir(path) and os.listdir(path):
        existing = None
        if os.path.isfile(stamp):
            with open(stamp) as f:
                existing = f.read().strip()
        if existing != cfg_hash:
            prepare_output_dir(path, force)
    os.makedirs(path, exist_ok=True)
    with open(stamp, "w") as f:
        f.write(cfg_hash + "\n")


def device() -> torch.device:
    return torch.device(config.DEVICE)


def mar_arrays(input_mode: str) -> List[str]:
    return ["artifact"] if input_mode == "artifact" else ["artifact", "li"]


def load_split(layout: Layout, name: str, arrays: Optional[Sequence[str]] = None,
               limit: Optional[int] = None) -> ArraySplit:
    return ArraySplit(layout.split(name), arrays, limit)


# -------------------------
# simulate
# -------------------------
def mixed_manifest(split: str, cfg: ExperimentConfig, arrays: List[str], ids: List[str], cfg_hash: str,
                   seeds: Dict[str, int]) -> DatasetManifest:
    geo = cfg.geometry
    return DatasetManifest(
        split=split, domain_tag="mixed", spectrum_id=f"{cfg.sim.spectrum_id},{cfg.cli.spectrum_id}",
        geometry={"image_size": geo.image_size, "n_angles": geo.n_angles, "pixel_spacing": geo.pixel_spacing},
        seeds=seeds, shape=[geo.image_size, geo.image_size], arrays=arrays, samples=ids, config_hash=cfg_hash,
    )


def write_cqa_sets(layout: Layout, cfg: ExperimentConfig, cfg_hash: str) -> Dict[str, int]:
    """Oracle-annotated CQA images from fresh pairs of both domains, split train/val by source pair"""
    data_cfg = cfg.cqa_data
    n_pairs = max(2, int(data_cfg.n_samples * (1 - data_cfg.mixup_fraction)) // 4)
    n_sim = (n_pairs + 1) // 2
    sim_tasks = domain_tasks(cfg.sim, cfg.geometry, n_sim, CQA_OFFSET)
    cli_tasks = domain_tasks(cfg.cli, cfg.geometry, n_pairs - n_sim, CQA_OFFSET)
    tasks = [t for both in zip_longest(sim_tasks, cli_tasks) for t in both if t is not None]
    pairs = synthesize_pairs(tasks)
    pair_ids = [f"cqa_pairs-{i:05d}" for i in range(n_pairs)]
    seeds = {"sim": cfg.sim.seed + CQA_OFFSET, "cli": cfg.cli.seed + CQA_OFFSET, "annotation": data_cfg.seed}
    write_split(layout.split("cqa_pairs"), mixed_manifest("cqa_pairs", cfg, PAIRED, pair_ids, cfg_hash, seeds),
                {pid: pair_arrays(p) for pid, p in zip(pair_ids, pairs)})

    if cfg.oracle.calibrate:
        thresholds = calibrate_oracle_thresholds(pairs, cfg.oracle.n_calibration, cfg.oracle.seed)
    else:
        thresholds = list(cfg.oracle.thresholds)
    save_thresholds(layout.thresholds, thresholds, cfg_hash)

    rng = np.random.default_rng(data_cfg.seed)
    n_val = int(round(n_pairs * data_cfg.val_fraction))
    val_pairs = set(rng.permutation(n_pairs)[:n_val].tolist())
    parts = {"cqa_train": ({}, []), "cqa_val": ({}, [])}
    for i, (pid, pair) in enumerate(zip(pair_ids, pairs)):
        split = "cqa_val" if i in val_pairs else "cqa_train"
        samples, records = parts[split]
        alpha = rng.uniform(0.05, 0.95)
        blend = pair.clean_image + alpha * (pair.artifact_image - pair.clean_image)
        for kind, image, provenance in (("clean", pair.clean_image, "oracle-rule"),
                                        ("artifact", pair.artifact_image, "oracle-paired"),
                                        ("li", pair.li_image, "oracle-paired"),
                                        ("blend", blend, "oracle-paired")):
            sid = f"{split}-{i:05d}-{kind}"
            label = quality_oracle(image, pair.clean_image, pair.roi_mask, thresholds)
            samples[sid] = {"image": np.asarray(image, dtype=np.float32)}
            records.append(AnnotationRecord(id=sid, quality=int(label), provenance=provenance, pair_id=pid))

    samples, records = parts["cqa_train"]
    base = list(records)
    n_mix = max(0, data_cfg.n_samples - sum(len(r) for _, r in parts.values()))
    for m in range(n_mix if len(base) >= 2 else 0):
        a, b = rng.choice(len(base), size=2, replace=False)
        rec_a, rec_b = base[a], base[b]
        image, label = dqaug_mixup((samples[rec_a.id]["image"], rec_a.quality),
                                   (samples[rec_b.id]["image"], rec_b.quality), rng=rng)
        sid = f"cqa_train-mix-{m:05d}"
        samples[sid] = {"image": np.asarray(image, dtype=np.float32)}
        records.append(AnnotationRecord(id=sid, quality=int(label), provenance="mixup-derived"))

    counts = {"cqa_pairs": n_pairs}
    for split, (samples, records) in parts.items():
        ids = [r.id for r in records]
        write_split(layout.split(split), mixed_manifest(split, cfg, ["image"], ids, cfg_hash, seeds),
                    samples, records)
        counts[split] = len(ids)
    return counts


def cmd_simulate(cfg: ExperimentConfig, force: bool = False) -> Dict[str, int]:
    h = config_hash(cfg)
    layout = Layout(cfg.output_dir)
    prepare_output_dir(layout.data, force)
    geo = cfg.geometry
    logger.info(f"Simulating datasets into {layout.data} (config {h})")

    splits = [
        ("sim_train", cfg.sim, cfg.sim.n_train, 0, PAIRED),
        ("sim_test", cfg.sim, cfg.sim.n_test, TEST_OFFSET, PAIRED),
        ("cli_train", cfg.cli, cfg.cli.n_train, 0, CLI_UNPAIRED),
        ("cli_clean", cfg.cli, cfg.cli.n_clean_pool, POOL_OFFSET, CLEAN_POOL),
        ("cli_test", cfg.cli, cfg.cli.n_test, TEST_OFFSET, PAIRED),
    ]
    counts = {}
    for name, domain, n, offset, arrays in splits:
        write_domain_split(layout.data, name, domain, geo, n, offset, arrays, h)
        counts[name] = n
    counts.update(write_cqa_sets(layout, cfg, h))
    with open(os.path.join(layout.data, STAMP), "w") as f:
        f.write(h + "\n")
    logger.info(f"Simulation done: {counts}")
    return counts


# -------------------------
# train-cqa
# -------------------------
def oracle_thresholds(layout: Layout, cfg: ExperimentConfig) -> List[float]:
    if os.path.isfile(layout.thresholds):
        return load_thresholds(layout.thresholds)
    return list(cfg.oracle.thresholds)


def warm_start(cfg: ExperimentConfig, path: str, sim_train: ArraySplit, epochs: int,
               input_mode: str) -> MARNet:
    """Supervised warm start, reused from `path` when it was trained with the same settings"""
    tc = cfg.train
    h = config_hash({
        "geometry": cfg.geometry.model_dump(), "sim": cfg.sim.model_dump(), "mar": cfg.mar.model_dump(),
        "input_mode": input_mode, "epochs": epochs, "lr": tc.lr, "betas": tc.betas, "lr_step": tc.lr_step,
        "lr_gamma": tc.lr_gamma, "batch_size": tc.batch_size, "seed": tc.seed, "n": len(sim_train),
        "flip_rotate": tc.flip_rotate,
    })
    if os.path.isfile(path):
        ckpt = load_checkpoint(path)
        if ckpt.meta.get("config_hash") == h:
            logger.info(f"Reusing warm start {path}")
            return model_from_checkpoint(ckpt).to(device())
        logger.info(f"Warm start {path} was trained with other settings; retraining")
    student = MARNet(cfg.mar, input_mode).to(device())
    return pretrain_supervised(student, sim_train, epochs, tc, path, h).student


def cmd_train_cqa(cfg: ExperimentConfig, force: bool = False, resume: bool = False):
    h = config_hash(cfg)
    layout = Layout(cfg.output_dir)
    train = load_split(layout, "cqa_train", ["image"])
    val = load_split(layout, "cqa_val", ["image"])
    pairs = load_split(layout, "cqa_pairs", PAIRED)
    thresholds = oracle_thresholds(layout, cfg)
    if resume:
        os.makedirs(layout.cqa, exist_ok=True)
    else:
        claim_dir(layout.cqa, h, force)

    undertrained = None
    if cfg.cqa_train.dqaug_moderate:
        sim_train = load_split(layout, "sim_train", ["artifact", "clean", "metal"])
        undertrained = warm_start(cfg, os.path.join(layout.cqa, "undertrained_mar.pt"), sim_train,
                                  cfg.cqa_train.undertrained_epochs, "artifact")
    checkpoint = os.path.join(layout.cqa, "cqa.pt")
    net, log, trainer = train_cqa(train, cfg.cqa_net, cfg.cqa_train, thresholds, pairs, val, undertrained,
                                  checkpoint, resume, h)
    write_csv(os.path.join(layout.cqa, "cqa_log.csv"), log, h, columns=CQA_LOG_COLUMNS)
    return log, dict(trainer.aug_counts)


# -------------------------
# train-mar
# -------------------------
def load_cqa(layout: Layout, path: Optional[str] = None, required: bool = True) -> Optional[CQANet]:
    path = path or os.path.join(layout.cqa, "cqa.pt")
    if not os.path.isfile(path):
        if required:
            raise MissingPrerequisite(f"CQA checkpoint missing: {path} (run `train-cqa` or use --ablation no_cqa)")
        return None
    net = model_from_checkpoint(load_checkpoint(path))
    if not isinstance(net, CQANet):
        raise CorruptCheckpoint(f"{path} does not hold a CQA network")
    return freeze(net.to(device()))


@dataclass
class MarRun:
    stats: TrainStats
    run_dir: str
    warm_start_hash: str
    teacher_hash_start: str
    teacher_hash_end: str


def cmd_train_mar(cfg: ExperimentConfig, force: bool = False, cqa_checkpoint: Optional[str] = None) -> MarRun:
    h = config_hash(cfg)
    layout = Layout(cfg.output_dir)
    tc = cfg.train
    inputs = mar_arrays(tc.input_mode)
    sim_train = load_split(layout, "sim_train", inputs + ["clean", "metal"])
    cli_train = load_split(layout, "cli_train", inputs + ["metal"])
    cli_clean = None if tc.no_cli_loss else load_split(layout, "cli_clean", ["clean", "metal"])
    eval_in = load_split(layout, "sim_test", inputs + ["clean", "metal"], limit=tc.eval_samples)
    eval_out = load_split(layout, "cli_test", inputs + ["clean", "metal"], limit=tc.eval_samples)
    cqa = load_cqa(layout, cqa_checkpoint, required=not tc.no_cqa)

    run_dir = layout.run(run_name(tc))
    claim_dir(run_dir, h, force)
    warm_path = layout.warm(tc.input_mode, tc.warm_epochs)
    warm = warm_start(cfg, warm_path, sim_train, tc.warm_epochs, tc.input_mode)
    teacher = copy.deepcopy(warm)
    if tc.student_init == "undertrained":
        student = warm_start(cfg, layout.warm(tc.input_mode, 1), sim_train, 1, tc.input_mode)
    else:
        student = copy.deepcopy(warm)

    teacher_start = param_hash(teacher)
    student, teacher, stats = train_rise(tc, sim_train, cli_train, cqa, student, teacher, cli_clean,
                                         eval_in, eval_out, os.path.join(run_dir, "rise.pt"), h)
    result = MarRun(
        stats=stats, run_dir=run_dir, warm_start_hash=ImageProcessor.calculate_file_hash(warm_path),
        teacher_hash_start=teacher_start, teacher_hash_end=param_hash(teacher),
    )
    write_csv(os.path.join(run_dir, "train_stats.csv"), stats.epochs, h, columns=TRAIN_STATS_COLUMNS)
    with open(os.path.join(run_dir, "run.json"), "w") as f:
        json.dump({"config_hash": h, "q_range": QualityRange(lower=tc.q_lower, upper=tc.q_upper).label,
                   "warm_start_hash": result.warm_start_hash, "teacher_hash_start": teacher_start,
                   "teacher_hash_end": result.teacher_hash_end}, f, indent=2)
    logger.info(f"Self-training done: {run_dir} (accepted per epoch {stats.accepted_series})")
    return result


# -------------------------
# eval
# -------------------------
def evaluate_model(net: MARNet, splits: Sequence[ArraySplit], cqa=None, batch_size: int = 8) -> MetricReport:
    """Input, LI and network output scored against the clean images of every split"""
    rows = []
    for split in splits:
        data, domain = split.data, split.manifest.domain_tag
        outputs = predict_split(net, data, batch_size)
        rows += evaluate_images(split.ids, domain, "input", data["artifact"], data, cqa, batch_size)
        if "li" in data:
            rows += evaluate_images(split.ids, domain, "li", data["li"], data, cqa, batch_size)
        rows += evaluate_images(split.ids, domain, "output", outputs, data, cqa, batch_size)
    return MetricReport(rows=rows, aggregates=aggregate(rows))


def render_summary(report: MetricReport, cfg_hash: str, title: str = "MAR evaluation") -> str:
    table = Table(title=f"{title} (config {cfg_hash})")
    for column in ("domain", "method", "PSNR (dB)", "SSIM (%)", "MAE", "CQA quality"):
        table.add_column(column, justify="left" if column in ("domain", "method") else "right")
    for row in report.aggregates:
        table.add_row(row.domain, row.method, f"{row.psnr:.2f}", f"{100 * row.ssim:.2f}", f"{row.mae:.5f}",
                      f"{row.cqa_quality:.2f}")
    console = Console(record=True, width=100, file=io.StringIO())
    console.print(table)
    return console.export_text()


def write_previews(out_dir: str, net: MARNet, splits: Sequence[ArraySplit], n: int,
                   window: Sequence[float]) -> None:
    for split in splits:
        k = min(n, len(split))
        if k == 0:
            continue
        data = {name: t[:k] for name, t in split.data.items()}
        outputs = predict_split(net, data)
        for i in range(k):
            ImageProcessor.save_preview(
                os.path.join(out_dir, "previews", f"{split.ids[i]}.png"),
                [data["artifact"][i].numpy(), outputs[i].numpy(), data["clean"][i].numpy()],
                tuple(window),
            )


def cmd_eval(cfg: ExperimentConfig, checkpoint: Optional[str] = None, force: bool = False,
             cqa_checkpoint: Optional[str] = None) -> MetricReport:
    h = config_hash(cfg)
    layout = Layout(cfg.output_dir)
    name = run_name(cfg.train)
    checkpoint = checkpoint or os.path.join(layout.run(name), "rise.pt")
    net = model_from_checkpoint(load_checkpoint(checkpoint))
    if not isinstance(net, MARNet):
        raise CorruptCheckpoint(f"{checkpoint} does not hold a MAR network")
    net = net.to(device()).eval()
    cqa = load_cqa(layout, cqa_checkpoint, required=False)
    splits = [load_split(layout, "sim_test", PAIRED), load_split(layout, "cli_test", PAIRED)]

    report = evaluate_model(net, splits, cqa, cfg.eval.batch_size)
    out_dir = layout.eval(name)
    claim_dir(out_dir, h, force)
    write_csv(os.path.join(out_dir, "report.csv"), report.rows + report.aggregates, h, columns=REPORT_COLUMNS)
    summary = render_summary(report, h)
    with open(os.path.join(out_dir, "summary.txt"), "w") as f:
        f.write(summary)
    Console().print(summary, markup=False, highlight=False)
    write_previews(out_dir, net, splits, cfg.eval.n_previews, cfg.eval.display_window)
    logger.info(f"Evaluation written to {out_dir}")
    return report


# -------------------------
# sweep-q
# -------------------------
def _aggregate_value(report: MetricReport, domain: str, field: str) -> float:
    for row in report.aggregates:
        if row.domain == domain and row.method == "output":
            return getattr(row, field)
    return float("nan")


def cmd_sweep_q(cfg: ExperimentConfig, force: bool = False, cqa_checkpoint: Optional[str] = None):
    h = config_hash(cfg)
    layout = Layout(cfg.output_dir)
    claim_dir(layout.sweep, h, force)
    rows: List[SweepRow] = []
    dynamics: List[DynamicsRow] = []
    for lower, upper in Q_SWEEP:
        train = cfg.train.model_copy(update={"q_lower": float(lower), "q_upper": float(upper)})
        row_cfg = cfg.model_copy(update={"train": train})
        label = QualityRange(lower=lower, upper=upper).label
        logger.info(f"Sweep row Q={label}")
        run = cmd_train_mar(row_cfg, force=force, cqa_checkpoint=cqa_checkpoint)
        report = cmd_eval(row_cfg, force=force, cqa_checkpoint=cqa_checkpoint)
        rows.append(SweepRow(
            q_range=label,
            eval_psnr_in=_aggregate_value(report, cfg.sim.domain_tag, "psnr"),
            eval_psnr_out=_aggregate_value(report, cfg.cli.domain_tag, "psnr"),
            eval_ssim_out=_aggregate_value(report, cfg.cli.domain_tag, "ssim"),
            eval_cqa_out=_aggregate_value(report, cfg.cli.domain_tag, "cqa_quality"),
            final_accepted=run.stats.epochs[-1].accepted_count if run.stats.epochs else 0,
            warm_start_hash=run.warm_start_hash,
        ))
        dynamics += [
            DynamicsRow(q_range=label, epoch=e.epoch, accepted_count=e.accepted_count, seen_count=e.seen_count,
                        mean_pseudo_quality=e.mean_pseudo_quality)
            for e in run.stats.epochs
        ]
    write_csv(os.path.join(layout.sweep, "sweep.csv"), rows, h)
    write_csv(os.path.join(layout.sweep, "dynamics.csv"), dynamics, h)
    return rows, dynamics
