"""
On-disk dataset splits: one directory per split with `manifest.json` and one
header-free little-endian float32 row-major file per sample and array.
"""
import json
import os
import shutil
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import torch
from torch.utils.data import Dataset

from config import DomainConfig, GeometryConfig, config
from ctphys import ArtifactPair, build_spectrum, domain_geometry, make_phantom, simulate_metal_artifact
from errors import MissingPrerequisite, OutputExists, InvalidArgument
from models import AnnotationRecord, DatasetManifest

logger = logging.getLogger(__name__)

DTYPE = "<f4"
MANIFEST = "manifest.json"

# Per-split seed offsets added to the domain seed.
TEST_OFFSET = 100_000
POOL_OFFSET = 200_000
NOISE_OFFSET = 500_000


def write_array(path: str, array: np.ndarray) -> None:
    np.ascontiguousarray(array, dtype=DTYPE).tofile(path)


def read_array(path: str, shape: Sequence[int]) -> np.ndarray:
    data = np.fromfile(path, dtype=DTYPE)
    if data.size != int(np.prod(shape)):
        raise InvalidArgument(f"{path} holds {data.size} values, manifest shape is {list(shape)}")
    return data.reshape(shape)


def prepare_output_dir(path: str, force: bool = False) -> None:
    """Refuse to reuse a non-empty directory unless forced (then it is wiped)"""
    if os.path.isdir(path) and os.listdir(path):
        if not force:
            raise OutputExists(f"{path} exists and is not empty; pass --force to overwrite")
        logger.info(f"Removing existing output {path}")
        shutil.rmtree(path)
    os.makedirs(path, exist_ok=True)


def write_split(split_dir: str, manifest: DatasetManifest, samples: Dict[str, Dict[str, np.ndarray]],
                annotations: Optional[List[AnnotationRecord]] = None) -> None:
    os.makedirs(split_dir, exist_ok=True)
    for name in manifest.arrays:
        os.makedirs(os.path.join(split_dir, name), exist_ok=True)
    for sample_id in manifest.samples:
        for name in manifest.arrays:
            write_array(os.path.join(split_dir, name, f"{sample_id}.f32"), samples[sample_id][name])
    if annotations is not None:
        manifest = manifest.model_copy(update={"annotations": "annotations.jsonl"})
        write_annotations(os.path.join(split_dir, "annotations.jsonl"), annotations)
    with open(os.path.join(split_dir, MANIFEST), "w") as f:
        f.write(manifest.model_dump_json(indent=2))
    logger.info(f"Wrote split {manifest.split}: {len(manifest.samples)} samples -> {split_dir}")


def read_manifest(split_dir: str) -> DatasetManifest:
    path = os.path.join(split_dir, MANIFEST)
    if not os.path.isfile(path):
        raise MissingPrerequisite(f"dataset split missing: {path} (run `simulate` first)")
    with open(path) as f:
        return DatasetManifest.model_validate_json(f.read())


def write_annotations(path: str, records: Iterable[AnnotationRecord]) -> None:
    with open(path, "w") as f:
        for record in records:
            f.write(record.model_dump_json() + "\n")


def read_annotations(path: str) -> List[AnnotationRecord]:
    with open(path) as f:
        return [AnnotationRecord.model_validate_json(line) for line in f if line.strip()]


class ArraySplit(Dataset):
    """A split loaded into memory; items are dicts of (1, H, W) float tensors plus `id`"""

    def __init__(self, split_dir: str, arrays: Optional[Sequence[str]] = None, limit: Optional[int] = None):
        self.split_dir = split_dir
        self.manifest = read_manifest(split_dir)
        self.arrays = list(arrays or self.manifest.arrays)
        missing = set(self.arrays) - set(self.manifest.arrays)
        if missing:
            raise MissingPrerequisite(f"split {self.manifest.split} has no arrays {sorted(missing)}")
        self.ids = self.manifest.samples[:limit] if limit else list(self.manifest.samples)
        self.data = {
            name: torch.from_numpy(np.stack([
                read_array(os.path.join(split_dir, name, f"{i}.f32"), self.manifest.shape) for i in self.ids
            ])).unsqueeze(1) if self.ids else torch.empty(0)
            for name in self.arrays
        }
        self.annotations: Dict[str, AnnotationRecord] = {}
        if self.manifest.annotations:
            records = read_annotations(os.path.join(split_dir, self.manifest.annotations))
            self.annotations = {r.id: r for r in records}

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, index):
        item = {name: tensor[index] for name, tensor in self.data.items()}
        item["id"] = self.ids[index]
        return item


def random_flip_rotate(batch: Dict[str, torch.Tensor], rng: np.random.Generator) -> Dict[str, torch.Tensor]:
    """
    Applies one random rot90 and horizontal flip per sample to every (B, C, H, W)
    tensor in `batch`. All tensors of a sample share the transform, so an input,
    its target and its metal mask stay aligned. Non-square images only rotate
    by 0 or 180 degrees.
    """
    if not batch:
        return batch
    first = next(iter(batch.values()))
    b, (h, w) = first.shape[0], first.shape[-2:]
    out = {name: t.clone() for name, t in batch.items()}
    for j in range(b):
        k = int(rng.integers(4)) if h == w else 2 * int(rng.integers(2))
        flip = bool(rng.random() < 0.5)
        for name, t in batch.items():
            x = torch.rot90(t[j], k, dims=(-2, -1))
            out[name][j] = x.flip(-1) if flip else x
    return out


# ---------------------------------------------------------------------------
# Synthesis
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PairTask:
    phantom_seed: int
    noise_seed: int
    profile: str
    metal_family: str
    spectrum_id: str
    photon_count: float
    domain_tag: str
    image_size: int
    n_angles: int
    pixel_spacing: float
    n_detectors: int
    detector_spacing: float
    n_metal: Optional[int] = None


def synthesize_pair(task: PairTask) -> ArtifactPair:
    geometry = domain_geometry(task.image_size, task.n_angles, task.pixel_spacing,
                               task.n_detectors, task.detector_spacing)
    phantom = make_phantom(task.phantom_seed, task.profile, task.image_size,
                           n_metal=task.n_metal, metal_family=task.metal_family)
    spectrum = build_spectrum(task.spectrum_id, task.photon_count)
    return simulate_metal_artifact(phantom, spectrum, geometry, task.noise_seed, task.domain_tag)


def synthesize_pairs(tasks: Sequence[PairTask], workers: Optional[int] = None) -> List[ArtifactPair]:
    workers = workers or config.WORKERS
    if workers <= 1 or len(tasks) < 2:
        return [synthesize_pair(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(synthesize_pair, tasks, chunksize=4))


def domain_tasks(domain: DomainConfig, geometry: GeometryConfig, n: int, offset: int = 0) -> List[PairTask]:
    seed = domain.seed + offset
    return [
        PairTask(
            phantom_seed=seed + i,
            noise_seed=seed + NOISE_OFFSET + i,
            profile=domain.profiles[i % len(domain.profiles)],
            metal_family=domain.metal_family,
            spectrum_id=domain.spectrum_id,
            photon_count=domain.photon_count,
            domain_tag=domain.domain_tag,
            image_size=geometry.image_size,
            n_angles=geometry.n_angles,
            pixel_spacing=geometry.pixel_spacing,
            n_detectors=domain.n_detectors,
            detector_spacing=domain.detector_spacing,
        )
        for i in range(n)
    ]


def pair_arrays(pair: ArtifactPair) -> Dict[str, np.ndarray]:
    return {
        "artifact": pair.artifact_image,
        "clean": pair.clean_image,
        "li": pair.li_image,
        "metal": pair.metal_mask.astype(np.float32),
        "roi": pair.roi_mask.astype(np.float32),
    }


def domain_manifest(split: str, domain: DomainConfig, geometry: GeometryConfig, offset: int,
                    arrays: List[str], ids: List[str], config_hash: str) -> DatasetManifest:
    geo = domain_geometry(geometry.image_size, geometry.n_angles, geometry.pixel_spacing,
                          domain.n_detectors, domain.detector_spacing)
    return DatasetManifest(
        split=split,
        domain_tag=domain.domain_tag,
        spectrum_id=domain.spectrum_id,
        photon_count=domain.photon_count,
        geometry=geo.model_dump(),
        seeds={"phantom": domain.seed + offset, "noise": domain.seed + offset + NOISE_OFFSET},
        shape=[geometry.image_size, geometry.image_size],
        arrays=arrays,
        samples=ids,
        config_hash=config_hash,
    )


def write_domain_split(root: str, split: str, domain: DomainConfig, geometry: GeometryConfig, n: int,
                       offset: int, arrays: List[str], config_hash: str) -> List[ArtifactPair]:
    pairs = synthesize_pairs(domain_tasks(domain, geometry, n, offset))
    ids = [f"{split}-{i:05d}" for i in range(n)]
    samples = {sid: pair_arrays(p) for sid, p in zip(ids, pairs)}
    manifest = domain_manifest(split, domain, geometry, offset, arrays, ids, config_hash)
    write_split(os.path.join(root, split), manifest, samples)
    return pairs
