import os

import numpy as np
import pytest
import torch

from config import CQANetConfig, MARConfig
from ctphys import ScanGeometry, build_spectrum
from dataset import ArraySplit, write_split
from models import AnnotationRecord, DatasetManifest


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: 128x128 / 180-view physics and longer training checks")


@pytest.fixture
def geometry64():
    return ScanGeometry(n_angles=90, n_detectors=96, detector_spacing=1.0, image_size=64)


@pytest.fixture
def spectrum_a():
    return build_spectrum("spec-a", 1e6)


@pytest.fixture
def tiny_mar_config():
    return MARConfig(depth=3, base_width=8)


@pytest.fixture
def tiny_cqa_config():
    return CQANetConfig(image_size=32, embed_dims=[8, 16, 32], num_heads=[1, 2, 4], window_size=4,
                        head_hidden=32, blocks_per_scale=1)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture
def make_split(tmp_path):
    """Writes arrays (name -> (N, H, W)) as a split directory and loads it back"""
    def _make(name, arrays, domain_tag="simulated", annotations=None, pair_ids=None):
        first = next(iter(arrays.values()))
        n, h, w = first.shape
        ids = [f"{name}-{i:05d}" for i in range(n)]
        manifest = DatasetManifest(
            split=name, domain_tag=domain_tag, spectrum_id="spec-a", geometry={"image_size": h},
            seeds={"phantom": 0}, shape=[h, w], arrays=list(arrays), samples=ids, config_hash="test",
        )
        samples = {sid: {k: v[i] for k, v in arrays.items()} for i, sid in enumerate(ids)}
        records = None
        if annotations is not None:
            pairs = pair_ids or [None] * n
            records = [AnnotationRecord(id=sid, quality=int(q), provenance="oracle-paired", pair_id=pid)
                       for sid, q, pid in zip(ids, annotations, pairs)]
        split_dir = os.path.join(tmp_path, name)
        write_split(split_dir, manifest, samples, records)
        return ArraySplit(split_dir)
    return _make
