import os
import logging
from collections import Counter
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from tqdm import tqdm

from config import CQANetConfig, CQATrainConfig, config
from cqa import MemoryBank, bank_push, cqa_loss, dqaug_mixup, dqaug_moderate, score_images
from ctphys import ArtifactPair
from dataset import ArraySplit, random_flip_rotate
from errors import InvalidArgument
from metrics import plcc, srcc
from models import CQAEpochLog
from networks import CQANet, MARNet, load_checkpoint, restore_rng, save_checkpoint

logger = logging.getLogger(__name__)


class CQATrainer:
    """
    Trains a CQANet on oracle-annotated images. DQAug runs on the fly: with
    probability p_moderate an image is replaced by an under-trained MAR output
    of its source pair, and with probability p_mixup it is blended with another
    image of the batch. Both are counted in `aug_counts`.
    """

    def __init__(self, net_config: CQANetConfig, train_config: CQATrainConfig, thresholds: Sequence[float],
                 undertrained_mar: Optional[MARNet] = None, device: Optional[str] = None):
        self.cfg = train_config
        self.thresholds = list(thresholds)
        self.device = torch.device(device or config.DEVICE)
        torch.manual_seed(train_config.seed)
        self.rng = np.random.default_rng(train_config.seed)
        self.net = CQANet(net_config).to(self.device)
        self.optimizer = torch.optim.Adam(self.net.parameters(), lr=train_config.lr, betas=tuple(train_config.betas))
        self.scheduler = torch.optim.lr_scheduler.StepLR(self.optimizer, step_size=train_config.lr_step,
                                                         gamma=train_config.lr_gamma)
        self.bank = MemoryBank(train_config.bank_capacity, train_config.tau)
        self.undertrained_mar = undertrained_mar.eval() if undertrained_mar is not None else None
        self.aug_counts: Counter = Counter()
        self._pair_index: Dict[str, int] = {}
        self.log: List[CQAEpochLog] = []
        self.epoch = 0

    # -- DQAug ----------------------------------------------------------
    def _moderate(self, pairs: ArraySplit, pair_id: Optional[str]):
        if pair_id is None or pair_id not in self._pair_index:
            return None
        i = self._pair_index[pair_id]
        pair = ArtifactPair(
            artifact_image=pairs.data["artifact"][i, 0].numpy(),
            clean_image=pairs.data["clean"][i, 0].numpy(),
            metal_mask=pairs.data["metal"][i, 0].numpy() > 0.5,
            roi_mask=pairs.data["roi"][i, 0].numpy() > 0.5,
            li_image=pairs.data["li"][i, 0].numpy() if "li" in pairs.data else None,
        )
        self.aug_counts["moderate"] += 1
        return dqaug_moderate(pair, self.undertrained_mar, self.thresholds)

    def augment(self, images: torch.Tensor, labels: torch.Tensor, ids: Sequence[str],
                train: ArraySplit, pairs: Optional[ArraySplit]):
        images, labels = images.clone(), labels.clone()
        if self.cfg.dqaug_moderate and self.undertrained_mar is not None and pairs is not None:
            for j, sid in enumerate(ids):
                if self.rng.random() >= self.cfg.p_moderate:
                    continue
                record = train.annotations.get(sid)
                result = self._moderate(pairs, record.pair_id if record else None)
                if result is not None:
                    images[j, 0] = torch.from_numpy(result[0])
                    labels[j] = int(result[1])
        if self.cfg.dqaug_mixup and len(ids) > 1:
            for j in range(len(ids)):
                if self.rng.random() >= self.cfg.p_mixup:
                    continue
                k = (j + 1 + int(self.rng.integers(len(ids) - 1))) % len(ids)
                image, label = dqaug_mixup((images[j], int(labels[j])), (images[k], int(labels[k])),
                                           rng=self.rng, alpha=self.cfg.mixup_alpha)
                images[j], labels[j] = image, int(label)
                self.aug_counts["mixup"] += 1
        return images, labels

    # -- training -------------------------------------------------------
    def train_epoch(self, train: ArraySplit, pairs: Optional[ArraySplit] = None) -> Dict[str, float]:
        self.net.train()
        images_all = train.data["image"]
        labels_all = torch.tensor([train.annotations[sid].quality for sid in train.ids], dtype=torch.long)
        order = self.rng.permutation(len(train))
        totals = Counter()
        n_batches = 0
        for start in tqdm(range(0, len(order), self.cfg.batch_size), desc=f"cqa {self.epoch + 1}",
                          disable=not config.PROGRESS, leave=False):
            idx = order[start:start + self.cfg.batch_size]
            ids = [train.ids[i] for i in idx]
            index = torch.from_numpy(idx)
            images, labels = self.augment(images_all[index], labels_all[index], ids, train, pairs)
            if self.cfg.flip_rotate:
                images = random_flip_rotate({"image": images}, self.rng)["image"]
            images, labels = images.to(self.device), labels.to(self.device)

            prob, latent = self.net(images)
            loss = cqa_loss(prob, latent, labels, self.bank, self.cfg.lambda_scl, self.cfg.use_scl)
            self.optimizer.zero_grad()
            loss.total.backward()
            self.optimizer.step()
            if self.cfg.use_scl:
                bank_push(self.bank, latent, labels)

            totals["ce"] += loss.ce.item()
            totals["scl"] += loss.scl.item()
            totals["loss"] += loss.total.item()
            n_batches += 1
        self.scheduler.step()
        return {k: v / max(n_batches, 1) for k, v in totals.items()}

    def validate(self, val: ArraySplit) -> Dict[str, float]:
        if val is None or len(val) < 2:
            return {"srcc": float("nan"), "plcc": float("nan")}
        scores = score_images(self.net, val.data["image"], self.cfg.batch_size).numpy()
        truth = [val.annotations[sid].quality for sid in val.ids]
        return {"srcc": srcc(scores, truth), "plcc": plcc(scores, truth)}

    def fit(self, train: ArraySplit, pairs: Optional[ArraySplit] = None, val: Optional[ArraySplit] = None,
            epochs: Optional[int] = None, checkpoint_path: Optional[str] = None,
            config_hash: str = "") -> List[CQAEpochLog]:
        if len(train) == 0:
            raise InvalidArgument("CQA training needs a non-empty annotated split")
        missing = [sid for sid in train.ids if sid not in train.annotations]
        if missing:
            raise InvalidArgument(f"{len(missing)} training images have no annotation (first: {missing[0]})")
        self._pair_index = {sid: i for i, sid in enumerate(pairs.ids)} if pairs is not None else {}

        epochs = epochs or self.cfg.epochs
        while self.epoch < epochs:
            losses = self.train_epoch(train, pairs)
            self.epoch += 1
            entry = CQAEpochLog(epoch=self.epoch, ce=losses.get("ce", 0.0), scl=losses.get("scl", 0.0),
                                loss=losses.get("loss", 0.0), **self.validate(val))
            self.log.append(entry)
            logger.info(f"CQA epoch {entry.epoch}/{epochs}: loss={entry.loss:.4f} ce={entry.ce:.4f} "
                        f"scl={entry.scl:.4f} srcc={entry.srcc:.3f} plcc={entry.plcc:.3f} "
                        f"aug={dict(self.aug_counts)}")
            if checkpoint_path:
                self.save(checkpoint_path, config_hash)
        return self.log

    # -- checkpoints ----------------------------------------------------
    def save(self, path: str, config_hash: str = "") -> None:
        extra = dict(self.bank.state_dict())
        extra["aug_counts"] = torch.tensor([self.aug_counts["moderate"], self.aug_counts["mixup"]])
        save_checkpoint(path, self.net, optimizer=self.optimizer, scheduler=self.scheduler, epoch=self.epoch,
                        np_rng=self.rng, stats=[e.model_dump() for e in self.log],
                        config_hash=config_hash, extra=extra)

    def resume(self, path: str) -> None:
        if not os.path.isfile(path):
            raise InvalidArgument(f"nothing to resume: {path} does not exist")
        ckpt = load_checkpoint(path)
        self.net.load_state_dict(ckpt.model_state)
        if ckpt.optimizer_state:
            self.optimizer.load_state_dict(ckpt.optimizer_state)
        if ckpt.scheduler_state:
            self.scheduler.load_state_dict(ckpt.scheduler_state)
        self.bank.load_state_dict(ckpt.extra)
        counts = ckpt.extra.get("aug_counts")
        if counts is not None:
            self.aug_counts = Counter({"moderate": int(counts[0]), "mixup": int(counts[1])})
        restore_rng(ckpt, self.rng)
        self.log = [CQAEpochLog(**e) for e in ckpt.meta.get("stats", [])]
        self.epoch = ckpt.epoch
        logger.info(f"Resumed CQA training from {path} at epoch {self.epoch}")


def train_cqa(train: ArraySplit, net_config: CQANetConfig, train_config: CQATrainConfig,
              thresholds: Sequence[float], pairs: Optional[ArraySplit] = None, val: Optional[ArraySplit] = None,
              undertrained_mar: Optional[MARNet] = None, checkpoint_path: Optional[str] = None,
              resume: bool = False, config_hash: str = ""):
    """Returns the trained CQANet and its per-epoch log"""
    trainer = CQATrainer(net_config, train_config, thresholds, undertrained_mar)
    if resume and checkpoint_path:
        trainer.resume(checkpoint_path)
    log = trainer.fit(train, pairs, val, checkpoint_path=checkpoint_path, config_hash=config_hash)
    return trainer.net, log, trainer
