"""Soft Dice loss, cosine schedule and the training loop."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .augment import AugmentParams, augment
from .checkpoint import Checkpoint, save_checkpoint
from .config import ModelConfig, TrainConfig
from .data import Subject, crop_to_brain_bbox, group_modalities, normalize_subject, random_crop, \
    targets_from_label
from .errors import ArgumentError, ConfigError, NumericalError, ShapeError
from .metrics import evaluate
from .model import build
from .utils import deterministic, env_deterministic

log = logging.getLogger(__name__)


def dice_loss(logits: torch.Tensor, targets: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Mean over region channels of 1 - (2 sum(pg) + eps) / (sum p + sum g + eps)."""
    if logits.shape != targets.shape:
        raise ShapeError(f"logits {tuple(logits.shape)} vs targets {tuple(targets.shape)}")
    if logits.dim() < 2 or logits.shape[1] != 3:
        raise ShapeError(f"expected 3 region channels, got {tuple(logits.shape)}")
    p = torch.sigmoid(logits)
    g = targets.to(p.dtype)
    dims = [0] + list(range(2, logits.dim()))
    inter = (p * g).sum(dims)
    denom = p.sum(dims) + g.sum(dims)
    return (1 - (2 * inter + eps) / (denom + eps)).mean()


def cosine_lr(step: int, total_steps: int, cfg: TrainConfig) -> float:
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise ArgumentError(f"step {step} outside [0, {total_steps}]")
    return cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (1 + math.cos(math.pi * step / total_steps))


def training_sample(subject: Subject, crop: int, rng: np.random.Generator, aug: Optional[AugmentParams],
                    scheme) -> Tuple[np.ndarray, np.ndarray]:
    """bbox crop -> z-score -> random crop -> augment -> grouped (x, region targets)."""
    if subject.label is None:
        raise ArgumentError(f"training subject {subject.id} has no label")
    cropped, _ = crop_to_brain_bbox(subject)
    s = random_crop(normalize_subject(cropped), crop, rng)
    if aug is not None:
        s = augment(s, rng, aug)
    return group_modalities(s, scheme).tensor, targets_from_label(s.label)


@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    history: List[dict] = field(default_factory=list)
    step_losses: List[float] = field(default_factory=list)


def _rng_state(rng: np.random.Generator) -> dict:
    return {"numpy": rng.bit_generator.state, "torch": torch.get_rng_state()}


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, subjects: Sequence[Subject],
          val_subjects: Optional[Sequence[Subject]] = None, out_dir=None, resume: Optional[Checkpoint] = None,
          deterministic_mode: Optional[bool] = None, stop_after_epoch: Optional[int] = None,
          callback: Optional[Callable[[dict], None]] = None, dtype=torch.float32) -> TrainResult:
    """Train from scratch or resume; keeps the checkpoint with best mean validation Dice.

    Without ``val_subjects`` the last epoch is the best one. ``stop_after_epoch``
    ends the run early without changing the schedule (used to test resuming).
    """
    subjects = list(subjects)
    if not subjects:
        raise ArgumentError("empty training set")
    if deterministic_mode is None:
        deterministic_mode = env_deterministic()
    if resume is not None and resume.fingerprint != model_cfg.fingerprint():
        raise ConfigError("resume checkpoint architecture differs from model config")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    with deterministic(deterministic_mode):
        model = build(model_cfg, dtype)
        optim = torch.optim.Adam(model.parameters(), lr=train_cfg.base_lr)
        rng = np.random.default_rng(train_cfg.seed)
        steps_per_epoch = math.ceil(len(subjects) / train_cfg.batch_size)
        total = train_cfg.epochs * steps_per_epoch
        if train_cfg.max_steps is not None:
            total = min(total, train_cfg.max_steps)
        aug = AugmentParams() if train_cfg.augment else None

        start_epoch, step = 1, 0
        best_val, best_ckpt = -1.0, None
        if resume is not None:
            model.load_state_dict(resume.model_state)
            optim.load_state_dict(resume.optimizer_state)
            rng.bit_generator.state = resume.rng_state["numpy"]
            torch.set_rng_state(resume.rng_state["torch"])
            start_epoch, step = resume.epoch + 1, resume.step
            best_val = resume.metrics.get("best_val_dice", -1.0)

        def snapshot(epoch: int, metrics: dict) -> Checkpoint:
            return Checkpoint(copy.deepcopy(model.state_dict()), copy.deepcopy(optim.state_dict()), epoch, step,
                              model_cfg, train_cfg, copy.deepcopy(_rng_state(rng)), dict(metrics))

        history, step_losses = [], []
        last = None
        log_path = out / "log.jsonl" if out is not None else None
        if log_path is not None and resume is None:
            log_path.write_text("")
        for epoch in range(start_epoch, train_cfg.epochs + 1):
            if step >= total:
                break
            model.train()
            order = rng.permutation(len(subjects))
            epoch_losses = []
            for b in range(steps_per_epoch):
                if step >= total:
                    break
                batch = [subjects[i] for i in order[b * train_cfg.batch_size:(b + 1) * train_cfg.batch_size]]
                samples = [training_sample(s, train_cfg.crop_size, rng, aug, model_cfg.grouping) for s in batch]
                x = torch.from_numpy(np.stack([s[0] for s in samples])).to(dtype)
                y = torch.from_numpy(np.stack([s[1] for s in samples])).to(dtype)
                lr = cosine_lr(step, total, train_cfg)
                for group in optim.param_groups:
                    group["lr"] = lr
                optim.zero_grad()
                loss = dice_loss(model(x), y, train_cfg.dice_eps)
                if not torch.isfinite(loss):
                    raise NumericalError(f"non-finite loss at epoch {epoch}, step {step}")
                loss.backward()
                optim.step()
                step += 1
                epoch_losses.append(float(loss.detach()))
            step_losses.extend(epoch_losses)

            val_dice = None
            last_epoch = epoch == train_cfg.epochs or step >= total
            if val_subjects and (epoch % train_cfg.val_every == 0 or last_epoch):
                model.eval()
                report = evaluate(model, val_subjects, model_cfg.crop_size, train_cfg.overlap, train_cfg.blend,
                                  model_cfg.grouping)
                val_dice = report.mean_dice
            record = {"epoch": epoch, "step": step, "loss": float(np.mean(epoch_losses)), "lr": lr,
                      "val_dice": val_dice}
            history.append(record)
            log.info("epoch %d step %d loss %.4f lr %.2e val_dice %s", epoch, step, record["loss"], lr, val_dice)
            if log_path is not None:
                with open(log_path, "a") as fh:
                    fh.write(json.dumps(record) + "\n")
            if callback is not None:
                callback(record)

            improved = val_dice is not None and val_dice > best_val
            if improved:
                best_val = val_dice
            metrics = {"loss": record["loss"], "val_dice": val_dice, "best_val_dice": best_val}
            last = snapshot(epoch, metrics)
            if improved or (not val_subjects and last_epoch):
                best_ckpt = last
                if out is not None:
                    save_checkpoint(best_ckpt, out / "best.ckpt")
            if out is not None:
                save_checkpoint(last, out / "last.ckpt")
            if stop_after_epoch is not None and epoch >= stop_after_epoch:
                break

        if last is None:
            raise ArgumentError("nothing to train: schedule already complete")
        if best_ckpt is None:
            best_ckpt = last
            if out is not None:
                save_checkpoint(best_ckpt, out / "best.ckpt")
    return TrainResult(best_ckpt, last, history, step_losses)


def model_from_checkpoint(ckpt: Checkpoint, dtype=torch.float32):
    model = build(ckpt.model_cfg, dtype)
    model.load_state_dict(ckpt.model_state)
    model.eval()
    return model
