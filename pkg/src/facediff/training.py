"""Losses and the diffusion training loop.

All losses take batched torch tensors ``(B, ...)`` (unbatched inputs work
too) and average over the batch. The face, lip and pose terms are computed
in the denoiser's standardised space; the sync term is evaluated on motion
mapped back to millimetres, the units the sync expert was trained on.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .conditioning import MaskPlan
from .denoiser import Denoiser
from .diffusion import DiffusionSchedule, make_schedule, q_sample
from .mesh_repr import FaceRepresentation
from .sync_expert import SyncExpert, sync_loss

log = logging.getLogger(__name__)

LOSS_NAMES = ("face", "sync", "lip", "pose")


@dataclass(frozen=True)
class LossWeights:
    face: float = 1.0
    sync: float = 0.1
    lip: float = 1.0
    pose: float = 1.0

    def __post_init__(self):
        for name in LOSS_NAMES:
            w = getattr(self, name)
            if not (math.isfinite(w) and w >= 0):
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {w}")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-4
    seed: int = 0
    mask_prob: float = 0.10
    k: int = 32  # frames averaged into the identity
    sync_segments: int = 2
    log_every: int = 100

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1 or self.k < 1 or self.sync_segments < 1:
            raise ValueError("steps, batch_size, k and sync_segments must be positive")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        MaskPlan(self.mask_prob)


def loss_mask(shape, learn_identity: bool = True, learn_pose: bool = True) -> torch.Tensor:
    """1 where an entry of the ``(N+1, 3V+3)`` layout carries a training target."""
    rows, width = shape[-2:]
    m = torch.ones(rows, width)
    m[0, width - 3:] = 0.0  # identity pad
    if not learn_identity:
        m[0] = 0.0
    if not learn_pose:
        m[1:, width - 3:] = 0.0
    return m


def face_loss(x0: torch.Tensor, x_hat0: torch.Tensor, learn_identity: bool = True, learn_pose: bool = True) -> torch.Tensor:
    """MSE over the representation, skipping the identity pad (and ablated parts)."""
    if x0.shape != x_hat0.shape:
        raise ValueError(f"shape mismatch {tuple(x0.shape)} vs {tuple(x_hat0.shape)}")
    m = loss_mask(x0.shape, learn_identity, learn_pose).to(x0.dtype)
    sq = (x0 - x_hat0) ** 2 * m
    return sq.sum() / m.expand_as(sq).sum()


def lip_loss(motion: torch.Tensor, pred_motion: torch.Tensor, lip_mask: np.ndarray) -> torch.Tensor:
    """MSE over lip-vertex coordinates of ``(..., N, 3V)`` motion."""
    if motion.shape != pred_motion.shape:
        raise ValueError("shape mismatch")
    cols = np.flatnonzero(np.repeat(np.asarray(lip_mask, bool), 3))
    if cols.size == 0:
        raise ValueError("empty lip mask")
    idx = torch.from_numpy(cols)
    return ((motion - pred_motion).index_select(-1, idx) ** 2).mean()


def pose_loss(pose: torch.Tensor, pred_pose: torch.Tensor) -> torch.Tensor:
    """MSE between first-order temporal differences."""
    if pose.shape != pred_pose.shape:
        raise ValueError("shape mismatch")
    if pose.shape[-2] < 2:
        raise ValueError("pose loss needs at least two frames")
    d_true = pose[..., 1:, :] - pose[..., :-1, :]
    d_pred = pred_pose[..., 1:, :] - pred_pose[..., :-1, :]
    return ((d_true - d_pred) ** 2).mean()


def total_loss(components: Dict[str, torch.Tensor], weights: LossWeights) -> torch.Tensor:
    total = 0.0
    for name in LOSS_NAMES:
        value = components.get(name)
        if value is None:
            continue
        if not torch.isfinite(torch.as_tensor(value)).all():
            raise FloatingPointError(f"non-finite {name} loss: {value}")
        total = total + getattr(weights, name) * value
    return torch.as_tensor(total) if not torch.is_tensor(total) else total


class TrainingSet:
    """Flattened representations and frame-rate audio stacked as tensors.

    Args:
        reps: one ``FaceRepresentation`` per utterance, all with the same N.
        audio: matching ``(N, Z_a)`` tracks already resampled to mesh frames.
    """

    def __init__(self, reps: Sequence[FaceRepresentation], audio: Sequence[np.ndarray], dtype=torch.float32):
        if len(reps) != len(audio) or not reps:
            raise ValueError("need one audio track per representation")
        self.raw = np.stack([r.flatten() for r in reps])
        self.audio = torch.as_tensor(np.stack(audio), dtype=dtype)
        if self.audio.shape[1] != self.raw.shape[1] - 1:
            raise ValueError("audio and representation frame counts differ")
        self.dtype = dtype
        self.x0: Optional[torch.Tensor] = None

    def __len__(self) -> int:
        return self.raw.shape[0]

    def standardize(self, model: Denoiser) -> torch.Tensor:
        self.x0 = model.standardizer.normalize(torch.from_numpy(self.raw)).to(self.dtype)
        return self.x0


def _split(x: torch.Tensor, d: int):
    return x[..., 1:, :d], x[..., 1:, d:]


def compute_losses(
    model: Denoiser,
    x0: torch.Tensor,
    audio: torch.Tensor,
    t,
    noise: torch.Tensor,
    masked,
    schedule: DiffusionSchedule,
    lip_mask: np.ndarray,
    expert: Optional[SyncExpert] = None,
    weights: LossWeights = LossWeights(),
    sync_segments: int = 2,
    sync_rng: np.random.Generator | int = 0,
) -> Dict[str, torch.Tensor]:
    """Noise ``x0`` (standardised, ``(B, N+1, 3V+3)``) to step ``t``, denoise, score.

    Ablated components (``learn_identity`` / ``learn_pose`` off) are fed
    clean at the input and dropped from every target.
    """
    cfg = model.config
    d = 3 * cfg.num_vertices
    x_t = q_sample(x0, t, noise, schedule)
    if not cfg.learn_identity:
        x_t = torch.cat([x0[:, :1], x_t[:, 1:]], dim=1)
    if not cfg.learn_pose:
        x_t = torch.cat([x_t[..., :d], torch.cat([x_t[:, :1, d:], x0[:, 1:, d:]], dim=1)], dim=-1)
    pred = model(t, audio, x_t, audio_mask=masked)

    motion, pose = _split(x0, d)
    pred_motion, pred_pose = _split(pred, d)
    out = {"face": face_loss(x0, pred, cfg.learn_identity, cfg.learn_pose)}
    out["lip"] = lip_loss(motion, pred_motion, lip_mask)
    out["pose"] = pose_loss(pose, pred_pose) if cfg.learn_pose else pred.new_zeros(())
    if expert is not None and weights.sync > 0:
        mm = pred_motion * model.standardizer.motion_scale
        out["sync"] = sync_loss(mm, audio, lip_mask, expert, sync_segments, sync_rng)
    else:
        out["sync"] = pred.new_zeros(())
    out["total"] = total_loss(out, weights)
    return out


class Trainer:
    """Single-writer training loop with a seeded numpy stream for all randomness."""

    def __init__(
        self,
        model: Denoiser,
        data: TrainingSet,
        lip_mask: np.ndarray,
        expert: Optional[SyncExpert] = None,
        config: TrainConfig = TrainConfig(),
        weights: LossWeights = LossWeights(),
        schedule: Optional[DiffusionSchedule] = None,
        log_path: Optional[Path] = None,
    ):
        self.model = model
        self.data = data
        self.lip_mask = np.asarray(lip_mask, bool)
        self.expert = expert
        self.config = config
        self.weights = weights
        self.schedule = schedule or make_schedule(model.config.schedule_kind, model.config.diffusion_steps)
        if self.schedule.T != model.config.diffusion_steps:
            raise ValueError("schedule length differs from the model config")
        if expert is not None:
            expert.freeze()
        mask_prob = config.mask_prob if model.config.masked_conditioning else 0.0
        self.mask_plan = MaskPlan(mask_prob)
        self.rng = np.random.default_rng(config.seed)
        self.optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
        self.step = 0
        self.history: List[Dict[str, float]] = []
        self.log_path = Path(log_path) if log_path else None
        if self.log_path and not self.log_path.exists():
            with self.log_path.open("w", newline="") as fh:
                csv.writer(fh).writerow(["step", "L_face", "L_sync", "L_lip", "L_pose", "total"])
        if data.x0 is None:
            data.standardize(model)

    def sample_batch(self):
        idx = self.rng.choice(len(self.data), size=min(self.config.batch_size, len(self.data)), replace=False)
        return torch.from_numpy(np.sort(idx))

    def train_step(self) -> Dict[str, float]:
        rng = self.rng
        idx = self.sample_batch()
        x0, audio = self.data.x0[idx], self.data.audio[idx]
        b = x0.shape[0]
        t = torch.from_numpy(rng.integers(1, self.schedule.T + 1, size=b))
        noise = torch.from_numpy(rng.standard_normal(tuple(x0.shape))).to(x0.dtype)
        masked = self.mask_plan.draw(rng, b)
        losses = compute_losses(
            self.model, x0, audio, t, noise, masked, self.schedule, self.lip_mask,
            self.expert, self.weights, self.config.sync_segments, rng,
        )
        if not torch.isfinite(losses["total"]):
            raise FloatingPointError(
                f"non-finite loss at step {self.step}: "
                + ", ".join(f"{k}={float(v):.4g}" for k, v in losses.items())
                + f"; t={t.tolist()}"
            )
        self.optimizer.zero_grad()
        losses["total"].backward()
        self.optimizer.step()
        self.step += 1
        self.model.trained_steps += 1
        record = {"step": self.step, **{k: float(v.detach()) for k, v in losses.items()}}
        self.history.append(record)
        return record

    def run(self, steps: Optional[int] = None) -> List[Dict[str, float]]:
        steps = self.config.steps if steps is None else steps
        self.model.train()
        rows = []
        for _ in range(steps):
            rec = self.train_step()
            if self.log_path:
                rows.append([rec["step"]] + [f"{rec[k]:.6g}" for k in (*LOSS_NAMES, "total")])
            if self.config.log_every and rec["step"] % self.config.log_every == 0:
                log.info("step %d total %.4f face %.4f lip %.4f pose %.4f sync %.4f", rec["step"],
                         rec["total"], rec["face"], rec["lip"], rec["pose"], rec["sync"])
                self._flush(rows)
        self._flush(rows)
        self.model.eval()
        return self.history[-steps:]

    def _flush(self, rows: list) -> None:
        if self.log_path and rows:
            with self.log_path.open("a", newline="") as fh:
                csv.writer(fh).writerows(rows)
            rows.clear()


def train_config_dict(config: TrainConfig, weights: LossWeights) -> dict:
    return {"train": asdict(config), "weights": asdict(weights)}
