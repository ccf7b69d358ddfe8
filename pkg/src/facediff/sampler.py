"""Reverse-diffusion sampling with guidance and per-component references.

Any subset of identity / pose / motion can be pinned to a reference. The
referenced slices of the predicted ``X_0`` are overwritten at every step,
and the referenced slices of ``X_{t-1}`` are replaced by the reference
noised to step ``t - 1``; the returned representation carries the raw
reference values bit for bit.

Each chain draws its noise from its own Philox stream keyed by its seed,
so chains are independent of batch composition.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import torch

from .conditioning import guided_predict
from .denoiser import Denoiser
from .diffusion import DiffusionSchedule, ddpm_step, make_schedule, q_sample
from .mesh_repr import FaceRepresentation


@dataclass(frozen=True)
class ReferenceSet:
    identity: Optional[np.ndarray] = None  # (3V,)
    pose: Optional[np.ndarray] = None  # (N, 3)
    motion: Optional[np.ndarray] = None  # (N, 3V)

    def validate(self, num_frames: int, num_vertices: int) -> None:
        expected = {
            "identity": (3 * num_vertices,),
            "pose": (num_frames, 3),
            "motion": (num_frames, 3 * num_vertices),
        }
        for name, shape in expected.items():
            ref = getattr(self, name)
            if ref is not None and np.shape(ref) != shape:
                raise ValueError(f"{name} reference has shape {np.shape(ref)}, expected {shape}")

    @property
    def names(self) -> List[str]:
        return [n for n in ("identity", "pose", "motion") if getattr(self, n) is not None]


def _reference_state(refs: ReferenceSet, n: int, d: int):
    """Raw reference values and a 0/1 mask in the ``(N+1, 3V+3)`` layout."""
    values = np.zeros((n + 1, d + 3))
    mask = np.zeros((n + 1, d + 3), dtype=bool)
    if refs.identity is not None:
        values[0, :d] = refs.identity
        mask[0, :] = True  # identity row incl. its pad
    if refs.motion is not None:
        values[1:, :d] = refs.motion
        mask[1:, :d] = True
    if refs.pose is not None:
        values[1:, d:] = refs.pose
        mask[1:, d:] = True
    return values, mask


def _noise_streams(seeds: Sequence[int]):
    return [np.random.Generator(np.random.Philox(key=int(s) & (2 ** 64 - 1))) for s in seeds]


def _draw(streams, shape, dtype) -> torch.Tensor:
    return torch.from_numpy(np.stack([g.standard_normal(shape) for g in streams])).to(dtype)


@torch.no_grad()
def sample_many(
    model: Denoiser,
    audio: np.ndarray,
    refs: Sequence[ReferenceSet],
    seeds: Sequence[int],
    s: float = 1.0,
    schedule: Optional[DiffusionSchedule] = None,
) -> List[FaceRepresentation]:
    """Run one chain per seed. ``audio`` is ``(B, N, Z_a)``; ``refs`` one per chain."""
    cfg = model.config
    schedule = schedule or make_schedule(cfg.schedule_kind, cfg.diffusion_steps)
    if schedule.T != cfg.diffusion_steps:
        raise ValueError("schedule length differs from the model config")
    if s != 1.0 and not cfg.masked_conditioning:
        raise ValueError("guidance scale s != 1 needs a model trained with masked conditioning")
    audio = np.asarray(audio, dtype=np.float64)
    b, n = audio.shape[:2]
    if len(refs) != b or len(seeds) != b:
        raise ValueError("need one reference set and one seed per audio track")
    if n > cfg.max_frames:
        raise ValueError(f"{n} frames exceeds max_frames={cfg.max_frames}")
    d = 3 * cfg.num_vertices
    for r in refs:
        r.validate(n, cfg.num_vertices)
        if not cfg.learn_identity and r.identity is None:
            raise ValueError("this model does not generate identity; pass an identity reference")
        if not cfg.learn_pose and r.pose is None:
            raise ValueError("this model does not generate pose; pass a pose reference")
    if model.trained_steps == 0:
        warnings.warn("sampling from an untrained denoiser", RuntimeWarning, stacklevel=2)

    model.eval()
    dtype = next(model.parameters()).dtype
    raw_ref, ref_mask = map(np.stack, zip(*(_reference_state(r, n, d) for r in refs)))
    ref_x0 = model.standardizer.normalize(torch.from_numpy(raw_ref)).to(dtype)
    keep = torch.from_numpy(ref_mask)
    pad = torch.zeros(n + 1, d + 3, dtype=torch.bool)
    pad[0, d:] = True
    streams = _noise_streams(seeds)
    audio_t = torch.from_numpy(audio).to(dtype)

    x = _draw(streams, (n + 1, d + 3), dtype)
    for t in range(schedule.T, 0, -1):
        # at s = 1 the guided prediction is exactly the conditioned one
        x_hat0 = model(t, audio_t, x) if s == 1.0 else guided_predict(model, t, audio_t, x, s)
        x_hat0 = torch.where(keep, ref_x0, x_hat0).masked_fill(pad, 0.0)
        x = ddpm_step(x_hat0, t, _draw(streams, (n + 1, d + 3), dtype), schedule)
        if t > 1:
            x = torch.where(keep, q_sample(ref_x0, t - 1, _draw(streams, (n + 1, d + 3), dtype), schedule), x)
        else:
            x = torch.where(keep, ref_x0, x)

    out = model.standardizer.denormalize(x.to(torch.float64)).numpy()
    out = np.where(ref_mask, raw_ref, out)
    out[:, 0, d:] = 0.0
    return [FaceRepresentation.unflatten(o) for o in out]


def sample(
    model: Denoiser,
    audio: np.ndarray,
    refs: ReferenceSet = ReferenceSet(),
    s: float = 1.0,
    schedule: Optional[DiffusionSchedule] = None,
    seed: int = 0,
) -> FaceRepresentation:
    """Generate one representation for ``(N, Z_a)`` frame-rate audio."""
    return sample_many(model, np.asarray(audio)[None], [refs], [seed], s, schedule)[0]


def sample_batch(
    model: Denoiser,
    audio: np.ndarray,
    refs: ReferenceSet,
    s: float,
    schedule: Optional[DiffusionSchedule],
    seeds: Sequence[int],
) -> List[FaceRepresentation]:
    """Several chains for the same audio and references, one per seed."""
    audio = np.asarray(audio)
    return sample_many(model, np.repeat(audio[None], len(seeds), axis=0), [refs] * len(seeds), seeds, s, schedule)
