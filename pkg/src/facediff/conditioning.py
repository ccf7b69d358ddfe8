"""Audio features: temporal resampling, null-condition masking and guidance."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class AudioFeatureSequence:
    features: np.ndarray  # (N_a, Z_a)
    feature_rate: int

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim != 2 or f.shape[0] < 1 or f.shape[1] < 1:
            raise ValueError(f"audio features must be a non-empty (N_a, Z_a) array, got {f.shape}")
        if not np.all(np.isfinite(f)):
            raise ValueError("audio features contain non-finite values")
        if int(self.feature_rate) < 1:
            raise ValueError(f"feature_rate must be positive, got {self.feature_rate}")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "feature_rate", int(self.feature_rate))

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def duration(self) -> float:
        return self.num_frames / self.feature_rate


@dataclass(frozen=True)
class MaskPlan:
    mask_prob: float = 0.10
    mode: str = "whole_sequence"

    def __post_init__(self):
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ValueError(f"mask_prob must lie in [0, 1], got {self.mask_prob}")
        if self.mode != "whole_sequence":
            raise ValueError(f"unsupported mask mode {self.mode!r}")

    def draw(self, rng: np.random.Generator, batch_size: int) -> np.ndarray:
        """One masking decision per sample; True replaces the whole track."""
        return rng.random(batch_size) < self.mask_prob


def resample_audio(audio: AudioFeatureSequence, n_frames: int, fps: int) -> np.ndarray:
    """Linearly interpolate features at mesh-frame timestamps ``i / fps``.

    Times past either end of the audio clamp to the boundary frame.
    """
    if n_frames < 1 or fps < 1:
        raise ValueError("n_frames and fps must be positive")
    src_t = np.arange(audio.num_frames) / audio.feature_rate
    dst_t = np.arange(n_frames) / fps
    out = np.empty((n_frames, audio.dim))
    for c in range(audio.dim):
        out[:, c] = np.interp(dst_t, src_t, audio.features[:, c])
    return out


def mask_audio(audio: torch.Tensor, masked, model) -> torch.Tensor:
    """Replace masked tracks by the model's learned null-audio vector.

    ``audio`` is ``(N, Z_a)`` or ``(B, N, Z_a)``; ``masked`` is a bool or a
    per-sample bool vector.
    """
    null = model.null_audio.to(audio.dtype)
    if isinstance(masked, (bool, np.bool_)):
        return null.expand_as(audio).clone() if masked else audio
    m = torch.as_tensor(np.asarray(masked, dtype=bool) if not torch.is_tensor(masked) else masked)
    if not m.any():
        return audio
    shape = (-1,) + (1,) * (audio.ndim - 1)
    return torch.where(m.view(shape), null.expand_as(audio), audio)


def guided_predict(model, t, audio: torch.Tensor, x_t: torch.Tensor, s: float) -> torch.Tensor:
    """Interpolate between the masked and the audio-conditioned prediction.

    ``G(m(a)) + s * (G(a) - G(m(a)))``, evaluated as ``(1 - s) G(m(a)) + s G(a)``
    so that ``s = 0`` and ``s = 1`` return the endpoint predictions exactly.
    """
    masked = model(t, mask_audio(audio, True, model), x_t)
    cond = model(t, audio, x_t)
    return (1.0 - s) * masked + s * cond
