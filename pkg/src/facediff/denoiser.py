"""Transformer-encoder denoiser predicting the clean face representation.

Token layout for one sample with N frames::

    [timestep] [audio_1 .. audio_N] [identity] [face_1 .. face_N]

``face_i`` is the sum of the motion and pose projections of frame ``i``.
Every token gets a learned modality embedding plus a sinusoidal position;
audio and face blocks are numbered independently (identity is face
position 0). The first ``N + 1`` outputs are dropped and the remaining
``N + 1`` are projected back to ``3V + 3`` channels.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
from torch import nn

from .conditioning import mask_audio

MODALITIES = ("timestep", "audio", "identity", "motion_pose")


@dataclass(frozen=True)
class DenoiserConfig:
    num_vertices: int = 40
    audio_dim: int = 16
    max_frames: int = 64
    latent_dim: int = 128
    num_layers: int = 4
    num_heads: int = 4
    ff_mult: int = 2
    schedule_kind: str = "cosine"
    diffusion_steps: int = 500
    # model variant switches (ablations)
    learn_identity: bool = True
    learn_pose: bool = True
    masked_conditioning: bool = True

    def __post_init__(self):
        for name in ("num_vertices", "audio_dim", "max_frames", "latent_dim",
                     "num_layers", "num_heads", "ff_mult", "diffusion_steps"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if self.latent_dim % self.num_heads:
            raise ValueError("latent_dim must be divisible by num_heads")

    @property
    def state_dim(self) -> int:
        return 3 * self.num_vertices + 3

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown denoiser config keys: {sorted(unknown)}")
        return cls(**d)


PROFILES = {
    # desk-scale default
    "desk": dict(latent_dim=128, num_layers=4, num_heads=4),
    # single-core friendly; used by the end-to-end acceptance runs
    "small": dict(latent_dim=64, num_layers=2, num_heads=4),
    # for finite-difference gradient checks
    "micro": dict(latent_dim=8, num_layers=1, num_heads=1),
}


def make_config(profile: str = "desk", **overrides) -> DenoiserConfig:
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    return DenoiserConfig(**{**PROFILES[profile], **overrides})


def sinusoidal_table(length: int, dim: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    freq = torch.exp(-math.log(10000.0) * torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    table = torch.zeros(length, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * freq)
    table[:, 1::2] = torch.cos(pos * freq[: dim // 2])
    return table.float()


def timestep_features(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freq = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = t.to(torch.float64)[:, None] * freq[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class Standardizer(nn.Module):
    """Affine map between raw representation units and the diffused space.

    Identity is centred on the dataset mean and divided by one scalar;
    motion and pose are divided by their own scalars. Pad entries stay 0.
    """

    def __init__(self, num_vertices: int):
        super().__init__()
        self.register_buffer("identity_mean", torch.zeros(3 * num_vertices, dtype=torch.float64))
        self.register_buffer("scales", torch.ones(3, dtype=torch.float64))  # identity, motion, pose

    def fit(self, flat_reprs: np.ndarray) -> "Standardizer":
        """Fit on raw ``(B, N+1, 3V+3)`` representations."""
        x = np.asarray(flat_reprs, dtype=np.float64)
        d = self.identity_mean.shape[0]
        ident = x[:, 0, :d]
        mean = ident.mean(axis=0)
        spreads = [
            np.sqrt(np.mean((ident - mean) ** 2)),
            np.sqrt(np.mean(x[:, 1:, :d] ** 2)),
            np.sqrt(np.mean(x[:, 1:, d:] ** 2)),
        ]
        self.identity_mean.copy_(torch.from_numpy(mean))
        self.scales.copy_(torch.tensor([s if s > 1e-8 else 1.0 for s in spreads], dtype=torch.float64))
        return self

    def _affine(self, x: torch.Tensor):
        d = self.identity_mean.shape[0]
        shift = x.new_zeros(x.shape[-1])
        shift[:d] = self.identity_mean.to(x.dtype)
        id_scale = x.new_ones(x.shape[-1])
        id_scale[:d] = float(self.scales[0])
        row_scale = x.new_full((x.shape[-1],), float(self.scales[1]))
        row_scale[d:] = float(self.scales[2])
        return shift, id_scale, row_scale

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        shift, id_scale, row_scale = self._affine(x)
        return torch.cat([(x[..., :1, :] - shift) / id_scale, x[..., 1:, :] / row_scale], dim=-2)

    def denormalize(self, x: torch.Tensor) -> torch.Tensor:
        shift, id_scale, row_scale = self._affine(x)
        return torch.cat([x[..., :1, :] * id_scale + shift, x[..., 1:, :] * row_scale], dim=-2)

    @property
    def motion_scale(self) -> float:
        return float(self.scales[1])


class Denoiser(nn.Module):
    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        c, d = config.latent_dim, 3 * config.num_vertices
        self.identity_proj = nn.Linear(d, c)
        self.motion_proj = nn.Linear(d, c)
        self.pose_proj = nn.Linear(3, c)
        self.audio_proj = nn.Linear(config.audio_dim, c)
        self.time_proj = nn.Sequential(nn.Linear(c, c), nn.SiLU(), nn.Linear(c, c))
        self.modality = nn.Parameter(torch.randn(len(MODALITIES), c) * 0.02)
        self.null_audio = nn.Parameter(torch.randn(config.audio_dim))
        layer = nn.TransformerEncoderLayer(
            c, config.num_heads, config.ff_mult * c,
            dropout=0.0, activation="gelu", batch_first=True, norm_first=True,
        )
        self.encoder = nn.TransformerEncoder(
            layer, config.num_layers, norm=nn.LayerNorm(c), enable_nested_tensor=False
        )
        self.out_proj = nn.Linear(c, config.state_dim)
        nn.init.normal_(self.out_proj.weight, std=1e-3)
        nn.init.zeros_(self.out_proj.bias)
        self.register_buffer("positions", sinusoidal_table(config.max_frames + 1, c), persistent=False)
        self.standardizer = Standardizer(config.num_vertices)
        self.trained_steps = 0

    def forward(self, t, audio: torch.Tensor, x_t: torch.Tensor, audio_mask=None) -> torch.Tensor:
        """Predict ``X_0`` from ``X_t``.

        Args:
            t: diffusion step, int or ``(B,)`` integer tensor, in ``[1, T]``.
            audio: ``(N, Z_a)`` or ``(B, N, Z_a)`` features resampled to N frames.
            x_t: ``(N+1, 3V+3)`` or ``(B, N+1, 3V+3)`` noised state (standardised units).
            audio_mask: optional per-sample bools; True swaps in the null audio.

        Returns:
            Tensor shaped like ``x_t``.
        """
        cfg = self.config
        unbatched = x_t.ndim == 2
        if unbatched:
            x_t, audio = x_t[None], audio[None]
        b, rows, width = x_t.shape
        n = rows - 1
        if width != cfg.state_dim or audio.shape != (b, n, cfg.audio_dim):
            raise ValueError(
                f"expected x_t (B, N+1, {cfg.state_dim}) and audio (B, N, {cfg.audio_dim}); "
                f"got {tuple(x_t.shape)} and {tuple(audio.shape)}"
            )
        if n < 1 or n > cfg.max_frames:
            raise ValueError(f"frame count {n} outside [1, {cfg.max_frames}]")
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1).expand(b)
        if t.min() < 1 or t.max() > cfg.diffusion_steps:
            raise ValueError(f"diffusion step outside [1, {cfg.diffusion_steps}]")
        if audio_mask is not None:
            audio = mask_audio(audio, audio_mask, self)

        d = 3 * cfg.num_vertices
        pos, mod = self.positions.to(x_t.dtype), self.modality
        time_tok = self.time_proj(timestep_features(t, cfg.latent_dim).to(x_t.dtype))
        time_tok = (time_tok + mod[0] + pos[0])[:, None]
        audio_tok = self.audio_proj(audio) + mod[1] + pos[:n]
        id_tok = self.identity_proj(x_t[:, :1, :d]) + mod[2] + pos[0]
        face_tok = self.motion_proj(x_t[:, 1:, :d]) + self.pose_proj(x_t[:, 1:, d:]) + mod[3] + pos[1:n + 1]
        tokens = torch.cat([time_tok, audio_tok, id_tok, face_tok], dim=1)
        hidden = self.encoder(tokens)
        out = self.out_proj(hidden[:, n + 1:])
        return out[0] if unbatched else out


def init_params(config: DenoiserConfig, seed: int) -> Denoiser:
    """Build a denoiser with deterministic initial weights."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Denoiser(config)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def count_tokens(num_frames: int) -> int:
    return 2 * num_frames + 2
