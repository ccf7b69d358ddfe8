"""Contrastive audio / lip-motion sync scorer.

Two small MLP encoders embed a length-``n`` lip-motion segment and the
matching audio segment onto the unit sphere. The sync distance is
``1 - cos``; training treats ``(cos + 1) / 2`` as the in-sync probability.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.stats import rankdata
from torch import nn

EPS = 1e-6


@dataclass(frozen=True)
class SyncExpertConfig:
    num_lip_vertices: int
    audio_dim: int
    segment_length: int = 5
    embed_dim: int = 64
    hidden_dim: int = 128

    def to_dict(self) -> dict:
        return asdict(self)


def _mlp(inp: int, hidden: int, out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(inp, hidden), nn.GELU(), nn.Linear(hidden, hidden), nn.GELU(), nn.Linear(hidden, out))


class SyncExpert(nn.Module):
    def __init__(self, config: SyncExpertConfig):
        super().__init__()
        self.config = config
        n = config.segment_length
        self.lip_encoder = _mlp(n * 3 * config.num_lip_vertices, config.hidden_dim, config.embed_dim)
        self.audio_encoder = _mlp(n * config.audio_dim, config.hidden_dim, config.embed_dim)
        # input scales, set from the training data
        self.register_buffer("lip_scale", torch.ones((), dtype=torch.float64))
        self.register_buffer("audio_scale", torch.ones((), dtype=torch.float64))
        self.register_buffer("frozen", torch.zeros((), dtype=torch.uint8))

    def embed_lip(self, lip: torch.Tensor) -> torch.Tensor:
        """``(B, n, 3 V_lip)`` -> unit ``(B, E)``."""
        z = self.lip_encoder(lip.flatten(1) / self.lip_scale.to(lip.dtype))
        return F.normalize(z, dim=-1, eps=1e-12)

    def embed_audio(self, audio: torch.Tensor) -> torch.Tensor:
        z = self.audio_encoder(audio.flatten(1) / self.audio_scale.to(audio.dtype))
        return F.normalize(z, dim=-1, eps=1e-12)

    def cosine(self, lip: torch.Tensor, audio: torch.Tensor) -> torch.Tensor:
        return (self.embed_lip(lip) * self.embed_audio(audio)).sum(-1)

    def distance(self, lip: torch.Tensor, audio: torch.Tensor) -> torch.Tensor:
        return 1.0 - self.cosine(lip, audio)

    def freeze(self) -> "SyncExpert":
        self.requires_grad_(False)
        self.frozen.fill_(1)
        return self.eval()

    @property
    def is_frozen(self) -> bool:
        return bool(self.frozen)


def sync_distance(lip_motion_segment: torch.Tensor, audio_segment: torch.Tensor, expert: SyncExpert) -> torch.Tensor:
    """Distance in ``[0, 2]`` for one unbatched ``(n, 3V_lip)`` / ``(n, Z_a)`` pair."""
    if lip_motion_segment.shape[0] != audio_segment.shape[0]:
        raise ValueError("lip and audio segments must cover the same frames")
    return expert.distance(lip_motion_segment[None], audio_segment[None])[0]


def lip_slice(motion: torch.Tensor, lip_mask: np.ndarray) -> torch.Tensor:
    """Select lip-vertex coordinates from ``(..., 3V)`` motion."""
    cols = torch.from_numpy(np.flatnonzero(np.repeat(np.asarray(lip_mask, bool), 3)))
    return motion.index_select(-1, cols)


def sync_loss(
    pred_motion: torch.Tensor,
    audio: torch.Tensor,
    lip_mask: np.ndarray,
    expert: SyncExpert,
    num_segments: int = 2,
    rng: np.random.Generator | int = 0,
) -> torch.Tensor:
    """Mean sync distance over random windows of predicted motion.

    ``pred_motion`` is ``(N, 3V)`` or ``(B, N, 3V)`` in millimetres and
    ``audio`` the matching ``(.., N, Z_a)`` track. Window starts are drawn
    uniformly from ``[0, N - n]`` per sample.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    if pred_motion.ndim == 2:
        pred_motion, audio = pred_motion[None], audio[None]
    b, n_frames = pred_motion.shape[:2]
    n = expert.config.segment_length
    if n_frames < n:
        raise ValueError(f"sequence of {n_frames} frames is shorter than the segment length {n}")
    starts = rng.integers(0, n_frames - n + 1, size=(b, num_segments))
    window = torch.from_numpy(starts[..., None] + np.arange(n))  # (B, S, n)
    bidx = torch.arange(b)[:, None, None]
    lips = lip_slice(pred_motion, lip_mask)[bidx, window]  # (B, S, n, 3V_lip)
    auds = audio[bidx, window]
    d = expert.distance(lips.flatten(0, 1), auds.flatten(0, 1))
    return d.mean()


def _segments(lips: Sequence[np.ndarray], audios: Sequence[np.ndarray], rng, count: int, n: int, min_shift: int):
    """Half positives, half negatives (cross-utterance or shifted >= min_shift)."""
    num = len(lips)
    lip_out, aud_out, labels = [], [], []
    for k in range(count):
        u = int(rng.integers(num))
        length = lips[u].shape[0]
        i = int(rng.integers(length - n + 1))
        lip_out.append(lips[u][i:i + n])
        positive = k % 2 == 0
        if positive:
            aud_out.append(audios[u][i:i + n])
        elif rng.random() < 0.5 and num > 1:
            v = int(rng.integers(num - 1))
            v += v >= u
            j = int(rng.integers(audios[v].shape[0] - n + 1))
            aud_out.append(audios[v][j:j + n])
        else:
            choices = [j for j in range(length - n + 1) if abs(j - i) >= min_shift]
            j = int(choices[rng.integers(len(choices))])
            aud_out.append(audios[u][j:j + n])
        labels.append(1.0 if positive else 0.0)
    return np.stack(lip_out), np.stack(aud_out), np.array(labels)


def train_sync_expert(
    motions: Sequence[np.ndarray],
    audios: Sequence[np.ndarray],
    lip_mask: np.ndarray,
    segment_length: int = 5,
    epochs: int = 40,
    seed: int = 0,
    batch_size: int = 64,
    lr: float = 1e-3,
    embed_dim: int = 64,
    hidden_dim: int = 128,
    min_shift: int = 3,
    shuffle_labels: bool = False,
) -> SyncExpert:
    """Fit an expert on utterances ``(N, 3V)`` motion / ``(N, Z_a)`` audio.

    One epoch draws ``segments_per_utterance = N`` pairs per utterance.
    ``shuffle_labels`` permutes labels within each batch (null control).
    The returned expert is frozen.
    """
    if len(motions) != len(audios) or not motions:
        raise ValueError("need matching, non-empty motion and audio lists")
    n = segment_length
    lip_cols = np.flatnonzero(np.repeat(np.asarray(lip_mask, bool), 3))
    lips = [np.asarray(m, dtype=np.float64)[:, lip_cols] for m in motions]
    auds = [np.asarray(a, dtype=np.float64) for a in audios]
    for lp, au in zip(lips, auds):
        if lp.shape[0] != au.shape[0]:
            raise ValueError("motion and audio must share a timeline")
        if lp.shape[0] < n + min_shift:
            raise ValueError(f"utterance of {lp.shape[0]} frames too short for segment length {n}")

    config = SyncExpertConfig(
        num_lip_vertices=len(lip_cols) // 3, audio_dim=auds[0].shape[1],
        segment_length=n, embed_dim=embed_dim, hidden_dim=hidden_dim,
    )
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        expert = SyncExpert(config)
    expert.lip_scale.fill_(float(np.sqrt(np.mean(np.concatenate(lips) ** 2))) or 1.0)
    expert.audio_scale.fill_(float(np.sqrt(np.mean(np.concatenate(auds) ** 2))) or 1.0)

    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(expert.parameters(), lr=lr)
    pairs_per_epoch = sum(lp.shape[0] for lp in lips)
    steps = max(1, epochs * pairs_per_epoch // batch_size)
    for _ in range(steps):
        lp, au, y = _segments(lips, auds, rng, batch_size, n, min_shift)
        if shuffle_labels:
            y = rng.permutation(y)
        cos = expert.cosine(torch.from_numpy(lp).float(), torch.from_numpy(au).float())
        p = ((cos + 1.0) / 2.0).clamp(EPS, 1.0 - EPS)
        loss = F.binary_cross_entropy(p, torch.from_numpy(y).float())
        opt.zero_grad()
        loss.backward()
        opt.step()
    return expert.freeze()


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg), ties counted half."""
    scores, labels = np.asarray(scores, float), np.asarray(labels, bool)
    n_pos, n_neg = labels.sum(), (~labels).sum()
    if n_pos == 0 or n_neg == 0:
        raise ValueError("need both classes")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


@torch.no_grad()
def shift_auc(
    expert: SyncExpert,
    motions: Sequence[np.ndarray],
    audios: Sequence[np.ndarray],
    lip_mask: np.ndarray,
    shift: int = 5,
) -> float:
    """AUC of ``-distance`` separating aligned windows from ``shift``-frame offsets.

    Every window start ``i`` with room for the offset contributes one
    positive ``(lip[i:i+n], audio[i:i+n])`` and one negative using
    ``audio[i+shift:...]`` (or ``i-shift`` where the forward offset runs out).
    """
    n = expert.config.segment_length
    scores, labels = [], []
    for m, a in zip(motions, audios):
        lip = lip_slice(torch.as_tensor(np.asarray(m), dtype=torch.float32), lip_mask)
        aud = torch.as_tensor(np.asarray(a), dtype=torch.float32)
        length = lip.shape[0]
        for i in range(length - n + 1):
            j = i + shift if i + shift + n <= length else i - shift
            if j < 0:
                continue
            pos = expert.distance(lip[None, i:i + n], aud[None, i:i + n])
            neg = expert.distance(lip[None, i:i + n], aud[None, j:j + n])
            scores += [-float(pos), -float(neg)]
            labels += [1, 0]
    return roc_auc(np.array(scores), np.array(labels))
