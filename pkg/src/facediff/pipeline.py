"""Glue between the synthetic dataset, training, sampling and evaluation."""
from __future__ import annotations

import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from .denoiser import Denoiser, DenoiserConfig, init_params
from .mesh_repr import FaceRepresentation, RigSpec, decompose, render_zero_pose, to_zero_pose
from .metrics import EvalReport, lip_vertex_error, multimodality, nldd
from .sampler import ReferenceSet, sample_many
from .sync_expert import SyncExpert, train_sync_expert
from .synthetic import SyntheticDataset, Utterance
from .training import LossWeights, TrainConfig, Trainer, TrainingSet

log = logging.getLogger(__name__)


def representations(utterances: Sequence[Utterance], rig: RigSpec, k: int = 32, seed: int = 0) -> List[FaceRepresentation]:
    return [decompose(u.mesh, u.pose, rig, k=min(k, u.mesh.num_frames), seed=seed) for u in utterances]


def audio_tracks(utterances: Sequence[Utterance]) -> List[np.ndarray]:
    return [u.audio_at_frames() for u in utterances]


def fit_sync_expert(ds: SyntheticDataset, utterances: Optional[Sequence[Utterance]] = None, k: int = 32,
                    seed: int = 0, **kwargs) -> SyncExpert:
    utts = list(utterances if utterances is not None else ds.utterances)
    reps = representations(utts, ds.rig, k, seed)
    return train_sync_expert([r.motion for r in reps], audio_tracks(utts), ds.rig.lip_mask, seed=seed, **kwargs)


def build_model(config: DenoiserConfig, reps: Sequence[FaceRepresentation], seed: int = 0) -> Denoiser:
    """Fresh denoiser with its standardiser fitted to ``reps``."""
    model = init_params(config, seed)
    model.standardizer.fit(np.stack([r.flatten() for r in reps]))
    return model


def train_denoiser(
    ds: SyntheticDataset,
    config: DenoiserConfig,
    train: TrainConfig = TrainConfig(),
    weights: LossWeights = LossWeights(),
    expert: Optional[SyncExpert] = None,
    model: Optional[Denoiser] = None,
    log_path=None,
) -> Tuple[Denoiser, Trainer]:
    """Train (or continue training) a denoiser on every utterance of ``ds``."""
    reps = representations(ds.utterances, ds.rig, train.k, train.seed)
    if model is None:
        model = build_model(config, reps, train.seed)
    data = TrainingSet(reps, audio_tracks(ds.utterances))
    trainer = Trainer(model, data, ds.rig.lip_mask, expert, train, weights, log_path=log_path)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(train.seed)
        trainer.run()
    return model, trainer


def evaluate(
    model: Denoiser,
    utterances: Sequence[Utterance],
    rig: RigSpec,
    subset_size: int = 20,
    s: float = 1.0,
    seed: int = 0,
    k: int = 32,
    batch: int = 16,
) -> EvalReport:
    """LVE / NLDD against ground truth plus multimodality.

    LVE and NLDD: one sample per utterance with the ground-truth identity
    as reference (so errors measure motion), compared in zero-pose space.
    Multimodality: ``subset_size`` pairs cycling through the utterances'
    audio, subsets A and B drawn with disjoint seeds and no references
    (components the model does not learn use the ground truth).
    """
    cfg = model.config
    utts = list(utterances)
    reps = representations(utts, rig, k, seed)
    audios = audio_tracks(utts)

    def _refs(rep: FaceRepresentation, with_identity: bool) -> ReferenceSet:
        return ReferenceSet(
            identity=rep.identity if with_identity or not cfg.learn_identity else None,
            pose=rep.pose if not cfg.learn_pose else None,
        )

    def _run(indices: Sequence[int], seeds: Sequence[int], with_identity: bool) -> List[FaceRepresentation]:
        out = []
        for lo in range(0, len(indices), batch):
            idx = list(indices[lo:lo + batch])
            out += sample_many(model, np.stack([audios[i] for i in idx]),
                               [_refs(reps[i], with_identity) for i in idx], seeds[lo:lo + batch], s)
        return out

    preds = _run(range(len(utts)), [seed + i for i in range(len(utts))], True)
    lve, lve_max, dyn = [], [], []
    for u, pred in zip(utts, preds):
        gt = to_zero_pose(u.mesh, u.pose, rig)
        p = render_zero_pose(pred, gt.fps)
        avg, mx = lip_vertex_error(p, gt, rig)
        lve.append(avg)
        lve_max.append(mx)
        dyn.append(nldd(p, gt, rig))

    pick = [i % len(utts) for i in range(subset_size)]
    base = seed + 100_000
    a = _run(pick, [base + i for i in range(subset_size)], False)
    b = _run(pick, [base + subset_size + i for i in range(subset_size)], False)
    mult = multimodality(a, b, rig)
    return EvalReport(
        avg_lve=float(np.mean(lve)), max_lve=float(np.max(lve_max)), nldd=float(np.mean(dyn)),
        mult_id=mult.identity, mult_motion=mult.motion, mult_pose=mult.pose, mult_mesh=mult.mesh,
        num_sequences=len(utts), subset_size=subset_size,
        config={"s": s, "seed": seed, **cfg.to_dict()},
    )
