"""Lip vertex error, non-lip dynamics deviation and multimodality."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, Sequence, Tuple

import numpy as np

from .mesh_repr import FaceMeshSequence, FaceRepresentation, RigSpec, render


def _check_pair(pred: FaceMeshSequence, gt: FaceMeshSequence) -> None:
    if pred.vertices.shape != gt.vertices.shape:
        raise ValueError(f"shape mismatch: {pred.vertices.shape} vs {gt.vertices.shape}")


def lip_vertex_error(pred: FaceMeshSequence, gt: FaceMeshSequence, rig: RigSpec) -> Tuple[float, float]:
    """Per-frame maximal lip-vertex L2 distance, returned as (mean, max) over frames."""
    _check_pair(pred, gt)
    dist = np.linalg.norm(pred.vertices[:, rig.lip_mask] - gt.vertices[:, rig.lip_mask], axis=-1)
    per_frame = dist.max(axis=1)
    return float(per_frame.mean()), float(per_frame.max())


def _dynamics(seq: FaceMeshSequence, mask: np.ndarray) -> np.ndarray:
    # population std over time of each vertex's position norm
    return np.linalg.norm(seq.vertices[:, mask], axis=-1).std(axis=0)


def nldd(pred: FaceMeshSequence, gt: FaceMeshSequence, rig: RigSpec) -> float:
    """Mean absolute gap in temporal std of non-lip vertex norms."""
    _check_pair(pred, gt)
    if gt.num_frames < 2:
        raise ValueError("NLDD needs at least two frames")
    return float(np.mean(np.abs(_dynamics(gt, rig.nonlip_mask) - _dynamics(pred, rig.nonlip_mask))))


def _mean_distance(a: Sequence[np.ndarray], b: Sequence[np.ndarray]) -> float:
    dists = [np.linalg.norm(np.ravel(x) - np.ravel(y)) / np.size(x) for x, y in zip(a, b)]
    return float(np.mean(dists))


@dataclass(frozen=True)
class Multimodality:
    identity: float
    motion: float
    pose: float
    mesh: float

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return self.identity, self.motion, self.pose, self.mesh


def multimodality(
    subset_a: Sequence[FaceRepresentation],
    subset_b: Sequence[FaceRepresentation],
    rig: RigSpec,
) -> Multimodality:
    """Mean pairwise L2 distance between two equally sized sample sets.

    Each distance is divided by the element count of the component so the
    four numbers are comparable. ``mesh`` compares the rendered sequences.
    """
    if len(subset_a) != len(subset_b) or not subset_a:
        raise ValueError("subsets must be non-empty and of equal length")
    return Multimodality(
        identity=_mean_distance([r.identity for r in subset_a], [r.identity for r in subset_b]),
        motion=_mean_distance([r.motion for r in subset_a], [r.motion for r in subset_b]),
        pose=_mean_distance([r.pose for r in subset_a], [r.pose for r in subset_b]),
        mesh=_mean_distance(
            [render(r, rig).vertices for r in subset_a], [render(r, rig).vertices for r in subset_b]
        ),
    )


def lip_motion_rms(reps: Sequence[FaceRepresentation], rig: RigSpec) -> float:
    """RMS over frames and lip vertices of the motion displacement length (mm)."""
    norms = [np.linalg.norm(r.motion.reshape(r.num_frames, -1, 3)[:, rig.lip_mask], axis=-1) for r in reps]
    return float(np.sqrt(np.mean(np.concatenate([n.ravel() for n in norms]) ** 2)))


@dataclass
class EvalReport:
    avg_lve: float
    max_lve: float
    nldd: float
    mult_id: float
    mult_motion: float
    mult_pose: float
    mult_mesh: float
    num_sequences: int
    subset_size: int
    config: Dict[str, object] = field(default_factory=dict)

    def values(self) -> Dict[str, float]:
        d = asdict(self)
        d.pop("config")
        return d

    def to_kv(self) -> str:
        lines = [f"{k}={v!r}" for k, v in self.values().items()]
        lines += [f"config.{k}={v}" for k, v in sorted(self.config.items())]
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        rows = [
            ("Avg lip vertex error (mm)", self.avg_lve),
            ("Max lip vertex error (mm)", self.max_lve),
            ("Non-lip dynamics deviation (mm)", self.nldd),
            ("Mult identity (mm)", self.mult_id),
            ("Mult motion (mm)", self.mult_motion),
            ("Mult pose", self.mult_pose),
            ("Mult mesh (mm)", self.mult_mesh),
        ]
        width = max(len(r[0]) for r in rows)
        body = [f"{name:<{width}}  {value:.6g}" for name, value in rows]
        body.append(f"{'sequences / subset size':<{width}}  {self.num_sequences} / {self.subset_size}")
        return "\n".join(body) + "\n"

    @classmethod
    def from_kv(cls, text: str) -> "EvalReport":
        vals, config = {}, {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, value = line.partition("=")
            if key.startswith("config."):
                config[key[len("config."):]] = value
            else:
                vals[key] = int(value) if key in ("num_sequences", "subset_size") else float(value)
        return cls(**vals, config=config)
