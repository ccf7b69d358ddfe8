"""Identity / pose / motion factorisation of face mesh sequences.

Vertices are handled as ``(N, V, 3)`` arrays in millimetres. The flat
``3V`` layout used by the diffusion state is the row-major reshape of
``(V, 3)``, i.e. ``x0, y0, z0, x1, ...``.

Head pose is a single global joint: every vertex is rotated rigidly about
``RigSpec.pivot`` by an axis-angle vector.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial.transform import Rotation

DEFAULT_K = 32


class InvalidInputError(ValueError):
    """Raised for non-finite, mis-shaped or out-of-range inputs."""


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite values")


@dataclass(frozen=True)
class FaceMeshSequence:
    vertices: np.ndarray  # (N, V, 3)
    fps: int = 30

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        if v.ndim == 2:
            if v.shape[1] % 3:
                raise InvalidInputError(f"flat frames need 3V columns, got {v.shape[1]}")
            v = v.reshape(v.shape[0], -1, 3)
        if v.ndim != 3 or v.shape[2] != 3:
            raise InvalidInputError(f"vertices must be (N, V, 3), got {v.shape}")
        if v.shape[0] < 1 or v.shape[1] < 4:
            raise InvalidInputError(f"need N >= 1 and V >= 4, got {v.shape[:2]}")
        _check_finite("vertices", v)
        if int(self.fps) < 1:
            raise InvalidInputError(f"fps must be positive, got {self.fps}")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "fps", int(self.fps))

    @property
    def num_frames(self) -> int:
        return self.vertices.shape[0]

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[1]

    def flat(self) -> np.ndarray:
        return self.vertices.reshape(self.num_frames, -1)


@dataclass(frozen=True)
class RigSpec:
    """Rotation pivot plus the lip-region vertex mask."""

    pivot: np.ndarray
    lip_mask: np.ndarray
    nonlip_mask: np.ndarray = field(init=False)

    def __post_init__(self):
        pivot = np.asarray(self.pivot, dtype=np.float64).reshape(-1)
        lip = np.asarray(self.lip_mask).astype(bool).reshape(-1)
        if pivot.shape != (3,):
            raise InvalidInputError("pivot must be a 3-vector")
        _check_finite("pivot", pivot)
        if lip.all() or not lip.any():
            raise InvalidInputError("lip_mask needs at least one lip and one non-lip vertex")
        object.__setattr__(self, "pivot", pivot)
        object.__setattr__(self, "lip_mask", lip)
        object.__setattr__(self, "nonlip_mask", ~lip)

    @classmethod
    def from_template(cls, template: np.ndarray, lip_mask: np.ndarray) -> "RigSpec":
        """Rig pivoting about the centroid of ``template`` (``(V, 3)`` or ``3V``)."""
        pts = np.asarray(template, dtype=np.float64).reshape(-1, 3)
        return cls(pivot=pts.mean(axis=0), lip_mask=lip_mask)

    @property
    def num_vertices(self) -> int:
        return self.lip_mask.shape[0]

    @property
    def lip_index(self) -> np.ndarray:
        return np.flatnonzero(self.lip_mask)

    def lip_coordinate_mask(self) -> np.ndarray:
        """Boolean mask over the flat ``3V`` layout selecting lip coordinates."""
        return np.repeat(self.lip_mask, 3)


@dataclass(frozen=True)
class FaceRepresentation:
    """Joint state of one utterance: identity (3V,), motion (N, 3V), pose (N, 3)."""

    identity: np.ndarray
    motion: np.ndarray
    pose: np.ndarray

    def __post_init__(self):
        ident = np.asarray(self.identity, dtype=np.float64).reshape(-1)
        motion = np.asarray(self.motion, dtype=np.float64)
        pose = np.asarray(self.pose, dtype=np.float64)
        if motion.ndim != 2 or pose.ndim != 2 or pose.shape[1] != 3:
            raise InvalidInputError(
                f"expected motion (N, 3V) and pose (N, 3), got {motion.shape} and {pose.shape}"
            )
        if ident.shape[0] != motion.shape[1] or ident.shape[0] % 3:
            raise InvalidInputError(f"identity length {ident.shape[0]} does not match motion width {motion.shape[1]}")
        if motion.shape[0] != pose.shape[0]:
            raise InvalidInputError("motion and pose frame counts differ")
        object.__setattr__(self, "identity", ident)
        object.__setattr__(self, "motion", motion)
        object.__setattr__(self, "pose", pose)

    @property
    def num_frames(self) -> int:
        return self.motion.shape[0]

    @property
    def num_vertices(self) -> int:
        return self.identity.shape[0] // 3

    def flatten(self) -> np.ndarray:
        """Pack into the ``(N+1, 3V+3)`` diffusion layout.

        Row 0 is the identity followed by three zeros; rows ``1..N`` are
        ``[motion_i, pose_i]``.
        """
        n, d = self.motion.shape
        out = np.zeros((n + 1, d + 3))
        out[0, :d] = self.identity
        out[1:, :d] = self.motion
        out[1:, d:] = self.pose
        return out

    @classmethod
    def unflatten(cls, x: np.ndarray) -> "FaceRepresentation":
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 2 or (x.shape[1] - 3) % 3:
            raise InvalidInputError(f"cannot unflatten array of shape {x.shape}")
        d = x.shape[1] - 3
        return cls(identity=x[0, :d].copy(), motion=x[1:, :d].copy(), pose=x[1:, d:].copy())


def rotation_matrices(rotations: np.ndarray) -> np.ndarray:
    """Rodrigues matrices for ``(..., 3)`` axis-angle vectors; rejects norms >= pi."""
    r = np.asarray(rotations, dtype=np.float64)
    _check_finite("rotation", r)
    if r.shape[-1] != 3:
        raise InvalidInputError(f"rotation vectors must have 3 components, got {r.shape}")
    if np.any(np.linalg.norm(r, axis=-1) >= np.pi):
        raise InvalidInputError("rotation magnitude must be < pi")
    flat = r.reshape(-1, 3)
    mats = Rotation.from_rotvec(flat).as_matrix()
    return mats.reshape(r.shape[:-1] + (3, 3))


def _rotate_frames(frames: np.ndarray, mats: np.ndarray, pivot: np.ndarray) -> np.ndarray:
    # frames (N, V, 3), mats (N, 3, 3)
    return np.einsum("nij,nvj->nvi", mats, frames - pivot) + pivot


def apply_pose(mesh_frame: np.ndarray, rotation: np.ndarray, rig: RigSpec) -> np.ndarray:
    """Rotate one frame (``3V`` or ``(V, 3)``) about the rig pivot; output keeps the input shape."""
    frame = np.asarray(mesh_frame, dtype=np.float64)
    _check_finite("mesh_frame", frame)
    pts = frame.reshape(1, -1, 3)
    mat = rotation_matrices(np.asarray(rotation).reshape(1, 3))
    return _rotate_frames(pts, mat, rig.pivot).reshape(frame.shape)


def _check_pose(seq: FaceMeshSequence, pose: np.ndarray) -> np.ndarray:
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape != (seq.num_frames, 3):
        raise InvalidInputError(f"pose shape {pose.shape} does not match {seq.num_frames} frames")
    return pose


def to_zero_pose(seq: FaceMeshSequence, pose: np.ndarray, rig: RigSpec) -> FaceMeshSequence:
    """Undo the per-frame head rotation."""
    pose = _check_pose(seq, pose)
    mats = rotation_matrices(pose)
    inv = np.transpose(mats, (0, 2, 1))
    return FaceMeshSequence(_rotate_frames(seq.vertices, inv, rig.pivot), seq.fps)


def extract_identity(zero_pose_seq: FaceMeshSequence, k: int, seed: int) -> np.ndarray:
    """Mean of ``k`` zero-pose frames drawn without replacement (seeded)."""
    n = zero_pose_seq.num_frames
    if not 1 <= k <= n:
        raise InvalidInputError(f"k must lie in [1, {n}], got {k}")
    idx = np.random.default_rng(seed).choice(n, size=k, replace=False)
    return zero_pose_seq.flat()[np.sort(idx)].mean(axis=0)


def decompose(
    seq: FaceMeshSequence,
    pose: np.ndarray,
    rig: RigSpec,
    k: Optional[int] = None,
    seed: int = 0,
) -> FaceRepresentation:
    if k is None:
        k = min(DEFAULT_K, seq.num_frames)
    zero = to_zero_pose(seq, pose, rig)
    identity = extract_identity(zero, k, seed)
    motion = zero.flat() - identity
    return FaceRepresentation(identity=identity, motion=motion, pose=np.array(pose, dtype=np.float64))


def zero_pose_mesh(rep: FaceRepresentation) -> np.ndarray:
    """Identity plus motion, ``(N, V, 3)``; no rotation applied."""
    _check_finite("representation", rep.flatten())
    return (rep.identity[None, :] + rep.motion).reshape(rep.num_frames, -1, 3)


def render(rep: FaceRepresentation, rig: RigSpec, fps: int = 30) -> FaceMeshSequence:
    zero = zero_pose_mesh(rep)
    mats = rotation_matrices(rep.pose)
    return FaceMeshSequence(_rotate_frames(zero, mats, rig.pivot), fps)


def render_zero_pose(rep: FaceRepresentation, fps: int = 30) -> FaceMeshSequence:
    return FaceMeshSequence(zero_pose_mesh(rep), fps)
