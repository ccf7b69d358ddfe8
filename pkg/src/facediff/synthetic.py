"""Procedural talking-head dataset with known ground truth.

Each subject is a low-poly ellipsoidal head with three labelled vertex
groups: lips (a ring around the mouth), upper eyelids and skull. Per
utterance we draw

* a smooth random audio-feature track; channel ``drive_channel`` opens
  the lips through a fixed linear map evaluated on the track resampled
  to mesh frames,
* independent smooth eyelid motion (uncorrelated with the audio),
* a smooth, bounded random-walk head pose.

Everything is deterministic in ``SyntheticConfig.seed``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List

import numpy as np
from scipy.ndimage import gaussian_filter1d
from scipy.spatial import ConvexHull

from . import formats
from .conditioning import AudioFeatureSequence, resample_audio
from .mesh_repr import FaceMeshSequence, RigSpec, apply_pose, to_zero_pose

NUM_LIP = 12
NUM_EYE = 4
HEAD_AXES = np.array([75.0, 95.0, 85.0])  # mm, x (width) / y (height) / z (depth)
UPPER_LIP_RATIO = 0.3
MANIFEST = "manifest.json"


@dataclass(frozen=True)
class SyntheticConfig:
    num_subjects: int = 8
    utterances_per_subject: int = 4
    num_frames: int = 30
    num_vertices: int = 40
    audio_dim: int = 16
    fps: int = 30
    feature_rate: int = 50
    seed: int = 0
    lip_gain: float = 3.0  # mm of lip opening per unit of the driving channel
    eyelid_amplitude: float = 1.5  # mm
    pose_amplitude: float = 0.25  # rad, bound per axis
    identity_scale_spread: float = 0.08
    identity_offset_std: float = 2.0  # mm
    vertex_jitter_std: float = 0.8  # mm
    audio_smoothing: float = 2.0  # gaussian sigma in audio frames
    eyelid_smoothing: float = 3.0  # sigma in mesh frames
    pose_smoothing: float = 4.0
    drive_channel: int = 0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("seed", "drive_channel"):
                continue
            if not v > 0:
                raise ValueError(f"{f.name} must be positive, got {v}")
        if self.num_vertices < 24:
            raise ValueError("num_vertices must be >= 24 to host lip, eye and skull groups")
        if not 0 <= self.drive_channel < self.audio_dim:
            raise ValueError("drive_channel out of range")
        if self.pose_amplitude * np.sqrt(3) >= np.pi:
            raise ValueError("pose_amplitude too large for canonical axis-angle")

    @property
    def num_skull(self) -> int:
        return self.num_vertices - NUM_LIP - NUM_EYE

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class Utterance:
    name: str
    subject: int
    mesh: FaceMeshSequence
    pose: np.ndarray  # (N, 3)
    audio: AudioFeatureSequence

    def audio_at_frames(self) -> np.ndarray:
        return resample_audio(self.audio, self.mesh.num_frames, self.mesh.fps)


@dataclass
class SyntheticDataset:
    config: SyntheticConfig
    rig: RigSpec
    groups: Dict[str, np.ndarray]
    topology: np.ndarray
    lip_weight: np.ndarray
    utterances: List[Utterance] = field(default_factory=list)

    def subjects(self) -> List[int]:
        return sorted({u.subject for u in self.utterances})


def _on_ellipsoid(directions: np.ndarray) -> np.ndarray:
    d = directions / np.linalg.norm(directions, axis=-1, keepdims=True)
    return d / np.sqrt(np.sum((d / HEAD_AXES) ** 2, axis=-1, keepdims=True))


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def template_head(num_vertices: int = 40):
    """Template vertices ``(V, 3)``, group indices and lip opening weights.

    Vertex order: lips, eyelids, skull. Lip weights are +1-scaled for the
    upper lip (moves up), negative for the lower lip, zero at the corners.
    """
    num_skull = num_vertices - NUM_LIP - NUM_EYE
    mouth = _on_ellipsoid(_unit([0.0, -0.45, 0.9])[None])[0]
    right = np.array([1.0, 0.0, 0.0])
    up = _unit(np.cross(mouth / np.linalg.norm(mouth), right))
    phi = 2 * np.pi * np.arange(NUM_LIP) / NUM_LIP
    ring = mouth + 22.0 * np.cos(phi)[:, None] * right + 7.0 * np.sin(phi)[:, None] * up
    lips = _on_ellipsoid(ring)
    sin = np.round(np.sin(phi), 12)
    lip_weight = np.where(sin > 0, UPPER_LIP_RATIO * sin, sin)  # lower lip: negative

    eyes = []
    for side in (-1.0, 1.0):
        centre = _unit([0.33 * side, 0.25, 0.91])
        for dx in (-6.0, 6.0):
            eyes.append(_on_ellipsoid((_on_ellipsoid(centre[None])[0] + [dx, 4.0, 0.0])[None])[0])
    eyes = np.array(eyes)

    # Fibonacci points on the cap z <= 0.2 (back, top, sides)
    k = np.arange(num_skull) + 0.5
    z = -1.0 + 1.2 * k / num_skull
    theta = np.pi * (1 + 5 ** 0.5) * k
    r = np.sqrt(1 - z ** 2)
    skull = _on_ellipsoid(np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1))

    verts = np.concatenate([lips, eyes, skull])
    groups = {
        "lip": np.arange(NUM_LIP),
        "eye": np.arange(NUM_LIP, NUM_LIP + NUM_EYE),
        "skull": np.arange(NUM_LIP + NUM_EYE, num_vertices),
    }
    return verts, groups, lip_weight


def hull_topology(vertices: np.ndarray) -> np.ndarray:
    """Outward-oriented triangles of the convex hull."""
    hull = ConvexHull(vertices)
    faces = hull.simplices.copy()
    centre = vertices.mean(axis=0)
    a, b, c = (vertices[faces[:, i]] for i in range(3))
    outward = np.einsum("ij,ij->i", np.cross(b - a, c - a), a - centre) < 0
    faces[outward] = faces[outward][:, ::-1]
    return faces[np.lexsort(faces.T[::-1])]


def _smooth_noise(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    x = gaussian_filter1d(rng.standard_normal(shape), sigma, axis=0, mode="reflect")
    return (x - x.mean(axis=0)) / (x.std(axis=0) + 1e-12)


def lip_opening(zero_pose_vertices: np.ndarray, groups: Dict[str, np.ndarray], lip_weight: np.ndarray) -> np.ndarray:
    """Mean upper-lip height minus mean lower-lip height per frame (mm)."""
    lip = zero_pose_vertices[:, groups["lip"], 1]
    return lip[:, lip_weight > 0].mean(axis=1) - lip[:, lip_weight < 0].mean(axis=1)


def generate(config: SyntheticConfig = SyntheticConfig()) -> SyntheticDataset:
    """Build the dataset in memory."""
    rng = np.random.default_rng(config.seed)
    template, groups, lip_weight = template_head(config.num_vertices)
    lip_mask = np.zeros(config.num_vertices, bool)
    lip_mask[groups["lip"]] = True
    rig = RigSpec.from_template(template, lip_mask)
    n = config.num_frames
    n_audio = max(1, int(round(n * config.feature_rate / config.fps)))

    ds = SyntheticDataset(config, rig, groups, hull_topology(template), lip_weight)
    for s in range(config.num_subjects):
        scale = 1.0 + rng.uniform(-config.identity_scale_spread, config.identity_scale_spread, 3)
        offset = rng.normal(0.0, config.identity_offset_std, 3)
        base = (template - rig.pivot) * scale + rig.pivot + offset
        base = base + rng.normal(0.0, config.vertex_jitter_std, base.shape)
        for u in range(config.utterances_per_subject):
            feats = _smooth_noise(rng, (n_audio, config.audio_dim), config.audio_smoothing)
            audio = AudioFeatureSequence(feats, config.feature_rate)
            drive = resample_audio(audio, n, config.fps)[:, config.drive_channel]

            frames = np.repeat(base[None], n, axis=0)
            frames[:, groups["lip"], 1] += config.lip_gain * drive[:, None] * lip_weight[None]
            blink = config.eyelid_amplitude * _smooth_noise(rng, (n, 1), config.eyelid_smoothing)
            frames[:, groups["eye"], 1] -= blink

            walk = np.cumsum(_smooth_noise(rng, (n, 3), config.pose_smoothing), axis=0) / np.sqrt(n)
            pose = config.pose_amplitude * np.tanh(walk + rng.normal(0.0, 0.5, 3))
            posed = np.stack([apply_pose(frames[i], pose[i], rig) for i in range(n)])
            ds.utterances.append(
                Utterance(f"s{s:02d}_u{u:02d}", s, FaceMeshSequence(posed, config.fps), pose, audio)
            )
    return ds


def write(ds: SyntheticDataset, out_dir) -> Path:
    """Write DF3D/DF3A/DF3M/DF3T files plus ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    formats.write_mask(out / "lip_mask.df3m", ds.rig.lip_mask)
    formats.write_topology(out / "topology.df3t", ds.topology)
    entries = []
    for utt in ds.utterances:
        files = {k: f"{utt.name}.{k}.{ext}" for k, ext in (("mesh", "df3d"), ("audio", "df3a"), ("pose", "df3a"))}
        formats.write_mesh(out / files["mesh"], utt.mesh)
        formats.write_audio(out / files["audio"], utt.audio)
        formats.write_audio(out / files["pose"], AudioFeatureSequence(utt.pose, utt.mesh.fps))
        entries.append({"name": utt.name, "subject": utt.subject, **files})
    manifest = {
        "format": "facediff-synthetic",
        "version": 1,
        "config": asdict(ds.config),
        "pivot": ds.rig.pivot.tolist(),
        "lip_mask": "lip_mask.df3m",
        "topology": "topology.df3t",
        "groups": {k: v.tolist() for k, v in ds.groups.items()},
        "utterances": entries,
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return out


def generate_synthetic(config: SyntheticConfig, out_dir) -> SyntheticDataset:
    ds = generate(config)
    write(ds, out_dir)
    return ds


def load(data_dir) -> SyntheticDataset:
    """Read a dataset written by :func:`write` (values are float32-rounded)."""
    root = Path(data_dir)
    manifest = json.loads((root / MANIFEST).read_text())
    config = SyntheticConfig.from_dict(manifest["config"])
    rig = RigSpec(np.array(manifest["pivot"]), formats.read_mask(root / manifest["lip_mask"]))
    ds = SyntheticDataset(
        config, rig,
        {k: np.array(v, dtype=np.int64) for k, v in manifest["groups"].items()},
        formats.read_topology(root / manifest["topology"]),
        template_head(config.num_vertices)[2],
    )
    for e in manifest["utterances"]:
        pose = formats.read_audio(root / e["pose"]).features
        ds.utterances.append(
            Utterance(e["name"], e["subject"], formats.read_mesh(root / e["mesh"]), pose,
                      formats.read_audio(root / e["audio"]))
        )
    return ds


def load_rig(data_dir) -> RigSpec:
    root = Path(data_dir)
    manifest = json.loads((root / MANIFEST).read_text())
    return RigSpec(np.array(manifest["pivot"]), formats.read_mask(root / manifest["lip_mask"]))


def zero_pose_frames(utt: Utterance, rig: RigSpec) -> np.ndarray:
    return to_zero_pose(utt.mesh, utt.pose, rig).vertices
