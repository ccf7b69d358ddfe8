"""Little-endian binary containers for meshes, audio features, masks and topology.

=======  ==================================================================
DF3D     magic, u32 version=1, u32 N, u32 V, u32 fps, N*V*3 float32
DF3A     magic, u32 version=1, u32 N_a, u32 Z_a, u32 feature_rate, N_a*Z_a float32
DF3M     magic, u32 version=1, u32 V, V bytes in {0, 1}
DF3T     magic, u32 version=1, u32 F, F*3 u32 vertex indices
=======  ==================================================================

Readers validate magic, version, dimensions and exact payload length.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Union

import numpy as np

from .conditioning import AudioFeatureSequence
from .mesh_repr import FaceMeshSequence

PathLike = Union[str, os.PathLike]

VERSION = 1
MESH_MAGIC = b"DF3D"
AUDIO_MAGIC = b"DF3A"
MASK_MAGIC = b"DF3M"
TOPOLOGY_MAGIC = b"DF3T"
# refuse headers promising more than this many payload bytes
MAX_PAYLOAD = 1 << 32


class FormatError(ValueError):
    """Base class for malformed files."""


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedError(FormatError):
    """File ends before the header or payload it promises."""


class TrailingDataError(FormatError):
    """Bytes remain after the promised payload."""


class DimensionError(FormatError):
    """Header dimensions are zero, overflow, or inconsistent with the payload."""


def _header(data: bytes, magic: bytes, n_fields: int, path) -> tuple:
    size = 4 + 4 * (1 + n_fields)
    if not (data[:4] == magic or (len(data) < 4 and magic.startswith(data))):
        raise BadMagicError(f"{path}: expected magic {magic!r}, found {data[:4]!r}")
    if len(data) < size:
        raise TruncatedError(f"{path}: header needs {size} bytes, file has {len(data)}")
    version, *dims = struct.unpack_from(f"<{1 + n_fields}I", data, 4)
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported version {version}")
    return size, dims


def _payload(data: bytes, offset: int, nbytes: int, path) -> bytes:
    if nbytes > MAX_PAYLOAD:
        raise DimensionError(f"{path}: header promises {nbytes} payload bytes")
    end = offset + nbytes
    if len(data) < end:
        raise TruncatedError(f"{path}: payload needs {nbytes} bytes, only {len(data) - offset} present")
    if len(data) > end:
        raise TrailingDataError(f"{path}: {len(data) - end} unexpected trailing bytes")
    return data[offset:end]


def _read(path: PathLike) -> bytes:
    return Path(path).read_bytes()


def encode_mesh(seq: FaceMeshSequence) -> bytes:
    n, v = seq.vertices.shape[:2]
    head = MESH_MAGIC + struct.pack("<4I", VERSION, n, v, seq.fps)
    return head + seq.vertices.astype("<f4").tobytes()


def decode_mesh(data: bytes, path="<bytes>") -> FaceMeshSequence:
    off, (n, v, fps) = _header(data, MESH_MAGIC, 3, path)
    if n < 1 or v < 4 or fps < 1:
        raise DimensionError(f"{path}: invalid dimensions N={n} V={v} fps={fps}")
    raw = _payload(data, off, n * v * 3 * 4, path)
    verts = np.frombuffer(raw, dtype="<f4").reshape(n, v, 3).astype(np.float64)
    return FaceMeshSequence(verts, fps)


def write_mesh(path: PathLike, seq: FaceMeshSequence) -> None:
    Path(path).write_bytes(encode_mesh(seq))


def read_mesh(path: PathLike) -> FaceMeshSequence:
    return decode_mesh(_read(path), path)


def encode_audio(audio: AudioFeatureSequence) -> bytes:
    n, z = audio.features.shape
    head = AUDIO_MAGIC + struct.pack("<4I", VERSION, n, z, audio.feature_rate)
    return head + audio.features.astype("<f4").tobytes()


def decode_audio(data: bytes, path="<bytes>") -> AudioFeatureSequence:
    off, (n, z, rate) = _header(data, AUDIO_MAGIC, 3, path)
    if n < 1 or z < 1 or rate < 1:
        raise DimensionError(f"{path}: invalid dimensions N_a={n} Z_a={z} rate={rate}")
    raw = _payload(data, off, n * z * 4, path)
    return AudioFeatureSequence(np.frombuffer(raw, dtype="<f4").reshape(n, z).astype(np.float64), rate)


def write_audio(path: PathLike, audio: AudioFeatureSequence) -> None:
    Path(path).write_bytes(encode_audio(audio))


def read_audio(path: PathLike) -> AudioFeatureSequence:
    return decode_audio(_read(path), path)


def encode_mask(mask: np.ndarray) -> bytes:
    m = np.asarray(mask).reshape(-1)
    if m.dtype != bool and not np.isin(m, (0, 1)).all():
        raise ValueError("mask entries must be 0 or 1")
    return MASK_MAGIC + struct.pack("<2I", VERSION, m.size) + m.astype(np.uint8).tobytes()


def decode_mask(data: bytes, path="<bytes>") -> np.ndarray:
    off, (v,) = _header(data, MASK_MAGIC, 1, path)
    if v < 1:
        raise DimensionError(f"{path}: empty mask")
    raw = np.frombuffer(_payload(data, off, v, path), dtype=np.uint8)
    if raw.max() > 1:
        raise FormatError(f"{path}: mask bytes must be 0 or 1")
    return raw.astype(bool)


def write_mask(path: PathLike, mask: np.ndarray) -> None:
    Path(path).write_bytes(encode_mask(mask))


def read_mask(path: PathLike) -> np.ndarray:
    return decode_mask(_read(path), path)


def encode_topology(faces: np.ndarray) -> bytes:
    f = np.asarray(faces).reshape(-1, 3)
    if f.size and f.min() < 0:
        raise ValueError("negative vertex index")
    return TOPOLOGY_MAGIC + struct.pack("<2I", VERSION, f.shape[0]) + f.astype("<u4").tobytes()


def decode_topology(data: bytes, path="<bytes>") -> np.ndarray:
    off, (f,) = _header(data, TOPOLOGY_MAGIC, 1, path)
    raw = _payload(data, off, f * 3 * 4, path)
    return np.frombuffer(raw, dtype="<u4").reshape(f, 3).astype(np.int64)


def write_topology(path: PathLike, faces: np.ndarray) -> None:
    Path(path).write_bytes(encode_topology(faces))


def read_topology(path: PathLike) -> np.ndarray:
    return decode_topology(_read(path), path)


def export_obj(seq: FaceMeshSequence, topology: np.ndarray, out_dir: PathLike, prefix: str = "frame") -> list:
    """Write one Wavefront OBJ (``v`` and ``f`` records only) per frame.

    Files are named ``<prefix>_<i>.obj`` with ``i`` zero-padded to the width
    of the largest frame index. Returns the written paths.
    """
    faces = np.asarray(topology, dtype=np.int64).reshape(-1, 3)
    if faces.size and (faces.min() < 0 or faces.max() >= seq.num_vertices):
        raise IndexError(f"topology index outside [0, {seq.num_vertices})")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    width = len(str(max(seq.num_frames - 1, 0)))
    face_lines = "".join(f"f {a + 1} {b + 1} {c + 1}\n" for a, b, c in faces)
    paths = []
    for i, frame in enumerate(seq.vertices):
        path = out / f"{prefix}_{i:0{width}d}.obj"
        verts = "".join(f"v {x:.6f} {y:.6f} {z:.6f}\n" for x, y, z in frame)
        path.write_text(verts + face_lines)
        paths.append(path)
    return paths


def parse_obj(path: PathLike):
    """Vertices ``(V, 3)`` and zero-based faces ``(F, 3)`` of a simple OBJ."""
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(p) for p in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)
