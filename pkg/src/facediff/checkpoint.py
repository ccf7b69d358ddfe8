"""Checkpoint container for the denoiser, the sync expert and the rig.

Layout (little-endian)::

    b"DF3C" | u32 version | u32 header_len | header JSON (utf-8) | tensor blob

The header is JSON with sorted keys. Its ``tensors`` list gives name,
dtype, shape, offset and byte length of each entry in the blob, which holds
the raw little-endian tensor bytes in that order. Either network may be
absent (a checkpoint written by ``train-sync`` has no denoiser).
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import torch

from .denoiser import Denoiser, DenoiserConfig
from .diffusion import DiffusionSchedule, make_schedule
from .formats import BadMagicError, FormatError, TrailingDataError, TruncatedError, UnsupportedVersionError
from .mesh_repr import RigSpec
from .sync_expert import SyncExpert, SyncExpertConfig

MAGIC = b"DF3C"
VERSION = 1
_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.uint8: "|u1",
    torch.int64: "<i8",
    torch.bool: "|b1",
}
_TORCH = {v: k for k, v in _DTYPES.items()}


@dataclass
class Checkpoint:
    rig: RigSpec
    model: Optional[Denoiser] = None
    expert: Optional[SyncExpert] = None
    schedule: Optional[DiffusionSchedule] = None
    step: int = 0
    extra: Optional[dict] = None  # free-form run metadata, e.g. training config

    def __post_init__(self):
        if self.model is not None and self.schedule is None:
            cfg = self.model.config
            self.schedule = make_schedule(cfg.schedule_kind, cfg.diffusion_steps)


def _tensor_entries(prefix: str, module: torch.nn.Module) -> Dict[str, torch.Tensor]:
    return {f"{prefix}.{k}": v.detach() for k, v in module.state_dict().items()}


def encode(ckpt: Checkpoint) -> bytes:
    tensors: Dict[str, torch.Tensor] = {
        "rig.pivot": torch.from_numpy(np.asarray(ckpt.rig.pivot, dtype=np.float64)),
        "rig.lip_mask": torch.from_numpy(np.asarray(ckpt.rig.lip_mask, dtype=bool)),
    }
    header = {"step": int(ckpt.step), "extra": ckpt.extra or {}, "denoiser": None, "sync_expert": None, "schedule": None}
    if ckpt.model is not None:
        header["denoiser"] = ckpt.model.config.to_dict()
        tensors.update(_tensor_entries("denoiser", ckpt.model))
    if ckpt.schedule is not None:
        header["schedule"] = {"kind": ckpt.schedule.kind, "T": ckpt.schedule.T}
    if ckpt.expert is not None:
        header["sync_expert"] = {**ckpt.expert.config.to_dict(), "frozen": ckpt.expert.is_frozen}
        tensors.update(_tensor_entries("sync_expert", ckpt.expert))

    index, chunks, offset = [], [], 0
    for name in sorted(tensors):
        t = tensors[name].contiguous()
        if t.dtype not in _DTYPES:
            raise TypeError(f"cannot serialise {name} of dtype {t.dtype}")
        raw = t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes()
        index.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header["tensors"] = index
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<2I", VERSION, len(head)) + head + b"".join(chunks)


def _load_module(module: torch.nn.Module, prefix: str, tensors: Dict[str, torch.Tensor]) -> None:
    state = {k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
    module.load_state_dict(state, strict=True)


def decode(data: bytes, path="<bytes>") -> Checkpoint:
    if data[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint (magic {data[:4]!r})")
    if len(data) < 12:
        raise TruncatedError(f"{path}: header truncated")
    version, head_len = struct.unpack_from("<2I", data, 4)
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported checkpoint version {version}")
    if len(data) < 12 + head_len:
        raise TruncatedError(f"{path}: header truncated")
    try:
        header = json.loads(data[12:12 + head_len])
    except ValueError as exc:
        raise FormatError(f"{path}: corrupt header: {exc}") from None
    blob = data[12 + head_len:]
    end = sum(e["nbytes"] for e in header["tensors"])
    if len(blob) < end:
        raise TruncatedError(f"{path}: tensor data truncated")
    if len(blob) > end:
        raise TrailingDataError(f"{path}: {len(blob) - end} trailing bytes")
    tensors = {}
    for e in header["tensors"]:
        arr = np.frombuffer(blob, dtype=e["dtype"], count=int(np.prod(e["shape"], dtype=np.int64)), offset=e["offset"])
        tensors[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).copy())

    rig = RigSpec(tensors["rig.pivot"].numpy(), tensors["rig.lip_mask"].numpy())
    model = expert = schedule = None
    if header["denoiser"] is not None:
        model = Denoiser(DenoiserConfig.from_dict(header["denoiser"]))
        _load_module(model, "denoiser", tensors)
        model.trained_steps = header["step"]
        model.eval()
    if header["sync_expert"] is not None:
        cfg = dict(header["sync_expert"])
        frozen = cfg.pop("frozen")
        expert = SyncExpert(SyncExpertConfig(**cfg))
        _load_module(expert, "sync_expert", tensors)
        if frozen:
            expert.freeze()
    if header["schedule"] is not None:
        schedule = make_schedule(header["schedule"]["kind"], header["schedule"]["T"])
    return Checkpoint(rig, model, expert, schedule, header["step"], header["extra"])


def save(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(encode(ckpt))


def load(path) -> Checkpoint:
    return decode(Path(path).read_bytes(), path)
