"""LoRA checkpoint files.

Layout (all integers little-endian u32)::

    b"E2I1" | version | header_len | header (UTF-8 JSON)
    then per array, in sorted name order:
    name_len | name (UTF-8) | ndim | dims... | float32 LE data

Only the adapter arrays are stored. The header records the sha256 of the
frozen base weights the adapters were trained against, plus a sha256 of the
payload bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..backbone import BackboneConfig, init_backbone, params_checksum
from ..lora import AdaptedModel, LoRAConfig, inject, load_adapter_state, trainable_parameters

MAGIC = b"E2I1"
VERSION = 1


class CheckpointError(ValueError):
    pass


class ChecksumMismatch(CheckpointError):
    pass


@dataclass
class LoRACheckpoint:
    header: dict
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def lora_config(self) -> LoRAConfig:
        return LoRAConfig.from_dict(self.header["lora"])

    @property
    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig.from_dict(self.header["backbone"])


def _payload(arrays: dict[str, np.ndarray]) -> bytes:
    chunks = []
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f4")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        chunks.append(a.tobytes())
    return b"".join(chunks)


def checkpoint_from_model(model: AdaptedModel, extra: dict | None = None) -> LoRACheckpoint:
    arrays = {name: t.detach().cpu().to(torch.float32).numpy() for name, t in trainable_parameters(model)}
    header = {
        "format_version": VERSION,
        "lora": model.lora_config.to_dict(),
        "backbone": model.config.to_dict(),
        "base_checksum": params_checksum(model.base),
    }
    if extra:
        header["extra"] = extra
    return LoRACheckpoint(header=header, arrays=arrays)


def encode_checkpoint(ckpt: LoRACheckpoint) -> bytes:
    payload = _payload(ckpt.arrays)
    header = dict(ckpt.header, payload_sha256=hashlib.sha256(payload).hexdigest())
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<II", VERSION, len(hbytes)) + hbytes + payload


def save_checkpoint(ckpt: LoRACheckpoint | AdaptedModel, path, extra: dict | None = None) -> None:
    if isinstance(ckpt, AdaptedModel):
        ckpt = checkpoint_from_model(ckpt, extra)
    Path(path).write_bytes(encode_checkpoint(ckpt))


def decode_checkpoint(buf: bytes) -> LoRACheckpoint:
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    if len(buf) < 12:
        raise CheckpointError("truncated checkpoint header")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(buf[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    payload = buf[12 + hlen :]
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CheckpointError("payload integrity check failed: sha256 of adapter arrays does not match header")
    arrays = {}
    pos = 0
    try:
        while pos < len(payload):
            (nlen,) = struct.unpack_from("<I", payload, pos)
            pos += 4
            name = payload[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<I", payload, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", payload, pos)
            pos += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            arrays[name] = np.frombuffer(payload, dtype="<f4", count=count, offset=pos).reshape(shape).copy()
            pos += 4 * count
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint payload: {exc}") from exc
    header.pop("payload_sha256")
    return LoRACheckpoint(header=header, arrays=arrays)


def load_checkpoint(path, base: dict[str, torch.Tensor] | None = None) -> LoRACheckpoint:
    """Read and verify a checkpoint; with ``base`` given, also verify the base checksum."""
    ckpt = decode_checkpoint(Path(path).read_bytes())
    if base is not None:
        verify_base(ckpt, base)
    return ckpt


def verify_base(ckpt: LoRACheckpoint, base: dict[str, torch.Tensor]) -> None:
    got = params_checksum(base)
    if got != ckpt.header["base_checksum"]:
        raise ChecksumMismatch(
            "checkpoint was trained against a different base "
            f"(expected {ckpt.header['base_checksum'][:12]}..., got {got[:12]}...)"
        )


def restore_model(ckpt: LoRACheckpoint, base: dict[str, torch.Tensor] | None = None) -> AdaptedModel:
    """Rebuild the adapted model; the base is re-initialized from the header when not given."""
    cfg = ckpt.backbone_config
    if base is None:
        base = init_backbone(cfg)
    verify_base(ckpt, base)
    model = inject(base, cfg, ckpt.lora_config)
    load_adapter_state(model, {k: torch.from_numpy(v) for k, v in ckpt.arrays.items()})
    return model
