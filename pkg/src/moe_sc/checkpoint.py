"""Checkpoint file format.

Layout::

    b"MOESCKPT"                      8-byte magic
    uint32 LE                        header length in bytes
    header                           UTF-8 JSON, sorted keys
    for each tensor in manifest order:
        uint64 LE                    payload length in bytes
        float32 LE values            row-major

The header carries ``version``, the model and FEM configs, a manifest of
``{name, shape, offset, nbytes}`` (offset counts from the first payload
byte, length prefixes included) and a SHA-256 of everything after the
header.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .fem import FEMConfig, FeatureExtractionModule
from .layers import Module
from .transformer import ModelConfig, MoETransformer

MAGIC = b"MOESCKPT"
VERSION = 1


class CheckpointError(Exception):
    """Unreadable, truncated or corrupt checkpoint."""


class CheckpointVersionError(CheckpointError):
    pass


class ShapeMismatchError(ValueError):
    pass


def _named(model: MoETransformer, fem: FeatureExtractionModule | None) -> list[tuple[str, np.ndarray]]:
    out = [(f"model.{n}", p.data) for n, p in model.named_parameters()]
    if fem is not None:
        out += [(f"fem.{n}", p.data) for n, p in fem.named_parameters()]
    return out


def dumps(model: MoETransformer, fem: FeatureExtractionModule | None = None, extra: dict | None = None) -> bytes:
    payload = bytearray()
    manifest = []
    for name, arr in _named(model, fem):
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": len(payload), "nbytes": len(raw)})
        payload += struct.pack("<Q", len(raw)) + raw
    header = {
        "version": VERSION,
        "model_config": model.cfg.to_dict(),
        "fem_config": fem.cfg.to_dict() if fem is not None else None,
        "tensors": manifest,
        "payload_sha256": hashlib.sha256(bytes(payload)).hexdigest(),
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<I", len(head)) + head + bytes(payload)


def save_checkpoint(path: str | Path, model: MoETransformer, fem: FeatureExtractionModule | None = None,
                    extra: dict | None = None) -> None:
    Path(path).write_bytes(dumps(model, fem, extra))


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse and verify; returns (header, tensors by name)."""
    try:
        blob = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError(f"checkpoint not found: {path}") from exc
    if len(blob) < 12 or blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<I", blob[8:12])
    if 12 + hlen > len(blob):
        raise CheckpointError("truncated header")
    try:
        header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError("corrupt header") from exc
    if "version" not in header:
        raise CheckpointError("header lacks a version field")
    if header["version"] != VERSION:
        raise CheckpointVersionError(f"checkpoint version {header['version']} != supported {VERSION}")
    payload = blob[12 + hlen:]
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CheckpointError("payload checksum mismatch (truncated or corrupt)")
    tensors = {}
    for entry in header["tensors"]:
        off = entry["offset"]
        (n,) = struct.unpack("<Q", payload[off:off + 8])
        if n != entry["nbytes"] or off + 8 + n > len(payload):
            raise CheckpointError(f"bad length prefix for {entry['name']}")
        arr = np.frombuffer(payload[off + 8:off + 8 + n], dtype="<f4").astype(np.float32)
        tensors[entry["name"]] = arr.reshape(entry["shape"])
    return header, tensors


def _assign(module: Module, prefix: str, tensors: dict[str, np.ndarray]) -> None:
    for name, p in module.named_parameters():
        key = prefix + name
        if key not in tensors:
            raise ShapeMismatchError(f"tensor {key} missing from checkpoint")
        src = tensors[key]
        if src.shape != p.data.shape:
            raise ShapeMismatchError(f"tensor {key}: checkpoint shape {src.shape} != model shape {p.data.shape}")
        p.data = src.astype(p.data.dtype).copy()


def load_into(path: str | Path, model: MoETransformer, fem: FeatureExtractionModule | None = None) -> dict:
    """Copy checkpoint tensors into existing modules; shape errors name the tensor."""
    header, tensors = read_checkpoint(path)
    _assign(model, "model.", tensors)
    if fem is not None and header.get("fem_config") is not None:
        _assign(fem, "fem.", tensors)
    return header


def load_checkpoint(path: str | Path) -> tuple[MoETransformer, FeatureExtractionModule | None, dict]:
    """Rebuild modules from the stored configs and fill in their tensors."""
    header, _ = read_checkpoint(path)
    model = MoETransformer(ModelConfig.from_dict(header["model_config"]))
    fem = None
    if header.get("fem_config") is not None:
        fem = FeatureExtractionModule(model.cfg.d_model, FEMConfig.from_dict(header["fem_config"]))
    load_into(path, model, fem)
    return model, fem, header
