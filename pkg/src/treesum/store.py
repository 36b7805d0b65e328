"""Bit-exact checkpointing: a JSON manifest plus a little-endian float64 blob.

A checkpoint is the file pair <name>.manifest.json / <name>.bin. The manifest
carries the model config, the optimizer step counter, and a tensor index of
{name, shape, dtype, byte_offset} entries sorted by name; the blob is the
concatenated raw values. Writes go to temp files renamed into place so a
partial checkpoint is never visible at the final path.
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import encdec
from .encdec import ModelConfig, Summarizer

FORMAT_VERSION = 1

CONFIG_KEYS = (
    "vocab_size", "d", "layers", "mode", "epsilon", "seed", "share_scoring",
    "gsa_source", "graph_enabled", "context_mode", "phi", "max_decode_len",
)


class CorruptCheckpoint(RuntimeError):
    """Manifest/blob pair is inconsistent, truncated, or incomplete."""


class UnsupportedVersion(RuntimeError):
    """Checkpoint format_version not understood by this build."""


def _paths(path: str | Path) -> tuple[Path, Path]:
    base = Path(path)
    return base.with_name(base.name + ".manifest.json"), base.with_name(base.name + ".bin")


def save_checkpoint(model: Summarizer, path: str | Path, step: int = 0) -> None:
    manifest_path, blob_path = _paths(path)
    tensors = []
    chunks = []
    offset = 0
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name], dtype="<f8")
        tensors.append(
            {"name": name, "shape": list(arr.shape), "dtype": "float64", "byte_offset": offset}
        )
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {
        "format_version": FORMAT_VERSION,
        "step": int(step),
        "config": asdict(model.config),
        "tensors": tensors,
        "blob_bytes": offset,
    }
    tmp_blob = blob_path.with_name(blob_path.name + ".tmp")
    tmp_manifest = manifest_path.with_name(manifest_path.name + ".tmp")
    with open(tmp_blob, "wb") as fh:
        for chunk in chunks:
            fh.write(chunk)
    with open(tmp_manifest, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
    os.replace(tmp_blob, blob_path)
    os.replace(tmp_manifest, manifest_path)


def load_checkpoint(path: str | Path) -> tuple[Summarizer, int]:
    """Rebuild the model and return (model, step). Values reload bit-exactly."""
    manifest_path, blob_path = _paths(path)
    if not manifest_path.exists() or not blob_path.exists():
        raise CorruptCheckpoint(f"missing checkpoint files for {path!r}")
    raw = manifest_path.read_text(encoding="utf-8")
    if not raw.strip():
        raise CorruptCheckpoint("empty manifest")
    try:
        manifest = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise CorruptCheckpoint(f"unreadable manifest: {exc}") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"format_version {version!r}, expected {FORMAT_VERSION}")
    cfg_dict = manifest.get("config", {})
    unknown_cfg = set(cfg_dict) - set(CONFIG_KEYS)
    if unknown_cfg:
        raise CorruptCheckpoint(f"unknown config keys {sorted(unknown_cfg)}")
    config = ModelConfig(**cfg_dict)
    model = encdec.build_model(config)

    blob = blob_path.read_bytes()
    index = {t["name"]: t for t in manifest.get("tensors", [])}
    for name in index:
        if name not in model.params:
            warnings.warn(f"checkpoint tensor {name!r} not used by this model; ignored")
    for name, param in model.params.items():
        entry = index.get(name)
        if entry is None:
            raise CorruptCheckpoint(f"tensor {name!r} missing from index")
        if entry.get("dtype") != "float64":
            raise CorruptCheckpoint(f"tensor {name!r} has dtype {entry.get('dtype')!r}")
        shape = tuple(entry["shape"])
        if shape != param.shape:
            raise CorruptCheckpoint(f"tensor {name!r} shape {shape} != model {param.shape}")
        start = entry["byte_offset"]
        end = start + int(np.prod(shape, dtype=np.int64)) * 8
        if end > len(blob):
            raise CorruptCheckpoint(f"blob truncated: {name!r} needs bytes up to {end}")
        values = np.frombuffer(blob[start:end], dtype="<f8").reshape(shape)
        param[:] = values
    return model, int(manifest.get("step", 0))
