"""Versioned named-tensor checkpoint archive.

Layout: an 8-byte magic, a little-endian u32 manifest length, a canonical
JSON manifest (sorted keys), then raw tensor payloads concatenated in
manifest order (names sorted). Floats are little-endian float32, so the file
is bit-exact across runs and portable across languages. The manifest binds
the archive to a stack-config hash; loading under a different config is
rejected unless forced.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, ShapeError

MAGIC = b"LEGOCKPT"
FORMAT_VERSION = 1

_DTYPES = {"f4": np.dtype("<f4"), "u1": np.dtype("u1")}


@dataclass
class Checkpoint:
    """In-memory image of a checkpoint archive."""

    config_hash: str
    step: int
    images_seen: int
    optim_step: int
    tensors: dict[str, torch.Tensor]
    version: int = FORMAT_VERSION

    def named(self, prefix: str) -> dict[str, torch.Tensor]:
        plen = len(prefix)
        return {k[plen:]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def _encode(t: torch.Tensor) -> tuple[str, bytes]:
    if t.dtype == torch.uint8:
        return "u1", t.detach().cpu().numpy().astype("u1").tobytes()
    return "f4", t.detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes()


def save_checkpoint(path: str | os.PathLike, ckpt: Checkpoint) -> None:
    """Write atomically: serialize to a sibling temp file, then rename into place."""
    names = sorted(ckpt.tensors)
    table = {}
    blobs = []
    offset = 0
    for name in names:
        dtype, blob = _encode(ckpt.tensors[name])
        table[name] = {
            "dtype": dtype,
            "shape": list(ckpt.tensors[name].shape),
            "offset": offset,
            "nbytes": len(blob),
        }
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "version": ckpt.version,
        "config_hash": ckpt.config_hash,
        "step": ckpt.step,
        "images_seen": ckpt.images_seen,
        "optim_step": ckpt.optim_step,
        "tensors": table,
    }
    payload = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(payload)))
        f.write(payload)
        for blob in blobs:
            f.write(blob)
    os.replace(tmp, path)


def _read_header(path) -> tuple[dict, int]:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MAGIC:
            raise ConfigError(f"{path}: not a checkpoint archive (bad magic {magic!r})")
        (length,) = struct.unpack("<I", f.read(4))
        manifest = json.loads(f.read(length).decode())
    if manifest.get("version") != FORMAT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {manifest.get('version')}")
    return manifest, 8 + 4 + length


def read_manifest(path: str | os.PathLike) -> dict:
    return _read_header(path)[0]


def load_checkpoint(
    path: str | os.PathLike, expect_hash: str | None = None, force: bool = False
) -> Checkpoint:
    manifest, header = _read_header(path)
    if expect_hash is not None and manifest["config_hash"] != expect_hash and not force:
        raise ConfigError(
            f"{path}: checkpoint bound to config {manifest['config_hash']}, "
            f"expected {expect_hash} (pass force to override)"
        )
    tensors = {}
    with open(path, "rb") as f:
        f.seek(header)
        data = f.read()
    for name, entry in manifest["tensors"].items():
        raw = data[entry["offset"] : entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise ShapeError(f"{path}: truncated payload for tensor {name!r}")
        arr = np.frombuffer(raw, dtype=_DTYPES[entry["dtype"]]).reshape(entry["shape"]).copy()
        tensors[name] = torch.from_numpy(arr)
    return Checkpoint(
        config_hash=manifest["config_hash"],
        step=manifest["step"],
        images_seen=manifest["images_seen"],
        optim_step=manifest["optim_step"],
        tensors=tensors,
        version=manifest["version"],
    )
