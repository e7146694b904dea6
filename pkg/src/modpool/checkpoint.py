"""POOL1 checkpoint container.

Layout (all integers little-endian)::

    b"POOL1" | u32 version | u32 meta_len | meta (UTF-8 key=value lines)
    repeated: u32 name_len | name | u32 rank | u64 dims[rank] | f32 payload
"""
from __future__ import annotations

import hashlib
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .data import FormatError, _Reader
from .pool import BackboneSpec, Modulator, ModelPool

MAGIC = b"POOL1"
VERSION = 1
STAGES = ("base", "modulators", "selector")
# independent per-domain networks for the Simple-Avg baseline
INDEPENDENT = "independent"


def encode(meta: Mapping[str, str], tensors: Mapping[str, np.ndarray]) -> bytes:
    lines = []
    for k, v in meta.items():
        v = str(v)
        if "=" in k or "\n" in k or "\n" in v:
            raise ValueError(f"metadata entry {k!r}={v!r} cannot be encoded")
        lines.append(f"{k}={v}\n")
    text = "".join(lines).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(text)), text]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    r = _Reader(buf)
    magic = r.take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC.decode()!r}", 0)
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"checkpoint format version {version}, this build reads {VERSION}", 5)
    text = r.take(r.u32("metadata length"), "metadata").decode("utf-8")
    meta = {}
    for line in text.splitlines():
        if line:
            key, _, value = line.partition("=")
            meta[key] = value
    tensors: dict[str, np.ndarray] = {}
    while r.pos < len(buf):
        name = r.take(r.u32("tensor name length"), "tensor name").decode("utf-8")
        rank = r.u32(f"rank of {name}")
        dims = tuple(r.u64(f"dims of {name}") for _ in range(rank))
        count = int(np.prod(dims, dtype=np.int64)) if dims else 1
        at = r.pos
        arr = np.frombuffer(r.take(4 * count, f"payload of {name}"), dtype="<f4")
        if not np.all(np.isfinite(arr)):
            raise FormatError(f"non-finite value in tensor {name}", at)
        tensors[name] = arr.astype(np.float32).reshape(dims)
    return meta, tensors


def tensor_records(buf: bytes) -> dict[str, bytes]:
    """Raw on-disk bytes of each tensor record, keyed by name (for byte-level diffing)."""
    r = _Reader(buf)
    r.take(len(MAGIC) + 4, "header")
    r.take(r.u32("metadata length"), "metadata")
    out = {}
    while r.pos < len(buf):
        start = r.pos
        name = r.take(r.u32("tensor name length"), "tensor name").decode("utf-8")
        rank = r.u32("rank")
        dims = [r.u64("dim") for _ in range(rank)]
        r.take(4 * int(np.prod(dims, dtype=np.int64)), "payload")
        out[name] = buf[start:r.pos]
    return out


def digest(buf: bytes) -> str:
    return hashlib.sha256(buf).hexdigest()


def spec_meta(spec: BackboneSpec) -> dict[str, str]:
    return {
        "input_dim": str(spec.input_dim),
        "layer_widths": ",".join(str(w) for w in spec.layer_widths),
        "normalize": "1" if spec.normalize else "0",
    }


def spec_from_meta(meta: Mapping[str, str]) -> BackboneSpec:
    try:
        return BackboneSpec(
            input_dim=int(meta["input_dim"]),
            layer_widths=tuple(int(w) for w in meta["layer_widths"].split(",")),
            normalize=meta.get("normalize", "1") == "1",
        )
    except (KeyError, ValueError) as exc:
        raise FormatError(f"checkpoint metadata lacks a valid backbone: {exc}") from exc


def split_list(value: str) -> list[str]:
    return [v for v in value.split(",") if v]


def pool_tensors(pool: ModelPool, phi: Mapping[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
    out = dict(pool.named_parameters())
    if phi is not None:
        out.update({f"phi/{k}": v for k, v in phi.items()})
    return out


def pool_from(meta: Mapping[str, str], tensors: Mapping[str, np.ndarray]):
    """Rebuild ``(pool, phi or None)`` from decoded checkpoint contents."""
    spec = spec_from_meta(meta)
    domains = split_list(meta.get("domains", ""))
    kind = meta.get("modulator_kind", "channel")
    theta = {k[len("theta/"):]: v for k, v in tensors.items() if k.startswith("theta/")}
    mods = []
    for i in range(1, len(domains) + 1):
        prefix = f"alpha{i}/"
        params = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
        mods.append(Modulator(kind, params))
    pool = ModelPool(spec, theta, kind, mods, domains)
    phi = {k[4:]: v for k, v in tensors.items() if k.startswith("phi/")} or None
    return pool, phi


def save(path, meta: Mapping[str, str], tensors: Mapping[str, np.ndarray]) -> bytes:
    full = {"format_version": str(VERSION), **meta}
    buf = encode(full, tensors)
    Path(path).write_bytes(buf)
    return buf


def load(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes())
