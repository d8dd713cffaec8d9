"""Binary checkpoint format.

Layout::

    b"SQFM" | u32 version | u32 header_len | header (UTF-8 JSON) |
    float32 LE tensors in manifest order | u32 CRC32 of everything after the magic
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .featurestore import FeatureSpace
from .model import HyperConfig, ModelParams, PlainFmParams, expected_shapes

MAGIC = b"SQFM"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _kind(params) -> str:
    return "plain_fm" if isinstance(params, PlainFmParams) else "seqfm"


def save_checkpoint(params, cfg: HyperConfig, space: FeatureSpace, path, extra: dict | None = None) -> None:
    tensors = params.named_tensors()
    manifest = []
    for name, arr in tensors.items():
        rows = int(arr.shape[0]) if arr.ndim >= 1 else 1
        cols = int(arr.shape[1]) if arr.ndim == 2 else 1
        manifest.append({"name": name, "rows": rows, "cols": cols, "ndim": int(arr.ndim)})
    header = {
        "model": _kind(params),
        "config": cfg.to_dict(),
        "space": space.to_dict(),
        "tensors": manifest,
    }
    if extra:
        header["extra"] = extra
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = bytearray()
    body += struct.pack("<II", VERSION, len(head))
    body += head
    for arr in tensors.values():
        body += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    crc = zlib.crc32(bytes(body)) & 0xFFFFFFFF
    Path(path).write_bytes(MAGIC + bytes(body) + struct.pack("<I", crc))


def read_header(path) -> dict:
    return _parse(Path(path).read_bytes())[0]


def _parse(blob: bytes):
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise CheckpointError("bad magic")
    if len(blob) < 16:
        raise CheckpointError("truncated file")
    body, crc_bytes = blob[4:-4], blob[-4:]
    version, head_len = struct.unpack("<II", body[:8])
    if version != VERSION:
        raise CheckpointError(f"version mismatch: file has {version}, expected {VERSION}")
    if 8 + head_len > len(body):
        raise CheckpointError("truncated file")
    try:
        header = json.loads(body[8:8 + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from None
    need = sum(t["rows"] * t["cols"] for t in header["tensors"]) * 4
    if len(body) - 8 - head_len != need:
        raise CheckpointError("truncated file")
    if zlib.crc32(body) & 0xFFFFFFFF != struct.unpack("<I", crc_bytes)[0]:
        raise CheckpointError("checksum mismatch")
    return header, body[8 + head_len:]


def load_checkpoint(path):
    """Returns ``(params, cfg, space)``; params come back as float64."""
    header, payload = _parse(Path(path).read_bytes())
    cfg = HyperConfig(**header["config"])
    space = FeatureSpace.from_dict(header["space"])
    tensors = {}
    off = 0
    for t in header["tensors"]:
        count = t["rows"] * t["cols"]
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=off).astype(np.float64)
        off += count * 4
        shape = (t["rows"], t["cols"]) if t["ndim"] == 2 else (t["rows"],)
        tensors[t["name"]] = arr.reshape(shape)
    if header["model"] == "plain_fm":
        return PlainFmParams.from_tensors(tensors), cfg, space
    want = expected_shapes(space, cfg)
    got = {k: v.shape for k, v in tensors.items()}
    if got != want:
        bad = sorted(k for k in set(want) | set(got) if want.get(k) != got.get(k))
        raise CheckpointError(f"shape mismatch: {', '.join(bad)}")
    return ModelParams.from_tensors(tensors), cfg, space
