"""Binary file formats: CAFF feature files and CAFW checkpoints.

All multi-byte values are little-endian.

CAFF::

    magic "CAFF" | u32 version | u32 C_f | u32 C_M | u32 n_taps | u64 count
    count x ( u32 subject id | C_f x f32 feature | n_taps x (C_M x f32 mean, C_M x f32 std) )

CAFW::

    magic "CAFW" | u32 version | u32 manifest length | manifest (UTF-8 JSON)
    f32 payloads, concatenated in manifest order

(CAFS session snapshots live in :mod:`caface.streaming`.)
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .model import CAFace
from .records import RecordSet
from .streaming import FormatError

FEATURE_MAGIC = b"CAFF"
FEATURE_VERSION = 1
CHECKPOINT_MAGIC = b"CAFW"
CHECKPOINT_VERSION = 1

_FF_HEADER = struct.Struct("<4sIIIIQ")
_CK_HEADER = struct.Struct("<4sII")


def record_dtype(feat_dim: int, style_channels: int, n_taps: int) -> np.dtype:
    fields = [("sid", "<u4"), ("feat", "<f4", (feat_dim,))]
    if n_taps:
        fields.append(("style", "<f4", (n_taps, 2, style_channels)))
    return np.dtype(fields)


def encode_records(rs: RecordSet) -> np.ndarray:
    n, feat_dim = rs.features.shape
    _, n_taps, _, c_m = rs.style.shape if rs.style.ndim == 4 else (n, 0, 2, 0)
    arr = np.zeros(n, dtype=record_dtype(feat_dim, c_m, n_taps))
    arr["sid"] = rs.subject_ids
    arr["feat"] = rs.features
    if n_taps:
        arr["style"] = rs.style
    return arr


def decode_records(arr: np.ndarray, n_taps: int, style_channels: int) -> RecordSet:
    n = len(arr)
    style = arr["style"] if n_taps else np.zeros((n, 0, 2, style_channels), np.float32)
    return RecordSet(
        np.ascontiguousarray(arr["feat"], dtype=np.float32),
        np.ascontiguousarray(style, dtype=np.float32),
        np.ascontiguousarray(arr["sid"], dtype=np.uint32),
    )


def feature_bytes(rs: RecordSet) -> bytes:
    n, feat_dim = rs.features.shape
    n_taps, c_m = rs.style.shape[1], rs.style.shape[3]
    head = _FF_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, feat_dim, c_m, n_taps, n)
    return head + encode_records(rs).tobytes()


def parse_features(blob: bytes) -> RecordSet:
    if len(blob) < _FF_HEADER.size:
        raise FormatError("feature file truncated")
    magic, version, feat_dim, c_m, n_taps, count = _FF_HEADER.unpack_from(blob, 0)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"bad feature magic {magic!r}")
    if version != FEATURE_VERSION:
        raise FormatError(f"unsupported feature version {version}")
    dt = record_dtype(feat_dim, c_m, n_taps)
    payload = len(blob) - _FF_HEADER.size
    if payload != count * dt.itemsize:
        raise FormatError(f"declared {count} records but payload holds {payload / dt.itemsize:g}")
    arr = np.frombuffer(blob, dtype=dt, count=count, offset=_FF_HEADER.size)
    return decode_records(arr, n_taps, c_m)


def write_features(path: str | Path, rs: RecordSet) -> None:
    Path(path).write_bytes(feature_bytes(rs))


def read_features(path: str | Path) -> RecordSet:
    return parse_features(Path(path).read_bytes())


def record_payload(rs: RecordSet, i: int) -> bytes:
    """Bytes of one CAFF record (no header), as pushed to the fusion service."""
    return encode_records(rs[i]).tobytes()


def parse_record_payload(blob: bytes, cfg: ModelConfig) -> RecordSet:
    dt = record_dtype(cfg.feat_dim, cfg.style_channels, cfg.n_taps)
    if len(blob) != dt.itemsize:
        raise FormatError(f"record payload is {len(blob)} bytes, expected {dt.itemsize}")
    return decode_records(np.frombuffer(blob, dtype=dt), cfg.n_taps, cfg.style_channels)


# ---------------------------------------------------------------- checkpoints


def checkpoint_bytes(model: CAFace) -> bytes:
    tensors, payload = [], []
    for kind, items in (("param", model.named_parameters().items()), ("buffer", model.named_buffers().items())):
        for name, value in items:
            if name.endswith("norm_stats"):
                continue
            arr = np.asarray(value.data if kind == "param" else value)
            tensors.append({"name": name, "kind": kind, "shape": list(arr.shape)})
            payload.append(arr.astype("<f4").tobytes())
    mu, sigma = model.sim.buffers["norm_stats"]
    manifest = {
        "config": dataclasses.asdict(model.cfg),
        "norm_stats": [float(mu), float(sigma)],
        "tensors": tensors,
    }
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _CK_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(mbytes)) + mbytes + b"".join(payload)


def parse_checkpoint(blob: bytes) -> CAFace:
    if len(blob) < _CK_HEADER.size:
        raise FormatError("checkpoint truncated")
    magic, version, mlen = _CK_HEADER.unpack_from(blob, 0)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    off = _CK_HEADER.size
    try:
        manifest = json.loads(blob[off:off + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"bad checkpoint manifest: {exc}") from None
    off += mlen
    try:
        model = CAFace(ModelConfig(**manifest["config"]))
        listed = {t["name"] for t in manifest["tensors"]}
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad checkpoint manifest: {exc!r}") from None
    expected = set(model.named_parameters()) | {k for k in model.named_buffers() if not k.endswith("norm_stats")}
    if listed != expected:
        raise FormatError(f"checkpoint tensors differ from model: {sorted(listed ^ expected)[:5]}")
    shapes = {k: v.shape for k, v in model.named_parameters().items()}
    shapes.update({k: v.shape for k, v in model.named_buffers().items()})
    for t in manifest["tensors"]:
        if tuple(t["shape"]) != shapes[t["name"]]:
            raise FormatError(f"tensor {t['name']} has shape {t['shape']}, model expects {list(shapes[t['name']])}")
        n = int(np.prod(t["shape"], dtype=np.int64))
        if off + 4 * n > len(blob):
            raise FormatError(f"checkpoint payload truncated at {t['name']}")
        arr = np.frombuffer(blob, "<f4", n, off).reshape(t["shape"]).astype(np.float32)
        off += 4 * n
        if t["kind"] == "param":
            model.set_parameter(t["name"], arr)
        else:
            model.set_buffer(t["name"], arr)
    if off != len(blob):
        raise FormatError(f"{len(blob) - off} trailing bytes in checkpoint")
    model.set_norm_stats(*manifest["norm_stats"])
    return model


def save_checkpoint(path: str | Path, model: CAFace) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path: str | Path) -> CAFace:
    return parse_checkpoint(Path(path).read_bytes())
