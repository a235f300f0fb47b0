"""Bit-exact checkpoint serialization.

Layout (integers little-endian):

    magic   b"WRNC"
    u32     format version (currently 1)
    u32     config length, then that many bytes of UTF-8 JSON
    u32     record count
    records u16 name length | name UTF-8 | u8 rank | u32 extents[rank]
            | float32 payload, little-endian, C order
    u64     FNV-1a checksum over every byte after the version field and
            before the checksum itself

Parameters are stored as float32 regardless of the ambient precision.
Optimizer moments ride along as records named "opt.m/<param>" and
"opt.v/<param>"; step counter, epoch, RNG state and the model config all
live in the JSON blob.  Files are written to a temp name and renamed, so
a crash never leaves a half-written checkpoint behind.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import atomic_write_bytes
from .errors import CheckpointError

MAGIC = b"WRNC"
VERSION = 1

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


@dataclass
class CheckpointState:
    """Everything needed to resume: config echo, weights, moments, counters."""

    model_config: dict
    params: dict
    opt_m: dict = field(default_factory=dict)
    opt_v: dict = field(default_factory=dict)
    opt_step: int = 0
    epoch: int = 0
    rng_state: dict = None
    precision: str = "single"
    extra: dict = field(default_factory=dict)


def _pack_record(name: str, arr: np.ndarray) -> bytes:
    # asarray keeps rank-0 inputs rank 0; tobytes() below is C order either way
    payload = np.asarray(arr, dtype="<f4")
    name_b = name.encode("utf-8")
    if len(name_b) > 0xFFFF:
        raise CheckpointError(f"record name too long: {name!r}")
    if payload.ndim > 0xFF:
        raise CheckpointError(f"record rank too large: {payload.ndim}")
    head = struct.pack("<H", len(name_b)) + name_b + struct.pack("<B", payload.ndim)
    head += struct.pack(f"<{payload.ndim}I", *payload.shape)
    return head + payload.tobytes()


def save_checkpoint(path, state: CheckpointState) -> None:
    config = {
        "model": state.model_config,
        "opt_step": int(state.opt_step),
        "epoch": int(state.epoch),
        "rng_state": state.rng_state,
        "precision": state.precision,
        "extra": state.extra,
    }
    config_b = json.dumps(config, sort_keys=True).encode("utf-8")
    records = [(name, state.params[name]) for name in sorted(state.params)]
    records += [(f"opt.m/{name}", state.opt_m[name]) for name in sorted(state.opt_m)]
    records += [(f"opt.v/{name}", state.opt_v[name]) for name in sorted(state.opt_v)]
    body = struct.pack("<I", len(config_b)) + config_b + struct.pack("<I", len(records))
    for name, arr in records:
        body += _pack_record(name, arr)
    blob = MAGIC + struct.pack("<I", VERSION) + body + struct.pack("<Q", fnv1a(body))
    atomic_write_bytes(path, blob)


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"{self.path}: truncated at byte {self.pos} (wanted {n} more)")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def _normalize(value):
    if isinstance(value, (list, tuple)):
        return [_normalize(v) for v in value]
    return value


def _config_diff(expected: dict, found: dict, prefix: str = "") -> list[str]:
    keys = sorted(set(expected) | set(found))
    diffs = []
    for k in keys:
        label = f"{prefix}{k}"
        if k not in expected or k not in found:
            diffs.append(label)
        elif isinstance(expected[k], dict) and isinstance(found[k], dict):
            diffs.extend(_config_diff(expected[k], found[k], prefix=f"{label}."))
        elif _normalize(expected[k]) != _normalize(found[k]):
            diffs.append(label)
    return diffs


def load_checkpoint(path, expected_model_config: dict = None) -> CheckpointState:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None
    if len(blob) < len(MAGIC) + 4 + 8:
        raise CheckpointError(f"{path}: file too short to be a checkpoint")
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version = struct.unpack("<I", blob[4:8])[0]
    if version != VERSION:
        raise CheckpointError(
            f"{path}: format version {version} unsupported; this build reads version "
            f"{VERSION}; re-save the checkpoint with a matching library version"
        )
    body = blob[8:-8]
    stored = struct.unpack("<Q", blob[-8:])[0]
    computed = fnv1a(body)
    if stored != computed:
        raise CheckpointError(
            f"{path}: checksum mismatch (stored {stored:#018x}, computed {computed:#018x})"
        )

    r = _Reader(body, path)
    config_len = r.u32()
    try:
        config = json.loads(r.take(config_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: bad config blob: {e}") from None
    n_records = r.u32()
    params: dict = {}
    opt_m: dict = {}
    opt_v: dict = {}
    for _ in range(n_records):
        name = r.take(r.u16()).decode("utf-8")
        rank = r.u8()
        shape = tuple(r.u32() for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).copy()
        if name.startswith("opt.m/"):
            opt_m[name[6:]] = arr
        elif name.startswith("opt.v/"):
            opt_v[name[6:]] = arr
        else:
            params[name] = arr
    if r.pos != len(body):
        raise CheckpointError(f"{path}: {len(body) - r.pos} trailing bytes after records")

    model_config = config.get("model", {})
    if expected_model_config is not None:
        diffs = _config_diff(expected_model_config, model_config)
        if diffs:
            raise CheckpointError(f"{path}: config mismatch in fields: {', '.join(diffs)}")
    return CheckpointState(
        model_config=model_config,
        params=params,
        opt_m=opt_m,
        opt_v=opt_v,
        opt_step=config.get("opt_step", 0),
        epoch=config.get("epoch", 0),
        rng_state=config.get("rng_state"),
        precision=config.get("precision", "single"),
        extra=config.get("extra", {}),
    )
