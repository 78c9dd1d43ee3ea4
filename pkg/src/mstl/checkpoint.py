"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"MSTL"                     magic
    u32 version                 FORMAT_VERSION
    u32 n + n bytes             graph spec, canonical JSON (UTF-8)
    float32[...]                parameter blobs, graph-spec declaration order
    u8 has_velocity             1 if optimizer velocity follows
    float32[...]                velocity blobs, same order (only if flag set)
    u32 m + m bytes             metadata, canonical JSON (UTF-8)

Nothing may follow the metadata block.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import FormatError
from .graph import ModelGraph

MAGIC = b"MSTL"
FORMAT_VERSION = 1


def canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


@dataclass
class Checkpoint:
    graph_spec: dict
    params: dict[str, np.ndarray]
    velocity: dict[str, np.ndarray] | None = None
    metadata: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    @property
    def trainable(self) -> dict[str, bool]:
        return {d["name"]: bool(d["trainable"]) for d in self.graph_spec["params"]}

    @classmethod
    def from_graph(cls, graph: ModelGraph, velocity=None, metadata: dict | None = None) -> "Checkpoint":
        params = {k: p.value.astype(np.float32, copy=True) for k, p in graph.params.items()}
        vel = None
        if velocity is not None:
            vel = {k: np.asarray(velocity.get(k, np.zeros_like(params[k])), np.float32).copy() for k in params}
        return cls(graph.to_spec(), params, vel, dict(metadata or {}))

    def to_graph(self) -> ModelGraph:
        return ModelGraph.from_spec(self.graph_spec, {k: v.copy() for k, v in self.params.items()})

    def to_bytes(self) -> bytes:
        names = [d["name"] for d in self.graph_spec["params"]]
        parts = [MAGIC, struct.pack("<I", self.format_version)]
        spec = canonical_json(self.graph_spec)
        parts += [struct.pack("<I", len(spec)), spec]
        for n in names:
            parts.append(np.ascontiguousarray(self.params[n], dtype="<f4").tobytes())
        parts.append(struct.pack("<B", 1 if self.velocity is not None else 0))
        if self.velocity is not None:
            for n in names:
                parts.append(np.ascontiguousarray(self.velocity[n], dtype="<f4").tobytes())
        meta = canonical_json(self.metadata)
        parts += [struct.pack("<I", len(meta)), meta]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        reader = _Reader(buf)
        if reader.take(4, "magic") != MAGIC:
            raise FormatError("bad magic, not an MSTL checkpoint", 0)
        version = reader.u32("version")
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})", 4)
        spec = reader.json_block("graph spec")
        params = {}
        for d in spec["params"]:
            params[d["name"]] = reader.floats(d["shape"], f"parameter {d['name']}")
        flag_at = reader.pos
        flag = reader.take(1, "velocity flag")[0]
        if flag not in (0, 1):
            raise FormatError(f"invalid velocity flag {flag}", flag_at)
        velocity = None
        if flag:
            velocity = {d["name"]: reader.floats(d["shape"], f"velocity {d['name']}") for d in spec["params"]}
        metadata = reader.json_block("metadata")
        if reader.pos != len(buf):
            raise FormatError(f"{len(buf) - reader.pos} trailing bytes after metadata", reader.pos)
        return cls(spec, params, velocity, metadata, version)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file while reading {what}: need {n} bytes, "
                              f"{len(self.buf) - self.pos} left", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def json_block(self, what: str) -> dict:
        at = self.pos
        n = self.u32(f"{what} length")
        raw = self.take(n, what)
        try:
            return json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"corrupt {what}: {exc}", at) from None

    def floats(self, shape, what: str) -> np.ndarray:
        count = int(np.prod(shape)) if len(shape) else 1
        raw = self.take(4 * count, what)
        return np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)


def save_checkpoint(ckpt: Checkpoint, path) -> str:
    """Write atomically; returns the sha256 of the written bytes."""
    path = Path(path)
    data = ckpt.to_bytes()
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from None
    try:
        return Checkpoint.from_bytes(data)
    except FormatError as exc:
        err = FormatError(f"{path}: {exc}")
        err.offset = exc.offset
        raise err from None


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
