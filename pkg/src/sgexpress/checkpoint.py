"""Checkpoint files: parameters, optimizer moments and stage provenance.

Layout (little-endian)::

    b"SGECKPT1\\n"
    u32 format version
    u32 header length, header JSON (topology, provenance, config, metadata)
    per parameter, in topology order: float64 values
    u32 optimizer entry count
    per entry: u32 name length, name, u64 step count, float64 m, float64 v
    u32 CRC-32 of everything between the magic and the CRC

Shapes come from the topology in the header, so tensor records carry only
values.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import write_atomic
from .training import AdamState

MAGIC = b"SGECKPT1\n"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


class TopologyMismatchError(CheckpointError):
    pass


def _json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


@dataclass
class Checkpoint:
    topology: list[tuple[str, tuple[int, ...]]]
    params: dict[str, np.ndarray]
    optimizer: dict[str, AdamState] = field(default_factory=dict)
    provenance: list[int] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @classmethod
    def from_model(cls, model, optimizer_state=None, provenance=(), meta=None) -> Checkpoint:
        params = {n: p.data.copy() for n, p in model.named_parameters()}
        opt = {n: AdamState(s.m.copy(), s.v.copy(), s.t) for n, s in sorted((optimizer_state or {}).items())}
        return cls(model.topology(), params, opt, list(provenance), model.config.to_dict(), dict(meta or {}))

    def check_topology(self, model) -> None:
        mine = [(n, tuple(s)) for n, s in self.topology]
        theirs = model.topology()
        if mine != theirs:
            missing = sorted({n for n, _ in theirs} - {n for n, _ in mine})
            extra = sorted({n for n, _ in mine} - {n for n, _ in theirs})
            shapes = [n for (n, s), (m, t) in zip(mine, theirs) if n == m and s != t]
            raise TopologyMismatchError(
                f"checkpoint topology does not match the model (missing {missing[:5]}, unexpected {extra[:5]}, "
                f"reshaped {shapes[:5]})")

    def apply_to(self, model) -> None:
        """Copy parameters into ``model``; nothing is touched unless the topology matches."""
        self.check_topology(model)
        for n, p in model.named_parameters():
            p.data = self.params[n].copy()

    def optimizer_state(self) -> dict[str, AdamState]:
        return {n: AdamState(s.m.copy(), s.v.copy(), s.t) for n, s in self.optimizer.items()}

    def model_checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name, _ in self.topology:
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name]).tobytes())
        return h.hexdigest()


def dumps_checkpoint(ckpt: Checkpoint) -> bytes:
    header = _json({"topology": [[n, list(s)] for n, s in ckpt.topology], "provenance": list(ckpt.provenance),
                    "config": ckpt.config, "meta": ckpt.meta})
    parts = [struct.pack("<I", ckpt.version), struct.pack("<I", len(header)), header]
    for name, shape in ckpt.topology:
        arr = np.asarray(ckpt.params[name], dtype="<f8")
        if arr.shape != tuple(shape):
            raise CheckpointFormatError(f"tensor {name!r} has shape {arr.shape}, topology says {tuple(shape)}")
        parts.append(arr.tobytes())
    parts.append(struct.pack("<I", len(ckpt.optimizer)))
    for name in sorted(ckpt.optimizer):
        s = ckpt.optimizer[name]
        enc = name.encode()
        parts.append(struct.pack("<I", len(enc)) + enc + struct.pack("<Q", s.t))
        parts.append(np.asarray(s.m, dtype="<f8").tobytes())
        parts.append(np.asarray(s.v, dtype="<f8").tobytes())
    body = b"".join(parts)
    return MAGIC + body + struct.pack("<I", zlib.crc32(body))


def loads_checkpoint(buf: bytes) -> Checkpoint:
    if not buf.startswith(MAGIC[:7]):
        raise CheckpointFormatError("not a checkpoint file (bad magic)")
    if not buf.startswith(MAGIC):
        raise CheckpointVersionError(f"unsupported checkpoint magic {buf[:len(MAGIC)]!r}")
    if len(buf) < len(MAGIC) + 12:
        raise CheckpointChecksumError("checkpoint is truncated")
    body = buf[len(MAGIC):-4]
    (stored,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != stored:
        raise CheckpointChecksumError("checkpoint payload CRC mismatch (file truncated or corrupted)")
    (version,) = struct.unpack_from("<I", body, 0)
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    try:
        (hlen,) = struct.unpack_from("<I", body, 4)
        header = json.loads(body[8:8 + hlen].decode())
        pos = 8 + hlen
        topology = [(n, tuple(int(x) for x in s)) for n, s in header["topology"]]
        shapes = dict(topology)

        def take(shape):
            nonlocal pos
            count = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(body, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * count
            return arr

        params = {n: take(s) for n, s in topology}
        (n_opt,) = struct.unpack_from("<I", body, pos)
        pos += 4
        optimizer = {}
        for _ in range(n_opt):
            (ln,) = struct.unpack_from("<I", body, pos)
            name = body[pos + 4:pos + 4 + ln].decode()
            (t,) = struct.unpack_from("<Q", body, pos + 4 + ln)
            pos += 12 + ln
            if name not in shapes:
                raise CheckpointFormatError(f"optimizer state for unknown parameter {name!r}")
            m = take(shapes[name])
            v = take(shapes[name])
            optimizer[name] = AdamState(m, v, int(t))
    except (struct.error, ValueError, KeyError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointFormatError(f"malformed checkpoint: {exc}") from None
    if pos != len(body):
        raise CheckpointFormatError(f"{len(body) - pos} unexpected trailing bytes")
    return Checkpoint(topology, params, optimizer, list(header["provenance"]), header["config"], header["meta"],
                      version)


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    write_atomic(path, dumps_checkpoint(ckpt))


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    return loads_checkpoint(Path(path).read_bytes())
