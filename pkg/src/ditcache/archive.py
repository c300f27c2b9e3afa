"""Frozen binary trace-archive format, version 1.

Little-endian throughout; all reals are 32-bit. Layout:

    magic        4 bytes  b"SPDT"
    version      u32      1
    n_steps      u32
    n_layers     u32
    n_tokens     u32
    d_model      u32
    schedule     (n_steps + 1) * f32
    records      n_steps times:
        timestep     f32
        query bitmap ceil(n_tokens / 8) bytes, LSB-first token order
        received     n_layers * n_tokens * f32, layer-major
        outputs      n_tokens * d_model * f32, token-major
    final latent n_tokens * d_model * f32
    EOF          trailing bytes are a format error

Write -> read -> write is byte-identical; every parse failure names the byte
offset. The layout is frozen: readers reject any other version.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ArchiveFormatError, UnsupportedVersionError
from .trace import StepRecord, TraceArchive

MAGIC = b"SPDT"
VERSION = 1
_HEADER = struct.Struct("<4sIIIII")
_MAX_DIM = 1 << 20  # sanity bound against garbage headers


def _bitmap_bytes(n_tokens: int) -> int:
    return (n_tokens + 7) // 8


def archive_write(archive: TraceArchive, path) -> None:
    """Serialize a complete archive (validates first)."""
    archive.validate()
    if archive.final_latent is None:
        raise ArchiveFormatError("archive has no final latent to serialize")
    n = archive.n_tokens
    parts = [_HEADER.pack(MAGIC, VERSION, archive.n_steps, archive.n_layers,
                          n, archive.d_model)]
    parts.append(np.asarray(archive.schedule, dtype="<f4").tobytes())
    for rec in archive.records:
        parts.append(struct.pack("<f", rec.timestep))
        mask = np.zeros(n, dtype=np.uint8)
        mask[rec.query_ids] = 1
        parts.append(np.packbits(mask, bitorder="little").tobytes())
        parts.append(np.ascontiguousarray(rec.received, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(rec.outputs, dtype="<f4").tobytes())
    parts.append(np.ascontiguousarray(archive.final_latent, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, count: int, what: str) -> bytes:
        if self.pos + count > len(self.data):
            raise ArchiveFormatError(
                f"truncated archive while reading {what}: need {count} bytes, "
                f"have {len(self.data) - self.pos}",
                offset=self.pos,
            )
        chunk = self.data[self.pos: self.pos + count]
        self.pos += count
        return chunk

    def take_f32(self, count: int, what: str) -> np.ndarray:
        raw = self.take(4 * count, what)
        return np.frombuffer(raw, dtype="<f4").copy()


def archive_read(path) -> TraceArchive:
    """Parse an archive file; raises ArchiveFormatError with the byte offset."""
    cur = _Cursor(Path(path).read_bytes())
    magic, version, n_steps, n_layers, n_tokens, d_model = _HEADER.unpack(
        cur.take(_HEADER.size, "header")
    )
    if magic != MAGIC:
        raise ArchiveFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    if version != VERSION:
        raise UnsupportedVersionError(
            f"unsupported archive version {version}, reader supports {VERSION}", offset=4
        )
    for name, value in (("n_steps", n_steps), ("n_layers", n_layers),
                        ("n_tokens", n_tokens), ("d_model", d_model)):
        if value < 1 or value > _MAX_DIM:
            raise ArchiveFormatError(f"implausible {name} = {value}", offset=8)

    schedule = cur.take_f32(n_steps + 1, "schedule")
    archive = TraceArchive(n_layers=n_layers, n_tokens=n_tokens, d_model=d_model,
                           schedule=schedule)
    bm_bytes = _bitmap_bytes(n_tokens)
    for k in range(n_steps):
        (timestep,) = struct.unpack("<f", cur.take(4, f"record {k} timestep"))
        bits = np.unpackbits(
            np.frombuffer(cur.take(bm_bytes, f"record {k} bitmap"), dtype=np.uint8),
            bitorder="little",
        )[:n_tokens]
        received = cur.take_f32(n_layers * n_tokens, f"record {k} attention")
        outputs = cur.take_f32(n_tokens * d_model, f"record {k} outputs")
        archive.records.append(StepRecord(
            timestep=timestep,
            query_ids=np.flatnonzero(bits).astype(np.int64),
            received=received.reshape(n_layers, n_tokens),
            outputs=outputs.reshape(n_tokens, d_model),
        ))
    archive.final_latent = cur.take_f32(
        n_tokens * d_model, "final latent"
    ).reshape(n_tokens, d_model)
    if cur.pos != len(cur.data):
        raise ArchiveFormatError(
            f"{len(cur.data) - cur.pos} unexpected trailing bytes", offset=cur.pos
        )
    return archive
