"""Binary checkpoints: weights, optimizer state, feature normalizers, and a config echo.

Layout (little-endian throughout)::

    b"AVPC"  u32 version
    u32 n    n bytes of UTF-8 JSON (config echo, sorted keys)
    u64 n    n float64 parameters
    u64 t    Adam step, then n float64 first moments and n float64 second moments
    u32 d    expert normalizer shift and scale, decoder normalizer shift and scale (d float64 each)
    u64      blake2b-8 checksum of everything above
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict
from typing import Optional

import numpy as np

from ..errors import CheckpointMismatch, ChecksumMismatch, SchemaMismatch, TruncatedFile
from .model import FeatureNorm, ModelDims, ModelParams

MAGIC = b"AVPC"
VERSION = 1


def _checksum(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def config_hash(echo: dict) -> str:
    """Stable hex digest of a config echo."""
    text = json.dumps(echo, sort_keys=True, separators=(",", ":"))
    return hashlib.blake2b(text.encode(), digest_size=8).hexdigest()


def _vec(a) -> bytes:
    return np.asarray(a, dtype="<f8").tobytes()


def checkpoint_bytes(params: ModelParams, echo: Optional[dict] = None) -> bytes:
    """Serialize ``params``. ``echo`` is stored next to the model dimensions."""
    doc = {"dims": asdict(params.dims), "config": echo or {}}
    meta = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    n = params.flat.size
    d = params.expert_norm.shift.size
    parts = [
        MAGIC,
        struct.pack("<I", VERSION),
        struct.pack("<I", len(meta)),
        meta,
        struct.pack("<Q", n),
        _vec(params.flat),
        struct.pack("<Q", params.adam.t),
        _vec(params.adam.m),
        _vec(params.adam.v),
        struct.pack("<I", d),
        _vec(params.expert_norm.shift),
        _vec(params.expert_norm.scale),
        _vec(params.decoder_norm.shift),
        _vec(params.decoder_norm.scale),
    ]
    data = b"".join(parts)
    return data + struct.pack("<Q", _checksum(data))


class _Cursor:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFile(f"checkpoint ends at byte {len(self.buf)}, needed {self.pos + n}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64)


def params_from_bytes(data: bytes, expect_config: Optional[dict] = None):
    """Inverse of :func:`checkpoint_bytes`. Returns ``(params, config_echo)``.

    With ``expect_config`` the stored echo must hash identically, otherwise
    :class:`CheckpointMismatch` is raised.
    """
    data = bytes(data)
    if len(data) < 4 + 4 + 8:
        raise TruncatedFile("checkpoint shorter than its fixed header and trailer")
    if data[:4] != MAGIC:
        raise SchemaMismatch("not a checkpoint (bad magic)")
    (stored,) = struct.unpack("<Q", data[-8:])
    if _checksum(data[:-8]) != stored:
        raise ChecksumMismatch("checkpoint checksum does not match its contents")
    c = _Cursor(data[:-8])
    c.take(4)
    (version,) = c.unpack("<I")
    if version != VERSION:
        raise SchemaMismatch(f"unsupported checkpoint version {version}")
    (mlen,) = c.unpack("<I")
    doc = json.loads(c.take(mlen).decode())
    dims_doc = doc["dims"]
    for key in ("expert_hidden", "decoder_hidden"):
        dims_doc[key] = tuple(dims_doc[key])
    dims = ModelDims(**dims_doc)
    echo = doc["config"]
    if expect_config is not None and config_hash(echo) != config_hash(expect_config):
        raise CheckpointMismatch(
            f"checkpoint config {config_hash(echo)} differs from the requested config {config_hash(expect_config)}"
        )
    params = ModelParams(dims, seed=None)
    (n,) = c.unpack("<Q")
    if n != params.flat.size:
        raise CheckpointMismatch(f"checkpoint holds {n} parameters, its dimensions imply {params.flat.size}")
    params.flat[:] = c.floats(n)
    (t,) = c.unpack("<Q")
    params.adam.t = int(t)
    params.adam.m[:] = c.floats(n)
    params.adam.v[:] = c.floats(n)
    (d,) = c.unpack("<I")
    params.expert_norm = FeatureNorm(c.floats(d), c.floats(d))
    params.decoder_norm = FeatureNorm(c.floats(d), c.floats(d))
    if c.pos != len(c.buf):
        raise ChecksumMismatch("trailing bytes after the checkpoint body")
    return params, echo


def save_checkpoint(params: ModelParams, path, echo: Optional[dict] = None) -> None:
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(params, echo))


def load_checkpoint(path, expect_config: Optional[dict] = None):
    with open(path, "rb") as f:
        return params_from_bytes(f.read(), expect_config)
