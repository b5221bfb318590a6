"""Binary checkpoint format.

Layout (little-endian)::

    b"HBAF" | u32 version | u64 len | config text (utf-8, sorted key=value lines)
    | u32 n_arrays | n_arrays x (u32 name len | name | u32 ndim | ndim x u64 | f64 data)
    | 8-byte BLAKE2b digest of everything before it
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from hbaflow.model import HBAFlowModel, ModelConfig

MAGIC = b"HBAF"
VERSION = 1


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


def _digest(b: bytes) -> bytes:
    return hashlib.blake2b(b, digest_size=8).digest()


def encode(config: Mapping[str, str], arrays: Mapping[str, np.ndarray]) -> bytes:
    text = "".join(f"{k}={config[k]}\n" for k in sorted(config)).encode("utf-8")
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(text)), text,
             struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(a.tobytes())
    body = b"".join(parts)
    return body + _digest(body)


def decode(blob: bytes) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    if len(blob) < 4 + 12 + 8 or blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic or truncated)")
    body, tail = blob[:-8], blob[-8:]
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise VersionError(f"checkpoint format version {version}, expected {VERSION}")
    if _digest(body) != tail:
        raise ChecksumError("checkpoint checksum mismatch (corrupted or truncated)")
    try:
        (tlen,) = struct.unpack_from("<Q", body, 8)
        off = 16
        text = body[off:off + tlen].decode("utf-8")
        off += tlen
        config = {}
        for line in text.splitlines():
            k, _, v = line.partition("=")
            config[k] = v
        (n,) = struct.unpack_from("<I", body, off)
        off += 4
        arrays = {}
        for _ in range(n):
            (ln,) = struct.unpack_from("<I", body, off)
            off += 4
            name = body[off:off + ln].decode("utf-8")
            off += ln
            (ndim,) = struct.unpack_from("<I", body, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}Q", body, off)
            off += 8 * ndim
            count = int(np.prod(shape)) if ndim else 1
            arrays[name] = np.frombuffer(body, "<f8", count, off).reshape(shape).astype(np.float64)
            off += 8 * count
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from None
    if off != len(body):
        raise CheckpointError("trailing bytes in checkpoint")
    return config, arrays


def save_checkpoint(model: HBAFlowModel, path: str | Path, extra: Mapping[str, str] | None = None,
                    extra_arrays: Mapping[str, np.ndarray] | None = None) -> None:
    config = {f"model.{k}": v for k, v in model.config.to_text().items()}
    for k, v in (extra or {}).items():
        config[k] = str(v)
    arrays = {f"param.{k}": v for k, v in model.params.items()}
    for k, v in (extra_arrays or {}).items():
        arrays[k] = v
    Path(path).write_bytes(encode(config, arrays))


def load_checkpoint(path: str | Path, with_extra: bool = False):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    config, arrays = decode(path.read_bytes())
    cfg = ModelConfig.from_text({k[6:]: v for k, v in config.items() if k.startswith("model.")})
    params = {k[6:]: v for k, v in arrays.items() if k.startswith("param.")}
    model = HBAFlowModel(cfg, params=params)
    missing = set(model.init_params(0)) - set(params)
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)[:3]}...")
    if not with_extra:
        return model
    extra = {k: v for k, v in config.items() if not k.startswith("model.")}
    extra_arrays = {k: v for k, v in arrays.items() if not k.startswith("param.")}
    return model, extra, extra_arrays
