"""Versioned binary array container used by every checkpoint and database file.

The format is deliberately simple and byte-deterministic (no timestamps, no
compression), so identical arrays always serialize to identical files:

    magic 4s | version u32 | meta_len u32 | meta JSON utf-8
    | entry_count u32
    | per entry: name_len u16, name utf-8, dtype_len u8, dtype str,
      ndim u8, shape i64*ndim, payload nbytes u64, payload bytes (C order)

Entries are written sorted by name. Metadata is canonical JSON.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from privsem.errors import VersionError

MAGIC = b"PSAR"
VERSION = 1


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    meta_bytes = json.dumps(meta or {}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [MAGIC, struct.pack("<II", VERSION, len(meta_bytes)), meta_bytes,
              struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        name_b = name.encode("utf-8")
        dtype_b = arr.dtype.str.encode("ascii")
        chunks.append(struct.pack("<H", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<B", len(dtype_b)))
        chunks.append(dtype_b)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}q", *arr.shape))
        payload = arr.tobytes(order="C")
        chunks.append(struct.pack("<Q", len(payload)))
        chunks.append(payload)
    Path(path).write_bytes(b"".join(chunks))


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise VersionError(f"{path}: not an array container (bad magic)")
    off = 4
    version, meta_len = struct.unpack_from("<II", buf, off)
    off += 8
    if version != VERSION:
        raise VersionError(f"{path}: unsupported container version {version}")
    meta = json.loads(buf[off:off + meta_len].decode("utf-8"))
    off += meta_len
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + name_len].decode("utf-8")
        off += name_len
        (dtype_len,) = struct.unpack_from("<B", buf, off)
        off += 1
        dtype = np.dtype(buf[off:off + dtype_len].decode("ascii"))
        off += dtype_len
        (ndim,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}q", buf, off)
        off += 8 * ndim
        (nbytes,) = struct.unpack_from("<Q", buf, off)
        off += 8
        arr = np.frombuffer(buf[off:off + nbytes], dtype=dtype).reshape(shape).copy()
        off += nbytes
        arrays[name] = arr
    return arrays, meta


def save_state_dict(path: str | Path, state: dict, meta: dict | None = None) -> None:
    """Persist a torch state dict (tensors converted to numpy)."""
    arrays = {k: v.detach().cpu().numpy() for k, v in state.items()}
    save_arrays(path, arrays, meta)


def load_state_dict(path: str | Path) -> tuple[dict, dict]:
    import torch

    arrays, meta = load_arrays(path)
    state = {k: torch.from_numpy(v.copy()) for k, v in arrays.items()}
    return state, meta


def state_fingerprint(state: dict) -> str:
    """Stable hash of a parameter set, used to pin database features to an encoder."""
    import hashlib

    h = hashlib.sha256()
    for name in sorted(state):
        t = state[name]
        arr = t.detach().cpu().numpy() if hasattr(t, "detach") else np.asarray(t)
        h.update(name.encode("utf-8"))
        h.update(arr.tobytes(order="C"))
    return h.hexdigest()
