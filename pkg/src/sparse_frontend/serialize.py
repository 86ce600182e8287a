"""Little-endian binary containers for dictionaries and model weights.

Dictionary file (magic ``SCFD``): version u32, patch_dim u32, atom count
u32, then patch_dim*L float32 atom entries column-major, then L float32
per-atom l1 norms.

Weight container (magic ``SCFW``): version u32, header length u32, a UTF-8
JSON header (config hash, optional dictionary file reference, array
manifest), then the arrays as float32 in manifest order, C-contiguous.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

SCFD_MAGIC = b"SCFD"
SCFW_MAGIC = b"SCFW"
FORMAT_VERSION = 1


class ContainerError(ValueError):
    """Raised on malformed container files."""


def save_dictionary_file(path, atoms: np.ndarray) -> None:
    """Write atoms as float32; l1 norms are recomputed from the cast atoms
    so the stored norms always match the stored entries bit-for-bit."""
    atoms32 = np.asarray(atoms).astype("<f4")
    patch_dim, count = atoms32.shape
    l1_norms = np.abs(atoms32).sum(axis=0, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(SCFD_MAGIC)
        fh.write(struct.pack("<III", FORMAT_VERSION, patch_dim, count))
        fh.write(atoms32.ravel(order="F").tobytes())
        fh.write(l1_norms.astype("<f4").tobytes())


def load_dictionary_file(path) -> tuple[np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != SCFD_MAGIC:
        raise ContainerError(f"{path}: bad magic {raw[:4]!r}")
    version, patch_dim, count = struct.unpack_from("<III", raw, 4)
    if version != FORMAT_VERSION:
        raise ContainerError(f"{path}: unsupported version {version}")
    expected = 16 + 4 * patch_dim * count + 4 * count
    if len(raw) != expected:
        raise ContainerError(f"{path}: expected {expected} bytes, found {len(raw)}")
    body = np.frombuffer(raw, dtype="<f4", offset=16)
    atoms = body[: patch_dim * count].reshape(patch_dim, count, order="F")
    l1 = body[patch_dim * count :]
    return np.array(atoms), np.array(l1)


def save_weights_file(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Write named float arrays plus a JSON metadata header."""
    manifest = [{"name": k, "shape": list(np.asarray(v).shape)} for k, v in arrays.items()]
    header = dict(meta)
    header["arrays"] = manifest
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(SCFW_MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for k in arrays:
            fh.write(np.ascontiguousarray(arrays[k]).astype("<f4").tobytes())


def load_weights_file(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != SCFW_MAGIC:
        raise ContainerError(f"{path}: bad magic {raw[:4]!r}")
    version, header_len = struct.unpack_from("<II", raw, 4)
    if version != FORMAT_VERSION:
        raise ContainerError(f"{path}: unsupported version {version}")
    header = json.loads(raw[12 : 12 + header_len].decode("utf-8"))
    offset = 12 + header_len
    arrays: dict[str, np.ndarray] = {}
    for entry in header.pop("arrays"):
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        arrays[entry["name"]] = np.array(arr).reshape(shape)
        offset += 4 * count
    if offset != len(raw):
        raise ContainerError(f"{path}: {len(raw) - offset} trailing bytes")
    return header, arrays
