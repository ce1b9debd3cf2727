"""Portable binary weights file.

Layout, all integers little-endian:

    magic "SNRW" | version u32 | tensor count u32
    per tensor: name length u32 | UTF-8 name | rank u32 | dims u32[rank]
                | float32 payload (row-major)
    CRC32 u32 of every preceding byte

Parameters and batch-norm running statistics are stored together under
their registry names; trainable flags are architecture-derived and not
stored. Roundtrip is bit-exact for float32 networks.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from sonores.network import Network

MAGIC = b"SNRW"
VERSION = 1


class WeightsFormatError(ValueError):
    """File is not a valid weights file (magic, version, or structure)."""


class WeightsCorruptError(ValueError):
    """Checksum mismatch: the file content is damaged."""


class WeightsShapeError(ValueError):
    """A stored tensor does not match the target architecture."""


def _named_tensors(net: Network) -> dict[str, np.ndarray]:
    out = {name: p.data for name, p in net.params.items()}
    for name, bn in net.bn_states.items():
        out[f"{name}.running_mean"] = bn.running_mean
        out[f"{name}.running_var"] = bn.running_var
    return out


def save_weights(net: Network, path) -> None:
    blob = bytearray()
    tensors = _named_tensors(net)
    blob += MAGIC
    blob += struct.pack("<II", VERSION, len(tensors))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        blob += struct.pack("<I", len(raw))
        blob += raw
        blob += struct.pack("<I", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    blob += struct.pack("<I", zlib.crc32(bytes(blob)) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def read_weights_file(path) -> dict[str, np.ndarray]:
    """Parse a weights file into name -> float32 array, verifying the CRC."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise WeightsFormatError(f"{path}: missing SNRW magic bytes")
    (stored_crc,) = struct.unpack("<I", blob[-4:])
    actual_crc = zlib.crc32(blob[:-4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise WeightsCorruptError(
            f"{path}: CRC mismatch (stored {stored_crc:#010x}, computed {actual_crc:#010x})"
        )
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise WeightsFormatError(f"{path}: unsupported format version {version}")
    pos = 12
    tensors: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f4", count=n, offset=pos).reshape(dims)
            pos += 4 * n
            tensors[name] = arr
    except (struct.error, ValueError) as exc:
        raise WeightsFormatError(f"{path}: truncated or malformed tensor table ({exc})")
    if pos != len(blob) - 4:
        raise WeightsFormatError(f"{path}: trailing bytes after tensor table")
    return tensors


def load_weights(path, net: Network) -> Network:
    """Load a weights file into ``net``; shapes must match exactly."""
    tensors = read_weights_file(path)
    expected = _named_tensors(net)
    missing = sorted(set(expected) - set(tensors))
    extra = sorted(set(tensors) - set(expected))
    if missing or extra:
        raise WeightsShapeError(
            f"{path}: tensor table mismatch (missing {missing[:5]}, unexpected {extra[:5]})"
        )
    for name, arr in tensors.items():
        if arr.shape != expected[name].shape:
            raise WeightsShapeError(
                f"{path}: tensor {name!r} has shape {arr.shape}, expected {expected[name].shape}"
            )
    for name, p in net.params.items():
        p.data = tensors[name].astype(net.dtype)
    for name, bn in net.bn_states.items():
        bn.running_mean = tensors[f"{name}.running_mean"].astype(net.dtype)
        bn.running_var = tensors[f"{name}.running_var"].astype(net.dtype)
    return net
