"""Binary tensor files (``.f64`` and ``.mx``).

Layout, all integers little-endian::

    offset  size  field
    0       4     magic b"MXTF"
    4       1     version (1)
    5       1     format id: 0 INT8, 1 FP8_E5M2, 2 FP8_E4M3, 3 FP6_E3M2,
                  4 FP6_E2M3, 5 FP4_E2M1, 255 raw FP64
    6       1     block axis: 1 = blocks run along a row, 0 = along a column
                  (always 1 for FP64)
    7       1     reserved, 0
    8       4     rows (u32)
    12      4     cols (u32)
    16      ...   payload

FP64 payload: ``rows * cols`` float64 values, row-major.

MX payload: blocks in order. With axis 1 that is row 0 block 0, row 0
block 1, ..., then row 1; with axis 0 it is column 0 block 0, column 0
block 1, ... Each block is one shared-exponent byte followed by the 32
element codes packed LSB-first into ``32 * bits / 8`` bytes (32, 24 or 16
bytes). The blocked dimension is zero-padded to a multiple of 32.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .blocks import BLOCK_SIZE, MxMatrix
from .formats import get_format

__all__ = ["MAGIC", "FP64_ID", "TensorFileError", "write_f64", "read_f64", "write_mx", "read_mx", "read_any", "pack_codes", "unpack_codes"]

MAGIC = b"MXTF"
VERSION = 1
FP64_ID = 255
_HEADER = struct.Struct("<4sBBBBII")


class TensorFileError(ValueError):
    pass


def pack_codes(codes, bits: int) -> bytes:
    acc = 0
    for i, c in enumerate(codes):
        acc |= int(c) << (i * bits)
    return acc.to_bytes(len(codes) * bits // 8, "little")


def unpack_codes(data: bytes, bits: int, count: int) -> list[int]:
    acc = int.from_bytes(data, "little")
    mask = (1 << bits) - 1
    return [(acc >> (i * bits)) & mask for i in range(count)]


def write_f64(path, matrix) -> None:
    m = np.ascontiguousarray(matrix, dtype="<f8")
    if m.ndim == 1:
        m = m.reshape(1, -1)
    header = _HEADER.pack(MAGIC, VERSION, FP64_ID, 1, 0, m.shape[0], m.shape[1])
    Path(path).write_bytes(header + m.tobytes())


def _read_header(data: bytes):
    if len(data) < _HEADER.size:
        raise TensorFileError("file too short for a tensor header")
    magic, version, fid, axis, _, rows, cols = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise TensorFileError(f"bad magic {magic!r}")
    if version != VERSION:
        raise TensorFileError(f"unsupported version {version}")
    return fid, axis, rows, cols


def read_f64(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fid, _, rows, cols = _read_header(data)
    if fid != FP64_ID:
        raise TensorFileError(f"{path} holds MX data, not FP64")
    body = data[_HEADER.size:]
    if len(body) != rows * cols * 8:
        raise TensorFileError(f"payload size {len(body)} does not match {rows}x{cols}")
    return np.frombuffer(body, dtype="<f8").reshape(rows, cols).astype(np.float64)


def write_mx(path, mx: MxMatrix) -> None:
    bits = mx.format.total_bits
    out = [_HEADER.pack(MAGIC, VERSION, mx.format.format_id, mx.axis, 0, mx.rows, mx.cols)]
    if mx.axis == 1:
        for i in range(mx.rows):
            for b in range(mx.nblocks):
                out.append(bytes([int(mx.scales[i, b])]))
                out.append(pack_codes(mx.codes[i, b * BLOCK_SIZE:(b + 1) * BLOCK_SIZE], bits))
    else:
        for j in range(mx.cols):
            for b in range(mx.nblocks):
                out.append(bytes([int(mx.scales[b, j])]))
                out.append(pack_codes(mx.codes[b * BLOCK_SIZE:(b + 1) * BLOCK_SIZE, j], bits))
    Path(path).write_bytes(b"".join(out))


def read_mx(path) -> MxMatrix:
    data = Path(path).read_bytes()
    fid, axis, rows, cols = _read_header(data)
    if fid == FP64_ID:
        raise TensorFileError(f"{path} holds FP64 data, not MX")
    spec = get_format(fid)
    if axis not in (0, 1):
        raise TensorFileError(f"bad block axis {axis}")
    bits = spec.total_bits
    lines, length = (rows, cols) if axis == 1 else (cols, rows)
    nblocks = -(-length // BLOCK_SIZE)
    block_bytes = 1 + BLOCK_SIZE * bits // 8
    body = data[_HEADER.size:]
    if len(body) != lines * nblocks * block_bytes:
        raise TensorFileError("payload size does not match header")
    codes = np.zeros((lines, nblocks * BLOCK_SIZE), dtype=np.int64)
    scales = np.zeros((lines, nblocks), dtype=np.int64)
    pos = 0
    for i in range(lines):
        for b in range(nblocks):
            scales[i, b] = body[pos]
            codes[i, b * BLOCK_SIZE:(b + 1) * BLOCK_SIZE] = unpack_codes(body[pos + 1:pos + block_bytes], bits, BLOCK_SIZE)
            pos += block_bytes
    if axis == 0:
        codes, scales = codes.T.copy(), scales.T.copy()
    return MxMatrix(spec, rows, cols, axis, codes, scales)


def read_any(path):
    """Return an ``np.ndarray`` for FP64 files or an :class:`MxMatrix`."""
    data = Path(path).read_bytes()
    fid, _, _, _ = _read_header(data)
    return read_f64(path) if fid == FP64_ID else read_mx(path)
