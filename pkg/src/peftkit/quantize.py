"""Block-wise symmetric 4-bit weight quantization and model-size accounting.

Weights are flattened row-major and cut into blocks of ``block_size``
elements. Each block stores one float32 scale (absmax / 7) and one signed
4-bit code per element in [-7, 7]; code -8 is never produced so the grid is
symmetric and the round-trip error is at most half a step.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError, UsageError
from .tensor import Tensor, make_result

DEFAULT_BLOCK_SIZE = 64
QMAX = 7
# elements dequantized per chunk in qmatmul / qlinear
_CHUNK_ELEMS = 4096


@dataclass(frozen=True)
class SizeModel:
    datatype_bits: int
    num_weights: int
    overhead_bytes: int = 0

    @property
    def total_bytes(self) -> int:
        return model_size_bytes(self.datatype_bits, self.num_weights, self.overhead_bytes)


def model_size_bytes(datatype_bits: int, num_weights: int, overhead_bytes: int = 0) -> int:
    """Bytes = datatype size x number of weights, plus overhead.

    A bit total that is not a whole number of bytes is rounded up.
    """
    if datatype_bits < 0 or num_weights < 0 or overhead_bytes < 0:
        raise UsageError("size inputs must be nonnegative")
    return -(-int(datatype_bits) * int(num_weights) // 8) + int(overhead_bytes)


def quantized_size_bytes(num_weights: int, block_size: int = DEFAULT_BLOCK_SIZE) -> int:
    """Packed 4-bit codes plus one float32 scale per block."""
    return model_size_bytes(4, num_weights, 4 * math.ceil(num_weights / block_size))


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def pack_nibbles(codes: np.ndarray) -> bytes:
    """Element 2i in the low nibble, 2i+1 in the high nibble, two's complement."""
    nib = (codes.astype(np.int16) & 0xF).astype(np.uint8)
    if nib.size % 2:
        nib = np.append(nib, np.uint8(0))
    return (nib[0::2] | (nib[1::2] << 4)).astype(np.uint8).tobytes()


def unpack_nibbles(packed: bytes | np.ndarray, count: int, start: int = 0) -> np.ndarray:
    """Signed codes for elements ``start .. start+count`` of a packed buffer."""
    raw = np.frombuffer(packed, dtype=np.uint8) if isinstance(packed, (bytes, bytearray)) else packed
    lo_byte, hi_byte = start // 2, (start + count + 1) // 2
    b = raw[lo_byte:hi_byte]
    nib = np.empty(2 * b.size, dtype=np.int8)
    nib[0::2] = b & 0xF
    nib[1::2] = b >> 4
    nib = nib[start % 2 : start % 2 + count]
    return np.where(nib >= 8, nib - 16, nib).astype(np.int8)


class QuantizedMatrix:
    """Immutable 4-bit block-quantized 2-D matrix."""

    __slots__ = ("shape", "block_size", "codes", "scales", "_raw")

    def __init__(self, shape: tuple[int, int], block_size: int, codes: bytes, scales: np.ndarray):
        rows, cols = shape
        n = rows * cols
        if len(codes) != math.ceil(n / 2):
            raise ShapeError(f"expected {math.ceil(n / 2)} code bytes for shape {shape}, got {len(codes)}")
        scales = np.asarray(scales, dtype=np.float32)
        if scales.shape != (math.ceil(n / block_size),):
            raise ShapeError(f"expected {math.ceil(n / block_size)} scales, got {scales.shape}")
        self.shape = (int(rows), int(cols))
        self.block_size = int(block_size)
        self.codes = bytes(codes)
        self.scales = scales
        self.scales.flags.writeable = False
        self._raw = np.frombuffer(self.codes, dtype=np.uint8)

    @property
    def num_weights(self) -> int:
        return self.shape[0] * self.shape[1]

    @property
    def nbytes(self) -> int:
        return len(self.codes) + 4 * self.scales.size

    def unpacked_codes(self) -> np.ndarray:
        return unpack_nibbles(self._raw, self.num_weights).reshape(self.shape)

    def dequantize_rows(self, r0: int, r1: int) -> np.ndarray:
        cols = self.shape[1]
        start, count = r0 * cols, (r1 - r0) * cols
        codes = unpack_nibbles(self._raw, count, start)
        block_ids = np.arange(start, start + count) // self.block_size
        return (codes.astype(np.float32) * self.scales[block_ids]).reshape(r1 - r0, cols)

    def row_chunks(self):
        step = max(1, _CHUNK_ELEMS // max(1, self.shape[1]))
        for r0 in range(0, self.shape[0], step):
            yield r0, min(self.shape[0], r0 + step)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, QuantizedMatrix)
            and self.shape == other.shape
            and self.block_size == other.block_size
            and self.codes == other.codes
            and np.array_equal(self.scales.view(np.uint32), other.scales.view(np.uint32))
        )

    def __repr__(self) -> str:
        return f"QuantizedMatrix(shape={self.shape}, block_size={self.block_size})"

    def to_bytes(self) -> bytes:
        """u64 rank + dims, packed codes, then little-endian float32 scales."""
        return (
            struct.pack("<QQQ", 2, *self.shape)
            + self.codes
            + np.ascontiguousarray(self.scales, dtype="<f4").tobytes()
        )

    @classmethod
    def from_bytes(cls, buf: bytes, block_size: int) -> QuantizedMatrix:
        rank, rows, cols = struct.unpack_from("<QQQ", buf, 0)
        if rank != 2:
            raise ShapeError(f"quantized tensors are 2-D, header says rank {rank}")
        n = rows * cols
        n_codes, n_scales = math.ceil(n / 2), math.ceil(n / block_size)
        if len(buf) != 24 + n_codes + 4 * n_scales:
            raise ShapeError(f"q4 payload length {len(buf)} inconsistent with shape ({rows}, {cols})")
        codes = buf[24 : 24 + n_codes]
        scales = np.frombuffer(buf, dtype="<f4", count=n_scales, offset=24 + n_codes).astype(np.float32)
        return cls((rows, cols), block_size, codes, scales)


def quantize_4bit(w: Tensor | np.ndarray, block_size: int = DEFAULT_BLOCK_SIZE) -> QuantizedMatrix:
    data = w.data if isinstance(w, Tensor) else np.asarray(w)
    if data.ndim != 2:
        raise ShapeError(f"quantize_4bit expects a 2-D matrix, got shape {data.shape}")
    if block_size < 1:
        raise UsageError("block_size must be >= 1")
    if not np.isfinite(data).all():
        raise NumericError("cannot quantize non-finite weights")
    flat = data.astype(np.float32).reshape(-1)
    n = flat.size
    n_blocks = math.ceil(n / block_size)
    padded = np.zeros(n_blocks * block_size, dtype=np.float32)
    padded[:n] = flat
    blocks = padded.reshape(n_blocks, block_size)
    absmax = np.abs(blocks).max(axis=1).astype(np.float64)
    scales = (absmax / QMAX).astype(np.float32)
    safe = np.where(scales == 0, 1.0, scales.astype(np.float64))[:, None]
    codes = np.clip(round_half_away(blocks / safe), -QMAX, QMAX).astype(np.int8)
    codes[scales == 0] = 0
    return QuantizedMatrix(data.shape, block_size, pack_nibbles(codes.reshape(-1)[:n]), scales)


def dequantize(q: QuantizedMatrix) -> Tensor:
    return Tensor(q.dequantize_rows(0, q.shape[0]))


def qmatmul(q: QuantizedMatrix, x: Tensor) -> Tensor:
    """``dequantize(q) @ x`` without materialising the full float matrix.

    Gradient flows to ``x`` only; the quantized weights are frozen.
    """
    rows, cols = q.shape
    if x.ndim < 2 or x.shape[-2] != cols:
        raise ShapeError(f"qmatmul dimension mismatch: {q.shape} @ {x.shape}")
    dtype = np.result_type(x.dtype, np.float32)
    out = np.empty(x.shape[:-2] + (rows, x.shape[-1]), dtype=dtype)
    for r0, r1 in q.row_chunks():
        out[..., r0:r1, :] = np.matmul(q.dequantize_rows(r0, r1), x.data)

    def backward(g):
        gx = np.zeros(x.shape, dtype=dtype)
        for r0, r1 in q.row_chunks():
            gx += np.matmul(q.dequantize_rows(r0, r1).T, g[..., r0:r1, :])
        return (gx,)

    return make_result(out, (x,), backward, "qmatmul")


def qlinear(x: Tensor, q: QuantizedMatrix) -> Tensor:
    """Row-activation form ``x @ dequantize(q).T`` used inside the model."""
    rows, cols = q.shape
    if x.shape[-1] != cols:
        raise ShapeError(f"qlinear dimension mismatch: {x.shape} against weight {q.shape}")
    dtype = np.result_type(x.dtype, np.float32)
    out = np.empty(x.shape[:-1] + (rows,), dtype=dtype)
    for r0, r1 in q.row_chunks():
        out[..., r0:r1] = x.data @ q.dequantize_rows(r0, r1).T

    def backward(g):
        gx = np.zeros(x.shape, dtype=dtype)
        for r0, r1 in q.row_chunks():
            gx += g[..., r0:r1] @ q.dequantize_rows(r0, r1)
        return (gx,)

    return make_result(out, (x,), backward, "qlinear")
