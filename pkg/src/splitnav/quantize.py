"""Affine uint8 quantization for transmitted tensors.

The quantization range always includes zero, so the uint8 zero point is
exactly representable and the roundtrip error stays within scale/2.  A
constant tensor lands exactly on a range edge and roundtrips bit-exactly;
an all-zero tensor is encoded with scale 0, which the dequantize formula
maps back to zeros with no special casing.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, NumericFault


def round_half_away(v: np.ndarray | float) -> np.ndarray:
    """Round to nearest with ties away from zero (np.round ties to even)."""
    return np.copysign(np.floor(np.abs(v) + 0.5), v)


@dataclass
class QuantizedTensor:
    """A uint8-coded tensor: value = (code - zero_point) * scale."""
    shape: tuple[int, ...]
    data: np.ndarray  # uint8, C order, data.size == prod(shape)
    scale: float
    zero_point: int

    @property
    def nbytes(self) -> int:
        return self.data.size

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        if self.data.dtype != np.uint8:
            raise ConfigurationError(f"quantized payload must be uint8, got {self.data.dtype}")
        if self.data.size != int(np.prod(self.shape, dtype=np.int64)):
            raise ConfigurationError(
                f"payload size {self.data.size} does not match shape {self.shape}")
        if not 0 <= self.zero_point <= 255:
            raise ConfigurationError(f"zero point {self.zero_point} outside uint8 range")


def quantize(x: np.ndarray) -> QuantizedTensor:
    """Quantize a float tensor to uint8 with a zero-anchored affine range."""
    x = np.asarray(x, dtype=np.float32)
    if x.size == 0:
        raise ConfigurationError("cannot quantize an empty tensor")
    if not np.isfinite(x).all():
        raise NumericFault("non-finite values in tensor to quantize")
    lo = min(float(x.min()), 0.0)
    hi = max(float(x.max()), 0.0)
    if hi == lo:  # all zeros
        return QuantizedTensor(x.shape, np.zeros(x.size, dtype=np.uint8), 0.0, 0)
    # the recorded wire scale is float32; quantize against that exact value
    scale = float(np.float32((hi - lo) / 255.0))
    zp = int(round_half_away(-lo / scale))
    zp = min(max(zp, 0), 255)
    codes = round_half_away(x.astype(np.float64).ravel() / scale + zp)
    q = np.clip(codes, 0, 255).astype(np.uint8)
    return QuantizedTensor(x.shape, q, scale, zp)


def dequantize(qt: QuantizedTensor) -> np.ndarray:
    """Recover the float32 tensor from its uint8 coding."""
    vals = (qt.data.astype(np.float32) - np.float32(qt.zero_point)) * np.float32(qt.scale)
    return vals.reshape(qt.shape)
