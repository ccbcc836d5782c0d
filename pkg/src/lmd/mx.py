"""Bit-exact Microscaling (MX) block quantization and bfloat16 rounding.

An MX block is k=32 low-precision element codes sharing one signed 8-bit
power-of-two scale. Supported element formats are FP6 E2M3 and FP4 E2M1, both
with exponent bias 1. The element decode already folds the bias in, so the
block scale is a pure exponent: value_i = 2^scale_exp * decode(code_i).

Everything here is pure-functional and rounds ties to even mantissa, matching
the usual emulation-library convention. Overflow at the element level
saturates (MX element formats have no infinities).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BLOCK_SIZE = 32
SCALE_MIN, SCALE_MAX = -128, 127

# Largest unbiased element exponent for E2M3/E2M1 (2-bit exponent, bias 1).
_EMAX_ELEM = 2


@dataclass(frozen=True)
class ElementFormat:
    """Low-precision floating-point element format (sign + exponent + mantissa)."""

    name: str
    exponent_bits: int
    mantissa_bits: int
    bias: int = 1

    @property
    def code_bits(self) -> int:
        return 1 + self.exponent_bits + self.mantissa_bits

    @property
    def num_codes(self) -> int:
        return 1 << self.code_bits

    @property
    def max_value(self) -> float:
        e_max = (1 << self.exponent_bits) - 1
        m_max = (1 << self.mantissa_bits) - 1
        return 2.0 ** (e_max - self.bias) * (1.0 + m_max / (1 << self.mantissa_bits))

    def decode_table(self) -> np.ndarray:
        """Decoded value of every code, indexed by code integer."""
        codes = np.arange(self.num_codes)
        return _decode(codes, self)

    def magnitude_grid(self) -> np.ndarray:
        """Sorted nonnegative representable magnitudes (the sign=0 half)."""
        return _decode(np.arange(self.num_codes // 2), self)


MXFP6_E2M3 = ElementFormat("MXFP6-E2M3", exponent_bits=2, mantissa_bits=3)
MXFP4_E2M1 = ElementFormat("MXFP4-E2M1", exponent_bits=2, mantissa_bits=1)

FORMATS = {"mxfp6": MXFP6_E2M3, "mxfp4": MXFP4_E2M1}


def _decode(codes: np.ndarray, fmt: ElementFormat) -> np.ndarray:
    m_bits = fmt.mantissa_bits
    m = codes & ((1 << m_bits) - 1)
    e = (codes >> m_bits) & ((1 << fmt.exponent_bits) - 1)
    s = codes >> (fmt.exponent_bits + m_bits)
    frac = m / (1 << m_bits)
    # e == 0 is subnormal: no implicit leading one, exponent 1 - bias.
    mag = np.where(e > 0, np.ldexp(1.0 + frac, e - fmt.bias), np.ldexp(frac, 1 - fmt.bias))
    return np.where(s > 0, -mag, mag)


def decode_element(code, fmt: ElementFormat):
    """Decoded real value of one code (or an array of codes)."""
    return _decode(np.asarray(code), fmt)


def encode_element(x, fmt: ElementFormat):
    """Nearest representable code, ties to even mantissa, saturating at max.

    The nonnegative code space is ordered by value, so adjacent candidates
    differ by one code and exactly one of them has an even mantissa LSB.
    """
    x = np.asarray(x, dtype=np.float64)
    if np.any(np.isnan(x)):
        raise ValueError("cannot encode NaN")
    grid = fmt.magnitude_grid()
    mag = np.abs(x)
    hi = np.searchsorted(grid, mag).clip(1, len(grid) - 1)
    lo = hi - 1
    d_lo = mag - grid[lo]
    d_hi = grid[hi] - mag
    code = np.where(d_lo < d_hi, lo, hi)
    tie = d_lo == d_hi
    if np.any(tie):
        even = np.where(lo % 2 == 0, lo, hi)
        code = np.where(tie, even, code)
    code = np.where(mag >= grid[-1], len(grid) - 1, code)
    sign_bit = np.signbit(x).astype(code.dtype) << (fmt.code_bits - 1)
    return code | sign_bit


@dataclass
class MxBlock:
    """One MX block: a shared power-of-two scale plus BLOCK_SIZE element codes."""

    fmt: ElementFormat
    scale_exp: int
    codes: np.ndarray = field(default_factory=lambda: np.zeros(BLOCK_SIZE, dtype=np.uint8))


def _block_scale_exp(max_abs: np.ndarray) -> np.ndarray:
    """floor(log2(max|v|)) - E_max_elem, clamped to INT8; 0 for all-zero blocks."""
    _, e = np.frexp(max_abs)  # max_abs = f * 2^e, f in [0.5, 1)
    scale = np.clip(e - 1 - _EMAX_ELEM, SCALE_MIN, SCALE_MAX)
    return np.where(max_abs == 0, 0, scale)


def quantize_block(values, fmt: ElementFormat) -> MxBlock:
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (BLOCK_SIZE,):
        raise ValueError(f"expected {BLOCK_SIZE} values, got shape {values.shape}")
    if not np.all(np.isfinite(values)):
        raise ValueError("block contains non-finite values")
    scale = int(_block_scale_exp(np.max(np.abs(values))))
    codes = encode_element(np.ldexp(values, -scale), fmt).astype(np.uint8)
    return MxBlock(fmt=fmt, scale_exp=scale, codes=codes)


def dequantize_block(block: MxBlock) -> np.ndarray:
    return np.ldexp(_decode(block.codes.astype(np.int64), block.fmt), block.scale_exp)


def quantize_dequantize(x: np.ndarray, fmt: ElementFormat, axis: int = -1) -> np.ndarray:
    """Round every length-32 block of ``x`` along ``axis`` through the MX grid.

    Ragged tails are zero-padded into a final short block (zeros never affect
    the shared scale of a nonzero block incorrectly since they encode to 0).
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("input contains non-finite values")
    x = np.moveaxis(x, axis, -1)
    n = x.shape[-1]
    pad = (-n) % BLOCK_SIZE
    if pad:
        x = np.concatenate([x, np.zeros(x.shape[:-1] + (pad,))], axis=-1)
    blocks = x.reshape(x.shape[:-1] + (-1, BLOCK_SIZE))
    scale = _block_scale_exp(np.max(np.abs(blocks), axis=-1, keepdims=True))
    codes = encode_element(np.ldexp(blocks, -scale), fmt)
    out = np.ldexp(_decode(codes, fmt), scale)
    out = out.reshape(x.shape)[..., :n]
    return np.moveaxis(out, -1, axis)


_BF16_MANT_BITS = 7
_BF16_MIN_NORMAL_EXP = -126
_BF16_MAX = 2.0**128


def round_bf16(x) -> np.ndarray:
    """Round to the nearest bfloat16 value (kept as float64), ties to even.

    Exponent range matches IEEE single precision; values below the normal
    range round on the fixed subnormal grid. Overflow returns signed infinity.
    """
    x = np.asarray(x, dtype=np.float64)
    if np.any(np.isnan(x)):
        raise ValueError("cannot round NaN")
    _, e = np.frexp(x)  # |x| = f * 2^e, f in [0.5, 1); unbiased exponent e - 1
    step_exp = np.maximum(e - 1, _BF16_MIN_NORMAL_EXP) - _BF16_MANT_BITS
    q = np.ldexp(np.round(np.ldexp(x, -step_exp)), step_exp)
    q = np.where(np.abs(q) >= _BF16_MAX, np.copysign(np.inf, x), q)
    return q if q.shape else q[()]


class IdentityHook:
    """Matmul hook that leaves operands and output untouched."""

    def transform_operand(self, x: np.ndarray, contraction_axis: int) -> np.ndarray:
        return x

    def transform_output(self, y: np.ndarray) -> np.ndarray:
        return y


class MxMatmulHook:
    """Forward-pass matmul transform: bf16 round, MX quantize-dequantize both
    operands along the contraction axis, then bf16-round the matmul output.

    Gradients are taken straight-through w.r.t. the untransformed operands;
    this hook only ever sees the forward path.
    """

    def __init__(self, fmt: ElementFormat):
        self.fmt = fmt

    def transform_operand(self, x: np.ndarray, contraction_axis: int) -> np.ndarray:
        return quantize_dequantize(round_bf16(x), self.fmt, axis=contraction_axis)

    def transform_output(self, y: np.ndarray) -> np.ndarray:
        return round_bf16(y)


def make_hook(precision: str):
    """Map a precision tag (full | mxfp6 | mxfp4) to a matmul hook."""
    if precision == "full":
        return IdentityHook()
    try:
        return MxMatmulHook(FORMATS[precision])
    except KeyError:
        raise ValueError(f"unknown forward precision {precision!r}") from None


def format_block_dump(block: MxBlock) -> str:
    """Textual dump: header line then one `index, code(hex), decoded` per element."""
    lines = [f"format={block.fmt.name} scale_exp={block.scale_exp}"]
    decoded = dequantize_block(block)
    for i, (c, v) in enumerate(zip(block.codes, decoded)):
        lines.append(f"{i}, 0x{int(c):02x}, {float(v)!r}")
    return "\n".join(lines)
