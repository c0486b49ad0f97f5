"""Software emulation of 8-bit float training: E4M3 forward, E5M2 backward.

The codec is bit-level: each 8-bit code is sign(1) | exponent | mantissa.
E4M3 has no infinities and reserves only the all-ones code per sign for NaN;
E5M2 follows IEEE conventions (exponent all-ones means inf/NaN). Scaling is
"delayed": each tensor carries a ring buffer of recent absolute maxima and
its scale is max_finite / max(history), so the quantization grid tracks the
recent dynamic range rather than the current tensor.

Only GEMM inputs are quantized; accumulation and everything else stays in
the wide master precision.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tz
from .tensor import Tensor


@dataclass(frozen=True)
class Fp8Format:
    name: str
    exp_bits: int
    mantissa_bits: int
    bias: int
    has_infinity: bool

    @property
    def max_exp_field(self) -> int:
        return (1 << self.exp_bits) - 1

    @property
    def max_finite(self) -> float:
        if self.has_infinity:
            # top exponent field is inf/NaN; largest normal uses field max-1
            e = self.max_exp_field - 1 - self.bias
            frac = 1.0 + (2 ** self.mantissa_bits - 1) / 2 ** self.mantissa_bits
        else:
            # top exponent field is numeric; only the all-ones mantissa is NaN
            e = self.max_exp_field - self.bias
            frac = 1.0 + (2 ** self.mantissa_bits - 2) / 2 ** self.mantissa_bits
        return frac * 2.0 ** e

    @property
    def min_subnormal(self) -> float:
        return 2.0 ** (1 - self.bias - self.mantissa_bits)


E4M3 = Fp8Format("E4M3", exp_bits=4, mantissa_bits=3, bias=7, has_infinity=False)
E5M2 = Fp8Format("E5M2", exp_bits=5, mantissa_bits=2, bias=15, has_infinity=True)


def decode(codes, fmt: Fp8Format, scale: float = 1.0):
    """Map 8-bit codes to wide floats, dividing out ``scale``.

    NaN codes decode to NaN. E5M2 inf codes decode to +/-inf.
    """
    if scale <= 0:
        raise ValueError("scale must be positive")
    codes = np.asarray(codes, dtype=np.uint8)
    sign = np.where(codes & 0x80, -1.0, 1.0)
    e = ((codes >> fmt.mantissa_bits) & fmt.max_exp_field).astype(np.int64)
    m = (codes & ((1 << fmt.mantissa_bits) - 1)).astype(np.int64)
    frac = m / 2.0 ** fmt.mantissa_bits
    normal = e > 0
    mag = np.where(normal,
                   (1.0 + frac) * np.exp2(e - fmt.bias),
                   frac * 2.0 ** (1 - fmt.bias))
    out = sign * mag / scale
    if fmt.has_infinity:
        top = e == fmt.max_exp_field
        out = np.where(top & (m == 0), sign * np.inf, out)
        out = np.where(top & (m != 0), np.nan, out)
    else:
        nan_code = (e == fmt.max_exp_field) & (m == (1 << fmt.mantissa_bits) - 1)
        out = np.where(nan_code, np.nan, out)
    if out.ndim == 0:
        return float(out)
    return out


@dataclass
class EncodeResult:
    codes: np.ndarray
    saturations: int


def encode(x, fmt: Fp8Format, scale: float = 1.0) -> EncodeResult:
    """Round ``x * scale`` to the nearest code (ties to even mantissa).

    Overflow saturates to max_finite and is counted; NaN inputs map to the
    format's NaN code. Subnormals are representable down to min_subnormal.
    """
    if scale <= 0:
        raise ValueError("scale must be positive")
    x = np.asarray(x, dtype=np.float64)
    y = x * scale
    nan_mask = np.isnan(y)
    y = np.where(nan_mask, 0.0, y)
    sign_bit = (np.signbit(y)).astype(np.uint8) << 7
    a = np.abs(y)

    saturate = a > fmt.max_finite
    a = np.where(saturate, fmt.max_finite, a)

    # quantum for each magnitude: 2^(e - mantissa_bits), with the subnormal
    # range sharing the quantum of the lowest normal binade
    with np.errstate(divide="ignore"):
        e = np.floor(np.log2(np.where(a > 0, a, 1.0))).astype(np.int64)
    e = np.clip(e, 1 - fmt.bias, None)
    q = np.exp2(e - fmt.mantissa_bits)
    # round-to-nearest-even in units of the quantum
    n = np.rint(a / q)
    # mantissa overflow rolls into the next binade; recompute once
    carry = n >= 2 ** (fmt.mantissa_bits + 1)
    e = np.where(carry, e + 1, e)
    q = np.exp2(e - fmt.mantissa_bits)
    n = np.rint(a / q)
    val = n * q
    over = val > fmt.max_finite
    saturate = saturate | over
    val = np.where(over, fmt.max_finite, val)

    # reconstruct code fields from (e, n)
    is_sub = val < 2.0 ** (1 - fmt.bias)
    exp_field = np.where(is_sub, 0, e + fmt.bias).astype(np.int64)
    mant = np.where(is_sub,
                    np.rint(val / 2.0 ** (1 - fmt.bias) * 2 ** fmt.mantissa_bits),
                    n - 2 ** fmt.mantissa_bits).astype(np.int64)
    codes = (sign_bit | (exp_field << fmt.mantissa_bits).astype(np.uint8)
             | mant.astype(np.uint8))

    if fmt.has_infinity:
        nan_code = np.uint8((fmt.max_exp_field << fmt.mantissa_bits) | 1)
    else:
        nan_code = np.uint8((fmt.max_exp_field << fmt.mantissa_bits)
                            | ((1 << fmt.mantissa_bits) - 1))
    codes = np.where(nan_mask, nan_code, codes).astype(np.uint8)
    return EncodeResult(codes, int(np.sum(saturate)))


def quantize(x, fmt: Fp8Format, scale: float = 1.0):
    """encode followed by decode: snap values onto the scaled FP8 grid."""
    res = encode(x, fmt, scale)
    return decode(res.codes, fmt, scale), res.saturations


@dataclass
class Fp8Meta:
    """Per-tensor delayed-scaling state."""
    fmt: Fp8Format
    history_len: int = 128
    amax_history: list[float] = field(default_factory=list)
    scale: float = 1.0
    saturation_count: int = 0

    def update_scale(self, observed_amax: float) -> float:
        """Push an amax observation and recompute scale = max_finite / max(history)."""
        if observed_amax < 0:
            raise ValueError("amax must be non-negative")
        self.amax_history.append(float(observed_amax))
        if len(self.amax_history) > self.history_len:
            self.amax_history = self.amax_history[-self.history_len:]
        hist_max = max(self.amax_history, default=0.0)
        if hist_max > 0.0:
            self.scale = self.fmt.max_finite / hist_max
        return self.scale


def update_scale(meta: Fp8Meta, observed_amax: float) -> float:
    return meta.update_scale(observed_amax)


@dataclass
class Fp8LinearMeta:
    """Scaling state for one GEMM site: two E4M3 inputs, one E5M2 grad."""
    a: Fp8Meta
    b: Fp8Meta
    grad: Fp8Meta

    @staticmethod
    def fresh(history_len: int = 128) -> "Fp8LinearMeta":
        return Fp8LinearMeta(Fp8Meta(E4M3, history_len),
                             Fp8Meta(E4M3, history_len),
                             Fp8Meta(E5M2, history_len))


def _quantize_side(data: np.ndarray, meta: Fp8Meta):
    """Quantize one GEMM operand using the delayed scale, then record amax."""
    amax = float(np.max(np.abs(data))) if data.size else 0.0
    if amax == 0.0:
        # nothing representable; pass through untouched
        warnings.warn(f"fp8: all-zero tensor at {meta.fmt.name} site, passthrough",
                      RuntimeWarning, stacklevel=3)
        meta.update_scale(amax)
        return data
    q, sat = quantize(data, meta.fmt, meta.scale)
    meta.saturation_count += sat
    meta.update_scale(amax)
    return q


def fp8_linear(a: Tensor, b: Tensor, meta: Fp8LinearMeta) -> Tensor:
    """Matmul with E4M3-quantized inputs and E5M2-quantized incoming grads.

    The product and both grad GEMMs accumulate in wide precision; master
    parameters are never modified in place.
    """
    aq = _quantize_side(a.data, meta.a)
    bq = _quantize_side(b.data, meta.b)
    out_data = np.matmul(aq, bq)

    def backward(g: np.ndarray) -> None:
        gq = _quantize_side(g, meta.grad)
        if a.requires_grad:
            ga = np.matmul(gq, np.swapaxes(bq, -1, -2))
            a._accumulate(ga.reshape(a.shape))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                a2 = aq.reshape(-1, a.shape[-1])
                g2 = gq.reshape(-1, gq.shape[-1])
                b._accumulate(a2.T @ g2)
            else:
                b._accumulate(np.matmul(np.swapaxes(aq, -1, -2), gq))

    return Tensor._from_op(out_data, (a, b), "fp8_linear", backward)


def enumerate_codes(fmt: Fp8Format) -> np.ndarray:
    """Decode every 8-bit code at scale 1 (the full 256-entry table)."""
    return np.asarray(decode(np.arange(256, dtype=np.uint8), fmt, 1.0))


def selftest(verbose: bool = False) -> tuple[int, int, list[str]]:
    """Check the codec against a from-first-principles enumeration.

    Returns (n_ok, n_total, failures). The reference table below is built
    directly from the field definition sign * 2^(e-bias) * (1 + m/2^mb)
    (normals) and sign * 2^(1-bias) * m/2^mb (subnormals) -- independently
    of decode()'s arithmetic.
    """
    failures: list[str] = []
    n_ok = 0
    for fmt in (E4M3, E5M2):
        for code in range(256):
            sign = -1.0 if code & 0x80 else 1.0
            e = (code >> fmt.mantissa_bits) & fmt.max_exp_field
            m = code & ((1 << fmt.mantissa_bits) - 1)
            if fmt.has_infinity and e == fmt.max_exp_field:
                expect = sign * float("inf") if m == 0 else float("nan")
            elif (not fmt.has_infinity and e == fmt.max_exp_field
                  and m == (1 << fmt.mantissa_bits) - 1):
                expect = float("nan")
            elif e == 0:
                expect = sign * (m / 2 ** fmt.mantissa_bits) * 2.0 ** (1 - fmt.bias)
            else:
                expect = sign * (1 + m / 2 ** fmt.mantissa_bits) * 2.0 ** (e - fmt.bias)
            got = decode(np.uint8(code), fmt, 1.0)
            ok = (np.isnan(expect) and np.isnan(got)) or got == expect
            if ok and np.isfinite(expect):
                # canonical codes must round-trip through encode
                back = encode(got, fmt, 1.0).codes
                # +0 and -0 decode equal; accept either zero code
                if float(got) == 0.0:
                    ok = back in (0x00, 0x80)
                else:
                    ok = int(back) == code
            if ok:
                n_ok += 1
            else:
                failures.append(f"{fmt.name} code {code:#04x}: expect {expect}, got {got}")
    if verbose:
        for line in failures:
            print(line)
    return n_ok, 512, failures
