"""Learned uniform quantization with straight-through gradients.

The staircase maps x to e^s * round(clip(x / e^s, b, 1) * n) / n with
n = 2^(nb-1) - 1 and lower bound b in {-1, 0}.  Rounding is half away
from zero everywhere (numpy's default rounds half to even, so the
rounding is spelled out here and reused by every consumer: training
fake-quant, code extraction, and threshold compilation).

A layer's weight tensor is the full-precision shadow copy: the optimizer
only ever updates it, and the quantized view is recomputed from it on
every forward (`sync_shadow`).
"""

from __future__ import annotations

import math

import numpy as np

from .errors import UsageError
from .tensor import Tensor, _record, tape_active

LOWER_BOUNDS = (-1.0, 0.0)


def round_half_away(v):
    """Round to nearest integer, ties away from zero; dtype preserved.

    -0.0 results are normalized to +0.0 so code/value round trips stay
    bit-stable.
    """
    v = np.asarray(v)
    out = np.copysign(np.floor(np.abs(v) + v.dtype.type(0.5)), v)
    return out + v.dtype.type(0.0)


class QuantConfig:
    """One learned quantizer: bitwidth, lower bound, log-scale.

    The scale is stored as a 0-d tensor s with e^s the positive clip
    range; s is learnable unless the config is frozen (shared residual
    joins).  A config starts uninitialized (s is None) and gets its
    scale attached from data via `init_scale_from`.
    """

    def __init__(self, nb: int, lower_bound: float, s: Tensor | None = None,
                 trainable: bool = True):
        self.set_bitwidth(nb)
        if float(lower_bound) not in LOWER_BOUNDS:
            raise UsageError(f"lower bound must be -1 or 0, got {lower_bound}")
        self.lower_bound = float(lower_bound)
        self.s = s
        self.trainable = bool(trainable)

    def set_bitwidth(self, nb: int):
        nb = int(nb)
        if nb < 2:
            raise UsageError(f"bitwidth must be >= 2, got {nb}")
        if nb > 8:
            # codes are stored as signed 8-bit; |code| <= 2^7 - 1
            raise UsageError(f"bitwidth must be <= 8 for 8-bit code storage, got {nb}")
        self.nb = nb

    @property
    def n(self) -> int:
        return 2 ** (self.nb - 1) - 1

    @property
    def initialized(self) -> bool:
        return self.s is not None

    def _require_scale(self):
        if self.s is None:
            raise UsageError("quantizer used before its scale was initialized")

    @property
    def scale32(self) -> np.float32:
        self._require_scale()
        return np.exp(self.s.data.astype(np.float32))

    @property
    def scale64(self) -> float:
        self._require_scale()
        return math.exp(float(self.s.data))

    @property
    def lsb32(self) -> np.float32:
        """Quantization interval e^s / n (the noise model's LSB)."""
        return np.float32(self.scale32 / np.float32(self.n))

    def init_scale_from(self, values: np.ndarray):
        """Attach s = ln(max |values|); zero input falls back to s = 0."""
        m = float(np.max(np.abs(values))) if np.asarray(values).size else 0.0
        s0 = math.log(m) if m > 0.0 else 0.0
        self.s = Tensor(np.float32(s0), requires_grad=self.trainable)

    def set_scale(self, s_value: float):
        self.s = Tensor(np.float32(s_value), requires_grad=self.trainable)

    def clone(self) -> "QuantConfig":
        s = None
        if self.s is not None:
            s = Tensor(self.s.data.copy(), requires_grad=self.s.requires_grad)
        return QuantConfig(self.nb, self.lower_bound, s=s, trainable=self.trainable)

    def describe(self) -> dict:
        d = {"nb": self.nb, "lower_bound": self.lower_bound,
             "trainable": self.trainable}
        if self.s is not None:
            d["s"] = float(self.s.data)
        return d

    def __repr__(self):
        s = f"{float(self.s.data):.4f}" if self.s is not None else "uninit"
        return f"QuantConfig(nb={self.nb}, b={self.lower_bound:g}, s={s})"


def quantize_core(x, lower_bound: float, nb: int):
    """round(clip(x, b, 1) * n) / n on the unit range; dtype preserved."""
    if float(lower_bound) not in LOWER_BOUNDS:
        raise UsageError(f"lower bound must be -1 or 0, got {lower_bound}")
    nb = int(nb)
    if nb < 2:
        raise UsageError(f"bitwidth must be >= 2, got {nb}")
    x = np.asarray(x)
    n = x.dtype.type(2 ** (nb - 1) - 1)
    clipped = np.clip(x, x.dtype.type(lower_bound), x.dtype.type(1.0))
    return round_half_away(clipped * n) / n


def _codes_f32(x: np.ndarray, cfg: QuantConfig) -> np.ndarray:
    """Integer-valued float32 codes round(clip(x/e^s, b, 1) * n)."""
    r = x / cfg.scale32
    clipped = np.clip(r, np.float32(cfg.lower_bound), np.float32(1.0))
    return round_half_away(clipped * np.float32(cfg.n))


def _dequantize_f32(codes_f32: np.ndarray, cfg: QuantConfig) -> np.ndarray:
    # canonical expression; to_integer_codes round trips rely on it bit for bit
    return (cfg.scale32 * (codes_f32 / np.float32(cfg.n))).astype(np.float32)


def quantize_array(x: np.ndarray, cfg: QuantConfig) -> np.ndarray:
    """Forward staircase on a plain float32 array (no tape)."""
    return _dequantize_f32(_codes_f32(np.asarray(x, dtype=np.float32), cfg), cfg)


def to_integer_codes(x, cfg: QuantConfig) -> np.ndarray:
    """Signed 8-bit codes k with e^s * k / n == learned_quantize(x) exactly."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float32)
    return _codes_f32(data, cfg).astype(np.int8)


def dequantize_codes(codes: np.ndarray, cfg: QuantConfig) -> np.ndarray:
    """float32 grid values for integer codes (same expression as forward)."""
    return _dequantize_f32(codes.astype(np.float32), cfg)


def code64(y, cfg: QuantConfig) -> np.ndarray:
    """64-bit reference rule: integer output code for real input y.

    This single function defines what a quantized activation *is* during
    bit-exact evaluation; threshold compilation and the integer executor
    are verified against it.
    """
    y = np.asarray(y, dtype=np.float64)
    r = y / cfg.scale64
    clipped = np.clip(r, float(cfg.lower_bound), 1.0)
    return round_half_away(clipped * float(cfg.n)).astype(np.int64)


def learned_quantize_backward(upstream, x, cfg: QuantConfig):
    """Straight-through surrogate gradients for the staircase.

    The surrogate is e^s * clip(x/e^s, b, 1): inside the clip range the
    input gradient passes through unchanged and s gets nothing; clipped
    high contributes upstream * e^s to s, clipped low upstream * b * e^s.
    """
    x = np.asarray(x, dtype=np.float32)
    upstream = np.asarray(upstream, dtype=np.float32)
    scale = cfg.scale32
    r = x / scale
    interior = (r > np.float32(cfg.lower_bound)) & (r < np.float32(1.0))
    gx = (upstream * interior).astype(np.float32)
    high = (r > np.float32(1.0)).astype(np.float32)
    low = (r < np.float32(cfg.lower_bound)).astype(np.float32)
    gs_field = upstream * (high * scale + low * np.float32(cfg.lower_bound) * scale)
    gs = np.float32(np.sum(gs_field, dtype=np.float64))
    return gx, np.asarray(gs, dtype=np.float32)


def learned_quantize(x: Tensor, cfg: QuantConfig) -> Tensor:
    """Tape op: staircase forward, straight-through surrogate backward."""
    cfg._require_scale()
    data = quantize_array(x.data, cfg)
    rg = tape_active() and (x.requires_grad or
                            (cfg.trainable and cfg.s.requires_grad))
    out = Tensor(data, requires_grad=rg)
    if rg:
        x_data = x.data

        def back(up):
            gx, gs = learned_quantize_backward(up, x_data, cfg)
            return [gx, gs]

        _record(out, (x, cfg.s), back)
    return out


def sync_shadow(shadow: Tensor, cfg: QuantConfig) -> Tensor:
    """Quantized view of a full-precision shadow weight tensor.

    Pure function of (shadow, cfg); recorded on the tape so optimizer
    steps flow into the shadow copy, never into the quantized view.
    """
    return learned_quantize(shadow, cfg)
