"""Dense float32 tensors with tape-based reverse-mode autodiff.

Every forward reduction (conv taps, dense contraction, pooling sum) runs
in a fixed order -- ascending reduction index, vectorized only across the
axes that are not reduced -- so two runs, or an independently written
nested-loop reference following the same order, produce bit-identical
float32 results.  Backward passes are deterministic but use whatever
order numpy picks; no ordering contract is attached to gradients.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, UsageError

_active_tape = None


class Tensor:
    """A float32 ndarray plus gradient bookkeeping."""

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float32)
        self.requires_grad = bool(requires_grad)
        self.grad = None  # np.ndarray, same shape, set by backward()

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def copy(self) -> "Tensor":
        t = Tensor(self.data.copy(), requires_grad=self.requires_grad)
        return t

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of executed ops; replaying it in reverse is backprop.

    Entries are appended in execution order, which makes the tape
    topological by construction (an op can only consume tensors that
    already exist).
    """

    def __init__(self):
        self._entries = []  # (out Tensor, input Tensors, backward fn)

    def __len__(self):
        return len(self._entries)

    def __enter__(self):
        global _active_tape
        if _active_tape is not None:
            raise UsageError("a Tape is already active; tapes do not nest")
        _active_tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _active_tape
        _active_tape = None
        return False

    def record(self, out: Tensor, inputs, backward):
        self._entries.append((out, tuple(inputs), backward))


def _record(out: Tensor, inputs, backward):
    """Attach an op to the active tape, if any and if grads are wanted."""
    if _active_tape is not None and out.requires_grad:
        _active_tape.record(out, inputs, backward)


def tape_active() -> bool:
    return _active_tape is not None


def _wants_grad(*tensors) -> bool:
    return _active_tape is not None and any(t.requires_grad for t in tensors)


def backward(tape: Tape, loss: Tensor):
    """Reverse sweep over the tape; populates .grad on requires_grad leaves.

    Each recorded op is visited exactly once; fan-out is handled by
    accumulating upstream gradients per tensor before its producing op
    is reached.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.data.shape}")
    grads = {id(loss): (loss, np.ones_like(loss.data))}
    for out, inputs, back_fn in reversed(tape._entries):
        entry = grads.pop(id(out), None)
        if entry is None:
            continue  # this op does not feed the loss
        upstream = entry[1]
        input_grads = back_fn(upstream)
        for t, g in zip(inputs, input_grads):
            if g is None or not isinstance(t, Tensor):
                continue
            held = grads.get(id(t))
            if held is None:
                grads[id(t)] = (t, g.astype(np.float32, copy=True))
            else:
                np.add(held[1], g, out=held[1], casting="unsafe")
    for t, g in grads.values():
        if t.requires_grad:
            if t.grad is None:
                t.grad = g.astype(np.float32, copy=True)
            else:
                t.grad += g


# ---------------------------------------------------------------------------
# kernels: dtype-preserving ordered-accumulation implementations.
# Shared by the autodiff ops, the eval paths and the integer executor
# (which calls them on int64 code arrays, where the fixed order simply
# makes the exact integer result reproducible).


def _as_batched(x, core_ndim):
    """Return (array with leading batch axis, had_batch flag)."""
    if x.ndim == core_ndim:
        return x[None], False
    if x.ndim == core_ndim + 1:
        return x, True
    raise DimensionError(
        f"expected {core_ndim}-d or {core_ndim + 1}-d input, got shape {x.shape}"
    )


def conv1d_len(length: int, kernel: int, dilation: int, padding: int) -> int:
    return length + 2 * padding - dilation * (kernel - 1)


def conv1d_kernel(x, w, dilation=1, padding=0):
    """x: (B, C_in, L), w: (C_out, C_in, K) -> (B, C_out, L_out).

    Per output element the accumulation runs over (channel asc, tap asc).
    """
    B, C_in, L = x.shape
    C_out, C_in_w, K = w.shape
    if C_in != C_in_w:
        raise DimensionError(
            f"conv1d: input channels {C_in} (input axis -2) != kernel channels "
            f"{C_in_w} (kernel axis 1)"
        )
    L_out = conv1d_len(L, K, dilation, padding)
    if L_out < 1:
        raise DimensionError(
            f"conv1d: length {L} too short for kernel {K} dilation {dilation} "
            f"padding {padding} (output length {L_out})"
        )
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding)))
    out = np.zeros((B, C_out, L_out), dtype=np.result_type(x, w))
    for ci in range(C_in):
        for k in range(K):
            seg = x[:, ci, k * dilation : k * dilation + L_out]
            out += w[:, ci, k][None, :, None] * seg[:, None, :]
    return out


def conv1d_input_grad(up, w, in_shape, dilation, padding):
    B, C_in, L = in_shape
    C_out, _, K = w.shape
    L_out = up.shape[-1]
    gx = np.zeros((B, C_in, L + 2 * padding), dtype=np.float32)
    for ci in range(C_in):
        for k in range(K):
            gx[:, ci, k * dilation : k * dilation + L_out] += np.einsum(
                "bol,o->bl", up, w[:, ci, k]
            )
    if padding:
        gx = gx[:, :, padding : padding + L]
    return gx


def conv1d_weight_grad(up, x, w_shape, dilation, padding):
    C_out, C_in, K = w_shape
    L_out = up.shape[-1]
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding)))
    gw = np.zeros(w_shape, dtype=np.float32)
    for ci in range(C_in):
        for k in range(K):
            seg = x[:, ci, k * dilation : k * dilation + L_out]
            gw[:, ci, k] = np.einsum("bol,bl->o", up, seg)
    return gw


def conv2d_out_hw(H, W, Kh, Kw, stride, padding):
    H_out = (H + 2 * padding - Kh) // stride + 1
    W_out = (W + 2 * padding - Kw) // stride + 1
    return H_out, W_out


def conv2d_kernel(x, w, stride=1, padding=0):
    """x: (B, C_in, H, W), w: (C_out, C_in, Kh, Kw) -> (B, C_out, H', W').

    Accumulation order per output element: (channel, row tap, col tap),
    each ascending.
    """
    B, C_in, H, W = x.shape
    C_out, C_in_w, Kh, Kw = w.shape
    if C_in != C_in_w:
        raise DimensionError(
            f"conv2d: input channels {C_in} (input axis -3) != kernel channels "
            f"{C_in_w} (kernel axis 1)"
        )
    H_out, W_out = conv2d_out_hw(H, W, Kh, Kw, stride, padding)
    if H_out < 1 or W_out < 1:
        raise DimensionError(
            f"conv2d: spatial {H}x{W} too small for kernel {Kh}x{Kw} "
            f"stride {stride} padding {padding}"
        )
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    h_span = (H_out - 1) * stride + 1
    w_span = (W_out - 1) * stride + 1
    out = np.zeros((B, C_out, H_out, W_out), dtype=np.result_type(x, w))
    for ci in range(C_in):
        for kh in range(Kh):
            for kw in range(Kw):
                seg = x[:, ci, kh : kh + h_span : stride, kw : kw + w_span : stride]
                out += w[:, ci, kh, kw][None, :, None, None] * seg[:, None]
    return out


def conv2d_input_grad(up, w, in_shape, stride, padding):
    B, C_in, H, W = in_shape
    C_out, _, Kh, Kw = w.shape
    H_out, W_out = up.shape[-2:]
    h_span = (H_out - 1) * stride + 1
    w_span = (W_out - 1) * stride + 1
    gx = np.zeros((B, C_in, H + 2 * padding, W + 2 * padding), dtype=np.float32)
    for ci in range(C_in):
        for kh in range(Kh):
            for kw in range(Kw):
                contrib = np.einsum("bohw,o->bhw", up, w[:, ci, kh, kw])
                gx[:, ci, kh : kh + h_span : stride, kw : kw + w_span : stride] += contrib
    if padding:
        gx = gx[:, :, padding : padding + H, padding : padding + W]
    return gx


def conv2d_weight_grad(up, x, w_shape, stride, padding):
    C_out, C_in, Kh, Kw = w_shape
    H_out, W_out = up.shape[-2:]
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    h_span = (H_out - 1) * stride + 1
    w_span = (W_out - 1) * stride + 1
    gw = np.zeros(w_shape, dtype=np.float32)
    for ci in range(C_in):
        for kh in range(Kh):
            for kw in range(Kw):
                seg = x[:, ci, kh : kh + h_span : stride, kw : kw + w_span : stride]
                gw[:, ci, kh, kw] = np.einsum("bohw,bhw->o", up, seg)
    return gw


def dense_kernel(x, w, bias=None):
    """x: (B, N), w: (M, N) -> (B, M); ascending-n accumulation, bias last."""
    B, N = x.shape
    M, N_w = w.shape
    if N != N_w:
        raise DimensionError(
            f"dense: input size {N} (input axis -1) != weight columns {N_w} "
            f"(weight axis 1)"
        )
    out = np.zeros((B, M), dtype=np.result_type(x, w))
    for n in range(N):
        out += x[:, n : n + 1] * w[:, n][None, :]
    if bias is not None:
        if bias.shape != (M,):
            raise DimensionError(f"dense: bias shape {bias.shape} != ({M},)")
        out += bias[None, :]
    return out


def global_avg_pool_kernel(x):
    """x: (B, C, *spatial) -> (B, C); ordered sum over flattened spatial."""
    if x.ndim < 3:
        raise DimensionError(f"global_avg_pool: need (B, C, spatial...), got {x.shape}")
    B, C = x.shape[:2]
    flat = x.reshape(B, C, -1)
    P = flat.shape[2]
    acc = np.zeros((B, C), dtype=x.dtype)
    for p in range(P):
        acc += flat[:, :, p]
    if np.issubdtype(x.dtype, np.floating):
        return acc / x.dtype.type(P)
    return acc / np.float32(P)


def softmax_probs(logits):
    """Row softmax with max subtraction; logits (B, K) float."""
    m = np.max(logits, axis=1, keepdims=True)
    e = np.exp(logits - m)
    return e / np.sum(e, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# autodiff ops


def _unary_out(data, *inputs):
    rg = any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    return Tensor(data, requires_grad=rg and _active_tape is not None)


def conv1d(x: Tensor, w: Tensor, dilation: int = 1, padding: int = 0,
           bias: Tensor | None = None) -> Tensor:
    """1-d cross-correlation over (C_in, L) or (B, C_in, L) input."""
    xb, had_batch = _as_batched(x.data, 2)
    data = conv1d_kernel(xb, w.data, dilation, padding).astype(np.float32)
    if bias is not None:
        data = data + bias.data[None, :, None]
    inputs = (x, w) if bias is None else (x, w, bias)
    out = _unary_out(data if had_batch else data[0], *inputs)

    if out.requires_grad:
        in_shape = xb.shape

        def back(up):
            upb = up if had_batch else up[None]
            gx = conv1d_input_grad(upb, w.data, in_shape, dilation, padding)
            gw = conv1d_weight_grad(upb, xb, w.data.shape, dilation, padding)
            gs = [gx if had_batch else gx[0], gw]
            if bias is not None:
                gs.append(np.sum(upb, axis=(0, 2)))
            return gs

        _record(out, inputs, back)
    return out


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0,
           bias: Tensor | None = None) -> Tensor:
    """2-d cross-correlation over (C, H, W) or (B, C, H, W) input."""
    xb, had_batch = _as_batched(x.data, 3)
    data = conv2d_kernel(xb, w.data, stride, padding).astype(np.float32)
    if bias is not None:
        data = data + bias.data[None, :, None, None]
    inputs = (x, w) if bias is None else (x, w, bias)
    out = _unary_out(data if had_batch else data[0], *inputs)

    if out.requires_grad:
        in_shape = xb.shape

        def back(up):
            upb = up if had_batch else up[None]
            gx = conv2d_input_grad(upb, w.data, in_shape, stride, padding)
            gw = conv2d_weight_grad(upb, xb, w.data.shape, stride, padding)
            gs = [gx if had_batch else gx[0], gw]
            if bias is not None:
                gs.append(np.sum(upb, axis=(0, 2, 3)))
            return gs

        _record(out, inputs, back)
    return out


def dense(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: (N,) or (B, N) -> (M,) or (B, M)."""
    xb, had_batch = _as_batched(x.data, 1)
    data = dense_kernel(xb, w.data, None if bias is None else bias.data)
    data = data.astype(np.float32)
    inputs = (x, w) if bias is None else (x, w, bias)
    out = _unary_out(data if had_batch else data[0], *inputs)

    if out.requires_grad:
        def back(up):
            upb = up if had_batch else up[None]
            gx = upb @ w.data
            gw = upb.T @ xb
            gs = [gx if had_batch else gx[0], gw]
            if bias is not None:
                gs.append(np.sum(upb, axis=0))
            return gs

        _record(out, inputs, back)
    return out


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over all spatial axes of (B, C, spatial...) or (C, spatial...)."""
    had_batch = x.data.ndim >= 3 and True
    xb = x.data if x.data.ndim >= 3 else x.data[None]
    # disambiguate (C, L) from (B, C): callers with 2-d data mean (C, L)
    if x.data.ndim == 2:
        xb, had_batch = x.data[None], False
    data = global_avg_pool_kernel(xb).astype(np.float32)
    out = _unary_out(data if had_batch else data[0], x)

    if out.requires_grad:
        spatial = xb.shape[2:]
        P = int(np.prod(spatial))

        def back(up):
            upb = up if had_batch else up[None]
            g = np.broadcast_to(
                (upb / np.float32(P)).reshape(upb.shape + (1,) * len(spatial)),
                upb.shape + spatial,
            ).astype(np.float32)
            return [g if had_batch else g[0]]

        _record(out, (x,), back)
    return out


def _check_targets(t):
    if np.any(t < 0):
        raise UsageError("softmax_cross_entropy: negative target probability")
    sums = np.sum(t.astype(np.float64), axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise UsageError(
            f"softmax_cross_entropy: target rows must sum to 1 within 1e-6 "
            f"(worst {np.max(np.abs(sums - 1.0)):.3e})"
        )


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy between target distributions and softmax(logits).

    Computed with max subtraction; targets must be valid probability
    rows (a plain array or a Tensor -- they never receive gradients).
    """
    t_arr = targets.data if isinstance(targets, Tensor) else \
        np.asarray(targets, dtype=np.float32)
    lb, had_batch = _as_batched(logits.data, 1)
    tb, _ = _as_batched(t_arr, 1)
    if lb.shape != tb.shape:
        raise DimensionError(
            f"softmax_cross_entropy: logits {logits.data.shape} vs targets "
            f"{t_arr.shape}"
        )
    _check_targets(tb)
    B = lb.shape[0]
    m = np.max(lb, axis=1, keepdims=True)
    z = lb - m
    e = np.exp(z)
    se = np.sum(e, axis=1, keepdims=True)
    lse = np.log(se)
    rows = lse[:, 0] - np.sum(tb * z, axis=1)
    data = np.float32(np.mean(rows))
    out = _unary_out(data, logits)

    if out.requires_grad:
        soft = e / se

        def back(up):
            g = ((soft - tb) * (up / np.float32(B))).astype(np.float32)
            return [g if had_batch else g[0]]

        _record(out, (logits,), back)
    return out


def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, np.float32(0))
    out = _unary_out(data, x)
    if out.requires_grad:
        mask = x.data > 0

        def back(up):
            return [up * mask]

        _record(out, (x,), back)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of equal shapes (residual joins, noise injection)."""
    if a.data.shape != b.data.shape:
        raise DimensionError(f"add: shape {a.data.shape} != {b.data.shape}")
    out = _unary_out(a.data + b.data, a, b)
    if out.requires_grad:
        def back(up):
            return [up, up]

        _record(out, (a, b), back)
    return out


def scale(x: Tensor, c: float) -> Tensor:
    c32 = np.float32(c)
    out = _unary_out(x.data * c32, x)
    if out.requires_grad:
        def back(up):
            return [up * c32]

        _record(out, (x,), back)
    return out


def tensor_sum(x: Tensor) -> Tensor:
    out = _unary_out(np.float32(np.sum(x.data, dtype=np.float64)), x)
    if out.requires_grad:
        shape = x.data.shape

        def back(up):
            return [np.broadcast_to(up, shape).astype(np.float32)]

        _record(out, (x,), back)
    return out


def batch_norm_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5):
    """Batch normalization over all axes except channel (axis 1).

    Returns (out, batch_mean, batch_var_biased, batch_var_unbiased); the
    stats are plain float32 arrays for running-average upkeep.
    """
    if x.data.ndim < 2:
        raise DimensionError(f"batch_norm: need (B, C, ...), got {x.data.shape}")
    if x.data.shape[0] < 2:
        raise UsageError(f"batch_norm: batch size must be >= 2, got {x.data.shape[0]}")
    C = x.data.shape[1]
    if gamma.data.shape != (C,) or beta.data.shape != (C,):
        raise DimensionError(
            f"batch_norm: gamma/beta must be ({C},), got {gamma.data.shape} "
            f"and {beta.data.shape}"
        )
    axes = (0,) + tuple(range(2, x.data.ndim))
    N = int(np.prod([x.data.shape[a] for a in axes]))
    mean = np.mean(x.data, axis=axes)
    var = np.var(x.data, axis=axes)
    shape = [1, C] + [1] * (x.data.ndim - 2)
    mean_r = mean.reshape(shape)
    inv_std = (1.0 / np.sqrt(var + np.float32(eps))).reshape(shape).astype(np.float32)
    xhat = (x.data - mean_r) * inv_std
    data = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)
    out = _unary_out(data.astype(np.float32), x, gamma, beta)

    if out.requires_grad:
        def back(up):
            dgamma = np.sum(up * xhat, axis=axes)
            dbeta = np.sum(up, axis=axes)
            g_over_std = gamma.data.reshape(shape) * inv_std
            dx = g_over_std * (
                up
                - (dbeta.reshape(shape) + xhat * dgamma.reshape(shape)) / np.float32(N)
            )
            return [dx.astype(np.float32), dgamma.astype(np.float32),
                    dbeta.astype(np.float32)]

        _record(out, (x, gamma, beta), back)
    var_unbiased = var * (N / max(N - 1, 1))
    return out, mean.astype(np.float32), var.astype(np.float32), var_unbiased.astype(np.float32)


def batch_norm_eval_kernel(x, gamma, beta, running_mean, running_var, eps=1e-5):
    """Inference-time affine BN on a plain array; channel axis is 1 (or 0
    for unbatched input handled by callers)."""
    shape = [1, x.shape[1]] + [1] * (x.ndim - 2)
    inv_std = (1.0 / np.sqrt(running_var + np.float32(eps))).astype(np.float32)
    return (gamma.reshape(shape) * inv_std.reshape(shape)
            * (x - running_mean.reshape(shape)) + beta.reshape(shape)).astype(np.float32)
