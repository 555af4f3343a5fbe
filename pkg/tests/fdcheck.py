"""Float64 reference forwards and central finite differences.

Deliberately independent of the package under test: every function here
is a plain numpy expression, so the finite-difference gradients they
produce are a genuinely separate route from the tape's backward pass.
The engine runs in float32; differencing its loss directly would drown
small gradient entries in rounding noise, so the reference loss is
recomputed in float64 at the same parameter values.
"""

import numpy as np


def conv1d(x, w, dilation=1, padding=0):
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding)))
    K = w.shape[2]
    L_out = x.shape[2] - dilation * (K - 1)
    out = np.zeros((x.shape[0], w.shape[0], L_out))
    for k in range(K):
        seg = x[:, :, k * dilation:k * dilation + L_out]
        out += np.einsum("bcl,oc->bol", seg, w[:, :, k])
    return out


def conv2d(x, w, stride=1, padding=0):
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Kh, Kw = w.shape[2:]
    H_out = (x.shape[2] - Kh) // stride + 1
    W_out = (x.shape[3] - Kw) // stride + 1
    out = np.zeros((x.shape[0], w.shape[0], H_out, W_out))
    for kh in range(Kh):
        for kw in range(Kw):
            seg = x[:, :, kh:kh + stride * H_out:stride,
                    kw:kw + stride * W_out:stride]
            out += np.einsum("bchw,oc->bohw", seg, w[:, :, kh, kw])
    return out


def dense(x, w, bias=None):
    out = np.asarray(x, dtype=np.float64) @ np.asarray(w, dtype=np.float64).T
    if bias is not None:
        out = out + np.asarray(bias, dtype=np.float64)
    return out


def global_avg_pool(x):
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(x.shape[0], x.shape[1], -1).mean(axis=2)


def relu(x):
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def batch_norm(x, gamma, beta, eps=1e-5):
    """Training-mode normalization with biased batch statistics."""
    x = np.asarray(x, dtype=np.float64)
    axes = (0,) + tuple(range(2, x.ndim))
    mean = x.mean(axis=axes, keepdims=True)
    var = x.var(axis=axes, keepdims=True)
    shape = [1, x.shape[1]] + [1] * (x.ndim - 2)
    g = np.asarray(gamma, dtype=np.float64).reshape(shape)
    b = np.asarray(beta, dtype=np.float64).reshape(shape)
    return g * (x - mean) / np.sqrt(var + eps) + b


def softmax(z):
    z = np.asarray(z, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits, targets):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = (np.asarray(targets, dtype=np.float64) * (lse - z)).sum(axis=1)
    return float(rows.mean())


def fd_grad(loss_fn, arr, eps=1e-6):
    """Central differences of a float64 scalar function at `arr`."""
    base = np.asarray(arr, dtype=np.float64).copy()
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = loss_fn(base)
        flat[i] = orig - eps
        lo = loss_fn(base)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def rel_err(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    return np.linalg.norm(a - n) / max(np.linalg.norm(n), 1e-12)
