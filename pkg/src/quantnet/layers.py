"""Network graphs: typed nodes, execution modes, BN removal, builders.

A NetworkSpec is an ordered list of named nodes (a DAG in topological
order; each node names its inputs).  Three execution modes:

* ``fp``         -- shadow weights used directly, quantizers pass through,
                    BN and ReLU active.
* ``fake_quant`` -- weights and activations go through the learned
                    staircase (straight-through gradients), BN and ReLU
                    still present.
* ``fq``         -- produced by :func:`replace_bn_relu`; no BN or ReLU
                    nodes remain, every inter-layer tensor lives on a
                    quantizer grid.  Evaluation runs on integer codes
                    with a shared 64-bit requantization rule so compiled
                    integer inference can match it bit for bit.

Conv/dense weight tensors are the full-precision shadow copies; their
quantized views are recomputed every forward pass.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import DimensionError, StructureError, UsageError
from .quantizer import (QuantConfig, code64, dequantize_codes, learned_quantize,
                        quantize_array, to_integer_codes)

MODES = ("fp", "fake_quant", "fq")


def mac_scale64(w_cfg: QuantConfig, a_cfg: QuantConfig) -> float:
    """Real value of one accumulator unit: e^{s_w} e^{s_a} / (n_w n_a).

    Single definition shared by bit-exact evaluation and integer
    compilation; both sides must multiply the integer accumulator by the
    identical float64 to agree bit for bit.
    """
    return (w_cfg.scale64 * a_cfg.scale64) / float(w_cfg.n * a_cfg.n)


def deq64(codes, cfg: QuantConfig) -> np.ndarray:
    """float64 grid values for integer codes (shared rule expression)."""
    return cfg.scale64 * (np.asarray(codes, dtype=np.float64) / float(cfg.n))


# ---------------------------------------------------------------------------
# nodes


class Node:
    kind = "base"

    def __init__(self, name: str, inputs):
        self.name = name
        self.inputs = list(inputs)

    def param_tensors(self):
        return []

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r}, inputs={self.inputs})"


class InputNode(Node):
    kind = "input"

    def __init__(self, name="input"):
        super().__init__(name, [])


class Conv1dNode(Node):
    kind = "conv1d"

    def __init__(self, name, inputs, weight, bias=None, dilation=1, padding=0,
                 weight_qc: QuantConfig | None = None):
        super().__init__(name, inputs)
        self.weight = weight          # shadow copy, shape (C_out, C_in, K)
        self.bias = bias
        self.dilation = int(dilation)
        self.padding = int(padding)
        self.weight_qc = weight_qc

    def param_tensors(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])


class Conv2dNode(Node):
    kind = "conv2d"

    def __init__(self, name, inputs, weight, bias=None, stride=1, padding=0,
                 weight_qc: QuantConfig | None = None):
        super().__init__(name, inputs)
        self.weight = weight          # (C_out, C_in, Kh, Kw)
        self.bias = bias
        self.stride = int(stride)
        self.padding = int(padding)
        self.weight_qc = weight_qc

    def param_tensors(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])


class DenseNode(Node):
    kind = "dense"

    def __init__(self, name, inputs, weight, bias=None,
                 weight_qc: QuantConfig | None = None):
        super().__init__(name, inputs)
        self.weight = weight          # (M, N)
        self.bias = bias
        self.weight_qc = weight_qc

    def param_tensors(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])


class BatchNormNode(Node):
    kind = "batchnorm"

    def __init__(self, name, inputs, channels, eps=1e-5, momentum=0.1):
        super().__init__(name, inputs)
        self.gamma = T.Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
        self.beta = T.Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.initialized = False      # has seen at least one training batch

    def param_tensors(self):
        return [self.gamma, self.beta]

    def update_running(self, mean, var_unbiased):
        m = np.float32(self.momentum)
        self.running_mean = ((1 - m) * self.running_mean + m * mean).astype(np.float32)
        self.running_var = ((1 - m) * self.running_var + m * var_unbiased).astype(np.float32)
        self.initialized = True


class ReluNode(Node):
    kind = "relu"


class ActQuantNode(Node):
    """Learned activation quantizer; pass-through in fp mode."""

    kind = "act_quant"

    def __init__(self, name, inputs, qc: QuantConfig, fixed_bits=False):
        super().__init__(name, inputs)
        self.qc = qc
        self.fixed_bits = bool(fixed_bits)


class AddNode(Node):
    kind = "add"


class PoolNode(Node):
    kind = "global_avg_pool"


# ---------------------------------------------------------------------------
# the graph


class NetworkSpec:
    def __init__(self, nodes, mode="fp", meta=None):
        if mode not in MODES:
            raise UsageError(f"unknown mode {mode!r}")
        names = set()
        for node in nodes:
            if node.name in names:
                raise StructureError(f"duplicate node name {node.name!r}")
            for ref in node.inputs:
                if ref not in names:
                    raise StructureError(
                        f"node {node.name!r} consumes {ref!r} before it is defined"
                    )
            names.add(node.name)
        self.nodes = list(nodes)
        self.meta = dict(meta or {})
        self.mode = None
        self.set_mode(mode)

    # -- structure helpers ---------------------------------------------------

    def node(self, name: str) -> Node:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    @property
    def output_name(self) -> str:
        return self.nodes[-1].name

    def nodes_of_kind(self, kind: str):
        return [n for n in self.nodes if n.kind == kind]

    def consumer_map(self):
        cons = {n.name: [] for n in self.nodes}
        for n in self.nodes:
            for ref in n.inputs:
                cons[ref].append(n.name)
        return cons

    def set_mode(self, mode: str):
        if mode not in MODES:
            raise UsageError(f"unknown mode {mode!r}")
        if mode == "fq":
            leftovers = [n.name for n in self.nodes
                         if n.kind in ("batchnorm", "relu")]
            if leftovers:
                raise UsageError(
                    f"fq mode requires a transformed net; found {leftovers}"
                )
        self.mode = mode

    def conv_output_cfg(self, conv_name: str) -> QuantConfig | None:
        """The activation quantizer directly consuming a conv's output."""
        cons = self.consumer_map()[conv_name]
        for cname in cons:
            cnode = self.node(cname)
            if cnode.kind == "act_quant":
                return cnode.qc
        return None

    # -- parameters ----------------------------------------------------------

    def trainable_params(self):
        seen, params = set(), []

        def push(t):
            if t is not None and t.requires_grad and id(t) not in seen:
                seen.add(id(t))
                params.append(t)

        for node in self.nodes:
            for t in node.param_tensors():
                push(t)
            qcs = []
            if hasattr(node, "weight_qc") and node.weight_qc is not None:
                qcs.append(node.weight_qc)
            if isinstance(node, ActQuantNode):
                qcs.append(node.qc)
            if self.mode != "fp":
                for qc in qcs:
                    if qc.trainable and qc.initialized:
                        push(qc.s)
        return params

    def count_parameters(self) -> dict:
        counts = {"conv_quantized": 0, "full_precision": 0, "batchnorm": 0}
        for node in self.nodes:
            if hasattr(node, "weight_qc"):
                size = node.weight.data.size
                size += node.bias.data.size if node.bias is not None else 0
                if node.weight_qc is not None:
                    counts["conv_quantized"] += size
                else:
                    counts["full_precision"] += size
            elif node.kind == "batchnorm":
                counts["batchnorm"] += node.gamma.data.size + node.beta.data.size
        counts["total"] = sum(counts.values())
        return counts

    def all_quant_configs(self):
        seen, cfgs = set(), []
        for node in self.nodes:
            qc = getattr(node, "weight_qc", None)
            if isinstance(node, ActQuantNode):
                qc = node.qc
            if qc is not None and id(qc) not in seen:
                seen.add(id(qc))
                cfgs.append(qc)
        return cfgs

    @property
    def quantizers_initialized(self) -> bool:
        return all(qc.initialized for qc in self.all_quant_configs())

    def set_bitwidths(self, weight_bits: int, act_bits: int):
        """Swap quantizer bitwidths in place; learned scales are kept."""
        for node in self.nodes:
            if getattr(node, "weight_qc", None) is not None:
                node.weight_qc.set_bitwidth(weight_bits)
            elif isinstance(node, ActQuantNode) and not node.fixed_bits:
                node.qc.set_bitwidth(act_bits)

    # -- cloning -------------------------------------------------------------

    def clone(self) -> "NetworkSpec":
        tmemo, qmemo = {}, {}

        def ct(t):
            if t is None:
                return None
            if id(t) not in tmemo:
                tmemo[id(t)] = T.Tensor(t.data.copy(), requires_grad=t.requires_grad)
            return tmemo[id(t)]

        def cq(qc):
            if qc is None:
                return None
            if id(qc) not in qmemo:
                qmemo[id(qc)] = QuantConfig(qc.nb, qc.lower_bound, s=ct(qc.s),
                                            trainable=qc.trainable)
            return qmemo[id(qc)]

        nodes = []
        for n in self.nodes:
            if n.kind == "input":
                nodes.append(InputNode(n.name))
            elif n.kind == "conv1d":
                nodes.append(Conv1dNode(n.name, n.inputs, ct(n.weight), ct(n.bias),
                                        n.dilation, n.padding, cq(n.weight_qc)))
            elif n.kind == "conv2d":
                nodes.append(Conv2dNode(n.name, n.inputs, ct(n.weight), ct(n.bias),
                                        n.stride, n.padding, cq(n.weight_qc)))
            elif n.kind == "dense":
                nodes.append(DenseNode(n.name, n.inputs, ct(n.weight), ct(n.bias),
                                       cq(n.weight_qc)))
            elif n.kind == "batchnorm":
                bn = BatchNormNode(n.name, n.inputs, n.gamma.data.size, n.eps,
                                   n.momentum)
                bn.gamma = ct(n.gamma)
                bn.beta = ct(n.beta)
                bn.running_mean = n.running_mean.copy()
                bn.running_var = n.running_var.copy()
                bn.initialized = n.initialized
                nodes.append(bn)
            elif n.kind == "relu":
                nodes.append(ReluNode(n.name, n.inputs))
            elif n.kind == "act_quant":
                nodes.append(ActQuantNode(n.name, n.inputs, cq(n.qc), n.fixed_bits))
            elif n.kind == "add":
                nodes.append(AddNode(n.name, n.inputs))
            elif n.kind == "global_avg_pool":
                nodes.append(PoolNode(n.name, n.inputs))
            else:  # pragma: no cover
                raise StructureError(f"clone: unknown node kind {n.kind!r}")
        return NetworkSpec(nodes, mode=self.mode, meta=dict(self.meta))

    # -- noise helpers -------------------------------------------------------

    @staticmethod
    def _noise_active(noise) -> bool:
        return noise is not None and not noise.all_zero

    @staticmethod
    def _draw(rng, pct, lsb, shape):
        std = (float(pct) / 100.0) * float(lsb)
        return rng.normal(0.0, std, size=shape).astype(np.float32)

    # -- training forward ----------------------------------------------------

    def forward_train(self, x_batch, noise=None, noise_rng=None) -> T.Tensor:
        """Differentiable forward on a batch; records onto the active tape.

        Analog-noise injection (fq mode only) draws fresh samples per
        call and enters the graph as constants: the straight-through
        backward never sees it.
        """
        use_noise = self._noise_active(noise)
        if use_noise and self.mode != "fq":
            raise UsageError("noise-aware training requires fq mode")
        values = {}
        xt = T.Tensor(np.asarray(x_batch, dtype=np.float32))
        out_cfg_cache = {}
        if use_noise and noise.sigma_mac > 0:
            for n in self.nodes:
                if getattr(n, "weight_qc", None) is not None:
                    out_cfg_cache[n.name] = self.conv_output_cfg(n.name)

        for node in self.nodes:
            if node.kind == "input":
                values[node.name] = xt
                continue
            args = [values[ref] for ref in node.inputs]
            if node.kind in ("conv1d", "conv2d", "dense"):
                w = node.weight
                if self.mode != "fp" and node.weight_qc is not None:
                    w = learned_quantize(node.weight, node.weight_qc)
                    if use_noise and noise.sigma_w > 0:
                        eps = self._draw(noise_rng, noise.sigma_w,
                                         node.weight_qc.lsb32, w.shape)
                        w = T.add(w, T.Tensor(eps))
                if node.kind == "conv1d":
                    out = T.conv1d(args[0], w, node.dilation, node.padding, node.bias)
                elif node.kind == "conv2d":
                    out = T.conv2d(args[0], w, node.stride, node.padding, node.bias)
                else:
                    out = T.dense(args[0], w, node.bias)
                if use_noise and noise.sigma_mac > 0 and node.weight_qc is not None:
                    ocfg = out_cfg_cache.get(node.name)
                    if ocfg is not None:
                        eps = self._draw(noise_rng, noise.sigma_mac,
                                         ocfg.lsb32, out.shape)
                        out = T.add(out, T.Tensor(eps))
                values[node.name] = out
            elif node.kind == "batchnorm":
                out, mean, _, var_u = T.batch_norm_train(args[0], node.gamma,
                                                         node.beta, node.eps)
                node.update_running(mean, var_u)
                values[node.name] = out
            elif node.kind == "relu":
                values[node.name] = T.relu(args[0])
            elif node.kind == "act_quant":
                if self.mode == "fp":
                    values[node.name] = args[0]
                else:
                    out = learned_quantize(args[0], node.qc)
                    if use_noise and noise.sigma_a > 0:
                        eps = self._draw(noise_rng, noise.sigma_a,
                                         node.qc.lsb32, out.shape)
                        out = T.add(out, T.Tensor(eps))
                    values[node.name] = out
            elif node.kind == "add":
                values[node.name] = T.add(args[0], args[1])
            elif node.kind == "global_avg_pool":
                values[node.name] = T.global_avg_pool(args[0])
            else:  # pragma: no cover
                raise StructureError(f"forward: unknown node kind {node.kind!r}")
        return values[self.output_name]

    # -- evaluation forward --------------------------------------------------

    def forward_eval(self, x_batch, noise=None, noise_rng=None, capture=None):
        """Inference logits for a batch (numpy in, numpy out, no tape).

        fp / fake_quant run the plain float32 path (BN on running stats).
        fq runs on integer codes with the 64-bit requantization rule --
        the reference the compiled integer model must reproduce exactly.
        With a nonzero noise spec the fq path switches to float
        convolutions of the perturbed dequantized values.
        """
        x = np.asarray(x_batch, dtype=np.float32)
        if self.mode == "fq":
            return self._forward_eval_fq(x, noise, noise_rng, capture)
        if self._noise_active(noise):
            raise UsageError("noise evaluation requires fq mode")
        return self._forward_eval_float(x, capture=capture)

    def _forward_eval_float(self, x, force_fp=False, capture=None):
        fake = self.mode == "fake_quant" and not force_fp
        values = {}
        for node in self.nodes:
            if node.kind == "input":
                values[node.name] = x
                continue
            args = [values[ref] for ref in node.inputs]
            if node.kind in ("conv1d", "conv2d", "dense"):
                w = node.weight.data
                if fake and node.weight_qc is not None:
                    w = quantize_array(w, node.weight_qc)
                bias = None if node.bias is None else node.bias.data
                if node.kind == "conv1d":
                    out = T.conv1d_kernel(args[0], w, node.dilation, node.padding)
                    if bias is not None:
                        out = out + bias[None, :, None]
                elif node.kind == "conv2d":
                    out = T.conv2d_kernel(args[0], w, node.stride, node.padding)
                    if bias is not None:
                        out = out + bias[None, :, None, None]
                else:
                    out = T.dense_kernel(args[0], w, bias)
                values[node.name] = out.astype(np.float32)
            elif node.kind == "batchnorm":
                values[node.name] = T.batch_norm_eval_kernel(
                    args[0], node.gamma.data, node.beta.data,
                    node.running_mean, node.running_var, node.eps)
            elif node.kind == "relu":
                values[node.name] = np.maximum(args[0], np.float32(0))
            elif node.kind == "act_quant":
                if fake:
                    out = quantize_array(args[0], node.qc)
                    if capture is not None:
                        capture[node.name] = to_integer_codes(out, node.qc)
                    values[node.name] = out
                else:
                    if capture is not None:
                        capture[node.name] = args[0]
                    values[node.name] = args[0]
            elif node.kind == "add":
                values[node.name] = args[0] + args[1]
            elif node.kind == "global_avg_pool":
                values[node.name] = T.global_avg_pool_kernel(args[0])
        return values[self.output_name]

    def _forward_eval_fq(self, x, noise, rng, capture):
        """Code-domain evaluation; values are ("f", arr) or ("c", codes, cfg)."""
        noisy = self._noise_active(noise)
        out_cfg_cache = {}
        if noisy and noise.sigma_mac > 0:
            for n in self.nodes:
                if getattr(n, "weight_qc", None) is not None:
                    out_cfg_cache[n.name] = self.conv_output_cfg(n.name)
        values = {}

        def as_float(v):
            if v[0] == "f":
                return v[1]
            return dequantize_codes(v[1], v[2])

        for node in self.nodes:
            if node.kind == "input":
                values[node.name] = ("f", x)
                continue
            args = [values[ref] for ref in node.inputs]
            if node.kind in ("conv1d", "conv2d", "dense"):
                if node.weight_qc is None:
                    xin = as_float(args[0])
                    bias = None if node.bias is None else node.bias.data
                    if node.kind == "conv1d":
                        out = T.conv1d_kernel(xin, node.weight.data,
                                              node.dilation, node.padding)
                        if bias is not None:
                            out = out + bias[None, :, None]
                    elif node.kind == "conv2d":
                        out = T.conv2d_kernel(xin, node.weight.data,
                                              node.stride, node.padding)
                        if bias is not None:
                            out = out + bias[None, :, None, None]
                    else:
                        out = T.dense_kernel(xin, node.weight.data, bias)
                    values[node.name] = ("f", out.astype(np.float32))
                    continue
                if not noisy:
                    kind, codes, in_cfg = args[0]
                    if kind != "c":
                        raise UsageError(
                            f"fq eval: quantized layer {node.name!r} expects "
                            f"quantized input"
                        )
                    wcodes = to_integer_codes(node.weight, node.weight_qc)
                    arr = codes.astype(np.int64)
                    wi = wcodes.astype(np.int64)
                    if node.kind == "conv1d":
                        S = T.conv1d_kernel(arr, wi, node.dilation, node.padding)
                    elif node.kind == "conv2d":
                        S = T.conv2d_kernel(arr, wi, node.stride, node.padding)
                    else:
                        S = T.dense_kernel(arr, wi)
                    y64 = mac_scale64(node.weight_qc, in_cfg) * S.astype(np.float64)
                    values[node.name] = ("y", y64)
                else:
                    xin = as_float(args[0])
                    w = quantize_array(node.weight.data, node.weight_qc)
                    if noise.sigma_w > 0:
                        w = w + self._draw(rng, noise.sigma_w,
                                           node.weight_qc.lsb32, w.shape)
                    if node.kind == "conv1d":
                        out = T.conv1d_kernel(xin, w, node.dilation, node.padding)
                    elif node.kind == "conv2d":
                        out = T.conv2d_kernel(xin, w, node.stride, node.padding)
                    else:
                        out = T.dense_kernel(xin, w)
                    out = out.astype(np.float32)
                    if noise.sigma_mac > 0:
                        ocfg = out_cfg_cache.get(node.name)
                        if ocfg is not None:
                            out = out + self._draw(rng, noise.sigma_mac,
                                                   ocfg.lsb32, out.shape)
                    values[node.name] = ("f", out)
            elif node.kind == "act_quant":
                v = args[0]
                if v[0] == "y":
                    codes = code64(v[1], node.qc)
                elif v[0] == "c":
                    codes = code64(deq64(v[1], v[2]), node.qc)
                else:
                    codes = code64(v[1].astype(np.float64), node.qc)
                if capture is not None:
                    capture[node.name] = codes
                if not noisy:
                    values[node.name] = ("c", codes, node.qc)
                else:
                    out = dequantize_codes(codes, node.qc)
                    if noise.sigma_a > 0:
                        out = out + self._draw(rng, noise.sigma_a,
                                               node.qc.lsb32, out.shape)
                    values[node.name] = ("f", out)
            elif node.kind == "add":
                a, b = args
                if a[0] == "c" and b[0] == "c":
                    if a[2] is not b[2]:
                        raise UsageError(
                            f"add {node.name!r}: branches must share one "
                            f"quantizer grid"
                        )
                    values[node.name] = ("c", a[1] + b[1], a[2])
                else:
                    values[node.name] = ("f", as_float(a) + as_float(b))
            elif node.kind == "global_avg_pool":
                values[node.name] = ("f", T.global_avg_pool_kernel(as_float(args[0])))
            else:  # pragma: no cover
                raise StructureError(f"fq eval: unexpected node {node.kind!r}")
        out = values[self.output_name]
        return out[1] if out[0] == "f" else dequantize_codes(out[1], out[2])

    # -- calibration ---------------------------------------------------------

    def calibrate(self, x_batch):
        """Initialize missing quantizer scales: weights from the current
        shadow values, activations from a full-precision forward of the
        given batch (s = ln max|x| at the attach point)."""
        for node in self.nodes:
            qc = getattr(node, "weight_qc", None)
            if qc is not None and not qc.initialized:
                qc.init_scale_from(node.weight.data)
        missing = [n for n in self.nodes
                   if isinstance(n, ActQuantNode) and not n.qc.initialized]
        if not missing:
            return
        capture = {}
        self._forward_eval_float(np.asarray(x_batch, dtype=np.float32),
                                 force_fp=True, capture=capture)
        for node in missing:
            node.qc.init_scale_from(capture[node.name])

    # -- metrics -------------------------------------------------------------

    def predict(self, X, batch_size=256, noise=None, noise_rng=None):
        chunks = []
        for i in range(0, len(X), batch_size):
            chunks.append(self.forward_eval(X[i:i + batch_size], noise=noise,
                                            noise_rng=noise_rng))
        return np.concatenate(chunks, axis=0)

    def evaluate(self, X, y, batch_size=256, noise=None, noise_rng=None) -> float:
        logits = self.predict(X, batch_size, noise, noise_rng)
        return float(np.mean(np.argmax(logits, axis=1) == np.asarray(y)))


# ---------------------------------------------------------------------------
# BN folding and the fq transform


def bn_fold(gamma, beta, running_mean, running_var, eps=1e-5):
    """Fold inference BN into an affine pair: gamma' = gamma / sigma,
    beta' = beta - gamma * mean / sigma with sigma = sqrt(var + eps).

    Dtype-preserving so callers can fold in float64 for exactness checks.
    """
    gamma = np.asarray(gamma)
    sigma = np.sqrt(np.asarray(running_var) + gamma.dtype.type(eps))
    gamma_p = gamma / sigma
    beta_p = np.asarray(beta) - gamma * np.asarray(running_mean) / sigma
    return gamma_p, beta_p


def fold_bn_node(bn: BatchNormNode):
    if not bn.initialized:
        raise UsageError(
            f"bn_fold on {bn.name!r}: running statistics never populated"
        )
    return bn_fold(bn.gamma.data, bn.beta.data, bn.running_mean,
                   bn.running_var, bn.eps)


GAMMA_CLIP_RATIO = 4.0


def _tame_gamma(gamma_prime):
    """Clip |gamma'| outliers to a multiple of the per-layer median.

    A channel whose running variance collapsed (all-zero quantized
    weights give a constant output) produces gamma' ~ gamma/sqrt(eps),
    hundreds of times the healthy channels, and would dominate the
    per-layer mean used for scale compensation.  Such channels carry no
    signal, so capping their scale changes nothing real.  For healthy
    layers this is a no-op.
    """
    mags = np.abs(gamma_prime)
    med = float(np.median(mags))
    if med == 0.0:
        return gamma_prime
    cap = np.float32(GAMMA_CLIP_RATIO * med)
    return np.sign(gamma_prime) * np.minimum(mags, cap)


def _scale_per_out_channel(layer, factors):
    w = layer.weight.data
    factors = np.asarray(factors, dtype=np.float32)
    if layer.kind == "conv1d":
        layer.weight.data = (w * factors[:, None, None]).astype(np.float32)
    elif layer.kind == "conv2d":
        layer.weight.data = (w * factors[:, None, None, None]).astype(np.float32)
    elif layer.kind == "dense":
        layer.weight.data = (w * factors[:, None]).astype(np.float32)
    else:
        raise StructureError(f"absorb_bn_scale: {layer.kind!r} has no weights")


def _bn_gain(gamma_prime) -> float:
    """Per-layer scalar magnitude of gamma' (outlier-clipped mean)."""
    tamed = _tame_gamma(np.asarray(gamma_prime, dtype=np.float32))
    return float(np.mean(np.abs(tamed)))


def _retire_input_scale(layer, gain):
    """Absorb a uniform scale sitting on a layer's input.

    The producing quantizer's grid grew by 1/gain when the BN scale
    moved into it, so its output values are 1/gain times their trained
    meaning.  A quantized consumer swallows that exactly by growing its
    weight grid (codes untouched); a full-precision consumer by scaling
    its weights (bias untouched -- it adds after the product)."""
    if layer.weight_qc is not None:
        if layer.weight_qc.initialized:
            layer.weight_qc.s.data = (
                layer.weight_qc.s.data + np.float32(math.log(gain))
            ).astype(np.float32)
    else:
        layer.weight.data = (layer.weight.data * np.float32(gain)).astype(np.float32)


def absorb_bn_scale(layer, gamma_prime, beta_prime=None,
                    out_qc: QuantConfig | None = None) -> QuantConfig | None:
    """Fold a removed BN's affine into the surrounding quantized graph.

    Three cases, by what can carry the per-channel scale without
    damaging quantized codes:

    * Full-precision layer: exact -- gamma' multiplies the weights and
      the bias absorbs gamma'*b + beta'.  Nothing is dropped.
    * Quantized layer with its output quantizer at hand: only sign(
      gamma') touches the weights (the code alphabet survives, which
      matters enormously for ternary weights); the output quantizer's
      log-scale drops by ln(mean|gamma'|) so the produced codes keep
      their pre-transform meaning.  The per-channel magnitude ratios
      and beta' are left for retraining.  Note the grown grid scales
      this quantizer's output values by 1/mean; the caller must retire
      that factor downstream (_retire_input_scale) or it compounds
      layer over layer.
    * Quantized layer feeding a residual join (no single output
      quantizer owns it): |gamma'| folds into the weights and the
      weight quantizer's log-scale grows by the same mean so its grid
      still covers them.

    Returns the quantizer whose scale was adjusted, if any.
    """
    gamma_prime = np.asarray(gamma_prime, dtype=np.float32)
    if layer.weight_qc is None:
        _scale_per_out_channel(layer, gamma_prime)
        if layer.bias is not None:
            b = (layer.bias.data * gamma_prime).astype(np.float32)
            if beta_prime is not None:
                b = (b + np.asarray(beta_prime, dtype=np.float32)).astype(np.float32)
            layer.bias.data = b
        return None
    mean_mag = _bn_gain(gamma_prime)
    if mean_mag == 0.0:
        raise UsageError("absorb_bn_scale: gamma' is identically zero")
    if out_qc is not None:
        _scale_per_out_channel(layer, np.sign(gamma_prime))
        if out_qc.initialized:
            out_qc.s.data = (out_qc.s.data - np.float32(math.log(mean_mag))).astype(
                np.float32)
        return out_qc
    _scale_per_out_channel(layer, _tame_gamma(gamma_prime))
    qc = layer.weight_qc
    if qc.initialized:
        qc.s.data = (qc.s.data + np.float32(math.log(mean_mag))).astype(np.float32)
    return qc


def replace_bn_relu(net: NetworkSpec) -> NetworkSpec:
    """Rewrite a trained fake-quant net into its BN-free fq form.

    BN+ReLU pairs collapse into the zero-lower-bound quantizer that
    already follows them; isolated BNs collapse into the signed
    quantizer behind them; BNs feeding a residual add get a shared,
    frozen join quantizer inserted on every branch.  Idempotent: an fq
    net comes back as an unchanged clone.
    """
    if net.mode == "fq":
        return net.clone()
    if net.mode != "fake_quant":
        raise UsageError("replace_bn_relu expects a net in fake-quant mode")
    out = net.clone()
    join_cfgs = {}  # add-node name -> shared frozen QuantConfig

    def consumers_of(name):
        return [out.node(c) for c in out.consumer_map()[name]]

    def downstream_actq(name):
        """First activation quantizer reachable through pass-through nodes."""
        for cnode in consumers_of(name):
            if cnode.kind == "act_quant":
                return cnode
            if cnode.kind in ("relu",):
                return downstream_actq(cnode.name)
        return None

    def join_cfg_for(add_node):
        if add_node.name not in join_cfgs:
            ref = downstream_actq(add_node.name)
            if ref is None or not ref.qc.initialized:
                raise StructureError(
                    f"residual add {add_node.name!r} has no initialized "
                    f"quantizer downstream to anchor the join scale"
                )
            cfg = QuantConfig(ref.qc.nb, -1.0, trainable=False)
            cfg.set_scale(float(ref.qc.s.data))
            join_cfgs[add_node.name] = cfg
        return join_cfgs[add_node.name]

    def rewire(old_name, new_name):
        for n in out.nodes:
            n.inputs = [new_name if ref == old_name else ref for ref in n.inputs]

    def insert_before(position_name, node):
        idx = next(i for i, n in enumerate(out.nodes) if n.name == position_name)
        out.nodes.insert(idx, node)

    def weighted_sinks(name):
        """Weighted layers consuming `name`, looking through pools.
        None if any consumer path ends somewhere else (an add, the
        output...): then the scale carry has no safe resting place."""
        sinks = []
        for cnode in consumers_of(name):
            if cnode.kind in ("conv1d", "conv2d", "dense"):
                sinks.append(cnode)
            elif cnode.kind == "global_avg_pool":
                sub = weighted_sinks(cnode.name)
                if sub is None:
                    return None
                sinks.extend(sub)
            else:
                return None
        return sinks if sinks else None

    def collapse_into(producer, actq_node, gamma_p, beta_p):
        """Absorb a BN into the quantizer that replaces it.  Prefers the
        code-preserving split (sign into weights, scalar into the
        quantizer grid, carry retired in the consumers); falls back to
        folding magnitudes into the producer's weights when no
        downstream layer can absorb the carry."""
        if producer.weight_qc is not None:
            sinks = weighted_sinks(actq_node.name)
            if sinks is not None:
                absorb_bn_scale(producer, gamma_p, beta_p, out_qc=actq_node.qc)
                gain = _bn_gain(gamma_p)
                for sink in {s.name: s for s in sinks}.values():
                    _retire_input_scale(sink, gain)
                return
        absorb_bn_scale(producer, gamma_p, beta_p)

    for bn in list(out.nodes_of_kind("batchnorm")):
        producer = out.node(bn.inputs[0])
        if producer.kind not in ("conv1d", "conv2d", "dense"):
            raise StructureError(
                f"BN {bn.name!r} does not follow a weighted layer "
                f"(found {producer.kind!r})"
            )
        cons = consumers_of(bn.name)
        if len(cons) != 1:
            raise StructureError(
                f"BN {bn.name!r} must have exactly one consumer, has {len(cons)}"
            )
        gamma_p, beta_p = fold_bn_node(bn)
        consumer = cons[0]
        if consumer.kind == "relu":
            relu_cons = consumers_of(consumer.name)
            if len(relu_cons) != 1 or relu_cons[0].kind != "act_quant" or \
                    relu_cons[0].qc.lower_bound != 0.0:
                raise StructureError(
                    f"BN+ReLU at {bn.name!r} must feed a zero-lower-bound "
                    f"quantizer"
                )
            collapse_into(producer, relu_cons[0], gamma_p, beta_p)
            out.nodes.remove(bn)
            out.nodes.remove(consumer)
            rewire(consumer.name, producer.name)
            rewire(bn.name, producer.name)
        elif consumer.kind == "act_quant":
            if consumer.qc.lower_bound != -1.0:
                raise StructureError(
                    f"isolated BN {bn.name!r} must feed a signed quantizer"
                )
            collapse_into(producer, consumer, gamma_p, beta_p)
            out.nodes.remove(bn)
            rewire(bn.name, producer.name)
        elif consumer.kind == "add":
            absorb_bn_scale(producer, gamma_p, beta_p)
            cfg = join_cfg_for(consumer)
            jname = f"{bn.name}_join"
            insert_before(consumer.name, ActQuantNode(jname, [producer.name], cfg))
            out.nodes.remove(bn)
            rewire(bn.name, jname)
            out.node(jname).inputs = [producer.name]  # rewire touched it too
        else:
            raise StructureError(
                f"BN {bn.name!r} feeds unsupported node kind {consumer.kind!r}"
            )

    for relu_node in list(out.nodes_of_kind("relu")):
        cons = consumers_of(relu_node.name)
        if len(cons) != 1 or cons[0].kind != "act_quant" or \
                cons[0].qc.lower_bound != 0.0:
            raise StructureError(
                f"unpaired ReLU {relu_node.name!r}: not followed by a "
                f"zero-lower-bound quantizer"
            )
        out.nodes.remove(relu_node)
        rewire(relu_node.name, relu_node.inputs[0])

    for add_node in list(out.nodes_of_kind("add")):
        cfg = join_cfgs.get(add_node.name)
        if cfg is None:
            continue  # add never touched a BN; branches already share grids
        for i, ref in enumerate(list(add_node.inputs)):
            src = out.node(ref)
            if src.kind == "act_quant" and src.qc is cfg:
                continue
            jname = f"{add_node.name}_join{i}"
            insert_before(add_node.name, ActQuantNode(jname, [ref], cfg))
            add_node.inputs[i] = jname

    rebuilt = NetworkSpec(out.nodes, mode="fp", meta=dict(out.meta))
    rebuilt.set_mode("fq")
    return rebuilt


# ---------------------------------------------------------------------------
# builders


def _he_normal(rng, shape, fan_in):
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(np.float32)


def build_kws_net(in_channels=39, embed_units=100, filters=45, kernel=3,
                  dilations=(1, 2, 4, 8, 16, 32, 64), classes=12,
                  input_bits=4, rng=None) -> NetworkSpec:
    """Keyword-spotting style chain: a full-precision per-frame embedding
    (kernel-1 conv) into BN and a fixed-width signed input quantizer,
    then a stack of dilated 1-d convs (each BN + ReLU + quantizer), a
    global average pool and a full-precision classifier head.

    No zero padding anywhere: each conv shrinks the sequence by
    2 * dilation frames, so inputs must span the receptive field
    1 + (kernel-1) * sum(dilations).
    """
    rng = rng or np.random.default_rng(0)
    nodes = [InputNode()]
    prev = "input"
    w = _he_normal(rng, (embed_units, in_channels, 1), in_channels)
    nodes.append(Conv1dNode("embed", [prev], T.Tensor(w, requires_grad=True),
                            bias=T.Tensor(np.zeros(embed_units, np.float32),
                                          requires_grad=True)))
    nodes.append(BatchNormNode("embed_bn", ["embed"], embed_units))
    nodes.append(ActQuantNode("in_q", ["embed_bn"],
                              QuantConfig(input_bits, -1.0), fixed_bits=True))
    prev = "in_q"
    c_in = embed_units
    for i, d in enumerate(dilations, start=1):
        w = _he_normal(rng, (filters, c_in, kernel), c_in * kernel)
        nodes.append(Conv1dNode(f"conv{i}", [prev], T.Tensor(w, requires_grad=True),
                                dilation=d, weight_qc=QuantConfig(8, -1.0)))
        nodes.append(BatchNormNode(f"bn{i}", [f"conv{i}"], filters))
        nodes.append(ReluNode(f"relu{i}", [f"bn{i}"]))
        nodes.append(ActQuantNode(f"actq{i}", [f"relu{i}"], QuantConfig(8, 0.0)))
        prev = f"actq{i}"
        c_in = filters
    nodes.append(PoolNode("pool", [prev]))
    w = (rng.standard_normal((classes, filters)) * math.sqrt(1.0 / filters))
    nodes.append(DenseNode("head", ["pool"],
                           T.Tensor(w.astype(np.float32), requires_grad=True),
                           bias=T.Tensor(np.zeros(classes, np.float32),
                                         requires_grad=True)))
    meta = {
        "arch": "kws",
        "in_channels": in_channels,
        "embed_units": embed_units,
        "filters": filters,
        "kernel": kernel,
        "dilations": list(dilations),
        "classes": classes,
        "input_bits": input_bits,
        "receptive_field": 1 + (kernel - 1) * sum(dilations),
    }
    return NetworkSpec(nodes, mode="fp", meta=meta)


def build_resblock_net(depth=2, widths=(8, 16), in_channels=3, classes=10,
                       rng=None) -> NetworkSpec:
    """Residual image net: quantized input, a stem conv (BN+ReLU+quant),
    `len(widths)` residual blocks of `depth` two-conv subblocks (stride-2
    plus a 1x1-conv shortcut at each width change), global average pool
    and a full-precision classifier."""
    rng = rng or np.random.default_rng(0)
    nodes = [InputNode()]
    nodes.append(ActQuantNode("in_q", ["input"], QuantConfig(8, -1.0)))

    def conv2(name, src, c_out, c_in, k, stride, padding):
        w = _he_normal(rng, (c_out, c_in, k, k), c_in * k * k)
        nodes.append(Conv2dNode(name, [src], T.Tensor(w, requires_grad=True),
                                stride=stride, padding=padding,
                                weight_qc=QuantConfig(8, -1.0)))

    conv2("stem", "in_q", widths[0], in_channels, 3, 1, 1)
    nodes.append(BatchNormNode("stem_bn", ["stem"], widths[0]))
    nodes.append(ReluNode("stem_relu", ["stem_bn"]))
    nodes.append(ActQuantNode("stem_q", ["stem_relu"], QuantConfig(8, 0.0)))
    prev, c_prev = "stem_q", widths[0]

    for bi, width in enumerate(widths):
        for si in range(depth):
            tag = f"b{bi}s{si}"
            stride = 2 if (bi > 0 and si == 0) else 1
            conv2(f"{tag}_c1", prev, width, c_prev, 3, stride, 1)
            nodes.append(BatchNormNode(f"{tag}_bn1", [f"{tag}_c1"], width))
            nodes.append(ReluNode(f"{tag}_relu1", [f"{tag}_bn1"]))
            nodes.append(ActQuantNode(f"{tag}_q1", [f"{tag}_relu1"],
                                      QuantConfig(8, 0.0)))
            conv2(f"{tag}_c2", f"{tag}_q1", width, width, 3, 1, 1)
            nodes.append(BatchNormNode(f"{tag}_bn2", [f"{tag}_c2"], width))
            if stride != 1 or width != c_prev:
                conv2(f"{tag}_sc", prev, width, c_prev, 1, stride, 0)
                nodes.append(BatchNormNode(f"{tag}_scbn", [f"{tag}_sc"], width))
                shortcut = f"{tag}_scbn"
            else:
                shortcut = prev
            nodes.append(AddNode(f"{tag}_add", [f"{tag}_bn2", shortcut]))
            nodes.append(ReluNode(f"{tag}_relu2", [f"{tag}_add"]))
            nodes.append(ActQuantNode(f"{tag}_q2", [f"{tag}_relu2"],
                                      QuantConfig(8, 0.0)))
            prev, c_prev = f"{tag}_q2", width

    nodes.append(PoolNode("pool", [prev]))
    w = (rng.standard_normal((classes, c_prev)) * math.sqrt(1.0 / c_prev))
    nodes.append(DenseNode("head", ["pool"],
                           T.Tensor(w.astype(np.float32), requires_grad=True),
                           bias=T.Tensor(np.zeros(classes, np.float32),
                                         requires_grad=True)))
    meta = {"arch": "resblock", "depth": depth, "widths": list(widths),
            "in_channels": in_channels, "classes": classes}
    return NetworkSpec(nodes, mode="fp", meta=meta)
