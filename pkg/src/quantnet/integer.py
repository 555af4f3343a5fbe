"""Compilation of fq networks to integer-only inference.

A quantized conv's multiply-accumulate runs on integer codes, so its
accumulator S is an exact integer.  The following activation quantizer
maps S to an output code through a monotone step function; compilation
replaces that map with sorted int64 thresholds consumed by a
searchsorted.  Thresholds come from a closed-form boundary estimate
plus a local correction against the shared 64-bit reference rule, which
is sufficient for exact agreement everywhere because a monotone step
map is determined by its jump points.

The executor keeps full-precision head/tail segments (embedding, pool,
classifier) as plain float32 kernels identical to the fq evaluation
path, so compiled scores are bit-identical, not merely close.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import CompileError, UsageError
from .layers import deq64, mac_scale64
from .quantizer import QuantConfig, code64, dequantize_codes, to_integer_codes


def accumulator_bits(max_abs_sum: int) -> int:
    """Signed bits needed to hold every accumulator value exactly."""
    if max_abs_sum < 0:
        raise UsageError("accumulator_bits: bound must be >= 0")
    return int(math.ceil(math.log2(max_abs_sum + 1))) + 1


def cfg_to_desc(cfg: QuantConfig) -> dict:
    return {"nb": cfg.nb, "lower_bound": float(cfg.lower_bound),
            "s": float(cfg.s.data)}


def desc_to_cfg(desc: dict) -> QuantConfig:
    cfg = QuantConfig(int(desc["nb"]), float(desc["lower_bound"]),
                      trainable=False)
    cfg.set_scale(float(desc["s"]))
    return cfg


# ---------------------------------------------------------------------------
# per-layer plans


@dataclass
class IntegerLayerPlan:
    name: str                 # output quantizer this plan feeds
    op: str                   # conv1d | conv2d | dense
    weight_codes: np.ndarray  # int8
    geometry: dict            # dilation/padding or stride/padding
    in_desc: dict
    out_desc: dict
    k64: float                # real value of one accumulator unit
    fan_in: int
    s_max: int
    acc_bits: int
    thresholds: np.ndarray    # int64, sorted
    out_lo: int               # code emitted below the first threshold
    out_hi: int

    @property
    def n_codes(self) -> int:
        return self.out_hi - self.out_lo + 1


def _rule_code(k64: float, S, out_cfg: QuantConfig):
    """Output code for accumulator value(s) S under the reference rule."""
    return code64(k64 * np.asarray(S, dtype=np.float64), out_cfg)


def compile_thresholds(k64: float, out_cfg: QuantConfig, s_max: int):
    """int64 jump points of S -> code: t_c = min {S : code(S) >= c}."""
    if k64 <= 0.0 or not math.isfinite(k64):
        raise CompileError(f"degenerate accumulator scale {k64!r}")
    n_out = out_cfg.n
    out_lo = int(round(out_cfg.lower_bound * n_out))
    e_out = out_cfg.scale64
    thresholds = np.empty(n_out - out_lo, dtype=np.int64)
    for j, c in enumerate(range(out_lo + 1, n_out + 1)):
        boundary = (c - 0.5) * e_out / (k64 * n_out)
        if abs(boundary) > 2.0 ** 62:
            raise CompileError(
                f"threshold for code {c} overflows int64 "
                f"(scale ratio too extreme)")
        t = math.ceil(boundary) if c >= 1 else math.floor(boundary) + 1
        # correct float rounding in the estimate against the real rule
        guard = 0
        while int(_rule_code(k64, t, out_cfg)) < c:
            t += 1
            guard += 1
            if guard > 64:
                raise CompileError(f"threshold search diverged at code {c}")
        while int(_rule_code(k64, t - 1, out_cfg)) >= c:
            t -= 1
            guard += 1
            if guard > 128:
                raise CompileError(f"threshold search diverged at code {c}")
        thresholds[j] = t
    if np.any(np.diff(thresholds) < 0):
        raise CompileError("thresholds not monotone (internal error)")
    return thresholds, out_lo


def compile_layer(node, in_cfg: QuantConfig, out_cfg: QuantConfig) -> IntegerLayerPlan:
    """Plan for one quantized layer feeding one activation quantizer."""
    w_cfg = node.weight_qc
    if w_cfg is None or not w_cfg.initialized or not in_cfg.initialized \
            or not out_cfg.initialized:
        raise CompileError(f"layer {node.name!r}: quantizers not ready")
    wcodes = to_integer_codes(node.weight, w_cfg)
    if node.kind == "conv1d":
        geometry = {"dilation": node.dilation, "padding": node.padding}
        fan_in = node.weight.data.shape[1] * node.weight.data.shape[2]
    elif node.kind == "conv2d":
        geometry = {"stride": node.stride, "padding": node.padding}
        fan_in = int(np.prod(node.weight.data.shape[1:]))
    elif node.kind == "dense":
        geometry = {}
        fan_in = node.weight.data.shape[1]
    else:
        raise CompileError(f"cannot compile node kind {node.kind!r}")
    if node.bias is not None:
        raise CompileError(
            f"layer {node.name!r}: quantized layers with bias are not "
            f"integer-representable here")
    k64 = mac_scale64(w_cfg, in_cfg)
    s_max = w_cfg.n * in_cfg.n * fan_in
    bits = accumulator_bits(s_max)
    if bits > 63:
        raise CompileError(f"layer {node.name!r}: accumulator needs {bits} bits")
    thresholds, out_lo = compile_thresholds(k64, out_cfg, s_max)
    return IntegerLayerPlan(
        name="", op=node.kind, weight_codes=wcodes, geometry=geometry,
        in_desc=cfg_to_desc(in_cfg), out_desc=cfg_to_desc(out_cfg),
        k64=k64, fan_in=fan_in, s_max=s_max, acc_bits=bits,
        thresholds=thresholds, out_lo=out_lo, out_hi=out_cfg.n)


def scan_plan(plan: IntegerLayerPlan, limit=2_000_000) -> int:
    """Mismatches between binning and the reference rule over reachable
    accumulator values.  Exhaustive when the range fits in `limit`;
    otherwise a deterministic stride sample plus every threshold
    neighborhood (the only places a monotone map can disagree)."""
    out_cfg = desc_to_cfg(plan.out_desc)
    full = 2 * plan.s_max + 1
    if full <= limit:
        S = np.arange(-plan.s_max, plan.s_max + 1, dtype=np.int64)
    else:
        stride = full // (limit // 2) + 1
        S = np.arange(-plan.s_max, plan.s_max + 1, stride, dtype=np.int64)
        near = np.concatenate([plan.thresholds - 1, plan.thresholds,
                               plan.thresholds + 1])
        near = near[(near >= -plan.s_max) & (near <= plan.s_max)]
        S = np.unique(np.concatenate([S, near]))
    binned = plan.out_lo + np.searchsorted(plan.thresholds, S, side="right")
    ref = _rule_code(plan.k64, S, out_cfg)
    return int(np.sum(binned != ref))


def run_plan(plan: IntegerLayerPlan, codes: np.ndarray,
             counter: "OpCounter | None" = None) -> np.ndarray:
    """Input codes (int) -> output codes (int64) for one planned layer."""
    x = np.asarray(codes, dtype=np.int64)
    w = plan.weight_codes.astype(np.int64)
    if counter is not None:
        S = _accumulate_counted(plan, x, w, counter)
    elif plan.op == "conv1d":
        S = T.conv1d_kernel(x, w, plan.geometry["dilation"],
                            plan.geometry["padding"])
    elif plan.op == "conv2d":
        S = T.conv2d_kernel(x, w, plan.geometry["stride"],
                            plan.geometry["padding"])
    else:
        S = T.dense_kernel(x, w)
    return plan.out_lo + np.searchsorted(plan.thresholds, S, side="right")


# ---------------------------------------------------------------------------
# mult-free accumulation (ternary weights)


@dataclass
class OpCounter:
    adds: int = 0
    subs: int = 0
    muls: int = 0

    @property
    def total(self) -> int:
        return self.adds + self.subs + self.muls


def _accumulate_counted(plan, x, w, counter: OpCounter):
    """Dispatch on weight code sign; multiplies only for |code| > 1.

    With ternary weights (2-bit, codes in {-1, 0, 1}) the counter's
    `muls` stays zero.  Integer addition commutes exactly, so this path
    returns the same accumulator as the plain kernel.
    """
    def apply(seg, code, out_slice):
        if code == 0:
            return
        if code == 1:
            out_slice += seg
            counter.adds += seg.size
        elif code == -1:
            out_slice -= seg
            counter.subs += seg.size
        else:
            out_slice += code * seg
            counter.muls += seg.size
            counter.adds += seg.size

    if plan.op == "conv1d":
        d, p = plan.geometry["dilation"], plan.geometry["padding"]
        if p:
            x = np.pad(x, ((0, 0), (0, 0), (p, p)))
        B, C_in, L = x.shape
        C_out, _, K = w.shape
        L_out = L - d * (K - 1)
        S = np.zeros((B, C_out, L_out), dtype=np.int64)
        for ci in range(C_in):
            for k in range(K):
                seg = x[:, ci, k * d:k * d + L_out]
                for co in range(C_out):
                    apply(seg, int(w[co, ci, k]), S[:, co, :])
        return S
    if plan.op == "conv2d":
        st, p = plan.geometry["stride"], plan.geometry["padding"]
        if p:
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        B, C_in, H, W = x.shape
        C_out, _, Kh, Kw = w.shape
        H_out = (H - Kh) // st + 1
        W_out = (W - Kw) // st + 1
        S = np.zeros((B, C_out, H_out, W_out), dtype=np.int64)
        for ci in range(C_in):
            for kh in range(Kh):
                for kw in range(Kw):
                    seg = x[:, ci, kh:kh + (H_out - 1) * st + 1:st,
                            kw:kw + (W_out - 1) * st + 1:st]
                    for co in range(C_out):
                        apply(seg, int(w[co, ci, kh, kw]), S[:, co, :, :])
        return S
    if plan.op == "dense":
        B, N = x.shape
        M = w.shape[0]
        S = np.zeros((B, M), dtype=np.int64)
        for n in range(N):
            seg = x[:, n]
            for m in range(M):
                apply(seg, int(w[m, n]), S[:, m])
        return S
    raise UsageError(f"counted path: unknown op {plan.op!r}")


# ---------------------------------------------------------------------------
# whole-model compilation


@dataclass
class IntNode:
    kind: str     # input | float_conv1d | float_conv2d | float_dense |
                  # dac | mac_bin | requant | add | pool
    name: str
    inputs: list
    payload: dict = field(default_factory=dict)


class IntegerModel:
    def __init__(self, nodes, meta=None):
        self.nodes = list(nodes)
        self.meta = dict(meta or {})

    @property
    def output_name(self):
        return self.nodes[-1].name

    @property
    def plans(self):
        return [n.payload["plan"] for n in self.nodes if n.kind == "mac_bin"]

    def forward(self, X, capture=None, counter: OpCounter | None = None):
        values = {}
        for node in self.nodes:
            args = [values[r] for r in node.inputs]
            p = node.payload
            if node.kind == "input":
                values[node.name] = np.asarray(X, dtype=np.float32)
            elif node.kind == "float_conv1d":
                out = T.conv1d_kernel(args[0], p["w"], p["dilation"], p["padding"])
                if p["bias"] is not None:
                    out = out + p["bias"][None, :, None]
                values[node.name] = out.astype(np.float32)
            elif node.kind == "float_conv2d":
                out = T.conv2d_kernel(args[0], p["w"], p["stride"], p["padding"])
                if p["bias"] is not None:
                    out = out + p["bias"][None, :, None, None]
                values[node.name] = out.astype(np.float32)
            elif node.kind == "float_dense":
                xin = args[0]
                if xin.dtype != np.float32:
                    xin = dequantize_codes(xin, p["in_cfg"])
                values[node.name] = T.dense_kernel(xin, p["w"], p["bias"]).astype(
                    np.float32)
            elif node.kind == "dac":
                codes = code64(args[0].astype(np.float64), p["cfg"])
                if capture is not None:
                    capture[node.name] = codes
                values[node.name] = codes
            elif node.kind == "mac_bin":
                out = run_plan(p["plan"], args[0], counter)
                if capture is not None:
                    capture[node.name] = out
                values[node.name] = out
            elif node.kind == "requant":
                idx = args[0] - p["lo"]
                out = p["lut"][idx]
                if capture is not None:
                    capture[node.name] = out
                values[node.name] = out
            elif node.kind == "add":
                values[node.name] = args[0] + args[1]
            elif node.kind == "pool":
                xin = args[0]
                if xin.dtype != np.float32:
                    xin = dequantize_codes(xin, p["in_cfg"])
                values[node.name] = T.global_avg_pool_kernel(xin)
            else:  # pragma: no cover
                raise UsageError(f"integer forward: unknown node {node.kind!r}")
        return values[self.output_name]

    def predict(self, X, batch_size=256):
        return np.concatenate([self.forward(X[i:i + batch_size])
                               for i in range(0, len(X), batch_size)], axis=0)

    def evaluate(self, X, y, batch_size=256) -> float:
        logits = self.predict(X, batch_size)
        return float(np.mean(np.argmax(logits, axis=1) == np.asarray(y)))

    def describe(self) -> dict:
        plans = self.plans
        return {
            "nodes": len(self.nodes),
            "planned_layers": len(plans),
            "acc_bits": [pl.acc_bits for pl in plans],
            "threshold_counts": [int(pl.thresholds.size) for pl in plans],
            "weight_code_totals": sum(int(pl.weight_codes.size) for pl in plans),
        }


def compile_model(net) -> IntegerModel:
    """Walk an fq graph and emit the integer execution plan.

    Quantized conv + following quantizer fuse into one mac_bin node
    (named after the quantizer so captures line up with the float-side
    evaluation); quantizer-on-codes becomes a lookup table; float
    head/tail segments are carried as-is.
    """
    if net.mode != "fq":
        raise CompileError("compile_model expects a net in fq mode")
    if not net.quantizers_initialized:
        raise CompileError("compile_model: uninitialized quantizer scales")
    cons = net.consumer_map()
    nodes = []
    domain = {}   # name -> ("f",) | ("c", cfg, lo, hi)
    skip = set()  # quantized convs already fused into a mac_bin

    for node in net.nodes:
        if node.name in skip:
            continue
        if node.kind == "input":
            nodes.append(IntNode("input", node.name, []))
            domain[node.name] = ("f",)
        elif node.kind in ("conv1d", "conv2d", "dense") and node.weight_qc is None:
            if domain[node.inputs[0]][0] != "f" and node.kind != "dense":
                raise CompileError(
                    f"float layer {node.name!r} fed by quantized codes")
            p = {"w": node.weight.data.copy(),
                 "bias": None if node.bias is None else node.bias.data.copy()}
            if node.kind == "conv1d":
                p.update(dilation=node.dilation, padding=node.padding)
            elif node.kind == "conv2d":
                p.update(stride=node.stride, padding=node.padding)
            else:
                d = domain[node.inputs[0]]
                p["in_cfg"] = desc_to_cfg(cfg_to_desc(d[1])) if d[0] == "c" else None
            nodes.append(IntNode(f"float_{node.kind}", node.name,
                                 list(node.inputs), p))
            domain[node.name] = ("f",)
        elif node.kind in ("conv1d", "conv2d", "dense"):
            # quantized layer: fuse with its single consuming quantizer
            consumers = cons[node.name]
            if len(consumers) != 1:
                raise CompileError(
                    f"quantized layer {node.name!r} needs exactly one consumer")
            actq = net.node(consumers[0])
            if actq.kind != "act_quant":
                raise CompileError(
                    f"quantized layer {node.name!r} must feed a quantizer, "
                    f"found {actq.kind!r}")
            d = domain[node.inputs[0]]
            if d[0] != "c":
                raise CompileError(
                    f"quantized layer {node.name!r} fed by float values")
            plan = compile_layer(node, d[1], actq.qc)
            plan.name = actq.name
            nodes.append(IntNode("mac_bin", actq.name, list(node.inputs),
                                 {"plan": plan}))
            out_lo = int(round(actq.qc.lower_bound * actq.qc.n))
            domain[actq.name] = ("c", actq.qc, out_lo, actq.qc.n)
            skip.add(actq.name)
        elif node.kind == "act_quant":
            d = domain[node.inputs[0]]
            lo_out = int(round(node.qc.lower_bound * node.qc.n))
            if d[0] == "f":
                # detached copy: the compiled model must not track later
                # training of the source net
                nodes.append(IntNode("dac", node.name, list(node.inputs),
                                     {"cfg": desc_to_cfg(cfg_to_desc(node.qc))}))
            else:
                src_cfg, lo, hi = d[1], d[2], d[3]
                dom = np.arange(lo, hi + 1, dtype=np.int64)
                lut = code64(deq64(dom, src_cfg), node.qc)
                nodes.append(IntNode("requant", node.name, list(node.inputs),
                                     {"lut": lut, "lo": lo}))
            domain[node.name] = ("c", node.qc, lo_out, node.qc.n)
        elif node.kind == "add":
            da, db = domain[node.inputs[0]], domain[node.inputs[1]]
            if da[0] != "c" or db[0] != "c" or da[1] is not db[1]:
                raise CompileError(
                    f"add {node.name!r}: both branches must carry codes on "
                    f"one shared grid")
            nodes.append(IntNode("add", node.name, list(node.inputs)))
            domain[node.name] = ("c", da[1], da[2] + db[2], da[3] + db[3])
        elif node.kind == "global_avg_pool":
            d = domain[node.inputs[0]]
            in_cfg = desc_to_cfg(cfg_to_desc(d[1])) if d[0] == "c" else None
            nodes.append(IntNode("pool", node.name, list(node.inputs),
                                 {"in_cfg": in_cfg}))
            domain[node.name] = ("f",)
        else:
            raise CompileError(f"cannot compile node kind {node.kind!r}")
    meta = {"source_mode": net.mode, "arch": net.meta.get("arch", "custom")}
    return IntegerModel(nodes, meta)


# ---------------------------------------------------------------------------
# equivalence verification


@dataclass
class EquivalenceReport:
    chained: dict          # quantizer name -> max |code diff| over the set
    isolated: dict         # quantizer name -> max |code diff|, true inputs
    score_max_abs: float
    score_max_rel: float
    argmax_agree: float
    samples: int

    @property
    def ok(self) -> bool:
        code_ok = all(v == 0 for v in self.chained.values()) and \
            all(v == 0 for v in self.isolated.values())
        return code_ok and self.score_max_rel <= 1e-5

    def summary(self) -> str:
        worst_c = max(self.chained.values(), default=0)
        worst_i = max(self.isolated.values(), default=0)
        return (f"codes: chained max|diff|={worst_c}, isolated max|diff|={worst_i}; "
                f"scores: max|diff|={self.score_max_abs:.3g} "
                f"(rel {self.score_max_rel:.3g}); "
                f"argmax agreement {self.argmax_agree:.4f} "
                f"over {self.samples} samples")


def verify_equivalence(model: IntegerModel, net, X, batch_size=256) -> EquivalenceReport:
    if net.mode != "fq":
        raise UsageError("verify_equivalence expects the fq reference net")
    X = np.asarray(X, dtype=np.float32)
    plan_nodes = [n for n in model.nodes if n.kind == "mac_bin"]
    chained, isolated = {}, {}
    s_abs = s_rel = 0.0
    agree = 0
    for i in range(0, len(X), batch_size):
        chunk = X[i:i + batch_size]
        cap_f, cap_i = {}, {}
        lf = net.forward_eval(chunk, capture=cap_f)
        li = model.forward(chunk, capture=cap_i)
        for name in cap_i:
            diff = int(np.max(np.abs(cap_i[name].astype(np.int64) -
                                     cap_f[name].astype(np.int64))))
            chained[name] = max(chained.get(name, 0), diff)
        for pn in plan_nodes:
            src = pn.inputs[0]
            if src not in cap_f:
                continue  # first layer input produced by a dac; still in cap
            out = run_plan(pn.payload["plan"], cap_f[src])
            diff = int(np.max(np.abs(out - cap_f[pn.name].astype(np.int64))))
            isolated[pn.name] = max(isolated.get(pn.name, 0), diff)
        d = np.abs(lf.astype(np.float64) - li.astype(np.float64))
        s_abs = max(s_abs, float(d.max()))
        denom = np.maximum(np.abs(lf.astype(np.float64)), 1e-12)
        s_rel = max(s_rel, float((d / denom).max()))
        agree += int(np.sum(np.argmax(lf, axis=1) == np.argmax(li, axis=1)))
    return EquivalenceReport(chained, isolated, s_abs, s_rel,
                             agree / max(1, len(X)), len(X))
