"""Deterministic on-disk archives for networks and integer models.

An archive is a directory: `manifest.json` (sorted keys, floats via
repr round trip, no timestamps) plus `blobs/` holding raw little-endian
arrays, each checksummed in the manifest.  Identical inputs therefore
produce byte-identical archives, and a load/save cycle reproduces the
directory exactly -- which the tests and the CLI verify subcommand rely
on.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil

import numpy as np

from . import layers as L
from . import tensor as T
from .errors import DataError, UsageError
from .integer import IntegerLayerPlan, IntegerModel, IntNode, desc_to_cfg
from .quantizer import QuantConfig

FORMAT = "quantnet-archive"
VERSION = 1

_BLOB_DTYPES = {"<f4": np.dtype("<f4"), "<i8": np.dtype("<i8"),
                "|i1": np.dtype("int8")}


class _BlobWriter:
    def __init__(self, directory):
        self.blob_dir = os.path.join(directory, "blobs")
        os.makedirs(self.blob_dir, exist_ok=True)
        self.table = {}

    def add(self, name, arr, dtype):
        arr = np.ascontiguousarray(np.asarray(arr), dtype=_BLOB_DTYPES[dtype])
        data = arr.tobytes()
        fname = name + ".bin"
        with open(os.path.join(self.blob_dir, fname), "wb") as fh:
            fh.write(data)
        self.table[name] = {"file": fname, "dtype": dtype,
                            "shape": list(arr.shape),
                            "sha256": hashlib.sha256(data).hexdigest()}
        return name


class _BlobReader:
    def __init__(self, directory, table):
        self.blob_dir = os.path.join(directory, "blobs")
        self.table = table

    def get(self, name):
        entry = self.table[name]
        path = os.path.join(self.blob_dir, entry["file"])
        with open(path, "rb") as fh:
            data = fh.read()
        digest = hashlib.sha256(data).hexdigest()
        if digest != entry["sha256"]:
            raise DataError(f"blob {name!r} failed its checksum")
        arr = np.frombuffer(data, dtype=_BLOB_DTYPES[entry["dtype"]])
        return arr.reshape(entry["shape"]).copy()


def _prepare_dir(directory):
    if os.path.exists(directory):
        entries = set(os.listdir(directory))
        if entries and "manifest.json" not in entries:
            raise UsageError(
                f"{directory!r} exists and is not an archive; refusing to "
                f"overwrite")
        shutil.rmtree(directory)
    os.makedirs(directory)


def _write_manifest(directory, manifest):
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_manifest(directory):
    path = os.path.join(directory, "manifest.json")
    if not os.path.exists(path):
        raise DataError(f"no archive at {directory!r}")
    with open(path) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != FORMAT:
        raise DataError(f"{directory!r} is not a {FORMAT} directory")
    return manifest


def archive_digest(directory) -> str:
    """One hash over the manifest and every blob, for byte-identity checks."""
    h = hashlib.sha256()
    with open(os.path.join(directory, "manifest.json"), "rb") as fh:
        h.update(fh.read())
    blob_dir = os.path.join(directory, "blobs")
    if os.path.isdir(blob_dir):
        for fname in sorted(os.listdir(blob_dir)):
            h.update(fname.encode())
            with open(os.path.join(blob_dir, fname), "rb") as fh:
                h.update(fh.read())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# networks


def _qc_payload(qc: QuantConfig) -> dict:
    return {"nb": qc.nb, "lower_bound": float(qc.lower_bound),
            "s": None if qc.s is None else float(qc.s.data),
            "trainable": qc.trainable}


def save_network(directory, net: L.NetworkSpec, provenance=None) -> None:
    _prepare_dir(directory)
    blobs = _BlobWriter(directory)
    qc_index, qcs = {}, []

    def qc_ref(qc):
        if qc is None:
            return None
        if id(qc) not in qc_index:
            qc_index[id(qc)] = len(qcs)
            qcs.append(_qc_payload(qc))
        return qc_index[id(qc)]

    nodes = []
    for n in net.nodes:
        entry = {"kind": n.kind, "name": n.name, "inputs": list(n.inputs)}
        if n.kind in ("conv1d", "conv2d", "dense"):
            entry["weight"] = blobs.add(f"{n.name}.weight", n.weight.data, "<f4")
            entry["bias"] = None if n.bias is None else \
                blobs.add(f"{n.name}.bias", n.bias.data, "<f4")
            entry["weight_qc"] = qc_ref(n.weight_qc)
            if n.kind == "conv1d":
                entry.update(dilation=n.dilation, padding=n.padding)
            elif n.kind == "conv2d":
                entry.update(stride=n.stride, padding=n.padding)
        elif n.kind == "batchnorm":
            entry.update(eps=n.eps, momentum=n.momentum, initialized=n.initialized)
            entry["gamma"] = blobs.add(f"{n.name}.gamma", n.gamma.data, "<f4")
            entry["beta"] = blobs.add(f"{n.name}.beta", n.beta.data, "<f4")
            entry["running_mean"] = blobs.add(f"{n.name}.running_mean",
                                              n.running_mean, "<f4")
            entry["running_var"] = blobs.add(f"{n.name}.running_var",
                                             n.running_var, "<f4")
        elif n.kind == "act_quant":
            entry["qc"] = qc_ref(n.qc)
            entry["fixed_bits"] = n.fixed_bits
        nodes.append(entry)

    manifest = {
        "format": FORMAT, "version": VERSION, "kind": "network",
        "payload": {"mode": net.mode, "meta": net.meta, "nodes": nodes,
                    "quant_configs": qcs,
                    "provenance": provenance or {}},
        "blobs": blobs.table,
    }
    _write_manifest(directory, manifest)


def load_network(directory) -> L.NetworkSpec:
    manifest = _read_manifest(directory)
    if manifest.get("kind") != "network":
        raise DataError(f"{directory!r} holds a {manifest.get('kind')!r}, "
                        f"not a network")
    payload = manifest["payload"]
    blobs = _BlobReader(directory, manifest["blobs"])

    qcs = []
    for q in payload["quant_configs"]:
        cfg = QuantConfig(int(q["nb"]), float(q["lower_bound"]),
                          trainable=bool(q["trainable"]))
        if q["s"] is not None:
            cfg.set_scale(float(q["s"]))
        qcs.append(cfg)

    def param(name):
        return T.Tensor(blobs.get(name).astype(np.float32), requires_grad=True)

    nodes = []
    for e in payload["nodes"]:
        kind = e["kind"]
        if kind == "input":
            nodes.append(L.InputNode(e["name"]))
        elif kind == "conv1d":
            nodes.append(L.Conv1dNode(
                e["name"], e["inputs"], param(e["weight"]),
                None if e["bias"] is None else param(e["bias"]),
                e["dilation"], e["padding"],
                None if e["weight_qc"] is None else qcs[e["weight_qc"]]))
        elif kind == "conv2d":
            nodes.append(L.Conv2dNode(
                e["name"], e["inputs"], param(e["weight"]),
                None if e["bias"] is None else param(e["bias"]),
                e["stride"], e["padding"],
                None if e["weight_qc"] is None else qcs[e["weight_qc"]]))
        elif kind == "dense":
            nodes.append(L.DenseNode(
                e["name"], e["inputs"], param(e["weight"]),
                None if e["bias"] is None else param(e["bias"]),
                None if e["weight_qc"] is None else qcs[e["weight_qc"]]))
        elif kind == "batchnorm":
            gamma = blobs.get(e["gamma"])
            bn = L.BatchNormNode(e["name"], e["inputs"], gamma.size,
                                 e["eps"], e["momentum"])
            bn.gamma = T.Tensor(gamma.astype(np.float32), requires_grad=True)
            bn.beta = param(e["beta"])
            bn.running_mean = blobs.get(e["running_mean"]).astype(np.float32)
            bn.running_var = blobs.get(e["running_var"]).astype(np.float32)
            bn.initialized = bool(e["initialized"])
            nodes.append(bn)
        elif kind == "relu":
            nodes.append(L.ReluNode(e["name"], e["inputs"]))
        elif kind == "act_quant":
            nodes.append(L.ActQuantNode(e["name"], e["inputs"], qcs[e["qc"]],
                                        bool(e["fixed_bits"])))
        elif kind == "add":
            nodes.append(L.AddNode(e["name"], e["inputs"]))
        elif kind == "global_avg_pool":
            nodes.append(L.PoolNode(e["name"], e["inputs"]))
        else:
            raise DataError(f"archive holds unknown node kind {kind!r}")
    return L.NetworkSpec(nodes, mode=payload["mode"], meta=payload["meta"])


# ---------------------------------------------------------------------------
# integer models


def save_integer_model(directory, model: IntegerModel, provenance=None) -> None:
    _prepare_dir(directory)
    blobs = _BlobWriter(directory)
    nodes = []
    for n in model.nodes:
        entry = {"kind": n.kind, "name": n.name, "inputs": list(n.inputs)}
        p = n.payload
        if n.kind in ("float_conv1d", "float_conv2d", "float_dense"):
            entry["w"] = blobs.add(f"{n.name}.w", p["w"], "<f4")
            entry["bias"] = None if p["bias"] is None else \
                blobs.add(f"{n.name}.bias", p["bias"], "<f4")
            for key in ("dilation", "padding", "stride"):
                if key in p:
                    entry[key] = p[key]
            if n.kind == "float_dense":
                entry["in_cfg"] = None if p["in_cfg"] is None else \
                    _qc_payload(p["in_cfg"])
        elif n.kind == "dac":
            entry["cfg"] = _qc_payload(p["cfg"])
        elif n.kind == "mac_bin":
            plan = p["plan"]
            entry["plan"] = {
                "name": plan.name, "op": plan.op, "geometry": plan.geometry,
                "in_desc": plan.in_desc, "out_desc": plan.out_desc,
                "k64": plan.k64, "fan_in": plan.fan_in, "s_max": plan.s_max,
                "acc_bits": plan.acc_bits, "out_lo": plan.out_lo,
                "out_hi": plan.out_hi,
            }
            entry["weight_codes"] = blobs.add(f"{n.name}.codes",
                                              plan.weight_codes, "|i1")
            entry["thresholds"] = blobs.add(f"{n.name}.thresholds",
                                            plan.thresholds, "<i8")
        elif n.kind == "requant":
            entry["lo"] = p["lo"]
            entry["lut"] = blobs.add(f"{n.name}.lut", p["lut"], "<i8")
        elif n.kind == "pool":
            entry["in_cfg"] = None if p["in_cfg"] is None else \
                _qc_payload(p["in_cfg"])
        nodes.append(entry)
    manifest = {
        "format": FORMAT, "version": VERSION, "kind": "integer_model",
        "payload": {"meta": model.meta, "nodes": nodes,
                    "provenance": provenance or {}},
        "blobs": blobs.table,
    }
    _write_manifest(directory, manifest)


def _cfg_from_payload(q):
    if q is None:
        return None
    cfg = QuantConfig(int(q["nb"]), float(q["lower_bound"]), trainable=False)
    cfg.set_scale(float(q["s"]))
    return cfg


def load_integer_model(directory) -> IntegerModel:
    manifest = _read_manifest(directory)
    if manifest.get("kind") != "integer_model":
        raise DataError(f"{directory!r} holds a {manifest.get('kind')!r}, "
                        f"not an integer model")
    payload = manifest["payload"]
    blobs = _BlobReader(directory, manifest["blobs"])
    nodes = []
    for e in payload["nodes"]:
        kind, name, inputs = e["kind"], e["name"], e["inputs"]
        if kind == "input":
            nodes.append(IntNode(kind, name, inputs))
        elif kind in ("float_conv1d", "float_conv2d", "float_dense"):
            p = {"w": blobs.get(e["w"]).astype(np.float32),
                 "bias": None if e["bias"] is None else
                 blobs.get(e["bias"]).astype(np.float32)}
            for key in ("dilation", "padding", "stride"):
                if key in e:
                    p[key] = e[key]
            if kind == "float_dense":
                p["in_cfg"] = _cfg_from_payload(e["in_cfg"])
            nodes.append(IntNode(kind, name, inputs, p))
        elif kind == "dac":
            nodes.append(IntNode(kind, name, inputs,
                                 {"cfg": _cfg_from_payload(e["cfg"])}))
        elif kind == "mac_bin":
            pl = e["plan"]
            plan = IntegerLayerPlan(
                name=pl["name"], op=pl["op"], geometry=dict(pl["geometry"]),
                in_desc=pl["in_desc"], out_desc=pl["out_desc"],
                k64=float(pl["k64"]), fan_in=int(pl["fan_in"]),
                s_max=int(pl["s_max"]), acc_bits=int(pl["acc_bits"]),
                thresholds=blobs.get(e["thresholds"]),
                out_lo=int(pl["out_lo"]), out_hi=int(pl["out_hi"]),
                weight_codes=blobs.get(e["weight_codes"]))
            nodes.append(IntNode(kind, name, inputs, {"plan": plan}))
        elif kind == "requant":
            nodes.append(IntNode(kind, name, inputs,
                                 {"lo": int(e["lo"]), "lut": blobs.get(e["lut"])}))
        elif kind == "add":
            nodes.append(IntNode(kind, name, inputs))
        elif kind == "pool":
            nodes.append(IntNode(kind, name, inputs,
                                 {"in_cfg": _cfg_from_payload(e["in_cfg"])}))
        else:
            raise DataError(f"archive holds unknown integer node kind {kind!r}")
    return IntegerModel(nodes, payload["meta"])
