"""Command-line surface.

Subcommands cover the full pipeline: gen-data -> train (float baseline)
-> quantize (bit ladder) -> transform-fq -> compile-int -> infer /
verify / noise-eval.  Every run is deterministic for a fixed config and
seed; archives and metric logs carry no timestamps, so reruns are
byte-identical.

Exit codes: 0 success, 2 config/usage, 3 data, 4 training divergence,
5 compile/equivalence failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .archive import (archive_digest, load_integer_model, load_network,
                      save_integer_model, save_network)
from .config import config_hash, load_config
from .data import load_dataset, make_dataset, make_image_dataset, save_dataset
from .errors import (CompileError, ConfigError, DataError, DivergenceError,
                     EquivalenceError, QuantnetError, UsageError)
from .integer import compile_model, scan_plan, verify_equivalence
from .layers import build_kws_net, build_resblock_net, replace_bn_relu
from .noise import NoiseSpec, eval_noise_ladder, noisy_eval
from .training import run_gradual_quantization, train_stage

EXIT_CODES = (
    (ConfigError, 2), (UsageError, 2), (DataError, 3), (DivergenceError, 4),
    (CompileError, 5), (EquivalenceError, 5),
)


def _fail(exc) -> int:
    for etype, code in EXIT_CODES:
        if isinstance(exc, etype):
            print(f"error: {exc}", file=sys.stderr)
            return code
    raise exc


def _load_data(path):
    if not path:
        raise UsageError("--data is required for this command")
    return load_dataset(path)


def _build_net(cfg, seed):
    rng = np.random.default_rng([seed, 0])
    m = cfg.model
    if m.arch == "kws":
        return build_kws_net(m.in_channels, m.embed_units, m.filters,
                             m.kernel, m.dilations, m.classes, m.input_bits,
                             rng=rng)
    return build_resblock_net(m.depth, m.widths, m.in_channels, m.classes,
                              rng=rng)


def _write_history(out_dir, history):
    with open(os.path.join(out_dir, "metrics.jsonl"), "w") as fh:
        for entry in history:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


def _provenance(cfg, seed, **extra):
    p = {"config_hash": config_hash(cfg), "seed": seed}
    p.update(extra)
    return p


def _archive_exists(path):
    return os.path.exists(os.path.join(path, "manifest.json"))


def _load_any(path):
    manifest = os.path.join(path, "manifest.json")
    if not os.path.exists(manifest):
        raise DataError(f"no archive at {path!r}")
    with open(manifest) as fh:
        kind = json.load(fh).get("kind")
    if kind == "network":
        return load_network(path), "network"
    if kind == "integer_model":
        return load_integer_model(path), "integer_model"
    raise DataError(f"archive at {path!r} has unknown kind {kind!r}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    d = cfg.data
    if d.path:
        raise ConfigError("gen-data: config points at an existing dataset "
                          "(data.path is set)")
    if d.kind == "sequence":
        data = make_dataset(d.classes, d.channels, d.length, d.train, d.val,
                            d.test, d.seed, d.shift_max, d.amp_jitter,
                            d.noise_std)
    else:
        data = make_image_dataset(d.classes, d.channels, d.side, d.train,
                                  d.val, d.test, d.seed, d.shift_max,
                                  d.amp_jitter, d.noise_std)
    save_dataset(args.out, data)
    print(f"wrote {d.kind} dataset "
          f"({d.train}/{d.val}/{d.test} train/val/test) to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    if args.resume and _archive_exists(args.out):
        print(f"{args.out} already holds a network; skipping (resume)")
        return 0
    data = _load_data(args.data)
    net = _build_net(cfg, seed)
    t = cfg.train
    res = train_stage(net, data, t.epochs, t.batch_size, t.lr, t.lr_decay,
                      t.optimizer, t.momentum, t.weight_decay, seed=seed,
                      stage_name="fp")
    save_network(args.out, res.best_net,
                 provenance=_provenance(cfg, seed, stage="fp"))
    _write_history(args.out, res.history)
    test_acc = res.best_net.evaluate(data["X_test"], data["y_test"])
    print(f"fp baseline: val {res.best_val_acc:.4f} (epoch {res.best_epoch}), "
          f"test {test_acc:.4f} -> {args.out}")
    return 0


def cmd_quantize(args) -> int:
    cfg = load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    if not cfg.stages:
        raise ConfigError("quantize: config defines no stages")
    data = _load_data(args.data)
    t = cfg.train

    if args.stage:
        matches = [s for s in cfg.stages if s.name == args.stage]
        if not matches:
            raise ConfigError(f"stage {args.stage!r} not in config")
        st = matches[0]
        stage_no = cfg.stages.index(st)
        init_path = args.init or (
            args.out if st.init == "fp" else os.path.join(args.out, st.init))
        if not args.init and st.init == "fp":
            raise ConfigError("single-stage quantize from fp needs --init "
                              "pointing at the float baseline")
        net = load_network(init_path).clone()
        if net.mode == "fp":
            net.set_mode("fake_quant")
        net.set_bitwidths(st.weight_bits, st.act_bits)
        net.calibrate(data["X_train"][:t.calib_count])
        teacher = None
        if args.teacher:
            teacher = load_network(args.teacher)
        elif st.teacher is not None:
            raise ConfigError(
                f"stage {st.name!r} distills from {st.teacher!r}; pass "
                f"--teacher with its archive path")
        out = os.path.join(args.out, st.name)
        if args.resume and _archive_exists(out):
            print(f"{out} already holds {st.name}; skipping (resume)")
            return 0
        res = train_stage(net, data, st.epochs, t.batch_size, st.lr,
                          t.lr_decay, t.optimizer, t.momentum, t.weight_decay,
                          seed=seed * 1000 + stage_no, teacher=teacher,
                          distill_temperature=t.distill_temperature,
                          distill_alpha=t.distill_alpha, stage_name=st.name)
        save_network(out, res.best_net,
                     provenance=_provenance(cfg, seed, stage=st.name))
        _write_history(out, res.history)
        print(f"{st.name}: val {res.best_val_acc:.4f} -> {out}")
        return 0

    if args.resume and all(
            _archive_exists(os.path.join(args.out, s.name)) for s in cfg.stages):
        print(f"all {len(cfg.stages)} stages present under {args.out}; "
              f"skipping (resume)")
        return 0
    if not args.init:
        raise ConfigError("quantize needs --init pointing at the float baseline")
    fp_net = load_network(args.init)
    results = run_gradual_quantization(
        fp_net, data, cfg.stages, t.batch_size, t.lr_decay, t.optimizer,
        t.momentum, t.weight_decay, seed, t.distill_temperature,
        t.distill_alpha, t.calib_count)
    for st in cfg.stages:
        res = results[st.name]
        out = os.path.join(args.out, st.name)
        save_network(out, res.best_net,
                     provenance=_provenance(cfg, seed, stage=st.name))
        _write_history(out, res.history)
        print(f"{st.name}: val {res.best_val_acc:.4f} -> {out}")
    return 0


def cmd_transform_fq(args) -> int:
    net = load_network(args.net)
    fq = replace_bn_relu(net)
    provenance = {"source": "transform-fq"}
    if args.finetune:
        cfg = load_config(args.config)
        seed = cfg.seed if args.seed is None else args.seed
        data = _load_data(args.data)
        teacher = load_network(args.teacher) if args.teacher else None
        t, f = cfg.train, cfg.finetune
        res = train_stage(fq, data, f.epochs, t.batch_size, f.lr, t.lr_decay,
                          t.optimizer, t.momentum, t.weight_decay,
                          seed=seed * 1000 + 999, teacher=teacher,
                          distill_temperature=t.distill_temperature,
                          distill_alpha=t.distill_alpha, stage_name="fq")
        fq = res.best_net
        provenance = _provenance(cfg, seed, stage="fq")
        save_network(args.out, fq, provenance=provenance)
        _write_history(args.out, res.history)
        print(f"fq fine-tuned: val {res.best_val_acc:.4f} -> {args.out}")
    else:
        save_network(args.out, fq, provenance=provenance)
        print(f"fq transform -> {args.out}")
    return 0


def cmd_compile_int(args) -> int:
    net = load_network(args.net)
    model = compile_model(net)
    for plan in model.plans:
        mismatches = scan_plan(plan)
        if mismatches:
            raise EquivalenceError(
                f"plan {plan.name!r}: {mismatches} accumulator values "
                f"disagree with the reference rule")
    if args.data:
        data = _load_data(args.data)
        report = verify_equivalence(model, net, data["X_test"])
        print(f"equivalence on test set: {report.summary()}")
        if not report.ok:
            raise EquivalenceError(report.summary())
    save_integer_model(args.out, model)
    desc = model.describe()
    print(f"integer model: {desc['planned_layers']} planned layers, "
          f"acc bits {desc['acc_bits']} -> {args.out}")
    return 0


def cmd_infer(args) -> int:
    model, kind = _load_any(args.model)
    data = _load_data(args.data)
    X, y = data[f"X_{args.split}"], data[f"y_{args.split}"]
    acc = model.evaluate(X, y)
    report = {"kind": kind, "split": args.split, "samples": len(X),
              "accuracy": acc}
    line = json.dumps(report, sort_keys=True)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(line + "\n")
    print(line)
    return 0


def cmd_verify(args) -> int:
    net = load_network(args.net)
    model = load_integer_model(args.model)
    data = _load_data(args.data)
    report = verify_equivalence(model, net, data[f"X_{args.split}"])
    print(report.summary())
    print(f"archive digest: {archive_digest(args.model)}")
    if not report.ok:
        raise EquivalenceError(report.summary())
    return 0


def cmd_noise_eval(args) -> int:
    cfg = load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    net = load_network(args.net)
    data = _load_data(args.data)
    n = cfg.noise
    specs = [NoiseSpec(*row) for row in n.ladder] if n.ladder else \
        [NoiseSpec(n.sigma_w, n.sigma_a, n.sigma_mac)]
    results = eval_noise_ladder(net, data["X_test"], data["y_test"], specs,
                                n.repetitions, seed, n.freeze_weights)
    report = {"seed": seed, "repetitions": n.repetitions,
              "points": [r.as_dict() for r in results]}
    text = json.dumps(report, sort_keys=True, indent=2)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    for r in results:
        s = r.spec
        print(f"w={s.sigma_w:g}% a={s.sigma_a:g}% mac={s.sigma_mac:g}%: "
              f"mean acc {r.mean_acc:.4f} (std {r.std_acc:.4f})")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="quantnet",
        description="Quantization-aware training and integer-only inference")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, **help_kw):
        sp = sub.add_parser(name, **help_kw)
        sp.set_defaults(fn=fn)
        return sp

    sp = add("gen-data", cmd_gen_data, help="generate a synthetic dataset")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", required=True)

    sp = add("train", cmd_train, help="train the float baseline")
    sp.add_argument("--config", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--resume", action="store_true",
                    help="skip if the output archive already exists")

    sp = add("quantize", cmd_quantize, help="run the bit-reduction ladder")
    sp.add_argument("--config", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True,
                    help="directory; each stage saves to OUT/<name>")
    sp.add_argument("--init", help="float-baseline archive (full ladder) or "
                                   "init-stage archive (single stage)")
    sp.add_argument("--stage", help="run only this stage from the config")
    sp.add_argument("--teacher", help="teacher archive for --stage")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--resume", action="store_true")

    sp = add("transform-fq", cmd_transform_fq,
             help="fold away BN/ReLU into quantizers")
    sp.add_argument("--net", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--finetune", action="store_true")
    sp.add_argument("--config", help="required with --finetune")
    sp.add_argument("--data")
    sp.add_argument("--teacher")
    sp.add_argument("--seed", type=int)

    sp = add("compile-int", cmd_compile_int,
             help="compile an fq net to integer-only inference")
    sp.add_argument("--net", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--data", help="also verify equivalence on the test split")

    sp = add("infer", cmd_infer, help="evaluate an archived model")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="test", choices=["train", "val", "test"])
    sp.add_argument("--out")

    sp = add("verify", cmd_verify,
             help="bit-exact equivalence of fq net and integer model")
    sp.add_argument("--net", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="test", choices=["train", "val", "test"])

    sp = add("noise-eval", cmd_noise_eval,
             help="repeated noisy evaluation of an fq net")
    sp.add_argument("--config", required=True)
    sp.add_argument("--net", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out")
    sp.add_argument("--seed", type=int)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.fn is cmd_transform_fq and args.finetune and not (
            args.config and args.data):
        print("error: --finetune needs --config and --data", file=sys.stderr)
        return 2
    try:
        return args.fn(args)
    except QuantnetError as exc:
        return _fail(exc)


if __name__ == "__main__":
    sys.exit(main())
