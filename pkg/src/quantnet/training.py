"""Optimizers, distillation, single-stage training and the gradual
bit-reduction schedule.

The gradual path retrains at a ladder of decreasing bitwidths; each
stage starts from a chosen earlier stage's weights (learned quantizer
scales ride along) and can distill from a chosen earlier stage's frozen
network instead of fitting hard labels alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import batch_indices, one_hot
from .errors import ConfigError, DivergenceError, UsageError

# ---------------------------------------------------------------------------
# optimizers


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.0):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = float(weight_decay)
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + np.float32(self.weight_decay) * p.data
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            mh = self.m[i] / (1 - b1 ** self.t)
            vh = self.v[i] / (1 - b2 ** self.t)
            p.data = (p.data - self.lr * mh / (np.sqrt(vh) + self.eps)).astype(
                np.float32)


class NesterovSGD:
    def __init__(self, params, lr, momentum=0.9, weight_decay=0.0):
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.vel = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        mu = self.momentum
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + np.float32(self.weight_decay) * p.data
            self.vel[i] = mu * self.vel[i] + g
            p.data = (p.data - self.lr * (g + mu * self.vel[i])).astype(np.float32)


def make_optimizer(name, params, lr, momentum=0.9, weight_decay=0.0):
    if name == "adam":
        return Adam(params, lr, weight_decay=weight_decay)
    if name == "nesterov":
        return NesterovSGD(params, lr, momentum=momentum,
                           weight_decay=weight_decay)
    raise ConfigError(f"unknown optimizer {name!r} (use adam or nesterov)")


# ---------------------------------------------------------------------------
# losses


def distillation_loss(student_logits: T.Tensor, teacher_logits: np.ndarray,
                      hard_targets: np.ndarray, temperature=4.0, alpha=0.9):
    """alpha * Temp^2 * CE(softened teacher, softened student)
    + (1 - alpha) * CE(hard labels, student).

    alpha=0 or a missing teacher degrades to the plain hard-label loss.
    """
    hard = T.softmax_cross_entropy(student_logits, hard_targets)
    if teacher_logits is None or alpha == 0.0:
        return hard
    temp = float(temperature)
    soft_targets = T.softmax_probs(
        np.asarray(teacher_logits, dtype=np.float32) / np.float32(temp))
    soft = T.softmax_cross_entropy(T.scale(student_logits, 1.0 / temp),
                                   soft_targets)
    return T.add(T.scale(soft, alpha * temp * temp),
                 T.scale(hard, 1.0 - alpha))


# ---------------------------------------------------------------------------
# one training stage


@dataclass
class TrainResult:
    best_net: object
    best_val_acc: float
    best_epoch: int
    history: list = field(default_factory=list)


def train_stage(net, data, epochs, batch_size, lr, lr_decay=1.0,
                optimizer="adam", momentum=0.9, weight_decay=0.0,
                seed=0, teacher=None, distill_temperature=4.0,
                distill_alpha=0.9, noise=None, stage_name="stage",
                log_every_epoch=True) -> TrainResult:
    """Train `net` in place; return the best-validation snapshot.

    Deterministic for a fixed seed: minibatch order comes from one
    seeded stream and noise injection (if any) from a second, so clean
    and noise-aware runs shuffle identically.
    """
    X_train, y_train = data["X_train"], data["y_train"]
    X_val, y_val = data["X_val"], data["y_val"]
    classes = int(max(y_train.max(), y_val.max())) + 1
    hard = one_hot(y_train, classes)
    teacher_logits = None
    if teacher is not None and distill_alpha > 0.0:
        teacher_logits = teacher.predict(X_train)

    shuffle_rng = np.random.default_rng([int(seed), 1])
    noise_rng = np.random.default_rng([int(seed), 2])
    params = net.trainable_params()
    if not params:
        raise UsageError("train_stage: network has no trainable parameters")
    opt = make_optimizer(optimizer, params, lr, momentum, weight_decay)

    best_net, best_acc, best_epoch = None, -1.0, -1
    history = []
    for epoch in range(epochs):
        opt.lr = float(lr) * (float(lr_decay) ** epoch)
        losses = []
        for batch_no, idx in enumerate(
                batch_indices(len(X_train), batch_size, shuffle_rng)):
            with T.Tape() as tape:
                logits = net.forward_train(X_train[idx], noise=noise,
                                           noise_rng=noise_rng)
                loss = distillation_loss(
                    logits,
                    None if teacher_logits is None else teacher_logits[idx],
                    hard[idx], distill_temperature, distill_alpha)
                loss_val = float(loss.data)
                if not np.isfinite(loss_val):
                    raise DivergenceError(
                        f"{stage_name}: loss became non-finite",
                        report={"stage": stage_name, "epoch": epoch,
                                "batch": batch_no, "loss": loss_val})
                opt.zero_grad()
                T.backward(tape, loss)
            opt.step()
            losses.append(loss_val)
        if any(not np.all(np.isfinite(p.data)) for p in params):
            raise DivergenceError(
                f"{stage_name}: parameters became non-finite",
                report={"stage": stage_name, "epoch": epoch})
        if noise is not None and not noise.all_zero:
            # judge snapshots under the condition they will be used in
            val_rng = np.random.default_rng([int(seed), 3, epoch])
            val_acc = net.evaluate(X_val, y_val, noise=noise, noise_rng=val_rng)
        else:
            val_acc = net.evaluate(X_val, y_val)
        if log_every_epoch:
            history.append({"stage": stage_name, "epoch": epoch,
                            "lr": opt.lr, "train_loss": float(np.mean(losses)),
                            "val_acc": val_acc})
        if val_acc > best_acc:
            best_acc, best_epoch = val_acc, epoch
            best_net = net.clone()
    if best_net is None:  # epochs == 0: evaluate as-is
        best_net, best_acc, best_epoch = net.clone(), net.evaluate(X_val, y_val), -1
    return TrainResult(best_net, best_acc, best_epoch, history)


# ---------------------------------------------------------------------------
# gradual bit reduction


@dataclass
class StageSpec:
    """One rung of the bit ladder.

    `init` names the stage whose best weights seed this one ("fp" for
    the float baseline); `teacher` names the frozen net to distill from
    ("fp", an earlier stage, or None for plain cross-entropy).
    """
    name: str
    weight_bits: int
    act_bits: int
    epochs: int
    lr: float
    init: str = "fp"
    teacher: str | None = "fp"


def stage_label(weight_bits, act_bits) -> str:
    return f"Q{weight_bits}{act_bits}"


def validate_schedule(stages) -> None:
    seen = {"fp"}
    if not stages:
        raise ConfigError("gradual schedule has no stages")
    for st in stages:
        if st.name in seen:
            raise ConfigError(f"duplicate stage name {st.name!r}")
        if st.init not in seen:
            raise ConfigError(
                f"stage {st.name!r} initializes from unknown stage {st.init!r}")
        if st.teacher is not None and st.teacher not in seen:
            raise ConfigError(
                f"stage {st.name!r} distills from unknown stage {st.teacher!r}")
        if not (2 <= st.weight_bits <= 8 and 2 <= st.act_bits <= 8):
            raise ConfigError(
                f"stage {st.name!r}: bitwidths must lie in [2, 8]")
        if st.epochs < 0 or st.lr <= 0:
            raise ConfigError(f"stage {st.name!r}: bad epochs/lr")
        seen.add(st.name)


def run_gradual_quantization(fp_net, data, stages, batch_size=64,
                             lr_decay=0.98, optimizer="adam", momentum=0.9,
                             weight_decay=0.0, seed=0, distill_temperature=4.0,
                             distill_alpha=0.9, calib_count=64) -> dict:
    """Run the ladder; returns {stage name: TrainResult} (keys also
    include "fp" mapping to the given float net for teacher lookups).

    The first time a net is quantized its activation scales are
    calibrated from one deterministic batch (the first `calib_count`
    training samples); later stages inherit scales from their init
    stage.
    """
    validate_schedule(stages)
    results = {"fp": TrainResult(fp_net, float("nan"), -1)}
    for stage_no, st in enumerate(stages):
        src = results[st.init].best_net
        net = src.clone()
        if net.mode == "fp":
            net.set_mode("fake_quant")
        net.set_bitwidths(st.weight_bits, st.act_bits)
        net.calibrate(data["X_train"][:calib_count])
        teacher = None if st.teacher is None else results[st.teacher].best_net
        res = train_stage(net, data, st.epochs, batch_size, st.lr, lr_decay,
                          optimizer, momentum, weight_decay,
                          seed=int(seed) * 1000 + stage_no, teacher=teacher,
                          distill_temperature=distill_temperature,
                          distill_alpha=distill_alpha, stage_name=st.name)
        results[st.name] = res
    return results
