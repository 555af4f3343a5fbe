"""Analog imperfection model: Gaussian perturbations scaled to quantizer
step sizes.

Three injection points, each a percentage of the relevant least
significant bit: weight storage (per quantized-weight element), the
activation DAC output, and the accumulated MAC sum just before output
binning.  A spec with all three at zero is a guaranteed no-op: the
evaluation path stays on the exact integer route and draws nothing.
"""

from __future__ import annotations

from dataclasses import dataclass
from statistics import mean, pstdev

import numpy as np

from .errors import UsageError


@dataclass(frozen=True)
class NoiseSpec:
    """Injection strengths as percent of one LSB at each site."""
    sigma_w: float = 0.0
    sigma_a: float = 0.0
    sigma_mac: float = 0.0

    def __post_init__(self):
        for fieldname in ("sigma_w", "sigma_a", "sigma_mac"):
            v = getattr(self, fieldname)
            if not (v >= 0.0 and np.isfinite(v)):
                raise UsageError(f"NoiseSpec.{fieldname} must be finite and >= 0")

    @property
    def all_zero(self) -> bool:
        return self.sigma_w == 0.0 and self.sigma_a == 0.0 and self.sigma_mac == 0.0

    def as_dict(self) -> dict:
        return {"sigma_w": self.sigma_w, "sigma_a": self.sigma_a,
                "sigma_mac": self.sigma_mac}


def inject(values: np.ndarray, lsb: float, pct: float, rng) -> np.ndarray:
    """values + N(0, (pct/100) * lsb); float32, fresh draw per call."""
    if pct == 0.0:
        return values
    std = (float(pct) / 100.0) * float(lsb)
    return (values + rng.normal(0.0, std, size=values.shape)).astype(np.float32)


@dataclass
class NoiseEvalResult:
    spec: NoiseSpec
    accuracies: list
    seed: int
    frozen_weights: bool

    @property
    def mean_acc(self) -> float:
        return mean(self.accuracies)

    @property
    def std_acc(self) -> float:
        return pstdev(self.accuracies) if len(self.accuracies) > 1 else 0.0

    def as_dict(self) -> dict:
        return {"spec": self.spec.as_dict(), "seed": self.seed,
                "repetitions": len(self.accuracies),
                "frozen_weights": self.frozen_weights,
                "accuracies": self.accuracies,
                "mean_acc": self.mean_acc, "std_acc": self.std_acc}


def noisy_eval(net, X, y, spec: NoiseSpec, repetitions=10, seed=0,
               freeze_weights_per_repetition=False,
               batch_size=256) -> NoiseEvalResult:
    """Repeated noisy accuracy with independent per-repetition streams
    (stream r is seeded by [seed, r], so adding repetitions never
    changes earlier ones).

    With frozen weights each repetition plays one fabricated device:
    the whole set goes through a single forward pass, so the one weight
    draw of that pass covers every sample.
    """
    if net.mode != "fq":
        raise UsageError("noisy_eval expects a net in fq mode")
    accs = []
    bs = len(X) if freeze_weights_per_repetition else batch_size
    for rep in range(repetitions):
        rng = np.random.default_rng([int(seed), rep])
        accs.append(net.evaluate(X, y, batch_size=bs, noise=spec,
                                 noise_rng=rng))
    return NoiseEvalResult(spec, accs, int(seed), freeze_weights_per_repetition)


def eval_noise_ladder(net, X, y, specs, repetitions=10, seed=0,
                      freeze_weights_per_repetition=False) -> list:
    return [noisy_eval(net, X, y, s, repetitions, seed,
                       freeze_weights_per_repetition) for s in specs]


def noise_aware_train(net, data, spec: NoiseSpec, epochs, batch_size, lr,
                      **kwargs):
    """Fine-tune an fq net with noise injected in every training forward
    (straight-through gradients see the perturbed values but the noise
    itself enters as a constant).  Thin wrapper over train_stage."""
    from .training import train_stage
    if net.mode != "fq":
        raise UsageError("noise_aware_train expects a net in fq mode")
    return train_stage(net, data, epochs, batch_size, lr, noise=spec, **kwargs)


DEFAULT_TUNE_RECIPES = (
    {"name": "soft15", "epochs": 15, "lr": 0.005, "distill_alpha": 0.9,
     "use_teacher": True},
    {"name": "mix25", "epochs": 25, "lr": 0.005, "distill_alpha": 0.5,
     "use_teacher": True},
    {"name": "hard25", "epochs": 25, "lr": 0.005, "distill_alpha": 0.9,
     "use_teacher": False},
)


def robustness_tune(net, data, spec: NoiseSpec, batch_size=50, lr_decay=0.98,
                    seed=0, teacher=None, recipes=DEFAULT_TUNE_RECIPES,
                    val_repetitions=5):
    """Noise-aware touch-ups with validation-based recipe selection.

    No single schedule wins on every model, so this trains each recipe
    from a clone of `net` and keeps the one with the best noisy
    validation accuracy (median over `val_repetitions` draws).  All
    seeding is derived from `seed`, so the winner is deterministic.
    Returns (best_net, report) where the report records every
    candidate's validation score.
    """
    if net.mode != "fq":
        raise UsageError("robustness_tune expects a net in fq mode")
    if not recipes:
        raise UsageError("robustness_tune: no recipes to try")
    X_val, y_val = data["X_val"], data["y_val"]
    best_acc, best_net, report = -1.0, None, {"candidates": {}}
    for rno, recipe in enumerate(recipes):
        res = noise_aware_train(
            net.clone(), data, spec, recipe["epochs"], batch_size,
            recipe["lr"], lr_decay=lr_decay,
            seed=int(seed) * 1000 + 55 + rno,
            teacher=teacher if recipe.get("use_teacher", True) else None,
            distill_alpha=recipe.get("distill_alpha", 0.9),
            stage_name=f"nt-{recipe['name']}")
        val_acc = float(np.median(noisy_eval(
            res.best_net, X_val, y_val, spec, val_repetitions,
            int(seed) + 500).accuracies))
        report["candidates"][recipe["name"]] = val_acc
        if val_acc > best_acc:
            best_acc, best_net = val_acc, res.best_net
            report["selected"] = recipe["name"]
    return best_net, report
