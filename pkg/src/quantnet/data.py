"""Synthetic classification corpora and on-disk round trips.

Sequence sets mimic multi-channel audio features: each class owns a
fixed bank of band-limited waveforms per channel; samples are circular
time shifts with amplitude jitter and additive Gaussian noise, so class
identity lives in the cross-channel frequency/phase signature rather
than in absolute amplitude.  The image variant does the same with 2-d
sinusoid plaids.

CSV persistence uses repr() for floats, so a save/load cycle is exact.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .errors import DataError


def _templates_1d(classes, channels, length, rng):
    t = np.arange(length, dtype=np.float64) / length
    bank = np.zeros((classes, channels, length), dtype=np.float64)
    for c in range(classes):
        for ch in range(channels):
            for _ in range(3):
                freq = rng.integers(1, max(2, length // 8))
                phase = rng.uniform(0.0, 2.0 * np.pi)
                amp = rng.uniform(0.4, 1.0)
                bank[c, ch] += amp * np.sin(2.0 * np.pi * freq * t + phase)
        bank[c] /= max(1e-9, np.abs(bank[c]).max())
    return bank


def _templates_2d(classes, channels, side, rng):
    yy, xx = np.meshgrid(np.arange(side) / side, np.arange(side) / side,
                         indexing="ij")
    bank = np.zeros((classes, channels, side, side), dtype=np.float64)
    for c in range(classes):
        for ch in range(channels):
            for _ in range(3):
                fy = rng.integers(1, max(2, side // 4))
                fx = rng.integers(1, max(2, side // 4))
                phase = rng.uniform(0.0, 2.0 * np.pi)
                amp = rng.uniform(0.4, 1.0)
                bank[c, ch] += amp * np.sin(2.0 * np.pi * (fy * yy + fx * xx) + phase)
        bank[c] /= max(1e-9, np.abs(bank[c]).max())
    return bank


def _draw_split(bank, count, rng, shift_max, amp_jitter, noise_std):
    classes = bank.shape[0]
    labels = rng.integers(0, classes, size=count)
    X = np.zeros((count,) + bank.shape[1:], dtype=np.float64)
    for i, lab in enumerate(labels):
        sample = bank[lab]
        if shift_max > 0:
            shift = int(rng.integers(-shift_max, shift_max + 1))
            sample = np.roll(sample, shift, axis=-1)
        scale = 1.0 + amp_jitter * rng.uniform(-1.0, 1.0)
        sample = sample * scale
        if noise_std > 0:
            sample = sample + rng.normal(0.0, noise_std, size=sample.shape)
        X[i] = sample
    return X.astype(np.float32), labels.astype(np.int64)


def make_dataset(classes=4, channels=8, length=64, train=1200, val=400,
                 test=1000, seed=0, shift_max=4, amp_jitter=0.25,
                 noise_std=0.4) -> dict:
    """Sequence dataset dict with X_*/y_* arrays and a meta block."""
    if classes < 2 or channels < 1 or length < 2:
        raise DataError("make_dataset: need >=2 classes, >=1 channel, length >=2")
    rng = np.random.default_rng(seed)
    bank = _templates_1d(classes, channels, length, rng)
    data = {}
    for split, count in (("train", train), ("val", val), ("test", test)):
        X, y = _draw_split(bank, count, rng, shift_max, amp_jitter, noise_std)
        data[f"X_{split}"] = X
        data[f"y_{split}"] = y
    data["meta"] = {
        "kind": "sequence", "classes": classes, "channels": channels,
        "length": length, "seed": seed, "shift_max": shift_max,
        "amp_jitter": amp_jitter, "noise_std": noise_std,
    }
    return data


def make_image_dataset(classes=4, channels=3, side=16, train=600, val=200,
                       test=400, seed=0, shift_max=2, amp_jitter=0.25,
                       noise_std=0.3) -> dict:
    if classes < 2 or channels < 1 or side < 2:
        raise DataError("make_image_dataset: need >=2 classes, side >=2")
    rng = np.random.default_rng(seed)
    bank = _templates_2d(classes, channels, side, rng)
    data = {}
    for split, count in (("train", train), ("val", val), ("test", test)):
        X, y = _draw_split(bank, count, rng, shift_max, amp_jitter, noise_std)
        data[f"X_{split}"] = X
        data[f"y_{split}"] = y
    data["meta"] = {
        "kind": "image", "classes": classes, "channels": channels,
        "side": side, "seed": seed, "shift_max": shift_max,
        "amp_jitter": amp_jitter, "noise_std": noise_std,
    }
    return data


def one_hot(labels, classes) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= classes:
        raise DataError(f"labels outside [0, {classes})")
    out = np.zeros((len(labels), classes), dtype=np.float32)
    out[np.arange(len(labels)), labels] = 1.0
    return out


# ---------------------------------------------------------------------------
# persistence (repr round trip)


def save_dataset(directory: str, data: dict) -> None:
    os.makedirs(directory, exist_ok=True)
    meta = dict(data["meta"])
    meta["feature_shape"] = list(data["X_train"].shape[1:])
    with open(os.path.join(directory, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for split in ("train", "val", "test"):
        X, y = data[f"X_{split}"], data[f"y_{split}"]
        flat = X.reshape(len(X), -1)
        with open(os.path.join(directory, f"{split}.csv"), "w") as fh:
            for label, row in zip(y, flat):
                fh.write(str(int(label)))
                for v in row:
                    fh.write("," + repr(float(v)))
                fh.write("\n")


def load_dataset(directory: str) -> dict:
    meta_path = os.path.join(directory, "meta.json")
    if not os.path.exists(meta_path):
        raise DataError(f"no dataset at {directory!r} (missing meta.json)")
    with open(meta_path) as fh:
        meta = json.load(fh)
    shape = tuple(meta.pop("feature_shape"))
    expected = int(np.prod(shape))
    data = {"meta": meta}
    for split in ("train", "val", "test"):
        path = os.path.join(directory, f"{split}.csv")
        if not os.path.exists(path):
            raise DataError(f"dataset at {directory!r} is missing {split}.csv")
        labels, rows = [], []
        with open(path) as fh:
            for ln, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                parts = line.split(",")
                if len(parts) - 1 != expected:
                    raise DataError(
                        f"{path}:{ln}: row has {len(parts) - 1} features, "
                        f"expected {expected}"
                    )
                try:
                    labels.append(int(parts[0]))
                    rows.append([float(p) for p in parts[1:]])
                except ValueError as exc:
                    raise DataError(f"{path}:{ln}: bad value ({exc})") from None
        if not rows:
            raise DataError(f"{path}: no samples")
        X = np.asarray(rows, dtype=np.float32)
        data[f"X_{split}"] = X.reshape((len(rows),) + shape)
        data[f"y_{split}"] = np.asarray(labels, dtype=np.int64)
    return data


def batch_indices(n, batch_size, rng):
    """Shuffled minibatch index arrays for one epoch.  A trailing batch
    of size 1 is merged into its predecessor (BN needs >=2 samples)."""
    order = rng.permutation(n)
    start = 0
    while start < n:
        end = min(start + batch_size, n)
        if n - end == 1:
            end = n
        yield order[start:end]
        start = end
