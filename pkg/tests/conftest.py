"""Shared fixtures: a small separable dataset and a trained low-bit net.

Everything here is deterministic (fixed generator seeds), so any test
using these fixtures sees the same arrays and the same trained weights
on every run.
"""

import numpy as np
import pytest

from quantnet.data import make_dataset
from quantnet.layers import build_kws_net, replace_bn_relu
from quantnet.training import StageSpec, run_gradual_quantization, train_stage


@pytest.fixture(scope="session")
def tiny_data():
    """Small, mostly clean sequence task a tiny net can learn quickly."""
    return make_dataset(classes=3, channels=4, length=32, train=150, val=60,
                        test=80, seed=11, shift_max=2, amp_jitter=0.1,
                        noise_std=0.15)


def small_kws_net(seed=3):
    """Three dilated conv blocks sized for the tiny dataset."""
    return build_kws_net(in_channels=4, embed_units=8, filters=6, kernel=3,
                         dilations=(1, 1, 2), classes=3, input_bits=4,
                         rng=np.random.default_rng([seed, 100]))


@pytest.fixture(scope="session")
def tiny_fq_setup(tiny_data):
    """A short train-quantize-transform pipeline, shared across test files.

    Returns the trained fake-quant net (ternary weights, 4-bit
    activations), its BN-free counterpart, the higher-bit stage used as
    a distillation teacher, and the dataset.
    """
    net = small_kws_net()
    fp = train_stage(net, tiny_data, 6, 30, 0.01, lr_decay=0.98, seed=301,
                     stage_name="fp")
    stages = [StageSpec("Q44", 4, 4, 3, 0.005, "fp", "fp"),
              StageSpec("Q24", 2, 4, 4, 0.005, "Q44", "Q44")]
    res = run_gradual_quantization(fp.best_net, tiny_data, stages,
                                   batch_size=30, seed=3)
    fq = replace_bn_relu(res["Q24"].best_net)
    return {
        "data": tiny_data,
        "fp": fp.best_net,
        "fake_quant": res["Q24"].best_net,
        "teacher": res["Q44"].best_net,
        "fq": fq,
    }
