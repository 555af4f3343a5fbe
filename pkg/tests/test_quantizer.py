"""Staircase quantizer: frozen values, algebraic properties, code paths.

Property checks (idempotence, monotonicity, grid membership, code round
trips) are asserted with zero tolerance: the quantizer output is defined
as a float32 expression and must reproduce itself bit for bit.
"""

import numpy as np
import pytest

from quantnet.errors import UsageError
from quantnet.quantizer import (
    QuantConfig,
    code64,
    dequantize_codes,
    quantize_array,
    quantize_core,
    round_half_away,
    to_integer_codes,
)


def make_cfg(nb, lower, s):
    cfg = QuantConfig(nb, lower)
    cfg.set_scale(float(s))
    return cfg


class TestRoundHalfAway:
    def test_frozen_table(self):
        v = np.array([-2.5, -1.5, -0.5, -0.49, 0.0, 0.49, 0.5, 1.5, 2.5],
                     dtype=np.float64)
        want = np.array([-3.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 3.0])
        assert np.array_equal(round_half_away(v), want)

    def test_zero_results_carry_no_sign(self):
        v = np.array([-0.4, -0.0, 0.0, 0.4], dtype=np.float32)
        out = round_half_away(v)
        assert np.array_equal(out, np.zeros(4))
        assert not np.signbit(out).any()

    def test_dtype_is_preserved(self):
        assert round_half_away(np.float32([1.5])).dtype == np.float32
        assert round_half_away(np.float64([1.5])).dtype == np.float64

    def test_never_rounds_to_even(self):
        v = np.arange(-9.5, 10.5, 1.0)  # every half-integer in [-9.5, 9.5]
        out = round_half_away(v)
        assert np.array_equal(out, np.where(v < 0, v - 0.5, v + 0.5))


class TestFrozenStaircases:
    def test_ternary_symmetric_grid(self):
        cfg = make_cfg(2, -1.0, 0.0)  # n = 1, clip range 1
        x = np.array([-2.0, -1.0, -0.6, -0.5, -0.4, 0.4, 0.5, 0.6, 1.0, 2.0],
                     dtype=np.float32)
        want = np.array([-1, -1, -1, -1, 0, 0, 1, 1, 1, 1], dtype=np.float32)
        assert np.array_equal(quantize_array(x, cfg), want)
        assert np.array_equal(to_integer_codes(x, cfg),
                              want.astype(np.int8))

    def test_three_bit_one_sided_grid(self):
        cfg = make_cfg(3, 0.0, 0.0)  # n = 3, inputs below 0 clip to 0
        x = np.array([-0.2, 0.0, 0.1, 0.2, 0.5, 0.9, 1.5], dtype=np.float32)
        want_codes = np.array([0, 0, 0, 1, 2, 3, 3], dtype=np.int8)
        assert np.array_equal(to_integer_codes(x, cfg), want_codes)
        want = want_codes.astype(np.float32) / np.float32(3)
        assert np.array_equal(quantize_array(x, cfg), want)

    def test_scale_stretches_the_grid(self):
        s = float(np.log(2.0))
        cfg = make_cfg(2, -1.0, s)  # clip range 2, levels {-2, 0, 2}
        x = np.array([-3.0, -0.9, 0.9, 1.1, 3.0], dtype=np.float32)
        got = quantize_array(x, cfg)
        scale = np.exp(np.float32(s))
        want = np.array([-1.0, 0.0, 0.0, 1.0, 1.0], dtype=np.float32) * scale
        assert np.array_equal(got, want)

    def test_core_helper_matches_scaleless_config(self):
        x = np.linspace(-1.5, 1.5, 41, dtype=np.float32)
        cfg = make_cfg(4, -1.0, 0.0)
        assert np.array_equal(quantize_core(x, -1.0, 4), quantize_array(x, cfg))


class TestQuantizerProperties:
    """The acceptance sweep runs 1e5 samples; this is the same battery at
    unit-test size, still with zero violations allowed."""

    def cases(self):
        rng = np.random.default_rng(2024)
        for nb in range(2, 9):
            for lower in (-1.0, 0.0):
                s = float(rng.uniform(-3.0, 3.0))
                cfg = make_cfg(nb, lower, s)
                x = (rng.standard_normal(1500) * np.exp(s) * 1.5).astype(np.float32)
                yield cfg, x

    def test_idempotence_bit_for_bit(self):
        for cfg, x in self.cases():
            q = quantize_array(x, cfg)
            assert np.array_equal(quantize_array(q, cfg), q), repr(cfg)

    def test_monotonicity(self):
        for cfg, x in self.cases():
            xs = np.sort(x)
            q = quantize_array(xs, cfg)
            assert (np.diff(q) >= 0).all(), repr(cfg)

    def test_outputs_lie_on_the_code_grid(self):
        for cfg, x in self.cases():
            q = quantize_array(x, cfg)
            codes = to_integer_codes(x, cfg)
            assert codes.dtype == np.int8
            assert codes.min() >= cfg.lower_bound * cfg.n
            assert codes.max() <= cfg.n
            assert np.array_equal(dequantize_codes(codes, cfg), q), repr(cfg)

    def test_codes_round_trip_through_requantization(self):
        for cfg, x in self.cases():
            codes = to_integer_codes(x, cfg)
            values = dequantize_codes(codes, cfg)
            assert np.array_equal(to_integer_codes(values, cfg), codes), repr(cfg)

    def test_saturation_beyond_the_clip_range(self):
        for cfg, _ in self.cases():
            big = np.array([1e9, -1e9], dtype=np.float32)
            codes = to_integer_codes(big, cfg)
            assert codes[0] == cfg.n
            assert codes[1] == cfg.lower_bound * cfg.n


class TestCode64:
    def test_grid_points_map_to_their_own_code(self):
        rng = np.random.default_rng(7)
        for _ in range(30):
            nb = int(rng.integers(2, 9))
            lower = float(rng.choice([-1.0, 0.0]))
            cfg = make_cfg(nb, lower, float(rng.uniform(-2, 2)))
            codes = np.arange(int(lower * cfg.n), cfg.n + 1, dtype=np.int64)
            y = cfg.scale64 * (codes.astype(np.float64) / cfg.n)
            assert np.array_equal(code64(y, cfg), codes)

    def test_monotone_and_saturating(self):
        cfg = make_cfg(4, -1.0, 0.5)
        y = np.linspace(-3 * cfg.scale64, 3 * cfg.scale64, 2001)
        c = code64(y, cfg)
        assert c.dtype == np.int64
        assert (np.diff(c) >= 0).all()
        assert c[0] == -cfg.n and c[-1] == cfg.n

    def test_halfway_points_round_away_from_zero(self):
        # n = 1 and unit scale keep the half-way points +-0.5 exactly
        # representable, so the tie-breaking rule is actually exercised
        cfg = make_cfg(2, -1.0, 0.0)
        y = np.array([0.5, -0.5])
        assert np.array_equal(code64(y, cfg), [1, -1])
        below = 0.5 - 1e-9
        assert code64(np.array([below, -below]), cfg).tolist() == [0, 0]


class TestQuantConfig:
    def test_bitwidth_bounds(self):
        with pytest.raises(UsageError, match=">= 2"):
            QuantConfig(1, -1.0)
        with pytest.raises(UsageError, match="8-bit code storage"):
            QuantConfig(9, -1.0)
        with pytest.raises(UsageError, match="-1 or 0"):
            QuantConfig(4, 0.5)

    def test_level_counts(self):
        assert QuantConfig(2, -1.0).n == 1
        assert QuantConfig(4, -1.0).n == 7
        assert QuantConfig(8, 0.0).n == 127

    def test_use_before_scale_initialization_fails(self):
        cfg = QuantConfig(4, -1.0)
        assert not cfg.initialized
        with pytest.raises(UsageError, match="scale"):
            quantize_array(np.zeros(3, dtype=np.float32), cfg)

    def test_init_scale_from_uses_peak_magnitude(self):
        cfg = QuantConfig(4, -1.0)
        cfg.init_scale_from(np.array([0.1, -5.0, 3.0]))
        assert float(cfg.s.data) == pytest.approx(np.log(5.0), abs=1e-6)
        zero = QuantConfig(4, -1.0)
        zero.init_scale_from(np.zeros(4))
        assert float(zero.s.data) == 0.0

    def test_lsb_is_scale_over_levels(self):
        cfg = make_cfg(4, -1.0, 1.0)
        assert cfg.lsb32 == pytest.approx(np.exp(1.0) / 7, rel=1e-6)

    def test_clone_is_independent(self):
        cfg = make_cfg(4, -1.0, 0.25)
        dup = cfg.clone()
        assert dup is not cfg and dup.s is not cfg.s
        assert float(dup.s.data) == float(cfg.s.data)
        dup.set_scale(2.0)
        assert float(cfg.s.data) == pytest.approx(0.25)

    def test_frozen_config_scale_takes_no_gradient(self):
        cfg = QuantConfig(4, -1.0, trainable=False)
        cfg.init_scale_from(np.ones(3))
        assert cfg.s.requires_grad is False

    def test_describe_round_trips_the_fields(self):
        cfg = make_cfg(5, 0.0, -0.75)
        d = cfg.describe()
        assert d["nb"] == 5 and d["lower_bound"] == 0.0
        assert d["s"] == pytest.approx(-0.75)
        rebuilt = QuantConfig(d["nb"], d["lower_bound"])
        rebuilt.set_scale(d["s"])
        x = np.linspace(-2, 2, 50, dtype=np.float32)
        assert np.array_equal(quantize_array(x, rebuilt), quantize_array(x, cfg))


class TestDtypeDiscipline:
    def test_quantize_core_preserves_float64(self):
        x = np.linspace(-2, 2, 11, dtype=np.float64)
        assert quantize_core(x, -1.0, 4).dtype == np.float64

    def test_quantize_array_always_returns_float32(self):
        cfg = make_cfg(4, -1.0, 0.0)
        out = quantize_array(np.linspace(-2, 2, 11), cfg)
        assert out.dtype == np.float32
