"""Deterministic archives: byte-identical saves, exact round trips,
checksum enforcement, and kind/format guards."""

import os

import numpy as np
import pytest

from conftest import small_kws_net
from quantnet.archive import (archive_digest, load_integer_model,
                              load_network, save_integer_model, save_network)
from quantnet.errors import DataError, UsageError
from quantnet.integer import compile_model, verify_equivalence
from quantnet.layers import build_resblock_net, replace_bn_relu


def corrupt_one_blob(directory):
    blob_dir = os.path.join(directory, "blobs")
    target = os.path.join(blob_dir, sorted(os.listdir(blob_dir))[0])
    with open(target, "rb") as fh:
        raw = bytearray(fh.read())
    raw[-1] ^= 0xFF
    with open(target, "wb") as fh:
        fh.write(raw)


class TestNetworkArchives:
    def test_fq_round_trip_is_bit_exact(self, tiny_fq_setup, tmp_path):
        fq = tiny_fq_setup["fq"]
        X = tiny_fq_setup["data"]["X_test"][:32]
        d = str(tmp_path / "net")
        save_network(d, fq)
        loaded = load_network(d)
        assert loaded.mode == "fq"
        assert loaded.meta == fq.meta
        assert np.array_equal(loaded.predict(X), fq.predict(X))

    def test_fp_round_trip_is_bit_exact(self, tiny_fq_setup, tmp_path):
        net = tiny_fq_setup["fp"]
        X = tiny_fq_setup["data"]["X_test"][:32]
        d = str(tmp_path / "net")
        save_network(d, net)
        loaded = load_network(d)
        assert loaded.mode == "fp"
        assert np.array_equal(loaded.predict(X), net.predict(X))

    def test_identical_saves_are_byte_identical(self, tiny_fq_setup, tmp_path):
        fq = tiny_fq_setup["fq"]
        d1, d2 = str(tmp_path / "a"), str(tmp_path / "b")
        save_network(d1, fq)
        save_network(d2, fq)
        assert archive_digest(d1) == archive_digest(d2)

    def test_load_save_reproduces_the_bytes(self, tiny_fq_setup, tmp_path):
        d1, d2 = str(tmp_path / "a"), str(tmp_path / "b")
        save_network(d1, tiny_fq_setup["fq"])
        save_network(d2, load_network(d1))
        assert archive_digest(d1) == archive_digest(d2)

    def test_shared_join_quantizer_survives_the_round_trip(self, tmp_path):
        net = build_resblock_net(depth=1, widths=(4,), in_channels=2,
                                 classes=3, rng=np.random.default_rng(31))
        for bn in net.nodes_of_kind("batchnorm"):
            bn.initialized = True
        net.set_mode("fake_quant")
        net.set_bitwidths(4, 4)
        X = np.random.default_rng(32).standard_normal((6, 2, 8, 8)).astype(
            np.float32)
        net.calibrate(X)
        fq = replace_bn_relu(net)

        d = str(tmp_path / "res")
        save_network(d, fq)
        loaded = load_network(d)
        add = loaded.nodes_of_kind("add")[0]
        srcs = [loaded.node(ref) for ref in add.inputs]
        assert srcs[0].qc is srcs[1].qc
        assert srcs[0].qc.trainable is False
        assert np.array_equal(loaded.forward_eval(X), fq.forward_eval(X))

    def test_refuses_to_clobber_a_foreign_directory(self, tmp_path):
        d = tmp_path / "keep"
        d.mkdir()
        (d / "notes.txt").write_text("do not delete")
        with pytest.raises(UsageError, match="refusing to overwrite"):
            save_network(str(d), small_kws_net())
        assert (d / "notes.txt").read_text() == "do not delete"

    def test_resaving_over_an_archive_is_fine(self, tmp_path):
        d = str(tmp_path / "net")
        save_network(d, small_kws_net())
        save_network(d, small_kws_net(seed=5))
        load_network(d)

    def test_corrupted_blob_is_detected(self, tiny_fq_setup, tmp_path):
        d = str(tmp_path / "net")
        save_network(d, tiny_fq_setup["fq"])
        clean_digest = archive_digest(d)
        corrupt_one_blob(d)
        assert archive_digest(d) != clean_digest
        with pytest.raises(DataError, match="failed its checksum"):
            load_network(d)

    def test_missing_and_malformed_archives(self, tmp_path):
        with pytest.raises(DataError, match="no archive at"):
            load_network(str(tmp_path / "nowhere"))
        d = tmp_path / "junk"
        d.mkdir()
        (d / "manifest.json").write_text('{"format": "something-else"}\n')
        with pytest.raises(DataError, match="is not a"):
            load_network(str(d))

    def test_kind_mismatch_is_rejected(self, tiny_fq_setup, tmp_path):
        d = str(tmp_path / "net")
        save_network(d, tiny_fq_setup["fq"])
        with pytest.raises(DataError, match="not an integer model"):
            load_integer_model(d)


class TestIntegerModelArchives:
    def test_round_trip_is_bit_exact(self, tiny_fq_setup, tmp_path):
        fq = tiny_fq_setup["fq"]
        X = tiny_fq_setup["data"]["X_test"]
        model = compile_model(fq)
        d = str(tmp_path / "int")
        save_integer_model(d, model)
        loaded = load_integer_model(d)
        assert np.array_equal(loaded.predict(X), model.predict(X))
        assert loaded.describe() == model.describe()
        assert verify_equivalence(loaded, fq, X).ok

    def test_plan_dtypes_survive(self, tiny_fq_setup, tmp_path):
        model = compile_model(tiny_fq_setup["fq"])
        d = str(tmp_path / "int")
        save_integer_model(d, model)
        loaded = load_integer_model(d)
        for plan in loaded.plans:
            assert plan.thresholds.dtype == np.int64
            assert plan.weight_codes.dtype == np.int8

    def test_identical_saves_are_byte_identical(self, tiny_fq_setup, tmp_path):
        model = compile_model(tiny_fq_setup["fq"])
        d1, d2 = str(tmp_path / "a"), str(tmp_path / "b")
        save_integer_model(d1, model)
        save_integer_model(d2, model)
        assert archive_digest(d1) == archive_digest(d2)

    def test_corrupted_thresholds_are_detected(self, tiny_fq_setup, tmp_path):
        d = str(tmp_path / "int")
        save_integer_model(d, compile_model(tiny_fq_setup["fq"]))
        corrupt_one_blob(d)
        with pytest.raises(DataError, match="failed its checksum"):
            load_integer_model(d)

    def test_kind_mismatch_is_rejected(self, tiny_fq_setup, tmp_path):
        d = str(tmp_path / "int")
        save_integer_model(d, compile_model(tiny_fq_setup["fq"]))
        with pytest.raises(DataError, match="not a network"):
            load_network(d)
