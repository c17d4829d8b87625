"""Bit-error metrics, capacity arithmetic, curve export, case evaluation."""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gsk.cover_gan import MODE_FIXEDPOINT16, BitBlock, Ciphertext, quantize_fixedpoint
from gsk.errors import (
    EmptyInputError,
    EmptyLogError,
    EmptyReportError,
    LengthMismatchError,
)
from gsk.evaluation import (
    availability_factor,
    bit_error_rate,
    digits_to_bits,
    export_training_curves,
    key_size_factor,
    load_training_curves,
    run_three_cases,
    value_to_bits,
)
from gsk.message_gan import GrayImage
from gsk.protocol import CoverImage, ExtractionKey, KeyBlock, SecretMessage


class TestBitErrorRate:
    def test_identical(self):
        assert bit_error_rate([0, 1, 0, 1], [0, 1, 0, 1]) == 0.0

    def test_complement(self):
        assert bit_error_rate([0, 1, 0, 1], [1, 0, 1, 0]) == 1.0

    def test_independent_random_sequences_near_half(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            a = rng.integers(0, 2, 1200)
            b = rng.integers(0, 2, 1200)
            assert 0.45 <= bit_error_rate(a, b) <= 0.55

    def test_errors(self):
        with pytest.raises(LengthMismatchError):
            bit_error_rate([0, 1], [0])
        with pytest.raises(EmptyInputError):
            bit_error_rate([], [])

    @given(st.lists(st.integers(0, 1), min_size=1, max_size=64))
    def test_self_distance_zero(self, bits):
        assert bit_error_rate(bits, bits) == 0.0


class TestCapacityMetrics:
    def test_af_single_digit(self):
        img = GrayImage(np.zeros((28, 28), dtype=np.uint8))
        af = availability_factor(4, img)
        assert af == pytest.approx(4 / 6272)
        assert af == pytest.approx(0.000638, abs=2e-6)

    def test_af_full_utilization(self):
        img = GrayImage(np.zeros((28, 28), dtype=np.uint8))
        assert availability_factor(6272, img) == 1.0

    def test_af_empty_message(self):
        img = GrayImage(np.zeros((28, 28), dtype=np.uint8))
        assert availability_factor(0, img) == 0.0

    @given(st.integers(0, 6272))
    def test_af_closed_form(self, bits):
        img = GrayImage(np.zeros((28, 28), dtype=np.uint8))
        assert availability_factor(bits, img) == bits / 6272

    def _binary_key(self, blocks):
        rng = np.random.default_rng(1)
        made = []
        for _ in range(blocks):
            c = Ciphertext(tuple(int(2 * b - 1) for b in rng.integers(0, 2, 4)))
            made.append(KeyBlock(c, BitBlock.random(rng, 4)))
        return ExtractionKey(tuple(made), mode="binary", rng_mode="seeded")

    def test_ksf_binary_single_digit(self):
        key = self._binary_key(1)
        assert key_size_factor(key, SecretMessage((5,))) == 2.0

    def test_ksf_binary_any_length(self):
        key = self._binary_key(300)
        msg = SecretMessage(tuple(np.random.default_rng(2).integers(0, 10, 300)))
        assert key_size_factor(key, msg) == 2.0

    def test_ksf_fixedpoint(self):
        rng = np.random.default_rng(3)
        c = Ciphertext(quantize_fixedpoint(rng.uniform(-1, 1, 4)),
                       MODE_FIXEDPOINT16)
        key = ExtractionKey((KeyBlock(c, BitBlock.random(rng, 4)),),
                            mode=MODE_FIXEDPOINT16, rng_mode="seeded")
        assert key_size_factor(key, SecretMessage((5,))) == (4 * 16 + 4) / 4


class TestBitHelpers:
    def test_value_to_bits(self):
        assert value_to_bits(5) == (0, 1, 0, 1)
        assert value_to_bits(15) == (1, 1, 1, 1)

    def test_digits_to_bits(self):
        assert digits_to_bits([5, 0]) == (0, 1, 0, 1, 0, 0, 0, 0)


class TestCurveExport:
    def test_roundtrip(self, tmp_path):
        log = [(1000, 0.4812, 0.5031), (2000, 0.0123, 0.4987)]
        path = export_training_curves(log, tmp_path / "curves.tsv")
        assert load_training_curves(path) == log

    def test_single_interval(self, tmp_path):
        path = export_training_curves([(1000, 0.5, 0.5)], tmp_path / "one.tsv")
        content = path.read_text().strip().splitlines()
        assert len(content) == 2  # header + one row

    def test_empty_log_rejected(self, tmp_path):
        with pytest.raises(EmptyLogError):
            export_training_curves([], tmp_path / "never.tsv")

    def test_converged_artifact_log_tail(self, cover_model, tmp_path):
        path = export_training_curves(cover_model.training_log,
                                      tmp_path / "cover.tsv")
        rows = load_training_curves(path)
        assert rows == [tuple(e) for e in cover_model.training_log]
        last_step, r_err, a_err = rows[-1]
        assert r_err < 0.01
        assert 0.45 <= a_err <= 0.55


class TestRunThreeCases:
    def test_zero_samples_rejected(self, models, rng):
        with pytest.raises(EmptyReportError):
            run_three_cases(models, [CoverImage(np.zeros((28, 28), np.uint8))],
                            0, 10, rng)

    def test_no_covers_rejected(self, models, rng):
        with pytest.raises(EmptyInputError):
            run_three_cases(models, [], 1, 10, rng)

    def test_small_run_structure_and_determinism(self, models):
        covers = [CoverImage(np.random.default_rng(5).integers(
            0, 256, (28, 28)).astype(np.uint8))]
        report_a = run_three_cases(models, covers, 2, 30,
                                   np.random.default_rng(42))
        report_b = run_three_cases(models, covers, 2, 30,
                                   np.random.default_rng(42))
        assert report_a == report_b
        assert len(report_a.records) == 6  # 2 samples x 3 cases
        assert report_a.fingerprint["cover_policy"] == "shared"
        assert set(report_a.summary) == {1, 2, 3}
        for record in report_a.records:
            assert 0.0 <= record.ber <= 1.0

    def test_fingerprint_carries_model_checksums(self, models, rng):
        covers = [CoverImage(np.random.default_rng(6).integers(
            0, 256, (28, 28)).astype(np.uint8))]
        report = run_three_cases(models, covers, 1, 10, rng)
        for field in ("cover_model_checksum", "message_model_checksum",
                      "classifier_checksum"):
            assert len(report.fingerprint[field]) == 64
