"""Quantitative evaluation: three-case bit-error rates, capacity metrics,
and training-curve export.

The three receiver cases share one message and one cover per sample:
case 1 holds the key but not the cover (a random identification code is
substituted), case 2 holds the cover but a random key of matching shape,
case 3 holds both. Bit-error rates are computed over 4-bit encodings;
blocks that decode to a valid digit contribute the regenerated digit's
bits (the full generate-and-classify pipeline), while blocks that decode
outside the digit range contribute their raw recovered bits.
"""

from __future__ import annotations

import hashlib
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import artifacts_io
from .cover_gan import (
    MODE_BINARY,
    BitBlock,
    Ciphertext,
    CoverGanModel,
    quantize_fixedpoint,
)
from .errors import (
    EmptyInputError,
    EmptyLogError,
    EmptyReportError,
    LengthMismatchError,
    UntrainedModelError,
)
from .message_gan import ClassifierModel, FeatureCode, GrayImage, MessageGanModel
from .protocol import (
    CoverImage,
    ExtractionKey,
    KeyBlock,
    RecoveryResult,
    SecretMessage,
    derive_key,
    recover_message,
)


# ---------------------------------------------------------------------------
# Bit-level metrics
# ---------------------------------------------------------------------------

def bit_error_rate(a: Sequence[int], b: Sequence[int]) -> float:
    """Hamming distance divided by length, over logical bit sequences."""
    a = list(a)
    b = list(b)
    if not a or not b:
        raise EmptyInputError("bit sequences must be nonempty")
    if len(a) != len(b):
        raise LengthMismatchError(
            f"cannot compare bit sequences of lengths {len(a)} and {len(b)}")
    return sum(x != y for x, y in zip(a, b)) / len(a)


def value_to_bits(value: int, width: int = 4) -> tuple[int, ...]:
    """Big-endian logical bits of a small nonnegative integer."""
    return tuple((value >> (width - 1 - i)) & 1 for i in range(width))


def digits_to_bits(digits: Sequence[int]) -> tuple[int, ...]:
    out: list[int] = []
    for d in digits:
        out.extend(FeatureCode(int(d)).nibble)
    return tuple(out)


def availability_factor(message_bits: int, img: GrayImage) -> float:
    """Fraction of the output image's raw capacity the message occupies."""
    if message_bits < 0:
        raise ValueError("message bit count must be nonnegative")
    h, w = img.pixels.shape
    return message_bits / (h * w * 8)


def key_size_factor(key: ExtractionKey, message: SecretMessage) -> float:
    """Ratio of the key's logical bit length to the message bit length."""
    return key.logical_bit_length / (4 * len(message))


# ---------------------------------------------------------------------------
# Three-case evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainedModels:
    cover: CoverGanModel
    message: MessageGanModel
    classifier: ClassifierModel


@dataclass(frozen=True)
class SampleCaseRecord:
    sample_id: int
    case_id: int
    digit_count: int
    ber: float


@dataclass(frozen=True)
class CaseReport:
    records: tuple[SampleCaseRecord, ...]
    summary: dict  # case_id -> {"min": .., "median": .., "max": ..}
    fingerprint: dict = field(default_factory=dict)

    def case_bers(self, case_id: int) -> list[float]:
        return [r.ber for r in self.records if r.case_id == case_id]


def _output_bits(result: RecoveryResult) -> tuple[int, ...]:
    bits: list[int] = []
    for digit, code, bad in zip(result.message.digits, result.codes,
                                result.invalid):
        if bad:
            bits.extend(value_to_bits(code))
        else:
            bits.extend(FeatureCode(int(digit)).nibble)
    return tuple(bits)


def random_key_like(key: ExtractionKey, rng: np.random.Generator) -> ExtractionKey:
    """A uniformly random extraction key with the same shape and mode."""
    n = key.block_size
    blocks = []
    for _ in key.blocks:
        if key.mode == MODE_BINARY:
            c = Ciphertext(
                tuple(int(2 * b - 1) for b in rng.integers(0, 2, n)), MODE_BINARY)
        else:
            c = Ciphertext(quantize_fixedpoint(rng.uniform(-1, 1, n)), key.mode)
        blocks.append(KeyBlock(ciphertext=c, f_prime=BitBlock.random(rng, n)))
    return ExtractionKey(blocks=tuple(blocks), mode=key.mode,
                         rng_mode=key.rng_mode)


def run_three_cases(models: TrainedModels, covers: Sequence[CoverImage],
                    num_samples: int, digits_per_sample: int,
                    rng: np.random.Generator) -> CaseReport:
    """Evaluate every sample under all three receiver cases.

    Each sample draws a fresh random message, derives its key against a
    cover (cycled from `covers`; a single cover means the shared policy),
    then recovers under case 1 (key only), case 2 (cover only), and
    case 3 (both), yielding one bit-error rate per case.
    """
    if num_samples <= 0:
        raise EmptyReportError("evaluation needs at least one sample")
    if not covers:
        raise EmptyInputError("evaluation needs at least one cover image")
    if models.cover.step_count == 0 or models.message.step_count == 0:
        raise UntrainedModelError("all models must be trained before evaluation")

    records: list[SampleCaseRecord] = []
    for sample_id in range(num_samples):
        cover = covers[sample_id % len(covers)]
        message = SecretMessage(tuple(rng.integers(0, 10, digits_per_sample)))
        message_bits = digits_to_bits(message.digits)
        key = derive_key(message, cover, models.cover, rng)

        outcomes = {
            1: recover_message(key, None, models.cover, models.message,
                               models.classifier, rng),
            2: recover_message(random_key_like(key, rng), cover, models.cover,
                               models.message, models.classifier, rng),
            3: recover_message(key, cover, models.cover, models.message,
                               models.classifier, rng),
        }
        for case_id, result in outcomes.items():
            ber = bit_error_rate(message_bits, _output_bits(result))
            records.append(SampleCaseRecord(
                sample_id=sample_id, case_id=case_id,
                digit_count=digits_per_sample, ber=ber))

    summary = {}
    for case_id in (1, 2, 3):
        bers = [r.ber for r in records if r.case_id == case_id]
        summary[case_id] = {
            "min": min(bers),
            "median": statistics.median(bers),
            "max": max(bers),
        }
    fingerprint = {
        "cover_policy": "shared" if len(covers) == 1 else "per_sample",
        "num_samples": num_samples,
        "digits_per_sample": digits_per_sample,
        "cover_model_checksum": model_checksum(models.cover),
        "message_model_checksum": model_checksum(models.message),
        "classifier_checksum": model_checksum(models.classifier),
    }
    return CaseReport(records=tuple(records), summary=summary,
                      fingerprint=fingerprint)


def model_checksum(model) -> str:
    """SHA-256 over the model's serialized parameter blob."""
    return hashlib.sha256(artifacts_io.serialize_model_blob(model)).hexdigest()


def acceptance_gate(report: CaseReport,
                    case3_median_max: float = 0.02,
                    case12_band: tuple[float, float] = (0.45, 0.55)) -> list[str]:
    """Return the list of threshold violations (empty means pass)."""
    problems = []
    if report.summary[3]["median"] > case3_median_max:
        problems.append(
            f"case 3 median BER {report.summary[3]['median']:.4f} "
            f"> {case3_median_max}")
    lo, hi = case12_band
    for case_id in (1, 2):
        for r in report.records:
            if r.case_id == case_id and not lo <= r.ber <= hi:
                problems.append(
                    f"case {case_id} sample {r.sample_id} BER {r.ber:.4f} "
                    f"outside [{lo}, {hi}]")
    return problems


# ---------------------------------------------------------------------------
# Report and curve files
# ---------------------------------------------------------------------------

def write_case_report(report: CaseReport, json_path, text_path=None,
                      timestamp: str | None = None) -> None:
    """Write the machine report (JSON) and a summary table.

    Timestamps appear only in the header comment so repeated runs with the
    same seeds produce byte-identical bodies.
    """
    import json

    body = {
        "records": [
            {"sample_id": r.sample_id, "case_id": r.case_id,
             "digit_count": r.digit_count, "ber": r.ber}
            for r in report.records
        ],
        "summary": {str(k): v for k, v in report.summary.items()},
        "fingerprint": report.fingerprint,
    }
    json_path = Path(json_path)
    json_path.parent.mkdir(parents=True, exist_ok=True)
    header = {"generated_at": timestamp} if timestamp else {}
    json_path.write_text(
        json.dumps({"header": header, **body}, indent=2, sort_keys=True) + "\n",
        encoding="utf-8")

    if text_path is not None:
        lines = []
        if timestamp:
            lines.append(f"# generated at {timestamp}")
        sample_ids = sorted({r.sample_id for r in report.records})
        lines.append("\t".join(["case"] + [f"sample{i + 1}" for i in sample_ids]))
        by_case: dict[int, dict[int, float]] = {1: {}, 2: {}, 3: {}}
        for r in report.records:
            by_case[r.case_id][r.sample_id] = r.ber
        for case_id in (1, 2, 3):
            row = [f"Case {case_id}"]
            row += [f"{by_case[case_id][i]:.4f}" for i in sample_ids]
            lines.append("\t".join(row))
        lines.append("")
        for case_id in (1, 2, 3):
            s = report.summary[case_id]
            lines.append(
                f"Case {case_id}: min {s['min']:.4f}  median {s['median']:.4f}  "
                f"max {s['max']:.4f}")
        Path(text_path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def export_training_curves(log: Sequence[tuple[int, float, float]],
                           destination, plot: bool = False) -> Path:
    """Write the (step, receiver error, attacker error) table as TSV.

    Values round-trip exactly (repr precision). With plot=True a PNG is
    rendered next to the table if matplotlib is importable.
    """
    if not log:
        raise EmptyLogError("training log holds no intervals")
    destination = Path(destination)
    destination.parent.mkdir(parents=True, exist_ok=True)
    lines = ["step\tr_error\ta_error"]
    for step, r_err, a_err in log:
        lines.append(f"{int(step)}\t{r_err!r}\t{a_err!r}")
    destination.write_text("\n".join(lines) + "\n", encoding="utf-8")
    if plot:
        try:
            import matplotlib
            matplotlib.use("Agg")
            import matplotlib.pyplot as plt
        except ImportError:
            return destination
        steps = [entry[0] for entry in log]
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(steps, [e[1] for e in log], label="receiver error")
        ax.plot(steps, [e[2] for e in log], label="attacker error")
        ax.set_xlabel("step")
        ax.set_ylabel("per-bit error rate")
        ax.legend()
        fig.savefig(destination.with_suffix(".png"), dpi=120,
                    bbox_inches="tight")
        plt.close(fig)
    return destination


def load_training_curves(path) -> list[tuple[int, float, float]]:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines()[1:]:
        if not line.strip():
            continue
        step, r_err, a_err = line.split("\t")
        rows.append((int(step), float(r_err), float(a_err)))
    return rows
