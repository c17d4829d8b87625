"""Command-line entry points: train, keygen, reveal, evaluate.

Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 a scientific
threshold was not met (non-convergence, accuracy, or evaluation bands),
so CI can distinguish broken runs from weak reproductions.
"""

from __future__ import annotations

import argparse
import hashlib
import math
import sys
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import artifacts_io, cover_gan, evaluation, message_gan, protocol
from .errors import GskError

CHECKPOINT_NAMES = {
    "message-gan": "message_gan.ckpt",
    "cover-gan": "cover_gan.ckpt",
    "classifier": "classifier.ckpt",
}


@dataclass(frozen=True)
class CommandResult:
    exit_code: int
    summary: str
    report_path: str | None = None


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _file_sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _load_models(ckpt_dir: Path):
    cover = artifacts_io.load_checkpoint(
        ckpt_dir / CHECKPOINT_NAMES["cover-gan"], "cover_gan")
    message = artifacts_io.load_checkpoint(
        ckpt_dir / CHECKPOINT_NAMES["message-gan"], "message_gan")
    classifier = artifacts_io.load_checkpoint(
        ckpt_dir / CHECKPOINT_NAMES["classifier"], "classifier")
    return evaluation.TrainedModels(cover=cover, message=message,
                                    classifier=classifier)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_train(subsystem: str, config_path: str | None, checkpoint_dir: str,
              seed: int | None = None, data_dir: str | None = None,
              mode: str | None = None) -> CommandResult:
    config = artifacts_io.load_config(config_path)
    if seed is not None:
        config = artifacts_io.GskConfig(
            root_seed=seed, data_dir=config.data_dir,
            message_gan=config.message_gan, cover_gan=config.cover_gan,
            classifier=config.classifier, evaluation=config.evaluation)
    out_dir = Path(checkpoint_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data_root = data_dir if data_dir is not None else config.data_dir

    if subsystem == "cover-gan":
        cg_conf = config.cover_gan
        if mode is not None:
            cg_conf = artifacts_io.CoverGanConfig(
                **{**cg_conf.__dict__, "mode": mode})
        rng = np.random.default_rng(config.seed_for("cover_gan"))

        def log_cover(entry):
            step, r_err, a_err = entry
            print(f"step {step:>6}  r_error {r_err:.4f}  a_error {a_err:.4f}",
                  flush=True)

        model = cover_gan.train_cover_gan(cg_conf, rng, on_log=log_cover)
        path = out_dir / CHECKPOINT_NAMES["cover-gan"]
        artifacts_io.save_checkpoint(model, path)
        evaluation.export_training_curves(
            model.training_log, out_dir / "cover_gan_curves.tsv")
        last_step, r_err, a_err = model.training_log[-1]
        summary = (f"cover-gan: {model.step_count} steps, converged="
                   f"{model.converged}, final r_error={r_err:.4f}, "
                   f"a_error={a_err:.4f} ({path})")
        return CommandResult(0 if model.converged else 3, summary, str(path))

    dataset_train = artifacts_io.load_mnist(data_root, "train")
    dataset_test = artifacts_io.load_mnist(data_root, "test")

    if subsystem == "classifier":
        rng = np.random.default_rng(config.seed_for("classifier"))
        model = message_gan.train_classifier(
            dataset_train, dataset_test, config.classifier, rng)
        path = out_dir / CHECKPOINT_NAMES["classifier"]
        artifacts_io.save_checkpoint(model, path)
        summary = (f"classifier: {model.epochs_trained} epochs, test accuracy "
                   f"{model.test_accuracy:.4f} ({path})")
        return CommandResult(3 if model.below_threshold else 0, summary, str(path))

    if subsystem == "message-gan":
        rng = np.random.default_rng(config.seed_for("message_gan"))
        clf_path = out_dir / CHECKPOINT_NAMES["classifier"]
        calibration = None
        if clf_path.exists():
            calibration = artifacts_io.load_checkpoint(clf_path, "classifier")
        def log_gan(entry):
            step, d_loss, g_loss, mi = entry
            if step % (20 * config.message_gan.log_interval) == 0:
                print(f"step {step:>6}  d_loss {d_loss:.3f}  g_loss "
                      f"{g_loss:.3f}  info_bound {mi:.3f}", flush=True)

        model = message_gan.train_message_gan(
            dataset_train, config.message_gan, rng,
            calibration_classifier=calibration, on_log=log_gan)
        path = out_dir / CHECKPOINT_NAMES["message-gan"]
        artifacts_io.save_checkpoint(model, path)
        log_path = out_dir / "message_gan_log.tsv"
        lines = ["step\td_loss\tg_loss\tmi_bound"]
        lines += [f"{s}\t{d!r}\t{g!r}\t{mi!r}" for s, d, g, mi in model.training_log]
        log_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        final_mi = model.training_log[-1][3]
        target = 0.9 * math.log(10)
        summary = (f"message-gan: {model.step_count} steps, final info bound "
                   f"{final_mi:.3f} nats (target {target:.3f}) ({path})")
        return CommandResult(0 if final_mi >= target else 3, summary, str(path))

    raise _UsageError(f"unknown subsystem {subsystem!r}")


def cmd_keygen(message_text: str, cover_path: str, checkpoint_dir: str,
               out_path: str, seed: int | None = None) -> CommandResult:
    if not message_text or not message_text.isdigit():
        raise _UsageError(
            f"message must match ^[0-9]+$, got {message_text!r}")
    cover_file = Path(cover_path)
    digest_before = _file_sha256(cover_file)
    cover = artifacts_io.read_cover(cover_file)
    model = artifacts_io.load_checkpoint(
        Path(checkpoint_dir) / CHECKPOINT_NAMES["cover-gan"], "cover_gan")
    message = protocol.SecretMessage.from_string(message_text)
    rng = np.random.default_rng(seed) if seed is not None else None
    key = protocol.derive_key(message, cover, model, rng)
    data = protocol.serialize_key(key)
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(data)
    digest_after = _file_sha256(cover_file)
    if digest_before != digest_after:
        return CommandResult(2, "cover file changed during keygen", None)
    ksf = evaluation.key_size_factor(key, message)
    summary = (f"key for {len(message)} digit(s) written to {out} "
               f"({len(data)} bytes, KSF={ksf:g}, rng={key.rng_mode})")
    return CommandResult(0, summary, str(out))


def cmd_reveal(key_path: str, cover_path: str | None, checkpoint_dir: str,
               emit_images: str | None = None, seed: int | None = None,
               no_cover: bool = False, no_key: bool = False) -> CommandResult:
    if no_cover and no_key:
        raise _UsageError("nothing to reveal with both key and cover absent")
    ckpt_dir = Path(checkpoint_dir)
    models = _load_models(ckpt_dir)
    key = protocol.parse_key(Path(key_path).read_bytes())
    rng = np.random.default_rng(seed if seed is not None else None)
    if no_key:
        key = evaluation.random_key_like(key, rng)
    cover = None
    if not no_cover:
        if cover_path is None:
            raise _UsageError("provide --cover PATH or pass --no-cover")
        cover = artifacts_io.read_cover(cover_path)

    result = protocol.recover_message(key, cover, models.cover, models.message,
                                      models.classifier, rng)
    warnings = []
    if result.z_substituted:
        warnings.append("cover absent: random identification code substituted; "
                        "output is noise")
    if no_key:
        warnings.append("key absent: random key substituted; output is noise")
    n_invalid = sum(result.invalid)
    if n_invalid:
        warnings.append(f"{n_invalid}/{len(result.invalid)} blocks decoded "
                        "outside the digit range (flagged noise)")

    if emit_images:
        from PIL import Image

        img_dir = Path(emit_images)
        img_dir.mkdir(parents=True, exist_ok=True)
        for i, img in enumerate(result.images):
            Image.fromarray(img.pixels, mode="L").save(
                img_dir / f"block_{i:04d}.png", format="PNG")

    summary = result.message.to_string()
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    return CommandResult(0, summary, emit_images)


def cmd_evaluate(checkpoint_dir: str, config_path: str | None, out_dir: str,
                 seed: int | None = None,
                 covers_dir: str | None = None) -> CommandResult:
    config = artifacts_io.load_config(config_path)
    root_seed = seed if seed is not None else config.root_seed
    ckpt_dir = Path(checkpoint_dir)
    models = _load_models(ckpt_dir)
    ev = config.evaluation
    rng = np.random.default_rng(
        artifacts_io.derive_seed(root_seed, "evaluation"))

    if covers_dir:
        cover_paths = sorted(Path(covers_dir).glob("*.png"))
        covers = [artifacts_io.read_cover(p) for p in cover_paths]
    else:
        count = 1 if ev.cover_policy == "shared" else ev.num_samples
        covers = [
            protocol.CoverImage(rng.integers(
                0, 256, (ev.cover_height, ev.cover_width)).astype(np.uint8))
            for _ in range(count)
        ]

    report = evaluation.run_three_cases(
        models, covers, ev.num_samples, ev.digits_per_sample, rng)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    evaluation.write_case_report(report, out / "report.json", out / "report.txt",
                                 timestamp=_utc_now())
    evaluation.export_training_curves(models.cover.training_log,
                                      out / "cover_gan_curves.tsv")

    problems = evaluation.acceptance_gate(report)
    if not models.cover.converged:
        problems.insert(0, "cover-gan checkpoint is flagged non-converged")
    med = report.summary[3]["median"]
    summary = (f"case 3 median BER {med:.4f}; case 1 range "
               f"[{report.summary[1]['min']:.4f}, {report.summary[1]['max']:.4f}]; "
               f"case 2 range [{report.summary[2]['min']:.4f}, "
               f"{report.summary[2]['max']:.4f}]; report in {out}")
    if problems:
        summary += "\nthreshold failures:\n  " + "\n  ".join(problems)
    return CommandResult(3 if problems else 0, summary, str(out / "report.json"))


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="gsk", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train one subsystem")
    p_train.add_argument("subsystem",
                         choices=["message-gan", "cover-gan", "classifier"])
    p_train.add_argument("--config", default=None)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--checkpoint-dir", default="artifacts")
    p_train.add_argument("--data-dir", default=None)
    p_train.add_argument("--mode", choices=["binary", "fixedpoint16"],
                         default=None)

    p_key = sub.add_parser("keygen", help="derive an extraction key")
    p_key.add_argument("message")
    p_key.add_argument("--cover", required=True)
    p_key.add_argument("--checkpoint-dir", default="artifacts")
    p_key.add_argument("--out", required=True)
    p_key.add_argument("--seed", type=int, default=None)

    p_rev = sub.add_parser("reveal", help="recover a message")
    p_rev.add_argument("--key", required=True)
    p_rev.add_argument("--cover", default=None)
    p_rev.add_argument("--no-cover", action="store_true")
    p_rev.add_argument("--no-key", action="store_true")
    p_rev.add_argument("--checkpoint-dir", default="artifacts")
    p_rev.add_argument("--emit-images", default=None)
    p_rev.add_argument("--seed", type=int, default=None)

    p_eval = sub.add_parser("evaluate", help="run the three-case evaluation")
    p_eval.add_argument("--checkpoint-dir", default="artifacts")
    p_eval.add_argument("--config", default=None)
    p_eval.add_argument("--out", default="reports")
    p_eval.add_argument("--covers", default=None)
    p_eval.add_argument("--seed", type=int, default=None)
    return parser


def run(argv=None) -> CommandResult:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "train":
            return cmd_train(args.subsystem, args.config, args.checkpoint_dir,
                             args.seed, args.data_dir, args.mode)
        if args.command == "keygen":
            return cmd_keygen(args.message, args.cover, args.checkpoint_dir,
                              args.out, args.seed)
        if args.command == "reveal":
            return cmd_reveal(args.key, args.cover, args.checkpoint_dir,
                              args.emit_images, args.seed,
                              no_cover=args.no_cover, no_key=args.no_key)
        if args.command == "evaluate":
            return cmd_evaluate(args.checkpoint_dir, args.config, args.out,
                                args.seed, args.covers)
        raise _UsageError(f"unknown command {args.command!r}")
    except _UsageError as exc:
        return CommandResult(1, f"usage error: {exc}")
    except FileNotFoundError as exc:
        return CommandResult(2, f"missing file: {exc}")
    except GskError as exc:
        return CommandResult(2, f"error: {exc}")


def main(argv=None) -> int:
    result = run(argv)
    print(result.summary)
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
