"""Dataset ingestion, model persistence, cover-image I/O and configuration.

Everything here is deliberately boring engineering: IDX parsing with
integrity checks, a single-file checkpoint container (JSON manifest +
binary parameter blob), lossless 8-bit grayscale PNG handling, a strict
JSON config schema, and seed derivation so one root seed drives every
subsystem reproducibly.
"""

from __future__ import annotations

import dataclasses
import gzip
import hashlib
import io
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .errors import (
    ChecksumMismatchError,
    KindMismatchError,
    MalformedIdxError,
    MissingFilesError,
    SchemaViolationError,
    TruncatedPayloadError,
    UnknownVersionError,
    UnsupportedImageError,
)

DATA_DIR_ENV = "GSK_DATA_DIR"
DEFAULT_DATA_DIR = "data/mnist"

# MD5 digests of the canonical MNIST distribution archives. Files carrying
# these names must match or the loader refuses them.
CANONICAL_MNIST_MD5 = {
    "train-images-idx3-ubyte.gz": "f68b3c2dcbeaaa9fbdd348bbdeb94873",
    "train-labels-idx1-ubyte.gz": "d53e105ee54ea40749a09fcbcd1e9432",
    "t10k-images-idx3-ubyte.gz": "9fb629c4189551a2d022fa330f9573f3",
    "t10k-labels-idx1-ubyte.gz": "ec29112dd5afa0611ce80d1b7f02629c",
}

SPLIT_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", 60000),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", 10000),
}


def derive_seed(root_seed: int, module_name: str) -> int:
    """Derive a per-module seed: root seed plus a hash of the module name.

    The name is SHA-256 hashed and its first four bytes added to the root
    seed modulo 2**31, so distinct subsystems never share torch/numpy
    streams while one root seed pins the whole pipeline.
    """
    h = hashlib.sha256(module_name.encode("utf-8")).digest()
    return (int(root_seed) + int.from_bytes(h[:4], "big")) % (2**31)


# ---------------------------------------------------------------------------
# MNIST IDX ingestion
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetHandle:
    """In-memory MNIST split with provenance and reproducible iteration."""

    split: str
    images: np.ndarray  # uint8, (count, 28, 28)
    labels: np.ndarray  # uint8, (count,)
    checksum: str       # sha256 over the source files, images then labels
    shuffle_seed: int | None = None

    @property
    def count(self) -> int:
        return int(self.images.shape[0])

    def shuffled_batches(self, batch_size: int, rng: np.random.Generator):
        """Yield (images, labels) batches in a seed-reproducible order."""
        order = rng.permutation(self.count)
        for start in range(0, self.count, batch_size):
            idx = order[start:start + batch_size]
            yield self.images[idx], self.labels[idx]


def _read_file(path: Path) -> bytes:
    """Verify the on-disk file against the canonical table, then return the
    decompressed IDX bytes."""
    raw = path.read_bytes()
    canonical = CANONICAL_MNIST_MD5.get(path.name)
    if canonical is not None:
        md5 = hashlib.md5(raw).hexdigest()
        if md5 != canonical:
            raise ChecksumMismatchError(
                f"{path.name}: md5 {md5} does not match the canonical "
                f"distribution ({canonical})")
    if path.suffix == ".gz":
        try:
            return gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise MalformedIdxError(f"{path.name}: bad gzip stream: {exc}") from exc
    return raw


def _parse_idx(data: bytes, name: str) -> np.ndarray:
    if len(data) < 4:
        raise MalformedIdxError(f"{name}: shorter than an IDX header")
    zero, dtype_code, ndim = data[0] << 8 | data[1], data[2], data[3]
    if zero != 0 or dtype_code != 0x08:
        raise MalformedIdxError(f"{name}: bad IDX magic {data[:4].hex()}")
    header_len = 4 + 4 * ndim
    if len(data) < header_len:
        raise MalformedIdxError(f"{name}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", data[4:header_len])
    expected = int(np.prod(dims)) + header_len
    if len(data) != expected:
        raise MalformedIdxError(
            f"{name}: size {len(data)} does not match header ({expected} expected)"
        )
    return np.frombuffer(data, dtype=np.uint8, offset=header_len).reshape(dims)


def resolve_data_dir(data_dir: str | os.PathLike | None = None) -> Path:
    """Resolve the dataset root: explicit arg, $GSK_DATA_DIR, or ./data/mnist."""
    if data_dir is not None:
        return Path(data_dir)
    return Path(os.environ.get(DATA_DIR_ENV, DEFAULT_DATA_DIR))


def load_mnist(data_dir: str | os.PathLike | None, split: str) -> DatasetHandle:
    """Load one canonical MNIST split from IDX files (.gz or raw).

    Files named like the canonical archives must hash to the canonical MD5;
    structure (magic, dims, byte count) is validated for every file.
    """
    if split not in SPLIT_FILES:
        raise ValueError(f"unknown split {split!r}; expected 'train' or 'test'")
    root = resolve_data_dir(data_dir)
    img_base, lbl_base, expected_count = SPLIT_FILES[split]

    paths = []
    for base in (img_base, lbl_base):
        for candidate in (root / f"{base}.gz", root / base):
            if candidate.exists():
                paths.append(candidate)
                break
        else:
            raise MissingFilesError(
                f"missing {base}[.gz] under {root} "
                f"(set ${DATA_DIR_ENV} or run scripts/fetch_mnist.py)"
            )

    arrays = []
    sha = hashlib.sha256()
    for path in paths:
        data = _read_file(path)
        sha.update(data)
        arrays.append(_parse_idx(data, path.name))

    images, labels = arrays
    if images.ndim != 3 or images.shape[1:] != (28, 28):
        raise MalformedIdxError(f"image array has shape {images.shape}, not (n, 28, 28)")
    if labels.ndim != 1 or labels.shape[0] != images.shape[0]:
        raise MalformedIdxError("label count does not match image count")
    if images.shape[0] != expected_count:
        raise MalformedIdxError(
            f"{split} split has {images.shape[0]} images, expected {expected_count}"
        )
    return DatasetHandle(split=split, images=images, labels=labels,
                         checksum=sha.hexdigest())


# ---------------------------------------------------------------------------
# Checkpoint container: magic, JSON manifest, binary blob
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"GSKCKPT1"
CHECKPOINT_FORMAT_VERSION = 1

# kind -> (serialize(model) -> (blob, hyperparameters, step_count, extra),
#          deserialize(blob, manifest) -> model)
_MODEL_CODECS: dict[str, tuple[Callable, Callable]] = {}


def register_model_codec(kind: str, serialize: Callable, deserialize: Callable) -> None:
    _MODEL_CODECS[kind] = (serialize, deserialize)


def serialize_model_blob(model: Any) -> bytes:
    """The model's parameter blob as the checkpoint container would store it."""
    kind = getattr(model, "kind", None)
    if kind not in _MODEL_CODECS:
        raise KindMismatchError(f"no codec registered for model kind {kind!r}")
    blob, _, _, _ = _MODEL_CODECS[kind][0](model)
    return blob


@dataclass(frozen=True)
class CheckpointManifest:
    kind: str
    hyperparameters: dict
    step_count: int
    dataset_checksum: str
    content_checksum: str
    format_version: int = CHECKPOINT_FORMAT_VERSION
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CheckpointManifest":
        return cls(**json.loads(text))


def save_checkpoint(model: Any, path: str | os.PathLike) -> CheckpointManifest:
    """Write a model to a single-file container and return its manifest."""
    kind = getattr(model, "kind", None)
    if kind not in _MODEL_CODECS:
        raise KindMismatchError(f"no codec registered for model kind {kind!r}")
    serialize, _ = _MODEL_CODECS[kind]
    blob, hyper, step_count, extra = serialize(model)
    manifest = CheckpointManifest(
        kind=kind,
        hyperparameters=hyper,
        step_count=step_count,
        dataset_checksum=extra.pop("dataset_checksum", ""),
        content_checksum=hashlib.sha256(blob).hexdigest(),
        extra=extra,
    )
    payload = manifest.to_json().encode("utf-8")
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack(">I", len(payload)))
        f.write(payload)
        f.write(blob)
    return manifest


def read_manifest(path: str | os.PathLike) -> CheckpointManifest:
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise UnknownVersionError(f"{path}: not a checkpoint container")
        (mlen,) = struct.unpack(">I", f.read(4))
        manifest = CheckpointManifest.from_json(f.read(mlen).decode("utf-8"))
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION:
        raise UnknownVersionError(
            f"{path}: format version {manifest.format_version} not supported"
        )
    return manifest


def load_checkpoint(path: str | os.PathLike, expected_kind: str) -> Any:
    """Load a model, verifying container magic, kind, and content checksum."""
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise UnknownVersionError(f"{path}: not a checkpoint container")
        head = f.read(4)
        if len(head) < 4:
            raise TruncatedPayloadError(f"{path}: truncated manifest header")
        (mlen,) = struct.unpack(">I", head)
        raw_manifest = f.read(mlen)
        if len(raw_manifest) < mlen:
            raise TruncatedPayloadError(f"{path}: truncated manifest")
        manifest = CheckpointManifest.from_json(raw_manifest.decode("utf-8"))
        blob = f.read()
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION:
        raise UnknownVersionError(
            f"{path}: format version {manifest.format_version} not supported"
        )
    if manifest.kind != expected_kind:
        raise KindMismatchError(
            f"{path}: holds {manifest.kind!r}, loader expected {expected_kind!r}"
        )
    digest = hashlib.sha256(blob).hexdigest()
    if digest != manifest.content_checksum:
        raise ChecksumMismatchError(
            f"{path}: parameter blob checksum mismatch (file corrupted?)"
        )
    if manifest.kind not in _MODEL_CODECS:
        raise KindMismatchError(f"no codec registered for model kind {manifest.kind!r}")
    _, deserialize = _MODEL_CODECS[manifest.kind]
    return deserialize(blob, manifest)


# ---------------------------------------------------------------------------
# Cover image I/O (lossless 8-bit grayscale PNG only)
# ---------------------------------------------------------------------------

def read_cover(path: str | os.PathLike):
    """Read an 8-bit grayscale PNG as a CoverImage; reject anything lossy."""
    from PIL import Image

    from .protocol import CoverImage

    with Image.open(path) as img:
        if img.format != "PNG":
            raise UnsupportedImageError(
                f"{path}: format {img.format} is not lossless PNG; the LSB plane "
                "would not survive delivery"
            )
        if img.mode in ("I;16", "I;16B", "I", "I;16L"):
            raise UnsupportedImageError(f"{path}: bit depth is not 8")
        if img.mode != "L":
            raise UnsupportedImageError(
                f"{path}: mode {img.mode} is not 8-bit grayscale"
            )
        pixels = np.asarray(img, dtype=np.uint8)
    return CoverImage(pixels=pixels)


def write_cover(cover, path: str | os.PathLike) -> None:
    from PIL import Image

    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(cover.pixels, mode="L").save(out, format="PNG")


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MessageGanConfig:
    alpha: float = 1.0
    batch_size: int = 64
    steps: int = 16000
    lr_d: float = 2e-4
    lr_g: float = 1e-3
    adam_beta1: float = 0.5
    continuous_weight: float = 0.1
    log_interval: int = 100
    controllability_threshold: float = 0.95


@dataclass(frozen=True)
class CoverGanConfig:
    block_size: int = 4
    mode: str = "binary"
    batch_size: int = 512
    max_steps: int = 50000
    steps_per_gr_phase: int = 1
    steps_per_a_phase: int = 2
    lr: float = 1e-3
    conv_width: int = 16
    log_interval: int = 1000
    eval_batch: int = 4096
    # binary mode warm-up: soft ciphertexts for the first half of these
    # steps, then the generator's output tanh sharpens up to
    # warmup_temperature by the warm-up end, after which training switches
    # to straight-through sign. All three networks co-adapt toward
    # sign-robust ciphertexts before the hard threshold lands.
    binary_warmup_steps: int = 16000
    warmup_temperature: float = 10.0


@dataclass(frozen=True)
class ClassifierConfig:
    epochs: int = 6
    batch_size: int = 128
    lr: float = 1e-3
    accuracy_threshold: float = 0.99
    train_limit: int = 0  # 0 = full split; smaller for quick determinism checks


@dataclass(frozen=True)
class EvaluationConfig:
    num_samples: int = 10
    digits_per_sample: int = 300
    cover_policy: str = "per_sample"  # or "shared"
    cover_height: int = 28
    cover_width: int = 28


@dataclass(frozen=True)
class GskConfig:
    root_seed: int = 0
    data_dir: str | None = None
    message_gan: MessageGanConfig = field(default_factory=MessageGanConfig)
    cover_gan: CoverGanConfig = field(default_factory=CoverGanConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    def seed_for(self, module_name: str) -> int:
        return derive_seed(self.root_seed, module_name)


_SECTIONS = {
    "message_gan": MessageGanConfig,
    "cover_gan": CoverGanConfig,
    "classifier": ClassifierConfig,
    "evaluation": EvaluationConfig,
}

_POSITIVE_FIELDS = {
    ("message_gan", "alpha"), ("message_gan", "batch_size"),
    ("message_gan", "steps"), ("message_gan", "lr_d"), ("message_gan", "lr_g"),
    ("message_gan", "log_interval"),
    ("cover_gan", "block_size"), ("cover_gan", "batch_size"),
    ("cover_gan", "max_steps"), ("cover_gan", "steps_per_gr_phase"),
    ("cover_gan", "steps_per_a_phase"), ("cover_gan", "lr"),
    ("cover_gan", "conv_width"), ("cover_gan", "log_interval"),
    ("cover_gan", "eval_batch"),
    ("classifier", "epochs"), ("classifier", "batch_size"), ("classifier", "lr"),
    ("evaluation", "digits_per_sample"), ("evaluation", "cover_height"),
    ("evaluation", "cover_width"),
}


def _check_section(name: str, cls, raw: Any, violations: list[str]) -> Any:
    if not isinstance(raw, dict):
        violations.append(f"{name}: expected an object, got {type(raw).__name__}")
        return cls()
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            violations.append(f"{name}.{key}: unknown key")
            continue
        want = known[key].type
        if want in ("int", int) and not (isinstance(value, int)
                                         and not isinstance(value, bool)):
            violations.append(f"{name}.{key}: expected integer")
            continue
        if want in ("float", float) and not isinstance(value, (int, float)):
            violations.append(f"{name}.{key}: expected number")
            continue
        if (name, key) in _POSITIVE_FIELDS and isinstance(value, (int, float)) \
                and value <= 0:
            violations.append(f"{name}.{key}: must be positive")
            continue
        kwargs[key] = value
    if name == "cover_gan" and kwargs.get("mode", "binary") not in (
            "binary", "fixedpoint16"):
        violations.append("cover_gan.mode: must be 'binary' or 'fixedpoint16'")
        kwargs.pop("mode", None)
    if name == "evaluation" and kwargs.get("cover_policy", "per_sample") not in (
            "per_sample", "shared"):
        violations.append("evaluation.cover_policy: must be 'per_sample' or 'shared'")
        kwargs.pop("cover_policy", None)
    return cls(**kwargs)


def config_from_dict(raw: dict) -> GskConfig:
    """Validate a parsed config mapping; collect every violation before failing."""
    violations: list[str] = []
    if not isinstance(raw, dict):
        raise SchemaViolationError(["top level: expected an object"])
    kwargs: dict[str, Any] = {}
    for key, value in raw.items():
        if key == "root_seed":
            if isinstance(value, int) and not isinstance(value, bool):
                kwargs["root_seed"] = value
            else:
                violations.append("root_seed: expected integer")
        elif key == "data_dir":
            if value is None or isinstance(value, str):
                kwargs["data_dir"] = value
            else:
                violations.append("data_dir: expected string or null")
        elif key in _SECTIONS:
            kwargs[key] = _check_section(key, _SECTIONS[key], value, violations)
        else:
            violations.append(f"{key}: unknown key")
    if violations:
        raise SchemaViolationError(violations)
    return GskConfig(**kwargs)


def load_config(path: str | os.PathLike | None) -> GskConfig:
    """Load and validate a JSON config; None or missing keys fall to defaults."""
    if path is None:
        return GskConfig()
    text = Path(path).read_text(encoding="utf-8")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaViolationError([f"not valid JSON: {exc}"]) from exc
    return config_from_dict(raw)


def blob_from_state(state: dict) -> bytes:
    """Serialize a parameter/state dict to bytes (torch container)."""
    import torch

    buf = io.BytesIO()
    torch.save(state, buf)
    return buf.getvalue()


def state_from_blob(blob: bytes) -> dict:
    import torch

    return torch.load(io.BytesIO(blob), map_location="cpu", weights_only=False)
