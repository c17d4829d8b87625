"""Feature-code-controlled digit image generator plus its decoding oracle.

The generator maps a 74-dim input (10-way categorical feature code, 2
continuous latent codes, 62 noise variables) to a 28x28 8-bit grayscale
digit image. A discriminator provides the adversarial signal and an
auxiliary posterior head keeps the mutual information between the
categorical code and the output high, so the code reliably selects the
rendered digit. A separately trained convolutional classifier acts as
the independent oracle that reads digits back out of images.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from . import artifacts_io
from .artifacts_io import ClassifierConfig, DatasetHandle, MessageGanConfig
from .errors import (
    DatasetMissingError,
    MissingSplitError,
    NonFiniteLossError,
    UntrainedModelError,
)

CATEGORICAL_DIM = 10
CONTINUOUS_DIM = 2
NOISE_DIM = 62
INPUT_DIM = CATEGORICAL_DIM + CONTINUOUS_DIM + NOISE_DIM  # 74
IMAGE_SIDE = 28


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FeatureCode:
    """One decimal digit with its 4-bit and 10-way categorical views."""

    digit: int

    def __post_init__(self):
        if not isinstance(self.digit, int) or not 0 <= self.digit <= 9:
            raise ValueError(f"feature code digit must be in [0, 9], got {self.digit}")

    @property
    def nibble(self) -> tuple[int, int, int, int]:
        """4 logical bits, most significant first."""
        return tuple((self.digit >> (3 - i)) & 1 for i in range(4))

    @property
    def onehot(self) -> np.ndarray:
        v = np.zeros(CATEGORICAL_DIM, dtype=np.float32)
        v[self.digit] = 1.0
        return v

    @classmethod
    def from_nibble(cls, bits: Iterable[int]) -> "FeatureCode":
        bits = tuple(int(b) for b in bits)
        if len(bits) != 4 or not all(b in (0, 1) for b in bits):
            raise ValueError(f"nibble must be 4 logical bits, got {bits}")
        value = sum(b << (3 - i) for i, b in enumerate(bits))
        if value > 9:
            raise ValueError(f"nibble value {value} is not a decimal digit")
        return cls(value)


@dataclass(frozen=True)
class LatentVector:
    """2 continuous codes (clamped to [-1, 1]) and 62 uniform noise variables."""

    continuous: tuple[float, ...]
    noise: tuple[float, ...]

    def __post_init__(self):
        if len(self.continuous) != CONTINUOUS_DIM:
            raise ValueError(f"expected {CONTINUOUS_DIM} continuous codes")
        if len(self.noise) != NOISE_DIM:
            raise ValueError(f"expected {NOISE_DIM} noise variables")
        clamped = tuple(min(1.0, max(-1.0, float(v))) for v in self.continuous)
        object.__setattr__(self, "continuous", clamped)
        object.__setattr__(self, "noise", tuple(float(v) for v in self.noise))


def sample_latent(rng: np.random.Generator) -> LatentVector:
    """Draw a latent vector from the uniform priors on [-1, 1]."""
    return LatentVector(
        continuous=tuple(rng.uniform(-1.0, 1.0, CONTINUOUS_DIM)),
        noise=tuple(rng.uniform(-1.0, 1.0, NOISE_DIM)),
    )


@dataclass(frozen=True)
class GrayImage:
    """28x28 8-bit grayscale image; network I/O uses [-1, 1] floats."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.shape != (IMAGE_SIDE, IMAGE_SIDE):
            raise ValueError(f"image must be 28x28, got {px.shape}")
        if px.dtype != np.uint8:
            raise ValueError(f"pixels must be uint8, got {px.dtype}")
        object.__setattr__(self, "pixels", px)

    def to_unit(self) -> np.ndarray:
        """Map intensities to [-1, 1] floats."""
        return self.pixels.astype(np.float32) / 127.5 - 1.0

    @classmethod
    def from_unit(cls, unit: np.ndarray) -> "GrayImage":
        """Quantize [-1, 1] values to 0..255 by affine rescale, round half up."""
        scaled = (np.asarray(unit, dtype=np.float64) + 1.0) * 127.5
        px = np.clip(np.floor(scaled + 0.5), 0, 255).astype(np.uint8)
        return cls(px)


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------

class GeneratorNet(nn.Module):
    def __init__(self):
        super().__init__()
        self.fc1 = nn.Linear(INPUT_DIM, 1024)
        self.bn1 = nn.BatchNorm1d(1024)
        self.fc2 = nn.Linear(1024, 128 * 7 * 7)
        self.bn2 = nn.BatchNorm1d(128 * 7 * 7)
        self.deconv1 = nn.ConvTranspose2d(128, 64, 4, stride=2, padding=1)
        self.bn3 = nn.BatchNorm2d(64)
        self.deconv2 = nn.ConvTranspose2d(64, 1, 4, stride=2, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.relu(self.bn1(self.fc1(x)))
        h = F.relu(self.bn2(self.fc2(h)))
        h = h.view(-1, 128, 7, 7)
        h = F.relu(self.bn3(self.deconv1(h)))
        return torch.tanh(self.deconv2(h))


class DiscriminatorBody(nn.Module):
    def __init__(self):
        super().__init__()
        self.conv1 = nn.Conv2d(1, 64, 4, stride=2, padding=1)
        self.conv2 = nn.Conv2d(64, 128, 4, stride=2, padding=1)
        self.bn2 = nn.BatchNorm2d(128)
        self.fc = nn.Linear(128 * 7 * 7, 1024)
        self.bn3 = nn.BatchNorm1d(1024)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.leaky_relu(self.conv1(x), 0.1)
        h = F.leaky_relu(self.bn2(self.conv2(h)), 0.1)
        h = h.flatten(1)
        return F.leaky_relu(self.bn3(self.fc(h)), 0.1)


class DiscriminatorHead(nn.Module):
    def __init__(self):
        super().__init__()
        self.fc = nn.Linear(1024, 1)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.fc(h).squeeze(1)  # logits


class PosteriorHead(nn.Module):
    """Auxiliary posterior over the categorical code and continuous codes."""

    def __init__(self):
        super().__init__()
        self.fc1 = nn.Linear(1024, 128)
        self.bn1 = nn.BatchNorm1d(128)
        self.fc_cat = nn.Linear(128, CATEGORICAL_DIM)
        self.fc_mu = nn.Linear(128, CONTINUOUS_DIM)
        self.fc_logvar = nn.Linear(128, CONTINUOUS_DIM)

    def forward(self, h: torch.Tensor):
        q = F.leaky_relu(self.bn1(self.fc1(h)), 0.1)
        return self.fc_cat(q), self.fc_mu(q), self.fc_logvar(q)


class ClassifierNet(nn.Module):
    def __init__(self):
        super().__init__()
        self.conv1 = nn.Conv2d(1, 32, 3)
        self.conv2 = nn.Conv2d(32, 64, 3)
        self.drop1 = nn.Dropout(0.25)
        self.fc1 = nn.Linear(9216, 128)
        self.drop2 = nn.Dropout(0.5)
        self.fc2 = nn.Linear(128, 10)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.relu(self.conv1(x))
        h = F.relu(self.conv2(h))
        h = F.max_pool2d(h, 2)
        h = self.drop1(h).flatten(1)
        h = F.relu(self.fc1(h))
        return self.fc2(self.drop2(h))


# ---------------------------------------------------------------------------
# Model containers
# ---------------------------------------------------------------------------

@dataclass
class MessageGanModel:
    kind = "message_gan"

    generator: GeneratorNet
    disc_body: DiscriminatorBody
    disc_head: DiscriminatorHead
    posterior: PosteriorHead
    alpha: float = 1.0
    step_count: int = 0
    # digit -> internal categorical code index (the public code table)
    code_for_digit: np.ndarray = field(
        default_factory=lambda: np.arange(CATEGORICAL_DIM, dtype=np.int64))
    training_log: list[tuple[int, float, float, float]] = field(default_factory=list)

    @classmethod
    def initialize(cls, alpha: float = 1.0,
                   torch_seed: int | None = None) -> "MessageGanModel":
        if torch_seed is not None:
            torch.manual_seed(torch_seed)
        return cls(GeneratorNet(), DiscriminatorBody(), DiscriminatorHead(),
                   PosteriorHead(), alpha=alpha)

    def eval_mode(self) -> None:
        self.generator.eval()
        self.disc_body.eval()
        self.disc_head.eval()
        self.posterior.eval()

    def train_mode(self) -> None:
        self.generator.train()
        self.disc_body.train()
        self.disc_head.train()
        self.posterior.train()


@dataclass
class ClassifierModel:
    kind = "classifier"

    net: ClassifierNet
    test_accuracy: float = 0.0
    below_threshold: bool = False
    epochs_trained: int = 0

    @classmethod
    def initialize(cls, torch_seed: int | None = None) -> "ClassifierModel":
        if torch_seed is not None:
            torch.manual_seed(torch_seed)
        return cls(ClassifierNet())


# ---------------------------------------------------------------------------
# Input assembly
# ---------------------------------------------------------------------------

def _latent_tensor(lat: LatentVector) -> torch.Tensor:
    return torch.tensor(lat.continuous + lat.noise, dtype=torch.float32)


def _gan_input(code_index: int, lat: LatentVector) -> torch.Tensor:
    onehot = torch.zeros(CATEGORICAL_DIM, dtype=torch.float32)
    onehot[code_index] = 1.0
    return torch.cat([onehot, _latent_tensor(lat)]).unsqueeze(0)


def images_to_tensor(images: np.ndarray) -> torch.Tensor:
    """uint8 (n, 28, 28) -> float32 (n, 1, 28, 28) in [-1, 1]."""
    arr = np.ascontiguousarray(images)
    if not arr.flags.writeable:
        arr = arr.copy()
    return (torch.from_numpy(arr).float() / 127.5 - 1.0).unsqueeze(1)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def generate(model: MessageGanModel, f: FeatureCode, lat: LatentVector) -> GrayImage:
    """Render the digit selected by f; pure function of (model, f, lat)."""
    if model.step_count == 0:
        raise UntrainedModelError("generator has no training steps; train first")
    model.eval_mode()
    code = int(model.code_for_digit[f.digit])
    with torch.no_grad():
        out = model.generator(_gan_input(code, lat))
    return GrayImage.from_unit(out[0, 0].numpy())


def generate_with_code_index(model: MessageGanModel, code_index: int,
                             lat: LatentVector) -> GrayImage:
    """Render from a raw categorical code index, bypassing the digit table.

    Used for the no-code behavior checks where the categorical input is
    sampled uniformly rather than chosen to encode a digit.
    """
    model.eval_mode()
    with torch.no_grad():
        out = model.generator(_gan_input(int(code_index), lat))
    return GrayImage.from_unit(out[0, 0].numpy())


def discriminate(model: MessageGanModel, images: torch.Tensor) -> torch.Tensor:
    """Probability that each image is real; always strictly inside (0, 1)."""
    model.eval_mode()
    with torch.no_grad():
        logits = model.disc_head(model.disc_body(images))
    return torch.sigmoid(logits)


def mutual_info_lower_bound(model: MessageGanModel,
                            batch: Sequence[tuple[FeatureCode, LatentVector]]) -> float:
    """Variational lower bound on the code/output mutual information (nats).

    Computed via the posterior head on freshly generated samples:
    H(f) + E[log q(f | G(x, f))] with H(f) = log 10 for the uniform code.
    """
    if not batch:
        raise ValueError("batch must be nonempty")
    model.eval_mode()
    codes = torch.tensor([int(model.code_for_digit[f.digit]) for f, _ in batch])
    inputs = torch.cat([_gan_input(int(c), lat)
                        for c, (_, lat) in zip(codes, batch)])
    with torch.no_grad():
        fake = model.generator(inputs)
        cat_logits, _, _ = model.posterior(model.disc_body(fake))
        ce = F.cross_entropy(cat_logits, codes)
    return float(math.log(CATEGORICAL_DIM) - ce)


def train_message_gan(dataset: DatasetHandle, config: MessageGanConfig | None = None,
                      rng: np.random.Generator | None = None,
                      calibration_classifier: "ClassifierModel | None" = None,
                      on_log=None) -> MessageGanModel:
    """Adversarial training with the mutual-information regularizer.

    The discriminator maximizes real/fake separation; the generator jointly
    minimizes the non-saturating adversarial loss and (weighted by alpha)
    the categorical cross-entropy through the posterior head, plus a small
    Gaussian reconstruction term for the continuous codes. After training,
    the digit -> code table is calibrated so each public feature code
    renders its own digit.
    """
    config = config or MessageGanConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    if dataset is None or dataset.count < 10_000:
        have = 0 if dataset is None else dataset.count
        raise DatasetMissingError(
            f"training needs >= 10000 images, got {have}")

    torch_seed = int(rng.integers(0, 2**31 - 1))
    model = MessageGanModel.initialize(alpha=config.alpha, torch_seed=torch_seed)
    gen = torch.Generator().manual_seed(int(rng.integers(0, 2**31 - 1)))
    data_rng = np.random.default_rng(int(rng.integers(0, 2**31 - 1)))

    opt_d = torch.optim.Adam(
        list(model.disc_body.parameters()) + list(model.disc_head.parameters()),
        lr=config.lr_d, betas=(config.adam_beta1, 0.999))
    opt_g = torch.optim.Adam(
        list(model.generator.parameters()) + list(model.posterior.parameters()),
        lr=config.lr_g, betas=(config.adam_beta1, 0.999))

    log_const = math.log(CATEGORICAL_DIM)
    model.train_mode()
    batches = dataset.shuffled_batches(config.batch_size, data_rng)
    while model.step_count < config.steps:
        try:
            real_np, _ = next(batches)
        except StopIteration:
            batches = dataset.shuffled_batches(config.batch_size, data_rng)
            real_np, _ = next(batches)
        bsz = len(real_np)
        real = images_to_tensor(real_np)

        codes = torch.randint(0, CATEGORICAL_DIM, (bsz,), generator=gen)
        onehot = F.one_hot(codes, CATEGORICAL_DIM).float()
        cont = torch.rand(bsz, CONTINUOUS_DIM, generator=gen) * 2 - 1
        noise = torch.rand(bsz, NOISE_DIM, generator=gen) * 2 - 1
        gan_in = torch.cat([onehot, cont, noise], dim=1)
        fake = model.generator(gan_in)

        ones = torch.ones(bsz)
        zeros = torch.zeros(bsz)

        d_real = model.disc_head(model.disc_body(real))
        d_fake = model.disc_head(model.disc_body(fake.detach()))
        d_loss = (F.binary_cross_entropy_with_logits(d_real, ones)
                  + F.binary_cross_entropy_with_logits(d_fake, zeros))
        opt_d.zero_grad()
        d_loss.backward()
        opt_d.step()

        body = model.disc_body(fake)
        g_adv = F.binary_cross_entropy_with_logits(model.disc_head(body), ones)
        cat_logits, mu, logvar = model.posterior(body)
        cat_ce = F.cross_entropy(cat_logits, codes)
        cont_nll = (0.5 * (logvar + (cont - mu) ** 2 / logvar.exp())).sum(1).mean()
        g_loss = (g_adv + config.alpha * cat_ce
                  + config.continuous_weight * cont_nll)
        opt_g.zero_grad()
        model.disc_body.zero_grad()
        model.disc_head.zero_grad()
        g_loss.backward()
        opt_g.step()
        model.step_count += 1

        if not (torch.isfinite(d_loss) and torch.isfinite(g_loss)):
            raise NonFiniteLossError(
                f"non-finite loss at step {model.step_count} "
                f"(d={float(d_loss)}, g={float(g_loss)})",
                log_tail=model.training_log[-100:])

        if model.step_count % config.log_interval == 0:
            model.training_log.append((
                model.step_count, float(d_loss.detach()), float(g_loss.detach()),
                float(log_const - cat_ce.detach())))
            if on_log is not None:
                on_log(model.training_log[-1])

    model.eval_mode()
    model.code_for_digit = _calibrate_code_table(
        model, dataset, rng, calibration_classifier)
    return model


def _calibrate_code_table(model: MessageGanModel, dataset: DatasetHandle,
                          rng: np.random.Generator,
                          classifier: "ClassifierModel | None") -> np.ndarray:
    """Assign each digit the categorical code that renders it.

    With a classifier: generate samples per code, classify, and solve the
    assignment on the code-by-digit agreement matrix. Without one: run the
    posterior head over labeled real images and assign on its digit-by-code
    response matrix. Either way the table is a permutation of 0..9.
    """
    agreement = np.zeros((CATEGORICAL_DIM, CATEGORICAL_DIM))
    if classifier is not None:
        per_code = 64
        for code in range(CATEGORICAL_DIM):
            for _ in range(per_code):
                img = generate_with_code_index(model, code, sample_latent(rng))
                agreement[decode_digit(classifier, img), code] += 1.0
        agreement /= per_code
    else:
        per_digit = 256
        for digit in range(CATEGORICAL_DIM):
            imgs = dataset.images[dataset.labels == digit][:per_digit]
            with torch.no_grad():
                logits, _, _ = model.posterior(
                    model.disc_body(images_to_tensor(imgs)))
                probs = F.softmax(logits, dim=1)
            agreement[digit] = probs.mean(0).numpy()
    digits, codes = linear_sum_assignment(-agreement)
    table = np.empty(CATEGORICAL_DIM, dtype=np.int64)
    table[digits] = codes
    return table


def train_classifier(train_split: DatasetHandle | None,
                     test_split: DatasetHandle | None,
                     config: ClassifierConfig | None = None,
                     rng: np.random.Generator | None = None) -> ClassifierModel:
    """Train the oracle conv net and record its held-out accuracy.

    If the accuracy lands below the configured threshold the model is still
    returned, flagged via `below_threshold`.
    """
    config = config or ClassifierConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    if train_split is None or test_split is None:
        raise MissingSplitError("classifier training needs train and test splits")

    model = ClassifierModel.initialize(torch_seed=int(rng.integers(0, 2**31 - 1)))
    data_rng = np.random.default_rng(int(rng.integers(0, 2**31 - 1)))
    opt = torch.optim.Adam(model.net.parameters(), lr=config.lr)

    images, labels = train_split.images, train_split.labels
    if config.train_limit:
        images, labels = images[:config.train_limit], labels[:config.train_limit]
    limited = DatasetHandle(split=train_split.split, images=images, labels=labels,
                            checksum=train_split.checksum)

    for epoch in range(config.epochs):
        model.net.train()
        for batch_images, batch_labels in limited.shuffled_batches(
                config.batch_size, data_rng):
            opt.zero_grad()
            logits = model.net(images_to_tensor(batch_images))
            loss = F.cross_entropy(logits, torch.from_numpy(
                batch_labels.astype(np.int64)))
            loss.backward()
            opt.step()
        model.epochs_trained += 1

    model.net.eval()
    correct = 0
    with torch.no_grad():
        for start in range(0, test_split.count, 1000):
            chunk = test_split.images[start:start + 1000]
            preds = model.net(images_to_tensor(chunk)).argmax(1).numpy()
            correct += int((preds == test_split.labels[start:start + 1000]).sum())
    model.test_accuracy = correct / test_split.count
    model.below_threshold = model.test_accuracy < config.accuracy_threshold
    return model


def decode_digit(classifier: ClassifierModel, img: GrayImage) -> int:
    """Oracle read-out: argmax class, lowest index winning exact ties."""
    classifier.net.eval()
    with torch.no_grad():
        logits = classifier.net(
            torch.from_numpy(img.to_unit()).unsqueeze(0).unsqueeze(0))
    return int(np.argmax(logits[0].numpy()))


def measure_controllability(model: MessageGanModel, classifier: ClassifierModel,
                            rng: np.random.Generator,
                            per_digit: int = 100) -> np.ndarray:
    """Oracle agreement rate per digit over fresh latents."""
    rates = np.zeros(CATEGORICAL_DIM)
    for digit in range(CATEGORICAL_DIM):
        f = FeatureCode(digit)
        hits = sum(
            decode_digit(classifier, generate(model, f, sample_latent(rng))) == digit
            for _ in range(per_digit))
        rates[digit] = hits / per_digit
    return rates


# ---------------------------------------------------------------------------
# Persistence codecs
# ---------------------------------------------------------------------------

def _serialize_gan(model: MessageGanModel):
    blob = artifacts_io.blob_from_state({
        "generator": model.generator.state_dict(),
        "disc_body": model.disc_body.state_dict(),
        "disc_head": model.disc_head.state_dict(),
        "posterior": model.posterior.state_dict(),
        "code_for_digit": model.code_for_digit,
        "training_log": model.training_log,
    })
    hyper = {"alpha": model.alpha}
    return blob, hyper, model.step_count, {}


def _deserialize_gan(blob: bytes, manifest) -> MessageGanModel:
    state = artifacts_io.state_from_blob(blob)
    model = MessageGanModel.initialize(alpha=manifest.hyperparameters["alpha"])
    model.generator.load_state_dict(state["generator"])
    model.disc_body.load_state_dict(state["disc_body"])
    model.disc_head.load_state_dict(state["disc_head"])
    model.posterior.load_state_dict(state["posterior"])
    model.code_for_digit = np.asarray(state["code_for_digit"], dtype=np.int64)
    model.training_log = [tuple(e) for e in state["training_log"]]
    model.step_count = manifest.step_count
    model.eval_mode()
    return model


def _serialize_clf(model: ClassifierModel):
    blob = artifacts_io.blob_from_state({"net": model.net.state_dict()})
    hyper = {"epochs_trained": model.epochs_trained}
    extra = {
        "test_accuracy": model.test_accuracy,
        "below_threshold": model.below_threshold,
    }
    return blob, hyper, model.epochs_trained, extra


def _deserialize_clf(blob: bytes, manifest) -> ClassifierModel:
    state = artifacts_io.state_from_blob(blob)
    model = ClassifierModel.initialize()
    model.net.load_state_dict(state["net"])
    model.test_accuracy = float(manifest.extra.get("test_accuracy", 0.0))
    model.below_threshold = bool(manifest.extra.get("below_threshold", False))
    model.epochs_trained = int(manifest.hyperparameters.get("epochs_trained", 0))
    model.net.eval()
    return model


artifacts_io.register_model_codec("message_gan", _serialize_gan, _deserialize_gan)
artifacts_io.register_model_codec("classifier", _serialize_clf, _deserialize_clf)
