"""Three-network adversarial cryptosystem over fixed-length bit blocks.

A generator network encrypts a plaintext block P under a shared code z,
a receiver network decrypts with (c, z), and an attacker network tries to
recover P from c alone. The two sides are trained in alternation: the
(generator, receiver) pair minimizes its own reconstruction error minus
the frozen attacker's, then the attacker re-optimizes against the frozen
pair. At equilibrium the receiver is lossless and the attacker is pinned
at chance.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn

from . import artifacts_io
from .artifacts_io import CoverGanConfig
from .errors import (
    LengthMismatchError,
    ModeMismatchError,
    NonFiniteLossError,
)

MODE_BINARY = "binary"
MODE_FIXEDPOINT16 = "fixedpoint16"
FIXEDPOINT_SCALE = 32767


# ---------------------------------------------------------------------------
# Bit blocks and ciphertexts
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BitBlock:
    """Fixed-length vector over {-1, +1}; logical view maps -1 to 0."""

    bits: tuple[int, ...]

    def __post_init__(self):
        if not all(b in (-1, 1) for b in self.bits):
            raise ValueError(f"bit block elements must be -1 or +1, got {self.bits}")

    @property
    def n(self) -> int:
        return len(self.bits)

    @property
    def logical(self) -> tuple[int, ...]:
        return tuple((b + 1) // 2 for b in self.bits)

    @classmethod
    def from_logical(cls, bits: Iterable[int]) -> "BitBlock":
        bits = tuple(int(b) for b in bits)
        if not all(b in (0, 1) for b in bits):
            raise ValueError(f"logical bits must be 0 or 1, got {bits}")
        return cls(tuple(2 * b - 1 for b in bits))

    @classmethod
    def random(cls, rng: np.random.Generator, n: int) -> "BitBlock":
        return cls.from_logical(rng.integers(0, 2, size=n))

    def to_tensor(self) -> torch.Tensor:
        return torch.tensor(self.bits, dtype=torch.float32)


@dataclass(frozen=True)
class Ciphertext:
    """Encrypted block; binary (+-1) or 16-bit fixed-point values in [-1, 1]."""

    values: tuple[float, ...]
    mode: str = MODE_BINARY

    def __post_init__(self):
        if self.mode == MODE_BINARY:
            if not all(v in (-1, 1) for v in self.values):
                raise ValueError("binary ciphertext values must be -1 or +1")
        elif self.mode == MODE_FIXEDPOINT16:
            for v in self.values:
                if not -1.0 <= v <= 1.0:
                    raise ValueError("fixed-point ciphertext values must lie in [-1, 1]")
                q = round(v * FIXEDPOINT_SCALE)
                if abs(v - q / FIXEDPOINT_SCALE) > 1e-12:
                    raise ValueError("value is not on the 16-bit fixed-point grid")
        else:
            raise ValueError(f"unknown ciphertext mode {self.mode!r}")

    @property
    def n(self) -> int:
        return len(self.values)

    def to_tensor(self) -> torch.Tensor:
        return torch.tensor(self.values, dtype=torch.float32)


def quantize_fixedpoint(values: np.ndarray) -> tuple[float, ...]:
    q = np.clip(np.rint(np.asarray(values, dtype=np.float64) * FIXEDPOINT_SCALE),
                -FIXEDPOINT_SCALE, FIXEDPOINT_SCALE)
    return tuple(float(v) / FIXEDPOINT_SCALE for v in q)


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------

def _sign_pm1(x: torch.Tensor) -> torch.Tensor:
    # sign(0) maps to +1
    return torch.where(x >= 0, torch.ones_like(x), -torch.ones_like(x))


class _SignSTE(torch.autograd.Function):
    """Binarize in the forward pass, pass gradients straight through."""

    @staticmethod
    def forward(ctx, x):
        return _sign_pm1(x)

    @staticmethod
    def backward(ctx, grad):
        return grad


class MixTransformNet(nn.Module):
    """One fully connected mix layer over the concatenated input, then a
    1-D conv stack (sigmoid activations, tanh output), emitting n values.

    `temperature` sharpens the output tanh; training schedules use it to
    anneal toward hard +-1 decisions."""

    def __init__(self, in_features: int, n: int, width: int = 16):
        super().__init__()
        self.n = n
        self.fc = nn.Linear(in_features, 2 * n)
        self.conv1 = nn.Conv1d(1, width, kernel_size=4, stride=1, padding=2)
        self.conv2 = nn.Conv1d(width, 2 * width, kernel_size=2, stride=2)
        self.conv3 = nn.Conv1d(2 * width, 2 * width, kernel_size=1)
        self.conv4 = nn.Conv1d(2 * width, 1, kernel_size=1)

    def forward(self, x: torch.Tensor,
                temperature: float = 1.0) -> torch.Tensor:
        h = self.fc(x).unsqueeze(1)
        h = torch.sigmoid(self.conv1(h))[:, :, : 2 * self.n]
        h = torch.sigmoid(self.conv2(h))
        h = torch.sigmoid(self.conv3(h))
        return torch.tanh(temperature * self.conv4(h)).squeeze(1)


# ---------------------------------------------------------------------------
# Model container
# ---------------------------------------------------------------------------

@dataclass
class CoverGanModel:
    """Trained (or training) parameter sets of the three networks."""

    kind = "cover_gan"

    generator: MixTransformNet
    receiver: MixTransformNet
    attacker: MixTransformNet
    block_size: int
    mode: str = MODE_BINARY
    conv_width: int = 16
    step_count: int = 0
    gr_phase_steps: int = 0
    a_phase_steps: int = 0
    converged: bool = False
    training_log: list[tuple[int, float, float]] = field(default_factory=list)

    @classmethod
    def initialize(cls, block_size: int, mode: str = MODE_BINARY,
                   conv_width: int = 16,
                   torch_seed: int | None = None) -> "CoverGanModel":
        if torch_seed is not None:
            torch.manual_seed(torch_seed)
        n = block_size
        return cls(
            generator=MixTransformNet(2 * n, n, conv_width),
            receiver=MixTransformNet(2 * n, n, conv_width),
            attacker=MixTransformNet(n, n, conv_width),
            block_size=n,
            mode=mode,
            conv_width=conv_width,
        )

    def eval_mode(self) -> None:
        self.generator.eval()
        self.receiver.eval()
        self.attacker.eval()

    def cipher_tensor(self, p: torch.Tensor, z: torch.Tensor,
                      train: bool = False, binarize: bool | None = None,
                      temperature: float = 1.0) -> torch.Tensor:
        """Raw model ciphertext for a (P, z) batch, honoring the model mode.

        `binarize` and `temperature` let the training schedule anneal from
        soft to hard ciphertexts; evaluation always follows the model mode.
        """
        c = self.generator(torch.cat([p, z], dim=1), temperature=temperature)
        if binarize is None:
            binarize = self.mode == MODE_BINARY
        if binarize:
            c = _SignSTE.apply(c) if train else _sign_pm1(c)
        return c


def _ensure_block(x, n: int, name: str) -> BitBlock:
    if not isinstance(x, BitBlock):
        raise TypeError(f"{name} must be a BitBlock")
    if x.n != n:
        raise LengthMismatchError(f"{name} has length {x.n}, model block size is {n}")
    return x


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def l1_distance(x: Sequence[float], x_prime: Sequence[float]) -> float:
    """Sum of absolute elementwise differences between two equal-length vectors."""
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(x_prime, dtype=np.float64)
    if a.shape != b.shape:
        raise LengthMismatchError(
            f"cannot compare lengths {a.shape} and {b.shape}"
        )
    return float(np.abs(a - b).sum())


def encrypt(model: CoverGanModel, p: BitBlock, z: BitBlock) -> Ciphertext:
    """Deterministically encrypt block p under code z."""
    p = _ensure_block(p, model.block_size, "p")
    z = _ensure_block(z, model.block_size, "z")
    model.eval_mode()
    with torch.no_grad():
        c = model.cipher_tensor(p.to_tensor().unsqueeze(0),
                                z.to_tensor().unsqueeze(0))[0]
    if model.mode == MODE_BINARY:
        return Ciphertext(tuple(int(v) for v in c.tolist()), MODE_BINARY)
    return Ciphertext(quantize_fixedpoint(c.numpy()), MODE_FIXEDPOINT16)


def decrypt(model: CoverGanModel, c: Ciphertext, z: BitBlock) -> BitBlock:
    """Receiver-side reconstruction of p from (c, z); exact after convergence."""
    if c.n != model.block_size:
        raise LengthMismatchError(
            f"ciphertext has length {c.n}, model block size is {model.block_size}"
        )
    if c.mode != model.mode:
        raise ModeMismatchError(
            f"ciphertext mode {c.mode!r} does not match model mode {model.mode!r}"
        )
    z = _ensure_block(z, model.block_size, "z")
    model.eval_mode()
    with torch.no_grad():
        rec = model.receiver(
            torch.cat([c.to_tensor(), z.to_tensor()]).unsqueeze(0))[0]
    return BitBlock(tuple(int(v) for v in _sign_pm1(rec).tolist()))


def attack(model: CoverGanModel, c: Ciphertext) -> BitBlock:
    """Attacker's best reconstruction of p from the ciphertext alone."""
    if c.n != model.block_size:
        raise LengthMismatchError(
            f"ciphertext has length {c.n}, model block size is {model.block_size}"
        )
    if c.mode != model.mode:
        raise ModeMismatchError(
            f"ciphertext mode {c.mode!r} does not match model mode {model.mode!r}"
        )
    model.eval_mode()
    with torch.no_grad():
        rec = model.attacker(c.to_tensor().unsqueeze(0))[0]
    return BitBlock(tuple(int(v) for v in _sign_pm1(rec).tolist()))


def loss_gr(model: CoverGanModel, batch: Sequence[tuple[BitBlock, BitBlock]]) -> float:
    """Joint loss of the legitimate pair: mean receiver distortion minus the
    frozen attacker's mean distortion over the batch."""
    if not batch:
        raise LengthMismatchError("batch must be nonempty")
    p = torch.stack([pb.to_tensor() for pb, _ in batch])
    z = torch.stack([zb.to_tensor() for _, zb in batch])
    model.eval_mode()
    with torch.no_grad():
        c = model.cipher_tensor(p, z)
        p_r = model.receiver(torch.cat([c, z], dim=1))
        p_a = model.attacker(c)
        value = ((p - p_r).abs().sum(dim=1).mean()
                 - (p - p_a).abs().sum(dim=1).mean())
    return float(value)


def _rand_pm1(gen: torch.Generator, batch: int, n: int) -> torch.Tensor:
    bits = torch.randint(0, 2, (batch, n), generator=gen, dtype=torch.float32)
    return bits * 2 - 1


def _error_rates(model: CoverGanModel, gen: torch.Generator,
                 batch: int) -> tuple[float, float]:
    n = model.block_size
    with torch.no_grad():
        p = _rand_pm1(gen, batch, n)
        z = _rand_pm1(gen, batch, n)
        c = model.cipher_tensor(p, z)
        r_err = (_sign_pm1(model.receiver(torch.cat([c, z], 1))) != p)
        a_err = (_sign_pm1(model.attacker(c)) != p)
    return float(r_err.float().mean()), float(a_err.float().mean())


def exhaustive_block_failures(model: CoverGanModel) -> int:
    """Count (P, z) combinations the receiver fails to round-trip, over the
    full 2^N x 2^N grid. Only sensible for small block sizes."""
    n = model.block_size
    combos = [(pv, zv) for pv in range(2**n) for zv in range(2**n)]
    p = torch.tensor([[(pv >> (n - 1 - i)) & 1 for i in range(n)]
                      for pv, _ in combos], dtype=torch.float32) * 2 - 1
    z = torch.tensor([[(zv >> (n - 1 - i)) & 1 for i in range(n)]
                      for _, zv in combos], dtype=torch.float32) * 2 - 1
    model.eval_mode()
    with torch.no_grad():
        c = model.cipher_tensor(p, z)
        rec = _sign_pm1(model.receiver(torch.cat([c, z], 1)))
    return int((rec != p).any(dim=1).sum())


def train_cover_gan(config: CoverGanConfig | None = None,
                    rng: np.random.Generator | None = None,
                    initial: CoverGanModel | None = None,
                    on_log=None) -> CoverGanModel:
    """Run the alternating schedule until the convergence window or budget.

    Each cycle takes `steps_per_gr_phase` optimizer steps on the
    (generator, receiver) pair against the frozen attacker, then
    `steps_per_a_phase` steps on the attacker against the frozen pair.
    Per-bit error rates of both readers are logged every `log_interval`
    generator steps. Convergence: receiver error < 0.01 and attacker error
    within [0.45, 0.55] for five consecutive logged intervals (plus, for
    block sizes that permit it, an exhaustive round-trip with at most one
    failing combination).
    """
    config = config or CoverGanConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    n = config.block_size

    init_seed = int(rng.integers(0, 2**31 - 1))
    data_gen = torch.Generator().manual_seed(int(rng.integers(0, 2**31 - 1)))
    eval_seed = int(rng.integers(0, 2**31 - 1))

    model = initial if initial is not None else CoverGanModel.initialize(
        n, config.mode, config.conv_width, torch_seed=init_seed)

    opt_gr = torch.optim.Adam(
        list(model.generator.parameters()) + list(model.receiver.parameters()),
        lr=config.lr)
    opt_a = torch.optim.Adam(model.attacker.parameters(), lr=config.lr)

    exhaustive_ok = n > 8  # grid check only feasible for small blocks
    window: list[tuple[float, float]] = []
    model.generator.train()
    model.receiver.train()
    model.attacker.train()

    def ramp_temperature(step: int) -> float:
        # soft ciphertexts for the first half of the warm-up (the mixing
        # structure has to form before sharpening), then a quadratic ramp
        # up to warmup_temperature by the warm-up end
        half = max(1, config.binary_warmup_steps // 2)
        if step < half:
            return 1.0
        frac = min(1.0, (step - half) / half)
        return 1.0 + (config.warmup_temperature - 1.0) * frac * frac

    while model.step_count < config.max_steps:
        # binary mode: anneal the output tanh toward hard decisions during
        # warm-up, then switch to straight-through sign training
        binarize = (model.mode != MODE_BINARY or
                    model.step_count >= config.binary_warmup_steps)
        temperature = 1.0 if binarize else ramp_temperature(model.step_count)
        for _ in range(config.steps_per_gr_phase):
            p = _rand_pm1(data_gen, config.batch_size, n)
            z = _rand_pm1(data_gen, config.batch_size, n)
            c = model.cipher_tensor(p, z, train=True, binarize=binarize,
                                    temperature=temperature)
            p_r = model.receiver(torch.cat([c, z], dim=1))
            p_a = model.attacker(c)
            loss = ((p - p_r).abs().sum(1).mean()
                    - (p - p_a).abs().sum(1).mean())
            if not torch.isfinite(loss):
                raise NonFiniteLossError(
                    f"non-finite pair loss at step {model.step_count}",
                    log_tail=model.training_log[-100:])
            opt_gr.zero_grad()
            model.attacker.zero_grad()
            loss.backward()
            opt_gr.step()
            model.step_count += 1
            model.gr_phase_steps += 1

            if model.step_count % config.log_interval == 0:
                eval_gen = torch.Generator().manual_seed(
                    eval_seed + model.step_count)
                model.eval_mode()
                r_err, a_err = _error_rates(model, eval_gen, config.eval_batch)
                model.training_log.append((model.step_count, r_err, a_err))
                if on_log is not None:
                    on_log(model.training_log[-1])
                model.generator.train()
                model.receiver.train()
                model.attacker.train()
                if binarize:  # convergence only counts in deployment mode
                    window.append((r_err, a_err))
                if len(window) > 5:
                    window.pop(0)
                if (len(window) == 5
                        and all(r < 0.01 for r, _ in window)
                        and all(0.45 <= a <= 0.55 for _, a in window)):
                    model.converged = True
                    if not exhaustive_ok:
                        model.eval_mode()
                        exhaustive_ok = exhaustive_block_failures(model) <= 1
                        model.generator.train()
                        model.receiver.train()
                        model.attacker.train()
                    if exhaustive_ok:
                        model.eval_mode()
                        return model
                else:
                    model.converged = False

        for _ in range(config.steps_per_a_phase):
            p = _rand_pm1(data_gen, config.batch_size, n)
            z = _rand_pm1(data_gen, config.batch_size, n)
            with torch.no_grad():
                c = model.cipher_tensor(p, z, train=True, binarize=binarize,
                                        temperature=temperature)
            loss_a = (p - model.attacker(c)).abs().sum(1).mean()
            if not torch.isfinite(loss_a):
                raise NonFiniteLossError(
                    f"non-finite attacker loss at step {model.step_count}",
                    log_tail=model.training_log[-100:])
            opt_a.zero_grad()
            loss_a.backward()
            opt_a.step()
            model.a_phase_steps += 1

    model.eval_mode()
    return model


# ---------------------------------------------------------------------------
# Persistence codec
# ---------------------------------------------------------------------------

def _serialize(model: CoverGanModel):
    blob = artifacts_io.blob_from_state({
        "generator": model.generator.state_dict(),
        "receiver": model.receiver.state_dict(),
        "attacker": model.attacker.state_dict(),
        "training_log": model.training_log,
    })
    hyper = {
        "block_size": model.block_size,
        "mode": model.mode,
        "conv_width": model.conv_width,
    }
    extra = {
        "converged": model.converged,
        "gr_phase_steps": model.gr_phase_steps,
        "a_phase_steps": model.a_phase_steps,
    }
    return blob, hyper, model.step_count, extra


def _deserialize(blob: bytes, manifest) -> CoverGanModel:
    state = artifacts_io.state_from_blob(blob)
    hyper = manifest.hyperparameters
    model = CoverGanModel.initialize(
        hyper["block_size"], hyper["mode"], hyper["conv_width"])
    model.generator.load_state_dict(state["generator"])
    model.receiver.load_state_dict(state["receiver"])
    model.attacker.load_state_dict(state["attacker"])
    model.training_log = [tuple(entry) for entry in state["training_log"]]
    model.step_count = manifest.step_count
    model.converged = bool(manifest.extra.get("converged", False))
    model.gr_phase_steps = int(manifest.extra.get("gr_phase_steps", 0))
    model.a_phase_steps = int(manifest.extra.get("a_phase_steps", 0))
    model.eval_mode()
    return model


artifacts_io.register_model_codec("cover_gan", _serialize, _deserialize)
