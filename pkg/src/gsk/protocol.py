"""Sender and receiver manipulations of the covert channel.

The sender never touches the cover image: they derive an identification
code z from its least-significant bit plane, mask each digit's 4-bit code
with fresh random bits, encrypt the masked code under z, and ship the
(ciphertext, mask) pairs as the extraction key. The receiver re-derives z
from the very same (unmodified) cover, decrypts, unmasks, and regenerates
the digits through the public generator. Holding only the key or only the
cover yields noise.
"""

from __future__ import annotations

import secrets
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .cover_gan import (
    MODE_BINARY,
    MODE_FIXEDPOINT16,
    FIXEDPOINT_SCALE,
    BitBlock,
    Ciphertext,
    CoverGanModel,
    decrypt,
    encrypt,
)
from .errors import (
    ImageTooSmallError,
    KeyParseError,
    LengthMismatchError,
    ModeMismatchError,
    TruncatedPayloadError,
    UnknownVersionError,
    UntrainedModelError,
)
from .message_gan import (
    ClassifierModel,
    FeatureCode,
    GrayImage,
    MessageGanModel,
    decode_digit,
    generate,
    sample_latent,
)

KEY_MAGIC = b"GSK1"
_MODE_FLAGS = {MODE_BINARY: 0, MODE_FIXEDPOINT16: 1}
_FLAG_MODES = {v: k for k, v in _MODE_FLAGS.items()}
_RNG_FLAGS = {"os": 0, "seeded": 1}
_FLAG_RNGS = {v: k for k, v in _RNG_FLAGS.items()}


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CoverImage:
    """Losslessly stored 8-bit grayscale image; never modified by this module."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2 or px.dtype != np.uint8:
            raise ValueError("cover pixels must be a 2-D uint8 array")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])


@dataclass(frozen=True)
class SecretMessage:
    """Nonempty sequence of decimal digits."""

    digits: tuple[int, ...]

    def __post_init__(self):
        digits = tuple(int(d) for d in self.digits)
        if not digits:
            raise ValueError("secret message must contain at least one digit")
        if not all(0 <= d <= 9 for d in digits):
            raise ValueError(f"digits must lie in [0, 9], got {digits}")
        object.__setattr__(self, "digits", digits)

    @classmethod
    def from_string(cls, text: str) -> "SecretMessage":
        if not text.isdigit():
            raise ValueError(f"message must match ^[0-9]+$, got {text!r}")
        return cls(tuple(int(ch) for ch in text))

    def to_string(self) -> str:
        return "".join(str(d) for d in self.digits)

    def __len__(self) -> int:
        return len(self.digits)


@dataclass(frozen=True)
class KeyBlock:
    ciphertext: Ciphertext
    f_prime: BitBlock

    def __post_init__(self):
        if self.ciphertext.n != self.f_prime.n:
            raise LengthMismatchError(
                f"ciphertext length {self.ciphertext.n} != mask length "
                f"{self.f_prime.n}")


@dataclass(frozen=True)
class ExtractionKey:
    """Per-digit (ciphertext, random-mask) pairs plus format metadata."""

    blocks: tuple[KeyBlock, ...]
    mode: str = MODE_BINARY
    rng_mode: str = "os"
    version: int = 1

    def __post_init__(self):
        if not self.blocks:
            raise ValueError("extraction key must hold at least one block")
        n = self.blocks[0].f_prime.n
        for b in self.blocks:
            if b.f_prime.n != n:
                raise LengthMismatchError("all key blocks must share one length")
            if b.ciphertext.mode != self.mode:
                raise ModeMismatchError(
                    f"block mode {b.ciphertext.mode!r} != key mode {self.mode!r}")

    @property
    def block_size(self) -> int:
        return self.blocks[0].f_prime.n

    @property
    def logical_bit_length(self) -> int:
        """Information content in bits, excluding container padding."""
        n = self.block_size
        per_c = n if self.mode == MODE_BINARY else 16 * n
        return len(self.blocks) * (per_c + n)


@dataclass(frozen=True)
class RecoveryResult:
    """Receiver output: digits, their rendered images, per-block validity,
    the raw recovered 4-bit codes, and whether z had to be substituted."""

    message: SecretMessage
    images: tuple[GrayImage, ...]
    invalid: tuple[bool, ...]
    codes: tuple[int, ...]
    z_substituted: bool

    def __iter__(self):
        return iter((self.message, self.images))


# ---------------------------------------------------------------------------
# Code extraction and XOR layer
# ---------------------------------------------------------------------------

def extract_identification_code(cover: CoverImage, n: int) -> BitBlock:
    """LSBs of the first n pixels in row-major order, mapped to {-1, +1}."""
    if cover.width * cover.height < n:
        raise ImageTooSmallError(
            f"cover has {cover.width * cover.height} pixels, need {n}")
    lsbs = (cover.pixels.reshape(-1)[:n] & 1).astype(np.int64)
    return BitBlock(tuple(int(2 * b - 1) for b in lsbs))


def xor_codes(a: BitBlock, b: BitBlock) -> BitBlock:
    """Logical XOR; under the +-1 encoding this is elementwise -(a*b)."""
    if a.n != b.n:
        raise LengthMismatchError(f"cannot XOR lengths {a.n} and {b.n}")
    return BitBlock(tuple(-(x * y) for x, y in zip(a.bits, b.bits)))


def _nibble_block(f: FeatureCode) -> BitBlock:
    return BitBlock.from_logical(f.nibble)


def _code_value(block: BitBlock) -> int:
    value = 0
    for bit in block.logical:
        value = (value << 1) | bit
    return value


# ---------------------------------------------------------------------------
# Sender
# ---------------------------------------------------------------------------

def derive_key(message: SecretMessage, cover: CoverImage,
               cover_model: CoverGanModel,
               rng: np.random.Generator | None = None) -> ExtractionKey:
    """Build the extraction key for a message against a cover image.

    Per digit: take its 4-bit code, XOR with a fresh random mask, encrypt
    the result under the cover-derived identification code, and record the
    (ciphertext, mask) pair. The cover is only read. Passing no rng uses OS
    entropy (production); a seeded generator is accepted for reproducible
    tests and flagged in the key metadata.
    """
    if cover_model.step_count == 0:
        raise UntrainedModelError("cover encryption model is untrained")
    n = cover_model.block_size
    if n != 4:
        raise LengthMismatchError(
            f"digit protocol requires block size 4, model has {n}")
    rng_mode = "seeded" if rng is not None else "os"
    if rng is None:
        rng = np.random.default_rng(secrets.randbits(128))
    z = extract_identification_code(cover, n)

    blocks = []
    for digit in message.digits:
        f = _nibble_block(FeatureCode(digit))
        f_prime = BitBlock.random(rng, n)
        f_second = xor_codes(f, f_prime)
        c = encrypt(cover_model, f_second, z)
        blocks.append(KeyBlock(ciphertext=c, f_prime=f_prime))
    return ExtractionKey(blocks=tuple(blocks), mode=cover_model.mode,
                         rng_mode=rng_mode)


# ---------------------------------------------------------------------------
# Receiver
# ---------------------------------------------------------------------------

def recover_message(key: ExtractionKey, cover: CoverImage | None,
                    cover_model: CoverGanModel, msg_model: MessageGanModel,
                    classifier: ClassifierModel,
                    rng: np.random.Generator) -> RecoveryResult:
    """Reconstruct digits (and their rendered images) from key and cover.

    Without the cover, a uniformly random identification code is
    substituted, which yields noise output. Recovered codes outside the
    digit range are flagged invalid; a uniformly drawn digit is rendered
    in their place so every block still produces an image.
    """
    if key.mode != cover_model.mode:
        raise ModeMismatchError(
            f"key mode {key.mode!r} does not match model mode "
            f"{cover_model.mode!r}")
    n = cover_model.block_size
    if key.block_size != n:
        raise LengthMismatchError(
            f"key block size {key.block_size} != model block size {n}")
    if cover is not None:
        z = extract_identification_code(cover, n)
        z_substituted = False
    else:
        z = BitBlock.random(rng, n)
        z_substituted = True

    digits: list[int] = []
    images: list[GrayImage] = []
    invalid: list[bool] = []
    codes: list[int] = []
    for block in key.blocks:
        f_second = decrypt(cover_model, block.ciphertext, z)
        f_rec = xor_codes(f_second, block.f_prime)
        value = _code_value(f_rec)
        codes.append(value)
        if value <= 9:
            bad = False
            feature = FeatureCode(value)
        else:
            bad = True
            feature = FeatureCode(int(rng.integers(0, 10)))
        img = generate(msg_model, feature, sample_latent(rng))
        digits.append(decode_digit(classifier, img))
        images.append(img)
        invalid.append(bad)
    return RecoveryResult(
        message=SecretMessage(tuple(digits)),
        images=tuple(images),
        invalid=tuple(invalid),
        codes=tuple(codes),
        z_substituted=z_substituted,
    )


# ---------------------------------------------------------------------------
# Key container (bit-exact serialization)
# ---------------------------------------------------------------------------

def _pack_bits(bits: Sequence[int]) -> bytes:
    """Pack logical bits MSB-first, zero-padding the final byte."""
    out = bytearray((len(bits) + 7) // 8)
    for i, bit in enumerate(bits):
        if bit:
            out[i // 8] |= 0x80 >> (i % 8)
    return bytes(out)


def _unpack_bits(data: bytes, count: int) -> tuple[int, ...]:
    return tuple((data[i // 8] >> (7 - i % 8)) & 1 for i in range(count))


def serialize_key(key: ExtractionKey) -> bytes:
    """Encode the key container: magic, mode flag, block size, digit count,
    rng flag, then per block the ciphertext and mask, each byte-aligned."""
    n = key.block_size
    out = bytearray()
    out += KEY_MAGIC
    out.append(_MODE_FLAGS[key.mode])
    out.append(n)
    out += len(key.blocks).to_bytes(4, "big")
    out.append(_RNG_FLAGS[key.rng_mode])
    for block in key.blocks:
        if key.mode == MODE_BINARY:
            logical = tuple((int(v) + 1) // 2 for v in block.ciphertext.values)
            out += _pack_bits(logical)
        else:
            for v in block.ciphertext.values:
                out += int(round(v * FIXEDPOINT_SCALE)).to_bytes(
                    2, "big", signed=True)
        out += _pack_bits(block.f_prime.logical)
    return bytes(out)


def parse_key(data: bytes) -> ExtractionKey:
    """Decode a key container, validating magic, flags, and exact length."""
    header_len = len(KEY_MAGIC) + 1 + 1 + 4 + 1
    if len(data) < header_len:
        raise TruncatedPayloadError(
            f"key container is {len(data)} bytes, header needs {header_len}")
    if data[:4] != KEY_MAGIC:
        raise UnknownVersionError(
            f"bad key container magic {data[:4]!r}, expected {KEY_MAGIC!r}")
    mode_flag = data[4]
    if mode_flag not in _FLAG_MODES:
        raise ModeMismatchError(f"unknown ciphertext mode flag {mode_flag}")
    mode = _FLAG_MODES[mode_flag]
    n = data[5]
    if n == 0:
        raise KeyParseError("block size 0 is invalid")
    count = int.from_bytes(data[6:10], "big")
    if count == 0:
        raise KeyParseError("digit count 0 is invalid")
    rng_flag = data[10]
    if rng_flag not in _FLAG_RNGS:
        raise KeyParseError(f"unknown rng mode flag {rng_flag}")

    bits_bytes = (n + 7) // 8
    c_bytes = bits_bytes if mode == MODE_BINARY else 2 * n
    block_bytes = c_bytes + bits_bytes
    expected = header_len + count * block_bytes
    if len(data) < expected:
        raise TruncatedPayloadError(
            f"key container is {len(data)} bytes, layout needs {expected}")
    if len(data) > expected:
        raise KeyParseError(
            f"{len(data) - expected} trailing bytes after the declared payload")

    blocks = []
    pos = header_len
    for _ in range(count):
        if mode == MODE_BINARY:
            logical = _unpack_bits(data[pos:pos + c_bytes], n)
            c = Ciphertext(tuple(2 * b - 1 for b in logical), MODE_BINARY)
        else:
            values = []
            for i in range(n):
                raw = int.from_bytes(
                    data[pos + 2 * i:pos + 2 * i + 2], "big", signed=True)
                if not -FIXEDPOINT_SCALE <= raw <= FIXEDPOINT_SCALE:
                    raise KeyParseError(
                        f"fixed-point value {raw} outside +-{FIXEDPOINT_SCALE}")
                values.append(raw / FIXEDPOINT_SCALE)
            c = Ciphertext(tuple(values), MODE_FIXEDPOINT16)
        pos += c_bytes
        f_prime = BitBlock.from_logical(_unpack_bits(data[pos:pos + bits_bytes], n))
        pos += bits_bytes
        blocks.append(KeyBlock(ciphertext=c, f_prime=f_prime))
    return ExtractionKey(blocks=tuple(blocks), mode=mode,
                         rng_mode=_FLAG_RNGS[rng_flag])
