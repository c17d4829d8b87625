"""Generative steganography toolkit.

A secret digit string is never embedded in the cover image. The sender
derives an extraction key from the message and the cover's LSB plane;
the receiver feeds that key and the unmodified cover into public trained
generators to regenerate the digits. Holding only the key or only the
cover yields noise.

Subsystems:
  message_gan  - feature-code-controlled digit image generator + oracle
  cover_gan    - keyed encryption triple (generator/receiver/attacker)
  protocol     - sender/receiver manipulations and the key container
  evaluation   - three-case bit-error evaluation, capacity metrics, curves
  artifacts_io - datasets, checkpoints, cover PNG I/O, config, seeding
  cli          - command-line entry points
"""

from . import artifacts_io, cover_gan, evaluation, message_gan, protocol
from .artifacts_io import GskConfig, load_config, load_mnist
from .cover_gan import BitBlock, Ciphertext, CoverGanModel
from .message_gan import FeatureCode, GrayImage, LatentVector, MessageGanModel
from .protocol import CoverImage, ExtractionKey, SecretMessage

__all__ = [
    "artifacts_io",
    "cover_gan",
    "evaluation",
    "message_gan",
    "protocol",
    "GskConfig",
    "load_config",
    "load_mnist",
    "BitBlock",
    "Ciphertext",
    "CoverGanModel",
    "FeatureCode",
    "GrayImage",
    "LatentVector",
    "MessageGanModel",
    "CoverImage",
    "ExtractionKey",
    "SecretMessage",
]

__version__ = "0.1.0"
