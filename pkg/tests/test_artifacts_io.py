"""Dataset ingestion, checkpoint container, cover PNG I/O, config schema."""

import gzip
import struct

import numpy as np
import pytest
from PIL import Image

from gsk import artifacts_io
from gsk.artifacts_io import (
    CheckpointManifest,
    CoverGanConfig,
    GskConfig,
    config_from_dict,
    derive_seed,
    load_checkpoint,
    load_config,
    load_mnist,
    read_cover,
    save_checkpoint,
    write_cover,
)
from gsk.cover_gan import BitBlock, CoverGanModel, encrypt
from gsk.errors import (
    ChecksumMismatchError,
    KindMismatchError,
    MalformedIdxError,
    MissingFilesError,
    SchemaViolationError,
    TruncatedPayloadError,
    UnknownVersionError,
    UnsupportedImageError,
)
from gsk.protocol import CoverImage


class TestMnistLoading:
    def test_train_split_counts(self, mnist_train):
        assert mnist_train.count == 60000
        assert mnist_train.images.shape == (60000, 28, 28)
        assert mnist_train.labels.shape == (60000,)
        assert set(np.unique(mnist_train.labels)) == set(range(10))

    def test_test_split_counts(self, mnist_test):
        assert mnist_test.count == 10000

    def test_shuffle_reproducible(self, mnist_train):
        a = next(mnist_train.shuffled_batches(32, np.random.default_rng(5)))
        b = next(mnist_train.shuffled_batches(32, np.random.default_rng(5)))
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_missing_files(self, tmp_path):
        with pytest.raises(MissingFilesError):
            load_mnist(tmp_path, "train")

    def test_truncated_idx_rejected(self, tmp_path):
        payload = struct.pack(">HBB", 0, 8, 3) + struct.pack(">III", 10, 28, 28)
        payload += b"\x00" * 100  # far short of 10*28*28
        (tmp_path / "train-images-idx3-ubyte").write_bytes(payload)
        labels = struct.pack(">HBB", 0, 8, 1) + struct.pack(">I", 10) + b"\x00" * 10
        (tmp_path / "train-labels-idx1-ubyte").write_bytes(labels)
        with pytest.raises(MalformedIdxError):
            load_mnist(tmp_path, "train")

    def test_canonical_name_with_wrong_checksum_rejected(self, tmp_path, data_dir):
        src = data_dir / "t10k-labels-idx1-ubyte.gz"
        if not src.exists():
            pytest.skip("gz archive not present")
        raw = bytearray(src.read_bytes())
        raw[-1] ^= 0xFF
        (tmp_path / "t10k-labels-idx1-ubyte.gz").write_bytes(bytes(raw))
        (tmp_path / "t10k-images-idx3-ubyte.gz").write_bytes(
            (data_dir / "t10k-images-idx3-ubyte.gz").read_bytes())
        with pytest.raises(ChecksumMismatchError):
            load_mnist(tmp_path, "test")


class TestCheckpoints:
    @pytest.fixture()
    def small_model(self):
        return CoverGanModel.initialize(4, torch_seed=11)

    def test_roundtrip_preserves_encryption(self, tmp_path, small_model):
        small_model.step_count = 17  # mark as trained for encrypt
        path = tmp_path / "model.ckpt"
        manifest = save_checkpoint(small_model, path)
        assert manifest.kind == "cover_gan"
        loaded = load_checkpoint(path, "cover_gan")
        rng = np.random.default_rng(0)
        for _ in range(100):
            p = BitBlock.random(rng, 4)
            z = BitBlock.random(rng, 4)
            assert encrypt(small_model, p, z) == encrypt(loaded, p, z)

    def test_kind_mismatch(self, tmp_path, small_model):
        path = tmp_path / "model.ckpt"
        save_checkpoint(small_model, path)
        with pytest.raises(KindMismatchError):
            load_checkpoint(path, "classifier")

    def test_single_byte_corruption_detected(self, tmp_path, small_model):
        path = tmp_path / "model.ckpt"
        save_checkpoint(small_model, path)
        raw = bytearray(path.read_bytes())
        raw[-1] ^= 0x01
        path.write_bytes(bytes(raw))
        with pytest.raises(ChecksumMismatchError):
            load_checkpoint(path, "cover_gan")

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTGSK00" + b"\x00" * 16)
        with pytest.raises(UnknownVersionError):
            load_checkpoint(path, "cover_gan")

    def test_truncated_manifest(self, tmp_path):
        path = tmp_path / "trunc.ckpt"
        path.write_bytes(artifacts_io.CHECKPOINT_MAGIC + b"\x00\x00")
        with pytest.raises(TruncatedPayloadError):
            load_checkpoint(path, "cover_gan")

    def test_unknown_format_version(self, tmp_path, small_model):
        path = tmp_path / "model.ckpt"
        save_checkpoint(small_model, path)
        manifest = artifacts_io.read_manifest(path)
        assert manifest.format_version == artifacts_io.CHECKPOINT_FORMAT_VERSION
        bumped = CheckpointManifest(
            kind=manifest.kind, hyperparameters=manifest.hyperparameters,
            step_count=manifest.step_count,
            dataset_checksum=manifest.dataset_checksum,
            content_checksum=manifest.content_checksum, format_version=99,
            extra=manifest.extra)
        blob = path.read_bytes()
        mlen = struct.unpack(">I", blob[8:12])[0]
        payload = bumped.to_json().encode()
        path.write_bytes(blob[:8] + struct.pack(">I", len(payload))
                         + payload + blob[12 + mlen:])
        with pytest.raises(UnknownVersionError):
            load_checkpoint(path, "cover_gan")


class TestCoverIO:
    def test_roundtrip_pixel_exact(self, tmp_path):
        rng = np.random.default_rng(1)
        pixels = rng.integers(0, 256, (40, 30)).astype(np.uint8)
        path = tmp_path / "cover.png"
        write_cover(CoverImage(pixels), path)
        back = read_cover(path)
        assert np.array_equal(back.pixels, pixels)

    def test_lossy_format_rejected(self, tmp_path):
        path = tmp_path / "cover.jpg"
        Image.fromarray(np.zeros((32, 32), dtype=np.uint8), mode="L").save(
            path, format="JPEG")
        with pytest.raises(UnsupportedImageError):
            read_cover(path)

    def test_sixteen_bit_png_rejected(self, tmp_path):
        path = tmp_path / "deep.png"
        img = Image.new("I;16", (32, 32))
        img.putdata([(i * 64) % 65536 for i in range(1024)])
        img.save(path, format="PNG")
        with pytest.raises(UnsupportedImageError):
            read_cover(path)

    def test_rgb_png_rejected(self, tmp_path):
        path = tmp_path / "rgb.png"
        Image.fromarray(np.zeros((8, 8, 3), dtype=np.uint8), mode="RGB").save(
            path, format="PNG")
        with pytest.raises(UnsupportedImageError):
            read_cover(path)


class TestConfig:
    def test_empty_file_gives_defaults(self, tmp_path):
        path = tmp_path / "conf.json"
        path.write_text("{}")
        config = load_config(path)
        assert config.cover_gan.block_size == 4
        assert config.cover_gan.mode == "binary"
        assert config.message_gan.alpha == 1.0
        assert config.cover_gan.log_interval == 1000

    def test_none_path_gives_defaults(self):
        assert load_config(None) == GskConfig()

    def test_zero_block_size_rejected(self):
        with pytest.raises(SchemaViolationError):
            config_from_dict({"cover_gan": {"block_size": 0}})

    def test_unknown_key_named(self):
        with pytest.raises(SchemaViolationError) as exc:
            config_from_dict({"unknown_key": 1})
        assert "unknown_key" in str(exc.value)

    def test_all_violations_collected(self):
        with pytest.raises(SchemaViolationError) as exc:
            config_from_dict({
                "unknown_key": 1,
                "cover_gan": {"block_size": -3, "bogus": 2},
                "root_seed": "zero",
            })
        text = str(exc.value)
        assert "unknown_key" in text
        assert "block_size" in text
        assert "bogus" in text
        assert "root_seed" in text

    def test_bad_mode_rejected(self):
        with pytest.raises(SchemaViolationError):
            config_from_dict({"cover_gan": {"mode": "analog"}})


class TestSeedDerivation:
    def test_deterministic_and_distinct(self):
        assert derive_seed(0, "cover_gan") == derive_seed(0, "cover_gan")
        names = ["cover_gan", "message_gan", "classifier", "evaluation"]
        seeds = {derive_seed(0, n) for n in names}
        assert len(seeds) == len(names)

    def test_root_seed_shifts_all(self):
        assert derive_seed(1, "cover_gan") != derive_seed(0, "cover_gan")
