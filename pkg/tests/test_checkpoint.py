import struct

import numpy as np
import pytest

from ecrflab.checkpoint import (
    MAGIC,
    load_model,
    read_checkpoint,
    save_model,
    write_checkpoint,
)
from ecrflab.ecrf import EcrfParams
from ecrflab.errors import DataFormatError
from ecrflab.toynet import NetConfig, ToyNet


def sample_tensors(seed=0):
    rng = np.random.default_rng(seed)
    return {
        "alpha": rng.normal(size=(3, 4)).astype(np.float32),
        "beta": rng.normal(size=7).astype(np.float32),
        "gamma": np.array([2.5], dtype=np.float32),
    }


class TestRawFormat:
    def test_round_trip_bit_exact(self, tmp_path):
        path = tmp_path / "m.ckpt"
        tensors = sample_tensors()
        config = {"mode": "baseline", "iters": "600"}
        write_checkpoint(path, tensors, config)
        loaded, cfg = read_checkpoint(path)
        assert cfg == config
        assert set(loaded) == set(tensors)
        for name in tensors:
            assert loaded[name].tobytes() == np.asarray(tensors[name], dtype="<f4").tobytes()
            assert loaded[name].shape == np.asarray(tensors[name]).shape

    def test_identical_state_identical_bytes(self, tmp_path):
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        write_checkpoint(a, sample_tensors(), {"k": "v"})
        write_checkpoint(b, sample_tensors(), {"k": "v"})
        assert a.read_bytes() == b.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOPE!" + b"\x00" * 32)
        with pytest.raises(DataFormatError, match="magic"):
            read_checkpoint(path)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "v.ckpt"
        write_checkpoint(path, sample_tensors(), {})
        blob = bytearray(path.read_bytes())
        blob[len(MAGIC) : len(MAGIC) + 4] = struct.pack("<I", 99)
        path.write_bytes(bytes(blob))
        with pytest.raises(DataFormatError, match="version"):
            read_checkpoint(path)

    def test_crc_mismatch(self, tmp_path):
        path = tmp_path / "c.ckpt"
        write_checkpoint(path, sample_tensors(), {})
        blob = bytearray(path.read_bytes())
        blob[-6] ^= 0xFF  # flip a payload byte, leave the stored crc alone
        path.write_bytes(bytes(blob))
        with pytest.raises(DataFormatError, match="checksum"):
            read_checkpoint(path)

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "t.ckpt"
        write_checkpoint(path, sample_tensors(), {})
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(DataFormatError):
            read_checkpoint(path)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "e.ckpt"
        path.write_bytes(b"")
        with pytest.raises(DataFormatError):
            read_checkpoint(path)


class TestModelRoundTrip:
    def test_net_only(self, tmp_path):
        rng = np.random.default_rng(0)
        net = ToyNet.initialize(NetConfig(num_classes=5), rng)
        path = tmp_path / "net.ckpt"
        save_model(path, net, extra_config={"mode": "baseline"})
        loaded, ecrf_params, config = load_model(path)
        assert ecrf_params is None
        assert config["mode"] == "baseline"
        assert loaded.config.layers == net.config.layers
        assert loaded.config.num_classes == 5
        np.testing.assert_array_equal(
            loaded.classifier, net.classifier.astype(np.float32).astype(np.float64)
        )
        for a, b in zip(loaded.conv, net.conv):
            np.testing.assert_array_equal(a.weight, b.weight.astype(np.float32).astype(np.float64))
            assert a.stride == b.stride

    def test_with_ecrf_params(self, tmp_path):
        rng = np.random.default_rng(1)
        net = ToyNet.initialize(NetConfig(num_classes=4), rng)
        params = EcrfParams.initialize(
            net.config.feature_channels,
            rng=rng,
            window_radius=2,
            embed_scale=1.0,
            input_smoothing=3,
        )
        params.use_superpixel = False
        path = tmp_path / "ecrf.ckpt"
        save_model(path, net, ecrf_params=params)
        _, loaded, config = load_model(path)
        assert loaded is not None
        assert loaded.window_radius == 2
        assert loaded.pos_dim == params.pos_dim
        assert loaded.input_smoothing == 3
        assert loaded.use_pairwise and not loaded.use_superpixel
        np.testing.assert_array_equal(
            loaded.embed_w, params.embed_w.astype(np.float32).astype(np.float64)
        )
        np.testing.assert_array_equal(
            loaded.compat_b, params.compat_b.astype(np.float32).astype(np.float64)
        )

    def test_unlimited_window_round_trips_as_none(self, tmp_path):
        rng = np.random.default_rng(2)
        net = ToyNet.initialize(NetConfig(num_classes=3), rng)
        params = EcrfParams.initialize(net.config.feature_channels, rng=rng, window_radius=None)
        path = tmp_path / "w.ckpt"
        save_model(path, net, ecrf_params=params)
        _, loaded, _ = load_model(path)
        assert loaded.window_radius is None
