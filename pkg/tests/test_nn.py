"""Model construction, feature taps, and checkpoint round-trips."""

import struct

import numpy as np
import pytest

from blindspot import autodiff as ad
from blindspot import nn
from blindspot.errors import (
    BadMagicError,
    DimensionError,
    FileFormatError,
    TruncatedError,
    ValidationError,
    VersionMismatchError,
)


def small_model(seed=0, tap_post_relu=False):
    # Tiny stand-in for the default net so unit tests stay fast.
    return nn.build_small_cnn(
        input_shape=(1, 8, 8),
        conv_channels=(3,),
        fc_widths=(4,),
        num_classes=2,
        seed=seed,
        tap_post_relu=tap_post_relu,
    )


class TestBuild:
    def test_default_shapes(self):
        model = nn.build_small_cnn()
        x = np.zeros((1, 1, 28, 28))
        logits = nn.forward_logits(model, x)
        assert logits.shape == (1, 10)
        feats = nn.extract_features(model, x)
        assert feats.shape == (1, 1024)

    def test_parameter_count_closed_form(self):
        model = nn.build_small_cnn()
        # conv1 32*1*5*5+32, conv2 64*32*5*5+64, fc1 3136*1024+1024, head 1024*10+10
        expected = (32 * 25 + 32) + (64 * 32 * 25 + 64) + (3136 * 1024 + 1024) + (1024 * 10 + 10)
        assert model.parameter_count() == expected

    def test_small_config_shapes(self):
        model = small_model()
        logits = model.forward(np.zeros((5, 1, 8, 8)))
        assert logits.shape == (5, 2)
        feats = nn.extract_features(model, np.zeros((5, 1, 8, 8)))
        assert feats.shape == (5, 4)

    def test_seed_determinism(self):
        a, b = small_model(seed=7), small_model(seed=7)
        for (name, ta), (_, tb) in zip(a.parameters(), b.parameters()):
            np.testing.assert_array_equal(ta.data, tb.data)
        c = small_model(seed=8)
        assert any(
            not np.array_equal(ta.data, tc.data)
            for (_, ta), (_, tc) in zip(a.parameters(), c.parameters())
        )

    def test_truncated_normal_bounded(self):
        model = nn.build_small_cnn(seed=3)
        for name, tensor in model.parameters():
            if name.endswith(".bias"):
                np.testing.assert_array_equal(tensor.data, np.full(tensor.shape, 0.1))
            else:
                assert np.abs(tensor.data).max() <= 0.2 + 1e-15

    def test_rejects_bad_configs(self):
        with pytest.raises(ValidationError):
            nn.build_small_cnn(num_classes=1)
        with pytest.raises(ValidationError):
            nn.build_small_cnn(conv_channels=(0,))
        with pytest.raises(DimensionError):
            nn.build_small_cnn(input_shape=(1, 3, 3))  # pooled away to nothing

    def test_input_shape_enforced(self):
        model = small_model()
        with pytest.raises(DimensionError):
            model.forward(np.zeros((2, 1, 9, 9)))
        with pytest.raises(DimensionError):
            model.forward(np.zeros((1, 8, 8)))


class TestForward:
    def test_batch_independence(self):
        model = small_model(seed=1)
        rng = np.random.default_rng(0)
        batch = rng.uniform(-0.5, 0.5, size=(8, 1, 8, 8))
        full = model.forward(batch).data
        for i in range(8):
            single = model.forward(batch[i : i + 1]).data
            np.testing.assert_allclose(single[0], full[i], rtol=1e-12, atol=0)

    def test_tap_prefix_matches_full_forward(self):
        # Running to the tap, then resuming from it, must equal one pass.
        model = small_model(seed=2)
        rng = np.random.default_rng(1)
        batch = ad.Tensor(rng.uniform(-0.5, 0.5, size=(3, 1, 8, 8)))
        stop = model.feature_taps["fc1"] + 1
        head_in = model.run_layers(batch, 0, stop)
        resumed = model.run_layers(head_in, stop, len(model.layers))
        np.testing.assert_array_equal(resumed.data, model.forward(batch).data)

    def test_tap_post_relu_flag(self):
        pre = small_model(seed=4)
        post = small_model(seed=4, tap_post_relu=True)
        rng = np.random.default_rng(2)
        batch = rng.uniform(-0.5, 0.5, size=(4, 1, 8, 8))
        f_pre = nn.extract_features(pre, batch).data
        f_post = nn.extract_features(post, batch).data
        np.testing.assert_array_equal(f_post, np.maximum(f_pre, 0.0))
        assert (f_pre < 0).any()

    def test_unknown_tap_rejected(self):
        with pytest.raises(ValidationError):
            nn.extract_features(small_model(), np.zeros((1, 1, 8, 8)), tap="fc9")

    def test_batched_extraction_matches(self):
        model = small_model(seed=5)
        rng = np.random.default_rng(3)
        images = rng.uniform(-0.5, 0.5, size=(23, 1, 8, 8))
        whole = nn.extract_features(model, images).data
        chunked = nn.extract_features_batched(model, images, batch_size=7)
        np.testing.assert_allclose(chunked, whole, rtol=1e-12, atol=0)

    def test_gradients_flow_to_input(self):
        model = small_model(seed=6)
        x = ad.Tensor(np.full((2, 1, 8, 8), 0.25), requires_grad=True)
        with ad.Tape() as tape:
            logits = model.forward(x)
            loss = ad.softmax_cross_entropy(logits, np.array([0, 1]))
        ad.backward(loss, tape)
        assert x.grad is not None and np.isfinite(x.grad).all()

    def test_set_trainable_toggles_all(self):
        model = small_model()
        model.set_trainable(True)
        assert all(t.requires_grad for _, t in model.parameters())
        model.set_trainable(False)
        assert not any(t.requires_grad for _, t in model.parameters())


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        model = small_model(seed=9)
        model.metadata = {"training": "adversarial", "epsilon": 0.1, "epochs": 3}
        path = tmp_path / "model.ckpt"
        nn.save_checkpoint(model, path)
        loaded = nn.load_checkpoint(path)
        assert loaded.metadata == model.metadata
        assert loaded.arch == model.arch
        for (name, orig), (name2, back) in zip(model.parameters(), loaded.parameters()):
            assert name == name2
            assert orig.data.tobytes() == back.data.tobytes()

    def test_loaded_model_predicts_identically(self, tmp_path):
        model = nn.build_small_cnn(
            input_shape=(1, 8, 8), conv_channels=(2, 3), fc_widths=(5,), num_classes=4, seed=11
        )
        path = tmp_path / "m.ckpt"
        nn.save_checkpoint(model, path)
        loaded = nn.load_checkpoint(path)
        rng = np.random.default_rng(4)
        batch = rng.uniform(-0.5, 0.5, size=(6, 1, 8, 8))
        np.testing.assert_array_equal(loaded.forward(batch).data, model.forward(batch).data)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(BadMagicError):
            nn.load_checkpoint(path)

    def test_version_mismatch(self, tmp_path):
        model = small_model()
        path = tmp_path / "m.ckpt"
        nn.save_checkpoint(model, path)
        raw = bytearray(path.read_bytes())
        raw[4:8] = struct.pack("<I", 99)
        path.write_bytes(bytes(raw))
        with pytest.raises(VersionMismatchError):
            nn.load_checkpoint(path)

    def test_truncated_blob(self, tmp_path):
        model = small_model()
        path = tmp_path / "m.ckpt"
        nn.save_checkpoint(model, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with pytest.raises(TruncatedError):
            nn.load_checkpoint(path)

    def test_truncated_header(self, tmp_path):
        model = small_model()
        path = tmp_path / "m.ckpt"
        nn.save_checkpoint(model, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:20])
        with pytest.raises(TruncatedError):
            nn.load_checkpoint(path)

    def test_corrupt_header_json(self, tmp_path):
        path = tmp_path / "m.ckpt"
        header = b"{not json"
        path.write_bytes(b"BSLB" + struct.pack("<I", 1) + struct.pack("<Q", len(header)) + header)
        with pytest.raises(FileFormatError):
            nn.load_checkpoint(path)
