import struct

import numpy as np
import pytest

from imlspike import autodiff as ad
from imlspike.checks import check_model_fusion, random_eval_model
from imlspike.errors import CheckpointFormatError, DimensionError, PreconditionError, StateError
from imlspike.model import (
    Model,
    ModelConfig,
    attention_maps,
    block_forward,
    checkpoint_bytes,
    load_checkpoint,
    load_checkpoint_bytes,
    model_forward,
    reparameterize,
    save_checkpoint,
    spike_driven_forward,
)
from imlspike.numeric import Rng

SMALL = dict(num_layers=2, D=16, H=4, D_ff=32, num_classes=3, C_in=6)


def unit_model(value):
    cfg = ModelConfig(num_layers=1, D=1, H=1, D_ff=1, num_classes=1, C_in=1, neuron_mode="mls")
    model = Model.init(cfg, seed=0)
    for p in model.params.values():
        p.data[...] = value
    return model


def rel(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


class TestBlock:
    def test_hand_chain(self):
        # entry 2.5 -> 2 spikes, attention passes 2, MLP fires floor(4.5) clipped to 4
        out = block_forward(unit_model(1.0), ad.Tensor(np.array([[[2.5]]])), 0)
        assert out.data.item() == 8.5

    def test_zero_weights_are_identity(self):
        model = Model.init(ModelConfig(**SMALL), seed=1)
        for name, p in model.params.items():
            if name.startswith("blocks."):
                p.data[...] = 0.0
        X = np.random.default_rng(0).normal(size=(2, 5, 16))
        np.testing.assert_array_equal(block_forward(model, ad.Tensor(X), 0).data, X)

    def test_zero_features_give_head_bias(self):
        model = Model.init(ModelConfig(**SMALL), seed=2)
        model.params["head.b"].data[:] = [0.5, -1.0, 2.0]
        np.testing.assert_allclose(model(np.zeros((7, 6))).data, [0.5, -1.0, 2.0], atol=1e-15)

    @pytest.mark.parametrize("variant", ["hd_repssa_s", "hd_repssa_l", "repssa_s", "repssa_l", "sdsa3"])
    def test_variants_produce_finite_logits(self, variant):
        model = random_eval_model(Rng(0), variant)
        logits = model(np.random.default_rng(1).normal(size=(3, 9, 6))).data
        assert logits.shape == (3, 3)
        assert np.all(np.isfinite(logits))

    def test_invalid_config(self):
        with pytest.raises(PreconditionError):
            ModelConfig(variant="rwkv")
        with pytest.raises(DimensionError):
            ModelConfig(D=10, H=4)

    def test_bad_feature_width(self):
        with pytest.raises(DimensionError):
            Model.init(ModelConfig(**SMALL))(np.zeros((4, 5)))


class TestPadding:
    @pytest.mark.parametrize("variant", ["hd_repssa_s", "hd_repssa_l", "sdsa3"])
    def test_padding_invariance(self, variant):
        model = random_eval_model(Rng(1), variant)
        rng = np.random.default_rng(2)
        short, long = rng.normal(size=(5, 6)), rng.normal(size=(11, 6))
        batch = np.zeros((2, 11, 6))
        batch[0, :5], batch[1] = short, long
        batch[0, 5:] = 50.0  # junk in padded frames must not matter
        got = model(batch, [5, 11]).data
        assert rel(got[0], model(short).data) <= 1e-5
        assert rel(got[1], model(long).data) <= 1e-5

    def test_attention_rows_sum_to_one(self):
        model = random_eval_model(Rng(2))
        maps = attention_maps(model, np.random.default_rng(0).normal(size=(8, 6)), 1)
        assert maps.shape == (1, 4, 8, 8)
        np.testing.assert_allclose(maps.sum(axis=-1), 1.0, atol=1e-12)


class TestReparameterize:
    @pytest.mark.parametrize("variant", ["hd_repssa_s", "hd_repssa_l", "repssa_s"])
    def test_logits_preserved(self, variant):
        res = check_model_fusion(seed=0, trials=20, variant=variant)
        assert res.ok, res.failures[:5]

    def test_double_fusion_rejected(self):
        fused = reparameterize(random_eval_model(Rng(0)))
        with pytest.raises(StateError):
            reparameterize(fused)

    def test_fused_model_cannot_train(self):
        with pytest.raises(StateError):
            reparameterize(random_eval_model(Rng(0))).train()

    def test_statistics_frozen(self):
        fused = reparameterize(random_eval_model(Rng(0)))
        assert all(n.state.frozen for n in fused.neurons.values())

    def test_original_left_untouched(self):
        model = random_eval_model(Rng(0))
        reparameterize(model)
        assert not model.is_fused
        assert "blocks.0.attn.W_Q" in model.params

    def test_parameter_count(self):
        model = random_eval_model(Rng(0))
        fused = reparameterize(model)
        D, H, L = 16, 4, 2
        assert model.parameter_count() - fused.parameter_count() == L * (2 * D * D - H * D * D)


class TestSpikeDriven:
    @pytest.mark.parametrize("variant", ["hd_repssa_s", "hd_repssa_l", "sdsa3"])
    def test_matches_dense(self, variant):
        model = random_eval_model(Rng(3), variant)
        fused = reparameterize(model)
        rng = np.random.default_rng(4)
        for _ in range(5):
            x = rng.normal(size=(int(rng.integers(1, 12)), 6))
            logits, _ = spike_driven_forward(fused, x)
            assert rel(logits, model(x).data) <= 1e-4

    def test_needs_fused_model(self):
        with pytest.raises(StateError):
            spike_driven_forward(random_eval_model(Rng(0)), np.zeros((3, 6)))

    def test_silent_input_has_no_events(self):
        fused = reparameterize(random_eval_model(Rng(0)))
        _, events = spike_driven_forward(fused, np.zeros((4, 6)))
        assert sum(events.values()) == 0

    def test_event_count_is_spikes_times_fan_out(self):
        fused = reparameterize(random_eval_model(Rng(5)))
        _, events = spike_driven_forward(fused, np.random.default_rng(0).normal(size=(6, 6)))
        levels = fused.neurons["blocks.0.mlp.hidden"].last_levels
        assert events["blocks.0.mlp.fc2"] == int(levels.sum()) * 16
        levels = fused.neurons["blocks.1.entry"].last_levels
        assert events["blocks.1.v_proj"] == int(levels.sum()) * 16


class TestCheckpoint:
    def test_round_trip_is_stable(self, tmp_path):
        model = random_eval_model(Rng(0))
        save_checkpoint(model, tmp_path / "a.ckpt")
        loaded = load_checkpoint(tmp_path / "a.ckpt")
        assert checkpoint_bytes(loaded) == (tmp_path / "a.ckpt").read_bytes()
        assert loaded.cfg == model.cfg
        x = np.random.default_rng(0).normal(size=(5, 6))
        again = load_checkpoint_bytes(checkpoint_bytes(loaded))
        np.testing.assert_array_equal(again(x).data, loaded(x).data)

    def test_weights_within_float32(self):
        model = random_eval_model(Rng(0))
        loaded = load_checkpoint_bytes(checkpoint_bytes(model))
        for name, p in model.params.items():
            np.testing.assert_allclose(loaded.params[name].data, p.data, rtol=1e-7)

    def test_fused_round_trip(self):
        fused = reparameterize(random_eval_model(Rng(0)))
        loaded = load_checkpoint_bytes(checkpoint_bytes(fused))
        assert loaded.is_fused
        assert all(n.state.frozen for n in loaded.neurons.values())
        np.testing.assert_allclose(loaded.fused[1].data, fused.fused[1].data, rtol=1e-6)

    def test_layout_header(self):
        buf = checkpoint_bytes(random_eval_model(Rng(0)))
        assert buf[:4] == b"IMLS"
        version, count = struct.unpack("<II", buf[4:12])
        (nlen,) = struct.unpack("<H", buf[12:14])
        assert version == 1
        assert buf[14:14 + nlen] == b"__config__"

    @pytest.mark.parametrize("mutate", [
        lambda b: b"XXXX" + b[4:],
        lambda b: b[:4] + struct.pack("<I", 2) + b[8:],
        lambda b: b[:-3],
        lambda b: b + b"\0",
        lambda b: b[:8] + struct.pack("<I", 0) + b[12:],
    ], ids=["magic", "version", "truncated", "trailing", "no-records"])
    def test_corruption_detected(self, mutate):
        buf = checkpoint_bytes(random_eval_model(Rng(0)))
        with pytest.raises(CheckpointFormatError):
            load_checkpoint_bytes(mutate(buf))

    def test_missing_parameter_record(self):
        model = random_eval_model(Rng(0))
        del model.params["head.b"]
        with pytest.raises(CheckpointFormatError):
            load_checkpoint_bytes(checkpoint_bytes(model))
