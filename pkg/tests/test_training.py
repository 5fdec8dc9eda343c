import math

import numpy as np
import pytest

from imlspike.data import gen_synthetic
from imlspike.errors import PreconditionError, TrainingDivergedError
from imlspike.model import Model, ModelConfig
from imlspike.training import evaluate, train, write_history_csv

SMALL = dict(num_layers=1, D=16, H=4, D_ff=32, num_classes=4, C_in=16)


def small_run(seed=0, lr=3e-3, mode="imls", epochs=2):
    model = Model.init(ModelConfig(neuron_mode=mode, **SMALL), seed=seed)
    return train(model, gen_synthetic(6, seed=1), gen_synthetic(3, seed=2), epochs, seed=seed, lr=lr,
                 batch_size=8)


class TestTrain:
    def test_seed_determinism(self):
        _, a = small_run()
        _, b = small_run()
        assert [(m.loss, m.test_acc, m.firing_rates) for m in a] == \
               [(m.loss, m.test_acc, m.firing_rates) for m in b]

    def test_zero_learning_rate_keeps_parameters(self):
        model = Model.init(ModelConfig(**SMALL), seed=0)
        before = {k: p.data.copy() for k, p in model.params.items()}
        train(model, gen_synthetic(4, seed=1), [], 2, lr=0.0, batch_size=8)
        for k, p in model.params.items():
            np.testing.assert_array_equal(p.data, before[k])

    def test_zero_learning_rate_fixed_threshold_accuracy_unchanged(self):
        _, hist = small_run(lr=0.0, mode="mls", epochs=3)
        assert len({m.test_acc for m in hist}) == 1

    def test_history_records_rates(self, tmp_path):
        model, hist = small_run()
        assert [m.epoch for m in hist] == [1, 2]
        assert set(hist[0].firing_rates) == set(model.neurons)
        write_history_csv(hist, tmp_path / "h.csv")
        header = (tmp_path / "h.csv").read_text().splitlines()[0].split(",")
        assert header[:4] == ["epoch", "loss", "train_acc", "test_acc"]
        assert "rate:blocks.0.entry" in header

    def test_model_left_in_eval_mode(self):
        model, _ = small_run(epochs=1)
        assert not model.training

    def test_empty_training_set(self):
        with pytest.raises(PreconditionError):
            train(Model.init(ModelConfig(**SMALL)), [], [], 1)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_aborts(self):
        model = Model.init(ModelConfig(**SMALL), seed=0)
        data = gen_synthetic(2, seed=1)
        model.params["head.b"].data[:] = math.inf
        with pytest.raises(TrainingDivergedError):
            train(model, data, [], 1)


def test_evaluate_reports_silent_channels():
    model = Model.init(ModelConfig(**SMALL), seed=0)
    res = evaluate(model, gen_synthetic(2, seed=3))
    assert 0.0 <= res.accuracy <= 1.0
    assert set(res.silent_channels) == set(model.neurons)
    assert res.channel_rates["blocks.0.mlp.hidden"].shape == (32,)
