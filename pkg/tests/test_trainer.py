import numpy as np
import pytest

from conftest import tiny_config
from gmvae_osr.data import SyntheticSpec, gen_synthetic, single_class
from gmvae_osr.errors import ContractError, DivergenceError
from gmvae_osr.model import ModelConfig, init_params
from gmvae_osr.tensor import Tensor
from gmvae_osr.trainer import (HISTORY_COLUMNS, AdamState, TrainConfig, adam_step, fit,
                               history_csv, validation_loss, write_history)


def tiny_data(rng, n=24):
    x = (rng.random((n, 6)) < 0.4).astype(float)
    return x, rng.integers(1, 3, size=n)


class TestAdam:
    def test_zero_gradients(self):
        p = Tensor([1.0, -2.0], requires_grad=True)
        state = AdamState.for_params([p], lr=0.1)
        adam_step(state, [p], [np.zeros(2)])
        assert p.data.tolist() == [1.0, -2.0] and state.step == 1

    def test_first_step_is_signed_lr(self):
        p = Tensor([0.0, 0.0, 0.0], requires_grad=True)
        state = AdamState.for_params([p], lr=0.01)
        adam_step(state, [p], [np.array([3.0, -0.2, 1e-3])])
        np.testing.assert_allclose(p.data, [-0.01, 0.01, -0.01], rtol=1e-4)

    def test_minimises_square(self):
        p = Tensor([5.0], requires_grad=True)
        state = AdamState.for_params([p], lr=0.1)
        for step in range(500):
            adam_step(state, [p], [2 * p.data])
            if abs(p.data[0]) < 0.1:
                break
        assert abs(p.data[0]) < 0.1

    def test_missing_gradient(self):
        p = Tensor([1.0], requires_grad=True)
        with pytest.raises(ContractError):
            adam_step(AdamState.for_params([p]), [p])


class TestFit:
    def test_zero_patience_runs_one_epoch(self, rng):
        data = tiny_data(rng)
        result = fit(init_params(tiny_config(), 0), data, data, TrainConfig(patience=0, max_epochs=50))
        assert len(result.history) == 1 and result.best_epoch == 1

    def test_same_seed_same_history(self, rng):
        data = tiny_data(rng)
        cfg = TrainConfig(max_epochs=5, batch_size=8, seed=7)
        a = fit(init_params(tiny_config(), 1), data, data, cfg)
        b = fit(init_params(tiny_config(), 1), data, data, cfg)
        assert history_csv(a.history) == history_csv(b.history)
        assert all(np.array_equal(a.params.arrays()[k], v) for k, v in b.params.arrays().items())

    def test_restores_best_epoch(self, rng):
        data = tiny_data(rng)
        cfg = TrainConfig(max_epochs=8, batch_size=8, patience=100)
        result = fit(init_params(tiny_config(), 2), data, data, cfg)
        vals = [h["val_loss"] for h in result.history]
        assert result.best_epoch == int(np.argmin(vals)) + 1
        assert validation_loss(result.params, *data, cfg) == pytest.approx(min(vals), abs=1e-12)

    def test_freeze_keeps_network_fixed(self, rng):
        data = tiny_data(rng)
        params = init_params(tiny_config(), 0)
        before = {k: v for k, v in params.arrays().items() if k.startswith("theta.")}
        fit(params, data, data, TrainConfig(max_epochs=2, freeze=("theta",)))
        after = params.arrays()
        assert all(np.array_equal(after[k], v) for k, v in before.items())
        assert not np.array_equal(after["phi_z.trunk.0.weight"],
                                  init_params(tiny_config(), 0).arrays()["phi_z.trunk.0.weight"])

    def test_bad_inputs(self, rng):
        x, y = tiny_data(rng)
        params = init_params(tiny_config(), 0)
        with pytest.raises(ContractError):
            fit(params, (x[:0], y[:0]), (x, y), TrainConfig())
        with pytest.raises(ContractError):
            fit(params, (x, y + 5), (x, y), TrainConfig())
        with pytest.raises(ContractError):
            fit(params, (x, y[:-1]), (x, y), TrainConfig())
        with pytest.raises(ContractError):
            TrainConfig(objective="elbo")
        with pytest.raises(ContractError):
            TrainConfig(freeze=("encoder",))

    def test_divergence(self, rng):
        x, y = tiny_data(rng)
        params = init_params(tiny_config(), 0)
        params.theta.heads[0][-1].bias.data[:] = np.nan
        with pytest.raises(DivergenceError):
            fit(params, (x, y), (x, y), TrainConfig(max_epochs=1))

    def test_history_csv(self, rng, tmp_path):
        data = tiny_data(rng)
        result = fit(init_params(tiny_config(), 0), data, data, TrainConfig(max_epochs=3, patience=10))
        path = write_history(result.history, tmp_path / "h.csv")
        lines = path.read_text().splitlines()
        assert lines[0].split(",") == list(HISTORY_COLUMNS)
        assert len(lines) == 4
        assert float(lines[1].split(",")[1]) == result.history[0]["train_loss"]

    def test_more_subclusters_cover_two_blobs_better(self):
        split = gen_synthetic(SyntheticSpec(classes=1, subclusters=2, unknown=0, dim=24,
                                            separation=30.0, samples=200, val_samples=50, seed=0))
        x, y = single_class(split, 1)
        cfg = TrainConfig(max_epochs=60, patience=60, lr=3e-3, seed=0)
        covering = {}
        for K in (1, 2):
            params = init_params(ModelConfig(1, (K,), 24, 2, 2), seed=0)
            covering[K] = fit(params, (x, y), (split.val_x, split.val_y), cfg).history[-1]["latent_covering"]
        assert covering[2] < covering[1]


@pytest.mark.slow
def test_block_smoothed_training_loss_decreases():
    decreasing = 0
    for seed in range(10):
        split = gen_synthetic(SyntheticSpec(seed=seed))
        known = split.val_y <= split.num_classes
        params = init_params(ModelConfig(2, (2, 2), 48, 4, 2), seed)
        result = fit(params, (split.train_x, split.train_y), (split.val_x[known], split.val_y[known]),
                     TrainConfig(lr=3e-3, patience=15, max_epochs=300, seed=seed))
        loss = np.array([h["train_loss"] for h in result.history])
        blocks = loss[: len(loss) // 10 * 10].reshape(-1, 10).mean(axis=1)
        decreasing += bool(np.all(np.diff(blocks) <= 0))
    assert decreasing >= 9
