"""Tests for the window predictor network and its trainers."""

import numpy as np
import pytest

from fracti.errors import InvalidParams
from fracti.trainers import (
    EXTENDED_SCENARIOS,
    SCENARIOS,
    SHOWCASE_PROCESSORS,
    TRAINERS,
    Network,
    NetworkProcessor,
    RescalingTrainer,
    SlidingWindowProcessor,
    TrainerProcessor,
    settled,
)

PARAMS = {"learning_rate": 1.0, "max_iterations": 500, "tolerance": 1e-10}


def series(values):
    return [{"t": i * 1000, "value": float(v)} for i, v in enumerate(values)]


def train(scenario, values, window=3, layers=1, seed=4, params=PARAMS):
    trees = series(values)
    initial = NetworkProcessor().process(trees, {"inputs": window, "layers": layers}, seed)
    samples = SlidingWindowProcessor().process(trees, {"window": window}, 0)
    (result,) = TRAINERS[scenario]().process(initial + samples, params, 0)
    return result


class TestNetwork:
    """Tests for the network arithmetic."""

    @pytest.mark.parametrize("inputs,layers,size", [(5, 1, 6), (5, 2, 36), (2, 3, 15)])
    def test_size(self, inputs, layers, size):
        assert Network(inputs, layers).size == size

    def test_invalid_topology(self):
        with pytest.raises(InvalidParams):
            Network(0, 1)
        with pytest.raises(InvalidParams):
            Network(3, 0)

    def test_initial_readout_is_zero(self):
        network = Network(3, 2)
        weights = network.initial_weights(7)
        assert np.all(weights[network.readout_start:] == 0.0)
        assert np.array_equal(weights, network.initial_weights(7))
        assert not np.array_equal(weights, network.initial_weights(8))

    def test_pack_unpack(self):
        network = Network(3, 3)
        weights = np.arange(network.size, dtype=np.float64)
        assert np.array_equal(network.pack(*network.unpack(weights)), weights)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        network = Network(3, 3)
        weights = network.initial_weights(11)
        weights[network.readout_start:] = rng.normal(size=network.inputs + 1)
        X = rng.normal(size=(20, 3))
        y = rng.normal(size=20)
        _, grad = network.loss_and_gradient(weights, X, y)

        eps = 1e-6
        numeric = np.empty_like(weights)
        for i in range(len(weights)):
            step = np.zeros_like(weights)
            step[i] = eps
            numeric[i] = (network.loss(weights + step, X, y) - network.loss(weights - step, X, y)) / (2 * eps)
        assert np.allclose(grad, numeric, rtol=1e-5, atol=1e-8)

    def test_rescaling_fold_preserves_predictions(self):
        rng = np.random.default_rng(5)
        for layers in (1, 2):
            network = Network(3, layers)
            weights = network.initial_weights(2)
            weights[network.readout_start:] = rng.normal(size=4)
            X = rng.normal(loc=50.0, scale=4.0, size=(10, 3))
            mean, std = X.mean(axis=0), X.std(axis=0)
            scaled = RescalingTrainer._fold(network, weights, mean, std, inverse=True)
            assert np.allclose(network.predict(scaled, (X - mean) / std), network.predict(weights, X))
            back = RescalingTrainer._fold(network, scaled, mean, std, inverse=False)
            assert np.allclose(back, weights)


class TestProcessors:
    """Tests for the window, network and trainer processors."""

    def test_sliding_window(self):
        samples = SlidingWindowProcessor().process(series([1, 2, 3, 4]), {"window": 2}, 0)
        assert samples == [
            {"inputs": [1.0, 2.0], "t": 2000, "target": 3.0},
            {"inputs": [2.0, 3.0], "t": 3000, "target": 4.0},
        ]
        with pytest.raises(InvalidParams):
            SlidingWindowProcessor().process(series([1, 2]), {"window": 0}, 0)

    def test_network_normalization(self):
        (initial,) = NetworkProcessor().process(series([2, 4, 6]), {"inputs": 2, "layers": 1}, 0)
        assert initial["offset"] == 4.0
        assert initial["scale"] == pytest.approx(np.std([2, 4, 6]))
        assert initial["topology"] == {"inputs": 2, "layers": 1}
        (flat,) = NetworkProcessor().process(series([3, 3]), {"inputs": 2, "layers": 1}, 0)
        assert flat["scale"] == 1.0

    def test_stacked_network(self):
        (initial,) = NetworkProcessor().process(series(range(6)), {"inputs": 5, "layers": 2}, 3)
        assert initial["topology"] == {"inputs": 5, "layers": 2}
        assert len(initial["weights"]) == Network(5, 2).size
        result = train("standard", [2.0 * i for i in range(12)], layers=2)
        assert result["layers"] == 2

    def test_showcase_processors(self):
        names = {impl.name for impl in SHOWCASE_PROCESSORS}
        assert names == {"sliding_window", "one_layer_nn", *TRAINERS}

    def test_trainer_base_is_abstract(self):
        with pytest.raises(TypeError):
            TrainerProcessor()

    def test_trainer_needs_one_network(self):
        samples = SlidingWindowProcessor().process(series(range(10)), {"window": 3}, 0)
        with pytest.raises(InvalidParams):
            TRAINERS["standard"]().process(samples, PARAMS, 0)

    def test_trainer_needs_samples(self):
        initial = NetworkProcessor().process(series(range(3)), {"inputs": 3, "layers": 1}, 0)
        with pytest.raises(InvalidParams):
            TRAINERS["standard"]().process(initial, PARAMS, 0)

    def test_window_must_match_network(self):
        trees = series(range(10))
        initial = NetworkProcessor().process(trees, {"inputs": 4, "layers": 1}, 0)
        samples = SlidingWindowProcessor().process(trees, {"window": 3}, 0)
        with pytest.raises(InvalidParams):
            TRAINERS["standard"]().process(initial + samples, PARAMS, 0)

    def test_bad_options(self):
        with pytest.raises(InvalidParams):
            train("standard", range(10), params={**PARAMS, "learning_rate": 0.0})

    def test_settled_needs_a_small_change(self):
        assert settled(1.0, 1.0 - 1e-12, 1e-10)
        assert not settled(1.0, 1.5, 1e-10)
        assert not settled(1.0, 0.5, 1e-10)


class TestScenarios:
    """Comparisons across training scenarios."""

    def test_registry(self):
        assert set(TRAINERS) == set(EXTENDED_SCENARIOS)
        assert EXTENDED_SCENARIOS[:-1] == SCENARIOS
        assert all(TRAINERS[name].name == name for name in TRAINERS)

    def test_least_squares_is_optimal_on_a_ramp(self):
        ramp = [100.0 + 2.5 * i for i in range(40)]
        best = train("linear_least_square", ramp)
        assert best["fit_mse"] <= 1e-9
        assert best["learning_time_iterations"] == 1
        for scenario in EXTENDED_SCENARIOS:
            result = train(scenario, ramp)
            assert result["scenario"] == scenario
            assert result["fit_mse"] >= best["fit_mse"] - 1e-12

    @pytest.mark.parametrize("scenario", EXTENDED_SCENARIOS)
    def test_deterministic(self, scenario):
        values = [np.sin(i / 3.0) * 10 + i for i in range(30)]
        first = train(scenario, values, layers=2)
        second = train(scenario, values, layers=2)
        assert first == second
        assert first["layers"] == 2
        assert first["samples"] == 27
        assert 1 <= first["learning_time_iterations"] <= PARAMS["max_iterations"]
        assert np.isfinite(first["fit_mse"])

    @pytest.mark.parametrize("scenario", ["second_order", "adaptive_step", "sbllm"])
    def test_fast_scenarios_converge_on_a_ramp(self, scenario):
        result = train(scenario, [float(i) for i in range(40)])
        assert result["converged"] is True
