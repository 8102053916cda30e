"""Window predictor network and the pluggable training scenarios.

The prediction task: from a window of the last k values predict the next
one, mean squared error loss. Training runs on values normalized by the
network's offset and scale; fit_mse is reported in original units.
"""

import logging
from abc import abstractmethod
from dataclasses import dataclass
from typing import Any, Mapping

import numpy as np

from .errors import InvalidParams
from .processors import Processor, Tree
from .seeding import standard_normals

logger = logging.getLogger(__name__)

SCENARIOS = (
    "standard",
    "linear_least_square",
    "second_order",
    "adaptive_step",
    "appropriate_weights",
    "rescaling",
)
EXTENDED_SCENARIOS = (*SCENARIOS, "sbllm")


class Network:
    """N-1 tanh hidden layers of width k, then a linear readout with bias.

    Flat weight layout: per hidden layer W (k x k, row-major) then b (k),
    then the readout w (k) and its bias.
    """

    def __init__(self, inputs: int, layers: int = 1):
        if inputs < 1 or layers < 1:
            raise InvalidParams(f"network needs inputs >= 1 and layers >= 1, got {inputs}, {layers}")
        self.inputs = inputs
        self.layers = layers

    @property
    def hidden_layers(self) -> int:
        return self.layers - 1

    @property
    def size(self) -> int:
        k = self.inputs
        return self.hidden_layers * (k * k + k) + k + 1

    @property
    def readout_start(self) -> int:
        return self.size - self.inputs - 1

    def initial_weights(self, seed: int) -> np.ndarray:
        """Seeded hidden layers, zero readout."""
        k = self.inputs
        weights = np.zeros(self.size)
        normals = standard_normals(seed, self.hidden_layers * k * k)
        for layer in range(self.hidden_layers):
            start = layer * (k * k + k)
            weights[start:start + k * k] = normals[layer * k * k:(layer + 1) * k * k] / np.sqrt(k)
        return weights

    def unpack(self, weights: np.ndarray) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray, float]:
        k = self.inputs
        if len(weights) != self.size:
            raise InvalidParams(f"expected {self.size} weights, got {len(weights)}")
        hidden = []
        for layer in range(self.hidden_layers):
            start = layer * (k * k + k)
            hidden.append((weights[start:start + k * k].reshape(k, k),
                           weights[start + k * k:start + k * k + k]))
        readout = weights[self.readout_start:self.readout_start + k]
        return hidden, readout, float(weights[-1])

    def pack(self, hidden: list[tuple[np.ndarray, np.ndarray]], readout: np.ndarray,
             bias: float) -> np.ndarray:
        parts = [array.ravel() for layer in hidden for array in layer]
        return np.concatenate([*parts, np.asarray(readout, dtype=np.float64), [bias]])

    def activations(self, weights: np.ndarray, X: np.ndarray) -> list[np.ndarray]:
        """Inputs followed by each hidden layer's output."""
        hidden, _, _ = self.unpack(weights)
        outputs = [X]
        for W, b in hidden:
            outputs.append(np.tanh(outputs[-1] @ W + b))
        return outputs

    def features(self, weights: np.ndarray, X: np.ndarray) -> np.ndarray:
        return self.activations(weights, X)[-1]

    def predict(self, weights: np.ndarray, X: np.ndarray) -> np.ndarray:
        _, readout, bias = self.unpack(weights)
        return self.features(weights, X) @ readout + bias

    def loss(self, weights: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
        residual = self.predict(weights, X) - y
        return float(np.mean(residual * residual))

    def loss_and_gradient(self, weights: np.ndarray, X: np.ndarray,
                          y: np.ndarray) -> tuple[float, np.ndarray]:
        hidden, readout, bias = self.unpack(weights)
        outputs = self.activations(weights, X)
        residual = outputs[-1] @ readout + bias - y
        n = len(y)
        d_out = 2.0 * residual / n

        grad_readout = outputs[-1].T @ d_out
        grad_bias = float(np.sum(d_out))
        d_h = np.outer(d_out, readout)
        grads = []
        for layer in range(self.hidden_layers - 1, -1, -1):
            W, _ = hidden[layer]
            d_z = d_h * (1.0 - outputs[layer + 1] ** 2)
            grads.append((outputs[layer].T @ d_z, d_z.sum(axis=0)))
            d_h = d_z @ W.T
        grads.reverse()
        return float(np.mean(residual * residual)), self.pack(grads, grad_readout, grad_bias)

    def with_readout(self, weights: np.ndarray, theta: np.ndarray) -> np.ndarray:
        out = weights.copy()
        out[self.readout_start:] = theta
        return out


def design(features: np.ndarray) -> np.ndarray:
    return np.column_stack([features, np.ones(len(features))])


def smoothness(A: np.ndarray) -> float:
    """Largest Hessian eigenvalue of the mean squared loss over design A."""
    n = len(A)
    return float(2.0 / n * np.linalg.eigvalsh(A.T @ A)[-1])


@dataclass(frozen=True)
class TrainingOptions:
    learning_rate: float = 1.0
    max_iterations: int = 2000
    tolerance: float = 1e-10

    @classmethod
    def from_params(cls, params: Mapping[str, Any]) -> "TrainingOptions":
        options = cls(float(params["learning_rate"]), int(params["max_iterations"]),
                      float(params["tolerance"]))
        if options.learning_rate <= 0 or options.max_iterations < 1 or options.tolerance < 0:
            raise InvalidParams(f"bad training options {options}")
        return options


@dataclass
class TrainingOutcome:
    weights: np.ndarray
    iterations: int
    loss: float
    converged: bool


def settled(loss: float, new: float, tolerance: float) -> bool:
    return abs(loss - new) <= tolerance * max(1.0, abs(loss))


def gradient_descent(network: Network, weights: np.ndarray, X: np.ndarray, y: np.ndarray,
                     rate: float, options: TrainingOptions) -> TrainingOutcome:
    loss, grad = network.loss_and_gradient(weights, X, y)
    for iteration in range(1, options.max_iterations + 1):
        weights = weights - rate * grad
        new, grad = network.loss_and_gradient(weights, X, y)
        if settled(loss, new, options.tolerance):
            return TrainingOutcome(weights, iteration, new, True)
        loss = new
    return TrainingOutcome(weights, options.max_iterations, loss, False)


def readout_least_squares(network: Network, weights: np.ndarray, X: np.ndarray,
                          y: np.ndarray) -> np.ndarray:
    A = design(network.features(weights, X))
    theta = np.linalg.lstsq(A, y, rcond=None)[0]
    return network.with_readout(weights, theta)


# -- processors ----------------------------------------------------------------

class SlidingWindowProcessor(Processor):
    """Turns a value stream into (window -> next value) samples."""
    name = "sliding_window"
    parameters = {"window": 5}

    def process(self, trees, params, seed):
        k = int(params["window"])
        if k < 1:
            raise InvalidParams(f"window must be >= 1, got {k}")
        values = [float(tree["value"]) for tree in trees]
        return [
            {"inputs": values[i - k:i], "t": trees[i].get("t", i), "target": values[i]}
            for i in range(k, len(values))
        ]


class NetworkProcessor(Processor):
    """Emits the network topology, its initial weights and the normalization.

    `layers` > 1 builds the stacked variant.
    """
    name = "one_layer_nn"
    parameters = {"inputs": 5, "layers": 1}

    def process(self, trees, params, seed):
        network = Network(int(params["inputs"]), int(params["layers"]))
        values = np.array([float(tree["value"]) for tree in trees])
        offset = float(np.mean(values)) if len(values) else 0.0
        scale = float(np.std(values)) if len(values) else 1.0
        if not np.isfinite(scale) or scale == 0.0:
            scale = 1.0
        return [{
            "offset": offset,
            "scale": scale,
            "topology": {"inputs": network.inputs, "layers": network.layers},
            "weights": [float(w) for w in network.initial_weights(seed)],
        }]


class TrainerProcessor(Processor):
    """Trains the upstream network on the upstream window samples."""
    arity = 2
    parameters = {"learning_rate": 1.0, "max_iterations": 2000, "tolerance": 1e-10}

    def process(self, trees, params, seed):
        networks = [tree for tree in trees if "topology" in tree]
        samples = [tree for tree in trees if "inputs" in tree]
        if len(networks) != 1:
            raise InvalidParams(f"{self.name} needs exactly one network, got {len(networks)}")
        initial = networks[0]
        network = Network(int(initial["topology"]["inputs"]), int(initial["topology"]["layers"]))
        if not samples:
            raise InvalidParams(f"{self.name} got no training samples")
        offset, scale = float(initial["offset"]), float(initial["scale"])

        X = (np.array([sample["inputs"] for sample in samples], dtype=np.float64) - offset) / scale
        y = (np.array([sample["target"] for sample in samples], dtype=np.float64) - offset) / scale
        if X.shape[1] != network.inputs:
            raise InvalidParams(f"samples have {X.shape[1]} inputs, network expects {network.inputs}")

        options = TrainingOptions.from_params(params)
        outcome = self.fit(network, np.array(initial["weights"], dtype=np.float64), X, y, options)
        fit_mse = network.loss(outcome.weights, X, y) * scale * scale
        logger.debug("%s: %d iterations, fit_mse %g", self.name, outcome.iterations, fit_mse)
        return [{
            "converged": outcome.converged,
            "fit_mse": fit_mse,
            "layers": network.layers,
            "learning_time_iterations": outcome.iterations,
            "samples": len(samples),
            "scenario": self.name,
            "weights": [float(w) for w in outcome.weights],
        }]

    @abstractmethod
    def fit(self, network: Network, weights: np.ndarray, X: np.ndarray, y: np.ndarray,
            options: TrainingOptions) -> TrainingOutcome:
        """Train from the initial weights on normalized samples."""


class StandardTrainer(TrainerProcessor):
    """Fixed-rate gradient descent, rate = learning_rate / L."""
    name = "standard"

    def fit(self, network, weights, X, y, options):
        rate = options.learning_rate / smoothness(design(network.features(weights, X)))
        return gradient_descent(network, weights, X, y, rate, options)


class LinearLeastSquareTrainer(TrainerProcessor):
    """Closed-form readout over the (fixed) hidden features."""
    name = "linear_least_square"

    def fit(self, network, weights, X, y, options):
        weights = readout_least_squares(network, weights, X, y)
        return TrainingOutcome(weights, 1, network.loss(weights, X, y), True)


class SecondOrderTrainer(TrainerProcessor):
    """Damped Newton steps on the readout."""
    name = "second_order"
    damping = 1e-12

    def fit(self, network, weights, X, y, options):
        A = design(network.features(weights, X))
        n = len(y)
        hessian = 2.0 / n * (A.T @ A)
        hessian += self.damping * max(1.0, float(np.trace(hessian))) * np.eye(len(hessian))
        theta = weights[network.readout_start:].copy()
        loss = network.loss(weights, X, y)
        for iteration in range(1, options.max_iterations + 1):
            grad = 2.0 / n * (A.T @ (A @ theta - y))
            theta = theta - np.linalg.lstsq(hessian, grad, rcond=None)[0]
            weights = network.with_readout(weights, theta)
            new = network.loss(weights, X, y)
            if settled(loss, new, options.tolerance):
                return TrainingOutcome(weights, iteration, new, True)
            loss = new
        return TrainingOutcome(weights, options.max_iterations, loss, False)


class AdaptiveStepTrainer(TrainerProcessor):
    """Gradient descent with backtracking line search and step growth."""
    name = "adaptive_step"
    armijo = 1e-4
    max_halvings = 60

    def fit(self, network, weights, X, y, options):
        step = options.learning_rate / smoothness(design(network.features(weights, X)))
        loss, grad = network.loss_and_gradient(weights, X, y)
        for iteration in range(1, options.max_iterations + 1):
            norm = float(grad @ grad)
            if norm == 0.0:
                return TrainingOutcome(weights, iteration, loss, True)
            for _ in range(self.max_halvings):
                candidate = weights - step * grad
                if network.loss(candidate, X, y) <= loss - self.armijo * step * norm:
                    break
                step *= 0.5
            weights = candidate
            new, grad = network.loss_and_gradient(weights, X, y)
            if settled(loss, new, options.tolerance):
                return TrainingOutcome(weights, iteration, new, True)
            loss = new
            step *= 2.0
        return TrainingOutcome(weights, options.max_iterations, loss, False)


class AppropriateWeightsTrainer(TrainerProcessor):
    """Readout initialized by least squares on the first quarter, then gradient descent."""
    name = "appropriate_weights"

    def fit(self, network, weights, X, y, options):
        head = min(len(y), max(network.inputs + 1, len(y) // 4))
        weights = readout_least_squares(network, weights, X[:head], y[:head])
        rate = options.learning_rate / smoothness(design(network.features(weights, X)))
        return gradient_descent(network, weights, X, y, rate, options)


class RescalingTrainer(TrainerProcessor):
    """Gradient descent on standardized inputs, folded back into the first affine layer."""
    name = "rescaling"

    def fit(self, network, weights, X, y, options):
        mean = X.mean(axis=0)
        std = X.std(axis=0)
        std[std == 0.0] = 1.0
        Xs = (X - mean) / std

        scaled = self._fold(network, weights, mean, std, inverse=True)
        rate = options.learning_rate / smoothness(design(network.features(scaled, Xs)))
        outcome = gradient_descent(network, scaled, Xs, y, rate, options)
        outcome.weights = self._fold(network, outcome.weights, mean, std, inverse=False)
        return outcome

    @staticmethod
    def _fold(network: Network, weights: np.ndarray, mean: np.ndarray, std: np.ndarray,
              inverse: bool) -> np.ndarray:
        """Map weights between raw-input and standardized-input coordinates."""
        hidden, readout, bias = network.unpack(weights)
        if hidden:
            W, b = hidden[0]
            if inverse:
                hidden[0] = (W * std[:, None], b + mean @ W)
            else:
                hidden[0] = (W / std[:, None], b - (mean / std) @ W)
        elif inverse:
            readout, bias = readout * std, bias + float(mean @ readout)
        else:
            readout, bias = readout / std, bias - float((mean / std) @ readout)
        return network.pack(hidden, readout, bias)


class SbllmTrainer(TrainerProcessor):
    """Layer-wise least squares, alternating over the layers.

    Each sweep refits the readout, then each hidden layer (top down) toward
    the pre-activations that would move its output along the residual.
    Layer updates are kept only when they lower the loss.
    """
    name = "sbllm"
    clip = 0.999

    def fit(self, network, weights, X, y, options):
        weights = readout_least_squares(network, weights, X, y)
        loss = network.loss(weights, X, y)
        if not network.hidden_layers:
            return TrainingOutcome(weights, 1, loss, True)

        for iteration in range(1, options.max_iterations + 1):
            start = loss
            for layer in range(network.hidden_layers - 1, -1, -1):
                candidate = readout_least_squares(network, self._refit_layer(network, weights, X, y, layer), X, y)
                new = network.loss(candidate, X, y)
                if new < loss:
                    weights, loss = candidate, new
            if settled(start, loss, options.tolerance):
                return TrainingOutcome(weights, iteration, loss, True)
        return TrainingOutcome(weights, options.max_iterations, loss, False)

    def _refit_layer(self, network: Network, weights: np.ndarray, X: np.ndarray, y: np.ndarray,
                     layer: int) -> np.ndarray:
        hidden, readout, bias = network.unpack(weights)
        outputs = network.activations(weights, X)
        residual = outputs[-1] @ readout + bias - y

        norm = float(readout @ readout)
        if norm == 0.0:
            return weights
        desired = -np.outer(residual, readout) / norm
        for upper in range(network.hidden_layers - 1, layer, -1):
            W, _ = hidden[upper]
            d_z = desired * (1.0 - outputs[upper + 1] ** 2)
            desired = d_z @ np.linalg.pinv(W)

        target = np.arctanh(np.clip(outputs[layer + 1] + desired, -self.clip, self.clip))
        solution = np.linalg.lstsq(design(outputs[layer]), target, rcond=None)[0]
        hidden = list(hidden)
        hidden[layer] = (solution[:-1], solution[-1])
        return network.pack(hidden, readout, bias)


TRAINERS: dict[str, type[TrainerProcessor]] = {
    cls.name: cls
    for cls in (StandardTrainer, LinearLeastSquareTrainer, SecondOrderTrainer, AdaptiveStepTrainer,
                AppropriateWeightsTrainer, RescalingTrainer, SbllmTrainer)
}

SHOWCASE_PROCESSORS: tuple[type[Processor], ...] = (
    SlidingWindowProcessor,
    NetworkProcessor,
    *TRAINERS.values(),
)
