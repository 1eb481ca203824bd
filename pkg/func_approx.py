"""Regression backend shared by the preprocessor, environments, FQI and FQE.

Two model families sit behind one ``fit``/``predict`` pair:

- ``linear``: ridge least squares with an unpenalized intercept, solved
  exactly.
- ``nn``: a ReLU multilayer perceptron trained on mean squared error with
  Adam (or plain gradient descent), full batch by default.

Every fit returns a ``FitReport`` so callers can flag non-convergence.
Fitted regressors serialize to versioned ``.npz`` blobs (JSON header plus
flat weight arrays, no pickle).
"""

from __future__ import annotations

import io
import json
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable, Literal, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, NonNegativeFloat, PositiveFloat, PositiveInt, model_validator

from errors import DataValueError, DomainError, NonConvergenceError, SerializationError, ShapeError, SizeError

logger = logging.getLogger(__name__)

BLOB_FORMAT = "cfrl-regressor"
BLOB_VERSION = 1
CONVERGENCE_WINDOW = 10
SCALE_FLOOR = 1e-12

_ADAM_BETA1 = 0.9
_ADAM_BETA2 = 0.999
_ADAM_EPS = 1e-8


class RegressorSpec(BaseModel):
    """Hyperparameters of one regression fit.

    ``hidden_sizes``, ``max_epochs``, ``learning_rate``, ``optimizer`` and
    ``batch_size`` only apply to ``nn`` models; ``ridge`` only to ``linear``.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    model_type: Literal["linear", "nn"] = "nn"
    hidden_sizes: tuple[PositiveInt, ...] = (64,)
    max_epochs: PositiveInt = 500
    learning_rate: PositiveFloat = 1e-2
    tolerance: PositiveFloat = 1e-5
    seed: int = 0
    optimizer: Literal["adam", "sgd"] = "adam"
    batch_size: PositiveInt | None = None
    ridge: NonNegativeFloat = 1e-8

    @model_validator(mode="after")
    def _hidden_layers_for_nn(self) -> "RegressorSpec":
        if self.model_type == "nn" and not self.hidden_sizes:
            raise ValueError("hidden_sizes must be non-empty for nn models")
        return self


@dataclass(frozen=True)
class FitReport:
    """Loss trajectory of one fit, in the targets' original units."""

    final_loss: float
    epochs_run: int
    converged: bool
    loss_curve: tuple[float, ...]

    def to_dict(self) -> dict:
        return {
            "final_loss": self.final_loss,
            "epochs_run": self.epochs_run,
            "converged": self.converged,
            "loss_curve": list(self.loss_curve),
        }


# ---- Blob helpers (also used for preprocessor, agent and environment archives) ----

def pack_archive(header: dict, arrays: dict[str, np.ndarray] | None = None) -> bytes:
    buffer = io.BytesIO()
    np.savez(buffer, header=np.array(json.dumps(header, sort_keys=True)), **(arrays or {}))
    return buffer.getvalue()


def unpack_archive(blob: bytes, expected_format: str) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        with np.load(io.BytesIO(blob), allow_pickle=False) as archive:
            arrays = {name: archive[name] for name in archive.files}
        header = json.loads(str(arrays.pop("header")))
    except (ValueError, OSError, KeyError) as exc:
        raise SerializationError(f"not a {expected_format} archive") from exc
    if header.get("format") != expected_format:
        raise SerializationError(f"expected a {expected_format} archive, got {header.get('format')!r}")
    if header.get("version") != BLOB_VERSION:
        raise SerializationError(f"unsupported {expected_format} version {header.get('version')!r}")
    return header, arrays


def blob_to_array(blob: bytes) -> np.ndarray:
    return np.frombuffer(blob, dtype=np.uint8)


def array_to_blob(array: np.ndarray) -> bytes:
    return np.asarray(array, dtype=np.uint8).tobytes()


# ---- Regressors ----

class Regressor(ABC):
    """A fitted multi-output function R^p -> R^q."""

    input_dim: int
    output_dim: int

    def predict(self, inputs: np.ndarray) -> np.ndarray:
        """Predict an (m, q) matrix for (m, p) inputs; rows are independent."""
        X = np.asarray(inputs, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1) if self.input_dim == 1 else X.reshape(1, -1)
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise ShapeError(f"expected inputs of width {self.input_dim}, got shape {X.shape}")
        return self._predict(X)

    @abstractmethod
    def _predict(self, X: np.ndarray) -> np.ndarray: ...

    def to_blob(self) -> bytes:
        raise SerializationError(f"{type(self).__name__} cannot be serialized")


class LinearRegressor(Regressor):
    def __init__(self, coef: np.ndarray, intercept: np.ndarray) -> None:
        self.coef = np.asarray(coef, dtype=float)
        self.intercept = np.asarray(intercept, dtype=float)
        self.input_dim, self.output_dim = self.coef.shape

    def _predict(self, X: np.ndarray) -> np.ndarray:
        return X @ self.coef + self.intercept

    def to_blob(self) -> bytes:
        header = {"format": BLOB_FORMAT, "version": BLOB_VERSION, "kind": "linear"}
        return pack_archive(header, {"coef": self.coef, "intercept": self.intercept})


class MLPRegressor(Regressor):
    """ReLU network on standardized inputs; outputs are de-standardized."""

    def __init__(
        self,
        weights: Sequence[np.ndarray],
        biases: Sequence[np.ndarray],
        x_mean: np.ndarray,
        x_scale: np.ndarray,
        y_mean: np.ndarray,
        y_scale: np.ndarray,
    ) -> None:
        self.weights = [np.asarray(w, dtype=float) for w in weights]
        self.biases = [np.asarray(b, dtype=float) for b in biases]
        self.x_mean, self.x_scale = np.asarray(x_mean, dtype=float), np.asarray(x_scale, dtype=float)
        self.y_mean, self.y_scale = np.asarray(y_mean, dtype=float), np.asarray(y_scale, dtype=float)
        self.input_dim = self.weights[0].shape[0]
        self.output_dim = self.weights[-1].shape[1]

    def _predict(self, X: np.ndarray) -> np.ndarray:
        out = _forward(self.weights, self.biases, (X - self.x_mean) / self.x_scale)
        return out * self.y_scale + self.y_mean

    def to_blob(self) -> bytes:
        header = {
            "format": BLOB_FORMAT,
            "version": BLOB_VERSION,
            "kind": "mlp",
            "layers": len(self.weights),
        }
        arrays = {
            "x_mean": self.x_mean,
            "x_scale": self.x_scale,
            "y_mean": self.y_mean,
            "y_scale": self.y_scale,
        }
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            arrays[f"w{i}"] = w
            arrays[f"b{i}"] = b
        return pack_archive(header, arrays)


class CallableRegressor(Regressor):
    """Wrap a vectorized function ``fn(X) -> (m, q)`` as a regressor.

    Used to inject known dynamics in place of fitted models.
    """

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], input_dim: int, output_dim: int) -> None:
        self.fn = fn
        self.input_dim = input_dim
        self.output_dim = output_dim

    def _predict(self, X: np.ndarray) -> np.ndarray:
        out = np.asarray(self.fn(X), dtype=float).reshape(X.shape[0], self.output_dim)
        return out


def regressor_from_blob(blob: bytes) -> Regressor:
    header, arrays = unpack_archive(blob, BLOB_FORMAT)
    kind = header.get("kind")
    if kind == "linear":
        return LinearRegressor(arrays["coef"], arrays["intercept"])
    if kind == "mlp":
        layers = int(header["layers"])
        return MLPRegressor(
            [arrays[f"w{i}"] for i in range(layers)],
            [arrays[f"b{i}"] for i in range(layers)],
            arrays["x_mean"],
            arrays["x_scale"],
            arrays["y_mean"],
            arrays["y_scale"],
        )
    raise SerializationError(f"unknown regressor kind {kind!r}")


def ensemble_predict(models: Sequence[Regressor], inputs: np.ndarray) -> np.ndarray:
    """Mean prediction of several regressors (a single model is returned as is)."""
    if len(models) == 1:
        return models[0].predict(inputs)
    return np.mean([model.predict(inputs) for model in models], axis=0)


# ---- Feature layout ----

def one_hot(actions: np.ndarray, num_actions: int) -> np.ndarray:
    a = np.asarray(actions).reshape(-1)
    if a.size and (a.min() < 0 or a.max() >= num_actions):
        raise DomainError(f"actions must lie in [0, {num_actions}), got range [{a.min()}, {a.max()}]")
    return np.eye(num_actions)[a.astype(np.int64)]


def build_features(zs: np.ndarray, states: np.ndarray, actions: np.ndarray, num_actions: int) -> np.ndarray:
    """Design matrix ``[z, x, one_hot(a)]`` used by every dynamics model."""
    zs = np.asarray(zs, dtype=float)
    states = np.asarray(states, dtype=float)
    n = states.shape[0]
    return np.hstack([zs.reshape(n, -1), states.reshape(n, -1), one_hot(actions, num_actions)])


def split_features(X: np.ndarray, d_z: int, d_x: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inverse of ``build_features``: (zs, states, integer actions)."""
    return X[:, :d_z], X[:, d_z : d_z + d_x], np.argmax(X[:, d_z + d_x :], axis=1)


# ---- Fitting ----

def _as_matrix(values, name: str) -> np.ndarray:
    array = np.asarray(values, dtype=float)
    if array.ndim == 1:
        array = array.reshape(-1, 1)
    if array.ndim != 2:
        raise ShapeError(f"{name} must be a matrix, got shape {array.shape}")
    return array


def _standardizer(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = values.mean(axis=0)
    scale = values.std(axis=0)
    scale[scale < SCALE_FLOOR] = 1.0
    return mean, scale


def _forward(weights: Sequence[np.ndarray], biases: Sequence[np.ndarray], X: np.ndarray) -> np.ndarray:
    h = X
    last = len(weights) - 1
    for i, (w, b) in enumerate(zip(weights, biases)):
        h = h @ w + b
        if i < last:
            h = np.maximum(h, 0.0)
    return h


def mlp_loss_and_gradients(
    weights: Sequence[np.ndarray], biases: Sequence[np.ndarray], X: np.ndarray, Y: np.ndarray
) -> tuple[float, list[np.ndarray], list[np.ndarray]]:
    """Mean squared error of a ReLU network and its gradients by backpropagation."""
    activations = [X]
    pre_activations = []
    h = X
    last = len(weights) - 1
    for i, (w, b) in enumerate(zip(weights, biases)):
        z = h @ w + b
        if i < last:
            pre_activations.append(z)
            h = np.maximum(z, 0.0)
        else:
            h = z
        activations.append(h)

    diff = h - Y
    loss = float(np.mean(diff**2))
    delta = 2.0 * diff / diff.size
    grad_w: list[np.ndarray] = [np.empty(0)] * len(weights)
    grad_b: list[np.ndarray] = [np.empty(0)] * len(weights)
    for i in range(last, -1, -1):
        grad_w[i] = activations[i].T @ delta
        grad_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ weights[i].T) * (pre_activations[i - 1] > 0)
    return loss, grad_w, grad_b


def _fit_linear(spec: RegressorSpec, X: np.ndarray, Y: np.ndarray) -> tuple[Regressor, FitReport]:
    n, p = X.shape
    design = np.hstack([X, np.ones((n, 1))])
    # stacked system == normal equations (D'D + ridge * diag(1,..,1,0)) w = D'Y
    penalty = np.sqrt(spec.ridge) * np.eye(p, p + 1)
    solution, *_ = np.linalg.lstsq(
        np.vstack([design, penalty]), np.vstack([Y, np.zeros((p, Y.shape[1]))]), rcond=None
    )
    model = LinearRegressor(solution[:p], solution[p])
    loss = float(np.mean((design @ solution - Y) ** 2))
    return model, FitReport(final_loss=loss, epochs_run=1, converged=True, loss_curve=(loss,))


def _fit_mlp(spec: RegressorSpec, X: np.ndarray, Y: np.ndarray) -> tuple[Regressor, FitReport]:
    rng = np.random.default_rng(spec.seed)
    x_mean, x_scale = _standardizer(X)
    y_mean, y_scale = _standardizer(Y)
    Xs = (X - x_mean) / x_scale
    Ys = (Y - y_mean) / y_scale

    sizes = [X.shape[1], *spec.hidden_sizes, Y.shape[1]]
    weights = [rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)) for fan_in, fan_out in zip(sizes, sizes[1:])]
    biases = [np.zeros(fan_out) for fan_out in sizes[1:]]
    params = weights + biases
    first_moment = [np.zeros_like(p) for p in params]
    second_moment = [np.zeros_like(p) for p in params]

    n = X.shape[0]
    batch_size = spec.batch_size or n
    step = 0
    curve: list[float] = []
    converged = False
    for _ in range(spec.max_epochs):
        order = np.arange(n) if batch_size >= n else rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            _, grad_w, grad_b = mlp_loss_and_gradients(weights, biases, Xs[idx], Ys[idx])
            grads = grad_w + grad_b
            step += 1
            for j, (param, grad) in enumerate(zip(params, grads)):
                if spec.optimizer == "sgd":
                    param -= spec.learning_rate * grad
                    continue
                first_moment[j] = _ADAM_BETA1 * first_moment[j] + (1 - _ADAM_BETA1) * grad
                second_moment[j] = _ADAM_BETA2 * second_moment[j] + (1 - _ADAM_BETA2) * grad**2
                m_hat = first_moment[j] / (1 - _ADAM_BETA1**step)
                v_hat = second_moment[j] / (1 - _ADAM_BETA2**step)
                param -= spec.learning_rate * m_hat / (np.sqrt(v_hat) + _ADAM_EPS)

        residual = (_forward(weights, biases, Xs) - Ys) * y_scale
        loss = float(np.mean(residual**2))
        if not np.isfinite(loss):
            raise NonConvergenceError(f"nn training diverged after {len(curve) + 1} epochs")
        curve.append(loss)
        if len(curve) > CONVERGENCE_WINDOW:
            previous = curve[-1 - CONVERGENCE_WINDOW]
            if abs(previous - loss) / max(previous, np.finfo(float).tiny) <= spec.tolerance:
                converged = True
                break

    model = MLPRegressor(weights, biases, x_mean, x_scale, y_mean, y_scale)
    report = FitReport(final_loss=curve[-1], epochs_run=len(curve), converged=converged, loss_curve=tuple(curve))
    if not converged:
        logger.debug("nn fit stopped at max_epochs=%d with loss %.3g", spec.max_epochs, curve[-1])
    return model, report


def fit(spec: RegressorSpec, inputs, targets) -> tuple[Regressor, FitReport]:
    """Fit a regressor of ``spec.model_type`` on (n, p) inputs and (n, q) targets.

    Raises:
        SizeError: no rows or no columns.
        ShapeError: inputs and targets disagree on n.
        DataValueError: a non-finite entry.
    """
    X = _as_matrix(inputs, "inputs")
    Y = _as_matrix(targets, "targets")
    if X.shape[0] < 1:
        raise SizeError("cannot fit a regressor on zero samples")
    if X.shape[1] < 1 or Y.shape[1] < 1:
        raise SizeError("inputs and targets need at least one column")
    if X.shape[0] != Y.shape[0]:
        raise ShapeError(f"inputs have {X.shape[0]} rows but targets have {Y.shape[0]}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise DataValueError("inputs and targets must be finite")
    if spec.model_type == "linear":
        return _fit_linear(spec, X, Y)
    return _fit_mlp(spec, X, Y)
