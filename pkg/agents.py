"""Policies: fitted Q-iteration, uniform random and externally supplied rules.

Every policy answers ``action_probabilities(zs, states, actions)`` for a
batch of raw histories: zs (n, d_z), states (n, t+1, d_x) up to the current
state and actions (n, t). Policies that preprocess do so internally.
"""

from __future__ import annotations

import logging
import os
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable, Literal, Mapping, Sequence

import numpy as np

from errors import (
    ConfigurationError,
    DataValueError,
    DomainError,
    NonConvergenceError,
    NotFittedError,
    SerializationError,
    ShapeError,
    SizeError,
)
from func_approx import (
    BLOB_VERSION,
    CallableRegressor,
    Regressor,
    RegressorSpec,
    array_to_blob,
    blob_to_array,
    fit,
    pack_archive,
    regressor_from_blob,
    unpack_archive,
)
from preprocessor import FittedPreprocessor, Preprocessor
from trajectory_io import TrajectoryBatch

logger = logging.getLogger(__name__)

ARCHIVE_FORMAT = "cfrl-policy"
PROBABILITY_TOLERANCE = 1e-9


def _as_history(zs, states, actions) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    states = np.asarray(states, dtype=float)
    if states.ndim == 2:
        states = states[:, :, None]
    n = states.shape[0]
    zs = np.asarray(zs, dtype=float).reshape(n, -1)
    actions = np.asarray(actions, dtype=np.int64).reshape(n, states.shape[1] - 1)
    return zs, states, actions


def check_probabilities(probabilities: np.ndarray, n: int, num_actions: int) -> np.ndarray:
    probabilities = np.asarray(probabilities, dtype=float)
    if probabilities.shape != (n, num_actions):
        raise ShapeError(f"expected action probabilities of shape ({n}, {num_actions}), got {probabilities.shape}")
    if np.any(probabilities < 0) or np.any(np.abs(probabilities.sum(axis=1) - 1.0) > PROBABILITY_TOLERANCE):
        raise DataValueError("action probabilities must be non-negative and sum to 1")
    return probabilities


class Policy(ABC):
    """Decision rule over ``num_actions`` discrete actions."""

    num_actions: int
    uses_preprocessor: bool = False

    @abstractmethod
    def action_probabilities(self, zs: np.ndarray, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """(n, num_actions) distribution at the last time point of each history."""

    def trajectory_probabilities(self, zs: np.ndarray, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """(n, T+1, num_actions) distributions at every time point of full trajectories."""
        zs, states, actions = _as_history(zs, states, actions)
        return np.stack(
            [self.action_probabilities(zs, states[:, : t + 1], actions[:, :t]) for t in range(states.shape[1])],
            axis=1,
        )

    def evaluation_features(self, zs: np.ndarray, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """State features FQE regresses on, (n, T+1, f); ``[z, x]`` by default."""
        zs, states, _ = _as_history(zs, states, actions)
        return np.concatenate([np.repeat(zs[:, None, :], states.shape[1], axis=1), states], axis=2)

    def act(self, z: np.ndarray, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """Distribution for one individual with history states (t+1, d_x) and actions (t,)."""
        states = np.asarray(states, dtype=float)
        if states.ndim == 1:
            states = states[:, None]
        return self.action_probabilities(
            np.atleast_1d(np.asarray(z, dtype=float))[None, :], states[None], np.asarray(actions, dtype=np.int64)[None]
        )[0]


class RandomPolicy(Policy):
    """Uniform over the actions at every step."""

    def __init__(self, num_actions: int) -> None:
        if num_actions < 1:
            raise ConfigurationError("num_actions must be positive")
        self.num_actions = num_actions

    def action_probabilities(self, zs, states, actions):
        n = np.asarray(states).shape[0]
        return np.full((n, self.num_actions), 1.0 / self.num_actions)


class ExternalPolicy(Policy):
    """Wrap a user rule ``fn(zs, x_t, t) -> (n, num_actions)`` as a policy."""

    def __init__(self, num_actions: int, fn: Callable[[np.ndarray, np.ndarray, int], np.ndarray]) -> None:
        self.num_actions = num_actions
        self.fn = fn

    @classmethod
    def from_function(cls, num_actions: int, fn: Callable[[np.ndarray, np.ndarray, int], np.ndarray]) -> "ExternalPolicy":
        return cls(num_actions, fn)

    @classmethod
    def from_table(cls, num_actions: int, table: Mapping[tuple, Sequence[float]]) -> "ExternalPolicy":
        """Policy read from a lookup table.

        Keys are ``(z, x)`` or ``(z, x, t)`` with z and x as tuples of floats;
        a time-specific key wins over a time-free one.
        """
        lookup = {key: np.asarray(value, dtype=float) for key, value in table.items()}

        def fn(zs: np.ndarray, x_t: np.ndarray, t: int) -> np.ndarray:
            rows = []
            for z, x in zip(zs, x_t):
                key = (tuple(float(v) for v in z), tuple(float(v) for v in x))
                if key + (t,) in lookup:
                    rows.append(lookup[key + (t,)])
                elif key in lookup:
                    rows.append(lookup[key])
                else:
                    raise DomainError(f"policy table has no entry for z={key[0]}, x={key[1]}, t={t}")
            return np.array(rows)

        return cls(num_actions, fn)

    def action_probabilities(self, zs, states, actions):
        zs, states, _ = _as_history(zs, states, actions)
        t = states.shape[1] - 1
        return check_probabilities(self.fn(zs, states[:, -1], t), states.shape[0], self.num_actions)


@dataclass(frozen=True)
class TrainingReport:
    """Diagnostics of one FQI run; ``residual_curve[i]`` is max |dQ| after iteration i."""

    iterations: int
    converged: bool
    residual_curve: tuple[float, ...]
    unconverged_fits: int = 0

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "converged": self.converged,
            "residual_curve": list(self.residual_curve),
            "unconverged_fits": self.unconverged_fits,
        }


def q_values(models: Sequence[Regressor], features: np.ndarray) -> np.ndarray:
    return np.column_stack([model.predict(features)[:, 0] for model in models])


def greedy(q: np.ndarray) -> np.ndarray:
    """One-hot argmax; ties go to the smallest action index."""
    probabilities = np.zeros_like(q)
    probabilities[np.arange(q.shape[0]), np.argmax(q, axis=1)] = 1.0
    return probabilities


class FQIAgent(Policy):
    """Fitted Q-iteration with one regressor per action.

    Args:
        num_actions: Size of the action space.
        reg_spec: Regressor used for every Q-model.
        gamma: Discount factor in [0, 1).
        preprocessor: When given, the agent works on augmented states and
            maps raw histories through it before acting.
        include_z: Append z to the state features.
        tolerance: Stop once max |dQ| over the training tuples drops below it.
        terminal_bootstrap: Bootstrap the last transition from x_T instead of
            using y = r there.
    """

    def __init__(
        self,
        num_actions: int,
        reg_spec: RegressorSpec | None = None,
        gamma: float = 0.9,
        preprocessor: Preprocessor | None = None,
        include_z: bool = False,
        tolerance: float = 1e-4,
        terminal_bootstrap: bool = False,
    ) -> None:
        if num_actions < 1:
            raise ConfigurationError("num_actions must be positive")
        if not 0.0 <= gamma < 1.0:
            raise ConfigurationError(f"gamma must lie in [0, 1), got {gamma}")
        if tolerance <= 0:
            raise ConfigurationError("tolerance must be positive")
        self.num_actions = num_actions
        self.reg_spec = reg_spec or RegressorSpec()
        self.gamma = gamma
        self.preprocessor = preprocessor
        self.include_z = include_z
        self.tolerance = tolerance
        self.terminal_bootstrap = terminal_bootstrap
        self.q_models: list[Regressor] | None = None
        self.report: TrainingReport | None = None

    @property
    def uses_preprocessor(self) -> bool:
        return self.preprocessor is not None

    @classmethod
    def from_q_models(cls, q_models: Sequence[Regressor], **kwargs) -> "FQIAgent":
        agent = cls(len(q_models), **kwargs)
        agent.q_models = list(q_models)
        return agent

    def _features(self, zs: np.ndarray, states: np.ndarray) -> np.ndarray:
        """Q-model inputs for states (..., w) and matching zs."""
        if not self.include_z:
            return states
        if states.ndim == 3:
            zs = np.repeat(zs[:, None, :], states.shape[1], axis=1)
        return np.concatenate([zs, states], axis=-1)

    def train(
        self,
        zs: np.ndarray,
        states: np.ndarray,
        actions: np.ndarray,
        rewards: np.ndarray,
        max_iter: int = 100,
        preprocess: bool | None = None,
    ) -> TrainingReport:
        """Run FQI on full trajectories.

        With ``preprocess=True`` the raw trajectories go through the agent's
        preprocessor first; with ``False`` states and rewards are taken as
        given. ``None`` preprocesses exactly when the agent has a
        preprocessor.
        """
        if preprocess is None:
            preprocess = self.preprocessor is not None
        if preprocess and self.preprocessor is None:
            raise ConfigurationError("preprocess=True requires an agent with a preprocessor")
        if max_iter < 1:
            raise ConfigurationError("max_iter must be positive")
        zs, states, actions = _as_history(zs, states, actions)
        rewards = np.asarray(rewards, dtype=float).reshape(actions.shape)
        if preprocess:
            states, rewards = self.preprocessor.preprocess_trajectories(zs, states, actions, rewards)
        elif self.preprocessor is not None and states.shape[2] != self.preprocessor.state_width:
            raise ShapeError(
                f"preprocessed states must have width {self.preprocessor.state_width}, got {states.shape[2]}"
            )
        if actions.max() >= self.num_actions or actions.min() < 0:
            raise DomainError(f"actions must lie in [0, {self.num_actions})")

        n, horizon = actions.shape
        features = self._features(zs, states)
        current = features[:, :-1].reshape(n * horizon, -1)
        following = features[:, 1:].reshape(n * horizon, -1)
        taken = actions.reshape(-1)
        reward = rewards.reshape(-1)
        bootstrap = np.ones(n * horizon)
        if not self.terminal_bootstrap:
            bootstrap[np.tile(np.arange(horizon) == horizon - 1, n)] = 0.0
        strata = [np.flatnonzero(taken == a) for a in range(self.num_actions)]
        for a, rows in enumerate(strata):
            if rows.size == 0:
                raise SizeError(f"no training transitions with action {a}")

        models: list[Regressor] | None = None
        previous_q = np.zeros((n * horizon, self.num_actions))
        curve: list[float] = []
        converged = False
        unconverged = 0
        for iteration in range(max_iter):
            if models is None:
                targets = reward
            else:
                targets = reward + self.gamma * bootstrap * q_values(models, following).max(axis=1)
            if not np.all(np.isfinite(targets)):
                raise NonConvergenceError(f"FQI targets became non-finite at iteration {iteration + 1}")
            fits = [fit(self.reg_spec, current[rows], targets[rows]) for rows in strata]
            models = [model for model, _ in fits]
            unconverged = sum(not report.converged for _, report in fits)
            q = q_values(models, current)
            if not np.all(np.isfinite(q)):
                raise NonConvergenceError(f"FQI Q-values became non-finite at iteration {iteration + 1}")
            change = float(np.max(np.abs(q - previous_q)))
            curve.append(change)
            previous_q = q
            logger.info("[fqi] iteration %d: max |dQ|=%.3g", iteration + 1, change)
            if self.gamma == 0.0 or change < self.tolerance:
                converged = True
                break

        self.q_models = models
        self.report = TrainingReport(len(curve), converged, tuple(curve), unconverged)
        if not converged:
            logger.warning("[fqi] stopped at max_iter=%d with max |dQ|=%.3g", max_iter, curve[-1])
        return self.report

    def _require_trained(self) -> None:
        if self.q_models is None:
            raise NotFittedError("FQIAgent must be trained before it can act")

    def _policy_states(self, zs, states, actions) -> np.ndarray:
        if self.preprocessor is None:
            return states
        augmented, _ = self.preprocessor.preprocess_trajectories(zs, states, actions)
        return augmented

    def q_function(self, zs: np.ndarray, states: np.ndarray) -> np.ndarray:
        """Q-values (n, num_actions) for policy-side states (augmented if preprocessing)."""
        self._require_trained()
        zs = np.asarray(zs, dtype=float).reshape(np.asarray(states).shape[0], -1)
        return q_values(self.q_models, self._features(zs, np.asarray(states, dtype=float)))

    def action_probabilities(self, zs, states, actions):
        self._require_trained()
        zs, states, actions = _as_history(zs, states, actions)
        current = self._policy_states(zs, states, actions)[:, -1]
        return greedy(self.q_function(zs, current))

    def trajectory_probabilities(self, zs, states, actions):
        self._require_trained()
        zs, states, actions = _as_history(zs, states, actions)
        policy_states = self._policy_states(zs, states, actions)
        n, steps, width = policy_states.shape
        q = self.q_function(np.repeat(zs, steps, axis=0), policy_states.reshape(n * steps, width))
        return greedy(q).reshape(n, steps, self.num_actions)

    def evaluation_features(self, zs, states, actions):
        if self.preprocessor is None:
            return super().evaluation_features(zs, states, actions)
        zs, states, actions = _as_history(zs, states, actions)
        augmented, _ = self.preprocessor.preprocess_trajectories(zs, states, actions)
        return np.concatenate([np.repeat(zs[:, None, :], augmented.shape[1], axis=1), augmented], axis=2)

    def act(self, z, states, actions):
        """Greedy distribution for one individual; the preprocessor is applied step by step."""
        self._require_trained()
        if self.preprocessor is None:
            return super().act(z, states, actions)
        states = np.asarray(states, dtype=float).reshape(len(actions) + 1, -1)
        augmented = self.preprocessor.preprocess_step(z, 0, states[0])
        for t in range(1, states.shape[0]):
            augmented = self.preprocessor.preprocess_step(z, t, states[t], augmented, int(actions[t - 1]))
        return greedy(self.q_function(np.atleast_1d(np.asarray(z, dtype=float))[None, :], augmented[None, :]))[0]


def fqi_train(
    agent: FQIAgent, batch: TrajectoryBatch, max_iter: int = 100, preprocess: bool | None = None
) -> TrainingReport:
    return agent.train(batch.zs, batch.states, batch.actions, batch.rewards, max_iter=max_iter, preprocess=preprocess)


# ---- Persistence ----

def policy_to_blob(policy: Policy) -> bytes:
    if isinstance(policy, RandomPolicy):
        return pack_archive({"format": ARCHIVE_FORMAT, "version": BLOB_VERSION, "kind": "random", "num_actions": policy.num_actions})
    if not isinstance(policy, FQIAgent):
        raise SerializationError(f"{type(policy).__name__} cannot be serialized")
    policy._require_trained()
    if policy.preprocessor is not None and not isinstance(policy.preprocessor, FittedPreprocessor):
        raise SerializationError("only FittedPreprocessor instances can be stored with an agent")
    header = {
        "format": ARCHIVE_FORMAT,
        "version": BLOB_VERSION,
        "kind": "fqi",
        "num_actions": policy.num_actions,
        "reg_spec": policy.reg_spec.model_dump(mode="json"),
        "gamma": policy.gamma,
        "include_z": policy.include_z,
        "tolerance": policy.tolerance,
        "terminal_bootstrap": policy.terminal_bootstrap,
        "report": None if policy.report is None else policy.report.to_dict(),
    }
    arrays = {f"q_{a}": blob_to_array(model.to_blob()) for a, model in enumerate(policy.q_models)}
    if policy.preprocessor is not None:
        arrays["preprocessor"] = blob_to_array(policy.preprocessor.to_blob())
    return pack_archive(header, arrays)


def policy_from_blob(blob: bytes) -> Policy:
    header, arrays = unpack_archive(blob, ARCHIVE_FORMAT)
    if header.get("kind") == "random":
        return RandomPolicy(int(header["num_actions"]))
    if header.get("kind") != "fqi":
        raise SerializationError(f"unknown policy kind {header.get('kind')!r}")
    preprocessor = None
    if "preprocessor" in arrays:
        preprocessor = FittedPreprocessor.from_blob(array_to_blob(arrays["preprocessor"]))
    agent = FQIAgent.from_q_models(
        [regressor_from_blob(array_to_blob(arrays[f"q_{a}"])) for a in range(int(header["num_actions"]))],
        reg_spec=RegressorSpec.model_validate(header["reg_spec"]),
        gamma=float(header["gamma"]),
        preprocessor=preprocessor,
        include_z=bool(header["include_z"]),
        tolerance=float(header["tolerance"]),
        terminal_bootstrap=bool(header["terminal_bootstrap"]),
    )
    if header.get("report"):
        report = header["report"]
        agent.report = TrainingReport(
            report["iterations"], report["converged"], tuple(report["residual_curve"]), report["unconverged_fits"]
        )
    return agent


def save_policy(policy: Policy, path: str | os.PathLike) -> None:
    with open(path, "wb") as handle:
        handle.write(policy_to_blob(policy))


def load_policy(path: str | os.PathLike) -> Policy:
    with open(path, "rb") as handle:
        return policy_from_blob(handle.read())


# ---- Baselines ----

def constant_policy(num_actions: int, action: int) -> ExternalPolicy:
    """Always ``action``."""
    if not 0 <= action < num_actions:
        raise DomainError(f"action {action} is outside the {num_actions}-action space")
    row = np.eye(num_actions)[action]
    return ExternalPolicy.from_function(num_actions, lambda zs, x_t, t: np.tile(row, (len(zs), 1)))


def zero_q_models(input_dim: int, num_actions: int) -> list[Regressor]:
    return [CallableRegressor(lambda X: np.zeros((X.shape[0], 1)), input_dim, 1) for _ in range(num_actions)]


def baseline_policy(
    kind: Literal["random", "full", "unaware"],
    num_actions: int,
    batch: TrajectoryBatch | None = None,
    reg_spec: RegressorSpec | None = None,
    gamma: float = 0.9,
    max_iter: int = 100,
    terminal_bootstrap: bool = False,
) -> Policy:
    """The comparison baselines: uniform random, FQI with z (full) or without z (unaware)."""
    if kind == "random":
        return RandomPolicy(num_actions)
    if kind not in ("full", "unaware"):
        raise ConfigurationError(f"unknown baseline {kind!r}")
    if batch is None:
        raise ConfigurationError(f"the {kind} baseline needs a training batch")
    agent = FQIAgent(
        num_actions,
        reg_spec=reg_spec,
        gamma=gamma,
        include_z=kind == "full",
        terminal_bootstrap=terminal_bootstrap,
    )
    fqi_train(agent, batch, max_iter=max_iter, preprocess=False)
    return agent
