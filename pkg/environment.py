"""Environments and trajectory samplers.

Two environment kinds share one interface:

- ``SyntheticEnvironment``: hand-written initial, transition and reward
  rules. All randomness comes in through explicit noise arguments.
- ``SimulatedEnvironment``: pooled regression models fitted on trajectory
  data; noise is resampled from the fitted residuals.

Counterfactual arms of the same individual consume the same noise draws and
the same uniform draw for the policy at every step, so only z differs.
"""

from __future__ import annotations

import logging
import os
from abc import ABC, abstractmethod
from typing import TYPE_CHECKING, Callable, Literal, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, NonNegativeFloat

from errors import DomainError, NotFittedError, SerializationError, ShapeError, SizeError
from func_approx import (
    BLOB_VERSION,
    CallableRegressor,
    FitReport,
    Regressor,
    RegressorSpec,
    array_to_blob,
    blob_to_array,
    build_features,
    fit,
    pack_archive,
    regressor_from_blob,
    split_features,
    unpack_archive,
)
from trajectory_io import TrajectoryBatch

if TYPE_CHECKING:
    from agents import Policy

logger = logging.getLogger(__name__)

ARCHIVE_FORMAT = "cfrl-simulated-env"


class NoiseSpec(BaseModel):
    """Zero-centred noise: ``normal`` uses ``scale`` as standard deviation,
    ``uniform`` draws from [-scale, scale], ``none`` is identically zero."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    family: Literal["normal", "uniform", "none"] = "normal"
    scale: NonNegativeFloat = 0.25

    def sample(self, rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
        if self.family == "normal":
            return rng.normal(0.0, self.scale, size=shape)
        if self.family == "uniform":
            return rng.uniform(-self.scale, self.scale, size=shape)
        return np.zeros(shape)


class Environment(ABC):
    """Additive-noise dynamics over a discrete action space.

    ``step`` takes an (n, d_x + 1) noise matrix: the first d_x columns
    perturb the next state, the last one the reward.
    """

    num_actions: int
    d_x: int
    d_z: int
    z_space: np.ndarray | None = None

    @abstractmethod
    def initial_mean(self, zs: np.ndarray) -> np.ndarray:
        """Noise-free initial state (n, d_x) for each row of ``zs``."""

    @abstractmethod
    def draw_initial_noise(self, rng: np.random.Generator, n: int) -> np.ndarray: ...

    def initial_states(self, zs: np.ndarray, noise: np.ndarray) -> np.ndarray:
        return self.initial_mean(zs) + noise

    @abstractmethod
    def draw_step_noise(self, rng: np.random.Generator, n: int) -> np.ndarray: ...

    @abstractmethod
    def step(
        self, zs: np.ndarray, states: np.ndarray, actions: np.ndarray, noise: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        """Next states (n, d_x) and rewards (n,)."""


class SyntheticEnvironment(Environment):
    """Environment defined by vectorized rules.

    ``initial_fn(zs, noise)``, ``transition_fn(zs, states, actions, noise)``
    and ``reward_fn(zs, states, actions, noise)`` receive whole batches:
    zs (n, d_z), states (n, d_x), integer actions (n,), noise (n, d_x) for
    states or (n,) for rewards.
    """

    def __init__(
        self,
        d_x: int,
        d_z: int,
        num_actions: int,
        initial_fn: Callable[[np.ndarray, np.ndarray], np.ndarray],
        transition_fn: Callable[[np.ndarray, np.ndarray, np.ndarray, np.ndarray], np.ndarray],
        reward_fn: Callable[[np.ndarray, np.ndarray, np.ndarray, np.ndarray], np.ndarray],
        initial_noise: NoiseSpec = NoiseSpec(),
        transition_noise: NoiseSpec = NoiseSpec(),
        reward_noise: NoiseSpec = NoiseSpec(family="none"),
        z_space: Sequence[Sequence[float]] | None = None,
    ) -> None:
        self.d_x = d_x
        self.d_z = d_z
        self.num_actions = num_actions
        self.initial_fn = initial_fn
        self.transition_fn = transition_fn
        self.reward_fn = reward_fn
        self.initial_noise = initial_noise
        self.transition_noise = transition_noise
        self.reward_noise = reward_noise
        self.z_space = None if z_space is None else np.asarray(z_space, dtype=float)

    def _zs(self, zs: np.ndarray) -> np.ndarray:
        return np.asarray(zs, dtype=float).reshape(-1, self.d_z)

    def initial_mean(self, zs: np.ndarray) -> np.ndarray:
        zs = self._zs(zs)
        return self.initial_states(zs, np.zeros((zs.shape[0], self.d_x)))

    def initial_states(self, zs: np.ndarray, noise: np.ndarray) -> np.ndarray:
        zs = self._zs(zs)
        return np.asarray(self.initial_fn(zs, noise), dtype=float).reshape(zs.shape[0], self.d_x)

    def draw_initial_noise(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.initial_noise.sample(rng, (n, self.d_x))

    def draw_step_noise(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return np.hstack([self.transition_noise.sample(rng, (n, self.d_x)), self.reward_noise.sample(rng, (n, 1))])

    def step(self, zs, states, actions, noise):
        zs = self._zs(zs)
        n = zs.shape[0]
        states = np.asarray(states, dtype=float).reshape(n, self.d_x)
        actions = np.asarray(actions, dtype=np.int64).reshape(n)
        next_states = self.transition_fn(zs, states, actions, noise[:, : self.d_x])
        rewards = self.reward_fn(zs, states, actions, noise[:, self.d_x])
        return (
            np.asarray(next_states, dtype=float).reshape(n, self.d_x),
            np.asarray(rewards, dtype=float).reshape(n),
        )

    def mean_models(self) -> tuple[Regressor, Regressor, Regressor]:
        """Noise-free (initial, transition, reward) rules as regressors.

        The transition and reward regressors take ``build_features`` inputs,
        so they can stand in for a preprocessor's fitted models.
        """
        width = self.d_z + self.d_x + self.num_actions

        def transition(X: np.ndarray) -> np.ndarray:
            zs, states, actions = split_features(X, self.d_z, self.d_x)
            return self.transition_fn(zs, states, actions, np.zeros_like(states))

        def reward(X: np.ndarray) -> np.ndarray:
            zs, states, actions = split_features(X, self.d_z, self.d_x)
            return self.reward_fn(zs, states, actions, np.zeros(X.shape[0]))

        return (
            CallableRegressor(self.initial_mean, self.d_z, self.d_x),
            CallableRegressor(transition, width, self.d_x),
            CallableRegressor(reward, width, 1),
        )


# ---- Demo environment ----

class DemoEnvParams(BaseModel):
    """Coefficients of the one-dimensional demo environment::

        x_0     = initial_intercept + initial_z * z + e
        x_{t+1} = autoregression * x_t + (treat_intercept + treat_z * z) * 1{a=1}
                  + control_effect * 1{a=0} + z_drift * z + e
        r_t     = reward_state * x_t + reward_action * a_t
                  - action_state_reward * a_t * x_t + reward_z * z + u

    with e ~ Normal(0, noise_scale) and u ~ Normal(0, reward_noise_scale).
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    initial_intercept: float = -0.5
    initial_z: float = 1.0
    autoregression: float = 0.5
    treat_intercept: float = 0.6
    treat_z: float = 0.4
    control_effect: float = -0.3
    z_drift: float = 0.0
    reward_state: float = 1.0
    reward_action: float = 0.5
    action_state_reward: float = 0.0
    reward_z: float = -0.25
    noise_scale: NonNegativeFloat = 0.25
    reward_noise_scale: NonNegativeFloat = 0.0


def benchmark_env_params() -> DemoEnvParams:
    """Demo setting used for baseline comparisons.

    The action only enters the reward, the best action depends on the state
    (a=1 pays off when x < 0.5) and z keeps shifting the state every step, so
    policies that read x directly are unfair.
    """
    return DemoEnvParams(
        treat_intercept=0.0,
        treat_z=0.0,
        control_effect=0.0,
        z_drift=0.5,
        action_state_reward=1.0,
        noise_scale=0.5,
    )


def _noise(scale: float) -> NoiseSpec:
    return NoiseSpec(family="normal", scale=scale) if scale > 0 else NoiseSpec(family="none", scale=0.0)


def default_demo_env(params: DemoEnvParams | None = None) -> SyntheticEnvironment:
    """Binary-z, binary-action, one-dimensional demo environment (see ``DemoEnvParams``)."""
    p = params or DemoEnvParams()

    def initial_fn(zs, noise):
        return p.initial_intercept + p.initial_z * zs + noise

    def transition_fn(zs, states, actions, noise):
        treated = (actions == 1).astype(float)[:, None]
        control = (actions == 0).astype(float)[:, None]
        return (
            p.autoregression * states
            + (p.treat_intercept + p.treat_z * zs) * treated
            + p.control_effect * control
            + p.z_drift * zs
            + noise
        )

    def reward_fn(zs, states, actions, noise):
        a = actions.astype(float)
        x = states[:, 0]
        return p.reward_state * x + p.reward_action * a - p.action_state_reward * a * x + p.reward_z * zs[:, 0] + noise

    return SyntheticEnvironment(
        d_x=1,
        d_z=1,
        num_actions=2,
        initial_fn=initial_fn,
        transition_fn=transition_fn,
        reward_fn=reward_fn,
        initial_noise=_noise(p.noise_scale),
        transition_noise=_noise(p.noise_scale),
        reward_noise=_noise(p.reward_noise_scale),
        z_space=[[0.0], [1.0]],
    )


# ---- Simulated environment ----

class SimulatedEnvironment(Environment):
    """Regression models of the initial state, transition and reward.

    One transition model and one reward model are pooled over all
    (individual, time) pairs. Noise is drawn from the residual banks; the
    transition and reward residuals of a step share one index.
    """

    def __init__(
        self,
        num_actions: int,
        state_spec: RegressorSpec | None = None,
        reward_spec: RegressorSpec | None = None,
    ) -> None:
        self.num_actions = num_actions
        self.state_spec = state_spec or RegressorSpec()
        self.reward_spec = reward_spec or RegressorSpec()
        self.initial_model: Regressor | None = None
        self.transition_model: Regressor | None = None
        self.reward_model: Regressor | None = None
        self.initial_residuals: np.ndarray | None = None
        self.transition_residuals: np.ndarray | None = None
        self.reward_residuals: np.ndarray | None = None
        self.fit_reports: dict[str, dict] = {}
        self.z_space: np.ndarray | None = None
        self._dims: tuple[int, int] | None = None

    @property
    def is_fitted(self) -> bool:
        return self.transition_model is not None

    def _require_fitted(self) -> None:
        if not self.is_fitted:
            raise NotFittedError("SimulatedEnvironment must be fitted before it can simulate")

    @property
    def d_x(self) -> int:
        self._require_fitted()
        return self._dims[0]

    @property
    def d_z(self) -> int:
        self._require_fitted()
        return self._dims[1]

    def fit(self, batch: TrajectoryBatch) -> dict[str, FitReport]:
        if batch.actions.max() >= self.num_actions:
            raise DomainError(f"action {batch.actions.max()} is outside the {self.num_actions}-action space")
        n, horizon = batch.N, batch.T
        self._dims = (batch.d_x, batch.d_z)
        self.z_space = np.unique(batch.zs, axis=0)

        self.initial_model, initial_report = fit(self.state_spec, batch.zs, batch.states[:, 0])
        self.initial_residuals = batch.states[:, 0] - self.initial_model.predict(batch.zs)

        features = build_features(
            np.repeat(batch.zs, horizon, axis=0),
            batch.states[:, :-1].reshape(n * horizon, batch.d_x),
            batch.actions.reshape(-1),
            self.num_actions,
        )
        next_states = batch.states[:, 1:].reshape(n * horizon, batch.d_x)
        rewards = batch.rewards.reshape(-1, 1)
        self.transition_model, transition_report = fit(self.state_spec, features, next_states)
        self.transition_residuals = next_states - self.transition_model.predict(features)
        self.reward_model, reward_report = fit(self.reward_spec, features, rewards)
        self.reward_residuals = rewards - self.reward_model.predict(features)

        reports = {"initial": initial_report, "transition": transition_report, "reward": reward_report}
        self.fit_reports = {name: _summary(report) for name, report in reports.items()}
        for name, report in reports.items():
            if not report.converged:
                logger.warning("[environment] %s model did not converge after %d epochs", name, report.epochs_run)
        logger.info("[environment] fitted on %d transitions", n * horizon)
        return reports

    def initial_mean(self, zs: np.ndarray) -> np.ndarray:
        self._require_fitted()
        return self.initial_model.predict(np.asarray(zs, dtype=float).reshape(-1, self.d_z))

    def draw_initial_noise(self, rng: np.random.Generator, n: int) -> np.ndarray:
        self._require_fitted()
        return self.initial_residuals[rng.integers(0, len(self.initial_residuals), size=n)]

    def draw_step_noise(self, rng: np.random.Generator, n: int) -> np.ndarray:
        self._require_fitted()
        index = rng.integers(0, len(self.transition_residuals), size=n)
        return np.hstack([self.transition_residuals[index], self.reward_residuals[index]])

    def step(self, zs, states, actions, noise):
        self._require_fitted()
        features = build_features(zs, states, actions, self.num_actions)
        next_states = self.transition_model.predict(features) + noise[:, : self.d_x]
        rewards = self.reward_model.predict(features)[:, 0] + noise[:, self.d_x]
        return next_states, rewards

    def to_blob(self) -> bytes:
        self._require_fitted()
        header = {
            "format": ARCHIVE_FORMAT,
            "version": BLOB_VERSION,
            "num_actions": self.num_actions,
            "d_x": self.d_x,
            "d_z": self.d_z,
            "state_spec": self.state_spec.model_dump(mode="json"),
            "reward_spec": self.reward_spec.model_dump(mode="json"),
            "fit_reports": self.fit_reports,
        }
        arrays = {
            "initial_model": blob_to_array(self.initial_model.to_blob()),
            "transition_model": blob_to_array(self.transition_model.to_blob()),
            "reward_model": blob_to_array(self.reward_model.to_blob()),
            "initial_residuals": self.initial_residuals,
            "transition_residuals": self.transition_residuals,
            "reward_residuals": self.reward_residuals,
            "z_space": self.z_space,
        }
        return pack_archive(header, arrays)

    @classmethod
    def from_blob(cls, blob: bytes) -> "SimulatedEnvironment":
        header, arrays = unpack_archive(blob, ARCHIVE_FORMAT)
        try:
            env = cls(
                int(header["num_actions"]),
                RegressorSpec.model_validate(header["state_spec"]),
                RegressorSpec.model_validate(header["reward_spec"]),
            )
            env._dims = (int(header["d_x"]), int(header["d_z"]))
            env.z_space = arrays["z_space"]
            env.initial_model = regressor_from_blob(array_to_blob(arrays["initial_model"]))
            env.transition_model = regressor_from_blob(array_to_blob(arrays["transition_model"]))
            env.reward_model = regressor_from_blob(array_to_blob(arrays["reward_model"]))
            env.initial_residuals = arrays["initial_residuals"]
            env.transition_residuals = arrays["transition_residuals"]
            env.reward_residuals = arrays["reward_residuals"]
        except KeyError as exc:
            raise SerializationError(f"environment archive is missing {exc}") from exc
        env.fit_reports = header.get("fit_reports", {})
        return env

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "wb") as handle:
            handle.write(self.to_blob())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "SimulatedEnvironment":
        with open(path, "rb") as handle:
            return cls.from_blob(handle.read())


def _summary(report: FitReport) -> dict:
    return {"final_loss": report.final_loss, "epochs_run": report.epochs_run, "converged": report.converged}


def fit_simulated_env(env: SimulatedEnvironment, batch: TrajectoryBatch) -> dict[str, FitReport]:
    return env.fit(batch)


# ---- Sampling ----

def sample_actions(probabilities: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw of one action per row from shared uniforms."""
    cumulative = np.cumsum(probabilities, axis=1)
    actions = (uniforms[:, None] >= cumulative).sum(axis=1)
    return np.minimum(actions, probabilities.shape[1] - 1)


def _rollout_arms(
    env: Environment,
    z_arms: Sequence[np.ndarray],
    x0_arms: Sequence[np.ndarray],
    policy: "Policy",
    T: int,
    rng: np.random.Generator,
) -> list[TrajectoryBatch]:
    if policy.num_actions != env.num_actions:
        raise DomainError(f"policy has {policy.num_actions} actions but the environment has {env.num_actions}")
    if T < 1:
        raise SizeError(f"T must be positive, got {T}")
    z_arms = [np.asarray(z, dtype=float).reshape(-1, env.d_z) for z in z_arms]
    x0_arms = [np.asarray(x0, dtype=float).reshape(-1, env.d_x) for x0 in x0_arms]
    if len(z_arms) != len(x0_arms) or not z_arms:
        raise SizeError("need one initial state matrix per arm")
    n = z_arms[0].shape[0]
    if any(z.shape[0] != n for z in z_arms) or any(x0.shape[0] != n for x0 in x0_arms):
        raise SizeError("all arms must hold the same individuals")

    num_arms = len(z_arms)
    states = np.empty((num_arms, n, T + 1, env.d_x))
    actions = np.zeros((num_arms, n, T), dtype=np.int64)
    rewards = np.empty((num_arms, n, T))
    for arm in range(num_arms):
        states[arm, :, 0] = x0_arms[arm]

    for t in range(T):
        uniforms = rng.random(n)
        noise = env.draw_step_noise(rng, n)
        for arm in range(num_arms):
            probabilities = policy.action_probabilities(z_arms[arm], states[arm, :, : t + 1], actions[arm, :, :t])
            actions[arm, :, t] = sample_actions(probabilities, uniforms)
            states[arm, :, t + 1], rewards[arm, :, t] = env.step(
                z_arms[arm], states[arm, :, t], actions[arm, :, t], noise
            )

    return [
        TrajectoryBatch(zs=z_arms[arm], states=states[arm], actions=actions[arm], rewards=rewards[arm])
        for arm in range(num_arms)
    ]


def sample_trajectories(
    env: Environment, zs: np.ndarray, policy: "Policy", T: int, seed: int
) -> TrajectoryBatch:
    """Roll every individual forward T steps under ``policy``."""
    rng = np.random.default_rng(seed)
    zs = np.asarray(zs, dtype=float).reshape(-1, env.d_z)
    if zs.shape[0] < 1:
        raise SizeError("need at least one individual to sample")
    x0 = env.initial_states(zs, env.draw_initial_noise(rng, zs.shape[0]))
    return _rollout_arms(env, [zs], [x0], policy, T, rng)[0]


def sample_counterfactual_arms(
    env: Environment,
    z_arms: Sequence[np.ndarray],
    x0_arms: Sequence[np.ndarray],
    policy: "Policy",
    T: int,
    seed: int,
) -> list[TrajectoryBatch]:
    """One batch per arm; arms share every noise draw and policy uniform."""
    return _rollout_arms(env, z_arms, x0_arms, policy, T, np.random.default_rng(seed))


def sample_demo_zs(n: int, seed: int, z_space: Sequence[Sequence[float]] = ((0.0,), (1.0,))) -> np.ndarray:
    """Sensitive attributes drawn uniformly from ``z_space``."""
    if n < 1:
        raise SizeError(f"need at least one individual, got {n}")
    z_space = np.asarray(z_space, dtype=float)
    if z_space.ndim != 2:
        raise ShapeError("z_space must be a list of attribute vectors")
    return z_space[np.random.default_rng(seed).integers(0, len(z_space), size=n)]
