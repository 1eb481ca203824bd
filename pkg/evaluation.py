"""Policy value and counterfactual unfairness.

- ``evaluate_value_through_fqe``: fitted-Q evaluation on offline data.
- ``evaluate_value_through_model``: Monte-Carlo returns in an environment.
- ``evaluate_fairness_through_model``: action disagreement between
  counterfactual arms that share all noise, 0 (fair) to 1 (unfair).
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from typing import Literal, Mapping, Sequence

import numpy as np
import pandas as pd

from agents import Policy, q_values
from environment import Environment, sample_counterfactual_arms, sample_trajectories
from errors import ConfigurationError, NonConvergenceError, SizeError
from func_approx import CallableRegressor, Regressor, RegressorSpec, fit
from preprocessor import match_z_space
from trajectory_io import TrajectoryBatch

logger = logging.getLogger(__name__)

VALUE_ROW = "Value"
FAIRNESS_ROW = "Counterfactual Unfairness Level"


@dataclass(frozen=True)
class ValueReport:
    value: float
    method: Literal["fqe", "model_mc"]
    residual_curve: tuple[float, ...] = ()
    standard_error: float | None = None
    converged: bool = True

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "method": self.method,
            "residual_curve": list(self.residual_curve),
            "standard_error": self.standard_error,
            "converged": self.converged,
        }


@dataclass(frozen=True)
class CFMetricReport:
    """``cf_metric`` is the mean of ``per_time``; every entry lies in [0, 1]."""

    cf_metric: float
    per_time: tuple[float, ...]
    num_individuals: int
    num_arms: int
    num_reps: int

    def to_dict(self) -> dict:
        return {
            "cf_metric": self.cf_metric,
            "per_time": list(self.per_time),
            "num_individuals": self.num_individuals,
            "num_arms": self.num_arms,
            "num_reps": self.num_reps,
        }


def _zero_model(width: int) -> Regressor:
    return CallableRegressor(lambda X: np.zeros((X.shape[0], 1)), width, 1)


def evaluate_value_through_fqe(
    batch: TrajectoryBatch,
    policy: Policy,
    reg_spec: RegressorSpec | None = None,
    gamma: float = 0.9,
    max_iter: int = 100,
    tolerance: float = 1e-4,
    terminal_bootstrap: bool = False,
) -> ValueReport:
    """Fitted-Q evaluation of ``policy`` on the observed trajectories.

    Iterates Q <- fit(r + gamma * sum_a pi(a|s') Q(s', a)) with one regressor
    per action and returns the mean of sum_a pi(a|s_0) Q(s_0, a). The last
    transition uses y = r unless ``terminal_bootstrap``. Raises
    ``NonConvergenceError`` on non-finite targets; slow convergence is only
    flagged in the report.
    """
    if not 0.0 <= gamma < 1.0:
        raise ConfigurationError(f"gamma must lie in [0, 1), got {gamma}")
    if max_iter < 1:
        raise ConfigurationError("max_iter must be positive")
    reg_spec = reg_spec or RegressorSpec()
    n, horizon, num_actions = batch.N, batch.T, policy.num_actions

    features = policy.evaluation_features(batch.zs, batch.states, batch.actions)
    probabilities = policy.trajectory_probabilities(batch.zs, batch.states, batch.actions)
    width = features.shape[2]
    current = features[:, :-1].reshape(n * horizon, width)
    following = features[:, 1:].reshape(n * horizon, width)
    next_probabilities = probabilities[:, 1:].reshape(n * horizon, num_actions)
    reward = batch.rewards.reshape(-1)
    taken = batch.actions.reshape(-1)
    bootstrap = np.ones(n * horizon)
    if not terminal_bootstrap:
        bootstrap[np.tile(np.arange(horizon) == horizon - 1, n)] = 0.0

    strata = [np.flatnonzero(taken == a) for a in range(num_actions)]
    for a, rows in enumerate(strata):
        if rows.size == 0 and np.any(probabilities[..., a] > 0):
            raise SizeError(f"the policy takes action {a} but the data never does")

    models: list[Regressor] | None = None
    previous_q = np.zeros((n * horizon, num_actions))
    curve: list[float] = []
    converged = False
    for iteration in range(max_iter):
        targets = reward.copy()
        if models is not None:
            targets += gamma * bootstrap * np.sum(next_probabilities * q_values(models, following), axis=1)
        if not np.all(np.isfinite(targets)):
            raise NonConvergenceError(f"FQE targets became non-finite at iteration {iteration + 1}")
        models = [
            fit(reg_spec, current[rows], targets[rows])[0] if rows.size else _zero_model(width) for rows in strata
        ]
        q = q_values(models, current)
        change = float(np.max(np.abs(q - previous_q)))
        curve.append(change)
        previous_q = q
        logger.info("[fqe] iteration %d: max |dQ|=%.3g", iteration + 1, change)
        if gamma == 0.0 or change < tolerance:
            converged = True
            break
    if not converged:
        logger.warning("[fqe] stopped at max_iter=%d with max |dQ|=%.3g", max_iter, curve[-1])

    initial_q = q_values(models, features[:, 0])
    value = float(np.mean(np.sum(probabilities[:, 0] * initial_q, axis=1)))
    if not np.isfinite(value):
        raise NonConvergenceError("FQE value is not finite")
    return ValueReport(value=value, method="fqe", residual_curve=tuple(curve), converged=converged)


evaluate_reward_through_fqe = evaluate_value_through_fqe


def evaluate_value_through_model(
    env: Environment,
    zs: np.ndarray,
    policy: Policy,
    T: int,
    gamma: float = 0.9,
    num_reps: int = 10,
    seed: int = 0,
) -> ValueReport:
    """Monte-Carlo mean of discounted returns over ``num_reps`` rollouts per individual."""
    if num_reps < 1:
        raise ConfigurationError("num_reps must be positive")
    zs = np.asarray(zs, dtype=float).reshape(-1, env.d_z)
    rollouts = sample_trajectories(env, np.tile(zs, (num_reps, 1)), policy, T, seed)
    returns = rollouts.rewards @ (gamma ** np.arange(T))
    error = float(np.std(returns, ddof=1) / np.sqrt(returns.size)) if returns.size > 1 else 0.0
    return ValueReport(value=float(np.mean(returns)), method="model_mc", standard_error=error)


def action_disagreement(arm_actions: np.ndarray) -> np.ndarray:
    """Fraction of unordered arm pairs whose actions differ.

    ``arm_actions`` has the arms on axis 0; the result drops that axis. A
    single arm never disagrees.
    """
    pairs = list(itertools.combinations(range(arm_actions.shape[0]), 2))
    if not pairs:
        return np.zeros(arm_actions.shape[1:])
    return np.mean([arm_actions[i] != arm_actions[j] for i, j in pairs], axis=0)


def resolve_z_space(
    env: Environment, policy: Policy, z_space: Sequence[Sequence[float]] | None = None
) -> np.ndarray:
    """Arms of the fairness evaluation: the given z_space, else the policy's preprocessor's, else the environment's."""
    if z_space is not None:
        return np.asarray(z_space, dtype=float)
    preprocessor = getattr(policy, "preprocessor", None)
    if preprocessor is not None:
        return np.asarray(preprocessor.z_space, dtype=float)
    if env.z_space is not None:
        return np.asarray(env.z_space, dtype=float)
    raise ConfigurationError("no z_space given and neither the policy nor the environment defines one")


def evaluate_fairness_through_model(
    env: Environment,
    batch: TrajectoryBatch,
    policy: Policy,
    seed: int = 0,
    num_reps: int = 10,
    z_space: Sequence[Sequence[float]] | None = None,
) -> CFMetricReport:
    """Counterfactual unfairness level of ``policy`` on the individuals of ``batch``.

    Each individual gets one arm per z value of ``resolve_z_space``. Its own
    arm starts at the observed x_0; the others start at the counterfactual
    initial state ``m_0(z') + (x_0 - m_0(z))`` from the environment's
    initial-state mean.
    Arms are rolled forward with shared noise and shared policy uniforms.
    """
    if num_reps < 1:
        raise ConfigurationError("num_reps must be positive")
    z_values = resolve_z_space(env, policy, z_space)
    own = match_z_space(batch.zs, z_values)
    x0 = batch.states[:, 0]
    residual = x0 - env.initial_mean(batch.zs)

    z_arms, x0_arms = [], []
    for k, z in enumerate(z_values):
        arm_zs = np.tile(z, (batch.N, 1))
        arm_x0 = env.initial_mean(arm_zs) + residual
        arm_x0[own == k] = x0[own == k]
        z_arms.append(np.tile(arm_zs, (num_reps, 1)))
        x0_arms.append(np.tile(arm_x0, (num_reps, 1)))

    arms = sample_counterfactual_arms(env, z_arms, x0_arms, policy, batch.T, seed)
    disagreement = action_disagreement(np.stack([arm.actions for arm in arms]))
    per_time = disagreement.mean(axis=0)
    report = CFMetricReport(
        cf_metric=float(per_time.mean()),
        per_time=tuple(float(v) for v in per_time),
        num_individuals=batch.N,
        num_arms=len(z_values),
        num_reps=num_reps,
    )
    logger.info("[evaluate] cf metric %.4f over %d individuals x %d reps", report.cf_metric, batch.N, num_reps)
    return report


def compare_baselines(
    env: Environment,
    batch: TrajectoryBatch,
    policies: Mapping[str, Policy] | Sequence[tuple[str, Policy]],
    gamma: float = 0.9,
    seed: int = 0,
    reg_spec: RegressorSpec | None = None,
    max_iter: int = 100,
    num_reps: int = 10,
    z_space: Sequence[Sequence[float]] | None = None,
    terminal_bootstrap: bool = False,
) -> pd.DataFrame:
    """FQE value and counterfactual unfairness of each policy, one column per policy in the given order."""
    named = list(policies.items()) if isinstance(policies, Mapping) else list(policies)
    if not named:
        raise SizeError("need at least one policy to compare")
    columns = {}
    for name, policy in named:
        value = evaluate_value_through_fqe(
            batch, policy, reg_spec=reg_spec, gamma=gamma, max_iter=max_iter, terminal_bootstrap=terminal_bootstrap
        )
        fairness = evaluate_fairness_through_model(env, batch, policy, seed=seed, num_reps=num_reps, z_space=z_space)
        columns[name] = [value.value, fairness.cf_metric]
        logger.info("[compare] %s: value=%.3f cf=%.3f", name, value.value, fairness.cf_metric)
    return pd.DataFrame(columns, index=[VALUE_ROW, FAIRNESS_ROW])


def format_comparison_table(table: pd.DataFrame, digits: int = 3) -> str:
    return table.to_string(float_format=lambda v: f"{v:.{digits}f}")
