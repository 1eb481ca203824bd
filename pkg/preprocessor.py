"""Sequential counterfactual-state preprocessing.

For every individual and every value z' of the sensitive attribute the
preprocessor rebuilds the state trajectory the individual would have had
under z', keeping the estimated exogenous residuals and the observed actions
fixed:

    x~_0(z') = m_0(z') + (x_0 - m_0(z))
    x~_t(z') = m_t(z', x~_{t-1}(z'), a_{t-1}) + (x_t - m_t(z, x_{t-1}, a_{t-1}))

The augmented state at time t concatenates x~_t(z') over z_space. Rewards
are rebuilt the same way and aggregated over z_space.

With ``cross_folds = K >= 2`` the training individuals are split into K
folds and each fold is preprocessed by models fitted on the other folds. At
deployment the K fold models are averaged.
"""

from __future__ import annotations

import logging
import os
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, PositiveInt, field_validator
from sklearn.model_selection import KFold

from errors import (
    ConfigurationError,
    DomainError,
    NotFittedError,
    SerializationError,
    ShapeError,
    SizeError,
    UnsupportedModeError,
)
from func_approx import (
    BLOB_VERSION,
    Regressor,
    RegressorSpec,
    array_to_blob,
    blob_to_array,
    build_features,
    ensemble_predict,
    fit,
    pack_archive,
    regressor_from_blob,
    unpack_archive,
)
from trajectory_io import TrajectoryBatch, array_fingerprint

logger = logging.getLogger(__name__)

ARCHIVE_FORMAT = "cfrl-preprocessor"
SUPPORTED_MODES = ("single",)


class PreprocessorConfig(BaseModel):
    """Settings of ``train_preprocessor``.

    Attributes:
        z_space: Every legal value of the sensitive attribute, one tuple per
            value. The order fixes the order of the augmented-state blocks.
        num_actions: Size of the discrete action space.
        cross_folds: Number of cross-fitting folds (1 = no cross-fitting).
        mode: Only ``"single"`` (one model with z as an input) is implemented.
        reg_spec: Regressor used for the initial, transition and reward models.
        fold_seed: Seed of the fold partition.
        reward_weighting: ``uniform`` averages the counterfactual rewards over
            z_space; ``marginal`` weights them by the training frequency of z.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    z_space: tuple[tuple[float, ...], ...]
    num_actions: PositiveInt
    cross_folds: PositiveInt = 1
    mode: str = "single"
    reg_spec: RegressorSpec = RegressorSpec()
    fold_seed: int = 0
    reward_weighting: Literal["uniform", "marginal"] = "uniform"

    @field_validator("z_space")
    @classmethod
    def _distinct_values(cls, value: tuple[tuple[float, ...], ...]) -> tuple[tuple[float, ...], ...]:
        if not value:
            raise ValueError("z_space must not be empty")
        widths = {len(z) for z in value}
        if len(widths) != 1 or 0 in widths:
            raise ValueError("all z_space entries must have the same positive length")
        if len(set(value)) != len(value):
            raise ValueError("z_space entries must be distinct")
        return value


def match_z_space(zs: np.ndarray, z_space: np.ndarray) -> np.ndarray:
    """Index into ``z_space`` of every row of ``zs``; DomainError if absent."""
    z_space = np.asarray(z_space, dtype=float)
    zs = np.asarray(zs, dtype=float).reshape(-1, z_space.shape[1])
    matches = np.all(zs[:, None, :] == z_space[None, :, :], axis=2)
    missing = np.flatnonzero(~matches.any(axis=1))
    if missing.size:
        row = missing[0]
        raise DomainError(f"sensitive attribute {zs[row].tolist()} of individual {row} is not in z_space")
    return matches.argmax(axis=1)


def augmented_state_labels(state_labels: Sequence[str], num_blocks: int) -> tuple[str, ...]:
    """Column names of an augmented state, block by block: state1_cf0, state2_cf0, ..."""
    return tuple(f"{label}_cf{k}" for k in range(num_blocks) for label in state_labels)


def assign_folds(n: int, cross_folds: int, seed: int) -> np.ndarray:
    """Fold index of each of ``n`` individuals; fold sizes differ by at most 1."""
    if cross_folds > n:
        raise SizeError(f"cross_folds={cross_folds} exceeds the number of individuals {n}")
    assignment = np.zeros(n, dtype=np.int64)
    if cross_folds == 1:
        return assignment
    splitter = KFold(n_splits=cross_folds, shuffle=True, random_state=seed)
    for fold, (_, held_out) in enumerate(splitter.split(np.arange(n))):
        assignment[held_out] = fold
    return assignment


class Preprocessor(ABC):
    """Anything that maps raw histories to augmented states.

    Agents only rely on this interface, so custom preprocessing methods can
    be trained into FQI agents and evaluated like the built-in one.
    """

    z_space: np.ndarray
    d_x: int

    @property
    def state_width(self) -> int:
        return len(self.z_space) * self.d_x

    @abstractmethod
    def preprocess_step(
        self,
        z: np.ndarray,
        t: int,
        x_t: np.ndarray,
        prev_counterfactuals: np.ndarray | None = None,
        a_prev: int | None = None,
    ) -> np.ndarray: ...

    @abstractmethod
    def preprocess_trajectories(
        self,
        zs: np.ndarray,
        states: np.ndarray,
        actions: np.ndarray,
        rewards: np.ndarray | None = None,
    ) -> tuple[np.ndarray, np.ndarray | None]: ...

    def preprocess_batch(self, batch: TrajectoryBatch) -> tuple[np.ndarray, np.ndarray]:
        return self.preprocess_trajectories(batch.zs, batch.states, batch.actions, batch.rewards)


@dataclass(frozen=True)
class _CrossFitCache:
    fingerprint: str
    rewards_fingerprint: str
    states_tilde: np.ndarray
    rewards_tilde: np.ndarray


class FittedPreprocessor(Preprocessor):
    """Fold models of the sequential preprocessor.

    ``initial_models[k]`` maps z to x_0; ``transition_models[t-1][k]`` and
    ``reward_models[t-1][k]`` map ``[z, x_{t-1}, one_hot(a_{t-1})]`` to x_t and
    r_{t-1}. Time steps beyond the trained horizon reuse the last models.
    """

    def __init__(
        self,
        config: PreprocessorConfig,
        d_x: int,
        initial_models: Sequence[Regressor],
        transition_models: Sequence[Sequence[Regressor]],
        reward_models: Sequence[Sequence[Regressor]],
        z_weights: np.ndarray | None = None,
        fold_assignment: np.ndarray | None = None,
        fit_reports: Sequence[dict] = (),
    ) -> None:
        if config.mode not in SUPPORTED_MODES:
            raise UnsupportedModeError(f"preprocessing mode {config.mode!r} is not implemented")
        if not transition_models or len(transition_models) != len(reward_models):
            raise ConfigurationError("need one transition and one reward model set per time step")
        self.config = config
        self.z_space = np.asarray(config.z_space, dtype=float)
        self.d_x = d_x
        self.d_z = self.z_space.shape[1]
        self.num_actions = config.num_actions
        self.initial_models = tuple(initial_models)
        self.transition_models = tuple(tuple(models) for models in transition_models)
        self.reward_models = tuple(tuple(models) for models in reward_models)
        folds = len(self.initial_models)
        if any(len(m) != folds for m in (*self.transition_models, *self.reward_models)):
            raise ConfigurationError(f"every model family needs exactly {folds} fold replicas")
        if z_weights is None:
            z_weights = np.full(len(self.z_space), 1.0 / len(self.z_space))
        self.z_weights = np.asarray(z_weights, dtype=float)
        self.fold_assignment = None if fold_assignment is None else np.asarray(fold_assignment, dtype=np.int64)
        self.fit_reports = list(fit_reports)
        self._cross_fit: _CrossFitCache | None = None

    @classmethod
    def from_models(
        cls,
        config: PreprocessorConfig,
        d_x: int,
        initial_model: Regressor,
        transition_model: Regressor | Sequence[Regressor],
        reward_model: Regressor | Sequence[Regressor],
    ) -> "FittedPreprocessor":
        """Preprocessor built on known models instead of fitted ones.

        A single transition (or reward) model is used at every time step; a
        sequence gives one model per step.
        """
        transitions = [transition_model] if isinstance(transition_model, Regressor) else list(transition_model)
        rewards = [reward_model] if isinstance(reward_model, Regressor) else list(reward_model)
        if len(rewards) == 1 and len(transitions) > 1:
            rewards = rewards * len(transitions)
        if len(transitions) == 1 and len(rewards) > 1:
            transitions = transitions * len(rewards)
        return cls(
            config,
            d_x,
            [initial_model],
            [[m] for m in transitions],
            [[m] for m in rewards],
        )

    @property
    def num_folds(self) -> int:
        return len(self.initial_models)

    @property
    def horizon(self) -> int:
        return len(self.transition_models)

    @property
    def converged(self) -> bool:
        return all(report["converged"] for report in self.fit_reports)

    def training_indices(self, fold: int) -> np.ndarray:
        """Training individuals whose data fitted the models of ``fold``."""
        if self.fold_assignment is None:
            raise NotFittedError("fold bookkeeping is only available after train_preprocessor")
        if self.num_folds == 1:
            return np.arange(len(self.fold_assignment))
        return np.flatnonzero(self.fold_assignment != fold)

    def _step_index(self, t: int) -> int:
        return min(t, self.horizon) - 1

    def _rollout(
        self,
        folds: Sequence[int],
        zs: np.ndarray,
        states: np.ndarray,
        actions: np.ndarray,
        rewards: np.ndarray | None,
    ) -> tuple[np.ndarray, np.ndarray | None]:
        n, steps = actions.shape
        num_blocks = len(self.z_space)
        own = match_z_space(zs, self.z_space)
        rows = np.arange(n)

        cf = np.empty((n, steps + 1, num_blocks, self.d_x))
        means = ensemble_predict([self.initial_models[k] for k in folds], self.z_space)
        cf[:, 0] = means[None, :, :] + (states[:, 0] - means[own])[:, None, :]
        # own block is the observed state, bit for bit
        cf[rows, 0, own] = states[:, 0]

        rewards_tilde = None if rewards is None else np.empty((n, steps))
        for t in range(1, steps + 1):
            step = self._step_index(t)
            transition = [self.transition_models[step][k] for k in folds]
            observed = build_features(zs, states[:, t - 1], actions[:, t - 1], self.num_actions)
            residual = states[:, t] - ensemble_predict(transition, observed)

            counterfactual = np.vstack(
                [
                    build_features(np.tile(z, (n, 1)), cf[:, t - 1, j], actions[:, t - 1], self.num_actions)
                    for j, z in enumerate(self.z_space)
                ]
            )
            predicted = ensemble_predict(transition, counterfactual).reshape(num_blocks, n, self.d_x)
            cf[:, t] = predicted.transpose(1, 0, 2) + residual[:, None, :]
            cf[rows, t, own] = states[:, t]

            if rewards is not None:
                reward = [self.reward_models[step][k] for k in folds]
                reward_residual = rewards[:, t - 1] - ensemble_predict(reward, observed)[:, 0]
                cf_rewards = ensemble_predict(reward, counterfactual)[:, 0].reshape(num_blocks, n).T
                cf_rewards = cf_rewards + reward_residual[:, None]
                cf_rewards[rows, own] = rewards[:, t - 1]
                rewards_tilde[:, t - 1] = aggregate_counterfactual_rewards(cf_rewards, self.z_weights)

        return cf.reshape(n, steps + 1, num_blocks * self.d_x), rewards_tilde

    def _check_history(self, zs, states, actions, rewards):
        zs = np.asarray(zs, dtype=float)
        zs = zs.reshape(-1, 1) if zs.ndim == 1 and self.d_z == 1 else np.atleast_2d(zs)
        states = np.asarray(states, dtype=float)
        if states.ndim == 2 and self.d_x == 1:
            states = states[:, :, None]
        actions = np.asarray(actions, dtype=np.int64).reshape(states.shape[0], -1)
        if states.ndim != 3 or states.shape[2] != self.d_x:
            raise ShapeError(f"expected states of shape (n, t+1, {self.d_x}), got {states.shape}")
        if zs.shape != (states.shape[0], self.d_z):
            raise ShapeError(f"expected zs of shape ({states.shape[0]}, {self.d_z}), got {zs.shape}")
        if actions.shape[1] != states.shape[1] - 1:
            raise ShapeError("a history with t+1 states needs exactly t actions")
        if rewards is not None:
            rewards = np.asarray(rewards, dtype=float).reshape(actions.shape)
        return zs, states, actions, rewards

    def preprocess_trajectories(
        self,
        zs: np.ndarray,
        states: np.ndarray,
        actions: np.ndarray,
        rewards: np.ndarray | None = None,
    ) -> tuple[np.ndarray, np.ndarray | None]:
        """Augmented states (n, t+1, |z_space|*d_x) and, if given, aggregated rewards (n, t).

        The histories may be shorter or longer than the training horizon. When
        (zs, states, actions) is the training batch itself, the cross-fitted
        outputs of ``train_preprocessor`` are returned.
        """
        zs, states, actions, rewards = self._check_history(zs, states, actions, rewards)
        cache = self._cross_fit
        if cache is not None and array_fingerprint(zs, states, actions) == cache.fingerprint:
            if rewards is None:
                return cache.states_tilde.copy(), None
            if array_fingerprint(rewards) == cache.rewards_fingerprint:
                return cache.states_tilde.copy(), cache.rewards_tilde.copy()
        return self._rollout(range(self.num_folds), zs, states, actions, rewards)

    def preprocess_step(
        self,
        z: np.ndarray,
        t: int,
        x_t: np.ndarray,
        prev_counterfactuals: np.ndarray | None = None,
        a_prev: int | None = None,
    ) -> np.ndarray:
        """Augmented state of one individual at time t.

        ``prev_counterfactuals`` is the augmented state returned for t-1; its
        own-z block is the observed previous state.
        """
        if (t == 0) != (prev_counterfactuals is None) or (t == 0) != (a_prev is None):
            raise ConfigurationError("prev_counterfactuals and a_prev are required exactly when t > 0")
        z = np.asarray(z, dtype=float).reshape(1, self.d_z)
        x_t = np.asarray(x_t, dtype=float).reshape(1, self.d_x)
        own = match_z_space(z, self.z_space)[0]
        if t == 0:
            augmented, _ = self._rollout(
                range(self.num_folds), z, x_t[:, None, :], np.zeros((1, 0), dtype=np.int64), None
            )
            return augmented[0, 0]

        previous = np.asarray(prev_counterfactuals, dtype=float).reshape(len(self.z_space), self.d_x)
        n_blocks = len(self.z_space)
        observed = build_features(z, previous[own][None, :], [a_prev], self.num_actions)
        step = self._step_index(t)
        transition = list(self.transition_models[step])
        residual = x_t - ensemble_predict(transition, observed)
        counterfactual = build_features(
            self.z_space, previous, np.full(n_blocks, a_prev, dtype=np.int64), self.num_actions
        )
        blocks = ensemble_predict(transition, counterfactual) + residual
        blocks[own] = x_t[0]
        return blocks.reshape(-1)

    def to_blob(self) -> bytes:
        header = {
            "format": ARCHIVE_FORMAT,
            "version": BLOB_VERSION,
            "config": self.config.model_dump(mode="json"),
            "d_x": self.d_x,
            "horizon": self.horizon,
            "folds": self.num_folds,
            "fit_reports": self.fit_reports,
        }
        arrays = {"z_weights": self.z_weights}
        if self.fold_assignment is not None:
            arrays["fold_assignment"] = self.fold_assignment
        for k in range(self.num_folds):
            arrays[f"initial_{k}"] = blob_to_array(self.initial_models[k].to_blob())
            for t in range(self.horizon):
                arrays[f"transition_{t}_{k}"] = blob_to_array(self.transition_models[t][k].to_blob())
                arrays[f"reward_{t}_{k}"] = blob_to_array(self.reward_models[t][k].to_blob())
        if self._cross_fit is not None:
            header["cross_fit"] = {
                "fingerprint": self._cross_fit.fingerprint,
                "rewards_fingerprint": self._cross_fit.rewards_fingerprint,
            }
            arrays["cross_fit_states"] = self._cross_fit.states_tilde
            arrays["cross_fit_rewards"] = self._cross_fit.rewards_tilde
        return pack_archive(header, arrays)

    @classmethod
    def from_blob(cls, blob: bytes) -> "FittedPreprocessor":
        header, arrays = unpack_archive(blob, ARCHIVE_FORMAT)
        try:
            config = PreprocessorConfig.model_validate(header["config"])
            folds, horizon = int(header["folds"]), int(header["horizon"])
            fitted = cls(
                config,
                int(header["d_x"]),
                [regressor_from_blob(array_to_blob(arrays[f"initial_{k}"])) for k in range(folds)],
                [
                    [regressor_from_blob(array_to_blob(arrays[f"transition_{t}_{k}"])) for k in range(folds)]
                    for t in range(horizon)
                ],
                [
                    [regressor_from_blob(array_to_blob(arrays[f"reward_{t}_{k}"])) for k in range(folds)]
                    for t in range(horizon)
                ],
                z_weights=arrays["z_weights"],
                fold_assignment=arrays.get("fold_assignment"),
                fit_reports=header.get("fit_reports", ()),
            )
        except KeyError as exc:
            raise SerializationError(f"preprocessor archive is missing {exc}") from exc
        if "cross_fit" in header:
            fitted._cross_fit = _CrossFitCache(
                header["cross_fit"]["fingerprint"],
                header["cross_fit"]["rewards_fingerprint"],
                arrays["cross_fit_states"],
                arrays["cross_fit_rewards"],
            )
        return fitted

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "wb") as handle:
            handle.write(self.to_blob())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "FittedPreprocessor":
        with open(path, "rb") as handle:
            return cls.from_blob(handle.read())


def aggregate_counterfactual_rewards(cf_rewards: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Combine per-z counterfactual rewards (n, |z_space|) into one reward per row."""
    return cf_rewards @ weights


def reward_weights(config: PreprocessorConfig, own: np.ndarray) -> np.ndarray:
    num_blocks = len(config.z_space)
    if config.reward_weighting == "marginal":
        return np.bincount(own, minlength=num_blocks) / len(own)
    return np.full(num_blocks, 1.0 / num_blocks)


def train_preprocessor(
    config: PreprocessorConfig, batch: TrajectoryBatch
) -> tuple[FittedPreprocessor, np.ndarray, np.ndarray]:
    """Fit the fold models and preprocess ``batch`` by cross-fitting.

    Returns:
        The fitted preprocessor, the augmented states (N, T+1, |z_space|*d_x)
        and the aggregated rewards (N, T).
    """
    if config.mode not in SUPPORTED_MODES:
        raise UnsupportedModeError(f"preprocessing mode {config.mode!r} is not implemented")
    z_space = np.asarray(config.z_space, dtype=float)
    if z_space.shape[1] != batch.d_z:
        raise ShapeError(f"z_space entries have length {z_space.shape[1]} but the data has d_z={batch.d_z}")
    if batch.actions.max() >= config.num_actions:
        raise DomainError(f"action {batch.actions.max()} is outside the {config.num_actions}-action space")
    own = match_z_space(batch.zs, z_space)
    assignment = assign_folds(batch.N, config.cross_folds, config.fold_seed)

    spec = config.reg_spec
    initial_models, fit_reports = [], []
    transition_models = [[] for _ in range(batch.T)]
    reward_models = [[] for _ in range(batch.T)]
    for fold in range(config.cross_folds):
        train = np.flatnonzero(assignment != fold) if config.cross_folds > 1 else np.arange(batch.N)
        zs = batch.zs[train]
        model, report = fit(spec, zs, batch.states[train, 0])
        initial_models.append(model)
        fit_reports.append({"fold": fold, "family": "initial", "t": 0, **_summary(report)})
        for t in range(1, batch.T + 1):
            features = build_features(zs, batch.states[train, t - 1], batch.actions[train, t - 1], config.num_actions)
            model, report = fit(spec, features, batch.states[train, t])
            transition_models[t - 1].append(model)
            fit_reports.append({"fold": fold, "family": "transition", "t": t, **_summary(report)})
            model, report = fit(spec, features, batch.rewards[train, t - 1])
            reward_models[t - 1].append(model)
            fit_reports.append({"fold": fold, "family": "reward", "t": t, **_summary(report)})
        logger.info("[preprocess] fold %d/%d fitted", fold + 1, config.cross_folds)

    fitted = FittedPreprocessor(
        config,
        batch.d_x,
        initial_models,
        transition_models,
        reward_models,
        z_weights=reward_weights(config, own),
        fold_assignment=assignment,
        fit_reports=fit_reports,
    )

    states_tilde = np.empty((batch.N, batch.T + 1, fitted.state_width))
    rewards_tilde = np.empty((batch.N, batch.T))
    for fold in range(config.cross_folds):
        members = np.flatnonzero(assignment == fold)
        states_tilde[members], rewards_tilde[members] = fitted._rollout(
            [fold], batch.zs[members], batch.states[members], batch.actions[members], batch.rewards[members]
        )
    fitted._cross_fit = _CrossFitCache(
        batch.fingerprint, array_fingerprint(batch.rewards), states_tilde.copy(), rewards_tilde.copy()
    )

    stalled = sum(not report["converged"] for report in fit_reports)
    if stalled:
        logger.warning("[preprocess] %d of %d model fits did not converge", stalled, len(fit_reports))
    return fitted, states_tilde, rewards_tilde


def _summary(report) -> dict:
    return {"final_loss": report.final_loss, "epochs_run": report.epochs_run, "converged": report.converged}


def preprocessed_batch(batch: TrajectoryBatch, states_tilde: np.ndarray, rewards_tilde: np.ndarray) -> TrajectoryBatch:
    """``batch`` with augmented states and aggregated rewards, ready to be written as CSV."""
    num_blocks = states_tilde.shape[2] // batch.d_x
    return TrajectoryBatch(
        zs=batch.zs,
        states=states_tilde,
        actions=batch.actions,
        rewards=rewards_tilde,
        ids=batch.ids,
        z_labels=batch.z_labels,
        state_labels=augmented_state_labels(batch.state_labels, num_blocks),
        action_label=batch.action_label,
        reward_label=batch.reward_label,
        id_label=batch.id_label,
    )
