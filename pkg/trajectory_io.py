"""Read and write trajectory tables.

The on-disk layout is long format: one row per (individual, time), T+1 rows
per individual, ``time`` running 0..T. The last row of each individual holds
the terminal state and leaves the action and reward cells empty::

    ID,time,z1,state1,action,reward
    a,0,1,0.25,1,0.75
    a,1,1,0.93,,

In memory every module works on a ``TrajectoryBatch``.
"""

from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np
import pandas as pd
from sklearn.model_selection import train_test_split as _split_indices

from errors import (
    ConfigurationError,
    DataValueError,
    RaggedDataError,
    SchemaError,
    ShapeError,
    SizeError,
)

logger = logging.getLogger(__name__)

TIME_LABEL = "time"
FLOAT_FORMAT = "%.17g"


def _default_labels(prefix: str, width: int) -> tuple[str, ...]:
    return tuple(f"{prefix}{j + 1}" for j in range(width))


def _read_only(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class TrajectoryBatch:
    """Aligned trajectories of N individuals over T transitions.

    Attributes:
        zs: (N, d_z) sensitive attribute of each individual.
        states: (N, T+1, d_x) observed states x_0 … x_T.
        actions: (N, T) integer actions a_0 … a_{T-1}.
        rewards: (N, T) rewards r_0 … r_{T-1}.
        ids: (N,) individual labels, kept as strings.

    The arrays are copied on construction and made read-only.
    """

    zs: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    ids: np.ndarray | None = None
    z_labels: tuple[str, ...] | None = None
    state_labels: tuple[str, ...] | None = None
    action_label: str = "action"
    reward_label: str = "reward"
    id_label: str = "ID"

    def __post_init__(self) -> None:
        zs = np.array(self.zs, dtype=float)
        if zs.ndim == 1:
            zs = zs.reshape(-1, 1)
        states = np.array(self.states, dtype=float)
        if states.ndim == 2:
            states = states[:, :, np.newaxis]
        rewards = np.array(self.rewards, dtype=float)
        raw_actions = np.asarray(self.actions)

        if zs.ndim != 2 or states.ndim != 3 or rewards.ndim != 2 or raw_actions.ndim != 2:
            raise ShapeError(
                "expected zs (N, d_z), states (N, T+1, d_x), actions (N, T), rewards (N, T)"
            )
        n = zs.shape[0]
        horizon = states.shape[1] - 1
        if horizon < 1:
            raise SizeError("states must hold at least two time points")
        if states.shape[0] != n or raw_actions.shape != (n, horizon) or rewards.shape != (n, horizon):
            raise ShapeError(
                f"inconsistent shapes: zs {zs.shape}, states {states.shape}, "
                f"actions {raw_actions.shape}, rewards {rewards.shape}"
            )
        for name, values in (("zs", zs), ("states", states), ("rewards", rewards)):
            if not np.all(np.isfinite(values)):
                raise DataValueError(f"{name} contains missing or non-finite values")
        if raw_actions.dtype.kind not in "iu":
            as_float = raw_actions.astype(float)
            if not np.all(np.isfinite(as_float)) or np.any(as_float != np.floor(as_float)):
                raise DataValueError("actions must be integers")
        actions = raw_actions.astype(np.int64)
        if np.any(actions < 0):
            raise DataValueError("actions must be non-negative")

        ids = self.ids
        if ids is None:
            ids = [str(i) for i in range(n)]
        ids = np.array([str(i) for i in ids], dtype=object)
        if ids.shape != (n,):
            raise ShapeError(f"expected {n} ids, got {ids.shape[0]}")

        z_labels = tuple(self.z_labels) if self.z_labels else _default_labels("z", zs.shape[1])
        state_labels = (
            tuple(self.state_labels) if self.state_labels else _default_labels("state", states.shape[2])
        )
        if len(z_labels) != zs.shape[1] or len(state_labels) != states.shape[2]:
            raise ShapeError("column labels do not match the array widths")

        object.__setattr__(self, "zs", _read_only(zs))
        object.__setattr__(self, "states", _read_only(states))
        object.__setattr__(self, "actions", _read_only(actions))
        object.__setattr__(self, "rewards", _read_only(rewards))
        object.__setattr__(self, "ids", _read_only(ids))
        object.__setattr__(self, "z_labels", z_labels)
        object.__setattr__(self, "state_labels", state_labels)

    @property
    def N(self) -> int:
        return self.zs.shape[0]

    @property
    def T(self) -> int:
        return self.actions.shape[1]

    @property
    def d_x(self) -> int:
        return self.states.shape[2]

    @property
    def d_z(self) -> int:
        return self.zs.shape[1]

    def subset(self, indices: Sequence[int] | np.ndarray) -> "TrajectoryBatch":
        """Individuals at ``indices``, in that order."""
        idx = np.asarray(indices, dtype=np.int64)
        return TrajectoryBatch(
            zs=self.zs[idx],
            states=self.states[idx],
            actions=self.actions[idx],
            rewards=self.rewards[idx],
            ids=self.ids[idx],
            z_labels=self.z_labels,
            state_labels=self.state_labels,
            action_label=self.action_label,
            reward_label=self.reward_label,
            id_label=self.id_label,
        )

    @cached_property
    def fingerprint(self) -> str:
        """Content hash of (zs, states, actions); labels and ids are ignored."""
        return array_fingerprint(self.zs, self.states, self.actions)


def array_fingerprint(*arrays: np.ndarray) -> str:
    digest = hashlib.sha256()
    for array in arrays:
        contiguous = np.ascontiguousarray(array, dtype=float)
        digest.update(str(contiguous.shape).encode())
        digest.update(contiguous.tobytes())
    return digest.hexdigest()


# ---- Reading ----

def _parse_float(value) -> float:
    if isinstance(value, str):
        value = value.strip()
        if value == "":
            return np.nan
    try:
        return float(value)
    except (TypeError, ValueError):
        return np.nan


def _numeric_block(rows: pd.DataFrame, labels: Sequence[str]) -> np.ndarray:
    # float() keeps 17-digit decimals bit-exact
    return np.column_stack([rows[label].map(_parse_float).to_numpy(dtype=float) for label in labels])


def _first_bad_cell(valid: np.ndarray, labels: Sequence[str], source_rows: np.ndarray) -> str:
    position, column = np.argwhere(~valid)[0]
    return f"column {labels[column]!r} at data row {source_rows[position]}"


def read_trajectory_from_dataframe(
    df: pd.DataFrame,
    z_labels: Sequence[str],
    state_labels: Sequence[str],
    action_label: str,
    reward_label: str,
    id_label: str,
    T: int,
    num_actions: int | None = None,
) -> TrajectoryBatch:
    """Convert a long-format table into a ``TrajectoryBatch``.

    Row order inside an individual is the time order; individuals keep the
    order of their first appearance.

    Raises:
        SchemaError: a column is missing, the table is empty, or an
            individual's ``time`` column does not read 0..T.
        RaggedDataError: an individual has a row count other than T+1.
        DataValueError: a missing, non-numeric, non-integer or out-of-range
            cell; the message names the column and data row.
    """
    if T < 1:
        raise SizeError(f"T must be positive, got {T}")
    z_labels, state_labels = list(z_labels), list(state_labels)
    if len(df.columns) == 0:
        raise SchemaError("trajectory table is empty")
    required = [id_label, TIME_LABEL, *z_labels, *state_labels, action_label, reward_label]
    for column in required:
        if column not in df.columns:
            raise SchemaError(f"missing column {column!r}")
    if len(df) == 0:
        raise SchemaError("trajectory table has no rows")

    df = df.reset_index(drop=True)
    id_values = df[id_label].astype(str)
    ids = pd.unique(id_values)
    codes = pd.Index(ids).get_indexer(id_values)
    counts = np.bincount(codes, minlength=len(ids))
    ragged = np.flatnonzero(counts != T + 1)
    if ragged.size:
        bad = ragged[0]
        raise RaggedDataError(f"individual {ids[bad]!r} has {counts[bad]} rows, expected T+1={T + 1}")

    n = len(ids)
    source_rows = np.argsort(codes, kind="stable")
    rows = df.iloc[source_rows]

    time = _numeric_block(rows, [TIME_LABEL]).reshape(n, T + 1)
    wrong_time = np.flatnonzero(~np.all(time == np.arange(T + 1), axis=1))
    if wrong_time.size:
        raise SchemaError(f"individual {ids[wrong_time[0]]!r}: time must read 0..{T} in row order")

    zs = _numeric_block(rows, z_labels)
    states = _numeric_block(rows, state_labels)
    for labels, block in ((z_labels, zs), (state_labels, states)):
        finite = np.isfinite(block)
        if not finite.all():
            raise DataValueError(f"missing or non-numeric value in {_first_bad_cell(finite, labels, source_rows)}")

    non_terminal = np.tile(np.arange(T + 1) < T, n)
    step_rows = source_rows[non_terminal]
    actions = _numeric_block(rows, [action_label])[non_terminal, 0]
    rewards = _numeric_block(rows, [reward_label])[non_terminal, 0]
    for label, values in ((action_label, actions), (reward_label, rewards)):
        finite = np.isfinite(values)
        if not finite.all():
            where = _first_bad_cell(finite[:, None], [label], step_rows)
            raise DataValueError(f"missing or non-numeric value in {where}")
    non_integer = np.flatnonzero(actions != np.floor(actions))
    if non_integer.size:
        raise DataValueError(
            f"non-integer action {actions[non_integer[0]]} at data row {step_rows[non_integer[0]]}"
        )
    upper = np.inf if num_actions is None else num_actions
    out_of_range = np.flatnonzero((actions < 0) | (actions >= upper))
    if out_of_range.size:
        raise DataValueError(
            f"action {int(actions[out_of_range[0]])} out of range at data row {step_rows[out_of_range[0]]}"
        )

    zs = zs.reshape(n, T + 1, len(z_labels))
    varying = np.flatnonzero(~np.all(zs == zs[:, :1, :], axis=(1, 2)))
    if varying.size:
        raise DataValueError(f"sensitive attribute changes over time for individual {ids[varying[0]]!r}")

    return TrajectoryBatch(
        zs=zs[:, 0, :],
        states=states.reshape(n, T + 1, len(state_labels)),
        actions=actions.reshape(n, T).astype(np.int64),
        rewards=rewards.reshape(n, T),
        ids=ids,
        z_labels=tuple(z_labels),
        state_labels=tuple(state_labels),
        action_label=action_label,
        reward_label=reward_label,
        id_label=id_label,
    )


def read_trajectory_from_csv(
    path: str | os.PathLike,
    z_labels: Sequence[str],
    state_labels: Sequence[str],
    action_label: str,
    reward_label: str,
    id_label: str,
    T: int,
    num_actions: int | None = None,
) -> TrajectoryBatch:
    """Load a long-format trajectory CSV (see module docstring)."""
    try:
        # strings first; ids stay opaque and floats are parsed exactly
        df = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError as exc:
        raise SchemaError(f"{os.fspath(path)} is empty") from exc
    batch = read_trajectory_from_dataframe(
        df, z_labels, state_labels, action_label, reward_label, id_label, T, num_actions
    )
    logger.info("[reader] loaded %d individuals x %d transitions from %s", batch.N, batch.T, path)
    return batch


# ---- Writing ----

def export_trajectory_to_dataframe(batch: TrajectoryBatch) -> pd.DataFrame:
    """Long-format table with columns id, time, z labels, state labels, action, reward."""
    n, horizon = batch.N, batch.T
    data: dict[str, object] = {
        batch.id_label: np.repeat(batch.ids, horizon + 1),
        TIME_LABEL: np.tile(np.arange(horizon + 1), n),
    }
    zs = np.repeat(batch.zs, horizon + 1, axis=0)
    for j, label in enumerate(batch.z_labels):
        data[label] = zs[:, j]
    states = batch.states.reshape(n * (horizon + 1), batch.d_x)
    for j, label in enumerate(batch.state_labels):
        data[label] = states[:, j]

    actions = np.full((n, horizon + 1), np.nan)
    actions[:, :horizon] = batch.actions
    rewards = np.full((n, horizon + 1), np.nan)
    rewards[:, :horizon] = batch.rewards
    data[batch.action_label] = pd.Series(actions.ravel()).astype("Int64")
    data[batch.reward_label] = rewards.ravel()
    return pd.DataFrame(data)


def write_trajectory_to_csv(batch: TrajectoryBatch, path: str | os.PathLike) -> None:
    """Write ``batch`` so that ``read_trajectory_from_csv`` returns it unchanged.

    Reals are written with 17 significant digits; terminal rows leave action
    and reward empty. An unwritable path raises ``OSError``.
    """
    export_trajectory_to_dataframe(batch).to_csv(path, index=False, float_format=FLOAT_FORMAT, na_rep="")
    logger.info("[reader] wrote %d rows to %s", batch.N * (batch.T + 1), path)


# ---- Splitting ----

def train_test_split(
    batch: TrajectoryBatch, test_fraction: float = 0.2, seed: int = 0
) -> tuple[TrajectoryBatch, TrajectoryBatch]:
    """Split individuals (never time steps) into train and test batches.

    The test set holds N * test_fraction individuals rounded half up, at least
    one and at most N-1. Both outputs keep the input order.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ConfigurationError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    if batch.N < 2:
        raise SizeError(f"need at least 2 individuals to split, got {batch.N}")
    n_test = min(max(1, int(np.floor(batch.N * test_fraction + 0.5))), batch.N - 1)
    train_idx, test_idx = _split_indices(np.arange(batch.N), test_size=n_test, random_state=seed)
    return batch.subset(np.sort(train_idx)), batch.subset(np.sort(test_idx))
