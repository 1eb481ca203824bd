"""MCP tool server for simulating demo data and evaluating stored policies.

Run it on stdio:

    python mcp_server.py

or inspect it with ``fastmcp dev mcp_server.py``. Tools return plain
dictionaries; failures come back as ``{"error": "..."}``.
"""

from __future__ import annotations

import logging

import numpy as np
from fastmcp import FastMCP

from agents import RandomPolicy, load_policy
from environment import benchmark_env_params, default_demo_env, sample_demo_zs, sample_trajectories
from errors import CFRLError
from evaluation import evaluate_fairness_through_model, evaluate_value_through_fqe
from func_approx import RegressorSpec
from trajectory_io import read_trajectory_from_csv, write_trajectory_to_csv

logger = logging.getLogger(__name__)

mcp = FastMCP("Counterfactual Fairness Tools")

TOOL_ERRORS = (CFRLError, OSError, ValueError, KeyError)


def _demo_env(setting: str):
    if setting not in ("default", "benchmark"):
        raise ValueError(f"setting must be 'default' or 'benchmark', got {setting!r}")
    return default_demo_env(benchmark_env_params() if setting == "benchmark" else None)


def _read(path: str, T: int, z_labels: list[str], state_labels: list[str]):
    return read_trajectory_from_csv(path, z_labels, state_labels, "action", "reward", "ID", T)


def simulate_demo_trajectories(path: str, n: int = 100, horizon: int = 5, seed: int = 0, setting: str = "default") -> dict:
    """Sample demo-environment trajectories under a uniform random policy and write them as CSV.

    Args:
        path: Where to write the CSV
        n: Number of individuals
        horizon: Number of transitions T per individual
        seed: Random seed
        setting: 'default' or 'benchmark' demo coefficients
    """
    try:
        env = _demo_env(setting)
        batch = sample_trajectories(env, sample_demo_zs(n, seed), RandomPolicy(env.num_actions), horizon, seed + 1)
        write_trajectory_to_csv(batch, path)
    except TOOL_ERRORS as exc:
        return {"error": str(exc)}
    return {"path": path, "individuals": batch.N, "transitions": batch.T, "mean_reward": float(batch.rewards.mean())}


def summarize_trajectories(
    path: str, T: int, z_labels: list[str] = ["z1"], state_labels: list[str] = ["state1"]
) -> dict:
    """Describe a long-format trajectory CSV: sizes, action frequencies and mean reward per z.

    Args:
        path: Trajectory CSV
        T: Number of transitions per individual
        z_labels: Sensitive attribute columns
        state_labels: State columns
    """
    try:
        batch = _read(path, T, z_labels, state_labels)
    except TOOL_ERRORS as exc:
        return {"error": str(exc)}
    counts = np.bincount(batch.actions.ravel())
    by_z = {}
    for z in np.unique(batch.zs, axis=0):
        rows = np.all(batch.zs == z, axis=1)
        by_z[str(z.tolist())] = float(batch.rewards[rows].mean())
    return {
        "individuals": batch.N,
        "transitions": batch.T,
        "state_dim": batch.d_x,
        "z_dim": batch.d_z,
        "action_frequencies": (counts / counts.sum()).tolist(),
        "mean_reward_by_z": by_z,
    }


def evaluate_policy_value(
    trajectories_path: str,
    policy_path: str,
    T: int,
    gamma: float = 0.9,
    max_iter: int = 100,
    z_labels: list[str] = ["z1"],
    state_labels: list[str] = ["state1"],
) -> dict:
    """Estimate a stored policy's value on trajectory data with linear fitted-Q evaluation.

    Args:
        trajectories_path: Trajectory CSV to evaluate on
        policy_path: Policy file written by the pipeline (agent.npz)
        T: Number of transitions per individual
        gamma: Discount factor
        max_iter: Maximum FQE iterations
    """
    try:
        batch = _read(trajectories_path, T, z_labels, state_labels)
        report = evaluate_value_through_fqe(
            batch, load_policy(policy_path), RegressorSpec(model_type="linear"), gamma=gamma, max_iter=max_iter
        )
    except TOOL_ERRORS as exc:
        return {"error": str(exc)}
    return {"value": report.value, "converged": report.converged, "iterations": len(report.residual_curve)}


def evaluate_policy_fairness(
    trajectories_path: str,
    policy_path: str,
    T: int,
    seed: int = 0,
    num_reps: int = 10,
    setting: str = "default",
) -> dict:
    """Counterfactual unfairness level (0 fair, 1 unfair) of a stored policy in the demo environment.

    Args:
        trajectories_path: Demo trajectory CSV whose individuals are evaluated
        policy_path: Policy file written by the pipeline (agent.npz)
        T: Number of transitions per individual
        seed: Random seed of the counterfactual simulation
        num_reps: Shared-noise replicates per individual
        setting: 'default' or 'benchmark' demo coefficients
    """
    try:
        batch = _read(trajectories_path, T, ["z1"], ["state1"])
        report = evaluate_fairness_through_model(
            _demo_env(setting), batch, load_policy(policy_path), seed=seed, num_reps=num_reps
        )
    except TOOL_ERRORS as exc:
        return {"error": str(exc)}
    return {"cf_metric": report.cf_metric, "per_time": list(report.per_time), "arms": report.num_arms}


for _tool in (simulate_demo_trajectories, summarize_trajectories, evaluate_policy_value, evaluate_policy_fairness):
    mcp.tool(_tool)


if __name__ == "__main__":
    mcp.run()
