"""Command-line pipeline: simulate -> preprocess -> train -> evaluate -> compare.

    python cli.py --config configs/demo.yaml --output runs/demo --verbose
    python cli.py --config configs/demo.yaml --stage evaluate

Each stage reads and writes only the files in the output directory, so a
stage can be rerun on its own once the earlier artifacts exist.

Exit codes: 0 success, 2 config error, 3 data error, 4 training error,
5 evaluation error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import pandas as pd

from agents import FQIAgent, RandomPolicy, baseline_policy, load_policy, save_policy
from config import CsvSource, DemoSource, PipelineConfig, load_config
from environment import (
    Environment,
    SimulatedEnvironment,
    benchmark_env_params,
    default_demo_env,
    sample_demo_zs,
    sample_trajectories,
)
from errors import CFRLError, ConfigurationError
from evaluation import (
    compare_baselines,
    evaluate_fairness_through_model,
    evaluate_value_through_fqe,
    format_comparison_table,
)
from preprocessor import (
    FittedPreprocessor,
    PreprocessorConfig,
    augmented_state_labels,
    preprocessed_batch,
    train_preprocessor,
)
from trajectory_io import (
    FLOAT_FORMAT,
    TrajectoryBatch,
    read_trajectory_from_csv,
    train_test_split,
    write_trajectory_to_csv,
)

logger = logging.getLogger(__name__)

STAGES = ("simulate", "preprocess", "train", "evaluate", "compare")
EXIT_OK = 0
EXIT_CONFIG = 2
STAGE_EXIT_CODES = {"simulate": 3, "preprocess": 4, "train": 4, "evaluate": 5, "compare": 5}

TRAJECTORIES = "trajectories.csv"
BEHAVIOR_POLICY = "behavior_policy.npz"
TRAIN = "train.csv"
TEST = "test.csv"
TRAIN_PREPROCESSED = "train_preprocessed.csv"
PREPROCESSOR = "preprocessor.npz"
AGENT = "agent.npz"
ENVIRONMENT = "environment.npz"
METRICS_CSV = "metrics.csv"
METRICS_TXT = "metrics.txt"
COMPARISON_CSV = "comparison.csv"
COMPARISON_TXT = "comparison.txt"
DIAGNOSTICS = "diagnostics.json"
MANIFEST = "manifest.json"

DEMO_Z_LABELS = ("z1",)
DEMO_STATE_LABELS = ("state1",)


class StageError(Exception):
    """A stage failed; carries the stage name for the exit code."""

    def __init__(self, stage: str, cause: BaseException) -> None:
        super().__init__(f"{stage} stage failed: {cause}")
        self.stage = stage
        self.cause = cause

    @property
    def exit_code(self) -> int:
        return STAGE_EXIT_CODES[self.stage]


class Run:
    """Artifacts of one pipeline run inside ``output``."""

    def __init__(self, config: PipelineConfig, output: Path) -> None:
        self.config = config
        self.output = output

    def path(self, name: str) -> Path:
        return self.output / name

    # ---- labels and readers ----

    def labels(self) -> dict:
        data = self.config.data
        if isinstance(data, CsvSource):
            return {
                "z_labels": data.z_labels,
                "state_labels": data.state_labels,
                "action_label": data.action_label,
                "reward_label": data.reward_label,
                "id_label": data.id_label,
            }
        return {
            "z_labels": DEMO_Z_LABELS,
            "state_labels": DEMO_STATE_LABELS,
            "action_label": "action",
            "reward_label": "reward",
            "id_label": "ID",
        }

    @property
    def horizon(self) -> int:
        return self.config.data.T

    @property
    def num_actions(self) -> int:
        data = self.config.data
        return data.num_actions if isinstance(data, CsvSource) else 2

    def read(self, name: str, state_labels=None) -> TrajectoryBatch:
        labels = self.labels()
        if state_labels is not None:
            labels["state_labels"] = state_labels
        return read_trajectory_from_csv(self.path(name), T=self.horizon, num_actions=self.num_actions, **labels)

    def true_environment(self) -> Environment:
        data = self.config.data
        if not isinstance(data, DemoSource):
            raise ConfigurationError("the true environment is only known for demo data")
        params = data.params or (benchmark_env_params() if data.setting == "benchmark" else None)
        return default_demo_env(params)

    def update_diagnostics(self, key: str, value) -> None:
        path = self.path(DIAGNOSTICS)
        diagnostics = json.loads(path.read_text()) if path.exists() else {}
        diagnostics[key] = value
        path.write_text(json.dumps(diagnostics, indent=2, sort_keys=True))

    # ---- stages ----

    def simulate(self) -> None:
        data = self.config.data
        if isinstance(data, CsvSource):
            if not os.path.exists(data.path):
                raise FileNotFoundError(f"trajectory file {data.path} does not exist")
            batch = read_trajectory_from_csv(
                data.path, T=data.T, num_actions=data.num_actions, **self.labels()
            )
        else:
            env = self.true_environment()
            behavior = RandomPolicy(env.num_actions)
            zs = sample_demo_zs(data.N, data.seed)
            # default batch labels are z1 / state1
            batch = sample_trajectories(env, zs, behavior, data.T, data.seed + 1)
            save_policy(behavior, self.path(BEHAVIOR_POLICY))
        write_trajectory_to_csv(batch, self.path(TRAJECTORIES))
        train, test = train_test_split(batch, self.config.split.test_fraction, self.config.split.seed)
        write_trajectory_to_csv(train, self.path(TRAIN))
        write_trajectory_to_csv(test, self.path(TEST))
        logger.info("[simulate] %d train and %d test individuals", train.N, test.N)

    def preprocess(self) -> None:
        section = self.config.preprocessor
        train = self.read(TRAIN)
        z_space = section.z_space or tuple(tuple(z) for z in np.unique(train.zs, axis=0).tolist())
        config = PreprocessorConfig(
            z_space=z_space,
            num_actions=self.num_actions,
            cross_folds=section.cross_folds,
            mode=section.mode,
            reg_spec=section.reg_spec,
            fold_seed=section.fold_seed,
            reward_weighting=section.reward_weighting,
        )
        fitted, states_tilde, rewards_tilde = train_preprocessor(config, train)
        fitted.save(self.path(PREPROCESSOR))
        write_trajectory_to_csv(preprocessed_batch(train, states_tilde, rewards_tilde), self.path(TRAIN_PREPROCESSED))
        self.update_diagnostics(
            "preprocessor",
            {
                "fits": len(fitted.fit_reports),
                "unconverged_fits": sum(not r["converged"] for r in fitted.fit_reports),
            },
        )

    def _agent(self, preprocessor=None, include_z: bool = False) -> FQIAgent:
        section = self.config.agent
        return FQIAgent(
            self.num_actions,
            reg_spec=section.reg_spec,
            gamma=section.gamma,
            preprocessor=preprocessor,
            include_z=include_z,
            tolerance=section.tolerance,
            terminal_bootstrap=section.terminal_bootstrap,
        )

    def train(self) -> None:
        fitted = FittedPreprocessor.load(self.path(PREPROCESSOR))
        labels = augmented_state_labels(self.labels()["state_labels"], len(fitted.z_space))
        preprocessed = self.read(TRAIN_PREPROCESSED, state_labels=labels)
        agent = self._agent(preprocessor=fitted)
        report = agent.train(
            preprocessed.zs,
            preprocessed.states,
            preprocessed.actions,
            preprocessed.rewards,
            max_iter=self.config.agent.max_iter,
            preprocess=False,
        )
        save_policy(agent, self.path(AGENT))
        self.update_diagnostics("fqi", report.to_dict())

    def environment(self) -> Environment:
        if self.config.evaluation.environment == "true":
            return self.true_environment()
        path = self.path(ENVIRONMENT)
        if path.exists():
            return SimulatedEnvironment.load(path)
        section = self.config.environment
        env = SimulatedEnvironment(self.num_actions, section.state_spec, section.reward_spec)
        env.fit(self.read(TRAJECTORIES))
        env.save(path)
        self.update_diagnostics("environment", env.fit_reports)
        return env

    def evaluate(self) -> None:
        section = self.config.evaluation
        test = self.read(TEST)
        policy = load_policy(self.path(AGENT))
        env = self.environment()
        value = evaluate_value_through_fqe(
            test,
            policy,
            reg_spec=section.fqe_reg_spec,
            gamma=self.config.agent.gamma,
            max_iter=section.fqe_max_iter,
            terminal_bootstrap=self.config.agent.terminal_bootstrap,
        )
        fairness = evaluate_fairness_through_model(
            env, test, policy, seed=section.seed, num_reps=section.num_reps, z_space=self._z_space(policy)
        )
        metrics = pd.DataFrame(
            {
                "metric": ["value", "cf_metric", "fqe_converged", "fqe_iterations"],
                "value": [value.value, fairness.cf_metric, float(value.converged), float(len(value.residual_curve))],
            }
        )
        metrics.to_csv(self.path(METRICS_CSV), index=False, float_format=FLOAT_FORMAT)
        self.path(METRICS_TXT).write_text(
            f"Value (FQE): {value.value:.3f}\n"
            f"Counterfactual Unfairness Level: {fairness.cf_metric:.3f}\n"
            f"FQE converged: {value.converged}\n"
        )
        self.update_diagnostics("fqe", value.to_dict())
        self.update_diagnostics("fairness", fairness.to_dict())

    def _z_space(self, policy):
        preprocessor = getattr(policy, "preprocessor", None)
        if preprocessor is not None:
            return preprocessor.z_space
        return self.config.preprocessor.z_space

    def compare(self) -> None:
        section = self.config.evaluation
        agent_section = self.config.agent
        train, test = self.read(TRAIN), self.read(TEST)
        ours = load_policy(self.path(AGENT))
        env = self.environment()
        policies = {"Random": RandomPolicy(self.num_actions)}
        for name, kind in (("Full", "full"), ("Unaware", "unaware")):
            policies[name] = baseline_policy(
                kind,
                self.num_actions,
                train,
                reg_spec=agent_section.reg_spec,
                gamma=agent_section.gamma,
                max_iter=agent_section.max_iter,
                terminal_bootstrap=agent_section.terminal_bootstrap,
            )
        policies["Ours"] = ours
        table = compare_baselines(
            env,
            test,
            policies,
            gamma=agent_section.gamma,
            seed=section.seed,
            reg_spec=section.fqe_reg_spec,
            max_iter=section.fqe_max_iter,
            num_reps=section.num_reps,
            z_space=self._z_space(ours),
            terminal_bootstrap=agent_section.terminal_bootstrap,
        )
        table.to_csv(self.path(COMPARISON_CSV), float_format=FLOAT_FORMAT)
        self.path(COMPARISON_TXT).write_text(format_comparison_table(table) + "\n")


def _write_manifest(path: Path, manifest: dict) -> None:
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))


def run_pipeline(config: PipelineConfig, output: str | os.PathLike | None = None, stage: str = "pipeline") -> int:
    """Run ``stage`` (or every stage) and return the exit code."""
    output = Path(output or config.output_dir)
    output.mkdir(parents=True, exist_ok=True)
    stages = list(STAGES) if stage == "pipeline" else [stage]
    if stage == "pipeline" and not config.evaluation.compare:
        stages.remove("compare")
    manifest = {
        "schema_version": config.schema_version,
        "config": config.model_dump(mode="json"),
        "seeds": config.seeds(),
        "requested_stage": stage,
        "stages": {},
        "status": "running",
    }
    manifest_path = output / MANIFEST
    _write_manifest(manifest_path, manifest)

    run = Run(config, output)
    exit_code = EXIT_OK
    for name in stages:
        started = time.perf_counter()
        logger.info("[%s] started", name)
        try:
            getattr(run, name)()
        except (CFRLError, OSError, KeyError, ValueError, ArithmeticError) as exc:
            error = StageError(name, exc)
            logger.error("%s", error)
            manifest["stages"][name] = {"status": "failed", "seconds": time.perf_counter() - started, "error": str(exc)}
            exit_code = error.exit_code
            break
        manifest["stages"][name] = {"status": "ok", "seconds": time.perf_counter() - started}
        logger.info("[%s] finished in %.1fs", name, manifest["stages"][name]["seconds"])

    manifest["status"] = "ok" if exit_code == EXIT_OK else "failed"
    manifest["exit_code"] = exit_code
    _write_manifest(manifest_path, manifest)
    return exit_code


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Counterfactually fair offline RL pipeline")
    parser.add_argument("--config", required=True, help="path to the YAML pipeline config")
    parser.add_argument("--output", default=None, help="output directory (overrides output_dir in the config)")
    parser.add_argument("--stage", default="pipeline", choices=[*STAGES, "pipeline"], help="stage to run")
    parser.add_argument("--verbose", action="store_true", help="log progress at INFO level")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        config = load_config(args.config)
    except ConfigurationError as exc:
        logger.error("%s", exc)
        return EXIT_CONFIG
    exit_code = run_pipeline(config, args.output, args.stage)
    output = Path(args.output or config.output_dir)
    if exit_code == EXIT_OK:
        print(f"Done. Artifacts in {output}")
        for name in (METRICS_TXT, COMPARISON_TXT):
            if (output / name).exists():
                print((output / name).read_text())
    else:
        print(f"Failed with exit code {exit_code}; see {output / MANIFEST}")
    return exit_code


if __name__ == "__main__":
    sys.exit(main())
