"""Pipeline configuration: a versioned YAML file validated with pydantic.

Example (see ``configs/demo.yaml``)::

    schema_version: 1
    data: {kind: demo, N: 500, T: 10, seed: 1}
    split: {test_fraction: 0.2, seed: 2}
    preprocessor: {cross_folds: 5, fold_seed: 3, reg_spec: {model_type: nn, seed: 4}}
    agent: {gamma: 0.9, max_iter: 100}
    environment: {state_spec: {model_type: linear}, reward_spec: {model_type: linear}}
    evaluation: {num_reps: 10, seed: 8}

Every stochastic component needs an explicit seed; a missing one is a
validation error.
"""

from __future__ import annotations

import os
from typing import Annotated, Literal, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, PositiveInt, ValidationError, model_validator

from environment import DemoEnvParams
from errors import ConfigurationError
from func_approx import RegressorSpec

SCHEMA_VERSION = 1


class _Section(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class CsvSource(_Section):
    kind: Literal["csv"]
    path: str
    z_labels: tuple[str, ...]
    state_labels: tuple[str, ...]
    action_label: str = "action"
    reward_label: str = "reward"
    id_label: str = "ID"
    T: PositiveInt
    num_actions: PositiveInt = 2


class DemoSource(_Section):
    """Trajectories sampled from the demo environment under a uniform random behavior policy."""

    kind: Literal["demo"]
    N: PositiveInt
    T: PositiveInt
    seed: int
    setting: Literal["default", "benchmark"] = "default"
    params: DemoEnvParams | None = None


DataSource = Annotated[Union[CsvSource, DemoSource], Field(discriminator="kind")]


class SplitSection(_Section):
    test_fraction: float = Field(0.2, gt=0.0, lt=1.0)
    seed: int


class PreprocessorSection(_Section):
    z_space: tuple[tuple[float, ...], ...] | None = None
    cross_folds: PositiveInt = 5
    mode: str = "single"
    fold_seed: int
    reward_weighting: Literal["uniform", "marginal"] = "uniform"
    reg_spec: RegressorSpec = RegressorSpec(model_type="linear")


class AgentSection(_Section):
    gamma: float = Field(ge=0.0, lt=1.0)
    max_iter: PositiveInt = 100
    tolerance: float = Field(1e-4, gt=0.0)
    terminal_bootstrap: bool = False
    reg_spec: RegressorSpec = RegressorSpec(model_type="linear")


class EnvironmentSection(_Section):
    state_spec: RegressorSpec = RegressorSpec(model_type="linear")
    reward_spec: RegressorSpec = RegressorSpec(model_type="linear")


class EvaluationSection(_Section):
    num_reps: PositiveInt = 10
    seed: int
    fqe_reg_spec: RegressorSpec = RegressorSpec(model_type="linear")
    fqe_max_iter: PositiveInt = 100
    environment: Literal["simulated", "true"] = "simulated"
    compare: bool = True


class PipelineConfig(_Section):
    schema_version: Literal[1]
    data: DataSource
    split: SplitSection
    preprocessor: PreprocessorSection
    agent: AgentSection
    environment: EnvironmentSection = EnvironmentSection()
    evaluation: EvaluationSection
    output_dir: str = "runs/demo"

    @model_validator(mode="after")
    def _explicit_seeds(self) -> "PipelineConfig":
        specs = {
            "preprocessor.reg_spec": self.preprocessor.reg_spec,
            "agent.reg_spec": self.agent.reg_spec,
            "environment.state_spec": self.environment.state_spec,
            "environment.reward_spec": self.environment.reward_spec,
            "evaluation.fqe_reg_spec": self.evaluation.fqe_reg_spec,
        }
        for name, spec in specs.items():
            if spec.model_type == "nn" and "seed" not in spec.model_fields_set:
                raise ValueError(f"{name}.seed is required for nn models")
        if self.evaluation.environment == "true" and self.data.kind != "demo":
            raise ValueError("evaluation.environment='true' needs the demo data source")
        return self

    def seeds(self) -> dict[str, int]:
        """Every seed the pipeline consumes, for the run manifest."""
        seeds = {
            "split": self.split.seed,
            "preprocessor.fold_seed": self.preprocessor.fold_seed,
            "evaluation": self.evaluation.seed,
            "preprocessor.reg_spec": self.preprocessor.reg_spec.seed,
            "agent.reg_spec": self.agent.reg_spec.seed,
            "environment.state_spec": self.environment.state_spec.seed,
            "environment.reward_spec": self.environment.reward_spec.seed,
            "evaluation.fqe_reg_spec": self.evaluation.fqe_reg_spec.seed,
        }
        if isinstance(self.data, DemoSource):
            seeds["data"] = self.data.seed
        return seeds


def parse_config(raw: object) -> PipelineConfig:
    if not isinstance(raw, dict):
        raise ConfigurationError("config must be a mapping")
    if raw.get("schema_version") != SCHEMA_VERSION:
        raise ConfigurationError(f"unsupported schema_version {raw.get('schema_version')!r}, expected {SCHEMA_VERSION}")
    try:
        return PipelineConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigurationError(f"invalid config:\n{exc}") from exc


def load_config(path: str | os.PathLike) -> PipelineConfig:
    try:
        with open(path, encoding="utf-8") as handle:
            raw = yaml.safe_load(handle)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {os.fspath(path)}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"config {os.fspath(path)} is not valid YAML: {exc}") from exc
    return parse_config(raw)
