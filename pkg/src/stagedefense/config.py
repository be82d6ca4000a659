"""Experiment configuration: one YAML file, validated, unknown keys rejected.

Every block is optional; missing values take the defaults below.  The
fully resolved config is what every command writes as ``config.yaml``.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator

from . import campaign as cmp
from .agent import PpoConfig
from .env import EpisodeConfig
from .evaluation import DEFAULT_BUDGETS
from .telemetry import NoiseProfile


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class NoiseBlock(_Strict):
    benign_rate: float = Field(20.0, ge=0)
    attack_multiplier: tuple[float, float, float, float, float, float, float] = (
        0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
    false_positive_rate: float = Field(0.01, ge=0, le=1)
    true_positive_rate: float = Field(0.6, ge=0, le=1)
    n_hosts: int = Field(cmp.N_HOSTS, ge=1)


class EffectsBlock(_Strict):
    seed: int = 0
    in_family: tuple[float, float] = (0.6, 0.9)
    off_family: tuple[float, float] = (0.0, 0.2)
    eviction_prob: float = Field(0.1, ge=0, le=1)
    restart_delay: int = Field(3, ge=1)
    fidelity_decay: float = Field(0.05, ge=0, le=1)


class EnvironmentBlock(_Strict):
    playbook_dir: str | None = None
    playbook: str | None = None
    length_range: tuple[int, int] = (50, 100)
    delay_range: tuple[int, int] = (2, 8)
    weight_mode: str = "stage_aware"
    noise: NoiseBlock = NoiseBlock()
    effects: EffectsBlock = EffectsBlock()

    @field_validator("weight_mode")
    @classmethod
    def _mode(cls, v):
        if v not in ("stage_aware", "stage_unaware"):
            raise ValueError("weight_mode must be stage_aware or stage_unaware")
        return v


class EstimatorBlock(_Strict):
    dataset_episodes: int = Field(500, ge=1)
    defense_fraction: float = Field(0.5, ge=0, le=1)
    epochs: int = Field(10, ge=1)
    lr: float = Field(5e-3, gt=0)
    batch_episodes: int = Field(16, ge=1)
    holdout: float = Field(0.2, gt=0, lt=1)


class AgentBlock(_Strict):
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.2
    entropy_coef: float = Field(0.02, ge=0.01, le=0.05)
    value_coef: float = 0.5
    lr: float = 3e-4
    lr_decay: float = 0.99
    batch_size: int = Field(4096, ge=1)
    minibatch_size: int = Field(512, ge=1)
    epochs: int = Field(5, ge=1)
    total_episodes: int = Field(2000, ge=1)
    max_grad_norm: float = Field(0.5, gt=0)


class EvaluationBlock(_Strict):
    n_episodes: int = Field(200, ge=1)
    budgets: tuple[float, ...] = DEFAULT_BUDGETS
    frontier_episodes: int = Field(100, ge=1)
    deadline: int = Field(2, ge=1)
    greedy: bool = False
    bootstrap_resamples: int = Field(1000, ge=1)


class ExperimentConfig(_Strict):
    seed: int = 0
    out: str = "runs/default"
    parallel: int | None = Field(None, ge=1)
    environment: EnvironmentBlock = EnvironmentBlock()
    estimator: EstimatorBlock = EstimatorBlock()
    agent: AgentBlock = AgentBlock()
    evaluation: EvaluationBlock = EvaluationBlock()

    def episode_config(self, weight_mode: str | None = None) -> EpisodeConfig:
        e = self.environment
        eff = e.effects
        return EpisodeConfig(
            length_range=tuple(e.length_range), playbook=e.playbook,
            noise=NoiseProfile(**e.noise.model_dump()),
            effects=cmp.default_effects(eff.seed, eff.in_family, eff.off_family,
                                        eviction_prob=eff.eviction_prob,
                                        restart_delay=eff.restart_delay,
                                        fidelity_decay=eff.fidelity_decay),
            weight_mode=weight_mode or e.weight_mode, delay_range=tuple(e.delay_range), seed=self.seed)

    def ppo_config(self) -> PpoConfig:
        return PpoConfig(**self.agent.model_dump())

    def playbooks(self):
        return cmp.load_playbooks(self.environment.playbook_dir)

    def environment_fingerprint(self) -> str:
        """Hash of the environment block with the reward weighting left out."""
        d = self.environment.model_dump(exclude={"weight_mode"})
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def to_yaml(self) -> str:
        return yaml.safe_dump(json.loads(self.model_dump_json()), sort_keys=True)


def load_config(path=None, **overrides) -> ExperimentConfig:
    """Read ``path`` (if any), apply top-level ``overrides`` that are not None, validate."""
    data = {}
    if path is not None:
        text = Path(path).read_text()
        data = yaml.safe_load(text) or {}
        if not isinstance(data, dict):
            raise ValueError(f"{path}: config must be a mapping")
    data.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.model_validate(data)
