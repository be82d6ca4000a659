"""Episodic defense environment: campaign -> telemetry -> graph -> embedding -> belief.

The true attacker stage only ever leaves the environment through
``StepOutcome.info`` and episode traces, never through observations.

Trace export: one JSON object per step with keys
``t, k_true, action, raw_reward, reward, belief_argmax`` (plus ``k_before``,
``cost``, ``security``, ``fidelity``).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import campaign as cmp
from .encoder import EMBED_DIM, GnnEncoder
from .estimator import StageEstimator
from .provenance import CompactGraph, build_graph
from .reward import ACTIONS, N_ACTIONS, N_STAGES, RewardWeights, normalize, security_reward, \
    step_reward
from .telemetry import NoiseProfile, emit_window

OBS_DIM = EMBED_DIM + N_STAGES + N_ACTIONS
MITIGATION_MAX_STAGE = 4


class EnvError(RuntimeError):
    pass


@dataclass(frozen=True)
class Observation:
    g: np.ndarray
    p: np.ndarray
    prev_action: int

    def vector(self) -> np.ndarray:
        onehot = np.zeros(N_ACTIONS)
        onehot[self.prev_action] = 1.0
        return np.concatenate([self.g, self.p, onehot])


@dataclass
class EpisodeConfig:
    length_range: tuple[int, int] = (50, 100)
    playbook: str | None = None
    noise: NoiseProfile = field(default_factory=NoiseProfile)
    effects: cmp.ActionEffectModel = field(default_factory=cmp.default_effects)
    weight_mode: str = "stage_aware"
    delay_range: tuple[int, int] = (2, 8)
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.length_range
        if not 50 <= lo <= hi <= 100:
            raise ValueError(f"episode length range {self.length_range} outside 50..100")
        if not 1 <= self.delay_range[0] <= self.delay_range[1]:
            raise ValueError("delay range must start at >= 1")
        RewardWeights.for_mode(self.weight_mode)

    @property
    def weights(self) -> RewardWeights:
        return RewardWeights.for_mode(self.weight_mode)


@dataclass(frozen=True)
class StepOutcome:
    observation: Observation
    reward: float
    done: bool
    info: dict


class DefenseEnv:
    def __init__(self, config: EpisodeConfig, encoder: GnnEncoder | None,
                 estimator: StageEstimator | None, playbooks: list[cmp.Playbook] | None = None):
        self.config = config
        self.encoder = encoder
        self.estimator = estimator
        self.playbooks = playbooks if playbooks is not None else cmp.load_playbooks()
        if config.playbook is not None and config.playbook not in {b.id for b in self.playbooks}:
            raise ValueError(f"unknown playbook {config.playbook!r}")
        self.weights = config.weights
        self.done = True
        self.trace: list[dict] = []

    def reset(self, seed: int | None = None) -> Observation:
        cfg = self.config
        seed = cfg.seed if seed is None else seed
        self.seed = int(seed)
        setup, camp, tele = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))
        self._campaign_rng, self._telemetry_rng = camp, tele
        self.length = int(setup.integers(cfg.length_range[0], cfg.length_range[1] + 1))
        if cfg.playbook is None:
            base = self.playbooks[int(setup.integers(len(self.playbooks)))]
        else:
            base = next(b for b in self.playbooks if b.id == cfg.playbook)
        self.variant = cmp.generate_variant(base, int(setup.integers(2 ** 31)))
        self.delay = int(setup.integers(cfg.delay_range[0], cfg.delay_range[1] + 1))
        self.state = cmp.start_campaign(self.variant, self.delay)
        self.fidelity = 0.0
        self.t = 0
        self.max_stage = 0
        self.trace = []
        if self.estimator is not None:
            self.estimator.reset()
        self.done = False
        self.obs = self._observe(0, prev_action=0)
        return self.obs

    def _observe(self, window: int, prev_action: int) -> Observation:
        events = emit_window(self.state, self.config.noise, self.fidelity, window, self._telemetry_rng)
        self.last_graph = build_graph(events, window)
        if self.encoder is None:
            # graph-only mode used for dataset generation
            return Observation(np.zeros(EMBED_DIM), np.full(N_STAGES, 1.0 / N_STAGES), prev_action)
        g = self.encoder.encode(CompactGraph.from_graph(self.last_graph))
        p = self.estimator.infer(g)
        return Observation(g, p, prev_action)

    def step(self, action: int) -> StepOutcome:
        if self.done:
            raise EnvError("step() called on a finished episode; call reset()")
        if not 0 <= action < N_ACTIONS:
            raise ValueError(f"action {action} outside 0..{N_ACTIONS - 1}")
        eff = self.config.effects
        k_t = self.state.k_true
        self.fidelity = min(1.0, max(0.0, self.fidelity - eff.fidelity_decay) + eff.fidelity_boost[action])
        self.state = cmp.advance(self.state, action, eff, self._campaign_rng)
        k_next = self.state.k_true
        self.t += 1
        self.max_stage = max(self.max_stage, k_next)
        self.obs = self._observe(self.t, prev_action=action)
        raw = step_reward(k_t, k_next, action, self.weights)
        reward = normalize(raw, self.weights)
        self.done = self.t >= self.length or self.state.evicted
        info = {"k_true": k_next, "k_before": k_t, "raw_reward": raw, "cost": ACTIONS[action].cost,
                "security": security_reward(k_t, k_next), "fidelity": self.fidelity,
                "evicted": self.state.evicted}
        self.trace.append({"t": self.t, "k_true": k_next, "action": int(action), "raw_reward": raw,
                           "reward": reward, "belief_argmax": int(self.obs.p.argmax()),
                           "k_before": k_t, "cost": ACTIONS[action].cost,
                           "security": info["security"], "fidelity": self.fidelity})
        return StepOutcome(self.obs, reward, self.done, info)

    def setup(self) -> dict:
        """What reset() drew: independent of the defender, used to check pairing."""
        return {"seed": self.seed, "length": self.length, "delay": self.delay,
                "variant": self.variant.to_dict()}

    @property
    def mitigated(self) -> bool:
        return self.max_stage <= MITIGATION_MAX_STAGE


def write_trace(path, trace) -> None:
    keys = ("t", "k_true", "action", "raw_reward", "reward", "belief_argmax", "k_before", "cost",
            "security", "fidelity")
    with open(path, "w") as fh:
        for rec in trace:
            fh.write(json.dumps({k: rec[k] for k in keys}) + "\n")


@dataclass
class EnvFactory:
    """Picklable recipe for building identical environments in worker processes."""

    config: EpisodeConfig
    encoder: GnnEncoder | None = None
    estimator: StageEstimator | None = None
    playbooks: list | None = None

    def __call__(self) -> DefenseEnv:
        est = None
        if self.estimator is not None:
            # every environment owns its recurrent estimator state
            est = StageEstimator(hidden=self.estimator.cell.hidden)
            est.load_parameters(self.estimator.named_parameters())
        return DefenseEnv(self.config, self.encoder, est, self.playbooks)
