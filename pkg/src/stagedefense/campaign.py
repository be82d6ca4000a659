"""Scripted multi-stage attacker: playbooks, randomized variants, stage dynamics.

Playbook file format (YAML, one document per file)::

    id: pb01-web-to-db
    steps:
      - {stage: 1, dwell: 3, technique: T1046, host: 0, optional: false}
      ...

Rules checked on load: ``id`` is a non-empty string; ``steps`` is non-empty;
``stage`` is an int in 1..6, the first step is stage 1 and each later step
repeats or increments the previous stage by one; ``dwell`` is an int >= 1
(windows spent on the step); ``host`` is an int in ``0..n_hosts-1``;
``technique`` is a string; ``optional`` is a bool; every stage that appears
has at least one non-optional step.  Unknown keys are rejected.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .reward import ACTION_FAMILY, FAMILIES, N_ACTIONS, N_STAGES

N_HOSTS = 6
STAGE_FAMILIES = {1: ("mon",), 2: ("acc",), 3: ("acc", "cont"), 4: ("cont",), 5: ("cont",),
                  6: ("cont", "rem")}
# fidelity gained by playing each monitoring action (a_0..a_7); others add nothing
MONITOR_BOOST = (0.0, 0.2, 0.3, 0.15, 0.1, 0.15, 0.2, 0.25)


class PlaybookError(ValueError):
    pass


@dataclass(frozen=True)
class Step:
    stage: int
    dwell: int
    technique: str
    host: int
    optional: bool = False


@dataclass(frozen=True)
class Playbook:
    id: str
    steps: tuple[Step, ...]

    def __post_init__(self):
        validate_steps(self.id, self.steps)

    @property
    def max_stage(self) -> int:
        return max(s.stage for s in self.steps)

    def expanded_stages(self) -> list[int]:
        """Stage of every window the playbook occupies when nothing interferes."""
        return [s.stage for s in self.steps for _ in range(s.dwell)]

    def to_dict(self) -> dict:
        return {"id": self.id, "steps": [
            {"stage": s.stage, "dwell": s.dwell, "technique": s.technique, "host": s.host,
             "optional": s.optional} for s in self.steps]}


def validate_steps(pid, steps, n_hosts: int = N_HOSTS) -> None:
    if not isinstance(pid, str) or not pid:
        raise PlaybookError("playbook id must be a non-empty string")
    if not steps:
        raise PlaybookError(f"{pid}: no steps")
    prev = 0
    required = set()
    for i, s in enumerate(steps):
        if not isinstance(s.stage, int) or not 1 <= s.stage <= 6:
            raise PlaybookError(f"{pid} step {i}: stage {s.stage!r} not in 1..6")
        if s.stage not in (prev, prev + 1) or (i == 0 and s.stage != 1):
            raise PlaybookError(f"{pid} step {i}: stage {s.stage} breaks the 1,2,..,6 progression")
        if not isinstance(s.dwell, int) or s.dwell < 1:
            raise PlaybookError(f"{pid} step {i}: dwell must be an int >= 1")
        if not isinstance(s.host, int) or not 0 <= s.host < n_hosts:
            raise PlaybookError(f"{pid} step {i}: host {s.host!r} not in 0..{n_hosts - 1}")
        if not isinstance(s.technique, str) or not isinstance(s.optional, bool):
            raise PlaybookError(f"{pid} step {i}: technique must be str, optional bool")
        if not s.optional:
            required.add(s.stage)
        prev = s.stage
    missing = set(range(1, prev + 1)) - required
    if missing:
        raise PlaybookError(f"{pid}: stages {sorted(missing)} only have optional steps")


_STEP_KEYS = {"stage", "dwell", "technique", "host", "optional"}


def playbook_from_dict(doc) -> Playbook:
    if not isinstance(doc, dict) or set(doc) != {"id", "steps"}:
        raise PlaybookError(f"playbook document needs exactly the keys id, steps; got {doc!r:.80}")
    steps = []
    for i, raw in enumerate(doc["steps"] or []):
        if not isinstance(raw, dict):
            raise PlaybookError(f"{doc['id']} step {i}: not a mapping")
        unknown = set(raw) - _STEP_KEYS
        if unknown or not {"stage", "dwell", "technique", "host"} <= set(raw):
            raise PlaybookError(f"{doc['id']} step {i}: bad keys {sorted(raw)}")
        steps.append(Step(raw["stage"], raw["dwell"], raw["technique"], raw["host"],
                          raw.get("optional", False)))
    return Playbook(doc["id"], tuple(steps))


def load_playbook(path) -> Playbook:
    with open(path) as fh:
        return playbook_from_dict(yaml.safe_load(fh))


def load_playbooks(directory=None) -> list[Playbook]:
    """Load every ``*.yaml`` playbook, sorted by id.  Defaults to the shipped set."""
    if directory is None:
        root = resources.files("stagedefense.data").joinpath("playbooks")
        docs = [yaml.safe_load(p.read_text()) for p in root.iterdir() if p.name.endswith(".yaml")]
        books = [playbook_from_dict(d) for d in docs]
    else:
        books = [load_playbook(p) for p in Path(directory).glob("*.yaml")]
    if not books:
        raise PlaybookError(f"no playbooks found in {directory}")
    return sorted(books, key=lambda b: b.id)


def generate_variant(base: Playbook, seed: int, n_hosts: int = N_HOSTS,
                     drop_prob: float = 0.3, dwell_jitter: float = 0.5) -> Playbook:
    """Randomized copy of ``base``: jittered dwells, dropped optional steps, new targets."""
    rng = np.random.default_rng(seed)
    n = len(base.steps)
    scale = rng.uniform(1.0 - dwell_jitter, 1.0 + dwell_jitter, size=n)
    drop = rng.random(n) < drop_prob
    hosts = rng.integers(0, n_hosts, size=n)
    steps = []
    for s, sc, d, h in zip(base.steps, scale, drop, hosts):
        if s.optional and d:
            continue
        steps.append(Step(s.stage, max(1, int(round(s.dwell * sc))), s.technique, int(h), s.optional))
    return Playbook(f"{base.id}~{seed}", tuple(steps))


@dataclass
class ActionEffectModel:
    """Attacker response to defense actions.

    ``effectiveness[a, k]`` is the chance that action ``a`` knocks an attacker
    at stage ``k`` back one stage (column 0 is unused and kept at zero).
    """

    effectiveness: np.ndarray
    fidelity_boost: np.ndarray = field(default_factory=lambda: np.array(
        MONITOR_BOOST + (0.0,) * (N_ACTIONS - len(MONITOR_BOOST))))
    eviction_prob: float = 0.1
    restart_delay: int = 3
    fidelity_decay: float = 0.05

    def __post_init__(self):
        E = self.effectiveness
        if E.shape != (N_ACTIONS, N_STAGES) or np.any(E < 0) or np.any(E > 1):
            raise ValueError("effectiveness must be a [29, 7] matrix with entries in [0, 1]")
        if np.any(E[:, 0] != 0):
            raise ValueError("stage 0 column must be zero")
        if np.any(E[:8] != 0):
            raise ValueError("monitoring actions never regress the attacker")
        if not 0 <= self.eviction_prob <= 1 or self.restart_delay < 1:
            raise ValueError("bad eviction_prob / restart_delay")

    @classmethod
    def constant(cls, value: float, **kw) -> "ActionEffectModel":
        E = np.zeros((N_ACTIONS, N_STAGES))
        E[8:, 1:] = value
        return cls(E, **kw)


def default_effects(seed: int = 0, in_family=(0.6, 0.9), off_family=(0.0, 0.2),
                    **kw) -> ActionEffectModel:
    rng = np.random.default_rng(seed)
    E = np.zeros((N_ACTIONS, N_STAGES))
    for a in range(N_ACTIONS):
        fam = FAMILIES[ACTION_FAMILY[a]]
        for k in range(1, N_STAGES):
            lo_hi = in_family if fam in STAGE_FAMILIES[k] else off_family
            value = rng.uniform(*lo_hi)
            if fam != "mon":
                E[a, k] = value
    return ActionEffectModel(E, **kw)


@dataclass(frozen=True)
class CampaignState:
    playbook: Playbook
    cursor: int = -1
    k_true: int = 0
    compromised: frozenset = frozenset()
    elapsed: int = 0
    delay: int = 1
    evicted: bool = False

    @property
    def started(self) -> bool:
        return self.cursor >= 0

    @property
    def step(self) -> Step | None:
        return self.playbook.steps[self.cursor] if self.cursor >= 0 else None


def start_campaign(playbook: Playbook, delay: int = 1) -> CampaignState:
    """Campaign that opens with ``delay`` benign windows before the first step."""
    if delay < 1:
        raise ValueError("delay must be >= 1")
    return CampaignState(playbook, delay=delay)


def _at_cursor(state: CampaignState, cursor: int) -> CampaignState:
    steps = state.playbook.steps
    hosts = frozenset(s.host for s in steps[:cursor + 1])
    return replace(state, cursor=cursor, k_true=steps[cursor].stage, compromised=hosts, elapsed=0)


def advance(state: CampaignState, action: int, effects: ActionEffectModel,
            rng: np.random.Generator) -> CampaignState:
    """One window of attacker progress under defense ``action``.

    Always consumes exactly two uniforms from ``rng`` so that campaigns under
    different defenders stay aligned on the same random stream.
    """
    u_regress, u_evict = rng.random(2)
    if state.evicted:
        return state
    if not state.started:
        if state.delay > 1:
            return replace(state, delay=state.delay - 1)
        return _at_cursor(state, 0)

    k = state.k_true
    if u_regress < effects.effectiveness[action, k]:
        if k <= 2 and u_evict < effects.eviction_prob:
            return replace(state, cursor=-1, k_true=0, compromised=frozenset(), elapsed=0,
                           evicted=True)
        if k == 1:
            # knocked back before gaining a foothold: the playbook restarts later
            return replace(state, cursor=-1, k_true=0, compromised=frozenset(), elapsed=0,
                           delay=effects.restart_delay)
        steps = state.playbook.steps
        back = max(i for i in range(state.cursor) if steps[i].stage == k - 1)
        return _at_cursor(state, back)

    elapsed = state.elapsed + 1
    if elapsed >= state.step.dwell and state.cursor + 1 < len(state.playbook.steps):
        return _at_cursor(state, state.cursor + 1)
    return replace(state, elapsed=elapsed)
