"""Defense action catalog and the stage-weighted reward law."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from importlib import resources

N_STAGES = 7
STAGE_NAMES = ("Normal", "Reconnaissance", "Initial Compromise", "Privilege Escalation",
               "Lateral Movement", "Command-and-Control", "Exfiltration")
STAGE_SHORT = ("Normal", "Recon", "InitAcc", "PrivEsc", "LatMov", "C2", "Exfil")
FAMILIES = ("mon", "acc", "cont", "rem")


@dataclass(frozen=True)
class DefenseAction:
    id: int
    family: str
    cost: float
    label: str


def _load_catalog() -> tuple[DefenseAction, ...]:
    text = resources.files("stagedefense.data").joinpath("actions.csv").read_text()
    rows = list(csv.DictReader(text.splitlines()))
    actions = tuple(DefenseAction(int(r["id"]), r["family"], float(r["cost"]), r["label"])
                    for r in rows)
    for i, a in enumerate(actions):
        if a.id != i or a.family not in FAMILIES or not 0.0 <= a.cost <= 1.0:
            raise ValueError(f"bad catalog row {a}")
    return actions


ACTIONS = _load_catalog()
N_ACTIONS = len(ACTIONS)
FAMILY_ACTIONS = tuple(tuple(a.id for a in ACTIONS if a.family == f) for f in FAMILIES)
ACTION_FAMILY = tuple(FAMILIES.index(a.family) for a in ACTIONS)
COSTS = tuple(a.cost for a in ACTIONS)
MAX_COST = max(COSTS)


def export_catalog(path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "family", "cost", "label"])
        for a in ACTIONS:
            w.writerow([a.id, a.family, f"{a.cost:.2f}", a.label])


@dataclass(frozen=True)
class RewardWeights:
    alpha: tuple[float, ...] = (0.3, 0.5, 0.8, 1.0, 1.3, 1.5, 2.0)
    beta: tuple[float, ...] = (0.0, 0.5, 0.7, 1.0, 1.3, 1.6, 2.0)
    lam: float = 0.1

    def __post_init__(self):
        if len(self.alpha) != N_STAGES or len(self.beta) != N_STAGES:
            raise ValueError("alpha and beta need one entry per stage (7)")
        if self.lam <= 0:
            raise ValueError("lambda must be positive")

    @classmethod
    def stage_unaware(cls, lam: float = 0.1) -> "RewardWeights":
        return cls((1.0,) * N_STAGES, (1.0,) * N_STAGES, lam)

    @classmethod
    def for_mode(cls, mode: str) -> "RewardWeights":
        if mode == "stage_aware":
            return cls()
        if mode == "stage_unaware":
            return cls.stage_unaware()
        raise ValueError(f"unknown weight mode {mode!r}")

    @property
    def divisor(self) -> float:
        # |security term| <= max alpha; |cost term| <= max beta * lam * max cost
        return max(max(self.alpha), max(self.beta) * self.lam * MAX_COST)


def _check_stage(k: int) -> None:
    if not 0 <= k < N_STAGES:
        raise ValueError(f"stage {k} outside 0..{N_STAGES - 1}")


def security_reward(k_t: int, k_next: int) -> float:
    _check_stage(k_t)
    _check_stage(k_next)
    if k_next < k_t:
        return 1.0
    if k_next == k_t:
        return 0.5
    return 0.0


def step_reward(k_t: int, k_next: int, action: DefenseAction | int, w: RewardWeights) -> float:
    """Stage-weighted reward; both weights are indexed by the decision-time stage ``k_t``."""
    if not isinstance(action, DefenseAction):
        action = ACTIONS[action]
    return w.alpha[k_t] * security_reward(k_t, k_next) - w.beta[k_t] * w.lam * action.cost


def normalize(r: float, w: RewardWeights) -> float:
    return r / w.divisor
