"""Metrics, paired policy comparison and report emission.

All rewards and stage labels used here come from the simulator's ground
truth.  Stage F1 scores compare the estimator's belief argmax against the
true stage (a classification score, not a defense score).

Responsiveness: an escalation is a step ``t`` whose true stage after the
step exceeds the stage before it.  It is *answered* when any of the
actions at steps ``t+1 .. t+d`` belongs to access control, containment or
remediation.  Escalations too close to the end of an episode to observe a
full deadline window (and not answered in what is left) are dropped.  The
curve value at step ``t`` is the answered fraction among escalations at
steps ``<= t``.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .agent import Policy, collect, episode_seeds
from .env import MITIGATION_MAX_STAGE
from .reward import ACTION_FAMILY, COSTS, MAX_COST, N_STAGES
from .seeding import derive_rng

ATTACK_STAGES = tuple(range(1, N_STAGES))
DEFAULT_BUDGETS = tuple(round(0.1 * i, 1) for i in range(1, 11))
RESPONSIVENESS_LABEL = ("fraction of true-stage escalations answered by an access, containment "
                        "or remediation action within {d} steps")


# -- stage classification -----------------------------------------------------------

@dataclass
class StageF1:
    per_stage: dict[int, float | None]
    macro: float | None


def stage_f1(predicted, truth) -> StageF1:
    """One-vs-rest F1 for stages 1..6; stages absent from the truth are ``None``."""
    p = np.asarray(predicted, dtype=np.int64).ravel()
    y = np.asarray(truth, dtype=np.int64).ravel()
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.size} predictions vs {y.size} labels")
    per = {}
    for k in ATTACK_STAGES:
        support = int((y == k).sum())
        if support == 0:
            per[k] = None
            continue
        tp = int(((p == k) & (y == k)).sum())
        fp = int(((p == k) & (y != k)).sum())
        fn = support - tp
        per[k] = 2 * tp / (2 * tp + fp + fn)
    present = [v for v in per.values() if v is not None]
    return StageF1(per, float(np.mean(present)) if present else None)


# -- episode-level metrics ----------------------------------------------------------

def mitigation_rate(traces) -> float:
    """Share of episodes whose true stage never exceeded lateral movement."""
    traces = list(traces)
    if not traces:
        raise ValueError("no episode traces")
    ok = [max((r["k_true"] for r in tr), default=0) <= MITIGATION_MAX_STAGE for tr in traces]
    return float(np.mean(ok))


def responsiveness(traces, deadline: int = 2, n_steps: int | None = None) -> np.ndarray:
    """Cumulative answered-escalation fraction by step index (NaN before any escalation)."""
    if deadline < 1:
        raise ValueError("deadline must be >= 1")
    events = []     # (step index, answered)
    horizon = 0
    for tr in traces:
        horizon = max(horizon, len(tr))
        for i, rec in enumerate(tr):
            if rec["k_true"] <= rec["k_before"]:
                continue
            window = tr[i + 1:i + 1 + deadline]
            answered = any(ACTION_FAMILY[r["action"]] != 0 for r in window)
            if answered or len(window) == deadline:
                events.append((i, answered))
    n = horizon if n_steps is None else n_steps
    hits = np.zeros(n)
    total = np.zeros(n)
    for i, answered in events:
        if i < n:
            total[i] += 1
            hits[i] += answered
    ch, ct = np.cumsum(hits), np.cumsum(total)
    return np.divide(ch, ct, out=np.full(n, np.nan), where=ct > 0)


def security_gain(traces) -> float:
    """Mean per-step security reward, averaged over episodes."""
    return float(np.mean([np.mean([r["security"] for r in tr]) for tr in traces]))


def mean_return(traces) -> float:
    return float(np.mean([sum(r["reward"] for r in tr) for tr in traces]))


# -- cost-capped rollouts -----------------------------------------------------------

class CostCap:
    """Action filter enforcing a cumulative cost budget of ``fraction * length * max cost``.

    Once the next action would exceed the budget only ``a_0`` is played.
    """

    def __init__(self, fraction: float):
        if fraction < 0:
            raise ValueError("budget fraction must be >= 0")
        self.fraction = fraction
        self.spent = 0.0

    def __call__(self, env, action: int) -> int:
        if env.t == 0:
            self.spent = 0.0
        cap = self.fraction * env.length * MAX_COST
        if action != 0 and self.spent + COSTS[action] > cap:
            action = 0
        self.spent += COSTS[action]
        return action


def cost_frontier(policy: Policy, make_env, fractions=DEFAULT_BUDGETS, n_episodes: int = 100,
                  seed: int = 0, workers: int = 1, greedy: bool = False) -> list[tuple[float, float]]:
    """``(budget fraction, mean security gain)`` for each fraction, on shared episode seeds."""
    seeds = episode_seeds(seed, "frontier", n_episodes)
    out = []
    for f in fractions:
        eps = collect(policy, make_env, seeds, workers, greedy, CostCap(float(f)))
        out.append((float(f), security_gain([e.trace for e in eps])))
    return out


# -- training convergence -----------------------------------------------------------

def convergence_summary(returns, window: int = 50, fraction: float = 0.9) -> dict:
    """Episodes until the moving-average return covers ``fraction`` of its total rise.

    The plateau return is the mean over the last ``window`` episodes.
    """
    r = np.asarray(returns, dtype=np.float64)
    if r.size == 0:
        raise ValueError("no returns")
    w = max(1, min(window, r.size))
    ma = np.convolve(r, np.ones(w) / w, mode="valid")
    start, plateau = float(ma[0]), float(r[-w:].mean())
    if plateau <= start or np.isclose(plateau, start, rtol=1e-12, atol=1e-12):
        reached = 0
    else:
        target = start + fraction * (plateau - start)
        reached = int(np.argmax(ma >= target)) + w
    return {"episodes_to_plateau": reached, "plateau_return": plateau, "initial_return": start,
            "window": w, "fraction": fraction}


# -- paired comparison --------------------------------------------------------------

@dataclass
class EvaluationReport:
    name: str
    n_episodes: int
    mean_return: float
    mitigation_rate: float
    security_gain: float
    stage_f1: StageF1
    frontier: list[tuple[float, float]]
    responsiveness: list[float]
    convergence: dict | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_f1"] = {"per_stage": {str(k): v for k, v in self.stage_f1.per_stage.items()},
                         "macro": self.stage_f1.macro}
        d["responsiveness"] = [None if math.isnan(x) else x for x in self.responsiveness]
        return d


@dataclass
class Delta:
    metric: str
    estimate: float
    low: float
    high: float


@dataclass
class Comparison:
    reports: dict[str, EvaluationReport]
    deltas: dict[str, list[Delta]]
    metadata: dict = field(default_factory=dict)
    episodes: dict[str, list] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"metadata": self.metadata,
                "reports": {k: r.to_dict() for k, r in self.reports.items()},
                "deltas": {k: [asdict(d) for d in v] for k, v in self.deltas.items()}}


def bootstrap_interval(diffs, n_resamples: int = 1000, rng=None, level: float = 0.95):
    """Percentile bootstrap interval for the mean of paired differences."""
    diffs = np.asarray(diffs, dtype=np.float64)
    rng = rng if rng is not None else np.random.default_rng(0)
    idx = rng.integers(0, diffs.size, size=(n_resamples, diffs.size))
    means = diffs[idx].mean(axis=1)
    tail = (1 - level) / 2
    return float(np.quantile(means, tail)), float(np.quantile(means, 1 - tail))


def setup_fingerprint(episode) -> str:
    """Hash of what the environment drew at reset, independent of the defender."""
    return hashlib.sha256(json.dumps(episode.setup, sort_keys=True).encode()).hexdigest()


def _per_episode(traces):
    ret = np.array([sum(r["reward"] for r in tr) for tr in traces])
    mit = np.array([max((r["k_true"] for r in tr), default=0) <= MITIGATION_MAX_STAGE
                    for tr in traces], dtype=np.float64)
    return {"return": ret, "mitigation": mit}


def summarize(traces: dict[str, list], metadata: dict, frontiers: dict | None = None,
              convergence: dict | None = None, baseline: str | None = None) -> Comparison:
    """Build the comparison from per-policy traces (paired by position).

    ``metadata`` must hold ``seed``, ``responsiveness_deadline`` and
    ``bootstrap_resamples``.  Deltas are ``policy - baseline`` for every
    other policy; the baseline defaults to the last policy.
    """
    names = list(traces)
    sizes = {len(t) for t in traces.values()}
    if len(sizes) != 1:
        raise ValueError("policies were evaluated on different numbers of episodes")
    deadline = metadata["responsiveness_deadline"]
    reports = {}
    for name in names:
        trs = traces[name]
        pred = np.concatenate([[r["belief_argmax"] for r in tr] for tr in trs])
        true = np.concatenate([[r["k_true"] for r in tr] for tr in trs])
        reports[name] = EvaluationReport(
            name, len(trs), mean_return(trs), mitigation_rate(trs), security_gain(trs),
            stage_f1(pred, true), [tuple(p) for p in (frontiers or {}).get(name, [])],
            responsiveness(trs, deadline).tolist(), (convergence or {}).get(name))
    base = baseline if baseline is not None else names[-1]
    metrics = {n: _per_episode(traces[n]) for n in names}
    rng = derive_rng(metadata["seed"], "bootstrap")
    deltas = {}
    for name in names:
        if name == base:
            continue
        out = []
        for metric in ("return", "mitigation"):
            d = metrics[name][metric] - metrics[base][metric]
            lo, hi = bootstrap_interval(d, metadata["bootstrap_resamples"], rng)
            out.append(Delta(metric, float(d.mean()), lo, hi))
        deltas[f"{name}-{base}"] = out
    return Comparison(reports, deltas, dict(metadata, baseline=base), dict(traces))


def compare(policies: dict[str, Policy], make_env, n_episodes: int = 200, seed: int = 0,
            env_configs: dict[str, dict] | None = None, fractions=DEFAULT_BUDGETS,
            frontier_episodes: int = 100, deadline: int = 2, workers: int = 1,
            greedy: bool = False, n_resamples: int = 1000, training_returns=None,
            baseline: str | None = None) -> Comparison:
    """Evaluate every policy on the same held-out episode seeds.

    ``env_configs`` maps policy name to the environment config it was
    trained under (reward weighting excluded); any difference is an error.
    """
    if not policies:
        raise ValueError("no policies to compare")
    if env_configs:
        ref_name, ref = next(iter(env_configs.items()))
        for name, cfg in env_configs.items():
            if cfg != ref:
                raise ValueError(f"environment config of {name!r} differs from {ref_name!r}")
    seeds = episode_seeds(seed, "evaluate", n_episodes)
    names = list(policies)
    traces, frontiers, fingerprints = {}, {}, {}
    for name in names:
        eps = collect(policies[name], make_env, seeds, workers, greedy)
        traces[name] = [e.trace for e in eps]
        fingerprints[name] = [setup_fingerprint(e) for e in eps]
        if fractions:
            frontiers[name] = cost_frontier(policies[name], make_env, fractions, frontier_episodes,
                                            seed, workers, greedy)
    for name in names[1:]:
        if fingerprints[name] != fingerprints[names[0]]:
            raise RuntimeError(f"episode setups of {name!r} differ from {names[0]!r}; pairing broken")
    conv = {n: convergence_summary(r) for n, r in (training_returns or {}).items() if n in policies}
    meta = {"n_episodes": n_episodes, "seed": seed,
            "budget_fractions": [float(f) for f in (fractions or ())],
            "frontier_episodes": frontier_episodes, "responsiveness_deadline": deadline,
            "responsiveness_definition": RESPONSIVENESS_LABEL.format(d=deadline),
            "stage_f1_definition": "stage-classification F1 of the estimator belief argmax",
            "reward_source": "ground-truth stages", "greedy": greedy,
            "bootstrap_resamples": n_resamples,
            "setup_fingerprint": hashlib.sha256("".join(fingerprints[names[0]]).encode()).hexdigest()}
    return summarize(traces, meta, frontiers, conv, baseline)


def load_comparison(directory) -> Comparison:
    """Rebuild a comparison from ``report.json`` metadata and ``traces.jsonl``."""
    from pathlib import Path
    d = Path(directory)
    saved = json.loads((d / "report.json").read_text())
    traces: dict[str, list] = {}
    with open(d / "traces.jsonl") as fh:
        for line in fh:
            rec = json.loads(line)
            traces.setdefault(rec["policy"], []).append(rec["steps"])
    reports = saved["reports"]
    frontiers = {n: r["frontier"] for n, r in reports.items()}
    conv = {n: r["convergence"] for n, r in reports.items() if r["convergence"] is not None}
    meta = dict(saved["metadata"])
    return summarize(traces, meta, frontiers, conv, meta.pop("baseline"))


# -- emission -----------------------------------------------------------------------

def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "  -  "
    return f"{x:.3f}"


def text_report(cmp: Comparison) -> str:
    lines = ["Stage-classification F1 (belief argmax vs true stage)",
             "policy            " + " ".join(f"{s:>6}" for s in ("Recon", "Init", "PrivE", "LatM",
                                                                  "C2", "Exfil", "Avg"))]
    for name, r in cmp.reports.items():
        vals = [r.stage_f1.per_stage[k] for k in ATTACK_STAGES] + [r.stage_f1.macro]
        lines.append(f"{name:<18}" + " ".join(f"{_fmt(v):>6}" for v in vals))
    lines += ["", "policy             return  mitigation  security-gain  plateau-episode"]
    for name, r in cmp.reports.items():
        plateau = r.convergence["episodes_to_plateau"] if r.convergence else None
        lines.append(f"{name:<18} {r.mean_return:7.3f}  {r.mitigation_rate:10.3f}  "
                     f"{r.security_gain:13.3f}  {plateau if plateau is not None else '-':>15}")
    if any(r.frontier for r in cmp.reports.values()):
        lines += ["", "Security gain by budget fraction"]
        fr = [f for f, _ in next(r for r in cmp.reports.values() if r.frontier).frontier]
        lines.append("policy            " + " ".join(f"{f:>6.1f}" for f in fr))
        for name, r in cmp.reports.items():
            lines.append(f"{name:<18}" + " ".join(f"{g:6.3f}" for _, g in r.frontier))
    lines += ["", "Paired deltas (mean, 95% bootstrap interval)"]
    for pair, ds in cmp.deltas.items():
        for d in ds:
            lines.append(f"{pair:<28} {d.metric:<11} {d.estimate:+.3f}  [{d.low:+.3f}, {d.high:+.3f}]")
    lines += ["", f"Responsiveness: {cmp.metadata.get('responsiveness_definition', '')}",
              f"Rewards computed from {cmp.metadata.get('reward_source', '')}."]
    return "\n".join(lines) + "\n"


def svg_line_chart(series: dict[str, tuple[list[float], list[float]]], title: str, xlabel: str,
                   ylabel: str, width: int = 480, height: int = 320) -> str:
    """Minimal deterministic SVG line chart; NaN values break the line."""
    pad = 48
    xs = [x for s in series.values() for x, y in zip(*s) if not _bad(y)]
    ys = [y for s in series.values() for y in s[1] if not _bad(y)]
    x0, x1 = (min(xs), max(xs)) if xs else (0.0, 1.0)
    y0, y1 = (min(ys + [0.0]), max(ys + [1.0])) if ys else (0.0, 1.0)
    x1 = x1 if x1 > x0 else x0 + 1
    y1 = y1 if y1 > y0 else y0 + 1
    sx = lambda x: pad + (x - x0) / (x1 - x0) * (width - 2 * pad)  # noqa: E731
    sy = lambda y: height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)  # noqa: E731
    colors = ("#1b6ca8", "#c23b22", "#3a7d44", "#7d3c98", "#b9770e")
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="16" text-anchor="middle" font-size="13">{title}</text>',
           f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
           f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
           f'<text x="{width / 2:.1f}" y="{height - 12}" text-anchor="middle">{xlabel}</text>',
           f'<text x="14" y="{height / 2:.1f}" text-anchor="middle" '
           f'transform="rotate(-90 14 {height / 2:.1f})">{ylabel}</text>',
           f'<text x="{pad - 4}" y="{height - pad + 4}" text-anchor="end">{y0:.2f}</text>',
           f'<text x="{pad - 4}" y="{pad + 4}" text-anchor="end">{y1:.2f}</text>',
           f'<text x="{pad}" y="{height - pad + 16}" text-anchor="middle">{x0:g}</text>',
           f'<text x="{width - pad}" y="{height - pad + 16}" text-anchor="middle">{x1:g}</text>']
    for i, (name, (sxs, sys_)) in enumerate(series.items()):
        color = colors[i % len(colors)]
        segments, cur = [], []
        for x, y in zip(sxs, sys_):
            if _bad(y):
                if cur:
                    segments.append(cur)
                cur = []
            else:
                cur.append(f"{sx(x):.2f},{sy(y):.2f}")
        if cur:
            segments.append(cur)
        for seg in segments:
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{" ".join(seg)}"/>')
        out.append(f'<text x="{width - pad + 2}" y="{pad + 14 * i}" fill="{color}">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _bad(y) -> bool:
    return y is None or (isinstance(y, float) and math.isnan(y))


def write_outputs(cmp: Comparison, directory, training_returns=None) -> list[str]:
    """Write the text and JSON reports plus SVG curves into ``directory``; returns file names."""
    from pathlib import Path
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = {"report.txt": text_report(cmp),
             "report.json": json.dumps(cmp.to_dict(), indent=2, sort_keys=True) + "\n"}
    if any(r.frontier for r in cmp.reports.values()):
        files["frontier.svg"] = svg_line_chart(
            {n: ([f for f, _ in r.frontier], [g for _, g in r.frontier]) for n, r in cmp.reports.items()},
            "Security gain vs budget", "budget fraction of C_max", "mean security reward")
    files["responsiveness.svg"] = svg_line_chart(
        {n: (list(range(1, len(r.responsiveness) + 1)), r.responsiveness)
         for n, r in cmp.reports.items()},
        "Responsiveness", "step index", f"answered within {cmp.metadata['responsiveness_deadline']}")
    if training_returns:
        curves = {}
        for n, rets in training_returns.items():
            r = np.asarray(rets, dtype=np.float64)
            w = max(1, min(50, r.size))
            ma = np.convolve(r, np.ones(w) / w, mode="valid")
            curves[n] = (list(range(w, r.size + 1)), ma.tolist())
        files["convergence.svg"] = svg_line_chart(curves, "Training return (moving average)",
                                                  "episode", "normalized return")
    for name, text in files.items():
        (d / name).write_text(text)
    with open(d / "traces.jsonl", "w") as fh:
        for name, traces in cmp.episodes.items():
            for i, tr in enumerate(traces):
                fh.write(json.dumps({"policy": name, "episode": i, "steps": tr}, sort_keys=True) + "\n")
    return sorted([*files, "traces.jsonl"])
