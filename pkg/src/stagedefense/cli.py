"""Command-line driver: dataset generation, estimator and agent training, evaluation.

Output layout under ``--out``::

    config.yaml           resolved configuration (rewritten by every command)
    dataset/              labeled episodes
    estimator/            checkpoint.sdb, loss.jsonl, heldout_f1.json
    agent-<mode>/         policy.sdb, header.json, log.jsonl, convergence.json
    eval/                 report.txt, report.json, traces.jsonl, *.svg

Every stage writes into ``<name>.partial`` and renames it when done.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import agent as ag
from . import dataset as ds
from . import evaluation as ev
from .checkpoint import CheckpointError
from .config import ExperimentConfig, load_config
from .encoder import GnnEncoder
from .env import EnvFactory
from .estimator import StageEstimator, load_perception, predict, save_perception, train_estimator
from .reward import RewardWeights
from .seeding import derive_rng, derive_seed

log = logging.getLogger("stagedefense")


class CommandError(RuntimeError):
    pass


@contextmanager
def staged_dir(final: Path):
    """Yield a temp directory that replaces ``final`` only if the block succeeds."""
    tmp = final.with_name(final.name + ".partial")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if final.exists():
        shutil.rmtree(final)
    os.replace(tmp, final)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def echo_config(cfg: ExperimentConfig, workers: int) -> Path:
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.yaml").write_text(cfg.to_yaml() + f"# parallel workers: {workers}\n")
    except OSError as exc:
        raise CommandError(f"cannot write to output directory {out}: {exc}") from exc
    return out


# -- commands -----------------------------------------------------------------------

def cmd_gen_dataset(cfg: ExperimentConfig, workers: int = 1) -> list[int]:
    out = Path(cfg.out)
    books = cfg.playbooks()
    records = ds.generate(cfg.episode_config(), cfg.estimator.dataset_episodes, cfg.seed,
                          cfg.estimator.defense_fraction, books)
    ds.save(records, out / "dataset")
    counts = ds.label_counts(records)
    print("label counts by stage: " + " ".join(f"{k}:{c}" for k, c in enumerate(counts)))
    return counts


def cmd_train_estimator(cfg: ExperimentConfig, workers: int = 1) -> dict:
    out = Path(cfg.out)
    try:
        episodes, _ = ds.load(out / "dataset")
    except FileNotFoundError as exc:
        raise CommandError(f"missing dataset: run gen-dataset first ({exc})") from exc
    e = cfg.estimator
    train_idx, hold_idx = ds.split(len(episodes), derive_seed(cfg.seed, "split"), e.holdout)
    init = derive_rng(cfg.seed, "estimator-init")
    enc, est = GnnEncoder(init), StageEstimator(init)
    result = train_estimator(est, enc, [episodes[i] for i in train_idx], e.epochs,
                             derive_rng(cfg.seed, "estimator-train"), lr=e.lr,
                             batch_episodes=e.batch_episodes)
    if not np.all(np.isfinite(result.loss_curve)):
        raise CommandError("estimator loss diverged")
    held = [episodes[i] for i in hold_idx]
    pred = np.concatenate(predict(est, enc, held))
    truth = np.concatenate([ep.labels for ep in held])
    f1 = ev.stage_f1(pred, truth)
    summary = {"per_stage": {str(k): v for k, v in f1.per_stage.items()}, "macro": f1.macro,
               "heldout_episodes": len(held), "definition": "stage-classification F1"}
    with staged_dir(out / "estimator") as tmp:
        save_perception(tmp / "checkpoint.sdb", enc, est, {"epochs": e.epochs, "seed": cfg.seed})
        with open(tmp / "loss.jsonl", "w") as fh:
            for i, loss in enumerate(result.loss_curve):
                fh.write(json.dumps({"epoch": i, "loss": loss}) + "\n")
        _write_json(tmp / "heldout_f1.json", summary)
    print(f"held-out macro F1 {f1.macro!r}")
    return summary


def _perception(out: Path):
    path = out / "estimator" / "checkpoint.sdb"
    if not path.exists():
        raise CommandError(f"missing estimator checkpoint {path}: run train-estimator first")
    enc, est, _ = load_perception(path)
    return enc, est


def cmd_train_agent(cfg: ExperimentConfig, mode: str, workers: int = 1) -> ag.TrainResult:
    out = Path(cfg.out)
    arch, weighting = ag.mode_arch(mode), ag.mode_weighting(mode)
    enc, est = _perception(out)
    factory = EnvFactory(cfg.episode_config(weighting), enc, est, cfg.playbooks())
    weights = RewardWeights.for_mode(weighting)
    header = {"mode": mode, "arch": arch, "weight_mode": weighting, "alpha": list(weights.alpha),
              "beta": list(weights.beta), "lambda": weights.lam, "seed": cfg.seed,
              "ppo": cfg.agent.model_dump(), "environment": cfg.environment_fingerprint(),
              "parallel": workers}
    if weighting == "stage_unaware":
        assert all(a == 1.0 for a in weights.alpha) and all(b == 1.0 for b in weights.beta)
    result = ag.train(factory, cfg.ppo_config(), derive_seed(cfg.seed, "agent"),
                      arch, workers)
    conv = ev.convergence_summary(result.returns)
    with staged_dir(out / f"agent-{mode}") as tmp:
        ag.save_policy(tmp / "policy.sdb", result.policy, mode,
                       {"environment": cfg.environment_fingerprint(), "seed": cfg.seed})
        _write_json(tmp / "header.json", header)
        ag.write_log(tmp / "log.jsonl", result.log)
        _write_json(tmp / "convergence.json", conv)
    print(f"{mode}: {len(result.log)} episodes, plateau return {conv['plateau_return']:.4f}")
    return result


def cmd_evaluate(cfg: ExperimentConfig, workers: int = 1, modes=ag.MODES) -> ev.Comparison:
    out = Path(cfg.out)
    enc, est = _perception(out)
    policies, env_cfgs, returns = {}, {}, {}
    for mode in modes:
        path = out / f"agent-{mode}" / "policy.sdb"
        if not path.exists():
            continue
        policy, meta = ag.load_policy(path)
        if meta.get("mode") != mode:
            raise CheckpointError(f"{path} holds mode {meta.get('mode')!r}, expected {mode!r}")
        policies[mode] = policy
        env_cfgs[mode] = {"environment": meta.get("environment")}
        with open(out / f"agent-{mode}" / "log.jsonl") as fh:
            returns[mode] = [json.loads(line)["return"] for line in fh]
    if not policies:
        raise CommandError(f"no policy checkpoints under {out}")
    current = cfg.environment_fingerprint()
    for mode, c in env_cfgs.items():
        if c["environment"] != current:
            raise CommandError(f"policy {mode!r} was trained under a different environment config")
    e = cfg.evaluation
    factory = EnvFactory(cfg.episode_config("stage_aware"), enc, est, cfg.playbooks())
    cmp = ev.compare(policies, factory, e.n_episodes, derive_seed(cfg.seed, "evaluation"), env_cfgs,
                     e.budgets, e.frontier_episodes, e.deadline, workers, e.greedy,
                     e.bootstrap_resamples, returns)
    cmp.metadata["parallel"] = workers
    with staged_dir(out / "eval") as tmp:
        ev.write_outputs(cmp, tmp, returns)
    print(ev.text_report(cmp), end="")
    return cmp


def cmd_all(cfg: ExperimentConfig, workers: int = 1):
    cmd_gen_dataset(cfg, workers)
    cmd_train_estimator(cfg, workers)
    for mode in ag.MODES:
        cmd_train_agent(cfg, mode, workers)
    return cmd_evaluate(cfg, workers)


# -- entry point --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stagedefense", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("gen-dataset", "train-estimator", "train-agent", "evaluate", "all"):
        s = sub.add_parser(name)
        s.add_argument("--config", help="YAML experiment config")
        s.add_argument("--seed", type=int, help="master seed (overrides the config)")
        s.add_argument("--out", help="output directory (overrides the config)")
        s.add_argument("--parallel", type=int, help="rollout worker processes (default: CPU count)")
        if name == "train-agent":
            s.add_argument("--mode", choices=ag.MODES, default="deepstage")
        if name == "evaluate":
            s.add_argument("--mode", choices=ag.MODES, action="append",
                           help="restrict to these trained modes (repeatable)")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, seed=args.seed, out=args.out, parallel=args.parallel)
        workers = cfg.parallel or ag.default_workers()
        echo_config(cfg, workers)
        if args.command == "gen-dataset":
            cmd_gen_dataset(cfg, workers)
        elif args.command == "train-estimator":
            cmd_train_estimator(cfg, workers)
        elif args.command == "train-agent":
            cmd_train_agent(cfg, args.mode, workers)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, workers, tuple(args.mode) if args.mode else ag.MODES)
        else:
            cmd_all(cfg, workers)
    except Exception as exc:  # noqa: BLE001 - reported and turned into an exit status
        print(f"error: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
