"""Acceptance suite: one PASS/FAIL line per criterion.

The learning criteria (6 to 8) share one pipeline run built by the
``trained`` fixture.  ``STAGEDEFENSE_ACCEPTANCE=full`` switches criterion 7
to three master seeds with 2000 training episodes per agent (hours on one
core) and turns on its magnitude and interval checks; the default ``ci``
profile trains 500 episodes on one seed and checks orderings only.
"""
import itertools
import json
import os
import time

import numpy as np
import pytest

from conftest import VERDICTS
from gradcheck import check_input_grad, check_param_grads
from reward_oracle import oracle_reward, oracle_security
from stagedefense import agent as ag
from stagedefense import campaign as cmp
from stagedefense import dataset as ds
from stagedefense import evaluation as ev
from stagedefense.cli import cmd_evaluate, cmd_gen_dataset, cmd_train_agent, cmd_train_estimator
from stagedefense.config import load_config
from stagedefense.encoder import EMBED_DIM, GnnEncoder, GraphBatch
from stagedefense.env import DefenseEnv, EnvFactory, EpisodeConfig
from stagedefense.estimator import load_perception
from stagedefense.nn import DenseLayer, LstmCell, softmax_cross_entropy
from stagedefense.provenance import FEATURE_DIM, CompactGraph
from stagedefense.reward import RewardWeights, security_reward, step_reward
from stagedefense.seeding import derive_seed
from stagedefense.telemetry import NoiseProfile

PROFILE = os.environ.get("STAGEDEFENSE_ACCEPTANCE", "ci")
SEEDS = (0, 1, 2) if PROFILE == "full" else (0,)
AGENT_EPISODES = 2000 if PROFILE == "full" else 500


def verdict(n, ok, detail):
    line = f"[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}"
    VERDICTS.append(line)
    print(line)
    assert ok, line


# -- 1. reward law --------------------------------------------------------------------

def test_criterion_1_reward_law():
    start = time.perf_counter()
    worst = 0.0
    for aware in (True, False):
        w = RewardWeights.for_mode("stage_aware" if aware else "stage_unaware")
        for k, k2, a in itertools.product(range(7), range(7), range(29)):
            worst = max(worst, abs(security_reward(k, k2) - oracle_security(k, k2)),
                        abs(step_reward(k, k2, a, w) - oracle_reward(k, k2, a, aware)))
    elapsed = time.perf_counter() - start
    verdict(1, worst <= 1e-12 and elapsed < 1.0,
            f"2 x 49 x 29 cases, max error {worst:.1e}, {elapsed:.3f} s")


# -- 2. gradients ---------------------------------------------------------------------

def _dense(rng):
    layer = DenseLayer.init(rng, 5, 4, str(rng.choice(["identity", "tanh", "relu"])))
    layer.b[:] = rng.normal(size=4)
    x, proj = rng.normal(size=(3, 5)), rng.normal(size=(3, 4))
    loss = lambda: float((layer.forward(x)[0] * proj).sum())  # noqa: E731
    dx, g = layer.backward(layer.forward(x)[1], proj)
    return max(check_param_grads(loss, layer.parameters(), g, rng), check_input_grad(loss, x, dx, rng))


def _lstm(rng):
    cell = LstmCell.init(rng, 4, 3)
    cell.b[:] = rng.normal(scale=0.5, size=cell.b.shape)
    X, proj = rng.normal(size=(5, 2, 4)), rng.normal(size=(5, 2, 3))
    loss = lambda: float((cell.forward_sequence(X)[0] * proj).sum())  # noqa: E731
    dX, g, _, _ = cell.backward_sequence(cell.forward_sequence(X)[1], proj)
    return max(check_param_grads(loss, cell.parameters(), g, rng), check_input_grad(loss, X, dX, rng))


def _softmax_ce(rng):
    logits, targets = rng.normal(scale=2.0, size=(6, 7)), rng.integers(0, 7, 6)
    w = rng.uniform(0.1, 2.0, 6)
    loss = lambda: softmax_cross_entropy(logits, targets, w)[0]  # noqa: E731
    return check_input_grad(loss, logits, softmax_cross_entropy(logits, targets, w)[1], rng, 12)


def _gnn(rng):
    enc = GnnEncoder(rng)
    graphs = []
    for _ in range(3):
        n = int(rng.integers(1, 12))
        X = np.zeros((n, FEATURE_DIM))
        X[np.arange(n), rng.integers(0, 6, n)] = 1.0
        X[:, 6:] = rng.random((n, FEATURE_DIM - 6))
        m = int(rng.integers(0, 3 * n))
        graphs.append(CompactGraph(X, rng.integers(0, n, m), rng.integers(0, n, m)))
    batch = GraphBatch.from_graphs(graphs)
    proj = rng.normal(size=(3, EMBED_DIM))
    loss = lambda: float((enc.encode_batch(batch)[0] * proj).sum())  # noqa: E731
    g = enc.backward(enc.encode_batch(batch)[1], proj)
    return check_param_grads(loss, enc.named_parameters(), g, rng, n_probe=4)


def _ppo(rng):
    policy = ag.Policy(rng, str(rng.choice(["hierarchical", "flat"])))
    for layer in policy.heads.values():
        layer.W *= 50.0
    lengths = rng.integers(2, 5, 3)
    X = np.zeros((lengths.max(), 3, 164))
    t_idx = np.concatenate([np.arange(n) for n in lengths])
    b_idx = np.concatenate([np.full(n, i) for i, n in enumerate(lengths)])
    X[t_idx, b_idx] = rng.normal(size=(len(t_idx), 164))
    n = len(t_idx)
    acts, old = rng.integers(0, 29, n), np.log(rng.uniform(0.01, 0.2, n))
    adv, ret = rng.normal(size=n), rng.normal(size=n)
    # ratios stay near 1, so a wide clip keeps probes off the kink
    terms = lambda lp, v: ag.ppo_loss(lp[t_idx, b_idx], v[t_idx, b_idx], acts, old, adv, ret,  # noqa: E731
                                      50.0, 0.5, 0.03)
    loss = lambda: terms(*policy.sequence_forward(X)[:2])[0]  # noqa: E731
    lp, v, cache = policy.sequence_forward(X)
    _, _, dlogp, dv = terms(lp, v)
    dl, dvv = np.zeros_like(lp), np.zeros_like(v)
    dl[t_idx, b_idx], dvv[t_idx, b_idx] = dlogp, dv
    g = policy.sequence_backward(cache, lp, dl, dvv)
    return check_param_grads(loss, policy.named_parameters(), g, rng, n_probe=2)


def test_criterion_2_gradients():
    start = time.perf_counter()
    worst = {}
    for name, fn in (("dense", _dense), ("lstm", _lstm), ("softmax-ce", _softmax_ce), ("gnn", _gnn),
                     ("ppo-loss", _ppo)):
        worst[name] = max(fn(np.random.default_rng(1000 + s)) for s in range(20))
    elapsed = time.perf_counter() - start
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict(2, max(worst.values()) < 1e-5 and elapsed < 60,
            f"20 seeds per block, worst relative error {detail}; {elapsed:.1f} s")


# -- 3. GAE ---------------------------------------------------------------------------

def test_criterion_3_gae():
    from test_agent import brute_force_gae, traj
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        T = int(rng.integers(1, 51))
        r, v = rng.normal(size=T), rng.normal(size=T)
        d = (rng.random(T) < 0.1).astype(int)
        d[-1] = 1
        gamma, lam = rng.uniform(0.8, 1.0), rng.uniform(0.0, 1.0)
        adv, _ = ag.compute_gae(traj(r, v, d), gamma, lam)
        worst = max(worst, np.max(np.abs(adv - brute_force_gae(r, v, d, gamma, lam, 0.0))))
    verdict(3, worst <= 1e-10, f"100 random trajectories, max error {worst:.1e}")


# -- 4. policy factorization ----------------------------------------------------------

def test_criterion_4_factorization():
    rng = np.random.default_rng(4)
    policy = ag.Policy(rng)
    for layer in policy.heads.values():
        layer.W *= 100.0
    joint = ag.joint_probabilities(policy, rng.normal(scale=3.0, size=(1000, ag.BELIEF_DIM)))
    sum_err = float(np.max(np.abs(joint.sum(axis=1) - 1.0)))
    for layer in policy.heads.values():
        layer.W[...] = 0.0
        layer.b[...] = 0.0
    uniform = ag.joint_probabilities(policy, rng.normal(size=ag.BELIEF_DIM))
    mon = uniform[list(cmp_family(0))]
    exact = bool(np.all(mon == 1 / 32))
    verdict(4, sum_err <= 1e-9 and exact,
            f"max |sum - 1| {sum_err:.1e} over 1000 beliefs; uniform monitoring prob exactly 1/32: {exact}")


def cmp_family(f):
    from stagedefense.reward import FAMILY_ACTIONS
    return FAMILY_ACTIONS[f]


# -- 5. permutation invariance --------------------------------------------------------

def test_criterion_5_permutation_invariance():
    rng = np.random.default_rng(5)
    enc = GnnEncoder(rng)
    env = DefenseEnv(EpisodeConfig(), None, None)
    worst = 0.0
    for i in range(20):
        # real window graphs from the simulator, at varied stages
        env.reset(i)
        for _ in range(int(rng.integers(0, 40))):
            if env.done:
                break
            env.step(0)
        g = CompactGraph.from_graph(env.last_graph)
        base = enc.encode(g)
        for _ in range(100):
            worst = max(worst, float(np.max(np.abs(enc.encode(g.permuted(rng.permutation(g.n_nodes)))
                                                    - base))))
    verdict(5, worst < 1e-9, f"20 graphs x 100 relabelings, max change {worst:.1e}")


# -- shared pipeline run for 6 to 8 ----------------------------------------------------

class Run:
    def __init__(self, root):
        self.root = root
        self.seeds = {}


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    run = Run(root)
    for seed in SEEDS:
        cfg = load_config(None, seed=seed, out=str(root / f"seed{seed}"),
                          agent={"total_episodes": AGENT_EPISODES}, evaluation={"budgets": []})
        workers = cfg.parallel or ag.default_workers()
        info = {"cfg": cfg, "workers": workers}
        t0 = time.perf_counter()
        info["label_counts"] = cmd_gen_dataset(cfg, workers)
        info["estimator"] = cmd_train_estimator(cfg, workers)
        info["estimator_seconds"] = time.perf_counter() - t0
        for mode in ag.MODES:
            cmd_train_agent(cfg, mode, workers)
        info["comparison"] = cmd_evaluate(cfg, workers)
        info["pipeline_seconds"] = time.perf_counter() - t0
        run.seeds[seed] = info
    return run


def test_criterion_6_estimator_calibration(trained):
    info = trained.seeds[SEEDS[0]]
    macro = info["estimator"]["macro"]
    secs = info["estimator_seconds"]
    verdict(6, macro >= 0.85 and secs <= 600,
            f"held-out macro F1 {macro:.3f} (target 0.85), dataset + training {secs / 60:.1f} min")


def test_default_dataset_covers_every_stage(trained):
    assert all(c > 0 for c in trained.seeds[SEEDS[0]]["label_counts"])


def test_recon_only_episodes_are_recognized(trained):
    info = trained.seeds[SEEDS[0]]
    enc, est, _ = load_perception(trained.root / f"seed{SEEDS[0]}" / "estimator" / "checkpoint.sdb")
    recon = [cmp.Playbook(b.id + "-recon", tuple(s for s in b.steps if s.stage == 1))
             for b in cmp.load_playbooks()]
    hits = total = 0
    for seed in range(10):
        # free of false alerts; held out because these seeds never enter the dataset stream
        env = DefenseEnv(EpisodeConfig(noise=NoiseProfile(false_positive_rate=0.0)), enc, est, recon)
        env.reset(derive_seed(info["cfg"].seed, "recon-check", seed))
        while not env.done:
            out = env.step(0)
            if out.info["k_true"] == 1:
                total += 1
                hits += int(out.observation.p.argmax() == 1)
    assert total > 0 and hits / total >= 0.9


def test_criterion_7_ordering(trained):
    lines, ok = [], True
    for seed, info in trained.seeds.items():
        reps = info["comparison"].reports
        d, u, f = reps["deepstage"], reps["stage_unaware"], reps["flat"]
        ret_ok = d.mean_return >= u.mean_return >= f.mean_return
        mit_ok = d.mitigation_rate >= u.mitigation_rate >= f.mitigation_rate
        seed_ok = ret_ok and mit_ok
        delta = next(x for x in info["comparison"].deltas["deepstage-flat"] if x.metric == "mitigation")
        if PROFILE == "full":
            pair = _paired_delta(info["comparison"], "deepstage", "stage_unaware")
            seed_ok = seed_ok and pair[0] >= 0.05 and pair[1] > 0
        ok = ok and seed_ok
        lines.append(f"seed {seed}: return {d.mean_return:.3f}/{u.mean_return:.3f}/{f.mean_return:.3f}, "
                     f"mitigation {d.mitigation_rate:.3f}/{u.mitigation_rate:.3f}/{f.mitigation_rate:.3f} "
                     f"(deepstage/unaware/flat; deepstage-flat mitigation {delta.estimate:+.3f})")
    budget = 20 * 60 if PROFILE == "ci" else 3 * 3600
    elapsed = sum(i["pipeline_seconds"] for i in trained.seeds.values())
    ok = ok and elapsed <= budget
    verdict(7, ok, f"{PROFILE} profile, {AGENT_EPISODES} episodes/agent, {elapsed / 60:.1f} min; "
            + "; ".join(lines))


def test_trained_defender_beats_untrained(trained):
    seed = SEEDS[0]
    info = trained.seeds[seed]
    cfg = info["cfg"]
    out = trained.root / f"seed{seed}"
    enc, est, _ = load_perception(out / "estimator" / "checkpoint.sdb")
    policy, _ = ag.load_policy(out / "agent-deepstage" / "policy.sdb")
    factory = EnvFactory(cfg.episode_config("stage_aware"), enc, est, cfg.playbooks())
    untrained = ag.Policy(np.random.default_rng(derive_seed(seed, "untrained-policy")))
    result = ev.compare({"trained": policy, "untrained": untrained}, factory, 200,
                        derive_seed(seed, "evaluation"), fractions=(), workers=info["workers"],
                        n_resamples=50)
    assert result.reports["trained"].mean_return > result.reports["untrained"].mean_return


def _paired_delta(comparison, a, b):
    from stagedefense.seeding import derive_rng
    ma = np.array([max(r["k_true"] for r in tr) <= 4 for tr in comparison.episodes[a]], float)
    mb = np.array([max(r["k_true"] for r in tr) <= 4 for tr in comparison.episodes[b]], float)
    lo, _ = ev.bootstrap_interval(ma - mb, 1000, derive_rng(comparison.metadata["seed"], "bootstrap-pair"))
    return float((ma - mb).mean()), lo


def test_criterion_8_frontier(trained):
    seed = SEEDS[0]
    info = trained.seeds[seed]
    cfg = info["cfg"]
    out = trained.root / f"seed{seed}"
    enc, est, _ = load_perception(out / "estimator" / "checkpoint.sdb")
    factory = EnvFactory(cfg.episode_config("stage_aware"), enc, est, cfg.playbooks())
    frontiers = {}
    for mode in ("deepstage", "flat"):
        policy, _ = ag.load_policy(out / f"agent-{mode}" / "policy.sdb")
        frontiers[mode] = ev.cost_frontier(policy, factory, ev.DEFAULT_BUDGETS,
                                           cfg.evaluation.frontier_episodes,
                                           derive_seed(cfg.seed, "evaluation"), info["workers"],
                                           cfg.evaluation.greedy)
    gains = [g for _, g in frontiers["deepstage"]]
    drops = [max(gains[:j]) - gains[j] for j in range(1, len(gains))]
    monotone = max(drops) <= 0.03
    at_half = dict(frontiers["deepstage"])[0.5], dict(frontiers["flat"])[0.5]
    (out / "frontier_acceptance.json").write_text(json.dumps(frontiers))
    verdict(8, monotone and at_half[0] > at_half[1],
            f"deepstage gains {' '.join(f'{g:.3f}' for g in gains)}; largest drop {max(drops):.3f}; "
            f"at 0.5 deepstage {at_half[0]:.3f} vs flat {at_half[1]:.3f}")


# -- 9. determinism -------------------------------------------------------------------

def test_criterion_9_determinism(tmp_path):
    from test_cli import TINY
    from stagedefense.cli import main
    import yaml
    cfg_path = tmp_path / "tiny.yaml"
    cfg_path.write_text(yaml.safe_dump({**TINY, "out": str(tmp_path / "run")}))
    stages = [["gen-dataset"], ["train-estimator"], ["train-agent", "--mode", "deepstage"],
              ["train-agent", "--mode", "stage_unaware"], ["train-agent", "--mode", "flat"], ["evaluate"]]
    mismatched = []
    for stage in stages:
        assert main(stage + ["--config", str(cfg_path), "--parallel", "2"]) == 0
        first = _snapshot(tmp_path / "run")
        assert main(stage + ["--config", str(cfg_path), "--parallel", "2"]) == 0
        second = _snapshot(tmp_path / "run")
        mismatched += [f"{stage[0]}:{k}" for k in first if first[k] != second.get(k)]
    verdict(9, not mismatched, f"6 stages each run twice with 2 workers, "
            f"{len(_snapshot(tmp_path / 'run'))} files compared, mismatches: {mismatched or 'none'}")


def _snapshot(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# -- 10. no-defense sanity ------------------------------------------------------------

def test_criterion_10_no_defense(tmp_path):
    records = ds.generate(EpisodeConfig(), 200, 10, defense_fraction=0.0)
    ds.save(records, tmp_path / "nodef")
    _, meta = ds.load(tmp_path / "nodef")
    # an evicted campaign ends the episode early, back at stage 0
    evicted = sum(len(r.labels) != r.length + 1 or (r.labels[-1] == 0 and r.max_stage > 0)
                  for r in records)
    reach6 = all(r.max_stage == 6 for r in records if r.variant.max_stage == 6)
    lacking = np.mean([max(s["stage"] for s in m["variant"]["steps"]) < 5 for m in meta])
    rate = ev.mitigation_rate([[{"k_true": int(k)} for k in r.labels] for r in records])
    stage6_books = sum(r.variant.max_stage == 6 for r in records)
    verdict(10, evicted == 0 and reach6 and rate == lacking,
            f"200 all-a_0 episodes: evictions {evicted}, {stage6_books} stage-6 variants all reach "
            f"Exfiltration: {reach6}, mitigation {rate:.3f} vs variants lacking stage 5+ {lacking:.3f}")
