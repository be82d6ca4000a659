"""Recurrent PPO defender with a family-then-action factored policy.

Network: belief LSTM (164 -> 64), a shared tanh layer (64 -> 128) feeding
both the actor stack (128 -> 64 -> heads) and the critic (128 -> 64 -> 1).
The hierarchical actor has a 4-way family head plus one head per family;
the flat variant has a single 29-way head.  Both expose the policy as a
vector of joint log-probabilities over the 29 actions, which is all the
PPO loss needs.

Checkpoint blocks are the parameter names from ``named_parameters()``;
the header meta records ``kind``, ``version``, ``arch`` and ``mode``.
"""
from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable

import multiprocessing
import numpy as np

from . import kernels
from .checkpoint import CheckpointError, load_blocks, save_blocks
from .env import OBS_DIM
from .nn import AdamState, DenseLayer, LstmCell, adam_step, clip_grad_norm, log_softmax, prefixed, \
    softmax
from .reward import ACTION_FAMILY, FAMILY_ACTIONS, N_ACTIONS
from .seeding import derive_seed

log = logging.getLogger(__name__)

BELIEF_DIM = 64
SHARED_DIM = 128
HEAD_DIM = 64
CHECKPOINT_VERSION = 1
MAX_EPISODE_STEPS = 100
MODES = ("deepstage", "stage_unaware", "flat")

_FAMILY_OF = np.array(ACTION_FAMILY, dtype=np.int64)
# sub-head outputs are concatenated in family order, which must be action order
assert [a for fam in FAMILY_ACTIONS for a in fam] == list(range(N_ACTIONS))


@dataclass
class PpoConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.2
    entropy_coef: float = 0.02
    value_coef: float = 0.5
    lr: float = 3e-4
    lr_decay: float = 0.99
    batch_size: int = 4096
    minibatch_size: int = 512
    epochs: int = 5
    total_episodes: int = 2000
    max_grad_norm: float = 0.5

    def __post_init__(self):
        if not 0 < self.gamma <= 1 or not 0 <= self.gae_lambda <= 1:
            raise ValueError("gamma must be in (0, 1] and gae_lambda in [0, 1]")
        if self.clip <= 0 or self.lr <= 0 or self.minibatch_size < 1 or self.epochs < 1:
            raise ValueError("clip, lr, minibatch_size and epochs must be positive")
        if self.entropy_coef < 0 or self.value_coef < 0:
            raise ValueError("loss coefficients must be non-negative")


def mode_arch(mode: str) -> str:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    return "flat" if mode == "flat" else "hierarchical"


def mode_weighting(mode: str) -> str:
    mode_arch(mode)
    return "stage_aware" if mode == "deepstage" else "stage_unaware"


class Policy:
    """Actor-critic over belief states; ``arch`` is ``"hierarchical"`` or ``"flat"``."""

    def __init__(self, rng: np.random.Generator | None = None, arch: str = "hierarchical",
                 obs_dim: int = OBS_DIM, belief: int = BELIEF_DIM, shared: int = SHARED_DIM,
                 head: int = HEAD_DIM):
        if arch not in ("hierarchical", "flat"):
            raise ValueError(f"unknown policy architecture {arch!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.arch = arch
        self.cell = LstmCell.init(rng, obs_dim, belief)
        self.shared = DenseLayer.init(rng, belief, shared, "tanh")
        self.actor = DenseLayer.init(rng, shared, head, "tanh")
        self.critic_hidden = DenseLayer.init(rng, shared, head, "tanh")
        self.critic_out = DenseLayer.init(rng, head, 1)
        if arch == "flat":
            self.heads = {"pi": DenseLayer.init(rng, head, N_ACTIONS)}
        else:
            self.heads = {"meta": DenseLayer.init(rng, head, len(FAMILY_ACTIONS))}
            for f, acts in enumerate(FAMILY_ACTIONS):
                self.heads[f"sub{f}"] = DenseLayer.init(rng, head, len(acts))
        for layer in self.heads.values():
            # small output weights start the policy close to uniform
            layer.W *= 0.01

    def _layers(self) -> dict[str, DenseLayer]:
        return {"shared": self.shared, "actor": self.actor, "critic_hidden": self.critic_hidden,
                "critic_out": self.critic_out, **self.heads}

    def named_parameters(self) -> dict[str, np.ndarray]:
        out = prefixed("belief", self.cell.parameters())
        for name, layer in self._layers().items():
            out.update(prefixed(name, layer.parameters()))
        return out

    def load_parameters(self, blocks: dict[str, np.ndarray]) -> None:
        for name, arr in self.named_parameters().items():
            if name not in blocks or blocks[name].shape != arr.shape:
                raise CheckpointError(f"checkpoint block {name!r} missing or mis-shaped")
            arr[...] = blocks[name]

    def initial_belief(self):
        return self.cell.zero_state()

    # -- forward / backward from belief vectors ------------------------------------

    def head_forward(self, b: np.ndarray):
        """Joint log-probs ``[..., 29]`` and values ``[...]`` from belief vectors."""
        s, s_c = self.shared.forward(b)
        a, a_c = self.actor.forward(s)
        v1, v1_c = self.critic_hidden.forward(s)
        v, v_c = self.critic_out.forward(v1)
        caches = {"shared": s_c, "actor": a_c, "critic_hidden": v1_c, "critic_out": v_c}
        if self.arch == "flat":
            z, caches["pi"] = self.heads["pi"].forward(a)
            logp = log_softmax(z)
        else:
            zm, caches["meta"] = self.heads["meta"].forward(a)
            lm = log_softmax(zm)
            logp = lm[..., _FAMILY_OF]
            subs, zs = [], []
            for f in range(len(FAMILY_ACTIONS)):
                zf, caches[f"sub{f}"] = self.heads[f"sub{f}"].forward(a)
                subs.append(log_softmax(zf))
                zs.append(zf)
            logp = logp + np.concatenate(subs, axis=-1)
            caches["lsm"] = (lm, subs)
            caches["logits"] = (zm, zs)
        return logp, v[..., 0], caches

    def head_backward(self, caches, logp: np.ndarray, dlogp: np.ndarray, dv: np.ndarray):
        """Gradients from ``dL/dlogp`` and ``dL/dV``; returns ``(d belief, grads)``."""
        grads = {}
        if self.arch == "flat":
            p = np.exp(logp)
            dz = dlogp - p * dlogp.sum(axis=-1, keepdims=True)
            da, g = self.heads["pi"].backward(caches["pi"], dz)
            grads.update(prefixed("pi", g))
        else:
            lm, subs = caches["lsm"]
            n_fam = len(FAMILY_ACTIONS)
            # family log-prob receives the summed gradient of its actions
            dlm = np.stack([dlogp[..., FAMILY_ACTIONS[f]].sum(axis=-1) for f in range(n_fam)], axis=-1)
            dzm = dlm - np.exp(lm) * dlm.sum(axis=-1, keepdims=True)
            da, g = self.heads["meta"].backward(caches["meta"], dzm)
            grads.update(prefixed("meta", g))
            for f in range(n_fam):
                dls = dlogp[..., FAMILY_ACTIONS[f]]
                dzf = dls - np.exp(subs[f]) * dls.sum(axis=-1, keepdims=True)
                daf, g = self.heads[f"sub{f}"].backward(caches[f"sub{f}"], dzf)
                da = da + daf
                grads.update(prefixed(f"sub{f}", g))
        ds, g = self.actor.backward(caches["actor"], da)
        grads.update(prefixed("actor", g))
        dv1, g = self.critic_out.backward(caches["critic_out"], dv[..., None])
        grads.update(prefixed("critic_out", g))
        dsv, g = self.critic_hidden.backward(caches["critic_hidden"], dv1)
        grads.update(prefixed("critic_hidden", g))
        db, g = self.shared.backward(caches["shared"], ds + dsv)
        grads.update(prefixed("shared", g))
        return db, grads

    def sequence_forward(self, X: np.ndarray):
        """``X[T, B, obs]`` replayed from a zero belief."""
        B_seq, tape = self.cell.forward_sequence(X)
        logp, v, caches = self.head_forward(B_seq)
        return logp, v, (tape, caches)

    def sequence_backward(self, cache, logp, dlogp, dv):
        tape, caches = cache
        dB, grads = self.head_backward(caches, logp, dlogp, dv)
        _, lgrads, _, _ = self.cell.backward_sequence(tape, dB)
        grads.update(prefixed("belief", lgrads))
        return grads

    def family_distributions(self, b: np.ndarray):
        """Family probabilities and per-family action probabilities (hierarchical only)."""
        if self.arch != "hierarchical":
            raise ValueError("flat policies have no family factorization")
        _, _, caches = self.head_forward(b)
        zm, zs = caches["logits"]
        return softmax(zm), [softmax(z) for z in zs]


def joint_probabilities(policy: Policy, b: np.ndarray) -> np.ndarray:
    """Probabilities of all 29 actions; hierarchical ones are family times in-family products."""
    if policy.arch == "flat":
        return np.exp(policy.head_forward(b)[0])
    fam, subs = policy.family_distributions(b)
    return fam[..., _FAMILY_OF] * np.concatenate(subs, axis=-1)


def act(policy: Policy, belief, obs, rng: np.random.Generator | None = None, greedy: bool = False):
    """One decision: advance the belief, then pick an action.

    Sampling draws the family first and then the action inside it (flat
    policies sample the 29-way head directly); every call consumes exactly
    two uniforms so that different policies stay on aligned random streams.
    Returns ``(action, joint log-prob, value, new belief)``.
    """
    x = obs.vector() if hasattr(obs, "vector") else np.asarray(obs, dtype=np.float64)
    h, c, _ = policy.cell.step(x, *belief)
    logp, v, caches = policy.head_forward(h)
    u = rng.random(2) if rng is not None else np.zeros(2)
    if greedy:
        a = int(np.argmax(logp))
    elif policy.arch == "flat":
        a = _draw(np.exp(logp), u[0])
    else:
        lm, subs = caches["lsm"]
        f = _draw(np.exp(lm), u[0])
        a = FAMILY_ACTIONS[f][_draw(np.exp(subs[f]), u[1])]
    return a, float(logp[a]), float(v), (h, c)


def _draw(p: np.ndarray, u: float) -> int:
    idx = int(np.searchsorted(np.cumsum(p), u * p.sum(), side="right"))
    return min(idx, len(p) - 1)


# -- trajectories and advantages ----------------------------------------------------

@dataclass
class Transition:
    observation: np.ndarray
    belief: tuple[np.ndarray, np.ndarray]
    action: int
    log_prob: float
    value: float
    reward: float
    done: bool


def compute_gae(trajectory, gamma: float, gae_lambda: float, bootstrap: float = 0.0):
    """Advantages and returns for one time-ordered trajectory.

    ``bootstrap`` is the value after the last transition when it is not
    terminal.  Advantages are left unnormalized; see ``normalize_advantages``.
    """
    if len(trajectory) == 0:
        raise ValueError("empty trajectory")
    r = np.array([t.reward for t in trajectory], dtype=np.float64)
    v = np.array([t.value for t in trajectory], dtype=np.float64)
    d = np.array([t.done for t in trajectory], dtype=np.float64)
    v_next = np.append(v[1:], bootstrap)
    adv = kernels.gae(r, v, v_next, d, gamma, gae_lambda)
    return adv, adv + v


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    adv = np.asarray(adv, dtype=np.float64)
    if adv.size < 2:
        return adv - adv.mean()
    return (adv - adv.mean()) / (adv.std() + 1e-12)


# -- PPO loss -----------------------------------------------------------------------

def entropy(logp: np.ndarray) -> np.ndarray:
    return -(np.exp(logp) * logp).sum(axis=-1)


def ppo_loss(logp, values, actions, old_logp, advantages, returns, clip, value_coef, entropy_coef):
    """Clipped-surrogate + value + entropy loss over ``N`` rows and its gradients.

    Returns ``(loss, parts, dlogp, dvalues)`` where ``parts`` holds the three
    terms, the clip fraction and the approximate KL.
    """
    n = logp.shape[0]
    rows = np.arange(n)
    new = logp[rows, actions]
    ratio = np.exp(new - old_logp)
    clipped = np.clip(ratio, 1.0 - clip, 1.0 + clip)
    unclipped_term = ratio * advantages
    clipped_term = clipped * advantages
    use_raw = unclipped_term <= clipped_term
    surrogate = np.where(use_raw, unclipped_term, clipped_term)
    err = values - returns
    ent = entropy(logp)
    policy_loss = -surrogate.mean()
    value_loss = 0.5 * (err * err).mean()
    loss = policy_loss + value_coef * value_loss - entropy_coef * ent.mean()

    dlogp = np.zeros_like(logp)
    dlogp[rows, actions] = -np.where(use_raw, advantages, 0.0) * ratio / n
    dlogp += entropy_coef / n * np.exp(logp) * (logp + 1.0)
    dvalues = value_coef * err / n
    parts = {"policy": float(policy_loss), "value": float(value_loss), "entropy": float(ent.mean()),
             "clip_fraction": float((np.abs(ratio - 1.0) > clip).mean()),
             "approx_kl": float((old_logp - new).mean())}
    return float(loss), parts, dlogp, dvalues


@dataclass
class Episode:
    """One rollout: transitions plus what the training log and evaluation need."""

    seed: int
    transitions: list[Transition]
    trace: list[dict]
    mitigated: bool
    setup: dict = field(default_factory=dict)

    @property
    def length(self) -> int:
        return len(self.transitions)

    @property
    def episode_return(self) -> float:
        return float(sum(t.reward for t in self.transitions))


def _pack(episodes):
    """Time-major padded arrays for a group of whole episodes."""
    T = max(e.length for e in episodes)
    B = len(episodes)
    X = np.zeros((T, B, episodes[0].transitions[0].observation.shape[0]))
    t_idx = np.concatenate([np.arange(e.length) for e in episodes])
    b_idx = np.concatenate([np.full(e.length, i) for i, e in enumerate(episodes)])
    X[t_idx, b_idx] = np.stack([tr.observation for e in episodes for tr in e.transitions])
    return X, t_idx, b_idx


def _minibatches(episodes, lengths_order, minibatch_size):
    groups, cur, size = [], [], 0
    for i in lengths_order:
        cur.append(i)
        size += episodes[i].length
        if size >= minibatch_size:
            groups.append(cur)
            cur, size = [], 0
    if cur:
        groups.append(cur)
    return groups


@dataclass
class UpdateReport:
    epoch_losses: list[float]
    policy_loss: float
    value_loss: float
    entropy: float
    clip_fraction: float
    approx_kl: float
    lr: float


def ppo_update(policy: Policy, episodes: list[Episode], cfg: PpoConfig, adam: AdamState,
               rng: np.random.Generator, lr: float) -> tuple[UpdateReport, float]:
    """Several epochs of clipped-surrogate updates over whole-episode minibatches.

    Beliefs are recomputed by replaying each episode from a zero state.
    Returns the report and the decayed learning rate.
    """
    if not episodes:
        raise ValueError("empty batch")
    advs, rets = [], []
    for e in episodes:
        a, r = compute_gae(e.transitions, cfg.gamma, cfg.gae_lambda)
        advs.append(a)
        rets.append(r)
    flat_adv = normalize_advantages(np.concatenate(advs))
    offsets = np.concatenate([[0], np.cumsum([e.length for e in episodes])])
    adv_of = [flat_adv[offsets[i]:offsets[i + 1]] for i in range(len(episodes))]
    params = policy.named_parameters()
    epoch_losses, last = [], {}
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(episodes))
        total, count = 0.0, 0
        sums = {"policy": 0.0, "value": 0.0, "entropy": 0.0, "clip_fraction": 0.0, "approx_kl": 0.0}
        for mb_index, group in enumerate(_minibatches(episodes, order, cfg.minibatch_size)):
            chunk = [episodes[i] for i in group]
            X, t_idx, b_idx = _pack(chunk)
            logp_all, v_all, cache = policy.sequence_forward(X)
            logp = logp_all[t_idx, b_idx]
            values = v_all[t_idx, b_idx]
            actions = np.array([tr.action for e in chunk for tr in e.transitions])
            old = np.array([tr.log_prob for e in chunk for tr in e.transitions])
            adv = np.concatenate([adv_of[i] for i in group])
            ret = np.concatenate([rets[i] for i in group])
            loss, parts, dlogp, dv = ppo_loss(logp, values, actions, old, adv, ret, cfg.clip,
                                              cfg.value_coef, cfg.entropy_coef)
            if not np.isfinite(loss):
                raise FloatingPointError(
                    f"non-finite PPO loss in epoch {epoch} minibatch {mb_index} (episodes {group})")
            dlogp_all = np.zeros_like(logp_all)
            dlogp_all[t_idx, b_idx] = dlogp
            dv_all = np.zeros_like(v_all)
            dv_all[t_idx, b_idx] = dv
            grads = policy.sequence_backward(cache, logp_all, dlogp_all, dv_all)
            clip_grad_norm(grads, cfg.max_grad_norm)
            adam_step(adam, params, grads, lr)
            n = len(actions)
            total += loss * n
            count += n
            for k in sums:
                sums[k] += parts[k] * n
        epoch_losses.append(total / count)
        last = {k: s / count for k, s in sums.items()}
        lr *= cfg.lr_decay
    report = UpdateReport(epoch_losses, last["policy"], last["value"], last["entropy"],
                          last["clip_fraction"], last["approx_kl"], lr)
    return report, lr


# -- rollouts -----------------------------------------------------------------------

def run_episode(policy: Policy, env, seed: int, action_seed: int | None = None, greedy: bool = False,
                action_filter: Callable | None = None) -> Episode:
    """Play one episode; ``action_filter(env, action) -> action`` may override choices.

    When a filter replaces an action the stored log-probability is that of
    the replacement, so the transition stays consistent with what was played.
    """
    rng = np.random.default_rng(seed if action_seed is None else action_seed)
    obs = env.reset(seed)
    belief = policy.initial_belief()
    transitions = []
    done = False
    while not done:
        x = obs.vector()
        prev = belief
        a, lp, v, belief = act(policy, belief, obs, rng, greedy)
        if action_filter is not None:
            a2 = action_filter(env, a)
            if a2 != a:
                lp = float(policy.head_forward(belief[0])[0][a2])
                a = a2
        out = env.step(a)
        transitions.append(Transition(x, prev, a, lp, v, out.reward, out.done))
        obs, done = out.observation, out.done
    setup = env.setup() if hasattr(env, "setup") else {"seed": seed}
    return Episode(seed, transitions, list(env.trace), bool(env.mitigated), setup)


def _worker_run(args):
    make_env, policy, seeds, greedy, action_filter = args
    env = make_env()
    return [run_episode(policy, env, s, a, greedy, action_filter) for s, a in seeds]


def collect(policy: Policy, make_env: Callable, seeds, workers: int = 1, greedy: bool = False,
            action_filter: Callable | None = None):
    """Roll out ``seeds`` (pairs of env seed, action seed), optionally in worker processes.

    Each episode depends only on its own seeds and the policy snapshot, so
    the result is the same for any worker count.
    """
    seeds = list(seeds)
    if workers <= 1 or len(seeds) < 2:
        env = make_env()
        return [run_episode(policy, env, s, a, greedy, action_filter) for s, a in seeds]
    chunks = [seeds[i::workers] for i in range(workers)]
    ctx = multiprocessing.get_context("fork")
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
        parts = list(pool.map(_worker_run, [(make_env, policy, c, greedy, action_filter) for c in chunks]))
    out = [None] * len(seeds)
    for w, part in enumerate(parts):
        for j, ep in enumerate(part):
            out[w + j * workers] = ep
    return out


@dataclass
class TrainResult:
    policy: Policy
    log: list[dict] = field(default_factory=list)
    updates: list[UpdateReport] = field(default_factory=list)

    @property
    def returns(self) -> list[float]:
        return [r["return"] for r in self.log]


def episode_seeds(master: int, component: str, n: int, start: int = 0):
    return [(derive_seed(master, component, i), derive_seed(master, component + "-actions", i))
            for i in range(start, start + n)]


def train(make_env: Callable, cfg: PpoConfig, seed: int, arch: str = "hierarchical",
          workers: int = 1, on_episode: Callable | None = None) -> TrainResult:
    """PPO training for ``cfg.total_episodes`` episodes.

    Episodes are collected until a batch holds at least ``cfg.batch_size``
    transitions, then the policy is updated.  ``on_episode(record)`` is
    called once per finished episode with its log record.
    """
    policy = Policy(np.random.default_rng(derive_seed(seed, "policy-init")), arch)
    adam = AdamState.for_params(policy.named_parameters())
    update_rng = np.random.default_rng(derive_seed(seed, "ppo-minibatches"))
    result = TrainResult(policy)
    lr = cfg.lr
    done_eps = 0
    while done_eps < cfg.total_episodes:
        batch: list[Episode] = []
        n_steps = 0
        while n_steps < cfg.batch_size and done_eps < cfg.total_episodes:
            # episodes are at most MAX_EPISODE_STEPS long, so this never overfills by a round
            n = -(-(cfg.batch_size - n_steps) // MAX_EPISODE_STEPS)
            n = min(n, cfg.total_episodes - done_eps)
            for ep in collect(policy, make_env, episode_seeds(seed, "train", n, done_eps), workers):
                batch.append(ep)
                n_steps += ep.length
                result.log.append({"episode": done_eps, "return": ep.episode_return,
                                   "length": ep.length, "mitigated": ep.mitigated,
                                   "update": len(result.updates)})
                done_eps += 1
        report, lr = ppo_update(policy, batch, cfg, adam, update_rng, lr)
        result.updates.append(report)
        for rec in result.log[-len(batch):]:
            rec.update({"loss": report.epoch_losses[-1], "clip_fraction": report.clip_fraction,
                        "approx_kl": report.approx_kl, "lr": report.lr})
            if on_episode is not None:
                on_episode(rec)
        log.info("update %d: episodes %d mean return %.4f loss %.4f", len(result.updates), done_eps,
                 np.mean([e.episode_return for e in batch]), report.epoch_losses[-1])
    return result


# -- checkpoints --------------------------------------------------------------------

def save_policy(path, policy: Policy, mode: str, extra: dict | None = None) -> None:
    meta = {"kind": "policy", "version": CHECKPOINT_VERSION, "arch": policy.arch, "mode": mode,
            **(extra or {})}
    save_blocks(path, policy.named_parameters(), meta)


def load_policy(path) -> tuple[Policy, dict]:
    blocks, meta = load_blocks(path)
    if meta.get("kind") != "policy":
        raise CheckpointError(f"{path} is not a policy checkpoint")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {meta.get('version')} "
                              f"!= supported {CHECKPOINT_VERSION}")
    policy = Policy(arch=meta["arch"])
    policy.load_parameters(blocks)
    return policy, meta


def write_log(path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def config_dict(cfg: PpoConfig) -> dict:
    return asdict(cfg)


def default_workers() -> int:
    return os.cpu_count() or 1
