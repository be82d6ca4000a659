"""Labeled episode datasets for stage-estimator training.

On disk a dataset is a directory:

``records.jsonl``
    one line per window: ``{"episode", "window", "k_true", "graph"}`` where
    ``graph`` is ``"graphs.sdb#<global window index>"``.
``episodes.jsonl``
    one line per episode: seed, behaviour policy, playbook variant (with its
    steps), length, start delay, max stage reached, mitigation flag.
``graphs.sdb``
    block container with the window graphs in compact form: per-node type
    code and technique-bucket bitmask, per-edge global node indices, and
    offsets delimiting windows and episodes.
``summary.json``
    per-stage label counts.
"""
from __future__ import annotations

import json
import os
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .campaign import Playbook, playbook_from_dict
from .checkpoint import load_blocks, save_blocks
from .env import DefenseEnv, EpisodeConfig
from .estimator import LabeledEpisode
from .provenance import FEATURE_DIM, N_TAG_BUCKETS, NODE_TYPES, ProvenanceGraph, tag_bucket
from .reward import FAMILY_ACTIONS, N_STAGES
from .seeding import derive_seed

_ALERT = NODE_TYPES.index("alert")


@dataclass
class EpisodeRecord:
    """One simulated episode with its window graphs packed into flat arrays.

    Node arrays are indexed by episode-local node number; ``window_nodes`` and
    ``window_edges`` hold per-window counts in window order.  ``graphs`` keeps
    the full graph objects only when asked for, since they cost tens of MB per
    episode.
    """

    seed: int
    behaviour: str
    variant: Playbook
    length: int
    delay: int
    labels: np.ndarray
    node_type: np.ndarray
    node_mask: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    window_nodes: np.ndarray
    window_edges: np.ndarray
    graphs: list[ProvenanceGraph] | None = None

    @property
    def max_stage(self) -> int:
        return int(self.labels.max())


def _pack(graphs):
    types, masks, srcs, dsts, n_nodes, n_edges = [], [], [], [], [], []
    base = 0
    for g in graphs:
        for n in g.nodes:
            types.append(NODE_TYPES.index(n.type))
            mask = 0
            for tag in n.tags:
                mask |= 1 << tag_bucket(tag)
            masks.append(mask)
        for s, d, _, _ in g.edges:
            srcs.append(base + s)
            dsts.append(base + d)
        base += g.n_nodes
        n_nodes.append(g.n_nodes)
        n_edges.append(len(g.edges))
    return (np.array(types, dtype=np.uint8), np.array(masks, dtype=np.uint8),
            np.array(srcs, dtype=np.int64), np.array(dsts, dtype=np.int64),
            np.array(n_nodes, dtype=np.int64), np.array(n_edges, dtype=np.int64))


def _behaviour_action(rng: np.random.Generator, behaviour: str, act_prob: float) -> int:
    if behaviour == "no_defense":
        return 0
    if rng.random() < act_prob:
        return int(rng.integers(len(FAMILY_ACTIONS[0]), 29))
    return int(rng.choice(FAMILY_ACTIONS[0]))


def simulate_episode(config: EpisodeConfig, seed: int, behaviour: str = "no_defense",
                     act_prob: float = 0.15, playbooks=None,
                     keep_graphs: bool = False) -> EpisodeRecord:
    """Roll one episode in graph-only mode under a scripted behaviour policy."""
    env = DefenseEnv(config, None, None, playbooks)
    env.reset(seed)
    rng = np.random.default_rng(seed ^ 0x5EED)
    labels = [env.state.k_true]
    graphs = [env.last_graph]
    done = False
    while not done:
        out = env.step(_behaviour_action(rng, behaviour, act_prob))
        labels.append(out.info["k_true"])
        graphs.append(env.last_graph)
        done = out.done
    return EpisodeRecord(seed, behaviour, env.variant, env.length, env.delay,
                         np.array(labels, dtype=np.int64), *_pack(graphs),
                         graphs=graphs if keep_graphs else None)


def generate(config: EpisodeConfig, n_episodes: int, master_seed: int,
             defense_fraction: float = 0.5, playbooks=None) -> list[EpisodeRecord]:
    """``n_episodes`` labeled episodes; a ``defense_fraction`` share sees random defense."""
    out = []
    for i in range(n_episodes):
        seed = derive_seed(master_seed, "dataset", i)
        # spreads the defended episodes evenly through the index range
        defended = int((i + 1) * defense_fraction) > int(i * defense_fraction)
        behaviour = "random_defense" if defended else "no_defense"
        out.append(simulate_episode(config, seed, behaviour, playbooks=playbooks))
    return out


def label_counts(records) -> list[int]:
    labels = np.concatenate([r.labels for r in records])
    return np.bincount(labels, minlength=N_STAGES).tolist()


def save(records, directory) -> None:
    """Write ``records`` under ``directory`` atomically (temp dir, then rename)."""
    directory = Path(directory)
    tmp = directory.with_name(directory.name + ".partial")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    win_nodes, win_edges, ep_win_off = [], [], [0]
    node_base = 0
    edge_src, edge_dst = [], []
    with open(tmp / "records.jsonl", "w") as rec_fh:
        gidx = 0
        for e, rec in enumerate(records):
            edge_src.append(rec.src + node_base)
            edge_dst.append(rec.dst + node_base)
            node_base += len(rec.node_type)
            win_nodes.append(rec.window_nodes)
            win_edges.append(rec.window_edges)
            for w, k in enumerate(rec.labels):
                rec_fh.write(json.dumps({"episode": e, "window": w, "k_true": int(k),
                                         "graph": f"graphs.sdb#{gidx}"}) + "\n")
                gidx += 1
            ep_win_off.append(gidx)
    cat = lambda xs, dt: np.concatenate(xs).astype(dt) if xs else np.zeros(0, dt)  # noqa: E731
    offsets = lambda counts: np.concatenate([[0], np.cumsum(cat(counts, np.int64))])  # noqa: E731
    labels = cat([r.labels for r in records], np.int8)
    save_blocks(tmp / "graphs.sdb", {
        "node_type": cat([r.node_type for r in records], np.uint8),
        "node_tagmask": cat([r.node_mask for r in records], np.uint8),
        "edge_src": cat(edge_src, np.int64),
        "edge_dst": cat(edge_dst, np.int64),
        "window_node_offsets": offsets(win_nodes).astype(np.int64),
        "window_edge_offsets": offsets(win_edges).astype(np.int64),
        "episode_window_offsets": np.array(ep_win_off, dtype=np.int64),
        "labels": labels,
    }, meta={"kind": "labeled-episodes"})
    with open(tmp / "episodes.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps({"seed": rec.seed, "behaviour": rec.behaviour, "length": rec.length,
                                 "delay": rec.delay, "max_stage": rec.max_stage,
                                 "mitigated": rec.max_stage <= 4,
                                 "variant": rec.variant.to_dict()}) + "\n")
    with open(tmp / "summary.json", "w") as fh:
        json.dump({"episodes": len(records), "windows": len(labels),
                   "label_counts": label_counts(records)}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if directory.exists():
        shutil.rmtree(directory)
    os.replace(tmp, directory)


def compact_features(node_type: np.ndarray, node_mask: np.ndarray, src: np.ndarray,
                     dst: np.ndarray) -> np.ndarray:
    """Rebuild the 17-wide node features from compact arrays (edges index these nodes)."""
    n = len(node_type)
    X = np.zeros((n, FEATURE_DIM))
    t = len(NODE_TYPES)
    X[np.arange(n), node_type] = 1.0
    X[:, t] = np.log1p(np.bincount(dst, minlength=n))
    X[:, t + 1] = np.log1p(np.bincount(src, minlength=n))
    X[:, t + 2] = node_type == _ALERT
    bits = (node_mask[:, None].astype(np.int64) >> np.arange(N_TAG_BUCKETS)) & 1
    X[:, t + 3:] = bits
    return X


def load(directory) -> tuple[list[LabeledEpisode], list[dict]]:
    """Load a dataset as encoder-ready episodes plus the per-episode metadata."""
    directory = Path(directory)
    if not (directory / "graphs.sdb").exists():
        raise FileNotFoundError(f"no dataset at {directory}")
    b, _ = load_blocks(directory / "graphs.sdb")
    with open(directory / "episodes.jsonl") as fh:
        meta = [json.loads(line) for line in fh]
    wn, we, ew = b["window_node_offsets"], b["window_edge_offsets"], b["episode_window_offsets"]
    episodes = []
    for e in range(len(ew) - 1):
        w0, w1 = ew[e], ew[e + 1]
        n0, n1 = wn[w0], wn[w1]
        e0, e1 = we[w0], we[w1]
        src = b["edge_src"][e0:e1] - n0
        dst = b["edge_dst"][e0:e1] - n0
        feats = compact_features(b["node_type"][n0:n1].astype(np.int64), b["node_tagmask"][n0:n1], src, dst)
        window_ids = np.repeat(np.arange(w1 - w0), np.diff(wn[w0:w1 + 1]))
        episodes.append(LabeledEpisode(feats, src, dst, window_ids,
                                       b["labels"][w0:w1].astype(np.int64)))
    return episodes, meta


def to_labeled(records) -> list[LabeledEpisode]:
    out = []
    for r in records:
        feats = compact_features(r.node_type.astype(np.int64), r.node_mask, r.src, r.dst)
        window_ids = np.repeat(np.arange(len(r.labels)), r.window_nodes)
        out.append(LabeledEpisode(feats, r.src, r.dst, window_ids, r.labels.astype(np.int64)))
    return out


def variant_of(meta: dict) -> Playbook:
    return playbook_from_dict(meta["variant"])


def split(n: int, seed: int, holdout: float = 0.2) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic train / held-out index split."""
    perm = np.random.default_rng(seed).permutation(n)
    n_hold = max(1, int(round(n * holdout)))
    return np.sort(perm[n_hold:]), np.sort(perm[:n_hold])
