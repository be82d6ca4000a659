"""LSTM stage estimator over graph-embedding sequences, trained jointly with the encoder."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .checkpoint import CheckpointError, load_blocks, save_blocks
from .encoder import EMBED_DIM, GnnEncoder, GraphBatch
from .nn import AdamState, DenseLayer, LstmCell, adam_step, clip_grad_norm, prefixed, \
    softmax, softmax_cross_entropy
from .provenance import FEATURE_DIM
from .reward import N_STAGES

log = logging.getLogger(__name__)

ESTIMATOR_HIDDEN = 64


class StageEstimator:
    """Recurrent classifier producing a belief over the seven stages each window."""

    def __init__(self, rng: np.random.Generator | None = None, hidden: int = ESTIMATOR_HIDDEN,
                 n_in: int = EMBED_DIM):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cell = LstmCell.init(rng, n_in, hidden)
        self.head = DenseLayer.init(rng, hidden, N_STAGES)
        self.reset()

    def named_parameters(self) -> dict[str, np.ndarray]:
        return {**prefixed("lstm", self.cell.parameters()), **prefixed("head", self.head.parameters())}

    def load_parameters(self, blocks: dict[str, np.ndarray]) -> None:
        for name, arr in self.named_parameters().items():
            arr[...] = blocks[name]

    def reset(self) -> None:
        self.h, self.c = self.cell.zero_state()

    def infer(self, g: np.ndarray) -> np.ndarray:
        self.h, self.c = self.cell.step(g, self.h, self.c)[:2]
        return softmax(self.head.forward(self.h)[0])

    def logits_sequence(self, X: np.ndarray):
        H, tape = self.cell.forward_sequence(X)
        logits, hcache = self.head.forward(H)
        return logits, (tape, hcache)

    def backward_sequence(self, cache, dlogits):
        tape, hcache = cache
        dH, hgrads = self.head.backward(hcache, dlogits)
        dX, lgrads, _, _ = self.cell.backward_sequence(tape, dH)
        return dX, {**prefixed("lstm", lgrads), **prefixed("head", hgrads)}


@dataclass
class LabeledEpisode:
    """Window graphs of one episode in stacked array form, with per-window stage labels."""

    features: np.ndarray      # [n_nodes, 17]
    src: np.ndarray           # edge sources, episode-local node indices
    dst: np.ndarray
    window_ids: np.ndarray    # window index of every node
    labels: np.ndarray        # [T]

    @property
    def length(self) -> int:
        return len(self.labels)

    @classmethod
    def from_graphs(cls, graphs, labels) -> "LabeledEpisode":
        b = GraphBatch.from_graphs(graphs)
        return cls(b.features, b.src, b.dst, b.graph_ids, np.asarray(labels, dtype=np.int64))


def _batch(episodes):
    feats, srcs, dsts, gids = [], [], [], []
    node_off = win_off = 0
    for ep in episodes:
        feats.append(ep.features)
        srcs.append(ep.src + node_off)
        dsts.append(ep.dst + node_off)
        gids.append(ep.window_ids + win_off)
        node_off += ep.features.shape[0]
        win_off += ep.length
    cat = lambda xs, dt: np.concatenate(xs).astype(dt) if xs else np.zeros(0, dt)  # noqa: E731
    features = np.concatenate(feats) if feats else np.zeros((0, FEATURE_DIM))
    return GraphBatch.from_arrays(features, cat(srcs, np.int64), cat(dsts, np.int64),
                                  cat(gids, np.int64), win_off)


def _padding_index(episodes):
    """(time, batch) positions of every window, in stacked order."""
    t_idx = np.concatenate([np.arange(ep.length) for ep in episodes])
    b_idx = np.concatenate([np.full(ep.length, i) for i, ep in enumerate(episodes)])
    return t_idx, b_idx


def forward_episodes(est: StageEstimator, enc: GnnEncoder, episodes):
    """Logits for every window of ``episodes`` (stacked order) plus a backward tape."""
    batch = _batch(episodes)
    G, enc_cache = enc.encode_batch(batch)
    t_idx, b_idx = _padding_index(episodes)
    T = max(ep.length for ep in episodes)
    X = np.zeros((T, len(episodes), G.shape[1]))
    X[t_idx, b_idx] = G
    logits, est_cache = est.logits_sequence(X)
    return logits[t_idx, b_idx], (enc_cache, est_cache, t_idx, b_idx, logits.shape)


def backward_episodes(est, enc, tape, dlogits_flat):
    enc_cache, est_cache, t_idx, b_idx, shape = tape
    dlogits = np.zeros(shape)
    dlogits[t_idx, b_idx] = dlogits_flat
    dX, est_grads = est.backward_sequence(est_cache, dlogits)
    enc_grads = enc.backward(enc_cache, dX[t_idx, b_idx])
    return est_grads, enc_grads


def class_weights(labels: np.ndarray) -> np.ndarray:
    counts = np.bincount(labels, minlength=N_STAGES).astype(np.float64)
    present = counts > 0
    w = np.zeros(N_STAGES)
    w[present] = counts.sum() / (present.sum() * counts[present])
    return w


@dataclass
class TrainResult:
    loss_curve: list[float]
    class_weights: np.ndarray


def train_estimator(est: StageEstimator, enc: GnnEncoder, episodes, epochs: int,
                    rng: np.random.Generator, lr: float = 3e-3, batch_episodes: int = 16,
                    weighted: bool = True, max_grad_norm: float = 5.0) -> TrainResult:
    """Minimise per-window (class-weighted) cross-entropy with Adam; returns the loss curve."""
    if not episodes:
        raise ValueError("empty dataset")
    all_labels = np.concatenate([ep.labels for ep in episodes])
    weights = class_weights(all_labels) if weighted else np.ones(N_STAGES)
    params = {**prefixed("enc", enc.named_parameters()), **prefixed("est", est.named_parameters())}
    state = AdamState.for_params(params)
    curve = []
    for epoch in range(epochs):
        order = rng.permutation(len(episodes))
        total, n_windows = 0.0, 0
        for start in range(0, len(order), batch_episodes):
            chunk = [episodes[i] for i in order[start:start + batch_episodes]]
            logits, tape = forward_episodes(est, enc, chunk)
            labels = np.concatenate([ep.labels for ep in chunk])
            loss, dlogits = softmax_cross_entropy(logits, labels, weights[labels])
            est_grads, enc_grads = backward_episodes(est, enc, tape, dlogits)
            grads = {**prefixed("enc", enc_grads), **prefixed("est", est_grads)}
            clip_grad_norm(grads, max_grad_norm)
            adam_step(state, params, grads, lr)
            total += loss * len(labels)
            n_windows += len(labels)
        curve.append(total / n_windows)
        log.info("estimator epoch %d loss %.4f", epoch, curve[-1])
    return TrainResult(curve, weights)


def predict(est: StageEstimator, enc: GnnEncoder, episodes, batch_episodes: int = 32):
    """Argmax stage for every window, one array per episode."""
    out = []
    for start in range(0, len(episodes), batch_episodes):
        chunk = episodes[start:start + batch_episodes]
        logits, _ = forward_episodes(est, enc, chunk)
        pred = logits.argmax(axis=1)
        pos = 0
        for ep in chunk:
            out.append(pred[pos:pos + ep.length])
            pos += ep.length
    return out


ESTIMATOR_CHECKPOINT_VERSION = 1


def save_perception(path, enc: GnnEncoder, est: StageEstimator, meta: dict | None = None) -> None:
    """Encoder and estimator parameters in one checkpoint (``enc.*`` and ``est.*`` blocks)."""
    blocks = {**prefixed("enc", enc.named_parameters()), **prefixed("est", est.named_parameters())}
    save_blocks(path, blocks, {"kind": "estimator", "version": ESTIMATOR_CHECKPOINT_VERSION,
                               **(meta or {})})


def load_perception(path) -> tuple[GnnEncoder, StageEstimator, dict]:
    blocks, meta = load_blocks(path)
    if meta.get("kind") != "estimator" or meta.get("version") != ESTIMATOR_CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: not a version-{ESTIMATOR_CHECKPOINT_VERSION} estimator checkpoint")
    enc, est = GnnEncoder(), StageEstimator()
    for name, arr in enc.named_parameters().items():
        arr[...] = blocks[f"enc.{name}"]
    est.load_parameters({k[4:]: v for k, v in blocks.items() if k.startswith("est.")})
    return enc, est, meta
