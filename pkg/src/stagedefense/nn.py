"""Small differentiable building blocks with hand-written backward passes.

Everything is float64 numpy.  Forward functions return ``(output, cache)``;
the matching backward takes the cache and the upstream gradient.  Parameters
live in plain ndarrays that optimisers update in place, so a model is just a
collection of named arrays.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("identity", "tanh", "relu")
EPS = 1e-8


def glorot(rng: np.random.Generator, fan_out: int, fan_in: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_out, fan_in))


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "identity":
        return z
    if activation == "tanh":
        return np.tanh(z)
    if activation == "relu":
        return np.maximum(z, 0.0)
    raise ValueError(f"unknown activation {activation!r}")


def _activation_grad(y: np.ndarray, dy: np.ndarray, activation: str) -> np.ndarray:
    if activation == "identity":
        return dy
    if activation == "tanh":
        return dy * (1.0 - y * y)
    return dy * (y > 0.0)


@dataclass
class DenseLayer:
    """``activation(W @ x + b)`` with ``W`` shaped ``[out, in]``."""

    W: np.ndarray
    b: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ValueError(f"inconsistent dense shapes W{self.W.shape} b{self.b.shape}")

    @classmethod
    def init(cls, rng: np.random.Generator, n_in: int, n_out: int, activation="identity"):
        return cls(glorot(rng, n_out, n_in), np.zeros(n_out), activation)

    @property
    def n_in(self) -> int:
        return self.W.shape[1]

    @property
    def n_out(self) -> int:
        return self.W.shape[0]

    def parameters(self) -> dict[str, np.ndarray]:
        return {"W": self.W, "b": self.b}

    def forward(self, x: np.ndarray):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.n_in:
            raise ValueError(f"dense input shape {x.shape} does not match weights {self.W.shape}")
        y = _activate(x @ self.W.T + self.b, self.activation)
        return y, (x, y)

    def backward(self, cache, dy: np.ndarray):
        x, y = cache
        dz = _activation_grad(y, dy, self.activation)
        x2 = x.reshape(-1, self.n_in)
        dz2 = dz.reshape(-1, self.n_out)
        grads = {"W": dz2.T @ x2, "b": dz2.sum(axis=0)}
        return dz @ self.W, grads


def dense_forward(layer: DenseLayer, x: np.ndarray) -> np.ndarray:
    return layer.forward(x)[0]


def sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class LstmCell:
    """Single LSTM layer.

    ``W`` stacks the input, forget, output and candidate blocks along axis 0,
    each ``[H, I + H]`` acting on ``concat(x, h_prev)``; ``b`` is ``[4H]``.
    """

    W: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        four_h, cols = self.W.shape
        if four_h % 4 or self.b.shape != (four_h,) or cols <= four_h // 4:
            raise ValueError(f"inconsistent LSTM shapes W{self.W.shape} b{self.b.shape}")

    @classmethod
    def init(cls, rng: np.random.Generator, n_in: int, hidden: int, forget_bias=1.0):
        W = np.concatenate([glorot(rng, hidden, n_in + hidden) for _ in range(4)], axis=0)
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = forget_bias
        return cls(W, b)

    @property
    def hidden(self) -> int:
        return self.W.shape[0] // 4

    @property
    def n_in(self) -> int:
        return self.W.shape[1] - self.hidden

    def gate_blocks(self):
        H = self.hidden
        return tuple(self.W[i * H:(i + 1) * H] for i in range(4))

    def parameters(self) -> dict[str, np.ndarray]:
        return {"W": self.W, "b": self.b}

    def zero_state(self, batch: int | None = None):
        shape = (self.hidden,) if batch is None else (batch, self.hidden)
        return np.zeros(shape), np.zeros(shape)

    def _check(self, x, h, c):
        if x.shape[-1] != self.n_in or h.shape[-1] != self.hidden or c.shape != h.shape:
            raise ValueError(
                f"LSTM dims: x{x.shape} h{h.shape} c{c.shape} vs input {self.n_in} hidden {self.hidden}")

    def step(self, x, h_prev, c_prev):
        x = np.asarray(x, dtype=np.float64)
        self._check(x, h_prev, c_prev)
        H = self.hidden
        xh = np.concatenate([x, h_prev], axis=-1)
        z = xh @ self.W.T + self.b
        i = sigmoid(z[..., :H])
        f = sigmoid(z[..., H:2 * H])
        o = sigmoid(z[..., 2 * H:3 * H])
        g = np.tanh(z[..., 3 * H:])
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h = o * tc
        return h, c, (xh, i, f, o, g, c_prev, tc)

    def step_backward(self, cache, dh, dc):
        xh, i, f, o, g, c_prev, tc = cache
        do = dh * tc
        dc = dc + dh * o * (1.0 - tc * tc)
        di = dc * g
        dg = dc * i
        df = dc * c_prev
        dc_prev = dc * f
        dz = np.concatenate([di * i * (1 - i), df * f * (1 - f), do * o * (1 - o), dg * (1 - g * g)],
                            axis=-1)
        dxh = dz @ self.W
        dz2 = dz.reshape(-1, dz.shape[-1])
        grads = {"W": dz2.T @ xh.reshape(-1, xh.shape[-1]), "b": dz2.sum(axis=0)}
        return dxh[..., :self.n_in], dxh[..., self.n_in:], dc_prev, grads

    def forward_sequence(self, X: np.ndarray, h0=None, c0=None):
        """Run over ``X[T, B, I]``; returns hidden states ``[T, B, H]`` and a tape."""
        T, B, _ = X.shape
        h, c = self.zero_state(B)
        if h0 is not None:
            h, c = h0, c0
        out = np.empty((T, B, self.hidden))
        tape = []
        for t in range(T):
            h, c, cache = self.step(X[t], h, c)
            out[t] = h
            tape.append(cache)
        return out, tape

    def backward_sequence(self, tape, dH: np.ndarray):
        """Backprop through time; ``dH`` is the loss gradient w.r.t. every hidden state."""
        T, B, H = dH.shape
        dX = np.empty((T, B, self.n_in))
        grads = {"W": np.zeros_like(self.W), "b": np.zeros_like(self.b)}
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        for t in range(T - 1, -1, -1):
            dx, dh_next, dc_next, g = self.step_backward(tape[t], dH[t] + dh_next, dc_next)
            dX[t] = dx
            grads["W"] += g["W"]
            grads["b"] += g["b"]
        return dX, grads, dh_next, dc_next


def lstm_step(cell: LstmCell, x, h_prev, c_prev):
    h, c, _ = cell.step(x, h_prev, c_prev)
    return h, c


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0 or x.shape[axis] == 0:
        raise ValueError("softmax of an empty vector")
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax_cross_entropy(logits: np.ndarray, targets: np.ndarray, weights=None):
    """Mean (optionally weighted) cross-entropy over rows of ``logits``.

    Returns ``(loss, dlogits)``.  With ``weights`` the loss is
    ``sum(w_i * ce_i) / sum(w_i)``.
    """
    logits = np.atleast_2d(logits)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    n = logits.shape[0]
    logp = log_softmax(logits)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        return 0.0, np.zeros_like(logits)
    ce = -logp[np.arange(n), targets]
    loss = float((w * ce).sum() / total)
    d = np.exp(logp)
    d[np.arange(n), targets] -= 1.0
    d *= (w / total)[:, None]
    return loss, d


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = EPS

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray], **kw):
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, **kw)


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              lr: float) -> dict[str, np.ndarray]:
    """Bias-corrected Adam, updating ``params`` in place. Missing grads count as zero."""
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter block {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter {name!r} shape {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter block {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if total > max_norm > 0:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


def prefixed(prefix: str, blocks: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v for k, v in blocks.items()}
