"""Hot inner loops, compiled with numba when available.

Each kernel has a pure-numpy twin.  The numba path is used unless the
environment variable ``STAGEDEFENSE_NO_NUMBA`` is set to a non-empty value
other than ``0``, or numba cannot be imported.  Both paths accumulate in the
same order, so results agree bit for bit on the inputs we feed them.
"""
from __future__ import annotations

import os

import numpy as np

_flag = os.environ.get("STAGEDEFENSE_NO_NUMBA", "")
_DISABLED = _flag not in ("", "0")

try:
    if _DISABLED:
        raise ImportError("numba disabled by STAGEDEFENSE_NO_NUMBA")
    from numba import njit

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False


# --- numpy reference implementations -------------------------------------------------

def _segment_sum_np(values, segment_ids, n_segments):
    out = np.zeros((n_segments, values.shape[1]), dtype=np.float64)
    np.add.at(out, segment_ids, values)
    return out


def _gather_segment_sum_np(values, src, dst, n_out):
    out = np.zeros((n_out, values.shape[1]), dtype=np.float64)
    np.add.at(out, dst, values[src])
    return out


def _gae_np(rewards, values, next_values, dones, gamma, lam):
    n = rewards.shape[0]
    adv = np.zeros(n, dtype=np.float64)
    running = 0.0
    for t in range(n - 1, -1, -1):
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_values[t] * nonterminal - values[t]
        running = delta + gamma * lam * nonterminal * running
        adv[t] = running
    return adv


# --- numba versions ---------------------------------------------------------------

if HAS_NUMBA:

    @njit(cache=True)
    def _segment_sum_nb(values, segment_ids, n_segments):
        d = values.shape[1]
        out = np.zeros((n_segments, d), dtype=np.float64)
        for i in range(values.shape[0]):
            s = segment_ids[i]
            for j in range(d):
                out[s, j] += values[i, j]
        return out

    @njit(cache=True)
    def _gather_segment_sum_nb(values, src, dst, n_out):
        d = values.shape[1]
        out = np.zeros((n_out, d), dtype=np.float64)
        for e in range(src.shape[0]):
            u = src[e]
            v = dst[e]
            for j in range(d):
                out[v, j] += values[u, j]
        return out

    @njit(cache=True)
    def _gae_nb(rewards, values, next_values, dones, gamma, lam):
        n = rewards.shape[0]
        adv = np.zeros(n, dtype=np.float64)
        running = 0.0
        for t in range(n - 1, -1, -1):
            nonterminal = 1.0 - dones[t]
            delta = rewards[t] + gamma * next_values[t] * nonterminal - values[t]
            running = delta + gamma * lam * nonterminal * running
            adv[t] = running
        return adv


def segment_sum(values: np.ndarray, segment_ids: np.ndarray, n_segments: int,
                use_numba: bool | None = None) -> np.ndarray:
    """Row-wise sum of ``values`` grouped by ``segment_ids`` into ``n_segments`` rows."""
    values = np.ascontiguousarray(values, dtype=np.float64)
    segment_ids = np.ascontiguousarray(segment_ids, dtype=np.int64)
    if _pick(use_numba):
        return _segment_sum_nb(values, segment_ids, int(n_segments))
    return _segment_sum_np(values, segment_ids, int(n_segments))


def gather_segment_sum(values: np.ndarray, src: np.ndarray, dst: np.ndarray, n_out: int,
                       use_numba: bool | None = None) -> np.ndarray:
    """``out[dst[e]] += values[src[e]]`` for every edge ``e``."""
    values = np.ascontiguousarray(values, dtype=np.float64)
    src = np.ascontiguousarray(src, dtype=np.int64)
    dst = np.ascontiguousarray(dst, dtype=np.int64)
    if _pick(use_numba):
        return _gather_segment_sum_nb(values, src, dst, int(n_out))
    return _gather_segment_sum_np(values, src, dst, int(n_out))


def gae(rewards, values, next_values, dones, gamma: float, lam: float,
        use_numba: bool | None = None) -> np.ndarray:
    """Backward GAE recursion over a flat, time-ordered transition array."""
    args = [np.ascontiguousarray(a, dtype=np.float64)
            for a in (rewards, values, next_values, dones)]
    if _pick(use_numba):
        return _gae_nb(*args, float(gamma), float(lam))
    return _gae_np(*args, float(gamma), float(lam))


def _pick(use_numba):
    if use_numba is None:
        return HAS_NUMBA
    if use_numba and not HAS_NUMBA:
        raise RuntimeError("numba path requested but numba is unavailable or disabled")
    return use_numba
