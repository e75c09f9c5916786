"""Hot inner-loop kernels with a numba path and a pure-numpy path.

The numba path is used when numba imports cleanly and ``DICELAB_NUMBA`` is not
set to ``0``/``false``/``off``. Both paths are always importable as
``numpy_impl`` and ``numba_impl`` (the latter is ``None`` without numba) so
tests can compare them directly.
"""

from __future__ import annotations

import logging
import os
from types import SimpleNamespace

import numpy as np

_OFF = {"0", "false", "off", "no"}


def _softplus_np(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid_np(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _leaky_relu_np(x, slope):
    return np.where(x > 0, x, slope * x)


def _leaky_relu_grad_np(x, g, slope):
    return np.where(x > 0, g, slope * g)


def _log_softmax_np(x):
    m = x.max(axis=1, keepdims=True)
    s = x - m
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def _pair_counts_np(correct):
    # correct: (M, N) bool -> four (M, M) int64 tables n11, n10, n01, n00
    c = correct.astype(np.int64)
    w = 1 - c
    return c @ c.T, c @ w.T, w @ c.T, w @ w.T


def _bin_stats_np(conf, hit, n_bins):
    idx = np.clip(np.ceil(conf * n_bins).astype(np.int64) - 1, 0, n_bins - 1)
    count = np.bincount(idx, minlength=n_bins).astype(np.float64)
    sconf = np.bincount(idx, weights=conf, minlength=n_bins)
    shit = np.bincount(idx, weights=hit, minlength=n_bins)
    return count, sconf, shit


numpy_impl = SimpleNamespace(
    softplus=_softplus_np,
    sigmoid=_sigmoid_np,
    leaky_relu=_leaky_relu_np,
    leaky_relu_grad=_leaky_relu_grad_np,
    log_softmax=_log_softmax_np,
    pair_counts=_pair_counts_np,
    bin_stats=_bin_stats_np,
)


def _build_numba():
    try:
        import numba
    except ImportError:  # pragma: no cover - numba is a declared dependency
        return None
    logging.getLogger("numba").setLevel(logging.WARNING)
    njit = numba.njit(cache=True, fastmath=False)

    @njit
    def _sigmoid_flat(x, out):
        for i in range(x.size):
            v = x[i]
            if v >= 0:
                out[i] = 1.0 / (1.0 + np.exp(-v))
            else:
                e = np.exp(v)
                out[i] = e / (1.0 + e)

    @njit
    def _leaky_flat(x, slope, out):
        for i in range(x.size):
            v = x[i]
            out[i] = v if v > 0 else slope * v

    @njit
    def _leaky_grad_flat(x, g, slope, out):
        for i in range(x.size):
            out[i] = g[i] if x[i] > 0 else slope * g[i]

    @njit
    def _log_softmax_2d(x, out):
        n, k = x.shape
        for r in range(n):
            m = x[r, 0]
            for c in range(1, k):
                if x[r, c] > m:
                    m = x[r, c]
            s = 0.0
            for c in range(k):
                s += np.exp(x[r, c] - m)
            ls = np.log(s)
            for c in range(k):
                out[r, c] = x[r, c] - m - ls

    @njit
    def _pair_counts(correct):
        m, n = correct.shape
        n11 = np.zeros((m, m), np.int64)
        hits = np.zeros(m, np.int64)
        for t in range(n):
            for a in range(m):
                if correct[a, t]:
                    hits[a] += 1
                    for b in range(m):
                        if correct[b, t]:
                            n11[a, b] += 1
        n10 = np.empty((m, m), np.int64)
        n01 = np.empty((m, m), np.int64)
        n00 = np.empty((m, m), np.int64)
        for a in range(m):
            for b in range(m):
                n10[a, b] = hits[a] - n11[a, b]
                n01[a, b] = hits[b] - n11[a, b]
                n00[a, b] = n - n11[a, b] - n10[a, b] - n01[a, b]
        return n11, n10, n01, n00

    @njit
    def _bin_stats(conf, hit, n_bins):
        count = np.zeros(n_bins)
        sconf = np.zeros(n_bins)
        shit = np.zeros(n_bins)
        for i in range(conf.size):
            b = int(np.ceil(conf[i] * n_bins)) - 1
            if b < 0:
                b = 0
            elif b > n_bins - 1:
                b = n_bins - 1
            count[b] += 1.0
            sconf[b] += conf[i]
            shit[b] += hit[i]
        return count, sconf, shit

    def _unary(kernel):
        def run(x):
            x = np.ascontiguousarray(x, dtype=np.float64)
            out = np.empty_like(x)
            kernel(x.reshape(-1), out.reshape(-1))
            return out

        return run

    def leaky_relu(x, slope):
        x = np.ascontiguousarray(x, dtype=np.float64)
        out = np.empty_like(x)
        _leaky_flat(x.reshape(-1), float(slope), out.reshape(-1))
        return out

    def leaky_relu_grad(x, g, slope):
        x = np.ascontiguousarray(x, dtype=np.float64)
        g = np.ascontiguousarray(np.broadcast_to(g, x.shape), dtype=np.float64)
        out = np.empty_like(x)
        _leaky_grad_flat(x.reshape(-1), g.reshape(-1), float(slope), out.reshape(-1))
        return out

    def log_softmax(x):
        x = np.ascontiguousarray(x, dtype=np.float64)
        out = np.empty_like(x)
        _log_softmax_2d(x, out)
        return out

    def pair_counts(correct):
        return _pair_counts(np.ascontiguousarray(correct, dtype=np.bool_))

    def bin_stats(conf, hit, n_bins):
        return _bin_stats(
            np.ascontiguousarray(conf, dtype=np.float64),
            np.ascontiguousarray(hit, dtype=np.float64),
            int(n_bins),
        )

    return SimpleNamespace(
        # numpy's vectorised exp/log1p beat a scalar loop here, see benchmarks/
        softplus=_softplus_np,
        sigmoid=_unary(_sigmoid_flat),
        leaky_relu=leaky_relu,
        leaky_relu_grad=leaky_relu_grad,
        log_softmax=log_softmax,
        pair_counts=pair_counts,
        bin_stats=bin_stats,
    )


numba_impl = _build_numba()

USE_NUMBA = numba_impl is not None and os.environ.get("DICELAB_NUMBA", "1").lower() not in _OFF

active = numba_impl if USE_NUMBA else numpy_impl
