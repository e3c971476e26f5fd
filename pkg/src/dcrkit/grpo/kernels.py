"""Inner loops of the toy policy: log-prob gathers, sampling, gradient scatter.

Each kernel has a numba ``@njit`` version and a pure-numpy version with
identical semantics. The numba path is used when numba imports and
``DCRKIT_DISABLE_NUMBA`` is unset (or "0").
"""

from __future__ import annotations

import os

import numpy as np


def _np_log_softmax(rows: np.ndarray) -> np.ndarray:
    m = rows.max(axis=1, keepdims=True)
    z = rows - m
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def np_gather_logprobs(logits: np.ndarray, states: np.ndarray, tokens: np.ndarray) -> np.ndarray:
    lp = _np_log_softmax(logits[states])
    return lp[np.arange(len(states)), tokens]


def np_sample_tokens(logits: np.ndarray, states: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    p = np.exp(_np_log_softmax(logits[states]))
    cdf = np.cumsum(p, axis=1)
    out = (cdf < uniforms[:, None] * cdf[:, -1:]).sum(axis=1)
    return np.minimum(out, logits.shape[1] - 1).astype(np.int64)


def np_scatter_token_grad(
    logits: np.ndarray, states: np.ndarray, tokens: np.ndarray, coefs: np.ndarray
) -> np.ndarray:
    """sum_i coefs[i] * d logp(tokens[i] | states[i]) / d logits."""
    p = np.exp(_np_log_softmax(logits[states]))
    contrib = -p * coefs[:, None]
    contrib[np.arange(len(states)), tokens] += coefs
    grad = np.zeros_like(logits)
    np.add.at(grad, states, contrib)
    return grad


try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is an optional accelerator
    njit = None


if njit is not None:

    @njit(cache=True)
    def _all_lse(logits):
        """Per-row log-sum-exp; rows are shared by many tokens, so compute each once."""
        out = np.empty(logits.shape[0])
        for s in range(logits.shape[0]):
            m = logits[s, 0]
            for j in range(1, logits.shape[1]):
                if logits[s, j] > m:
                    m = logits[s, j]
            acc = 0.0
            for j in range(logits.shape[1]):
                acc += np.exp(logits[s, j] - m)
            out[s] = m + np.log(acc)
        return out

    @njit(cache=True)
    def _all_probs(logits):
        lse = _all_lse(logits)
        p = np.empty_like(logits)
        for s in range(logits.shape[0]):
            for j in range(logits.shape[1]):
                p[s, j] = np.exp(logits[s, j] - lse[s])
        return p

    @njit(cache=True)
    def nb_gather_logprobs(logits, states, tokens):
        lse = _all_lse(logits)
        out = np.empty(states.shape[0])
        for i in range(states.shape[0]):
            out[i] = logits[states[i], tokens[i]] - lse[states[i]]
        return out

    @njit(cache=True)
    def nb_sample_tokens(logits, states, uniforms):
        vocab = logits.shape[1]
        p = _all_probs(logits)
        totals = np.empty(logits.shape[0])
        for s in range(logits.shape[0]):
            t = 0.0
            for j in range(vocab):
                t += p[s, j]
            totals[s] = t
        out = np.empty(states.shape[0], dtype=np.int64)
        for i in range(states.shape[0]):
            s = states[i]
            target = uniforms[i] * totals[s]
            acc = 0.0
            k = 0
            for j in range(vocab):
                acc += p[s, j]
                if acc < target:
                    k = j + 1
                else:
                    break
            out[i] = min(k, vocab - 1)
        return out

    @njit(cache=True)
    def nb_scatter_token_grad(logits, states, tokens, coefs):
        # sum coefficients per state first: d/dlogits of c*logp(t|s) is c*(onehot(t) - p(s))
        vocab = logits.shape[1]
        csum = np.zeros(logits.shape[0])
        grad = np.zeros_like(logits)
        for i in range(states.shape[0]):
            csum[states[i]] += coefs[i]
            grad[states[i], tokens[i]] += coefs[i]
        p = _all_probs(logits)
        for s in range(logits.shape[0]):
            if csum[s] != 0.0:
                for j in range(vocab):
                    grad[s, j] -= csum[s] * p[s, j]
        return grad

    HAVE_NUMBA = True
else:  # pragma: no cover
    nb_gather_logprobs = np_gather_logprobs
    nb_sample_tokens = np_sample_tokens
    nb_scatter_token_grad = np_scatter_token_grad
    HAVE_NUMBA = False


def numba_enabled() -> bool:
    return HAVE_NUMBA and os.environ.get("DCRKIT_DISABLE_NUMBA", "0") in ("", "0")


USE_NUMBA = numba_enabled()

if USE_NUMBA:
    gather_logprobs = nb_gather_logprobs
    sample_tokens = nb_sample_tokens
    scatter_token_grad = nb_scatter_token_grad
else:
    gather_logprobs = np_gather_logprobs
    sample_tokens = np_sample_tokens
    scatter_token_grad = np_scatter_token_grad
