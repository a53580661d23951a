"""NumPy reference kernels for the linear-chain CRF.

Transition matrices are ``(T + 2, T + 2)`` with START at index ``T`` and STOP
at ``T + 1``; rows are the "from" state.
"""

import numpy as np


def _logsumexp(a, axis):
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


def forward(emissions, transitions):
    n, T = emissions.shape
    inner = transitions[:T, :T]
    alpha = np.empty((n, T))
    alpha[0] = transitions[T, :T] + emissions[0]
    for i in range(1, n):
        alpha[i] = _logsumexp(alpha[i - 1][:, None] + inner, axis=0) + emissions[i]
    log_z = float(_logsumexp(alpha[n - 1] + transitions[:T, T + 1], axis=0))
    return alpha, log_z


def backward(emissions, transitions):
    n, T = emissions.shape
    inner = transitions[:T, :T]
    beta = np.empty((n, T))
    beta[n - 1] = transitions[:T, T + 1]
    for i in range(n - 2, -1, -1):
        beta[i] = _logsumexp(inner + (emissions[i + 1] + beta[i + 1])[None, :], axis=1)
    return beta


def expectations(emissions, transitions):
    """Return ``(log_z, node_marginals (n, T), transition_counts (T+2, T+2))``."""
    n, T = emissions.shape
    alpha, log_z = forward(emissions, transitions)
    beta = backward(emissions, transitions)
    node = np.exp(alpha + beta - log_z)
    counts = np.zeros_like(transitions)
    counts[T, :T] = node[0]
    counts[:T, T + 1] = node[n - 1]
    inner = transitions[:T, :T]
    for i in range(n - 1):
        counts[:T, :T] += np.exp(
            alpha[i][:, None] + inner + (emissions[i + 1] + beta[i + 1])[None, :] - log_z
        )
    return log_z, node, counts


def viterbi(emissions, transitions):
    n, T = emissions.shape
    inner = transitions[:T, :T]
    back = np.zeros((n, T), dtype=np.int64)
    delta = transitions[T, :T] + emissions[0]
    for i in range(1, n):
        cand = delta[:, None] + inner
        back[i] = np.argmax(cand, axis=0)
        delta = cand[back[i], np.arange(T)] + emissions[i]
    final = delta + transitions[:T, T + 1]
    best = int(np.argmax(final))
    path = [best]
    for i in range(n - 1, 0, -1):
        best = int(back[i, best])
        path.append(best)
    path.reverse()
    return np.asarray(path, dtype=np.int64), float(final[path[-1]])
