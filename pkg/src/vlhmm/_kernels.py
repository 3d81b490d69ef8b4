"""Compiled forward-backward recursions on the sliding-window chain.

States are windows ``w`` of ``M`` symbols (index convention in ``tree``).
Time 0 is the unobserved pre-sample window; observations are 1..n.  The
forward vector is normalised at every step and the normalisers kept in log
form, so the recursions never underflow.  Forward vectors are checkpointed
every ``~sqrt(n)`` steps and recomputed block by block during the backward
sweep, which keeps memory at ``O(sqrt(n) * S)``.
"""

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def _step(a, rows, e_t, out):
    S, k = rows.shape
    K1 = S // k
    total = 0.0
    for wp in range(S):
        x = wp % k
        base = wp // k
        acc = 0.0
        for z in range(k):
            w = z * K1 + base
            acc += a[w] * rows[w, x]
        v = acc * e_t[x]
        out[wp] = v
        total += v
    return total


@njit(cache=True, nogil=True)
def forward_loglik(rows, e, init):
    """Sum of log normalisers; ``e`` holds max-shifted emission likelihoods."""
    n = e.shape[0]
    S = rows.shape[0]
    a = init.copy()
    b = np.empty(S)
    ll = 0.0
    for t in range(n):
        c = _step(a, rows, e[t], b)
        if not c > 0.0:
            return -np.inf
        ll += np.log(c)
        for w in range(S):
            a[w] = b[w] / c
    return ll


@njit(cache=True, nogil=True)
def forward_backward(rows, e, init, want_single, want_pairs):
    """Smoothing pass.

    Returns ``(loglik, state_weights, pair_sums, single, pairs)`` where
    ``state_weights[t-1, x] = P(X_t = x | y)`` for t = 1..n,
    ``pair_sums[w, x] = sum_{t=0}^{n-1} P(W_t = w, W_{t+1} = w_{2:M} x | y)``,
    ``single`` is (n+1, S) or empty and ``pairs`` is (n, S, k) or empty.
    """
    n = e.shape[0]
    S, k = rows.shape
    K1 = S // k
    block = int(np.sqrt(n)) + 1
    n_blocks = (n + block - 1) // block
    ckpt = np.empty((n_blocks, S))
    logc = np.empty(n)
    weights = np.zeros((n, k))
    pair_sums = np.zeros((S, k))
    single = np.zeros((n + 1 if want_single else 0, S))
    pairs = np.zeros((n if want_pairs else 0, S, k))

    a = init.copy()
    b = np.empty(S)
    for t in range(n):
        if t % block == 0:
            ckpt[t // block] = a
        c = _step(a, rows, e[t], b)
        if not c > 0.0:
            return -np.inf, weights, pair_sums, single, pairs
        logc[t] = np.log(c)
        for w in range(S):
            a[w] = b[w] / c
    ll = logc.sum()

    alphas = np.empty((block + 1, S))
    beta = np.ones(S)
    beta_prev = np.empty(S)
    for bi in range(n_blocks - 1, -1, -1):
        t0 = bi * block
        t1 = min(t0 + block, n)
        alphas[0] = ckpt[bi]
        for j in range(t1 - t0):
            _step(alphas[j], rows, e[t0 + j], alphas[j + 1])
            c = np.exp(logc[t0 + j])
            for w in range(S):
                alphas[j + 1, w] /= c
        for t in range(t1, t0, -1):
            # alphas[t - t0] is the forward vector at time t
            at = alphas[t - t0]
            ap = alphas[t - 1 - t0]
            c = np.exp(logc[t - 1])
            et = e[t - 1]
            for w in range(S):
                g = at[w] * beta[w]
                weights[t - 1, w % k] += g
                if want_single:
                    single[t, w] = g
            for w in range(S):
                base = (w % K1) * k
                acc = 0.0
                for x in range(k):
                    wn = base + x
                    f = rows[w, x] * et[x] * beta[wn] / c
                    acc += f
                    p = ap[w] * f
                    pair_sums[w, x] += p
                    if want_pairs:
                        pairs[t - 1, w, x] = p
                beta_prev[w] = acc
            for w in range(S):
                beta[w] = beta_prev[w]
    if want_single:
        for w in range(S):
            single[0, w] = init[w] * beta[w]
    return ll, weights, pair_sums, single, pairs
