"""Hot numeric kernels.

Each kernel exists twice: an explicit-loop version compiled with numba and a
vectorized numpy version. ``USE_NUMBA`` picks the dispatch target; both are
importable so they can be checked against each other and benchmarked.
"""

import numpy as np

from ._accel import HAVE_NUMBA, njit

USE_NUMBA = HAVE_NUMBA

ZERO_STD = 1e-12


# --- BM25 ------------------------------------------------------------------


@njit
def bm25_scores_loop(starts, ends, doc_idx, tf, idf_q, doc_len, avgdl, k1, b, n_docs):
    scores = np.zeros(n_docs)
    for j in range(starts.shape[0]):
        w = idf_q[j]
        for p in range(starts[j], ends[j]):
            d = doc_idx[p]
            f = tf[p]
            scores[d] += w * (f * (k1 + 1.0) / (f + k1 * (1.0 - b + b * doc_len[d] / avgdl)))
    return scores


def bm25_scores_numpy(starts, ends, doc_idx, tf, idf_q, doc_len, avgdl, k1, b, n_docs):
    scores = np.zeros(n_docs)
    # term-major accumulation keeps the same addition order as the loop kernel
    for j in range(starts.shape[0]):
        sl = slice(starts[j], ends[j])
        d = doc_idx[sl]
        f = tf[sl]
        scores[d] += idf_q[j] * (f * (k1 + 1.0) / (f + k1 * (1.0 - b + b * doc_len[d] / avgdl)))
    return scores


def bm25_scores(starts, ends, doc_idx, tf, idf_q, doc_len, avgdl, k1, b, n_docs):
    """BM25 score of every document for the query terms given by posting spans."""
    fn = bm25_scores_loop if USE_NUMBA else bm25_scores_numpy
    return fn(starts, ends, doc_idx, tf, idf_q, doc_len, float(avgdl), float(k1), float(b), int(n_docs))


# --- group advantages ------------------------------------------------------


@njit
def group_advantages_loop(rewards, offsets):
    out = np.zeros(rewards.shape[0])
    for g in range(offsets.shape[0] - 1):
        lo = offsets[g]
        hi = offsets[g + 1]
        n = hi - lo
        pivot = rewards[lo]
        mean = 0.0
        for i in range(lo, hi):
            mean += rewards[i] - pivot
        mean /= n
        var = 0.0
        for i in range(lo, hi):
            var += (rewards[i] - pivot - mean) ** 2
        std = np.sqrt(var / n)
        if std < ZERO_STD:
            continue
        for i in range(lo, hi):
            out[i] = (rewards[i] - pivot - mean) / std
    return out


def group_advantages_numpy(rewards, offsets):
    out = np.zeros(rewards.shape[0])
    for lo, hi in zip(offsets[:-1], offsets[1:]):
        d = rewards[lo:hi] - rewards[lo]
        d = d - d.mean()
        std = np.sqrt(np.mean(d * d))
        if std >= ZERO_STD:
            out[lo:hi] = d / std
    return out


def group_advantages(rewards, offsets):
    """Population-normalized advantages for consecutive reward groups.

    ``offsets`` holds ``n_groups + 1`` boundaries into ``rewards``. Groups whose
    population std is below 1e-12 get all-zero advantages. Rewards are shifted
    by the group's first element before any arithmetic, so adding a constant
    that every reward absorbs exactly leaves the output bit-identical.
    """
    rewards = np.ascontiguousarray(rewards, dtype=np.float64)
    offsets = np.ascontiguousarray(offsets, dtype=np.int64)
    fn = group_advantages_loop if USE_NUMBA else group_advantages_numpy
    return fn(rewards, offsets)


# --- clipped surrogate -----------------------------------------------------


@njit
def clipped_surrogates_loop(ratios, advantages, eps):
    n = ratios.shape[0]
    values = np.empty(n)
    coef = np.empty(n)
    for i in range(n):
        r = ratios[i]
        a = advantages[i]
        c = min(max(r, 1.0 - eps), 1.0 + eps)
        u = r * a
        v = c * a
        if u <= v:
            values[i] = u
            coef[i] = a
        else:
            values[i] = v
            coef[i] = 0.0
    return values, coef


def clipped_surrogates_numpy(ratios, advantages, eps):
    clipped = np.clip(ratios, 1.0 - eps, 1.0 + eps) * advantages
    unclipped = ratios * advantages
    active = unclipped <= clipped
    return np.where(active, unclipped, clipped), np.where(active, advantages, 0.0)


def clipped_surrogates(ratios, advantages, eps):
    """Per-sample ``min(r*A, clip(r)*A)`` and its derivative w.r.t. ``r``.

    The derivative is ``A`` where the unclipped branch is selected and 0 where
    the clip branch binds.
    """
    ratios = np.ascontiguousarray(ratios, dtype=np.float64)
    advantages = np.ascontiguousarray(advantages, dtype=np.float64)
    fn = clipped_surrogates_loop if USE_NUMBA else clipped_surrogates_numpy
    return fn(ratios, advantages, float(eps))


# --- log-linear choice heads ----------------------------------------------


@njit
def choice_logprobs_loop(features, offsets, chosen, theta, inv_temp):
    n_dec = offsets.shape[0] - 1
    out = np.empty(n_dec)
    for i in range(n_dec):
        lo = offsets[i]
        hi = offsets[i + 1]
        m = -np.inf
        logits = np.empty(hi - lo)
        for j in range(lo, hi):
            s = 0.0
            for k in range(theta.shape[0]):
                s += features[j, k] * theta[k]
            logits[j - lo] = s * inv_temp
            if logits[j - lo] > m:
                m = logits[j - lo]
        z = 0.0
        for j in range(hi - lo):
            z += np.exp(logits[j] - m)
        out[i] = logits[chosen[i]] - m - np.log(z)
    return out


@njit
def choice_grad_loop(features, offsets, chosen, theta, inv_temp, weights):
    n_dec = offsets.shape[0] - 1
    dim = theta.shape[0]
    grad = np.zeros(dim)
    for i in range(n_dec):
        w = weights[i]
        if w == 0.0:
            continue
        lo = offsets[i]
        hi = offsets[i + 1]
        logits = np.empty(hi - lo)
        m = -np.inf
        for j in range(lo, hi):
            s = 0.0
            for k in range(dim):
                s += features[j, k] * theta[k]
            logits[j - lo] = s * inv_temp
            if logits[j - lo] > m:
                m = logits[j - lo]
        z = 0.0
        for j in range(hi - lo):
            logits[j] = np.exp(logits[j] - m)
            z += logits[j]
        scale = w * inv_temp
        for k in range(dim):
            grad[k] += scale * features[lo + chosen[i], k]
        for j in range(hi - lo):
            pj = logits[j] / z
            for k in range(dim):
                grad[k] -= scale * pj * features[lo + j, k]
    return grad


def _segment_softmax(features, offsets, theta, inv_temp):
    logits = (features @ theta) * inv_temp
    starts = offsets[:-1]
    seg = np.repeat(np.arange(starts.shape[0]), np.diff(offsets))
    m = np.maximum.reduceat(logits, starts)
    shifted = logits - m[seg]
    lz = np.log(np.add.reduceat(np.exp(shifted), starts))
    return shifted - lz[seg], seg


def choice_logprobs_numpy(features, offsets, chosen, theta, inv_temp):
    logp, _ = _segment_softmax(features, offsets, theta, inv_temp)
    return logp[offsets[:-1] + chosen]


def choice_grad_numpy(features, offsets, chosen, theta, inv_temp, weights):
    logp, seg = _segment_softmax(features, offsets, theta, inv_temp)
    p = np.exp(logp)
    # d log p(c) / d theta = inv_temp * (f_c - E_p[f])
    row_w = -p * weights[seg]
    row_w[offsets[:-1] + chosen] += weights
    return inv_temp * (row_w @ features)


def choice_logprobs(features, offsets, chosen, theta, inv_temp=1.0):
    """Log-probability of the chosen candidate for each stacked decision.

    Decision ``i`` owns feature rows ``offsets[i]:offsets[i+1]``; its logits are
    ``features @ theta * inv_temp``.
    """
    args = _choice_args(features, offsets, chosen, theta)
    fn = choice_logprobs_loop if USE_NUMBA else choice_logprobs_numpy
    return fn(*args, float(inv_temp))


def choice_grad(features, offsets, chosen, theta, inv_temp, weights):
    """``sum_i weights[i] * d log p_i(chosen_i) / d theta``."""
    args = _choice_args(features, offsets, chosen, theta)
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    fn = choice_grad_loop if USE_NUMBA else choice_grad_numpy
    return fn(*args, float(inv_temp), weights)


def _choice_args(features, offsets, chosen, theta):
    return (
        np.ascontiguousarray(features, dtype=np.float64),
        np.ascontiguousarray(offsets, dtype=np.int64),
        np.ascontiguousarray(chosen, dtype=np.int64),
        np.ascontiguousarray(theta, dtype=np.float64),
    )
