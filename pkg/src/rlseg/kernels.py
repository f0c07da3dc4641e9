"""Hot inner loops: segment-string Levenshtein distance and the policy rollout.

Each kernel exists in two forms. ``*_loop`` functions are written in the
subset of Python/numpy that numba compiles; ``*_numpy`` functions are the
uncompiled fallback (for the rollout, the same loop run by the
interpreter). The public names (``levenshtein``, ``rollout_kernel``) bind to whichever backend :mod:`rlseg._accel` selected at import time.
"""
import math

import numpy as np

from ._accel import HAS_NUMBA, USE_NUMBA, njit

OBS_CLIP = 5.0
SQRT2 = math.sqrt(2.0)

# order of the state components inside a StateVector
COMPONENTS = ("now", "future_small", "future_large", "trans", "hot")


def levenshtein_loop(a, b):
    """Unit-cost edit distance between two integer sequences."""
    m = a.shape[0]
    n = b.shape[0]
    prev = np.empty(n + 1, dtype=np.int64)
    cur = np.empty(n + 1, dtype=np.int64)
    for j in range(n + 1):
        prev[j] = j
    for i in range(1, m + 1):
        cur[0] = i
        ai = a[i - 1]
        for j in range(1, n + 1):
            cost = 0 if ai == b[j - 1] else 1
            best = prev[j - 1] + cost
            if prev[j] + 1 < best:
                best = prev[j] + 1
            if cur[j - 1] + 1 < best:
                best = cur[j - 1] + 1
            cur[j] = best
        prev, cur = cur, prev
    return prev[n]


def levenshtein_numpy(a, b):
    """Row-vectorized edit distance.

    Substitutions and deletions are elementwise against the previous row;
    the insertion chain ``d[j] = min(c[j], d[j-1] + 1)`` is resolved with a
    running minimum of ``c[j] - j``.
    """
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    n = b.shape[0]
    idx = np.arange(n + 1, dtype=np.int64)
    prev = idx.copy()
    for i in range(1, a.shape[0] + 1):
        c = np.empty(n + 1, dtype=np.int64)
        c[0] = i
        c[1:] = np.minimum(prev[:-1] + (b != a[i - 1]), prev[1:] + 1)
        prev = np.minimum.accumulate(c - idx) + idx
    return int(prev[n])


def state_dim(n_feat, n_classes, flags):
    dim = 0
    if flags[0]:
        dim += n_feat
    if flags[1]:
        dim += n_feat
    if flags[2]:
        dim += n_feat
    if flags[3]:
        dim += n_classes
    if flags[4]:
        dim += n_classes
    return dim


def fill_state_loop(out, feats, t, k_s, k_l, trans_rows, dur_mean, dur_std, last, stay, flags):
    """Write the observation for position ``t`` into ``out``."""
    n_t = feats.shape[0]
    d = feats.shape[1]
    n_classes = trans_rows.shape[0]
    off = 0
    if flags[0]:
        out[off:off + d] = feats[t]
        off += d
    if flags[1]:
        out[off:off + d] = feats[min(t + k_s, n_t - 1)]
        off += d
    if flags[2]:
        out[off:off + d] = feats[min(t + k_l, n_t - 1)]
        off += d
    if flags[3]:
        if last < 0:
            out[off:off + n_classes] = 1.0 / n_classes
        else:
            cdf = 0.5 * math.erfc(-(stay - dur_mean[last]) / (dur_std[last] * SQRT2))
            out[off:off + n_classes] = trans_rows[last] * cdf
            out[off + last] = 1.0 - cdf
        off += n_classes
    if flags[4]:
        out[off:off + n_classes] = 0.0
        if last >= 0:
            out[off + last] = 1.0
        off += n_classes
    return off


def policy_probs_loop(s, w1, b1, w2, b2, obs_mean, obs_scale):
    z = (s - obs_mean) / obs_scale
    z = np.minimum(np.maximum(z, -OBS_CLIP), OBS_CLIP)
    h = np.tanh(np.dot(w1, z) + b1)
    logits = np.dot(w2, h) + b2
    e = np.exp(logits - logits.max())
    return e / e.sum()


def _make_rollout(fill_state, policy_probs, state_dim):
    """Bind the rollout loop to one set of helper kernels."""

    def rollout_loop(feats, truth, steps, trans_rows, dur_mean, dur_std, flags,
                     w1, b1, w2, b2, obs_mean, obs_scale, alpha, uniforms, greedy):
        """Walk one trial with the MLP policy.

        Returns ``(states, actions, rewards, errors, starts, pred, n_actions)``;
        the arrays are sized for the worst case ``ceil(n_t / k_s)`` and only the
        first ``n_actions`` rows are meaningful.
        """
        n_t = feats.shape[0]
        n_classes = trans_rows.shape[0]
        n_k = steps.shape[0]
        k_s = steps[0]
        k_l = steps[n_k - 1]
        dim = state_dim(feats.shape[1], n_classes, flags)
        max_steps = (n_t + k_s - 1) // k_s
        states = np.zeros((max_steps, dim))
        actions = np.zeros(max_steps, dtype=np.int64)
        rewards = np.zeros(max_steps)
        errors = np.zeros(max_steps, dtype=np.int64)
        starts = np.zeros(max_steps, dtype=np.int64)
        pred = np.zeros(n_t, dtype=np.int64)
        n_actions = n_k * n_classes
        t = 0
        last = -1
        stay = 0
        n = 0
        while t < n_t:
            s = states[n]
            fill_state(s, feats, t, k_s, k_l, trans_rows, dur_mean, dur_std, last, stay, flags)
            p = policy_probs(s, w1, b1, w2, b2, obs_mean, obs_scale)
            if greedy:
                a = int(np.argmax(p))
            else:
                u = uniforms[n]
                a = n_actions - 1
                acc = 0.0
                for i in range(n_actions):
                    acc += p[i]
                    if u < acc:
                        a = i
                        break
            k = steps[a // n_classes]
            c = a % n_classes
            k_eff = min(k, n_t - t)
            wrong = 0
            for f in range(t, t + k_eff):
                pred[f] = c
                if truth[f] != c:
                    wrong += 1
            actions[n] = a
            rewards[n] = alpha * k_eff - wrong
            errors[n] = wrong
            starts[n] = t
            if c == last:
                stay += k_eff
            else:
                stay = k_eff
                last = c
            t += k_eff
            n += 1
        return states, actions, rewards, errors, starts, pred, n

    return rollout_loop


levenshtein_numba = njit(levenshtein_loop) if HAS_NUMBA else None

rollout_numpy = _make_rollout(fill_state_loop, policy_probs_loop, state_dim)
if HAS_NUMBA:
    rollout_numba = njit(
        _make_rollout(njit(fill_state_loop), njit(policy_probs_loop), njit(state_dim)),
        cache=False,
    )
else:  # pragma: no cover
    rollout_numba = None

if USE_NUMBA:
    levenshtein = levenshtein_numba
    rollout_kernel = rollout_numba
else:
    levenshtein = levenshtein_numpy
    rollout_kernel = rollout_numpy
