"""Batched trajectory-sampling kernels.

Monte Carlo validation pushes thousands of rollouts through per-agent kernel
and policy tables; that inner loop is the only hot path in the package that
plain numpy cannot express without materializing large intermediates per
step.  Two interchangeable implementations live here:

- a scalar triple loop compiled with numba when it is importable, and
- a vectorized numpy fallback that batches over rollouts.

Both consume the same flattened tables and produce bitwise-identical output
(integer index arithmetic plus the same float comparisons in the same
order), so the selection is purely a speed decision.  Set
``GTLSYNTH_NO_NUMBA=1`` to force the numpy path; ``USING_NUMBA`` reports
what's active.  ``bench.py`` times one against the other.

Table layout (all built by the oracle module): per agent i,

- kernel: ``kcum[koff[i] + (ctx * nA[i] + a) * nS[i] + s']`` cumulative over
  s', with ctx the flat code of the agent's ``depends_on`` states under
  ``dep_idx``/``dep_str`` between ``dep_off[i]`` and ``dep_off[i+1]``;
- policy: ``pol[poff[i] + ((code * nQ[i] + q) * T + t) * nA[i] + a]``
  cumulative over a, with code the flat block state under
  ``blk_idx``/``blk_str`` (the bare own state for local policies, nQ = 1);
- automaton: ``letters[loff[i] + code]`` and
  ``delta[doff[i] + q * nL[i] + letter]`` advance q on the *successor* block
  state, matching the product construction.

Sampling is inverse-CDF: the chosen index is the first whose cumulative
weight exceeds the uniform draw, clipped to the last index.
"""

from __future__ import annotations

import os

import numpy as np

_FORCE_NUMPY = os.environ.get("GTLSYNTH_NO_NUMBA", "").strip() not in ("", "0")


def rollouts_loops(states, actions, qs, urand,
                   kcum, koff, dep_idx, dep_str, dep_off, n_s, n_a,
                   pol, poff, blk_idx, blk_str, blk_off,
                   n_q, letters, loff, delta, doff, n_l):
    B, T1, M = states.shape
    T = T1 - 1
    for b in range(B):
        for t in range(T):
            for i in range(M):
                code = 0
                for k in range(blk_off[i], blk_off[i + 1]):
                    code += states[b, t, blk_idx[k]] * blk_str[k]
                base = poff[i] + ((code * n_q[i] + qs[b, i]) * T + t) * n_a[i]
                u = urand[b, t, 0, i]
                a = 0
                while a < n_a[i] - 1 and pol[base + a] <= u:
                    a += 1
                actions[b, t, i] = a
            for i in range(M):
                ctx = 0
                for k in range(dep_off[i], dep_off[i + 1]):
                    ctx += states[b, t, dep_idx[k]] * dep_str[k]
                base = koff[i] + (ctx * n_a[i] + actions[b, t, i]) * n_s[i]
                u = urand[b, t, 1, i]
                s2 = 0
                while s2 < n_s[i] - 1 and kcum[base + s2] <= u:
                    s2 += 1
                states[b, t + 1, i] = s2
            for i in range(M):
                if n_q[i] > 1:
                    code = 0
                    for k in range(blk_off[i], blk_off[i + 1]):
                        code += states[b, t + 1, blk_idx[k]] * blk_str[k]
                    letter = letters[loff[i] + code]
                    qs[b, i] = delta[doff[i] + qs[b, i] * n_l[i] + letter]


def rollouts_numpy(states, actions, qs, urand,
                   kcum, koff, dep_idx, dep_str, dep_off, n_s, n_a,
                   pol, poff, blk_idx, blk_str, blk_off,
                   n_q, letters, loff, delta, doff, n_l):
    B, T1, M = states.shape
    T = T1 - 1
    for t in range(T):
        cur = states[:, t, :]
        for i in range(M):
            lo, hi = blk_off[i], blk_off[i + 1]
            code = cur[:, blk_idx[lo:hi]] @ blk_str[lo:hi]
            base = poff[i] + ((code * n_q[i] + qs[:, i]) * T + t) * n_a[i]
            rows = pol[base[:, None] + np.arange(n_a[i])]
            u = urand[:, t, 0, i]
            actions[:, t, i] = np.minimum(
                (rows <= u[:, None]).sum(axis=1), n_a[i] - 1
            )
        for i in range(M):
            lo, hi = dep_off[i], dep_off[i + 1]
            ctx = cur[:, dep_idx[lo:hi]] @ dep_str[lo:hi]
            base = koff[i] + (ctx * n_a[i] + actions[:, t, i]) * n_s[i]
            rows = kcum[base[:, None] + np.arange(n_s[i])]
            u = urand[:, t, 1, i]
            states[:, t + 1, i] = np.minimum(
                (rows <= u[:, None]).sum(axis=1), n_s[i] - 1
            )
        nxt = states[:, t + 1, :]
        for i in range(M):
            if n_q[i] > 1:
                lo, hi = blk_off[i], blk_off[i + 1]
                code = nxt[:, blk_idx[lo:hi]] @ blk_str[lo:hi]
                qs[:, i] = delta[doff[i] + qs[:, i] * n_l[i] + letters[loff[i] + code]]


if _FORCE_NUMPY:
    USING_NUMBA = False
    advance_rollouts = rollouts_numpy
else:
    try:
        from numba import njit

        advance_rollouts = njit(cache=True, nogil=True)(rollouts_loops)
        USING_NUMBA = True
    except ImportError:  # pragma: no cover - numba is an install-time choice
        USING_NUMBA = False
        advance_rollouts = rollouts_numpy
