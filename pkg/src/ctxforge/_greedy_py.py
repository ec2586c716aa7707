"""Pure numpy greedy residual-selection kernel.

Given a factor ``B`` (rows are quality-weighted feature vectors, so the
selection kernel is ``L = B @ B.T``), repeatedly pick the row with the
largest squared residual norm after projecting out the directions already
chosen — an incremental Cholesky of ``L`` restricted to the picked set.
The product of the recorded gains equals ``det(L_Y)`` for the selected
subset ``Y``.

This module is the fallback twin of the compiled kernel in
``ctxforge._greedy``; both must keep identical semantics:

* ties on the residual norm go to the smallest row index,
* selection stops early once the best squared residual drops below ``eps``,
* residual norms are downdated and clamped at zero.
"""

from __future__ import annotations

import math

import numpy as np


def greedy_select(b, k: int, eps: float = 1e-12):
    """Select up to ``k`` rows of ``b`` greedily; return ``(indices, gains)``.

    ``gains[i]`` is the squared residual norm of the row taken at step ``i``.
    Assumes ``1 <= k <= n``; callers validate.
    """
    r = np.array(b, dtype=np.float64, order="C", copy=True)
    n = r.shape[0]
    n2 = np.einsum("ij,ij->i", r, r)
    used = np.zeros(n, dtype=bool)

    selected: list[int] = []
    gains: list[float] = []
    for _ in range(k):
        masked = np.where(used, -np.inf, n2)
        best = int(np.argmax(masked))  # argmax keeps the smallest index on ties
        bestval = float(masked[best])
        if bestval < eps:
            break
        c = r[best] / math.sqrt(bestval)
        used[best] = True
        selected.append(best)
        gains.append(bestval)
        live = ~used
        dots = r[live] @ c
        r[live] -= dots[:, None] * c
        n2[live] = np.maximum(n2[live] - dots * dots, 0.0)

    return selected, np.asarray(gains, dtype=np.float64)
