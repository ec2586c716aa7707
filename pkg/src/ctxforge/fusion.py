"""Fused cross-modal scoring and diversity-aware demonstration selection.

Candidates are scored against a query by a convex combination of visual and
text cosine similarities.  The scores lift into a quality-weighted low-rank
kernel ``L = B @ B.T`` with rows ``B_i = exp(beta * s_i) * phi_i``, and a
diverse subset is chosen by greedy residual-norm selection (an incremental
Cholesky of ``L``), which maximizes ``det(L_Y)`` greedily.

The greedy kernel has two interchangeable backends: a compiled extension
(``ctxforge._greedy``) and a pure numpy fallback (``ctxforge._greedy_py``).
The compiled one is used when importable unless ``CTXFORGE_NO_EXT`` is set.
"""

from __future__ import annotations

import itertools
import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import NumericGuardError, ValidationError
from .records import EmbeddingStore

if os.environ.get("CTXFORGE_NO_EXT"):
    from . import _greedy_py as _kernel

    KERNEL_BACKEND = "python"
else:
    try:
        from . import _greedy as _kernel  # type: ignore[no-redef]

        KERNEL_BACKEND = "cython"
    except ImportError:
        from . import _greedy_py as _kernel  # type: ignore[no-redef]

        KERNEL_BACKEND = "python"

# exp(x) overflows float64 just above x = 709.78; guard a little below.
QUALITY_EXP_LIMIT = 700.0

DEFAULT_LAMBDA = 0.5
DEFAULT_BETA = 8.0

# Squared-residual floor: selection stops once every remaining candidate's
# residual norm**2 drops below this (the factor is numerically rank-deficient).
RESIDUAL_EPS = 1e-12

# brute_force_map guards: exhaustive search is a test oracle, not a fast path.
BRUTE_FORCE_MAX_N = 20
BRUTE_FORCE_MAX_SUBSETS = 200_000


@dataclass(frozen=True)
class FusionConfig:
    """Knobs for fused scoring: ``lam`` is the visual-vs-text weight."""

    lam: float = DEFAULT_LAMBDA
    top_n: int = 50

    def __post_init__(self) -> None:
        if not (isinstance(self.lam, (int, float)) and 0.0 <= self.lam <= 1.0):
            raise ValidationError(f"lambda must lie in [0, 1], got {self.lam!r}")
        if not isinstance(self.top_n, int) or isinstance(self.top_n, bool) or self.top_n < 0:
            raise ValidationError(f"top_n must be a non-negative integer, got {self.top_n!r}")


def cosine(a, b) -> float:
    """Cosine similarity of two equal-dimension vectors (norms must be > 0)."""
    av = np.asarray(a, dtype=np.float64)
    bv = np.asarray(b, dtype=np.float64)
    if av.ndim != 1 or bv.ndim != 1 or av.shape != bv.shape:
        raise ValidationError(f"cosine: dimension mismatch {av.shape} vs {bv.shape}")
    na = float(np.linalg.norm(av))
    nb = float(np.linalg.norm(bv))
    if na == 0.0 or nb == 0.0:
        raise ValidationError("cosine: zero-norm input")
    return float(av @ bv / (na * nb))


def fused_score(query_visual, query_text, cand_visual, cand_text, lam: float = DEFAULT_LAMBDA) -> float:
    """Convex combination of the two modality cosines."""
    if not 0.0 <= lam <= 1.0:
        raise ValidationError(f"lam must lie in [0, 1], got {lam!r}")
    return lam * cosine(query_visual, cand_visual) + (1.0 - lam) * cosine(query_text, cand_text)


def rank_top_n(
    query_id: str,
    store: EmbeddingStore,
    config: FusionConfig,
    candidates: list[str] | None = None,
) -> list[tuple[str, float]]:
    """Rank candidates against a query by fused score.

    Both modalities of the query and of every candidate must be present in
    the store.  When ``candidates`` is omitted, every id with both modalities
    (except the query itself) is considered.  Returns ``(id, score)`` pairs
    sorted by descending score, ties broken by ascending id, truncated to
    ``config.top_n``.
    """
    qv = store.require(query_id, "visual")
    qt = store.require(query_id, "text")
    if candidates is None:
        text_ids = set(store.ids("text"))
        pool = sorted(i for i in store.ids("visual") if i in text_ids and i != query_id)
    else:
        pool = [c for c in candidates if c != query_id]
    scored = []
    for cid in pool:
        cv = store.require(cid, "visual")
        ct = store.require(cid, "text")
        scored.append((cid, fused_score(qv.values, qt.values, cv.values, ct.values, config.lam)))
    scored.sort(key=lambda pair: (-pair[1], pair[0]))
    return scored[: config.top_n]


@dataclass(frozen=True, eq=False)
class CandidatePool:
    """Prefiltered candidates: unit feature rows ``phi`` and scores ``s``."""

    ids: tuple[str, ...]
    phi: np.ndarray  # (n, d), rows unit-norm
    scores: np.ndarray  # (n,)
    beta: float = DEFAULT_BETA

    def __post_init__(self) -> None:
        phi = np.asarray(self.phi, dtype=np.float64)
        scores = np.asarray(self.scores, dtype=np.float64)
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "scores", scores)
        n = len(self.ids)
        if phi.ndim != 2 or phi.shape[0] != n:
            raise ValidationError(f"phi: expected ({n}, d) array, got {phi.shape}")
        if scores.shape != (n,):
            raise ValidationError(f"scores: expected ({n},) array, got {scores.shape}")
        if not np.all(np.isfinite(scores)):
            raise ValidationError("scores: must be finite")
        if not (isinstance(self.beta, (int, float)) and self.beta > 0):
            raise ValidationError(f"beta must be > 0, got {self.beta!r}")
        if n:
            norms = np.linalg.norm(phi, axis=1)
            off = np.abs(norms - 1.0)
            worst = int(np.argmax(off))
            if off[worst] > 1e-6:
                raise ValidationError(
                    f"phi row {worst} ({self.ids[worst]!r}) is not unit norm: {norms[worst]!r}"
                )

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True, eq=False)
class DppFactor:
    """Low-rank factor ``b`` of the selection kernel ``L = b @ b.T``."""

    b: np.ndarray  # (n, d)

    def kernel(self) -> np.ndarray:
        return self.b @ self.b.T


def build_dpp_factor(pool: CandidatePool) -> DppFactor:
    """Quality-weight the pool rows: ``b_i = exp(beta * s_i) * phi_i``.

    Raises a numeric guard when any ``beta * s_i`` would overflow ``exp``.
    """
    arg = pool.beta * pool.scores
    if arg.size and float(np.max(arg)) > QUALITY_EXP_LIMIT:
        raise NumericGuardError("quality overflow; rescale scores")
    q = np.exp(arg)
    return DppFactor(b=q[:, None] * pool.phi)


def greedy_dpp_select(factor: DppFactor, k: int, return_gains: bool = False):
    """Greedily select ``k`` rows maximizing ``det(L_Y)`` step by step.

    Returns the selected row indices in selection order (possibly fewer than
    ``k`` when the factor runs out of numerical rank; the product of the
    per-step gains equals ``det(L_Y)``).  Ties go to the smallest index.
    """
    n = factor.b.shape[0]
    if n == 0:
        raise ValidationError("greedy_dpp_select: empty pool")
    if not isinstance(k, int) or isinstance(k, bool) or k < 1 or k > n:
        raise ValidationError(f"greedy_dpp_select: k must lie in [1, {n}], got {k!r}")
    indices, gains = _kernel.greedy_select(factor.b, k, RESIDUAL_EPS)
    if return_gains:
        return list(indices), np.asarray(gains, dtype=np.float64)
    return list(indices)


def brute_force_map(factor: DppFactor, k: int) -> tuple[tuple[int, ...], float]:
    """Exhaustive argmax of ``det(L_Y)`` over all size-``k`` subsets.

    Reference oracle: guarded to small instances (n <= 20 and at most
    200k subsets).  Ties return the lexicographically smallest subset.
    """
    n = factor.b.shape[0]
    if n == 0:
        raise ValidationError("brute_force_map: empty pool")
    if not isinstance(k, int) or isinstance(k, bool) or k < 1 or k > n:
        raise ValidationError(f"brute_force_map: k must lie in [1, {n}], got {k!r}")
    if n > BRUTE_FORCE_MAX_N or math.comb(n, k) > BRUTE_FORCE_MAX_SUBSETS:
        raise ValidationError(
            f"brute_force_map: instance too large (n={n}, C(n,k)={math.comb(n, k)})"
        )
    kernel = factor.kernel()
    best_subset: tuple[int, ...] | None = None
    best_det = -math.inf
    for subset in itertools.combinations(range(n), k):
        sub = kernel[np.ix_(subset, subset)]
        det = float(np.linalg.det(sub))
        if det > best_det:
            best_det = det
            best_subset = subset
    assert best_subset is not None
    return best_subset, best_det
