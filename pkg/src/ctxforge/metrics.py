"""Shot-curve metrics: efficiency, stability, correlation, transfer deltas.

All aggregations run in float64.  Curves live on explicit shot grids (see
:class:`ctxforge.records.ShotCurve`); nothing here interpolates beyond the
trapezoid rule on the given grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from .errors import ValidationError
from .records import ShotCurve, TAXONOMIES, _iter_jsonl

PERTURBATION_KINDS = ("random_replace", "reverse_order", "interference")
RESULT_MODALITIES = ("und", "gen")


@dataclass(frozen=True)
class CurveSummary:
    """Headline numbers for one curve: P_0, best P_k, and efficiency."""

    zero_shot: float
    peak: float
    efficiency: float


@dataclass(frozen=True)
class StabilityReport:
    perturbation: str
    deviation_percent: float

    def __post_init__(self) -> None:
        if self.perturbation not in PERTURBATION_KINDS:
            raise ValidationError(
                f"perturbation: {self.perturbation!r} is not one of {PERTURBATION_KINDS}"
            )
        if not math.isfinite(self.deviation_percent) or self.deviation_percent < 0:
            raise ValidationError(
                f"deviation_percent: must be finite and >= 0, got {self.deviation_percent!r}"
            )


def _trapezoid(xs: Sequence[float], ys: Sequence[float]) -> float:
    total = 0.0
    for i in range(1, len(xs)):
        total += 0.5 * (ys[i] + ys[i - 1]) * (xs[i] - xs[i - 1])
    return total


def icl_efficiency(curve: ShotCurve) -> float:
    """Normalized area under the gain-over-zero-shot curve.

    Eff = (1 / K_max) * sum_i 0.5 * ((P_{k_i} - P_0) + (P_{k_{i-1}} - P_0))
                               * (k_i - k_{i-1})

    The grid must contain shot 0 and at least one more point.
    """
    if len(curve.shots) < 2:
        raise ValidationError("icl_efficiency: single-point curve")
    if curve.shots[0] != 0:
        raise ValidationError(f"icl_efficiency: missing shot 0 (grid {curve.shots})")
    p0 = curve.values[0]
    deltas = [v - p0 for v in curve.values]
    k_max = curve.shots[-1]
    return _trapezoid(curve.shots, deltas) / k_max


def summarize(curve: ShotCurve) -> CurveSummary:
    """Zero-shot value, peak value, and efficiency for one curve."""
    eff = icl_efficiency(curve)
    return CurveSummary(
        zero_shot=curve.values[0], peak=max(curve.values), efficiency=eff
    )


def stability_score(clean: ShotCurve, perturbed: ShotCurve) -> float:
    """Percent area deviation of a perturbed curve from its clean twin.

    100 * area(|clean - perturbed|) / area(clean), both areas by the
    trapezoid rule on the shared grid.  Clean values must be strictly
    positive and the grids identical.
    """
    if clean.shots != perturbed.shots:
        raise ValidationError(
            f"stability_score: grid mismatch {clean.shots} vs {perturbed.shots}"
        )
    for i, v in enumerate(clean.values):
        if v <= 0:
            raise ValidationError(f"stability_score: clean values[{i}] = {v!r} not positive")
    base = _trapezoid(clean.shots, clean.values)
    if base <= 0:
        raise ValidationError("stability_score: non-positive clean area")
    dev = _trapezoid(
        clean.shots, [abs(c - p) for c, p in zip(clean.values, perturbed.values)]
    )
    return 100.0 * dev / base


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Pearson correlation; needs >= 3 paired points and non-constant input."""
    if len(xs) != len(ys):
        raise ValidationError(f"pearson: length mismatch {len(xs)} vs {len(ys)}")
    if len(xs) < 3:
        raise ValidationError("pearson: need at least 3 points")
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValidationError("pearson: non-finite input")
    xc = x - x.mean()
    yc = y - y.mean()
    denom = math.sqrt(float(xc @ xc)) * math.sqrt(float(yc @ yc))
    if denom == 0.0:
        raise ValidationError("pearson: constant input")
    return float(xc @ yc) / denom


def _average_ranks(values: Sequence[float]) -> np.ndarray:
    """1-based ranks; tied values share the average of their positions."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v), dtype=np.float64)
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
            j += 1
        avg = (i + j) / 2.0 + 1.0
        for t in range(i, j + 1):
            ranks[order[t]] = avg
        i = j + 1
    return ranks


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Spearman rank correlation (average ranks for ties)."""
    if len(xs) != len(ys):
        raise ValidationError(f"spearman: length mismatch {len(xs)} vs {len(ys)}")
    return pearson(_average_ranks(xs), _average_ranks(ys))


def relative_change(base: Sequence[ShotCurve], variant: Sequence[ShotCurve]) -> float:
    """Mean percent change of variant over base across all curve points."""
    if len(base) != len(variant):
        raise ValidationError(
            f"relative_change: curve count mismatch {len(base)} vs {len(variant)}"
        )
    if not base:
        raise ValidationError("relative_change: no curves")
    diffs: list[float] = []
    for i, (b, v) in enumerate(zip(base, variant)):
        if b.shots != v.shots:
            raise ValidationError(
                f"relative_change: curve {i} grid mismatch {b.shots} vs {v.shots}"
            )
        for j, (bv, vv) in enumerate(zip(b.values, v.values)):
            if bv == 0:
                raise ValidationError(f"relative_change: zero base value at curve {i}, point {j}")
            diffs.append(100.0 * (vv - bv) / bv)
    return float(np.mean(diffs))


def win_tie_lose(outcomes: Sequence[str]) -> tuple[float, float, float]:
    """Percentages of win/tie/lose judgments; always sums to 100."""
    if not outcomes:
        raise ValidationError("win_tie_lose: no outcomes")
    counts = {"win": 0, "tie": 0, "lose": 0}
    for i, o in enumerate(outcomes):
        if o not in counts:
            raise ValidationError(f"win_tie_lose: outcomes[{i}] = {o!r} not win/tie/lose")
        counts[o] += 1
    n = len(outcomes)
    return (
        100.0 * counts["win"] / n,
        100.0 * counts["tie"] / n,
        100.0 * counts["lose"] / n,
    )


# ---------------------------------------------------------------------------
# result rows (shared input schema of the eval subcommands)


@dataclass(frozen=True)
class ResultRow:
    """One benchmark curve: who produced it, on what, and the curve itself."""

    model: str
    task: str
    taxonomy: str
    modality: str
    curve: ShotCurve
    perturbation: str | None = None

    def __post_init__(self) -> None:
        for name in ("model", "task"):
            if not isinstance(getattr(self, name), str) or not getattr(self, name):
                raise ValidationError(f"{name}: must be a non-empty string")
        if self.taxonomy not in TAXONOMIES:
            raise ValidationError(f"taxonomy: {self.taxonomy!r} is not one of {sorted(TAXONOMIES)}")
        if self.modality not in RESULT_MODALITIES:
            raise ValidationError(
                f"modality: {self.modality!r} is not one of {RESULT_MODALITIES}"
            )
        if self.perturbation is not None and self.perturbation not in PERTURBATION_KINDS:
            raise ValidationError(
                f"perturbation: {self.perturbation!r} is not one of {PERTURBATION_KINDS}"
            )

    @staticmethod
    def from_json(obj: Any, path: str = "result") -> "ResultRow":
        if not isinstance(obj, dict):
            raise ValidationError(f"{path}: expected an object")
        for key in ("model", "task", "taxonomy", "modality", "shots", "values"):
            if key not in obj:
                raise ValidationError(f"{path}.{key}: missing")
        shots = obj["shots"]
        values = obj["values"]
        if not isinstance(shots, list) or not isinstance(values, list):
            raise ValidationError(f"{path}: shots and values must be lists")
        try:
            curve = ShotCurve(shots=tuple(shots), values=tuple(float(v) for v in values))
        except (TypeError, ValueError):
            raise ValidationError(f"{path}.values: expected numbers") from None
        except ValidationError as exc:
            raise ValidationError(f"{path}: {exc}") from None
        pert = obj.get("perturbation")
        if pert == "clean":
            pert = None
        try:
            return ResultRow(
                model=obj["model"],
                task=obj["task"],
                taxonomy=obj["taxonomy"],
                modality=obj["modality"],
                curve=curve,
                perturbation=pert,
            )
        except ValidationError as exc:
            raise ValidationError(f"{path}: {exc}") from None


def load_results(path: str) -> list[ResultRow]:
    rows = []
    for lineno, obj in _iter_jsonl(path):
        try:
            rows.append(ResultRow.from_json(obj))
        except ValidationError as exc:
            raise ValidationError(f"{path}: line {lineno}: {exc}") from None
    return rows
