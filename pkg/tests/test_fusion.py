"""Fused similarity ranking: cosine, score fusion, top-N prefilter."""

from __future__ import annotations

import numpy as np
import pytest

from ctxforge.errors import ValidationError
from ctxforge.fusion import FusionConfig, cosine, fused_score, rank_top_n
from ctxforge.records import EmbeddingRecord, EmbeddingStore


def store_with(pairs):
    """pairs: {id: (visual, text)}"""
    store = EmbeddingStore()
    for rid, (vis, txt) in pairs.items():
        store.add(EmbeddingRecord(id=rid, modality="visual", dim=len(vis), values=tuple(vis)))
        store.add(EmbeddingRecord(id=rid, modality="text", dim=len(txt), values=tuple(txt)))
    return store


def test_cosine_basics():
    assert cosine((1.0, 0.0), (1.0, 0.0)) == pytest.approx(1.0)
    assert cosine((1.0, 0.0), (0.0, 1.0)) == pytest.approx(0.0)
    assert cosine((1.0, 0.0), (-1.0, 0.0)) == pytest.approx(-1.0)


def test_cosine_rejects_zero_and_mismatched():
    with pytest.raises(ValidationError):
        cosine((0.0, 0.0), (1.0, 0.0))
    with pytest.raises(ValidationError):
        cosine((1.0, 0.0), (1.0, 0.0, 0.0))


def test_fused_score_is_convex_mix():
    v_q, v_c = (1.0, 0.0), (1.0, 0.0)
    t_q, t_c = (1.0, 0.0), (0.0, 1.0)
    assert fused_score(v_q, t_q, v_c, t_c, lam=1.0) == pytest.approx(1.0)
    assert fused_score(v_q, t_q, v_c, t_c, lam=0.0) == pytest.approx(0.0)
    assert fused_score(v_q, t_q, v_c, t_c, lam=0.5) == pytest.approx(0.5)


def test_fusion_config_validation():
    with pytest.raises(ValidationError):
        FusionConfig(lam=1.5)
    with pytest.raises(ValidationError):
        FusionConfig(top_n=-1)


def test_rank_top_n_orders_and_truncates():
    store = store_with(
        {
            "q": ((1.0, 0.0), (1.0, 0.0)),
            "near": ((1.0, 0.0), (1.0, 0.0)),
            "mid": ((0.7071067811865476, 0.7071067811865476), (1.0, 0.0)),
            "far": ((0.0, 1.0), (0.0, 1.0)),
        }
    )
    ranked = rank_top_n("q", store, FusionConfig(lam=0.5, top_n=2))
    assert [rid for rid, _ in ranked] == ["near", "mid"]
    assert ranked[0][1] == pytest.approx(1.0)


def test_rank_top_n_tie_breaks_by_id():
    store = store_with(
        {
            "q": ((1.0, 0.0), (1.0, 0.0)),
            "b": ((1.0, 0.0), (1.0, 0.0)),
            "a": ((1.0, 0.0), (1.0, 0.0)),
        }
    )
    ranked = rank_top_n("q", store, FusionConfig(lam=0.5, top_n=5))
    assert [rid for rid, _ in ranked] == ["a", "b"]


def test_rank_top_n_requires_query_in_both_modalities():
    store = EmbeddingStore()
    store.add(EmbeddingRecord(id="q", modality="visual", dim=2, values=(1.0, 0.0)))
    with pytest.raises(ValidationError, match="missing embedding"):
        rank_top_n("q", store, FusionConfig())


def test_rank_top_n_candidates_need_both_modalities():
    store = store_with({"q": ((1.0, 0.0), (1.0, 0.0)), "both": ((1.0, 0.0), (1.0, 0.0))})
    store.add(EmbeddingRecord(id="vis-only", modality="visual", dim=2, values=(1.0, 0.0)))
    ranked = rank_top_n("q", store, FusionConfig())
    assert [rid for rid, _ in ranked] == ["both"]


def test_rank_top_n_random_agrees_with_direct_formula():
    rng = np.random.default_rng(11)
    for _ in range(20):
        n = int(rng.integers(2, 9))
        ids = [f"c{i}" for i in range(n)]
        pairs = {"q": (rng.standard_normal(4), rng.standard_normal(3))}
        for rid in ids:
            pairs[rid] = (rng.standard_normal(4), rng.standard_normal(3))
        store = store_with(pairs)
        lam = float(rng.uniform(0.0, 1.0))
        ranked = rank_top_n("q", store, FusionConfig(lam=lam, top_n=n))
        expected = {}
        for rid in ids:
            expected[rid] = lam * cosine(pairs["q"][0], pairs[rid][0]) + (1 - lam) * cosine(
                pairs["q"][1], pairs[rid][1]
            )
        for rid, score in ranked:
            assert score == pytest.approx(expected[rid], abs=1e-12)
        scores = [s for _, s in ranked]
        assert scores == sorted(scores, reverse=True)
