"""Embedding nearest neighbors and the 2D projection export."""

import numpy as np
import pytest
import torch

from textcode import analysis as A
from textcode.model import separate_embeddings


def test_nearest_neighbors_basic(tiny_model, toy_vocab):
    rep = A.nearest_neighbors(tiny_model, toy_vocab, "return", "code", top_k=5)
    assert rep.query.endswith("return")
    assert rep.space == "code"
    assert len(rep.neighbors) == 5
    scores = [s for _, s in rep.neighbors]
    assert scores == sorted(scores, reverse=True)
    assert all(-1.0 - 1e-9 <= s <= 1.0 + 1e-9 for s in scores)
    assert rep.query not in [t for t, _ in rep.neighbors]


def test_nearest_neighbors_word_mark_fallback(tiny_model, toy_vocab):
    # "return" only exists as the word-start form
    direct = A.nearest_neighbors(tiny_model, toy_vocab, "▁return", "code", 3)
    fallback = A.nearest_neighbors(tiny_model, toy_vocab, "return", "code", 3)
    assert direct.neighbors == fallback.neighbors


def test_nearest_neighbors_unknown_token(tiny_model, toy_vocab):
    with pytest.raises(A.AnalysisError):
        A.nearest_neighbors(tiny_model, toy_vocab, "zzznope", "code")
    with pytest.raises(A.AnalysisError):
        A.nearest_neighbors(tiny_model, toy_vocab, "return", "both")


def test_shared_model_spaces_agree(tiny_model, toy_vocab):
    nl = A.nearest_neighbors(tiny_model, toy_vocab, "return", "nl", 5)
    code = A.nearest_neighbors(tiny_model, toy_vocab, "return", "code", 5)
    assert nl.neighbors == code.neighbors


def test_separated_model_spaces_diverge(tiny_model, toy_vocab, toy_sepset):
    pes = separate_embeddings(tiny_model, "pes", toy_sepset)
    with torch.no_grad():
        pes.overlay_embed.weight.add_(
            torch.randn_like(pes.overlay_embed.weight)
        )
    nl = A.nearest_neighbors(pes, toy_vocab, "return", "nl", 5)
    code = A.nearest_neighbors(pes, toy_vocab, "return", "code", 5)
    assert nl.neighbors != code.neighbors


def test_neighbor_report_json(tiny_model, toy_vocab):
    rep = A.nearest_neighbors(tiny_model, toy_vocab, "return", "code", 3)
    blob = rep.to_json()
    assert blob["query"] == rep.query
    assert len(blob["neighbors"]) == 3
    assert {"token", "cosine"} <= set(blob["neighbors"][0])


def test_project_2d_pca_small(tiny_model, toy_vocab):
    out = A.project_2d(tiny_model, toy_vocab, [10, 11, 12, 13], "code", seed=1)
    assert out["method"] == "pca"
    assert len(out["points"]) == 4
    assert all({"token", "x", "y"} <= set(pt) for pt in out["points"])


def test_project_2d_tsne_deterministic(tiny_model, toy_vocab):
    ids = list(range(20, 40))
    a = A.project_2d(tiny_model, toy_vocab, ids, "code", seed=3)
    b = A.project_2d(tiny_model, toy_vocab, ids, "code", seed=3)
    assert a["method"] == "tsne"
    assert a["points"] == b["points"]
    assert -1.0 <= a["rank_correlation"] <= 1.0


def test_project_2d_needs_three_tokens(tiny_model, toy_vocab):
    with pytest.raises(A.AnalysisError):
        A.project_2d(tiny_model, toy_vocab, [1, 2], "code")


def test_projection_preserves_ranking_on_structured_input(toy_vocab, tiny_model):
    # plant three tight clusters in the embedding table; the projection
    # should keep within-cluster points closer than across-cluster ones
    model = tiny_model
    with torch.no_grad():
        base = model.base_embed.weight
        centers = torch.randn(3, base.shape[1], generator=torch.Generator().manual_seed(5)) * 5
        ids = []
        for c in range(3):
            for j in range(4):
                tid = 50 + 4 * c + j
                base[tid] = centers[c] + 0.01 * torch.randn(
                    base.shape[1], generator=torch.Generator().manual_seed(10 * c + j)
                )
                ids.append(tid)
    out = A.project_2d(model, toy_vocab, ids, "code", seed=0)
    assert out["rank_correlation"] > 0.6
