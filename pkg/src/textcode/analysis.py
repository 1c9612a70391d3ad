"""Embedding-space inspection: per-modality cosine nearest neighbors and a
seeded 2D projection export for plotting."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from scipy.stats import spearmanr

from .model import CodeLM
from .tokenizer import Vocabulary

SPACES = ("nl", "code")


class AnalysisError(Exception):
    pass


@dataclass
class NeighborReport:
    query: str
    space: str
    neighbors: list[tuple[str, float]]

    def to_json(self) -> dict:
        return {
            "query": self.query,
            "space": self.space,
            "neighbors": [{"token": t, "cosine": s} for t, s in self.neighbors],
        }


def embedding_matrix(model: CodeLM, space: str) -> np.ndarray:
    if space not in SPACES:
        raise AnalysisError(f"unknown space: {space}")
    with torch.no_grad():
        e_nl, e_code = model.embedding_matrices()
    return (e_nl if space == "nl" else e_code).detach().cpu().numpy().astype(np.float64)


def nearest_neighbors(
    model: CodeLM, vocab: Vocabulary, token: str, space: str, top_k: int = 20
) -> NeighborReport:
    """Rank vocabulary tokens by cosine similarity to the query within one
    modality's embedding rows; the query itself is excluded."""
    from .tokenizer import WORD_MARK

    if token in vocab.ids:
        qid = vocab.ids[token]
    elif WORD_MARK + token in vocab.ids:
        qid = vocab.ids[WORD_MARK + token]
    else:
        raise AnalysisError(f"token not in vocabulary: {token!r}")
    rows = embedding_matrix(model, space)
    query = rows[qid]
    norms = np.linalg.norm(rows, axis=1)
    qnorm = np.linalg.norm(query)
    if qnorm == 0:
        raise AnalysisError("query embedding has zero norm")
    sims = rows @ query / np.where(norms == 0, 1.0, norms) / qnorm
    sims[norms == 0] = -np.inf
    sims[qid] = -np.inf
    k = min(top_k, len(rows) - 1)
    order = np.argsort(-sims, kind="stable")[:k]
    return NeighborReport(
        query=vocab.tokens[qid],
        space=space,
        neighbors=[(vocab.tokens[i], float(sims[i])) for i in order],
    )


def _cosine_distances(rows: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    unit = rows / np.where(norms == 0, 1.0, norms)
    return 1.0 - unit @ unit.T


def project_2d(
    model: CodeLM,
    vocab: Vocabulary,
    token_ids: Sequence[int],
    space: str,
    seed: int = 0,
) -> dict:
    """Deterministic 2D layout of selected embedding rows.

    Uses a seeded stochastic-neighbor layout when there are enough points and
    PCA otherwise; reports the Spearman rank correlation between 2D distances
    and the original cosine distances alongside the coordinates.
    """
    if len(token_ids) < 3:
        raise AnalysisError("projection needs at least 3 tokens")
    rows = embedding_matrix(model, space)[list(token_ids)]
    n = len(token_ids)
    if n >= 8:
        from sklearn.manifold import TSNE

        coords = TSNE(
            n_components=2,
            perplexity=min(5.0, (n - 1) / 3.0),
            metric="cosine",
            init="random",
            random_state=seed,
        ).fit_transform(rows)
        method = "tsne"
    else:
        from sklearn.decomposition import PCA

        coords = PCA(n_components=2, random_state=seed).fit_transform(rows)
        method = "pca"
    high = _cosine_distances(rows)
    low = np.linalg.norm(coords[:, None, :] - coords[None, :, :], axis=-1)
    iu = np.triu_indices(n, k=1)
    if np.std(high[iu]) == 0 or np.std(low[iu]) == 0:
        rank_corr = 1.0 if np.allclose(high[iu], high[iu][0]) else 0.0
    else:
        rank_corr = float(spearmanr(high[iu], low[iu]).statistic)
    return {
        "space": space,
        "method": method,
        "seed": seed,
        "rank_correlation": rank_corr,
        "points": [
            {"token": vocab.tokens[tid], "x": float(x), "y": float(y)}
            for tid, (x, y) in zip(token_ids, coords)
        ],
    }
