"""Ranking accuracy of query embeddings against a document pool."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class RetrievalScore:
    acc_at_1: float
    mrr: float
    ranks: tuple  # 1-based rank of each query's gold document


def rank_documents(sims: np.ndarray) -> np.ndarray:
    """Per-query document order, best first; equal scores keep the lower index first."""
    return np.argsort(-np.asarray(sims, dtype=np.float64), axis=1, kind="stable")


def retrieval_eval(queries, documents, gold: Sequence[int]) -> RetrievalScore:
    """Cosine ranking of ``documents`` for every query; ``gold[i]`` is query ``i``'s document."""
    q = np.asarray(queries, dtype=np.float64)
    d = np.asarray(documents, dtype=np.float64)
    if q.ndim != 2 or d.ndim != 2:
        raise ValueError("queries and documents must be 2-D arrays")
    if q.shape[1] != d.shape[1]:
        raise ValueError(f"dimension mismatch: queries have {q.shape[1]}, documents {d.shape[1]}")
    g = np.asarray(gold, dtype=np.int64)
    if g.shape != (q.shape[0],):
        raise ValueError("need exactly one gold document per query")
    if ((g < 0) | (g >= d.shape[0])).any():
        raise ValueError("gold index out of range")
    qn = np.linalg.norm(q, axis=1, keepdims=True)
    dn = np.linalg.norm(d, axis=1, keepdims=True)
    if (qn == 0).any() or (dn == 0).any():
        raise ValueError("zero-length embedding")
    sims = (q / qn) @ (d / dn).T
    order = rank_documents(sims)
    ranks = np.argmax(order == g[:, None], axis=1) + 1
    return RetrievalScore(float(np.mean(ranks == 1)), float(np.mean(1.0 / ranks)), tuple(int(r) for r in ranks))


def pair_retrieval(model, tok, examples, chunk: int = 256) -> RetrievalScore:
    """Retrieve each example's positive among all examples' positives, with instruction-prefixed queries."""
    from ..contrastive import embed_texts

    docs = embed_texts(model, tok, [ex.positive for ex in examples], chunk=chunk)
    qs = np.zeros_like(docs)
    for instr in sorted({ex.instruction for ex in examples}):
        idx = [i for i, ex in enumerate(examples) if ex.instruction == instr]
        qs[idx] = embed_texts(model, tok, [examples[i].query for i in idx], instr, chunk=chunk)
    return retrieval_eval(qs, docs, np.arange(len(examples)))
