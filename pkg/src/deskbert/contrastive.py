"""Contrastive fine-tuning of a pretrained encoder into a sentence embedder."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .autodiff import GradTape, Tensor, backward, cross_entropy, matmul, power, tsum
from .data.packing import PackedBatch, collate
from .data.tokenizer import CLS_ID, SEP_ID, Tokenizer
from .model.encoder import Encoder, mean_pool
from .train.optim import AdamW, clip_grad_norm
from .train.pretrain import no_decay_names

MASKED = -1e9  # additive logit bias for excluded candidates


@dataclass(frozen=True)
class PairExample:
    task: str
    instruction: str
    query: str
    positive: str
    hard_negatives: tuple = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "hard_negatives", tuple(self.hard_negatives))
        if not self.query.strip() or not self.positive.strip():
            raise ValueError("query and positive must be nonempty")


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.07
    similarity: str = "cosine"  # or "dot" (unnormalized)
    alpha: float = 0.5
    steps: int = 2000
    batch_size: int = 64
    lr: float = 2e-5
    weight_decay: float = 0.0
    betas: tuple = (0.9, 0.95)
    eps: float = 1e-8
    clip_norm: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if self.similarity not in ("cosine", "dot"):
            raise ValueError(f"similarity must be cosine or dot, got {self.similarity!r}")
        if self.steps < 0 or self.batch_size < 2:
            raise ValueError("steps must be >= 0 and batch_size >= 2")


def cosine_sim(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("cosine similarity of a zero vector is undefined")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def dataset_mix_probs(sizes: Sequence[float], alpha: float) -> np.ndarray:
    """Temperature-scaled multinomial: ``p_i = n_i**alpha / sum_j n_j**alpha``."""
    n = np.asarray(sizes, dtype=np.float64)
    if n.ndim != 1 or n.size == 0 or (n <= 0).any():
        raise ValueError("dataset sizes must be a nonempty list of positive numbers")
    # divide by the largest size first so the result is exactly scale-invariant
    w = (n / n.max()) ** alpha
    return w / w.sum()


def info_nce(sim_pos: float, sim_negs: Sequence[float], tau: float) -> float:
    """``-log(e^{s+/tau} / (e^{s+/tau} + sum e^{s-/tau}))``, max-shifted."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    negs = np.asarray(sim_negs, dtype=np.float64).reshape(-1)
    if negs.size == 0:
        raise ValueError("info_nce needs at least one negative")
    z = np.concatenate([[float(sim_pos)], negs]) / tau
    m = z.max()
    return float(m + np.log(np.exp(z - m).sum()) - z[0])


def info_nce_loss(sims: Tensor, positive: np.ndarray, allowed: np.ndarray, tau: float) -> Tensor:
    """Mean InfoNCE over rows of a ``[b, m]`` similarity tensor.

    Row ``i`` scores query ``i`` against ``m`` candidates; ``positive[i]`` is
    its positive column and ``allowed[i]`` marks the positive plus negatives.
    """
    bias = np.where(allowed, 0.0, MASKED)
    return cross_entropy(sims * (1.0 / tau) + Tensor(bias), positive)


@dataclass
class ContrastiveBatch:
    """Queries with a shared candidate list.

    Candidates are every example's positive followed by all hard negatives;
    ``allowed[i, j]`` says whether candidate ``j`` is in query ``i``'s
    denominator (its own positive, other positives, its own hard negatives).
    """

    examples: list
    candidates: list
    positive: np.ndarray
    allowed: np.ndarray

    def negatives(self, i: int) -> list[str]:
        return [c for j, c in enumerate(self.candidates) if self.allowed[i, j] and j != self.positive[i]]


def build_batch(pool: Sequence[PairExample], batch_size: int, rng: np.random.Generator) -> ContrastiveBatch:
    """Sample ``batch_size`` distinct examples of one task and assign negatives.

    In-batch positives whose text equals the query's own positive are left
    out of that query's negatives, so a duplicated document is never scored
    as its own negative.
    """
    if len(pool) < batch_size:
        raise ValueError(f"pool of {len(pool)} examples is smaller than batch_size={batch_size}")
    tasks = {ex.task for ex in pool}
    if len(tasks) != 1:
        raise ValueError(f"batch pool mixes task tags {sorted(tasks)}")
    pick = rng.choice(len(pool), size=batch_size, replace=False)
    examples = [pool[int(i)] for i in pick]
    b = len(examples)
    candidates = [ex.positive for ex in examples]
    owner = list(range(b))
    for i, ex in enumerate(examples):
        candidates.extend(ex.hard_negatives)
        owner.extend([i] * len(ex.hard_negatives))
    owner = np.array(owner)
    m = len(candidates)
    allowed = np.zeros((b, m), dtype=bool)
    allowed[:, :b] = True
    for i, ex in enumerate(examples):
        allowed[i, b:] = owner[b:] == i
        for j in range(b):
            if j != i and candidates[j] == ex.positive:
                allowed[i, j] = False
    return ContrastiveBatch(examples, candidates, np.arange(b), allowed)


def encode_query(tok: Tokenizer, text: str, instruction: Optional[str] = None) -> list[int]:
    """``CLS instruction SEP text SEP`` (or ``CLS text SEP`` with no instruction)."""
    body = tok.encode(text)
    if not body:
        raise ValueError(f"text is empty after tokenization: {text!r}")
    if instruction:
        return [CLS_ID] + tok.encode(instruction) + [SEP_ID] + body + [SEP_ID]
    return [CLS_ID] + body + [SEP_ID]


def embed_ids(model: Encoder, rows: Sequence[Sequence[int]], normalize: bool = True) -> Tensor:
    """Mean-pooled (optionally L2-normalized) embeddings ``[n, d_model]``; differentiable."""
    batch = [PackedBatch(r, np.arange(len(r)), np.zeros(len(r)), np.full(len(r), -100)) for r in rows]
    col = collate(batch)
    pooled = mean_pool(model.hidden_states(col), col.seq_ids >= 0)
    if not normalize:
        return pooled
    norms = power(tsum(pooled * pooled, axis=-1, keepdims=True), 0.5)
    return pooled / norms


def embed_texts(
    model: Encoder,
    tok: Tokenizer,
    texts: Sequence[str],
    instruction: Optional[str] = None,
    chunk: int = 256,
) -> np.ndarray:
    """Unit-norm embeddings as a float64 array ``[n, d_model]``."""
    out = []
    for s in range(0, len(texts), chunk):
        rows = [encode_query(tok, t, instruction) for t in texts[s : s + chunk]]
        out.append(embed_ids(model, rows, normalize=False).data.astype(np.float64))
    e = np.concatenate(out, axis=0)
    norms = np.linalg.norm(e, axis=1, keepdims=True)
    if (norms == 0).any():
        raise ValueError("an embedding is exactly zero and cannot be normalized")
    return e / norms


def embed(model: Encoder, tok: Tokenizer, text: str, instruction: Optional[str] = None) -> np.ndarray:
    return embed_texts(model, tok, [text], instruction)[0]


def dataset_schedule(sizes: Sequence[int], alpha: float, steps: int, rng: np.random.Generator) -> np.ndarray:
    """Dataset index for each of ``steps`` fine-tuning steps."""
    return rng.choice(len(sizes), size=steps, p=dataset_mix_probs(sizes, alpha))


def contrastive_step(
    model: Encoder, tok: Tokenizer, batch: ContrastiveBatch, cfg: ContrastiveConfig, adam: AdamW
) -> float:
    with GradTape():
        q = embed_ids(
            model,
            [encode_query(tok, ex.query, ex.instruction) for ex in batch.examples],
            normalize=cfg.similarity == "cosine",
        )
        d = embed_ids(model, [encode_query(tok, c) for c in batch.candidates], normalize=cfg.similarity == "cosine")
        loss = info_nce_loss(matmul(q, d.T), batch.positive, batch.allowed, cfg.temperature)
    grads = backward(loss)
    by_name = {n: grads[p].data for n, p in model.params.items() if p in grads}
    by_name, _ = clip_grad_norm(by_name, cfg.clip_norm)
    adam.step(model.params, by_name, cfg.lr)
    return loss.item()


def finetune_contrastive(
    model: Encoder,
    tok: Tokenizer,
    datasets: Mapping[str, Sequence[PairExample]],
    cfg: ContrastiveConfig = ContrastiveConfig(),
    history: Optional[list] = None,
) -> Encoder:
    """Train ``model`` in place with task-homogeneous InfoNCE batches.

    Each step picks a dataset with probability proportional to
    ``size**alpha``. Per-step ``(dataset name, loss)`` pairs are appended to
    ``history`` when given.
    """
    names = sorted(datasets)
    if not names or any(len(datasets[n]) == 0 for n in names):
        raise ValueError("every dataset must be nonempty")
    for n in names:
        if {ex.task for ex in datasets[n]} != {datasets[n][0].task}:
            raise ValueError(f"dataset {n!r} mixes task tags")
    rng = np.random.default_rng(cfg.seed)
    picks = dataset_schedule([len(datasets[n]) for n in names], cfg.alpha, cfg.steps, rng)
    adam = AdamW(
        betas=cfg.betas,
        eps=cfg.eps,
        weight_decay=cfg.weight_decay,
        no_decay=no_decay_names(model.cfg),
    )
    for k in picks:
        pool = datasets[names[k]]
        batch = build_batch(pool, min(cfg.batch_size, len(pool)), rng)
        loss = contrastive_step(model, tok, batch, cfg, adam)
        if history is not None:
            history.append((names[k], loss))
    return model


# -- pair files --------------------------------------------------------------


def read_pairs(path) -> list[PairExample]:
    """Tab-separated: task, instruction, query, positive, hard negatives..."""
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) < 4:
            raise ValueError(f"{path}:{lineno}: expected at least 4 tab-separated fields, got {len(parts)}")
        try:
            out.append(PairExample(parts[0], parts[1], parts[2], parts[3], tuple(parts[4:])))
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    return out


def write_pairs(path, examples: Sequence[PairExample]) -> Path:
    lines = ["\t".join([ex.task, ex.instruction, ex.query, ex.positive, *ex.hard_negatives]) for ex in examples]
    p = Path(path)
    p.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return p


def group_by_task(examples: Sequence[PairExample]) -> dict[str, list[PairExample]]:
    out: dict[str, list[PairExample]] = {}
    for ex in examples:
        out.setdefault(ex.task, []).append(ex)
    return out


@dataclass
class RetrievalSplit:
    train: list = field(default_factory=list)
    held_out: list = field(default_factory=list)


def split_pairs(examples: Sequence[PairExample], held_out: float, seed: int = 0) -> RetrievalSplit:
    idx = np.random.default_rng(seed).permutation(len(examples))
    k = int(math.ceil(held_out * len(examples)))
    return RetrievalSplit([examples[i] for i in idx[k:]], [examples[i] for i in idx[:k]])
