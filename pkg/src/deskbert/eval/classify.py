"""Sequence classification / regression fine-tune with a small hyperparameter grid."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import pearsonr

from ..autodiff import GradTape, Tensor, backward, cross_entropy, matmul, mean
from ..contrastive import embed_ids, encode_query
from ..model.encoder import Encoder
from ..train.optim import AdamW, clip_grad_norm
from ..train.pretrain import no_decay_names


@dataclass(frozen=True)
class Grid:
    lrs: tuple = (1e-3,)
    batch_sizes: tuple = (16,)
    weight_decays: tuple = (0.0,)

    def points(self) -> list[tuple[float, int, float]]:
        return list(itertools.product(self.lrs, self.batch_sizes, self.weight_decays))


@dataclass
class RunLog:
    lr: float
    batch_size: int
    weight_decay: float
    evals: list = field(default_factory=list)  # (step, dev score)
    trained_on: set = field(default_factory=set)  # training row indices actually used
    evaluated_on: set = field(default_factory=set)  # dev row indices scored
    best: float = -np.inf
    stopped_early: bool = False


@dataclass
class ClassifyResult:
    best_score: float
    best_params: dict
    runs: list
    train_indices: tuple
    dev_indices: tuple
    task: str  # "classification" or "regression"


def eval_interval(n_train: int) -> int:
    """Evaluate every ``min(500, n_train / 10)`` steps (at least every step)."""
    return max(1, min(500, n_train // 10))


def _features(model: Encoder, rows) -> Tensor:
    return embed_ids(model, rows, normalize=False)


def _score(model, head_w, head_b, rows, targets, regression: bool) -> float:
    feats = _features(model, rows).data.astype(np.float64)
    out = feats @ head_w.data.astype(np.float64) + head_b.data.astype(np.float64)
    if regression:
        pred = out[:, 0]
        if np.std(pred) == 0 or np.std(targets) == 0:
            return 0.0
        return float(pearsonr(pred, targets)[0])
    return float(np.mean(np.argmax(out, axis=1) == targets))


def classify_finetune(
    model: Encoder,
    tok,
    texts: Sequence[str],
    labels: Sequence,
    grid: Grid = Grid(),
    epochs: int = 3,
    patience: int = 15,
    dev_fraction: float = 0.2,
    seed: int = 0,
    dev_texts: Optional[Sequence[str]] = None,
    dev_labels: Optional[Sequence] = None,
) -> ClassifyResult:
    """Fine-tune a copy of ``model`` plus a linear head on mean-pooled features, per grid point.

    Integer labels give classification (accuracy), float labels regression
    (Pearson r). Without an explicit dev set a seeded ``dev_fraction`` of the
    rows is held out. Training stops early once ``patience`` consecutive
    evaluations fail to improve the best dev score.
    """
    y = np.asarray(labels)
    regression = np.issubdtype(y.dtype, np.floating)
    if len(texts) != len(y):
        raise ValueError("texts and labels differ in length")
    rng = np.random.default_rng(seed)
    if dev_texts is None:
        order = rng.permutation(len(texts))
        k = max(1, int(round(dev_fraction * len(texts))))
        dev_idx, train_idx = np.sort(order[:k]), np.sort(order[k:])
        all_texts, all_y = list(texts), y
    else:
        all_texts = list(texts) + list(dev_texts)
        all_y = np.concatenate([y, np.asarray(dev_labels)])
        train_idx = np.arange(len(texts))
        dev_idx = np.arange(len(texts), len(all_texts))
    if not regression:
        classes = np.unique(all_y[train_idx])
        if classes.size < 2:
            raise ValueError("training set has a single class")
        n_out = int(all_y.max()) + 1
    else:
        if np.std(all_y[train_idx]) == 0:
            raise ValueError("regression targets are constant")
        n_out = 1
    rows = [encode_query(tok, t) for t in all_texts]
    dev_rows = [rows[i] for i in dev_idx]
    dev_y = all_y[dev_idx]
    interval = eval_interval(len(train_idx))

    runs = []
    for lr, bs, wd in grid.points():
        m = model.copy()
        hrng = np.random.default_rng([seed, len(runs)])
        head_w = Tensor(hrng.normal(0, 0.02, (m.cfg.d_model, n_out)), requires_grad=True)
        head_b = Tensor(np.zeros(n_out), requires_grad=True)
        params = dict(m.params)
        params["head.weight"] = head_w
        params["head.bias"] = head_b
        adam = AdamW(weight_decay=wd, no_decay=no_decay_names(m.cfg) | {"head.bias"})
        log = RunLog(lr, bs, wd)
        strikes = 0
        step = 0
        stop = False
        for _ in range(epochs):
            perm = rng.permutation(train_idx)
            for s in range(0, len(perm), bs):
                idx = perm[s : s + bs]
                log.trained_on.update(int(i) for i in idx)
                with GradTape():
                    out = matmul(_features(m, [rows[i] for i in idx]), head_w) + head_b
                    if regression:
                        diff = out - Tensor(all_y[idx].astype(np.float64)[:, None])
                        loss = mean(diff * diff)
                    else:
                        loss = cross_entropy(out, all_y[idx])
                grads = backward(loss)
                by_name = {n: grads[p].data for n, p in params.items() if p in grads}
                by_name, _ = clip_grad_norm(by_name, 1.0)
                adam.step(params, by_name, lr)
                step += 1
                if step % interval == 0:
                    score = _score(m, head_w, head_b, dev_rows, dev_y, regression)
                    log.evaluated_on.update(int(i) for i in dev_idx)
                    log.evals.append((step, score))
                    if score > log.best:
                        log.best, strikes = score, 0
                    else:
                        strikes += 1
                        if strikes > patience:
                            log.stopped_early = stop = True
                            break
            if stop:
                break
        if not log.evals:
            score = _score(m, head_w, head_b, dev_rows, dev_y, regression)
            log.evaluated_on.update(int(i) for i in dev_idx)
            log.evals.append((step, score))
            log.best = score
        runs.append(log)

    best = max(runs, key=lambda r: r.best)
    return ClassifyResult(
        best.best,
        {"lr": best.lr, "batch_size": best.batch_size, "weight_decay": best.weight_decay},
        runs,
        tuple(int(i) for i in train_idx),
        tuple(int(i) for i in dev_idx),
        "regression" if regression else "classification",
    )
