"""Pseudo-perplexity: mask each position in turn and score the true token."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..data.tokenizer import MASK_ID, SPECIAL_IDS


def _capacity(model) -> Optional[int]:
    cfg = getattr(model, "cfg", None)
    return cfg.position_capacity() if cfg is not None else getattr(model, "max_length", None)


def scored_positions(tokens: Sequence[int], skip_special: bool = True) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64)
    if not skip_special:
        return np.arange(len(ids))
    return np.nonzero(~np.isin(ids, list(SPECIAL_IDS)))[0]


def token_losses(model, tokens: Sequence[int], chunk: int = 32, skip_special: bool = True) -> np.ndarray:
    """Cross-entropy ``l_i`` of the true token at each scored position with only that position masked.

    ``model.predict_at(token_ids[B, n], at[B])`` must return logits
    ``[B, vocab]``. Variants are scored ``chunk`` at a time; each variant is
    an independent forward, so the grouping does not change the result.
    """
    ids = np.asarray(tokens, dtype=np.int64)
    n = len(ids)
    if n == 0:
        raise ValueError("pseudo-perplexity of an empty sequence is undefined")
    cap = _capacity(model)
    if cap is not None and n > cap:
        raise ValueError(f"sequence of {n} tokens exceeds the model's position range ({cap})")
    at = scored_positions(ids, skip_special)
    if at.size == 0:
        raise ValueError("sequence has no scorable (non-special) tokens")
    if chunk < 1:
        raise ValueError("chunk must be >= 1")
    out = np.empty(at.size)
    for s in range(0, at.size, chunk):
        pos = at[s : s + chunk]
        variants = np.repeat(ids[None, :], len(pos), axis=0)
        variants[np.arange(len(pos)), pos] = MASK_ID
        z = np.asarray(model.predict_at(variants, pos), dtype=np.float64)
        m = z.max(axis=1, keepdims=True)
        lse = (m + np.log(np.exp(z - m).sum(axis=1, keepdims=True)))[:, 0]
        out[s : s + len(pos)] = lse - z[np.arange(len(pos)), ids[pos]]
    return out


def pseudo_perplexity(model, tokens: Sequence[int], chunk: int = 32, skip_special: bool = True) -> float:
    """``exp(mean_i l_i)`` over the scored positions of ``tokens``."""
    return float(math.exp(token_losses(model, tokens, chunk, skip_special).mean()))


@dataclass(frozen=True)
class PpplRecord:
    index: int  # position of the sequence in the evaluated corpus
    length: int
    pppl: float
    losses: tuple


def _edge(x: float) -> str:
    return "inf" if math.isinf(x) else str(int(x))


@dataclass
class PpplReport:
    records: list
    edges: tuple  # bin (edges[k], edges[k+1]]
    extra: dict = field(default_factory=dict)

    def bin_of(self, length: int) -> Optional[int]:
        for k in range(len(self.edges) - 1):
            if self.edges[k] < length <= self.edges[k + 1]:
                return k
        return None

    def binned(self) -> list[tuple[str, int, int, float, int]]:
        """``(label, lo, hi, mean pppl, count)`` for every bin, empty bins included (mean = nan)."""
        rows = []
        for k in range(len(self.edges) - 1):
            vals = [r.pppl for r in self.records if self.bin_of(r.length) == k]
            hi = self.edges[k + 1]
            label = f"({_edge(self.edges[k])},{_edge(hi)}{')' if math.isinf(hi) else ']'}"
            mean = float(np.mean(vals)) if vals else float("nan")
            rows.append((label, self.edges[k], self.edges[k + 1], mean, len(vals)))
        return rows

    def mean_in(self, lo: float, hi: float) -> float:
        vals = [r.pppl for r in self.records if lo < r.length <= hi]
        if not vals:
            raise ValueError(f"no sequences with length in ({lo}, {hi}]")
        return float(np.mean(vals))

    def records_tsv(self) -> str:
        lines = ["index\tlength\tpppl"]
        lines += [f"{r.index}\t{r.length}\t{r.pppl:.6f}" for r in self.records]
        return "\n".join(lines) + "\n"

    def bins_tsv(self) -> str:
        lines = ["length_bin\tmean_pppl\tcount"]
        lines += [f"{lab}\t{m:.6f}\t{c}" for lab, _, _, m, c in self.binned()]
        return "\n".join(lines) + "\n"

    def bins_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["length_bin", "mean_pppl", "count"])
        for lab, _, _, m, c in self.binned():
            w.writerow([lab, f"{m:.6f}", c])
        return buf.getvalue()


def pppl_curve(
    model,
    sequences: Sequence[Sequence[int]],
    bins: Sequence[float] = (64, 128, 256, 512),
    sample: Optional[int] = None,
    min_len: int = 1,
    seed: int = 0,
    chunk: int = 32,
) -> PpplReport:
    """Pseudo-perplexity of (a seeded sample of) ``sequences``, aggregated by length bin.

    ``bins`` are the upper edges; the first bin starts at 0 and a final
    open bin collects anything longer than the last edge.
    """
    b = [float(x) for x in bins]
    if b != sorted(b) or len(set(b)) != len(b):
        raise ValueError("bins must be strictly increasing")
    pool = [i for i, s in enumerate(sequences) if len(s) >= min_len]
    if not pool:
        raise ValueError("no sequences to evaluate")
    if sample is not None and sample < len(pool):
        rng = np.random.default_rng(seed)
        pool = sorted(rng.choice(pool, size=sample, replace=False).tolist())
    records = []
    for i in pool:
        losses = token_losses(model, sequences[i], chunk)
        records.append(PpplRecord(i, len(sequences[i]), float(math.exp(losses.mean())), tuple(losses.tolist())))
    edges = tuple([0.0] + b + [math.inf])
    return PpplReport(records, edges)
