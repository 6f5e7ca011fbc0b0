"""Inference throughput sweep over sequence length and batch size."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .data.packing import Collated
from .data.tokenizer import FIRST_REGULAR_ID
from .model.config import ModelConfig, ffn_hidden_size
from .model.encoder import Encoder


def tokens_per_second(seq_len: int, batch: int, steps: int, wall_time: float) -> float:
    return seq_len * batch * steps / wall_time


def activation_bytes(cfg: ModelConfig, batch: int, seq_len: int) -> int:
    """Rough peak working set of one inference layer at 64-bit accumulation."""
    ffn = cfg.ffn_hidden or (ffn_hidden_size(cfg.d_model) if cfg.activation == "swiglu" else 4 * cfg.d_model)
    per_token = cfg.n_heads * seq_len + 6 * cfg.d_model + 3 * ffn
    return 8 * batch * seq_len * per_token


@dataclass
class Trial:
    batch: int
    wall_times: tuple  # seconds per repeat
    tokens_per_sec: tuple  # per repeat

    @property
    def mean(self) -> float:
        return float(np.mean(self.tokens_per_sec))

    @property
    def std(self) -> float:
        return float(np.std(self.tokens_per_sec))


@dataclass
class BenchRow:
    seq_len: int
    status: str  # "ok", "unsupported" or "oom"
    best_batch: int = 0
    tokens_per_sec: float = float("nan")
    tokens_per_sec_std: float = float("nan")
    wall_times: tuple = ()
    trials: list = field(default_factory=list)
    note: str = ""


@dataclass
class BenchReport:
    rows: list
    steps: int
    repeats: int
    warmup: int

    def recompute(self, row: BenchRow) -> float:
        return float(
            np.mean([tokens_per_second(row.seq_len, row.best_batch, self.steps, w) for w in row.wall_times])
        )

    def to_tsv(self) -> str:
        lines = ["seq_len\tstatus\tbest_batch\tsteps\ttokens_per_sec\ttokens_per_sec_std\twall_times\tnote"]
        for r in self.rows:
            walls = ",".join(f"{w:.6f}" for w in r.wall_times)
            lines.append(
                f"{r.seq_len}\t{r.status}\t{r.best_batch}\t{self.steps}\t{r.tokens_per_sec:.3f}"
                f"\t{r.tokens_per_sec_std:.3f}\t{walls}\t{r.note}"
            )
        return "\n".join(lines) + "\n"


def _inputs(cfg: ModelConfig, batch: int, seq_len: int, rng: np.random.Generator) -> Collated:
    ids = rng.integers(FIRST_REGULAR_ID, cfg.vocab_size, size=(batch, seq_len))
    pos = np.broadcast_to(np.arange(seq_len), (batch, seq_len)).copy()
    return Collated(ids, pos, np.zeros_like(ids), np.full_like(ids, -100), np.full(batch, seq_len), "padded")


def throughput_bench(
    cfg: ModelConfig,
    seq_lens: Sequence[int],
    max_batch: int = 512,
    steps: int = 100,
    repeats: int = 3,
    warmup: int = 5,
    memory_budget: Optional[int] = None,
    seed: int = 0,
    clock: Callable[[], float] = time.perf_counter,
) -> BenchReport:
    """Doubling batch sweep per sequence length, keeping the fastest batch size.

    A batch size whose estimated working set exceeds ``memory_budget`` bytes,
    or whose forward raises ``MemoryError``, ends the sweep for that length.
    Sequence lengths beyond the model's position capacity give an
    ``unsupported`` row. Model construction and ``warmup`` iterations are
    not timed.
    """
    if not seq_lens:
        raise ValueError("seq_lens must be nonempty")
    if steps < 1 or repeats < 1 or max_batch < 1:
        raise ValueError("steps, repeats and max_batch must be >= 1")
    model = Encoder(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    rows = []
    for n in seq_lens:
        if n > cfg.position_capacity():
            rows.append(BenchRow(n, "unsupported", note=f"exceeds {cfg.position_capacity()} positions"))
            continue
        trials = []
        note = ""
        b = 1
        while b <= max_batch:
            if memory_budget is not None and activation_bytes(cfg, b, n) > memory_budget:
                note = f"memory budget reached at batch {b}"
                break
            x = _inputs(cfg, b, n, rng)
            try:
                for _ in range(warmup):
                    model.hidden_states(x)
                walls = []
                for _ in range(repeats):
                    t0 = clock()
                    for _ in range(steps):
                        model.hidden_states(x)
                    walls.append(clock() - t0)
            except MemoryError:
                note = f"allocation failed at batch {b}"
                break
            trials.append(Trial(b, tuple(walls), tuple(tokens_per_second(n, b, steps, w) for w in walls)))
            b *= 2
        if not trials:
            rows.append(BenchRow(n, "oom", note=note or "no batch size fits"))
            continue
        best = max(trials, key=lambda t: t.mean)
        rows.append(BenchRow(n, "ok", best.batch, best.mean, best.std, best.wall_times, trials, note))
    return BenchReport(rows, steps, repeats, warmup)
