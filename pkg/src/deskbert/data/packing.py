"""Padded and packed batching of token sequences, plus attention-mask construction."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..autodiff import IGNORE_INDEX
from .tokenizer import PAD_ID

MASK_MODES = ("padded", "packed-naive", "packed-block-diagonal")


@dataclass
class PackedBatch:
    """One training row: a padded sequence or several packed sequences.

    ``seq_ids`` is -1 on padding. ``positions`` restart at 0 for every
    source sequence.
    """

    token_ids: np.ndarray
    positions: np.ndarray
    seq_ids: np.ndarray
    mlm_labels: np.ndarray
    mask_mode: str = "padded"

    def __post_init__(self) -> None:
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        self.positions = np.asarray(self.positions, dtype=np.int64)
        self.seq_ids = np.asarray(self.seq_ids, dtype=np.int64)
        self.mlm_labels = np.asarray(self.mlm_labels, dtype=np.int64)
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"mask_mode must be one of {MASK_MODES}, got {self.mask_mode!r}")
        n = len(self.token_ids)
        if not (len(self.positions) == len(self.seq_ids) == len(self.mlm_labels) == n):
            raise ValueError("PackedBatch fields must have equal length")

    def __len__(self) -> int:
        return len(self.token_ids)

    @property
    def n_sequences(self) -> int:
        return len(np.unique(self.seq_ids[self.seq_ids >= 0]))

    def attention_mask(self) -> np.ndarray:
        return attention_mask(self.seq_ids, self.mask_mode)

    def with_labels(self, token_ids, labels) -> "PackedBatch":
        return PackedBatch(token_ids, self.positions, self.seq_ids, labels, self.mask_mode)


def attention_mask(seq_ids: np.ndarray, mode: str) -> np.ndarray:
    """Boolean ``[..., n, n]`` (query, key) mask of permitted attention pairs.

    Padding keys are never attended. In block-diagonal mode a query sees only
    keys of its own sequence; the other modes let every query see every real
    key of the row.
    """
    s = np.asarray(seq_ids)
    key_ok = (s >= 0)[..., None, :]
    if mode == "packed-block-diagonal":
        return (s[..., :, None] == s[..., None, :]) & key_ok
    if mode in ("padded", "packed-naive"):
        return np.broadcast_to(key_ok, s.shape + s.shape[-1:]).copy()
    raise ValueError(f"unknown mask mode {mode!r}")


def _single(doc: Sequence[int], seq_id: int, width: int, mode: str) -> PackedBatch:
    n = len(doc)
    ids = np.full(width, PAD_ID, dtype=np.int64)
    ids[:n] = doc
    pos = np.zeros(width, dtype=np.int64)
    pos[:n] = np.arange(n)
    sid = np.full(width, -1, dtype=np.int64)
    sid[:n] = seq_id
    return PackedBatch(ids, pos, sid, np.full(width, IGNORE_INDEX), mode)


def pack_sequences(docs: Sequence[Sequence[int]], max_len: int, mode: str = "packed-block-diagonal") -> list[PackedBatch]:
    """Arrange ``docs`` into rows of at most ``max_len`` tokens.

    Padded mode emits one row per document, padded to ``max_len``. Packed
    modes concatenate documents greedily into the first row with room, in
    input order. Documents longer than ``max_len`` are truncated.
    """
    if mode not in MASK_MODES:
        raise ValueError(f"mask_mode must be one of {MASK_MODES}, got {mode!r}")
    if max_len < 1:
        raise ValueError("max_len must be positive")
    docs = [list(d)[:max_len] for d in docs]
    if any(len(d) == 0 for d in docs):
        raise ValueError("documents must be nonempty")
    if mode == "padded":
        return [_single(d, i, max_len, mode) for i, d in enumerate(docs)]

    bins: list[list[int]] = []  # doc indices per row
    fill: list[int] = []
    for i, d in enumerate(docs):
        for r, used in enumerate(fill):
            if used + len(d) <= max_len:
                bins[r].append(i)
                fill[r] += len(d)
                break
        else:
            bins.append([i])
            fill.append(len(d))
    return [_pack_row([docs[i] for i in row], row, mode) for row in bins]


def _pack_row(docs: Sequence[Sequence[int]], ids: Sequence[int], mode: str) -> PackedBatch:
    toks = np.concatenate([np.asarray(d, dtype=np.int64) for d in docs])
    pos = np.concatenate([np.arange(len(d)) for d in docs])
    sid = np.concatenate([np.full(len(d), i) for d, i in zip(docs, ids)])
    return PackedBatch(toks, pos, sid, np.full(len(toks), IGNORE_INDEX), mode)


@dataclass
class Collated:
    """Rows right-padded to a common width, as ``[B, W]`` arrays."""

    token_ids: np.ndarray
    positions: np.ndarray
    seq_ids: np.ndarray
    mlm_labels: np.ndarray
    lengths: np.ndarray
    mask_mode: str

    @property
    def shape(self) -> tuple:
        return self.token_ids.shape

    def attention_mask(self) -> np.ndarray:
        return attention_mask(self.seq_ids, self.mask_mode)

    def row_index(self) -> np.ndarray:
        """Flat ``B*W`` indices of every row's own tokens, row by row."""
        b, w = self.token_ids.shape
        return np.concatenate([r * w + np.arange(n) for r, n in enumerate(self.lengths)])


def collate(rows, trim: bool = False) -> Collated:
    """Stack rows into ``[B, W]`` arrays; ``trim`` drops trailing all-padding columns."""
    if isinstance(rows, PackedBatch):
        rows = [rows]
    rows = list(rows)
    if not rows:
        raise ValueError("empty batch")
    modes = {r.mask_mode for r in rows}
    if len(modes) != 1:
        raise ValueError(f"rows mix mask modes {sorted(modes)}")
    width = max(len(r) for r in rows)
    if trim:
        width = max(int(np.max(np.nonzero(r.seq_ids >= 0)[0], initial=-1)) + 1 for r in rows)
        width = max(width, 1)
    b = len(rows)
    ids = np.full((b, width), PAD_ID, dtype=np.int64)
    pos = np.zeros((b, width), dtype=np.int64)
    sid = np.full((b, width), -1, dtype=np.int64)
    lab = np.full((b, width), IGNORE_INDEX, dtype=np.int64)
    lengths = np.zeros(b, dtype=np.int64)
    for i, r in enumerate(rows):
        n = min(len(r), width)
        ids[i, :n] = r.token_ids[:n]
        pos[i, :n] = r.positions[:n]
        sid[i, :n] = r.seq_ids[:n]
        lab[i, :n] = r.mlm_labels[:n]
        lengths[i] = n
    return Collated(ids, pos, sid, lab, lengths, modes.pop())
