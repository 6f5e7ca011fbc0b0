from __future__ import annotations

from typing import Sequence

import numpy as np

from ..autodiff import IGNORE_INDEX
from .tokenizer import FIRST_REGULAR_ID, MASK_ID, SPECIAL_IDS

BERT_SCHEME = (0.8, 0.1, 0.1)
MASK_ONLY = (1.0, 0.0, 0.0)


def mlm_corrupt(
    tokens: Sequence[int],
    rate: float,
    scheme: Sequence[float] = MASK_ONLY,
    rng: np.random.Generator | None = None,
    vocab_size: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Select non-special tokens with probability ``rate`` and corrupt them.

    Selected tokens become ``[MASK]``, a random regular id, or stay unchanged
    in proportions ``scheme = (mask, random, keep)``. Labels carry the original
    id at selected positions and ``IGNORE_INDEX`` elsewhere.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"masking rate must lie in [0, 1], got {rate}")
    fr = np.asarray(scheme, dtype=np.float64)
    if fr.shape != (3,) or (fr < 0).any() or abs(fr.sum() - 1.0) > 1e-9:
        raise ValueError(f"scheme must be three nonnegative fractions summing to 1, got {tuple(scheme)}")
    rng = rng if rng is not None else np.random.default_rng()
    ids = np.asarray(tokens, dtype=np.int64)
    eligible = ~np.isin(ids, list(SPECIAL_IDS))
    selected = eligible & (rng.random(ids.shape) < rate)
    labels = np.where(selected, ids, IGNORE_INDEX)
    inputs = ids.copy()
    if fr[1] > 0 and vocab_size is None:
        raise ValueError("vocab_size is required when the scheme has random replacements")
    action = rng.choice(3, size=ids.shape, p=fr)
    inputs[selected & (action == 0)] = MASK_ID
    rand_pos = selected & (action == 1)
    if rand_pos.any():
        inputs[rand_pos] = rng.integers(FIRST_REGULAR_ID, vocab_size, size=int(rand_pos.sum()))
    return inputs, labels
