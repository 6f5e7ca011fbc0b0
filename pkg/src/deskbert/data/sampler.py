"""Length-biased mixture sampling over a document collection."""

from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np

SOURCE_NAMES = ("base", "long1", "long2")


class CorpusExhausted(RuntimeError):
    pass


class LengthMixtureSampler:
    """Draws documents from three views of one corpus.

    ``base`` is every document; ``long1``/``long2`` keep only documents longer
    than ``thresholds[0]``/``thresholds[1]`` tokens. Each draw picks a view
    with the given probabilities, then the next document of that view's
    seeded shuffle. With ``cycle=False`` running off the end of a view is an
    error instead of starting a new shuffled pass.
    """

    def __init__(self, docs: Sequence[Sequence[int]], thresholds=(1024, 2048), seed: int = 0, cycle: bool = True):
        self.docs = docs
        self.thresholds = tuple(int(t) for t in thresholds)
        self.seed = seed
        self.cycle = cycle
        lengths = np.array([len(d) for d in docs])
        self.sources = (
            np.arange(len(docs)),
            np.nonzero(lengths > self.thresholds[0])[0],
            np.nonzero(lengths > self.thresholds[1])[0],
        )
        self.cursors = [0, 0, 0]
        self._orders: dict[tuple[int, int], np.ndarray] = {}

    def source_sizes(self) -> tuple[int, int, int]:
        return tuple(len(s) for s in self.sources)

    def _order(self, src: int, epoch: int) -> np.ndarray:
        key = (src, epoch)
        if key not in self._orders:
            rng = np.random.default_rng([self.seed, src, epoch])
            self._orders = {k: v for k, v in self._orders.items() if k[0] != src}
            self._orders[key] = rng.permutation(self.sources[src])
        return self._orders[key]

    def pick_source(self, probs: Sequence[float], rng: np.random.Generator) -> int:
        p = np.asarray(probs, dtype=np.float64)
        if p.shape != (3,) or (p < 0).any() or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError(f"mixture probabilities must be three nonnegative numbers summing to 1, got {tuple(probs)}")
        return int(rng.choice(3, p=p))

    def draw(self, probs: Sequence[float], rng: np.random.Generator) -> tuple[int, Sequence[int]]:
        src = self.pick_source(probs, rng)
        pool = self.sources[src]
        if len(pool) == 0:
            raise ValueError(f"source {SOURCE_NAMES[src]!r} is empty (no document longer than the threshold)")
        n = len(pool)
        k = self.cursors[src]
        if k >= n and not self.cycle:
            raise CorpusExhausted(f"source {SOURCE_NAMES[src]!r} exhausted after {n} documents")
        doc_index = self._order(src, k // n)[k % n]
        self.cursors[src] = k + 1
        return src, self.docs[doc_index]

    def stream(self, probs: Sequence[float], rng: np.random.Generator) -> Iterator[tuple[int, Sequence[int]]]:
        while True:
            yield self.draw(probs, rng)


def length_mixture_sampler(docs, probs, rng: np.random.Generator, thresholds=(1024, 2048), seed: int = 0):
    """Endless ``(source index, document)`` stream; see :class:`LengthMixtureSampler`."""
    return LengthMixtureSampler(docs, thresholds, seed=seed).stream(probs, rng)
