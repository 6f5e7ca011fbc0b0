"""Synthetic corpora with learnable structure for desk-scale experiments."""

from __future__ import annotations

import numpy as np


def _word(i: int) -> str:
    return f"w{i:03d}"


def topic_markov_corpus(
    n_docs: int,
    n_words: int = 200,
    n_topics: int = 8,
    topic_words: int = 40,
    follow_prob: float = 0.6,
    median_len: float = 60.0,
    min_len: int = 8,
    max_len: int = 400,
    seed: int = 0,
    with_topics: bool = False,
):
    """Documents of words drawn from a per-topic Markov chain.

    Each document has one hidden topic. A word is followed by its
    topic-specific successor with probability ``follow_prob``, otherwise by a
    random word of the topic's subset, so both local context and the
    document-wide topic help predict a masked word. Lengths are log-normal.
    With ``with_topics`` the result is ``(docs, topic ids)``.
    """
    rng = np.random.default_rng(seed)
    subsets = [rng.choice(n_words, size=topic_words, replace=False) for _ in range(n_topics)]
    succ = [dict(zip(s, rng.permutation(s))) for s in subsets]
    docs = []
    topics = []
    for _ in range(n_docs):
        t = int(rng.integers(n_topics))
        topics.append(t)
        n = int(np.clip(rng.lognormal(np.log(median_len), 0.8), min_len, max_len))
        w = int(rng.choice(subsets[t]))
        words = [w]
        for _ in range(n - 1):
            if rng.random() < follow_prob:
                w = int(succ[t][w])
            else:
                w = int(rng.choice(subsets[t]))
            words.append(w)
        docs.append(" ".join(_word(x) for x in words))
    return (docs, topics) if with_topics else docs


def topic_vocabulary(n_words: int = 200) -> list[str]:
    """Every word :func:`topic_markov_corpus` can emit, in id order."""
    return [_word(i) for i in range(n_words)]


def paired_pattern_task(
    n_pairs: int,
    n_words: int = 200,
    key_len: int = 3,
    noise_len: int = 3,
    n_hard: int = 1,
    task: str = "pattern",
    instruction: str = "match the key words",
    seed: int = 0,
):
    """Query/positive pairs that share a random key phrase amid unrelated noise words.

    The lower half of the word ids carries keys and the upper half is noise,
    using the same ``wNNN`` words as :func:`topic_markov_corpus`. A hard
    negative shares all but one key word with the positive. Returns
    :class:`PairExample` records.
    """
    from ..contrastive import PairExample

    rng = np.random.default_rng(seed)
    half = n_words // 2
    out = []
    seen = set()
    while len(out) < n_pairs:
        key = tuple(sorted(rng.choice(half, size=key_len, replace=False).tolist()))
        if key in seen:
            continue
        seen.add(key)

        def side(k):
            toks = [_word(x) for x in k] + [_word(half + x) for x in rng.choice(n_words - half, size=noise_len)]
            rng.shuffle(toks)
            return " ".join(toks)

        hard = []
        for _ in range(n_hard):
            alt = list(key)
            alt[int(rng.integers(key_len))] = int(rng.integers(half))
            hard.append(side(alt))
        out.append(PairExample(task, instruction, side(key), side(key), tuple(hard)))
    return out
