"""Pluggable word-level tokenizer with optional character / word-piece fallback."""

from __future__ import annotations

from collections import Counter
from pathlib import Path
from typing import Iterable, Optional, Sequence

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIALS = (PAD, UNK, CLS, SEP, MASK)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(len(SPECIALS))
SPECIAL_IDS = frozenset(range(len(SPECIALS)))
FIRST_REGULAR_ID = len(SPECIALS)

MODES = ("whitespace-vocab", "char-fallback", "external-vocab-file")
CONT = "##"


class Tokenizer:
    """Maps whitespace-separated words to ids.

    ``whitespace-vocab`` sends unknown words to ``[UNK]``. ``char-fallback``
    spells unknown words as a first character followed by ``##``-prefixed
    characters. ``external-vocab-file`` does greedy longest-match word-piece
    splitting against a loaded vocabulary.
    """

    def __init__(self, vocab: Sequence[str], mode: str = "whitespace-vocab"):
        if mode not in MODES:
            raise ValueError(f"tokenizer mode must be one of {MODES}, got {mode!r}")
        vocab = list(vocab)
        if tuple(vocab[: len(SPECIALS)]) != SPECIALS:
            raise ValueError(f"vocabulary must start with the special tokens {SPECIALS}")
        self.vocab = vocab
        self.mode = mode
        self.index = {tok: i for i, tok in enumerate(vocab)}
        if len(self.index) != len(vocab):
            dup = [t for t, c in Counter(vocab).items() if c > 1][:3]
            raise ValueError(f"duplicate vocabulary entries: {dup}")

    def __len__(self) -> int:
        return len(self.vocab)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def encode(self, text: str, add_special: bool = False) -> list[int]:
        ids = []
        for word in text.split():
            ids.extend(self._word(word))
        if add_special:
            ids = [CLS_ID] + ids + [SEP_ID]
        return ids

    def _word(self, word: str) -> list[int]:
        hit = self.index.get(word)
        if hit is not None:
            return [hit]
        if self.mode == "whitespace-vocab":
            return [UNK_ID]
        if self.mode == "char-fallback":
            pieces = [word[0]] + [CONT + c for c in word[1:]]
            if all(p in self.index for p in pieces):
                return [self.index[p] for p in pieces]
            return [UNK_ID]
        return self._wordpiece(word)

    def _wordpiece(self, word: str) -> list[int]:
        out, start = [], 0
        while start < len(word):
            end = len(word)
            piece = None
            while end > start:
                cand = word[start:end] if start == 0 else CONT + word[start:end]
                if cand in self.index:
                    piece = self.index[cand]
                    break
                end -= 1
            if piece is None:
                return [UNK_ID]
            out.append(piece)
            start = end
        return out

    def decode(self, ids: Iterable[int], skip_special: bool = True) -> str:
        words: list[str] = []
        for i in ids:
            i = int(i)
            if skip_special and i in SPECIAL_IDS:
                continue
            tok = self.vocab[i]
            if tok.startswith(CONT) and words:
                words[-1] += tok[len(CONT):]
            else:
                words.append(tok)
        return " ".join(words)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.vocab) + "\n", encoding="utf-8")

    @classmethod
    def from_file(cls, path, mode: str = "external-vocab-file") -> "Tokenizer":
        """Load a vocabulary file: one token per line, line number = id, specials first."""
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln != ""], mode=mode)


def build_vocab(
    texts: Iterable[str],
    max_size: Optional[int] = None,
    min_count: int = 1,
    mode: str = "whitespace-vocab",
) -> Tokenizer:
    """Frequency-ordered vocabulary from whitespace words (ties broken alphabetically)."""
    counts: Counter = Counter()
    chars: set = set()
    for t in texts:
        words = t.split()
        counts.update(words)
        if mode == "char-fallback":
            for w in words:
                chars.add(w[0])
                chars.update(CONT + c for c in w[1:])
    words = sorted((w for w, c in counts.items() if c >= min_count and w not in SPECIALS), key=lambda w: (-counts[w], w))
    extra = sorted(chars - set(words) - set(SPECIALS))
    budget = None if max_size is None else max(0, max_size - len(SPECIALS) - len(extra))
    vocab = list(SPECIALS) + extra + words[:budget]
    return Tokenizer(vocab, mode=mode)
