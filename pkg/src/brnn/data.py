"""Corpora, vocabularies and truncated-BPTT batching."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, VocabError

UNK = "<unk>"
EOS = "<eos>"


def tokenize(text: str, mode: str) -> list[str]:
    if mode == "char":
        return list(text)
    if mode == "word":
        return text.split()
    raise DataError(f"unknown tokenization mode {mode!r}")


def _escape(token: str) -> str:
    return token.replace("\\", "\\\\").replace("\n", "\\n").replace("\r", "\\r")


def _unescape(line: str) -> str:
    out = []
    it = iter(line)
    for ch in it:
        if ch == "\\":
            nxt = next(it, "")
            out.append({"n": "\n", "r": "\r", "\\": "\\"}.get(nxt, nxt))
        else:
            out.append(ch)
    return "".join(out)


class Vocab:
    """Dense token <-> id bijection, optionally with an UNK id."""

    def __init__(self, tokens: Sequence[str], mode: str = "word", unk: str | None = None):
        tokens = list(tokens)
        if len(set(tokens)) != len(tokens):
            raise DataError("duplicate tokens in vocabulary")
        self.tokens = tokens
        self.mode = mode
        self.index = {t: i for i, t in enumerate(tokens)}
        if unk is not None and unk not in self.index:
            raise DataError(f"UNK symbol {unk!r} is not in the vocabulary")
        self.unk = unk

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return (isinstance(other, Vocab) and self.tokens == other.tokens
                and self.mode == other.mode and self.unk == other.unk)

    @property
    def unk_id(self) -> int | None:
        return None if self.unk is None else self.index[self.unk]

    def encode(self, tokens: Iterable[str]) -> list[int]:
        out = []
        unk_id = self.unk_id
        for t in tokens:
            i = self.index.get(t)
            if i is None:
                if unk_id is None:
                    raise VocabError(f"unknown token {t!r} and no UNK symbol")
                i = unk_id
            out.append(i)
        return out

    def encode_text(self, text: str) -> list[int]:
        return self.encode(tokenize(text, self.mode))

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def render(self, ids: Iterable[int]) -> str:
        sep = "" if self.mode == "char" else " "
        return sep.join(self.decode(ids))

    def save(self, path) -> None:
        """One escaped token per line; line ``i`` (0-based) holds id ``i``."""
        Path(path).write_text("".join(_escape(t) + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path, mode: str = "word", unk: str | None = UNK) -> "Vocab":
        """Read a vocabulary file; ``unk`` is used only if the file contains it."""
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise DataError(f"cannot read vocabulary {path}: {e}") from None
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines = lines[:-1]
        tokens = [_unescape(l) for l in lines]
        return cls(tokens, mode=mode, unk=unk if unk in tokens else None)


def build_vocab(text: str | Sequence[str], mode: str = "word", min_count: int = 1,
                unk: str = UNK) -> Vocab:
    """Tokens sorted by descending count then lexicographically.

    Tokens seen fewer than ``min_count`` times collapse into ``unk``, which is
    ranked by its pooled count.  A literal ``unk`` token in the text is reused.
    """
    tokens = tokenize(text, mode) if isinstance(text, str) else list(text)
    if not tokens:
        raise DataError("cannot build a vocabulary from empty text")
    counts = Counter(tokens)
    rare = {t for t, n in counts.items() if n < min_count and t != unk}
    kept = Counter({t: n for t, n in counts.items() if t not in rare})
    if rare:
        kept[unk] += sum(counts[t] for t in rare)
    ordered = sorted(kept, key=lambda t: (-kept[t], t))
    return Vocab(ordered, mode=mode, unk=unk if unk in kept else None)


@dataclass
class CutBatch:
    """One truncated sub-sequence for every parallel stream.

    ``x`` and ``y`` are ``[batch_size x T]`` id matrices with ``y`` the
    inputs shifted by one token.  ``carried`` is True when the recurrent
    state flows in from the previous cut.
    """

    x: np.ndarray
    y: np.ndarray
    b: int
    c: int
    carried: bool

    @property
    def shape(self) -> tuple[int, int]:
        return self.x.shape

    @property
    def num_tokens(self) -> int:
        return int(self.y.size)


def make_cuts(ids: Sequence[int], batch_size: int, T: int,
              cuts_per_sequence: int | None = None) -> list[CutBatch]:
    """Split ``ids`` into ``batch_size`` streams and chop them into cuts of length ``T``.

    The remainder not filling a stream is dropped.  Cut ``k`` gets indices
    ``b = k // C`` and ``c = k % C`` where ``C`` is ``cuts_per_sequence``
    (default: every cut of the epoch belongs to one sequence, so ``B = 1``);
    trailing cuts that do not fill a whole group of ``C`` are dropped.
    """
    if batch_size < 1 or T < 1:
        raise DataError("batch_size and T must be positive")
    ids = np.asarray(ids, dtype=np.int64)
    if len(ids) < batch_size * (T + 1):
        raise DataError(f"corpus of {len(ids)} tokens is too short for "
                        f"{batch_size} streams of T={T}")
    stream_len = len(ids) // batch_size
    streams = ids[: stream_len * batch_size].reshape(batch_size, stream_len)
    n_cuts = (stream_len - 1) // T
    C = n_cuts if cuts_per_sequence is None else int(cuts_per_sequence)
    if C < 1 or C > n_cuts:
        raise DataError(f"cuts_per_sequence={C} but only {n_cuts} cuts available")
    B = n_cuts // C
    cuts = []
    for k in range(B * C):
        lo = k * T
        cuts.append(CutBatch(x=streams[:, lo:lo + T].copy(), y=streams[:, lo + 1:lo + T + 1].copy(),
                             b=k // C, c=k % C, carried=k > 0))
    return cuts


@dataclass
class Segment:
    """Contiguous slice of one evaluation stream.

    ``y`` holds the target tokens; ``x`` the tokens consumed to predict them.
    The first segment of a stream has ``initial`` set: its first target is
    predicted from the initial state, so ``x`` is one token shorter.
    """

    x: np.ndarray
    y: np.ndarray
    initial: bool

    @property
    def num_tokens(self) -> int:
        return int(self.y.size)


def stream_segments(ids: Sequence[int], T: int) -> list[Segment]:
    """Cover every token of ``ids`` as a target, in order, ``T`` at a time."""
    if T < 1:
        raise DataError("T must be positive")
    ids = np.asarray(ids, dtype=np.int64)
    if len(ids) < 1:
        raise DataError("empty evaluation stream")
    segs = []
    for lo in range(0, len(ids), T):
        hi = min(lo + T, len(ids))
        if lo == 0:
            segs.append(Segment(ids[None, 0:hi - 1].copy(), ids[None, 0:hi].copy(), True))
        else:
            segs.append(Segment(ids[None, lo - 1:hi - 1].copy(), ids[None, lo:hi].copy(), False))
    return segs


def epoch_layout(cuts: Sequence[CutBatch]) -> tuple[int, int]:
    """(B, C) of an epoch produced by :func:`make_cuts`."""
    if not cuts:
        raise DataError("no cuts")
    return cuts[-1].b + 1, max(c.c for c in cuts) + 1


def reverse_corpus(ids: Sequence) -> list:
    return list(ids)[::-1]


# ---------------------------------------------------------------------------
# bundled corpora

_GRAMMAR = {
    "det": ["the", "a"],
    "adj": ["big", "small", "red", "old"],
    "noun": ["cat", "dog", "bird", "man", "woman", "child"],
    "verb": ["sees", "likes", "chases", "finds"],
    "prep": ["with", "near"],
}


def _noun_phrase(rng: np.random.Generator) -> list[str]:
    words = [rng.choice(_GRAMMAR["det"])]
    if rng.random() < 0.5:
        words.append(rng.choice(_GRAMMAR["adj"]))
    words.append(rng.choice(_GRAMMAR["noun"]))
    return words


def grammar_sentences(n_tokens: int, seed: int) -> list[str]:
    """Tokens of a seeded, strictly ordered toy grammar.

    ``S -> NP verb NP [prep NP] .`` with ``NP -> det [adj] noun``.
    """
    rng = np.random.default_rng(seed)
    out: list[str] = []
    while len(out) < n_tokens:
        sent = _noun_phrase(rng) + [rng.choice(_GRAMMAR["verb"])] + _noun_phrase(rng)
        if rng.random() < 0.3:
            sent += [rng.choice(_GRAMMAR["prep"])] + _noun_phrase(rng)
        out.extend(str(w) for w in sent)
        out.append(".")
    return out[:n_tokens]


def grammar_corpus(n_train: int = 4000, seed: int = 0) -> dict[str, list[str]]:
    """Train/valid/test token lists; held-out splits are an eighth of ``n_train``."""
    n_held = max(n_train // 8, 64)
    return {
        "train": grammar_sentences(n_train, seed),
        "valid": grammar_sentences(n_held, seed + 10_000),
        "test": grammar_sentences(n_held, seed + 20_000),
    }


def read_text(path) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from None


def load_ptb(directory) -> dict[str, list[str]]:
    """Penn Treebank layout: ``ptb.{train,valid,test}.txt``, one sentence per line.

    Each line end becomes an ``<eos>`` token.
    """
    directory = Path(directory)
    out = {}
    for split in ("train", "valid", "test"):
        text = read_text(directory / f"ptb.{split}.txt")
        out[split] = [w for line in text.split("\n") if line.strip()
                      for w in line.split() + [EOS]]
    return out


def bundled_text_path() -> Path:
    return Path(__file__).with_name("corpora") / "public_domain.txt"


def split_tokens(tokens: Sequence[str], valid_frac: float = 0.05,
                 test_frac: float = 0.05) -> dict[str, list[str]]:
    """Contiguous train/valid/test split of one token stream."""
    n = len(tokens)
    n_valid, n_test = int(n * valid_frac), int(n * test_frac)
    n_train = n - n_valid - n_test
    return {"train": list(tokens[:n_train]),
            "valid": list(tokens[n_train:n_train + n_valid]),
            "test": list(tokens[n_train + n_valid:])}
