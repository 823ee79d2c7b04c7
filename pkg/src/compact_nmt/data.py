"""Vocabularies, parallel corpora and the synthetic domain-shift task."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, DataError
from .model import UNK

SPECIALS = ("<pad>", "<s>", "</s>", "<unk>")


class Vocabulary:
    """Token/id map with the four specials at ids 0-3."""

    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(SPECIALS) + list(tokens)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise DataError("duplicate token in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        return self.index.get(token, UNK)

    def token(self, i: int) -> str:
        return self.tokens[i]

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self.tokens[i] for i in ids)

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens[len(SPECIALS):]),
                              encoding="utf-8")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([line.strip() for line in lines if line.strip()])


def tokenize(line: str, vocab: Vocabulary) -> list[int]:
    """Whitespace tokenisation; unknown tokens become UNK."""
    return [vocab.id(tok) for tok in line.split()]


@dataclass(frozen=True)
class Segment:
    source: tuple[int, ...]
    target: tuple[int, ...]


@dataclass
class ParallelCorpus:
    segments: list[Segment]
    src_vocab: Vocabulary
    tgt_vocab: Vocabulary

    def __post_init__(self):
        self.segments = [
            s if isinstance(s, Segment) else Segment(tuple(s[0]), tuple(s[1]))
            for s in self.segments
        ]
        for i, seg in enumerate(self.segments):
            if not seg.source or not seg.target:
                raise DataError(f"segment {i} is empty")
            if min(seg.source) < 0 or max(seg.source) >= len(self.src_vocab):
                raise DataError(f"segment {i}: source id out of range")
            if min(seg.target) < 0 or max(seg.target) >= len(self.tgt_vocab):
                raise DataError(f"segment {i}: target id out of range")

    def __len__(self) -> int:
        return len(self.segments)

    def __iter__(self) -> Iterator[Segment]:
        return iter(self.segments)

    def __getitem__(self, i):
        return self.segments[i]

    def subset(self, segments: Sequence[Segment]) -> "ParallelCorpus":
        return ParallelCorpus(list(segments), self.src_vocab, self.tgt_vocab)

    @property
    def sources(self) -> list[list[int]]:
        return [list(s.source) for s in self.segments]

    @property
    def targets(self) -> list[list[int]]:
        return [list(s.target) for s in self.segments]

    def source_ids(self) -> set[int]:
        return {i for s in self.segments for i in s.source}

    def target_ids(self) -> set[int]:
        return {i for s in self.segments for i in s.target}

    def write(self, src_path: str | os.PathLike, tgt_path: str | os.PathLike) -> None:
        Path(src_path).write_text(
            "".join(self.src_vocab.decode(s.source) + "\n" for s in self.segments),
            encoding="utf-8")
        Path(tgt_path).write_text(
            "".join(self.tgt_vocab.decode(s.target) + "\n" for s in self.segments),
            encoding="utf-8")


def load_parallel(
    src_path: str | os.PathLike,
    tgt_path: str | os.PathLike,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
) -> ParallelCorpus:
    src_lines = Path(src_path).read_text(encoding="utf-8").splitlines()
    tgt_lines = Path(tgt_path).read_text(encoding="utf-8").splitlines()
    if len(src_lines) != len(tgt_lines):
        raise DataError(
            f"line count mismatch: {len(src_lines)} source vs {len(tgt_lines)} target")
    segments = []
    for n, (s, t) in enumerate(zip(src_lines, tgt_lines), start=1):
        if not s.strip() or not t.strip():
            raise DataError(f"empty line {n}")
        segments.append(Segment(tuple(tokenize(s, src_vocab)), tuple(tokenize(t, tgt_vocab))))
    return ParallelCorpus(segments, src_vocab, tgt_vocab)


def load_lines(path: str | os.PathLike, vocab: Vocabulary) -> list[list[int]]:
    """One tokenised sequence per line; blank lines give empty sequences."""
    return [tokenize(line, vocab) for line in Path(path).read_text(encoding="utf-8").splitlines()]


# --------------------------------------------------------------------------
# synthetic task


@dataclass(frozen=True)
class SyntheticTaskConfig:
    vocab: int = 120
    min_len: int = 4
    max_len: int = 12
    n_baseline: int = 20_000
    n_heldout: int = 500
    n_adapt: int = 2_000
    n_test: int = 500
    shift: float = 0.3
    repeat: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for key in ("vocab", "min_len", "max_len", "n_baseline", "n_heldout", "n_adapt", "n_test"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"{key} must be positive")
        if self.min_len > self.max_len:
            raise ConfigError("min_len exceeds max_len")
        for key in ("shift", "repeat"):
            if not 0.0 <= getattr(self, key) <= 1.0:
                raise ConfigError(f"{key} must lie in [0, 1]")
        if self.shifted_count == 1:
            raise ConfigError("a bijective remapping cannot change exactly one token")

    @property
    def shifted_count(self) -> int:
        return int(round(self.shift * self.vocab))


@dataclass
class SyntheticTask:
    config: SyntheticTaskConfig
    src_vocab: Vocabulary
    tgt_vocab: Vocabulary
    base_map: np.ndarray   # source word index -> target word index, baseline domain
    user_map: np.ndarray   # same, user domain
    baseline: ParallelCorpus
    heldout: ParallelCorpus
    adapt: ParallelCorpus
    test: ParallelCorpus
    extras: dict = field(default_factory=dict)


def reorder(words: Sequence[int]) -> list[int]:
    """Swap each adjacent pair of positions: (0 1)(2 3)...; a trailing odd word stays."""
    out = list(words)
    for j in range(0, len(out) - 1, 2):
        out[j], out[j + 1] = out[j + 1], out[j]
    return out


def _translate_words(words: np.ndarray, mapping: np.ndarray) -> list[int]:
    return reorder(mapping[words].tolist())


def generate_synthetic(cfg: SyntheticTaskConfig) -> SyntheticTask:
    """Random source sentences translated by a token bijection plus pair swaps.

    The baseline domain uses one bijection; the user domain (adapt and test
    corpora) uses a second one that differs on exactly ``shifted_count``
    source words.  ``repeat`` of the test segments are copies of earlier ones.
    """
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    v = cfg.vocab
    base_map = rng.permutation(v)
    user_map = base_map.copy()
    k = cfg.shifted_count
    if k:
        chosen = rng.choice(v, size=k, replace=False)
        # cyclic rotation of the chosen targets changes every one of them
        user_map[chosen] = base_map[np.roll(chosen, -1)]
    src_vocab = Vocabulary([f"s{i}" for i in range(v)])
    tgt_vocab = Vocabulary([f"t{i}" for i in range(v)])
    offset = len(SPECIALS)

    def sentence() -> np.ndarray:
        return rng.integers(0, v, size=rng.integers(cfg.min_len, cfg.max_len + 1))

    def corpus(n: int, mapping: np.ndarray) -> ParallelCorpus:
        segments = []
        for _ in range(n):
            words = sentence()
            segments.append(Segment(tuple((words + offset).tolist()),
                                    tuple(w + offset for w in _translate_words(words, mapping))))
        return ParallelCorpus(segments, src_vocab, tgt_vocab)

    baseline = corpus(cfg.n_baseline, base_map)
    heldout = corpus(cfg.n_heldout, base_map)
    adapt = corpus(cfg.n_adapt, user_map)

    n_rep = int(round(cfg.repeat * cfg.n_test))
    n_rep = min(n_rep, cfg.n_test - 1)
    repeat_at = set(rng.choice(np.arange(1, cfg.n_test), size=n_rep, replace=False).tolist()) \
        if n_rep > 0 else set()
    fresh = corpus(cfg.n_test - n_rep, user_map).segments
    test_segments: list[Segment] = []
    it = iter(fresh)
    for pos in range(cfg.n_test):
        if pos in repeat_at:
            test_segments.append(test_segments[int(rng.integers(0, len(test_segments)))])
        else:
            test_segments.append(next(it))
    test = ParallelCorpus(test_segments, src_vocab, tgt_vocab)
    return SyntheticTask(cfg, src_vocab, tgt_vocab, base_map, user_map,
                         baseline, heldout, adapt, test)
