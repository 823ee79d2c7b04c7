"""Minibatch assembly and Adam training of the baseline model."""

from __future__ import annotations

import logging
import math
from typing import Callable, Iterator, Sequence

import numpy as np

from .data import ParallelCorpus, Segment
from .errors import DataError
from .model import Batch, ModelConfig, ParameterSet, batch_loss, init_params, leaves, make_batch
from .tensor import Adam, RandomSource

log = logging.getLogger(__name__)


def segment_tokens(seg: Segment) -> int:
    return len(seg.source) + len(seg.target)


def token_batches(
    segments: Sequence[Segment],
    batch_tokens: int,
    rng: RandomSource | None = None,
) -> Iterator[list[Segment]]:
    """Greedy fill in corpus order (after an optional seeded shuffle).

    A batch is closed as soon as the next segment would push its
    source+target token count above ``batch_tokens``; a single oversized
    segment forms a batch on its own.
    """
    order = range(len(segments)) if rng is None else rng.permutation(len(segments))
    batch: list[Segment] = []
    used = 0
    for i in order:
        seg = segments[int(i)]
        n = segment_tokens(seg)
        if batch and used + n > batch_tokens:
            yield batch
            batch, used = [], 0
        batch.append(seg)
        used += n
    if batch:
        yield batch


def bucketed_batches(
    segments: Sequence[Segment],
    batch_tokens: int,
    rng: RandomSource,
) -> list[list[Segment]]:
    """Length-sorted batches in shuffled order; less padding for baseline training."""
    order = sorted(rng.permutation(len(segments)).tolist(),
                   key=lambda i: (len(segments[i].source), len(segments[i].target)))
    batches = list(token_batches([segments[i] for i in order], batch_tokens))
    return [batches[int(i)] for i in rng.permutation(len(batches))]


def to_batch(segments: Sequence[Segment]) -> Batch:
    return make_batch((s.source, s.target) for s in segments)


def train_baseline(
    corpus: ParallelCorpus,
    config: ModelConfig,
    epochs: int = 10,
    lr: float = 2e-3,
    warmup: int = 100,
    batch_tokens: int = 4000,
    eps_ls: float = 0.1,
    seed: int = 0,
    init: ParameterSet | None = None,
    callback: Callable[[int, float], None] | None = None,
) -> ParameterSet:
    """Adam with linear warmup then inverse-sqrt decay; returns a new parameter set."""
    if len(corpus) == 0:
        raise DataError("empty training corpus")
    params = init_params(config, seed) if init is None else {k: v.copy() for k, v in init.items()}
    tensors = leaves(params, requires_grad=True)
    opt = Adam()
    rng = RandomSource(seed + 1)
    step = 0
    for epoch in range(epochs):
        total, count = 0.0, 0
        for segs in bucketed_batches(corpus.segments, batch_tokens, rng):
            step += 1
            rate = lr * min(step / warmup, math.sqrt(warmup / step))
            loss, _ = batch_loss(to_batch(segs), tensors, config, eps_ls, True, rng)
            loss.backward()
            opt.step(tensors, rate)
            total += loss.item()
            count += 1
        log.info("epoch %d mean loss %.4f", epoch + 1, total / count)
        if callback is not None:
            callback(epoch + 1, total / count)
    return {k: t.data for k, t in tensors.items()}
