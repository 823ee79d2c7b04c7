"""Personalised models as sparse offsets from a frozen baseline.

An adapted tensor is ``W = W_b + W_u``.  The baseline ``W_b`` is shared and
never written; the per-user offsets ``W_u`` are held in an :class:`OffsetSet`
where each tensor is either absent (:class:`Zero`), stored in full
(:class:`Dense`) or stored as a few rows (:class:`SparseRows`, used for the
vocabulary matrices).

Fine-tuning trains the offsets directly with plain SGD.  Which tensors may
move is set by a region mask (or an explicit name set); group-lasso
regularisation over whole tensors followed by mean-magnitude clipping picks
the tensors worth storing.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from .data import ParallelCorpus, Segment
from .errors import CompatibilityError, ConfigError, DataError, DimensionError
from .model import (
    BOS,
    EOS,
    REGIONS,
    ModelConfig,
    ParameterSet,
    batch_loss,
    greedy_decode,
    make_batch,
    param_shapes,
    perplexity,
    region_of,
)
from .tensor import RandomSource, Tensor, _result, _accumulate
from .train import to_batch, token_batches

log = logging.getLogger(__name__)

VOCAB_TENSORS = ("X_e", "Y_e", "Y_o")
SPECIAL_ROWS = (BOS, EOS)


# --------------------------------------------------------------------------
# offset entries


@dataclass(frozen=True)
class Zero:
    """A tensor left at its baseline value; nothing is stored."""


ZERO = Zero()


@dataclass(frozen=True, eq=False)
class Dense:
    values: np.ndarray

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape


@dataclass(frozen=True, eq=False)
class SparseRows:
    """Offsets for the listed rows of a ``shape`` matrix; other rows are zero."""

    shape: tuple[int, int]
    row_ids: np.ndarray
    rows: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.row_ids, dtype=np.int64)
        rows = np.asarray(self.rows, dtype=np.float64).reshape(len(ids), self.shape[1])
        object.__setattr__(self, "row_ids", ids)
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        if len(ids) and (np.any(np.diff(ids) <= 0) or ids[0] < 0 or ids[-1] >= self.shape[0]):
            raise DimensionError("row ids must be strictly increasing and in range")

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        out[self.row_ids] = self.rows
        return out


OffsetEntry = Zero | Dense | SparseRows


def _payload(entry: OffsetEntry) -> np.ndarray:
    if isinstance(entry, Dense):
        return entry.values
    if isinstance(entry, SparseRows):
        return entry.rows
    return np.zeros(0)


def _full_size(entry: OffsetEntry) -> int:
    return 0 if isinstance(entry, Zero) else int(np.prod(entry.shape))


def mean_abs_offset(entry: OffsetEntry) -> float:
    """(1/|T|) * sum |offset| over the whole tensor; 0 for Zero."""
    if isinstance(entry, Zero):
        return 0.0
    return float(np.abs(_payload(entry)).sum() / _full_size(entry))


class OffsetSet:
    """Named offset entries, optionally bound to the checksum of their baseline."""

    def __init__(self, entries: Mapping[str, OffsetEntry], baseline_checksum: bytes | None = None):
        self.entries: dict[str, OffsetEntry] = dict(entries)
        self.baseline_checksum = baseline_checksum

    @classmethod
    def zeros(cls, names: Iterable[str], baseline_checksum: bytes | None = None) -> "OffsetSet":
        return cls({n: ZERO for n in names}, baseline_checksum)

    def __getitem__(self, name: str) -> OffsetEntry:
        return self.entries.get(name, ZERO)

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __iter__(self):
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def items(self):
        return self.entries.items()

    def nonzero(self) -> list[str]:
        return [n for n, e in self.entries.items() if not isinstance(e, Zero)]

    def replace(self, **changes: OffsetEntry) -> "OffsetSet":
        return OffsetSet({**self.entries, **changes}, self.baseline_checksum)

    def validate(self, baseline: Mapping[str, np.ndarray]) -> None:
        for name, entry in self.entries.items():
            if name not in baseline:
                raise KeyError(f"offset for unknown tensor {name!r}")
            shape = baseline[name].shape
            if isinstance(entry, Dense) and entry.values.shape != shape:
                raise DimensionError(f"{name}: offset {entry.values.shape} vs baseline {shape}")
            if isinstance(entry, SparseRows) and tuple(entry.shape) != shape:
                raise DimensionError(f"{name}: sparse offset {entry.shape} vs baseline {shape}")


def compose(
    baseline: Mapping[str, np.ndarray],
    offsets: OffsetSet,
    baseline_checksum: bytes | None = None,
) -> ParameterSet:
    """Effective parameters ``W_b + W_u``; the baseline arrays are not modified.

    Tensors without an offset are returned as read-only views of the
    baseline.  If both ``baseline_checksum`` and the offsets' own binding are
    known they must agree.
    """
    if (baseline_checksum is not None and offsets.baseline_checksum is not None
            and baseline_checksum != offsets.baseline_checksum):
        raise CompatibilityError("offsets were trained against a different baseline")
    offsets.validate(baseline)
    out = {}
    for name, base in baseline.items():
        entry = offsets[name]
        if isinstance(entry, Dense):
            out[name] = base + entry.values
        elif isinstance(entry, SparseRows):
            w = base.copy()
            w[entry.row_ids] += entry.rows
            out[name] = w
        else:
            view = base.view()
            view.flags.writeable = False
            out[name] = view
    return out


# --------------------------------------------------------------------------
# group lasso


@dataclass(frozen=True)
class GroupLassoConfig:
    lam: float = 1e-6
    theta: float = 1e-4
    norm_floor: float = 1e-12
    clip_exempt: frozenset = frozenset(VOCAB_TENSORS)

    def __post_init__(self):
        if self.lam < 0 or self.theta < 0 or not self.norm_floor > 0:
            raise ConfigError("need lam >= 0, theta >= 0 and norm_floor > 0")
        object.__setattr__(self, "clip_exempt", frozenset(self.clip_exempt))


def group_lasso_penalty(offsets: OffsetSet) -> float:
    """Sum over tensors of sqrt(|T|) times the Euclidean norm of the offset."""
    total = 0.0
    for entry in offsets.entries.values():
        if not isinstance(entry, Zero):
            total += math.sqrt(_full_size(entry)) * float(np.linalg.norm(_payload(entry)))
    return total


def _lasso_grad(delta: np.ndarray, size: int, cfg: GroupLassoConfig) -> np.ndarray:
    norm = float(np.sqrt((delta * delta).sum()))
    if norm == 0.0:
        return np.zeros_like(delta)
    return (cfg.lam * math.sqrt(size) / max(norm, cfg.norm_floor)) * delta


def group_lasso_subgradient(offsets: OffsetSet, cfg: GroupLassoConfig) -> OffsetSet:
    """Gradient of ``lam * penalty`` with the same layout as ``offsets``."""
    out: dict[str, OffsetEntry] = {}
    for name, entry in offsets.items():
        if isinstance(entry, Dense):
            out[name] = Dense(_lasso_grad(entry.values, _full_size(entry), cfg))
        elif isinstance(entry, SparseRows):
            g = _lasso_grad(entry.rows, _full_size(entry), cfg)
            out[name] = SparseRows(entry.shape, entry.row_ids, g)
        else:
            out[name] = ZERO
    return OffsetSet(out, offsets.baseline_checksum)


def group_lasso_term(deltas: Mapping[str, Tensor], cfg: GroupLassoConfig) -> Tensor:
    """``lam * sum sqrt(|T|) ||dT||_2`` as a differentiable scalar."""
    parts = list(deltas.values())
    value = sum(math.sqrt(t.data.size) * float(np.linalg.norm(t.data)) for t in parts)

    def backward(g):
        for t in parts:
            _accumulate(t, g * _lasso_grad(t.data, t.data.size, cfg))

    return _result(np.asarray(cfg.lam * value), tuple(parts), backward)


def clip_offsets(offsets: OffsetSet, cfg: GroupLassoConfig) -> OffsetSet:
    """Zero every non-exempt tensor whose mean absolute offset is below ``theta``."""
    out = {}
    for name, entry in offsets.items():
        if name not in cfg.clip_exempt and mean_abs_offset(entry) < cfg.theta:
            out[name] = ZERO
        else:
            out[name] = entry
    return OffsetSet(out, offsets.baseline_checksum)


def select_fixed_tensors(offsets: OffsetSet, threshold: float) -> set[str]:
    """Names whose mean absolute offset exceeds ``threshold``."""
    if threshold < 0:
        raise ConfigError("threshold must be non-negative")
    return {n for n, e in offsets.items() if mean_abs_offset(e) > threshold}


# --------------------------------------------------------------------------
# vocabulary restriction


def observed_rows(corpus: ParallelCorpus) -> dict[str, set[int]]:
    """Rows of each vocabulary matrix touched by ``corpus`` (plus BOS/EOS)."""
    src = corpus.source_ids() | set(SPECIAL_ROWS)
    tgt = corpus.target_ids() | set(SPECIAL_ROWS)
    return {"X_e": src, "Y_e": tgt, "Y_o": tgt}


def _restrict(entry: OffsetEntry, keep: set[int]) -> OffsetEntry:
    if isinstance(entry, Zero):
        return entry
    if isinstance(entry, Dense):
        ids = np.array(sorted(i for i in keep if 0 <= i < entry.shape[0]), dtype=np.int64)
        return SparseRows(entry.shape, ids, entry.values[ids])
    mask = np.isin(entry.row_ids, sorted(keep))
    return SparseRows(entry.shape, entry.row_ids[mask], entry.rows[mask])


def restrict_to_observed_vocab(offsets: OffsetSet, corpus: ParallelCorpus) -> OffsetSet:
    """Keep only vocabulary rows observed in ``corpus`` for X_e, Y_e and Y_o."""
    rows = observed_rows(corpus)
    out = dict(offsets.entries)
    for name in VOCAB_TENSORS:
        if name in out:
            out[name] = _restrict(out[name], rows[name])
    return OffsetSet(out, offsets.baseline_checksum)


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class AdaptationConfig:
    """Fine-tuning hyperparameters; unset values take the default setting for ``mode``.

    Batch: lr 0.1, 10 epochs, 7000-token batches, dropout 0.1, smoothing 0.1.
    Incremental: lr 0.01, one segment per update, no dropout or smoothing, up
    to 3 updates per segment while the segment perplexity stays above 1.5.
    """

    mode: str = "batch"
    lr: float | None = None
    epochs: int = 10
    batch_tokens: int = 7000
    dropout: float | None = None
    eps_ls: float | None = None
    max_updates_per_segment: int = 3
    ppl_stop: float = 1.5
    region_mask: frozenset = frozenset(REGIONS)
    tensors: frozenset | None = None
    sparse_vocab: bool = False
    lasso: GroupLassoConfig | None = None
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("batch", "incremental"):
            raise ConfigError(f"mode must be batch or incremental, got {self.mode!r}")
        batch = self.mode == "batch"
        defaults = {"lr": 0.1 if batch else 0.01,
                    "dropout": 0.1 if batch else 0.0,
                    "eps_ls": 0.1 if batch else 0.0}
        for key, value in defaults.items():
            if getattr(self, key) is None:
                object.__setattr__(self, key, value)
        if not batch:
            object.__setattr__(self, "dropout", 0.0)
            object.__setattr__(self, "eps_ls", 0.0)
        unknown = set(self.region_mask) - set(REGIONS)
        if unknown:
            raise ConfigError(f"unknown regions {sorted(unknown)}")
        object.__setattr__(self, "region_mask", frozenset(self.region_mask))
        if self.tensors is not None:
            object.__setattr__(self, "tensors", frozenset(self.tensors))
        if self.lr < 0 or self.epochs < 0 or self.batch_tokens <= 0:
            raise ConfigError("lr and epochs must be non-negative, batch_tokens positive")
        if self.max_updates_per_segment <= 0:
            raise ConfigError("max_updates_per_segment must be positive")

    def with_mode(self, mode: str) -> "AdaptationConfig":
        """Same selection and lasso settings, hyperparameters reset to ``mode`` defaults."""
        return dataclasses.replace(self, mode=mode, lr=None, dropout=None, eps_ls=None)

    def trainable(self, config: ModelConfig) -> list[str]:
        names = list(param_shapes(config))
        if self.tensors is not None:
            return [n for n in names if n in self.tensors]
        return [n for n in names if region_of(n, config) in self.region_mask]


METHODS = ("full", "sparse-output", "fixed", "lasso")


def method_config(
    method: str,
    mode: str = "batch",
    fixed_tensors: Iterable[str] | None = None,
    lam: float = 1e-6,
    theta: float = 1e-4,
    **overrides,
) -> AdaptationConfig:
    """Adaptation settings for one of the compared methods.

    ``full`` trains everything; ``region:<label>`` a single region;
    ``sparse-output`` only the output projection restricted to observed
    vocabulary; ``fixed`` the sparse output projection plus a tensor set
    chosen beforehand; ``lasso`` every layer tensor plus the sparse output
    projection under group-lasso regularisation and clipping, embeddings
    excluded.
    """
    if method == "full":
        kw = {}
    elif method.startswith("region:"):
        region = method.split(":", 1)[1]
        if region not in REGIONS:
            raise ConfigError(f"unknown region {region!r}")
        kw = {"region_mask": frozenset({region})}
    elif method == "sparse-output":
        kw = {"region_mask": frozenset({"output-projection"}), "sparse_vocab": True}
    elif method == "fixed":
        if fixed_tensors is None:
            raise ConfigError("fixed adaptation needs a tensor selection")
        chosen = (set(fixed_tensors) - {"X_e", "Y_e"}) | {"Y_o"}
        kw = {"tensors": frozenset(chosen), "sparse_vocab": True}
    elif method == "lasso":
        kw = {"region_mask": frozenset({"outer-layers", "inner-layers", "output-projection"}),
              "sparse_vocab": True,
              "lasso": GroupLassoConfig(lam=lam, theta=theta)}
    else:
        raise ConfigError(f"unknown adaptation method {method!r}")
    kw.update(overrides)
    return AdaptationConfig(mode=mode, **kw)


# --------------------------------------------------------------------------
# training


class _OffsetTrainer:
    """Dense working copies of the trainable offsets plus row permissions."""

    def __init__(self, baseline: Mapping[str, np.ndarray], config: ModelConfig,
                 cfg: AdaptationConfig, init: OffsetSet | None):
        self.baseline = baseline
        self.config = config
        self.cfg = cfg
        self.names = cfg.trainable(config)
        init = init if init is not None else OffsetSet({})
        self.checksum = init.baseline_checksum
        init.validate(baseline)
        trainable = set(self.names)
        self.frozen = {n: e for n, e in init.items() if n not in trainable}
        self.delta: dict[str, np.ndarray] = {}
        self.allowed: dict[str, np.ndarray] = {}
        for name in self.names:
            entry = init[name]
            if isinstance(entry, Dense):
                self.delta[name] = entry.values.copy()
            elif isinstance(entry, SparseRows):
                self.delta[name] = entry.to_dense()
            else:
                self.delta[name] = np.zeros(baseline[name].shape)
            if self._row_restricted(name):
                allowed = np.zeros(baseline[name].shape[0], dtype=bool)
                if isinstance(entry, SparseRows):
                    allowed[entry.row_ids] = True
                elif isinstance(entry, Dense):
                    allowed[:] = True
                self.allowed[name] = allowed
        self.fixed_params = compose(baseline, OffsetSet(self.frozen))

    def _row_restricted(self, name: str) -> bool:
        # embeddings only ever receive gradient on observed rows; the output
        # projection is restricted only when asked to be
        return name in ("X_e", "Y_e") or (name == "Y_o" and self.cfg.sparse_vocab)

    def observe(self, corpus_or_segments) -> None:
        segs = list(corpus_or_segments)
        src = {i for s in segs for i in s.source} | set(SPECIAL_ROWS)
        tgt = {i for s in segs for i in s.target} | set(SPECIAL_ROWS)
        for name, allowed in self.allowed.items():
            allowed[sorted(src if name == "X_e" else tgt)] = True

    def params(self) -> dict[str, np.ndarray]:
        out = dict(self.fixed_params)
        for name in self.names:
            out[name] = self.baseline[name] + self.delta[name]
        return out

    def objective(self, deltas: Mapping[str, Tensor], batch, eps_ls: float,
                  train: bool, rng: RandomSource | None) -> Tensor:
        """Segment loss of ``baseline + deltas`` plus the lasso term when configured."""
        params: dict = dict(self.fixed_params)
        for name, d in deltas.items():
            params[name] = Tensor(self.baseline[name]) + d
        model_cfg = dataclasses.replace(self.config, dropout=self.cfg.dropout)
        loss, _ = batch_loss(batch, params, model_cfg, eps_ls, train, rng)
        if self.cfg.lasso is not None:
            loss = loss + group_lasso_term(deltas, self.cfg.lasso)
        return loss

    def step(self, segments: list[Segment], lr: float, rng: RandomSource | None) -> float:
        deltas = {n: Tensor(self.delta[n], requires_grad=True) for n in self.names}
        loss = self.objective(deltas, to_batch(segments), self.cfg.eps_ls,
                              self.cfg.dropout > 0, rng)
        loss.backward()
        for name in self.names:
            g = deltas[name].grad
            if g is None:
                continue
            if name in self.allowed:
                g[~self.allowed[name]] = 0.0
            self.delta[name] -= lr * g
        return loss.item()

    def offsets(self) -> OffsetSet:
        entries: dict[str, OffsetEntry] = {n: ZERO for n in param_shapes(self.config)}
        entries.update(self.frozen)
        for name in self.names:
            d = self.delta[name]
            if name in self.allowed:
                ids = np.flatnonzero(self.allowed[name])
                rows = d[ids]
                entries[name] = ZERO if not rows.any() else SparseRows(d.shape, ids, rows)
            else:
                entries[name] = ZERO if not d.any() else Dense(d.copy())
        out = OffsetSet(entries, self.checksum)
        if self.cfg.lasso is not None:
            out = clip_offsets(out, self.cfg.lasso)
        return out


def batch_adapt(
    baseline: Mapping[str, np.ndarray],
    corpus: ParallelCorpus,
    cfg: AdaptationConfig,
    config: ModelConfig,
    init: OffsetSet | None = None,
    baseline_checksum: bytes | None = None,
    callback: Callable[[int, float], None] | None = None,
) -> OffsetSet:
    """Fine-tune offsets on an in-domain corpus with SGD; clipped if lasso is on."""
    if len(corpus) == 0:
        raise DataError("empty adaptation corpus")
    if cfg.mode != "batch":
        raise ConfigError("batch_adapt needs a batch-mode configuration")
    if init is None:
        init = OffsetSet({}, baseline_checksum)
    trainer = _OffsetTrainer(baseline, config, cfg, init)
    trainer.observe(corpus)
    rng = RandomSource(cfg.seed)
    for epoch in range(cfg.epochs):
        losses = [trainer.step(segs, cfg.lr, rng)
                  for segs in token_batches(corpus.segments, cfg.batch_tokens, rng)]
        log.info("adapt epoch %d loss %.4f", epoch + 1, float(np.mean(losses)))
        if callback is not None:
            callback(epoch + 1, float(np.mean(losses)))
    return trainer.offsets()


def update_until(
    update: Callable[[], None],
    measure: Callable[[], float],
    max_updates: int,
    ppl_stop: float,
) -> list[float]:
    """Run ``update`` then ``measure`` until the measure is <= ppl_stop or the budget ends."""
    history = []
    for _ in range(max_updates):
        update()
        ppl = measure()
        history.append(ppl)
        if ppl <= ppl_stop:
            break
    return history


@dataclass
class SegmentStats:
    updates: int
    perplexities: list[float]


@dataclass
class IncrementalResult:
    translations: list[list[int]]
    offsets: OffsetSet
    stats: list[SegmentStats] = field(default_factory=list)


def incremental_adapt(
    baseline: Mapping[str, np.ndarray],
    offsets: OffsetSet | None,
    test: ParallelCorpus,
    cfg: AdaptationConfig,
    config: ModelConfig,
    max_steps: int | None = None,
) -> IncrementalResult:
    """Translate each segment, then learn from its reference before moving on."""
    if len(test) == 0:
        raise DataError("empty test set")
    if cfg.mode != "incremental":
        raise ConfigError("incremental_adapt needs an incremental-mode configuration")
    trainer = _OffsetTrainer(baseline, config, cfg, offsets)
    translations, stats = [], []
    for seg in test:
        current = trainer.params()
        translations.append(greedy_decode(seg.source, current, config, max_steps))
        trainer.observe([seg])
        history = update_until(
            lambda: trainer.step([seg], cfg.lr, None),
            lambda: perplexity(seg, trainer.params(), config),
            cfg.max_updates_per_segment,
            cfg.ppl_stop,
        )
        stats.append(SegmentStats(len(history), history))
    return IncrementalResult(translations, trainer.offsets(), stats)


# --------------------------------------------------------------------------
# accounting


@dataclass(frozen=True)
class OffsetParamCount:
    total: int
    per_tensor: dict[str, int]
    per_region: dict[str, int] | None


def stored_params(entry: OffsetEntry) -> int:
    return int(_payload(entry).size)


def offset_param_count(offsets: OffsetSet, config: ModelConfig | None = None) -> OffsetParamCount:
    """Stored parameters: dense tensors in full, sparse ones by stored rows, Zero as 0."""
    per_tensor = {n: stored_params(e) for n, e in offsets.items()}
    per_region = None
    if config is not None:
        per_region = {r: 0 for r in REGIONS}
        for name, n in per_tensor.items():
            per_region[region_of(name, config)] += n
    return OffsetParamCount(sum(per_tensor.values()), per_tensor, per_region)
