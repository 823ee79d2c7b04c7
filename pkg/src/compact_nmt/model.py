"""Self-attentive encoder-decoder translation model.

The encoder is a stack of post-norm layers (self-attention, then a two-layer
ReLU filter).  The decoder layers are lighter: both attentions use plain
residuals, and the filter is a single linear map followed by the layer's
only normalisation.  The embedding tables ``X_e`` and ``Y_e`` share nothing
with each other or with the output projection ``Y_o``.

Parameters live in a plain ``dict[str, np.ndarray]`` (a *parameter set*);
the forward functions accept either arrays or :class:`Tensor` leaves, so the
same code serves inference and training.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, LengthError
from .tensor import (
    RandomSource,
    Tensor,
    cross_entropy_label_smoothed,
    dropout,
    embedding,
    glorot_uniform,
    layer_norm,
    linear,
    matmul,
    relu,
    reshape,
    softmax,
    transpose,
)

PAD, BOS, EOS, UNK = 0, 1, 2, 3

REGIONS = (
    "outer-layers",
    "inner-layers",
    "encoder-embedding",
    "decoder-embedding",
    "output-projection",
)

ParameterSet = dict  # name -> np.ndarray

_LN_EPS = 1e-6
_ATTN_PARTS = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")


@dataclass(frozen=True)
class ModelConfig:
    src_vocab: int
    tgt_vocab: int
    d_model: int = 256
    enc_layers: int = 6
    dec_layers: int = 3
    enc_filter: int = 512
    heads: int = 4
    max_len: int = 256
    dropout: float = 0.1

    def __post_init__(self):
        counts = {
            "src_vocab": self.src_vocab,
            "tgt_vocab": self.tgt_vocab,
            "d_model": self.d_model,
            "enc_layers": self.enc_layers,
            "dec_layers": self.dec_layers,
            "enc_filter": self.enc_filter,
            "heads": self.heads,
            "max_len": self.max_len,
        }
        for key, value in counts.items():
            if int(value) != value or value <= 0:
                raise ConfigError(f"{key} must be a positive integer, got {value}")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")

    @classmethod
    def full_scale(cls, vocab: int = 40_000) -> "ModelConfig":
        """Full-size shape: 6 encoder / 3 decoder layers, width 256, filter 512."""
        return cls(src_vocab=vocab, tgt_vocab=vocab)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**d)

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads


# --------------------------------------------------------------------------
# naming, shapes, regions


def _attn_shapes(prefix: str, d: int) -> dict[str, tuple[int, ...]]:
    out = {}
    for part in _ATTN_PARTS:
        out[f"{prefix}.{part}"] = (d, d) if part.startswith("w") else (d,)
    return out


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered map from tensor name to shape; the naming scheme of a parameter set."""
    d, f = config.d_model, config.enc_filter
    shapes: dict[str, tuple[int, ...]] = {
        "X_e": (config.src_vocab, d),
        "Y_e": (config.tgt_vocab, d),
        "Y_o": (config.tgt_vocab, d),
    }
    for i in range(config.enc_layers):
        p = f"enc.{i}"
        shapes.update(_attn_shapes(f"{p}.self_attn", d))
        shapes[f"{p}.ln1.gain"] = (d,)
        shapes[f"{p}.ln1.bias"] = (d,)
        shapes[f"{p}.ffn.w1"] = (d, f)
        shapes[f"{p}.ffn.b1"] = (f,)
        shapes[f"{p}.ffn.w2"] = (f, d)
        shapes[f"{p}.ffn.b2"] = (d,)
        shapes[f"{p}.ln2.gain"] = (d,)
        shapes[f"{p}.ln2.bias"] = (d,)
    for i in range(config.dec_layers):
        p = f"dec.{i}"
        shapes.update(_attn_shapes(f"{p}.self_attn", d))
        shapes.update(_attn_shapes(f"{p}.cross_attn", d))
        shapes[f"{p}.ffn.w"] = (d, d)
        shapes[f"{p}.ffn.b"] = (d,)
        shapes[f"{p}.ln.gain"] = (d,)
        shapes[f"{p}.ln.bias"] = (d,)
    return shapes


def region_of(name: str, config: ModelConfig) -> str:
    """Region label of a tensor: first/last layers are outer, the rest inner."""
    fixed = {
        "X_e": "encoder-embedding",
        "Y_e": "decoder-embedding",
        "Y_o": "output-projection",
    }
    if name in fixed:
        return fixed[name]
    if name not in param_shapes(config):
        raise KeyError(f"unknown tensor name {name!r}")
    stack, index = name.split(".")[:2]
    depth = config.enc_layers if stack == "enc" else config.dec_layers
    return "outer-layers" if int(index) in (0, depth - 1) else "inner-layers"


@dataclass(frozen=True)
class ParamCount:
    per_tensor: dict[str, int]
    per_region: dict[str, int]
    total: int


def param_count(config: ModelConfig) -> ParamCount:
    per_tensor = {n: int(np.prod(s)) for n, s in param_shapes(config).items()}
    per_region = {r: 0 for r in REGIONS}
    for name, n in per_tensor.items():
        per_region[region_of(name, config)] += n
    return ParamCount(per_tensor, per_region, sum(per_tensor.values()))


def init_params(config: ModelConfig, seed: int = 0) -> ParameterSet:
    """Fan-based uniform matrices, zero biases, unit layer-norm gains."""
    rng = RandomSource(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if len(shape) == 2:
            params[name] = glorot_uniform(shape, rng)
        elif name.endswith(".gain"):
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    return params


def leaves(params: Mapping, requires_grad: bool = False) -> dict[str, Tensor]:
    """Wrap arrays as tensors (tensors pass through untouched)."""
    out = {}
    for name, value in params.items():
        if isinstance(value, Tensor):
            out[name] = value
        else:
            out[name] = Tensor(value, requires_grad=requires_grad)
    return out


def positional_encoding(length: int, d_model: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    rates = 1.0 / np.power(10000.0, (2 * (np.arange(d_model) // 2)) / d_model)
    angles = pos * rates[None, :]
    pe = np.empty((length, d_model))
    pe[:, 0::2] = np.sin(angles[:, 0::2])
    pe[:, 1::2] = np.cos(angles[:, 1::2])
    return pe


# --------------------------------------------------------------------------
# sub-layers


def multi_head_attention(
    queries: Tensor,
    keys: Tensor,
    values: Tensor,
    mask: np.ndarray | None,
    params: Mapping[str, Tensor],
    prefix: str,
    heads: int,
    return_weights: bool = False,
):
    """Scaled dot-product attention with ``heads`` heads.

    ``mask`` is boolean, broadcastable to ``(batch, heads, n_queries, n_keys)``
    (a 2-D ``(n_queries, n_keys)`` mask is accepted too); False positions get
    exactly zero weight.  Inputs may be ``(T, d)`` or ``(B, T, d)``.
    """
    single = queries.data.ndim == 2
    if single:
        queries = reshape(queries, (1,) + queries.shape)
        keys = reshape(keys, (1,) + keys.shape)
        values = reshape(values, (1,) + values.shape)
    batch, n_q, d = queries.shape
    n_k = keys.shape[1]
    if keys.shape[2] != d or values.shape[:2] != keys.shape[:2] or values.shape[2] != d:
        raise DimensionError(f"attention inputs {queries.shape}/{keys.shape}/{values.shape}")
    if d % heads:
        raise DimensionError(f"width {d} not divisible into {heads} heads")
    additive = None
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape[-1] != n_k or (mask.ndim >= 2 and mask.shape[-2] not in (1, n_q)):
            raise DimensionError(f"mask {mask.shape} for {n_q} queries x {n_k} keys")
        additive = np.where(mask, 0.0, -np.inf)
    dh = d // heads
    p = params

    def split(x: Tensor, n: int) -> Tensor:
        return transpose(reshape(x, (batch, n, heads, dh)), (0, 2, 1, 3))

    q = split(linear(queries, p[f"{prefix}.wq"], p[f"{prefix}.bq"]), n_q)
    k = split(linear(keys, p[f"{prefix}.wk"], p[f"{prefix}.bk"]), n_k)
    v = split(linear(values, p[f"{prefix}.wv"], p[f"{prefix}.bv"]), n_k)
    scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    weights = softmax(scores, additive)
    ctx = transpose(matmul(weights, v), (0, 2, 1, 3))
    out = linear(reshape(ctx, (batch, n_q, d)), p[f"{prefix}.wo"], p[f"{prefix}.bo"])
    if single:
        out = reshape(out, (n_q, d))
    if return_weights:
        return out, weights.data
    return out


def encoder_filter(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """``max(0, x W1 + b1) W2 + b2`` at every position."""
    return linear(relu(linear(x, w1, b1)), w2, b2)


def decoder_filter(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if w.shape[0] != w.shape[1]:
        raise DimensionError(f"decoder filter must be square, got {w.shape}")
    return linear(x, w, b)


# --------------------------------------------------------------------------
# encoder / decoder


def _check_ids(ids: np.ndarray, vocab: int, max_len: int, side: str) -> None:
    if ids.shape[-1] == 0:
        raise LengthError(f"empty {side} sequence")
    if ids.shape[-1] > max_len:
        raise LengthError(f"{side} length {ids.shape[-1]} exceeds max_len {max_len}")
    if ids.min() < 0 or ids.max() >= vocab:
        raise IndexError(f"{side} id out of range [0, {vocab})")


def _embed(table: Tensor, ids: np.ndarray, config: ModelConfig) -> Tensor:
    pe = positional_encoding(ids.shape[1], config.d_model)
    return embedding(table, ids) * math.sqrt(config.d_model) + pe


def _encode_batch(ids, p, config, train, rng) -> Tensor:
    rate = config.dropout
    keep_keys = (ids != PAD)[:, None, None, :]
    x = dropout(_embed(p["X_e"], ids, config), rate, rng, train)
    for i in range(config.enc_layers):
        pre = f"enc.{i}"
        a = multi_head_attention(x, x, x, keep_keys, p, f"{pre}.self_attn", config.heads)
        x = layer_norm(x + dropout(a, rate, rng, train),
                       p[f"{pre}.ln1.gain"], p[f"{pre}.ln1.bias"], _LN_EPS)
        h = encoder_filter(x, p[f"{pre}.ffn.w1"], p[f"{pre}.ffn.b1"],
                           p[f"{pre}.ffn.w2"], p[f"{pre}.ffn.b2"])
        x = layer_norm(x + dropout(h, rate, rng, train),
                       p[f"{pre}.ln2.gain"], p[f"{pre}.ln2.bias"], _LN_EPS)
    return x


def encode(
    source,
    params: Mapping,
    config: ModelConfig,
    train: bool = False,
    rng: RandomSource | None = None,
) -> Tensor:
    """Encoder states for one sequence ``(m,)`` or a padded batch ``(B, m)``."""
    ids = np.asarray(source, dtype=np.int64)
    single = ids.ndim == 1
    if single:
        ids = ids[None, :]
    _check_ids(ids, config.src_vocab, config.max_len, "source")
    out = _encode_batch(ids, leaves(params), config, train, rng)
    return reshape(out, out.shape[1:]) if single else out


def decode(
    tgt_in: np.ndarray,
    enc_out: Tensor,
    src_ids: np.ndarray,
    params: Mapping,
    config: ModelConfig,
    train: bool = False,
    rng: RandomSource | None = None,
) -> Tensor:
    """Logits ``(B, n, tgt_vocab)`` for teacher-forced decoder inputs."""
    p = leaves(params)
    rate = config.dropout
    n = tgt_in.shape[1]
    _check_ids(tgt_in, config.tgt_vocab, config.max_len, "target")
    causal = np.tril(np.ones((n, n), dtype=bool))
    src_keep = (src_ids != PAD)[:, None, None, :]
    y = dropout(_embed(p["Y_e"], tgt_in, config), rate, rng, train)
    for i in range(config.dec_layers):
        pre = f"dec.{i}"
        a = multi_head_attention(y, y, y, causal, p, f"{pre}.self_attn", config.heads)
        y = y + dropout(a, rate, rng, train)
        c = multi_head_attention(y, enc_out, enc_out, src_keep, p,
                                 f"{pre}.cross_attn", config.heads)
        y = y + dropout(c, rate, rng, train)
        h = decoder_filter(y, p[f"{pre}.ffn.w"], p[f"{pre}.ffn.b"])
        y = layer_norm(y + dropout(h, rate, rng, train),
                       p[f"{pre}.ln.gain"], p[f"{pre}.ln.bias"], _LN_EPS)
    return linear(y, transpose(p["Y_o"], (1, 0)))


# --------------------------------------------------------------------------
# batches and losses


@dataclass
class Batch:
    src: np.ndarray       # (B, m) padded source ids
    tgt_in: np.ndarray    # (B, n+1) BOS + target, padded
    tgt_out: np.ndarray   # (B, n+1) target + EOS, padded
    weights: np.ndarray   # (B, n+1) 1.0 on real target positions

    @property
    def tokens(self) -> int:
        return int((self.src != PAD).sum() + self.weights.sum() - len(self.src))


def make_batch(pairs: Iterable[tuple[Sequence[int], Sequence[int]]]) -> Batch:
    """Pad (source, target) id pairs into one batch; target gets BOS/EOS framing."""
    pairs = [(list(s), list(t)) for s, t in pairs]
    if not pairs:
        raise LengthError("empty batch")
    for s, t in pairs:
        if not s or not t:
            raise LengthError("empty source or target sequence")
    m = max(len(s) for s, _ in pairs)
    n = max(len(t) for _, t in pairs) + 1
    src = np.zeros((len(pairs), m), dtype=np.int64)
    tgt_in = np.zeros((len(pairs), n), dtype=np.int64)
    tgt_out = np.zeros((len(pairs), n), dtype=np.int64)
    weights = np.zeros((len(pairs), n))
    for b, (s, t) in enumerate(pairs):
        src[b, : len(s)] = s
        tgt_in[b, : len(t) + 1] = [BOS] + t
        tgt_out[b, : len(t) + 1] = t + [EOS]
        weights[b, : len(t) + 1] = 1.0
    return Batch(src, tgt_in, tgt_out, weights)


def batch_loss(
    batch: Batch,
    params: Mapping,
    config: ModelConfig,
    eps_ls: float = 0.0,
    train: bool = False,
    rng: RandomSource | None = None,
) -> tuple[Tensor, Tensor]:
    """Mean label-smoothed cross-entropy over all real target positions."""
    p = leaves(params)
    _check_ids(batch.src, config.src_vocab, config.max_len, "source")
    enc_out = _encode_batch(batch.src, p, config, train, rng)
    logits = decode(batch.tgt_in, enc_out, batch.src, p, config, train, rng)
    loss = cross_entropy_label_smoothed(logits, batch.tgt_out, eps_ls, batch.weights)
    return loss, logits


def decode_train(
    segment,
    enc_out: Tensor,
    params: Mapping,
    config: ModelConfig,
    eps_ls: float = 0.0,
    train: bool = False,
    rng: RandomSource | None = None,
) -> tuple[Tensor, Tensor]:
    """Teacher-forced loss and ``(n+1, V)`` logits for one segment.

    ``enc_out`` must be the encoder states of ``segment.source``.
    """
    if len(segment.target) == 0:
        raise LengthError("empty target sequence")
    batch = make_batch([(segment.source, segment.target)])
    if enc_out.data.ndim == 2:
        enc_out = reshape(enc_out, (1,) + enc_out.shape)
    if enc_out.shape[1] != batch.src.shape[1]:
        raise DimensionError("encoder states do not match the segment source")
    logits = decode(batch.tgt_in, enc_out, batch.src, params, config, train, rng)
    loss = cross_entropy_label_smoothed(logits, batch.tgt_out, eps_ls, batch.weights)
    return loss, reshape(logits, logits.shape[1:])


def perplexity(segment, params: Mapping, config: ModelConfig) -> float:
    """exp of the mean per-token NLL of the reference, no smoothing, no dropout."""
    if len(segment.target) == 0:
        raise LengthError("empty target sequence")
    loss, _ = batch_loss(make_batch([(segment.source, segment.target)]),
                         params, config, 0.0, False)
    return math.exp(loss.item())


# --------------------------------------------------------------------------
# search


def greedy_decode_batch(
    sources: Sequence[Sequence[int]],
    params: Mapping,
    config: ModelConfig,
    max_steps: int | None = None,
) -> list[list[int]]:
    """Argmax decoding of many sources at once; ties go to the lowest id."""
    if not sources:
        return []
    p = leaves(params)
    if max_steps is None:
        max_steps = config.max_len - 1
    max_steps = min(max_steps, config.max_len - 1)
    m = max(len(s) for s in sources)
    src = np.zeros((len(sources), m), dtype=np.int64)
    for b, s in enumerate(sources):
        src[b, : len(s)] = s
    _check_ids(src, config.src_vocab, config.max_len, "source")
    enc_out = _encode_batch(src, p, config, False, None)
    prefix = np.full((len(sources), 1), BOS, dtype=np.int64)
    done = np.zeros(len(sources), dtype=bool)
    for _ in range(max_steps):
        logits = decode(prefix, enc_out, src, p, config, False, None)
        nxt = logits.data[:, -1, :].argmax(axis=-1)
        nxt = np.where(done, PAD, nxt)
        done |= nxt == EOS
        prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
        if done.all():
            break
    out = []
    for row in prefix[:, 1:]:
        ids = []
        for t in row:
            if t in (EOS, PAD):
                break
            ids.append(int(t))
        out.append(ids)
    return out


def greedy_decode(source: Sequence[int], params: Mapping, config: ModelConfig,
                  max_steps: int | None = None) -> list[int]:
    return greedy_decode_batch([source], params, config, max_steps)[0]


def translate(sources: Sequence[Sequence[int]], params: Mapping, config: ModelConfig,
              batch_size: int = 256, max_steps: int | None = None) -> list[list[int]]:
    """Greedy translations of a list of sources, in chunks sorted by length."""
    order = sorted(range(len(sources)), key=lambda i: len(sources[i]))
    result: list[list[int] | None] = [None] * len(sources)
    for start in range(0, len(order), batch_size):
        chunk = order[start:start + batch_size]
        hyps = greedy_decode_batch([sources[i] for i in chunk], params, config, max_steps)
        for i, h in zip(chunk, hyps):
            result[i] = h
    return result  # type: ignore[return-value]
