"""Decoder-only transformer with a skip-aware incremental KV cache.

Pre-norm layers: RMSNorm into causal multi-head attention with rotary
position embeddings, RMSNorm into a gated feed-forward. Each layer's
contribution is exposed as a residual branch so the soft training forward
can scale it by a probability and remain bitwise-identical to the hard
pass/skip limits.

Weight matrices are stored (out_features, in_features); a projection is
always x @ W.T. The KV cache holds post-rotation keys, so cached entries
never need re-rotating as decoding advances.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterator, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import CacheConsistencyError, ConfigError, NumericalError, ShapeError
from .tensor import Tensor
from .tokenizer import VOCAB_SIZE


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 12
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    vocab_size: int = VOCAB_SIZE
    max_seq: int = 256

    def __post_init__(self):
        if self.n_layers < 1:
            raise ConfigError(f"need at least one layer, got {self.n_layers}")
        if self.vocab_size < 2:
            raise ConfigError(f"vocab size must be at least 2, got {self.vocab_size}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.max_seq < 1:
            raise ConfigError(f"max_seq must be positive, got {self.max_seq}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class LayerWeights:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    w_gate: Tensor
    w_up: Tensor
    w_down: Tensor
    attn_norm: Tensor
    ffn_norm: Tensor

    def matrices(self) -> Iterator[tuple[str, Tensor]]:
        for name in ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down"):
            yield name, getattr(self, name)

    def parameters(self) -> Iterator[Tensor]:
        for name in ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down",
                     "attn_norm", "ffn_norm"):
            yield getattr(self, name)


@dataclass
class ModelWeights:
    config: ModelConfig
    embedding: Tensor
    layers: list[LayerWeights]
    final_norm: Tensor
    head: Tensor

    def parameters(self) -> Iterator[Tensor]:
        """Fixed traversal order; the binary container and optimizer rely on it."""
        yield self.embedding
        for lw in self.layers:
            yield from lw.parameters()
        yield self.final_norm
        yield self.head

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag


def init_model(config: ModelConfig, rng: np.random.Generator,
               dtype=np.float32) -> ModelWeights:
    """Fresh weights: normal(0, 0.02) projections, unit norm scales."""

    def mat(n_out, n_in):
        return Tensor(rng.normal(0.0, 0.02, size=(n_out, n_in)).astype(dtype))

    d, f, v = config.d_model, config.d_ff, config.vocab_size
    layers = [
        LayerWeights(
            wq=mat(d, d), wk=mat(d, d), wv=mat(d, d), wo=mat(d, d),
            w_gate=mat(f, d), w_up=mat(f, d), w_down=mat(d, f),
            attn_norm=Tensor(np.ones(d, dtype=dtype)),
            ffn_norm=Tensor(np.ones(d, dtype=dtype)),
        )
        for _ in range(config.n_layers)
    ]
    return ModelWeights(
        config=config,
        embedding=mat(v, d),
        layers=layers,
        final_norm=Tensor(np.ones(d, dtype=dtype)),
        head=mat(v, d),
    )


@lru_cache(maxsize=8)
def _rope_tables(max_seq: int, head_dim: int) -> tuple[np.ndarray, np.ndarray]:
    inv = 10000.0 ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    angles = np.outer(np.arange(max_seq, dtype=np.float64), inv)
    return np.cos(angles).astype(np.float32), np.sin(angles).astype(np.float32)


class KVCache:
    """Per-layer key/value buffers for one generation session.

    ``decode_skip`` is the layer set this cache is bound to for decoding;
    every decode step must present the same set. Layers the session never
    executes keep a filled count of 0 and are never read.
    """

    def __init__(self, config: ModelConfig, batch_size: int = 1,
                 decode_skip: Sequence[int] = (), dtype=np.float32):
        shape = (batch_size, config.max_seq, config.d_model)
        self.config = config
        self.batch_size = batch_size
        self.k = [np.zeros(shape, dtype=dtype) for _ in range(config.n_layers)]
        self.v = [np.zeros(shape, dtype=dtype) for _ in range(config.n_layers)]
        self.filled = [0] * config.n_layers
        self.n_positions = 0
        self.decode_skip = frozenset(int(i) for i in decode_skip)

    def append(self, layer_index: int, k_rows: np.ndarray, v_rows: np.ndarray) -> None:
        lo = self.filled[layer_index]
        hi = lo + k_rows.shape[1]
        if hi > self.config.max_seq:
            raise ShapeError(f"cache overflow: {hi} rows > max_seq {self.config.max_seq}")
        self.k[layer_index][:, lo:hi] = k_rows
        self.v[layer_index][:, lo:hi] = v_rows
        self.filled[layer_index] = hi


_layer_invocations = 0


def layer_invocations() -> int:
    """How many layer branches have executed since the last reset."""
    return _layer_invocations


def reset_layer_invocations() -> None:
    global _layer_invocations
    _layer_invocations = 0


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, n, d = x.shape
    hd = d // n_heads
    x = T.reshape(x, (b, n, n_heads, hd))
    x = T.transpose(x, (0, 2, 1, 3))
    return T.reshape(x, (b * n_heads, n, hd))


def _merge_heads(x: Tensor, n_heads: int) -> Tensor:
    bh, n, hd = x.shape
    b = bh // n_heads
    x = T.reshape(x, (b, n_heads, n, hd))
    x = T.transpose(x, (0, 2, 1, 3))
    return T.reshape(x, (b, n, n_heads * hd))


def linear(x: Tensor, w: Tensor) -> Tensor:
    """x @ W.T for a (out_features, in_features) weight."""
    return T.matmul(x, T.transpose(w, (1, 0)))


def _plain_project(x: Tensor, w: Tensor, layer_index: int, name: str) -> Tensor:
    return linear(x, w)


def _attention(config: ModelConfig, lw: LayerWeights, x: Tensor,
               attn_mask: Optional[np.ndarray], positions: np.ndarray,
               cache: Optional[KVCache], layer_index: int, project) -> Tensor:
    b, n, d = x.shape
    h, hd = config.n_heads, config.head_dim
    past = int(positions[0])

    cos_t, sin_t = _rope_tables(config.max_seq, hd)
    cos, sin = cos_t[positions], sin_t[positions]

    q = T.rope(_split_heads(project(x, lw.wq, layer_index, "wq"), h), cos, sin)
    k = T.rope(_split_heads(project(x, lw.wk, layer_index, "wk"), h), cos, sin)
    v = _split_heads(project(x, lw.wv, layer_index, "wv"), h)

    if cache is not None:
        # Stash post-rotation rows, then read the whole prefix back. The
        # cache path is inference-only, so plain arrays are fine here.
        def flat(t):
            return t.data.reshape(b, h, n, hd).transpose(0, 2, 1, 3).reshape(b, n, d)

        cache.append(layer_index, flat(k), flat(v))
        t_len = cache.filled[layer_index]

        def heads(buf):
            rows = buf[:, :t_len]
            return Tensor(rows.reshape(b, t_len, h, hd).transpose(0, 2, 1, 3)
                          .reshape(b * h, t_len, hd))

        k_all, v_all = heads(cache.k[layer_index]), heads(cache.v[layer_index])
    else:
        t_len = n
        k_all, v_all = k, v

    scores = T.scale(T.matmul(q, T.transpose(k_all, (0, 2, 1))), hd**-0.5)

    causal = np.arange(t_len)[None, :] <= (past + np.arange(n))[:, None]
    if attn_mask is not None:
        key_valid = np.ones((b, t_len), dtype=bool)
        key_valid[:, past:past + n] = np.asarray(attn_mask) != 0
        mask = causal[None, :, :] & key_valid[:, None, :]
    else:
        mask = np.broadcast_to(causal[None, :, :], (b, n, t_len))
    mask = np.repeat(mask, h, axis=0)

    att = T.softmax_rows(scores, mask=mask)
    out = _merge_heads(T.matmul(att, v_all), h)
    return project(out, lw.wo, layer_index, "wo")


def _ffn(lw: LayerWeights, x: Tensor, layer_index: int, project) -> Tensor:
    g = project(x, lw.w_gate, layer_index, "w_gate")
    gated = T.mul(T.mul(g, T.sigmoid(g)), project(x, lw.w_up, layer_index, "w_up"))
    return project(gated, lw.w_down, layer_index, "w_down")


def layer_branch(config: ModelConfig, weights: ModelWeights, layer_index: int,
                 x: Tensor, attn_mask: Optional[np.ndarray] = None,
                 cache: Optional[KVCache] = None,
                 positions: Optional[np.ndarray] = None,
                 project=None) -> Tensor:
    """The layer's residual contribution: attention delta plus FFN delta.

    ``project`` lets callers wrap every weight application (low-rank
    adapters); it defaults to the plain projection.
    """
    global _layer_invocations
    _layer_invocations += 1
    if project is None:
        project = _plain_project
    if positions is None:
        positions = np.arange(x.shape[1])
    if cache is not None and cache.filled[layer_index] != int(positions[0]):
        raise CacheConsistencyError(
            f"layer {layer_index}: positions start at {int(positions[0])} but the "
            f"cache holds {cache.filled[layer_index]} rows")
    lw = weights.layers[layer_index]
    a = _attention(config, lw, T.rmsnorm(x, lw.attn_norm), attn_mask,
                   np.asarray(positions), cache, layer_index, project)
    f = _ffn(lw, T.rmsnorm(T.add(x, a), lw.ffn_norm), layer_index, project)
    return T.add(a, f)


def layer_forward(config: ModelConfig, weights: ModelWeights, layer_index: int,
                  x: Tensor, attn_mask: Optional[np.ndarray] = None,
                  cache: Optional[KVCache] = None,
                  positions: Optional[np.ndarray] = None,
                  project=None) -> Tensor:
    """Residual-added layer output."""
    return T.add(x, layer_branch(config, weights, layer_index, x,
                                 attn_mask, cache, positions, project))


def _finish(weights: ModelWeights, h: Tensor) -> Tensor:
    return linear(T.rmsnorm(h, weights.final_norm), weights.head)


def forward_full(config: ModelConfig, weights: ModelWeights, tokens: np.ndarray,
                 skip_set: Sequence[int] = (), cache: Optional[KVCache] = None,
                 attn_mask: Optional[np.ndarray] = None, project=None) -> Tensor:
    """Logits for a token block; skipped layers pass the hidden state through.

    With a cache, the block continues the session: positions pick up at
    ``cache.n_positions`` and executed layers append their K,V rows.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    start = cache.n_positions if cache is not None else 0
    n = tokens.shape[1]
    if start + n > config.max_seq:
        raise ShapeError(f"sequence length {start + n} exceeds max_seq {config.max_seq}")
    skip = frozenset(int(i) for i in skip_set)
    positions = np.arange(start, start + n)

    h = T.embedding(weights.embedding, tokens)
    for i in range(config.n_layers):
        if i in skip:
            continue
        h = layer_forward(config, weights, i, h, attn_mask, cache, positions, project)
    if cache is not None:
        cache.n_positions += n
    return _finish(weights, h)


def decode_step(config: ModelConfig, weights: ModelWeights, tokens: np.ndarray,
                cache: KVCache, skip_set: Sequence[int] = (), project=None) -> Tensor:
    """One incremental token; the cache must match the skip set it was built for."""
    skip = frozenset(int(i) for i in skip_set)
    if skip != cache.decode_skip:
        raise CacheConsistencyError(
            f"decode skip set {sorted(skip)} differs from the cache's "
            f"{sorted(cache.decode_skip)}")
    for i in range(config.n_layers):
        if i not in skip and cache.filled[i] != cache.n_positions:
            raise CacheConsistencyError(
                f"layer {i} cache holds {cache.filled[i]} of {cache.n_positions} "
                "previous positions")
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.shape[1] != 1:
        raise ShapeError(f"decode_step takes one token per sequence, got {tokens.shape}")
    return forward_full(config, weights, tokens, skip_set=skip, cache=cache,
                        project=project)


@dataclass(frozen=True)
class SamplerConfig:
    mode: str = "greedy"
    top_k: int = 10
    temperature: float = 0.8

    def __post_init__(self):
        if self.mode not in ("greedy", "topk"):
            raise ConfigError(f"sampler mode must be greedy or topk, got {self.mode!r}")
        if self.top_k < 1:
            raise ConfigError(f"top_k must be positive, got {self.top_k}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")


def sample_token(logits_row: np.ndarray, sampler: SamplerConfig,
                 rng: Optional[np.random.Generator]) -> int:
    row = np.asarray(logits_row, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(row)):
        raise NumericalError("non-finite logits reached the sampler")
    if sampler.mode == "greedy":
        return int(np.argmax(row))
    if rng is None:
        raise ConfigError("top-k sampling needs a random generator")
    k = min(sampler.top_k, row.size)
    top = np.argpartition(-row, k - 1)[:k]
    scaled = row[top] / sampler.temperature
    p = np.exp(scaled - scaled.max())
    p /= p.sum()
    return int(rng.choice(top, p=p))


@dataclass
class GenerationResult:
    tokens: list[int]
    decode_times: list[float] = field(default_factory=list)
    prefill_time: float = 0.0


def generate(config: ModelConfig, weights: ModelWeights, prompt_ids: Sequence[int],
             max_new_tokens: int, sampler: SamplerConfig = SamplerConfig(),
             skip_set: Sequence[int] = (), rng: Optional[np.random.Generator] = None,
             stop_at: Optional[int] = None, project=None,
             prefill_skip: Optional[Sequence[int]] = None) -> GenerationResult:
    """Autoregressive generation with a fixed skip set and per-step timing.

    ``skip_set`` governs decoding; ``prefill_skip`` defaults to the same set
    and can be passed as () to run a full prefill before skipped decoding.
    The first new token comes from the prefill logits; every later token is
    one timed decode step. ``decode_times`` therefore has one entry per
    generated token after the first.
    """
    if max_new_tokens < 1:
        raise ConfigError(f"max_new_tokens must be at least 1, got {max_new_tokens}")
    prompt = np.asarray(list(prompt_ids), dtype=np.int64)
    if prompt.size == 0:
        raise ShapeError("cannot generate from an empty prompt")
    skip = frozenset(int(i) for i in skip_set)
    pre_skip = skip if prefill_skip is None else frozenset(int(i) for i in prefill_skip)

    with T.no_grad():
        cache = KVCache(config, batch_size=1, decode_skip=skip)
        t0 = time.perf_counter()
        logits = forward_full(config, weights, prompt[None, :], skip_set=pre_skip,
                              cache=cache, project=project)
        prefill_time = time.perf_counter() - t0

        out: list[int] = []
        times: list[float] = []
        tok = sample_token(logits.data[0, -1], sampler, rng)
        out.append(tok)
        while len(out) < max_new_tokens and tok != stop_at \
                and cache.n_positions < config.max_seq:
            t0 = time.perf_counter()
            logits = decode_step(config, weights, np.array([[tok]]), cache, skip,
                                 project=project)
            tok = sample_token(logits.data[0, -1], sampler, rng)
            times.append(time.perf_counter() - t0)
            out.append(tok)
    return GenerationResult(tokens=out, decode_times=times, prefill_time=prefill_time)


def delete_layers(weights: ModelWeights, drop: Sequence[int]) -> ModelWeights:
    """A physically smaller model with the given layers removed."""
    drop_set = frozenset(int(i) for i in drop)
    kept = [lw for i, lw in enumerate(weights.layers) if i not in drop_set]
    if not kept:
        raise ConfigError("cannot delete every layer")
    cfg = weights.config
    new_cfg = ModelConfig(n_layers=len(kept), d_model=cfg.d_model,
                          n_heads=cfg.n_heads, d_ff=cfg.d_ff,
                          vocab_size=cfg.vocab_size, max_seq=cfg.max_seq)
    return ModelWeights(config=new_cfg, embedding=weights.embedding,
                        layers=kept, final_norm=weights.final_norm,
                        head=weights.head)
