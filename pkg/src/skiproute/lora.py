"""Low-rank adapters for the compensation fine-tune, with merge-to-base.

An adapter pairs A (rank x in_features) with B (out_features x rank); the
effective weight delta is scaling * B @ A where scaling = lora_alpha / rank.
B starts at zero, so a fresh adapter set leaves the model's output bitwise
unchanged. Merging folds every delta into the base matrices and retires the
set, which keeps a second merge from silently doubling the deltas.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .model import LayerWeights, ModelWeights, linear
from .tensor import Tensor

TARGET_NAMES = ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down")


@dataclass
class LoraAdapter:
    a: Tensor
    b: Tensor
    rank: int
    lora_alpha: float
    dropout_rate: float = 0.1

    @property
    def scaling(self) -> float:
        return self.lora_alpha / self.rank

    def delta(self) -> np.ndarray:
        """The dense weight update this adapter encodes."""
        return (self.scaling * (self.b.data @ self.a.data)).astype(self.b.dtype)


def _check_rank(rank: int, d_out: int, d_in: int) -> None:
    if rank < 1:
        raise ConfigError(f"adapter rank must be positive, got {rank}")
    if rank >= min(d_out, d_in):
        raise ConfigError(
            f"adapter rank {rank} is not low-rank for a {d_out}x{d_in} weight")


def make_adapter(d_out: int, d_in: int, rank: int, lora_alpha: float,
                 dropout_rate: float, rng: np.random.Generator,
                 dtype=np.float32) -> LoraAdapter:
    """A ~ normal(0, 0.02), B = 0: the initial delta is exactly zero."""
    _check_rank(rank, d_out, d_in)
    return LoraAdapter(
        a=Tensor(rng.normal(0.0, 0.02, size=(rank, d_in)).astype(dtype)),
        b=Tensor(np.zeros((d_out, rank), dtype=dtype)),
        rank=rank, lora_alpha=lora_alpha, dropout_rate=dropout_rate)


@dataclass
class AdapterSet:
    """Adapters keyed by (layer index, target matrix name)."""

    rank: int
    lora_alpha: float
    dropout_rate: float
    adapters: dict[tuple[int, str], LoraAdapter] = field(default_factory=dict)
    merged: bool = False

    def get(self, layer_index: int, name: str) -> Optional[LoraAdapter]:
        return self.adapters.get((layer_index, name))

    def items(self) -> Iterator[tuple[tuple[int, str], LoraAdapter]]:
        yield from sorted(self.adapters.items())

    def parameters(self) -> list[Tensor]:
        out = []
        for _, ad in self.items():
            out.extend((ad.a, ad.b))
        return out

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag


def init_adapters(weights: ModelWeights, rank: int = 8, lora_alpha: float = 32.0,
                  dropout_rate: float = 0.1,
                  rng: Optional[np.random.Generator] = None) -> AdapterSet:
    """One adapter per attention and FFN matrix of every layer."""
    if rng is None:
        rng = np.random.default_rng(0)
    if not 0.0 <= dropout_rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {dropout_rate}")
    adapters = {}
    for i, lw in enumerate(weights.layers):
        for name, w in lw.matrices():
            d_out, d_in = w.shape
            adapters[(i, name)] = make_adapter(
                d_out, d_in, rank, lora_alpha, dropout_rate, rng, dtype=w.dtype)
    return AdapterSet(rank=rank, lora_alpha=lora_alpha,
                      dropout_rate=dropout_rate, adapters=adapters)


def adapted_matmul(x: Tensor, base_weight: Tensor, adapter: LoraAdapter,
                   training: bool = False,
                   rng: Optional[np.random.Generator] = None) -> Tensor:
    """x @ W.T plus the scaled low-rank path, dropout on that path only."""
    d_out, d_in = base_weight.shape
    _check_rank(adapter.rank, d_out, d_in)
    if adapter.a.shape != (adapter.rank, d_in) or adapter.b.shape != (d_out, adapter.rank):
        raise ShapeError(
            f"adapter shapes {adapter.a.shape}/{adapter.b.shape} do not fit a "
            f"{d_out}x{d_in} weight at rank {adapter.rank}")
    base = linear(x, base_weight)
    xa = x
    if training and adapter.dropout_rate > 0.0:
        if rng is None:
            raise ConfigError("adapter dropout in training mode needs a generator")
        keep = 1.0 - adapter.dropout_rate
        mask = (rng.random(x.shape) < keep).astype(x.dtype.type) / x.dtype.type(keep)
        xa = T.mul(x, Tensor(mask))
    low = T.matmul(T.matmul(xa, T.transpose(adapter.a, (1, 0))),
                   T.transpose(adapter.b, (1, 0)))
    return T.add(base, T.scale(low, adapter.scaling))


def adapted_project(adapters: AdapterSet, training: bool = False,
                    rng: Optional[np.random.Generator] = None):
    """A projection hook for the model forward that applies matching adapters."""

    def project(x: Tensor, w: Tensor, layer_index: int, name: str) -> Tensor:
        ad = adapters.get(layer_index, name)
        if ad is None:
            return linear(x, w)
        return adapted_matmul(x, w, ad, training=training, rng=rng)

    return project


def merge(weights: ModelWeights, adapters: AdapterSet) -> ModelWeights:
    """Fold every adapter delta into its base matrix: W <- W + scaling * B @ A.

    Returns a new ModelWeights (norms, embedding and head shared with the
    input). The adapter set is consumed; merging it twice raises.
    """
    if adapters.merged:
        raise ConfigError("adapter set was already merged; deltas would double")
    new_layers = []
    for i, lw in enumerate(weights.layers):
        updated = {}
        for name, w in lw.matrices():
            ad = adapters.get(i, name)
            if ad is None:
                updated[name] = w
                continue
            if ad.delta().shape != w.shape:
                raise ShapeError(
                    f"adapter delta {ad.delta().shape} does not match "
                    f"layer {i} {name} {w.shape}")
            updated[name] = Tensor(w.data + ad.delta())
        new_layers.append(LayerWeights(
            **updated, attn_norm=lw.attn_norm, ffn_norm=lw.ffn_norm))
    adapters.merged = True
    return ModelWeights(config=weights.config, embedding=weights.embedding,
                        layers=new_layers, final_norm=weights.final_norm,
                        head=weights.head)
