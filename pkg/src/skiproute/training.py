"""The three-term loss and the training loops for every phase.

Phase 1 trains the routers through the soft forward with the base model
frozen; Phase 2 trains low-rank adapters with the routers frozen and the
skip penalty divided down. A plain language-modeling loop is also provided
to give the toy model something worth skipping layers of. All three share
one engine: Adam with cosine-decayed learning rate, gradient accumulation,
periodic validation, and patience-based early stopping on validation
cross entropy alone.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import model as M
from . import router as R
from . import tensor as T
from .data import Batch, Pair, encode_batch, iter_minibatches, seeded_streams
from .errors import ConfigError, DatasetError, NumericalError
from .lora import AdapterSet, adapted_project
from .model import ModelConfig, ModelWeights
from .router import RouterBank
from .tensor import Tensor
from .tokenizer import frame_prompt


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.01
    alpha: float = 0.0
    lr_min: float = 1e-4
    lr_max: float = 3e-4
    schedule: str = "cosine"
    accum_steps: int = 5
    patience: int = 4
    max_epochs: int = 50
    batch_size: int = 16
    max_seq: int = 256
    eval_every: int = 50
    seed: int = 0
    phase2_divisor: float = 3.0

    def __post_init__(self):
        if self.lam < 0 or self.alpha < 0:
            raise ConfigError("loss coefficients must be non-negative")
        if self.patience < 1:
            raise ConfigError(f"patience must be at least 1, got {self.patience}")
        if self.accum_steps < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("accumulation, batch size and eval cadence must be positive")
        if not 0 <= self.lr_min <= self.lr_max:
            raise ConfigError(f"bad learning-rate bounds [{self.lr_min}, {self.lr_max}]")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.max_epochs < 1:
            raise ConfigError("need at least one epoch")
        if self.phase2_divisor <= 0:
            raise ConfigError("phase-2 penalty divisor must be positive")


def cosine_lr(step: int, total_steps: int, lr_min: float, lr_max: float) -> float:
    """lr_max at step 0 decaying to lr_min at the final step."""
    t = min(step, total_steps) / max(total_steps, 1)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t))


class Adam:
    """Adaptive-moment optimizer over an explicit parameter list."""

    def __init__(self, params: Sequence[Tensor], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        if not self.params:
            raise ConfigError("optimizer needs at least one parameter")
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            p.data -= (lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass(frozen=True)
class LossBreakdown:
    """The loss and its three ingredients, kept on the tape for backward."""

    ce: Tensor
    reg: Tensor
    pp: Tensor
    total: Tensor
    lam: float
    alpha_eff: float

    def verify(self) -> None:
        want = self.ce.item() + self.lam * self.reg.item() + self.alpha_eff * self.pp.item()
        if not math.isfinite(self.total.item()):
            raise NumericalError(
                f"non-finite loss: ce={self.ce.item()}, reg={self.reg.item()}, "
                f"pp={self.pp.item()}")
        if abs(self.total.item() - want) > 1e-6:
            raise NumericalError(
                f"loss decomposition broke: total={self.total.item()} vs {want}")


def loss_total(logits: Tensor, targets: np.ndarray, ignore_mask: np.ndarray,
               routers: Optional[RouterBank], rhos: Sequence[Tensor],
               lam: float, alpha_eff: float) -> LossBreakdown:
    """ce on unmasked targets + lam * router l2 + alpha_eff * summed rho."""
    ce = T.cross_entropy(logits, targets, ignore_mask)
    if routers is not None:
        reg = T.parameters_norm_sq(routers.parameters())
    else:
        reg = Tensor(np.zeros((), dtype=ce.dtype))
    if rhos:
        pp = rhos[0]
        for r in rhos[1:]:
            pp = T.add(pp, r)
    else:
        pp = Tensor(np.zeros((), dtype=ce.dtype))
    total = T.add(ce, T.add(T.scale(reg, lam), T.scale(pp, alpha_eff)))
    return LossBreakdown(ce=ce, reg=reg, pp=pp, total=total,
                         lam=lam, alpha_eff=alpha_eff)


def _ignore_mask(batch: Batch) -> np.ndarray:
    # targets are tokens[:, 1:]; keep only response and EOS targets
    return (batch.response_mask[:, 1:] == 0).astype(np.uint8)


@dataclass(frozen=True)
class TrainLogRow:
    step: int
    ce: float
    reg: float
    pp: float
    total: float
    val_ce: float
    mean_rho: tuple[float, ...]


@dataclass
class TrainResult:
    rows: list[TrainLogRow]
    steps: int
    stopped_early: bool
    best_val_ce: float


def write_train_log(path: str, rows: Sequence[TrainLogRow]) -> None:
    n_layers = len(rows[0].mean_rho) if rows else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "ce", "reg", "pp", "total", "val_ce"]
                   + [f"rho_{i}" for i in range(n_layers)])
        for r in rows:
            w.writerow([r.step, r.ce, r.reg, r.pp, r.total, r.val_ce, *r.mean_rho])


def _val_batches(pairs: Sequence[Pair], tc: TrainConfig) -> list[Batch]:
    return [encode_batch(pairs[lo:lo + tc.batch_size], tc.max_seq)
            for lo in range(0, len(pairs), tc.batch_size)]


def _run_loop(batch_loss: Callable[[Batch], tuple[LossBreakdown, tuple[float, ...]]],
              val_ce: Callable[[], float], params: Sequence[Tensor],
              train_pairs: Sequence[Pair], tc: TrainConfig, n_layers: int,
              stop_check: Optional[Callable[[], bool]] = None) -> TrainResult:
    """Shared engine: accumulate, step, evaluate, stop on stale validation."""
    if not train_pairs:
        raise DatasetError("training set is empty")
    opt = Adam(params)
    shuffle_rng = seeded_streams(tc.seed, ["shuffle", "dropout"])["shuffle"]
    per_epoch = math.ceil(len(train_pairs) / tc.batch_size)
    total_opt_steps = max(1, per_epoch * tc.max_epochs // tc.accum_steps)

    rows: list[TrainLogRow] = []
    window = np.zeros(4)
    window_rho = np.zeros(n_layers)
    window_n = 0
    micro = 0
    opt_steps = 0
    best_val = math.inf
    stale = 0
    stopped = False

    def evaluate() -> None:
        nonlocal best_val, stale, stopped, window_n
        v = val_ce()
        if not math.isfinite(v):
            raise NumericalError(f"non-finite validation loss at step {opt_steps}")
        n = max(window_n, 1)
        rows.append(TrainLogRow(
            step=opt_steps, ce=window[0] / n, reg=window[1] / n,
            pp=window[2] / n, total=window[3] / n, val_ce=v,
            mean_rho=tuple(window_rho / n)))
        window[:] = 0.0
        window_rho[:] = 0.0
        window_n = 0
        if v < best_val:
            best_val = v
            stale = 0
        else:
            stale += 1
            if stale >= tc.patience:
                stopped = True
        if stop_check is not None and stop_check():
            stopped = True

    for _ in range(tc.max_epochs):
        for batch in iter_minibatches(train_pairs, tc.batch_size, shuffle_rng, tc.max_seq):
            bd, rho_vals = batch_loss(batch)
            bd.verify()
            window[:] += (bd.ce.item(), bd.reg.item(), bd.pp.item(), bd.total.item())
            if rho_vals:
                window_rho += np.asarray(rho_vals)
            window_n += 1
            bd.total.backward(np.asarray(1.0 / tc.accum_steps, dtype=bd.total.dtype))
            micro += 1
            if micro % tc.accum_steps == 0:
                lr = (cosine_lr(opt_steps, total_opt_steps, tc.lr_min, tc.lr_max)
                      if tc.schedule == "cosine" else tc.lr_max)
                opt.step(lr)
                opt.zero_grad()
                opt_steps += 1
                if opt_steps % tc.eval_every == 0:
                    evaluate()
                    if stopped:
                        break
        if stopped:
            break
    if not stopped and (not rows or rows[-1].step != opt_steps):
        evaluate()
    return TrainResult(rows=rows, steps=opt_steps, stopped_early=stopped,
                       best_val_ce=best_val)


def _mean_val_ce(batches: Sequence[Batch],
                 logits_fn: Callable[[Batch], Tensor]) -> float:
    """Cross entropy over all response positions, weighted exactly."""
    total, count = 0.0, 0
    with T.no_grad():
        for b in batches:
            n_kept = int(b.response_mask[:, 1:].sum())
            if n_kept == 0:
                continue
            ce = T.cross_entropy(logits_fn(b), b.tokens[:, 1:], _ignore_mask(b))
            total += ce.item() * n_kept
            count += n_kept
    if count == 0:
        raise DatasetError("validation set has no response tokens")
    return total / count


def train_model(config: ModelConfig, weights: ModelWeights,
                train_pairs: Sequence[Pair], val_pairs: Sequence[Pair],
                tc: TrainConfig,
                accuracy_fn: Optional[Callable[[], float]] = None,
                target_accuracy: Optional[float] = None,
                log_path: Optional[str] = None) -> TrainResult:
    """Plain language-model training of the base weights (no routers).

    Optionally stops once ``accuracy_fn`` reaches ``target_accuracy``; the
    check runs at every validation point.
    """
    weights.set_requires_grad(True)
    val_batches = _val_batches(val_pairs, tc)

    def batch_loss(b: Batch):
        logits = M.forward_full(config, weights, b.tokens[:, :-1],
                                attn_mask=b.attn[:, :-1])
        bd = loss_total(logits, b.tokens[:, 1:], _ignore_mask(b),
                        None, (), 0.0, 0.0)
        # every layer runs in plain training; log that fact in the rho columns
        return bd, tuple(1.0 for _ in range(config.n_layers))

    def val_ce():
        return _mean_val_ce(val_batches, lambda b: M.forward_full(
            config, weights, b.tokens[:, :-1], attn_mask=b.attn[:, :-1]))

    stop_check = None
    if accuracy_fn is not None and target_accuracy is not None:
        def stop_check():
            with T.no_grad():
                return accuracy_fn() >= target_accuracy

    try:
        result = _run_loop(batch_loss, val_ce, list(weights.parameters()),
                           train_pairs, tc, config.n_layers, stop_check)
    finally:
        weights.set_requires_grad(False)
    if log_path:
        write_train_log(log_path, result.rows)
    return result


def train_routers(config: ModelConfig, weights: ModelWeights, routers: RouterBank,
                  train_pairs: Sequence[Pair], val_pairs: Sequence[Pair],
                  tc: TrainConfig,
                  log_path: Optional[str] = None,
                  stop_check: Optional[Callable[[], bool]] = None) -> TrainResult:
    """Phase 1: routers learn through the soft forward; the model is frozen.

    ``stop_check`` runs at every evaluation point; returning True ends the
    run early (used by budget tuning to stop once a skip target is met).
    """
    weights.set_requires_grad(False)
    routers.set_requires_grad(True)
    val_batches = _val_batches(val_pairs, tc)

    def batch_loss(b: Batch):
        logits, rhos = R.soft_forward(config, weights, routers, b.tokens[:, :-1],
                                      attn_mask=b.attn[:, :-1],
                                      router_mask=b.prompt_mask[:, :-1])
        bd = loss_total(logits, b.tokens[:, 1:], _ignore_mask(b),
                        routers, rhos, tc.lam, tc.alpha)
        return bd, tuple(r.item() for r in rhos)

    def val_ce():
        return _mean_val_ce(val_batches, lambda b: R.soft_forward(
            config, weights, routers, b.tokens[:, :-1],
            attn_mask=b.attn[:, :-1], router_mask=b.prompt_mask[:, :-1])[0])

    try:
        result = _run_loop(batch_loss, val_ce, routers.parameters(),
                           train_pairs, tc, config.n_layers, stop_check)
    finally:
        routers.set_requires_grad(False)
    if log_path:
        write_train_log(log_path, result.rows)
    return result


def measure_skip_fraction(config: ModelConfig, weights: ModelWeights,
                          routers: RouterBank, pairs: Sequence[Pair],
                          project=None) -> float:
    """Mean fraction of layers the frozen prefill decision drops over pairs."""
    if not pairs:
        raise DatasetError("need at least one probe pair")
    total = 0.0
    for prompt, _ in pairs:
        _, _, decision = R.prefill(config, weights, routers,
                                   np.asarray(frame_prompt(prompt)),
                                   project=project)
        total += decision.skip_fraction
    return total / len(pairs)


def mean_hidden_per_layer(config: ModelConfig, weights: ModelWeights,
                          pairs: Sequence[Pair], max_seq: int) -> np.ndarray:
    """Per-layer average of what each router reads: the prompt-pooled hidden
    state entering the layer, averaged again over a calibration set."""
    if not pairs:
        raise DatasetError("need at least one calibration pair")
    batch = encode_batch(pairs, max_seq)
    toks = batch.tokens[:, :-1]
    pmask = batch.prompt_mask[:, :-1].astype(np.float64)
    counts = np.maximum(pmask.sum(axis=1), 1.0)[:, None]
    out = np.zeros((config.n_layers, config.d_model))
    with T.no_grad():
        h = T.embedding(weights.embedding, toks)
        positions = np.arange(toks.shape[1])
        for i in range(config.n_layers):
            pooled = (h.data * pmask[:, :, None]).sum(axis=1) / counts
            out[i] = pooled.mean(axis=0)
            h = M.layer_forward(config, weights, i, h, batch.attn[:, :-1],
                                None, positions, None)
    return out


def warm_start_routers(config: ModelConfig, weights: ModelWeights,
                       pairs: Sequence[Pair], max_seq: int,
                       target_logit: float = 0.4,
                       norm_cap: float = 3.0) -> RouterBank:
    """A bank whose probabilities start decisively above the pass threshold.

    Zero weights put every router exactly at the threshold, where the first
    optimizer step decides every layer's fate at once. Aligning each weight
    vector with the calibration-set mean of its input raises the initial
    probabilities to roughly ``sigmoid(target_logit)``, so the skip penalty
    must carry a layer across the threshold against whatever gradient the
    data provides, one layer at a time. Weight norms are capped so layers
    with faint inputs do not start with outsized vectors.
    """
    if target_logit <= 0.0:
        raise ConfigError(f"target logit must be positive, got {target_logit}")
    if norm_cap <= 0.0:
        raise ConfigError(f"norm cap must be positive, got {norm_cap}")
    means = mean_hidden_per_layer(config, weights, pairs, max_seq)
    routers = R.init_routers(config)
    for i in range(config.n_layers):
        norm = float(np.linalg.norm(means[i]))
        if norm == 0.0:
            continue
        scale = min(target_logit / (norm * norm), norm_cap / norm)
        routers[i].weight.data[:] = (means[i] * scale).astype(
            routers[i].weight.dtype)
    return routers


@dataclass(frozen=True)
class BandTuneResult:
    """Outcome of budget tuning: the bank that landed in the band."""

    routers: RouterBank
    train: TrainResult
    skip_fraction: float
    attempts: int


def tune_routers_to_band(config: ModelConfig, weights: ModelWeights,
                         train_pairs: Sequence[Pair], val_pairs: Sequence[Pair],
                         tc: TrainConfig, probe_pairs: Sequence[Pair],
                         band: tuple[float, float] = (0.15, 0.25),
                         max_attempts: int = 5,
                         warm_target_logit: float = 0.4,
                         warm_norm_cap: float = 3.0,
                         log_path: Optional[str] = None) -> BandTuneResult:
    """Train warm-started routers until the skip fraction first enters band.

    The skip penalty pushes routers downward at a rate the optimizer largely
    normalizes away, so a moderate budget is a point the training trajectory
    passes through rather than an equilibrium the loss settles at. Each
    attempt starts from a calibrated warm start (every probability decisively
    above the pass threshold), trains under the usual Phase 1 loss, and
    probes the frozen prefill decision on ``probe_pairs`` after every
    optimizer step, stopping the moment the mean skip fraction reaches the
    lower band edge. An attempt that lands past the upper edge jumped the
    band between probes and is retried from scratch at half the learning
    rate; one that never reaches the band gets its epoch budget doubled.
    """
    lo, hi = band
    if not 0.0 <= lo < hi <= 1.0:
        raise ConfigError(f"skip band must satisfy 0 <= lo < hi <= 1, got {band}")
    if max_attempts < 1:
        raise ConfigError("need at least one attempt")

    lr_min, lr_max, epochs = tc.lr_min, tc.lr_max, tc.max_epochs
    for attempt in range(1, max_attempts + 1):
        routers = warm_start_routers(config, weights, train_pairs, tc.max_seq,
                                     target_logit=warm_target_logit,
                                     norm_cap=warm_norm_cap)
        tc_try = replace(tc, lr_min=lr_min, lr_max=lr_max, max_epochs=epochs,
                         eval_every=1, patience=10 ** 9)

        def reached_band() -> bool:
            return measure_skip_fraction(config, weights, routers,
                                         probe_pairs) >= lo

        result = train_routers(config, weights, routers, train_pairs,
                               val_pairs, tc_try, log_path=log_path,
                               stop_check=reached_band)
        fraction = measure_skip_fraction(config, weights, routers, probe_pairs)
        if lo <= fraction <= hi:
            return BandTuneResult(routers=routers, train=result,
                                  skip_fraction=fraction, attempts=attempt)
        if fraction > hi:
            lr_min, lr_max = lr_min / 2, lr_max / 2
        else:
            epochs *= 2
    raise ConfigError(f"router tuning missed the skip band {band} "
                      f"in {max_attempts} attempts")


def train_lora(config: ModelConfig, weights: ModelWeights, routers: RouterBank,
               adapters: AdapterSet, train_pairs: Sequence[Pair],
               val_pairs: Sequence[Pair], tc: TrainConfig,
               log_path: Optional[str] = None) -> TrainResult:
    """Phase 2: adapters compensate; routers and base weights are frozen.

    The skip penalty keeps its pressure direction but is divided by the
    configured factor (default 3).
    """
    weights.set_requires_grad(False)
    routers.set_requires_grad(False)
    adapters.set_requires_grad(True)
    alpha_eff = tc.alpha / tc.phase2_divisor
    dropout_rng = seeded_streams(tc.seed, ["shuffle", "dropout"])["dropout"]
    train_project = adapted_project(adapters, training=True, rng=dropout_rng)
    eval_project = adapted_project(adapters)
    val_batches = _val_batches(val_pairs, tc)

    def batch_loss(b: Batch):
        logits, rhos = R.soft_forward(config, weights, routers, b.tokens[:, :-1],
                                      attn_mask=b.attn[:, :-1],
                                      router_mask=b.prompt_mask[:, :-1],
                                      project=train_project)
        bd = loss_total(logits, b.tokens[:, 1:], _ignore_mask(b),
                        routers, rhos, tc.lam, alpha_eff)
        return bd, tuple(r.item() for r in rhos)

    def val_ce():
        return _mean_val_ce(val_batches, lambda b: R.soft_forward(
            config, weights, routers, b.tokens[:, :-1],
            attn_mask=b.attn[:, :-1], router_mask=b.prompt_mask[:, :-1],
            project=eval_project)[0])

    try:
        result = _run_loop(batch_loss, val_ce, adapters.parameters(),
                           train_pairs, tc, config.n_layers)
    finally:
        adapters.set_requires_grad(False)
    if log_path:
        write_train_log(log_path, result.rows)
    return result
