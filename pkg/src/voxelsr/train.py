"""ADAM optimization loop with validation-based model selection.

Serial-mode training is bitwise reproducible given (config, data, seed):
batch shuffling, weight-noise seeds and initialization all derive from
dedicated `SeedSequence` streams. The per-epoch validation score is the
data term only (MSE or M+H, never KL) evaluated deterministically at the
posterior means; the returned checkpoint is the epoch with the lowest
validation score.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .data import pairs_to_arrays, sample_patch_pairs, split_train_valid
from .errors import ConfigError, DataError, NonFiniteError
from .losses import hetero_nll, mse_loss, total_objective
from .model import (
    ArchConfig,
    ModelParams,
    NormStats,
    _forward_full,
    _sigma_norm_from_raw,
    init_params,
)

__all__ = ["TrainConfig", "AdamState", "adam_step", "train", "train_ensemble"]


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one training run."""

    variant: str = "baseline"
    r: int = 2
    lr: float = 1e-3
    epochs: int = 200
    batch_size: int = 32
    seed: int = 0
    kl_warmup_fraction: float = 0.1
    valid_fraction: float = 0.1
    ensemble_size: int = 1
    n_pairs: int = 4000
    include_exterior: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be > 0, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.valid_fraction < 1.0:
            raise ConfigError(f"validation fraction must be in (0,1), got {self.valid_fraction}")
        if not 0.0 <= self.kl_warmup_fraction <= 1.0:
            raise ConfigError("KL warm-up fraction must be in [0,1]")
        if self.ensemble_size < 1:
            raise ConfigError(f"ensemble size must be >= 1, got {self.ensemble_size}")


@dataclass
class AdamState:
    """First/second moment accumulators per parameter, plus the step count."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: ModelParams, state: AdamState, lr: float) -> None:
    """One bias-corrected ADAM update from the accumulated parameter grads.

    update = -lr * m_hat / (sqrt(v_hat) + eps). Raises `NonFiniteError`
    on non-finite gradients without touching the parameters.
    """
    named = list(params.named_parameters())
    for name, p in named:
        g = p.grad
        if g is None:
            raise ConfigError(f"parameter {name} has no gradient; run a backward pass first")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for name, p in named:
        g = p.grad
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def _norm_from_pairs(lr: np.ndarray, hr: np.ndarray) -> NormStats:
    def stats(a):
        flat = a.transpose(1, 0, 2, 3, 4).reshape(a.shape[1], -1)
        mean = flat.mean(axis=1)
        std = np.maximum(flat.std(axis=1), 1e-8)
        return mean, std

    in_mean, in_std = stats(lr)
    out_mean, out_std = stats(hr)
    return NormStats(in_mean, in_std, out_mean, out_std)


def _validation_data_term(params: ModelParams, lr: np.ndarray, hr: np.ndarray, batch: int) -> float:
    """Data term at the posterior means with frozen (absent) noise."""
    cfg = params.config
    total = 0.0
    n = lr.shape[0]
    sh = (-1, 1, 1, 1, 1)
    for i in range(0, n, batch):
        xb = np.ascontiguousarray(lr[i : i + batch].transpose(1, 2, 3, 4, 0))
        yb = hr[i : i + batch].transpose(1, 2, 3, 4, 0)
        y_norm = (yb - params.norm.out_mean.reshape(sh)) / params.norm.out_std.reshape(sh)
        state = _forward_full(params, xb, sample=None, keep_cache=False)
        k = xb.shape[-1]
        if cfg.hetero:
            sigma_n = _sigma_norm_from_raw(params, state["raw_scale"])
            mval, hval, _, _ = hetero_nll(state["mu_norm"], sigma_n, y_norm, patch_axis=-1)
            total += (mval + hval) * k
        else:
            mse, _ = mse_loss(state["mu_norm"], y_norm)
            total += mse * k
    return total / n


def train(config: TrainConfig, pairs: list):
    """Optimize one variant on patch pairs; returns (best params, epoch log).

    Mini-batches are reshuffled every epoch from a seeded stream; variational
    noise is resampled per batch with per-step seeds; the KL weight ramps
    linearly over the first `kl_warmup_fraction` of epochs. Divergence
    (non-finite loss or gradients) aborts and returns the best checkpoint
    seen so far, noted in the log.
    """
    if not pairs:
        raise DataError("training needs a non-empty pair list")
    train_pairs, valid_pairs = split_train_valid(pairs, 1.0 - config.valid_fraction, config.seed)
    lr_t, hr_t = pairs_to_arrays(train_pairs)
    lr_v, hr_v = pairs_to_arrays(valid_pairs)

    channels = lr_t.shape[1]
    arch = ArchConfig(config.r, channels, config.variant)
    n_input = lr_t.shape[2]
    want = arch.output_edge(n_input)
    if hr_t.shape[2] != want:
        raise DataError(
            f"HR patch edge {hr_t.shape[2]} does not match ((n-4)r) = {want}; wrong r for this data?"
        )

    params = init_params(arch, config.seed)
    params.norm = _norm_from_pairs(lr_t, hr_t)
    state = AdamState()
    n_train = lr_t.shape[0]
    warmup = max(1, int(round(config.kl_warmup_fraction * config.epochs))) if arch.variational else 1

    best = params.copy()
    best_val = np.inf
    log = []
    shuffle_rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence((config.seed, 90)))
    )
    aborted = None
    for epoch in range(config.epochs):
        kl_scale = min(1.0, (epoch + 1) / warmup) if arch.variational else 0.0
        order = shuffle_rng.permutation(n_train)
        sums: dict = {}
        total_sum = 0.0
        n_batches = 0
        try:
            for bi, i in enumerate(range(0, n_train, config.batch_size)):
                idx = order[i : i + config.batch_size]
                step_seed = int(
                    np.random.SeedSequence((config.seed, 91, epoch, bi)).generate_state(1)[0]
                )
                report = total_objective(
                    params,
                    lr_t[idx],
                    hr_t[idx],
                    seed=step_seed,
                    n_train=n_train,
                    kl_scale=kl_scale,
                )
                if not np.isfinite(report.total):
                    raise NonFiniteError(f"training loss diverged at epoch {epoch}, batch {bi}")
                adam_step(params, state, config.lr)
                total_sum += report.total
                for k, v in report.components.items():
                    sums[k] = sums.get(k, 0.0) + v
                n_batches += 1
        except NonFiniteError as exc:
            aborted = str(exc)

        entry = {"epoch": epoch}
        if n_batches:
            entry["train_total"] = total_sum / n_batches
            for k, v in sums.items():
                entry[f"train_{k}"] = v / n_batches
        val = _validation_data_term(params, lr_v, hr_v, config.batch_size)
        entry["valid"] = val
        if aborted is None and np.isfinite(val) and val <= best_val:
            best_val = val
            best = params.copy()
            entry["best"] = True
        if aborted is not None:
            entry["aborted"] = aborted
            log.append(entry)
            break
        log.append(entry)

    return best, log


def train_ensemble(config: TrainConfig, volumes: list):
    """Train `config.ensemble_size` members on independently re-sampled patch sets.

    Member k samples its own patches (seed stream split per member and per
    volume) and trains with its own seed; combine predictions with
    `infer.ensemble_combine`.
    """
    if not volumes:
        raise DataError("train_ensemble needs at least one volume")
    members = []
    for k in range(config.ensemble_size):
        member_seed = int(np.random.SeedSequence((config.seed, 70, k)).generate_state(1)[0])
        pairs = []
        per_vol = max(1, config.n_pairs // len(volumes))
        for vi, vol in enumerate(volumes):
            pairs.extend(
                sample_patch_pairs(
                    vol,
                    config.r,
                    per_vol,
                    seed=int(np.random.SeedSequence((config.seed, 71, k, vi)).generate_state(1)[0]),
                    include_exterior=config.include_exterior,
                    volume_id=vi,
                )
            )
        member_cfg = replace(config, seed=member_seed, ensemble_size=1)
        params, _ = train(member_cfg, pairs)
        members.append(params)
    return members
