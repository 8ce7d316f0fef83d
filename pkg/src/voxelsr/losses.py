"""Training objectives with exact gradients.

Three building blocks: plain MSE (isotropic Gaussian likelihood),
the heteroscedastic negative log-likelihood split into its
covariance-weighted squared-error part ``M`` and log-determinant part
``H``, and the variational-dropout KL regularizer (cubic polynomial
approximation in the dropout rate ``alpha = s^2 / m^2``, clipped to
``alpha <= 1``). `total_objective` composes them per variant and routes
gradients into the parameter grad buffers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeMismatchError
from .model import ModelParams, _backward_full, _forward_full, _sigma_norm_from_raw, sample_weights
from .tensor import _arr

__all__ = ["LossReport", "mse_loss", "hetero_nll", "vardrop_kl", "total_objective"]

# cubic negative-KL polynomial coefficients for variational dropout
KL_C1 = 1.16145124
KL_C2 = -1.50204118
KL_C3 = 0.58629921

_EPS_M2 = 1e-12  # guards alpha = s^2 / (m^2 + eps) against m == 0


def mse_loss(pred, target):
    """Mean over all components of squared error; returns (value, grad_pred)."""
    p, t = _arr(pred), _arr(target)
    if p.shape != t.shape:
        raise ShapeMismatchError(f"pred shape {p.shape} != target shape {t.shape}")
    diff = p - t
    n = diff.size
    return float(np.mean(diff * diff)), 2.0 * diff / n


def hetero_nll(mu, sigma_diag, target, patch_axis: int | None = None):
    """Diagonal-covariance Gaussian NLL split into (M, H).

    ``M`` is the mean over patches of the covariance-weighted squared error
    ``sum_d (y_d - mu_d)^2 / sigma_d^2`` and ``H`` the mean over patches of
    ``sum_d log sigma_d^2``. With `patch_axis=None` the whole array is one
    patch; otherwise that axis indexes patches. Returns
    ``(M, H, grad_mu, grad_sigma)``.
    """
    m, s, t = _arr(mu), _arr(sigma_diag), _arr(target)
    if not (m.shape == s.shape == t.shape):
        raise ShapeMismatchError(
            f"mu {m.shape}, sigma {s.shape} and target {t.shape} must have equal shapes"
        )
    if np.any(s <= 0.0):
        raise ValueError("sigma_diag must be strictly positive")
    b = 1 if patch_axis is None else m.shape[patch_axis]
    r = t - m
    s2 = s * s
    mval = float(np.sum(r * r / s2) / b)
    hval = float(2.0 * np.sum(np.log(s)) / b)
    g_mu = -2.0 * r / s2 / b
    g_sigma = (-2.0 * r * r / (s2 * s) + 2.0 / s) / b
    return mval, hval, g_mu, g_sigma


def _layer_alpha(layer, per_filter: bool):
    m = layer.weight.data
    s2 = np.exp(layer.log_s2.data)
    if per_filter:
        m2 = np.mean(m.reshape(m.shape[0], -1) ** 2, axis=1)
    else:
        m2 = m * m
    return s2 / (m2 + _EPS_M2), m2, s2


def vardrop_kl(params: ModelParams):
    """KL penalty of the factored Gaussian posterior, plus exact gradients.

    One term per weight (vd1) or per output filter (vd2):
    ``-(0.5 log a + c1 a + c2 a^2 + c3 a^3)`` with ``a = s^2 / m^2`` clipped
    to ``(0, 1]`` (gradients vanish in the clipped region). Returns
    ``(kl, grads)`` with ``grads[(net, layer)] = (grad_m, grad_log_s2)``.
    """
    cfg = params.config
    if not cfg.variational:
        raise ConfigError(f"vardrop_kl requires a variational variant, got {cfg.variant!r}")
    total = 0.0
    grads = {}
    for net in cfg.net_names():
        for li, layer in enumerate(params.nets[net]):
            alpha_raw, m2, _ = _layer_alpha(layer, cfg.vd_per_filter)
            clipped = alpha_raw > 1.0
            a = np.minimum(alpha_raw, 1.0)
            total += float(np.sum(-(0.5 * np.log(a) + KL_C1 * a + KL_C2 * a**2 + KL_C3 * a**3)))
            dk_da = -(0.5 / a + KL_C1 + 2.0 * KL_C2 * a + 3.0 * KL_C3 * a**2)
            dk_da = np.where(clipped, 0.0, dk_da)
            g_log_s2 = dk_da * a
            m = layer.weight.data
            if cfg.vd_per_filter:
                n_f = m[0].size
                g_m = (dk_da * a / (m2 + _EPS_M2) * (2.0 / n_f))[:, None, None, None, None] * -m
            else:
                g_m = dk_da * a * (-2.0 * m / (m2 + _EPS_M2))
            grads[(net, li)] = (g_m, g_log_s2)
    return total, grads


@dataclass
class LossReport:
    """One objective evaluation: total, per-term values, patch count."""

    total: float
    components: dict
    n_patches: int

    def __post_init__(self):
        if not np.isfinite(self.total):
            return  # callers decide how to handle divergence
        if abs(self.total - sum(self.components.values())) > 1e-9 * max(1.0, abs(self.total)):
            raise ValueError("LossReport total does not match the sum of its components")


def total_objective(
    params: ModelParams,
    lr_batch,
    hr_batch,
    *,
    seed: int = 0,
    n_train: int | None = None,
    kl_scale: float = 1.0,
    zero_grad: bool = True,
) -> LossReport:
    """Variant-dispatched objective on a batch of aligned patch pairs.

    `lr_batch` is ``(B, c, n, n, n)`` and `hr_batch` ``(B, c, (n-4)r, ...)``.
    Baseline variants use the MSE; hetero variants use ``M + H``; variational
    variants add ``kl_scale * KL / n_train`` with weight noise frozen by
    `seed`. The loss is computed in normalized space and its gradients are
    accumulated into the parameter grad buffers.
    """
    cfg = params.config
    lr = _arr(lr_batch)
    hr = _arr(hr_batch)
    if lr.ndim != 5 or hr.ndim != 5:
        raise ShapeMismatchError("batches must be 5-D (B, c, d, h, w)")
    if lr.shape[0] != hr.shape[0]:
        raise ShapeMismatchError(f"LR batch has {lr.shape[0]} patches, HR batch {hr.shape[0]}")
    want = cfg.output_edge(lr.shape[2])
    if hr.shape[2:] != (want, want, want):
        raise ShapeMismatchError(
            f"HR patch dims {hr.shape[2:]} do not match ((n-4)r)^3 = {want}^3 for n={lr.shape[2]}"
        )
    if cfg.variational and not n_train:
        raise ConfigError("variational variants need n_train to scale the KL term")

    if zero_grad:
        params.zero_grad()
    xb = np.ascontiguousarray(lr.transpose(1, 2, 3, 4, 0))
    yb = hr.transpose(1, 2, 3, 4, 0)
    sh = (-1, 1, 1, 1, 1)
    y_norm = (yb - params.norm.out_mean.reshape(sh)) / params.norm.out_std.reshape(sh)
    b = lr.shape[0]

    sample = sample_weights(params, seed) if cfg.variational else None
    state = _forward_full(params, xb, sample, keep_cache=True)

    if cfg.hetero:
        sigma_n = _sigma_norm_from_raw(params, state["raw_scale"])
        mval, hval, g_mu, g_sigma = hetero_nll(state["mu_norm"], sigma_n, y_norm, patch_axis=-1)
        components = {"mahalanobis": mval, "entropy": hval}
        data_term = mval + hval
        _backward_full(params, state, g_mu, g_sigma)
    else:
        mse, g_mu = mse_loss(state["mu_norm"], y_norm)
        components = {"mse": mse}
        data_term = mse
        _backward_full(params, state, g_mu)

    kl_term = 0.0
    if cfg.variational:
        kl, kl_grads = vardrop_kl(params)
        w = kl_scale / n_train
        kl_term = w * kl
        for net in cfg.net_names():
            for li, layer in enumerate(params.nets[net]):
                g_m, g_ls = kl_grads[(net, li)]
                layer.weight.add_grad(w * g_m)
                layer.log_s2.add_grad(w * g_ls)
        components["kl"] = kl_term

    return LossReport(total=data_term + kl_term, components=components, n_patches=b)
