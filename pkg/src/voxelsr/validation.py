"""Finite-difference verification suite for every operator and loss.

Two tiers:

* per-op checks (step 1e-5, tol 1e-6): each tensor op and loss term on a
  small dedicated instance, every entry probed;
* end-to-end checks (step 1e-6, tol 1e-5): the full training objective of
  each network variant with frozen weight noise, entries subsampled per
  parameter tensor.

Instances are conditioned away from non-smooth points (ReLU at 0 and the
KL clip at alpha = 1), which is the standard caveat of finite-difference
gradient checking; the clip behaviour itself is covered by unit tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import hetero_nll, mse_loss, total_objective, vardrop_kl
from .model import ArchConfig, forward_mean, init_params
from .tensor import (
    Tensor,
    conv3d,
    conv3d_vjp,
    finite_diff_check,
    relu,
    relu_vjp,
    shuffle3d,
    softplus,
    softplus_vjp,
    unshuffle3d,
)

__all__ = ["SuiteCheck", "gradient_suite"]

PER_OP_STEP = 1e-5
PER_OP_TOL = 1e-6
E2E_STEP = 1e-6
E2E_TOL = 1e-5


@dataclass
class SuiteCheck:
    name: str
    max_rel_err: float
    tol: float
    passed: bool
    detail: str = ""


def _rng(*key):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))


def _away_from_zero(rng, shape, lo=0.2, hi=1.0):
    """Random values with |x| in [lo, hi]: safe margins for ReLU-style kinks."""
    return rng.uniform(lo, hi, size=shape) * np.where(rng.random(shape) < 0.5, -1.0, 1.0)


def _run(fn, params, step, tol, max_entries=None) -> tuple:
    report = finite_diff_check(fn, params, step=step, tol=tol, max_entries=max_entries)
    return report.max_rel_err, report.passed


# ---------------------------------------------------------------------------
# per-op instances
# ---------------------------------------------------------------------------


def _check_conv3d(seed, kernel):
    rng = _rng(seed, 1)
    k = kernel
    x = Tensor(_away_from_zero(rng, (2, 5, 5, 5)))
    w = Tensor(rng.standard_normal((3, 2, k, k, k)) * 0.3)
    b = Tensor(rng.standard_normal(3) * 0.1)
    cot = rng.standard_normal((3, 6 - k, 6 - k, 6 - k))

    def fn(p):
        out = conv3d(p["input"], p["weights"], p["bias"]).data
        gx, gw, gb = conv3d_vjp(cot, p["input"], p["weights"])
        return float(np.sum(cot * out)), {"input": gx, "weights": gw, "bias": gb}

    return fn, {"input": x, "weights": w, "bias": b}


def _check_relu(seed):
    x = Tensor(_away_from_zero(_rng(seed, 2), (4, 4, 4)))
    cot = _rng(seed, 3).standard_normal((4, 4, 4))

    def fn(p):
        out = relu(p["x"]).data
        return float(np.sum(cot * out)), {"x": relu_vjp(cot, p["x"])}

    return fn, {"x": x}


def _check_softplus(seed):
    x = Tensor(_rng(seed, 4).uniform(-4.0, 4.0, size=(5, 5)))
    cot = _rng(seed, 5).standard_normal((5, 5))

    def fn(p):
        out = softplus(p["x"]).data
        return float(np.sum(cot * out)), {"x": softplus_vjp(cot, p["x"])}

    return fn, {"x": x}


def _check_shuffle(seed):
    r = 2
    x = Tensor(_rng(seed, 6).standard_normal((8, 2, 2, 2)))
    cot = _rng(seed, 7).standard_normal((1, 4, 4, 4))

    def fn(p):
        out = shuffle3d(p["x"], r).data
        return float(np.sum(cot * out)), {"x": unshuffle3d(cot, r).data}

    return fn, {"x": x}


def _check_mse(seed):
    rng = _rng(seed, 8)
    pred = Tensor(rng.standard_normal((3, 4, 4, 4)))
    target = rng.standard_normal((3, 4, 4, 4))

    def fn(p):
        val, g = mse_loss(p["pred"], target)
        return val, {"pred": g}

    return fn, {"pred": pred}


def _check_hetero(seed, term):
    rng = _rng(seed, 9)
    mu = Tensor(rng.standard_normal((2, 3, 3, 3)))
    sigma = Tensor(rng.uniform(0.5, 1.5, size=(2, 3, 3, 3)))
    target = rng.standard_normal((2, 3, 3, 3))

    def fn(p):
        m, h, g_mu, g_s = hetero_nll(p["mu"], p["sigma"], target)
        if term == "m":
            # isolate M: H's coupling to sigma removed
            g_s_only_m = g_s - 2.0 / p["sigma"].data
            return m, {"mu": g_mu, "sigma": g_s_only_m}
        if term == "h":
            return h, {"mu": np.zeros_like(g_mu), "sigma": 2.0 / p["sigma"].data}
        return m + h, {"mu": g_mu, "sigma": g_s}

    return fn, {"mu": mu, "sigma": sigma}


def _check_kl(seed, variant):
    cfg = ArchConfig(1, 1, variant)
    params = init_params(cfg, seed)
    tensors = {}
    for net in cfg.net_names():
        for li, layer in enumerate(params.nets[net]):
            rng = _rng(seed, 10, li)
            m = layer.weight.data
            # keep alpha in (0.05, 0.8): away from the clip at 1
            m[...] = _away_from_zero(rng, m.shape, lo=0.3, hi=1.0)
            alpha = rng.uniform(0.05, 0.8, size=layer.log_s2.data.shape)
            if cfg.vd_per_filter:
                m2 = np.mean(m.reshape(m.shape[0], -1) ** 2, axis=1)
            else:
                m2 = m**2
            layer.log_s2.data[...] = np.log(alpha * m2)
            tensors[f"{net}.{li}.weight"] = layer.weight
            tensors[f"{net}.{li}.log_s2"] = layer.log_s2

    def fn(p):
        kl, grads = vardrop_kl(params)
        out = {}
        for net in cfg.net_names():
            for li in range(3):
                g_m, g_ls = grads[(net, li)]
                out[f"{net}.{li}.weight"] = g_m
                out[f"{net}.{li}.log_s2"] = g_ls
        return kl, out

    return fn, tensors


# ---------------------------------------------------------------------------
# end-to-end composites
# ---------------------------------------------------------------------------


def _check_variant(variant, seed):
    cfg = ArchConfig(2, 1, variant)
    params = init_params(cfg, seed)
    if cfg.variational:
        # keep sampled weight shifts small so the sigma head stays far from
        # its floor (coherent per-filter noise can otherwise push the loss
        # to magnitudes where finite differences lose all resolution)
        for net in cfg.net_names():
            for layer in params.nets[net]:
                layer.log_s2.data.fill(-14.0)
    rng = _rng(seed, 20)
    n = 5
    b = 2
    lr = rng.standard_normal((b, 1, n, n, n))
    # targets near the initial prediction keep the loss O(1), so finite
    # differences retain resolution for the smallest parameter gradients
    base = np.stack([forward_mean(params, lr[i]).data for i in range(b)])
    hr = base + 0.05 * rng.standard_normal(base.shape)
    noise_seed = 1234

    tensors = dict(params.named_parameters())

    def fn(p):
        report = total_objective(
            params, lr, hr, seed=noise_seed, n_train=100, kl_scale=1.0 if cfg.variational else 0.0
        )
        grads = {name: t.grad.copy() for name, t in params.named_parameters()}
        return report.total, grads

    loss0, _ = fn(tensors)
    if abs(loss0) > 1e4:
        raise AssertionError(f"{variant} check instance is ill-conditioned: loss {loss0:g}")
    return fn, tensors


def gradient_suite(seed: int = 0, max_entries_e2e: int = 100, verbose: bool = False):
    """Run every gradient check; returns (lines, ok, checks)."""
    from .model import VARIANTS

    checks = []

    per_op = [
        ("op conv3d 3x3x3", *_check_conv3d(seed, 3)),
        ("op conv3d 1x1x1", *_check_conv3d(seed, 1)),
        ("op relu", *_check_relu(seed)),
        ("op softplus", *_check_softplus(seed)),
        ("op shuffle3d", *_check_shuffle(seed)),
        ("loss mse", *_check_mse(seed)),
        ("loss hetero M", *_check_hetero(seed, "m")),
        ("loss hetero H", *_check_hetero(seed, "h")),
        ("loss hetero M+H", *_check_hetero(seed, "mh")),
        ("loss kl vd1", *_check_kl(seed, "baseline+vd1")),
        ("loss kl vd2", *_check_kl(seed, "baseline+vd2")),
    ]
    for name, fn, tensors in per_op:
        err, ok = _run(fn, tensors, PER_OP_STEP, PER_OP_TOL)
        checks.append(SuiteCheck(name, err, PER_OP_TOL, ok))

    for variant in VARIANTS:
        fn, tensors = _check_variant(variant, seed)
        report = finite_diff_check(
            fn, tensors, step=E2E_STEP, tol=E2E_TOL, max_entries=max_entries_e2e, seed=seed
        )
        checks.append(
            SuiteCheck(
                f"composite {variant}",
                report.max_rel_err,
                E2E_TOL,
                report.passed,
                detail="; ".join(report.failures()),
            )
        )

    lines = []
    for c in checks:
        status = "PASS" if c.passed else f"FAIL ({c.detail})" if c.detail else "FAIL"
        lines.append(f"{c.name}: max rel err {c.max_rel_err:.3e} (tol {c.tol:g}) {status}")
    ok = all(c.passed for c in checks)
    lines.append(f"gradient suite: {'PASS' if ok else 'FAIL'}")
    return lines, ok, checks
