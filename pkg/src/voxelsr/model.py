"""Network variants: plain subpixel SR, heteroscedastic twin, and Bayesian versions.

All variants share one fully convolutional trunk operating in LR space,
``conv 3^3 x50 -> ReLU -> conv 1^3 x100 -> ReLU -> conv 3^3 x(r^3 c) -> shuffle``,
so an ``n^3`` input yields an ``((n-4) r)^3`` output and the receptive field
of one ``r^3`` output block is ``5^3``. The heteroscedastic variants run a
second, independently parameterized trunk whose shuffled output is passed
through a softplus to produce per-component standard deviations. Bayesian
("vd") variants keep a factored Gaussian over each trunk's weights: per-weight
means and log-variances ("vd1") or one log-variance shared per output filter
("vd2"). Biases stay point estimates.

Inputs and targets are z-scored per channel with statistics frozen into
`ModelParams`; public forward passes denormalize on the way out.

Checkpoint container format (all integers little-endian)
--------------------------------------------------------
``u64 json_len`` | UTF-8 JSON metadata (arch, variant, normalization stats,
training manifest) | ``u32 blob_count`` | per blob: ``u16 name_len``, name
(UTF-8), ``u8 ndim``, ``ndim x u32`` dims, raw float64 data | ``u32 CRC32``
of every preceding byte.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, ShapeMismatchError
from .tensor import (
    Tensor,
    _arr,
    _conv3d_bwd,
    _conv3d_fwd,
    _split_batch,
    check_finite,
    shuffle3d,
    softplus,
    softplus_vjp,
    unshuffle3d,
)

__all__ = [
    "VARIANTS",
    "SIGMA_FLOOR",
    "ArchConfig",
    "NormStats",
    "LayerParams",
    "ModelParams",
    "HeteroOutput",
    "WeightSample",
    "init_params",
    "sample_weights",
    "forward_mean",
    "forward_hetero",
    "forward_stochastic",
    "save_checkpoint",
    "load_checkpoint",
]

VARIANTS = ("baseline", "hetero", "baseline+vd1", "baseline+vd2", "hetero+vd1", "hetero+vd2")

#: Standard-deviation floor added to the covariance head, in denormalized units.
SIGMA_FLOOR = 1e-6

#: Initial per-weight log-variance for Bayesian variants (near-deterministic start).
LOG_S2_INIT = -10.0

_RECEPTIVE = 5  # LR receptive-field edge of the composite network


@dataclass(frozen=True)
class ArchConfig:
    """Architecture selector: upsampling factor, channels per voxel, variant."""

    r: int
    channels: int
    variant: str = "baseline"

    def __post_init__(self):
        if self.r < 1:
            raise ConfigError(f"upsampling factor must be >= 1, got {self.r}")
        if self.channels < 1:
            raise ConfigError(f"channel count must be >= 1, got {self.channels}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")

    @property
    def hetero(self) -> bool:
        return self.variant.startswith("hetero")

    @property
    def variational(self) -> bool:
        return "+vd" in self.variant

    @property
    def vd_per_filter(self) -> bool:
        return self.variant.endswith("vd2")

    def layer_spec(self) -> list:
        """(kernel_edge, out_channels) per layer; fixed three-layer trunk."""
        return [(3, 50), (1, 100), (3, self.r**3 * self.channels)]

    def net_names(self) -> tuple:
        return ("mean", "scale") if self.hetero else ("mean",)

    def output_edge(self, n: int) -> int:
        return (n - (_RECEPTIVE - 1)) * self.r


@dataclass
class NormStats:
    """Per-channel z-scoring statistics for inputs and targets."""

    in_mean: np.ndarray
    in_std: np.ndarray
    out_mean: np.ndarray
    out_std: np.ndarray

    @classmethod
    def identity(cls, channels: int) -> "NormStats":
        z, o = np.zeros(channels), np.ones(channels)
        return cls(z.copy(), o.copy(), z.copy(), o.copy())

    def validate(self, channels: int) -> None:
        for name in ("in_mean", "in_std", "out_mean", "out_std"):
            a = getattr(self, name)
            if a.shape != (channels,):
                raise ShapeMismatchError(f"norm stat {name} has shape {a.shape}, expected ({channels},)")
            check_finite(a, f"norm stat {name}")
        if np.any(self.in_std <= 0) or np.any(self.out_std <= 0):
            raise DataError("normalization stds must be positive")

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("in_mean", "in_std", "out_mean", "out_std")}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(**{k: np.asarray(d[k], dtype=np.float64) for k in ("in_mean", "in_std", "out_mean", "out_std")})


@dataclass
class LayerParams:
    """One convolution layer: weights (posterior means for vd), bias, log-variances."""

    weight: Tensor
    bias: Tensor
    log_s2: Tensor | None = None


@dataclass
class ModelParams:
    """Full parameter set of one network variant plus normalization statistics."""

    config: ArchConfig
    norm: NormStats
    nets: dict  # net name -> list[LayerParams]

    def named_parameters(self):
        """Yield (name, Tensor) in a fixed order: net, layer, weight/bias/log_s2."""
        for net in self.config.net_names():
            for i, layer in enumerate(self.nets[net]):
                yield f"{net}.{i}.weight", layer.weight
                yield f"{net}.{i}.bias", layer.bias
                if layer.log_s2 is not None:
                    yield f"{net}.{i}.log_s2", layer.log_s2

    def zero_grad(self) -> None:
        for _, t in self.named_parameters():
            t.zero_grad()

    def copy(self) -> "ModelParams":
        nets = {
            k: [LayerParams(l.weight.copy(), l.bias.copy(), None if l.log_s2 is None else l.log_s2.copy()) for l in v]
            for k, v in self.nets.items()
        }
        norm = NormStats(*(getattr(self.norm, f).copy() for f in ("in_mean", "in_std", "out_mean", "out_std")))
        return ModelParams(self.config, norm, nets)

    def checksum(self) -> str:
        """Stable hex digest over architecture, normalization and parameter bytes."""
        import hashlib

        h = hashlib.sha256()
        h.update(json.dumps(
            {"r": self.config.r, "c": self.config.channels, "variant": self.config.variant,
             "norm": self.norm.to_dict()},
            sort_keys=True).encode())
        for name, t in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()


@dataclass
class HeteroOutput:
    """Predictive mean patch and per-component standard deviations."""

    mu: Tensor
    sigma_diag: Tensor

    def __post_init__(self):
        if self.mu.shape != self.sigma_diag.shape:
            raise ShapeMismatchError(
                f"mu shape {self.mu.shape} != sigma shape {self.sigma_diag.shape}"
            )


def init_params(config: ArchConfig, seed: int) -> ModelParams:
    """He-scaled Gaussian weights, zero biases; vd log-variances start at -10.

    Deterministic given `seed`: each (net, layer) draws from its own
    PCG64 stream keyed by ``SeedSequence((seed, net_index, layer_index))``.
    """
    nets = {}
    for net_idx, net in enumerate(config.net_names()):
        layers = []
        cin = config.channels
        for li, (k, cout) in enumerate(config.layer_spec()):
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, net_idx, li))))
            fan_in = cin * k**3
            w = rng.standard_normal((cout, cin, k, k, k)) * np.sqrt(2.0 / fan_in)
            log_s2 = None
            if config.variational:
                shape = (cout,) if config.vd_per_filter else w.shape
                log_s2 = Tensor(np.full(shape, LOG_S2_INIT))
            layers.append(LayerParams(Tensor(w), Tensor(np.zeros(cout)), log_s2))
            cin = cout
        nets[net] = layers
    return ModelParams(config, NormStats.identity(config.channels), nets)


# ---------------------------------------------------------------------------
# weight sampling (variational variants)
# ---------------------------------------------------------------------------


@dataclass
class WeightSample:
    """One draw of concrete weights from the factored Gaussian posterior."""

    seed: int
    theta: dict = field(default_factory=dict)  # (net, layer) -> weight array
    eps: dict = field(default_factory=dict)  # (net, layer) -> standard-normal draw


def sample_weights(params: ModelParams, seed: int) -> WeightSample:
    """Draw ``theta = m + s * eps`` per layer; vd2 shares one (s, eps) per filter."""
    cfg = params.config
    if not cfg.variational:
        raise ConfigError(f"sample_weights requires a variational variant, got {cfg.variant!r}")
    sample = WeightSample(seed=seed)
    for net_idx, net in enumerate(cfg.net_names()):
        for li, layer in enumerate(params.nets[net]):
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, net_idx, li))))
            m = layer.weight.data
            s = np.exp(0.5 * layer.log_s2.data)
            if cfg.vd_per_filter:
                eps = rng.standard_normal(m.shape[0])
                theta = m + (s * eps)[:, None, None, None, None]
            else:
                eps = rng.standard_normal(m.shape)
                theta = m + s * eps
            sample.theta[(net, li)] = theta
            sample.eps[(net, li)] = eps
    return sample


# ---------------------------------------------------------------------------
# forward / backward internals (batch-last layout)
# ---------------------------------------------------------------------------


def _net_weights(params: ModelParams, net: str, sample: WeightSample | None):
    layers = params.nets[net]
    if sample is None:
        return [l.weight.data for l in layers]
    return [sample.theta[(net, li)] for li in range(len(layers))]


def _forward_net(params: ModelParams, net: str, xb: np.ndarray, sample, keep_cache: bool):
    """Trunk forward on a normalized (c,Z,Y,X,B) array; returns pre-shuffle maps."""
    weights = _net_weights(params, net, sample)
    layers = params.nets[net]
    h = xb
    cols_cache, mask_cache, shape_cache = [], [], []
    for li, layer in enumerate(layers):
        out, cols = _conv3d_fwd(h, weights[li], layer.bias.data, keep_cols=keep_cache)
        if keep_cache:
            cols_cache.append(cols)
            shape_cache.append(h.shape)
        if li < len(layers) - 1:
            if keep_cache:
                mask_cache.append(out > 0.0)
            np.maximum(out, 0.0, out=out)
        h = out
    cache = {"cols": cols_cache, "mask": mask_cache, "shapes": shape_cache, "weights": weights} if keep_cache else None
    return h, cache


def _backward_net(params: ModelParams, net: str, cache: dict, g_out: np.ndarray) -> None:
    """Accumulate parameter gradients for one trunk; consumes the cache."""
    layers = params.nets[net]
    cfg = params.config
    g = g_out
    for li in range(len(layers) - 1, -1, -1):
        layer = layers[li]
        gx, gw, gb = _conv3d_bwd(
            g, cache["cols"][li], cache["shapes"][li], cache["weights"][li], need_gx=(li > 0)
        )
        cache["cols"][li] = None  # consumed (pooled matrices are recycled)
        layer.weight.add_grad(gw)
        layer.bias.add_grad(gb)
        if cfg.variational and "eps" in cache:
            eps = cache["eps"][(net, li)]
            s = np.exp(0.5 * layer.log_s2.data)
            if cfg.vd_per_filter:
                g_log = 0.5 * s * eps * gw.reshape(gw.shape[0], -1).sum(axis=1)
            else:
                g_log = 0.5 * s * eps * gw
            layer.log_s2.add_grad(g_log)
        if li > 0:
            gx *= cache["mask"][li - 1]
            g = gx


def _normalize_in(params: ModelParams, xb: np.ndarray) -> np.ndarray:
    sh = (-1, 1, 1, 1, 1)
    return (xb - params.norm.in_mean.reshape(sh)) / params.norm.in_std.reshape(sh)


def _forward_full(params: ModelParams, xb: np.ndarray, sample, keep_cache: bool):
    """Normalized-space forward of all trunks of the variant.

    Returns a state dict with ``mu_norm`` and, for hetero variants,
    ``raw_scale`` (pre-softplus shuffled covariance-head output) plus the
    per-trunk caches needed for the backward pass.
    """
    cfg = params.config
    xn = _normalize_in(params, xb)
    r = cfg.r
    a3, cache_m = _forward_net(params, "mean", xn, sample, keep_cache)
    state = {"mu_norm": shuffle3d(a3, r).data, "cache_mean": cache_m}
    if cfg.hetero:
        a3s, cache_s = _forward_net(params, "scale", xn, sample, keep_cache)
        state["raw_scale"] = shuffle3d(a3s, r).data
        state["cache_scale"] = cache_s
    if keep_cache and sample is not None:
        for c in (state["cache_mean"], state.get("cache_scale")):
            if c is not None:
                c["eps"] = sample.eps
    return state


def _sigma_norm_from_raw(params: ModelParams, raw: np.ndarray) -> np.ndarray:
    """Normalized-space sigma: softplus(raw) + floor/out_std per channel."""
    sh = (-1,) + (1,) * (raw.ndim - 1)
    return softplus(raw).data + SIGMA_FLOOR / params.norm.out_std.reshape(sh)


def _backward_full(params: ModelParams, state: dict, g_mu_norm, g_sigma_norm=None) -> None:
    """Route normalized-space output gradients back into parameter grads."""
    r = params.config.r
    _backward_net(params, "mean", state["cache_mean"], unshuffle3d(g_mu_norm, r).data)
    if g_sigma_norm is not None:
        g_raw = softplus_vjp(g_sigma_norm, state["raw_scale"])
        _backward_net(params, "scale", state["cache_scale"], unshuffle3d(g_raw, r).data)


def _denorm_out(params: ModelParams, y_norm: np.ndarray) -> np.ndarray:
    sh = (-1,) + (1,) * (y_norm.ndim - 1)
    return y_norm * params.norm.out_std.reshape(sh) + params.norm.out_mean.reshape(sh)


def _check_input(params: ModelParams, x: np.ndarray) -> None:
    if x.shape[0] != params.config.channels:
        raise ShapeMismatchError(
            f"input has {x.shape[0]} channels, model expects {params.config.channels}"
        )
    if min(x.shape[1:4]) < _RECEPTIVE:
        raise ShapeMismatchError(
            f"input spatial dims {x.shape[1:4]} are smaller than the {_RECEPTIVE}^3 receptive field"
        )


# ---------------------------------------------------------------------------
# public forward passes (single patch, denormalized)
# ---------------------------------------------------------------------------


def forward_mean(params: ModelParams, x) -> Tensor:
    """Denormalized mean prediction for one (c, n, n, n) patch.

    For variational variants the posterior means are used (no weight noise).
    """
    xa = _arr(x)
    _check_input(params, xa)
    xb, had_batch = _split_batch(xa)
    state = _forward_full(params, xb, sample=None, keep_cache=False)
    out = _denorm_out(params, state["mu_norm"])
    return Tensor(out if had_batch else out[..., 0])


def forward_hetero(params: ModelParams, x) -> HeteroOutput:
    """Mean and per-component standard deviation for one patch (hetero variants)."""
    cfg = params.config
    if not cfg.hetero:
        raise ConfigError(f"forward_hetero requires a hetero variant, got {cfg.variant!r}")
    xa = _arr(x)
    _check_input(params, xa)
    xb, had_batch = _split_batch(xa)
    state = _forward_full(params, xb, sample=None, keep_cache=False)
    mu = _denorm_out(params, state["mu_norm"])
    sh = (-1,) + (1,) * (state["raw_scale"].ndim - 1)
    sigma = softplus(state["raw_scale"]).data * params.norm.out_std.reshape(sh) + SIGMA_FLOOR
    if not had_batch:
        mu, sigma = mu[..., 0], sigma[..., 0]
    return HeteroOutput(Tensor(mu), Tensor(sigma))


def forward_stochastic(params: ModelParams, x, seed: int):
    """Forward pass with weights sampled from the posterior (frozen by `seed`).

    Returns a `HeteroOutput` for hetero variants, otherwise a mean `Tensor`.
    """
    cfg = params.config
    if not cfg.variational:
        raise ConfigError(f"forward_stochastic requires a variational variant, got {cfg.variant!r}")
    sample = sample_weights(params, seed)
    xa = _arr(x)
    _check_input(params, xa)
    xb, had_batch = _split_batch(xa)
    state = _forward_full(params, xb, sample=sample, keep_cache=False)
    mu = _denorm_out(params, state["mu_norm"])
    if not cfg.hetero:
        return Tensor(mu if had_batch else mu[..., 0])
    sh = (-1,) + (1,) * (state["raw_scale"].ndim - 1)
    sigma = softplus(state["raw_scale"]).data * params.norm.out_std.reshape(sh) + SIGMA_FLOOR
    if not had_batch:
        mu, sigma = mu[..., 0], sigma[..., 0]
    return HeteroOutput(Tensor(mu), Tensor(sigma))


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------


def save_checkpoint(path, params: ModelParams, manifest: dict | None = None) -> None:
    """Write the documented checkpoint container (see module docstring)."""
    meta = {
        "format": "voxelsr-checkpoint",
        "version": 1,
        "arch": {"r": params.config.r, "channels": params.config.channels, "variant": params.config.variant},
        "norm": params.norm.to_dict(),
        "manifest": manifest or {},
    }
    blob = bytearray()
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    blob += struct.pack("<Q", len(meta_bytes))
    blob += meta_bytes
    named = list(params.named_parameters())
    blob += struct.pack("<I", len(named))
    for name, t in named:
        nb = name.encode()
        blob += struct.pack("<H", len(nb))
        blob += nb
        blob += struct.pack("<B", t.data.ndim)
        for d in t.data.shape:
            blob += struct.pack("<I", d)
        blob += t.data.astype("<f8").tobytes()
    blob += struct.pack("<I", zlib.crc32(bytes(blob)) & 0xFFFFFFFF)
    with open(path, "wb") as f:
        f.write(bytes(blob))


def load_checkpoint(path):
    """Read a checkpoint, verify its CRC32, and rebuild (ModelParams, manifest)."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 16:
        raise DataError(f"checkpoint {path} is truncated")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise DataError(f"checkpoint {path} failed its checksum")
    off = 0
    (meta_len,) = struct.unpack_from("<Q", body, off)
    off += 8
    meta = json.loads(body[off : off + meta_len].decode())
    off += meta_len
    (n_blobs,) = struct.unpack_from("<I", body, off)
    off += 4
    blobs = {}
    for _ in range(n_blobs):
        (name_len,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off : off + name_len].decode()
        off += name_len
        (ndim,) = struct.unpack_from("<B", body, off)
        off += 1
        dims = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        count = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=off).reshape(dims).copy()
        off += 8 * count
        blobs[name] = arr
    cfg = ArchConfig(meta["arch"]["r"], meta["arch"]["channels"], meta["arch"]["variant"])
    params = init_params(cfg, seed=0)
    params.norm = NormStats.from_dict(meta["norm"])
    for name, t in params.named_parameters():
        if name not in blobs:
            raise DataError(f"checkpoint {path} is missing parameter {name}")
        if blobs[name].shape != t.data.shape:
            raise ShapeMismatchError(
                f"checkpoint parameter {name} has shape {blobs[name].shape}, expected {t.data.shape}"
            )
        t.data[...] = blobs[name]
    return params, meta["manifest"]
