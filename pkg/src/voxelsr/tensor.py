"""Dense float64 tensor arithmetic with hand-derived backward rules.

The operator set is exactly what the super-resolution networks need:
valid (unpadded) 3-D cross-correlation, ReLU, softplus and the periodic
channel-to-space shuffle, each paired with an explicit vector-Jacobian
product. There is no tape or graph; callers chain the ``*_vjp`` functions
in reverse order themselves.

Convention notes
----------------
* Convolution means cross-correlation (no kernel flip), stride 1, valid
  padding only.
* All public ops run in float64 and accept either a `Tensor` or a bare
  array-like.
* Spatial arrays are ``(C, D, H, W)``; every op also accepts one extra
  trailing batch axis ``(C, D, H, W, B)``. The batch-last layout keeps
  the underlying matrix multiplications large and contiguous.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import NonFiniteError, ShapeMismatchError

__all__ = [
    "Tensor",
    "ConvSpec",
    "conv3d",
    "conv3d_vjp",
    "relu",
    "relu_vjp",
    "softplus",
    "softplus_vjp",
    "shuffle3d",
    "unshuffle3d",
    "check_finite",
    "finite_diff_check",
    "GradCheckReport",
]


class Tensor:
    """A contiguous float64 array with an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad")

    def __init__(self, data, grad=None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        if grad is None:
            self.grad = None
        else:
            grad = np.ascontiguousarray(grad, dtype=np.float64)
            if grad.shape != self.data.shape:
                raise ShapeMismatchError(
                    f"grad shape {grad.shape} does not match data shape {self.data.shape}"
                )
            self.grad = grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0.0)

    def add_grad(self, g) -> None:
        self.ensure_grad()
        self.grad += g

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), None if self.grad is None else self.grad.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, grad={'yes' if self.grad is not None else 'no'})"


def _arr(x) -> np.ndarray:
    """Unwrap a Tensor or coerce an array-like to a float64 ndarray."""
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def check_finite(x, name: str = "tensor") -> np.ndarray:
    """Return the underlying array, raising `NonFiniteError` if it has NaN/Inf."""
    a = _arr(x)
    if not np.all(np.isfinite(a)):
        bad = int(np.size(a) - np.count_nonzero(np.isfinite(a)))
        raise NonFiniteError(f"{name} contains {bad} non-finite value(s)")
    return a


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one valid convolution layer."""

    kernel: tuple  # (kd, kh, kw)
    in_channels: int
    out_channels: int

    def __post_init__(self):
        kd, kh, kw = self.kernel
        for k in (kd, kh, kw):
            if k < 1 or (k != 1 and k % 2 == 0):
                raise ShapeMismatchError(f"kernel extents must be odd or 1, got {self.kernel}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeMismatchError("channel counts must be >= 1")

    def weight_shape(self) -> tuple:
        return (self.out_channels, self.in_channels) + tuple(self.kernel)

    def out_spatial(self, spatial: tuple) -> tuple:
        return tuple(s - k + 1 for s, k in zip(spatial, self.kernel))


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _split_batch(a: np.ndarray):
    """Return (array with trailing batch axis, had_batch flag)."""
    if a.ndim == 4:
        return a[..., None], False
    if a.ndim == 5:
        return a, True
    raise ShapeMismatchError(f"expected 4-D (C,D,H,W) or 5-D (C,D,H,W,B) input, got ndim={a.ndim}")


# Exact accumulation mode: convolution dot products run through numpy's
# fixed-order einsum loops instead of BLAS. BLAS picks different kernels for
# different matrix shapes, which reassociates sums and perturbs results by a
# few ulp (~1e-15 relative); the exact mode makes outputs bitwise independent
# of how a volume is tiled, at several times the cost.
_EXACT_ACCUMULATION = False


class exact_accumulation:
    """Context manager forcing shape-independent, fixed-order conv sums."""

    def __init__(self, enabled: bool = True):
        self.enabled = enabled

    def __enter__(self):
        global _EXACT_ACCUMULATION
        self.prev = _EXACT_ACCUMULATION
        _EXACT_ACCUMULATION = self.enabled
        return self

    def __exit__(self, *exc):
        global _EXACT_ACCUMULATION
        _EXACT_ACCUMULATION = self.prev
        return False


def _gemm_tn(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """a.T @ b with either BLAS or fixed-order einsum accumulation."""
    if _EXACT_ACCUMULATION:
        return np.einsum("kc,kn->cn", a, b, optimize=False)
    return a.T @ b


# Workspace pool for the large column matrices built every conv call.
# Reusing them avoids re-faulting hundreds of MB of fresh pages per training
# step. Internal and not thread-safe; keyed by element count.
_POOL: dict = {}
_POOL_SLOTS = 4


def _pool_take(count: int) -> np.ndarray:
    stack = _POOL.get(count)
    if stack:
        return stack.pop()
    return np.empty(count)


def _pool_give(arr: np.ndarray) -> None:
    base = arr if arr.base is None else arr.base
    if not isinstance(base, np.ndarray) or base.ndim != 1 or base.dtype != np.float64:
        return
    stack = _POOL.setdefault(base.size, [])
    if len(stack) < _POOL_SLOTS:
        stack.append(base)


def _release_cols(cols: np.ndarray, w: np.ndarray) -> None:
    """Return a pooled column matrix; 1x1x1 'cols' are activation views, kept."""
    if w.shape[2] * w.shape[3] * w.shape[4] > 1:
        _pool_give(cols)


def _im2col(x: np.ndarray, kd: int, kh: int, kw: int):
    """Gather valid windows of a (C,Z,Y,X,B) array into a (k^3*C, N) matrix.

    Rows are offset-major then channel; columns run over (z, y, x, batch)
    in C order. For 1x1x1 kernels this is a reshape view, not a copy.
    """
    cin, sz, sy, sx, b = x.shape
    dz, dy, dx = sz - kd + 1, sy - kh + 1, sx - kw + 1
    n = dz * dy * dx * b
    if kd == kh == kw == 1:
        return x.reshape(cin, n), (dz, dy, dx)
    k3 = kd * kh * kw
    cols = _pool_take(k3 * cin * n).reshape(k3, cin, n)
    t = 0
    for a in range(kd):
        for bb in range(kh):
            for d in range(kw):
                cols[t] = x[:, a : a + dz, bb : bb + dy, d : d + dx, :].reshape(cin, n)
                t += 1
    return cols.reshape(k3 * cin, n), (dz, dy, dx)


def _w2col(w: np.ndarray) -> np.ndarray:
    """Arrange (Cout,Cin,kd,kh,kw) weights as (k^3*Cin, Cout), offset-major rows."""
    cout, cin, kd, kh, kw = w.shape
    return w.transpose(2, 3, 4, 1, 0).reshape(kd * kh * kw * cin, cout)


def _conv3d_fwd(x: np.ndarray, w: np.ndarray, bias: np.ndarray, keep_cols: bool):
    """Batched valid cross-correlation on (C,Z,Y,X,B). Returns (out, cols)."""
    cout = w.shape[0]
    b = x.shape[-1]
    cols, (dz, dy, dx) = _im2col(x, *w.shape[2:])
    out2 = _gemm_tn(_w2col(w), cols)
    out2 += bias[:, None]
    out = out2.reshape(cout, dz, dy, dx, b)
    if not keep_cols:
        _release_cols(cols, w)
        return out, None
    return out, cols


def _conv3d_bwd(gout: np.ndarray, cols: np.ndarray, x_shape: tuple, w: np.ndarray, need_gx: bool):
    """Backward of `_conv3d_fwd` given the cached column matrix.

    Consumes `cols`: pooled column matrices are recycled, so the caller must
    drop its reference afterwards.
    """
    cout, cin, kd, kh, kw = w.shape
    g2 = gout.reshape(cout, -1)
    gb = g2.sum(axis=1)
    gw = np.ascontiguousarray(
        (g2 @ cols.T).reshape(cout, kd, kh, kw, cin).transpose(0, 4, 1, 2, 3)
    )
    _release_cols(cols, w)
    gx = None
    if need_gx:
        z, y, x, b = x_shape[1:]
        dz, dy, dx = z - kd + 1, y - kh + 1, x - kw + 1
        if kd == kh == kw == 1:
            gx = (_w2col(w) @ g2).reshape(x_shape)
        else:
            k3 = kd * kh * kw
            flat = _pool_take(k3 * cin * g2.shape[1])
            gcols = flat.reshape(k3 * cin, g2.shape[1])
            np.matmul(_w2col(w), g2, out=gcols)
            gcols = gcols.reshape(k3, cin, dz, dy, dx, b)
            gx = np.zeros(x_shape)
            t = 0
            for a in range(kd):
                for bb in range(kh):
                    for d in range(kw):
                        gx[:, a : a + dz, bb : bb + dy, d : d + dx, :] += gcols[t]
                        t += 1
            _pool_give(flat)
    return gx, gw, gb


def _validate_conv(x: np.ndarray, w: np.ndarray, bias: np.ndarray) -> None:
    if w.ndim != 5:
        raise ShapeMismatchError(f"weights must be 5-D (Cout,Cin,kd,kh,kw), got ndim={w.ndim}")
    if bias.ndim != 1 or bias.shape[0] != w.shape[0]:
        raise ShapeMismatchError(
            f"bias axis 0 has size {bias.shape}, expected ({w.shape[0]},) to match weights axis 0"
        )
    if x.shape[0] != w.shape[1]:
        raise ShapeMismatchError(
            f"input channel axis has size {x.shape[0]}, weights expect Cin={w.shape[1]}"
        )
    for ax, (s, k) in enumerate(zip(x.shape[1:4], w.shape[2:5])):
        if s < k:
            raise ShapeMismatchError(
                f"spatial axis {ax} of size {s} is smaller than kernel extent {k}"
            )


def conv3d(input, weights, bias, validate: bool = True) -> Tensor:
    """Valid 3-D cross-correlation over multi-channel volumes.

    ``out[o,z,y,x] = bias[o] + sum_{c,a,b,d} input[c,z+a,y+b,x+d] * weights[o,c,a,b,d]``

    `input` is ``(Cin, D, H, W)`` with an optional trailing batch axis,
    `weights` is ``(Cout, Cin, kd, kh, kw)``, `bias` is ``(Cout,)``.
    """
    x, w, b = _arr(input), _arr(weights), _arr(bias)
    _validate_conv(x, w, b)
    if validate:
        check_finite(x, "conv3d input")
        check_finite(w, "conv3d weights")
        check_finite(b, "conv3d bias")
    xb, had_batch = _split_batch(x)
    out, _ = _conv3d_fwd(xb, w, b, keep_cols=False)
    return Tensor(out if had_batch else out[..., 0])


def conv3d_vjp(grad_out, saved_input, weights):
    """Vector-Jacobian products of `conv3d` w.r.t. (input, weights, bias)."""
    g, x, w = _arr(grad_out), _arr(saved_input), _arr(weights)
    xb, had_batch = _split_batch(x)
    gb_, g_had_batch = _split_batch(g)
    if g_had_batch != had_batch:
        raise ShapeMismatchError("grad_out and saved_input disagree on the batch axis")
    expect = (w.shape[0],) + tuple(s - k + 1 for s, k in zip(xb.shape[1:4], w.shape[2:5]))
    if gb_.shape[:4] != expect or gb_.shape[4] != xb.shape[4]:
        raise ShapeMismatchError(
            f"grad_out shape {g.shape} does not match conv3d output shape {expect}"
        )
    cols, _ = _im2col(xb, *w.shape[2:])
    gx, gw, gbias = _conv3d_bwd(gb_, cols, xb.shape, w, need_gx=True)
    return (gx if had_batch else gx[..., 0]), gw, gbias


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------


def relu(x) -> Tensor:
    """Elementwise max(x, 0)."""
    return Tensor(np.maximum(_arr(x), 0.0))


def relu_vjp(grad_out, saved_x) -> np.ndarray:
    """Pass gradient where the saved input is > 0 (subgradient 0 at exactly 0)."""
    g, x = _arr(grad_out), _arr(saved_x)
    if g.shape != x.shape:
        raise ShapeMismatchError(f"grad_out shape {g.shape} != saved input shape {x.shape}")
    return np.where(x > 0.0, g, 0.0)


def softplus(x) -> Tensor:
    """Overflow-safe log(1 + exp(x)): x for x > 30, exp(x) for x < -30."""
    a = _arr(x)
    out = np.where(a > 30.0, a, np.log1p(np.exp(np.minimum(a, 30.0))))
    out = np.where(a < -30.0, np.exp(a), out)
    return Tensor(out)


def softplus_vjp(grad_out, saved_x) -> np.ndarray:
    """Multiply by sigmoid(saved_x)."""
    g, x = _arr(grad_out), _arr(saved_x)
    if g.shape != x.shape:
        raise ShapeMismatchError(f"grad_out shape {g.shape} != saved input shape {x.shape}")
    return g * expit(x)


# ---------------------------------------------------------------------------
# periodic shuffle
# ---------------------------------------------------------------------------


def shuffle3d(feature_maps, r: int) -> Tensor:
    """Remap an (r^3*c, D, H, W) grid to (c, rD, rH, rW) bijectively.

    ``out[ch, i, j, k] = F[ch*r^3 + (i mod r) + r*(j mod r) + r^2*(k mod r),
    i//r, j//r, k//r]``. Accepts an optional trailing batch axis.
    """
    f = _arr(feature_maps)
    fb, had_batch = _split_batch(f)
    ch_in, z, y, x, b = fb.shape
    if r < 1:
        raise ShapeMismatchError(f"upsampling factor must be >= 1, got {r}")
    if ch_in % (r**3) != 0:
        raise ShapeMismatchError(
            f"channel axis of size {ch_in} is not divisible by r^3 = {r**3}"
        )
    c = ch_in // r**3
    out = (
        fb.reshape(c, r, r, r, z, y, x, b)
        .transpose(0, 4, 3, 5, 2, 6, 1, 7)
        .reshape(c, r * z, r * y, r * x, b)
    )
    out = np.ascontiguousarray(out)
    return Tensor(out if had_batch else out[..., 0])


def unshuffle3d(hr, r: int) -> Tensor:
    """Inverse of `shuffle3d` (also its vector-Jacobian product)."""
    hb = _arr(hr)
    hb, had_batch = _split_batch(hb)
    c, zr, yr, xr, b = hb.shape
    if any(s % r for s in (zr, yr, xr)):
        raise ShapeMismatchError(
            f"spatial dims {(zr, yr, xr)} are not divisible by r = {r}"
        )
    z, y, x = zr // r, yr // r, xr // r
    out = (
        hb.reshape(c, z, r, y, r, x, r, b)
        .transpose(0, 6, 4, 2, 1, 3, 5, 7)
        .reshape(c * r**3, z, y, x, b)
    )
    out = np.ascontiguousarray(out)
    return Tensor(out if had_batch else out[..., 0])


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    worst_index: tuple
    n_checked: int
    passed: bool


@dataclass
class GradCheckReport:
    """Per-tensor comparison of analytic and central-difference gradients."""

    step: float
    tol: float
    entries: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    def failures(self) -> list:
        return [e.name for e in self.entries if not e.passed]

    def __str__(self) -> str:
        lines = [f"gradient check: step={self.step:g} tol={self.tol:g}"]
        for e in self.entries:
            status = "PASS" if e.passed else "FAIL"
            lines.append(
                f"  {e.name}: max rel err {e.max_rel_err:.3e} "
                f"({e.n_checked} entries) {status}"
            )
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def finite_diff_check(
    fn,
    params: dict,
    step: float = 1e-5,
    tol: float = 1e-6,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients of a scalar function against central differences.

    `fn` maps the `params` dict (name -> `Tensor`) to ``(loss, grads)`` where
    `grads` is a dict of arrays aligned with `params`. It must be deterministic.
    When `max_entries` is given, at most that many entries per tensor are
    probed (chosen by a seeded RNG); otherwise every entry is checked.

    The per-entry error is ``|analytic - numeric| / max(|analytic|, |numeric|, 1)``,
    i.e. relative with an absolute floor of 1 so that near-zero gradients are
    compared absolutely.
    """
    loss0, grads0 = fn(params)
    if not np.isfinite(loss0):
        raise NonFiniteError(f"loss is non-finite: {loss0}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    report = GradCheckReport(step=step, tol=tol)
    for name, t in params.items():
        flat = t.data.reshape(-1)
        n = flat.size
        if max_entries is not None and n > max_entries:
            idxs = rng.choice(n, size=max_entries, replace=False)
        else:
            idxs = np.arange(n)
        analytic = np.asarray(grads0[name], dtype=np.float64).reshape(-1)
        worst, worst_i = 0.0, 0
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + step
            lp, _ = fn(params)
            flat[i] = orig - step
            lm, _ = fn(params)
            flat[i] = orig
            num = (lp - lm) / (2.0 * step)
            a = analytic[i]
            err = abs(a - num) / max(abs(a), abs(num), 1.0)
            if err > worst:
                worst, worst_i = err, int(i)
        report.entries.append(
            GradCheckEntry(
                name=name,
                max_rel_err=worst,
                worst_index=np.unravel_index(worst_i, t.data.shape),
                n_checked=len(idxs),
                passed=worst <= tol,
            )
        )
    return report
