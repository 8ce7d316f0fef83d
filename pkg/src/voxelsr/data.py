"""Synthetic volumes, block-mean downsampling, patch pairs and volume file I/O.

Reproducibility: every stochastic routine derives its own PCG64 stream from
``numpy.random.SeedSequence((seed, purpose, ...))`` where ``purpose`` is a
module-level constant, so datasets are reproducible across runs and
platforms and parallel generation can partition streams per item.

Grid alignment: LR voxel ``(i, j, k)`` is the block mean of the HR cube with
corner ``(r i, r j, r k)`` and edge ``r``. Patch pairs keep that alignment:
the central ``7^3`` LR voxels of an ``11^3`` input patch correspond exactly
to the ``(7r)^3`` HR target patch.

VXL1 volume container (all integers little-endian)
---------------------------------------------------
``magic b"VXL1"`` | ``u16 version = 1`` | ``u32 channels, D, H, W`` |
``u8 dtype`` (1 = float32, 2 = float64) | ``u8 mask_flag`` (0/1) |
if mask_flag: ``ceil(D*H*W / 8)`` bytes of bit-packed mask (C-order voxels,
most significant bit first within each byte) | voxel data, channel-major,
row-major (W fastest), in the stated dtype.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DataError, ShapeMismatchError
from .tensor import check_finite

__all__ = [
    "Volume",
    "PhantomSpec",
    "PatchPair",
    "generate_phantom",
    "block_mean_downsample",
    "sample_patch_pairs",
    "split_train_valid",
    "pairs_to_arrays",
    "write_volume",
    "read_volume",
]

# stream purposes for SeedSequence keys
_STREAM_FIELD = 10
_STREAM_INCLUSION = 20
_STREAM_SIGNATURE = 30
_STREAM_NOISE = 40
_STREAM_SAMPLER = 50

LR_PATCH = 11  # LR input patch edge
HR_CORE = 7  # LR voxels whose HR blocks form the target patch
_MARGIN = (LR_PATCH - HR_CORE) // 2  # receptive-field margin, 2 LR voxels


def _rng(*key) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))


def _cube(radius: int) -> np.ndarray:
    e = 2 * radius + 1
    return np.ones((e, e, e), dtype=bool)


@dataclass
class Volume:
    """A multi-channel voxel grid with an optional foreground mask."""

    data: np.ndarray  # (c, D, H, W) float64
    mask: np.ndarray | None = None  # (D, H, W) bool

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        if self.data.ndim != 4:
            raise ShapeMismatchError(f"volume data must be 4-D (c,D,H,W), got {self.data.shape}")
        if self.mask is not None:
            self.mask = np.ascontiguousarray(self.mask, dtype=bool)
            if self.mask.shape != self.data.shape[1:]:
                raise ShapeMismatchError(
                    f"mask dims {self.mask.shape} do not match voxel dims {self.data.shape[1:]}"
                )

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> tuple:
        return self.data.shape[1:]

    def copy(self) -> "Volume":
        return Volume(self.data.copy(), None if self.mask is None else self.mask.copy())


@dataclass(frozen=True)
class PhantomSpec:
    """Recipe for a synthetic desk-scale volume.

    The phantom is a sum of band-limited Gaussian random fields and
    piecewise-constant ellipsoidal inclusions (each with its own channel
    signature), attenuated toward a small background level outside the
    inclusion union, plus an additive noise field whose amplitude varies
    smoothly with the first random field and is boosted in a shell around
    the mask boundary. With ``channels == 6`` the channels are the
    ``(xx, xy, xz, yy, yz, zz)`` components of a symmetric positive-definite
    tensor field, kept positive-definite inside the mask by an eigenvalue
    floor.
    """

    dims: tuple
    channels: int = 6
    seed: int = 0
    n_fields: int = 3
    field_cutoff: float = 0.12  # band limit, cycles per voxel
    n_inclusions: int = 4
    inclusion_radius: tuple = (0.18, 0.32)  # fraction of the smallest dim
    signature_scale: float = 1.0
    noise_amplitude: float = 0.03
    boundary_noise_boost: float = 2.0
    background_level: float = 0.1

    def __post_init__(self):
        if len(self.dims) != 3 or any(d < 8 for d in self.dims):
            raise DataError(f"dims must be three extents >= 8, got {self.dims}")
        if self.channels < 1:
            raise DataError("channels must be >= 1")
        if self.noise_amplitude < 0 or self.signature_scale < 0:
            raise DataError("amplitudes must be non-negative")


def _bandlimited_field(dims: tuple, cutoff: float, rng: np.random.Generator) -> np.ndarray:
    """Unit-variance real field with no spectral content beyond `cutoff`."""
    white = rng.standard_normal(dims)
    spec = np.fft.rfftn(white)
    kz = np.fft.fftfreq(dims[0])[:, None, None]
    ky = np.fft.fftfreq(dims[1])[None, :, None]
    kx = np.fft.rfftfreq(dims[2])[None, None, :]
    k = np.sqrt(kz**2 + ky**2 + kx**2)
    spec *= k <= cutoff
    f = np.fft.irfftn(spec, s=dims, axes=(0, 1, 2))
    sd = f.std()
    return f / sd if sd > 0 else f


def _ellipsoid_indicator(dims, center, semi_axes, rot, grid) -> np.ndarray:
    rel = grid - np.asarray(center)[:, None, None, None]
    local = np.einsum("ab,bzyx->azyx", rot.T, rel)
    q = sum((local[i] / semi_axes[i]) ** 2 for i in range(3))
    return q <= 1.0


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    return q * np.sign(np.diag(r))


_TENSOR_IDX = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]  # xx,xy,xz,yy,yz,zz


def channels_to_tensor(data: np.ndarray) -> np.ndarray:
    """Assemble (6, ...) channels into symmetric (..., 3, 3) matrices."""
    if data.shape[0] != 6:
        raise ShapeMismatchError(f"tensor channel layout needs 6 channels, got {data.shape[0]}")
    t = np.empty(data.shape[1:] + (3, 3))
    for ch, (i, j) in enumerate(_TENSOR_IDX):
        t[..., i, j] = data[ch]
        t[..., j, i] = data[ch]
    return t


def tensor_to_channels(t: np.ndarray) -> np.ndarray:
    out = np.empty((6,) + t.shape[:-2])
    for ch, (i, j) in enumerate(_TENSOR_IDX):
        out[ch] = t[..., i, j]
    return out


def _spd_floor(data: np.ndarray, mask: np.ndarray, floor: float) -> np.ndarray:
    """Lift eigenvalues of in-mask tensors to at least `floor` (rare tail fix)."""
    t = channels_to_tensor(data)
    ev = np.linalg.eigvalsh(t)
    lift = np.maximum(floor - ev[..., 0], 0.0) * mask
    if np.any(lift > 0):
        for d in range(3):
            t[..., d, d] += lift
    return tensor_to_channels(t)


def generate_phantom(spec: PhantomSpec) -> Volume:
    """Deterministic-by-seed synthetic multi-channel volume with mask."""
    dims, c = tuple(spec.dims), spec.channels
    fields = [
        _bandlimited_field(dims, spec.field_cutoff, _rng(spec.seed, _STREAM_FIELD, k))
        for k in range(max(spec.n_fields, 1))
    ]

    rng_inc = _rng(spec.seed, _STREAM_INCLUSION)
    grid = np.stack(
        np.meshgrid(*(np.arange(d, dtype=np.float64) for d in dims), indexing="ij")
    )
    indicators = []
    for _ in range(spec.n_inclusions):
        center = [rng_inc.uniform(0.28 * d, 0.72 * d) for d in dims]
        semi = rng_inc.uniform(*spec.inclusion_radius, size=3) * min(dims)
        indicators.append(_ellipsoid_indicator(dims, center, semi, _random_rotation(rng_inc), grid))
    union = np.any(indicators, axis=0) if indicators else np.zeros(dims, dtype=bool)
    mask = ndimage.binary_dilation(union, structure=_cube(2)) if indicators else union.copy()

    envelope = spec.background_level + (1.0 - spec.background_level) * ndimage.gaussian_filter(
        union.astype(np.float64), sigma=2.0
    )

    rng_sig = _rng(spec.seed, _STREAM_SIGNATURE)
    if c == 6:
        # smooth SPD base: L L^T + floor * I from six smooth fields
        delta = 0.4 * max(spec.signature_scale, 1e-3)
        lmat = np.zeros(dims + (3, 3))
        tri = [(0, 0), (1, 0), (1, 1), (2, 0), (2, 1), (2, 2)]
        for n, (i, j) in enumerate(tri):
            lmat[..., i, j] = 0.45 * fields[n % len(fields)] * (0.6 if i != j else 1.0)
        base = np.einsum("...ab,...cb->...ac", lmat, lmat)
        for d in range(3):
            base[..., d, d] += delta
        signal = tensor_to_channels(base)
        for ind in indicators:
            # narrow eigenvalue range: contrast statistics stay comparable
            # across volumes while geometry varies
            lam = rng_sig.uniform(0.5, 1.0, size=3) * spec.signature_scale
            rot = _random_rotation(rng_sig)
            spd = rot @ np.diag(lam) @ rot.T
            sig = np.array([spd[i, j] for (i, j) in _TENSOR_IDX])
            signal += sig[:, None, None, None] * ind
    else:
        mix = rng_sig.uniform(-1.0, 1.0, size=(c, len(fields)))
        signal = np.einsum("cf,fzyx->czyx", mix, np.stack(fields))
        for ind in indicators:
            sig = rng_sig.uniform(0.5, 1.0, size=c) * spec.signature_scale
            signal += sig[:, None, None, None] * ind

    signal *= envelope

    if spec.noise_amplitude > 0:
        f0 = fields[0]
        span = f0.max() - f0.min()
        level = (f0 - f0.min()) / span if span > 0 else np.zeros(dims)
        amp = spec.noise_amplitude * (0.3 + 0.7 * level)
        if indicators:
            shell = ndimage.binary_dilation(union, structure=_cube(3)) & ~ndimage.binary_erosion(
                union, structure=_cube(3)
            )
            amp = amp * (1.0 + spec.boundary_noise_boost * shell)
        noise = amp * _rng(spec.seed, _STREAM_NOISE).standard_normal((c,) + dims)
        signal = signal + noise

    if c == 6 and np.any(mask):
        signal = _spd_floor(signal, mask, floor=0.05 * max(spec.signature_scale, 1e-3))

    return Volume(signal, mask)


def block_mean_downsample(vol: Volume, r: int) -> Volume:
    """Average each aligned r^3 HR block into one LR voxel, per channel.

    The mask, when present, is downsampled by strict majority vote
    (an LR mask voxel is foreground iff more than half of its HR block is).
    """
    if r < 1:
        raise DataError(f"downsampling factor must be >= 1, got {r}")
    c = vol.channels
    d, h, w = vol.dims
    if d % r or h % r or w % r:
        raise DataError(f"volume dims {vol.dims} are not divisible by r = {r}")
    blocks = vol.data.reshape(c, d // r, r, h // r, r, w // r, r)
    lr = blocks.mean(axis=(2, 4, 6))
    mask = None
    if vol.mask is not None:
        frac = vol.mask.reshape(d // r, r, h // r, r, w // r, r).mean(axis=(1, 3, 5))
        mask = frac > 0.5
    return Volume(lr, mask)


@dataclass
class PatchPair:
    """One aligned (LR input, HR target) pair with provenance."""

    lr_patch: np.ndarray  # (c, 11, 11, 11)
    hr_patch: np.ndarray  # (c, 7r, 7r, 7r)
    provenance: tuple = ()  # (volume id, HR corner index)


def sample_patch_pairs(
    hr_vol: Volume,
    r: int,
    n: int,
    seed: int,
    include_exterior: bool = True,
    volume_id=0,
) -> list:
    """Cut `n` aligned patch pairs, LR side from the block-mean downsample.

    Patch centers are drawn uniformly with replacement from LR foreground
    voxels eroded by the receptive-field margin (2 LR voxels); with
    `include_exterior` the boundary shell (dilation minus erosion by the
    same margin) is eligible too. Patches never extend outside the volume.
    """
    lr_vol = block_mean_downsample(hr_vol, r)
    dims = np.array(lr_vol.dims)
    if np.any(dims < LR_PATCH):
        raise DataError(f"LR dims {lr_vol.dims} are smaller than the {LR_PATCH}^3 input patch")

    if lr_vol.mask is None:
        eligible = np.ones(lr_vol.dims, dtype=bool)
    else:
        interior = ndimage.binary_erosion(lr_vol.mask, structure=_cube(_MARGIN))
        if include_exterior:
            eligible = ndimage.binary_dilation(lr_vol.mask, structure=_cube(_MARGIN))
        else:
            eligible = interior

    half = LR_PATCH // 2
    inb = np.zeros(lr_vol.dims, dtype=bool)
    inb[half : dims[0] - half, half : dims[1] - half, half : dims[2] - half] = True
    eligible &= inb
    centers = np.argwhere(eligible)
    if centers.shape[0] == 0:
        raise DataError(
            f"no eligible patch centers: {n} pairs unreachable for this mask/volume size"
        )

    rng = _rng(seed, _STREAM_SAMPLER)
    picks = centers[rng.integers(0, centers.shape[0], size=n)]
    pairs = []
    for cz, cy, cx in picks:
        lz, ly, lx = cz - half, cy - half, cx - half
        lr_patch = lr_vol.data[:, lz : lz + LR_PATCH, ly : ly + LR_PATCH, lx : lx + LR_PATCH]
        hz, hy, hx = (r * (lz + _MARGIN), r * (ly + _MARGIN), r * (lx + _MARGIN))
        e = HR_CORE * r
        hr_patch = hr_vol.data[:, hz : hz + e, hy : hy + e, hx : hx + e]
        pairs.append(
            PatchPair(np.ascontiguousarray(lr_patch), np.ascontiguousarray(hr_patch),
                      (volume_id, (int(hz), int(hy), int(hx))))
        )
    return pairs


def split_train_valid(pairs: list, fraction: float, seed: int):
    """Disjoint seeded shuffle-split; `fraction` is the share of the first part."""
    if not 0.0 < fraction < 1.0:
        raise DataError(f"fraction must be in (0, 1), got {fraction}")
    n = len(pairs)
    n_first = int(round(fraction * n))
    if n_first < 1 or n_first >= n:
        raise DataError(f"split of {n} items at fraction {fraction} leaves an empty part")
    perm = _rng(seed, _STREAM_SAMPLER, 1).permutation(n)
    first = [pairs[i] for i in perm[:n_first]]
    second = [pairs[i] for i in perm[n_first:]]
    return first, second


def pairs_to_arrays(pairs: list):
    """Stack patch pairs into (B,c,11,11,11) and (B,c,7r,7r,7r) arrays."""
    lr = np.stack([p.lr_patch for p in pairs])
    hr = np.stack([p.hr_patch for p in pairs])
    return lr, hr


# ---------------------------------------------------------------------------
# VXL1 container
# ---------------------------------------------------------------------------

_MAGIC = b"VXL1"
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


def write_volume(path, vol: Volume, dtype: str = "float64") -> None:
    """Write a volume in the VXL1 container (see module docstring)."""
    code = 2 if dtype == "float64" else 1 if dtype == "float32" else None
    if code is None:
        raise DataError(f"unsupported dtype {dtype!r}, use 'float32' or 'float64'")
    check_finite(vol.data, "volume data")
    c = vol.channels
    d, h, w = vol.dims
    out = bytearray()
    out += _MAGIC
    out += struct.pack("<H", 1)
    out += struct.pack("<4I", c, d, h, w)
    out += struct.pack("<B", code)
    out += struct.pack("<B", 1 if vol.mask is not None else 0)
    if vol.mask is not None:
        out += np.packbits(vol.mask.ravel()).tobytes()
    out += np.ascontiguousarray(vol.data, dtype=_DTYPES[code]).tobytes()
    with open(path, "wb") as f:
        f.write(bytes(out))


def read_volume(path) -> Volume:
    """Read a VXL1 container back into a `Volume` (data as float64)."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _MAGIC:
        raise DataError(f"{path}: not a VXL1 volume (bad magic {raw[:4]!r})")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != 1:
        raise DataError(f"{path}: unsupported VXL1 version {version}")
    c, d, h, w = struct.unpack_from("<4I", raw, 6)
    code, mask_flag = struct.unpack_from("<2B", raw, 22)
    if code not in _DTYPES:
        raise DataError(f"{path}: unknown dtype code {code}")
    off = 24
    mask = None
    if mask_flag:
        nbytes = -(-d * h * w // 8)
        bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8, count=nbytes, offset=off))
        mask = bits[: d * h * w].astype(bool).reshape(d, h, w)
        off += nbytes
    count = c * d * h * w
    expected = off + count * _DTYPES[code].itemsize
    if len(raw) != expected:
        raise DataError(f"{path}: file length {len(raw)} != expected {expected}")
    data = np.frombuffer(raw, dtype=_DTYPES[code], count=count, offset=off)
    return Volume(data.astype(np.float64).reshape(c, d, h, w), mask)
