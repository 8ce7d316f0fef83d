"""Reconstruction metrics over interior/exterior regions, plus uncertainty diagnostics.

Regions are derived from the HR foreground mask: the interior is the mask
eroded by a cube of the given margin (default: the receptive-field radius
in HR voxels), the exterior is the remaining boundary shell. Every metric
is computed strictly from in-region voxels; for MSSIM that means only
windows whose full 5^3 support lies inside the region contribute.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage, stats

from .errors import DataError, ShapeMismatchError

__all__ = [
    "RegionMasks",
    "region_masks",
    "rmse",
    "psnr",
    "mssim",
    "uncertainty_correlation",
    "metric_records",
    "write_jsonl",
    "write_pgm",
    "write_csv_slice",
]

SSIM_WINDOW = 5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class RegionMasks:
    """Disjoint interior/exterior partition of the HR foreground."""

    interior: np.ndarray
    exterior: np.ndarray

    def __post_init__(self):
        if self.interior.shape != self.exterior.shape:
            raise ShapeMismatchError("interior and exterior dims differ")
        if np.any(self.interior & self.exterior):
            raise DataError("interior and exterior overlap")


def region_masks(mask: np.ndarray, margin_voxels: int) -> RegionMasks:
    """Erode the foreground by a cube of radius `margin_voxels` to split it.

    interior = eroded mask; exterior = mask minus interior.
    """
    mask = np.asarray(mask, dtype=bool)
    if not np.any(mask):
        raise DataError("foreground mask is empty")
    if margin_voxels < 0:
        raise DataError(f"margin must be >= 0, got {margin_voxels}")
    if margin_voxels == 0:
        interior = mask.copy()
    else:
        e = 2 * margin_voxels + 1
        interior = ndimage.binary_erosion(mask, structure=np.ones((e, e, e), dtype=bool))
    if not np.any(interior):
        raise DataError(f"margin {margin_voxels} erodes the mask to an empty interior")
    return RegionMasks(interior=interior, exterior=mask & ~interior)


def _check_pair(pred: np.ndarray, truth: np.ndarray, region: np.ndarray):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeMismatchError(f"pred dims {pred.shape} != truth dims {truth.shape}")
    region = np.asarray(region, dtype=bool)
    if region.shape != pred.shape[-3:]:
        raise ShapeMismatchError(f"region dims {region.shape} != volume dims {pred.shape[-3:]}")
    if not np.any(region):
        raise DataError("region is empty")
    return pred, truth, region


def rmse(pred, truth, region) -> float:
    """Root mean squared error over region voxels x channels."""
    pred, truth, region = _check_pair(pred, truth, region)
    d = (pred - truth)[..., region]
    return float(np.sqrt(np.mean(d * d)))


def psnr(pred, truth, region, peak: float | None = None) -> float:
    """20 log10(peak / RMSE); peak defaults to truth max-abs over the region.

    Returns ``math.inf`` for an exact match (serialized as a null-valued
    record with an ``infinite`` flag by `metric_records`).
    """
    pred, truth, region = _check_pair(pred, truth, region)
    if peak is None:
        peak = float(np.max(np.abs(truth[..., region])))
    if peak <= 0:
        raise DataError("PSNR peak must be positive")
    e = rmse(pred, truth, region)
    if e == 0.0:
        return math.inf
    return float(20.0 * np.log10(peak / e))


def _window_stats(x: np.ndarray) -> tuple:
    """Mean and mean-of-squares over centered 5^3 windows (valid part trimmed later)."""
    mu = ndimage.uniform_filter(x, size=SSIM_WINDOW, mode="constant")
    m2 = ndimage.uniform_filter(x * x, size=SSIM_WINDOW, mode="constant")
    return mu, m2


def mssim(pred, truth, region) -> float:
    """Mean local SSIM with a uniform 5^3 window, channels averaged.

    Only window positions whose entire 5^3 support lies within the region
    (and the volume) contribute, so out-of-region voxels never influence
    the score. The dynamic range is taken from the truth over the region.
    """
    pred, truth, region = _check_pair(pred, truth, region)
    if pred.ndim == 3:
        pred, truth = pred[None], truth[None]
    half = SSIM_WINDOW // 2
    e = 2 * half + 1
    valid = ndimage.binary_erosion(
        region, structure=np.ones((e, e, e), dtype=bool), border_value=0
    )
    if not np.any(valid):
        raise DataError("region too small: no full SSIM window fits inside it")
    tr = truth[..., region]
    drange = float(tr.max() - tr.min())
    if drange <= 0:
        raise DataError("truth has zero dynamic range over the region; MSSIM undefined")
    c1 = (SSIM_K1 * drange) ** 2
    c2 = (SSIM_K2 * drange) ** 2
    scores = []
    for ch in range(pred.shape[0]):
        x, y = pred[ch], truth[ch]
        mx, mx2 = _window_stats(x)
        my, my2 = _window_stats(y)
        mxy = ndimage.uniform_filter(x * y, size=SSIM_WINDOW, mode="constant")
        vx = np.maximum(mx2 - mx * mx, 0.0)
        vy = np.maximum(my2 - my * my, 0.0)
        cxy = mxy - mx * my
        ssim_map = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        scores.append(float(np.mean(ssim_map[valid])))
    return float(np.mean(scores))


def uncertainty_correlation(pred_var, sq_error, region) -> float:
    """Spearman rank correlation of predictive variance vs squared error.

    Ties receive mid-ranks. Raises `DataError` when either input is
    constant over the region (the correlation is undefined).
    """
    pred_var, sq_error, region = _check_pair(pred_var, sq_error, region)
    a = pred_var[..., region].ravel()
    b = sq_error[..., region].ravel()
    if np.all(a == a[0]) or np.all(b == b[0]):
        raise DataError("Spearman correlation undefined for constant input")
    rho = stats.spearmanr(a, b).statistic
    return float(rho)


# ---------------------------------------------------------------------------
# report records and exports
# ---------------------------------------------------------------------------


def metric_records(
    pred,
    truth,
    regions: RegionMasks,
    pred_var=None,
    peak: float | None = None,
) -> list:
    """One JSON-ready record per metric x region (channels pooled).

    Adds an ``uncertainty_spearman`` record per region when a variance
    volume is supplied.
    """
    records = []
    for region_name in ("interior", "exterior"):
        region = getattr(regions, region_name)
        if not np.any(region):
            continue
        for metric, fn in (("rmse", rmse), ("psnr", lambda p, t, m: psnr(p, t, m, peak)), ("mssim", mssim)):
            value = fn(pred, truth, region)
            rec = {"metric": metric, "region": region_name, "channels": "all"}
            if math.isinf(value):
                rec.update(value=None, infinite=True)
            else:
                rec["value"] = value
            records.append(rec)
        if pred_var is not None:
            err = np.mean((np.asarray(pred) - np.asarray(truth)) ** 2, axis=0)
            var = np.mean(np.asarray(pred_var), axis=0)
            rho = uncertainty_correlation(var, err, region)
            records.append(
                {"metric": "uncertainty_spearman", "region": region_name, "channels": "all", "value": rho}
            )
    return records


def write_jsonl(path_or_stream, records: list) -> None:
    """Write records as line-oriented JSON."""
    def _dump(stream):
        for rec in records:
            stream.write(json.dumps(rec, sort_keys=True) + "\n")

    if hasattr(path_or_stream, "write"):
        _dump(path_or_stream)
    else:
        with open(path_or_stream, "w") as f:
            _dump(f)


def write_pgm(path, image: np.ndarray) -> None:
    """Export a 2-D slice as a 16-bit binary PGM, min-max normalized."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ShapeMismatchError(f"PGM export needs a 2-D slice, got {img.shape}")
    lo, hi = img.min(), img.max()
    scale = 65535.0 / (hi - lo) if hi > lo else 0.0
    pix = ((img - lo) * scale).round().astype(">u2")
    with open(path, "wb") as f:
        f.write(f"P5\n{img.shape[1]} {img.shape[0]}\n65535\n".encode())
        f.write(pix.tobytes())


def write_csv_slice(path, image: np.ndarray) -> None:
    """Export a 2-D slice as CSV (one row per line)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ShapeMismatchError(f"CSV export needs a 2-D slice, got {img.shape}")
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        for row in img:
            w.writerow([repr(v) for v in row])
