import math

import numpy as np
import pytest

from voxelsr.errors import DataError, ShapeMismatchError
from voxelsr.metrics import (
    SSIM_K1,
    SSIM_K2,
    SSIM_WINDOW,
    metric_records,
    mssim,
    psnr,
    region_masks,
    rmse,
    uncertainty_correlation,
    write_csv_slice,
    write_jsonl,
    write_pgm,
)


def brute_force_mssim(pred, truth, region):
    """Windowed SSIM oracle: explicit loops, windows fully inside the region."""
    if pred.ndim == 3:
        pred, truth = pred[None], truth[None]
    half = SSIM_WINDOW // 2
    tr = truth[..., region]
    drange = tr.max() - tr.min()
    c1, c2 = (SSIM_K1 * drange) ** 2, (SSIM_K2 * drange) ** 2
    scores = []
    for ch in range(pred.shape[0]):
        vals = []
        d, h, w = region.shape
        for z in range(half, d - half):
            for y in range(half, h - half):
                for x in range(half, w - half):
                    win = region[z - half : z + half + 1, y - half : y + half + 1, x - half : x + half + 1]
                    if not win.all():
                        continue
                    a = pred[ch, z - half : z + half + 1, y - half : y + half + 1, x - half : x + half + 1]
                    b = truth[ch, z - half : z + half + 1, y - half : y + half + 1, x - half : x + half + 1]
                    ma, mb = a.mean(), b.mean()
                    va, vb = a.var(), b.var()
                    cov = ((a - ma) * (b - mb)).mean()
                    vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
        scores.append(np.mean(vals))
    return float(np.mean(scores))


class TestRegionMasks:
    def test_margin_zero(self):
        mask = np.zeros((6, 6, 6), dtype=bool)
        mask[1:5, 1:5, 1:5] = True
        rm = region_masks(mask, 0)
        assert np.array_equal(rm.interior, mask)
        assert not rm.exterior.any()

    def test_solid_cube_erosion(self):
        mask = np.zeros((24, 24, 24), dtype=bool)
        mask[2:22, 2:22, 2:22] = True  # 20^3 cube
        rm = region_masks(mask, 2)
        expected = np.zeros_like(mask)
        expected[4:20, 4:20, 4:20] = True  # 16^3 inner cube
        assert np.array_equal(rm.interior, expected)
        assert np.array_equal(rm.exterior, mask & ~expected)

    def test_disjoint_random(self, rng):
        mask = rng.random((12, 12, 12)) > 0.35
        mask[5:8, 5:8, 5:8] = True
        rm = region_masks(mask, 1)
        assert not (rm.interior & rm.exterior).any()
        assert np.array_equal(rm.interior | rm.exterior, mask)

    def test_fully_eroded_rejected(self):
        mask = np.zeros((6, 6, 6), dtype=bool)
        mask[2, 2, 2] = True
        with pytest.raises(DataError, match="empty interior"):
            region_masks(mask, 2)

    def test_empty_mask_rejected(self):
        with pytest.raises(DataError):
            region_masks(np.zeros((4, 4, 4), dtype=bool), 0)


@pytest.fixture
def region_all():
    return np.ones((8, 8, 8), dtype=bool)


class TestRmsePsnr:
    def test_perfect_prediction(self, rng, region_all):
        x = rng.standard_normal((2, 8, 8, 8))
        assert rmse(x, x, region_all) == 0.0
        assert math.isinf(psnr(x, x, region_all))
        assert mssim(x, x, region_all) == pytest.approx(1.0, abs=1e-12)

    def test_constant_offset(self, rng, region_all):
        x = rng.standard_normal((2, 8, 8, 8))
        assert rmse(x + 0.5, x, region_all) == pytest.approx(0.5, rel=1e-12)

    def test_rmse_permutation_invariant(self, rng, region_all):
        x = rng.standard_normal((1, 8, 8, 8))
        y = rng.standard_normal((1, 8, 8, 8))
        perm = rng.permutation(512)
        xp = x.reshape(1, -1)[:, perm].reshape(1, 8, 8, 8)
        yp = y.reshape(1, -1)[:, perm].reshape(1, 8, 8, 8)
        assert rmse(x, y, region_all) == pytest.approx(rmse(xp, yp, region_all), rel=1e-12)

    def test_psnr_with_explicit_peak(self, rng, region_all):
        x = rng.standard_normal((1, 8, 8, 8))
        y = x + 0.1
        assert psnr(y, x, region_all, peak=1.0) == pytest.approx(20.0 * np.log10(1.0 / 0.1), rel=1e-6)

    def test_out_of_region_voxels_ignored(self, rng):
        x = rng.standard_normal((1, 8, 8, 8))
        y = x + 0.25
        region = np.zeros((8, 8, 8), dtype=bool)
        region[2:6, 2:6, 2:6] = True
        base = rmse(y, x, region)
        y2 = y.copy()
        y2[0, 0, 0, 0] += 1e6  # outside the region
        assert rmse(y2, x, region) == base
        x2 = x.copy()
        x2[0, 7, 7, 7] = 1e9
        assert psnr(y, x2, region) == psnr(y, x, region)

    def test_empty_region_rejected(self, rng):
        x = rng.standard_normal((1, 8, 8, 8))
        with pytest.raises(DataError):
            rmse(x, x, np.zeros((8, 8, 8), dtype=bool))

    def test_dim_mismatch_rejected(self, rng, region_all):
        with pytest.raises(ShapeMismatchError):
            rmse(rng.standard_normal((1, 8, 8, 8)), rng.standard_normal((1, 8, 8, 7)), region_all)


class TestMssim:
    def test_matches_brute_force_oracle(self, rng, region_all):
        pred = rng.standard_normal((1, 8, 8, 8))
        truth = pred + 0.2 * rng.standard_normal((1, 8, 8, 8))
        got = mssim(pred, truth, region_all)
        ref = brute_force_mssim(pred, truth, region_all)
        assert abs(got - ref) <= 1e-10

    def test_oracle_with_irregular_region(self, rng):
        pred = rng.standard_normal((1, 10, 10, 10))
        truth = pred + 0.3 * rng.standard_normal((1, 10, 10, 10))
        region = np.zeros((10, 10, 10), dtype=bool)
        region[1:9, 1:9, 1:9] = True
        region[4, 4, 4] = False  # punch a hole: fewer full windows
        got = mssim(pred, truth, region)
        ref = brute_force_mssim(pred, truth, region)
        assert abs(got - ref) <= 1e-10

    def test_symmetric(self, rng, region_all):
        a = rng.standard_normal((1, 8, 8, 8))
        b = a + 0.3 * rng.standard_normal((1, 8, 8, 8))
        assert mssim(a, b, region_all) == pytest.approx(mssim(b, a, region_all), abs=1e-9)

    def test_out_of_region_voxels_ignored(self, rng):
        pred = rng.standard_normal((1, 10, 10, 10))
        truth = pred + 0.2 * rng.standard_normal((1, 10, 10, 10))
        region = np.zeros((10, 10, 10), dtype=bool)
        region[2:8, 2:8, 2:8] = True
        base = mssim(pred, truth, region)
        pred2 = pred.copy()
        pred2[0, 0, :, :] += 50.0
        assert mssim(pred2, truth, region) == pytest.approx(base, abs=1e-12)

    def test_zero_dynamic_range_rejected(self, region_all):
        x = np.ones((1, 8, 8, 8))
        with pytest.raises(DataError, match="dynamic range"):
            mssim(x, x, region_all)

    def test_region_too_small_rejected(self, rng):
        region = np.zeros((8, 8, 8), dtype=bool)
        region[3:5, 3:5, 3:5] = True  # no full 5^3 window fits
        x = rng.standard_normal((1, 8, 8, 8))
        with pytest.raises(DataError, match="window"):
            mssim(x, x + 0.1, region)


class TestUncertaintyCorrelation:
    def test_monotone_identity(self, rng, region_all):
        err = rng.random((8, 8, 8))
        assert uncertainty_correlation(err, err, region_all) == pytest.approx(1.0)

    def test_anti_monotone(self, rng, region_all):
        err = rng.random((8, 8, 8))
        assert uncertainty_correlation(-err + 2.0, err, region_all) == pytest.approx(-1.0)

    def test_independent_fields_near_zero(self, region_all):
        rng = np.random.default_rng(123)
        n = 22
        region = np.ones((n, n, n), dtype=bool)  # 10648 >= 1e4 voxels
        a = rng.random((n, n, n))
        b = rng.random((n, n, n))
        rho = uncertainty_correlation(a, b, region)
        assert abs(rho) < 0.1

    def test_constant_input_rejected(self, region_all):
        with pytest.raises(DataError, match="constant"):
            uncertainty_correlation(np.ones((8, 8, 8)), np.random.rand(8, 8, 8), region_all)


class TestReportsAndExports:
    def test_metric_records_layout(self, rng):
        truth = rng.standard_normal((2, 12, 12, 12))
        pred = truth + 0.1 * rng.standard_normal(truth.shape)
        mask = np.zeros((12, 12, 12), dtype=bool)
        mask[1:11, 1:11, 1:11] = True
        regions = region_masks(mask, 1)
        recs = metric_records(pred, truth, regions)
        keys = {(r["metric"], r["region"]) for r in recs}
        for metric in ("rmse", "psnr", "mssim"):
            for region in ("interior", "exterior"):
                assert (metric, region) in keys
        assert not any(r["metric"] == "uncertainty_spearman" for r in recs)
        var = rng.random(truth.shape)
        recs2 = metric_records(pred, truth, regions, pred_var=var)
        assert any(r["metric"] == "uncertainty_spearman" for r in recs2)

    def test_infinite_psnr_serialized_as_sentinel(self, rng):
        truth = rng.standard_normal((1, 12, 12, 12))
        mask = np.zeros((12, 12, 12), dtype=bool)
        mask[1:11, 1:11, 1:11] = True
        regions = region_masks(mask, 1)
        recs = metric_records(truth.copy(), truth, regions)
        psnr_recs = [r for r in recs if r["metric"] == "psnr"]
        assert all(r["value"] is None and r["infinite"] for r in psnr_recs)

    def test_jsonl_round_trip(self, tmp_path):
        import json

        path = tmp_path / "report.jsonl"
        write_jsonl(path, [{"a": 1}, {"b": 2.5}])
        lines = path.read_text().strip().split("\n")
        assert [json.loads(l) for l in lines] == [{"a": 1}, {"b": 2.5}]

    def test_pgm_header_and_size(self, tmp_path, rng):
        img = rng.random((6, 9))
        path = tmp_path / "slice.pgm"
        write_pgm(path, img)
        raw = path.read_bytes()
        assert raw.startswith(b"P5\n9 6\n65535\n")
        assert len(raw) == len(b"P5\n9 6\n65535\n") + 6 * 9 * 2

    def test_csv_slice(self, tmp_path):
        img = np.array([[1.5, 2.5], [3.0, -1.0]])
        path = tmp_path / "slice.csv"
        write_csv_slice(path, img)
        rows = [line.split(",") for line in path.read_text().strip().split("\n")]
        assert float(rows[0][1]) == 2.5
        assert float(rows[1][0]) == 3.0
