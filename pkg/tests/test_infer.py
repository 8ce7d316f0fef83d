import numpy as np
import pytest

from voxelsr.data import PhantomSpec, Volume, block_mean_downsample, generate_phantom
from voxelsr.errors import ConfigError, DataError, ShapeMismatchError
from voxelsr.infer import (
    PredictiveResult,
    ensemble_combine,
    mc_moments,
    mc_predict,
    scalar_map_propagate,
    super_resolve,
    trilinear_upsample,
    upsample_mask,
)
from voxelsr.model import ArchConfig, forward_hetero, init_params


@pytest.fixture(scope="module")
def small_vol():
    return generate_phantom(PhantomSpec(dims=(24, 24, 24), channels=2, seed=5))


@pytest.fixture(scope="module")
def lr_vol(small_vol):
    return block_mean_downsample(small_vol, 2)


class TestSuperResolve:
    def test_output_dims(self, lr_vol):
        p = init_params(ArchConfig(2, 2), 0)
        out = super_resolve(p, lr_vol)
        assert out.data.shape == (2, 24, 24, 24)

    def test_tile_size_invariance_exact_mode(self, lr_vol):
        p = init_params(ArchConfig(2, 2), 1)
        a = super_resolve(p, lr_vol, tile=11, exact=True)
        b = super_resolve(p, lr_vol, tile=22, exact=True)
        c = super_resolve(p, lr_vol, tile=7, exact=True)
        assert np.array_equal(a.data, b.data)
        assert np.array_equal(a.data, c.data)

    def test_tile_size_invariance_fast_mode_within_bound(self, lr_vol):
        # BLAS kernels reassociate sums between shapes; bounded at 1e-9 relative
        p = init_params(ArchConfig(2, 2), 1)
        a = super_resolve(p, lr_vol, tile=11)
        b = super_resolve(p, lr_vol, tile=22)
        scale = np.abs(a.data).max()
        assert np.abs(a.data - b.data).max() <= 1e-9 * scale

    def test_mask_upsampled(self, lr_vol):
        p = init_params(ArchConfig(2, 2), 0)
        out = super_resolve(p, lr_vol)
        assert out.mask.shape == (24, 24, 24)
        assert np.array_equal(out.mask, upsample_mask(lr_vol.mask, 2))

    def test_channel_mismatch(self, lr_vol):
        p = init_params(ArchConfig(2, 3), 0)
        with pytest.raises(ShapeMismatchError):
            super_resolve(p, lr_vol)

    def test_too_small_volume(self):
        p = init_params(ArchConfig(2, 1), 0)
        with pytest.raises(DataError):
            super_resolve(p, Volume(np.zeros((1, 4, 4, 4))))

    def test_coverage_each_voxel_written_once(self):
        # accumulate tile output-region indicators exactly as the tiler slices
        from voxelsr.infer import _PAD

        dims = (13, 9, 17)
        for tile in (11, 22):
            step = tile - 2 * _PAD
            cover = np.zeros(dims, dtype=int)
            for z0 in range(0, dims[0], step):
                ze = min(z0 + step, dims[0])
                for y0 in range(0, dims[1], step):
                    ye = min(y0 + step, dims[1])
                    for x0 in range(0, dims[2], step):
                        xe = min(x0 + step, dims[2])
                        cover[z0:ze, y0:ye, x0:xe] += 1
            assert np.all(cover == 1)


class TestMcMoments:
    def test_two_sample_hand_example(self):
        mus = np.array([[1.0], [3.0]])
        sig2 = np.zeros((2, 1))
        mean, var, _ = mc_moments(mus, sig2)
        assert mean[0] == 2.0
        assert var[0] == 1.0

    def test_single_sample_returns_sigma2(self):
        mus = np.array([[2.5]])
        sig2 = np.array([[0.49]])
        mean, var, _ = mc_moments(mus, sig2)
        assert mean[0] == 2.5
        assert var[0] == pytest.approx(0.49, rel=1e-15)

    def test_clamp_reports_preclamp_min(self):
        mean, var, pre = mc_moments(np.array([[1.0], [1.0]]), None)
        assert var[0] == 0.0
        assert pre <= 0.0


class TestMcPredict:
    def test_t1_hetero_variance_equals_sigma_squared(self, lr_vol):
        p = init_params(ArchConfig(2, 2, "hetero"), 0)
        result = mc_predict(p, lr_vol, T=1, seed=0)
        het = forward_hetero(p, np.pad(lr_vol.data, ((0, 0),) + ((2, 2),) * 3, mode="reflect"))
        assert np.array_equal(result.variance.data, het.sigma_diag.data**2)
        assert np.array_equal(result.mean.data, het.mu.data)

    def test_deterministic_variant_rejects_t_gt_1(self, lr_vol):
        p = init_params(ArchConfig(2, 2, "baseline"), 0)
        with pytest.raises(ConfigError, match="deterministic"):
            mc_predict(p, lr_vol, T=4, seed=0)

    def test_baseline_variance_is_iso_constant(self, lr_vol):
        p = init_params(ArchConfig(2, 2, "baseline"), 0)
        result = mc_predict(p, lr_vol, T=1, seed=0, iso_variance=0.125)
        assert np.allclose(result.variance.data, 0.125)

    def test_variational_mean_converges(self, lr_vol):
        p = init_params(ArchConfig(2, 2, "baseline+vd1"), 0)
        det = super_resolve(p, lr_vol)
        result = mc_predict(p, lr_vol, T=16, seed=3)
        # the predictive mean sits near the posterior-mean forward pass, apart
        # from the Jensen gap of the nonlinear net (~6% at log s^2 = -10)
        scale = np.abs(det.data).mean()
        assert np.abs(result.mean.data - det.data).mean() < 0.15 * scale
        assert result.provenance["T"] == 16
        assert np.all(result.variance.data >= 0)

    def test_provenance_fields(self, lr_vol):
        p = init_params(ArchConfig(2, 2, "hetero+vd1"), 0)
        result = mc_predict(p, lr_vol, T=2, seed=9)
        assert result.provenance["variant"] == "hetero+vd1"
        assert result.provenance["seed"] == 9
        assert len(result.provenance["model_checksum"]) == 64


class TestEnsembleCombine:
    def _mk(self, mean, var):
        m = np.asarray(mean, dtype=np.float64).reshape(1, 1, 1, -1)
        v = np.asarray(var, dtype=np.float64).reshape(1, 1, 1, -1)
        return PredictiveResult(Volume(m), Volume(v))

    def test_single_input_identity(self):
        r = self._mk([1.0, 2.0], [0.5, 0.5])
        out = ensemble_combine([r])
        assert np.allclose(out.mean.data, r.mean.data)
        assert np.allclose(out.variance.data, r.variance.data)

    def test_equal_variances_average(self):
        out = ensemble_combine([self._mk([0.0], [2.0]), self._mk([4.0], [2.0])])
        assert out.mean.data.ravel()[0] == pytest.approx(2.0)
        assert out.variance.data.ravel()[0] == pytest.approx(1.0)

    def test_hand_example(self):
        out = ensemble_combine([self._mk([0.0], [1.0]), self._mk([10.0], [4.0])])
        assert out.mean.data.ravel()[0] == pytest.approx(2.0, abs=1e-15)
        assert out.variance.data.ravel()[0] == pytest.approx(0.8, abs=1e-15)

    def test_permutation_invariant(self, rng):
        members = [self._mk(rng.standard_normal(4), rng.uniform(0.1, 2.0, 4)) for _ in range(4)]
        a = ensemble_combine(members)
        b = ensemble_combine(members[::-1])
        assert np.allclose(a.mean.data, b.mean.data)
        assert np.allclose(a.variance.data, b.variance.data)

    def test_never_exceeds_best_member_variance(self, rng):
        members = [self._mk(rng.standard_normal(8), rng.uniform(0.1, 2.0, 8)) for _ in range(3)]
        out = ensemble_combine(members)
        best = np.min([m.variance.data for m in members], axis=0)
        assert np.all(out.variance.data <= best + 1e-15)

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            ensemble_combine([])

    def test_dim_mismatch_rejected(self):
        a = self._mk([1.0], [1.0])
        b = PredictiveResult(Volume(np.zeros((1, 2, 1, 1))), Volume(np.zeros((1, 2, 1, 1))))
        with pytest.raises(ShapeMismatchError):
            ensemble_combine([a, b])


def _const_tensor_params(diag, offdiag=(0.0, 0.0, 0.0)):
    """Hetero model that predicts a constant tensor field with tiny sigma."""
    p = init_params(ArchConfig(2, 6, "hetero"), 0)
    for net in ("mean", "scale"):
        for layer in p.nets[net]:
            layer.weight.data[...] = 0.0
            layer.bias.data[...] = 0.0
    p.nets["scale"][-1].bias.data[...] = -1e4  # sigma -> floor
    dxx, dyy, dzz = diag
    dxy, dxz, dyz = offdiag
    p.norm.out_mean[...] = np.array([dxx, dxy, dxz, dyy, dyz, dzz])
    return p


class TestScalarMapPropagate:
    def test_isotropic_md_fa(self):
        a = 0.8
        p = _const_tensor_params((a, a, a))
        lr = Volume(np.zeros((6, 6, 6, 6)))
        md_mean, md_var = scalar_map_propagate(p, lr, T=4, seed=0, which="md",
                                               include_intrinsic=False)
        fa_mean, fa_var = scalar_map_propagate(p, lr, T=4, seed=0, which="fa",
                                               include_intrinsic=False)
        assert np.allclose(md_mean.data, a, atol=1e-10)
        assert np.allclose(md_var.data, 0.0, atol=1e-12)
        assert np.allclose(fa_mean.data, 0.0, atol=1e-6)

    def test_degenerate_tensor_fa_one(self):
        p = _const_tensor_params((1.0, 0.0, 0.0))
        lr = Volume(np.zeros((6, 6, 6, 6)))
        fa_mean, _ = scalar_map_propagate(p, lr, T=2, seed=0, which="fa",
                                          include_intrinsic=False)
        assert np.allclose(fa_mean.data, 1.0, atol=1e-9)

    def test_wrong_channel_count_rejected(self):
        p = init_params(ArchConfig(2, 2, "hetero"), 0)
        with pytest.raises(ConfigError, match="6-channel"):
            scalar_map_propagate(p, Volume(np.zeros((2, 6, 6, 6))), T=1, seed=0)

    def test_requires_stochastic_variant(self):
        p = init_params(ArchConfig(2, 6, "baseline"), 0)
        with pytest.raises(ConfigError):
            scalar_map_propagate(p, Volume(np.zeros((6, 6, 6, 6))), T=2, seed=0)


class TestTrilinearUpsample:
    def test_linear_ramp_exact_in_interior(self):
        # block-mean of a linear ramp is linear; trilinear recovers it exactly
        z = np.arange(16.0)[:, None, None]
        y = np.arange(16.0)[None, :, None]
        x = np.arange(16.0)[None, None, :]
        hr = (2.0 * z - 0.5 * y + 0.25 * x)[None]
        lr = block_mean_downsample(Volume(hr), 2)
        up = trilinear_upsample(lr, 2)
        inner = np.abs(up.data - hr)[0, 2:-2, 2:-2, 2:-2]
        assert inner.max() <= 1e-10

    def test_output_dims(self, lr_vol):
        up = trilinear_upsample(lr_vol, 2)
        assert up.data.shape == (2, 24, 24, 24)
