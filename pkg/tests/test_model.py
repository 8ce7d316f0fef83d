import numpy as np
import pytest

from voxelsr.errors import ConfigError, DataError, ShapeMismatchError
from voxelsr.model import (
    SIGMA_FLOOR,
    ArchConfig,
    NormStats,
    forward_hetero,
    forward_mean,
    forward_stochastic,
    init_params,
    load_checkpoint,
    sample_weights,
    save_checkpoint,
)

NEAR_ZERO_LOG_S2 = -745.0  # exp(0.5 * this) underflows below one ulp of any weight


class TestArchConfig:
    def test_variant_validation(self):
        with pytest.raises(ConfigError):
            ArchConfig(2, 6, "dropout")
        with pytest.raises(ConfigError):
            ArchConfig(0, 6)

    def test_layer_spec_final_channels(self):
        cfg = ArchConfig(3, 4)
        assert cfg.layer_spec()[-1] == (3, 27 * 4)

    @pytest.mark.parametrize("n,r", [(5, 2), (11, 2), (22, 3)])
    def test_output_edge(self, n, r):
        assert ArchConfig(r, 1).output_edge(n) == (n - 4) * r


class TestInitParams:
    def test_deterministic(self):
        a = init_params(ArchConfig(2, 3, "hetero+vd1"), seed=9)
        b = init_params(ArchConfig(2, 3, "hetero+vd1"), seed=9)
        for (na, ta), (nb, tb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            assert np.array_equal(ta.data, tb.data)

    def test_layer1_weight_shape(self):
        p = init_params(ArchConfig(2, 6), 0)
        assert p.nets["mean"][0].weight.shape == (50, 6, 3, 3, 3)

    def test_he_scaled_std(self):
        # c=8 gives 50*8*27 = 10800 >= 1e4 samples
        p = init_params(ArchConfig(2, 8), 0)
        w = p.nets["mean"][0].weight.data
        expected = np.sqrt(2.0 / (8 * 27))
        assert abs(w.std() - expected) / expected < 0.10

    def test_biases_zero_and_log_s2_init(self):
        p = init_params(ArchConfig(2, 2, "baseline+vd1"), 3)
        for layer in p.nets["mean"]:
            assert not layer.bias.data.any()
            assert np.all(layer.log_s2.data == -10.0)

    def test_vd2_per_filter_shapes(self):
        p = init_params(ArchConfig(2, 2, "baseline+vd2"), 3)
        for layer, (_, cout) in zip(p.nets["mean"], ArchConfig(2, 2).layer_spec()):
            assert layer.log_s2.shape == (cout,)


class TestForwardMean:
    @pytest.mark.parametrize("n,r", [(5, 2), (11, 2), (8, 3)])
    def test_shape_law(self, n, r, rng):
        p = init_params(ArchConfig(r, 2), 0)
        out = forward_mean(p, rng.standard_normal((2, n, n, n)))
        e = (n - 4) * r
        assert out.shape == (2, e, e, e)

    def test_input_smaller_than_receptive_field(self, rng):
        p = init_params(ArchConfig(2, 2), 0)
        with pytest.raises(ShapeMismatchError):
            forward_mean(p, rng.standard_normal((2, 4, 4, 4)))

    def test_channel_mismatch(self, rng):
        p = init_params(ArchConfig(2, 2), 0)
        with pytest.raises(ShapeMismatchError):
            forward_mean(p, rng.standard_normal((3, 5, 5, 5)))

    def test_zero_weights_give_target_mean(self, rng):
        p = init_params(ArchConfig(2, 3), 0)
        for layer in p.nets["mean"]:
            layer.weight.data[...] = 0.0
        p.norm = NormStats(
            in_mean=np.zeros(3),
            in_std=np.ones(3),
            out_mean=np.array([1.0, -2.0, 0.5]),
            out_std=np.array([2.0, 1.0, 3.0]),
        )
        out = forward_mean(p, rng.standard_normal((3, 5, 5, 5)))
        for c, m in enumerate([1.0, -2.0, 0.5]):
            assert np.allclose(out.data[c], m)

    def test_shift_equivariance(self, rng):
        r = 2
        p = init_params(ArchConfig(r, 2), 1)
        x = rng.standard_normal((2, 9, 9, 9))
        full = forward_mean(p, x).data
        shifted = forward_mean(p, x[:, 1:8, 0:7, 0:7]).data
        assert np.array_equal(shifted, full[:, r : r + 3 * r, 0 : 3 * r, 0 : 3 * r])


class TestForwardHetero:
    def test_sigma_strictly_positive(self, rng):
        p = init_params(ArchConfig(2, 2, "hetero"), 0)
        out = forward_hetero(p, rng.standard_normal((2, 6, 6, 6)))
        assert np.all(out.sigma_diag.data > 0)
        assert out.mu.shape == out.sigma_diag.shape

    def test_sigma_floor_exact(self, rng):
        p = init_params(ArchConfig(2, 2, "hetero"), 0)
        # force the covariance head to a huge negative output
        last = p.nets["scale"][-1]
        last.weight.data[...] = 0.0
        last.bias.data[...] = -1e4
        out = forward_hetero(p, rng.standard_normal((2, 6, 6, 6)))
        assert np.all(out.sigma_diag.data == SIGMA_FLOOR)

    def test_mu_matches_forward_mean(self, rng):
        p = init_params(ArchConfig(2, 2, "hetero"), 0)
        x = rng.standard_normal((2, 6, 6, 6))
        het = forward_hetero(p, x)
        assert np.array_equal(het.mu.data, forward_mean(p, x).data)

    def test_requires_hetero_variant(self, rng):
        p = init_params(ArchConfig(2, 2, "baseline"), 0)
        with pytest.raises(ConfigError):
            forward_hetero(p, rng.standard_normal((2, 5, 5, 5)))


class TestSampleWeights:
    def test_degenerate_posterior_exact(self):
        p = init_params(ArchConfig(2, 2, "baseline+vd1"), 0)
        for layer in p.nets["mean"]:
            layer.log_s2.data[...] = NEAR_ZERO_LOG_S2
        s = sample_weights(p, seed=5)
        for li, layer in enumerate(p.nets["mean"]):
            assert np.array_equal(s.theta[("mean", li)], layer.weight.data)

    def test_sample_mean_matches_m(self):
        p = init_params(ArchConfig(1, 1, "baseline+vd1"), 0)
        t = 10_000
        layer = p.nets["mean"][0]
        sums = np.zeros_like(layer.weight.data)
        for k in range(t):
            sums += sample_weights(p, seed=k).theta[("mean", 0)]
        mean = sums / t
        s = np.exp(0.5 * layer.log_s2.data)
        se = s / np.sqrt(t)
        assert np.all(np.abs(mean - layer.weight.data) < 4 * se + 1e-12)

    def test_vd2_shares_noise_per_filter(self):
        p = init_params(ArchConfig(2, 2, "baseline+vd2"), 0)
        s = sample_weights(p, seed=3)
        for li, layer in enumerate(p.nets["mean"]):
            delta = s.theta[("mean", li)] - layer.weight.data
            flat = delta.reshape(delta.shape[0], -1)
            # every weight within a filter carries the same additive shift
            assert np.allclose(flat, flat[:, :1], atol=1e-15)

    def test_non_variational_rejected(self):
        p = init_params(ArchConfig(2, 2, "baseline"), 0)
        with pytest.raises(ConfigError):
            sample_weights(p, 0)


class TestForwardStochastic:
    def test_degenerate_equals_deterministic_bitwise(self, rng):
        p = init_params(ArchConfig(2, 2, "baseline+vd1"), 0)
        for layer in p.nets["mean"]:
            layer.log_s2.data[...] = NEAR_ZERO_LOG_S2
        x = rng.standard_normal((2, 6, 6, 6))
        assert np.array_equal(forward_stochastic(p, x, seed=4).data, forward_mean(p, x).data)

    def test_different_seeds_differ(self, rng):
        p = init_params(ArchConfig(2, 2, "baseline+vd1"), 0)
        x = rng.standard_normal((2, 6, 6, 6))
        a = forward_stochastic(p, x, seed=1).data
        b = forward_stochastic(p, x, seed=2).data
        assert not np.array_equal(a, b)

    def test_variance_shrinks_with_log_s2(self, rng):
        p = init_params(ArchConfig(2, 1, "baseline+vd1"), 0)
        x = rng.standard_normal((1, 5, 5, 5))
        spreads = []
        for level in (-8.0, -12.0, -16.0):
            for layer in p.nets["mean"]:
                layer.log_s2.data[...] = level
            outs = np.stack([forward_stochastic(p, x, seed=s).data for s in range(200)])
            spreads.append(outs.var(axis=0).mean())
        assert spreads[0] > spreads[1] > spreads[2]

    def test_hetero_variant_returns_both_heads(self, rng):
        p = init_params(ArchConfig(2, 2, "hetero+vd1"), 0)
        out = forward_stochastic(p, rng.standard_normal((2, 5, 5, 5)), seed=0)
        assert out.mu.shape == out.sigma_diag.shape == (2, 2, 2, 2)


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path, rng):
        p = init_params(ArchConfig(2, 3, "hetero+vd2"), 11)
        p.norm = NormStats(
            in_mean=rng.standard_normal(3),
            in_std=np.abs(rng.standard_normal(3)) + 0.5,
            out_mean=rng.standard_normal(3),
            out_std=np.abs(rng.standard_normal(3)) + 0.5,
        )
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, p, manifest={"note": "unit", "epochs": 3})
        q, manifest = load_checkpoint(path)
        assert manifest == {"note": "unit", "epochs": 3}
        assert q.config == p.config
        for (na, ta), (_, tb) in zip(p.named_parameters(), q.named_parameters()):
            assert np.array_equal(ta.data, tb.data), na
        for f in ("in_mean", "in_std", "out_mean", "out_std"):
            assert np.array_equal(getattr(p.norm, f), getattr(q.norm, f))
        assert p.checksum() == q.checksum()

    def test_corruption_detected(self, tmp_path):
        p = init_params(ArchConfig(2, 1), 0)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, p)
        raw = bytearray(path.read_bytes())
        raw[len(raw) // 2] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(DataError, match="checksum"):
            load_checkpoint(path)

    def test_save_is_deterministic(self, tmp_path):
        p = init_params(ArchConfig(2, 2, "baseline+vd1"), 5)
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(a, p, manifest={"k": 1})
        save_checkpoint(b, p, manifest={"k": 1})
        assert a.read_bytes() == b.read_bytes()
