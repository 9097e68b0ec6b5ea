import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from turbsyn.fields import (CoefficientFields, FieldSequence, SeedField, TemporalChain, advance_temporal,
                            mix_modes, sample_field, stream_rng, white_seed)
from turbsyn.zernike import noll_covariance


def lag_corr(x, y):
    return float(np.corrcoef(x.ravel(), y.ravel())[0, 1])


class TestSeeds:
    def test_moments(self):
        seed = white_seed((200, 200), stream_rng(0, 0, 0, 2)).values
        for part in (seed.real, seed.imag):
            assert abs(part.mean()) < 0.02 and abs(part.var() - 1) < 0.03
        assert abs(lag_corr(seed.real, seed.imag)) < 0.02

    def test_streams_independent(self):
        a = white_seed((100, 100), stream_rng(5, 1, 0, 4)).values
        b = white_seed((100, 100), stream_rng(5, 1, 0, 5)).values
        c = white_seed((100, 100), stream_rng(5, 2, 0, 4)).values
        assert abs(lag_corr(a.real, b.real)) < 0.04 and abs(lag_corr(a.real, c.real)) < 0.04

    def test_stream_reproducible(self):
        a = white_seed((8, 8), stream_rng(9, 3, 2, 1)).values
        assert np.array_equal(a, white_seed((8, 8), stream_rng(9, 3, 2, 1)).values)


class TestSampleField:
    def test_zero_psd(self):
        seed = white_seed((32, 32), np.random.default_rng(0))
        assert np.array_equal(sample_field(np.zeros((32, 32)), seed), np.zeros((32, 32)))

    def test_flat_psd_is_white(self):
        rng = np.random.default_rng(1)
        psd = np.ones((256, 256))
        rho_x, rho_y = [], []
        for _ in range(100):
            v = sample_field(psd, white_seed((256, 256), rng))
            rho_x.append(np.mean(v * np.roll(v, 1, axis=1)) / np.mean(v * v))
            rho_y.append(np.mean(v * np.roll(v, 1, axis=0)) / np.mean(v * v))
        assert abs(np.mean(rho_x)) < 0.02 and abs(np.mean(rho_y)) < 0.02

    def test_variance_matches_psd_mass(self):
        rng = np.random.default_rng(2)
        psd = rng.uniform(0, 3, (64, 64))
        v = np.stack([sample_field(psd, white_seed((64, 64), rng)) for _ in range(400)])
        assert v.var() == pytest.approx(psd.sum() / psd.size, rel=0.03)

    def test_autocorrelation_matches_map(self, ref_field):
        rng = np.random.default_rng(3)
        psd = ref_field.unit_psd(4)
        target = ref_field.maps[3] / ref_field.maps[3, 0, 0]
        acc = np.zeros((2, 9))
        draws = 2000
        for _ in range(draws):
            v = sample_field(psd, white_seed(psd.shape, rng))
            for k in range(9):
                acc[0, k] += np.mean(v * np.roll(v, -k, axis=1))
                acc[1, k] += np.mean(v * np.roll(v, -k, axis=0))
        acc /= draws
        assert np.all(np.abs(acc[0] - target[0, :9]) <= 0.1 * target[0, :9])
        assert np.all(np.abs(acc[1] - target[:9, 0]) <= 0.1 * target[:9, 0])

    def test_stationarity(self, ref_field):
        rng = np.random.default_rng(4)
        psd = ref_field.unit_psd(4)
        diffs = []
        for _ in range(200):
            v = sample_field(psd, white_seed(psd.shape, rng))
            left, right = v[:, :64], v[:, 64:]
            est = [np.mean(x[:, :-3] * x[:, 3:]) for x in (left, right)]
            diffs.append(est[0] - est[1])
        diffs = np.array(diffs)
        assert abs(diffs.mean()) < 4 * diffs.std() / np.sqrt(diffs.size)

    def test_errors(self):
        seed = white_seed((8, 8), np.random.default_rng(0))
        with pytest.raises(ValueError):
            sample_field(np.ones((8, 9)), seed)
        with pytest.raises(ValueError):
            sample_field(-np.ones((8, 8)), seed)


class TestMixing:
    def test_identity(self):
        v = np.random.default_rng(0).standard_normal((36, 5, 7))
        assert np.array_equal(mix_modes(v, np.eye(36)).a, v)

    def test_zero_input(self):
        L = noll_covariance().scaled(3.0).cholesky
        assert np.array_equal(mix_modes(np.zeros((36, 4, 4)), L).a, np.zeros((36, 4, 4)))

    def test_monte_carlo_covariance(self):
        cov = noll_covariance().scaled(4.0)
        v = np.random.default_rng(5).standard_normal((36, 50, 100))
        v[0] = 0.0
        a = mix_modes(v, cov.cholesky).a.reshape(36, -1)
        est = a @ a.T / a.shape[1]
        assert np.linalg.norm(est - cov.matrix) / np.linalg.norm(cov.matrix) < 0.1

    def test_views(self):
        a = np.arange(36 * 4, dtype=float).reshape(36, 2, 2)
        fields = CoefficientFields(a)
        assert fields.shape == (2, 2)
        assert np.array_equal(fields.tilt, a[1:3]) and np.array_equal(fields.high_order, a[3:])

    def test_shape_errors(self):
        with pytest.raises(ValueError):
            mix_modes(np.zeros((35, 4, 4)), np.eye(36))
        with pytest.raises(ValueError):
            mix_modes(np.zeros((36, 4, 4)), np.eye(35))


def seed_corr(alpha, lags=5, shape=(100, 100), seed=0):
    chain = TemporalChain(alpha, shape, master_seed=seed)
    first = chain.current.values.real
    return [lag_corr(first, advance_temporal(chain).values.real) for _ in range(lags)]


class TestTemporal:
    def test_alpha_zero_uncorrelated(self):
        assert np.all(np.abs(seed_corr(0.0, 1)) < 0.02)

    def test_alpha_one_frozen(self):
        chain = TemporalChain(1.0, (16, 16), master_seed=3)
        first = chain.current.values.copy()
        for _ in range(10):
            assert np.array_equal(advance_temporal(chain).values, first)

    def test_geometric_decay(self):
        rho = seed_corr(0.8)
        assert np.all(np.abs(np.array(rho) - 0.8 ** np.arange(1, 6)) < 0.03)

    @pytest.mark.parametrize("alpha", [0.0, 0.3, 0.8, 0.95, 1.0])
    def test_variance_preserved(self, alpha):
        chain = TemporalChain(alpha, (100, 100), master_seed=1)
        for _ in range(100):
            n = advance_temporal(chain).values
            assert abs(n.real.var() - 1) < 0.05 and abs(n.imag.var() - 1) < 0.05

    @given(st.floats(0.0, 1.0))
    @settings(max_examples=25, deadline=None)
    def test_update_rule(self, alpha):
        chain = TemporalChain(alpha, (4, 4), master_seed=2, video_id=7, mode=5)
        prev = chain.current.values.copy()
        new = advance_temporal(chain)
        eps = white_seed((4, 4), stream_rng(2, 7, 1, 5)).values
        expected = prev if alpha == 1.0 else alpha * prev + np.sqrt(1 - alpha ** 2) * eps
        assert np.allclose(new.values, expected, rtol=0, atol=1e-12)
        assert new.frame_index == 1 and chain.frame == 1

    @pytest.mark.parametrize("alpha", [-0.1, 1.01, float("nan")])
    def test_alpha_out_of_range(self, alpha):
        with pytest.raises(ValueError):
            TemporalChain(alpha, (4, 4))


class TestFieldSequence:
    def test_deterministic(self, ref_field):
        a = FieldSequence(ref_field, 0.7, master_seed=11, video_id=3).take(3)
        b = FieldSequence(ref_field, 0.7, master_seed=11, video_id=3).take(3)
        assert all(np.array_equal(x.a, y.a) for x, y in zip(a, b))
        c = FieldSequence(ref_field, 0.7, master_seed=11, video_id=4).next()
        assert not np.array_equal(a[0].a, c.a)

    def test_piston_is_zero(self, ref_field):
        fields = FieldSequence(ref_field, 0.5).next()
        assert fields.a.shape == (36, 128, 128) and np.all(fields.a[0] == 0)

    def test_frozen_sequence(self, ref_field):
        seq = FieldSequence(ref_field, 1.0, master_seed=2)
        first, second = seq.take(2)
        assert np.array_equal(first.a, second.a)

    def test_padded_grid_cropped(self, ref_geometry, ref_profile):
        from turbsyn.covariance import build_covariance_field
        field = build_covariance_field(ref_geometry, ref_profile, pad=2)
        assert field.shape == (256, 256)
        assert FieldSequence(field, 0.5).next().shape == (128, 128)
