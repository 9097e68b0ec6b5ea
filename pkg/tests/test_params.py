import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from turbsyn.covariance import ImagingGeometry, build_covariance_field
from turbsyn.degrade import TiltField, tilt_from_coeffs
from turbsyn.fields import FieldSequence
from turbsyn.params import (QuotaExhausted, StrengthLabel, TurbulenceParams, alpha_range, blur_score,
                            classify_strength, fill_quotas, native_fwhm, parameter_table, row_contains,
                            sample_params, select_kernel_size, table_rows, tilt_score)
from turbsyn.psf import diffraction_fwhm

from conftest import REF, REF_CN2

W, M, S = StrengthLabel.WEAK, StrengthLabel.MEDIUM, StrengthLabel.STRONG

# (distance, focal length, F-numbers, scene width, Cn2 / 1e-14), transcribed by hand
PUBLISHED_ROWS = {
    "dynamic": [
        ((30, 100), (0.1, 0.3), (2.8, 4), (2, 4), (50, 300)),
        ((30, 100), (0.1, 0.3), (2.8, 4, 5.6), (4, 20), (200, 1000)),
        ((100, 200), (0.2, 0.5), (2.8, 4, 5.6), (2, 4), (5, 50)),
        ((100, 200), (0.2, 0.5), (2.8, 4, 5.6), (4, 20), (20, 100)),
        ((200, 400), (0.3, 0.5), (5.6, 8), (2, 6), (2, 30)),
        ((200, 400), (0.3, 0.5), (4, 5.6, 8), (6, 20), (10, 40)),
        ((400, 600), (0.4, 0.75), (8, 11), (3, 7), (1, 20)),
        ((400, 600), (0.4, 0.75), (5.6, 8, 11), (7, 20), (10, 30)),
        ((600, 800), (0.6, 0.8), (8, 11), (4, 8), (1, 15)),
        ((600, 800), (0.6, 0.8), (8, 11), (8, 20), (2, 20)),
        ((800, 1000), (0.8, 1), (11, 16), (4, 8), (0.5, 10)),
        ((800, 1000), (0.8, 1), (8, 11, 16), (8, 20), (1, 20)),
    ],
    "static": [
        ((200, 400), (1, 2), (8, 11), (0.2, 0.5), (3, 7)),
        ((200, 400), (1, 2), (5.6, 8, 11), (0.5, 1), (6, 30)),
        ((400, 600), (1, 2.5), (8, 11, 16), (0.4, 0.8), (2, 6)),
        ((400, 600), (1, 2.5), (5.6, 8, 11), (0.8, 1.5), (6, 30)),
        ((600, 800), (1, 3), (11, 16), (0.5, 1.2), (2, 5)),
        ((600, 800), (1, 3), (8, 11), (1.2, 2), (5, 30)),
    ],
}

# (k_b, D/r0, d_bar) -> label, chosen on and around every cell edge
STRENGTH_PROBES = [
    ((15, 3.0, 0.4), W), ((25, 5.0, 0.3), M), ((33, 1.0, 0.3), S),
    ((17, 10.0, 0.49), W), ((17, 10.0, 0.5), M), ((17, 0.5, 1.0), M), ((17, 0.5, 1.01), S),
    ((19, 1.99, 0.45), W), ((19, 2.0, 0.45), S), ((29, 2.0, 0.19), W), ((29, 8.0, 0.2), M),
    ((29, 8.0, 0.4), M), ((21, 4.0, 0.41), S), ((29, 8.01, 0.1), M), ((29, 9.0, 0.21), S),
    ((31, 0.5, 0.2), M), ((31, 0.5, 0.0), M), ((67, 20.0, 5.0), S),
]


def ref_params(**kw) -> TurbulenceParams:
    values = dict(modality="dynamic", row=0, distance=REF["path_length"], focal_length=REF["focal_length"],
                  f_number=REF["f_number"], scene_width=REF["scene_width"], cn2=REF_CN2, temporal_alpha=0.5,
                  image_size=REF["image_size"])
    values.update(kw)
    return TurbulenceParams(**values)


class TestTable:
    @pytest.mark.parametrize("modality", ["dynamic", "static"])
    def test_matches_published_rows(self, modality):
        rows = table_rows(modality)
        assert len(rows) == len(PUBLISHED_ROWS[modality])
        for row, (dist, focal, fnum, width, cn2) in zip(rows, PUBLISHED_ROWS[modality]):
            assert tuple(row["distance"]) == dist and tuple(row["focal_length"]) == focal
            assert tuple(row["f_number"]) == fnum and tuple(row["scene_width"]) == width
            assert tuple(row["cn2"]) == cn2

    def test_alpha_ranges(self):
        assert alpha_range("static") == (0.2, 0.9) and alpha_range("dynamic") == (0.3, 0.95)

    def test_unknown_modality(self):
        with pytest.raises(ValueError):
            table_rows("aerial")


class TestSampler:
    def test_first_dynamic_row(self):
        rng = np.random.default_rng(0)
        draws = [p for p in (sample_params("dynamic", rng) for _ in range(3000)) if p.row == 0]
        assert draws
        for p in draws:
            assert 30 <= p.distance <= 100 and 0.1 <= p.focal_length <= 0.3
            assert p.f_number in (2.8, 4) and 2 <= p.scene_width <= 4
            assert 50e-14 <= p.cn2 <= 300e-14

    def test_static_bounds(self):
        rng = np.random.default_rng(1)
        for _ in range(2000):
            p = sample_params("static", rng)
            assert 200 <= p.distance <= 800 and p.focal_length >= 1
            assert 0.2 <= p.temporal_alpha <= 0.9

    def test_row_frequencies(self):
        rng = np.random.default_rng(2)
        counts = Counter(sample_params("dynamic", rng).row for _ in range(100_000))
        assert sorted(counts) == list(range(12))
        assert all(abs(c / 100_000 - 1 / 12) < 0.01 for c in counts.values())

    @given(st.integers(0, 2 ** 32 - 1), st.sampled_from(["dynamic", "static"]))
    @settings(max_examples=200, deadline=None)
    def test_round_trip(self, seed, modality):
        p = sample_params(modality, np.random.default_rng(seed))
        assert row_contains(p)
        assert TurbulenceParams.from_dict(p.to_dict()) == p

    def test_overrides(self):
        p = sample_params("dynamic", np.random.default_rng(3), image_size=(64, 96), temporal_alpha=0.5)
        assert p.image_size == (64, 96) and p.temporal_alpha == 0.5

    def test_out_of_row_detected(self):
        p = sample_params("dynamic", np.random.default_rng(4))
        assert not row_contains(TurbulenceParams.from_dict({**p.to_dict(), "distance": 5000.0}))


class TestStrength:
    @pytest.mark.parametrize("probe, label", STRENGTH_PROBES)
    def test_truth_table(self, probe, label):
        assert classify_strength(*probe) is label

    def test_probe_count(self):
        assert len(STRENGTH_PROBES) == 18

    @given(st.integers(0, 60).map(lambda n: 2 * n + 1), st.floats(0, 30), st.floats(0, 20))
    def test_total_and_never_weak_for_large_kernels(self, k_b, d_r0, d_bar):
        label = classify_strength(k_b, d_r0, d_bar)
        assert isinstance(label, StrengthLabel)
        if k_b >= 31:
            assert label is not W

    @given(st.integers(0, 60).map(lambda n: 2 * n + 1), st.floats(0, 30), st.floats(0, 5), st.floats(0, 5))
    def test_monotone_in_tilt(self, k_b, d_r0, x, y):
        order = {W: 0, M: 1, S: 2}
        lo, hi = sorted((x, y))
        assert order[classify_strength(k_b, d_r0, lo)] <= order[classify_strength(k_b, d_r0, hi)]

    @pytest.mark.parametrize("args", [(16, 1.0, 0.1), (0, 1.0, 0.1), (15, 1.0, -0.1), (15, -1.0, 0.1)])
    def test_invalid(self, args):
        with pytest.raises(ValueError):
            classify_strength(*args)

    def test_label_strings(self):
        assert [str(x) for x in (W, M, S)] == ["Weak", "Medium", "Strong"]


class TestKernelSize:
    def test_native_size(self, ref_geometry):
        assert select_kernel_size(ref_geometry, native=diffraction_fwhm(ref_geometry)) == 67

    def test_tenth(self, ref_geometry):
        assert select_kernel_size(ref_geometry, native=10 * diffraction_fwhm(ref_geometry)) == 7

    def test_always_odd(self):
        rng = np.random.default_rng(5)
        for n in range(1000):
            p = sample_params("dynamic" if n % 2 else "static", rng,
                              image_size=tuple(int(v) for v in rng.integers(64, 1025, 2)))
            k = p.kernel_size
            assert k % 2 == 1 and k >= 3

    def test_strength_scaling_grows(self, ref_geometry):
        plain = select_kernel_size(ref_geometry, 20.0)
        scaled = select_kernel_size(ref_geometry, 20.0, scale_with_strength=True)
        assert scaled > plain

    def test_native_fwhm(self, basis):
        assert native_fwhm() == pytest.approx(basis.native_fwhm, rel=1e-12)


class TestScores:
    def test_blur_zero(self):
        assert blur_score(np.zeros((36, 4, 4)), 17) == 0.0

    @given(st.integers(0, 2 ** 31))
    @settings(max_examples=20)
    def test_blur_homogeneous(self, seed):
        a = np.random.default_rng(seed).normal(size=(36, 5, 5))
        base = blur_score(a, 11)
        assert blur_score(2 * a, 11) == pytest.approx(2 * base, rel=1e-12)
        assert blur_score(a, 22 + 1) == pytest.approx(base * 23 / 11, rel=1e-12)

    def test_blur_mode_range(self):
        a = np.zeros((36, 2, 2))
        a[2] = 3.0  # mode 3 is a tilt mode
        assert blur_score(a, 1) == 3.0 and blur_score(a, 1, first_mode=4) == 0.0
        a[4] = 4.0
        assert blur_score(a, 1) == 5.0
        with pytest.raises(ValueError):
            blur_score(a, 1, first_mode=5)

    def test_tilt(self):
        d = np.zeros((3, 3, 2))
        assert tilt_score(TiltField(d)) == 0.0
        d[..., 0], d[..., 1] = 3.0, 4.0
        assert tilt_score(TiltField(d)) == 5.0 and tilt_score(TiltField(2 * d)) == 10.0


class TestDerived:
    def test_reference_strength(self):
        assert ref_params().d_over_r0 == pytest.approx(2.2787303529815657, rel=1e-12)

    def test_no_turbulence(self):
        p = ref_params(cn2=0.0)
        assert p.r0 == math.inf and p.d_over_r0 == 0.0 and p.expected_d_bar == 0.0

    def test_expected_tilt_against_fields(self, cache_dir):
        p = ref_params(image_size=(64, 64), scene_width=0.25)
        field = build_covariance_field(p.geometry(), p.profile(), cache_dir=cache_dir)
        seq = FieldSequence(field, 0.0, master_seed=3)
        mags = [tilt_from_coeffs(f.a[1], f.a[2], c_tilt=p.c_tilt).mean_magnitude for f in seq.take(300)]
        assert np.mean(mags) == pytest.approx(p.expected_d_bar, rel=0.1)

    def test_derived_record(self):
        d = ref_params().derived()
        assert set(d) == {"r0", "d_over_r0", "kernel_size", "c_tilt", "expected_d_bar", "strength"}
        assert d["strength"] in ("Weak", "Medium", "Strong")


class TestQuotas:
    def test_fills_exactly(self):
        rng = np.random.default_rng(6)
        out = fill_quotas({W: 15, M: 15, S: 15}, lambda: sample_params("dynamic", rng),
                          label_of=lambda p: [W, M, S][p.row % 3])
        assert Counter(label for _, label in out) == {W: 15, M: 15, S: 15}

    def test_zero_quota(self):
        rng = np.random.default_rng(7)
        out = fill_quotas({W: 3, M: 2, S: 0}, lambda: sample_params("dynamic", rng),
                          label_of=lambda p: [W, M, S][p.row % 3])
        assert all(label is not S for _, label in out) and len(out) == 5

    def test_exhaustion_keeps_partial(self):
        rng = np.random.default_rng(8)
        with pytest.raises(QuotaExhausted) as info:
            fill_quotas({W: 2, S: 1}, lambda: sample_params("dynamic", rng), max_attempts=50,
                        label_of=lambda p: W)
        assert len(info.value.accepted) == 2

    def test_negative_quota(self):
        with pytest.raises(ValueError):
            fill_quotas({W: -1}, lambda: None)

    def test_string_keys(self):
        rng = np.random.default_rng(9)
        out = fill_quotas({"Medium": 1}, lambda: sample_params("dynamic", rng), label_of=lambda p: M)
        assert len(out) == 1
