"""Synthetic phantom construction and the two preset geometries."""

import numpy as np
import pytest

from dceseg.phantom import (
    AMBIGUOUS_CONFUSER_CURVE,
    LIVER_CURVE,
    PhantomSpec,
    Region,
    TimeIntensityCurve,
    default_ambiguity_spec,
    default_separable_spec,
    generate_phantom,
)
from oracles import components_26


def single_liver_spec(noise_sigma=0.0, seed=0):
    liver = Region("ellipsoid", "liver", (8.0, 16.0, 16.0), (5.0, 9.0, 10.0),
                   TimeIntensityCurve(LIVER_CURVE))
    return PhantomSpec(dims=(16, 32, 32), regions=[liver], noise_sigma=noise_sigma,
                       seed=seed)


class TestGeneration:
    def test_noiseless_phantom_is_piecewise_constant(self):
        spec = single_liver_spec()
        series, mask = generate_phantom(spec)
        assert series.data.shape == (6, 16, 32, 32)
        for phase in range(6):
            values = np.unique(series.data[phase])
            assert set(values) == {spec.background[phase], LIVER_CURVE[phase]}
            inside = series.data[phase][mask.data == 1]
            assert (inside == LIVER_CURVE[phase]).all()
        expected_mask = spec.regions[0].rasterize(spec.dims)
        np.testing.assert_array_equal(mask.data.astype(bool), expected_mask)

    def test_same_seed_same_output(self):
        a_series, a_mask = generate_phantom(single_liver_spec(noise_sigma=3.0, seed=5))
        b_series, b_mask = generate_phantom(single_liver_spec(noise_sigma=3.0, seed=5))
        assert np.array_equal(a_series.data, b_series.data)
        assert np.array_equal(a_mask.data, b_mask.data)

    def test_mask_invariant_to_noise(self):
        _, quiet = generate_phantom(single_liver_spec(noise_sigma=0.0))
        _, noisy = generate_phantom(single_liver_spec(noise_sigma=8.0))
        assert np.array_equal(quiet.data, noisy.data)

    def test_region_means_converge_to_curve(self):
        sigma = 4.0
        spec = single_liver_spec(noise_sigma=sigma, seed=2)
        series, mask = generate_phantom(spec)
        inside = mask.data == 1
        n = inside.sum()
        for phase in range(6):
            sample_mean = series.data[phase][inside].mean()
            assert abs(sample_mean - LIVER_CURVE[phase]) < 4.0 * sigma / np.sqrt(n)

    def test_liver_region_required(self):
        region = Region("ellipsoid", "spleen", (8.0, 16.0, 16.0), (3.0, 3.0, 3.0),
                        TimeIntensityCurve(LIVER_CURVE))
        with pytest.raises(ValueError, match="liver"):
            PhantomSpec(dims=(16, 32, 32), regions=[region])

    def test_region_outside_grid_rejected(self):
        region = Region("ellipsoid", "liver", (8.0, 16.0, 30.0), (3.0, 3.0, 6.0),
                        TimeIntensityCurve(LIVER_CURVE))
        with pytest.raises(ValueError, match="outside"):
            PhantomSpec(dims=(16, 32, 32), regions=[region])


class TestPresets:
    def test_size_must_be_divisible_by_8(self):
        with pytest.raises(ValueError, match="divisible by 8"):
            default_separable_spec(30)

    def test_separable_liver_fraction(self):
        for seed in range(6):
            spec = default_separable_spec(64, seed=seed)
            _, mask = generate_phantom(spec)
            fraction = mask.data.mean()
            assert 0.1 <= fraction <= 0.4, f"seed {seed}: fraction {fraction}"

    def test_ambiguity_curves_collide_at_late_arterial(self):
        # identical at the late arterial phase (and at the pre-contrast
        # baseline); the enhancement phases 1, 3, 4, 5 carry the separation
        assert LIVER_CURVE[2] == AMBIGUOUS_CONFUSER_CURVE[2]
        for phase in (1, 3, 4, 5):
            assert LIVER_CURVE[phase] != AMBIGUOUS_CONFUSER_CURVE[phase]

    @staticmethod
    def region(spec, tissue):
        return next(r for r in spec.regions if r.tissue == tissue)

    def test_ambiguity_voxels_indistinguishable_at_phase2_only(self):
        spec = default_ambiguity_spec(48, seed=1, noise_sigma=0.0)
        series, mask = generate_phantom(spec)
        lesions = (self.region(spec, "lesion").rasterize(spec.dims)
                   | self.region(spec, "confuser_lesion").rasterize(spec.dims))
        liver_body = self.region(spec, "liver").rasterize(spec.dims) & ~lesions
        confuser_body = (self.region(spec, "confuser").rasterize(spec.dims)
                         & ~lesions & (mask.data == 0))
        assert confuser_body.any() and liver_body.any()
        phase2_liver = np.unique(series.data[2][liver_body])
        phase2_confuser = np.unique(series.data[2][confuser_body])
        np.testing.assert_array_equal(phase2_liver, phase2_confuser)
        for phase in (1, 3, 4, 5):
            assert not np.intersect1d(series.data[phase][liver_body],
                                      series.data[phase][confuser_body]).size

    def test_lesion_inside_liver(self):
        for preset in (default_ambiguity_spec, default_separable_spec):
            for seed in range(4):
                spec = preset(48, seed=seed)
                lesion = self.region(spec, "lesion").rasterize(spec.dims)
                liver = self.region(spec, "liver").rasterize(spec.dims)
                assert lesion.any()
                assert (liver | lesion == liver).all()
                _, mask = generate_phantom(spec)
                assert (mask.data[lesion] == 1).all()

    def test_confuser_lesion_not_in_mask(self):
        spec = default_ambiguity_spec(48, seed=3)
        _, mask = generate_phantom(spec)
        confuser_lesion = self.region(spec, "confuser_lesion").rasterize(spec.dims)
        assert confuser_lesion.any()
        assert (mask.data[confuser_lesion] == 0).all()

    def test_liver_and_confuser_form_one_component(self):
        # the ambiguity construction relies on the bright pair being
        # inseparable by connected-component post-processing
        for seed in range(8):
            spec = default_ambiguity_spec(48, seed=seed)
            bright = (self.region(spec, "confuser").rasterize(spec.dims)
                      | self.region(spec, "liver").rasterize(spec.dims))
            assert len(components_26(bright)) == 1, f"seed {seed}"

    def test_ambiguity_organs_same_size_distribution(self):
        # twin geometry: neither organ is systematically bigger
        ratios = []
        for seed in range(12):
            spec = default_ambiguity_spec(48, seed=seed)
            liver = self.region(spec, "liver").rasterize(spec.dims).sum()
            confuser = self.region(spec, "confuser").rasterize(spec.dims).sum()
            ratios.append(liver / confuser)
        assert 0.8 < np.median(ratios) < 1.25


class TestSerialization:
    def test_spec_round_trip(self, tmp_path):
        spec = default_ambiguity_spec(64, seed=4, noise_sigma=2.5)
        path = tmp_path / "spec.json"
        spec.save(path)
        loaded = PhantomSpec.load(path)
        assert loaded.to_dict() == spec.to_dict()
        a_series, a_mask = generate_phantom(spec)
        b_series, b_mask = generate_phantom(loaded)
        assert np.array_equal(a_series.data, b_series.data)
        assert np.array_equal(a_mask.data, b_mask.data)

    def test_curve_length_validated(self):
        with pytest.raises(ValueError, match="6 values"):
            TimeIntensityCurve((1.0, 2.0, 3.0))
