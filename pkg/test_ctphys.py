import math

import numpy as np
import pytest

from ctphys import (
    METAL, HU_MAX, HU_MIN, ScanGeometry, Sinogram, SpectrumModel, TraceMask, build_spectrum,
    domain_geometry, fbp_reconstruct, forward_project, hu_denormalize, hu_normalize, li_interpolate,
    make_phantom, metal_trace, quantum_noise_floor, simulate_metal_artifact,
)
from errors import InvalidArgument, UnrecoverableView


def _line_geometry(n_detectors=5):
    return ScanGeometry(n_angles=1, n_detectors=n_detectors, detector_spacing=1.0, image_size=3)


class TestGeometry:
    def test_rejects_short_detector_row(self):
        with pytest.raises(ValueError):
            ScanGeometry(n_angles=10, n_detectors=64, detector_spacing=1.0, image_size=64)

    def test_domain_geometry_wraps_errors(self):
        with pytest.raises(InvalidArgument):
            domain_geometry(64, 90, 1.0, 32, 1.0)

    def test_angles_increasing(self, geometry64):
        assert np.all(np.diff(geometry64.angles) > 0)
        assert geometry64.shape == (90, 96)


class TestPhantom:
    def test_deterministic(self):
        a = make_phantom(0, "torso-like", 128)
        b = make_phantom(0, "torso-like", 128)
        np.testing.assert_array_equal(a.hu_image, b.hu_image)
        np.testing.assert_array_equal(a.metal_mask, b.metal_mask)

    def test_no_metal(self, geometry64):
        p = make_phantom(0, "torso-like", 64, n_metal=0)
        assert not p.metal_mask.any()
        assert metal_trace(p.metal_mask, geometry64).empty

    def test_dental_metal_matches_placement_log(self):
        p = make_phantom(7, "dental-like", 128)
        assert p.metal_mask.sum() > 0
        assert np.all(p.hu_image[p.metal_mask] >= 3000)
        logged = {insert.hu for insert in p.inserts}
        assert set(np.unique(p.hu_image[p.metal_mask]).tolist()) <= logged

    @pytest.mark.parametrize("profile", ["torso-like", "dental-like"])
    def test_invariants(self, profile):
        p = make_phantom(3, profile, 64)
        assert p.hu_image.min() >= HU_MIN
        assert not (p.roi_mask & p.metal_mask).any()
        assert np.all(p.material_map[p.metal_mask] == METAL)
        assert len(p.inserts) <= 4

    def test_too_small(self):
        with pytest.raises(InvalidArgument):
            make_phantom(0, "torso-like", 16)


class TestProjection:
    def test_zero_image(self, geometry64):
        assert np.all(forward_project(np.zeros((64, 64)), geometry64).data == 0)

    def test_linearity(self, geometry64):
        rng = np.random.default_rng(1)
        x, y = rng.random((64, 64)), rng.random((64, 64))
        lhs = forward_project(2.5 * x - 0.7 * y, geometry64).data
        rhs = 2.5 * forward_project(x, geometry64).data - 0.7 * forward_project(y, geometry64).data
        assert np.max(np.abs(lhs - rhs)) < 1e-9

    def test_scaling(self, geometry64):
        x = np.random.default_rng(2).random((64, 64))
        p1, p2 = forward_project(x, geometry64).data, forward_project(2 * x, geometry64).data
        assert np.max(np.abs(p2 - 2 * p1)) < 1e-9

    def test_disc_mass(self, geometry64):
        yy, xx = np.mgrid[0:64, 0:64]
        r = 20
        disc = ((yy - 31.5) ** 2 + (xx - 31.5) ** 2 <= r * r).astype(float)
        sums = forward_project(disc, geometry64).data.sum(axis=1) * geometry64.detector_spacing
        np.testing.assert_allclose(sums, math.pi * r * r, rtol=0.02)

    def test_non_square(self, geometry64):
        with pytest.raises(InvalidArgument):
            forward_project(np.zeros((64, 32)), geometry64)

    def test_non_finite(self, geometry64):
        image = np.zeros((64, 64))
        image[3, 3] = np.nan
        with pytest.raises(InvalidArgument):
            forward_project(image, geometry64)


class TestFBP:
    def test_zero(self, geometry64):
        sino = Sinogram(np.zeros(geometry64.shape), geometry64)
        assert np.all(fbp_reconstruct(sino) == 0)

    def test_scaling(self, geometry64):
        data = forward_project(np.random.default_rng(3).random((64, 64)), geometry64).data
        a = fbp_reconstruct(Sinogram(data, geometry64))
        b = fbp_reconstruct(Sinogram(3.0 * data, geometry64))
        np.testing.assert_allclose(b, 3.0 * a, rtol=1e-9, atol=1e-12)

    def test_mismatched_geometry(self, geometry64):
        with pytest.raises(InvalidArgument):
            Sinogram(np.zeros((10, 10)), geometry64)

    @pytest.mark.slow
    def test_round_trip(self):
        geometry = ScanGeometry(n_angles=180, n_detectors=192, image_size=128)
        p = make_phantom(0, "torso-like", 128, n_metal=0)
        mu = 0.0193 * np.clip(1 + p.hu_image / 1000, 0, None)
        recon = fbp_reconstruct(forward_project(mu, geometry))
        roi = p.roi_mask
        rel = np.sqrt(np.mean((recon[roi] - mu[roi]) ** 2)) / np.sqrt(np.mean(mu[roi] ** 2))
        assert rel < 0.05


class TestTrace:
    def test_empty(self, geometry64):
        assert metal_trace(np.zeros((64, 64), bool), geometry64).empty

    def test_full_mask_traces_every_ray_through_the_image(self, geometry64):
        full = np.ones((64, 64), bool)
        trace = metal_trace(full, geometry64)
        np.testing.assert_array_equal(trace.mask, forward_project(full.astype(float), geometry64).data > 0)
        assert trace.mask[:, 40:56].all()

    def test_single_pixel(self, geometry64):
        mask = np.zeros((64, 64), bool)
        mask[32, 32] = True
        per_view = metal_trace(mask, geometry64).mask.sum(axis=1)
        assert np.all(per_view >= 1)
        assert np.all(per_view <= 3)

    def test_shape_mismatch(self, geometry64):
        with pytest.raises(InvalidArgument):
            metal_trace(np.zeros((32, 32), bool), geometry64)


class TestLinearInterpolation:
    def test_empty_trace_is_identity(self, geometry64):
        data = np.random.default_rng(4).random(geometry64.shape)
        out = li_interpolate(Sinogram(data, geometry64), TraceMask(np.zeros(geometry64.shape, bool)))
        np.testing.assert_array_equal(out.data, data)

    def test_constant_view(self):
        g = _line_geometry()
        trace = TraceMask(np.array([[False, True, True, False, False]]))
        out = li_interpolate(Sinogram(np.full((1, 5), 2.5), g), trace)
        np.testing.assert_array_equal(out.data, np.full((1, 5), 2.5))

    def test_ramp(self):
        g = _line_geometry()
        data = np.array([[0.0, 9.0, 9.0, 9.0, 4.0]])
        trace = TraceMask(np.array([[False, True, True, True, False]]))
        np.testing.assert_allclose(li_interpolate(Sinogram(data, g), trace).data, [[0, 1, 2, 3, 4]])

    def test_edge_run_constant_extension(self):
        g = _line_geometry()
        data = np.array([[5.0, 5.0, 7.0, 8.0, 9.0]])
        trace = TraceMask(np.array([[True, True, False, False, False]]))
        np.testing.assert_array_equal(li_interpolate(Sinogram(data, g), trace).data, [[7, 7, 7, 8, 9]])

    def test_fully_traced_view(self):
        g = _line_geometry()
        with pytest.raises(UnrecoverableView):
            li_interpolate(Sinogram(np.ones((1, 5)), g), TraceMask(np.ones((1, 5), bool)))

    def test_idempotent(self, geometry64):
        p = make_phantom(5, "dental-like", 64)
        sino = forward_project(np.clip(1 + p.hu_image / 1000, 0, None), geometry64)
        trace = metal_trace(p.metal_mask, geometry64)
        once = li_interpolate(sino, trace)
        np.testing.assert_array_equal(li_interpolate(once, trace).data, once.data)


class TestNormalization:
    def test_values(self):
        np.testing.assert_array_equal(hu_normalize(np.array([-1024.0, 3072.0, 5000.0, 1024.0])),
                                      [0.0, 1.0, 1.0, 0.5])

    def test_round_trips(self):
        v = np.linspace(-2000, 6000, 101)
        np.testing.assert_allclose(hu_denormalize(hu_normalize(v)), np.clip(v, HU_MIN, HU_MAX), atol=1e-9)
        u = np.linspace(0, 1, 101)
        np.testing.assert_allclose(hu_normalize(hu_denormalize(u)), u, atol=1e-12)


class TestSpectrum:
    def test_unknown_id(self):
        with pytest.raises(InvalidArgument):
            build_spectrum("spec-z", 1e6)

    def test_metal_must_dominate_bone(self):
        with pytest.raises(ValueError):
            SpectrumModel(energies=[50, 80], weights=[0.5, 0.5], photon_count=1e5,
                          material_mu={"bone": [0.5, 0.3], "metal": [0.4, 0.4]})

    def test_weights_sum(self):
        with pytest.raises(ValueError):
            SpectrumModel(energies=[50, 80], weights=[0.5, 0.6], photon_count=1e5, material_mu={})

    def test_missing_material(self, geometry64):
        spectrum = SpectrumModel(energies=[50, 80], weights=[0.5, 0.5], photon_count=1e5,
                                 material_mu={"water": [0.02, 0.018]})
        with pytest.raises(InvalidArgument):
            simulate_metal_artifact(make_phantom(0, "torso-like", 64), spectrum, geometry64, 0)


class TestSimulation:
    def test_deterministic(self, geometry64, spectrum_a):
        p = make_phantom(11, "torso-like", 64)
        a = simulate_metal_artifact(p, spectrum_a, geometry64, noise_seed=3)
        b = simulate_metal_artifact(p, spectrum_a, geometry64, noise_seed=3)
        np.testing.assert_array_equal(a.artifact_image, b.artifact_image)
        np.testing.assert_array_equal(a.clean_image, b.clean_image)
        np.testing.assert_array_equal(a.li_image, b.li_image)

    def test_pair_contract(self, geometry64, spectrum_a):
        p = make_phantom(12, "dental-like", 64)
        pair = simulate_metal_artifact(p, spectrum_a, geometry64, noise_seed=1)
        for image in (pair.artifact_image, pair.clean_image, pair.li_image):
            assert image.shape == (64, 64)
            assert image.min() >= 0 and image.max() <= 1
        np.testing.assert_array_equal(pair.artifact_image[p.metal_mask], pair.clean_image[p.metal_mask])

    def test_metal_free_within_noise_floor(self, geometry64, spectrum_a):
        p = make_phantom(0, "torso-like", 64, n_metal=0)
        pair = simulate_metal_artifact(p, spectrum_a, geometry64, noise_seed=99)
        roi = p.roi_mask
        rmse = np.sqrt(np.mean((pair.artifact_image[roi] - pair.clean_image[roi]) ** 2))
        floor = quantum_noise_floor(p, spectrum_a, geometry64, seeds=range(10))
        assert rmse < 3 * floor

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_metal_raises_roi_error(self, geometry64, spectrum_a, seed):
        def roi_mae(n_metal):
            p = make_phantom(seed, "torso-like", 64, n_metal=n_metal)
            pair = simulate_metal_artifact(p, spectrum_a, geometry64, noise_seed=seed)
            return np.mean(np.abs(pair.artifact_image - pair.clean_image)[p.roi_mask])

        assert roi_mae(1) > roi_mae(0)
