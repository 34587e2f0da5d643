import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lidar_denoise import augment as aug
from lidar_denoise.core import Label, RangeImage
from lidar_denoise.synth import plaza_scene, raycast_scene

LN = aug.LognormalParams(math.log(0.3), 0.35)


def params(beta=0.01, p=0.075, cls=Label.RAIN, seed=0, **kw):
    return aug.WeatherParams(beta=beta, scatter_rate=p, weather_class=cls, clutter_intensity=LN, seed=seed, **kw)


def random_image(seed, shape=(32, 400), far=False):
    rng = np.random.default_rng(seed)
    lo = 170 if far else 1
    d = rng.uniform(lo, 199, shape) * (rng.random(shape) < 0.9)
    i = np.where(d > 0, rng.uniform(0.0, 0.3 if far else 1.0, shape), 0)
    return RangeImage(d, i, "x")


class TestVisibility:
    def test_published_range_endpoints(self):
        assert aug.visibility_beta(0.1, 0.05) == pytest.approx(29.957, abs=1e-3)
        assert aug.visibility_beta(0.001, 0.05) == pytest.approx(2995.73, abs=1e-2)

    def test_unit_case(self):
        assert aug.visibility_beta(1.0, math.exp(-1)) == pytest.approx(1.0, rel=1e-15)

    @given(st.floats(1e-6, 10.0), st.floats(1e-6, 0.999))
    def test_roundtrip(self, beta, ct):
        assert aug.beta_from_visibility(aug.visibility_beta(beta, ct), ct) == pytest.approx(beta, rel=1e-14)

    @pytest.mark.parametrize("args", [(0.0, 0.05), (-1.0, 0.05), (0.1, 0.0), (0.1, 1.0)])
    def test_rejects(self, args):
        with pytest.raises(ValueError):
            aug.visibility_beta(*args)
        with pytest.raises(ValueError):
            aug.beta_from_visibility(*args)


class TestMaxRange:
    def test_example(self):
        d = aug.max_sensing_range(0.55, params(0.01))
        assert float(d) == pytest.approx(-math.log(0.05) / 0.02, rel=1e-12)
        assert float(d) == pytest.approx(149.79, abs=0.01)

    def test_zero_when_at_noise_floor(self):
        assert float(aug.max_sensing_range(0.0, params(0.01, noise_floor=0.45))) == 0.0
        assert float(aug.max_sensing_range(0.0, params(0.01, noise_floor=0.5))) == 0.0

    @given(st.floats(0.0, 1.0), st.floats(1e-4, 1.0))
    def test_doubling_beta_halves_range(self, i, beta):
        a = aug.max_sensing_range(i, params(beta))
        b = aug.max_sensing_range(i, params(2 * beta))
        assert float(b) == pytest.approx(float(a) / 2, rel=1e-12)

    def test_loss_probability_example(self):
        d_max = aug.max_sensing_range(0.55, params(0.01))
        assert float(aug.loss_probability(d_max, 0.01)) == pytest.approx(1 - math.exp(-1.4979), abs=1e-4)
        assert float(aug.loss_probability(d_max, 0.01)) == pytest.approx(0.7764, abs=1e-4)


class TestAugment:
    def test_identity_limit(self):
        img = random_image(1)
        out, lab = aug.augment(img, params(1e-12, 0.0))
        np.testing.assert_array_equal(out.distance, img.distance)
        np.testing.assert_array_equal(out.intensity, img.intensity)
        assert np.all(lab[img.returns] == Label.VALID)
        assert np.all(lab[~img.returns] == Label.NO_RETURN)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(1e-3, 0.2), st.floats(0.0, 1.0), st.sampled_from([Label.RAIN, Label.FOG]))
    def test_accounting_and_bounds(self, seed, beta, p, cls):
        img = random_image(seed % 1000, (8, 60))
        prm = params(beta, p, cls, seed)
        out, lab = aug.augment(img, prm)
        n_valid = np.count_nonzero(lab == Label.VALID)
        n_cl = np.count_nonzero(lab == cls)
        n_none = np.count_nonzero(lab == Label.NO_RETURN)
        assert n_valid + n_cl + n_none == img.distance.size
        assert np.array_equal(lab == Label.NO_RETURN, out.distance == 0)
        # the only way to lose a return is the loss branch; nothing appears on empty pixels
        assert not np.any(out.returns & ~img.returns)
        d_max = aug.max_sensing_range(img.intensity, prm)
        sc = lab == cls
        assert np.all(out.distance[sc] > 0) and np.all(out.distance[sc] <= d_max[sc])
        assert np.all((out.intensity >= 0) & (out.intensity <= 1))
        # attenuation: inside d_max distance unchanged, intensity never increased
        inside = img.returns & (d_max >= img.distance)
        np.testing.assert_array_equal(out.distance[inside], img.distance[inside])
        assert np.all(out.intensity[inside] <= img.intensity[inside])
        assert np.all(lab[inside] == Label.VALID)

    def test_deterministic(self):
        img = random_image(3)
        a = aug.augment(img, params(0.05, 0.3, seed=9))
        b = aug.augment(img, params(0.05, 0.3, seed=9))
        assert a[0] == b[0] and np.array_equal(a[1], b[1])
        c = aug.augment(img, params(0.05, 0.3, seed=10))
        assert not np.array_equal(a[1], c[1])

    def test_rain_scatter_fraction_matches_rate(self):
        img = random_image(4, far=True)
        prm = params(0.01, 0.075, seed=1)
        d_max = aug.max_sensing_range(img.intensity, prm)
        assert np.all(d_max[img.returns] < img.distance[img.returns])
        out, lab = aug.augment(img, prm)
        kept = np.count_nonzero(lab != Label.NO_RETURN)
        assert abs(np.count_nonzero(lab == Label.RAIN) / kept - 0.075) < 0.01

    def test_lost_fraction_matches_probability(self):
        d = np.full((64, 400), 190.0)
        img = RangeImage(d, np.full(d.shape, 0.55), "x")
        out, lab = aug.augment(img, params(0.01, 0.0))
        assert np.mean(lab == Label.NO_RETURN) == pytest.approx(0.7764, abs=0.01)

    def test_class_checks(self):
        img = random_image(5, (2, 2))
        with pytest.raises(ValueError):
            aug.augment_rain(img, params(cls=Label.FOG))
        with pytest.raises(ValueError):
            aug.augment_fog(img, params(cls=Label.RAIN))

    def test_fog_heavier_with_lower_visibility(self):
        img = raycast_scene(plaza_scene(2), seed=0)
        frac = {}
        for v in (10, 100):
            _, lab = aug.augment(img, aug.fog_params(v, seed=3))
            frac[v] = np.count_nonzero(lab == Label.FOG) / np.count_nonzero(img.returns)
        assert frac[10] >= 3 * frac[100]

    def test_clutter_increases_with_beta(self):
        counts = []
        for beta in (0.002, 0.01, 0.05, 0.1):
            n = 0
            for k in range(3):
                img = raycast_scene(plaza_scene(k), seed=k)
                _, lab = aug.augment(img, aug.fog_params(aug.visibility_beta(beta), seed=k))
                n += np.count_nonzero(lab == Label.FOG)
            counts.append(n)
        assert counts == sorted(counts) and counts[0] < counts[-1]


class TestParams:
    @pytest.mark.parametrize("kw", [dict(beta=0.0), dict(p=-0.1), dict(p=1.1), dict(noise_floor=0.0),
                                    dict(laser_gain=-1.0), dict(contrast_threshold=1.0), dict(cls=Label.VALID)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            params(**kw)

    def test_lognormal_sigma_positive(self):
        with pytest.raises(ValueError):
            aug.LognormalParams(0.0, 0.0)

    def test_presets(self):
        assert aug.preset("rain").scatter_rate == 0.075 and aug.preset("rain").beta == 0.01
        assert [aug.preset(n).scatter_rate for n in ("rain15", "rain33", "rain55")] == [0.1061, 0.0073, 0.047]
        fog = aug.preset("fog:V=30")
        assert fog.weather_class == Label.FOG
        assert fog.beta == pytest.approx(0.0999, abs=1e-4)
        with pytest.raises(ValueError):
            aug.preset("snow")

    def test_fog_rate_table_interpolation(self):
        for v, r in aug.FOG_RATE_TABLE:
            assert aug.fog_scatter_rate(v) == pytest.approx(r)
        assert aug.FOG_RATE_TABLE[0][1] > aug.fog_scatter_rate(15) > aug.FOG_RATE_TABLE[1][1]

    def test_json(self):
        prm = aug.params_from_json('{"preset": "rain33", "beta": 0.02}', seed=4)
        assert prm.beta == 0.02 and prm.scatter_rate == 0.0073 and prm.seed == 4
        full = aug.params_from_json(__import__("json").dumps(prm.to_dict()))
        assert full == prm
        assert aug.WeatherParams.from_dict(prm.to_dict()) == prm

    def test_clamp_probability(self):
        assert aug.lognormal_clamp_probability(aug.LognormalParams(0.0, 1.0)) == pytest.approx(0.5)
        assert aug.lognormal_clamp_probability(aug.FOG_INTENSITY) < 1e-6


class TestFit:
    def test_two_point_closed_form(self):
        fit = aug.fit_clutter_intensity([math.exp(-1), math.exp(-3)])
        assert fit.mu == pytest.approx(-2.0, abs=1e-12)
        assert fit.sigma == pytest.approx(math.sqrt(2), abs=1e-12)

    def test_degenerate(self):
        with pytest.raises(ValueError, match="degenerate"):
            aug.fit_clutter_intensity([math.exp(-2)] * 5)

    @pytest.mark.parametrize("bad", [[], [0.5], [0.5, 0.0], [0.5, -0.1]])
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            aug.fit_clutter_intensity(bad)

    def test_monte_carlo_consistency(self):
        x = np.random.default_rng(0).lognormal(-2.0, 0.5, 10_000)
        fit = aug.fit_clutter_intensity(x)
        assert abs(fit.mu + 2.0) <= 0.02 and abs(fit.sigma - 0.5) <= 0.02


def test_replace_keeps_validation():
    with pytest.raises(ValueError):
        replace(params(), beta=-1.0)
