import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lidar_denoise import augment as aug
from lidar_denoise import eval as ev
from lidar_denoise.core import Label
from lidar_denoise.filters import Flag
from lidar_denoise.synth import plaza_scene, raycast_scene

V, R, F, N = Label.VALID, Label.RAIN, Label.FOG, Label.NO_RETURN
CODES = np.array([V, R, F, N], dtype=np.uint8)


def random_labels(rng, shape=(6, 9)):
    return CODES[rng.integers(0, 4, shape)]


def cm(counts):
    return ev.ConfusionMatrix(np.array(counts, dtype=np.int64))


class TestConfusion:
    def test_perfect_prediction_diagonal(self):
        gt = CODES[np.random.default_rng(0).integers(0, 3, (10, 10))]
        c = ev.confusion_update(ev.ConfusionMatrix.empty(), gt, gt)
        assert np.trace(c.counts) == 100 and c.total == 100

    def test_single_off_diagonal_cell(self):
        gt = np.full((4, 5), F, np.uint8)
        c = ev.confusion([np.full((4, 5), R, np.uint8)], [gt])
        expected = np.zeros((3, 3), int)
        expected[2, 1] = 20
        np.testing.assert_array_equal(c.counts, expected)

    def test_no_return_excluded_on_either_side(self):
        gt = np.array([[V, N, R, F]], np.uint8)
        pred = np.array([[N, V, R, V]], np.uint8)
        c = ev.confusion([pred], [gt])
        assert c.total == 2 and c.counts[1, 1] == 1 and c.counts[2, 0] == 1

    def test_additivity(self):
        rng = np.random.default_rng(1)
        p, g = random_labels(rng), random_labels(rng)
        once = ev.confusion([p], [g])
        twice = ev.confusion([p, p], [g, g])
        np.testing.assert_array_equal(twice.counts, 2 * once.counts)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_associative_and_commutative(self, seed):
        rng = np.random.default_rng(seed)
        frames = [(random_labels(rng), random_labels(rng)) for _ in range(4)]
        parts = [ev.confusion([p], [g]) for p, g in frames]
        assert (parts[0] + parts[1]) + (parts[2] + parts[3]) == parts[3] + (parts[2] + (parts[1] + parts[0]))
        assert ev.confusion(*zip(*frames)) == sum(parts[1:], parts[0])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ev.confusion_update(ev.ConfusionMatrix.empty(), np.zeros((2, 2)), np.zeros((2, 3)))


class TestIou:
    def test_definition_example(self):
        # class VALID: TP 50, FP 25 (gt RAIN), FN 25 (pred FOG)
        rep = ev.iou_scores(cm([[50, 0, 25], [25, 0, 0], [0, 0, 0]]))
        assert rep.per_class[0] == pytest.approx(0.5)

    def test_perfect(self):
        rep = ev.iou_scores(cm(np.diag([5, 6, 7])))
        assert rep.per_class == (1.0, 1.0, 1.0) and rep.mean == 1.0

    def test_undefined_class_excluded(self):
        rep = ev.iou_scores(cm([[8, 2, 0], [0, 0, 0], [0, 0, 0]]))
        assert rep.per_class[0] == pytest.approx(0.8) and rep.per_class[1] == 0.0
        assert math.isnan(rep.per_class[2]) and rep.defined == (True, True, False)
        assert rep.mean == pytest.approx(0.4)
        assert rep.to_dict()["per_class"]["FOG"] is None

    def test_empty(self):
        with pytest.raises(ValueError):
            ev.iou_scores(ev.ConfusionMatrix.empty())

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.permutations([0, 1, 2]))
    def test_permutation_equivariance(self, seed, perm):
        rng = np.random.default_rng(seed)
        p, g = random_labels(rng, (12, 12)), random_labels(rng, (12, 12))
        relabel = np.arange(256, dtype=np.uint8)
        relabel[[V, R, F]] = np.array([V, R, F], np.uint8)[list(perm)]
        a = ev.iou_scores(ev.confusion([p], [g]))
        b = ev.iou_scores(ev.confusion([relabel[p]], [relabel[g]]))
        for k in range(3):
            x, y = a.per_class[k], b.per_class[perm[k]]
            assert (math.isnan(x) and math.isnan(y)) or x == pytest.approx(y)
        assert a.mean == pytest.approx(b.mean)

    def test_in_unit_interval(self):
        rng = np.random.default_rng(2)
        rep = ev.iou_scores(ev.confusion([random_labels(rng)], [random_labels(rng)]))
        assert all(0 <= v <= 1 for v in rep.per_class if not math.isnan(v))


class TestBinaryScoring:
    def test_clutter_counted_per_class(self):
        gt = np.array([[V, V, R, F, N]], np.uint8)
        mask = np.array([[Flag.KEEP, Flag.CLUTTER, Flag.CLUTTER, Flag.CLUTTER, Flag.NO_RETURN]], np.uint8)
        as_rain, as_fog = ev.binary_clutter_confusions([mask], [gt])
        # as RAIN: valid->valid 1, valid->rain 1, rain->rain 1, fog->rain 1
        np.testing.assert_array_equal(as_rain.counts, [[1, 1, 0], [0, 1, 0], [0, 1, 0]])
        np.testing.assert_array_equal(as_fog.counts, [[1, 0, 1], [0, 0, 1], [0, 0, 1]])
        rep = ev.binary_clutter_iou(as_rain, as_fog)
        assert rep.per_class == pytest.approx((0.5, 1 / 3, 1 / 3))
        assert rep.mean == pytest.approx((0.5 + 2 / 3) / 3)

    def test_self_scoring_mean_is_one(self):
        gt = CODES[np.random.default_rng(3).integers(0, 3, (5, 5))]
        rep = ev.iou_scores(ev.confusion([gt], [gt]))
        assert rep.mean == 1.0


class TestDegradation:
    def test_all_valid(self):
        assert ev.degradation_report(np.full((3, 3), V, np.uint8)).clutter_ratio == 0.0

    def test_thirty_percent(self):
        lab = np.full(120, N, np.uint8)
        lab[:70] = V
        lab[70:90] = R
        lab[90:100] = F
        rep = ev.degradation_report(lab)
        assert rep.clutter_ratio == pytest.approx(0.30) and (rep.clutter, rep.valid) == (30, 70)

    def test_no_labelled_pixels(self):
        with pytest.raises(ValueError):
            ev.degradation_report(np.full((2, 2), N, np.uint8))

    def test_curve_inversion(self):
        curve = ev.DegradationCurve((0.01, 0.03, 0.1), (0.0, 0.1, 0.3))
        rep = ev.degradation_report(np.array([V, V, V, F], np.uint8), curve)
        assert rep.beta_estimate == pytest.approx(0.03 + 0.07 * 0.75)
        assert rep.visibility_estimate == pytest.approx(-math.log(0.05) / rep.beta_estimate)
        with pytest.raises(ValueError):
            ev.DegradationCurve((0.1, 0.05), (0.0, 0.1))

    def test_ratio_monotone_over_fog_sweep(self):
        ratios = []
        frames = [raycast_scene(plaza_scene(k), seed=k) for k in range(10)]
        for beta in (0.002, 0.01, 0.05, 0.1):
            lab = [aug.augment(f, aug.fog_params(aug.visibility_beta(beta), seed=k))[1] for k, f in enumerate(frames)]
            ratios.append(ev.degradation_report(np.stack(lab)).clutter_ratio)
        assert ratios == sorted(ratios) and ratios[0] < ratios[-1]


class TestTables:
    def rows(self):
        return [("DROR", ev.IouReport((0.8813, 0.0694, 0.0737), 0.3415), None, None),
                ("WeatherNet", ev.IouReport((0.9, 0.8, float("nan")), 0.85), 1_529_507, 12.345)]

    def test_text_table(self):
        text = ev.format_table(self.rows())
        lines = text.splitlines()
        assert lines[0].split() == ["Approach", "Clear", "Rain", "Fog", "Mean", "Param[Mio]", "Runtime[ms]"]
        assert lines[2].split() == ["DROR", "88.13", "6.94", "7.37", "34.15", "-", "-"]
        assert lines[3].split() == ["WeatherNet", "90.00", "80.00", "-", "85.00", "1.53", "12.35"]

    def test_csv(self):
        text = ev.table_csv(self.rows())
        assert text.splitlines()[0] == "approach,clear,rain,fog,mean,params_mio,runtime_ms"
        assert text.splitlines()[1] == "DROR,88.13,6.94,7.37,34.15,-,-"

    def test_dat(self):
        text = ev.ratio_curve_dat([(29.957, 0.1, 0.25), (2995.7, 0.001, 0.0)])
        lines = text.splitlines()
        assert lines[0].startswith("#")
        assert [float(v) for v in lines[1].split()] == pytest.approx([29.957, 0.1, 0.25])


def test_near_field_clutter_fraction():
    d = np.array([[5.0, 10.0, 19.9, 25.0, 0.0, 2.0]])
    lab = np.array([[Label.FOG, Label.VALID, Label.RAIN, Label.FOG, Label.NO_RETURN, Label.VALID]], dtype=np.uint8)
    # within 20 m: FOG, VALID, RAIN, VALID -> 2 of 4
    assert ev.near_field_clutter_fraction(d, lab) == 0.5
    assert ev.near_field_clutter_fraction(d, lab, near=30.0) == pytest.approx(3 / 5)
    assert ev.near_field_clutter_fraction(d, lab, near=1.0) == 0.0
