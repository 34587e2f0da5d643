import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lidar_denoise.autolabel import (
    AutolabelParams,
    accumulate_reference,
    label_clutter,
    load_reference_frames,
    reference_self_check,
    save_reference_stack,
)
from lidar_denoise.core import Label, RangeImage
from lidar_denoise.synth import chamber_scene, raycast_scene


def img(d, fid="f"):
    d = np.asarray(d, dtype=np.float64)
    return RangeImage(d, np.where(d > 0, 0.5, 0), fid)


def test_stack_shape():
    frames = [img(np.full((32, 1800), k + 1.0), f"r{k}") for k in range(10)]
    ref = accumulate_reference(frames)
    assert ref.distances.shape == (32, 1800, 10) and ref.frame_count == 10
    for k, f in enumerate(frames):
        np.testing.assert_array_equal(ref.distances[:, :, k], f.distance)


def test_stack_errors():
    with pytest.raises(ValueError):
        accumulate_reference([])
    with pytest.raises(ValueError):
        accumulate_reference([img(np.ones((2, 3))), img(np.ones((2, 4)))])


def test_single_frame_stack():
    ref = accumulate_reference([img([[10.0, 0.0]])])
    lab = label_clutter(img([[10.1, 3.0]]), ref)
    assert ref.frame_count == 1
    assert lab.tolist() == [[Label.VALID, Label.FOG]]


def test_match_within_delta_is_valid():
    ref = accumulate_reference([img([[10.2]]), img([[10.4]])])
    assert label_clutter(img([[10.0]]), ref)[0, 0] == Label.VALID


def test_no_match_is_weather_class():
    ref = accumulate_reference([img([[10.2]]), img([[10.4]])])
    assert label_clutter(img([[5.0]]), ref, AutolabelParams(0.35, Label.FOG))[0, 0] == Label.FOG
    assert label_clutter(img([[5.0]]), ref, AutolabelParams(0.35, Label.RAIN))[0, 0] == Label.RAIN


def test_no_return_and_empty_reference_column():
    ref = accumulate_reference([img([[0.0, 0.0, 4.0]]), img([[0.0, 7.0, 0.0]])])
    lab = label_clutter(img([[0.0, 0.0, 4.1]]), ref)
    assert lab[0, 0] == Label.NO_RETURN and lab[0, 1] == Label.NO_RETURN
    lab = label_clutter(img([[3.0, 7.0, 4.0]]), ref)
    # reference never returned in column 0 -> the return is clutter; empty reference entries ignored
    assert lab.tolist() == [[Label.FOG, Label.VALID, Label.VALID]]


def test_shape_mismatch():
    with pytest.raises(ValueError):
        label_clutter(img(np.ones((2, 2))), accumulate_reference([img(np.ones((2, 3)))]))


def test_params_validation():
    with pytest.raises(ValueError):
        AutolabelParams(0.0)
    with pytest.raises(ValueError):
        AutolabelParams(0.3, Label.VALID)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 1.0), st.floats(0.0, 1.0))
def test_monotone_in_delta_r_and_partition(seed, dr, extra):
    rng = np.random.default_rng(seed)
    shape = (4, 20)
    refs = [img(rng.uniform(1, 20, shape) * (rng.random(shape) < 0.8)) for _ in range(3)]
    frame = img(rng.uniform(1, 20, shape) * (rng.random(shape) < 0.8))
    ref = accumulate_reference(refs)
    small = label_clutter(frame, ref, AutolabelParams(dr))
    large = label_clutter(frame, ref, AutolabelParams(dr + extra + 1e-9))
    assert not np.any((small == Label.VALID) & (large == Label.FOG))
    assert np.isin(small, [Label.VALID, Label.FOG, Label.NO_RETURN]).all()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_frame_in_its_own_stack_has_no_clutter(seed):
    rng = np.random.default_rng(seed)
    frames = [img(rng.uniform(1, 100, (3, 9)) * (rng.random((3, 9)) < 0.7)) for _ in range(4)]
    ref = accumulate_reference(frames)
    for f in frames:
        assert not np.any(label_clutter(f, ref) == Label.FOG)


def test_self_check_identical_frames():
    frames = [img(np.full((32, 1800), 12.0), f"r{k}") for k in range(6)]
    rep = reference_self_check(frames)
    assert rep.mean_per_pixel_false_rate == 0 and rep.pixels_per_frame == 32 * 400
    assert len(rep.per_frame_false_counts) == 6


def test_self_check_needs_two_frames():
    with pytest.raises(ValueError):
        reference_self_check([img(np.ones((32, 1800)))])


def test_self_check_counts_and_rates():
    base = np.full((2, 10), 5.0)
    moved = base.copy()
    moved[0, :3] = 9.0
    frames = [img(base, "a"), img(base, "b"), img(moved, "c"), img(base, "d")]
    rep = reference_self_check(frames, crop_width=10, start_col=0)
    # second half (c, d) against {a, b}: c has 3 false; first half against {c, d}: none (d matches)
    assert sorted(rep.per_frame_false_counts) == [0, 0, 0, 3]
    rates = np.array([0, 0, 3, 0]) / 20
    assert rep.mean_per_pixel_false_rate == pytest.approx(rates.mean())
    assert rep.std_per_pixel_false_rate == pytest.approx(rates.std())


def test_synthetic_noisy_scene_false_rate_small():
    scene = chamber_scene(3, noise_sigma=0.02)
    frames = [raycast_scene(scene, seed=k) for k in range(8)]
    rep = reference_self_check(frames)
    assert rep.mean_per_pixel_false_rate <= 0.001


def test_reference_stack_persistence(tmp_path):
    frames = [img(np.random.default_rng(k).uniform(1, 9, (3, 5)), f"ref{k}") for k in range(3)]
    path = save_reference_stack(tmp_path, frames, "scene")
    loaded = load_reference_frames(path)
    assert loaded == frames
