import numpy as np
import pytest
from hypothesis import given, strategies as st

from t2v.data import BACKGROUND, COLORS, ClipSpec, centroid, generate_clip, make_batch
from t2v.rng import Rng


def test_same_seed_same_stream():
    np.testing.assert_array_equal(Rng(5).normal((100,)), Rng(5).normal((100,)))
    assert not np.array_equal(Rng(5).normal((100,)), Rng(6).normal((100,)))


def test_split_is_stateless_and_distinct():
    r = Rng(1)
    a = r.split(3).uniform((50,))
    r.uniform((10,))  # advancing the parent does not move its children
    np.testing.assert_array_equal(a, r.split(3).uniform((50,)))
    assert not np.array_equal(a, r.split(4).uniform((50,)))


def test_sequential_draws_differ():
    r = Rng(0)
    assert not np.array_equal(r.uniform((8,)), r.uniform((8,)))


def test_normal_moments():
    z = Rng(11).normal((200_000,), dtype=np.float64)
    assert abs(z.mean()) < 0.01
    assert abs(z.var() - 1.0) < 0.01
    # fourth moment of a Gaussian is 3
    assert abs(np.mean(z ** 4) - 3.0) < 0.05


@given(st.integers(0, 2**63), st.integers(1, 20), st.integers(2, 9))
def test_integers_in_range(seed, n, high):
    v = Rng(seed).integers(0, high, (n,))
    assert v.min() >= 0 and v.max() < high


def test_permutation_is_permutation():
    p = Rng(2).permutation(17)
    assert sorted(p.tolist()) == list(range(17))


def test_clip_deterministic_and_captioned():
    spec = ClipSpec("circle", "blue", "up", seed=4)
    a, cap = generate_clip(spec)
    b, _ = generate_clip(spec)
    np.testing.assert_array_equal(a, b)
    assert cap == "a blue circle moving up"
    assert a.shape == (8, 32, 32, 3) and a.dtype == np.float32
    assert a.min() >= 0 and a.max() <= 1


@pytest.mark.parametrize("shape", ["square", "circle", "triangle"])
def test_centroid_moves_two_pixels_per_frame(shape):
    clip, _ = generate_clip(ClipSpec(shape, "red", "right", speed=2.0, seed=9))
    xs = [centroid(f)[0] for f in clip]
    steps = np.diff(xs)
    assert np.all(np.abs(steps - 2.0) <= 0.1), steps


@pytest.mark.parametrize("direction,axis,sign", [("left", 0, -1), ("down", 1, 1), ("up", 1, -1)])
def test_motion_direction(direction, axis, sign):
    clip, _ = generate_clip(ClipSpec("square", "green", direction, speed=1.5, seed=2))
    c = [centroid(f)[axis] for f in clip]
    assert np.all(sign * np.diff(c) > 1.4)


@given(st.integers(0, 10**6), st.sampled_from(["left", "right", "up", "down"]), st.floats(0.5, 3.0))
def test_trajectory_stays_in_frame(seed, direction, speed):
    clip, _ = generate_clip(ClipSpec("square", "yellow", direction, speed=speed, seed=seed))
    # the whole square, area (2*5)^2 = 100 px, stays visible in every frame
    cov = (clip[..., 0] - BACKGROUND) / (COLORS["yellow"][0] - BACKGROUND)
    np.testing.assert_allclose(cov.sum(axis=(1, 2)), 100.0, atol=2.0)


def test_single_frame_clip():
    clip, cap = generate_clip(ClipSpec("triangle", "red", "left", frames=1))
    assert clip.shape == (1, 32, 32, 3)
    assert cap.startswith("a red triangle")


def test_shape_too_big():
    with pytest.raises(ValueError):
        generate_clip(ClipSpec("square", "red", "left", size=16.0))


def test_make_batch():
    clips, caps = make_batch(Rng(0), 3, 4)
    assert clips.shape == (3, 4, 32, 32, 3) and len(caps) == 3
