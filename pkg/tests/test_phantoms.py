import math

import numpy as np
import pytest

from vhskit.errors import ConfigError
from vhskit.geometry import calc_vhs, classify, distance
from vhskit.phantoms import (PhantomSpec, generate_phantoms,
                             make_phantom_bundle, phantom_keypoints,
                             random_phantom_specs, render_phantom)


def _spec(**overrides):
    kwargs = dict(side=32, target_vhs=9.0, center=(0.5, 0.62), orientation=math.radians(80),
                  long_axis=0.38, axis_ratio=0.7, spine_start=(0.1, 0.1),
                  spine_angle=math.radians(5), noise=0.02, seed=0)
    kwargs.update(overrides)
    return PhantomSpec(**kwargs)


def test_keypoints_hit_requested_score():
    for target in (6.5, 8.2, 9.7, 11.5):
        ks = phantom_keypoints(_spec(target_vhs=target))
        assert calc_vhs(ks) == pytest.approx(target, rel=1e-12)


def test_axis_lengths_follow_spec():
    ks = phantom_keypoints(_spec(long_axis=0.4, axis_ratio=0.5))
    pts = ks.points
    assert distance(pts[0], pts[1]) == pytest.approx(0.4, rel=1e-12)
    assert distance(pts[2], pts[3]) == pytest.approx(0.2, rel=1e-12)


def test_score_twelve_means_axes_twice_vertebra():
    ks = phantom_keypoints(_spec(target_vhs=12.0))
    pts = ks.points
    axes = distance(pts[0], pts[1]) + distance(pts[2], pts[3])
    assert axes == pytest.approx(2.0 * distance(pts[4], pts[5]), rel=1e-12)


def test_keypoints_stay_in_frame():
    ks = phantom_keypoints(_spec())
    assert np.all(ks.points >= 0.0) and np.all(ks.points <= 1.0)
    with pytest.raises(ConfigError):
        phantom_keypoints(_spec(long_axis=0.9, center=(0.9, 0.9)))


def test_spec_validation():
    with pytest.raises(ConfigError, match="positive"):
        _spec(target_vhs=0.0)
    with pytest.raises(ConfigError):
        _spec(side=8)
    with pytest.raises(ConfigError):
        _spec(axis_ratio=0.0)
    with pytest.raises(ConfigError):
        _spec(noise=-0.1)


def test_render_shape_and_determinism():
    img1 = render_phantom(_spec())
    img2 = render_phantom(_spec())
    assert img1.shape == (32, 32) and img1.dtype == np.uint8
    assert np.array_equal(img1, img2)
    assert not np.array_equal(img1, render_phantom(_spec(seed=1)))


def test_render_paints_heart_above_background():
    spec = _spec(noise=0.0)
    img = render_phantom(spec)
    cx, cy = (int(c * spec.side) for c in spec.center)
    assert img[cy, cx] > 100  # heart interior
    assert img[spec.side - 1, spec.side - 1] < 40  # background corner


def test_random_specs_cover_range_and_stay_in_frame():
    specs = random_phantom_specs(300, master_seed=11)
    scores = np.array([s.target_vhs for s in specs])
    assert scores.min() >= 6.5 and scores.max() <= 11.5
    assert scores.std() > 0.5  # spread, not collapsed
    for spec in specs[::25]:
        pts = phantom_keypoints(spec).points
        assert np.all(pts >= 0.0) and np.all(pts <= 1.0)


def test_random_specs_class_histogram_matches_thresholds():
    specs = random_phantom_specs(300, master_seed=11)
    from_targets = np.array([int(classify(s.target_vhs)) for s in specs])
    from_points = np.array([int(classify(calc_vhs(phantom_keypoints(s)))) for s in specs])
    assert np.array_equal(from_targets, from_points)
    counts = np.bincount(from_targets, minlength=3)
    assert counts.sum() == 300 and np.all(counts > 0)


def test_generate_phantoms_builds_annotated_dataset():
    ds = generate_phantoms(random_phantom_specs(4, master_seed=2, side=24))
    assert ds.ids == [f"ph-{i:05d}" for i in range(4)]
    for sample in ds:
        assert sample.provenance == "phantom"
        assert sample.annotation.provenance == "phantom"
        assert sample.annotation.annotator == "phantom-generator"
        assert sample.annotation.vhs == pytest.approx(
            calc_vhs(sample.label.points), abs=1e-9)
        assert sample.pixels.shape == (24, 24)


def test_bundle_split_sizes_and_unlabeled_stripping():
    ds = make_phantom_bundle(n_train=10, n_valid=3, n_test=4, n_unlabeled=8,
                             side=16, seed=3)
    counts = ds.split_counts()
    assert (counts["train"], counts["valid"], counts["test"], counts["unlabeled"]) == (10, 3, 4, 8)
    for sample in ds.by_split("unlabeled"):
        assert sample.label is None and sample.annotation is None
    for split in ("train", "valid", "test"):
        for sample in ds.by_split(split):
            assert sample.annotation is not None


def test_bundle_is_deterministic():
    a = make_phantom_bundle(n_train=4, n_valid=2, n_test=2, n_unlabeled=3, side=16, seed=9)
    b = make_phantom_bundle(n_train=4, n_valid=2, n_test=2, n_unlabeled=3, side=16, seed=9)
    assert a.ids == b.ids
    for sid in a.ids:
        assert np.array_equal(a.get(sid).pixels, b.get(sid).pixels)
        assert a.get(sid).split == b.get(sid).split
