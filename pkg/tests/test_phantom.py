"""Tests for the synthetic phantom generator."""

from dataclasses import replace

import numpy as np
import pytest
from scipy.spatial import cKDTree

from tract_stack.errors import SpecError
from tract_stack.metrics import dice
from tract_stack.phantom import (
    BUNDLE_PRESETS,
    PhantomSpec,
    arc_geometry,
    bundle_spec,
    distance_to_arc,
    downsample,
    generate,
    generate_dataset,
    is_connected,
    subject_spec,
)


@pytest.fixture(scope="module")
def default_phantom():
    return generate(PhantomSpec())


def _brute_force_mask(spec):
    geometry = arc_geometry(spec)
    thetas = np.linspace(geometry.start, geometry.start + geometry.sweep, 200_001)
    tree = cKDTree(geometry.point(thetas))
    coords = np.indices((spec.dim,) * 3).reshape(3, -1).T.astype(np.float64)
    dist, _ = tree.query(coords, distance_upper_bound=spec.tube_radius_vox + 1.0)
    return (dist <= spec.tube_radius_vox).reshape((spec.dim,) * 3)


def test_mask_matches_brute_force_scan(default_phantom):
    spec = PhantomSpec()
    _, mask = default_phantom
    assert arc_geometry(spec).radius == pytest.approx(35.2)
    assert mask.count == int(_brute_force_mask(spec).sum())
    np.testing.assert_array_equal(mask.data.astype(bool), _brute_force_mask(spec))


def test_nonzero_peaks_are_unit(default_phantom):
    peaks, _ = default_phantom
    vectors = peaks.data.reshape(-1, 3).astype(np.float64)
    norms = np.linalg.norm(vectors, axis=1)
    nonzero = norms > 0
    assert nonzero.any()
    np.testing.assert_allclose(norms[nonzero], 1.0, atol=1e-5)


def test_generation_is_deterministic(small_spec):
    a_peaks, a_mask = generate(small_spec)
    b_peaks, b_mask = generate(small_spec)
    assert a_peaks.data.tobytes() == b_peaks.data.tobytes()
    assert a_mask.data.tobytes() == b_mask.data.tobytes()


def test_different_seed_changes_noise_not_mask(small_spec):
    a_peaks, a_mask = generate(small_spec)
    b_peaks, b_mask = generate(replace(small_spec, seed=1))
    np.testing.assert_array_equal(a_mask.data, b_mask.data)
    assert not np.array_equal(a_peaks.data, b_peaks.data)


def test_inside_peaks_follow_tangent(default_phantom):
    spec = PhantomSpec()
    peaks, mask = default_phantom
    geometry = arc_geometry(spec)
    coords = np.argwhere(mask.data.astype(bool)).astype(np.float64)
    _, theta = distance_to_arc(coords, geometry)
    tangent = geometry.tangent(theta)
    idx = tuple(coords.astype(int).T)
    peak1 = peaks.data[idx][:, 0:3].astype(np.float64)
    cosine = np.abs(np.sum(peak1 * tangent, axis=1))
    assert np.mean(cosine >= 0.9) >= 0.99


def test_crossing_sheet_adds_second_peak(default_phantom):
    peaks, mask = default_phantom
    inside = mask.data.astype(bool)
    second = np.linalg.norm(peaks.data[..., 3:6], axis=-1) > 0
    assert second[inside].any()
    assert not second[~inside].any()
    assert not np.any(peaks.data[..., 6:9])


def test_no_sheet_leaves_second_peak_empty(small_spec):
    peaks, _ = generate(replace(small_spec, crossing_sheet=False))
    assert not np.any(peaks.data[..., 3:9])


def test_distractor_fraction(default_phantom):
    peaks, mask = default_phantom
    outside = ~mask.data.astype(bool)
    occupied = np.linalg.norm(peaks.data[..., 0:3], axis=-1) > 0
    # sheet voxels always carry a peak, so the fraction sits a little above the density
    assert 0.29 <= np.mean(occupied[outside]) < 0.4


def test_mask_is_connected(default_phantom):
    assert is_connected(default_phantom[1])


def test_tube_outside_grid_rejected():
    with pytest.raises(SpecError):
        generate(PhantomSpec(dim=32, arc_radius=60.0))


@pytest.mark.parametrize(
    "changes",
    [{"distractor_density": 0.0}, {"distractor_density": 1.0}, {"tube_radius_vox": 0.0}],
)
def test_invalid_spec(changes):
    with pytest.raises(SpecError):
        replace(PhantomSpec(), **changes).validate()


# --- datasets ---


def test_single_subject_dataset_equals_generate():
    base = PhantomSpec()
    [(peaks, mask)] = generate_dataset(1, base, seed=4)
    expected_peaks, expected_mask = generate(subject_spec(base, 0, 4))
    assert peaks.data.tobytes() == expected_peaks.data.tobytes()
    assert mask.data.tobytes() == expected_mask.data.tobytes()


def test_dataset_requires_subjects():
    with pytest.raises(SpecError):
        generate_dataset(0, PhantomSpec(), seed=0)


def test_subject_jitter_ranges():
    base = PhantomSpec()
    for i in range(10):
        spec = subject_spec(base, i, seed=1)
        assert spec.seed == 1 + i
        assert 0.9 * 35.2 <= spec.arc_radius <= 1.1 * 35.2
        assert 0.8 * 3.0 <= spec.tube_radius_vox <= 1.2 * 3.0


@pytest.mark.slow
def test_thirty_subjects_distinct_and_imbalanced():
    data = generate_dataset(30, PhantomSpec(), seed=1)
    masks = [m for _, m in data]
    for mask in masks:
        fraction = mask.count / mask.data.size
        assert 0.002 <= fraction <= 0.06
    for i in range(len(masks)):
        for j in range(i + 1, len(masks)):
            assert dice(masks[i], masks[j]) < 1.0


# --- presets and downsampling ---


def test_bundle_presets():
    assert set(BUNDLE_PRESETS) == {"medium", "hard", "very_hard"}
    assert bundle_spec("hard").tube_radius_vox == 2.2
    assert bundle_spec("very_hard").peak_noise_sigma == 0.1
    with pytest.raises(SpecError):
        bundle_spec("impossible")


def test_downsample_shapes_and_units(small_phantom):
    peaks, mask = small_phantom
    low_peaks, low_mask = downsample(peaks, mask, 2)

    assert low_peaks.dims == (12, 12, 12)
    assert low_mask.dims == (12, 12, 12)
    assert low_peaks.voxel_size_mm == (2.0, 2.0, 2.0)
    norms = np.linalg.norm(low_peaks.data.reshape(-1, 3), axis=1)
    np.testing.assert_allclose(norms[norms > 0], 1.0, atol=1e-5)


def test_downsample_majority_vote():
    from tract_stack.volume_io import BinaryMask, PeakVolume

    data = np.zeros((2, 2, 2), dtype=np.uint8)
    data.reshape(-1)[:4] = 1
    peaks = PeakVolume(np.zeros((2, 2, 2, 9), dtype=np.float32))
    _, low = downsample(peaks, BinaryMask(data), 2)
    assert low.data.tolist() == [[[1]]]


def test_downsample_requires_divisible_dims(small_phantom):
    with pytest.raises(SpecError):
        downsample(*small_phantom, 5)
