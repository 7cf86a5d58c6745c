"""Tests for NIfTI reading/writing and the volume types."""

import gzip

import nibabel as nib
import numpy as np
import pytest

from tract_stack.errors import (
    ChannelCountError,
    CorruptData,
    FormatError,
    IoError,
    ShapeError,
    UnsupportedDatatype,
)
from tract_stack.volume_io import (
    BinaryMask,
    PeakVolume,
    ProbabilityVolume,
    load_nifti,
    read_header,
    save_nifti,
)

from conftest import seeded


def _peaks(dims=(4, 5, 6), seed=0):
    return PeakVolume(seeded((*dims, 9), seed, np.float32), voxel_size_mm=(1.25, 1.25, 1.25))


# --- volume types ---


def test_peak_volume_rejects_wrong_channel_count():
    with pytest.raises(ChannelCountError):
        PeakVolume(np.zeros((2, 2, 2, 6), dtype=np.float32))


def test_peak_volume_rejects_non_finite():
    data = np.zeros((2, 2, 2, 9), dtype=np.float32)
    data[0, 0, 0, 0] = np.nan
    with pytest.raises(CorruptData):
        PeakVolume(data)


def test_peak_volume_rejects_3d():
    with pytest.raises(ShapeError):
        PeakVolume(np.zeros((2, 2, 9), dtype=np.float32))


def test_mask_rejects_non_binary_values():
    with pytest.raises(CorruptData):
        BinaryMask(np.full((2, 2, 2), 2, dtype=np.uint8))


def test_probability_volume_range_checked():
    with pytest.raises(CorruptData):
        ProbabilityVolume(np.full((2, 2, 2), 1.5, dtype=np.float32))


def test_threshold_is_greater_or_equal():
    probs = ProbabilityVolume(np.array([[[0.49, 0.5, 0.51]]], dtype=np.float32))
    assert probs.threshold(0.5).data.tolist() == [[[0, 1, 1]]]


def test_volume_data_is_read_only():
    volume = _peaks()
    with pytest.raises(ValueError):
        volume.data[0, 0, 0, 0] = 1.0


def test_peak_accessor_returns_triplets():
    volume = _peaks()
    np.testing.assert_array_equal(volume.peak(1), volume.data[..., 3:6])


# --- roundtrips ---


def test_peak_roundtrip_is_bitwise(tmp_path):
    volume = _peaks()
    path = tmp_path / "peaks.nii.gz"
    save_nifti(volume, path)

    loaded = load_nifti(path)

    assert isinstance(loaded, PeakVolume)
    assert loaded.data.tobytes() == volume.data.tobytes()
    assert loaded.voxel_size_mm == volume.voxel_size_mm
    np.testing.assert_allclose(loaded.affine, volume.affine)


def test_mask_roundtrip_uncompressed(tmp_path):
    mask = BinaryMask((seeded((5, 4, 3), 1) > 0).astype(np.uint8))
    path = tmp_path / "mask.nii"
    save_nifti(mask, path)

    loaded = load_nifti(path)

    assert isinstance(loaded, BinaryMask)
    np.testing.assert_array_equal(loaded.data, mask.data)
    assert read_header(path)["datatype"] == 2


def test_probability_roundtrip(tmp_path):
    probs = ProbabilityVolume(np.random.default_rng(2).random((3, 4, 5)).astype(np.float32))
    path = tmp_path / "prob.nii.gz"
    save_nifti(probs, path)

    loaded = load_nifti(path)

    assert isinstance(loaded, ProbabilityVolume)
    assert loaded.data.tobytes() == probs.data.tobytes()


def test_int16_mask_is_binarised(tmp_path):
    data = np.zeros((3, 3, 3), dtype=np.int16)
    data[1, 1, 1] = 7
    path = tmp_path / "labels.nii.gz"
    nib.save(nib.Nifti1Image(data, np.eye(4)), str(path))

    mask = load_nifti(path, kind="mask")

    assert mask.count == 1


# --- error paths ---


def test_missing_file_is_io_error(tmp_path):
    with pytest.raises(IoError):
        load_nifti(tmp_path / "nope.nii.gz")


def test_bad_magic_is_format_error(tmp_path):
    path = tmp_path / "junk.nii"
    path.write_bytes(b"\x00" * 400)
    with pytest.raises(FormatError):
        read_header(path)


def test_truncated_header_is_format_error(tmp_path):
    path = tmp_path / "short.nii.gz"
    with gzip.open(path, "wb") as f:
        f.write(b"\x5c\x01\x00\x00" + b"\x00" * 20)
    with pytest.raises(FormatError):
        load_nifti(path)


def test_float64_is_unsupported(tmp_path):
    path = tmp_path / "f64.nii.gz"
    nib.save(nib.Nifti1Image(np.zeros((2, 2, 2), dtype=np.float64), np.eye(4)), str(path))
    with pytest.raises(UnsupportedDatatype):
        load_nifti(path)


def test_nan_in_file_is_corrupt(tmp_path):
    data = np.zeros((2, 2, 2), dtype=np.float32)
    data[0, 0, 0] = np.inf
    path = tmp_path / "inf.nii.gz"
    nib.save(nib.Nifti1Image(data, np.eye(4)), str(path))
    with pytest.raises(CorruptData):
        load_nifti(path)


def test_peaks_with_six_channels_rejected(tmp_path):
    path = tmp_path / "six.nii.gz"
    nib.save(nib.Nifti1Image(np.zeros((2, 2, 2, 6), dtype=np.float32), np.eye(4)), str(path))
    with pytest.raises(ChannelCountError):
        load_nifti(path, kind="peaks")
