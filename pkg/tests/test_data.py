import numpy as np
import pytest

from conftest import SMALL_PHANTOM
from sfae import io as rawio
from sfae.data import (
    DatasetSplit,
    SliceBatch,
    Volume,
    equalize_volume,
    inject_sinks,
    load_dataset,
    load_volume,
    make_phantom_dataset,
    make_phantom_volume,
    preprocess,
    save_dataset,
    split_counts,
)
from sfae.exceptions import ContractError, FormatError, RangeError


def equalize_oracle(v, nbins=256):
    fg = v != 0
    vals = v[fg]
    hist, edges = np.histogram(vals, bins=nbins, range=(vals.min(), vals.max()))
    cdf = np.cumsum(hist) / hist.sum()
    centers = (edges[:-1] + edges[1:]) / 2
    out = np.zeros_like(v, dtype=np.float64)
    out[fg] = np.interp(vals, centers, cdf)
    return out


def test_equalization_matches_oracle(rng):
    v = rng.gamma(2.0, size=(6, 20, 20)) * (rng.random((6, 20, 20)) > 0.3)
    np.testing.assert_allclose(equalize_volume(v), equalize_oracle(v), atol=1e-9)


def test_ramp_histogram_near_uniform():
    vol = np.linspace(0.01, 1, 90 * 64 * 64).reshape(64, 64, 90).transpose(2, 0, 1) ** 2
    out = preprocess(Volume(vol), 80, 64).images
    vals = out[out > 0]
    counts, _ = np.histogram(vals, bins=16, range=(0, 1))
    uniform = vals.size / 16
    assert (counts >= uniform / 2).all() and (counts <= 2 * uniform).all()


def test_center_slices():
    vol = Volume(np.random.default_rng(0).random((155, 24, 24)), id="v")
    batch = preprocess(vol, 80, 32)
    idx = [i for _, i in batch.ids]
    assert len(batch) == 80 and idx == list(range(37, 117))
    assert idx[40] == 77
    assert batch.images.min() >= 0 and batch.images.max() <= 1
    with pytest.raises(RangeError):
        preprocess(Volume(np.ones((79, 8, 8))), 80, 8)


def test_zero_volume():
    out = preprocess(Volume(np.zeros((80, 16, 16))), 80, 32)
    assert not out.images.any()


def test_nifti_axis_order(tmp_path):
    data = np.zeros((240, 240, 155), np.uint8)
    data[120, 100, 7] = 9
    rawio.write_nifti(tmp_path / "v.nii.gz", data, (1.0, 1.0, 2.0))
    vol = load_volume(tmp_path / "v.nii.gz")
    assert vol.n_slices == 155 and vol.voxels.shape == (155, 240, 240)
    assert vol.voxels[7, 120, 100] == 9
    assert vol.spacing == (2.0, 1.0, 1.0)


def test_raw_roundtrip_and_errors(tmp_path):
    vol = make_phantom_volume(0, 0, SMALL_PHANTOM)
    rawio.write_raw(tmp_path / "p.sfr", vol.voxels, {"spacing": [1.0, 1.0, 1.0]})
    back = load_volume(tmp_path / "p.sfr")
    assert back.voxels.dtype == vol.voxels.dtype
    assert np.array_equal(back.voxels, vol.voxels)
    bad = vol.voxels.copy()
    bad[0, 0, 0] = np.nan
    rawio.write_raw(tmp_path / "nan.sfr", bad)
    with pytest.raises(FormatError):
        load_volume(tmp_path / "nan.sfr")
    rawio.write_raw(tmp_path / "2d.sfr", np.zeros((4, 4)))
    with pytest.raises(FormatError):
        load_volume(tmp_path / "2d.sfr")
    with pytest.raises(FileNotFoundError):
        load_volume(tmp_path / "missing.sfr")
    (tmp_path / "junk.nii").write_bytes(b"nope")
    with pytest.raises(FormatError):
        load_volume(tmp_path / "junk.nii")


def test_phantom_determinism_and_seed():
    a = make_phantom_dataset(4, 0, SMALL_PHANTOM, n_center_slices=12, out_size=64)
    b = make_phantom_dataset(4, 0, SMALL_PHANTOM, n_center_slices=12, out_size=64)
    c = make_phantom_dataset(4, 1, SMALL_PHANTOM, n_center_slices=12, out_size=64)
    for name in ("train", "val", "test"):
        assert getattr(a, name).images.tobytes() == getattr(b, name).images.tobytes()
    assert np.array_equal(a.test.masks, b.test.masks)
    assert not np.array_equal(a.train.images, c.train.images)


def test_phantom_split_labels(small_split):
    assert not small_split.train.labels.any()
    for part in (small_split.val, small_split.test):
        assert abs(part.labels.sum() - len(part) / 2) <= 1
        assert part.is_labeled
        assert all((s is None) == (not l) for s, l in zip(part.sinks, part.labels))
    for part in (small_split.train, small_split.val, small_split.test):
        assert part.images.min() >= 0 and part.images.max() <= 1


def test_split_counts():
    assert split_counts(50) == (40, 1, 9)
    assert sum(split_counts(3)) == 3
    with pytest.raises(RangeError):
        split_counts(2)


def test_training_split_rejects_anomalies(small_split):
    with pytest.raises(ContractError):
        DatasetSplit(small_split.test, small_split.val, small_split.test)


def test_slicebatch_contracts():
    with pytest.raises(ContractError):
        SliceBatch(np.full((2, 4, 4), 1.5))
    with pytest.raises(ContractError):
        SliceBatch(np.zeros((2, 4, 4)), np.zeros((2, 4, 4), bool), np.array([1, 0]))
    b = SliceBatch(np.zeros((5, 4, 4)))
    assert [len(x) for x in b.batches(2)] == [2, 2, 1]


def test_inject_sinks_deterministic(small_split):
    base = SliceBatch(small_split.train.images[:10], ids=small_split.train.ids[:10])
    a, b = inject_sinks(base, 3), inject_sinks(base, 3)
    assert a.labels.sum() == 5
    assert np.array_equal(a.images, b.images) and np.array_equal(a.masks, b.masks)
    normal = ~a.labels.astype(bool)
    assert np.array_equal(a.images[normal], base.images[normal])


def test_dataset_persistence(tmp_path, small_split):
    save_dataset(small_split, tmp_path / "ds")
    back = load_dataset(tmp_path / "ds")
    for name in ("train", "val", "test"):
        x, y = getattr(small_split, name), getattr(back, name)
        assert np.array_equal(x.images, y.images)
        assert x.ids == y.ids
    assert np.array_equal(small_split.test.masks, back.test.masks)
    assert back.test.sinks == small_split.test.sinks
