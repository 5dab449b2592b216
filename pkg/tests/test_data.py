import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sctforge.data import (
    DatasetSplit, PatientVolumePair, denormalize, load_patient, normalize_hu, save_patient, slice_pairs,
    split_dataset, validate_pair,
)
from sctforge.errors import IntegrityError, LoadError, ParameterError
from sctforge.phantom import PhantomParams, generate_phantom_patient


def test_phantom_round_trip_through_disk(tmp_path):
    pair = generate_phantom_patient(PhantomParams(seed=7, depth_range=(64, 64)), "P007", "centerA")
    path = save_patient(pair, tmp_path)
    back = load_patient(path)
    assert back.depth == 64
    assert back.center_id == "centerA"
    np.testing.assert_array_equal(back.cbct, pair.cbct)
    np.testing.assert_array_equal(back.ct, pair.ct)
    meta = json.loads((path / "meta.json").read_text())
    assert {k: meta[k] for k in ("depth", "height", "width")} == dict(zip(("depth", "height", "width"), pair.shape))


def test_missing_modality_is_integrity_error(small_pair, tmp_path):
    path = save_patient(small_pair, tmp_path)
    (path / "cbct.f32").unlink()
    with pytest.raises(IntegrityError):
        load_patient(path)


def test_missing_sidecar_is_load_error(small_pair, tmp_path):
    path = save_patient(small_pair, tmp_path)
    (path / "meta.json").unlink()
    with pytest.raises(LoadError):
        load_patient(path)


def test_depth_mismatch_on_disk(tmp_path):
    rng = np.random.default_rng(0)
    d = tmp_path / "bad"
    d.mkdir()
    rng.normal(size=(60, 4, 5)).astype("<f4").tofile(d / "cbct.f32")
    rng.normal(size=(59, 4, 5)).astype("<f4").tofile(d / "ct.f32")
    (d / "meta.json").write_text(json.dumps({"height": 4, "width": 5, "center_id": "c"}))
    with pytest.raises(IntegrityError, match="depth mismatch"):
        load_patient(d)


def test_pair_invariants():
    with pytest.raises(IntegrityError):
        PatientVolumePair("x", np.zeros((3, 4, 4)), np.zeros((2, 4, 4)))
    with pytest.raises(IntegrityError):
        PatientVolumePair("x", np.zeros((3, 4, 4)), np.zeros((3, 4, 5)))
    with pytest.raises(IntegrityError):
        PatientVolumePair("x", np.zeros((0, 4, 4)), np.zeros((0, 4, 4)))
    pair = PatientVolumePair("x", np.zeros((40, 4, 4)), np.zeros((40, 4, 4)))
    with pytest.raises(IntegrityError):
        validate_pair(pair, (50, 105))
    validate_pair(pair)


@pytest.mark.parametrize("hu,expected", [(-1000.0, -1.0), (500.0, 0.0), (2500.0, 1.0), (-3000.0, -1.0)])
def test_normalize_examples(hu, expected):
    assert normalize_hu(np.array([hu]), (-1000, 2000)).data[0] == expected


def test_denormalize_examples():
    assert denormalize(-1.0) == -1000.0
    assert denormalize(0.0) == 500.0
    assert denormalize(1.0) == 2000.0
    with pytest.raises(ParameterError):
        denormalize(1.5)
    with pytest.raises(ParameterError):
        normalize_hu(np.zeros(3), (100, 100))


def test_round_trip_1000_values():
    hu = np.random.default_rng(1).uniform(-1000, 2000, 1000)
    np.testing.assert_allclose(denormalize(normalize_hu(hu).data), hu, atol=1e-6, rtol=0)


@settings(max_examples=50, deadline=None)
@given(st.floats(-1000, 2000), st.floats(-5000, -1001), st.floats(2001, 9000))
def test_normalized_range_and_inverse(h, below, above):
    v = normalize_hu(np.array([h, below, above])).data
    assert np.all((v >= -1) & (v <= 1))
    assert abs(denormalize(v[0]) - h) < 1e-6


def test_slice_pairs_index_oracle():
    pair = generate_phantom_patient(PhantomParams(seed=7, depth_range=(64, 64)), "P001")
    slices = slice_pairs(pair)
    assert [s.slice_index for s in slices] == list(range(64))
    k = 17
    np.testing.assert_allclose(slices[k].cbct_slice, normalize_hu(pair.cbct[k]).data, atol=1e-6)
    np.testing.assert_allclose(slices[k].ct_slice, normalize_hu(pair.ct[k]).data, atol=1e-6)
    assert all(s.dims == pair.shape[1:] for s in slices)


def test_split_sizes_and_remainder_mode():
    ids = [f"P{i:03d}" for i in range(150)]
    centers = {p: f"c{i % 3}" for i, p in enumerate(ids)}
    s = split_dataset(ids, (35, 15, 10), seed=4, centers=centers)
    assert (len(s.train), len(s.validation), len(s.test)) == (35, 15, 10)
    assert len(set(ids) - set(s.train) - set(s.validation) - set(s.test)) == 90
    s2 = split_dataset(ids, (35, 15, None), seed=4, centers=centers)
    assert len(s2.test) == 100
    assert split_dataset(ids, (35, 15, 10), seed=4, centers=centers) == s
    assert split_dataset(ids, (35, 15, 10), seed=5, centers=centers) != s


def test_split_is_stratified_by_center():
    ids = [f"P{i:03d}" for i in range(60)]
    centers = {p: ("a" if i < 30 else "b" if i < 50 else "c") for i, p in enumerate(ids)}
    s = split_dataset(ids, (30, 12, 6), seed=0, centers=centers)
    counts = {c: sum(centers[p] == c for p in s.train) for c in "abc"}
    assert counts == {"a": 15, "b": 10, "c": 5}


def test_split_errors_and_serialization(tmp_path):
    with pytest.raises(ParameterError):
        split_dataset(["a", "b"], (2, 1, 0))
    with pytest.raises(IntegrityError):
        DatasetSplit(["a"], ["a"], [])
    with pytest.raises(ParameterError):
        DatasetSplit.from_dict({"train": [], "extra": []})
    s = split_dataset([f"p{i}" for i in range(10)], (5, 3, 2))
    s.save(tmp_path / "split.json")
    assert DatasetSplit.load(tmp_path / "split.json") == s
    assert set(json.loads((tmp_path / "split.json").read_text())) == {"train", "validation", "test"}


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 60), st.integers(0, 2**31 - 1), st.data())
def test_split_disjoint_property(n, seed, data):
    a = data.draw(st.integers(0, n))
    b = data.draw(st.integers(0, n - a))
    ids = [f"x{i}" for i in range(n)]
    s = split_dataset(ids, (a, b, None), seed=seed, centers={p: f"c{i % 4}" for i, p in enumerate(ids)})
    assert not (set(s.train) & set(s.validation)) and not (set(s.train) & set(s.test))
    assert len(s.train) + len(s.validation) + len(s.test) == n
