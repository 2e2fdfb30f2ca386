import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from allmargin.data import (
    SYNTHETIC_KINDS,
    Dataset,
    corrupt_labels,
    gen_synthetic,
    load_idx,
    partition,
    read_idx,
    save_csv,
    save_idx,
)


def test_dataset_validation():
    with pytest.raises(ValueError, match="provenance"):
        Dataset(np.zeros((2, 2)), np.zeros(2, dtype=int), 2)
    with pytest.raises(ValueError, match="one label"):
        Dataset(np.zeros((2, 2)), np.zeros(3, dtype=int), 2, provenance="t")
    with pytest.raises(ValueError, match="labels"):
        Dataset(np.zeros((2, 2)), np.array([0, 2]), 2, provenance="t")
    ds = Dataset(np.zeros((3, 2)), np.array([0, 1, 0]), 2, provenance="t")
    assert len(ds) == 3
    sub = ds.subset([2, 0], split="val")
    assert sub.split == "val" and sub.provenance == "t" and len(sub) == 2


@pytest.mark.parametrize("kind,classes", [("two-gaussians", 2),
                                          ("two-moons", 2), ("spirals", 3)])
def test_gen_synthetic_families(kind, classes):
    ds = gen_synthetic(kind, 40, seed=3)
    assert ds.classes == classes
    assert set(np.unique(ds.labels)) == set(range(classes))
    assert np.max(np.linalg.norm(ds.inputs, axis=1)) <= 1.0 + 1e-12
    assert kind in ds.provenance and "seed=3" in ds.provenance
    again = gen_synthetic(kind, 40, seed=3)
    assert np.array_equal(ds.inputs, again.inputs)
    other = gen_synthetic(kind, 40, seed=4)
    assert not np.array_equal(ds.inputs, other.inputs)


def test_gen_synthetic_validation():
    with pytest.raises(ValueError, match="kind"):
        gen_synthetic("circles", 10)
    with pytest.raises(ValueError, match="at least 2"):
        gen_synthetic("two-moons", 1)
    with pytest.raises(ValueError, match="noise"):
        gen_synthetic("two-moons", 10, noise=-0.1)
    assert SYNTHETIC_KINDS == ("two-gaussians", "two-moons", "spirals")


@pytest.mark.parametrize("fraction,n", [(0.2, 30), (0.35, 17), (1.0, 12)])
def test_corrupt_labels_count_is_exact(fraction, n):
    ds = gen_synthetic("spirals", n, seed=1)
    out = corrupt_labels(ds, fraction, seed=5)
    changed = int(np.sum(out.labels != ds.labels))
    assert changed == math.ceil(fraction * n)
    # a corrupted label is resampled among the wrong classes only
    assert np.all(out.labels[out.labels != ds.labels]
                  != ds.labels[out.labels != ds.labels])
    assert out.provenance.startswith(ds.provenance)
    assert "corrupt" in out.provenance
    assert np.array_equal(ds.labels, gen_synthetic("spirals", n, seed=1).labels)


def test_corrupt_labels_flips_every_binary_label_at_one():
    ds = gen_synthetic("two-gaussians", 9, seed=2)
    out = corrupt_labels(ds, 1.0, seed=0)
    assert np.array_equal(out.labels, 1 - ds.labels)


def test_corrupt_labels_validation():
    ds = gen_synthetic("two-gaussians", 10, seed=0)
    with pytest.raises(ValueError, match="fraction"):
        corrupt_labels(ds, 1.5)
    one = Dataset(np.zeros((4, 2)), np.zeros(4, dtype=int), 1, provenance="t")
    with pytest.raises(ValueError, match="two classes"):
        corrupt_labels(one, 0.5)
    assert np.array_equal(corrupt_labels(one, 0.0).labels, one.labels)


def test_partition_is_a_disjoint_shuffle():
    ds = gen_synthetic("two-moons", 25, seed=7)
    tr, va = partition(ds, 18, seed=2)
    assert (len(tr), len(va)) == (18, 7)
    assert (tr.split, va.split) == ("train", "val")
    merged = np.vstack([tr.inputs, va.inputs])
    assert np.array_equal(np.sort(merged, axis=0), np.sort(ds.inputs, axis=0))
    tr2, va2 = partition(ds, 18, seed=2)
    assert np.array_equal(tr.inputs, tr2.inputs)
    assert np.array_equal(va.labels, va2.labels)
    with pytest.raises(ValueError, match="n_train"):
        partition(ds, 25)
    with pytest.raises(ValueError, match="n_train"):
        partition(ds, 0)


# ---------------------------------------------------------------------- idx

@pytest.mark.parametrize("dtype", ["u1", "i1", "i2", "i4", "f4", "f8"])
def test_idx_round_trip_by_dtype(tmp_path, dtype):
    rng = np.random.default_rng(0)
    arr = (rng.integers(0, 100, size=(3, 4)).astype(dtype)
           if dtype[0] != "f"
           else rng.standard_normal((3, 4)).astype(dtype))
    path = tmp_path / "a.idx"
    save_idx(path, arr)
    back = read_idx(path)
    assert back.dtype == arr.dtype
    assert np.array_equal(back, arr)


def test_idx_round_trip_rank_three(tmp_path):
    arr = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
    path = tmp_path / "im.idx"
    save_idx(path, arr)
    assert np.array_equal(read_idx(path), arr)


def test_idx_malformed_files(tmp_path):
    bad = tmp_path / "bad.idx"
    bad.write_bytes(b"\x01\x00\x08\x01")
    with pytest.raises(ValueError, match="not an IDX"):
        read_idx(bad)
    bad.write_bytes(b"\x00\x00\x13\x01\x00\x00\x00\x02ab")
    with pytest.raises(ValueError, match="dtype code"):
        read_idx(bad)
    bad.write_bytes(b"\x00\x00\x08\x02\x00\x00\x00\x02")
    with pytest.raises(ValueError, match="truncated"):
        read_idx(bad)
    bad.write_bytes(b"\x00\x00\x08\x01\x00\x00\x00\x05abc")
    with pytest.raises(ValueError, match="payload"):
        read_idx(bad)
    with pytest.raises(ValueError, match="dtype"):
        save_idx(tmp_path / "c.idx", np.zeros(3, dtype=np.complex128))


def test_load_idx_scales_and_flattens(tmp_path):
    images = np.array([[[255, 0], [51, 102]]], dtype=np.uint8)
    labels = np.array([1], dtype=np.uint8)
    save_idx(tmp_path / "im.idx", images)
    save_idx(tmp_path / "lb.idx", labels)
    ds = load_idx(tmp_path / "im.idx", tmp_path / "lb.idx")
    assert ds.inputs.shape == (1, 4)
    np.testing.assert_allclose(ds.inputs[0],
                               [1.0, 0.0, 51 / 255, 102 / 255], atol=0)
    assert ds.classes == 2 and ds.labels[0] == 1
    assert ds.provenance.startswith("idx:")


def test_load_idx_limit_and_count_mismatch(tmp_path):
    images = np.zeros((5, 2, 2), dtype=np.uint8)
    save_idx(tmp_path / "im.idx", images)
    save_idx(tmp_path / "lb.idx", np.zeros(5, dtype=np.uint8))
    ds = load_idx(tmp_path / "im.idx", tmp_path / "lb.idx",
                  classes=3, limit=2, split="val")
    assert len(ds) == 2 and ds.classes == 3 and ds.split == "val"
    save_idx(tmp_path / "lb3.idx", np.zeros(3, dtype=np.uint8))
    with pytest.raises(ValueError, match="counts differ"):
        load_idx(tmp_path / "im.idx", tmp_path / "lb3.idx")


def test_save_csv_layout(tmp_path):
    ds = gen_synthetic("two-gaussians", 4, seed=1)
    path = tmp_path / "d.csv"
    save_csv(ds, path)
    lines = path.read_text().strip().split("\n")
    assert len(lines) == 4
    for line, x, y in zip(lines, ds.inputs, ds.labels):
        cells = line.split(",")
        assert int(cells[-1]) == y
        # repr round-trips doubles exactly
        assert [float(c) for c in cells[:-1]] == list(x)


@settings(max_examples=40, deadline=None, derandomize=True)
@given(st.lists(st.integers(min_value=0, max_value=255),
                min_size=1, max_size=30),
       st.sampled_from(["u1", "i2", "i4", "f8"]))
def test_idx_round_trip_property(tmp_path_factory, values, dtype):
    arr = np.array(values, dtype=dtype)
    path = tmp_path_factory.mktemp("idx") / "p.idx"
    save_idx(path, arr)
    assert np.array_equal(read_idx(path), arr)
