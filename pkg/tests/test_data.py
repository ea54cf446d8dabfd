import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from scenead.data import (
    BadManifestError,
    DimMismatchError,
    ImageTensor,
    MissingMaskError,
    anomaly_pixel_stats,
    load_binary_mask,
    load_dataset,
    save_image,
    save_mask,
    write_json,
)


def _png(path, arr, mode=None):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(arr, dtype=np.uint8), mode).save(path)


def make_tree(root, n_train=8, n_test=4, n_qanv=0, size=(16, 16), counts=True):
    rng = np.random.default_rng(0)
    h, w = size
    for i in range(n_train):
        _png(root / f"train/good/{i:04d}.png", rng.integers(0, 255, (h, w, 3)))
    for i in range(n_qanv):
        _png(root / f"train/qanv/qanv_{i:04d}.png", rng.integers(0, 255, (h, w, 3)))
    for i in range(n_test):
        _png(root / f"test/{i:04d}.png", rng.integers(0, 255, (h, w, 3)))
        m = np.zeros((h, w), np.uint8)
        m[i, i] = 255
        _png(root / f"ground_truth/{i:04d}_mask.png", m)
    if counts:
        c = {"train/good": n_train, "test": n_test, "ground_truth": n_test}
        if n_qanv:
            c["train/qanv"] = n_qanv
        write_json(root / "manifest.json", {"counts": c})
    return root


def test_load_none_variant(tmp_path):
    ds = load_dataset(make_tree(tmp_path), "none")
    assert len(ds.train_images) == 8 and len(ds.test_images) == 4 and len(ds.test_masks) == 4
    assert not ds.synthesized


def test_qanv_variant_merges_and_flags(tmp_path):
    ds = load_dataset(make_tree(tmp_path, n_qanv=4), "qanv")
    assert len(ds.train_images) == 12
    assert len(ds.synthesized) == 4
    assert all(r.startswith("train/qanv/") for r in ds.synthesized)
    assert ds.load(next(iter(ds.synthesized))).source == "synthesized"
    assert ds.captured_train == load_dataset(tmp_path, "none").train_images


def test_variant_missing_folder(tmp_path):
    with pytest.raises(BadManifestError):
        load_dataset(make_tree(tmp_path), "inv")


def test_dim_mismatch(tmp_path):
    root = make_tree(tmp_path)
    _png(root / "ground_truth/0002_mask.png", np.zeros((8, 8)))
    with pytest.raises(DimMismatchError):
        load_dataset(root)


def test_missing_mask(tmp_path):
    root = make_tree(tmp_path, counts=False)
    (root / "ground_truth/0001_mask.png").unlink()
    with pytest.raises(MissingMaskError):
        load_dataset(root)


def test_manifest_count_disagreement(tmp_path):
    root = make_tree(tmp_path)
    (root / "train/good/0003.png").unlink()
    with pytest.raises(BadManifestError):
        load_dataset(root)


def test_orphan_mask(tmp_path):
    root = make_tree(tmp_path, counts=False)
    _png(root / "ground_truth/0099_mask.png", np.zeros((16, 16)))
    with pytest.raises(BadManifestError):
        load_dataset(root)


def test_unknown_variant(tmp_path):
    with pytest.raises(ValueError):
        load_dataset(make_tree(tmp_path), "everything")


def test_deterministic_order(tmp_path):
    root = make_tree(tmp_path, n_qanv=3)
    a, b = load_dataset(root, "qanv"), load_dataset(root, "qanv")
    assert a.train_images == b.train_images and a.test_images == b.test_images
    assert a.train_images == sorted(a.train_images[:8]) + sorted(a.train_images[8:])


@pytest.mark.parametrize("value,expected", [(0, 0), (255, 1), (128, 1), (127, 0)])
def test_mask_threshold_boundary(tmp_path, value, expected):
    _png(tmp_path / "m.png", np.full((4, 4), value), "L")
    assert (load_binary_mask(tmp_path / "m.png") == expected).all()


def test_rgb_mask(tmp_path):
    arr = np.zeros((2, 2, 3), np.uint8)
    arr[0, 0, 2] = 200
    _png(tmp_path / "m.png", arr)
    assert load_binary_mask(tmp_path / "m.png").tolist() == [[1, 0], [0, 0]]


def test_unreadable_mask(tmp_path):
    (tmp_path / "bad.png").write_bytes(b"not a png")
    with pytest.raises(Exception):
        load_binary_mask(tmp_path / "bad.png")


@settings(max_examples=30, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12)), elements=st.integers(0, 1)))
def test_mask_round_trip(tmp_path_factory, mask):
    p = tmp_path_factory.mktemp("m") / "mask.png"
    save_mask(p, mask)
    assert np.array_equal(load_binary_mask(p), mask)


def test_image_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    img = ImageTensor.from_uint8(rng.integers(0, 256, (5, 7, 3)).astype(np.uint8))
    save_image(tmp_path / "a.png", img)
    from scenead.data import load_image
    assert np.array_equal(load_image(tmp_path / "a.png").data, img.data)


def test_image_tensor_invariants():
    with pytest.raises(ValueError):
        ImageTensor(np.zeros((4, 5, 5)))
    with pytest.raises(ValueError):
        ImageTensor(np.full((3, 2, 2), np.nan))


def test_anomaly_stats_hand_count(tmp_path):
    for i, n in enumerate((1, 3)):
        _png(tmp_path / f"test/{i:04d}.png", np.zeros((10, 10, 3)))
        m = np.zeros(100, np.uint8)
        m[:n] = 255
        _png(tmp_path / f"ground_truth/{i:04d}_mask.png", m.reshape(10, 10))
    stats = anomaly_pixel_stats(load_dataset(tmp_path))
    assert stats["mean_fraction"] == pytest.approx(0.02)
    assert stats["min_fraction"] == 0.01 and stats["max_fraction"] == 0.03


def test_anomaly_stats_all_zero(tmp_path):
    root = make_tree(tmp_path)
    for p in (root / "ground_truth").glob("*.png"):
        _png(p, np.zeros((16, 16)))
    stats = anomaly_pixel_stats(load_dataset(root))
    assert stats["mean_fraction"] == 0 and stats["std_fraction"] == 0


def test_write_json_atomic(tmp_path):
    write_json(tmp_path / "x.json", {"a": 1})
    assert json.loads((tmp_path / "x.json").read_text()) == {"a": 1}
    assert list(tmp_path.iterdir()) == [tmp_path / "x.json"]
