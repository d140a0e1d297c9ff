import numpy as np
import pytest
from PIL import Image

from noisylab.datahub import (
    CorruptionMask,
    DataError,
    NoiseSpec,
    batches,
    datasets_equal,
    inject_symmetric_noise,
    load_image_folder,
    load_packed,
    make_dataset,
    make_synthetic,
    resize_bilinear,
    save_packed,
)


def _images(n, h=28, w=28, c=3, seed=0):
    # multiples of 1/255 survive u8 quantization exactly
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, size=(n, h, w, c)).astype(np.float32) / 255.0


# -- packed containers ---------------------------------------------------


def test_packed_two_records(tmp_path):
    ds = make_dataset(_images(2), [3, 7], 8)
    ds = load_packed(save_packed(ds, tmp_path / "two.nlab"))
    assert len(ds) == 2
    assert ds.class_count == 8
    assert ds.input_shape == (28, 28, 3)


def test_packed_round_trip_images(tmp_path):
    ds = make_dataset(_images(5, 8, 8), [0, 1, 2, 1, 0], 3, observed=[0, 2, 2, 1, 1])
    back = load_packed(save_packed(ds, tmp_path / "d.nlab"))
    assert datasets_equal(ds, back)


def test_packed_round_trip_features(tmp_path):
    rng = np.random.default_rng(1)
    ds = make_dataset(rng.standard_normal((7, 5)), rng.integers(0, 4, 7), 4)
    back = load_packed(save_packed(ds, tmp_path / "f.nfea"))
    assert datasets_equal(ds, back)
    assert not back.is_image


def test_packed_label_out_of_range(tmp_path):
    ds = make_dataset(_images(2, 4, 4), [0, 7], 8)
    path = save_packed(ds, tmp_path / "bad.nlab")
    raw = bytearray(path.read_bytes())
    header = 5 + 20
    record = 2 * 2 + 4 * 4 * 3
    raw[header + record : header + record + 2] = (8).to_bytes(2, "little")
    path.write_bytes(bytes(raw))
    with pytest.raises(DataError, match="label out of range"):
        load_packed(path)


def test_packed_truncated_and_bad_magic(tmp_path):
    path = save_packed(make_dataset(_images(3, 4, 4), [0, 1, 0], 2), tmp_path / "t.nlab")
    raw = path.read_bytes()
    path.write_bytes(raw[:-5])
    with pytest.raises(DataError, match="truncated payload"):
        load_packed(path)
    path.write_bytes(b"XXXXX" + raw[5:])
    with pytest.raises(DataError, match="bad magic"):
        load_packed(path)
    path.write_bytes(raw + b"\0")
    with pytest.raises(DataError, match="trailing"):
        load_packed(path)


def test_dataset_validation():
    with pytest.raises(DataError, match="out of range"):
        make_dataset(np.zeros((2, 3)), [0, 5], 3)
    with pytest.raises(DataError, match="not unique"):
        make_dataset(np.zeros((2, 3)), [0, 1], 3, ids=[4, 4])
    ds = make_dataset(np.zeros((2, 3)), [0, 1], 3)
    with pytest.raises(ValueError):
        ds.true_labels[0] = 2  # arrays are read-only


# -- image folders -------------------------------------------------------


def _write_folder(root, labels, size=(10, 12)):
    root.mkdir()
    rows = ["path,label"]
    for i, y in enumerate(labels):
        arr = np.full((*size, 3), 40 * i, dtype=np.uint8)
        Image.fromarray(arr).save(root / f"im{i}.png")
        rows.append(f"im{i}.png,{y}")
    manifest = root / "manifest.csv"
    manifest.write_text("\n".join(rows) + "\n")
    return manifest


def test_image_folder_loads(tmp_path):
    manifest = _write_folder(tmp_path / "imgs", [0, 1, 1])
    ds = load_image_folder(tmp_path / "imgs", manifest, (8, 8), class_count=2)
    assert len(ds) == 3
    assert ds.input_shape == (8, 8, 3)
    assert ds.true_labels.tolist() == [0, 1, 1]
    # constant images stay constant after resizing
    np.testing.assert_allclose(ds.inputs[1], 40 / 255.0, atol=1e-6)


def test_image_folder_missing_file(tmp_path):
    manifest = _write_folder(tmp_path / "imgs", [0, 1])
    manifest.write_text(manifest.read_text() + "ghost.png,1\n")
    with pytest.raises(FileNotFoundError, match="ghost.png"):
        load_image_folder(tmp_path / "imgs", manifest, (8, 8))


def test_image_folder_duplicate_and_undecodable(tmp_path):
    manifest = _write_folder(tmp_path / "imgs", [0, 1])
    text = manifest.read_text()
    manifest.write_text(text + "im0.png,0\n")
    with pytest.raises(DataError, match="duplicate"):
        load_image_folder(tmp_path / "imgs", manifest, (8, 8))
    (tmp_path / "imgs" / "junk.png").write_bytes(b"not an image")
    manifest.write_text(text + "junk.png,0\n")
    with pytest.raises(DataError, match="undecodable"):
        load_image_folder(tmp_path / "imgs", manifest, (8, 8))


@pytest.mark.parametrize("size", [(5, 5), (16, 9), (1, 1)])
def test_resize_constant(size):
    img = np.full((7, 11, 3), 0.3125, dtype=np.float32)
    out = resize_bilinear(img, size)
    assert out.shape == (*size, 3)
    np.testing.assert_allclose(out, 0.3125, atol=1e-6)


# -- synthetic -----------------------------------------------------------


def test_synthetic_counts_and_determinism():
    a = make_synthetic(2, 5, 16, 10.0, seed=7)
    b = make_synthetic(2, 5, 16, 10.0, seed=7)
    assert len(a) == 10
    assert a.class_counts(observed=False).tolist() == [5, 5]
    assert datasets_equal(a, b)
    assert not datasets_equal(a, make_synthetic(2, 5, 16, 10.0, seed=8))


def test_synthetic_nearest_centroid_oracle():
    ds = make_synthetic(2, 5, 16, 10.0, seed=7)
    x, y = ds.inputs.astype(np.float64), ds.true_labels
    centroids = np.stack([x[y == c].mean(0) for c in range(2)])
    pred = np.argmin(((x[:, None] - centroids[None]) ** 2).sum(-1), axis=1)
    assert (pred == y).all()


def test_synthetic_centroid_separation():
    from noisylab.datahub import synthetic_centroids

    mu = synthetic_centroids(6, 16, 4.0, np.random.default_rng(0))
    dist = np.linalg.norm(mu[:, None] - mu[None], axis=-1)
    off = dist[~np.eye(6, dtype=bool)]
    assert off.min() >= 4.0 - 1e-9


def test_synthetic_errors():
    with pytest.raises(DataError):
        make_synthetic(2, 0, 16, 1.0, seed=0)
    with pytest.raises(DataError):
        make_synthetic(1, 5, 16, 1.0, seed=0)
    with pytest.raises(DataError):
        make_synthetic(2, 5, 16, 0.0, seed=0)


def test_synthetic_images_in_unit_range():
    ds = make_synthetic(3, 4, 8, 5.0, seed=1, image_shape=(8, 8, 3))
    assert ds.is_image and ds.input_shape == (8, 8, 3)
    assert ds.inputs.min() >= 0.0 and ds.inputs.max() <= 1.0


# -- noise ---------------------------------------------------------------


def _labels_only(n, k, seed=0):
    rng = np.random.default_rng(seed)
    return make_dataset(np.zeros((n, 1)), rng.integers(0, k, n), k)


def test_noise_rate_zero():
    ds = _labels_only(100, 5)
    noisy, mask = inject_symmetric_noise(ds, NoiseSpec(0.0, 3))
    assert np.array_equal(noisy.observed_labels, ds.true_labels)
    assert not mask.flipped.any()


def test_noise_rate_one_binary():
    ds = _labels_only(200, 2)
    noisy, mask = inject_symmetric_noise(ds, NoiseSpec(1.0, 3))
    assert mask.flipped.all()
    assert np.array_equal(noisy.observed_labels, 1 - ds.true_labels)


def test_noise_statistics():
    ds = _labels_only(10_000, 7)
    noisy, mask = inject_symmetric_noise(ds, NoiseSpec(0.4, 0))
    assert abs(mask.rate - 0.4) <= 0.015
    # flip targets are uniform over the k-1 wrong classes, for every true class
    t, o = ds.true_labels[mask.flipped], noisy.observed_labels[mask.flipped]
    for c in range(7):
        counts = np.bincount(o[t == c], minlength=7)
        assert counts[c] == 0
        share = np.delete(counts, c) / counts.sum()
        assert np.all(np.abs(share - 1 / 6) <= 0.25 / 6)


def test_noise_mask_invariants():
    ds = _labels_only(500, 4)
    noisy, mask = inject_symmetric_noise(ds, NoiseSpec(0.3, 11))
    assert np.array_equal(noisy.true_labels, ds.true_labels)
    assert np.array_equal(mask.flipped, noisy.observed_labels != noisy.true_labels)
    again, _ = inject_symmetric_noise(ds, NoiseSpec(0.3, 11))
    assert np.array_equal(again.observed_labels, noisy.observed_labels)


def test_noise_regenerates_from_true_labels():
    ds = _labels_only(300, 5)
    once, _ = inject_symmetric_noise(ds, NoiseSpec(0.5, 2))
    twice, _ = inject_symmetric_noise(once, NoiseSpec(0.5, 2))
    assert np.array_equal(once.observed_labels, twice.observed_labels)


def test_noise_errors():
    with pytest.raises(DataError):
        NoiseSpec(1.5)
    with pytest.raises(DataError):
        NoiseSpec(0.2, kind="pairflip")
    test = make_dataset(np.zeros((3, 1)), [0, 1, 0], 2, split="test")
    with pytest.raises(DataError, match="train"):
        inject_symmetric_noise(test, NoiseSpec(0.2))


def test_corruption_mask_csv_round_trip(tmp_path):
    mask = CorruptionMask(np.array([3, 5, 9]), np.array([False, True, False]))
    path = mask.save(tmp_path / "mask.csv")
    assert path.read_text() == "3,0\n5,1\n9,0\n"
    back = CorruptionMask.load(path)
    assert np.array_equal(back.ids, mask.ids) and np.array_equal(back.flipped, mask.flipped)
    path.write_text("3,0\n5,yes\n")
    with pytest.raises(DataError, match=":2:"):
        CorruptionMask.load(path)


# -- batching ------------------------------------------------------------


def test_batches_sizes_and_cover():
    out = batches(5, 2, shuffle_seed=0, epoch=0)
    assert [len(b) for b in out] == [2, 2, 1]
    assert sorted(np.concatenate(out).tolist()) == [0, 1, 2, 3, 4]


def test_batches_deterministic_per_epoch():
    a = np.concatenate(batches(50, 8, 4, 0))
    assert np.array_equal(a, np.concatenate(batches(50, 8, 4, 0)))
    assert not np.array_equal(a, np.concatenate(batches(50, 8, 4, 1)))


def test_batches_errors():
    with pytest.raises(ValueError):
        batches(5, 0, 0, 0)
