import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from serialgan.dataset import (DatasetError, ModelRange, Preprocessor, Sample, StandardizationStats, SynthConfig,
                               apply_standardization, augment, destandardize, diseased_sample, fit_standardization,
                               generate_synthetic, load_directory, render_pepper, standardize, write_directory)
from serialgan.images import ImageReadError, read_image, write_image

SMALL = SynthConfig(side=16, train_count=10, test_normal=4, test_diseased=4, seed=42)


def test_synthetic_deterministic():
    a_train, a_test = generate_synthetic(SMALL)
    b_train, b_test = generate_synthetic(SMALL)
    for a, b in zip(a_train + a_test, b_train + b_test):
        assert a.id == b.id and a.label == b.label
        assert a.image.tobytes() == b.image.tobytes()


def test_synthetic_counts_and_labels():
    train, test = generate_synthetic(SMALL)
    assert len(train) == 10 and all(s.label == 0 for s in train)
    assert [s.label for s in test] == [0] * 4 + [1] * 4
    assert train[0].image.shape == (16, 16, 3) and train[0].image.dtype == np.float32
    assert len({s.id for s in train + test}) == 18


def test_synthetic_seed_changes_data():
    a, _ = generate_synthetic(SMALL)
    b, _ = generate_synthetic(SynthConfig(**{**SMALL.__dict__, "seed": 43}))
    assert a[0].image.tobytes() != b[0].image.tobytes()


def test_zero_counts_rejected():
    with pytest.raises(DatasetError):
        generate_synthetic(SynthConfig(train_count=0))


def test_lesions_inside_disks_and_area_bounds():
    cfg = SynthConfig(side=64, seed=5)
    for i in range(20):
        img, base, mask = diseased_sample(cfg, i)
        diff = np.abs(img - base).max(axis=-1) > 0
        assert diff.any()
        assert not (diff & ~mask).any()
        pepper = render_pepper(np.random.default_rng([cfg.seed, 2, i]), cfg.side)
        frac = mask.sum() / (pepper.alpha > 0).sum()
        assert 0.005 <= frac <= 0.15


def test_normal_sample_on_black_background():
    train, _ = generate_synthetic(SynthConfig(side=32, train_count=7, test_normal=1, test_diseased=1))
    img = train[0].image
    assert np.all(img[0, 0] == 0) and img.max() > 0.2


def test_augment_orbit():
    img = np.random.default_rng(0).uniform(size=(5, 5, 3)).astype(np.float32)
    out = augment([Sample(img, 0, "a")])
    assert len(out) == 7 and all(s.label == 0 for s in out)
    assert len({s.image.tobytes() for s in out}) == 7
    r = img
    for _ in range(4):
        r = np.rot90(r)
    assert np.array_equal(r, img)
    const = augment([Sample(np.ones((4, 4, 3)), 1, "c")])
    assert len(const) == 7 and all(np.array_equal(s.image, const[0].image) for s in const)
    assert all(s.label == 1 for s in const)


def test_augment_nonsquare():
    with pytest.raises(DatasetError):
        augment([Sample(np.zeros((4, 5, 3)), 0, "x")])


@settings(max_examples=30, deadline=None)
@given(arrays(np.float32, (4, 4, 3), elements=st.floats(0, 1, width=32)))
def test_augment_preserves_pixel_multiset(img):
    for s in augment([Sample(img, 0, "a")]):
        assert np.array_equal(np.sort(s.image.ravel()), np.sort(img.ravel()))


def test_standardization_examples():
    s = fit_standardization([Sample(np.array([[[0.0]]]), 0, "a"), Sample(np.array([[[2.0]]]), 0, "b")])
    assert (s.mean, s.std) == (1.0, 1.0)
    assert standardize(StandardizationStats(1.0, 1.0), np.array([3.0]))[0] == 2.0
    c = fit_standardization([Sample(np.full((2, 2, 3), 0.3), 0, "c")])
    assert c.std == 1e-6 and c.clamped
    with pytest.raises(DatasetError):
        fit_standardization([])


def test_standardization_oracle():
    train, _ = generate_synthetic(SynthConfig(side=16, train_count=100, test_normal=1, test_diseased=1))
    stats = fit_standardization(train)
    total = count = 0
    for s in train:
        total += float(np.sum(s.image, dtype=np.float64))
        count += s.image.size
    mean = total / count
    sq = sum(float(np.sum((s.image.astype(np.float64) - mean) ** 2)) for s in train)
    assert stats.mean == pytest.approx(mean, abs=1e-6)
    assert stats.std == pytest.approx(math.sqrt(sq / count), abs=1e-6)
    z = np.stack([s.image for s in apply_standardization(stats, train)]).astype(np.float64)
    assert abs(z.mean()) < 1e-5 and abs(z.std() - 1) < 1e-4
    x = train[3].image
    assert np.allclose(destandardize(stats, standardize(stats, x)), x, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(arrays(np.int64, (3, 3), elements=st.integers(0, 255), unique=True), st.floats(0.1, 2), st.floats(-1, 1))
def test_standardization_keeps_extrema(x, std, mean):
    x = x / 255.0
    y = standardize(StandardizationStats(mean, std), x)
    assert np.argmax(y) == np.argmax(x) and np.argmin(y) == np.argmin(x)


def test_preprocessor_range_and_meta():
    train, test = generate_synthetic(SMALL)
    pre = Preprocessor.fit(train)
    x = pre.batch(train)
    assert x.min() == pytest.approx(-1, abs=1e-6) and x.max() == pytest.approx(1, abs=1e-6)
    assert np.allclose(pre.to_pixels(pre.batch(test)), np.stack([s.image for s in test]), atol=1e-5)
    assert Preprocessor.from_meta(pre.to_meta()) == pre
    with pytest.raises(DatasetError):
        Preprocessor.from_meta({})
    assert ModelRange(0.0, 2.0).forward(np.array([1.0]))[0] == 0.0


def test_directory_roundtrip(tmp_path):
    train, test = generate_synthetic(SMALL)
    write_directory(tmp_path, train, test)
    lines = (tmp_path / "manifest.csv").read_text().splitlines()
    assert lines[0] == "id,path,label" and len(lines) == 19
    tr, te = load_directory(tmp_path)
    assert sorted(s.id for s in train) == [s.id for s in tr]
    by_id = {s.id: s for s in train + test}
    for s in tr + te:
        assert s.image.tobytes() == by_id[s.id].image.tobytes() and s.label == by_id[s.id].label


def test_directory_ordering(tmp_path):
    for name in ("c", "a", "b"):
        (tmp_path / "train" / "normal").mkdir(parents=True, exist_ok=True)
        write_image(tmp_path / "train" / "normal" / f"{name}.png", np.zeros((4, 4, 3)))
    tr, te = load_directory(tmp_path, ("train",))
    assert [s.id for s in tr] == ["a", "b", "c"] and te is None


def test_directory_errors(tmp_path):
    with pytest.raises(DatasetError):
        load_directory(tmp_path / "missing")
    for sub in ("train/normal", "test/normal", "test/diseased"):
        (tmp_path / sub).mkdir(parents=True)
    write_image(tmp_path / "train/normal/a.png", np.zeros((4, 4, 3)))
    write_image(tmp_path / "test/normal/b.png", np.zeros((4, 4, 3)))
    with pytest.raises(DatasetError, match="no images"):
        load_directory(tmp_path)
    (tmp_path / "test/diseased/bad.png").write_bytes(b"not an image")
    with pytest.raises(ImageReadError, match="bad.png"):
        load_directory(tmp_path)
    (tmp_path / "train/diseased").mkdir()
    with pytest.raises(DatasetError, match="normal images only"):
        load_directory(tmp_path)


def test_train_writer_rejects_diseased(tmp_path):
    with pytest.raises(DatasetError):
        write_directory(tmp_path, [Sample(np.zeros((4, 4, 3)), 1, "x")], [])


@pytest.mark.parametrize("suffix", [".png", ".ppm"])
def test_image_roundtrip(tmp_path, suffix):
    img = np.random.default_rng(0).integers(0, 256, (5, 7, 3)) / 255.0
    write_image(tmp_path / f"a{suffix}", img)
    back = read_image(tmp_path / f"a{suffix}")
    assert back.dtype == np.float32 and np.array_equal(back, img.astype(np.float32))
