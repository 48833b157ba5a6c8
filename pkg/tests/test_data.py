import logging
from collections import Counter

import numpy as np
import pytest
import torch
from PIL import Image

from gcpanet.data import (MEAN, STD, DatasetError, DecodeError, Sample, augment_pair, augment_train,
                          batch_indices, batches, epoch_order, load_dataset, preprocess_eval, read_image,
                          save_prediction)
from gcpanet.synthetic import make_dataset


def _write(path, arr):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def _pair(root, stem, size=(20, 30), mask=True, value=200):
    h, w = size
    _write(root / "images" / f"{stem}.png", np.full((h, w, 3), value, np.uint8))
    if mask:
        _write(root / "masks" / f"{stem}.png", np.zeros((h, w), np.uint8))


class TestLoadDataset:
    def test_three_pairs(self, tmp_path):
        for stem in ("b", "a", "c"):
            _pair(tmp_path / "set", stem)
        index = load_dataset(tmp_path, "set")
        assert len(index) == 3
        assert [s.stem for s in index.samples] == ["a", "b", "c"]
        assert index.samples[0].original_size == (20, 30)

    def test_orphan_image_in_train(self, tmp_path):
        _pair(tmp_path / "set", "a")
        _pair(tmp_path / "set", "b")
        _pair(tmp_path / "set", "lonely", mask=False)
        with pytest.raises(DatasetError, match="lonely"):
            load_dataset(tmp_path, "set", "train")

    def test_orphan_allowed_in_test_split(self, tmp_path):
        _pair(tmp_path / "set", "a")
        _pair(tmp_path / "set", "lonely", mask=False)
        index = load_dataset(tmp_path, "set", "test")
        assert index.samples[1].mask_path is None

    def test_unmatched_mask_reported(self, tmp_path, caplog):
        _pair(tmp_path / "set", "a")
        _write(tmp_path / "set" / "masks" / "ghost.png", np.zeros((4, 4), np.uint8))
        with caplog.at_level(logging.WARNING):
            load_dataset(tmp_path, "set")
        assert "ghost" in caplog.text

    def test_empty(self, tmp_path):
        (tmp_path / "set" / "images").mkdir(parents=True)
        with pytest.raises(DatasetError, match="empty dataset"):
            load_dataset(tmp_path, "set")

    def test_missing(self, tmp_path):
        with pytest.raises(DatasetError, match="dataset not found"):
            load_dataset(tmp_path, "nothing")

    def test_mask_size_mismatch(self, tmp_path):
        _pair(tmp_path / "set", "a")
        _write(tmp_path / "set" / "masks" / "a.png", np.zeros((5, 5), np.uint8))
        with pytest.raises(DatasetError, match="mask a.png"):
            load_dataset(tmp_path, "set")

    def test_undecodable_image(self, tmp_path):
        _pair(tmp_path / "set", "a")
        (tmp_path / "set" / "images" / "b.png").write_bytes(b"garbage")
        with pytest.raises(DecodeError, match="b.png"):
            load_dataset(tmp_path, "set", "test")


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    make_dataset(root, "syn", n=10, size=48, seed=3)
    return load_dataset(root, "syn")


class TestAugment:
    def test_default_train_sizes(self, synth):
        img, mask = augment_train(synth.samples[0], 0)
        assert img.shape == (3, 288, 288) and mask.shape == (1, 288, 288)

    def test_deterministic(self, synth):
        a = augment_train(synth.samples[1], [5, 1])
        b = augment_train(synth.samples[1], [5, 1])
        assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])

    def test_all_white_mask(self, tmp_path):
        _write(tmp_path / "img.png", np.random.default_rng(0).integers(0, 255, (50, 40, 3), dtype=np.uint8))
        _write(tmp_path / "mask.png", np.full((50, 40), 255, np.uint8))
        _, mask = augment_train(Sample(tmp_path / "img.png", tmp_path / "mask.png", (50, 40)), 7)
        assert torch.all(mask == 1)

    @pytest.mark.parametrize("seed", range(6))
    def test_geometric_consistency(self, seed):
        # a coordinate grid at the resize size passes through both paths without resampling
        size, crop = 64, 48
        yy, xx = np.mgrid[0:size, 0:size]
        grid = np.stack([xx * 3, yy * 3, np.zeros_like(xx)], -1).astype(np.uint8)
        image = Image.fromarray(grid)
        mask = Image.fromarray((xx * 3).astype(np.uint8))
        out_img, out_mask = augment_pair(image, mask, np.random.default_rng(seed), size, crop)
        out_img, out_mask = np.asarray(out_img), np.asarray(out_mask)
        assert np.array_equal(out_img[..., 0], out_mask)
        # rows/columns are contiguous windows: x steps by +-3, y steps by +3
        assert np.all(np.abs(np.diff(out_img[..., 0].astype(int), axis=1)) == 3)
        assert np.all(np.diff(out_img[..., 1].astype(int), axis=0) == 3)

    def test_flip_and_offsets_cover_range(self):
        size, crop = 40, 32
        xx = np.tile(np.arange(size, dtype=np.uint8), (size, 1))
        yy = xx.T.copy()
        flips, lefts, tops = set(), set(), set()
        for seed in range(200):
            rng = np.random.default_rng(seed)
            img, _ = augment_pair(Image.fromarray(np.stack([xx, yy, yy], -1)), Image.fromarray(xx), rng, size, crop)
            arr = np.asarray(img)
            flipped = arr[0, 0, 0] > arr[0, -1, 0]
            flips.add(bool(flipped))
            lefts.add(int(min(arr[0, 0, 0], arr[0, -1, 0])))
            tops.add(int(arr[0, 0, 1]))
        assert flips == {True, False}
        assert lefts == set(range(size - crop + 1))
        assert tops == set(range(size - crop + 1))

    def test_mask_stays_binary(self, synth):
        for i, sample in enumerate(synth.samples):
            _, mask = augment_train(sample, i, resize=60, crop=50)
            assert set(mask.unique().tolist()) <= {0.0, 1.0}

    def test_missing_mask(self, tmp_path):
        _write(tmp_path / "img.png", np.zeros((8, 8, 3), np.uint8))
        with pytest.raises(DatasetError, match="no mask"):
            augment_train(Sample(tmp_path / "img.png", None, (8, 8)), 0)

    def test_crop_larger_than_resize(self):
        img = Image.new("RGB", (8, 8))
        with pytest.raises(ValueError, match="crop"):
            augment_pair(img, Image.new("L", (8, 8)), np.random.default_rng(0), 16, 32)


class TestPreprocess:
    def test_odd_size(self, tmp_path):
        _write(tmp_path / "x.jpg", np.zeros((481, 641, 3), np.uint8))
        sample = Sample(tmp_path / "x.jpg", None, (481, 641))
        assert preprocess_eval(sample).shape == (3, 320, 320)
        (tmp_path / "ds" / "images").mkdir(parents=True)
        (tmp_path / "x.jpg").rename(tmp_path / "ds" / "images" / "x.jpg")
        index = load_dataset(tmp_path, "ds", "test")
        assert index.samples[0].original_size == (481, 641)

    def test_identity_resize(self, tmp_path):
        arr = np.random.default_rng(1).integers(0, 256, (320, 320, 3), dtype=np.uint8)
        _write(tmp_path / "x.png", arr)
        out = preprocess_eval(Sample(tmp_path / "x.png", None, (320, 320)))
        expected = torch.from_numpy(((arr / 255.0 - MEAN) / STD).transpose(2, 0, 1)).float()
        torch.testing.assert_close(out, expected, atol=1e-6, rtol=0)

    def test_grayscale_replicated(self, tmp_path):
        _write(tmp_path / "g.png", np.full((32, 32), 100, np.uint8))
        assert read_image(tmp_path / "g.png").mode == "RGB"
        out = preprocess_eval(Sample(tmp_path / "g.png", None, (32, 32)), 32)
        raw = out * torch.from_numpy(STD)[:, None, None] + torch.from_numpy(MEAN)[:, None, None]
        torch.testing.assert_close(raw[0], raw[1])
        torch.testing.assert_close(raw[1], raw[2])

    def test_decode_failure(self, tmp_path):
        (tmp_path / "bad.png").write_bytes(b"nope")
        with pytest.raises(DecodeError):
            preprocess_eval(Sample(tmp_path / "bad.png", None, (1, 1)))


class TestBatches:
    def test_sizes(self):
        assert [len(b) for b in batch_indices(10, 4, 0, 0)] == [4, 4, 2]

    def test_same_seed_same_order(self):
        assert np.array_equal(epoch_order(10, 42, 3), epoch_order(10, 42, 3))

    def test_epochs_differ_for_pinned_seed(self):
        # precomputed with numpy.random.default_rng([seed, epoch]).permutation
        assert epoch_order(10, 0, 0).tolist() == [4, 6, 2, 7, 3, 5, 9, 0, 8, 1]
        assert epoch_order(10, 0, 1).tolist() == [9, 1, 3, 8, 7, 6, 0, 4, 2, 5]

    def test_epoch_coverage(self):
        for epoch in range(5):
            ids = np.concatenate(batch_indices(13, 5, 9, epoch))
            assert Counter(ids.tolist()) == Counter(range(13))

    def test_bad_batch_size(self):
        with pytest.raises(ValueError):
            batch_indices(3, 0, 0, 0)

    def test_stream(self, synth):
        out = list(batches(synth, 4, shuffle_seed=1, resize=48, crop=32))
        assert [b[0].shape for b in out] == [(4, 3, 32, 32), (4, 3, 32, 32), (2, 3, 32, 32)]
        assert sorted(i for b in out for i in b[2]) == list(range(10))
        again = list(batches(synth, 4, shuffle_seed=1, resize=48, crop=32))
        assert all(torch.equal(a[0], b[0]) and torch.equal(a[1], b[1]) for a, b in zip(out, again))

    def test_start_batch_matches_tail(self, synth):
        full = list(batches(synth, 3, shuffle_seed=2, epoch=1, resize=48, crop=32))
        tail = list(batches(synth, 3, shuffle_seed=2, epoch=1, resize=48, crop=32, start_batch=2))
        assert len(tail) == len(full) - 2
        assert all(torch.equal(a[0], b[0]) and a[2] == b[2] for a, b in zip(full[2:], tail))

    def test_no_augment_stream(self, synth):
        imgs, masks, _ = next(batches(synth, 2, 0, augment=False, crop=32))
        assert imgs.shape == (2, 3, 32, 32) and set(masks.unique().tolist()) <= {0.0, 1.0}


class TestSavePrediction:
    def test_value_and_size(self, tmp_path):
        prob = torch.full((1, 8, 8), 0.25)
        save_prediction(prob, tmp_path / "p.png", (13, 21))
        arr = np.asarray(Image.open(tmp_path / "p.png"))
        assert arr.shape == (13, 21) and arr.dtype == np.uint8
        assert np.all(arr == 64)
