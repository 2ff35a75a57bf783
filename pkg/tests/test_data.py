import logging

import numpy as np
import pytest
from PIL import Image

from skinfcn.data import (
    DatasetManifest,
    ManifestEntry,
    SegmentationDataset,
    batch_order,
    binarize_mask,
    compute_channel_means,
    decode_mask_png,
    encode_mask_png,
    expand_inputs,
    is_mask_name,
    load_sample,
    make_batches,
    mask_id,
    normalize,
    pad_to_multiple,
    read_manifest,
    read_rgb,
    write_manifest,
)
from skinfcn.errors import DataError, ParameterError
from skinfcn.tensor import Tensor


def _write_pair(directory, name, image, mask):
    image_path, mask_path = directory / f"{name}.png", directory / f"{name}_mask.png"
    Image.fromarray(image).save(image_path)
    Image.fromarray(mask).save(mask_path)
    return image_path, mask_path


@pytest.fixture
def pair(tmp_path):
    rng = np.random.default_rng(0)
    image = rng.integers(0, 256, size=(40, 60, 3), dtype=np.uint8)
    mask = np.zeros((40, 60), dtype=np.uint8)
    mask[10:30, 20:50] = 255
    return _write_pair(tmp_path, "ISIC_0000001", image, mask)


class TestManifest:
    def test_round_trip(self, tmp_path, pair):
        manifest = DatasetManifest([ManifestEntry("ISIC_0000001", *pair)])
        path = tmp_path / "train.tsv"
        write_manifest(manifest, path)
        assert path.read_text() == "ISIC_0000001\tISIC_0000001.png\tISIC_0000001_mask.png\n"
        loaded = read_manifest(path)
        assert loaded.ids == ["ISIC_0000001"]
        assert loaded[0].image == pair[0]

    def test_missing_file_is_reported(self, tmp_path):
        path = tmp_path / "m.tsv"
        path.write_text("a\ta.png\ta_mask.png\n")
        with pytest.raises(DataError) as info:
            read_manifest(path)
        assert "a.png" in str(info.value)
        assert len(read_manifest(path, check_paths=False)) == 1

    def test_incomplete_line(self, tmp_path):
        path = tmp_path / "m.tsv"
        path.write_text("a\ta.png\n")
        with pytest.raises(DataError):
            read_manifest(path, check_paths=False)

    def test_duplicate_ids(self, tmp_path):
        path = tmp_path / "m.tsv"
        path.write_text("a\ta.png\ta_mask.png\na\tb.png\tb_mask.png\n")
        with pytest.raises(DataError):
            read_manifest(path, check_paths=False)

    def test_empty_manifest(self, tmp_path):
        path = tmp_path / "m.tsv"
        path.write_text("")
        assert len(read_manifest(path)) == 0


class TestMasks:
    def test_png_round_trip(self, tmp_path):
        checkerboard = (np.indices((8, 8)).sum(axis=0) % 2).astype(np.uint8)
        encode_mask_png(checkerboard, tmp_path / "c.png")
        assert np.asarray(Image.open(tmp_path / "c.png")).max() == 255
        assert np.array_equal(decode_mask_png(tmp_path / "c.png"), checkerboard)

    def test_encode_rejects_non_binary(self, tmp_path):
        with pytest.raises(DataError):
            encode_mask_png(np.full((2, 2), 2, dtype=np.uint8), tmp_path / "m.png")

    def test_decode_rejects_intermediate_values(self, tmp_path):
        Image.fromarray(np.full((2, 2), 128, dtype=np.uint8)).save(tmp_path / "m.png")
        with pytest.raises(DataError):
            decode_mask_png(tmp_path / "m.png")

    def test_decode_rejects_rgb(self, tmp_path):
        Image.fromarray(np.zeros((2, 2, 3), dtype=np.uint8)).save(tmp_path / "m.png")
        with pytest.raises(DataError):
            decode_mask_png(tmp_path / "m.png")

    def test_all_lesion_mask(self):
        assert np.all(binarize_mask(np.full((3, 3), 255, dtype=np.uint8)) == 1)

    def test_two_level_mask_is_thresholded_with_warning(self, caplog):
        raw = np.array([[0, 200], [200, 0]], dtype=np.uint8)
        with caplog.at_level(logging.WARNING, logger="skinfcn.data"):
            mask = binarize_mask(raw)
        assert mask.tolist() == [[0, 1], [1, 0]]
        assert "thresholding" in caplog.text

    def test_more_than_two_values_is_an_error(self):
        with pytest.raises(DataError):
            binarize_mask(np.array([[0, 100], [255, 0]], dtype=np.uint8))


class TestSamples:
    def test_load_sample_resizes(self, pair):
        sample = load_sample(*pair, target=64)
        assert sample.id == "ISIC_0000001"
        assert sample.image.shape.as_tuple() == (1, 3, 64, 64)
        assert sample.image.dtype == np.float32
        assert sample.mask.shape == (64, 64)
        assert set(np.unique(sample.mask)) == {0, 1}

    def test_load_sample_at_native_size_keeps_pixels(self, pair):
        sample = load_sample(*pair, target=(40, 60))
        assert np.array_equal(sample.image.data[0].transpose(1, 2, 0), read_rgb(pair[0]))

    def test_size_mismatch(self, tmp_path):
        image_path, mask_path = _write_pair(
            tmp_path, "x", np.zeros((4, 4, 3), dtype=np.uint8), np.zeros((4, 5), dtype=np.uint8)
        )
        with pytest.raises(DataError):
            load_sample(image_path, mask_path, target=32)

    def test_grayscale_image_is_rejected(self, tmp_path):
        image_path, mask_path = _write_pair(
            tmp_path, "g", np.zeros((4, 4), dtype=np.uint8), np.zeros((4, 4), dtype=np.uint8)
        )
        with pytest.raises(DataError):
            load_sample(image_path, mask_path, target=32)

    def test_undecodable_image(self, tmp_path):
        bad = tmp_path / "bad.png"
        bad.write_bytes(b"not an image")
        with pytest.raises(DataError):
            read_rgb(bad)


def test_normalize_subtracts_means():
    batch = Tensor(np.full((1, 3, 2, 2), 100.0, dtype=np.float32))
    out = normalize(batch, (10.0, 20.0, 30.0))
    assert out.data[0, :, 0, 0].tolist() == [90.0, 80.0, 70.0]
    with pytest.raises(ParameterError):
        normalize(batch, (1.0, 2.0))


def test_channel_means(pair):
    sample = load_sample(*pair, target=(40, 60))
    expected = read_rgb(pair[0]).reshape(-1, 3).mean(axis=0)
    assert np.allclose(compute_channel_means([sample]), expected)
    with pytest.raises(DataError):
        compute_channel_means([])


def test_normalized_training_set_has_zero_channel_means(synth_dataset):
    _, manifest = synth_dataset
    samples = list(SegmentationDataset(manifest, target=64))
    means = compute_channel_means(samples)
    normalized = np.concatenate([normalize(s.image, means).data for s in samples]).astype(np.float64)
    assert np.all(np.abs(normalized.mean(axis=(0, 2, 3))) <= 1e-3)


class TestPadding:
    def test_pads_bottom_and_right_by_reflection(self):
        image = (np.arange(30 * 33 * 3) % 256).astype(np.uint8).reshape(30, 33, 3)
        padded = pad_to_multiple(image)
        assert padded.shape == (32, 64, 3)
        assert np.array_equal(padded[:30, :33], image)
        assert np.array_equal(padded[30, :33], image[28])
        assert np.array_equal(padded[:30, 33], image[:, 31])

    def test_multiple_is_unchanged(self):
        image = np.zeros((64, 32, 3), dtype=np.uint8)
        assert pad_to_multiple(image) is image


class TestBatching:
    def test_2000_samples_in_batches_of_6(self):
        groups = batch_order(2000, 6, seed=0, epoch=1)
        assert len(groups) == 334
        assert len(groups[-1]) == 2
        assert sorted(np.concatenate(groups).tolist()) == list(range(2000))

    def test_order_depends_only_on_seed_and_epoch(self):
        a = np.concatenate(batch_order(50, 4, seed=3, epoch=2))
        b = np.concatenate(batch_order(50, 4, seed=3, epoch=2))
        c = np.concatenate(batch_order(50, 4, seed=3, epoch=3))
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_invalid_batch_size(self):
        with pytest.raises(ParameterError):
            batch_order(10, 0, seed=0, epoch=1)

    def test_make_batches(self, synth_dataset):
        _, manifest = synth_dataset
        dataset = SegmentationDataset(manifest, target=64)
        batches = list(make_batches(dataset, 4, seed=0, epoch=1, means=(0.0, 0.0, 0.0)))
        assert [len(b.ids) for b in batches] == [4, 2]
        assert batches[0].images.shape.as_tuple() == (4, 3, 64, 64)
        assert batches[0].labels.shape == (4, 64, 64)
        assert sorted(batches[0].ids + batches[1].ids) == manifest.ids

    def test_empty_dataset(self):
        with pytest.raises(DataError):
            make_batches(SegmentationDataset(DatasetManifest([]), 64), 2, 0, 1, (0, 0, 0))


class TestNames:
    @pytest.mark.parametrize(
        "name, expected",
        [("ISIC_1.jpg", "ISIC_1"), ("ISIC_1_mask.png", "ISIC_1"), ("ISIC_1_segmentation.png", "ISIC_1")],
    )
    def test_mask_id(self, name, expected):
        assert mask_id(name) == expected

    def test_is_mask_name(self):
        assert is_mask_name("a_mask.png")
        assert not is_mask_name("a.png")

    def test_expand_inputs_skips_masks_and_overlays(self, tmp_path, pair):
        (tmp_path / "ISIC_0000001_overlay.png").write_bytes(b"")
        (tmp_path / "notes.txt").write_text("x")
        assert expand_inputs([tmp_path]) == [pair[0]]

    def test_expand_inputs_missing(self, tmp_path):
        with pytest.raises(DataError):
            expand_inputs([tmp_path / "nothing"])
