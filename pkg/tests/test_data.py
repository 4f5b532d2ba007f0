import numpy as np
import pytest
from PIL import Image

from clipfusion.data import (
    CLIP_MEAN,
    CLIP_STD,
    discover,
    load_image,
    load_mask,
    preprocess_clip,
    preprocess_diffusion,
    sample_k_shot,
)
from clipfusion.errors import IngestionError, InvalidArgumentError


def write_png(path, size=16, value=128, mode="RGB"):
    path.parent.mkdir(parents=True, exist_ok=True)
    shape = (size, size, 3) if mode == "RGB" else (size, size)
    Image.fromarray(np.full(shape, value, dtype=np.uint8), mode=mode).save(path)


def make_tree(root, categories=("widget",), n_train=4, n_good=2, n_bad=2,
              mask_suffix="_mask"):
    for cat in categories:
        base = root / cat
        for i in range(n_train):
            write_png(base / "train" / "good" / f"{i:03d}.png")
        for i in range(n_good):
            write_png(base / "test" / "good" / f"{i:03d}.png")
        for i in range(n_bad):
            write_png(base / "test" / "dent" / f"{i:03d}.png")
            write_png(base / "ground_truth" / "dent" / f"{i:03d}{mask_suffix}.png",
                      value=255, mode="L")
    return root


class TestDiscover:
    def test_basic_layout(self, tmp_path):
        make_tree(tmp_path, categories=("widget", "gadget"))
        index = discover(tmp_path, "mvtec")
        assert sorted(index.categories) == ["gadget", "widget"]
        cat = index.category("widget")
        assert len(cat.train_normal) == 4
        assert len(cat.test) == 4
        labels = sorted(s.label for s in cat.test)
        assert labels == [0, 0, 1, 1]
        for s in cat.test:
            assert (s.mask_path is not None) == (s.label == 1)

    def test_visa_mask_naming(self, tmp_path):
        make_tree(tmp_path, mask_suffix="")
        index = discover(tmp_path, "visa_organized")
        abnormal = [s for s in index.category("widget").test if s.label == 1]
        assert all(s.mask_path is not None for s in abnormal)

    def test_missing_root(self, tmp_path):
        with pytest.raises(IngestionError):
            discover(tmp_path / "nope", "mvtec")

    def test_empty_root(self, tmp_path):
        with pytest.raises(IngestionError):
            discover(tmp_path, "mvtec")

    def test_missing_mask_names_image(self, tmp_path):
        make_tree(tmp_path)
        offender = tmp_path / "widget" / "test" / "dent" / "999.png"
        write_png(offender)
        with pytest.raises(IngestionError) as err:
            discover(tmp_path, "mvtec")
        assert "999.png" in str(err.value)

    def test_missing_train_split(self, tmp_path):
        make_tree(tmp_path)
        import shutil

        shutil.rmtree(tmp_path / "widget" / "train")
        with pytest.raises(IngestionError):
            discover(tmp_path, "mvtec")

    def test_unknown_layout(self, tmp_path):
        make_tree(tmp_path)
        with pytest.raises(InvalidArgumentError):
            discover(tmp_path, "imagenet")

    def test_unknown_category_lookup(self, tmp_path):
        make_tree(tmp_path)
        index = discover(tmp_path, "mvtec")
        with pytest.raises(IngestionError):
            index.category("bolt")


class TestSampleKShot:
    @pytest.fixture()
    def index(self, tmp_path):
        make_tree(tmp_path, n_train=10)
        return discover(tmp_path, "mvtec")

    def test_deterministic(self, index):
        a = sample_k_shot(index, "widget", 4, seed=2)
        b = sample_k_shot(index, "widget", 4, seed=2)
        assert a == b

    def test_seeds_differ(self, index):
        picks = {tuple(sample_k_shot(index, "widget", 4, seed=s)) for s in range(5)}
        assert len(picks) > 1

    def test_zero_shot_empty(self, index):
        assert sample_k_shot(index, "widget", 0, seed=0) == []

    def test_nested_in_k(self, index):
        two = sample_k_shot(index, "widget", 2, seed=1)
        four = sample_k_shot(index, "widget", 4, seed=1)
        assert four[:2] == two

    def test_k_too_large(self, index):
        with pytest.raises(InvalidArgumentError):
            sample_k_shot(index, "widget", 11, seed=0)

    def test_negative_k(self, index):
        with pytest.raises(InvalidArgumentError):
            sample_k_shot(index, "widget", -1, seed=0)

    def test_without_replacement(self, index):
        picks = sample_k_shot(index, "widget", 10, seed=3)
        assert len(set(picks)) == 10


class TestPreprocessClip:
    def test_shape_and_dtype(self):
        out = preprocess_clip(np.zeros((100, 100, 3), dtype=np.uint8))
        assert out.shape == (3, 240, 240)
        assert out.dtype == np.float64

    def test_mid_gray_standardization(self):
        image = np.full((64, 64, 3), 0.5)
        out = preprocess_clip(image)
        for c in range(3):
            expected = (0.5 - CLIP_MEAN[c]) / CLIP_STD[c]
            np.testing.assert_allclose(out[c], expected, atol=1e-9)

    def test_resize_idempotent_at_native_resolution(self):
        rng = np.random.default_rng(0)
        image = rng.uniform(size=(240, 240, 3))
        once = preprocess_clip(image)
        manual = np.transpose((image - np.asarray(CLIP_MEAN)) / np.asarray(CLIP_STD), (2, 0, 1))
        np.testing.assert_allclose(once, manual, atol=1e-6)

    def test_rejects_bad_shapes(self):
        with pytest.raises(InvalidArgumentError):
            preprocess_clip(np.zeros((10, 10)))
        with pytest.raises(InvalidArgumentError):
            preprocess_clip(np.full((4, 4, 3), 2.0))


class TestPreprocessDiffusion:
    def test_shape(self):
        out = preprocess_diffusion(np.zeros((100, 100, 3), dtype=np.uint8))
        assert out.shape == (3, 512, 512)

    def test_white_maps_to_one(self):
        out = preprocess_diffusion(np.full((32, 32, 3), 255, dtype=np.uint8))
        np.testing.assert_array_equal(out, np.ones((3, 512, 512)))

    def test_black_maps_to_minus_one(self):
        out = preprocess_diffusion(np.zeros((32, 32, 3), dtype=np.uint8))
        np.testing.assert_array_equal(out, -np.ones((3, 512, 512)))


class TestImageIO:
    def test_load_image(self, tmp_path):
        write_png(tmp_path / "a.png", size=5, value=7)
        img = load_image(tmp_path / "a.png")
        assert img.shape == (5, 5, 3)
        assert img.dtype == np.uint8

    def test_load_mask_binarizes(self, tmp_path):
        arr = np.zeros((4, 4), dtype=np.uint8)
        arr[1, 1] = 3  # any positive value counts
        Image.fromarray(arr, mode="L").save(tmp_path / "m.png")
        mask = load_mask(tmp_path / "m.png")
        assert mask.dtype == bool
        assert mask.sum() == 1

    def test_undecodable_file(self, tmp_path):
        bad = tmp_path / "bad.png"
        bad.write_bytes(b"this is not a png")
        with pytest.raises(IngestionError):
            load_image(bad)
        with pytest.raises(IngestionError):
            load_mask(bad)
