import numpy as np
import pytest

from clipfusion.backends import CrossAttentionRequest, create_backends
from clipfusion.backends.mock import MockDiffusionBackend, MockVisionLanguageBackend
from clipfusion.core import SourceTag
from clipfusion.data import preprocess_clip, preprocess_diffusion
from clipfusion.errors import InvalidArgumentError, TokenAlignmentError

from conftest import inject_square, textured_image


@pytest.fixture(scope="module")
def vl():
    return MockVisionLanguageBackend()


@pytest.fixture(scope="module")
def diff():
    return MockDiffusionBackend()


@pytest.fixture(scope="module")
def clip_input():
    return preprocess_clip(textured_image(np.random.default_rng(3)))


@pytest.fixture(scope="module")
def diff_input():
    return preprocess_diffusion(textured_image(np.random.default_rng(3)))


def ca_request(image, state="crack", **kwargs):
    prompt = f"a photo of a widget with {state}"
    start = prompt.rindex(state)
    return CrossAttentionRequest(
        image=image, prompt=prompt, state_token_span=(start, start + len(state)), **kwargs
    )


class TestVisionLanguageMock:
    def test_determinism_across_instances(self, clip_input):
        a = MockVisionLanguageBackend().global_embedding(clip_input)
        b = MockVisionLanguageBackend().global_embedding(clip_input)
        assert np.array_equal(a, b)

    def test_patch_grid_shape(self, vl, clip_input):
        grid = vl.patch_embeddings(clip_input)
        assert grid.shape == (15, 15)
        assert grid.dim == vl.embed_dim
        assert grid.tag.model == "clip"

    def test_embedding_dims_match(self, vl, clip_input):
        g = vl.global_embedding(clip_input)
        t = vl.text_embedding("a photo of a widget")
        assert g.shape == t.shape

    def test_all_cells_nonzero_norm(self, vl, clip_input):
        grid = vl.patch_embeddings(clip_input)
        assert np.all(np.linalg.norm(grid.grid, axis=-1) > 0)

    def test_block_features(self, vl, clip_input):
        grids = vl.block_features(clip_input, (6, 11))
        assert len(grids) == 2
        assert grids[0].shape == grids[1].shape == (15, 15)
        assert [g.tag for g in grids] == [SourceTag("clip", 6), SourceTag("clip", 11)]
        assert not np.array_equal(grids[0].grid, grids[1].grid)

    def test_empty_block_list(self, vl, clip_input):
        assert vl.block_features(clip_input, ()) == []

    def test_out_of_range_block(self, vl, clip_input):
        with pytest.raises(InvalidArgumentError):
            vl.block_features(clip_input, (12,))

    def test_text_embedding_deterministic(self, vl):
        p = "a good, cropped picture of the damaged bottle for classification"
        assert np.array_equal(vl.text_embedding(p), vl.text_embedding(p))

    def test_empty_prompt_rejected(self, vl):
        with pytest.raises(InvalidArgumentError):
            vl.text_embedding("")

    def test_abnormal_prompt_shifts_texture_channels(self, vl):
        # Same template, opposite polarity words: only the semantic boost on
        # channels 1..3 should differ systematically.
        t_bad = vl.text_embedding("a photo of the damaged widget")
        t_good = vl.text_embedding("a photo of the perfect widget")
        assert t_bad[1:4].mean() > t_good[1:4].mean()

    def test_brightness_shift_touches_only_mean_channels(self, vl, clip_input):
        shifted = clip_input + 0.2
        a = vl.patch_embeddings(clip_input).grid
        b = vl.patch_embeddings(shifted).grid
        # channel 0 is the window mean: shifted
        assert np.all(b[..., 0] > a[..., 0])
        # std/gradient channels and the signature tail are untouched
        np.testing.assert_allclose(b[..., 1:4], a[..., 1:4], atol=1e-9)
        np.testing.assert_array_equal(b[..., 4:], a[..., 4:])

    def test_wrong_resolution_rejected(self, vl):
        with pytest.raises(InvalidArgumentError):
            vl.patch_embeddings(np.zeros((3, 224, 224)))


class TestDiffusionMock:
    def test_cross_attention_shape_and_sign(self, diff, diff_input):
        out = diff.cross_attention(ca_request(diff_input))
        assert out.values.shape == (64, 64)
        assert np.all(out.values >= 0.0)
        assert not out.normalized

    def test_cross_attention_deterministic(self, diff, diff_input):
        a = diff.cross_attention(ca_request(diff_input))
        b = diff.cross_attention(ca_request(diff_input))
        assert np.array_equal(a.values, b.values)

    def test_bright_square_attracts_attention(self, diff):
        clean = textured_image(np.random.default_rng(5))
        defective = inject_square(clean, y0=128, x0=64, side=40)
        out = diff.cross_attention(ca_request(preprocess_diffusion(defective)))
        iy, ix = np.unravel_index(np.argmax(out.values), out.values.shape)
        # map cell -> pixel block of 4 on the 256-image
        assert 128 <= iy * 4 < 168
        assert 64 <= ix * 4 < 104

    def test_states_give_distinct_maps(self, diff, diff_input):
        a = diff.cross_attention(ca_request(diff_input, state="crack")).values
        b = diff.cross_attention(ca_request(diff_input, state="hole")).values
        assert not np.array_equal(a, b)

    def test_timestep_changes_smoothing(self, diff, diff_input):
        a = diff.cross_attention(ca_request(diff_input, timestep=101)).values
        b = diff.cross_attention(ca_request(diff_input, timestep=901)).values
        assert not np.array_equal(a, b)
        assert b.std() < a.std()  # more smoothing at higher timesteps

    def test_layer_selection_variants(self, diff, diff_input):
        maps = {
            sel: diff.cross_attention(ca_request(diff_input, layer_selection=sel)).values
            for sel in ("decoder_only", "encoder_and_decoder_no_bottleneck", "all")
        }
        assert not np.array_equal(maps["decoder_only"], maps["all"])

    def test_whitespace_state_span_rejected(self, diff, diff_input):
        with pytest.raises(TokenAlignmentError):
            diff.cross_attention(
                CrossAttentionRequest(
                    image=diff_input, prompt="a photo of x", state_token_span=(1, 2)
                )
            )

    def test_span_outside_prompt_rejected(self, diff_input):
        with pytest.raises(TokenAlignmentError):
            CrossAttentionRequest(image=diff_input, prompt="short", state_token_span=(2, 99))

    def test_bad_timestep_rejected(self, diff_input):
        with pytest.raises(InvalidArgumentError):
            ca_request(diff_input, timestep=0)
        with pytest.raises(InvalidArgumentError):
            ca_request(diff_input, timestep=1000)

    def test_decoder_features_default_pairs(self, diff, diff_input):
        grids = diff.decoder_features(diff_input, ((201, 3), (401, 2), (801, 1)))
        assert len(grids) == 3
        assert [g.tag for g in grids] == [
            SourceTag("diffusion", 3, timestep=201),
            SourceTag("diffusion", 2, timestep=401),
            SourceTag("diffusion", 1, timestep=801),
        ]
        assert [g.shape for g in grids] == [(16, 16), (8, 8), (4, 4)]

    def test_decoder_features_deterministic(self, diff, diff_input):
        a = diff.decoder_features(diff_input, ((401, 2),))[0]
        b = diff.decoder_features(diff_input, ((401, 2),))[0]
        assert np.array_equal(a.grid, b.grid)

    def test_block_zero_rejected(self, diff, diff_input):
        with pytest.raises(InvalidArgumentError):
            diff.decoder_features(diff_input, ((201, 0),))

    def test_bad_pair_timestep_rejected(self, diff, diff_input):
        with pytest.raises(InvalidArgumentError):
            diff.decoder_features(diff_input, ((0, 1),))

    def test_no_noise_invariant(self, diff, diff_input):
        # Empty mask: the latent is the clean image's latent at any timestep.
        a = diff.latent(diff_input, timestep=1)
        b = diff.latent(diff_input, timestep=999)
        assert np.array_equal(a, b)

    def test_wrong_resolution_rejected(self, diff):
        with pytest.raises(InvalidArgumentError):
            diff.decoder_features(np.zeros((3, 256, 256)), ((201, 3),))


def test_factory_selects_mock():
    bundle = create_backends("mock", "mock")
    assert isinstance(bundle.vl, MockVisionLanguageBackend)
    assert isinstance(bundle.diffusion, MockDiffusionBackend)
    assert create_backends("mock", None).diffusion is None
    assert create_backends(None, "mock").vl is None
