import math

import numpy as np
import pytest

from clipfusion.backends import create_backends
from clipfusion.core import FeatureGrid, FusionWeights, ScoreMap, SourceTag, minmax_normalize
from clipfusion.errors import BankLookupError, InvalidArgumentError
from clipfusion.memory import ReferenceBank, build_bank
from clipfusion.prompts import PromptSpec, render_diffusion_prompts, spec_for_category
from clipfusion.scoring import (
    ScoringConfig,
    clip_language_map,
    clip_language_map_raw,
    clip_language_score,
    detect_image,
    diff_language_map,
    diff_language_score,
    fuse_maps,
    fuse_maps_raw,
    fuse_scores,
    median_low,
    two_class_abnormal_probability,
    vision_map,
    vision_map_raw,
    vision_score,
)

from conftest import inject_square, textured_image


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def basis(i, d=6):
    e = np.zeros(d)
    e[i] = 1.0
    return e


def grid_of(cells, tag=SourceTag("clip", 0)):
    return FeatureGrid(np.asarray(cells, dtype=float), tag)


def norm_map(values):
    return minmax_normalize(ScoreMap(np.asarray(values, dtype=float)))


class TestTwoClassProbability:
    def test_symmetric_similarities(self):
        assert two_class_abnormal_probability(np.float64(0.3), np.float64(0.3), 1.0) == 0.5

    def test_unit_gap_unit_temperature(self):
        expected = math.exp(1.0) / (math.exp(1.0) + math.exp(0.0))
        got = float(two_class_abnormal_probability(np.float64(1.0), np.float64(0.0), 1.0))
        assert got == pytest.approx(expected, abs=1e-12)
        assert round(got, 4) == 0.7311

    def test_small_temperature(self):
        # direct contrastive form as the oracle
        za, zn = 0.9 / 0.07, 0.8 / 0.07
        expected = math.exp(za) / (math.exp(za) + math.exp(zn))
        got = float(two_class_abnormal_probability(np.float64(0.9), np.float64(0.8), 0.07))
        assert got == pytest.approx(expected, abs=1e-9)
        assert round(got, 4) == 0.8067

    def test_bad_temperature(self):
        with pytest.raises(InvalidArgumentError):
            two_class_abnormal_probability(np.float64(1.0), np.float64(0.0), 0.0)


class TestClipLanguageMap:
    def test_equidistant_cell_is_half(self):
        cells = np.tile(basis(2), (3, 3, 1))  # orthogonal to both text embeddings
        raw = clip_language_map_raw(grid_of(cells), basis(0), basis(1), 0.5, 3, 3)
        assert np.all(raw.values == 0.5)

    def test_aligned_cell_matches_contrastive_form(self):
        cells = np.tile(basis(1), (2, 2, 1))  # equals the abnormal embedding
        raw = clip_language_map_raw(grid_of(cells), basis(0), basis(1), 1.0, 2, 2)
        expected = math.exp(1.0) / (math.exp(1.0) + math.exp(0.0))
        np.testing.assert_allclose(raw.values, expected, atol=1e-12)

    def test_normalized_output(self, rng):
        cells = rng.normal(size=(4, 4, 6))
        out = clip_language_map(grid_of(cells), basis(0), basis(1), 0.07, 9, 9)
        assert out.normalized
        assert out.values.shape == (9, 9)

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            clip_language_map_raw(grid_of(np.ones((2, 2, 6))), np.ones(4), np.ones(4), 1.0, 2, 2)


class TestClipLanguageScore:
    def test_equal_similarities(self):
        assert clip_language_score(basis(2), basis(0), basis(1), 0.07) == 0.5

    def test_aligned_with_abnormal(self):
        expected = math.exp(1.0) / (math.exp(1.0) + math.exp(0.0))
        got = clip_language_score(basis(1), basis(0), basis(1), 1.0)
        assert got == pytest.approx(expected, abs=1e-12)

    def test_swapping_texts_complements(self, rng):
        for _ in range(20):
            g, tn, ta = rng.normal(size=(3, 8))
            s = clip_language_score(g, tn, ta, 0.07)
            assert clip_language_score(g, ta, tn, 0.07) == pytest.approx(1.0 - s, abs=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            clip_language_score(np.ones(5), np.ones(4), np.ones(4), 1.0)


@pytest.fixture(scope="module")
def backend():
    return create_backends("mock", "mock").diffusion


class TestDiffLanguageMap:
    def query_prompts(self, states):
        spec = PromptSpec("widget", states=tuple(states))
        return render_diffusion_prompts(spec)[0]

    def diff_input(self, image):
        from clipfusion.data import preprocess_diffusion

        return preprocess_diffusion(image)

    def test_single_state_equals_that_map(self, backend):
        image = self.diff_input(textured_image(np.random.default_rng(2)))
        single = diff_language_map(image, self.query_prompts(["crack"]), backend, 401,
                                   "encoder_and_decoder_no_bottleneck", 64, 64)
        from clipfusion.backends import CrossAttentionRequest

        prompt = self.query_prompts(["crack"])[0]
        direct = backend.cross_attention(
            CrossAttentionRequest(image=image, prompt=prompt.text,
                                  state_token_span=prompt.state_span, timestep=401)
        )
        np.testing.assert_array_equal(single.values, minmax_normalize(direct).values)

    def test_duplicate_state_equals_single(self, backend):
        # mean of identical maps; duplicates are modeled by repeating the prompt
        image = self.diff_input(textured_image(np.random.default_rng(2)))
        prompts = self.query_prompts(["crack"])
        once = diff_language_map(image, prompts, backend, 401,
                                 "encoder_and_decoder_no_bottleneck", 32, 32)
        twice = diff_language_map(image, prompts * 2, backend, 401,
                                  "encoder_and_decoder_no_bottleneck", 32, 32)
        np.testing.assert_array_equal(once.values, twice.values)

    def test_defect_square_wins_argmax(self, backend):
        clean = textured_image(np.random.default_rng(4))
        defective = inject_square(clean, y0=64, x0=160, side=36)
        out = diff_language_map(self.diff_input(defective), self.query_prompts(["damage"]),
                                backend, 401, "encoder_and_decoder_no_bottleneck", 256, 256)
        iy, ix = np.unravel_index(np.argmax(out.values), out.values.shape)
        assert 60 <= iy < 104 and 156 <= ix < 200

    def test_empty_prompt_list_rejected(self, backend):
        image = self.diff_input(textured_image(np.random.default_rng(2)))
        with pytest.raises(InvalidArgumentError):
            diff_language_map(image, [], backend, 401, "all", 8, 8)


class TestVisionMap:
    def test_two_tags_average(self):
        tag_a, tag_b = SourceTag("clip", 6), SourceTag("clip", 11)
        bank = ReferenceBank(
            entries={tag_a: np.array([[1.0, 0.0]]), tag_b: np.array([[0.0, 1.0]])},
            shots=1, category="t", seed=0,
        )
        # cell orthogonal to tag_a's reference (0.5), equal to tag_b's (0.0)
        grids = [
            grid_of([[[0.0, 1.0]]], tag_a),
            grid_of([[[0.0, 1.0]]], tag_b),
        ]
        raw = vision_map_raw(grids, bank, 4, 4)
        assert np.all(raw.values == 0.25)

    def test_constant_distance_normalizes_to_zero(self):
        tag = SourceTag("clip", 6)
        bank = ReferenceBank(entries={tag: np.array([[1.0, 0.0]])}, shots=1,
                             category="t", seed=0)
        cells = np.tile(np.array([0.0, 1.0]), (3, 3, 1))
        out = vision_map([grid_of(cells, tag)], bank, 6, 6)
        assert np.array_equal(out.values, np.zeros((6, 6)))

    def test_self_query_map_near_zero(self, mock_backends):
        image = textured_image(np.random.default_rng(9))
        blocks, pairs = (6, 11), ((201, 3),)
        bank = build_bank([image], blocks, pairs, mock_backends)
        from clipfusion.data import preprocess_clip, preprocess_diffusion

        grids = mock_backends.vl.block_features(preprocess_clip(image), blocks)
        grids += mock_backends.diffusion.decoder_features(preprocess_diffusion(image), pairs)
        raw = vision_map_raw(grids, bank, 64, 64)
        assert raw.values.max() <= 1e-6

    def test_missing_tag_raises(self):
        bank = ReferenceBank(entries={SourceTag("clip", 6): np.array([[1.0, 0.0]])},
                             shots=1, category="t", seed=0)
        with pytest.raises(BankLookupError):
            vision_map_raw([grid_of([[[1.0, 0.0]]], SourceTag("clip", 11))], bank, 2, 2)

    def test_empty_grid_list_rejected(self):
        bank = ReferenceBank(entries={SourceTag("clip", 6): np.array([[1.0, 0.0]])},
                             shots=1, category="t", seed=0)
        with pytest.raises(InvalidArgumentError):
            vision_map_raw([], bank, 2, 2)


class TestFuseMaps:
    def test_quarter_alpha_constant_maps(self):
        one = ScoreMap(np.ones((3, 3)), normalized=True)
        fused = fuse_maps_raw(one, one, one, one, 0.25, zero_shot=False)
        assert np.all(fused.values == 2.0)

    def test_alpha_one_drops_diffusion(self, rng):
        cl, cv, dl, dv = (norm_map(rng.normal(size=(5, 5))) for _ in range(4))
        fused = fuse_maps(cl, cv, dl, dv, 1.0, zero_shot=False)
        expected = minmax_normalize(ScoreMap(cl.values + cv.values))
        np.testing.assert_array_equal(fused.values, expected.values)

    def test_alpha_zero_zero_shot_is_diffusion_map(self, rng):
        cl, dl = norm_map(rng.normal(size=(4, 4))), norm_map(rng.normal(size=(4, 4)))
        fused = fuse_maps(cl, None, dl, None, 0.0, zero_shot=True)
        np.testing.assert_array_equal(fused.values, dl.values)

    def test_shape_mismatch_rejected(self):
        a = ScoreMap(np.zeros((2, 2)), normalized=True)
        b = ScoreMap(np.zeros((3, 3)), normalized=True)
        with pytest.raises(InvalidArgumentError):
            fuse_maps(a, None, b, None, 0.5, zero_shot=True)

    def test_unnormalized_input_rejected(self):
        a = ScoreMap(np.full((2, 2), 2.0))
        b = ScoreMap(np.zeros((2, 2)), normalized=True)
        with pytest.raises(InvalidArgumentError):
            fuse_maps(a, None, b, None, 0.5, zero_shot=True)

    def test_vision_maps_rejected_in_zero_shot(self):
        a = ScoreMap(np.zeros((2, 2)), normalized=True)
        with pytest.raises(InvalidArgumentError):
            fuse_maps(a, a, a, None, 0.5, zero_shot=True)

    def test_bad_alpha_rejected(self):
        a = ScoreMap(np.zeros((2, 2)), normalized=True)
        with pytest.raises(InvalidArgumentError):
            fuse_maps(a, None, a, None, 1.5, zero_shot=True)

    def test_linearity_in_each_component(self, rng):
        others = [ScoreMap(rng.normal(size=(4, 4))) for _ in range(3)]
        zero = ScoreMap(np.zeros((4, 4)))
        for alpha in (0.0, 0.25, 0.66, 1.0):
            a1 = ScoreMap(rng.normal(size=(4, 4)))
            a2 = ScoreMap(rng.normal(size=(4, 4)))
            lhs = fuse_maps_raw(ScoreMap(a1.values + a2.values), *others, alpha, False).values
            rhs = (
                fuse_maps_raw(a1, *others, alpha, False).values
                + fuse_maps_raw(a2, *others, alpha, False).values
                - fuse_maps_raw(zero, *others, alpha, False).values
            )
            np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_output_normalization_preserves_argmax(self, rng):
        for _ in range(20):
            comps = [norm_map(rng.normal(size=(6, 6))) for _ in range(4)]
            raw = fuse_maps_raw(*comps, 0.25, False)
            out = fuse_maps(*comps, 0.25, False)
            assert np.argmax(out.values) == np.argmax(raw.values)

    def test_zero_vision_reproduces_zero_shot(self, rng):
        cl, dl = norm_map(rng.normal(size=(5, 5))), norm_map(rng.normal(size=(5, 5)))
        zeros = ScoreMap(np.zeros((5, 5)), normalized=True)
        for alpha in (0.0, 0.25, 0.75, 1.0):
            few = fuse_maps_raw(cl, zeros, dl, zeros, alpha, zero_shot=False)
            zero = fuse_maps_raw(cl, None, dl, None, alpha, zero_shot=True)
            np.testing.assert_array_equal(few.values, zero.values)


class TestScalarScores:
    def test_diff_language_score_constant_map(self):
        assert diff_language_score(ScoreMap(np.full((3, 3), 0.7))) == 0.0

    def test_diff_language_score_one_hot(self):
        values = np.zeros((2, 3))
        values[1, 2] = 1.0
        assert diff_language_score(ScoreMap(values)) == 1.0

    def test_diff_language_score_ratio(self):
        assert diff_language_score(ScoreMap(np.array([[0.2, 0.2], [0.2, 0.8]]))) == 0.75

    def test_diff_language_score_zero_map(self):
        assert diff_language_score(ScoreMap(np.zeros((4, 4)))) == 0.0

    def test_diff_language_score_bounds_and_monotonic_in_max(self, rng):
        lows = np.array([0.1, 0.2, 0.3])
        previous = None
        for peak in (0.4, 0.8, 1.6, 3.2):
            score = diff_language_score(ScoreMap(np.append(lows, peak).reshape(2, 2)))
            assert 0.0 <= score <= 1.0
            if previous is not None:
                assert score >= previous
            previous = score
        for _ in range(50):
            score = diff_language_score(ScoreMap(np.abs(rng.normal(size=(4, 4)))))
            assert 0.0 <= score <= 1.0

    def test_median_low_is_lower_middle(self):
        assert median_low(np.array([0.4, 0.1, 0.3, 0.2])) == 0.2
        assert median_low(np.array([3.0, 1.0, 2.0])) == 2.0

    def test_even_sized_map_uses_lower_middle(self):
        score = diff_language_score(ScoreMap(np.array([[0.1, 0.2], [0.3, 0.4]])))
        assert score == 1.0 - 0.2 / 0.4

    def test_vision_score_constant(self):
        assert vision_score(ScoreMap(np.full((3, 3), 0.3))) == 0.3

    def test_vision_score_unique_max(self):
        values = np.full((3, 3), 0.1)
        values[2, 2] = 0.9
        assert vision_score(ScoreMap(values)) == 0.9

    def test_vision_score_of_normalized_nonconstant_map_is_one(self, rng):
        out = minmax_normalize(ScoreMap(rng.normal(size=(4, 4))))
        assert vision_score(out) == 1.0


class TestFuseScores:
    def test_alpha_one(self):
        assert fuse_scores(0.8, 0.6, 0.4, 0.2, 1.0, False) == 0.8 + 0.6

    def test_alpha_zero_zero_shot(self):
        assert fuse_scores(0.7, None, 0.4, None, 0.0, True) == 0.4

    def test_weighted_example(self):
        got = fuse_scores(0.8, 0.6, 0.4, 0.2, 0.75, False)
        assert got == pytest.approx(0.75 * 1.4 + 0.25 * 0.6, abs=1e-9)
        assert got == pytest.approx(1.2, abs=1e-9)

    def test_non_finite_rejected(self):
        with pytest.raises(InvalidArgumentError):
            fuse_scores(float("nan"), None, 0.1, None, 0.5, True)


class TestScoringConfig:
    def test_defaults(self):
        cfg = ScoringConfig()
        assert cfg.fusion.alpha_seg == 0.25
        assert cfg.fusion.alpha_cls == 0.75
        assert cfg.clip_blocks == (6, 11)
        assert cfg.diff_pairs == ((201, 3), (401, 2), (801, 1))
        assert cfg.states == ("crack", "hole", "residue", "damage")
        assert cfg.cross_attention_timestep == 401

    def test_block_zero_pair_rejected(self):
        with pytest.raises(InvalidArgumentError):
            ScoringConfig(diff_pairs=((201, 0),))

    def test_empty_states_rejected(self):
        with pytest.raises(InvalidArgumentError):
            ScoringConfig(states=())

    def test_bad_temperature_rejected(self):
        with pytest.raises(InvalidArgumentError):
            ScoringConfig(temperature=-1.0)


@pytest.fixture(scope="module")
def backends():
    return create_backends("mock", "mock")


@pytest.fixture(scope="module")
def spec():
    return spec_for_category("stripes")


@pytest.fixture(scope="module")
def bank(backends):
    cfg = ScoringConfig()
    gen = np.random.default_rng(11)
    refs = [textured_image(gen) for _ in range(2)]
    return build_bank(refs, cfg.clip_blocks, cfg.diff_pairs, backends,
                      category="stripes", seed=0)


class TestDetectImage:
    def test_zero_shot_components(self, backends, spec):
        image = textured_image(np.random.default_rng(12))
        result = detect_image(image, spec, ScoringConfig(), backends, image_id="zs")
        assert set(result.component_maps) == {"clip_language", "diffusion_language"}
        assert set(result.component_scores) == {"clip_language", "diffusion_language"}
        assert result.shots == 0
        assert result.fused_map.normalized
        assert result.fused_map.values.shape == image.shape[:2]

    def test_few_shot_components(self, backends, spec, bank):
        image = textured_image(np.random.default_rng(12))
        result = detect_image(image, spec, ScoringConfig(), backends, bank=bank)
        assert set(result.component_maps) == {
            "clip_language", "clip_vision", "diffusion_language", "diffusion_vision",
        }
        assert set(result.component_scores) == set(result.component_maps)
        assert result.shots == 2

    def test_defect_scores_higher(self, backends, spec, bank):
        clean = textured_image(np.random.default_rng(13))
        defective = inject_square(clean)
        cfg = ScoringConfig()
        clean_result = detect_image(clean, spec, cfg, backends, bank=bank)
        bad_result = detect_image(defective, spec, cfg, backends, bank=bank)
        assert bad_result.fused_score > clean_result.fused_score

    def test_alpha_one_reproduces_clip_only(self, spec, bank):
        fusion = create_backends("mock", "mock")
        clip_only = create_backends("mock", None)
        image = textured_image(np.random.default_rng(14))
        cfg_one = ScoringConfig(fusion=FusionWeights(1.0, 1.0))
        full = detect_image(image, spec, cfg_one, fusion, bank=bank)
        solo = detect_image(image, spec, cfg_one, clip_only, bank=bank)
        np.testing.assert_array_equal(full.fused_map.values, solo.fused_map.values)
        assert full.fused_score == solo.fused_score
        for name in ("clip_language", "clip_vision"):
            np.testing.assert_array_equal(
                full.component_maps[name].values, solo.component_maps[name].values
            )
            assert full.component_scores[name] == solo.component_scores[name]

    def test_alpha_zero_reproduces_diffusion_only(self, spec, bank):
        fusion = create_backends("mock", "mock")
        diff_only = create_backends(None, "mock")
        image = textured_image(np.random.default_rng(15))
        cfg_zero = ScoringConfig(fusion=FusionWeights(0.0, 0.0))
        full = detect_image(image, spec, cfg_zero, fusion, bank=bank)
        solo = detect_image(image, spec, cfg_zero, diff_only, bank=bank)
        np.testing.assert_array_equal(full.fused_map.values, solo.fused_map.values)
        assert full.fused_score == solo.fused_score
        for name in ("diffusion_language", "diffusion_vision"):
            np.testing.assert_array_equal(
                full.component_maps[name].values, solo.component_maps[name].values
            )
            assert full.component_scores[name] == solo.component_scores[name]

    def test_component_error_is_identified(self, backends, spec):
        # bank lacking the diffusion tags: the failure names its component
        rng = np.random.default_rng(16)
        clip_only_bank = build_bank([textured_image(rng)], (6, 11), (), backends)
        image = textured_image(rng)
        with pytest.raises(BankLookupError) as err:
            detect_image(image, spec, ScoringConfig(), backends, bank=clip_only_bank)
        assert "diffusion_vision" in str(err.value)

    def test_detection_is_deterministic(self, backends, spec, bank):
        image = textured_image(np.random.default_rng(17))
        a = detect_image(image, spec, ScoringConfig(), backends, bank=bank)
        b = detect_image(image, spec, ScoringConfig(), backends, bank=bank)
        assert a.fused_score == b.fused_score
        np.testing.assert_array_equal(a.fused_map.values, b.fused_map.values)


class TestSmoothingKnob:
    def test_off_by_default(self):
        assert ScoringConfig().smoothing_sigma == 0.0

    def test_smoothing_changes_fused_map_only(self, backends, spec, bank):
        image = textured_image(np.random.default_rng(21))
        plain = detect_image(image, spec, ScoringConfig(), backends, bank=bank)
        smoothed = detect_image(image, spec, ScoringConfig(smoothing_sigma=2.0),
                                backends, bank=bank)
        assert not np.array_equal(plain.fused_map.values, smoothed.fused_map.values)
        assert smoothed.fused_map.normalized
        # components and scalar scores are untouched by map smoothing
        assert plain.component_scores == smoothed.component_scores
        for name in plain.component_maps:
            np.testing.assert_array_equal(
                plain.component_maps[name].values, smoothed.component_maps[name].values
            )
