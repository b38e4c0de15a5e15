import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvcl.encoders import TextEncoderParams, encode_texts
from mvcl.errors import ParameterError
from mvcl.views import (AugmentConfig, Sample, TextSource, TextViewConfig, augment_image,
                        augment_images, build_batch_views, build_tag_sequence,
                        make_visual_views, sample_textual_source)


def img(seed=0, size=16):
    return np.random.default_rng(seed).random((size, size, 3))


def samples(n=6, with_tags=True):
    rng = np.random.default_rng(3)
    return [Sample(rng.random((16, 16, 3)), (4, 5, 6), [(7, 8), (9,)] if with_tags else [], f"k{i}")
            for i in range(n)]


TEXT = TextViewConfig(p_tag=0.5, prompt=(10, 11), sep_id=2, max_len=16)


class TestFixedPoints:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31))
    def test_identity_config_reproduces_input(self, seed):
        x = img(seed)
        out = augment_image(x, AugmentConfig.identity(), np.random.default_rng(seed))
        assert out.tobytes() == x.tobytes()

    def test_identity_batch_views(self):
        ss = samples()
        for b, s in zip(build_batch_views(ss, AugmentConfig.identity(), TEXT,
                                          np.random.default_rng(0)), ss):
            assert b.I_v1.tobytes() == s.image.tobytes() == b.I_v2.tobytes()

    def test_zero_dropout_text_views_identical(self):
        p = TextEncoderParams(vocab_size=12, max_len=8, hidden_dim=8, num_layers=2,
                              embed_dim=4, ff_dim=8, dropout_p=0.0)
        p.init_weights(np.random.default_rng(0))
        seqs = [[3, 4, 5], [6], [7, 8, 9, 10]]
        a = encode_texts(p, seqs, True, np.random.default_rng(1)).data
        b = encode_texts(p, seqs, True, np.random.default_rng(2)).data
        assert a.tobytes() == b.tobytes()

    def test_p_tag_zero_never_emits_tags(self):
        rng = np.random.default_rng(0)
        assert all(sample_textual_source(True, 0.0, rng) is TextSource.CAPTION
                   for _ in range(10_000))

    def test_p_tag_zero_batches(self):
        cfg = TextViewConfig(p_tag=0.0, prompt=(10,), per_sample_source=True)
        rng = np.random.default_rng(1)
        for _ in range(200):
            assert all(b.T_source is TextSource.CAPTION
                       for b in build_batch_views(samples(3), AugmentConfig(), cfg, rng))

    def test_p_tag_one_always_tags(self):
        rng = np.random.default_rng(2)
        assert all(sample_textual_source(True, 1.0, rng) is TextSource.TAG for _ in range(1000))

    def test_untagged_samples_fall_back_to_caption(self):
        rng = np.random.default_rng(3)
        assert all(sample_textual_source(False, 1.0, rng) is TextSource.CAPTION for _ in range(100))


class TestAugmentation:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31))
    def test_output_in_unit_range_and_shape(self, seed):
        x = img(seed)
        cfg = AugmentConfig(jitter_strength=0.9, blur_prob=0.5, grayscale_prob=0.5)
        out = augment_image(x, cfg, np.random.default_rng(seed))
        assert out.shape == x.shape and out.min() >= 0.0 and out.max() <= 1.0

    def test_batch_equals_sequential_single_calls(self):
        xs = np.stack([img(s) for s in range(5)])
        cfg = AugmentConfig(blur_prob=0.5, grayscale_prob=0.5)
        batch = augment_images(xs, cfg, np.random.default_rng(9))
        rng = np.random.default_rng(9)
        for i in range(5):
            np.testing.assert_array_equal(batch[i], augment_image(xs[i], cfg, rng))

    def test_seeded_determinism(self):
        a = augment_image(img(), AugmentConfig(), np.random.default_rng(4))
        b = augment_image(img(), AugmentConfig(), np.random.default_rng(4))
        assert a.tobytes() == b.tobytes()

    def test_two_views_differ(self):
        v1, v2 = make_visual_views(img(), AugmentConfig(), np.random.default_rng(5))
        assert not np.array_equal(v1, v2)

    def test_forced_flip_mirrors(self):
        cfg = AugmentConfig(crop_scale_range=(1.0, 1.0), flip_prob=1.0, jitter_strength=0.0,
                            blur_prob=0.0, grayscale_prob=0.0)
        x = img()
        np.testing.assert_array_equal(augment_image(x, cfg, np.random.default_rng(0)), x[:, ::-1])

    def test_forced_grayscale_equalizes_channels(self):
        cfg = AugmentConfig(crop_scale_range=(1.0, 1.0), flip_prob=0.0, jitter_strength=0.0,
                            blur_prob=0.0, grayscale_prob=1.0)
        out = augment_image(img(), cfg, np.random.default_rng(0))
        np.testing.assert_allclose(out[..., 0], out[..., 2], atol=0)

    def test_blur_preserves_mean_of_constant_image(self):
        cfg = AugmentConfig(crop_scale_range=(1.0, 1.0), flip_prob=0.0, jitter_strength=0.0,
                            blur_prob=1.0, grayscale_prob=0.0)
        out = augment_image(np.full((16, 16, 3), 0.4), cfg, np.random.default_rng(0))
        np.testing.assert_allclose(out, 0.4, atol=1e-12)

    @pytest.mark.parametrize("kw", [dict(crop_scale_range=(0.0, 1.0)), dict(crop_scale_range=(0.9, 0.5)),
                                    dict(flip_prob=1.5), dict(jitter_strength=1.0),
                                    dict(blur_sigma=0.0)])
    def test_rejects_bad_config(self, kw):
        with pytest.raises(ParameterError):
            AugmentConfig(**kw)


class TestTagSequences:
    def test_layout(self):
        assert build_tag_sequence([(7, 8), (9,)], (10, 11), 16, 2) == (10, 11, 2, 7, 8, 2, 9)

    def test_truncation(self):
        assert build_tag_sequence([(7, 8), (9,)], (10, 11), 4, 2) == (10, 11, 2, 7)

    def test_empty_prompt_rejected(self):
        with pytest.raises(ParameterError):
            build_tag_sequence([(7,)], (), 8, 2)

    def test_bad_probability(self):
        with pytest.raises(ParameterError):
            sample_textual_source(True, 1.2, np.random.default_rng(0))

    def test_shared_source_per_batch(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            srcs = {b.T_source for b in build_batch_views(samples(), AugmentConfig(), TEXT, rng)}
            assert len(srcs) == 1

    def test_tag_frequency_tracks_p_tag(self):
        rng = np.random.default_rng(7)
        n = sum(sample_textual_source(True, 0.3, rng) is TextSource.TAG for _ in range(10_000))
        assert abs(n / 10_000 - 0.3) < 0.02

    def test_empty_batch(self):
        with pytest.raises(ParameterError):
            build_batch_views([], AugmentConfig(), TEXT, np.random.default_rng(0))


class TestWorkedExamples:
    def _only(self, **kw):
        base = dict(crop_scale_range=(1.0, 1.0), flip_prob=0.0, jitter_strength=0.0,
                    blur_prob=0.0, grayscale_prob=0.0)
        return AugmentConfig(**{**base, **kw})

    def test_flip_is_an_involution(self):
        cfg = self._only(flip_prob=1.0)
        x = img()
        once = augment_image(x, cfg, np.random.default_rng(0))
        np.testing.assert_array_equal(augment_image(once, cfg, np.random.default_rng(1)), x)

    def test_grayscale_value_is_channel_mean(self):
        x = img()
        out = augment_image(x, self._only(grayscale_prob=1.0), np.random.default_rng(0))
        for c in range(3):
            np.testing.assert_allclose(out[..., c], x.mean(axis=-1), rtol=1e-15)

    def test_views_differ_almost_always(self):
        rng = np.random.default_rng(10)
        differ = sum(not np.array_equal(*make_visual_views(img(i), AugmentConfig(), rng))
                     for i in range(100))
        assert differ >= 99

    def test_identity_views_equal_input(self):
        x = img()
        v1, v2 = make_visual_views(x, AugmentConfig.identity(), np.random.default_rng(0))
        assert np.array_equal(v1, x) and np.array_equal(v2, x)

    def test_no_tags_gives_prompt(self):
        assert build_tag_sequence([], (10, 11), 16, 2) == (10, 11)

    def test_half_tag_rate_concentrates(self):
        rng = np.random.default_rng(11)
        n = sum(sample_textual_source(True, 0.5, rng) is TextSource.TAG for _ in range(10_000))
        assert 0.47 <= n / 10_000 <= 0.53

    def test_single_sample_identity_bundle(self):
        s = samples(1)
        cfg = TextViewConfig(p_tag=0.0, prompt=(10,))
        (b,) = build_batch_views(s, AugmentConfig.identity(), cfg, np.random.default_rng(0))
        assert np.array_equal(b.I_v1, s[0].image) and np.array_equal(b.I_v2, s[0].image)
        assert b.T_source is TextSource.CAPTION and b.T_tokens == s[0].caption

    def test_p_tag_one_all_tagged(self):
        cfg = TextViewConfig(p_tag=1.0, prompt=(10,))
        bundles = build_batch_views(samples(4), AugmentConfig(), cfg, np.random.default_rng(0))
        assert all(b.T_source is TextSource.TAG for b in bundles)

    def test_batch_reproducible(self):
        a = build_batch_views(samples(8), AugmentConfig(), TEXT, np.random.default_rng(12))
        b = build_batch_views(samples(8), AugmentConfig(), TEXT, np.random.default_rng(12))
        for x, y in zip(a, b):
            assert x.I_v1.tobytes() == y.I_v1.tobytes() and x.I_v2.tobytes() == y.I_v2.tobytes()
            assert (x.T_source, x.T_tokens) == (y.T_source, y.T_tokens)
