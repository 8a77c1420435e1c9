import numpy as np
import pytest

from sptrlab import autograd as ag
from sptrlab.encoders import (Backbone, PromptLeaves, PromptState, class_embedding,
                              compress_handcrafted, encode_image, encode_text,
                              handcrafted_features, template_bank)
from sptrlab.exceptions import DegenerateError, NonFiniteError, ShapeError


@pytest.fixture(scope="module")
def bb():
    return Backbone(seed=1)


@pytest.fixture(scope="module")
def small():
    return Backbone(seed=2, n_layers=3, d_emb=4, d_hidden=5, d_feat=3, d_in=6, prompt_length=2, n_templates=5)


def test_text_features_are_unit_norm(bb):
    rng = np.random.default_rng(0)
    for _ in range(10):
        ctx = rng.normal(size=(bb.prompt_length, bb.d_emb))
        deep = rng.normal(0, 0.3, size=(5, bb.d_hidden))
        out = encode_text(ctx, bb.class_embeddings(range(4)), deep, bb.text).value
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-9)


def test_image_features_are_unit_norm(bb):
    X = np.random.default_rng(1).uniform(0, 1, (7, bb.d_in))
    out = encode_image(X, np.zeros((3, bb.d_hidden)), bb.image).value
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-9)


def test_identical_images_have_cosine_one(bb):
    x = np.random.default_rng(2).uniform(0, 1, bb.d_in)
    a = encode_image(x, None, bb.image).value
    b = encode_image(x.copy(), None, bb.image).value
    assert float(a @ b) == pytest.approx(1.0, abs=1e-12)


def test_same_seed_gives_identical_weights_and_features():
    a, b = Backbone(seed=5), Backbone(seed=5)
    for wa, wb in zip(a.image.weights, b.image.weights):
        np.testing.assert_array_equal(wa, wb)
    ctx = a.bank[3]
    np.testing.assert_array_equal(encode_text(ctx, a.class_embedding(2), None, a.text).value,
                                  encode_text(ctx, b.class_embedding(2), None, b.text).value)


def test_different_seeds_differ():
    assert not np.allclose(Backbone(seed=0).text.projection, Backbone(seed=1).text.projection)


def test_weights_are_read_only(bb):
    with pytest.raises(ValueError):
        bb.text.weights[0][0, 0] = 1.0


def test_class_stack_matches_single_class(bb):
    ctx = bb.bank[0]
    stacked = encode_text(ctx, bb.class_embeddings([3, 7]), None, bb.text).value
    single = encode_text(ctx, bb.class_embedding(7), None, bb.text).value
    np.testing.assert_allclose(stacked[1], single, atol=1e-14)


def test_width_mismatch_rejected(bb):
    with pytest.raises(ShapeError):
        encode_text(np.zeros((2, bb.d_emb + 1)), bb.class_embedding(0), None, bb.text)
    with pytest.raises(ShapeError):
        encode_image(np.zeros(bb.d_in - 1), None, bb.image)


def test_prompt_depth_beyond_encoder_rejected(small):
    with pytest.raises(ShapeError):
        encode_image(np.zeros(small.d_in), np.zeros((4, small.d_hidden)), small.image)


def test_text_gradient_matches_finite_differences(small):
    cls = small.class_embeddings([0, 1])
    w = np.random.default_rng(3).normal(size=(2, small.d_feat))

    def f(ctx, deep):
        return ag.weighted_sum(encode_text(ctx, cls, deep, small.text), w)
    rng = np.random.default_rng(4)
    assert ag.grad_check(f, [rng.normal(size=(2, 4)), rng.normal(0, 0.3, (2, 5))]) < 1e-5


def test_image_gradient_wrt_input_matches_finite_differences(small):
    w = np.random.default_rng(5).normal(size=small.d_feat)

    def f(x):
        return ag.weighted_sum(encode_image(x, np.zeros((2, small.d_hidden)), small.image), w)
    assert ag.grad_check(f, [np.random.default_rng(6).uniform(0, 1, small.d_in)]) < 1e-5


def test_single_template_bank_equals_encode_text(small):
    bank = template_bank(small.seed, 1, small.prompt_length, small.d_emb)
    feats = handcrafted_features(bank, small.class_embedding(4), small.text)
    assert feats.shape == (1, small.d_feat)
    np.testing.assert_array_equal(feats[0], encode_text(bank[0], small.class_embedding(4), None, small.text).value)


def test_bank_prefix_property():
    big = template_bank(0, 10, 4, 16)
    np.testing.assert_array_equal(template_bank(0, 3, 4, 16), big[:3])


def test_handcrafted_features_are_distinct(bb):
    feats = bb.handcrafted(0)
    assert feats.shape == (60, bb.d_feat)
    cos = feats @ feats.T
    off = cos[~np.eye(60, dtype=bool)]
    assert off.max() < 1.0 - 1e-6


def test_handcrafted_is_cached_and_read_only(bb):
    assert bb.handcrafted(1) is bb.handcrafted(1)
    with pytest.raises(ValueError):
        bb.handcrafted(1)[0, 0] = 0.0


def test_compress_identical_vectors():
    u = np.array([0.6, 0.0, 0.8])
    np.testing.assert_allclose(compress_handcrafted(np.tile(u, (5, 1))), u, atol=1e-15)


def test_compress_antipodal_rejected():
    u = np.array([1.0, 0.0])
    with pytest.raises(DegenerateError):
        compress_handcrafted(np.stack([u, -u]))


def test_compress_three_vectors_by_hand():
    feats = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.6, 0.8]])
    # mean = (1/3, 1.6/3, 0.8/3); norm of (1, 1.6, 0.8) = sqrt(4.2)
    expected = np.array([1.0, 1.6, 0.8]) / np.sqrt(4.2)
    np.testing.assert_allclose(compress_handcrafted(feats), expected, atol=1e-15)


def test_hand_classifier_rows_are_unit(bb):
    clf = bb.hand_classifier(range(5))
    np.testing.assert_allclose(np.linalg.norm(clf, axis=1), 1.0, atol=1e-12)


def test_class_embedding_is_seeded():
    np.testing.assert_array_equal(class_embedding(3, 9, 16), class_embedding(3, 9, 16))
    assert not np.array_equal(class_embedding(3, 9, 16), class_embedding(3, 10, 16))


def test_class_centers_in_unit_box(bb):
    c = bb.class_center(range(10))
    assert c.shape == (10, bb.d_in)
    assert c.min() >= 0.0 and c.max() <= 1.0


def test_init_prompts(bb):
    state = bb.init_prompts(9)
    np.testing.assert_array_equal(state.context, bb.bank[0])
    assert state.text_deep.shape == (9, bb.d_hidden)
    assert not state.text_deep.any() and not state.visual_deep.any()
    with pytest.raises(ValueError):
        bb.init_prompts(13)


def test_prompt_state_validation():
    with pytest.raises(ShapeError):
        PromptState(np.zeros((2, 4)), np.zeros((3, 5)), np.zeros((2, 5)))
    with pytest.raises(NonFiniteError):
        PromptState(np.full((2, 4), np.nan), np.zeros((1, 5)), np.zeros((1, 5)))


def test_gradients_reach_only_learnable_prompts(small):
    state = small.init_prompts(2)
    leaves = PromptLeaves.from_state(state)
    text = encode_text(leaves.context, small.class_embeddings([0, 1]), leaves.text_deep, small.text)
    ag.backward(ag.total(text))
    grads = leaves.grads()
    assert np.any(grads["context"]) and np.any(grads["text_deep"])
    assert not np.any(grads["visual_deep"])
    assert all(w.flags.writeable is False for w in small.text.weights)


def test_alignment_controls_modality_gap():
    a = Backbone(seed=0, alignment=1.0)
    np.testing.assert_allclose(a.image.weights[1], a.text.weights[1])
    b = Backbone(seed=0, alignment=0.5)
    assert not np.allclose(b.image.weights[1], b.text.weights[1])
    with pytest.raises(ValueError):
        Backbone(alignment=1.5)
