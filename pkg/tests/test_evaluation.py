import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clipa import imagepipe as ip
from clipa import textpipe as tp
from clipa.evaluation import (PromptSet, ZeroShotClassifier, accuracy, build_classifier,
                              default_templates, encode_texts, evaluate_shard, parse_templates,
                              predict, retrieval_recall)
from clipa.ingest import Shard, SynthConfig, encode_shard, synth_generate
from clipa.model import DualEncoder, preset

V = tp.default_vocab()


@pytest.fixture(scope="module")
def model():
    return DualEncoder(preset("tiny", vocab_size=len(V)), seed=0, dtype=np.float64)


# -- prompts and classifier --------------------------------------------------------

def test_prompt_set_validation():
    with pytest.raises(ValueError):
        PromptSet((), ("a",))
    with pytest.raises(ValueError):
        PromptSet(("no slot",), ("a",))
    with pytest.raises(ValueError):
        PromptSet(("{} and {}",), ("a",))
    with pytest.raises(ValueError):
        PromptSet(("a {}",), ())


def test_default_templates_ship_with_package():
    t = default_templates()
    assert len(t) == 8 and all(x.count("{}") == 1 for x in t)
    assert parse_templates("# note\na {}\n\nb {}\n") == ("a {}", "b {}")


def test_single_template_row_is_prompt_embedding(model):
    clf = build_classifier(PromptSet(("a photo of a {}",), ("red circle",)), model)
    np.testing.assert_allclose(clf.weights[0], encode_texts(model, ["a photo of a red circle"])[0], atol=1e-12)


def test_classifier_invariant_to_template_order_and_duplicates(model):
    names = ("red circle", "blue square")
    a = build_classifier(PromptSet(("a {}", "the {} shape"), names), model)
    b = build_classifier(PromptSet(("the {} shape", "a {}", "a {}", "the {} shape"), names), model)
    np.testing.assert_allclose(a.weights, b.weights, atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(a.weights, axis=1), 1.0, atol=1e-6)


# -- classification ----------------------------------------------------------------

def test_orthonormal_classifier_is_perfect():
    basis = np.linalg.qr(np.random.default_rng(0).standard_normal((16, 16)))[0]
    clf = ZeroShotClassifier(basis[:10])
    labels = np.random.default_rng(1).integers(0, 10, 200)
    assert accuracy(basis[labels], labels, clf) == 1.0


def test_identical_rows_tie_to_lowest_class():
    clf = ZeroShotClassifier(np.tile([[1.0, 0.0]], (4, 1)))
    labels = np.repeat(np.arange(4), 50)
    emb = np.random.default_rng(0).standard_normal((200, 2))
    assert (predict(emb, clf) == 0).all()
    assert accuracy(emb, labels, clf) == 0.25


@given(st.floats(1e-3, 1e3), st.integers(0, 1000))
@settings(max_examples=50)
def test_accuracy_invariant_to_positive_rescaling(c, seed):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((5, 8))
    emb = rng.standard_normal((30, 8))
    labels = rng.integers(0, 5, 30)
    assert accuracy(emb, labels, ZeroShotClassifier(w)) == accuracy(c * emb, labels, ZeroShotClassifier(w))


# -- eval transform ----------------------------------------------------------------

def test_crop_geometry_wide_image():
    img = np.random.default_rng(0).integers(0, 256, (256, 512, 3), dtype=np.uint8)
    out = ip.eval_preprocess(img, 224, "crop")
    np.testing.assert_allclose(out, img[16:240, 144:368] / 255.0, atol=1e-6)


def test_square_256_is_center_crop_only():
    img = np.random.default_rng(1).integers(0, 256, (256, 256, 3), dtype=np.uint8)
    np.testing.assert_allclose(ip.eval_preprocess(img, 224), img[16:240, 16:240] / 255.0, atol=1e-6)


def test_direct_mode_at_native_size_is_identity():
    img = np.random.default_rng(2).integers(0, 256, (32, 32, 3), dtype=np.uint8)
    np.testing.assert_allclose(ip.eval_preprocess(img, 32, "direct"), img / 255.0, atol=1e-6)


# -- retrieval ---------------------------------------------------------------------

def test_identity_retrieval_is_perfect():
    e = np.linalg.qr(np.random.default_rng(0).standard_normal((20, 20)))[0]
    assert retrieval_recall(e, e, 1) == (1.0, 1.0)


def test_adversarial_row_misses():
    img = np.eye(3)
    txt = np.eye(3).copy()
    txt[0] = img[1]  # text 0 matches image 1 exactly, and is orthogonal to image 0
    i2t, t2i = retrieval_recall(img, txt, 1)
    assert i2t == 2 / 3 and t2i == 2 / 3


@given(st.integers(2, 30), st.integers(0, 1000))
@settings(max_examples=40)
def test_recall_at_n_is_one(n, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((n, 4)), rng.standard_normal((n, 4))
    assert retrieval_recall(a, b, n) == (1.0, 1.0)


def test_k_out_of_range():
    e = np.eye(3)
    with pytest.raises(ValueError):
        retrieval_recall(e, e, 4)
    with pytest.raises(ValueError):
        retrieval_recall(e, e, 0)


def test_random_embeddings_recall_null():
    n, d, seeds = 1000, 256, 10
    hits = 0.0
    for s in range(seeds):
        rng = np.random.default_rng(s)
        a = rng.standard_normal((n, d))
        b = rng.standard_normal((n, d))
        hits += retrieval_recall(a, b, 1)[0] * n
    p = 1 / n
    total = n * seeds
    assert abs(hits / total - p) <= 3 * np.sqrt(p * (1 - p) / total)


def test_evaluate_shard_rows(model):
    cfg = SynthConfig(seed=0, count=24)
    shard = Shard(encode_shard(synth_generate(cfg)))
    rows = evaluate_shard(model, shard, PromptSet(default_templates(), cfg.class_names()), mode="direct", ks=(1, 5))
    names = [r[0] for r in rows]
    assert names == ["top1", "i2t_r@1", "t2i_r@1", "i2t_r@5", "t2i_r@5"]
    assert all(0.0 <= v <= 1.0 and n == 24 for _, v, n in rows)
