"""Zero-shot classification and cross-modal retrieval."""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources

import numpy as np

from . import imagepipe as ip
from . import textpipe as tp


@dataclass(frozen=True)
class PromptSet:
    templates: tuple
    classnames: tuple

    def __post_init__(self):
        object.__setattr__(self, "templates", tuple(self.templates))
        object.__setattr__(self, "classnames", tuple(self.classnames))
        if not self.templates:
            raise ValueError("need at least one prompt template")
        bad = [t for t in self.templates if t.count("{}") != 1]
        if bad:
            raise ValueError(f"templates must contain exactly one '{{}}': {bad}")
        if not self.classnames:
            raise ValueError("empty class list")

    def prompts(self, c):
        return [t.format(self.classnames[c]) for t in self.templates]


def parse_templates(text):
    return tuple(line.strip() for line in text.splitlines() if line.strip() and not line.startswith("#"))


def load_templates(path):
    with open(path, encoding="utf-8") as fh:
        return parse_templates(fh.read())


def default_templates():
    return parse_templates(resources.files("clipa.data").joinpath("prompts.txt").read_text("utf-8"))


@dataclass(frozen=True)
class ZeroShotClassifier:
    weights: np.ndarray   # (C, d), unit rows
    classnames: tuple = ()

    @property
    def n_classes(self):
        return self.weights.shape[0]


def _unit(x, axis=-1):
    return x / np.linalg.norm(x, axis=axis, keepdims=True)


def encode_texts(model, captions, vocab=None, batch_size=256):
    """(N, d) unit text embeddings, full text capacity, no reduction."""
    vocab = vocab or tp.default_vocab()
    cap = model.config.text.max_len
    out = []
    for s in range(0, len(captions), batch_size):
        toks = [tp.tokenize(c, vocab, cap) for c in captions[s:s + batch_size]]
        ids, lengths = tp.batch_ids(toks, pad_id=vocab.pad_id)
        out.append(model.text_features(ids, lengths).data)
    return np.concatenate(out).astype(np.float64)


def build_classifier(prompts: PromptSet, model, vocab=None):
    """Mean of per-template embeddings for each class, re-normalised.

    Duplicate templates are counted once so the result does not depend on
    template order or repetition.
    """
    templates = tuple(dict.fromkeys(prompts.templates))
    uniq = PromptSet(templates, prompts.classnames)
    texts = [p for c in range(len(uniq.classnames)) for p in uniq.prompts(c)]
    emb = encode_texts(model, texts, vocab)
    emb = emb.reshape(len(uniq.classnames), len(templates), -1).mean(axis=1)
    return ZeroShotClassifier(_unit(emb), uniq.classnames)


def encode_images(model, images, res=None, mode="crop", batch_size=256):
    """(N, d) unit image embeddings of uint8 images after the eval transform."""
    p = model.config.vision.patch_size
    res = res or model.config.image_size
    grid = (res // p, res // p)
    flat = np.arange(grid[0] * grid[1])
    out = []
    for s in range(0, len(images), batch_size):
        views = np.stack([ip.standardize(ip.eval_preprocess(im, res, mode)) for im in images[s:s + batch_size]])
        patches = ip.patchify_batch(views, p)
        keep = np.broadcast_to(flat, patches.shape[:2])
        out.append(model.image_features(patches, keep, grid).data)
    return np.concatenate(out).astype(np.float64)


def predict(img_embs, classifier):
    """Arg-max class per row; ties go to the lowest class id."""
    logits = np.asarray(img_embs) @ classifier.weights.T
    return np.argmax(logits, axis=1)


def accuracy(img_embs, labels, classifier):
    labels = np.asarray(labels)
    if len(labels) == 0:
        return 0.0
    return float(np.mean(predict(img_embs, classifier) == labels))


def classify(images, labels, classifier, model, res=None, mode="crop"):
    """Top-1 zero-shot accuracy on uint8 ``images``."""
    return accuracy(encode_images(model, images, res, mode), labels, classifier)


def _ranks(sim):
    """Rank of the diagonal entry in each row; equal scores rank by column index."""
    diag = np.diag(sim)[:, None]
    n = sim.shape[0]
    ahead = (sim > diag) | ((sim == diag) & (np.arange(n)[None, :] < np.arange(n)[:, None]))
    return ahead.sum(axis=1)


def retrieval_recall(img_embs, txt_embs, k=1):
    """(image->text R@k, text->image R@k) where row i of each is a pair."""
    img_embs = np.asarray(img_embs)
    txt_embs = np.asarray(txt_embs)
    n = len(img_embs)
    if txt_embs.shape != img_embs.shape:
        raise ValueError(f"embedding shapes differ: {img_embs.shape} vs {txt_embs.shape}")
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must be in [1, {n}]")
    sim = img_embs @ txt_embs.T
    i2t = float(np.mean(_ranks(sim) < k))
    t2i = float(np.mean(_ranks(sim.T) < k))
    return i2t, t2i


def evaluate_shard(model, shard, prompts=None, res=None, mode="crop", vocab=None, ks=(1,)):
    """Zero-shot accuracy plus retrieval recalls on every record of ``shard``.

    Returns rows of (metric, value, n).
    """
    images = np.stack([shard.image(i) for i in range(len(shard))])
    labels = shard.class_ids()
    img = encode_images(model, images, res, mode)
    rows = []
    if prompts is not None:
        clf = build_classifier(prompts, model, vocab)
        rows.append(("top1", accuracy(img, labels, clf), len(labels)))
    txt = encode_texts(model, [shard.caption(i) for i in range(len(shard))], vocab)
    for k in ks:
        if k <= len(img):
            i2t, t2i = retrieval_recall(img, txt, k)
            rows.append((f"i2t_r@{k}", i2t, len(img)))
            rows.append((f"t2i_r@{k}", t2i, len(img)))
    return rows
