"""WordPiece tokenization, lexicon POS tags and text token reduction."""

from __future__ import annotations

import re
import unicodedata
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import numpy as np

NOUN, ADJ, OTHER, SPECIAL = "NOUN", "ADJ", "OTHER", "SPECIAL"
TAGS = (NOUN, ADJ, OTHER, SPECIAL)
TEXT_STRATEGIES = ("truncation", "random", "block", "syntax")

VOCAB_MAGIC = "#clipa-wordpiece-vocab"


class VocabError(ValueError):
    pass


class Vocab:
    """Token list where the line index is the id.

    File format: a 4-line header (magic with the continuation prefix, then
    ``pad=``, ``cls=``, ``unk=`` naming the special tokens) followed by one
    token per line.
    """

    def __init__(self, tokens, pad="[PAD]", cls="[CLS]", unk="[UNK]", prefix="##"):
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise VocabError("duplicate tokens in vocabulary")
        for s in (pad, cls, unk):
            if s not in self.index:
                raise VocabError(f"special token {s!r} missing")
        self.pad, self.cls, self.unk, self.prefix = pad, cls, unk, prefix
        self.pad_id, self.cls_id, self.unk_id = self.index[pad], self.index[cls], self.index[unk]
        if len({self.pad_id, self.cls_id, self.unk_id}) != 3:
            raise VocabError("special ids must be distinct")

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def id(self, token):
        return self.index.get(token, self.unk_id)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.parse(fh.read())

    @classmethod
    def parse(cls, text):
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if len(lines) < 4 or not lines[0].startswith(VOCAB_MAGIC):
            raise VocabError("missing vocabulary header")
        prefix = lines[0].split("continuation=", 1)[1].strip() if "continuation=" in lines[0] else "##"
        specials = {}
        for line in lines[1:4]:
            k, _, v = line.partition("=")
            specials[k.strip()] = v.strip()
        return cls(lines[4:], pad=specials["pad"], cls=specials["cls"], unk=specials["unk"], prefix=prefix)

    def dumps(self):
        head = [f"{VOCAB_MAGIC} continuation={self.prefix}", f"pad={self.pad}",
                f"cls={self.cls}", f"unk={self.unk}"]
        return "\n".join(head + self.tokens) + "\n"

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())


@lru_cache(maxsize=1)
def default_vocab():
    return Vocab.parse(resources.files("clipa.data").joinpath("vocab.txt").read_text("utf-8"))


# ---------------------------------------------------------------------------
# lexicon and tagging
# ---------------------------------------------------------------------------

class Lexicon:
    """``word -> tag`` table plus suffix fallbacks."""

    NOUN_SUFFIXES = ("tion", "sion", "ment", "ness", "ity", "ism", "ship", "hood", "ance", "ence")
    ADJ_SUFFIXES = ("ous", "ful", "ive", "able", "ible", "less", "ish", "ic", "al", "ary")

    def __init__(self, table):
        self.table = dict(table)

    @classmethod
    def parse(cls, text):
        table = {}
        for line in text.splitlines():
            if not line.strip() or line.startswith("#"):
                continue
            word, tag = line.split("\t")
            if tag not in (NOUN, ADJ, OTHER):
                raise ValueError(f"bad tag {tag!r} for {word!r}")
            table[word] = tag
        return cls(table)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.parse(fh.read())

    def tag_word(self, word):
        tag = self.table.get(word)
        if tag is not None:
            return tag
        if word.isalpha() and len(word) > 4:
            if word.endswith(self.NOUN_SUFFIXES):
                return NOUN
            if word.endswith(self.ADJ_SUFFIXES):
                return ADJ
        return OTHER


@lru_cache(maxsize=1)
def default_lexicon():
    return Lexicon.parse(resources.files("clipa.data").joinpath("lexicon.tsv").read_text("utf-8"))


def pos_tag(tokens, lexicon=None, prefix="##", specials=("[CLS]", "[PAD]", "[UNK]")):
    """Tag each wordpiece; continuation pieces take their head word's tag."""
    lexicon = lexicon or default_lexicon()
    tags = [None] * len(tokens)
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if tok in specials:
            tags[i] = SPECIAL if tok == specials[0] else OTHER
            i += 1
            continue
        j = i + 1
        while j < len(tokens) and tokens[j].startswith(prefix):
            j += 1
        word = tok + "".join(t[len(prefix):] for t in tokens[i + 1:j])
        tag = lexicon.tag_word(word)
        for k in range(i, j):
            tags[k] = tag
        i = j
    return tags


# ---------------------------------------------------------------------------
# tokenizer
# ---------------------------------------------------------------------------

_PUNCT = re.compile(r"([^\w\s])")


def normalize(text):
    text = unicodedata.normalize("NFKD", text.lower())
    text = "".join(c for c in text if not unicodedata.combining(c))
    return " ".join(_PUNCT.sub(r" \1 ", text).split())


def wordpiece(word, vocab, max_chars=100):
    """Greedy longest-match-first split of one word; ``[UNK]`` if impossible."""
    if len(word) > max_chars:
        return [vocab.unk]
    pieces, start = [], 0
    while start < len(word):
        end = len(word)
        cur = None
        while start < end:
            sub = word[start:end]
            if start > 0:
                sub = vocab.prefix + sub
            if sub in vocab.index:
                cur = sub
                break
            end -= 1
        if cur is None:
            return [vocab.unk]
        pieces.append(cur)
        start = end
    return pieces


@dataclass(frozen=True)
class TokenizedText:
    ids: np.ndarray          # (capacity,) int, PAD-filled past true_length
    pos_tags: tuple          # length == true_length
    true_length: int
    pad_id: int = 0

    @property
    def capacity(self):
        return len(self.ids)

    def content_ids(self):
        return self.ids[1:self.true_length]


def tokenize(caption, vocab=None, max_len=32, lexicon=None):
    """[CLS] + wordpieces of the normalized caption, truncated then PAD-filled."""
    vocab = vocab or default_vocab()
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    pieces = [p for w in normalize(caption).split() for p in wordpiece(w, vocab)]
    pieces = [vocab.cls] + pieces
    tags = pos_tag(pieces, lexicon, vocab.prefix, (vocab.cls, vocab.pad, vocab.unk))[:max_len]
    pieces = pieces[:max_len]
    ids = np.full(max_len, vocab.pad_id, dtype=np.int64)
    ids[:len(pieces)] = [vocab.index.get(p, vocab.unk_id) for p in pieces]
    return TokenizedText(ids, tuple(tags), len(pieces), vocab.pad_id)


def detokenize(t, vocab=None):
    vocab = vocab or default_vocab()
    words = []
    for i in t.ids[1:t.true_length]:
        tok = vocab.tokens[int(i)]
        if tok.startswith(vocab.prefix) and words:
            words[-1] += tok[len(vocab.prefix):]
        else:
            words.append(tok)
    return " ".join(words)


# ---------------------------------------------------------------------------
# reduction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TextReduction:
    strategy: str = "truncation"
    max_len: int = 32

    def __post_init__(self):
        if self.strategy not in TEXT_STRATEGIES:
            raise ValueError(f"unknown text strategy {self.strategy!r}")
        if self.max_len < 2:
            raise ValueError("max_len must leave room for CLS and one content token")

    @classmethod
    def parse(cls, spec):
        """``"syntax:8"`` -> TextReduction("syntax", 8)."""
        name, _, n = spec.partition(":")
        return cls(name, int(n) if n else 32)


_PRIORITY = {NOUN: 0, ADJ: 1, OTHER: 2, SPECIAL: 3}


def select_content(tags, budget, strategy, rng):
    """Positions (1-based, ascending) of content tokens to keep.

    ``tags`` covers the whole sequence including CLS at position 0;
    ``budget`` counts content tokens only.
    """
    n = len(tags) - 1
    if budget >= n:
        return np.arange(1, n + 1)
    if strategy == "truncation":
        return np.arange(1, budget + 1)
    if strategy == "random":
        return np.sort(rng.choice(n, size=budget, replace=False)) + 1
    if strategy == "block":
        start = int(rng.integers(0, n - budget + 1))
        return np.arange(start + 1, start + budget + 1)
    if strategy == "syntax":
        order = sorted(range(1, n + 1), key=lambda i: (_PRIORITY[tags[i]], i))
        return np.sort(np.asarray(order[:budget]))
    raise ValueError(strategy)


def reduce_text(t: TokenizedText, r: TextReduction, rng=None) -> TokenizedText:
    """Keep at most ``r.max_len`` tokens (CLS included), re-packed from position 0."""
    if r.max_len > t.capacity:
        raise ValueError(f"reduction length {r.max_len} exceeds capacity {t.capacity}")
    if t.true_length <= r.max_len:
        return t
    keep = select_content(t.pos_tags, r.max_len - 1, r.strategy, rng)
    pos = np.concatenate([[0], keep])
    ids = np.full(t.capacity, t.pad_id, dtype=t.ids.dtype)
    ids[:len(pos)] = t.ids[pos]
    return TokenizedText(ids, tuple(t.pos_tags[i] for i in pos), len(pos), t.pad_id)


def batch_ids(texts, length=None, pad_id=0):
    """Stack reduced texts into (B, L) ids and (B,) lengths, trimming shared padding."""
    lengths = np.array([t.true_length for t in texts], dtype=np.int64)
    L = int(lengths.max()) if length is None else length
    ids = np.full((len(texts), L), pad_id, dtype=np.int64)
    for i, t in enumerate(texts):
        ids[i, :t.true_length] = t.ids[:t.true_length]
    return ids, lengths


# ---------------------------------------------------------------------------
# vocabulary training
# ---------------------------------------------------------------------------

def train_wordpiece(word_counts, size, specials=("[PAD]", "[CLS]", "[UNK]"), prefix="##"):
    """Learn a WordPiece vocabulary by likelihood-scored pair merges.

    Each merge joins the adjacent symbol pair maximising
    ``count(ab) / (count(a) * count(b))``; stops at ``size`` or when every
    word is a single symbol.
    """
    words = {w: c for w, c in word_counts.items() if w}
    splits = {w: [w[0]] + [prefix + ch for ch in w[1:]] for w in words}
    vocab = list(specials)
    seen = set(vocab)
    for w in sorted(words):
        for s in splits[w]:
            if s not in seen:
                seen.add(s)
                vocab.append(s)
    while len(vocab) < size:
        sym = Counter()
        pair = Counter()
        for w, c in words.items():
            parts = splits[w]
            for p in parts:
                sym[p] += c
            for a, b in zip(parts, parts[1:]):
                pair[a, b] += c
        if not pair:
            break
        (a, b) = max(pair, key=lambda ab: (pair[ab] / (sym[ab[0]] * sym[ab[1]]), pair[ab], ab))
        merged = a + (b[len(prefix):] if b.startswith(prefix) else b)
        for w in words:
            parts = splits[w]
            if len(parts) < 2:
                continue
            out, i = [], 0
            while i < len(parts):
                if i + 1 < len(parts) and parts[i] == a and parts[i + 1] == b:
                    out.append(merged)
                    i += 2
                else:
                    out.append(parts[i])
                    i += 1
            splits[w] = out
        if merged not in seen:
            seen.add(merged)
            vocab.append(merged)
    return Vocab(vocab, pad=specials[0], cls=specials[1], unk=specials[2], prefix=prefix)
