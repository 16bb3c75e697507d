import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clipa import textpipe as tp
from clipa.textpipe import ADJ, NOUN, OTHER, SPECIAL, TextReduction, reduce_text, tokenize

V = tp.default_vocab()
WORDS = ["a", "red", "circle", "near", "the", "blue", "square", "small", "green", "triangle",
         "on", "dark", "background", "with", "bright", "shape", "large", "yellow"]


def _caption(n, seed=0):
    rng = np.random.default_rng(seed)
    return " ".join(rng.choice(WORDS, n))


# -- vocabulary and tokenizer -------------------------------------------------------

def test_vocab_ids_dense_and_specials_distinct():
    assert sorted(V.index.values()) == list(range(len(V)))
    assert len({V.pad_id, V.cls_id, V.unk_id}) == 3


def test_vocab_file_round_trip(tmp_path):
    path = tmp_path / "v.txt"
    V.save(path)
    back = tp.Vocab.load(path)
    assert back.tokens == V.tokens and back.prefix == V.prefix and back.cls_id == V.cls_id


def test_vocab_rejects_missing_header():
    with pytest.raises(tp.VocabError):
        tp.Vocab.parse("[PAD]\n[CLS]\n[UNK]\n")


def test_empty_caption_is_cls_only():
    t = tokenize("   ", V, 32)
    assert t.true_length == 1 and t.ids[0] == V.cls_id
    assert (t.ids[1:] == V.pad_id).all()


def test_tokenize_detokenize_fixpoint():
    s = "A Red circle,  near the BLUE square"
    t = tokenize(s, V)
    assert np.array_equal(tokenize(tp.detokenize(t, V), V).ids, t.ids)


def test_long_caption_truncated_to_capacity():
    words = _caption(40).split()
    t = tokenize(" ".join(words), V, 32)
    assert t.true_length == 32
    full = tokenize(" ".join(words), V, 64)
    np.testing.assert_array_equal(t.ids, full.ids[:32])


def test_unknown_characters_become_unk():
    t = tokenize("red ☃ circle", V)
    assert V.unk_id in t.ids[:t.true_length]


def test_wordpiece_greedy_longest_match():
    v = tp.Vocab(["[PAD]", "[CLS]", "[UNK]", "un", "unaff", "##aff", "##able", "##a"])
    assert tp.wordpiece("unaffable", v) == ["unaff", "##able"]
    assert tp.wordpiece("xyz", v) == ["[UNK]"]


def test_tokenized_text_invariants():
    t = tokenize(_caption(12), V, 32)
    assert t.ids[0] == V.cls_id
    assert (t.ids[t.true_length:] == V.pad_id).all()
    assert len(t.pos_tags) == t.true_length


def test_train_wordpiece_covers_training_words():
    v = tp.train_wordpiece({"circle": 5, "circles": 2, "square": 3}, 40)
    for w in ("circle", "circles", "square"):
        assert v.unk not in tp.wordpiece(w, v)


# -- tagging -----------------------------------------------------------------------

def test_pos_examples():
    assert tokenize("red circle", V).pos_tags == (SPECIAL, ADJ, NOUN)
    assert tp.pos_tag(["the"]) == [OTHER]
    assert tp.pos_tag(["[CLS]"]) == [SPECIAL]


def test_continuation_pieces_inherit_head_tag():
    lex = tp.Lexicon({"circle": NOUN})
    assert tp.pos_tag(["cir", "##cle"], lex) == [NOUN, NOUN]


def test_suffix_fallback_and_unknown():
    lex = tp.Lexicon({})
    assert lex.tag_word("happiness") == NOUN
    assert lex.tag_word("wonderful") == ADJ
    assert lex.tag_word("zq") == OTHER


# -- reduction ---------------------------------------------------------------------

def test_truncation_keeps_first_tokens():
    t = tokenize(_caption(19), V, 32)
    assert t.true_length == 20
    out = reduce_text(t, TextReduction("truncation", 8))
    np.testing.assert_array_equal(out.ids[:8], t.ids[:8])
    assert out.true_length == 8


@pytest.mark.parametrize("strategy", tp.TEXT_STRATEGIES)
def test_budget_at_least_length_is_identity(strategy):
    t = tokenize("a red circle", V)
    assert reduce_text(t, TextReduction(strategy, t.true_length), np.random.default_rng(0)) is t


def _brute_force_syntax(tags, budget):
    # best subset = lexicographically smallest sorted (priority, position) key
    rank = {NOUN: 0, ADJ: 1, OTHER: 2}
    subsets = itertools.combinations(range(1, len(tags)), budget)
    return min(subsets, key=lambda c: sorted((rank[tags[i]], i) for i in c))


def test_syntax_example():
    t = tokenize("a red circle near a blue square", V)
    out = reduce_text(t, TextReduction("syntax", 4))
    kept = [V.tokens[i] for i in out.ids[1:out.true_length]]
    assert kept == ["red", "circle", "square"]
    assert kept == [V.tokens[t.ids[i]] for i in _brute_force_syntax(t.pos_tags, 3)]


def test_max_len_below_two_rejected():
    with pytest.raises(ValueError):
        TextReduction("truncation", 1)


def test_parse_reduction():
    assert TextReduction.parse("syntax:6") == TextReduction("syntax", 6)
    assert TextReduction.parse("block") == TextReduction("block", 32)


def _is_subsequence(small, big):
    it = iter(big)
    return all(x in it for x in small)


@given(st.sampled_from(tp.TEXT_STRATEGIES), st.integers(2, 32), st.integers(1, 40), st.integers(0, 2**32 - 1))
@settings(max_examples=200, deadline=None)
def test_reduction_subsequence_property(strategy, budget, n_words, seed):
    t = tokenize(_caption(n_words, seed % 1000), V, 32)
    out = reduce_text(t, TextReduction(strategy, budget), np.random.default_rng(seed))
    kept = out.ids[:out.true_length].tolist()
    assert kept[0] == V.cls_id
    assert out.true_length == min(t.true_length, budget)
    assert _is_subsequence(kept, t.ids[:t.true_length].tolist())
    assert (out.ids[out.true_length:] == V.pad_id).all()


def test_block_is_one_contiguous_run_and_covers_all_starts():
    t = tokenize("one two three four five six", V)  # 6 content pieces
    n = t.true_length - 1
    budget = 3
    starts = set()
    for seed in range(10_000):
        pos = tp.select_content(t.pos_tags, budget - 1, "block", np.random.default_rng(seed))
        assert np.all(np.diff(pos) == 1)
        starts.add(int(pos[0]))
    assert starts == set(range(1, n - (budget - 1) + 2))


@given(st.integers(2, 12), st.integers(3, 30), st.integers(0, 10_000))
@settings(max_examples=200, deadline=None)
def test_syntax_dominance(budget, n_words, seed):
    t = tokenize(_caption(n_words, seed), V, 32)
    pos = set(tp.select_content(t.pos_tags, budget - 1, "syntax", None).tolist())
    content = range(1, t.true_length)
    dropped = {t.pos_tags[i] for i in content if i not in pos}
    kept = {t.pos_tags[i] for i in pos}
    if NOUN in dropped:
        assert kept <= {NOUN}
    if ADJ in dropped:
        assert OTHER not in kept


def test_random_marginals_uniform():
    t = tokenize(_caption(9, 3), V, 32)
    n = t.true_length - 1
    budget = 5
    trials = 10_000
    counts = np.zeros(n + 1)
    for seed in range(trials):
        counts[tp.select_content(t.pos_tags, budget - 1, "random", np.random.default_rng(seed))] += 1
    p = (budget - 1) / n
    sigma = np.sqrt(p * (1 - p) / trials)
    assert np.all(np.abs(counts[1:] / trials - p) <= 3 * sigma + 1e-12)
