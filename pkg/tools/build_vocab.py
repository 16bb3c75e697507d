"""Regenerate the bundled WordPiece vocabulary.

Corpus: every lexicon word, the default prompt templates and captions from
a few thousand synthetic records, plus printable ASCII so any input can be
spelled.  Run from the repo root::

    python tools/build_vocab.py
"""

import string
from collections import Counter
from pathlib import Path

from clipa import ingest, textpipe

DATA = Path(__file__).resolve().parents[1] / "src" / "clipa" / "data"


def corpus_counts(n_captions=4000):
    counts = Counter()
    lex = textpipe.Lexicon.load(DATA / "lexicon.tsv")
    for w in lex.table:
        counts[w] += 1
    for line in (DATA / "prompts.txt").read_text().splitlines():
        counts.update(textpipe.normalize(line.replace("{}", "")).split())
    cfg = ingest.SynthConfig(seed=0, count=n_captions, shapes=ingest.SHAPES,
                             colors=tuple(ingest.PALETTE))
    for i in range(n_captions):
        counts.update(textpipe.normalize(ingest.synth_record(cfg, i).caption).split())
    for ch in string.ascii_lowercase + string.digits + string.punctuation:
        counts[ch] += 1
    return counts


def main():
    vocab = textpipe.train_wordpiece(corpus_counts(), size=8000)
    vocab.save(DATA / "vocab.txt")
    print(f"wrote {len(vocab)} tokens")


if __name__ == "__main__":
    main()
