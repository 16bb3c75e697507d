"""Pretrain the tiny preset at a quarter of the image tokens, finetune at full
length, and watch zero-shot accuracy on held-out synthetic shapes.

Run: python demos/train_and_probe.py   (about a minute on one core)
"""
import time

import numpy as np

from clipa import imagepipe as ip
from clipa.evaluation import PromptSet, build_classifier, classify, default_templates
from clipa.ingest import Shard, SynthConfig, encode_shard, synth_generate
from clipa.model import DualEncoder, preset
from clipa.textpipe import default_vocab
from clipa.trainer import StageSpec, TrainState, run_stage

train_cfg = SynthConfig(seed=11, count=4000)
shard = Shard(encode_shard(synth_generate(train_cfg)))
held_out = synth_generate(SynthConfig(seed=99, count=600))
images = np.stack([r.image for r in held_out])
labels = np.array([r.class_id for r in held_out])
prompts = PromptSet(default_templates(), train_cfg.class_names())

model = DualEncoder(preset("tiny", vocab_size=len(default_vocab())), seed=0)
state = TrainState.create(model, seed=0)
plain = ip.AugmentConfig(jitter=False, gray=False)


def probe(label):
    acc = classify(images, labels, build_classifier(prompts, model), model, mode="direct")
    print(f"{label:<34} top-1 {acc:.3f}  (chance {1 / train_cfg.n_classes:.3f})")


probe("untrained")
stages = [
    ("pretrain, 16 px -> 5 image tokens", StageSpec("pretrain", ip.ImageReduction.parse("resize:16"),
                                                    samples=12800, batch_size=128, base_lr=1e-3, augment=plain)),
    ("finetune, 32 px -> 17 image tokens", StageSpec("finetune", samples=2560, batch_size=128,
                                                     base_lr=3e-4, augment=plain)),
]
for label, spec in stages:
    t0 = time.perf_counter()
    run_stage(state, spec, shard)
    loss = np.mean([row["loss"] for row in state.log[-10:]])
    print(f"{label}: {spec.steps} steps, final loss {loss:.3f}, {time.perf_counter() - t0:.0f} s")
    probe(f"after {spec.kind}")
