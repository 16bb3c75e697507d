"""Contrastive objective, training step and staged schedules."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import imagepipe as ip
from . import numerics as nx
from . import textpipe as tp
from .ingest import Batch, iterate_batches, batches_per_epoch
from .model import DualEncoder, load_checkpoint, save_checkpoint

TEXT_CAPACITY = 32
METRIC_FIELDS = ("step", "lr", "loss", "inv_temperature", "samples_seen", "wallclock_ms")


class TrainingAborted(RuntimeError):
    """Non-finite loss or gradient; ``info`` holds the diagnostic dump."""

    def __init__(self, message, info):
        super().__init__(f"{message}: {info}")
        self.info = info


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def clip_loss(logits):
    """Symmetric cross-entropy of an (n, n) logit matrix against its diagonal."""
    if not isinstance(logits, nx.Tensor):
        logits = nx.Tensor(logits)
    n = logits.shape[0]
    if logits.ndim != 2 or logits.shape[1] != n:
        raise nx.ShapeError("clip_loss", logits.shape)
    if n < 2:
        raise ValueError("contrastive loss needs at least 2 pairs")
    targets = np.arange(n)
    i2t = nx.cross_entropy(logits, targets, axis=1)
    t2i = nx.cross_entropy(logits, targets, axis=0)
    return nx.mul(nx.add(i2t, t2i), 0.5)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def scaled_lr(base_lr, batch_size, reference=256):
    """Linear lr scaling: ``base_lr * batch_size / reference``."""
    return base_lr * batch_size / reference


def default_warmup(steps):
    return min(1600, int(0.05 * steps))


@dataclass(frozen=True)
class StageSpec:
    kind: str = "pretrain"
    image_reduction: ip.ImageReduction = ip.ImageReduction()
    text_reduction: tp.TextReduction = tp.TextReduction("truncation", TEXT_CAPACITY)
    samples: int = 0
    batch_size: int = 128
    base_lr: float = 1e-3
    warmup_steps: int | None = None
    resolution: int = 32
    augment: ip.AugmentConfig = ip.AugmentConfig()
    weight_decay: float = 0.2

    def __post_init__(self):
        if self.kind not in ("pretrain", "finetune"):
            raise ValueError(f"unknown stage kind {self.kind!r}")
        if self.base_lr <= 0:
            raise ValueError("stage learning rate must be positive")
        if self.kind == "finetune":
            if self.text_reduction.max_len != TEXT_CAPACITY:
                raise ValueError("finetune stages use the full text length")
            if self.image_reduction.strategy == "resize":
                raise ValueError("finetune stages use full-resolution (optionally masked) images")

    @property
    def steps(self):
        return self.samples // self.batch_size

    @property
    def train_resolution(self):
        return self.image_reduction.resolution(self.resolution)

    def schedule(self):
        warm = default_warmup(self.steps) if self.warmup_steps is None else self.warmup_steps
        return nx.Schedule(self.base_lr, self.steps, min(warm, self.steps), 0.0)

    def image_tokens(self, patch_size):
        grid = (self.resolution // patch_size) ** 2
        return ip.kept_token_count(grid, self.image_reduction, patch_size)

    def text_tokens(self):
        return self.text_reduction.max_len


def finetune_lr(base_lr, preset_name):
    """Fine-tune default: base/20, or base/10 for the small presets."""
    small = preset_name in ("S/16", "B/16", "tiny", "mini")
    return base_lr / (10 if small else 20)


# ---------------------------------------------------------------------------
# state
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    model: DualEncoder
    optimizer: nx.OptimizerState
    seed: int = 0
    step: int = 0
    samples_seen: int = 0
    stage_index: int = 0
    log: list = field(default_factory=list)
    metrics_path: str | None = None
    inv_temperature_override: float | None = None
    vocab: tp.Vocab = None

    @classmethod
    def create(cls, model, seed=0, weight_decay=0.2, vocab=None, metrics_path=None):
        opt = nx.OptimizerState(weight_decay=weight_decay, no_decay=model.no_decay_names())
        state = cls(model, opt, seed=seed, vocab=vocab or tp.default_vocab(), metrics_path=metrics_path)
        if metrics_path:
            with open(metrics_path, "w", newline="") as fh:
                csv.writer(fh).writerow(METRIC_FIELDS)
        return state

    def streams(self, step):
        """Per-step generators; a pure function of (seed, global step)."""
        return {k: nx.rng_stream(self.seed, k, step) for k in ("augment", "mask-image", "mask-text")}

    def record(self, row):
        self.log.append(row)
        if self.metrics_path:
            with open(self.metrics_path, "a", newline="") as fh:
                csv.writer(fh).writerow([row[k] for k in METRIC_FIELDS])


_TOKEN_CACHE: dict = {}


def _tokenize(caption, vocab):
    key = (id(vocab), caption)
    t = _TOKEN_CACHE.get(key)
    if t is None:
        if len(_TOKEN_CACHE) > 200_000:
            _TOKEN_CACHE.clear()
        t = _TOKEN_CACHE[key] = tp.tokenize(caption, vocab, TEXT_CAPACITY)
    return t


# ---------------------------------------------------------------------------
# the step
# ---------------------------------------------------------------------------

def prepare_images(images, spec, model, rng_aug, rng_mask):
    """Augment, resize and mask a uint8 batch -> (patches, flat indices, grid)."""
    p = model.config.vision.patch_size
    res = spec.train_resolution
    views = np.stack([ip.training_view(im, res, spec.augment, rng_aug) for im in images])
    patches = ip.patchify_batch(views, p)
    grid = (res // p, res // p)
    r = spec.image_reduction
    keep = ip.batch_mask_indices(len(images), grid, r, rng_mask)
    if keep.shape[1] != patches.shape[1]:
        patches = np.take_along_axis(patches, keep[:, :, None], axis=1)
    return patches, keep, grid


def prepare_texts(captions, spec, vocab, rng):
    texts = [tp.reduce_text(_tokenize(c, vocab), spec.text_reduction, rng) for c in captions]
    return tp.batch_ids(texts, pad_id=vocab.pad_id)


def forward_loss(model, patches, keep, grid, ids, lengths, inv_temperature=None):
    img = model.image_features(patches, keep, grid)
    txt = model.text_features(ids, lengths)
    return clip_loss(model.logits(img, txt, inv_temperature))


def train_step(state: TrainState, batch: Batch, spec: StageSpec, schedule=None, stage_step=0):
    """One optimisation step on ``batch``; mutates and returns ``state``."""
    t0 = time.perf_counter()
    model = state.model
    rngs = state.streams(state.step)
    patches, keep, grid = prepare_images(batch.images, spec, model, rngs["augment"], rngs["mask-image"])
    ids, lengths = prepare_texts(batch.captions, spec, state.vocab, rngs["mask-text"])

    params = model.params
    with nx.Tape() as tape:
        loss = forward_loss(model, patches, keep, grid, ids, lengths, state.inv_temperature_override)
    value = float(loss.data)
    info = {"step": state.step, "seed": state.seed, "epoch": batch.epoch, "batch_step": batch.step,
            "first_indices": [int(i) for i in batch.indices[:8]]}
    if not math.isfinite(value):
        raise TrainingAborted("non-finite loss", info)
    grads = nx.backward(tape, loss, list(params.values()))
    if not nx.global_finite(grads):
        raise TrainingAborted("non-finite gradient", info)

    schedule = schedule or spec.schedule()
    lr = nx.lr_at_step(stage_step + 1, schedule) if schedule.warmup_steps else nx.lr_at_step(stage_step, schedule)
    nx.adamw_step(state.optimizer, params, dict(zip(params, grads)), lr)
    model.clamp_temperature()

    state.step += 1
    state.samples_seen += len(batch.captions)
    state.record({
        "step": state.step, "lr": lr, "loss": value, "inv_temperature": model.inv_temperature(),
        "samples_seen": state.samples_seen,
        "wallclock_ms": round((time.perf_counter() - t0) * 1000.0, 3),
    })
    return state


def run_stage(state: TrainState, spec: StageSpec, shard, workers=0):
    """Run ``spec.samples // spec.batch_size`` steps with the stage's own schedule."""
    steps = spec.steps
    if steps == 0:
        return state
    state.optimizer.weight_decay = spec.weight_decay
    schedule = spec.schedule()
    data_seed = int(nx.rng_stream(state.seed, "data", state.stage_index).integers(2**31))
    epochs = math.ceil(steps / batches_per_epoch(len(shard), spec.batch_size))
    for i, batch in enumerate(iterate_batches(shard, spec.batch_size, data_seed, epochs=epochs,
                                              workers=workers, max_steps=steps)):
        train_step(state, batch, spec, schedule, i)
    state.stage_index += 1
    return state


def step_seconds(model, spec, images, captions, repeats=3, vocab=None):
    """Median wall-clock of ``repeats`` training steps on a fixed batch (no state kept)."""
    saved = {k: p.data.copy() for k, p in model.params.items()}
    times = []
    try:
        for r in range(repeats):
            state = TrainState.create(model, seed=r, vocab=vocab)
            batch = Batch(images, captions, np.zeros(len(captions), int), np.arange(len(captions)), 0, 0)
            t0 = time.perf_counter()
            train_step(state, batch, replace(spec, samples=max(spec.samples, len(captions))))
            times.append(time.perf_counter() - t0)
    finally:
        model.load_arrays(saved)
    return float(np.median(times))


def save_train_state(path, state: TrainState, extra=None):
    """Checkpoint model, optimizer and the counters the random streams derive from."""
    meta = {"seed": state.seed, "step": state.step, "samples_seen": state.samples_seen,
            "stage_index": state.stage_index, **(extra or {})}
    return save_checkpoint(path, state.model, state.optimizer, meta)


def load_train_state(path, metrics_path=None, vocab=None):
    opt = nx.OptimizerState()
    model, ck = load_checkpoint(path, opt)
    opt.no_decay = model.no_decay_names()
    state = TrainState(model, opt, seed=int(ck.meta.get("seed", 0)), step=int(ck.meta.get("step", 0)),
                       samples_seen=int(ck.meta.get("samples_seen", 0)),
                       stage_index=int(ck.meta.get("stage_index", 0)),
                       vocab=vocab or tp.default_vocab(), metrics_path=metrics_path)
    if metrics_path:
        with open(metrics_path, "w", newline="") as fh:
            csv.writer(fh).writerow(METRIC_FIELDS)
    return state
