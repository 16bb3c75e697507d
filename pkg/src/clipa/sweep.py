"""Token-length sweeps, performance-drop curves and the compute ledger."""

from __future__ import annotations

import csv
import fcntl
import json
import math
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import imagepipe as ip
from . import textpipe as tp
from .evaluation import PromptSet, default_templates, evaluate_shard, load_templates
from .ingest import Shard, SynthConfig
from .model import DualEncoder, flops_estimate, preset
from .trainer import StageSpec, TEXT_CAPACITY, TrainState, finetune_lr, run_stage

COMPUTE_UNIT = 1e12


# ---------------------------------------------------------------------------
# published reference numbers (ImageNet-1k zero-shot top-1, %)
# ---------------------------------------------------------------------------

# (strategy, setting, image tokens, {model: (pre-train, fine-tune)})
IMAGE_TOKEN_TABLE = (
    ("baseline", "0%", 197, {"S/16": (None, 56.7), "B/16": (None, 64.2), "L/16": (None, 69.2)}),
    ("random", "50%", 99, {"S/16": (54.7, 55.5), "B/16": (61.9, 62.6), "L/16": (68.3, 68.5)}),
    ("grid", "50%", 99, {"S/16": (53.9, 54.6), "B/16": (62.5, 62.8), "L/16": (68.3, 68.5)}),
    ("block", "50%", 99, {"S/16": (54.9, 55.6), "B/16": (63.2, 63.5), "L/16": (69.2, 69.5)}),
    ("resize", "160", 101, {"S/16": (54.0, 56.0), "B/16": (62.2, 63.6), "L/16": (67.8, 69.0)}),
    ("random", "75%", 50, {"S/16": (49.5, 52.7), "B/16": (58.51, 60.9), "L/16": (65.9, 67.6)}),
    ("grid", "75%", 50, {"S/16": (49.5, 53.1), "B/16": (57.9, 60.7), "L/16": (65.4, 67.3)}),
    ("block", "75%", 50, {"S/16": (45.2, 53.4), "B/16": (57.3, 61.4), "L/16": (65.2, 68.5)}),
    ("resize", "112", 50, {"S/16": (50.1, 54.7), "B/16": (59.0, 62.9), "L/16": (65.1, 68.9)}),
    ("random", "81.6%", 37, {"S/16": (47.3, 51.6), "B/16": (55.3, 58.9), "L/16": (64.1, 66.3)}),
    ("block", "81.6%", 37, {"S/16": (43.6, 51.7), "B/16": (54.8, 60.7), "L/16": (63.1, 67.6)}),
    ("resize", "96", 37, {"S/16": (48.3, 53.9), "B/16": (57.0, 62.1), "L/16": (63.8, 68.1)}),
    ("random", "91.8%", 17, {"S/16": (36.4, 47.5), "B/16": (44.2, 55.3), "L/16": (55.3, 62.4)}),
    ("block", "91.8%", 17, {"S/16": (28.4, 46.8), "B/16": (38.3, 55.3), "L/16": (49.6, 62.9)}),
    ("resize", "64", 17, {"S/16": (40.7, 50.5), "B/16": (51.0, 59.9), "L/16": (58.3, 66.2)}),
)

# Text reduction at a fixed 112px image: (strategy, text tokens, {model: (pre-train, fine-tune)}).
TEXT_TOKEN_TABLE = (
    ("truncation", 32, {"S/16": (50.1, 54.7), "B/16": (59.0, 62.9), "L/16": (65.1, 68.9)}),
    ("random", 32, {"S/16": (50.0, 54.8), "B/16": (59.1, 62.6), "L/16": (65.3, 68.6)}),
    ("block", 32, {"S/16": (50.4, 54.6), "B/16": (59.1, 62.9), "L/16": (65.2, 68.7)}),
    ("syntax", 32, {"S/16": (50.1, 54.9), "B/16": (58.7, 62.6), "L/16": (65.0, 68.3)}),
    ("truncation", 16, {"S/16": (50.6, 55.1), "B/16": (58.7, 62.4), "L/16": (65.4, 68.8)}),
    ("random", 16, {"S/16": (49.8, 54.5), "B/16": (58.4, 62.2), "L/16": (65.1, 68.5)}),
    ("block", 16, {"S/16": (50.1, 54.5), "B/16": (59.1, 63.2), "L/16": (65.3, 68.7)}),
    ("syntax", 16, {"S/16": (50.2, 54.7), "B/16": (58.9, 63.0), "L/16": (65.3, 68.8)}),
    ("truncation", 8, {"S/16": (45.7, 54.2), "B/16": (54.7, 62.2), "L/16": (62.2, 68.2)}),
    ("random", 8, {"S/16": (44.5, 53.2), "B/16": (54.2, 61.5), "L/16": (61.6, 67.8)}),
    ("block", 8, {"S/16": (45.4, 54.1), "B/16": (54.0, 62.1), "L/16": (61.6, 68.2)}),
    ("syntax", 8, {"S/16": (46.7, 54.6), "B/16": (55.6, 62.9), "L/16": (62.3, 69.0)}),
    ("truncation", 6, {"S/16": (30.9, 52.9), "B/16": (39.0, 60.8), "L/16": (47.9, 67.1)}),
    ("random", 6, {"S/16": (29.9, 52.1), "B/16": (38.4, 59.7), "L/16": (48.0, 66.8)}),
    ("block", 6, {"S/16": (29.3, 52.9), "B/16": (38.3, 61.0), "L/16": (46.8, 67.8)}),
    ("syntax", 6, {"S/16": (31.1, 53.7), "B/16": (39.7, 61.8), "L/16": (49.3, 68.4)}),
    ("truncation", 4, {"S/16": (24.1, 49.0), "B/16": (32.6, 57.7), "L/16": (40.4, 63.6)}),
    ("random", 4, {"S/16": (22.0, 48.9), "B/16": (29.3, 57.1), "L/16": (39.6, 63.6)}),
    ("block", 4, {"S/16": (24.0, 50.3), "B/16": (31.5, 58.8), "L/16": (39.6, 65.8)}),
    ("syntax", 4, {"S/16": (24.7, 51.5), "B/16": (32.2, 59.6), "L/16": (39.6, 66.3)}),
)


def _stage_col(stage):
    return {"pre-train": 0, "fine-tune": 1}[stage]


def reference_image_curve(model, strategy="resize", stage="fine-tune"):
    """{image tokens: accuracy} for one model/strategy, baseline included."""
    col = _stage_col(stage)
    curve = {}
    for strat, _, tokens, vals in IMAGE_TOKEN_TABLE:
        if strat in ("baseline", strategy):
            v = vals[model][col] if strat != "baseline" else vals[model][1]
            curve[tokens] = v
    return curve


def reference_text_curve(model, strategy="syntax", stage="fine-tune"):
    """{text tokens: accuracy}; the 32-token truncation row is the baseline."""
    col = _stage_col(stage)
    curve = {32: next(v[model][col] for s, n, v in TEXT_TOKEN_TABLE if s == "truncation" and n == 32)}
    for strat, tokens, vals in TEXT_TOKEN_TABLE:
        if strat == strategy and tokens != 32:
            curve[tokens] = vals[model][col]
    return curve


# ---------------------------------------------------------------------------
# drop metrics
# ---------------------------------------------------------------------------

def performance_drop(baseline, reduced):
    """Points lost relative to the baseline (negative when the reduced run is better)."""
    return baseline - reduced


def drop_curve(curve, baseline_tokens=None):
    """{tokens: metric} -> {tokens: drop}, measured against the longest sequence."""
    if not curve:
        raise ValueError("empty curve")
    base = max(curve) if baseline_tokens is None else baseline_tokens
    return {t: performance_drop(curve[base], v) for t, v in curve.items()}


def min_tokens_within_drop(drops, threshold=1.0):
    """Smallest token length whose drop is at most ``threshold``.

    ``drops`` maps token length -> drop and must contain the baseline (the
    largest length); if nothing qualifies the baseline length is returned.
    """
    if not drops:
        raise ValueError("empty curve")
    ok = [t for t, d in drops.items() if d <= threshold]
    return min(ok) if ok else max(drops)


# ---------------------------------------------------------------------------
# compute ledger
# ---------------------------------------------------------------------------

@dataclass
class LedgerEntry:
    samples: float
    image_tokens: int
    text_tokens: int
    gflops_per_sample: float

    @property
    def gflops(self):
        return self.samples * self.gflops_per_sample


@dataclass
class ComputeLedger:
    """Per-stage ``GFLOPs x samples`` for one model."""

    config: object
    entries: list = field(default_factory=list)

    def add(self, samples, image_tokens, text_tokens):
        g = flops_estimate(self.config, image_tokens, text_tokens)
        self.entries.append(LedgerEntry(samples, image_tokens, text_tokens, g))
        return self

    @property
    def total_gflops(self):
        return float(sum(e.gflops for e in self.entries))

    @property
    def total(self):
        """Total in units of 1e12 GFLOPs."""
        return self.total_gflops / COMPUTE_UNIT


def compute_cost(cfg, schedule):
    """Sum of ``samples * GFLOPs/sample`` over ``(samples, img tokens, txt tokens)`` stages, in 1e12 units."""
    ledger = ComputeLedger(cfg)
    for samples, n_img, n_txt in schedule:
        ledger.add(samples, n_img, n_txt)
    return ledger.total


def _cost(spec):
    cfg, rest = spec[0], spec[1:]
    if len(rest) == 1:  # a schedule
        return compute_cost(cfg, rest[0])
    return flops_estimate(cfg, *rest)


def speedup_ratio(a, b):
    """How many times cheaper ``b`` is than ``a``.

    Each side is ``(cfg, img_tokens, txt_tokens)`` for per-sample compute or
    ``(cfg, schedule)`` for a whole training schedule.
    """
    return _cost(a) / _cost(b)


def masked_tokens(image_size, patch, ratio):
    n = (image_size // patch) ** 2
    return ip.kept_token_count(n, ip.ImageReduction("random_mask", ratio))


def table2_schedules():
    """Training-compute rows of the large-scale comparison: name -> (preset, schedule, published)."""
    h, g = preset("H/14"), preset("G/14")
    full_h = (224 // 14) ** 2 + 1
    at84 = (84 // 14) ** 2 + 1
    g_ft224 = masked_tokens(224, 14, 0.3)
    g_ft336 = masked_tokens(336, 14, 0.4)
    return {
        "OpenCLIP-H/14": (h, [(32e9, full_h, 32)], 5.7),
        "FLIP-H/14": (h, [(25.6e9, masked_tokens(224, 14, 0.5), 32), (128e6, full_h, 32)], 2.4),
        "CLIPA-H/14": (h, [(12.8e9, at84, 8), (128e6, full_h, 32)], 0.4),
        "CLIPA-G/14": (g, [(12.8e9, at84, 8), (512e6, g_ft224, 32)], 0.8),
        "CLIPA-G/14 +336": (g, [(12.8e9, at84, 8), (512e6, g_ft224, 32), (128e6, g_ft336, 32)], 0.9),
    }


# ---------------------------------------------------------------------------
# sweep grid
# ---------------------------------------------------------------------------

def _tuple(v, conv=str):
    if isinstance(v, str):
        v = [x.strip() for x in v.split(",") if x.strip()]
    return tuple(conv(x) for x in v)


@dataclass(frozen=True)
class SweepGrid:
    models: tuple = ("tiny", "mini")
    image_reductions: tuple = ("none", "resize:16")
    text_reductions: tuple = ("truncation:32",)
    seeds: tuple = (0,)
    pretrain_samples: int = 12800
    finetune_samples: int = 2560
    batch_size: int = 128
    lr: float = 2e-3
    finetune_lr: float | None = None
    finetune_mask: float = 0.0
    warmup_steps: int | None = None
    image_size: int = 32
    augment: str = "crop"
    shard: str = ""
    eval_shard: str = ""
    eval_mode: str = "direct"
    prompts: str = ""
    classes: tuple = ()
    workers: int = 1

    _CONV = {"models": _tuple, "image_reductions": _tuple, "text_reductions": _tuple,
             "classes": _tuple, "seeds": lambda v: _tuple(v, int)}

    def __post_init__(self):
        for name, conv in self._CONV.items():
            object.__setattr__(self, name, conv(getattr(self, name)))
        if "none" not in self.image_reductions:
            raise ValueError("image_reductions must include the full-token baseline 'none'")
        if f"truncation:{TEXT_CAPACITY}" not in self.text_reductions:
            raise ValueError(f"text_reductions must include the baseline 'truncation:{TEXT_CAPACITY}'")
        for r in self.image_reductions:
            ip.ImageReduction.parse(r)
        for r in self.text_reductions:
            tp.TextReduction.parse(r)

    @classmethod
    def parse(cls, text):
        kw = {}
        types = {f.name: f.type for f in fields(cls)}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            k, _, v = line.partition("=")
            k, v = k.strip(), v.strip()
            if k not in types:
                raise ValueError(f"unknown sweep key {k!r}")
            t = types[k]
            if k in cls._CONV:
                kw[k] = v
            elif t == "int":
                kw[k] = int(float(v))
            elif t == "float":
                kw[k] = float(v)
            elif t.startswith("float |") or t.startswith("int |"):
                kw[k] = None if v in ("", "none", "None") else (float(v) if t.startswith("float") else int(v))
            else:
                kw[k] = v
        return cls(**kw)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.parse(fh.read())

    def cells(self):
        """Every (model, image reduction, text reduction, seed); baselines first."""
        out = []
        for m in self.models:
            for ir in self.image_reductions:
                for tr in self.text_reductions:
                    if ir != "none" and tr != f"truncation:{TEXT_CAPACITY}":
                        continue  # one axis varies at a time
                    for s in self.seeds:
                        out.append(Cell(m, ir, tr, s))
        return out

    def augment_config(self):
        if self.augment == "none":
            return ip.AugmentConfig.disabled()
        if self.augment == "crop":
            return ip.AugmentConfig(jitter=False, gray=False)
        if self.augment == "full":
            return ip.AugmentConfig()
        raise ValueError(f"augment must be none, crop or full; got {self.augment!r}")

    def prompt_set(self):
        templates = load_templates(self.prompts) if self.prompts else default_templates()
        classes = self.classes or tuple(SynthConfig().class_names())
        return PromptSet(templates, classes)

    def stages(self, cell):
        ir = ip.ImageReduction.parse(cell.image_reduction)
        tr = tp.TextReduction.parse(cell.text_reduction)
        aug = self.augment_config()
        ft_lr = self.finetune_lr or finetune_lr(self.lr, cell.model)
        ft_mask = ip.ImageReduction("random_mask", self.finetune_mask) if self.finetune_mask else ip.ImageReduction()
        pre = StageSpec("pretrain", ir, tr, self.pretrain_samples, self.batch_size, self.lr,
                        self.warmup_steps, self.image_size, aug)
        ft = StageSpec("finetune", ft_mask, tp.TextReduction("truncation", TEXT_CAPACITY),
                       self.finetune_samples, self.batch_size, ft_lr, self.warmup_steps, self.image_size, aug)
        return pre, ft


@dataclass(frozen=True)
class Cell:
    model: str
    image_reduction: str
    text_reduction: str
    seed: int

    @property
    def key(self):
        return f"{self.model}|{self.image_reduction}|{self.text_reduction}|{self.seed}"

    @property
    def slug(self):
        return "".join(c if c.isalnum() or c in "-." else "_" for c in self.key)

    @property
    def is_baseline(self):
        return self.image_reduction == "none" and self.text_reduction == f"truncation:{TEXT_CAPACITY}"


@dataclass
class RunRecord:
    model: str
    image_reduction: str
    text_reduction: str
    image_tokens: int
    text_tokens: int
    stage: str
    top1: float
    i2t_r1: float
    t2i_r1: float
    gflops_per_sample: float
    cumulative_gflops: float
    wallclock_s: float
    seed: int

    def __post_init__(self):
        for name in ("top1", "i2t_r1", "t2i_r1"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.cumulative_gflops <= 0:
            raise ValueError("compute must be positive")

    @classmethod
    def from_row(cls, row):
        conv = {f.name: f.type for f in fields(cls)}
        out = {}
        for k, t in conv.items():
            v = row[k]
            out[k] = int(float(v)) if t == "int" else float(v) if t == "float" else v
        return cls(**out)


RECORD_FIELDS = tuple(f.name for f in fields(RunRecord))


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

class Manifest:
    """JSON status file ``{cell key: {status, records?, error?}}`` under an flock."""

    def __init__(self, path):
        self.path = Path(path)
        self.lock_path = self.path.with_suffix(".lock")

    def _locked(self):
        fh = open(self.lock_path, "a+")
        fcntl.flock(fh, fcntl.LOCK_EX)
        return fh

    def read(self):
        if not self.path.exists():
            return {}
        with open(self.path, encoding="utf-8") as fh:
            return json.load(fh)

    def update(self, key, entry):
        fh = self._locked()
        try:
            data = self.read()
            data[key] = entry
            tmp = self.path.with_suffix(".tmp")
            with open(tmp, "w", encoding="utf-8") as out:
                json.dump(data, out, indent=1, sort_keys=True)
            os.replace(tmp, self.path)
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)
            fh.close()

    def done(self):
        return {k: v for k, v in self.read().items() if v.get("status") == "done"}


# ---------------------------------------------------------------------------
# running cells
# ---------------------------------------------------------------------------

def _evaluate(model, eval_shard, prompts, mode):
    rows = {m: v for m, v, _ in evaluate_shard(model, eval_shard, prompts, mode=mode)}
    return rows["top1"], rows.get("i2t_r@1", 0.0), rows.get("t2i_r@1", 0.0)


def run_cell(grid: SweepGrid, cell: Cell, out_dir, shard=None, eval_shard=None):
    """Pretrain, evaluate, finetune, evaluate.  Returns two RunRecords."""
    shard = shard or Shard.open(grid.shard)
    eval_shard = eval_shard or Shard.open(grid.eval_shard)
    vocab = tp.default_vocab()
    cfg = preset(cell.model, vocab_size=len(vocab), image_size=grid.image_size)
    model = DualEncoder(cfg, seed=cell.seed)
    metrics_dir = Path(out_dir) / "metrics"
    metrics_dir.mkdir(parents=True, exist_ok=True)
    state = TrainState.create(model, seed=cell.seed, vocab=vocab,
                              metrics_path=str(metrics_dir / f"{cell.slug}.csv"))
    prompts = grid.prompt_set()
    records, cumulative, t0 = [], 0.0, time.perf_counter()
    p = cfg.vision.patch_size
    for name, spec in zip(("pre-train", "fine-tune"), grid.stages(cell)):
        run_stage(state, spec, shard)
        n_img, n_txt = spec.image_tokens(p), spec.text_tokens()
        g = flops_estimate(cfg, n_img, n_txt)
        cumulative += g * spec.steps * spec.batch_size
        top1, i2t, t2i = _evaluate(model, eval_shard, prompts, grid.eval_mode)
        records.append(RunRecord(cell.model, cell.image_reduction, cell.text_reduction, n_img, n_txt, name,
                                 top1, i2t, t2i, g, cumulative, time.perf_counter() - t0, cell.seed))
    return records


def _cell_job(grid, cell, out_dir):
    manifest = Manifest(Path(out_dir) / "manifest.json")
    manifest.update(cell.key, {"status": "running"})
    try:
        records = run_cell(grid, cell, out_dir)
    except Exception as exc:  # noqa: BLE001 - recorded, sweep continues
        manifest.update(cell.key, {"status": "failed", "error": f"{type(exc).__name__}: {exc}",
                                   "trace": traceback.format_exc(limit=5)})
        return cell.key, None
    manifest.update(cell.key, {"status": "done", "records": [asdict(r) for r in records]})
    return cell.key, records


def run_sweep(grid: SweepGrid, out_dir, log=None):
    """Run every pending cell, then write records.csv, report.csv and SVG curves.

    Cells already marked done in ``manifest.json`` are not retrained.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(out / "manifest.json")
    done = manifest.done()
    pending = [c for c in grid.cells() if c.key not in done]
    log = log or (lambda msg: None)
    log(f"{len(done)} cells done, {len(pending)} pending")
    if grid.workers > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=grid.workers) as pool:
            for key, recs in pool.map(_cell_job, [grid] * len(pending), pending, [out] * len(pending)):
                log(f"{key}: {'done' if recs else 'failed'}")
    else:
        shard = Shard.open(grid.shard) if pending else None
        eval_shard = Shard.open(grid.eval_shard) if pending else None
        for cell in pending:
            manifest.update(cell.key, {"status": "running"})
            try:
                recs = run_cell(grid, cell, out, shard, eval_shard)
            except Exception as exc:  # noqa: BLE001 - recorded, sweep continues
                manifest.update(cell.key, {"status": "failed", "error": f"{type(exc).__name__}: {exc}",
                                           "trace": traceback.format_exc(limit=5)})
                log(f"{cell.key}: failed ({exc})")
                continue
            manifest.update(cell.key, {"status": "done", "records": [asdict(r) for r in recs]})
            log(f"{cell.key}: " + ", ".join(f"{r.stage} top1={r.top1:.3f}" for r in recs))
    records = collect_records(manifest, grid)
    write_records(out / "records.csv", records)
    report = build_report(records)
    report.write(out)
    return records, report


def collect_records(manifest, grid=None):
    keys = None if grid is None else {c.key for c in grid.cells()}
    recs = []
    for k, entry in sorted(manifest.done().items()):
        if keys is None or k in keys:
            recs.extend(RunRecord(**r) for r in entry["records"])
    return recs


def write_records(path, records):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RECORD_FIELDS)
        w.writeheader()
        for r in records:
            w.writerow(asdict(r))


def read_records(path):
    with open(path, newline="") as fh:
        return [RunRecord.from_row(row) for row in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def _axis(rec):
    if rec.image_reduction != "none":
        return "image", ip.ImageReduction.parse(rec.image_reduction).strategy
    if rec.text_reduction != f"truncation:{TEXT_CAPACITY}":
        return "text", tp.TextReduction.parse(rec.text_reduction).strategy
    return None, None


@dataclass
class ScalingReport:
    """Drop curves keyed by (model, axis, strategy, seed); seed ``-1`` is the seed mean."""

    curves: dict = field(default_factory=dict)      # key -> {tokens: drop (points)}
    metrics: dict = field(default_factory=dict)     # key -> {tokens: accuracy (points)}
    baselines: dict = field(default_factory=dict)   # key -> baseline accuracy (points)
    threshold: float = 1.0

    def min_tokens(self, key, threshold=None):
        return min_tokens_within_drop(self.curves[key], self.threshold if threshold is None else threshold)

    def drop(self, model, axis, strategy, seed, tokens):
        return self.curves[(model, axis, strategy, seed)][tokens]

    def rows(self):
        for key in sorted(self.curves, key=str):
            model, axis, strategy, seed = key
            mt = self.min_tokens(key)
            for tokens in sorted(self.curves[key], reverse=True):
                yield {"model": model, "axis": axis, "strategy": strategy, "seed": seed,
                       "tokens": tokens, "top1": round(self.metrics[key][tokens], 4),
                       "drop": round(self.curves[key][tokens], 4),
                       "baseline": round(self.baselines[key], 4), "min_tokens_within_drop": mt}

    def write(self, out_dir):
        out = Path(out_dir)
        rows = list(self.rows())
        with open(out / "report.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["model", "axis", "strategy", "seed", "tokens", "top1",
                                               "drop", "baseline", "min_tokens_within_drop"])
            w.writeheader()
            w.writerows(rows)
        curves = out / "curves"
        curves.mkdir(exist_ok=True)
        groups = {}
        for (model, axis, strategy, seed), c in self.curves.items():
            groups.setdefault((model, axis, strategy), {})[seed] = c
        for (model, axis, strategy), series in groups.items():
            name = f"{model}-{axis}-{strategy}".replace("/", "")
            (curves / f"{name}.svg").write_text(svg_chart(series, f"{model} {axis} {strategy}"))


def build_report(records, stage="fine-tune", threshold=1.0):
    """Drop curves of ``stage`` accuracy (percentage points) against each model's baseline."""
    rep = ScalingReport(threshold=threshold)
    # a finetuned cell is indexed by the length it was pretrained at
    pre = {(r.model, r.image_reduction, r.text_reduction, r.seed): r for r in records if r.stage == "pre-train"}
    base, pts = {}, {}
    for r in records:
        if r.stage != stage:
            continue
        if r.image_reduction == "none" and r.text_reduction == f"truncation:{TEXT_CAPACITY}":
            base[(r.model, r.seed)] = (pre.get((r.model, r.image_reduction, r.text_reduction, r.seed), r), r)
            continue
        axis, strategy = _axis(r)
        src = pre.get((r.model, r.image_reduction, r.text_reduction, r.seed), r)
        tokens = src.image_tokens if axis == "image" else src.text_tokens
        pts.setdefault((r.model, axis, strategy, r.seed), {})[tokens] = 100.0 * r.top1
    for (model, axis, strategy, seed), curve in pts.items():
        if (model, seed) not in base:
            continue
        tok, b = base[(model, seed)]
        full = tok.image_tokens if axis == "image" else tok.text_tokens
        key = (model, axis, strategy, seed)
        metric = {full: 100.0 * b.top1, **curve}
        rep.metrics[key] = metric
        rep.baselines[key] = 100.0 * b.top1
        rep.curves[key] = drop_curve(metric, full)
    # seed means
    grouped = {}
    for (model, axis, strategy, seed), metric in rep.metrics.items():
        grouped.setdefault((model, axis, strategy), []).append(metric)
    for (model, axis, strategy), ms in grouped.items():
        common = set.intersection(*(set(m) for m in ms))
        mean = {t: float(np.mean([m[t] for m in ms])) for t in common}
        key = (model, axis, strategy, -1)
        full = max(common)
        rep.metrics[key] = mean
        rep.baselines[key] = mean[full]
        rep.curves[key] = drop_curve(mean, full)
    return rep


def svg_chart(series, title, width=420, height=280):
    """Line chart of drop vs token length, one polyline per seed."""
    pad = 44
    xs = sorted({t for c in series.values() for t in c})
    ys = [d for c in series.values() for d in c.values()] + [0.0]
    lo, hi = min(ys), max(ys)
    if hi - lo < 1e-9:
        hi = lo + 1.0
    x0, x1 = math.log(min(xs)), math.log(max(xs))
    span = (x1 - x0) or 1.0

    def sx(t):
        return pad + (math.log(t) - x0) / span * (width - 2 * pad)

    def sy(d):
        return height - pad - (d - lo) / (hi - lo) * (height - 2 * pad)

    colours = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'font-family="sans-serif" font-size="11">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<text x="{width / 2}" y="16" text-anchor="middle">{title}</text>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{sy(0):.1f}" x2="{width - pad}" y2="{sy(0):.1f}" stroke="#999" '
             f'stroke-dasharray="3,3"/>',
             f'<text x="{width / 2}" y="{height - 8}" text-anchor="middle">tokens</text>',
             f'<text x="12" y="{height / 2}" transform="rotate(-90 12 {height / 2})" '
             f'text-anchor="middle">drop (points)</text>']
    for t in xs:
        parts.append(f'<text x="{sx(t):.1f}" y="{height - pad + 14}" text-anchor="middle">{t}</text>')
    for v in (lo, hi):
        parts.append(f'<text x="{pad - 4}" y="{sy(v) + 4:.1f}" text-anchor="end">{v:.1f}</text>')
    for i, (seed, c) in enumerate(sorted(series.items())):
        pts = " ".join(f"{sx(t):.1f},{sy(c[t]):.1f}" for t in sorted(c))
        colour = "black" if seed == -1 else colours[i % len(colours)]
        dash = "" if seed == -1 else ' stroke-opacity="0.6"'
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{colour}" stroke-width="1.5"{dash}/>')
        label = "mean" if seed == -1 else f"seed {seed}"
        parts.append(f'<text x="{width - pad + 2}" y="{pad + 12 * i}" fill="{colour}">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
