"""Command-line entry point: ``clipa <subcommand> ...``."""

from __future__ import annotations

import argparse
import sys

from . import imagepipe as ip
from . import textpipe as tp
from .evaluation import PromptSet, default_templates, evaluate_shard, load_templates
from .ingest import ConfigError, Shard, SynthConfig, synth_generate
from .model import DualEncoder, flops_estimate, load_checkpoint, preset
from .sweep import SweepGrid, compute_cost, run_sweep
from .trainer import (StageSpec, TEXT_CAPACITY, TrainState, finetune_lr, load_train_state,
                      run_stage, save_train_state)


def parse_kv(text):
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        k, _, v = line.partition("=")
        out[k.strip()] = v.strip()
    return out


def read_kv(path):
    with open(path, encoding="utf-8") as fh:
        return parse_kv(fh.read())


def _csv(v):
    return tuple(x.strip() for x in v.split(",") if x.strip())


def synth_config(kv):
    kw = {}
    for k, v in kv.items():
        if k in ("seed", "count", "image_size"):
            kw[k] = int(v)
        elif k in ("shapes", "colors"):
            kw[k] = _csv(v)
        elif k == "templates":
            kw[k] = tuple(t.strip() for t in v.split("|") if t.strip())
        elif k in ("distractors", "target_scale", "distractor_scale"):
            conv = int if k == "distractors" else float
            kw[k] = tuple(conv(x) for x in _csv(v))
        elif k == "noise":
            kw[k] = float(v)
        else:
            raise ConfigError(f"unknown synth key {k!r}")
    return SynthConfig(**kw)


def _augment(name):
    return {"none": ip.AugmentConfig.disabled(), "crop": ip.AugmentConfig(jitter=False, gray=False),
            "full": ip.AugmentConfig()}[name]


def stage_spec(kv, kind, model_name="tiny"):
    """StageSpec from run-config keys (``lr``, ``samples``, ``image_reduce`` ...)."""
    lr = float(kv.get("lr", 1e-3))
    if kind == "finetune":
        lr = float(kv["finetune_lr"]) if "finetune_lr" in kv else finetune_lr(lr, model_name)
        image = kv.get("finetune_image_reduce", "none")
        text = f"truncation:{TEXT_CAPACITY}"
        samples = int(float(kv.get("finetune_samples", kv.get("samples", 0))))
    else:
        image = kv.get("image_reduce", "none")
        text = kv.get("text_reduce", f"truncation:{TEXT_CAPACITY}")
        samples = int(float(kv.get("samples", 0)))
    warm = kv.get("warmup_steps")
    return StageSpec(kind, ip.ImageReduction.parse(image), tp.TextReduction.parse(text), samples,
                     int(kv.get("batch_size", 128)), lr, None if warm in (None, "auto") else int(warm),
                     int(kv.get("resolution", 32)), _augment(kv.get("augment", "crop")),
                     float(kv.get("weight_decay", 0.2)))


def cmd_synth(args):
    cfg = synth_config(read_kv(args.config)) if args.config else SynthConfig()
    _, digest = synth_generate(cfg, out=args.out)
    print(f"wrote {cfg.count} records to {args.out} sha256={digest}")


def cmd_train(args):
    kv = read_kv(args.config)
    name = kv.get("model", "tiny")
    vocab = tp.default_vocab()
    cfg = preset(name, vocab_size=len(vocab), image_size=int(kv.get("resolution", 32)))
    seed = int(kv.get("seed", 0))
    model = DualEncoder(cfg, seed=seed)
    state = TrainState.create(model, seed=seed, vocab=vocab, metrics_path=kv.get("metrics"))
    spec = stage_spec(kv, "pretrain", name)
    run_stage(state, spec, Shard.open(kv["shard"]), workers=int(kv.get("workers", 0)))
    digest = save_train_state(kv["out"], state, {"preset": name})
    print(f"pretrain: {state.step} steps, loss {state.log[-1]['loss'] if state.log else float('nan'):.4f}, "
          f"checkpoint {kv['out']} sha256={digest}")


def cmd_finetune(args):
    kv = read_kv(args.config)
    state = load_train_state(args.from_ckpt, metrics_path=kv.get("metrics"))
    name = kv.get("model", state.model.config.name)
    spec = stage_spec(kv, "finetune", name)
    start = state.step
    run_stage(state, spec, Shard.open(kv["shard"]), workers=int(kv.get("workers", 0)))
    out = kv.get("finetune_out", kv.get("out"))
    digest = save_train_state(out, state, {"preset": name})
    print(f"finetune: {state.step - start} steps, checkpoint {out} sha256={digest}")


def cmd_eval(args):
    model, _ = load_checkpoint(args.ckpt)
    shard = Shard.open(args.shard)
    prompts = None
    if args.mode == "classify":
        templates = load_templates(args.prompts) if args.prompts else default_templates()
        classes = load_templates(args.classes) if args.classes else SynthConfig().class_names()
        prompts = PromptSet(templates, classes)
    rows = evaluate_shard(model, shard, prompts, res=args.res, mode=args.transform,
                          ks=(1,) if args.mode == "classify" else tuple(args.k))
    if args.mode == "classify":
        rows = [r for r in rows if r[0] == "top1"]
    print("metric,value,n")
    for metric, value, n in rows:
        print(f"{metric},{value:.6f},{n}")


def cmd_sweep(args):
    grid = SweepGrid.load(args.grid)
    if args.workers:
        from dataclasses import replace
        grid = replace(grid, workers=args.workers)
    records, report = run_sweep(grid, args.out, log=lambda m: print(m, flush=True))
    print(f"{len(records)} records; report in {args.out}/report.csv")


def _schedule(text):
    """``samples:img:txt[,samples:img:txt...]``"""
    out = []
    for part in _csv(text):
        s, i, t = part.split(":")
        out.append((float(s), int(i), int(t)))
    return out


def cmd_flops(args):
    cfg = preset(args.model)
    g = flops_estimate(cfg, args.img_tokens, args.txt_tokens)
    print(f"model={args.model} img_tokens={args.img_tokens} txt_tokens={args.txt_tokens} gflops_per_sample={g:.3f}")
    for s in args.samples:
        total = compute_cost(cfg, [(s, args.img_tokens, args.txt_tokens)])
        print(f"samples={s:g} compute={total:.4f}e12 GFLOPs")
    if args.schedule:
        sched = _schedule(args.schedule)
        print(f"schedule={args.schedule} compute={compute_cost(cfg, sched):.4f}e12 GFLOPs")


def build_parser():
    p = argparse.ArgumentParser(prog="clipa", description="Reduced-token contrastive image-text training lab.")
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("synth-data", help="generate a synthetic image-caption shard")
    s.add_argument("--config", help="key = value synth config (seed, count, image_size, shapes, colors, ...)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="run the reduced-token pretraining stage")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("finetune", help="run the full-token finetuning stage from a checkpoint")
    s.add_argument("--config", required=True)
    s.add_argument("--from", dest="from_ckpt", required=True)
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("eval", help="zero-shot classification or retrieval on a shard")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--shard", required=True)
    s.add_argument("--prompts", help="one template per line, each with a single {}")
    s.add_argument("--classes", help="one class name per line (default: synthetic shapes)")
    s.add_argument("--mode", choices=("classify", "retrieval"), default="classify")
    s.add_argument("--res", type=int, default=None)
    s.add_argument("--transform", choices=("crop", "direct"), default="crop")
    s.add_argument("-k", type=int, nargs="+", default=[1, 5])
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="run a token-length sweep grid")
    s.add_argument("--grid", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--workers", type=int, default=0)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("flops", help="per-sample GFLOPs and schedule totals")
    s.add_argument("--model", required=True)
    s.add_argument("--img-tokens", type=int, required=True)
    s.add_argument("--txt-tokens", type=int, required=True)
    s.add_argument("--samples", type=float, nargs="*", default=[])
    s.add_argument("--schedule", help="samples:img:txt,... e.g. 12.8e9:37:8,128e6:257:32")
    s.set_defaults(func=cmd_flops)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (ConfigError, ValueError, FileNotFoundError, KeyError) as exc:
        print(f"clipa: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
