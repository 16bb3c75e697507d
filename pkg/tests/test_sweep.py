import math

import pytest
from hypothesis import given, settings, strategies as st

from clipa import sweep
from clipa.ingest import SynthConfig, synth_generate
from clipa.model import flops_estimate, preset
from clipa.sweep import (ComputeLedger, RunRecord, SweepGrid, build_report, compute_cost, drop_curve,
                         min_tokens_within_drop, performance_drop, read_records,
                         reference_image_curve, speedup_ratio, table2_schedules)


# -- drops -------------------------------------------------------------------------

@pytest.mark.parametrize("model,drop", [("S/16", 6.2), ("B/16", 4.3), ("L/16", 3.0)])
def test_published_resize_drops(model, drop):
    curve = reference_image_curve(model, "resize")
    assert abs(performance_drop(curve[197], curve[17]) - drop) <= 0.1 + 1e-9


def test_negative_drop_allowed():
    assert performance_drop(68.9, 69.2) == pytest.approx(-0.3)


def test_min_tokens_on_reference_curves():
    assert min_tokens_within_drop(drop_curve(reference_image_curve("S/16")), 1.0) == 101
    assert min_tokens_within_drop(drop_curve(reference_image_curve("L/16")), 1.0) == 50


def test_min_tokens_infinite_threshold_and_empty():
    drops = {197: 0.0, 50: 9.0, 17: 30.0}
    assert min_tokens_within_drop(drops, math.inf) == 17
    assert min_tokens_within_drop(drops, -1.0) == 197
    with pytest.raises(ValueError):
        min_tokens_within_drop({}, 1.0)


@given(st.dictionaries(st.integers(1, 300), st.floats(-5, 50), min_size=1, max_size=8),
       st.floats(-5, 50), st.floats(0, 20))
def test_min_tokens_non_increasing_in_threshold(drops, t, dt):
    assert min_tokens_within_drop(drops, t + dt) <= min_tokens_within_drop(drops, t)


# -- compute -----------------------------------------------------------------------

def test_openclip_h_and_clipa_h_compute():
    rows = table2_schedules()
    cfg, sched, published = rows["OpenCLIP-H/14"]
    assert abs(compute_cost(cfg, sched) / published - 1) <= 0.20
    cfg, sched, published = rows["CLIPA-H/14"]
    assert abs(compute_cost(cfg, sched) / published - 1) <= 0.25


def test_zero_samples_cost_nothing():
    assert compute_cost(preset("B/16"), [(0, 197, 32)]) == 0.0


@given(st.floats(0, 1e10), st.floats(0, 1e10), st.integers(2, 197), st.integers(2, 32))
@settings(max_examples=50)
def test_compute_additive_and_linear(a, b, n_img, n_txt):
    cfg = preset("S/16")
    both = compute_cost(cfg, [(a, n_img, n_txt), (b, n_img, n_txt)])
    assert both == pytest.approx(compute_cost(cfg, [(a + b, n_img, n_txt)]), rel=1e-12, abs=1e-18)
    assert compute_cost(cfg, [(2 * a, n_img, n_txt)]) == pytest.approx(2 * compute_cost(cfg, [(a, n_img, n_txt)]),
                                                                       rel=1e-12, abs=1e-18)


def test_ledger_entries():
    led = ComputeLedger(preset("B/16")).add(1e6, 197, 32).add(1e6, 50, 32)
    assert len(led.entries) == 2
    assert led.total_gflops == pytest.approx(1e6 * (flops_estimate(led.config, 197, 32)
                                                    + flops_estimate(led.config, 50, 32)))


def test_speedup_identity_and_h14_ratio():
    b16 = preset("B/16")
    assert speedup_ratio((b16, 197, 32), (b16, 197, 32)) == 1.0
    rows = table2_schedules()
    h, full, _ = rows["OpenCLIP-H/14"]
    _, clipa, _ = rows["CLIPA-H/14"]
    assert abs(speedup_ratio((h, full), (h, clipa)) / 15 - 1) <= 0.30


# -- grid --------------------------------------------------------------------------

def test_grid_requires_baselines():
    with pytest.raises(ValueError):
        SweepGrid(image_reductions=("resize:16",))
    with pytest.raises(ValueError):
        SweepGrid(text_reductions=("syntax:8",))


def test_grid_parse_and_cells():
    g = SweepGrid.parse("""
        models = tiny, mini   # two presets
        image_reductions = none, resize:16
        text_reductions = truncation:32, syntax:8
        seeds = 0, 1
        lr = 1e-3
        finetune_lr = none
    """)
    assert g.models == ("tiny", "mini") and g.seeds == (0, 1) and g.finetune_lr is None
    cells = g.cells()
    # per model and seed: baseline, resize, syntax
    assert len(cells) == 2 * 3 * 2
    assert sum(c.is_baseline for c in cells) == 4
    pre, ft = g.stages(cells[0])
    assert pre.base_lr == 1e-3 and ft.base_lr == pytest.approx(1e-4) and ft.kind == "finetune"


def test_grid_unknown_key():
    with pytest.raises(ValueError):
        SweepGrid.parse("colour = red")


def test_run_record_validation():
    kw = dict(model="tiny", image_reduction="none", text_reduction="truncation:32", image_tokens=17,
              text_tokens=32, stage="fine-tune", top1=0.5, i2t_r1=0.1, t2i_r1=0.1, gflops_per_sample=0.1,
              cumulative_gflops=1.0, wallclock_s=1.0, seed=0)
    RunRecord(**kw)
    with pytest.raises(ValueError):
        RunRecord(**{**kw, "top1": 1.5})
    with pytest.raises(ValueError):
        RunRecord(**{**kw, "cumulative_gflops": 0.0})


def _rec(model, red, tokens, top1, seed=0, stage="fine-tune"):
    return RunRecord(model, red, "truncation:32", tokens, 32, stage, top1, 0.0, 0.0, 1.0, 1.0, 1.0, seed)


def test_report_baseline_drop_is_zero_and_seed_mean():
    recs = [_rec("tiny", "none", 17, 0.60, 0), _rec("tiny", "resize:16", 5, 0.50, 0),
            _rec("tiny", "none", 17, 0.70, 1), _rec("tiny", "resize:16", 5, 0.66, 1),
            _rec("tiny", "none", 17, 0.10, 0, stage="pre-train")]
    rep = build_report(recs)
    assert rep.drop("tiny", "image", "resize", 0, 17) == 0.0
    assert rep.drop("tiny", "image", "resize", 0, 5) == pytest.approx(10.0)
    assert rep.drop("tiny", "image", "resize", -1, 5) == pytest.approx(7.0)


def test_finetuned_cells_are_indexed_by_pretrain_length():
    # every finetune record sits at full length; the reduced cell must not overwrite the baseline
    recs = [_rec("tiny", "none", 17, 0.10, stage="pre-train"), _rec("tiny", "none", 17, 0.60),
            _rec("tiny", "resize:16", 5, 0.20, stage="pre-train"), _rec("tiny", "resize:16", 17, 0.55)]
    rep = build_report(recs)
    assert rep.metrics[("tiny", "image", "resize", 0)] == pytest.approx({17: 60.0, 5: 55.0})
    assert rep.drop("tiny", "image", "resize", 0, 5) == pytest.approx(5.0)
    pre = build_report(recs, stage="pre-train")
    assert pre.drop("tiny", "image", "resize", 0, 5) == pytest.approx(-10.0)


# -- end to end --------------------------------------------------------------------

@pytest.fixture(scope="module")
def grid(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    synth_generate(SynthConfig(seed=1, count=64), d / "train.clpa")
    synth_generate(SynthConfig(seed=2, count=24), d / "eval.clpa")
    return SweepGrid(models=("tiny", "mini"), image_reductions=("none", "resize:16"), seeds=(0,),
                     pretrain_samples=32, finetune_samples=16, batch_size=16,
                     shard=str(d / "train.clpa"), eval_shard=str(d / "eval.clpa"))


def test_sweep_records_report_and_resume(grid, tmp_path, monkeypatch):
    records, report = sweep.run_sweep(grid, tmp_path)
    assert len(records) == 8
    assert {(r.model, r.image_reduction, r.stage) for r in records} == {
        (m, i, s) for m in ("tiny", "mini") for i in ("none", "resize:16") for s in ("pre-train", "fine-tune")}
    assert {r.image_tokens for r in records if r.image_reduction == "resize:16" and r.stage == "pre-train"} == {5}
    assert read_records(tmp_path / "records.csv") == records
    assert (tmp_path / "report.csv").exists()
    assert (tmp_path / "curves" / "tiny-image-resize.svg").read_text().startswith("<svg")
    assert report.drop("mini", "image", "resize", 0, 17) == 0.0
    assert set(report.curves[("mini", "image", "resize", 0)]) == {17, 5}

    def boom(*a, **k):
        raise AssertionError("completed cell retrained")

    monkeypatch.setattr(sweep, "run_cell", boom)
    again, _ = sweep.run_sweep(grid, tmp_path)
    assert again == records


def test_failed_cell_is_recorded_and_sweep_continues(grid, tmp_path, monkeypatch):
    real = sweep.run_cell

    def flaky(g, cell, *a, **k):
        if cell.model == "mini":
            raise RuntimeError("simulated failure")
        return real(g, cell, *a, **k)

    monkeypatch.setattr(sweep, "run_cell", flaky)
    records, _ = sweep.run_sweep(grid, tmp_path)
    status = {k: v["status"] for k, v in sweep.Manifest(tmp_path / "manifest.json").read().items()}
    assert sorted(status.values()) == ["done", "done", "failed", "failed"]
    assert {r.model for r in records} == {"tiny"}
