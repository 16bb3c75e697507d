"""Per-sample FLOPs and whole-schedule training compute for the large presets.

Run: python demos/compute_ledger.py
"""
from clipa.model import flops_estimate, param_count, preset
from clipa.sweep import compute_cost, speedup_ratio, table2_schedules

for name in ["B/16", "L/16", "H/14", "G/14"]:
    cfg = preset(name)
    counts = param_count(cfg, split=True)
    grid = cfg.grid ** 2 + 1
    print(f"{name:<5} vision {counts['vision'] / 1e6:7.0f}M  text {counts['text'] / 1e6:5.0f}M  "
          f"{flops_estimate(cfg, grid, 32):7.1f} GFLOPs/sample at {grid} image tokens")

print("\nTraining compute (1e12 GFLOPs), ours vs published:")
for name, (cfg, schedule, published) in table2_schedules().items():
    print(f"  {name:<16} {compute_cost(cfg, schedule):6.2f}   published {published}")

b16, l16 = preset("B/16"), preset("L/16")
ratio = speedup_ratio((b16, [(2.56e9, 197, 32), (128e6, 197, 32)]),
                      (l16, [(2.56e9, 17, 32), (128e6, 197, 32)]))
print(f"\nL/16 pretrained at 64 px then finetuned at 224 px vs a full-length B/16: {ratio:.2f}x cheaper")
