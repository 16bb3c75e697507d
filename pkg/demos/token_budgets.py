"""How each reduction strategy shortens the image and text sequences.

Run: python demos/token_budgets.py
"""
import numpy as np

from clipa import imagepipe as ip
from clipa import textpipe as tp
from clipa.numerics import rng_stream


def show_mask(grid, keep):
    side = int(np.sqrt(grid))
    cells = np.full(grid, ".")
    cells[keep] = "#"
    for row in cells.reshape(side, side):
        print("   ", " ".join(row))


print("Image tokens at 224 px with 16 px patches (CLS included):")
for spec in ["none", "resize:112", "resize:64", "random:0.75", "grid:0.75", "block:0.5"]:
    r = ip.ImageReduction.parse(spec)
    print(f"  {spec:<12} {ip.kept_token_count(196, r):>4}")

print("\nWhich patches survive on an 8x8 grid (# kept):")
for spec in ["random:0.75", "grid:0.75", "block:0.5"]:
    r = ip.ImageReduction.parse(spec)
    keep = ip.mask_indices((8, 8), r, rng_stream(0, "demo", spec))
    print(f"  {spec}: {len(keep)} kept")
    show_mask(64, keep)

caption = "a small red circle sitting next to the big blue square on the left"
t = tp.tokenize(caption)
print(f"\nCaption: {caption!r} -> {t.true_length} tokens")
for strategy in tp.TEXT_STRATEGIES:
    out = tp.reduce_text(t, tp.TextReduction(strategy, 6), rng_stream(0, "demo-text"))
    print(f"  {strategy:<10} -> {tp.detokenize(out)!r}")
