"""Image augmentation, anti-aliased resizing, patchify and patch masking."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple

import numpy as np

IMAGE_STRATEGIES = ("none", "random_mask", "grid_mask", "block_mask", "resize")
_ALIASES = {"random": "random_mask", "grid": "grid_mask", "block": "block_mask"}
MEAN, STD = 0.5, 0.5


class ImageShapeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# reduction spec and token arithmetic
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ImageReduction:
    """How to shorten the image token sequence.

    ``strategy`` is none, random_mask, grid_mask or block_mask (masking
    with ``ratio``) or resize (to ``target_size`` pixels per side).  The
    short names random/grid/block are accepted too.
    """

    strategy: str = "none"
    ratio: float = 0.0
    target_size: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "strategy", _ALIASES.get(self.strategy, self.strategy))
        if self.strategy not in IMAGE_STRATEGIES:
            raise ValueError(f"unknown image strategy {self.strategy!r}")
        if self.strategy == "resize":
            if not self.target_size or self.target_size < 4:
                raise ValueError("resize needs target_size >= 4")
        elif not 0.0 <= self.ratio < 1.0:
            raise ValueError(f"mask ratio must be in [0, 1), got {self.ratio}")
        if self.strategy == "grid_mask" and self.ratio not in (0.0, 0.5, 0.75):
            raise ValueError("grid masking supports ratios 0.5 and 0.75 only")

    @property
    def is_mask(self):
        return self.strategy in ("random_mask", "grid_mask", "block_mask")

    @classmethod
    def parse(cls, spec):
        """``"resize:112"``, ``"random:0.75"``, ``"none"``."""
        name, _, arg = spec.partition(":")
        if name == "resize":
            return cls("resize", target_size=int(arg))
        return cls(name, ratio=float(arg) if arg else 0.0)

    def __str__(self):
        if self.strategy == "resize":
            return f"resize:{self.target_size}"
        if self.strategy == "none":
            return "none"
        return f"{self.strategy.removesuffix('_mask')}:{self.ratio:g}"

    def resolution(self, full_size):
        return self.target_size if self.strategy == "resize" else full_size


def _round_half_up(x):
    return int(math.floor(x + 0.5 + 1e-9))


def kept_patch_count(n_patches, ratio):
    return _round_half_up((1.0 - ratio) * n_patches)


def kept_token_count(grid, r: ImageReduction, patch_size=16):
    """Sequence length fed to the image tower, CLS included.

    ``grid`` is the full patch count (int) or a (rows, cols) pair.
    """
    if r.strategy == "resize":
        if r.target_size % patch_size:
            raise ImageShapeError(f"resize target {r.target_size} not divisible by patch {patch_size}")
        return (r.target_size // patch_size) ** 2 + 1
    n = grid if isinstance(grid, (int, np.integer)) else grid[0] * grid[1]
    if r.strategy == "none":
        return n + 1
    return kept_patch_count(n, r.ratio) + 1


# ---------------------------------------------------------------------------
# patches
# ---------------------------------------------------------------------------

@dataclass
class PatchSet:
    patches: np.ndarray   # (k, 3*p*p)
    indices: np.ndarray   # (k, 2) row, col in raster order
    grid: tuple           # (rows, cols) of the source patch grid

    def __len__(self):
        return len(self.patches)

    def flat_indices(self):
        return self.indices[:, 0] * self.grid[1] + self.indices[:, 1]

    def gather(self, flat):
        """Subset by flat raster positions (must be a subset of ours)."""
        pos = {int(f): i for i, f in enumerate(self.flat_indices())}
        rows = [pos[int(f)] for f in flat]
        return PatchSet(self.patches[rows], self.indices[rows], self.grid)


def patchify_batch(images, patch_size):
    """(B, H, W, C) -> (B, rows*cols, p*p*C) in raster order."""
    B, H, W, C = images.shape
    p = patch_size
    if H % p or W % p:
        raise ImageShapeError(f"image {H}x{W} not divisible by patch size {p}")
    gh, gw = H // p, W // p
    x = images.reshape(B, gh, p, gw, p, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, gh * gw, p * p * C)


def patchify(image, patch_size):
    H, W = image.shape[:2]
    patches = patchify_batch(np.asarray(image)[None], patch_size)[0]
    gh, gw = H // patch_size, W // patch_size
    rows, cols = np.divmod(np.arange(gh * gw), gw)
    return PatchSet(patches, np.stack([rows, cols], axis=1), (gh, gw))


# ---------------------------------------------------------------------------
# masks
# ---------------------------------------------------------------------------

def random_keep(n, k, rng):
    return np.sort(rng.permutation(n)[:k])


def grid_keep(grid, ratio, rng):
    """One (ratio 0.75) or two (ratio 0.5) survivors per 2x2 window."""
    gh, gw = grid
    if gh % 2 or gw % 2:
        raise ImageShapeError(f"grid masking needs an even patch grid, got {gh}x{gw}")
    per = 1 if ratio == 0.75 else 2
    wins = (gh // 2) * (gw // 2)
    picks = np.argsort(rng.random((wins, 4)), axis=1)[:, :per]
    wr, wc = np.divmod(np.arange(wins), gw // 2)
    rows = 2 * wr[:, None] + picks // 2
    cols = 2 * wc[:, None] + picks % 2
    return np.sort((rows * gw + cols).reshape(-1))


class BlockSample(NamedTuple):
    removed: np.ndarray   # (rows, cols) bool
    blocks: list          # (top, left, h, w) per rectangle, in sampling order
    restored: list        # flat indices given back from the last rectangle
    filled: list          # flat indices removed at random if sampling gave up


def sample_blocks(grid, n_remove, rng, aspect=(0.5, 2.0), max_tries=1000):
    """Remove rectangles until exactly ``n_remove`` patches are gone.

    Each rectangle has aspect uniform in ``aspect`` and area drawn up to
    the remaining deficit.  If rounding of the last rectangle removes too
    many patches, the surplus is restored at random from its outermost ring.
    """
    gh, gw = grid
    removed = np.zeros((gh, gw), dtype=bool)
    blocks, restored, filled = [], [], []
    count = 0
    tries = 0
    while count < n_remove and tries < max_tries:
        tries += 1
        deficit = n_remove - count
        area = rng.uniform(min(4, deficit), deficit + 1e-9)
        ar = rng.uniform(*aspect)
        h = max(1, min(gh, int(round(math.sqrt(area * ar)))))
        w = max(1, min(gw, int(round(math.sqrt(area / ar)))))
        top = int(rng.integers(0, gh - h + 1))
        left = int(rng.integers(0, gw - w + 1))
        block = np.zeros_like(removed)
        block[top:top + h, left:left + w] = True
        fresh = block & ~removed
        n_fresh = int(fresh.sum())
        if n_fresh == 0:
            continue
        removed |= fresh
        blocks.append((top, left, h, w))
        count += n_fresh
        surplus = count - n_remove
        if surplus > 0:
            rr, cc = np.nonzero(fresh)
            depth = np.minimum.reduce([rr - top, top + h - 1 - rr, cc - left, left + w - 1 - cc])
            # restore from the shallowest rings first, random within a ring
            order = np.lexsort((rng.random(len(rr)), depth))[:surplus]
            removed[rr[order], cc[order]] = False
            restored = (rr[order] * gw + cc[order]).tolist()
            count -= surplus
    if count < n_remove:  # pathological: finish with random removals
        free = np.flatnonzero(~removed.reshape(-1))
        extra = rng.choice(free, size=n_remove - count, replace=False)
        removed.reshape(-1)[extra] = True
        filled = extra.tolist()
    return BlockSample(removed, blocks, restored, filled)


def block_keep(grid, n_remove, rng, aspect=(0.5, 2.0), max_tries=1000):
    """Kept flat indices after block removal (see ``sample_blocks``)."""
    return np.flatnonzero(~sample_blocks(grid, n_remove, rng, aspect, max_tries).removed.reshape(-1))


def mask_indices(grid, r: ImageReduction, rng):
    """Sorted flat indices of kept patches for one image."""
    n = grid[0] * grid[1]
    if r.strategy == "none" or r.ratio == 0.0:
        return np.arange(n)
    k = kept_patch_count(n, r.ratio)
    if r.strategy == "random_mask":
        return random_keep(n, k, rng)
    if r.strategy == "grid_mask":
        return grid_keep(grid, r.ratio, rng)
    if r.strategy == "block_mask":
        return block_keep(grid, n - k, rng)
    raise ValueError(f"{r.strategy} is not a masking strategy")


def apply_mask(patches: PatchSet, r: ImageReduction, rng) -> PatchSet:
    if not (r.is_mask or r.strategy == "none"):
        raise ValueError(f"{r.strategy} is not a masking strategy")
    keep = mask_indices(patches.grid, r, rng)
    if len(keep) == len(patches):
        return patches
    return patches.gather(keep)


def batch_mask_indices(batch, grid, r: ImageReduction, rng):
    """(B, k) kept indices; vectorised for random masking."""
    n = grid[0] * grid[1]
    if r.strategy in ("none", "resize") or r.ratio == 0.0:
        return np.tile(np.arange(n), (batch, 1))
    if r.strategy == "random_mask":
        k = kept_patch_count(n, r.ratio)
        return np.sort(np.argsort(rng.random((batch, n)), axis=1)[:, :k], axis=1)
    return np.stack([mask_indices(grid, r, rng) for _ in range(batch)])


# ---------------------------------------------------------------------------
# resizing
# ---------------------------------------------------------------------------

@lru_cache(maxsize=512)
def resize_weights(in_size, out_size):
    """(out, in) triangle-filter weights, support widened by the downscale factor."""
    scale = in_size / out_size
    support = max(scale, 1.0)
    centers = (np.arange(out_size) + 0.5) * scale
    src = np.arange(in_size) + 0.5
    w = np.maximum(0.0, 1.0 - np.abs(src[None, :] - centers[:, None]) / support)
    w /= w.sum(axis=1, keepdims=True)
    w.setflags(write=False)
    return w


def resize_antialias(image, target):
    """Anti-aliased bilinear resize of an (H, W, C) float image.

    ``target`` is an int (square) or (height, width).  Upsampling reduces to
    plain bilinear interpolation with edge clamping.
    """
    th, tw = (target, target) if np.isscalar(target) else target
    if th < 4 or tw < 4:
        raise ImageShapeError("resize target must be at least 4 px per side")
    img = np.asarray(image, dtype=np.float64)
    H, W = img.shape[:2]
    if (H, W) == (th, tw):
        return img.copy()
    wy = resize_weights(H, th)
    wx = resize_weights(W, tw)
    return np.einsum("ih,hwc,jw->ijc", wy, img, wx, optimize=True)


def resize_shorter(image, shorter):
    H, W = image.shape[:2]
    if H <= W:
        size = (shorter, max(1, _round_half_up(W * shorter / H)))
    else:
        size = (max(1, _round_half_up(H * shorter / W)), shorter)
    return resize_antialias(image, size)


def center_crop(image, size):
    H, W = image.shape[:2]
    top = (H - size) // 2
    left = (W - size) // 2
    return image[top:top + size, left:left + size]


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    crop_area: tuple = (0.40, 1.00)
    crop_aspect: tuple = (3 / 4, 4 / 3)
    jitter_strength: float = 0.32
    jitter_prob: float = 0.8
    gray_prob: float = 0.2
    crop: bool = True
    jitter: bool = True
    gray: bool = True

    def __post_init__(self):
        lo, hi = self.crop_area
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError(f"crop area range must lie in (0, 1], got {self.crop_area}")
        if self.jitter_strength < 0:
            raise ValueError("jitter strength must be non-negative")

    @classmethod
    def disabled(cls):
        return cls(crop=False, jitter=False, gray=False)


def sample_crop(H, W, cfg, rng, attempts=10):
    """Random-resized-crop box (top, left, h, w)."""
    area = H * W
    log_lo, log_hi = math.log(cfg.crop_aspect[0]), math.log(cfg.crop_aspect[1])
    for _ in range(attempts):
        target = area * rng.uniform(*cfg.crop_area)
        ar = math.exp(rng.uniform(log_lo, log_hi))
        w = int(round(math.sqrt(target * ar)))
        h = int(round(math.sqrt(target / ar)))
        if 0 < w <= W and 0 < h <= H:
            top = int(rng.integers(0, H - h + 1))
            left = int(rng.integers(0, W - w + 1))
            return top, left, h, w
    # fall back to the largest centred box within the aspect range
    in_ar = W / H
    if in_ar < cfg.crop_aspect[0]:
        w, h = W, int(round(W / cfg.crop_aspect[0]))
    elif in_ar > cfg.crop_aspect[1]:
        h, w = H, int(round(H * cfg.crop_aspect[1]))
    else:
        h, w = H, W
    return (H - h) // 2, (W - w) // 2, h, w


_GRAY = np.array([0.299, 0.587, 0.114])


def grayscale(img):
    g = img @ _GRAY
    return np.repeat(g[..., None], 3, axis=-1)


def color_jitter(img, strength, rng):
    """Brightness, contrast, saturation (0.8*s) and hue (0.2*s) in that order."""
    b = c = s = 0.8 * strength
    h = 0.2 * strength
    img = img * rng.uniform(1 - b, 1 + b)
    mean = (img @ _GRAY).mean()
    img = (img - mean) * rng.uniform(1 - c, 1 + c) + mean
    gray = grayscale(img)
    img = gray + (img - gray) * rng.uniform(1 - s, 1 + s)
    theta = 2 * math.pi * rng.uniform(-h, h)
    if theta:
        # rotate chroma in YIQ space
        to_yiq = np.array([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]])
        rot = np.array([[1, 0, 0], [0, math.cos(theta), -math.sin(theta)], [0, math.sin(theta), math.cos(theta)]])
        m = np.linalg.inv(to_yiq) @ rot @ to_yiq
        img = img @ m.T
    return np.clip(img, 0.0, 1.0)


def standardize(img):
    return ((img - MEAN) / STD).astype(np.float32)


def augment(image, cfg: AugmentConfig, rng, out_size=None, standardize_output=True):
    """Crop / resize / jitter / grayscale one uint8 image.

    Returns float32 (out, out, 3), channel-standardized unless
    ``standardize_output`` is False (then values are in [0, 1]).
    """
    img = np.asarray(image)
    H, W = img.shape[:2]
    if H < 8 or W < 8:
        raise ImageShapeError(f"image {H}x{W} smaller than 8x8")
    out_size = out_size or H
    x = img.astype(np.float64) / 255.0
    if cfg.crop:
        top, left, h, w = sample_crop(H, W, cfg, rng)
        x = x[top:top + h, left:left + w]
    if x.shape[:2] != (out_size, out_size):
        x = resize_antialias(x, out_size)
    if cfg.jitter and rng.random() < cfg.jitter_prob:
        x = color_jitter(x, cfg.jitter_strength, rng)
    if cfg.gray and rng.random() < cfg.gray_prob:
        x = grayscale(x)
    return standardize(x) if standardize_output else x.astype(np.float32)


def eval_preprocess(image, res, mode="crop"):
    """Evaluation transform returning float32 in [0, 1].

    ``crop``: resize the shorter side to round(res*256/224) then centre-crop
    ``res``; ``direct``: plain resize to res x res.
    """
    image = np.asarray(image)
    x = image.astype(np.float64)
    if image.dtype == np.uint8:
        x /= 255.0
    if mode == "direct":
        if x.shape[:2] != (res, res):
            x = resize_antialias(x, res)
        return x.astype(np.float32)
    if mode != "crop":
        raise ValueError(f"unknown eval mode {mode!r}")
    shorter = _round_half_up(res * 256 / 224)
    if min(x.shape[:2]) != shorter:
        x = resize_shorter(x, shorter)
    return center_crop(x, res).astype(np.float32)


def training_view(image, resolution, cfg, rng):
    """Augmented (or plainly resized) standardized view at ``resolution``."""
    if cfg.crop or cfg.jitter or cfg.gray:
        return augment(image, cfg, rng, out_size=resolution)
    x = np.asarray(image, dtype=np.float64) / 255.0
    if x.shape[:2] != (resolution, resolution):
        x = resize_antialias(x, resolution)
    return standardize(x)
