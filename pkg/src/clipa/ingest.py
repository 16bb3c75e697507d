"""Image-caption shards, the procedural shape dataset and batch iteration.

Shard layout (all little-endian)::

    "CLPA" | version u16 | H u16 | W u16 | count u32 | flags u32
    repeated count times:
        class_id i32 | caption_len u32 | caption utf-8 | H*W*3 uint8 pixels
"""

from __future__ import annotations

import hashlib
import struct
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .numerics import rng_stream

SHARD_MAGIC = b"CLPA"
SHARD_VERSION = 1
_HEADER = struct.Struct("<4sHHHII")
_REC = struct.Struct("<iI")


class ShardError(ValueError):
    """Malformed or inconsistent shard file."""


class ConfigError(ValueError):
    pass


@dataclass
class PairRecord:
    image: np.ndarray  # (H, W, 3) uint8
    caption: str
    class_id: int = -1

    def __post_init__(self):
        self.image = np.ascontiguousarray(self.image, dtype=np.uint8)
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ShardError(f"image must be HxWx3, got {self.image.shape}")
        if not self.caption:
            raise ShardError("caption must be non-empty")

    def __eq__(self, other):
        return (
            isinstance(other, PairRecord)
            and self.class_id == other.class_id
            and self.caption == other.caption
            and self.image.shape == other.image.shape
            and self.image.tobytes() == other.image.tobytes()
        )


def encode_shard(records: Sequence[PairRecord], size=None, flags=0) -> bytes:
    if size is None:
        if not records:
            raise ShardError("empty shard needs an explicit (H, W)")
        size = records[0].image.shape[:2]
    h, w = size
    parts = [_HEADER.pack(SHARD_MAGIC, SHARD_VERSION, h, w, len(records), flags)]
    for i, r in enumerate(records):
        if r.image.shape != (h, w, 3):
            raise ShardError(f"record {i}: image {r.image.shape} does not match header {(h, w, 3)}")
        cap = r.caption.encode("utf-8")
        parts.append(_REC.pack(r.class_id, len(cap)))
        parts.append(cap)
        parts.append(r.image.tobytes())
    return b"".join(parts)


def write_shard(path, records, size=None, flags=0):
    """Write ``records`` to ``path``; returns the sha256 of the file bytes."""
    blob = encode_shard(records, size, flags)
    with open(path, "wb") as fh:
        fh.write(blob)
    return hashlib.sha256(blob).hexdigest()


class Shard:
    """In-memory shard with O(1) random access to records."""

    def __init__(self, blob: bytes, name="<bytes>"):
        if len(blob) < _HEADER.size:
            raise ShardError(f"{name}: file shorter than header ({len(blob)} bytes)")
        magic, version, h, w, count, flags = _HEADER.unpack_from(blob, 0)
        if magic != SHARD_MAGIC:
            raise ShardError(f"{name}: bad magic {magic!r}")
        if version != SHARD_VERSION:
            raise ShardError(f"{name}: unsupported version {version}")
        self.blob = blob
        self.name = name
        self.height, self.width, self.count, self.flags = h, w, count, flags
        img_bytes = h * w * 3
        offsets = []
        pos = _HEADER.size
        while len(offsets) < count and pos + _REC.size <= len(blob):
            _, clen = _REC.unpack_from(blob, pos)
            end = pos + _REC.size + clen + img_bytes
            if end > len(blob):
                break
            offsets.append(pos)
            pos = end
        if len(offsets) != count:
            raise ShardError(
                f"{name}: truncated shard, header declares {count} records but only {len(offsets)} present"
            )
        if pos != len(blob):
            raise ShardError(f"{name}: {len(blob) - pos} trailing bytes after {count} records")
        self._offsets = np.asarray(offsets, dtype=np.int64)

    @classmethod
    def open(cls, path):
        with open(path, "rb") as fh:
            return cls(fh.read(), name=str(path))

    def __len__(self):
        return self.count

    def checksum(self):
        return hashlib.sha256(self.blob).hexdigest()

    def _parts(self, i):
        pos = int(self._offsets[i])
        cid, clen = _REC.unpack_from(self.blob, pos)
        cap_at = pos + _REC.size
        return cid, cap_at, clen

    def image(self, i):
        cid, cap_at, clen = self._parts(i)
        n = self.height * self.width * 3
        return np.frombuffer(self.blob, np.uint8, n, cap_at + clen).reshape(self.height, self.width, 3)

    def caption(self, i):
        _, cap_at, clen = self._parts(i)
        return self.blob[cap_at:cap_at + clen].decode("utf-8")

    def class_id(self, i):
        return self._parts(i)[0]

    def __getitem__(self, i):
        return PairRecord(self.image(i), self.caption(i), self.class_id(i))

    def __iter__(self):
        for i in range(self.count):
            yield self[i]

    def class_ids(self):
        return np.array([self.class_id(i) for i in range(self.count)], dtype=np.int64)


def read_shard(path):
    return list(Shard.open(path))


# ---------------------------------------------------------------------------
# synthetic shapes
# ---------------------------------------------------------------------------

PALETTE = {
    "red": (220, 40, 40),
    "green": (40, 190, 70),
    "blue": (50, 90, 230),
    "yellow": (235, 215, 40),
    "purple": (150, 60, 200),
    "orange": (245, 140, 30),
    "white": (235, 235, 235),
    "pink": (245, 130, 190),
}

SHAPES = ("circle", "square", "triangle", "diamond", "cross", "ring")

DEFAULT_TEMPLATES = (
    "a {color} {shape}",
    "a {size} {color} {shape}",
    "a photo of a {color} {shape}",
    "a {color} {shape} on a dark background",
    "a {size} {color} {shape} in the {pos}",
    "the {shape} is {color}",
    "there is a {color} {shape} in the picture",
    "a {color} {shape} next to a small {dcolor} {dshape}",
    "picture of one {color} {shape}",
    "a simple drawing of a {size} {color} {shape}",
)


@dataclass
class SynthConfig:
    seed: int = 0
    count: int = 1000
    image_size: int = 32
    shapes: tuple = ("circle", "square", "triangle")
    colors: tuple = ("red", "green", "blue", "yellow")
    templates: tuple = DEFAULT_TEMPLATES
    distractors: tuple = (0, 2)
    target_scale: tuple = (0.45, 0.75)
    distractor_scale: tuple = (0.12, 0.2)
    noise: float = 6.0

    def __post_init__(self):
        self.shapes = tuple(self.shapes)
        self.colors = tuple(self.colors)
        self.templates = tuple(self.templates)
        if not self.shapes or not self.colors or not self.templates:
            raise ConfigError("shape, color and template vocabularies must be non-empty")
        unknown = [s for s in self.shapes if s not in SHAPES]
        unknown += [c for c in self.colors if c not in PALETTE]
        if unknown:
            raise ConfigError(f"unknown vocabulary entries: {unknown}")
        if self.image_size < 8:
            raise ConfigError("image_size must be at least 8")

    @property
    def n_classes(self):
        return len(self.shapes) * len(self.colors)

    def class_id(self, color, shape):
        return self.colors.index(color) * len(self.shapes) + self.shapes.index(shape)

    def class_names(self):
        return [f"{c} {s}" for c in self.colors for s in self.shapes]


def shape_mask(shape, size, cy, cx, extent):
    """Boolean (size, size) mask of ``shape`` centred at (cy, cx), bbox side ``extent``."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy = (yy - cy) / (extent / 2.0)
    dx = (xx - cx) / (extent / 2.0)
    if shape == "circle":
        return dx * dx + dy * dy <= 1.0
    if shape == "square":
        return (np.abs(dx) <= 0.9) & (np.abs(dy) <= 0.9)
    if shape == "triangle":
        # apex up, base on the bottom edge of the box
        return (dy <= 1.0) & (np.abs(dx) <= (dy + 1.0) / 2.0)
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= 1.0
    if shape == "cross":
        return ((np.abs(dx) <= 0.3) & (np.abs(dy) <= 1.0)) | ((np.abs(dy) <= 0.3) & (np.abs(dx) <= 1.0))
    if shape == "ring":
        r2 = dx * dx + dy * dy
        return (r2 <= 1.0) & (r2 >= 0.36)
    raise ConfigError(f"unknown shape {shape!r}")


def _position_word(cy, cx, size):
    third = size / 3.0
    row = ("top", "middle", "bottom")[min(int(cy // third), 2)]
    col = ("left", "center", "right")[min(int(cx // third), 2)]
    if row == "middle" and col == "center":
        return "center"
    if row == "middle":
        return f"{col} side"
    return f"{row} {col}"


def synth_record(cfg: SynthConfig, index: int) -> PairRecord:
    rng = rng_stream(cfg.seed, "synth", index)
    n = cfg.image_size
    bg = rng.integers(15, 70, size=3)
    img = np.empty((n, n, 3), dtype=np.float64)
    img[:] = bg
    color = cfg.colors[rng.integers(len(cfg.colors))]
    shape = cfg.shapes[rng.integers(len(cfg.shapes))]
    others = [c for c in cfg.colors if c != color] or list(PALETTE)
    n_dis = int(rng.integers(cfg.distractors[0], cfg.distractors[1] + 1))
    dis = []
    for _ in range(n_dis):
        ext = rng.uniform(*cfg.distractor_scale) * n
        cy, cx = rng.uniform(ext / 2, n - ext / 2, size=2)
        dcol = others[rng.integers(len(others))]
        dshape = cfg.shapes[rng.integers(len(cfg.shapes))]
        img[shape_mask(dshape, n, cy, cx, ext)] = PALETTE[dcol]
        dis.append((dcol, dshape))
    ext = rng.uniform(*cfg.target_scale) * n
    cy, cx = rng.uniform(ext / 2, n - ext / 2, size=2)
    img[shape_mask(shape, n, cy, cx, ext)] = PALETTE[color]
    if cfg.noise:
        img += rng.normal(0.0, cfg.noise, size=img.shape)
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)

    templates = [t for t in cfg.templates if dis or "{d" not in t]
    tpl = templates[rng.integers(len(templates))]
    size_word = "large" if ext >= 0.6 * n else "medium"
    dcol, dshape = dis[0] if dis else ("", "")
    caption = tpl.format(color=color, shape=shape, size=size_word, pos=_position_word(cy, cx, n),
                         dcolor=dcol, dshape=dshape)
    return PairRecord(img, caption, cfg.class_id(color, shape))


def synth_generate(cfg: SynthConfig, out=None):
    """Render ``cfg.count`` records; write them to ``out`` when given.

    Returns the list of records (and the file checksum as a second value
    when ``out`` is set).
    """
    records = [synth_record(cfg, i) for i in range(cfg.count)]
    if out is None:
        return records
    digest = write_shard(out, records, size=(cfg.image_size, cfg.image_size))
    return records, digest


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

class Batch(NamedTuple):
    images: np.ndarray  # (B, H, W, 3) uint8
    captions: list
    class_ids: np.ndarray
    indices: np.ndarray
    epoch: int
    step: int


def epoch_permutation(n, seed, epoch):
    return rng_stream(seed, "shuffle", epoch).permutation(n)


def batches_per_epoch(n, batch_size):
    return n // batch_size


def _load(shard, idx, epoch, step):
    images = np.stack([shard.image(i) for i in idx])
    return Batch(images, [shard.caption(i) for i in idx],
                 np.array([shard.class_id(i) for i in idx]), idx, epoch, step)


def iterate_batches(shard, batch_size, seed, epochs=1, workers=0, prefetch=4,
                    max_steps=None) -> Iterator[Batch]:
    """Seeded shuffled batches; the final partial batch of each epoch is dropped.

    With ``workers > 0`` records are decoded on a thread pool but batches are
    still yielded in the seeded order.
    """
    n = len(shard)
    if n == 0:
        return
    if batch_size < 2:
        raise ConfigError("batch_size must be >= 2 for a contrastive loss")
    if batch_size > n:
        raise ConfigError(f"batch_size {batch_size} exceeds record count {n}")
    per_epoch = batches_per_epoch(n, batch_size)

    def plan():
        step = 0
        for e in range(epochs):
            perm = epoch_permutation(n, seed, e)
            for b in range(per_epoch):
                if max_steps is not None and step >= max_steps:
                    return
                yield perm[b * batch_size:(b + 1) * batch_size], e, step
                step += 1

    if workers <= 0:
        for idx, e, step in plan():
            yield _load(shard, idx, e, step)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        pending = deque()
        for item in plan():
            pending.append(pool.submit(_load, shard, *item))
            if len(pending) >= prefetch:
                yield pending.popleft().result()
        while pending:
            yield pending.popleft().result()
