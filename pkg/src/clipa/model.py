"""Dual-encoder model: ViT image tower, non-autoregressive text tower.

Also holds the analytic parameter and FLOPs counters and the binary
checkpoint format.  FLOPs follow the usual convention in the vision literature
(one fused multiply-add counts as one FLOP), which is what makes the
per-sample numbers line up with published compute tables.
"""

from __future__ import annotations

import hashlib
import io
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache

import numpy as np

from . import numerics as nx
from .numerics import Tensor

INIT_INV_TEMPERATURE = 1.0 / 0.07
MAX_INV_TEMPERATURE = 100.0


class SequenceOverflowError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    layers: int
    width: int
    heads: int
    mlp_dim: int | None = None
    patch_size: int = 16
    max_len: int = 197
    pooling: str = "gap"
    vocab_size: int = 0

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        if self.pooling not in ("gap", "cls", "eot"):
            raise ValueError(f"unknown pooling {self.pooling!r}")

    @property
    def mlp(self):
        return self.mlp_dim or 4 * self.width


@dataclass(frozen=True)
class ModelConfig:
    name: str
    vision: EncoderConfig
    text: EncoderConfig
    embed_dim: int
    image_size: int = 224

    @property
    def grid(self):
        return self.image_size // self.vision.patch_size

    def to_text(self):
        """Canonical ``key = value`` lines, sorted."""
        flat = {"name": self.name, "embed_dim": self.embed_dim, "image_size": self.image_size}
        for tower in ("vision", "text"):
            for k, v in asdict(getattr(self, tower)).items():
                flat[f"{tower}.{k}"] = v
        return "".join(f"{k} = {flat[k]}\n" for k in sorted(flat))

    @classmethod
    def from_text(cls, text):
        flat = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            k, _, v = line.partition("=")
            flat[k.strip()] = v.strip()
        towers = {}
        for tower in ("vision", "text"):
            kw = {}
            for fname in EncoderConfig.__dataclass_fields__:
                raw = flat[f"{tower}.{fname}"]
                if fname == "pooling":
                    kw[fname] = raw
                elif raw == "None":
                    kw[fname] = None
                else:
                    kw[fname] = int(raw)
            towers[tower] = EncoderConfig(**kw)
        return cls(name=flat["name"], embed_dim=int(flat["embed_dim"]),
                   image_size=int(flat["image_size"]), **towers)


REFERENCE_VOCAB = 32000


def _preset(name, embed, vis, txt, patch, image_size=224, vocab=REFERENCE_VOCAB, vis_mlp=None):
    vl, vw, vh = vis
    tl, tw, th = txt
    n_img = (image_size // patch) ** 2 + 1
    return ModelConfig(
        name=name,
        vision=EncoderConfig(vl, vw, vh, mlp_dim=vis_mlp, patch_size=patch, max_len=n_img, pooling="gap"),
        text=EncoderConfig(tl, tw, th, max_len=32, pooling="cls", vocab_size=vocab),
        embed_dim=embed,
        image_size=image_size,
    )


# Full-scale rows of the model table, plus two desk-scale presets.
PRESETS = {
    "S/16": _preset("S/16", 384, (12, 384, 6), (12, 384, 6), 16),
    "B/16": _preset("B/16", 512, (12, 768, 12), (12, 512, 8), 16),
    "L/16": _preset("L/16", 768, (24, 1024, 16), (12, 768, 12), 16),
    "H/14": _preset("H/14", 1024, (32, 1280, 16), (24, 1024, 16), 14),
    "G/14": _preset("G/14", 1280, (48, 1664, 16), (32, 1280, 20), 14, vis_mlp=8192),
    "tiny": _preset("tiny", 64, (2, 64, 2), (2, 64, 2), 8, image_size=32, vocab=0),
    "mini": _preset("mini", 192, (6, 192, 3), (6, 192, 3), 8, image_size=32, vocab=0),
}


def preset(name, **overrides):
    """Named config; ``overrides`` may set image_size, patch_size, vocab_size, pooling."""
    cfg = PRESETS[name]
    vis_kw, txt_kw, top_kw = {}, {}, {}
    for k, v in overrides.items():
        if k == "patch_size":
            vis_kw[k] = v
        elif k == "vocab_size":
            txt_kw[k] = v
        elif k == "text_max_len":
            txt_kw["max_len"] = v
        elif k in ("pooling",):
            vis_kw[k] = v
        elif k == "text_pooling":
            txt_kw["pooling"] = v
        else:
            top_kw[k] = v
    vision = replace(cfg.vision, **vis_kw)
    cfg = replace(cfg, vision=vision, text=replace(cfg.text, **txt_kw), **top_kw)
    n_img = (cfg.image_size // cfg.vision.patch_size) ** 2 + 1
    return replace(cfg, vision=replace(cfg.vision, max_len=n_img))


# ---------------------------------------------------------------------------
# parameter and compute accounting
# ---------------------------------------------------------------------------

def _block_params(d, m):
    # two layer norms, qkv, out proj, two MLP linears
    return 4 * d + (3 * d * d + 3 * d) + (d * d + d) + (d * m + m) + (m * d + d)


def tower_param_count(enc, embed_dim, kind):
    d = enc.width
    n = enc.layers * _block_params(d, enc.mlp) + 2 * d + d * embed_dim
    if kind == "vision":
        n += 3 * enc.patch_size ** 2 * d + d + d  # patch embed w, b, cls token
    else:
        n += enc.vocab_size * d
    return n


def param_count(cfg, split=False):
    """Exact number of trainable scalars for our parameterization."""
    vis = tower_param_count(cfg.vision, cfg.embed_dim, "vision")
    txt = tower_param_count(cfg.text, cfg.embed_dim, "text")
    if split:
        return {"vision": vis, "text": txt, "total": vis + txt + 1}
    return vis + txt + 1


def tower_flops(enc, n_tokens, embed_dim, kind):
    d, m, n = enc.width, enc.mlp, n_tokens
    per_layer = 4 * n * d * d + 2 * n * n * d + 2 * n * d * m
    total = enc.layers * per_layer + d * embed_dim
    if kind == "vision":
        total += (n - 1) * 3 * enc.patch_size ** 2 * d
    return total


def flops_estimate(cfg, n_img_tokens, n_txt_tokens):
    """Forward GFLOPs per sample (multiply-add = 1 FLOP).

    Per layer: attention ``4 n d^2 + 2 n^2 d`` and MLP ``2 n d m`` (``8 n d^2``
    at the default ratio), plus patch embedding and output projections.
    """
    vis = tower_flops(cfg.vision, n_img_tokens, cfg.embed_dim, "vision")
    txt = tower_flops(cfg.text, n_txt_tokens, cfg.embed_dim, "text")
    return (vis + txt) / 1e9


# ---------------------------------------------------------------------------
# positional embeddings
# ---------------------------------------------------------------------------

def _sincos_1d(dim, pos):
    omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
    out = np.outer(np.asarray(pos, dtype=np.float64).reshape(-1), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


@lru_cache(maxsize=64)
def sincos_2d(gh, gw, dim):
    """(gh*gw, dim) fixed embedding in raster order; half the dims per axis."""
    if dim % 4:
        raise ValueError("2-D sine-cosine embedding needs width divisible by 4")
    rows, cols = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
    emb = np.concatenate([_sincos_1d(dim // 2, rows), _sincos_1d(dim // 2, cols)], axis=1)
    emb.setflags(write=False)
    return emb


@lru_cache(maxsize=16)
def sincos_1d(length, dim):
    emb = _sincos_1d(dim, np.arange(length))
    emb.setflags(write=False)
    return emb


# ---------------------------------------------------------------------------
# the model
# ---------------------------------------------------------------------------

def _xavier(rng, fan_in, fan_out, dtype):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out)).astype(dtype)


def _init_tower(prefix, enc, embed_dim, kind, rng, dtype):
    d, m = enc.width, enc.mlp
    p = {}
    if kind == "vision":
        pdim = 3 * enc.patch_size ** 2
        p[f"{prefix}.patch.w"] = _xavier(rng, pdim, d, dtype)
        p[f"{prefix}.patch.b"] = np.zeros(d, dtype)
        p[f"{prefix}.cls"] = (0.02 * rng.standard_normal(d)).astype(dtype)
    else:
        # unit scale so token identity is not swamped by the sine-cosine positions
        p[f"{prefix}.tok"] = rng.standard_normal((enc.vocab_size, d)).astype(dtype)
    for i in range(enc.layers):
        b = f"{prefix}.blk{i}"
        p[f"{b}.ln1.g"] = np.ones(d, dtype)
        p[f"{b}.ln1.b"] = np.zeros(d, dtype)
        p[f"{b}.qkv.w"] = _xavier(rng, d, 3 * d, dtype)
        p[f"{b}.qkv.b"] = np.zeros(3 * d, dtype)
        p[f"{b}.out.w"] = _xavier(rng, d, d, dtype)
        p[f"{b}.out.b"] = np.zeros(d, dtype)
        p[f"{b}.ln2.g"] = np.ones(d, dtype)
        p[f"{b}.ln2.b"] = np.zeros(d, dtype)
        p[f"{b}.fc1.w"] = _xavier(rng, d, m, dtype)
        p[f"{b}.fc1.b"] = np.zeros(m, dtype)
        p[f"{b}.fc2.w"] = _xavier(rng, m, d, dtype)
        p[f"{b}.fc2.b"] = np.zeros(d, dtype)
    p[f"{prefix}.ln.g"] = np.ones(d, dtype)
    p[f"{prefix}.ln.b"] = np.zeros(d, dtype)
    p[f"{prefix}.proj"] = (rng.standard_normal((d, embed_dim)) / math.sqrt(d)).astype(dtype)
    return p


class DualEncoder:
    """Image and text towers sharing an embedding space.

    Parameters live in ``self.params`` (name -> :class:`Tensor`), in a fixed
    insertion order that checkpoints and the optimizer rely on.
    """

    def __init__(self, config, seed=0, dtype=nx.DEFAULT_DTYPE):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = nx.rng_stream(seed, "init")
        raw = {}
        raw.update(_init_tower("vis", config.vision, config.embed_dim, "vision", rng, self.dtype))
        raw.update(_init_tower("txt", config.text, config.embed_dim, "text", rng, self.dtype))
        raw["log_inv_tau"] = np.array(math.log(INIT_INV_TEMPERATURE), dtype=self.dtype)
        self.params = {k: nx.parameter(v, name=k) for k, v in raw.items()}

    # -- helpers ----------------------------------------------------------
    def no_decay_names(self):
        """1-D gains/biases, the CLS token and the temperature skip weight decay."""
        return frozenset(k for k, p in self.params.items() if p.ndim <= 1)

    def n_params(self):
        return int(np.sum([p.data.size for p in self.params.values()]))

    def inv_temperature(self):
        return float(np.exp(self.params["log_inv_tau"].data))

    def clamp_temperature(self):
        p = self.params["log_inv_tau"]
        cap = math.log(MAX_INV_TEMPERATURE)
        if p.data > cap:
            p.data = np.array(cap, dtype=self.dtype)

    def _block(self, x, prefix, heads, mask):
        P = self.params
        B, n, d = x.shape
        dh = d // heads
        h = nx.layer_norm(x, P[f"{prefix}.ln1.g"], P[f"{prefix}.ln1.b"])
        qkv = nx.linear(h, P[f"{prefix}.qkv.w"], P[f"{prefix}.qkv.b"])
        qkv = nx.transpose(nx.reshape(qkv, (B, n, 3, heads, dh)), (2, 0, 3, 1, 4))
        q, k, v = (nx.take(qkv, i, axis=0) for i in range(3))
        a = nx.attention(q, k, v, mask)
        a = nx.reshape(nx.transpose(a, (0, 2, 1, 3)), (B, n, d))
        x = nx.add(x, nx.linear(a, P[f"{prefix}.out.w"], P[f"{prefix}.out.b"]))
        h = nx.layer_norm(x, P[f"{prefix}.ln2.g"], P[f"{prefix}.ln2.b"])
        h = nx.gelu(nx.linear(h, P[f"{prefix}.fc1.w"], P[f"{prefix}.fc1.b"]))
        return nx.add(x, nx.linear(h, P[f"{prefix}.fc2.w"], P[f"{prefix}.fc2.b"]))

    # -- towers -----------------------------------------------------------
    def image_features(self, patches, indices, grid):
        """Unit-norm image embeddings.

        patches: (B, k, 3*p*p) pixel vectors; indices: (B, k) flat raster
        positions of those patches in a ``grid`` = (rows, cols) patch grid.
        """
        enc = self.config.vision
        P = self.params
        patches = np.asarray(patches, dtype=self.dtype)
        B, k, pdim = patches.shape
        if k + 1 > enc.max_len:
            raise SequenceOverflowError(f"image sequence {k + 1} exceeds tower capacity {enc.max_len}")
        if pdim != 3 * enc.patch_size ** 2:
            raise nx.ShapeError("image_features", patches.shape, (3 * enc.patch_size ** 2,))
        pos = sincos_2d(grid[0], grid[1], enc.width)[np.asarray(indices)].astype(self.dtype)
        x = nx.linear(Tensor(patches), P["vis.patch.w"], P["vis.patch.b"])
        x = nx.add(x, Tensor(pos))
        cls = nx.broadcast_to(nx.reshape(P["vis.cls"], (1, 1, enc.width)), (B, 1, enc.width))
        x = nx.concat([cls, x], axis=1)
        for i in range(enc.layers):
            x = self._block(x, f"vis.blk{i}", enc.heads, None)
        if enc.pooling == "gap":
            pooled = nx.mean(nx.take(x, np.arange(1, k + 1), axis=1), axis=1)
            pooled = nx.layer_norm(pooled, P["vis.ln.g"], P["vis.ln.b"])
        else:
            x = nx.layer_norm(x, P["vis.ln.g"], P["vis.ln.b"])
            pooled = nx.take(x, 0, axis=1)
        return nx.l2_normalize(nx.matmul(pooled, P["vis.proj"]))

    def text_features(self, ids, lengths):
        """Unit-norm text embeddings for PAD-filled ``ids`` (B, L)."""
        enc = self.config.text
        P = self.params
        ids = np.asarray(ids)
        lengths = np.asarray(lengths)
        B, L = ids.shape
        if L > enc.max_len:
            raise SequenceOverflowError(f"text sequence {L} exceeds tower capacity {enc.max_len}")
        x = nx.embedding(P["txt.tok"], ids)
        x = nx.add(x, Tensor(sincos_1d(L, enc.width).astype(self.dtype)))
        visible = np.arange(L)[None, :] < lengths[:, None]
        mask = np.where(visible, 0.0, -np.inf).astype(self.dtype)[:, None, None, :]
        for i in range(enc.layers):
            x = self._block(x, f"txt.blk{i}", enc.heads, mask)
        x = nx.layer_norm(x, P["txt.ln.g"], P["txt.ln.b"])
        if enc.pooling == "eot":
            rows = nx.reshape(x, (B * L, enc.width))
            pooled = nx.take(rows, np.arange(B) * L + (lengths - 1), axis=0)
        else:
            pooled = nx.take(x, 0, axis=1)
        return nx.l2_normalize(nx.matmul(pooled, P["txt.proj"]))

    def encode_image(self, patchset):
        """Embedding (d,) for a single :class:`~clipa.imagepipe.PatchSet`."""
        flat = patchset.flat_indices()
        emb = self.image_features(patchset.patches[None], flat[None], patchset.grid)
        return emb.data[0]

    def encode_text(self, tokens):
        """Embedding (d,) for a single :class:`~clipa.textpipe.TokenizedText`."""
        L = max(int(tokens.true_length), 1)
        emb = self.text_features(np.asarray(tokens.ids)[None, :L], np.array([L]))
        return emb.data[0]

    def logits(self, img_emb, txt_emb, inv_temperature=None):
        """(n, n) logits; ``inv_temperature`` overrides the learned scale (test hook)."""
        sim = nx.matmul(img_emb, nx.transpose(txt_emb, (1, 0)))
        if inv_temperature is not None:
            return nx.mul(sim, float(inv_temperature))
        return nx.mul(sim, nx.exp(self.params["log_inv_tau"]))

    # -- serialization ----------------------------------------------------
    def state_arrays(self):
        return {k: p.data for k, p in self.params.items()}

    def load_arrays(self, arrays):
        for k, p in self.params.items():
            a = arrays[k]
            if a.shape != p.shape:
                raise nx.ShapeError(f"load {k}", p.shape, a.shape)
            p.data = np.array(a, dtype=self.dtype)


def similarity_logits(img_embs, txt_embs, inv_temperature):
    """``inv_temperature * img @ txt.T`` on plain arrays."""
    return inv_temperature * np.asarray(img_embs) @ np.asarray(txt_embs).T


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"CLPC"
CKPT_VERSION = 1
_DTYPES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2}
_DTYPES_INV = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, model, optimizer=None, meta=None):
    """Write model (and optionally optimizer) state; returns the sha256 hex digest.

    Layout: magic, u16 version, u32 text length, text block (config lines then
    ``meta.*`` lines), u32 tensor count, directory entries, raw payloads.
    """
    tensors = dict(model.state_arrays())
    meta = dict(meta or {})
    if optimizer is not None:
        meta["opt.t"] = optimizer.t
        meta["opt.beta1"], meta["opt.beta2"] = optimizer.betas
        meta["opt.eps"] = optimizer.eps
        meta["opt.weight_decay"] = optimizer.weight_decay
        for k in model.params:
            if k in optimizer.m:
                tensors[f"opt.m.{k}"] = optimizer.m[k]
                tensors[f"opt.v.{k}"] = optimizer.v[k]
    text = model.config.to_text() + "".join(f"meta.{k} = {meta[k]}\n" for k in sorted(meta))
    blob = _encode(text, tensors)
    with open(path, "wb") as fh:
        fh.write(blob)
    return hashlib.sha256(blob).hexdigest()


def _encode(text, tensors):
    body = text.encode("utf-8")
    head = io.BytesIO()
    head.write(CKPT_MAGIC)
    head.write(struct.pack("<HI", CKPT_VERSION, len(body)))
    head.write(body)
    head.write(struct.pack("<I", len(tensors)))
    arrays = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        arrays.append((name, np.asarray(arr, order="C")))
    dir_size = 0
    for name, arr in arrays:
        dir_size += 2 + len(name.encode()) + 1 + 1 + 4 * arr.ndim + 8 + 8
    offset = head.tell() + dir_size
    for name, arr in arrays:
        nb = name.encode()
        head.write(struct.pack("<H", len(nb)))
        head.write(nb)
        head.write(struct.pack("<BB", _DTYPES[arr.dtype], arr.ndim))
        head.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        head.write(struct.pack("<QQ", offset, arr.nbytes))
        offset += arr.nbytes
    for _, arr in arrays:
        head.write(arr.tobytes())
    return head.getvalue()


def read_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    version, tlen = struct.unpack_from("<HI", blob, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 10
    text = blob[pos:pos + tlen].decode("utf-8")
    pos += tlen
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + nlen].decode()
        pos += nlen
        code, ndim = struct.unpack_from("<BB", blob, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        offset, nbytes = struct.unpack_from("<QQ", blob, pos)
        pos += 16
        if offset + nbytes > len(blob):
            raise CheckpointError(f"{path}: tensor {name} truncated")
        dt = _DTYPES_INV[code]
        tensors[name] = np.frombuffer(blob, dtype=dt, count=nbytes // dt.itemsize, offset=offset).reshape(shape)
    cfg_lines, meta = [], {}
    for line in text.splitlines():
        if line.startswith("meta."):
            k, _, v = line[5:].partition("=")
            meta[k.strip()] = v.strip()
        else:
            cfg_lines.append(line)
    return Checkpoint(ModelConfig.from_text("\n".join(cfg_lines)), tensors, meta)


def load_checkpoint(path, optimizer=None):
    """Rebuild a :class:`DualEncoder` (and fill ``optimizer``) from ``path``."""
    ck = read_checkpoint(path)
    sample = ck.tensors["log_inv_tau"]
    model = DualEncoder(ck.config, seed=0, dtype=sample.dtype)
    model.load_arrays(ck.tensors)
    if optimizer is not None and "opt.t" in ck.meta:
        optimizer.t = int(ck.meta["opt.t"])
        optimizer.betas = (float(ck.meta["opt.beta1"]), float(ck.meta["opt.beta2"]))
        optimizer.eps = float(ck.meta["opt.eps"])
        optimizer.weight_decay = float(ck.meta["opt.weight_decay"])
        for k in model.params:
            if f"opt.m.{k}" in ck.tensors:
                optimizer.m[k] = np.array(ck.tensors[f"opt.m.{k}"])
                optimizer.v[k] = np.array(ck.tensors[f"opt.v.{k}"])
    return model, ck
