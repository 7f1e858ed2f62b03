"""Desk-scale decoder-only byte transformer over n residual streams.

Token embeddings are replicated into ``n`` streams; every block applies the
stream update rule twice (once with a causal-attention branch, once with an
MLP branch), each time with its own freshly generated mixing maps; the
streams are averaged back, normalized, and projected to 256 byte logits.

Checkpoints are a self-contained little-endian binary container:

    magic ``HCLB`` | u32 version | u32 config-text length | config text
    (sorted ``key=value`` lines, UTF-8) | u32 array count | per array:
    u32 name length, name bytes, u32 ndim, u64 dims..., raw f64 data.

Round-tripping a checkpoint is byte-exact.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import hyperconn as hx
from .autodiff import DimensionError, Tensor

VOCAB = 256
CHECKPOINT_MAGIC = b"HCLB"
SNAPSHOT_MAGIC = b"HCLS"
CHECKPOINT_VERSION = 1
BASE_INIT_STD = 0.02
MASK_VALUE = -1e30


@dataclass
class ModelConfig:
    layers: int = 4
    heads: int = 4
    channels: int = 128
    streams: int = 4
    context: int = 128
    variant: str = "shc"
    sk_iters: int = 20
    seed: int = 0
    vocab: int = VOCAB

    def __post_init__(self):
        if self.variant not in hx.VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.channels < 1 or self.channels % self.heads != 0:
            raise ValueError(
                f"channels ({self.channels}) must be a positive multiple of heads ({self.heads})"
            )
        if self.streams < 1:
            raise ValueError(f"streams must be >= 1, got {self.streams}")
        if self.context < 1:
            raise ValueError(f"context must be >= 1, got {self.context}")
        if self.layers < 0:
            raise ValueError(f"layers must be >= 0, got {self.layers}")
        if self.variant == "rc" and self.streams != 1:
            raise ValueError("rc is the single-stream baseline; set streams=1")
        if self.vocab != VOCAB:
            raise ValueError(f"byte-level vocabulary is fixed at {VOCAB}")
        if self.sk_iters < 1:
            raise ValueError(f"sk_iters must be >= 1, got {self.sk_iters}")

    def to_text(self) -> str:
        keys = ("layers", "heads", "channels", "streams", "context", "variant", "sk_iters", "seed", "vocab")
        return "".join(f"{k}={getattr(self, k)}\n" for k in sorted(keys))

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kw = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            k, _, v = line.partition("=")
            kw[k] = v if k == "variant" else int(v)
        return cls(**kw)


@dataclass
class Block:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    w_fc: Tensor
    w_proj: Tensor
    norm_attn: Tensor
    norm_mlp: Tensor
    attn_mix: hx.VariantParams
    mlp_mix: hx.VariantParams


@dataclass
class Model:
    config: ModelConfig
    wte: Tensor
    wpe: Tensor
    norm_f: Tensor
    head: Tensor
    blocks: list = field(default_factory=list)

    def param_tensors(self) -> dict:
        """Flat name -> Tensor map covering every learnable array."""
        out = {"wte": self.wte, "wpe": self.wpe, "norm_f": self.norm_f, "head": self.head}
        for i, b in enumerate(self.blocks):
            pre = f"block{i}."
            out[pre + "w_q"] = b.w_q
            out[pre + "w_k"] = b.w_k
            out[pre + "w_v"] = b.w_v
            out[pre + "w_o"] = b.w_o
            out[pre + "w_fc"] = b.w_fc
            out[pre + "w_proj"] = b.w_proj
            out[pre + "norm_attn"] = b.norm_attn
            out[pre + "norm_mlp"] = b.norm_mlp
            for name, t in b.attn_mix.tensors().items():
                out[pre + "attn_mix." + name] = t
            for name, t in b.mlp_mix.tensors().items():
                out[pre + "mlp_mix." + name] = t
        return out

    def param_count(self) -> int:
        return sum(t.size for t in self.param_tensors().values())


def init_model(config: ModelConfig) -> Model:
    """Seeded N(0, 0.02) base weights drawn in a fixed order, so models that
    differ only in variant share identical base weights; mixing-layer
    parameters use the deterministic near-identity initialization."""
    r = np.random.default_rng(config.seed)
    c = config.channels

    def draw(*shape):
        return Tensor(r.normal(0.0, BASE_INIT_STD, shape), requires_grad=True)

    wte = draw(VOCAB, c)
    wpe = draw(config.context, c)
    blocks = []
    for _ in range(config.layers):
        blocks.append(
            Block(
                w_q=draw(c, c),
                w_k=draw(c, c),
                w_v=draw(c, c),
                w_o=draw(c, c),
                w_fc=draw(c, 4 * c),
                w_proj=draw(4 * c, c),
                norm_attn=Tensor(np.ones(c), requires_grad=True),
                norm_mlp=Tensor(np.ones(c), requires_grad=True),
                attn_mix=hx.init_params(config.variant, config.streams, c),
                mlp_mix=hx.init_params(config.variant, config.streams, c),
            )
        )
    head = draw(c, VOCAB)
    return Model(
        config=config,
        wte=wte,
        wpe=wpe,
        norm_f=Tensor(np.ones(c), requires_grad=True),
        head=head,
        blocks=blocks,
    )


def _attention_branch(block: Block, b_sz: int, t_len: int, heads: int, mask: Tensor, probs_sink=None):
    def branch(z: Tensor) -> Tensor:
        c = z.shape[-1]
        hd = c // heads
        zn = ad.rmsnorm(z, block.norm_attn)
        zb = ad.reshape(zn, (b_sz, t_len, c))
        q = ad.permute(ad.reshape(ad.matmul(zb, block.w_q), (b_sz, t_len, heads, hd)), (0, 2, 1, 3))
        k = ad.permute(ad.reshape(ad.matmul(zb, block.w_k), (b_sz, t_len, heads, hd)), (0, 2, 1, 3))
        v = ad.permute(ad.reshape(ad.matmul(zb, block.w_v), (b_sz, t_len, heads, hd)), (0, 2, 1, 3))
        scores = ad.bias_add(ad.scale(ad.matmul(q, ad.permute(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd)), mask)
        probs = ad.softmax(scores, axis=-1)
        if probs_sink is not None:
            probs_sink.append(probs)
        mixed = ad.permute(ad.matmul(probs, v), (0, 2, 1, 3))
        out = ad.matmul(ad.reshape(mixed, (b_sz * t_len, c)), block.w_o)
        return out

    return branch


def _mlp_branch(block: Block):
    def branch(z: Tensor) -> Tensor:
        zn = ad.rmsnorm(z, block.norm_mlp)
        return ad.matmul(ad.gelu(ad.matmul(zn, block.w_fc)), block.w_proj)

    return branch


def causal_mask(t_len: int) -> Tensor:
    """0 where a token may attend (itself and earlier), -1e30 above."""
    m = np.where(np.triu(np.ones((t_len, t_len), dtype=bool), k=1), MASK_VALUE, 0.0)
    return Tensor(m)


def forward(model: Model, tokens, capture: bool = False):
    """Logits for a (T,) or (B, T) int token array; with ``capture=True``
    also returns {"bundles": [(layer, branch_name, MixBundle)...],
    "stream_in": [ndarray (B*T, n, C) state entering each mixing step],
    "attn_probs": [Tensor(B,H,T,T) per layer]}."""
    cfg = model.config
    tok = np.asarray(tokens)
    squeeze = tok.ndim == 1
    if squeeze:
        tok = tok[None, :]
    if tok.ndim != 2:
        raise DimensionError(f"forward: tokens must be (T,) or (B, T), got {tok.shape}")
    b_sz, t_len = tok.shape
    if t_len < 1 or t_len > cfg.context:
        raise ValueError(f"sequence length {t_len} outside [1, {cfg.context}]")
    if tok.min() < 0 or tok.max() >= VOCAB:
        raise ValueError(f"token ids must lie in [0, {VOCAB}), got [{tok.min()}, {tok.max()}]")

    flat = tok.reshape(-1)
    pos = np.tile(np.arange(t_len), b_sz)
    x = ad.add(ad.embedding(model.wte, flat), ad.embedding(model.wpe, pos))  # (B*T, C)
    streams = hx.expand_streams(x, cfg.streams)

    captures = {"bundles": [], "stream_in": [], "attn_probs": []} if capture else None
    mask = causal_mask(t_len)
    probs_sink = captures["attn_probs"] if capture else None
    for i, block in enumerate(model.blocks):
        attn_in = streams
        attn_bundle = hx.generate_bundle(streams, block.attn_mix, cfg.sk_iters)
        streams = hx.hyper_step(
            streams, _attention_branch(block, b_sz, t_len, cfg.heads, mask, probs_sink), attn_bundle
        )
        mlp_in = streams
        mlp_bundle = hx.generate_bundle(streams, block.mlp_mix, cfg.sk_iters)
        streams = hx.hyper_step(streams, _mlp_branch(block), mlp_bundle)
        if capture:
            captures["bundles"].append((i, "attn", attn_bundle))
            captures["bundles"].append((i, "mlp", mlp_bundle))
            captures["stream_in"].append(attn_in.data.copy())
            captures["stream_in"].append(mlp_in.data.copy())

    collapsed = hx.collapse_streams(streams)
    logits = ad.matmul(ad.rmsnorm(collapsed, model.norm_f), model.head)
    logits = ad.reshape(logits, (t_len, VOCAB) if squeeze else (b_sz, t_len, VOCAB))
    return (logits, captures) if capture else logits


def loss_from_logits(logits: Tensor, targets) -> Tensor:
    """Mean next-byte cross-entropy; targets are the tokens shifted by one."""
    targets = np.asarray(targets).reshape(-1)
    flat = ad.reshape(logits, (targets.size, VOCAB))
    return ad.cross_entropy(flat, targets)


# ---------------------------------------------------------------------------
# binary containers (checkpoint and snapshot share the named-array codec)


def _write_named_arrays(buf, arrays: dict) -> None:
    buf.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        data = np.asarray(arrays[name], dtype="<f8", order="C")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", data.ndim))
        for d in data.shape:
            buf.write(struct.pack("<Q", d))
        buf.write(data.tobytes())


def _taker(buf, what: str):
    def take(n, part):
        b = buf.read(n)
        if len(b) != n:
            raise ValueError(f"truncated {what} while reading {part}")
        return b

    return take


def _read_named_arrays(take) -> dict:
    (count,) = struct.unpack("<I", take(4, "array count"))
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4, "ndim"))
        shape = tuple(struct.unpack("<Q", take(8, "dim"))[0] for _ in range(ndim))
        n_bytes = 8 * int(np.prod(shape, dtype=np.int64)) if shape else 8
        arrays[name] = (
            np.frombuffer(take(n_bytes, f"data of {name}"), dtype="<f8")
            .reshape(shape)
            .astype(np.float64)
        )
    return arrays


def save_checkpoint(model: Model, path: str) -> None:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    cfg = model.config.to_text().encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    _write_named_arrays(buf, {k: t.data for k, t in model.param_tensors().items()})
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path: str) -> Model:
    with open(path, "rb") as f:
        buf = io.BytesIO(f.read())
    take = _taker(buf, "checkpoint")
    if take(4, "magic") != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack("<I", take(4, "config length"))
    config = ModelConfig.from_text(take(cfg_len, "config").decode("utf-8"))
    model = init_model(config)
    params = model.param_tensors()
    arrays = _read_named_arrays(take)
    if set(arrays) != set(params):
        missing = sorted(set(params) ^ set(arrays))
        raise ValueError(f"checkpoint arrays do not match the model: {missing[:4]}")
    for name, arr in arrays.items():
        t = params[name]
        if arr.shape != t.shape:
            raise ValueError(
                f"checkpoint array {name!r} has shape {arr.shape}, model expects {t.shape}"
            )
        t.data = arr.copy()
    if buf.read(1):
        raise ValueError("trailing bytes after checkpoint payload")
    return model


def save_snapshot(path: str, arrays: dict) -> None:
    """Named-f64-array snapshot in the same codec as checkpoints."""
    buf = io.BytesIO()
    buf.write(SNAPSHOT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    _write_named_arrays(buf, arrays)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_snapshot(path: str) -> dict:
    with open(path, "rb") as f:
        buf = io.BytesIO(f.read())
    take = _taker(buf, "snapshot")
    if take(4, "magic") != SNAPSHOT_MAGIC:
        raise ValueError("not a snapshot file (bad magic)")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported snapshot version {version}")
    arrays = _read_named_arrays(take)
    if buf.read(1):
        raise ValueError("trailing bytes after snapshot payload")
    return arrays
