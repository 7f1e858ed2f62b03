"""Deterministic desk-scale training loop.

Byte corpus in, JSON-lines metrics out: uniformly sampled causal windows
from the leading 90% of the corpus, fixed evenly spaced windows from the
held-out tail for validation, AdamW with decoupled decay on matrix weights
only, linear-warmup cosine learning rate, global-norm gradient clipping,
periodic mixing-map snapshots, and a final self-contained checkpoint.

Two runs with the same config produce the same batches, losses, gradient
norms, and learning rates; only the wall-time field differs.
"""

from __future__ import annotations

import json
import math
import os
import queue
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as kn
from . import autodiff as ad
from . import model as md

ADAM_EPS = 1e-8
VAL_FRACTION = 0.1
MAX_VAL_WINDOWS = 64
METRICS_KEYS = ("step", "loss", "val_loss", "grad_norm", "lr", "ms")


class NanLossError(RuntimeError):
    """Raised when the training loss stops being finite."""

    def __init__(self, step: int, value: float, dump_path: str | None):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
        self.dump_path = dump_path


@dataclass
class TrainConfig:
    batch_size: int = 16
    grad_accum: int = 1
    iterations: int = 2000
    warmup: int = 100
    lr_max: float = 3e-3
    lr_min: float = 3e-4
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    clip_norm: float = 1.0
    eval_interval: int = 100
    corpus: str = ""
    out_dir: str = ""
    seed: int = 0
    prefetch: bool = False

    def __post_init__(self):
        if self.lr_min > self.lr_max:
            raise ValueError(f"lr_min ({self.lr_min}) must not exceed lr_max ({self.lr_max})")
        if self.warmup > self.iterations:
            raise ValueError(f"warmup ({self.warmup}) must not exceed iterations ({self.iterations})")
        if self.iterations < 0 or self.warmup < 0:
            raise ValueError("iterations and warmup must be nonnegative")
        if self.batch_size < 1 or self.grad_accum < 1:
            raise ValueError("batch_size and grad_accum must be positive")
        if self.clip_norm <= 0:
            raise ValueError(f"clip_norm must be positive, got {self.clip_norm}")
        if self.eval_interval < 1:
            raise ValueError(f"eval_interval must be positive, got {self.eval_interval}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError(f"betas must lie in [0, 1), got ({self.beta1}, {self.beta2})")


# ---------------------------------------------------------------------------
# learning-rate schedule


def cosine_lr(step: int, cfg: TrainConfig) -> float:
    """Linear ramp over the warmup steps (step-based, so step 0 -> 0 and
    step == warmup -> lr_max), cosine from lr_max to lr_min over the
    remaining horizon, lr_min afterwards."""
    if step < 0:
        raise ValueError(f"step must be nonnegative, got {step}")
    if step < cfg.warmup:
        return cfg.lr_max * step / cfg.warmup
    if step >= cfg.iterations:
        return cfg.lr_min
    progress = (step - cfg.warmup) / (cfg.iterations - cfg.warmup)
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# optimizer


def decays(name: str, tensor: ad.Tensor) -> bool:
    """Decoupled weight decay applies to matrix weights only — projection
    matrices, embeddings, and the output head — never to biases, norm
    gains, or scalar gates (even matrix-shaped biases are excluded)."""
    leaf = name.rsplit(".", 1)[-1]
    return tensor.ndim >= 2 and (leaf.startswith("w") or leaf == "head")


@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, state: AdamState, lr: float, cfg: TrainConfig) -> None:
    """One fused AdamW update, in place, in sorted parameter order.
    Missing gradients count as zero (decay still applies)."""
    state.t += 1
    bc1 = 1.0 - cfg.beta1 ** state.t
    bc2 = 1.0 - cfg.beta2 ** state.t
    for name in sorted(params):
        t = params[name]
        if name not in state.m:
            state.m[name] = np.zeros(t.size)
            state.v[name] = np.zeros(t.size)
        g = t.grad.reshape(-1) if t.grad is not None else np.zeros(t.size)
        wd = cfg.weight_decay if decays(name, t) else 0.0
        kn.adamw_update(
            t.data.reshape(-1), g, state.m[name], state.v[name],
            lr, cfg.beta1, cfg.beta2, ADAM_EPS, wd, bc1, bc2,
        )


def clip_gradients(params: dict, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm;
    returns the pre-clip norm. Accumulation runs in sorted name order."""
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    total = 0.0
    for name in sorted(params):
        g = params[name].grad
        if g is not None:
            total += float((g * g).sum())
    global_norm = math.sqrt(total)
    if global_norm > max_norm:
        scale = max_norm / global_norm
        for name in sorted(params):
            g = params[name].grad
            if g is not None:
                g *= scale
    return global_norm


# ---------------------------------------------------------------------------
# data


def load_corpus(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        return np.frombuffer(f.read(), dtype=np.uint8)


def split_corpus(data: np.ndarray, t_len: int):
    """Leading 90% for training, trailing 10% held out; windows never cross
    the boundary. Errors when either side cannot fit one (T+1)-byte window."""
    boundary = int(len(data) * (1.0 - VAL_FRACTION))
    if boundary < t_len + 1 or len(data) - boundary < t_len + 1:
        raise ValueError(
            f"corpus of {len(data)} bytes too small for context {t_len} plus a held-out tail"
        )
    return data[:boundary], data[boundary:]


def sample_batch(region: np.ndarray, t_len: int, batch: int, rng: np.random.Generator):
    """Uniformly sampled (tokens, targets) windows; targets shifted by one."""
    max_start = len(region) - (t_len + 1)
    starts = rng.integers(0, max_start + 1, size=batch)
    tokens = np.stack([region[s : s + t_len] for s in starts]).astype(np.int64)
    targets = np.stack([region[s + 1 : s + t_len + 1] for s in starts]).astype(np.int64)
    return tokens, targets


def val_windows(region: np.ndarray, t_len: int, count: int = MAX_VAL_WINDOWS):
    """Fixed, evenly spaced validation windows — deterministic without
    consuming the training RNG."""
    max_start = len(region) - (t_len + 1)
    count = min(count, max_start + 1)
    starts = np.unique(np.linspace(0, max_start, count).round().astype(np.int64))
    tokens = np.stack([region[s : s + t_len] for s in starts]).astype(np.int64)
    targets = np.stack([region[s + 1 : s + t_len + 1] for s in starts]).astype(np.int64)
    return tokens, targets


# ---------------------------------------------------------------------------
# loop


def _evaluate(model, tokens, targets, batch: int) -> float:
    total, count = 0.0, 0
    with ad.no_grad():
        for i in range(0, len(tokens), batch):
            x, y = tokens[i : i + batch], targets[i : i + batch]
            loss = md.loss_from_logits(md.forward(model, x), y)
            total += loss.item() * len(x)
            count += len(x)
    return total / count


def _snapshot_bundles(model, tokens, path: str) -> None:
    with ad.no_grad():
        _, caps = md.forward(model, tokens, capture=True)
    arrays = {}
    for (layer, which, bundle), x_in in zip(caps["bundles"], caps["stream_in"]):
        for part in ("h_pre", "h_post", "h_res"):
            arrays[f"layer{layer}.{which}.{part}"] = getattr(bundle, part).data
        arrays[f"layer{layer}.{which}.x_in"] = x_in
    md.save_snapshot(path, arrays)


def _batch_stream(train_region, cfg: TrainConfig, t_len: int):
    """Yields one (tokens, targets) pair per micro-step, in a fixed order
    determined solely by the seed. With prefetch enabled, a single worker
    computes the next batch ahead of time through a depth-1 queue; the
    content of the stream is identical either way."""
    rng = np.random.default_rng(cfg.seed)
    total = cfg.iterations * cfg.grad_accum

    def produce():
        for _ in range(total):
            yield sample_batch(train_region, t_len, cfg.batch_size, rng)

    if not cfg.prefetch:
        yield from produce()
        return

    q: queue.Queue = queue.Queue(maxsize=1)
    done = object()

    def worker():
        for item in produce():
            q.put(item)
        q.put(done)

    thread = threading.Thread(target=worker, daemon=True)
    thread.start()
    while True:
        item = q.get()
        if item is done:
            break
        yield item
    thread.join()


def train_loop(model, cfg: TrainConfig, corpus: np.ndarray | None = None):
    """Run cfg.iterations optimizer steps; returns the list of metric rows.

    Side effects in cfg.out_dir (when set): metrics.jsonl (one row per step),
    bundles_<step>.snap mixing-map snapshots at every eval, model.ckpt at the
    end, and nan_dump.json if the loss stops being finite (then raises
    NanLossError)."""
    t_len = model.config.context
    if corpus is None:
        corpus = load_corpus(cfg.corpus)
    train_region, val_region = split_corpus(corpus, t_len)
    vx, vy = val_windows(val_region, t_len)

    params = model.param_tensors()
    state = AdamState()
    out = cfg.out_dir
    metrics_file = None
    if out:
        os.makedirs(out, exist_ok=True)
        metrics_file = open(os.path.join(out, "metrics.jsonl"), "w")

    rows = []
    mixing = model.config.layers > 0
    try:
        stream = _batch_stream(train_region, cfg, t_len)
        for step in range(1, cfg.iterations + 1):
            t0 = time.perf_counter()
            for p in params.values():
                p.grad = None

            loss_sum = 0.0
            for _ in range(cfg.grad_accum):
                x, y = next(stream)
                loss = md.loss_from_logits(md.forward(model, x), y)
                loss_sum += loss.item()
                if cfg.grad_accum > 1:
                    loss = ad.scale(loss, 1.0 / cfg.grad_accum)
                loss.backward()
            mean_loss = loss_sum / cfg.grad_accum

            if not math.isfinite(mean_loss):
                dump_path = None
                if out:
                    dump_path = os.path.join(out, "nan_dump.json")
                    with open(dump_path, "w") as f:
                        json.dump(
                            {
                                "step": step,
                                "loss": repr(mean_loss),
                                "lr": cosine_lr(step, cfg),
                                "last_finite_loss": rows[-1]["loss"] if rows else None,
                                "variant": model.config.variant,
                                "seed": cfg.seed,
                            },
                            f,
                            indent=2,
                        )
                raise NanLossError(step, mean_loss, dump_path)

            grad_norm = clip_gradients(params, cfg.clip_norm)
            lr = cosine_lr(step, cfg)
            adamw_step(params, state, lr, cfg)

            val_loss = None
            if step % cfg.eval_interval == 0 or step == cfg.iterations:
                val_loss = _evaluate(model, vx, vy, cfg.batch_size)
                if out and mixing:
                    _snapshot_bundles(
                        model, vx[:1], os.path.join(out, f"bundles_{step:06d}.snap")
                    )

            row = {
                "step": step,
                "loss": mean_loss,
                "val_loss": val_loss,
                "grad_norm": grad_norm,
                "lr": lr,
                "ms": (time.perf_counter() - t0) * 1e3,
            }
            rows.append(row)
            if metrics_file:
                metrics_file.write(json.dumps(row) + "\n")
                metrics_file.flush()
    finally:
        if metrics_file:
            metrics_file.close()

    if out:
        md.save_checkpoint(model, os.path.join(out, "model.ckpt"))
    return rows
