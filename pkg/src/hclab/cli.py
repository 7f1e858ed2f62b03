"""Command-line entry point: training runs, the property suite, diagnostics
export, and parameter-count tables.

Configuration is a flat ``key=value`` text file plus ``--key value``
overrides (defaults < file < flags); the fully resolved configuration is
echoed to ``resolved.cfg`` in the run directory so any run can be
reproduced from its own output. Exit codes: 0 success, 1 usage or I/O
error, 2 verification failure, 3 aborted on non-finite loss.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import re
import sys
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import diagnostics as dg
from . import hyperconn as hx
from . import model as md
from . import train as tr
from . import verify as vf

SEED_ENV = "HCLAB_SEED"
ANALYZE_SAMPLES_DEFAULT = 64
ANALYZE_CHUNK = 4  # forward windows per captured batch (bounds memory)

# RunConfig: the union of model and optimizer settings, one flat namespace
_MODEL_KEYS = ("variant", "streams", "layers", "heads", "channels", "context", "sk_iters", "seed")
_TRAIN_KEYS = (
    "batch_size",
    "grad_accum",
    "iterations",
    "warmup",
    "lr_max",
    "lr_min",
    "weight_decay",
    "beta1",
    "beta2",
    "clip_norm",
    "eval_interval",
    "corpus",
    "out_dir",
    "seed",
    "prefetch",
)
FIELD_TYPES = {
    "variant": str,
    "corpus": str,
    "out_dir": str,
    "prefetch": bool,
    "lr_max": float,
    "lr_min": float,
    "weight_decay": float,
    "beta1": float,
    "beta2": float,
    "clip_norm": float,
}
RUN_KEYS = tuple(dict.fromkeys(_MODEL_KEYS + _TRAIN_KEYS))  # ordered, deduped


def run_defaults() -> dict:
    base = {}
    mc, tc = md.ModelConfig(), tr.TrainConfig()
    for key in RUN_KEYS:
        base[key] = getattr(mc, key) if hasattr(mc, key) else getattr(tc, key)
    return base


def _parse_value(key: str, raw: str):
    kind = FIELD_TYPES.get(key, int)
    if kind is bool:
        lowered = raw.strip().lower()
        if lowered in ("1", "true", "yes"):
            return True
        if lowered in ("0", "false", "no"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    return kind(raw)


def parse_config_text(text: str, source: str) -> dict:
    """Flat key=value lines; blank lines and '#' comments are ignored."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, value = stripped.partition("=")
        key = key.strip()
        if not sep or key not in RUN_KEYS:
            raise ValueError(f"{source}:{lineno}: unknown or malformed entry {stripped!r}")
        try:
            out[key] = _parse_value(key, value.strip())
        except ValueError as e:
            raise ValueError(f"{source}:{lineno}: {e}") from None
    return out


def format_config(cfg: dict) -> str:
    lines = []
    for key in sorted(RUN_KEYS):
        value = cfg[key]
        lines.append(f"{key}={str(value).lower() if isinstance(value, bool) else value}")
    return "\n".join(lines) + "\n"


def resolve_run_config(args) -> dict:
    """defaults < config file < command-line flags; HCLAB_SEED fills the
    seed only when neither source set one. Defaults that merely depend on
    other values adapt (warmup shrinks to a lowered iteration count);
    explicitly set values are never adjusted."""
    cfg = run_defaults()
    explicit = set()
    if getattr(args, "config", None):
        with open(args.config) as f:
            file_cfg = parse_config_text(f.read(), args.config)
        cfg.update(file_cfg)
        explicit |= file_cfg.keys()
    for key in RUN_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
            explicit.add(key)
    if "seed" not in explicit and os.environ.get(SEED_ENV):
        cfg["seed"] = int(os.environ[SEED_ENV])
    if "warmup" not in explicit and cfg["warmup"] > cfg["iterations"]:
        cfg["warmup"] = cfg["iterations"]
    if cfg["variant"] == "rc" and cfg["streams"] != 1:
        if "streams" in explicit:
            print(
                f"warning: rc is the single-stream baseline; forcing streams=1 "
                f"(was {cfg['streams']})",
                file=sys.stderr,
            )
        cfg["streams"] = 1
    return cfg


def split_run_config(cfg: dict):
    model_cfg = md.ModelConfig(**{k: cfg[k] for k in _MODEL_KEYS})
    train_cfg = tr.TrainConfig(**{k: cfg[k] for k in _TRAIN_KEYS})
    return model_cfg, train_cfg


def _fail(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return 1


def _env_seed_fallback(seed: Optional[int]) -> int:
    if seed is not None:
        return seed
    if os.environ.get(SEED_ENV):
        return int(os.environ[SEED_ENV])
    return 0


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    try:
        cfg = resolve_run_config(args)
        if not cfg["corpus"]:
            return _fail("train needs a corpus (--corpus or corpus= in the config file)")
        if not os.path.isfile(cfg["corpus"]):
            return _fail(f"corpus not readable: {cfg['corpus']}")
        if not cfg["out_dir"]:
            return _fail("train needs an output directory (--out)")
        model_cfg, train_cfg = split_run_config(cfg)
    except (ValueError, OSError) as e:
        return _fail(str(e))

    os.makedirs(cfg["out_dir"], exist_ok=True)
    with open(os.path.join(cfg["out_dir"], "resolved.cfg"), "w") as f:
        f.write(format_config(cfg))

    model = md.init_model(model_cfg)
    try:
        rows = tr.train_loop(model, train_cfg)
    except tr.NanLossError as e:
        print(f"error: {e}" + (f" (state dumped to {e.dump_path})" if e.dump_path else ""), file=sys.stderr)
        return 3
    except (ValueError, OSError) as e:
        return _fail(str(e))

    last = rows[-1] if rows else None
    if last is not None:
        print(
            f"finished {len(rows)} steps: loss {last['loss']:.4f}, "
            f"val_loss {last['val_loss']:.4f} -> {cfg['out_dir']}"
        )
    else:
        print(f"finished 0 steps -> {cfg['out_dir']}")
    return 0


# ---------------------------------------------------------------------------
# verify


def cmd_verify(args) -> int:
    seed = _env_seed_fallback(args.seed)
    try:
        results = vf.run(properties=args.property or None, samples=args.samples, seed=seed)
    except ValueError as e:
        return _fail(str(e))
    shown = args.samples if args.samples is not None else "default"
    print(f"verification suite: seed={seed} samples={shown}")
    print(vf.format_table(results))
    return 0 if all(r.passed for r in results) else 2


# ---------------------------------------------------------------------------
# analyze


def _capture_batches(model, tokens, chunk: int):
    """Yield capture dicts from no-grad forwards over window chunks."""
    for i in range(0, len(tokens), chunk):
        with ad.no_grad():
            _, caps = md.forward(model, tokens[i : i + chunk], capture=True)
        yield caps


def _bundle_data(caps):
    """(layer, branch, h_res, x_in) per mixing application, numpy arrays."""
    for (layer, branch, bundle), x_in in zip(caps["bundles"], caps["stream_in"]):
        yield layer, branch, bundle.h_res.data, x_in


def _snapshot_step(path: str) -> int:
    match = re.search(r"bundles_(\d+)\.snap$", os.path.basename(path))
    return int(match.group(1))


def _mixing_rows(step: int, per_layer: dict):
    """fig2/fig3 rows for one step given {(layer, branch): (h_res, x_in)}."""
    rowmax, diagfrac, cosine = [], [], []
    for layer, branch in sorted(per_layer, key=lambda t: (t[0], t[1] != "attn")):
        h, x_in = per_layer[(layer, branch)]
        median, p10, p90 = dg.row_max_stats(h)
        rowmax.append((step, layer, branch, median, p10, p90))
        diagfrac.append((step, layer, branch, dg.diag_dominance_fraction(h)))
        if h.shape[-1] >= 2:
            mixed = np.einsum("tij,tjc->tic", h, x_in)
            cosine.append((step, layer, branch, dg.stream_cosine(mixed)))
    return rowmax, diagfrac, cosine


def cmd_analyze(args) -> int:
    if args.samples < 1:
        return _fail(f"--samples must be positive, got {args.samples}")
    run_dir = args.run
    ckpt_path = os.path.join(run_dir, "model.ckpt")
    if not os.path.isfile(ckpt_path):
        return _fail(f"no checkpoint at {ckpt_path}")
    try:
        model = md.load_checkpoint(ckpt_path)
    except ValueError as e:
        return _fail(f"cannot load checkpoint: {e}")

    corpus_path = args.corpus
    if not corpus_path:
        resolved = os.path.join(run_dir, "resolved.cfg")
        if os.path.isfile(resolved):
            with open(resolved) as f:
                corpus_path = parse_config_text(f.read(), resolved).get("corpus", "")
    if not corpus_path or not os.path.isfile(corpus_path):
        return _fail("analyze needs a readable corpus (--corpus or the run's resolved.cfg)")

    out_dir = args.out or run_dir
    os.makedirs(out_dir, exist_ok=True)
    t_len = model.config.context
    try:
        _, val_region = tr.split_corpus(tr.load_corpus(corpus_path), t_len)
    except ValueError as e:
        return _fail(str(e))
    tokens, _ = tr.val_windows(val_region, t_len, count=args.samples)

    # final step label for fresh captures: the last trained step when known
    final_step = 0
    metrics_path = os.path.join(run_dir, "metrics.jsonl")
    if os.path.isfile(metrics_path):
        with open(metrics_path) as f:
            for line in f:
                if line.strip():
                    final_step = max(final_step, int(json.loads(line)["step"]))

    rowmax_rows, diagfrac_rows, cosine_rows = [], [], []

    # training-time evolution from the periodic snapshots (skipping any that
    # duplicate the fresh-capture step)
    for path in sorted(glob.glob(os.path.join(run_dir, "bundles_*.snap"))):
        step = _snapshot_step(path)
        if step == final_step:
            continue
        snapshot = md.load_snapshot(path)
        per_layer = {
            (layer, branch): (
                snapshot[f"layer{layer}.{branch}.h_res"],
                snapshot[f"layer{layer}.{branch}.x_in"],
            )
            for layer, branch in dg.snapshot_layers(snapshot)
        }
        a, b, c = _mixing_rows(step, per_layer)
        rowmax_rows += a
        diagfrac_rows += b
        cosine_rows += c

    # fresh captures over the sampled validation windows
    pooled: dict = {}
    for caps in _capture_batches(model, tokens, ANALYZE_CHUNK):
        for layer, branch, h, x_in in _bundle_data(caps):
            slot = pooled.setdefault((layer, branch), ([], []))
            slot[0].append(h)
            slot[1].append(x_in)
    per_layer = {
        key: (np.concatenate(hs), np.concatenate(xs)) for key, (hs, xs) in pooled.items()
    }
    if per_layer:
        a, b, c = _mixing_rows(final_step, per_layer)
        rowmax_rows += a
        diagfrac_rows += b
        cosine_rows += c

    # composite products in execution order over the fresh captures
    ordered = sorted(per_layer, key=lambda t: (t[0], t[1] != "attn"))
    colsum_rows, specnorm_rows = [], []
    if ordered:
        chain = [per_layer[key][0] for key in ordered]
        for key, stats in zip(ordered, dg.composite_chain(chain)):
            layer, branch = key
            colsum_rows.append(
                (stats.depth + 1, layer, branch, stats.colsum_min, stats.colsum_max, stats.colsum_mean)
            )
            specnorm_rows.append(
                (stats.depth + 1, layer, branch, stats.specnorm_mean, stats.specnorm_std)
            )

    # pooled entry histogram over every fresh mixing map
    hist_rows = []
    if per_layer:
        entries = np.concatenate([h.reshape(-1) for h, _ in per_layer.values()])
        counts, edges = dg.entry_histogram(entries)
        hist_rows.append(("-inf", edges[0], int(counts[0])))
        for i in range(len(edges) - 1):
            hist_rows.append((edges[i], edges[i + 1], int(counts[i + 1])))
        hist_rows.append((edges[-1], "inf", int(counts[-1])))

    # parameter-count table at this model's width
    param_rows = [_param_row("rc", 1, model.config.channels)]
    for variant in hx.VARIANTS:
        if variant == "rc":
            continue
        for n in range(2, 9):
            param_rows.append(_param_row(variant, n, model.config.channels))

    by_step = lambda row: (row[0], row[1], row[2])
    emitted = {
        "fig2_rowmax.csv": sorted(rowmax_rows, key=by_step),
        "fig2_diagfrac.csv": sorted(diagfrac_rows, key=by_step),
        "fig3_cosine.csv": sorted(cosine_rows, key=by_step),
        "fig5_colsum.csv": colsum_rows,
        "fig5_specnorm.csv": specnorm_rows,
        "fig6_hist.csv": hist_rows,
        "fig7_params.csv": param_rows,
    }
    for name, rows in emitted.items():
        dg.write_csv(os.path.join(out_dir, name), name, rows)
        print(f"wrote {name} ({len(rows)} rows)")

    if colsum_rows:
        worst_colsum = max(
            max(abs(r[3] - 1.0), abs(r[4] - 1.0)) for r in colsum_rows
        )
        worst_spec = max(abs(r[3] - 1.0) for r in specnorm_rows)
        print(
            f"composite products over {len(tokens)} windows: "
            f"max |column sum - 1| = {worst_colsum:.3e}, "
            f"max |mean spectral norm - 1| = {worst_spec:.3e}"
        )
    return 0


# ---------------------------------------------------------------------------
# paramcount


def _param_row(variant: str, n: int, channels: int):
    pc = dg.param_count(variant, n, channels)
    return (pc.variant, pc.n, pc.channels, pc.shared, pc.residual, pc.total)


def cmd_paramcount(args) -> int:
    if args.n_max < 2:
        return _fail(f"--n-max must be at least 2, got {args.n_max}")
    if args.dim < 1:
        return _fail(f"--dim must be positive, got {args.dim}")
    rows = [_param_row("rc", 1, args.dim)]
    for variant in hx.VARIANTS:
        if variant == "rc":
            continue
        for n in range(2, args.n_max + 1):
            rows.append(_param_row(variant, n, args.dim))

    header = dg.CSV_HEADERS["fig7_params.csv"]
    widths = [max(len(str(h)), max(len(str(r[i])) for r in rows)) for i, h in enumerate(header)]
    print("  ".join(str(h).ljust(w) for h, w in zip(header, widths)))
    for row in rows:
        cells = [
            str(v).ljust(w) if isinstance(v, str) else str(v).rjust(w)
            for v, w in zip(row, widths)
        ]
        print("  ".join(cells))

    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "fig7_params.csv")
        dg.write_csv(path, "fig7_params.csv", rows)
        print(f"wrote {path} ({len(rows)} rows)")
    return 0


# ---------------------------------------------------------------------------
# argument wiring


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--corpus", help="byte corpus file")
    p.add_argument("--out", dest="out_dir", help="output directory")
    p.add_argument("--variant", choices=hx.VARIANTS)
    p.add_argument("--streams", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--context", type=int)
    p.add_argument("--sk-iters", dest="sk_iters", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--grad-accum", dest="grad_accum", type=int)
    p.add_argument("--iters", dest="iterations", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--lr-max", dest="lr_max", type=float)
    p.add_argument("--lr-min", dest="lr_min", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--beta1", type=float)
    p.add_argument("--beta2", type=float)
    p.add_argument("--clip-norm", dest="clip_norm", type=float)
    p.add_argument("--eval-interval", dest="eval_interval", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--prefetch", action="store_const", const=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hclab",
        description="Desk-scale lab for constrained residual-stream mixing.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run the training loop")
    _add_run_flags(p_train)
    p_train.set_defaults(func=cmd_train)

    p_verify = sub.add_parser("verify", help="run the property suite")
    p_verify.add_argument(
        "--property",
        action="append",
        help="run only matching properties (repeatable; prefix selects a family)",
    )
    p_verify.add_argument("--samples", type=int)
    p_verify.add_argument("--seed", type=int)
    p_verify.set_defaults(func=cmd_verify)

    p_analyze = sub.add_parser("analyze", help="export diagnostics CSVs from a run")
    p_analyze.add_argument("--run", required=True, help="run directory holding model.ckpt")
    p_analyze.add_argument("--corpus", help="byte corpus (default: the run's resolved.cfg)")
    p_analyze.add_argument("--out", help="CSV output directory (default: the run directory)")
    p_analyze.add_argument("--samples", type=int, default=ANALYZE_SAMPLES_DEFAULT)
    p_analyze.set_defaults(func=cmd_analyze)

    p_params = sub.add_parser("paramcount", help="parameter-count table")
    p_params.add_argument("--n-max", dest="n_max", type=int, default=8)
    p_params.add_argument("--dim", type=int, default=768)
    p_params.add_argument("--out", help="also write fig7_params.csv here")
    p_params.set_defaults(func=cmd_paramcount)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
