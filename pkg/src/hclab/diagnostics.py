"""Observation and stability metrics over captured mixing maps and streams.

Everything here is a pure function of snapshot arrays: row-max percentile
statistics, strict diagonal-dominance fractions, mean pairwise stream cosine
similarity, per-prefix composite-product column sums and spectral norms,
fixed-bin entry histograms, and closed-form auxiliary parameter counts.
CSV writers with fixed headers turn the metrics into one file per figure.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import manifold as mf

HIST_LO = -1.5
HIST_HI = 1.5
HIST_WIDTH = 0.05

CSV_HEADERS = {
    "fig2_rowmax.csv": ["step", "layer", "branch", "rowmax_median", "rowmax_p10", "rowmax_p90"],
    "fig2_diagfrac.csv": ["step", "layer", "branch", "diag_dominance_fraction"],
    "fig3_cosine.csv": ["step", "layer", "branch", "mean_pairwise_cosine"],
    "fig5_colsum.csv": ["depth", "layer", "branch", "colsum_min", "colsum_max", "colsum_mean"],
    "fig5_specnorm.csv": ["depth", "layer", "branch", "specnorm_mean", "specnorm_std"],
    "fig6_hist.csv": ["bin_lo", "bin_hi", "count"],
    "fig7_params.csv": ["variant", "n", "channels", "shared", "residual", "total"],
}


def _as_matrix_set(h_set) -> np.ndarray:
    h = np.asarray(h_set, dtype=np.float64)
    if h.ndim == 2:
        h = h[None]
    if h.ndim != 3 or h.shape[-1] != h.shape[-2]:
        raise ValueError(f"expected a set of square matrices, got shape {h.shape}")
    if h.shape[0] == 0:
        raise ValueError("empty matrix set")
    return h


# ---------------------------------------------------------------------------
# per-layer matrix statistics


def row_max_stats(h_set):
    """(median, p10, p90) of row-wise maximum entries pooled over the set,
    percentiles by linear interpolation."""
    h = _as_matrix_set(h_set)
    maxima = h.max(axis=-1).reshape(-1)
    median, p10, p90 = np.percentile(maxima, [50.0, 10.0, 90.0])
    return float(median), float(p10), float(p90)


def diag_dominance_fraction(h_set) -> float:
    """Fraction of matrices in which every row's strict maximum sits on the
    diagonal; a tie between a diagonal and an off-diagonal entry counts
    against dominance."""
    h = _as_matrix_set(h_set)
    n = h.shape[-1]
    diag = np.einsum("mii->mi", h)
    off = h.copy()
    off[:, np.arange(n), np.arange(n)] = -np.inf
    strict = diag > off.max(axis=-1)
    return float(strict.all(axis=-1).mean())


def stream_cosine(x) -> float:
    """Mean cosine similarity over all tokens and stream pairs of a (T, n, C)
    stream state; pairs involving a zero vector contribute 0."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"expected (T, n, C) stream state, got shape {x.shape}")
    n = x.shape[1]
    if n < 2:
        raise ValueError(f"pairwise cosine needs at least 2 streams, got n={n}")
    norms = np.linalg.norm(x, axis=-1)  # (T, n)
    dots = np.einsum("tic,tjc->tij", x, x)
    denom = norms[:, :, None] * norms[:, None, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.where(denom > 0.0, dots / np.where(denom == 0.0, 1.0, denom), 0.0)
    iu, ju = np.triu_indices(n, k=1)
    return float(cos[:, iu, ju].mean())


# ---------------------------------------------------------------------------
# composite products


@dataclass
class PrefixStats:
    depth: int
    colsum_min: float
    colsum_max: float
    colsum_mean: float
    specnorm_mean: float
    specnorm_std: float


def composite_chain(h_per_layer) -> list:
    """Per-token left-products of mixing matrices, deepest layer outermost:
    prefix_L = H_L @ ... @ H_1 @ H_0 per token. For each prefix depth returns
    column-sum min/max/mean over tokens and the spectral norm's mean and
    standard deviation over tokens."""
    mats = [np.asarray(h, dtype=np.float64) for h in h_per_layer]
    if not mats:
        raise ValueError("empty layer list")
    fixed = []
    for h in mats:
        if h.ndim == 2:
            h = h[None]
        if h.ndim != 3 or h.shape[-1] != h.shape[-2]:
            raise ValueError(f"expected per-token square matrices, got shape {h.shape}")
        fixed.append(h)
    shape = fixed[0].shape
    if any(h.shape != shape for h in fixed):
        raise ValueError(f"inconsistent shapes across layers: {[h.shape for h in fixed]}")

    out = []
    prefix = None
    for depth, h in enumerate(fixed):
        prefix = h.copy() if prefix is None else h @ prefix
        colsums = prefix.sum(axis=-2)
        norms, _ = mf.spectral_norm_batch(prefix)
        out.append(
            PrefixStats(
                depth=depth,
                colsum_min=float(colsums.min()),
                colsum_max=float(colsums.max()),
                colsum_mean=float(colsums.mean()),
                specnorm_mean=float(norms.mean()),
                specnorm_std=float(norms.std()),
            )
        )
    return out


# ---------------------------------------------------------------------------
# histograms


def entry_histogram(h_set, lo: float = HIST_LO, hi: float = HIST_HI, width: float = HIST_WIDTH):
    """(counts, edges): counts[0] is underflow (< lo), counts[-1] overflow
    (>= hi); interior bins are [edge, edge+width) over [lo, hi)."""
    h = np.asarray(h_set, dtype=np.float64).reshape(-1)
    n_bins = int(round((hi - lo) / width))
    edges = lo + width * np.arange(n_bins + 1)
    counts = np.zeros(n_bins + 2, dtype=np.int64)
    counts[0] = int((h < lo).sum())
    counts[-1] = int((h >= hi).sum())
    inside = h[(h >= lo) & (h < hi)]
    idx = np.floor((inside - lo) / width).astype(np.int64)
    idx = np.clip(idx, 0, n_bins - 1)
    np.add.at(counts, idx + 1, 1)
    return counts, edges


# ---------------------------------------------------------------------------
# parameter counting


@dataclass
class ParamCount:
    variant: str
    n: int
    channels: int
    shared: int
    residual: int

    @property
    def total(self) -> int:
        return self.shared + self.residual


def param_count(variant: str, n: int, channels: int) -> ParamCount:
    """Closed-form per-layer auxiliary parameter count for one mixing layer.

    shared (all dynamic variants): pre/post gates 2(nC·n + n) + 2 scalars
    + nC norm gain. residual: hc/mhc nC·n² + n² + 1; mhc_lite nC·n! + n! + 1;
    shc 2(nC·k + k) + nC(n−1) + (n−1) + 5 with k = (n−1)(n−2)/2."""
    if n < 1:
        raise ValueError(f"streams must be >= 1, got {n}")
    if variant == "rc":
        return ParamCount("rc", n, channels, 0, 0)
    nc = n * channels
    shared = 2 * (nc * n + n) + 2 + nc
    if variant in ("hc", "mhc"):
        residual = nc * n * n + n * n + 1
    elif variant == "mhc_lite":
        nf = math.factorial(n)
        residual = nc * nf + nf + 1
    elif variant == "shc":
        k = (n - 1) * (n - 2) // 2
        residual = 2 * (nc * k + k) + nc * (n - 1) + (n - 1) + 5
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return ParamCount(variant, n, channels, shared, residual)


# ---------------------------------------------------------------------------
# snapshot plumbing and CSV emission


def snapshot_layers(snapshot: dict):
    """Sorted (layer, branch) pairs present in one snapshot's array dict,
    in execution order (attn before mlp within a layer)."""
    seen = set()
    for key in snapshot:
        layer, branch, _ = key.split(".")
        seen.add((int(layer.removeprefix("layer")), branch))
    return sorted(seen, key=lambda t: (t[0], t[1] != "attn"))


def write_csv(path: str, name: str, rows) -> None:
    header = CSV_HEADERS[name]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in rows:
            if len(row) != len(header):
                raise ValueError(f"{name}: row of {len(row)} fields, header has {len(header)}")
            w.writerow(row)
