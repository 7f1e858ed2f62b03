"""Seeded property suite for the stream-mixing algebra.

Every property draws its own reproducible inputs, measures the worst
violation over those samples, and compares it against a frozen bound:

- ``spectral_equality``   spectral norm of J + U diag(sigma) V^T equals
                          max(1, max|sigma|) for orthonormal factors
- ``closure_*``           products of generated unit-norm mixing maps stay
                          on the unit sphere at every prefix
- ``exactness_gap``       truncated Sinkhorn output is measurably *not*
                          doubly stochastic, unlike the exact constructions
- ``membership_*``        each constrained generator lands in its matrix set
- ``mean_preserve``       column sums of 1 keep the cross-stream mean intact
- ``completeness``        the sphere construction holds on the whole
                          orthogonal family, beyond the Cayley patch
- ``grad_ops``            every differentiable op passes finite-difference
                          gradient checks
- ``grad_generators``     so does each full generator composed with the
                          stream update and a scalar loss
- ``init_identity_*``     freshly initialized mixing maps start at (or
                          within a closed-form distance of) the identity

``run`` executes the selected properties sequentially and returns one
result row each; the command-line wrapper renders the rows as a pass/fail
table and exits nonzero on any failure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import hyperconn as hx
from . import manifold as mf
from .autodiff import Tensor

# shared tolerances, frozen from the closed-form constructions
SPECTRAL_EQUALITY_BOUND = 1e-8
CLOSURE_MARGINAL_BOUND = 1e-9
CLOSURE_SPECNORM_BOUND = 1e-8
EXACTNESS_GAP_FLOOR = 1e-6
MEMBERSHIP_MHC_BOUND = 1e-12
MEMBERSHIP_LITE_BOUND = 1e-11
MEMBERSHIP_SHC_BOUND = 1e-9
MEAN_PRESERVE_BOUND = 1e-11
GRAD_OPS_BOUND = 1e-5
GRAD_GENERATORS_BOUND = 1e-4
INIT_SHC_BOUND = 5.1e-4  # (1 - tanh 4) * (1 - 1/n) at n = 4
INIT_MHC_BOUND = 1.1e-2
INIT_LITE_DIAG_FLOOR = 0.992
CHAIN_DEPTH = 48


@dataclass(frozen=True)
class PropertyResult:
    """One row of the verification report."""

    name: str
    samples: int
    worst: float
    bound: float
    relation: str  # "<=": worst must not exceed bound; ">": must exceed it
    passed: bool
    note: str


# ---------------------------------------------------------------------------
# random draws


def random_orthogonal(rng: np.random.Generator, m: int, special: bool = False) -> np.ndarray:
    """Haar-distributed orthogonal m x m matrix (QR with sign-fixed R);
    with ``special`` the determinant is forced to +1."""
    q, r = np.linalg.qr(rng.standard_normal((m, m)))
    q = q * np.where(np.diag(r) >= 0.0, 1.0, -1.0)
    if special and np.linalg.det(q) < 0.0:
        q[:, 0] = -q[:, 0]
    return q


def random_spectrum(rng: np.random.Generator, m: int, peak: float) -> np.ndarray:
    """Uniform spectrum rescaled so max|sigma| equals ``peak`` exactly."""
    s = rng.uniform(-1.0, 1.0, m)
    s[int(rng.integers(0, m))] = rng.choice([-1.0, 1.0])
    return s * peak / np.abs(s).max()


def random_mix_params(
    rng: np.random.Generator, variant: str, n: int, C: int, scale: float = 0.8
) -> hx.VariantParams:
    """A generator parameter set with every tensor redrawn at the given
    scale, away from the near-identity initialization — membership must
    hold at any point."""
    params = hx.init_params(variant, n, C)
    for t in params.tensors().values():
        t.data[...] = rng.normal(0.0, scale, size=t.shape)
    return params


def _generated_h_res(rng: np.random.Generator, variant: str, n: int, C: int, t_len: int) -> np.ndarray:
    params = random_mix_params(rng, variant, n, C)
    x = Tensor(rng.normal(0.0, 1.0, (t_len, n, C)))
    with ad.no_grad():
        return hx.generate_bundle(x, params).h_res.data.copy()


# ---------------------------------------------------------------------------
# property checks (each returns the measured worst value)


def _check_spectral_equality(samples: int, rng: np.random.Generator) -> float:
    worst = 0.0
    for peak in (0.3, 1.0, 2.5):
        for i in range(samples):
            n = 2 + i % 7
            factors = mf.ShcFactors(
                U_core=random_orthogonal(rng, n - 1),
                V_core=random_orthogonal(rng, n - 1),
                Sigma=random_spectrum(rng, n - 1, peak),
            )
            h = mf.shc_residual(factors, mf.constants(n), validate=peak <= 1.0)
            worst = max(worst, abs(mf.spectral_norm(h) - max(1.0, peak)))
    return worst


def _closure_prefixes(samples: int, rng: np.random.Generator):
    """Yield every prefix product of generated length-CHAIN_DEPTH chains."""
    n, C = 4, 16
    for _ in range(samples):
        h = _generated_h_res(rng, "shc", n, C, CHAIN_DEPTH)
        prefix = np.eye(n)
        for t in range(CHAIN_DEPTH):
            prefix = h[t] @ prefix
            yield prefix


def _check_closure_marginals(samples: int, rng: np.random.Generator) -> float:
    worst = 0.0
    for prefix in _closure_prefixes(samples, rng):
        worst = max(
            worst,
            float(np.abs(prefix.sum(axis=1) - 1.0).max()),
            float(np.abs(prefix.sum(axis=0) - 1.0).max()),
        )
    return worst


def _check_closure_specnorm(samples: int, rng: np.random.Generator) -> float:
    worst = 0.0
    for prefix in _closure_prefixes(samples, rng):
        worst = max(worst, abs(mf.spectral_norm(prefix) - 1.0))
    return worst


def _check_exactness_gap(samples: int, rng: np.random.Generator) -> float:
    """Largest max-marginal deviation of 20-iteration Sinkhorn outputs over
    the batch; the truncation residual must be measurable (the exact
    constructions stay at machine precision on the same budget)."""
    peak = 0.0
    for _ in range(samples):
        m = mf.sinkhorn_knopp(rng.normal(0.0, 2.0, (4, 4)), iters=mf.SK_ITERS_DEFAULT)
        dev = max(
            float(np.abs(m.sum(axis=1) - 1.0).max()),
            float(np.abs(m.sum(axis=0) - 1.0).max()),
        )
        peak = max(peak, dev)
    return peak


def _membership_worst(samples, rng, variant, violation) -> float:
    worst = 0.0
    for i in range(samples):
        n = 2 + i % 4
        for h in _generated_h_res(rng, variant, n, 12, 6):
            worst = max(worst, violation(h))
    return worst


def _check_membership_mhc(samples: int, rng: np.random.Generator) -> float:
    def violation(h):
        col = float(np.abs(h.sum(axis=0) - 1.0).max())
        return max(col, float(max(0.0, -h.min())))

    return _membership_worst(samples, rng, "mhc", violation)


def _check_membership_mhc_lite(samples: int, rng: np.random.Generator) -> float:
    return _membership_worst(
        samples, rng, "mhc_lite", lambda h: mf.membership(h, "birkhoff").max_violation
    )


def _check_membership_shc(samples: int, rng: np.random.Generator) -> float:
    return _membership_worst(
        samples, rng, "shc", lambda h: mf.membership(h, "sphere").max_violation
    )


def _check_mean_preserve(samples: int, rng: np.random.Generator) -> float:
    """Mixing with unit column sums keeps the cross-stream mean of any
    stream state intact."""
    worst = 0.0
    for i in range(samples):
        n = 2 + i % 4
        for variant in ("mhc", "mhc_lite", "shc"):
            x = rng.normal(0.0, 1.0, (n, 12))
            for h in _generated_h_res(rng, variant, n, 12, 4):
                dev = np.abs((h @ x).mean(axis=0) - x.mean(axis=0)).max()
                worst = max(worst, float(dev))
    return worst


def _check_completeness(samples: int, rng: np.random.Generator) -> float:
    """The sphere construction accepts *any* orthogonal factor pair —
    reflections and rotations outside the bounded Cayley patch included —
    and still lands on the unit sphere."""
    worst = 0.0
    for i in range(samples):
        n = 2 + i % 7
        factors = mf.ShcFactors(
            U_core=random_orthogonal(rng, n - 1),
            V_core=random_orthogonal(rng, n - 1),
            Sigma=random_spectrum(rng, n - 1, float(rng.uniform(0.05, 1.0))),
        )
        h = mf.shc_residual(factors, mf.constants(n), validate=True)
        worst = max(worst, mf.membership(h, "sphere").max_violation)
    return worst


def _grad_op_cases(rng: np.random.Generator):
    """(name, input tensor, scalar-valued fn) for every differentiable op."""
    t = lambda *shape: Tensor(rng.normal(0.0, 1.0, shape))
    w34, w4, w234 = t(3, 4), t(4,), t(2, 3, 4)
    w42 = t(4, 2)
    ids = np.array([1, 3, 0, 2])
    targets = np.array([2, 0, 1])
    sq = Tensor(rng.normal(0.0, 0.6, (3, 3)) + 3.0 * np.eye(3))  # well conditioned
    cases = [
        ("add", t(3, 4), lambda x: ad.add(x, w34)),
        ("sub", t(3, 4), lambda x: ad.sub(w34, x)),
        ("mul", t(3, 4), lambda x: ad.mul(x, w34)),
        ("bias_add", t(2, 3, 4), lambda x: ad.bias_add(x, w34)),
        ("bias_add_bias", t(3, 4), lambda b: ad.bias_add(w234, b)),
        ("matmul_left", t(3, 4), lambda x: ad.matmul(x, w42)),
        ("matmul_batched", t(2, 3, 4), lambda x: ad.matmul(x, ad.permute(w234, (0, 2, 1)))),
        ("scale", t(3, 4), lambda x: ad.scale(x, 1.7)),
        ("scale_scalar", t(), lambda s: ad.scale(w34, s)),
        ("sigmoid", t(3, 4), ad.sigmoid),
        ("tanh", t(3, 4), ad.tanh),
        ("gelu", t(3, 4), ad.gelu),
        ("softmax", t(2, 5), lambda x: ad.softmax(x, axis=-1)),
        ("rmsnorm", t(3, 4), lambda x: ad.rmsnorm(x, w4)),
        ("rmsnorm_gain", t(4), lambda g: ad.rmsnorm(w34, g)),
        ("embedding", t(4, 3), lambda tab: ad.embedding(tab, ids)),
        ("reshape", t(3, 4), lambda x: ad.reshape(x, (2, 6))),
        ("permute", t(2, 3, 4), lambda x: ad.permute(x, (2, 0, 1))),
        ("diag_embed", t(2, 3), ad.diag_embed),
        ("skew_embed", t(2, 3), lambda v: ad.skew_embed(v, 3)),
        ("mat_inverse", sq, ad.mat_inverse),
        ("sinkhorn", t(2, 3, 3), lambda x: ad.sinkhorn(x, 5)),
        ("mean_all", t(3, 4), ad.mean_all),
        ("cross_entropy", t(3, 6), lambda x: ad.cross_entropy(x, targets)),
    ]
    return cases


def _check_grad_ops(samples: int, rng: np.random.Generator) -> float:
    worst = 0.0
    for _ in range(samples):
        for _name, x, fn in _grad_op_cases(rng):
            with ad.no_grad():
                out_shape = fn(Tensor(x.data.copy())).shape
            # fixed random positive weights keep every coordinate's gradient
            # generic (no systematic cancellation to zero denominators)
            w = Tensor(rng.uniform(0.5, 1.5, out_shape))

            def f(probe, fn=fn, w=w):
                return ad.sum_all(ad.mul(fn(probe), w))

            worst = max(worst, ad.grad_check(f, x, eps=1e-5))
    return worst


GRAD_PROBE_TARGETS = {
    "mhc": ("w_res", "b_res", "alpha_res", "b_post"),
    "mhc_lite": ("w_res", "b_res", "w_pre"),
    "shc": ("w_u", "w_s", "b_v", "b_s", "tau_s", "gamma_u", "gain"),
    "hc": ("w_res", "alpha_res"),
}
GRAD_PROBE_DIRECTIONS = 8
_SCALE_SCALARS = ("alpha_pre", "alpha_post", "alpha_res", "tau_u", "tau_v", "tau_s")


def generator_grad_worst(
    rng: np.random.Generator,
    variant: str,
    eps: float = 1e-4,
    directions: Optional[int] = GRAD_PROBE_DIRECTIONS,
) -> float:
    """Worst finite-difference error through one variant's generator
    composed with the stream update rule and a weighted scalar loss
    (n=4, C=8, T=3).

    Tensors larger than ``directions`` are probed through that many random
    tangent directions — a full-strength check of the same backward graph
    whose finite-difference denominators concentrate at the gradient norm
    instead of sampling the per-coordinate zero-crossing tail; smaller
    tensors are probed coordinate by coordinate. ``directions=None`` probes
    everything coordinate-wise (hostage to that tail, so callers then pick
    the evaluation point)."""
    n, C, t_len = 4, 8, 3
    # moderate weights keep the coefficient softmaxes out of saturation and
    # the scale-setting scalars away from zero, so no probed derivative is
    # artificially tiny (the backward itself is point-independent)
    params = random_mix_params(rng, variant, n, C, scale=0.25)
    for scalar_name in _SCALE_SCALARS:
        t = getattr(params, scalar_name)
        if t is not None:
            t.data[...] = rng.choice([-1.0, 1.0]) * rng.uniform(0.3, 0.8)
    x_data = rng.normal(0.0, 1.0, (t_len, n, C))
    w_branch = Tensor(rng.normal(0.0, 0.5, (C, C)))
    w_loss = Tensor(rng.uniform(0.5, 1.5, (t_len, n, C)))

    def branch(b):
        return ad.gelu(ad.matmul(b, w_branch))

    worst = 0.0
    for name in GRAD_PROBE_TARGETS[variant]:
        base = getattr(params, name)
        spread = directions is not None and base.size > directions
        if spread:
            dirs = Tensor(rng.normal(0.0, 1.0, (directions, base.size)))
            start = Tensor(np.zeros(directions), requires_grad=True)

        def f(probe):
            if spread:
                delta = ad.reshape(
                    ad.matmul(ad.reshape(probe, (1, directions)), dirs), base.shape
                )
                setattr(params, name, ad.add(Tensor(base.data.copy()), delta))
            else:
                setattr(params, name, probe)
            try:
                bundle = hx.generate_bundle(Tensor(x_data), params)
                out = hx.hyper_step(Tensor(x_data), branch, bundle)
                return ad.sum_all(ad.mul(out, w_loss))
            finally:
                setattr(params, name, base)

        worst = max(worst, ad.grad_check(f, start if spread else base, eps=eps))
    return worst


def _check_grad_generators(samples: int, rng: np.random.Generator) -> float:
    worst = 0.0
    for _ in range(samples):
        for variant in GRAD_PROBE_TARGETS:
            worst = max(worst, generator_grad_worst(rng, variant))
    return worst


def _init_h_res(rng: np.random.Generator, variant: str, n: int = 4, C: int = 12) -> np.ndarray:
    params = hx.init_params(variant, n, C)
    x = Tensor(rng.normal(0.0, 1.0, (3, n, C)))
    with ad.no_grad():
        return hx.generate_bundle(x, params).h_res.data


def _check_init_identity_shc(samples: int, rng: np.random.Generator) -> float:
    worst = 0.0
    for _ in range(samples):
        h = _init_h_res(rng, "shc")
        worst = max(worst, float(np.abs(h - np.eye(4)).max()))
    return worst


def _check_init_identity_mhc(samples: int, rng: np.random.Generator) -> float:
    worst = 0.0
    for _ in range(samples):
        h = _init_h_res(rng, "mhc")
        worst = max(worst, float(np.abs(h - np.eye(4)).max()))
    return worst


def _check_init_identity_mhc_lite(samples: int, rng: np.random.Generator) -> float:
    floor = math.inf
    for _ in range(samples):
        h = _init_h_res(rng, "mhc_lite")
        floor = min(floor, float(np.einsum("tii->ti", h).min()))
    return floor


def _check_init_identity_hc(samples: int, rng: np.random.Generator) -> float:
    worst = 0.0
    for _ in range(samples):
        h = _init_h_res(rng, "hc")
        worst = max(worst, float(np.abs(h - np.eye(4)).max()))
    return worst


# ---------------------------------------------------------------------------
# registry


@dataclass(frozen=True)
class PropertySpec:
    name: str
    check: Callable[[int, np.random.Generator], float]
    default_samples: int
    bound: float
    relation: str
    note: str


REGISTRY: tuple = (
    PropertySpec(
        "spectral_equality",
        _check_spectral_equality,
        200,
        SPECTRAL_EQUALITY_BOUND,
        "<=",
        "spectral norm of J + U diag(sigma) V^T equals max(1, max|sigma|)",
    ),
    PropertySpec(
        "closure_marginals",
        _check_closure_marginals,
        2,
        CLOSURE_MARGINAL_BOUND,
        "<=",
        f"row/col sums stay 1 along {CHAIN_DEPTH}-deep products of generated maps",
    ),
    PropertySpec(
        "closure_specnorm",
        _check_closure_specnorm,
        2,
        CLOSURE_SPECNORM_BOUND,
        "<=",
        f"spectral norm stays 1 along {CHAIN_DEPTH}-deep products of generated maps",
    ),
    PropertySpec(
        "exactness_gap",
        _check_exactness_gap,
        100,
        EXACTNESS_GAP_FLOOR,
        ">",
        "20-iteration Sinkhorn marginals carry a measurable truncation residual",
    ),
    PropertySpec(
        "membership_mhc",
        _check_membership_mhc,
        20,
        MEMBERSHIP_MHC_BOUND,
        "<=",
        "Sinkhorn maps are nonnegative with exact column sums at any parameters",
    ),
    PropertySpec(
        "membership_mhc_lite",
        _check_membership_mhc_lite,
        20,
        MEMBERSHIP_LITE_BOUND,
        "<=",
        "permutation mixtures are doubly stochastic at any parameters",
    ),
    PropertySpec(
        "membership_shc",
        _check_membership_shc,
        20,
        MEMBERSHIP_SHC_BOUND,
        "<=",
        "spectrum-bounded maps stay on the unit sphere at any parameters",
    ),
    PropertySpec(
        "mean_preserve",
        _check_mean_preserve,
        20,
        MEAN_PRESERVE_BOUND,
        "<=",
        "unit column sums preserve the cross-stream mean of any state",
    ),
    PropertySpec(
        "completeness",
        _check_completeness,
        50,
        MEMBERSHIP_SHC_BOUND,
        "<=",
        "any orthogonal factor pair (incl. reflections) lands on the sphere",
    ),
    PropertySpec(
        "grad_ops",
        _check_grad_ops,
        50,
        GRAD_OPS_BOUND,
        "<=",
        "every differentiable op matches central finite differences",
    ),
    PropertySpec(
        "grad_generators",
        _check_grad_generators,
        1,
        GRAD_GENERATORS_BOUND,
        "<=",
        "each generator + stream update matches finite differences (n=4, C=8, T=3)",
    ),
    PropertySpec(
        "init_identity_shc",
        _check_init_identity_shc,
        3,
        INIT_SHC_BOUND,
        "<=",
        "fresh spectrum-bounded maps sit within (1-tanh 4)(1-1/n) of identity",
    ),
    PropertySpec(
        "init_identity_mhc",
        _check_init_identity_mhc,
        3,
        INIT_MHC_BOUND,
        "<=",
        "fresh Sinkhorn maps sit near identity",
    ),
    PropertySpec(
        "init_identity_mhc_lite",
        _check_init_identity_mhc_lite,
        3,
        INIT_LITE_DIAG_FLOOR,
        ">",
        "fresh permutation mixtures keep a dominant diagonal",
    ),
    PropertySpec(
        "init_identity_hc",
        _check_init_identity_hc,
        3,
        0.0,
        "<=",
        "fresh unconstrained maps are exactly the identity",
    ),
)

PROPERTY_NAMES = tuple(spec.name for spec in REGISTRY)


def select(properties: Optional[Sequence[str]]):
    """Resolve requested names to registry entries; a name selects itself
    plus any entry extending it with an underscore (``membership`` selects
    all three membership properties)."""
    if not properties:
        return list(REGISTRY)
    chosen = []
    for token in properties:
        matches = [s for s in REGISTRY if s.name == token or s.name.startswith(token + "_")]
        if not matches:
            raise ValueError(
                f"unknown property {token!r}; available: {', '.join(PROPERTY_NAMES)}"
            )
        chosen.extend(m for m in matches if m not in chosen)
    return sorted(chosen, key=REGISTRY.index)


def run(properties: Optional[Sequence[str]] = None, samples: Optional[int] = None, seed: int = 0):
    """Execute the selected properties; returns a PropertyResult per entry.

    Each property gets an independent RNG keyed by (seed, registry index),
    so a filtered run reproduces exactly the rows of a full run."""
    results = []
    for spec in select(properties):
        rng = np.random.default_rng([seed, REGISTRY.index(spec)])
        count = spec.default_samples if samples is None else samples
        worst = spec.check(count, rng)
        passed = worst <= spec.bound if spec.relation == "<=" else worst > spec.bound
        results.append(
            PropertyResult(
                name=spec.name,
                samples=count,
                worst=worst,
                bound=spec.bound,
                relation=spec.relation,
                passed=passed,
                note=spec.note,
            )
        )
    return results


def format_table(results: Sequence[PropertyResult]) -> str:
    """Fixed-width pass/fail table over the result rows."""
    width = max(len(r.name) for r in results)
    lines = [f"{'property':<{width}}  samples  worst        bound       result"]
    for r in results:
        lines.append(
            f"{r.name:<{width}}  {r.samples:>7d}  {r.worst:<11.4e}  "
            f"{r.relation:<2} {r.bound:<8.2e}  {'pass' if r.passed else 'FAIL'}"
        )
    counts = f"{sum(r.passed for r in results)}/{len(results)} properties passed"
    lines.append(counts)
    return "\n".join(lines)
