"""Residual-stream mixing layers.

Each token carries ``n`` parallel residual streams. A layer derives three
per-token mixing maps from the flattened stream activations — ``h_pre``
(1 x n, aggregates streams into the branch input), ``h_post`` (1 x n,
broadcasts the branch output back onto streams), ``h_res`` (n x n, mixes
the streams that bypass the branch) — and applies

    X' = h_res @ X + h_post^T @ F(h_pre @ X)

The five variants differ only in how ``h_res`` is produced:

- ``rc``        plain residual, n = 1, all maps fixed at 1 (no parameters)
- ``hc``        unconstrained affine: alpha * mat(x W) + b
- ``mhc``       Sinkhorn-normalized: nonnegative, near doubly stochastic
- ``mhc_lite``  softmax-convex combination of all n! permutation matrices
- ``shc``       unit-spectral-norm member of the affine doubly stochastic
                set, assembled from two rotations and a bounded spectrum

Setting ``HCLAB_DEBUG=1`` re-validates every generated ``h_res`` against
its variant's membership predicate on each forward pass.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, fields
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from . import manifold as mf
from .autodiff import DimensionError, Tensor

VARIANTS = ("rc", "hc", "mhc", "mhc_lite", "shc")

# initialization constants: near-identity start for every variant
ALPHA_INIT = 0.01
TAU_INIT = 0.01
GATE_BIAS_OFF = -1.0
GATE_BIAS_ON = 1.0  # a single slot per gate starts open
MIX_LOGIT_OFF = -8.0  # suppressed Sinkhorn / permutation logits
SPECTRUM_BIAS_INIT = 4.0  # tanh(4) = 0.99933: spectrum pinned near 1


@dataclass
class MixBundle:
    """Per-token mixing maps: h_pre (T,1,n), h_post (T,1,n), h_res (T,n,n)."""

    h_pre: Tensor
    h_post: Tensor
    h_res: Tensor


@dataclass
class VariantParams:
    """Learnable state for one mixing layer (unused fields stay None)."""

    variant: str
    n: int
    C: int
    # shared generator (all variants except rc)
    gain: Optional[Tensor] = None
    w_pre: Optional[Tensor] = None
    w_post: Optional[Tensor] = None
    b_pre: Optional[Tensor] = None
    b_post: Optional[Tensor] = None
    alpha_pre: Optional[Tensor] = None
    alpha_post: Optional[Tensor] = None
    # hc / mhc / mhc_lite residual-mixing generator
    w_res: Optional[Tensor] = None
    b_res: Optional[Tensor] = None
    alpha_res: Optional[Tensor] = None
    # shc residual-mixing generator
    w_u: Optional[Tensor] = None
    w_v: Optional[Tensor] = None
    w_s: Optional[Tensor] = None
    b_u: Optional[Tensor] = None
    b_v: Optional[Tensor] = None
    b_s: Optional[Tensor] = None
    tau_u: Optional[Tensor] = None
    tau_v: Optional[Tensor] = None
    tau_s: Optional[Tensor] = None
    gamma_u: Optional[Tensor] = None
    gamma_v: Optional[Tensor] = None

    def tensors(self) -> dict:
        """Name -> Tensor for every allocated parameter, declaration order."""
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, Tensor):
                out[f.name] = v
        return out


def _debug_enabled() -> bool:
    return os.environ.get("HCLAB_DEBUG", "").strip().lower() in ("1", "true", "yes")


def _param(value, shape=None) -> Tensor:
    data = np.full(shape, float(value)) if shape is not None else np.asarray(float(value))
    return Tensor(data, requires_grad=True)


def init_params(variant: str, n: int, C: int) -> VariantParams:
    """Near-identity initialization: all weight matrices zero, biases set so
    every variant starts indistinguishable from the plain residual."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if n < 1 or C < 1:
        raise ValueError(f"streams and channels must be positive, got n={n}, C={C}")
    if variant == "rc":
        if n != 1:
            raise ValueError("rc is the single-stream baseline; it requires n=1")
        return VariantParams(variant="rc", n=1, C=C)
    if n < 2:
        raise ValueError(f"{variant} needs at least 2 streams, got n={n}")

    nc = n * C
    gate_bias = np.full(n, GATE_BIAS_OFF)
    gate_bias[0] = GATE_BIAS_ON
    p = VariantParams(
        variant=variant,
        n=n,
        C=C,
        gain=_param(1.0, (nc,)),
        w_pre=_param(0.0, (nc, n)),
        w_post=_param(0.0, (nc, n)),
        b_pre=Tensor(gate_bias.copy(), requires_grad=True),
        b_post=Tensor(gate_bias.copy(), requires_grad=True),
        alpha_pre=_param(ALPHA_INIT),
        alpha_post=_param(ALPHA_INIT),
    )
    if variant == "hc":
        p.w_res = _param(0.0, (nc, n * n))
        p.b_res = Tensor(np.eye(n), requires_grad=True)
        p.alpha_res = _param(ALPHA_INIT)
    elif variant == "mhc":
        b = np.full((n, n), MIX_LOGIT_OFF)
        np.fill_diagonal(b, 0.0)
        p.w_res = _param(0.0, (nc, n * n))
        p.b_res = Tensor(b, requires_grad=True)
        p.alpha_res = _param(ALPHA_INIT)
    elif variant == "mhc_lite":
        if n > mf.BVN_MAX_N:
            raise mf.CapacityError(
                f"mhc_lite enumerates all n! permutations; n={n} exceeds {mf.BVN_MAX_N}"
            )
        nfact = math.factorial(n)
        b = np.full(nfact, MIX_LOGIT_OFF)
        b[0] = 0.0  # the first basis element is the identity permutation
        p.w_res = _param(0.0, (nc, nfact))
        p.b_res = Tensor(b, requires_grad=True)
        p.alpha_res = _param(ALPHA_INIT)
    else:  # shc
        k = (n - 1) * (n - 2) // 2
        p.w_u = _param(0.0, (nc, k))
        p.w_v = _param(0.0, (nc, k))
        p.w_s = _param(0.0, (nc, n - 1))
        p.b_u = _param(0.0, (k,))
        p.b_v = _param(0.0, (k,))
        p.b_s = _param(SPECTRUM_BIAS_INIT, (n - 1,))
        p.tau_u = _param(TAU_INIT)
        p.tau_v = _param(TAU_INIT)
        p.tau_s = _param(TAU_INIT)
        p.gamma_u = _param(1.0)
        p.gamma_v = _param(1.0)
    return p


# ---------------------------------------------------------------------------
# generators


def gen_shared(x_flat: Tensor, params: VariantParams):
    """Normalize the flattened streams and derive the two gate maps.

    Returns (x_norm (T,nC), h_pre (T,1,n), h_post (T,1,n)); h_pre entries lie
    in (0,1) and h_post entries in (0,2)."""
    if params.variant == "rc":
        raise ValueError("gen_shared: rc has fixed maps and no generator")
    n, nc = params.n, params.n * params.C
    x_flat = ad._as_tensor(x_flat)
    if x_flat.ndim != 2 or x_flat.shape[1] != nc:
        raise DimensionError(f"gen_shared: expected (T, {nc}), got {x_flat.shape}")
    t_len = x_flat.shape[0]
    x_norm = ad.rmsnorm(x_flat, params.gain)
    pre = ad.sigmoid(ad.bias_add(ad.scale(ad.matmul(x_norm, params.w_pre), params.alpha_pre), params.b_pre))
    post = ad.scale(
        ad.sigmoid(ad.bias_add(ad.scale(ad.matmul(x_norm, params.w_post), params.alpha_post), params.b_post)),
        2.0,
    )
    return x_norm, ad.reshape(pre, (t_len, 1, n)), ad.reshape(post, (t_len, 1, n))


def gen_res_hc(x_norm: Tensor, params: VariantParams) -> Tensor:
    """Unconstrained residual mixing: alpha * mat(x W) + b, no projection."""
    if params.variant != "hc":
        raise ValueError(f"gen_res_hc: wrong variant {params.variant!r}")
    n = params.n
    t_len = x_norm.shape[0]
    raw = ad.reshape(ad.matmul(x_norm, params.w_res), (t_len, n, n))
    return ad.bias_add(ad.scale(raw, params.alpha_res), params.b_res)


def gen_res_mhc(x_norm: Tensor, params: VariantParams, sk_iters: int = mf.SK_ITERS_DEFAULT) -> Tensor:
    """Sinkhorn-normalized residual mixing: nonnegative, column sums exactly
    1 at emission, row sums carrying the truncation residual."""
    if params.variant != "mhc":
        raise ValueError(f"gen_res_mhc: wrong variant {params.variant!r}")
    n = params.n
    t_len = x_norm.shape[0]
    raw = ad.reshape(ad.matmul(x_norm, params.w_res), (t_len, n, n))
    logits = ad.bias_add(ad.scale(raw, params.alpha_res), params.b_res)
    return ad.sinkhorn(logits, sk_iters)


_BASIS_CACHE: dict = {}


def _perm_basis_flat(n: int) -> Tensor:
    """All n! permutation matrices, flattened to (n!, n*n), as a constant."""
    if n not in _BASIS_CACHE:
        basis = mf.bvn_basis(n)
        _BASIS_CACHE[n] = Tensor(basis.perms.reshape(len(basis.perms), n * n))
    return _BASIS_CACHE[n]


def gen_res_mhclite(x_norm: Tensor, params: VariantParams) -> Tensor:
    """Convex combination of all n! permutation matrices with softmax
    coefficients: exactly doubly stochastic by construction."""
    if params.variant != "mhc_lite":
        raise ValueError(f"gen_res_mhclite: wrong variant {params.variant!r}")
    n = params.n
    t_len = x_norm.shape[0]
    logits = ad.bias_add(ad.scale(ad.matmul(x_norm, params.w_res), params.alpha_res), params.b_res)
    coeffs = ad.softmax(logits, axis=-1)
    return ad.reshape(ad.matmul(coeffs, _perm_basis_flat(n)), (t_len, n, n))


def gen_res_shc(x_norm: Tensor, params: VariantParams) -> Tensor:
    """Unit-spectral-norm residual mixing.

    Per token: two rotations of the zero-sum subspace are built by the
    Cayley transform of skew matrices filled from bounded activations, the
    spectrum is a tanh-bounded diagonal, and the mixing map is

        h_res = J + (U_Z R_u) diag(sigma) (U_Z R_v)^T

    which lands on the unit sphere of the affine doubly stochastic set."""
    if params.variant != "shc":
        raise ValueError(f"gen_res_shc: wrong variant {params.variant!r}")
    n = params.n
    t_len = x_norm.shape[0]
    m = n - 1
    eye = Tensor(np.eye(m))
    consts = mf.constants(n)
    u_z = Tensor(consts.U_Z)

    def rotation(w, b, tau, gamma):
        acts = ad.scale(ad.tanh(ad.bias_add(ad.scale(ad.matmul(x_norm, w), tau), b)), gamma)
        skew = ad.skew_embed(acts, m)
        # cayley: (I - A)(I + A)^-1
        return ad.matmul(ad.bias_add(ad.scale(skew, -1.0), eye), ad.mat_inverse(ad.bias_add(skew, eye)))

    r_u = rotation(params.w_u, params.b_u, params.tau_u, params.gamma_u)
    r_v = rotation(params.w_v, params.b_v, params.tau_v, params.gamma_v)
    sigma = ad.tanh(ad.bias_add(ad.scale(ad.matmul(x_norm, params.w_s), params.tau_s), params.b_s))
    u = ad.matmul(u_z, r_u)  # (T, n, n-1)
    v = ad.matmul(u_z, r_v)
    core = ad.matmul(u, ad.matmul(ad.diag_embed(sigma), ad.permute(v, (0, 2, 1))))
    return ad.bias_add(core, Tensor(consts.J))


def _debug_validate(variant: str, h_res: np.ndarray) -> None:
    for t in range(h_res.shape[0]):
        m = h_res[t]
        if variant == "mhc":
            col_dev = np.abs(m.sum(axis=0) - 1.0).max()
            if m.min() < 0.0 or col_dev > 1e-12:
                raise AssertionError(
                    f"debug: mhc h_res violates column-stochasticity at token {t}: "
                    f"min {m.min():.3e}, column deviation {col_dev:.3e}"
                )
        elif variant == "mhc_lite":
            rep = mf.membership(m, "birkhoff", 1e-12)
            if not rep.ok:
                raise AssertionError(
                    f"debug: mhc_lite h_res left the polytope at token {t}: {rep.max_violation:.3e}"
                )
        elif variant == "shc":
            rep = mf.membership(m, "sphere", 1e-9)
            if not rep.ok:
                raise AssertionError(
                    f"debug: shc h_res left the unit sphere at token {t}: {rep.max_violation:.3e}"
                )


def generate_bundle(x: Tensor, params: VariantParams, sk_iters: int = mf.SK_ITERS_DEFAULT) -> MixBundle:
    """Produce the per-token mixing maps for a stream state x (T, n, C)."""
    x = ad._as_tensor(x)
    if x.ndim != 3 or x.shape[1] != params.n or x.shape[2] != params.C:
        raise DimensionError(
            f"generate_bundle: expected (T, {params.n}, {params.C}), got {x.shape}"
        )
    t_len = x.shape[0]
    if params.variant == "rc":
        ones = Tensor(np.ones((t_len, 1, 1)))
        return MixBundle(h_pre=ones, h_post=ones, h_res=ones)
    x_flat = ad.reshape(x, (t_len, params.n * params.C))
    x_norm, h_pre, h_post = gen_shared(x_flat, params)
    if params.variant == "hc":
        h_res = gen_res_hc(x_norm, params)
    elif params.variant == "mhc":
        h_res = gen_res_mhc(x_norm, params, sk_iters)
    elif params.variant == "mhc_lite":
        h_res = gen_res_mhclite(x_norm, params)
    else:
        h_res = gen_res_shc(x_norm, params)
    if _debug_enabled():
        _debug_validate(params.variant, h_res.data)
    return MixBundle(h_pre=h_pre, h_post=h_post, h_res=h_res)


# ---------------------------------------------------------------------------
# the stream update rule


def hyper_step(x: Tensor, branch: Callable[[Tensor], Tensor], bundle: MixBundle) -> Tensor:
    """X' = h_res @ X + h_post^T @ F(h_pre @ X).

    ``branch`` maps the aggregated (T, C) branch input to (T, C); it runs
    once over the whole sequence so attention can mix tokens."""
    x = ad._as_tensor(x)
    if x.ndim != 3:
        raise DimensionError(f"hyper_step: expected (T, n, C) streams, got {x.shape}")
    t_len, n, c = x.shape
    if bundle.h_res.shape != (t_len, n, n) or bundle.h_pre.shape != (t_len, 1, n):
        raise DimensionError(
            f"hyper_step: bundle shapes {bundle.h_res.shape}/{bundle.h_pre.shape} "
            f"do not match streams {x.shape}"
        )
    branch_in = ad.reshape(ad.matmul(bundle.h_pre, x), (t_len, c))
    branch_out = branch(branch_in)
    if branch_out.shape != (t_len, c):
        raise DimensionError(
            f"hyper_step: branch returned {branch_out.shape}, expected {(t_len, c)}"
        )
    carried = ad.matmul(bundle.h_res, x)
    injected = ad.matmul(ad.permute(bundle.h_post, (0, 2, 1)), ad.reshape(branch_out, (t_len, 1, c)))
    return ad.add(carried, injected)


def expand_streams(x: Tensor, n: int) -> Tensor:
    """Replicate each token embedding (T, C) into n identical streams."""
    x = ad._as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"expand_streams: expected (T, C), got {x.shape}")
    t_len, c = x.shape
    return ad.matmul(Tensor(np.ones((n, 1))), ad.reshape(x, (t_len, 1, c)))


def collapse_streams(x: Tensor) -> Tensor:
    """Average the n streams back into one (T, C) activation."""
    x = ad._as_tensor(x)
    if x.ndim != 3:
        raise DimensionError(f"collapse_streams: expected (T, n, C), got {x.shape}")
    t_len, n, c = x.shape
    return ad.reshape(ad.matmul(Tensor(np.full((1, n), 1.0 / n)), x), (t_len, c))
