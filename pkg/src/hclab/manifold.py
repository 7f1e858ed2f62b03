"""Constrained matrix sets and their building blocks.

Plain numpy layer (no tape): constructors for the uniform matrix J and the
truncated Helmert basis, the Cayley map, Sinkhorn normalization, convex
combinations of permutation matrices, power-iteration spectral norms, and
membership predicates for the four matrix sets used by the residual
generators (doubly stochastic, affine, zero-marginal, unit spectral sphere).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .autodiff import SingularMatrixError

SK_ITERS_DEFAULT = 20
SPECTRAL_TOL_DEFAULT = 1e-12
SPECTRAL_MAX_ITERS_DEFAULT = 10000
BVN_MAX_N = 8  # n! basis matrices; 8! = 40320 is the memory guard

_POWER_SEED = 0x5EED


class ContractError(ValueError):
    pass


class CapacityError(ValueError):
    pass


@dataclass(frozen=True)
class ManifoldConstants:
    n: int
    J: np.ndarray
    U_Z: np.ndarray


@dataclass(frozen=True)
class BvnBasis:
    n: int
    perms: np.ndarray  # (n!, n, n), lexicographic order of the permutations


@dataclass
class ShcFactors:
    U_core: np.ndarray  # (n-1, n-1) orthogonal
    V_core: np.ndarray  # (n-1, n-1) orthogonal
    Sigma: np.ndarray  # (n-1,) singular values


def uniform_matrix(n):
    """All entries 1/n; projects a stream stack onto its mean."""
    if n < 2:
        raise ValueError(f"uniform_matrix: n must be >= 2, got {n}")
    return np.full((n, n), 1.0 / n)


def truncated_helmert(n):
    """n x (n-1) orthonormal basis of the subspace orthogonal to the ones
    vector, classical Helmert rows transposed to columns."""
    if n < 2:
        raise ValueError(f"truncated_helmert: n must be >= 2, got {n}")
    u = np.zeros((n, n - 1))
    for j in range(n - 1):
        norm = math.sqrt((j + 1) * (j + 2))
        u[: j + 1, j] = 1.0 / norm
        u[j + 1, j] = -(j + 1) / norm
    return u


def constants(n):
    return ManifoldConstants(n=n, J=uniform_matrix(n), U_Z=truncated_helmert(n))


def skew_from_upper(v, m):
    """Row-major fill of the strict upper triangle; antisymmetric result."""
    v = np.asarray(v, dtype=np.float64)
    k = m * (m - 1) // 2
    if v.shape != (k,):
        raise ValueError(f"skew_from_upper: expected {k} entries for m={m}, got {v.shape}")
    a = np.zeros((m, m))
    iu, ju = np.triu_indices(m, 1)
    a[iu, ju] = v
    a[ju, iu] = -v
    return a


def cayley(a):
    """Map a skew-symmetric matrix to a rotation: Q = (I - a)(I + a)^-1."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"cayley: square matrix expected, got {a.shape}")
    if np.abs(a + a.T).max() > 1e-12:
        raise ContractError(f"cayley: input not skew-symmetric, |A + A^T| = {np.abs(a + a.T).max():.3e}")
    m = a.shape[0]
    eye = np.eye(m)
    inv, flags = _kernels.inverse_batch(np.ascontiguousarray((eye + a)[None]))
    if flags[0] >= 0:  # cannot happen for skew input; guards float misuse
        raise SingularMatrixError(int(flags[0]))
    return (eye - a) @ inv[0]


def sinkhorn_knopp(logits, iters=SK_ITERS_DEFAULT, return_row_exact=False):
    """exp(logits) followed by `iters` rounds of row then column
    normalization. The returned matrix has exact column sums; pass
    return_row_exact=True to also get the iterate one half-step earlier,
    whose row sums are exact instead."""
    logits = np.asarray(logits, dtype=np.float64)
    if iters < 1:
        raise ValueError("sinkhorn_knopp: iters must be >= 1")
    if not np.isfinite(logits).all():
        raise ValueError("sinkhorn_knopp: logits must be finite")
    n = logits.shape[-1]
    flat = np.ascontiguousarray(logits.reshape(-1, n, n))
    out, _, iterates, _ = _kernels.sinkhorn_fwd(flat, iters)
    out = out.reshape(logits.shape)
    if not return_row_exact:
        return out
    return out, iterates[:, -2].reshape(logits.shape)


def bvn_basis(n):
    """All n! permutation matrices, lexicographic in one-line notation."""
    if n > BVN_MAX_N:
        raise CapacityError(f"bvn_basis: n={n} exceeds the n<={BVN_MAX_N} capacity guard")
    if n < 1:
        raise ValueError("bvn_basis: n must be >= 1")
    perms = np.zeros((math.factorial(n), n, n))
    rows = np.arange(n)
    for i, p in enumerate(itertools.permutations(range(n))):
        perms[i, rows, p] = 1.0
    return BvnBasis(n=n, perms=perms)


def bvn_combine(coeffs, basis):
    """Convex combination of the permutation basis; exactly doubly stochastic."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape != (basis.perms.shape[0],):
        raise ValueError(
            f"bvn_combine: expected {basis.perms.shape[0]} coefficients, got {coeffs.shape}"
        )
    if coeffs.min() < 0:
        raise ContractError(f"bvn_combine: negative coefficient {coeffs.min():.3e}")
    if abs(coeffs.sum() - 1.0) > 1e-12:
        raise ContractError(f"bvn_combine: coefficients sum to {coeffs.sum()!r}, not 1")
    return np.tensordot(coeffs, basis.perms, axes=1)


def power_start(q):
    """Deterministic seeded start vector shared by all spectral-norm calls."""
    return np.random.default_rng(_POWER_SEED).standard_normal(q)


def spectral_norm(m, tol=SPECTRAL_TOL_DEFAULT, max_iters=SPECTRAL_MAX_ITERS_DEFAULT, with_flag=False):
    """Largest singular value by power iteration on m^T m.

    Returns the estimate; with_flag=True returns (estimate, converged) so a
    non-converged best estimate is still usable.
    """
    m = np.asarray(m, dtype=np.float64)
    if not np.isfinite(m).all():
        raise ValueError("spectral_norm: entries must be finite")
    sig, conv = _kernels.power_iter(
        np.ascontiguousarray(m[None]), power_start(m.shape[1]), tol, max_iters
    )
    if with_flag:
        return float(sig[0]), bool(conv[0])
    return float(sig[0])


def spectral_norm_batch(ms, tol=SPECTRAL_TOL_DEFAULT, max_iters=SPECTRAL_MAX_ITERS_DEFAULT):
    ms = np.ascontiguousarray(np.asarray(ms, dtype=np.float64))
    sig, conv = _kernels.power_iter(ms, power_start(ms.shape[2]), tol, max_iters)
    return sig, conv


def _validate_factors(factors, n):
    u, v, s = factors.U_core, factors.V_core, factors.Sigma
    m = n - 1
    eye = np.eye(m)
    if u.shape != (m, m) or v.shape != (m, m) or s.shape != (m,):
        raise ContractError(f"shc factors: bad shapes {u.shape}, {v.shape}, {s.shape} for n={n}")
    if np.abs(u.T @ u - eye).max() > 1e-10:
        raise ContractError("shc factors: U_core is not orthogonal within 1e-10")
    if np.abs(v.T @ v - eye).max() > 1e-10:
        raise ContractError("shc factors: V_core is not orthogonal within 1e-10")
    if np.abs(s).max() > 1.0 + 1e-12:
        raise ContractError(f"shc factors: |Sigma| max {np.abs(s).max()} exceeds 1")


def shc_residual(factors, consts, validate=True):
    """J plus the displacement (U_Z U_core) diag(Sigma) (U_Z V_core)^T."""
    if validate:
        _validate_factors(factors, consts.n)
    u = consts.U_Z @ factors.U_core
    v = consts.U_Z @ factors.V_core
    return consts.J + (u * factors.Sigma) @ v.T


@dataclass(frozen=True)
class MembershipReport:
    ok: bool
    max_violation: float


def membership(m, set_name, tol=1e-9):
    """Check m against one of the matrix sets; reports the largest violation.

    birkhoff: nonnegative, row and column sums 1. affine: row and column
    sums 1. zero_marginal: row and column sums 0. sphere: affine with
    spectral norm 1.
    """
    m = np.asarray(m, dtype=np.float64)
    row = m.sum(axis=1)
    col = m.sum(axis=0)
    if set_name == "birkhoff":
        viol = max(
            float(np.abs(row - 1.0).max()),
            float(np.abs(col - 1.0).max()),
            float(max(0.0, -m.min())),
        )
    elif set_name == "affine":
        viol = max(float(np.abs(row - 1.0).max()), float(np.abs(col - 1.0).max()))
    elif set_name == "zero_marginal":
        viol = max(float(np.abs(row).max()), float(np.abs(col).max()))
    elif set_name == "sphere":
        affine = max(float(np.abs(row - 1.0).max()), float(np.abs(col - 1.0).max()))
        viol = max(affine, abs(spectral_norm(m) - 1.0))
    else:
        raise ValueError(f"membership: unknown set {set_name!r}")
    return MembershipReport(ok=viol <= tol, max_violation=viol)
