"""Finite-dimensional conditional Gaussian multiplicative chaos.

Spectral factorization of intersection operators in weighted inner products,
the exponential-martingale reweighting, exact moment formulas, shift
characterization checks, partial isometries between factorizations, operator
embedding along window restriction, and the strength-indexed flow.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, GuardError, NonPSDError, OverflowGuardError, SupportMismatchError

__all__ = [
    "WeightedInnerProduct",
    "SpectralFactor",
    "GaussianDraw",
    "GMCRealization",
    "spectral_factorize",
    "kahane_gmc",
    "gmc_moment_oracle",
    "shamov_shift_check",
    "partial_isometry",
    "embed_factor",
    "gmc_flow",
]

EIGEN_CLAMP = 1e-10
EXP_GUARD = 600.0


def _as_weights(base):
    """Accept a bare weight array or anything carrying a ``weights`` attribute."""
    w = getattr(base, "weights", base)
    w = np.asarray(w, dtype=float)
    if w.ndim != 1:
        raise DomainError("weights must be a 1D array")
    if np.any(w < 0):
        raise DomainError("weights must be nonnegative")
    return w


@dataclass(frozen=True)
class WeightedInnerProduct:
    """Positive masses defining <f, g> = sum_i mu_i f_i g_i."""

    masses: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.masses, dtype=float)
        if m.ndim != 1 or np.any(m <= 0):
            raise DomainError("masses must be positive")
        object.__setattr__(self, "masses", m)

    def __len__(self):
        return len(self.masses)


@dataclass(frozen=True)
class SpectralFactor:
    """Eigen-decomposition of a weighted intersection operator.

    ``eigenvalues`` are the nonzero spectrum in descending order.
    ``eigenvectors`` has one column per retained mode; the columns are
    orthonormal in the weighted inner product.  ``coefficient_map`` is the
    factor Y with Y e_j = sqrt(lambda_j) phi_j, so Y Y* reproduces the
    weighted operator.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    weighted_product: WeightedInnerProduct

    def __post_init__(self):
        lam = np.asarray(self.eigenvalues, dtype=float)
        phi = np.asarray(self.eigenvectors, dtype=float)
        object.__setattr__(self, "eigenvalues", lam)
        object.__setattr__(self, "eigenvectors", phi)
        if phi.shape[1] != len(lam):
            raise DomainError("one eigenvector column per eigenvalue")
        if len(lam) > 1 and np.any(np.diff(lam) > 1e-12):
            raise DomainError("eigenvalues must be descending")

    @property
    def coefficient_map(self) -> np.ndarray:
        """Matrix Y, shape (paths, modes)."""
        return self.eigenvectors * np.sqrt(self.eigenvalues)[None, :]

    @property
    def kernel_diagonal(self) -> np.ndarray:
        """sum_j (Y e_j)_i^2, the retained-spectrum variance per path."""
        Y = self.coefficient_map
        return np.sum(Y * Y, axis=1)

    def to_json(self) -> str:
        return json.dumps(
            {
                "eigenvalues": self.eigenvalues.tolist(),
                "eigenvectors": self.eigenvectors.tolist(),
                "weights": self.weighted_product.masses.tolist(),
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "SpectralFactor":
        d = json.loads(text)
        return cls(
            np.asarray(d["eigenvalues"], dtype=float),
            np.asarray(d["eigenvectors"], dtype=float),
            WeightedInnerProduct(np.asarray(d["weights"], dtype=float)),
        )


@dataclass(frozen=True)
class GaussianDraw:
    """An isotropic Gaussian coefficient vector with strength a (E xi_j^2 = a)."""

    strength: float
    components: np.ndarray

    def __post_init__(self):
        if self.strength < 0:
            raise DomainError("strength must be >= 0")
        object.__setattr__(self, "components",
                           np.asarray(self.components, dtype=float))


@dataclass(frozen=True)
class GMCRealization:
    """A realized chaos measure: base weights times the exponential factor."""

    base_weights: np.ndarray
    new_weights: np.ndarray


def spectral_factorize(kernel, weights: WeightedInnerProduct) -> SpectralFactor:
    """Eigenpairs of the weighted operator (Q psi)_i = sum_j mu_j K_ij psi_j.

    Solved as the symmetric problem for D^(1/2) K D^(1/2); eigenvalues below
    the clamp threshold are dropped (zero spectrum), negatives beyond
    -1e-10 lambda_max raise.
    """
    K = np.asarray(getattr(kernel, "entries", kernel), dtype=float)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise DomainError("kernel must be a square matrix")
    if not np.allclose(K, K.T, atol=1e-12 * max(1.0, np.abs(K).max())):
        raise DomainError("kernel must be symmetric")
    mu = weights.masses
    if len(mu) != K.shape[0]:
        raise DomainError("weights dimension mismatch")
    d = np.sqrt(mu)
    S = d[:, None] * K * d[None, :]
    lam, u = np.linalg.eigh(S)
    lam_max = float(lam.max(initial=0.0))
    if lam_max > 0 and lam.min() < -EIGEN_CLAMP * lam_max:
        raise NonPSDError(f"kernel is not positive semidefinite (min eig {lam.min():.3e})")
    if lam_max <= 0 and lam.min() < -1e-14:
        raise NonPSDError("kernel is not positive semidefinite")
    keep = lam > EIGEN_CLAMP * lam_max
    lam = lam[keep][::-1]
    u = u[:, keep][:, ::-1]
    phi = u / d[:, None]
    return SpectralFactor(lam, phi, weights)


def kahane_gmc(base, factor: SpectralFactor, draw: GaussianDraw) -> GMCRealization:
    """Reweight by the exponential martingale of the factor modes.

    new_w_i = w_i exp(sum_j xi_j (Y e_j)_i - (a/2) sum_j (Y e_j)_i^2).
    """
    w = _as_weights(base)
    Y = factor.coefficient_map
    if w.shape[0] != Y.shape[0]:
        raise DomainError("ensemble size does not match the factor")
    if len(draw.components) != Y.shape[1]:
        raise DomainError("draw component count must equal the number of modes")
    expo = Y @ draw.components - 0.5 * draw.strength * factor.kernel_diagonal
    if np.any(np.abs(expo) > EXP_GUARD):
        raise OverflowGuardError("GMC exponent left the safe range")
    return GMCRealization(w, w * np.exp(expo))


def gmc_moment_oracle(base, kernel, a: float, n: int, f=None) -> float:
    """Exact n-th moment  sum_{i_1..i_n} prod_k mu_{i_k} e^{a sum_{k<l} K} f.

    ``f`` maps an index tuple to a real; omitted means f = 1.
    """
    w = _as_weights(base)
    K = np.asarray(getattr(kernel, "entries", kernel), dtype=float)
    if n < 1 or n > 4:
        raise GuardError("moment order must be in [1, 4]")
    if len(w) ** n > 5 * 10**6:
        raise GuardError("ensemble too large for exhaustive tuple sums")
    total = 0.0
    for idx in itertools.product(range(len(w)), repeat=n):
        pair_sum = sum(K[idx[k], idx[l]] for k in range(n) for l in range(k + 1, n))
        term = math.exp(a * pair_sum) * float(np.prod(w[list(idx)]))
        if f is not None:
            term *= f(idx)
        total += term
    return total


def shamov_shift_check(base, factor: SpectralFactor, draw: GaussianDraw, h) -> float:
    """Max relative discrepancy of M[xi + h] vs M[xi] e^(Y h), an exact identity."""
    h = np.asarray(h, dtype=float)
    if len(h) != len(draw.components):
        raise DomainError("shift dimension mismatch")
    shifted = kahane_gmc(base, factor,
                         GaussianDraw(draw.strength, draw.components + h))
    plain = kahane_gmc(base, factor, draw)
    Y = factor.coefficient_map
    tilted = plain.new_weights * np.exp(Y @ h)
    scale = np.maximum(np.abs(shifted.new_weights), np.abs(tilted))
    scale[scale == 0.0] = 1.0
    return float(np.max(np.abs(shifted.new_weights - tilted) / scale))


def partial_isometry(Y1: np.ndarray, Y2: np.ndarray,
                     weights: WeightedInnerProduct | None = None,
                     gram_tol: float = 1e-8) -> np.ndarray:
    """The coefficient-space map iota with Y1 = Y2 iota, for factors of the
    same weighted Gram operator.

    iota is a partial isometry: iota^T iota is the orthogonal projector onto
    range(Y1^T D), and iota is norm-preserving off the null space of Y1.
    """
    Y1 = np.asarray(Y1, dtype=float)
    Y2 = np.asarray(Y2, dtype=float)
    if Y1.shape[0] != Y2.shape[0]:
        raise DomainError("factor maps must share their path space")
    if weights is None:
        d = np.ones(Y1.shape[0])
    else:
        d = np.sqrt(weights.masses)
    A1 = d[:, None] * Y1
    A2 = d[:, None] * Y2
    g1 = A1 @ A1.T
    g2 = A2 @ A2.T
    scale = max(np.abs(g1).max(), np.abs(g2).max(), 1e-30)
    if np.abs(g1 - g2).max() > gram_tol * scale:
        raise DomainError("factor maps have different Gram operators")
    return np.linalg.pinv(A2) @ A1


def embed_factor(small: SpectralFactor, restriction, big_weights,
                 small_kernel) -> tuple[np.ndarray, float]:
    """Extend eigenvectors of a small-window factor to a finer ensemble whose
    restrictions land in the small ensemble's support.

    ``restriction`` maps each big-ensemble path index to its small-ensemble
    path; ``big_weights`` must push forward to the small masses.  The
    embedded eigenvector table is phi_i(p) = phi_i(restriction(p)) (the
    kernel-extension formula collapses to this in finite dimensions), and the
    returned discrepancy is the max deviation of the reassembled kernel from
    the restricted intersection matrix.
    """
    r = np.asarray(restriction, dtype=int)
    wb = _as_weights(big_weights)
    if len(r) != len(wb):
        raise DomainError("one restriction target per big-ensemble path")
    mu0 = small.weighted_product.masses
    if np.any(r < 0) or np.any(r >= len(mu0)):
        raise SupportMismatchError("a restricted path is absent from the small ensemble")
    push = np.zeros(len(mu0))
    np.add.at(push, r, wb)
    if not np.allclose(push, mu0, rtol=1e-10, atol=1e-12):
        raise SupportMismatchError("big weights do not push forward to the small masses")
    K0 = np.asarray(getattr(small_kernel, "entries", small_kernel), dtype=float)
    phi_big = small.eigenvectors[r, :]
    reassembled = (phi_big * small.eigenvalues[None, :]) @ phi_big.T
    disc = float(np.max(np.abs(reassembled - K0[np.ix_(r, r)])))
    return phi_big, disc


def gmc_flow(base, kernel, weights: WeightedInnerProduct, a_grid, seed):
    """Chaos measures along an increasing strength grid, driven by Brownian
    coefficients: xi_j(a) has independent N(0, da) increments per mode.

    Returns one GMCRealization per grid point; the first grid point must be 0
    and returns the base weights unchanged.
    """
    a_grid = np.asarray(a_grid, dtype=float)
    if len(a_grid) == 0 or a_grid[0] != 0.0 or np.any(np.diff(a_grid) <= 0):
        raise DomainError("a_grid must be increasing and start at 0")
    factor = spectral_factorize(kernel, weights)
    k = len(factor.eigenvalues)
    rng = np.random.default_rng(seed)
    xi = np.zeros(k)
    out = []
    prev_a = 0.0
    for a in a_grid:
        if a > prev_a:
            xi = xi + rng.normal(0.0, math.sqrt(a - prev_a), size=k)
            prev_a = a
        out.append(kahane_gmc(base, factor, GaussianDraw(a, xi)))
    return out
