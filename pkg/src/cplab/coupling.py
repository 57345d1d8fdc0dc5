"""Couplings across subintervals of a time window.

Direct-sum factorizations of window-additive intersection kernels, the
isometric embedding of the big-window coefficient space into the direct sum,
coupled noise generation, the concatenation / conditional-expectation check,
and the universal-space projection identity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .gmc import GaussianDraw, SpectralFactor, WeightedInnerProduct, _as_weights

__all__ = [
    "IntervalPartition",
    "DirectSumFactor",
    "CouplingIsometry",
    "direct_sum_factor",
    "coupling_isometry",
    "coupled_noise",
    "concatenation_check",
    "naimark_projection_check",
]


@dataclass(frozen=True)
class IntervalPartition:
    """A window (s, t) split into internally disjoint covering pieces."""

    big_window: tuple[int, int]
    pieces: tuple[tuple[int, int], ...]

    def __post_init__(self):
        s, t = self.big_window
        if t <= s:
            raise DomainError("window must have positive length")
        if not self.pieces:
            raise DomainError("at least one piece required")
        ordered = sorted(self.pieces)
        if ordered[0][0] != s or ordered[-1][1] != t:
            raise DomainError("pieces must cover the window")
        for (a, b), (c, d) in zip(ordered, ordered[1:]):
            if b != c:
                raise DomainError("pieces must be internally disjoint and contiguous")
        for a, b in ordered:
            if b <= a:
                raise DomainError("empty piece")
        object.__setattr__(self, "pieces", tuple(ordered))


@dataclass(frozen=True)
class DirectSumFactor:
    """Block-concatenated factor [Y_1 ... Y_P] over the piece coefficient spaces."""

    matrix: np.ndarray
    block_slices: tuple[slice, ...]
    weighted_product: WeightedInnerProduct

    @property
    def block_count(self) -> int:
        return len(self.block_slices)

    def block(self, p: int) -> np.ndarray:
        return self.matrix[:, self.block_slices[p]]


@dataclass(frozen=True)
class CouplingIsometry:
    """The map iota from big-window coefficients into the direct sum, with
    Y_big = Y_sum iota and iota norm-preserving off null(Y_big)."""

    matrix: np.ndarray
    block_slices: tuple[slice, ...]


def direct_sum_factor(piece_factors, big_kernel=None,
                      tol: float = 1e-8) -> DirectSumFactor:
    """Concatenate piece factors; their Grams must sum to the big-window Gram.

    With ``big_kernel`` given, window additivity (sum of piece kernels equals
    the big kernel on the retained spectra) is verified within ``tol``.
    """
    if not piece_factors:
        raise DomainError("at least one piece factor required")
    mu = piece_factors[0].weighted_product
    mats = []
    for f in piece_factors:
        if not np.array_equal(f.weighted_product.masses, mu.masses):
            raise DomainError("piece factors must share the weighted inner product")
        mats.append(f.coefficient_map)
    slices = []
    start = 0
    for m in mats:
        slices.append(slice(start, start + m.shape[1]))
        start += m.shape[1]
    Y = np.hstack(mats) if mats else np.zeros((len(mu), 0))
    if big_kernel is not None:
        K = np.asarray(getattr(big_kernel, "entries", big_kernel), dtype=float)
        rebuilt = Y @ Y.T
        scale = max(np.abs(K).max(), 1.0)
        if np.abs(rebuilt - K).max() > tol * scale:
            raise DomainError("piece kernels do not sum to the big-window kernel")
    return DirectSumFactor(Y, tuple(slices), mu)


def coupling_isometry(big: SpectralFactor, summed: DirectSumFactor,
                      gram_tol: float = 1e-8) -> CouplingIsometry:
    """iota = A_sum^+ A_big in the Euclideanized coordinates A = D^(1/2) Y."""
    Yb = big.coefficient_map
    Ys = summed.matrix
    d = np.sqrt(big.weighted_product.masses)
    if not np.array_equal(big.weighted_product.masses,
                          summed.weighted_product.masses):
        raise DomainError("factors must share the weighted inner product")
    Ab = d[:, None] * Yb
    As = d[:, None] * Ys
    g1 = Ab @ Ab.T
    g2 = As @ As.T
    scale = max(np.abs(g1).max(), np.abs(g2).max(), 1e-30)
    if np.abs(g1 - g2).max() > gram_tol * scale:
        raise DomainError("big and summed factors have different Gram operators")
    iota = np.linalg.pinv(As) @ Ab
    return CouplingIsometry(iota, summed.block_slices)


def coupled_noise(piece_draws, iota: CouplingIsometry) -> GaussianDraw:
    """Big-window coefficients xi_big = iota^T (xi_1 (+) ... (+) xi_P)."""
    if not piece_draws:
        raise DomainError("need at least one piece draw")
    a = piece_draws[0].strength
    if any(d.strength != a for d in piece_draws):
        raise DomainError("piece draws must share their strength")
    stacked = np.concatenate([d.components for d in piece_draws])
    if stacked.shape[0] != iota.matrix.shape[0]:
        raise DomainError("draw dimensions do not match the isometry")
    return GaussianDraw(a, iota.matrix.T @ stacked)


def concatenation_check(base, piece_factors, big: SpectralFactor,
                        iota: CouplingIsometry, middle_index: int,
                        draws, f_battery) -> float:
    """Conditional expectation of the coupled big chaos given the outer noise
    versus the product of the outer piece chaoses; max relative discrepancy.

    The middle piece's noise is integrated out in closed form: given the
    outer draws, xi_big is Gaussian with mean iota^T (outer stack, middle 0)
    and covariance a iota^T P_middle iota, so the expected exponential weight
    is explicit.
    """
    w = _as_weights(base)
    Yb = big.coefficient_map
    Ys_blocks = [f.coefficient_map for f in piece_factors]
    P = len(piece_factors)
    if middle_index < 0 or middle_index >= P:
        raise DomainError("middle piece index out of range")
    if len(draws) != P:
        raise DomainError("one draw per piece required (middle draw is ignored)")
    a = draws[0].strength
    kb = Yb.shape[1]

    # conditional mean of xi_big and the integrated-out covariance
    stacked = np.concatenate([
        np.zeros_like(d.components) if p == middle_index else d.components
        for p, d in enumerate(draws)
    ])
    mean = iota.matrix.T @ stacked
    sl = iota.block_slices[middle_index]
    iota_mid = iota.matrix[sl, :]
    cov = a * iota_mid.T @ iota_mid
    kb_diag = np.sum(Yb * Yb, axis=1)
    cond = w * np.exp(Yb @ mean + 0.5 * np.einsum("ij,jk,ik->i", Yb, cov, Yb)
                      - 0.5 * a * kb_diag)

    # product of the outer piece chaoses (the middle contributes only its
    # deterministic bridge normalization, which is 1 for the exponential
    # martingale weights)
    expo = np.zeros(len(w))
    for p, (Yp, d) in enumerate(zip(Ys_blocks, draws)):
        if p == middle_index:
            continue
        expo += Yp @ d.components - 0.5 * a * np.sum(Yp * Yp, axis=1)
    outer = w * np.exp(expo)

    worst = 0.0
    for f in f_battery:
        f = np.asarray(f, dtype=float)
        lhs = float(cond @ f)
        rhs = float(outer @ f)
        scale = max(abs(lhs), abs(rhs), 1e-300)
        worst = max(worst, abs(lhs - rhs) / scale)
    return worst


def naimark_projection_check(big: SpectralFactor, iota: CouplingIsometry,
                             piece_kernels, piece_index: int) -> float:
    """Max deviation of Y_big proj_piece Y_big^* from the piece kernel.

    The universal space is the direct sum of piece coefficient spaces;
    proj_piece is coordinate projection onto one block, pulled back through
    iota.
    """
    if piece_index < 0 or piece_index >= len(iota.block_slices):
        raise DomainError("piece index not in the partition")
    Yb = big.coefficient_map
    sl = iota.block_slices[piece_index]
    iota_p = iota.matrix[sl, :]
    lhs = Yb @ (iota_p.T @ iota_p) @ Yb.T
    Kp = np.asarray(getattr(piece_kernels[piece_index], "entries",
                            piece_kernels[piece_index]), dtype=float)
    return float(np.abs(lhs - Kp).max())
