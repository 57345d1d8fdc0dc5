"""Scalar pair-interaction function, its convolution powers and resummation,
diagram enumeration, the two-particle interacting semigroup kernel, centered
second moments, and the pair/quadruple variance functionals.

The central object is

    j(theta, t) = int_0^oo  t^(v-1) exp(theta v) / Gamma(v) dv ,

which drives every pair interaction; everything else in this module is built
from it together with 2D heat kernels.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .errors import DomainError, GuardError, OverflowGuardError
from .quad import (
    QuadratureResult,
    SingularityProfile,
    heat_kernel,
    integrate_interval,
    integrate_semi_infinite,
    log_gamma,
    simplex_convolve,
)

__all__ = [
    "Diagram",
    "ThetaParams",
    "Resummation",
    "GaussianProfile",
    "j_theta",
    "j_theta_result",
    "JThetaInterpolant",
    "JKernel",
    "j_mass_near_zero",
    "j_group_mass_near_zero",
    "j_convolution_power",
    "j_resummed",
    "enumerate_diagrams",
    "semigroup2",
    "centered_moment2",
    "variance_functionals",
    "pair_gaussian_pairing",
]


# ---------------------------------------------------------------------------
# diagrams
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Diagram:
    """A finite sequence of unordered particle pairs with no immediate repeats."""

    n: int
    pairs: tuple[frozenset, ...]

    def __post_init__(self):
        if self.n < 2:
            raise DomainError("need at least two particles")
        if len(self.pairs) < 1:
            raise DomainError("a diagram has at least one pair")
        for p in self.pairs:
            if len(p) != 2 or not all(1 <= i <= self.n for i in p):
                raise DomainError(f"invalid pair {set(p)} for n={self.n}")
        for a, b in zip(self.pairs, self.pairs[1:]):
            if a == b:
                raise DomainError("consecutive pairs must differ")

    def __len__(self):
        return len(self.pairs)

    @property
    def covers_all(self) -> bool:
        seen = set()
        for p in self.pairs:
            seen |= p
        return seen == set(range(1, self.n + 1))


def enumerate_diagrams(n: int, max_len: int, cover_only: bool = False) -> list[Diagram]:
    """All pair sequences over {1..n} without immediate repeats, lengths 1..max_len.

    With ``cover_only`` keeps only sequences whose pairs cover every particle.
    """
    if not 2 <= n <= 5:
        raise GuardError(f"n must be in [2, 5], got {n}")
    if not 1 <= max_len <= 8:
        raise GuardError(f"max_len must be in [1, 8], got {max_len}")
    pairs = [frozenset(c) for c in itertools.combinations(range(1, n + 1), 2)]
    out: list[Diagram] = []
    frontier: list[tuple[frozenset, ...]] = [()]
    for _ in range(max_len):
        nxt = []
        for seq in frontier:
            for p in pairs:
                if seq and seq[-1] == p:
                    continue
                nxt.append(seq + (p,))
        for seq in nxt:
            d = Diagram(n, seq)
            if not cover_only or d.covers_all:
                out.append(d)
        frontier = nxt
    return out


@dataclass(frozen=True)
class ThetaParams:
    """Renormalized coupling theta and nonnegative noise strength a."""

    theta: float
    a: float = 0.0

    def __post_init__(self):
        if self.a < 0:
            raise DomainError("noise strength a must be >= 0")


# ---------------------------------------------------------------------------
# the scalar special function and its convolution powers
# ---------------------------------------------------------------------------


def _j_integrand(theta: float, t: float, extra_log: Callable[[float], float] | None = None):
    # t^(v-1) e^(theta v) = exp(v z - log t) with z = theta + log t; keeping the
    # exponent assembled in log form stays finite down to denormal t
    lt = math.log(t)
    z = theta + lt

    def f(v):
        if v <= 0.0:
            return 0.0
        e = v * z - lt - log_gamma(v)
        if extra_log is not None:
            e += extra_log(v)
        if e < -745.0:
            return 0.0
        # only reachable for t below ~1e-312; clamp keeps the quadrature
        # finite there (the convolution weight of that region is ~0)
        return math.exp(min(e, 709.0))

    return f


def j_theta_result(theta: float, t: float, tol: float = 1e-10) -> QuadratureResult:
    """Like :func:`j_theta` but returns the full quadrature result."""
    if t <= 0:
        raise DomainError("j_theta requires t > 0")
    return integrate_semi_infinite(_j_integrand(theta, t), tol=tol)


def j_theta(theta: float, t: float, tol: float = 1e-10) -> float:
    """The pair-interaction special function j^theta(t), strictly positive and
    strictly increasing in theta."""
    return j_theta_result(theta, t, tol).value


def j_convolution_power(theta: float, t: float, j: int, tol: float = 1e-10) -> float:
    """The j-fold simplex convolution of j^theta, via its closed-form v-integral

        int_0^oo  t^(v-1) exp(theta v) v^(j-1) / ((j-1)! Gamma(v)) dv .
    """
    if t <= 0:
        raise DomainError("j_convolution_power requires t > 0")
    if j < 1:
        raise DomainError("j must be >= 1")
    lfact = log_gamma(float(j))  # log (j-1)!

    def extra(v):
        return (j - 1) * math.log(v) - lfact

    f = _j_integrand(theta, t, extra if j > 1 else None)
    return integrate_semi_infinite(f, tol=tol).value


@dataclass(frozen=True)
class Resummation:
    """Result of the truncated strength-resummed series."""

    value: float
    terms_used: int
    stopped_by: str  # "term_size" or "truncation"
    overflowed: bool = False


def j_resummed(theta: float, a: float, t: float, truncation: int, tol: float = 1e-8) -> Resummation:
    """sum_{j=1}^J a^(j-1) * (j-fold simplex convolution of j^theta at t).

    Converges to j^(theta+a)(t) as J grows.  Stops early once the next term
    falls below tol/10; flags overflow instead of returning garbage.
    """
    if t <= 0:
        raise DomainError("j_resummed requires t > 0")
    if truncation < 1:
        raise DomainError("truncation must be >= 1")
    if a < 0:
        raise DomainError("strength a must be >= 0")
    if a == 0.0:
        return Resummation(j_convolution_power(theta, t, 1, tol=tol * 1e-2), 1, "term_size")
    total = 0.0
    stopped_by = "truncation"
    terms = 0
    for j in range(1, truncation + 1):
        term = a ** (j - 1) * j_convolution_power(theta, t, j, tol=tol * 1e-2)
        if not math.isfinite(term) or not math.isfinite(total + term):
            return Resummation(total, terms, "overflow", overflowed=True)
        total += term
        terms = j
        if j > 1 and abs(term) < 0.1 * tol:
            stopped_by = "term_size"
            break
    return Resummation(total, terms, stopped_by)


def j_time_integral(theta: float, r: float, tol: float = 1e-8) -> float:
    """int_0^r j^theta(t) dt, including the analytic log-tail mass near 0.

    For theta -> -oo, |theta| times this tends to 1 for any fixed r.
    """
    if r <= 0:
        raise DomainError("upper limit must be positive")
    from .quad import _integrate_left_singular

    jk = JKernel(theta, t_max=max(r, 1.0))
    cut = 1e-12 * r
    mass = j_mass_near_zero(theta, cut)
    val, _, _ = _integrate_left_singular(jk, r, 1.0, 2, tol, lo=cut)
    return mass + val


class JThetaInterpolant:
    """Fast evaluator for t -> j^theta(t) on (0, t_max].

    Cubic spline of log j against log t; relative accuracy ~1e-9 on the
    tabulated range, direct quadrature outside it.
    """

    def __init__(self, theta: float, t_max: float, n_nodes: int = 700, t_min: float = 1e-14):
        from scipy.interpolate import CubicSpline

        self.theta = theta
        self.t_min = t_min
        self.t_max = t_max
        ts = np.geomspace(t_min, t_max, n_nodes)
        vals = np.array([j_theta(theta, t, tol=1e-11) for t in ts])
        self._spline = CubicSpline(np.log(ts), np.log(vals))

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        scalar = t.ndim == 0
        t = np.atleast_1d(t)
        out = np.empty_like(t)
        inside = (t >= self.t_min) & (t <= self.t_max)
        out[inside] = np.exp(self._spline(np.log(t[inside])))
        for i in np.nonzero(~inside)[0]:
            out[i] = j_theta(self.theta, float(t[i]), tol=1e-10)
        return float(out[0]) if scalar else out


@lru_cache(maxsize=32)
def _cached_interpolant(theta: float, t_max: float) -> JThetaInterpolant:
    return JThetaInterpolant(theta, t_max)


def j_mass_near_zero(theta: float, eps: float, tol: float = 1e-11) -> float:
    """int_0^eps j^theta(u) du = int_0^oo eps^v e^(theta v) / (v Gamma(v)) dv.

    Decays only like 1 / (|log eps| + |theta|), so convolution routines add it
    analytically below their floating-point cut.
    """
    if eps <= 0:
        return 0.0
    z = theta + math.log(eps)

    def f(v):
        if v <= 0.0:
            return 0.0
        e = v * z - log_gamma(v + 1.0)
        return math.exp(e) if e > -745.0 else 0.0

    return integrate_semi_infinite(f, tol=tol).value


def j_group_mass_near_zero(theta: float, count: int, eps: float, tol: float = 1e-11) -> float:
    """int_0^eps (count-fold simplex convolution of j^theta)(u) du."""
    if eps <= 0:
        return 0.0
    if count == 1:
        return j_mass_near_zero(theta, eps, tol)
    z = theta + math.log(eps)
    lfact = log_gamma(float(count))

    def f(v):
        if v <= 0.0:
            return 0.0
        e = v * z + (count - 1) * math.log(v) - math.log(v) - log_gamma(v) - lfact
        return math.exp(e) if e > -745.0 else 0.0

    return integrate_semi_infinite(f, tol=tol).value


class JKernel:
    """t -> j^theta(t) as a convolution kernel.

    Advertises the analytic log-tail mass near 0 so simplex convolutions do
    not lose the part of the integral that sits below floating-point range.
    """

    def __init__(self, theta: float, t_max: float = 1.0, interpolate: bool = True):
        self.theta = theta
        self.group_key = ("j", theta)
        self._fn = _cached_interpolant(theta, max(t_max, 1.0)) if interpolate \
            else (lambda t: j_theta(theta, t))

    def __call__(self, t):
        return float(self._fn(t))

    def mass_near_zero(self, eps: float) -> float:
        return j_mass_near_zero(self.theta, eps)

    def group_mass_near_zero(self, count: int, eps: float) -> float:
        return j_group_mass_near_zero(self.theta, count, eps)

    @property
    def profile(self) -> SingularityProfile:
        return SingularityProfile(left_exponent=1.0, log_power=2)


# ---------------------------------------------------------------------------
# two-particle semigroup kernel
# ---------------------------------------------------------------------------

_J_PROFILE = SingularityProfile(left_exponent=1.0, log_power=2)


def _hk_scalar(t: float, dx: float, dy: float) -> float:
    if t <= 0:
        raise DomainError("heat kernel time must be positive")
    return math.exp(-(dx * dx + dy * dy) / (2.0 * t)) / (2.0 * math.pi * t)


def pair_correction_scalar(theta: float, t: float, d: float, d_prime: float,
                           tol: float = 1e-8, j_fn: Callable | None = None) -> QuadratureResult:
    """The relative-coordinate correction

        C(t, d, d') = int_{u+v+w=t} p(2u, d) 4 pi j^theta(v) p(2w, d') du dv dw

    with p the 2D heat kernel evaluated at radial separation.  Diverges
    (logarithmically) if d or d' is 0.
    """
    if t <= 0:
        raise DomainError("pair correction requires t > 0")
    if d <= 0 or d_prime <= 0:
        raise DomainError(
            "coincident incoming or outgoing points give a divergent kernel; "
            "separations must be positive"
        )
    jf = j_fn if j_fn is not None else JKernel(theta, t_max=max(t, 1.0))

    def fu(u):
        return _hk_scalar(2.0 * u, d, 0.0)

    def fw(w):
        return _hk_scalar(2.0 * w, d_prime, 0.0)

    class _ScaledJ:
        group_key = ("4pi-j", theta)

        def __call__(self, v):
            return 4.0 * math.pi * float(jf(v))

        def mass_near_zero(self, eps):
            return 4.0 * math.pi * j_mass_near_zero(theta, eps)

    fv = _ScaledJ()
    # heat factors vanish to all orders at 0 for d > 0; only j is singular
    profiles = [SingularityProfile(), _J_PROFILE, SingularityProfile()]
    return simplex_convolve([fu, fv, fw], t, tol, profiles=profiles)


def pair_correction_radial(theta: float, t: float, rs, rps,
                           n_v: int = 100, n_u: int = 48) -> np.ndarray:
    """Vectorized C(t, r, r') on a product grid of radial separations.

    Fixed tensor quadrature: log substitution in the middle (singular) time,
    symmetric log substitutions in the outer time, analytic mass below the
    cut.  Cross-validated against :func:`pair_correction_scalar`.
    """
    if t <= 0:
        raise DomainError("pair_correction_radial requires t > 0")
    rs = np.atleast_1d(np.asarray(rs, dtype=float))
    rps = np.atleast_1d(np.asarray(rps, dtype=float))
    if np.any(rs <= 0) or np.any(rps <= 0):
        raise DomainError("separations must be positive")
    jk = _cached_interpolant(theta, max(t, 1.0))

    def hk_radial(times, r):
        # p(2u, r) for array of times x array of radii
        times = times[:, None]
        return np.exp(-(r[None, :] ** 2) / (4.0 * times)) / (4.0 * math.pi * times)

    # middle-time nodes: v = t e^(1 - 1/s), Gauss-Legendre in s
    cut = 1e-12 * t
    s_lo = 1.0 / (1.0 - math.log(cut / t))
    xs, ws = np.polynomial.legendre.leggauss(n_v)
    s = 0.5 * (s_lo + 1.0) + 0.5 * (1.0 - s_lo) * xs
    wv = 0.5 * (1.0 - s_lo) * ws
    v = t * np.exp(1.0 - 1.0 / s)
    jac_v = v / (s * s)
    jv = 4.0 * math.pi * np.asarray(jk(v)) * jac_v * wv

    # outer-time nodes for u on (0, T): two log-substituted halves
    xu, wu = np.polynomial.legendre.leggauss(n_u)
    su = 0.5 * (xu + 1.0)
    m = su > 1e-6
    su, wuu = su[m], (0.5 * wu)[m]

    total = np.zeros((len(rs), len(rps)))
    mass = 4.0 * math.pi * j_mass_near_zero(theta, cut)
    for v_k, jw_k, is_mass in [(float(vk), float(jk_w), False) for vk, jk_w in zip(v, jv)] + [(cut, mass, True)]:
        T = t - v_k
        if T <= 0:
            continue
        half = 0.5 * T
        u_left = half * np.exp(1.0 - 1.0 / su)
        keep = u_left > 1e-14 * T
        u_left = u_left[keep]
        jac_left = u_left / (su[keep] * su[keep]) * wuu[keep]
        u_nodes = np.concatenate([u_left, T - u_left])
        u_w = np.concatenate([jac_left, jac_left])
        A = hk_radial(u_nodes, rs)           # (nu, nr)
        B = hk_radial(T - u_nodes, rps)      # (nu, nr')
        total += jw_k * (A * u_w[:, None]).T @ B
    return total


def _as_pairpoint(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (2, 2):
        raise ValueError("expected a pair of points in R^2")
    return x


def semigroup2(theta: float, t: float, x, x_prime, tol: float = 1e-8,
               parts: bool = False):
    """Two-particle interacting semigroup kernel at time t.

    Equals the pure heat product plus the single-sequence correction, which is
    collapsed to center-of-mass form: p(t/2, xbar - xbar') * C(t, |x1-x2|, |x1'-x2'|).
    Strictly greater than the heat product.
    """
    if t <= 0:
        raise DomainError("semigroup2 requires t > 0")
    x = _as_pairpoint(x)
    xp = _as_pairpoint(x_prime)
    heat = float(heat_kernel(t, x[0] - xp[0]) * heat_kernel(t, x[1] - xp[1]))
    d = float(np.linalg.norm(x[0] - x[1]))
    dp = float(np.linalg.norm(xp[0] - xp[1]))
    com = 0.5 * (x[0] + x[1])
    com_p = 0.5 * (xp[0] + xp[1])
    corr_rel = pair_correction_scalar(theta, t, d, dp, tol=tol)
    corr = float(heat_kernel(0.5 * t, com - com_p)) * corr_rel.value
    if parts:
        return heat, corr, corr_rel
    return heat + corr


def centered_moment2(theta: float, t: float, x, x_prime, tol: float = 1e-8) -> float:
    """semigroup2 minus the heat product; nonnegative (for n=2 the covering
    diagram set is the full set, so this is exactly the correction term)."""
    _, corr, _ = semigroup2(theta, t, x, x_prime, tol=tol, parts=True)
    return corr


# ---------------------------------------------------------------------------
# variance functionals
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianProfile:
    """Radial Gaussian test profile amplitude * exp(-|x|^2 / (2 width^2))."""

    amplitude: float = 1.0
    width: float = 1.0

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        r2 = np.sum(x * x, axis=-1)
        return self.amplitude * np.exp(-r2 / (2.0 * self.width**2))


def _pair_overlap(g: GaussianProfile, gp: GaussianProfile, u: float, u_prime: float) -> float:
    """int dy (heat_u * g)^2(y) (heat_u' * g')^2(y) for radial Gaussians, closed form."""
    s2 = g.width**2
    sp2 = gp.width**2
    v1 = s2 + u
    v2 = sp2 + u_prime
    amp = (g.amplitude * s2 / v1) ** 2 * (gp.amplitude * sp2 / v2) ** 2
    return amp * math.pi * v1 * v2 / (v1 + v2)


def variance_functionals(t: float, g: GaussianProfile, gp: GaussianProfile,
                         tol: float = 1e-7) -> tuple[float, float]:
    """Limiting pair and quadruple variance functionals.

    U_pair pairs g^(x)2 against the one-collision limit operator (prefactor
    1/4pi, one time integral); V_pair pairs g^(x)4 against the two-collision
    limit operator (prefactor 2/(4pi)^2, a 2D simplex integral).  By symmetry
    of the integrand V_pair = U_pair^2.
    """
    if t <= 0:
        raise DomainError("variance_functionals requires t > 0")
    if g.amplitude == 0.0 or gp.amplitude == 0.0:
        return 0.0, 0.0

    def a_fn(u, u_prime):
        return _pair_overlap(g, gp, u, u_prime)

    u_res = integrate_interval(lambda u: a_fn(u, t - u), t, tol)
    u_pair = u_res.value / (4.0 * math.pi)

    # independent 2D route over the simplex {u + u' + u'' = t}
    from scipy.integrate import dblquad

    def integrand(up, u):
        return a_fn(u, t - u) * a_fn(u + up, t - u - up)

    v_val, _ = dblquad(integrand, 0.0, t, 0.0, lambda u: t - u,
                       epsabs=tol, epsrel=1e-9)
    v_pair = 2.0 * v_val / (4.0 * math.pi) ** 2
    return u_pair, v_pair


def pair_gaussian_pairing(theta: float, t: float, g: GaussianProfile,
                          gp: GaussianProfile, tol: float = 1e-7) -> float:
    """<g x g, semigroup2(t) g' x g'> for radial Gaussian test profiles.

    The 8D pairing collapses: the heat part is a closed-form Gaussian pairing
    squared, and the correction splits into a center-of-mass pairing times a
    2D time integral of closed-form radial overlaps against 4 pi j^theta.
    """
    if t <= 0:
        raise DomainError("pairing requires t > 0")
    s2 = g.width**2
    sp2 = gp.width**2
    amp = g.amplitude
    amp_p = gp.amplitude

    # int int g(x) p(t, x - x') g'(x') dx dx' = amp amp' 2 pi s^2 s'^2 / (s^2 + s'^2 + t)
    single = amp * amp_p * 2.0 * math.pi * s2 * sp2 / (s2 + sp2 + t)
    heat_part = single * single

    jf = _cached_interpolant(theta, max(t, 1.0))

    # Correction pairing in center-of-mass coordinates x1 = xbar + d/2,
    # x2 = xbar - d/2 (unit Jacobian):
    #   g(x1) g(x2) = amp^2 exp(-|xbar|^2 / s^2) exp(-|d|^2 / (4 s^2)) ,
    # so the pairing splits into a center-of-mass Gaussian pairing against
    # p(t/2, .) times a time integral of the closed-form d-side overlaps
    #   int dd exp(-|d|^2 / (4 s^2)) p(2u, d) = 2 s^2 / (2 s^2 + 2 u) .
    com_pairing = (amp * amp) * (amp_p * amp_p) * 2.0 * math.pi * \
        (0.5 * s2) * (0.5 * sp2) / (0.5 * s2 + 0.5 * sp2 + 0.5 * t)

    def v_integrand(v):
        jval = 4.0 * math.pi * float(jf(v))
        T = t - v
        if T <= 0:
            return 0.0

        def inner(u):
            a_side = 2.0 * s2 / (2.0 * s2 + 2.0 * u)
            b_side = 2.0 * sp2 / (2.0 * sp2 + 2.0 * (T - u))
            return a_side * b_side

        r = integrate_interval(inner, T, tol * 0.1)
        return jval * r.value

    # analytic j mass below the quadrature reach, paired at v ~ 0
    cut = 1e-12 * t
    mass = 4.0 * math.pi * j_mass_near_zero(theta, cut)
    inner0 = integrate_interval(
        lambda u: (2.0 * s2 / (2.0 * s2 + 2.0 * u))
        * (2.0 * sp2 / (2.0 * sp2 + 2.0 * (t - u))), t, tol * 0.1)

    def v_main(v):
        return v_integrand(v) if v > cut else 0.0

    vres = integrate_interval(v_main, t, tol, left=_J_PROFILE)
    corr_part = com_pairing * (vres.value + mass * inner0.value)
    return heat_part + corr_part
