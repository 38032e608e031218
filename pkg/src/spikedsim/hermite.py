"""Hermite-basis analysis of link functions and activations.

Everything here works in the *normalized* (probabilists') Hermite basis
``h_j = He_j / sqrt(j!)``, which is orthonormal in L^2 of the standard
Gaussian measure.  Link functions are expanded by Gaussian quadrature and the
resulting coefficient vectors drive the alignment ODEs in :mod:`spikedsim.flows`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.polynomial import hermite_e, legendre

HERMITE_DEGREE_CAP = 60
DEFAULT_NODES = 40
DEFAULT_ORDER = 20
DEFAULT_TOL = 1e-8

# Composite rule used for functions with kinks: Gauss-Legendre panels on
# [-_KINK_RADIUS, _KINK_RADIUS], split at every kink.
_KINK_RADIUS = 14.0
_KINK_PANEL_NODES = 120


class NoInformationExponent(ValueError):
    """Raised when every coefficient with j >= 1 vanishes within tolerance."""


# ---------------------------------------------------------------- polynomials


def hermite_eval(j: int, z, allow_high: bool = False):
    """Evaluate the normalized Hermite polynomial ``h_j`` at ``z``.

    Uses the three-term recurrence
    ``h_{k+1}(z) = (z h_k(z) - sqrt(k) h_{k-1}(z)) / sqrt(k+1)``, which is
    stable for moderate |z|.  Degrees above 60 need ``allow_high=True``.
    """
    if j < 0:
        raise ValueError(f"Hermite degree must be >= 0, got {j}")
    if j > HERMITE_DEGREE_CAP and not allow_high:
        raise ValueError(
            f"degree {j} exceeds cap {HERMITE_DEGREE_CAP}; pass allow_high=True"
        )
    table = hermite_table(j, z, allow_high=True)
    out = table[j]
    return float(out) if np.ndim(z) == 0 else out


def hermite_table(J: int, z, allow_high: bool = False) -> np.ndarray:
    """Return the array ``[h_0(z), ..., h_J(z)]`` with shape ``(J+1,) + shape(z)``."""
    if J > HERMITE_DEGREE_CAP and not allow_high:
        raise ValueError(
            f"degree {J} exceeds cap {HERMITE_DEGREE_CAP}; pass allow_high=True"
        )
    z = np.asarray(z, dtype=float)
    table = np.empty((J + 1,) + z.shape)
    table[0] = 1.0
    if J >= 1:
        table[1] = z
    for k in range(1, J):
        table[k + 1] = (z * table[k] - math.sqrt(k) * table[k - 1]) / math.sqrt(k + 1)
    return table


# ----------------------------------------------------------------- quadrature


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes and weights integrating against N(0, 1); weights sum to one."""

    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        if np.any(self.weights <= 0):
            raise ValueError("quadrature weights must be positive")

    def expect(self, values) -> float:
        return float(np.dot(self.weights, values))

    def __len__(self):
        return len(self.nodes)


@lru_cache(maxsize=64)
def gauss_hermite_rule(K: int) -> QuadratureRule:
    """K-node Gauss-Hermite rule for the standard Gaussian.

    Exact for polynomials of degree <= 2K - 1.
    """
    if K < 1:
        raise ValueError(f"need at least one node, got K={K}")
    nodes, weights = hermite_e.hermegauss(K)
    weights = weights / math.sqrt(2.0 * math.pi)
    # renormalize away the last ulp or so of drift
    weights = weights / weights.sum()
    return QuadratureRule(nodes, weights)


def _composite_rule(kinks: Sequence[float]) -> QuadratureRule:
    breaks = sorted({-_KINK_RADIUS, _KINK_RADIUS, *[k for k in kinks if abs(k) < _KINK_RADIUS]})
    x, w = legendre.leggauss(_KINK_PANEL_NODES)
    nodes, weights = [], []
    for lo, hi in zip(breaks[:-1], breaks[1:]):
        half = 0.5 * (hi - lo)
        pts = lo + half * (x + 1.0)
        nodes.append(pts)
        weights.append(half * w * np.exp(-0.5 * pts**2) / math.sqrt(2.0 * math.pi))
    nodes = np.concatenate(nodes)
    weights = np.concatenate(weights)
    return QuadratureRule(nodes, weights / weights.sum())


# ------------------------------------------------------------ link functions


@dataclass(frozen=True)
class LinkFunction:
    """A scalar link or activation with its weak derivative.

    ``kinks`` lists points where ``eval`` is not smooth; quadrature splits
    there.  ``homogeneous`` marks positively 1-homogeneous maps (ReLU and
    its negation), for which ``phi'(z) z = phi(z)``.
    """

    name: str
    eval: Callable[[np.ndarray], np.ndarray]
    deriv: Callable[[np.ndarray], np.ndarray]
    growth_exponent: float = 1.0
    kinks: tuple = ()
    homogeneous: bool = False

    def __call__(self, z):
        return self.eval(np.asarray(z, dtype=float))

    def negated(self) -> "LinkFunction":
        f, df = self.eval, self.deriv
        return LinkFunction(
            name=f"neg:{self.name}",
            eval=lambda z: -f(z),
            deriv=lambda z: -df(z),
            growth_exponent=self.growth_exponent,
            kinks=self.kinks,
            homogeneous=self.homogeneous,
        )


def _hermite_link(s: int) -> LinkFunction:
    s = int(s)
    if s < 0:
        raise ValueError(f"hermite degree must be >= 0, got {s}")

    def f(z):
        return hermite_table(s, z)[s]

    def df(z):
        if s == 0:
            return np.zeros_like(np.asarray(z, dtype=float))
        return math.sqrt(s) * hermite_table(s - 1, z)[s - 1]

    return LinkFunction(f"hermite:{s}", f, df, growth_exponent=float(s))


def _relu(z):
    return np.maximum(z, 0.0)


def _relu_deriv(z):
    # weak derivative; value 0 at the kink
    return (np.asarray(z) > 0).astype(float)


RELU = LinkFunction("relu", _relu, _relu_deriv, 1.0, kinks=(0.0,), homogeneous=True)
IDENTITY = LinkFunction("identity", lambda z: np.asarray(z, dtype=float) * 1.0,
                        lambda z: np.ones_like(np.asarray(z, dtype=float)), 1.0)
CUBE = LinkFunction("cube", lambda z: z**3, lambda z: 3.0 * z**2, 3.0)
SQUARE = LinkFunction("square", lambda z: z**2, lambda z: 2.0 * z, 2.0)
TANH = LinkFunction("tanh", np.tanh, lambda z: 1.0 / np.cosh(z) ** 2, 0.0)

_FIXED_LINKS = {
    "relu": RELU,
    "identity": IDENTITY,
    "cube": CUBE,
    "square": SQUARE,
    "tanh": TANH,
    # y = <u, x>^2, i.e. sqrt(2) h_2 + 1
    "phase_retrieval": LinkFunction("phase_retrieval", lambda z: z**2, lambda z: 2.0 * z, 2.0),
}


def get_link(name: str) -> LinkFunction:
    """Look up a link/activation by registry name.

    Accepted names: ``hermite:<s>``, ``relu``, ``cube``, ``identity``,
    ``square``, ``tanh``, ``phase_retrieval``; any of them prefixed with
    ``neg:`` gives the negated function.
    """
    name = name.strip()
    if name.startswith("neg:"):
        return get_link(name[4:]).negated()
    if name.startswith("hermite:"):
        try:
            s = int(name.split(":", 1)[1])
        except ValueError:
            raise ValueError(f"bad hermite link name {name!r}") from None
        return _hermite_link(s)
    try:
        return _FIXED_LINKS[name]
    except KeyError:
        known = ", ".join(sorted(_FIXED_LINKS)) + ", hermite:<s>"
        raise ValueError(f"unknown link {name!r}; known: {known}") from None


def link_names() -> list:
    return sorted(_FIXED_LINKS) + ["hermite:<s>", "neg:<name>"]


def quadrature_for(f: LinkFunction, K: int = DEFAULT_NODES) -> QuadratureRule:
    """Gauss-Hermite for smooth ``f``; a kink-aware composite rule otherwise."""
    if f.kinks:
        return _composite_rule(f.kinks)
    return gauss_hermite_rule(K)


def gaussian_expect(f: Callable, rule: Optional[QuadratureRule] = None) -> float:
    rule = rule or gauss_hermite_rule(DEFAULT_NODES)
    return rule.expect(f(rule.nodes))


# -------------------------------------------------------------------- series


@dataclass(frozen=True)
class HermiteSeries:
    """Coefficients of a function in the normalized Hermite basis, j = 0..J."""

    coeffs: np.ndarray
    name: str = ""
    sq_norm: Optional[float] = field(default=None, compare=False)

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        if c.ndim != 1 or c.size == 0:
            raise ValueError("coeffs must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(c)):
            raise ValueError("non-finite Hermite coefficient")
        object.__setattr__(self, "coeffs", c)

    @property
    def truncation_order(self) -> int:
        return self.coeffs.size - 1

    def __getitem__(self, j):
        return self.coeffs[j] if j <= self.truncation_order else 0.0

    def padded(self, J: int) -> np.ndarray:
        out = np.zeros(J + 1)
        k = min(J, self.truncation_order) + 1
        out[:k] = self.coeffs[:k]
        return out

    def derivative(self) -> "HermiteSeries":
        """Series of the weak derivative: ``f' = sum_j sqrt(j) c_j h_{j-1}``."""
        c = self.coeffs
        if c.size == 1:
            return HermiteSeries(np.zeros(1), f"d/dz {self.name}")
        j = np.arange(1, c.size)
        return HermiteSeries(np.sqrt(j) * c[1:], f"d/dz {self.name}")

    def __call__(self, z):
        table = hermite_table(self.truncation_order, z, allow_high=True)
        return np.tensordot(self.coeffs, table, axes=1)

    def l2_sq(self) -> float:
        return float(np.dot(self.coeffs, self.coeffs))


def hermite_coeffs(f: LinkFunction, J: int = DEFAULT_ORDER, K: int = DEFAULT_NODES) -> HermiteSeries:
    """Expand ``f`` in the first ``J + 1`` normalized Hermite polynomials.

    ``coeffs[j] = sum_i w_i f(n_i) h_j(n_i)`` over a quadrature rule.  Smooth
    functions use the K-node Gauss-Hermite rule, which must resolve
    ``f * h_J``: ``K >= J + ceil(p / 2) + 2`` with p the growth exponent.
    Functions declaring kinks are integrated panel-wise instead.
    """
    need = J + math.ceil(f.growth_exponent / 2) + 2
    if K < need:
        raise ValueError(f"K={K} too small for J={J} with growth {f.growth_exponent}: need K >= {need}")
    rule = quadrature_for(f, K)
    fv = f(rule.nodes)
    table = hermite_table(J, rule.nodes)
    coeffs = table @ (rule.weights * fv)
    return HermiteSeries(coeffs, f.name, sq_norm=rule.expect(fv**2))


@lru_cache(maxsize=128)
def series_for(name: str, J: int = DEFAULT_ORDER, K: int = DEFAULT_NODES) -> HermiteSeries:
    """Cached ``hermite_coeffs(get_link(name), J, K)``."""
    return hermite_coeffs(get_link(name), J, max(K, J + 6))


def information_exponent(series: HermiteSeries, tol: float = DEFAULT_TOL) -> Optional[int]:
    """Smallest j >= 1 with a non-negligible coefficient, or ``None``.

    ``tol`` is relative to the l2 norm of the series.
    """
    c = series.coeffs
    scale = np.linalg.norm(c)
    if scale == 0.0:
        return None
    idx = np.nonzero(np.abs(c[1:]) > tol * scale)[0]
    return int(idx[0]) + 1 if idx.size else None


def _common(g: HermiteSeries, phi: HermiteSeries):
    J = max(g.truncation_order, phi.truncation_order)
    return g.padded(J), phi.padded(J), J


def zeta(g_series: HermiteSeries, phi_series: HermiteSeries, omega) -> np.ndarray:
    """Drift coefficient ``-E[phi'(a) g'(b)]`` for standard Gaussians with correlation omega.

    Series form: ``-sum_{j>=1} j alpha_j beta_j omega^(j-1)``.
    """
    alpha, beta, J = _common(g_series, phi_series)
    j = np.arange(1, J + 1)
    poly = j * alpha[1:] * beta[1:]  # coefficient of omega^(j-1)
    return -np.polynomial.polynomial.polyval(omega, poly)


def psi(g_series: HermiteSeries, phi_series: HermiteSeries, omega) -> np.ndarray:
    """``-E[phi'(a) g(b) a - phi'(a) g'(b) omega]`` with corr(a, b) = omega.

    Expanding ``a * phi'(a)`` in the Hermite basis collapses this to
    ``-sum_{k>=0} sqrt((k+1)(k+2)) alpha_k beta_{k+2} omega^k``.  Terms need
    ``beta`` two orders past ``alpha``; the tail is dropped at truncation.
    """
    alpha, beta, J = _common(g_series, phi_series)
    k = np.arange(0, J - 1)
    poly = np.sqrt((k + 1.0) * (k + 2.0)) * alpha[: J - 1] * beta[2:]
    return -np.polynomial.polynomial.polyval(omega, poly)


def correlation(g_series: HermiteSeries, phi_series: HermiteSeries, omega) -> np.ndarray:
    """``E[phi(a) g(b)] = sum_j alpha_j beta_j omega^j``."""
    alpha, beta, _ = _common(g_series, phi_series)
    return np.polynomial.polynomial.polyval(omega, alpha * beta)


def certified_constant(g: LinkFunction, phi: LinkFunction, grid, J: int = DEFAULT_ORDER) -> float:
    """Largest c with ``zeta(omega) <= -c omega^(s-1)`` on every grid point.

    Negative when the sign condition is violated somewhere on the grid.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ValueError("grid must be nonempty")
    gs = hermite_coeffs(g, J, max(DEFAULT_NODES, J + 6))
    ps = hermite_coeffs(phi, J, max(DEFAULT_NODES, J + 6))
    s = information_exponent(gs)
    if s is None:
        raise NoInformationExponent(f"{g.name} has no information exponent within J={J}")
    return float(np.min(-zeta(gs, ps, grid) / grid ** (s - 1)))


def check_assumption2(g: LinkFunction, phi: LinkFunction, c: float, grid, J: int = DEFAULT_ORDER) -> bool:
    """True iff ``zeta(omega) <= -c omega^(s-1)`` on every point of ``grid``."""
    if c <= 0:
        raise ValueError("c must be positive")
    # relative slack absorbs quadrature rounding in exact cases like phi = g = h_s
    return certified_constant(g, phi, grid, J) >= c * (1.0 - 1e-9)
