"""Closed-form 1D reference pipeline.

In one dimension the higher-order flux is divergence-free and zero-mean,
hence identically zero, so the whole corrector recursion collapses to
successive antiderivatives of 1/a.  This module carries that out in exact
piecewise-polynomial arithmetic (per-segment Legendre bases), giving a
quadrature oracle that is several orders more accurate than the spectral
pipeline it is used to test.

It also provides exact periodic elliptic solves on a 1D box for
piecewise-represented coefficients, used by the convergence-rate studies
where spectral accuracy would be Gibbs-limited.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from numpy.polynomial import legendre as leg

from .torus import ConfigurationError


def _union_breaks(b1: np.ndarray, b2: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    merged = np.sort(np.concatenate([b1, b2]))
    keep = [merged[0]]
    for x in merged[1:]:
        if x - keep[-1] > tol:
            keep.append(x)
    keep[-1] = max(b1[-1], b2[-1])
    return np.asarray(keep)


class PiecewisePoly:
    """Piecewise polynomial on [breaks[0], breaks[-1]) in Legendre bases.

    Each segment [breaks[i], breaks[i+1]) stores Legendre coefficients in the
    affine coordinate t in [-1, 1].  All arithmetic (sums, products,
    antiderivatives, means) is exact for polynomial operands.
    """

    def __init__(self, breaks, coeffs):
        self.breaks = np.asarray(breaks, dtype=float)
        self.coeffs = [np.atleast_1d(np.asarray(c, dtype=float)) for c in coeffs]
        if len(self.coeffs) != len(self.breaks) - 1:
            raise ConfigurationError("need one coefficient array per segment")

    # -- constructors ------------------------------------------------------

    @classmethod
    def constant(cls, value: float, breaks=(0.0, 1.0)) -> "PiecewisePoly":
        breaks = np.asarray(breaks, dtype=float)
        return cls(breaks, [np.array([float(value)])] * (len(breaks) - 1))

    @classmethod
    def from_callable(cls, func, breaks, degree: int = 12) -> "PiecewisePoly":
        """Per-segment Legendre interpolation of ``func`` at Gauss nodes."""
        breaks = np.asarray(breaks, dtype=float)
        nodes, _ = leg.leggauss(degree + 1)
        coeffs = []
        for a, b in zip(breaks[:-1], breaks[1:]):
            x = 0.5 * (a + b) + 0.5 * (b - a) * nodes
            coeffs.append(leg.legfit(nodes, func(x), degree))
        return cls(breaks, coeffs)

    # -- helpers -----------------------------------------------------------

    @property
    def domain_length(self) -> float:
        return float(self.breaks[-1] - self.breaks[0])

    def _aligned(self, other: "PiecewisePoly"):
        breaks = _union_breaks(self.breaks, other.breaks)
        return self._on_breaks(breaks), other._on_breaks(breaks), breaks

    def _on_breaks(self, breaks: np.ndarray) -> "PiecewisePoly":
        if len(breaks) == len(self.breaks) and np.allclose(breaks, self.breaks):
            return self
        coeffs = []
        for a, b in zip(breaks[:-1], breaks[1:]):
            i = min(np.searchsorted(self.breaks, 0.5 * (a + b), side="right") - 1,
                    len(self.coeffs) - 1)
            c = self.coeffs[i]
            sa, sb = self.breaks[i], self.breaks[i + 1]
            # re-expand on the sub-segment: t_new -> t_old is affine
            deg = len(c) - 1
            nodes, _ = leg.leggauss(deg + 1)
            x = 0.5 * (a + b) + 0.5 * (b - a) * nodes
            t_old = (2.0 * x - sa - sb) / (sb - sa)
            coeffs.append(leg.legfit(nodes, leg.legval(t_old, c), deg))
        return PiecewisePoly(breaks, coeffs)

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other):
        if np.isscalar(other):
            coeffs = [c.copy() for c in self.coeffs]
            for c in coeffs:
                c[0] += other
            return PiecewisePoly(self.breaks, coeffs)
        p, q, breaks = self._aligned(other)
        coeffs = []
        for cp, cq in zip(p.coeffs, q.coeffs):
            n = max(len(cp), len(cq))
            c = np.zeros(n)
            c[: len(cp)] += cp
            c[: len(cq)] += cq
            coeffs.append(c)
        return PiecewisePoly(breaks, coeffs)

    __radd__ = __add__

    def __neg__(self):
        return PiecewisePoly(self.breaks, [-c for c in self.coeffs])

    def __sub__(self, other):
        if np.isscalar(other):
            return self + (-other)
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if np.isscalar(other):
            return PiecewisePoly(self.breaks, [c * other for c in self.coeffs])
        p, q, breaks = self._aligned(other)
        coeffs = []
        for cp, cq in zip(p.coeffs, q.coeffs):
            deg = len(cp) + len(cq) - 2
            nodes, _ = leg.leggauss(deg + 1)
            vals = leg.legval(nodes, cp) * leg.legval(nodes, cq)
            coeffs.append(leg.legfit(nodes, vals, deg))
        return PiecewisePoly(breaks, coeffs)

    __rmul__ = __mul__

    # -- calculus ----------------------------------------------------------

    def derivative(self) -> "PiecewisePoly":
        coeffs = []
        for c, a, b in zip(self.coeffs, self.breaks[:-1], self.breaks[1:]):
            if len(c) == 1:
                coeffs.append(np.array([0.0]))
            else:
                coeffs.append(leg.legder(c) * (2.0 / (b - a)))
        return PiecewisePoly(self.breaks, coeffs)

    def antiderivative(self) -> "PiecewisePoly":
        """Continuous antiderivative vanishing at the left endpoint."""
        coeffs = []
        offset = 0.0
        for c, a, b in zip(self.coeffs, self.breaks[:-1], self.breaks[1:]):
            ci = leg.legint(c) * (0.5 * (b - a))
            left = leg.legval(-1.0, ci)
            ci = ci.copy()
            ci[0] += offset - left
            coeffs.append(ci)
            offset = leg.legval(1.0, ci)
        return PiecewisePoly(self.breaks, coeffs)

    def integral(self) -> float:
        total = 0.0
        for c, a, b in zip(self.coeffs, self.breaks[:-1], self.breaks[1:]):
            total += c[0] * (b - a)
        return float(total)

    def mean(self) -> float:
        return self.integral() / self.domain_length

    def zero_mean(self) -> "PiecewisePoly":
        return self - self.mean()

    # -- evaluation --------------------------------------------------------

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        scalar = x.ndim == 0
        x = np.atleast_1d(x)
        idx = np.clip(np.searchsorted(self.breaks, x, side="right") - 1,
                      0, len(self.coeffs) - 1)
        out = np.empty_like(x)
        for i in range(len(self.coeffs)):
            sel = idx == i
            if not np.any(sel):
                continue
            a, b = self.breaks[i], self.breaks[i + 1]
            t = (2.0 * x[sel] - a - b) / (b - a)
            out[sel] = leg.legval(t, self.coeffs[i])
        return out[0] if scalar else out

    def eval_periodic(self, x):
        """Evaluate with the argument wrapped into the domain."""
        x0 = self.breaks[0]
        return self(np.mod(np.asarray(x, dtype=float) - x0, self.domain_length) + x0)

    def linf(self, samples_per_segment: int = 16) -> float:
        nodes, _ = leg.leggauss(samples_per_segment)
        worst = 0.0
        for c in self.coeffs:
            worst = max(worst, float(np.max(np.abs(leg.legval(nodes, c)))))
        return worst

    def l2_mean(self) -> float:
        """sqrt of the mean of the square over the domain."""
        return float(np.sqrt(max((self * self).mean(), 0.0)))


def tile_to_box(pp: PiecewisePoly, eps: float, length: float) -> PiecewisePoly:
    """Periodic rescaling x -> pp(x / eps) as a piecewise polynomial on [0, length).

    Requires length / (eps * cell period) to be an integer, so the rescaled
    cell tiles the box exactly.  Legendre coefficients are reused verbatim:
    the affine segment coordinate is invariant under the rescaling.
    """
    cell = pp.domain_length
    m = length / (eps * cell)
    m_int = int(round(m))
    if abs(m - m_int) > 1e-9 or m_int < 1:
        raise ConfigurationError(
            f"box of length {length} does not hold an integer number of "
            f"rescaled cells (eps={eps})")
    breaks = [0.0]
    coeffs = []
    for j in range(m_int):
        for i in range(len(pp.coeffs)):
            breaks.append((j * cell + (pp.breaks[i + 1] - pp.breaks[0])) * eps)
            coeffs.append(pp.coeffs[i].copy())
    breaks[-1] = length
    return PiecewisePoly(np.asarray(breaks), coeffs)


# ---------------------------------------------------------------------------
# coefficient profiles
# ---------------------------------------------------------------------------

@dataclass
class Profile1D:
    """Scalar coefficient a(x) on the unit cell [0, 1).

    Either piecewise-constant (breakpoints + per-segment values, handled
    exactly) or smooth (callable, represented by composite Gauss-Legendre
    interpolation on ``n_segments`` segments of degree ``degree``).
    """

    breakpoints: np.ndarray | None = None
    values: np.ndarray | None = None
    func: object = None
    n_segments: int = 64
    degree: int = 12

    def __post_init__(self):
        if (self.func is None) == (self.values is None):
            raise ConfigurationError(
                "provide either piecewise (breakpoints, values) or a callable")
        if self.values is not None:
            self.values = np.asarray(self.values, dtype=float)
            if self.breakpoints is None:
                raise ConfigurationError("piecewise profile needs breakpoints")
            self.breakpoints = np.asarray(self.breakpoints, dtype=float)
            if len(self.breakpoints) != len(self.values) + 1:
                raise ConfigurationError("need len(breakpoints) == len(values)+1")
            if np.any(self.values < 1.0 - 1e-12):
                raise ConfigurationError("profile must satisfy a(x) >= 1")
        self._a_pp = None
        self._ainv_pp = None

    def a_pp(self) -> PiecewisePoly:
        if self._a_pp is None:
            if self.values is not None:
                self._a_pp = PiecewisePoly(
                    self.breakpoints, [np.array([v]) for v in self.values])
            else:
                breaks = np.linspace(0.0, 1.0, self.n_segments + 1)
                self._a_pp = PiecewisePoly.from_callable(
                    self.func, breaks, self.degree)
        return self._a_pp

    def ainv_pp(self) -> PiecewisePoly:
        if self._ainv_pp is None:
            if self.values is not None:
                self._ainv_pp = PiecewisePoly(
                    self.breakpoints, [np.array([1.0 / v]) for v in self.values])
            else:
                breaks = np.linspace(0.0, 1.0, self.n_segments + 1)
                self._ainv_pp = PiecewisePoly.from_callable(
                    lambda x: 1.0 / self.func(x), breaks, self.degree)
        return self._ainv_pp


def profile_from_spec(spec: dict) -> Profile1D:
    """1D profile for an analytic coefficient catalog entry."""
    kind = spec.get("kind")
    if kind == "constant":
        value = float(np.asarray(spec.get("value", 1.0)).reshape(-1)[0])
        return Profile1D(breakpoints=[0.0, 1.0], values=[value])
    if kind == "diagonal":
        return Profile1D(breakpoints=[0.0, 1.0], values=[float(spec["entries"][0])])
    if kind == "laminate":
        vf = float(spec.get("volume_fraction", 0.5))
        v0, v1 = (float(v) for v in spec["values"])
        return Profile1D(breakpoints=[0.0, vf, 1.0], values=[v0, v1])
    if kind == "trig_checkerboard":
        base = float(spec.get("base", 2.0))
        amp = float(spec.get("amplitude", 1.0))
        return Profile1D(func=lambda x: base + amp * np.sin(2.0 * np.pi * x))
    raise ConfigurationError(f"no 1D profile for coefficient kind {kind!r}")


def harmonic_mean(profile: Profile1D) -> float:
    """(integral of 1/a)^-1 over the unit cell."""
    return 1.0 / profile.ainv_pp().mean()


# ---------------------------------------------------------------------------
# corrector recursion by successive integration
# ---------------------------------------------------------------------------

@dataclass
class Hierarchy1D:
    """1D corrector hierarchy: phi_0..phi_ell, chi_0..chi_ell, lambda_0..lambda_{ell-1}.

    The flux corrector vanishes identically in 1D (1x1 skew-symmetry), and
    the flux itself is zero pointwise; ``flux_residuals`` records how well
    the construction achieves that.
    """

    profile: Profile1D
    order: int
    phi: list = dc_field(default_factory=list)
    chi: list = dc_field(default_factory=list)
    lambdas: np.ndarray = None
    flux_residuals: np.ndarray = None


def correctors_1d(profile: Profile1D, ell: int) -> Hierarchy1D:
    """Build the corrector hierarchy on [0, 1) in direction e = +1.

    With the flux corrector absent, the flux equation integrates pointwise:
    a (phi_j' + phi_{j-1}) = atilde_{j-1} - chi_{j-1}', and atilde_{j-1} is
    fixed by periodicity of phi_j.  chi_j then follows by double integration.
    """
    if ell < 1:
        raise ConfigurationError("order must be >= 1")
    if ell > 6:
        raise ConfigurationError("1D oracle supports orders up to 6")
    ainv = profile.ainv_pp()
    a_pp = profile.a_pp()
    inv_mean = ainv.mean()
    one = PiecewisePoly.constant(1.0, ainv.breaks)
    zero = PiecewisePoly.constant(0.0, ainv.breaks)

    phi = [one]
    chi = [zero, zero]
    lambdas = np.zeros(ell)
    flux_res = np.zeros(ell)

    for j in range(1, ell + 1):
        chi_prev_prime = chi[j - 1].derivative()
        atilde = ((chi_prev_prime * ainv).mean() + phi[j - 1].mean()) / inv_mean
        phi_prime = (ainv * (atilde - chi_prev_prime)) - phi[j - 1]
        phi_j = phi_prime.antiderivative().zero_mean()
        phi.append(phi_j)
        lambdas[j - 1] = atilde

        flux = a_pp * (phi_prime + phi[j - 1]) - atilde + chi_prev_prime
        flux_res[j - 1] = flux.l2_mean()

        if j >= 2:
            source = chi[j - 1].derivative()
            for p in range(1, j):
                source = source + lambdas[j - 1 - p] * phi[p]
            neg_chi_prime = source.antiderivative()
            chi_j_prime = neg_chi_prime.mean() - neg_chi_prime
            chi.append(chi_j_prime.antiderivative().zero_mean())

    return Hierarchy1D(profile=profile, order=ell, phi=phi, chi=chi[: ell + 1],
                       lambdas=lambdas, flux_residuals=flux_res)


def compare_with_spectral(profile: Profile1D, hierarchy) -> dict:
    """Per-level gaps between the oracle and a spectral hierarchy.

    The oracle fields are sampled at the spectral grid nodes; gaps are
    discrete L2 norms.  ``hierarchy`` is a spectral CorrectorHierarchy built
    on the same profile with direction e = +1.
    """
    grid = hierarchy.grid
    if grid.dim != 1:
        raise ConfigurationError("oracle comparison is 1D only")
    x = np.arange(grid.n) * grid.h
    oracle = correctors_1d(profile, hierarchy.order)
    report = {"lambda_gap": {}, "phi_gap": {}, "chi_gap": {}}
    for j in range(hierarchy.order):
        denom = max(abs(oracle.lambdas[j]), abs(oracle.lambdas[0]))
        report["lambda_gap"][j] = abs(
            float(hierarchy.lambdas[j]) - oracle.lambdas[j]) / denom
    for j in range(hierarchy.order + 1):
        ref = oracle.phi[j](x)
        report["phi_gap"][j] = float(np.sqrt(np.mean((hierarchy.phi[j] - ref) ** 2)))
        ref = oracle.chi[j](x)
        report["chi_gap"][j] = float(np.sqrt(np.mean((hierarchy.chi[j] - ref) ** 2)))
    return report


# ---------------------------------------------------------------------------
# exact periodic elliptic solves on a 1D box
# ---------------------------------------------------------------------------

def coefficient_on_box(profile: Profile1D, eps: float, length: float):
    """(a(x/eps), 1/a(x/eps)) as piecewise polynomials on [0, length)."""
    return (tile_to_box(profile.a_pp(), eps, length),
            tile_to_box(profile.ainv_pp(), eps, length))


def solve_elliptic_box(profile: Profile1D, eps: float, length: float,
                       rhs: PiecewisePoly) -> PiecewisePoly:
    """Solve -(a(x/eps) u')' = rhs on the periodic box, zero-mean u, exactly.

    Integrating once gives a(x/eps) u' = c - R with R the antiderivative of
    rhs; periodicity of u fixes c, and zero-mean rhs makes u' periodic.
    """
    mean_rhs = rhs.mean()
    if abs(mean_rhs) > 1e-10 * max(1.0, rhs.linf()):
        raise ConfigurationError(f"rhs mean {mean_rhs:.3e} is not negligible")
    _, ainv_box = coefficient_on_box(profile, eps, length)
    R = rhs.antiderivative()
    c = (R * ainv_box).mean() / ainv_box.mean()
    u_prime = ainv_box * (c - R)
    return u_prime.antiderivative().zero_mean()
