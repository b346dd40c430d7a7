"""Grids, fields and spectral calculus on the d-torus (d = 1 or 2).

Everything downstream (corrector hierarchies, Bloch dispersion, residual
checks) is built on trigonometric collocation: derivatives are exact Fourier
multipliers, so discrete integration by parts holds to machine precision,
which is what makes the algebraic corrector identities verifiable on the
grid.  Variable-coefficient elliptic problems are solved matrix-free by
conjugate gradients preconditioned with the constant-coefficient inverse
Laplacian.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field as dc_field

import numpy as np


class ConfigurationError(ValueError):
    """Invalid grid, shape, or parameter combination."""


class SolvabilityError(ValueError):
    """Right-hand side incompatible with periodic solvability."""


class ConvergenceError(RuntimeError):
    """Iterative solver exhausted its budget."""

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class TorusGrid:
    """Uniform collocation grid on [0, period)^dim."""

    dim: int
    n: int
    period: float = 1.0

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ConfigurationError(f"dim must be 1 or 2, got {self.dim}")
        if not _is_power_of_two(self.n) or self.n < 8:
            raise ConfigurationError(
                f"points per axis must be a power of two >= 8, got {self.n}")
        if not self.period > 0:
            raise ConfigurationError("period must be positive")

    @property
    def shape(self) -> tuple:
        return (self.n,) * self.dim

    @property
    def h(self) -> float:
        return self.period / self.n

    def coordinate_axes(self):
        """Per-axis node coordinates, shaped for broadcasting."""
        return _coordinate_axes(self)

    def wavenumber_axes(self):
        """Per-axis dual wavenumbers (2*pi/period times integer frequencies)."""
        return _wavenumber_axes(self)


@functools.lru_cache(maxsize=None)
def _coordinate_axes(grid: TorusGrid):
    axes = []
    for ax in range(grid.dim):
        x = np.arange(grid.n) * grid.h
        shape = [1] * grid.dim
        shape[ax] = grid.n
        x = x.reshape(shape)
        x.flags.writeable = False
        axes.append(x)
    return tuple(axes)


@functools.lru_cache(maxsize=None)
def _wavenumber_axes(grid: TorusGrid):
    axes = []
    for ax in range(grid.dim):
        k = 2.0 * np.pi / grid.period * np.fft.fftfreq(grid.n, 1.0 / grid.n)
        shape = [1] * grid.dim
        shape[ax] = grid.n
        k = k.reshape(shape)
        k.flags.writeable = False
        axes.append(k)
    return tuple(axes)


@functools.lru_cache(maxsize=None)
def _k_squared(grid: TorusGrid):
    k2 = np.zeros(grid.shape)
    for k in _wavenumber_axes(grid):
        k2 = k2 + k ** 2
    k2.flags.writeable = False
    return k2


@dataclass
class Field:
    """Sampled scalar/vector/matrix field on a torus grid.

    ``values`` is component-major: trailing axes are the grid axes, leading
    axes (if any) index components.  Fields are immutable after construction.
    """

    grid: TorusGrid
    values: np.ndarray
    domain: str = "physical"
    meta: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.shape[v.ndim - self.grid.dim:] != self.grid.shape:
            raise ConfigurationError(
                f"trailing axes {v.shape} do not match grid shape {self.grid.shape}")
        if self.domain not in ("physical", "spectral"):
            raise ConfigurationError(f"unknown domain {self.domain!r}")
        v = v.copy()
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def component_shape(self) -> tuple:
        return self.values.shape[: self.values.ndim - self.grid.dim]

    @property
    def rank(self) -> str:
        pre = self.component_shape
        if pre == ():
            return "scalar"
        if pre == (self.grid.dim,):
            return "vector"
        if pre == (self.grid.dim, self.grid.dim):
            return "matrix"
        return f"tensor{pre}"


def _grid_axes(grid: TorusGrid, values: np.ndarray) -> tuple:
    return tuple(range(values.ndim - grid.dim, values.ndim))


def fftn(grid: TorusGrid, values: np.ndarray) -> np.ndarray:
    return np.fft.fftn(values, axes=_grid_axes(grid, values))


def ifftn(grid: TorusGrid, values: np.ndarray, real: bool) -> np.ndarray:
    out = np.fft.ifftn(values, axes=_grid_axes(grid, values))
    return out.real if real else out


def spectral_transform(f: Field, direction: str) -> Field:
    """Forward (physical -> spectral) or inverse FFT of a field.

    Forward of a real field is Hermitian-symmetric; forward then inverse is
    the identity to roundoff.
    """
    if direction == "forward":
        if f.domain != "physical":
            raise ConfigurationError("field is already spectral")
        return Field(f.grid, fftn(f.grid, f.values), domain="spectral")
    if direction == "inverse":
        if f.domain != "spectral":
            raise ConfigurationError("field is already physical")
        out = ifftn(f.grid, f.values, real=False)
        return Field(f.grid, out, domain="physical")
    raise ConfigurationError(f"unknown direction {direction!r}")


@functools.lru_cache(maxsize=None)
def _derivative_multiplier(grid: TorusGrid, orders: tuple) -> np.ndarray:
    """Fourier multiplier for prod_ax (d/dx_ax)^orders[ax].

    The Nyquist mode is zeroed for odd derivative orders so real fields map
    to real fields and the operator stays exactly skew-adjoint.
    """
    mult = np.ones(grid.shape, dtype=complex)
    for ax, m in enumerate(orders):
        if m == 0:
            continue
        k = _wavenumber_axes(grid)[ax].copy()
        ikm = (1j * k) ** m
        if m % 2 == 1:
            nyq = [slice(None)] * grid.dim
            nyq[ax] = grid.n // 2
            ikm[tuple(nyq)] = 0.0
        mult = mult * ikm
    mult.flags.writeable = False
    return mult


def deriv_values(grid: TorusGrid, values: np.ndarray, multi_index) -> np.ndarray:
    """Spectral derivative of raw samples; multi_index lists axis indices."""
    orders = [0] * grid.dim
    for ax in multi_index:
        if not 0 <= ax < grid.dim:
            raise ConfigurationError(f"axis {ax} out of range for dim {grid.dim}")
        orders[ax] += 1
    mult = _derivative_multiplier(grid, tuple(orders))
    out = ifftn(grid, fftn(grid, values) * mult, real=False)
    if np.isrealobj(values):
        return out.real
    return out


def derivative(f: Field, multi_index) -> Field:
    """Mixed partial derivative, e.g. multi_index=[0, 1] is d^2/dx0 dx1."""
    return Field(f.grid, deriv_values(f.grid, f.values, multi_index))


def gradient_values(grid: TorusGrid, values: np.ndarray) -> np.ndarray:
    return np.stack([deriv_values(grid, values, [ax]) for ax in range(grid.dim)])


def gradient(f: Field) -> Field:
    return Field(f.grid, gradient_values(f.grid, f.values))


def divergence_values(grid: TorusGrid, values: np.ndarray) -> np.ndarray:
    """Divergence contracting the leading component axis."""
    if values.shape[0] != grid.dim:
        raise ConfigurationError("leading axis must have length dim")
    out = deriv_values(grid, values[0], [0])
    for ax in range(1, grid.dim):
        out = out + deriv_values(grid, values[ax], [ax])
    return out


def divergence(f: Field) -> Field:
    return Field(f.grid, divergence_values(f.grid, f.values))


def matrix_divergence_values(grid: TorusGrid, values: np.ndarray) -> np.ndarray:
    """Row-wise divergence of a matrix field: out_m = sum_n d_n values[m, n]."""
    return np.stack([divergence_values(grid, values[m]) for m in range(grid.dim)])


def laplacian_values(grid: TorusGrid, values: np.ndarray) -> np.ndarray:
    out = ifftn(grid, fftn(grid, values) * (-_k_squared(grid)), real=False)
    return out.real if np.isrealobj(values) else out


def cell_average(f: Field):
    """Mean over the grid axes (exact for band-limited integrands)."""
    return mean_values(f.grid, f.values)


def mean_values(grid: TorusGrid, values: np.ndarray):
    return values.mean(axis=_grid_axes(grid, values))


def solve_poisson_values(grid: TorusGrid, rhs: np.ndarray, strict: bool = False):
    """Solve -Lap(u) = rhs with zero-mean gauge; returns (u, dropped_mean).

    Any cell mean of ``rhs`` is unresolvable on the torus; it is subtracted
    (and returned) before inversion.  In strict mode a non-negligible mean
    raises ``SolvabilityError``.
    """
    mean = mean_values(grid, rhs)
    scale = max(1.0, float(np.max(np.abs(rhs))) if rhs.size else 1.0)
    if strict and np.max(np.abs(np.atleast_1d(mean))) > 1e-12 * scale:
        raise SolvabilityError(
            f"rhs has cell mean {mean} above solvability tolerance")
    k2 = _k_squared(grid)
    inv = np.zeros_like(k2)
    nonzero = k2 > 0
    inv[nonzero] = 1.0 / k2[nonzero]
    rhs_hat = fftn(grid, rhs)
    u = ifftn(grid, rhs_hat * inv, real=False)
    if np.isrealobj(rhs):
        u = u.real
    return u, mean


def solve_poisson(rhs: Field, strict: bool = False) -> Field:
    u, dropped = solve_poisson_values(rhs.grid, rhs.values, strict=strict)
    return Field(rhs.grid, u, meta={"dropped_mean": dropped})


@functools.lru_cache(maxsize=None)
def _spread_matrix(n: int, m: int) -> np.ndarray:
    """Frequency-spreading matrix for zero-padded prolongation n -> m.

    The Nyquist content of the source is split evenly between +-n/2 so real
    fields stay real and the trig interpolant keeps the cosine convention at
    the unpaired mode.
    """
    freqs = np.fft.fftfreq(n, 1.0 / n).astype(int)
    S = np.zeros((m, n))
    half = n // 2
    for i, f in enumerate(freqs):
        if abs(f) == half:
            S[f % m, i] += 0.5
            S[(-f) % m, i] += 0.5
        else:
            S[f % m, i] = 1.0
    S.flags.writeable = False
    return S


def prolong_values(grid: TorusGrid, values: np.ndarray, factor: int) -> np.ndarray:
    """Exact trigonometric prolongation onto a ``factor``-times finer grid."""
    if factor == 1:
        return values.copy()
    n, m = grid.n, grid.n * factor
    spec = fftn(grid, values)
    S = _spread_matrix(n, m)
    scale = float(factor) ** grid.dim
    if grid.dim == 1:
        out = np.einsum("ai,...i->...a", S, spec) * scale
    else:
        out = np.einsum("ai,bj,...ij->...ab", S, S, spec) * scale
    fine = TorusGrid(grid.dim, m, grid.period)
    res = ifftn(fine, out, real=False)
    return res.real if np.isrealobj(values) else res


# ---------------------------------------------------------------------------
# coefficient fields
# ---------------------------------------------------------------------------

class CoefficientField:
    """Symmetric uniformly elliptic matrix field a(x) sampled on a torus grid.

    Construction checks xi . a xi >= |xi|^2 and |a xi| <= Lambda |xi| nodewise.
    """

    def __init__(self, grid: TorusGrid, values: np.ndarray, spec: dict | None = None):
        values = np.asarray(values, dtype=float)
        d = grid.dim
        if values.shape != (d, d) + grid.shape:
            raise ConfigurationError(
                f"coefficient values must have shape {(d, d) + grid.shape}")
        sym_gap = np.max(np.abs(values - np.swapaxes(values, 0, 1)))
        if sym_gap > 1e-12 * max(1.0, np.max(np.abs(values))):
            raise ConfigurationError("coefficient matrix field is not symmetric")
        lo, hi = _sym_eig_bounds(values, d)
        if lo < 1.0 - 1e-10:
            raise ConfigurationError(
                f"ellipticity violated: min eigenvalue {lo:.6g} < 1")
        self.grid = grid
        self.values = values
        self.values.flags.writeable = False
        self.ellipticity = float(lo)
        self.Lambda = float(hi)
        self.spec = dict(spec) if spec else None

    @property
    def mean_matrix(self) -> np.ndarray:
        return mean_values(self.grid, self.values)

    def is_constant(self) -> bool:
        flat = self.values.reshape(self.grid.dim, self.grid.dim, -1)
        return bool(np.all(flat == flat[:, :, :1]))


def _sym_eig_bounds(values: np.ndarray, d: int):
    if d == 1:
        return float(values.min()), float(values.max())
    a11, a22, a12 = values[0, 0], values[1, 1], values[0, 1]
    mid = 0.5 * (a11 + a22)
    rad = np.sqrt((0.5 * (a11 - a22)) ** 2 + a12 ** 2)
    return float((mid - rad).min()), float((mid + rad).max())


def _matvec(a_values: np.ndarray, vec: np.ndarray) -> np.ndarray:
    return np.einsum("mn...,n...->m...", a_values, vec)


def apply_div_a_grad(a: CoefficientField, u: np.ndarray) -> np.ndarray:
    """-div(a grad u) on raw samples."""
    return -divergence_values(a.grid, _matvec(a.values, gradient_values(a.grid, u)))


def _l2(grid: TorusGrid, values: np.ndarray) -> float:
    return float(np.sqrt(np.vdot(values, values).real / grid.n ** grid.dim))


def _pcg_div_a_grad(a: CoefficientField, rhs: np.ndarray,
                    tol: float, maxiter: int) -> np.ndarray:
    """CG for -div(a grad u) = rhs on the zero-mean subspace.

    Preconditioner: inverse of -div(mean(a) grad), diagonal in Fourier space.
    """
    grid = a.grid
    abar = a.mean_matrix
    kaxes = _wavenumber_axes(grid)
    kak = np.zeros(grid.shape)
    for m in range(grid.dim):
        for n in range(grid.dim):
            kak = kak + abar[m, n] * kaxes[m] * kaxes[n]
    inv = np.zeros_like(kak)
    nz = kak > 0
    inv[nz] = 1.0 / kak[nz]

    def precond(r):
        return ifftn(grid, fftn(grid, r) * inv, real=True)

    rhs = rhs - rhs.mean()
    rhs_norm = _l2(grid, rhs)
    if rhs_norm == 0.0:
        return np.zeros(grid.shape)

    u = np.zeros(grid.shape)
    r = rhs.copy()
    z = precond(r)
    p = z.copy()
    rz = np.vdot(r, z).real
    for it in range(maxiter):
        res = _l2(grid, r)
        if res <= tol * rhs_norm:
            return u - u.mean()
        Ap = apply_div_a_grad(a, p)
        alpha = rz / np.vdot(p, Ap).real
        u = u + alpha * p
        r = r - alpha * Ap
        z = precond(r)
        rz_new = np.vdot(r, z).real
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise ConvergenceError(
        f"elliptic CG did not reach tol {tol:g} in {maxiter} iterations "
        f"(relative residual {_l2(grid, r) / rhs_norm:.3e})",
        residual=_l2(grid, r) / rhs_norm, iterations=maxiter)


def solve_div_a_grad(a: CoefficientField, flux_rhs: np.ndarray,
                     tol: float = 1e-10, maxiter: int = 10000) -> np.ndarray:
    """Solve -div(a grad phi) = div(flux_rhs) on the torus, zero-mean phi."""
    flux_rhs = np.asarray(flux_rhs, dtype=float)
    rhs = divergence_values(a.grid, flux_rhs)
    return _pcg_div_a_grad(a, rhs, tol=tol, maxiter=maxiter)


def solve_elliptic(a: CoefficientField, rhs: np.ndarray,
                   tol: float = 1e-10, maxiter: int = 10000) -> np.ndarray:
    """Solve -div(a grad u) = rhs (zero-mean rhs required), zero-mean u."""
    rhs = np.asarray(rhs, dtype=float)
    mean = float(rhs.mean())
    if abs(mean) > 1e-10 * max(1.0, float(np.max(np.abs(rhs)))):
        raise SolvabilityError(f"rhs mean {mean:.3e} is not negligible")
    return _pcg_div_a_grad(a, rhs - mean, tol=tol, maxiter=maxiter)


def weak_residual(a: CoefficientField, phi: np.ndarray,
                  flux_rhs: np.ndarray) -> float:
    """Relative residual of -div(a grad phi) = div(flux_rhs)."""
    rhs = divergence_values(a.grid, np.asarray(flux_rhs))
    res = apply_div_a_grad(a, phi) - rhs
    denom = _l2(a.grid, rhs)
    if denom == 0.0:
        return _l2(a.grid, res)
    return _l2(a.grid, res) / denom


# ---------------------------------------------------------------------------
# coefficient catalog
# ---------------------------------------------------------------------------

def evaluate_coefficient(spec: dict, x: np.ndarray, dim: int) -> np.ndarray:
    """Evaluate an analytic catalog coefficient at points.

    ``x`` has shape (dim, ...); the result has shape (dim, dim, ...).
    Raw-grid specs have no analytic form and are rejected here.
    """
    kind = spec.get("kind")
    base_shape = x.shape[1:]
    out = np.zeros((dim, dim) + base_shape)
    if kind == "constant":
        value = np.asarray(spec.get("value", 1.0), dtype=float)
        mat = np.eye(dim) * value if value.ndim == 0 else value
        out[...] = mat.reshape((dim, dim) + (1,) * len(base_shape))
        return out
    if kind == "diagonal":
        entries = np.asarray(spec["entries"], dtype=float)
        if entries.shape != (dim,):
            raise ConfigurationError(f"diagonal entries must have length {dim}")
        for m in range(dim):
            out[m, m] = entries[m]
        return out
    if kind == "laminate":
        values = [float(v) for v in spec["values"]]
        if len(values) != 2:
            raise ConfigurationError("laminate needs exactly two phase values")
        vf = float(spec.get("volume_fraction", 0.5))
        axis = int(spec.get("axis", 0))
        period = float(spec.get("period", 1.0))
        frac = np.mod(x[axis] / period, 1.0)
        scalar = np.where(frac < vf, values[0], values[1])
        for m in range(dim):
            out[m, m] = scalar
        return out
    if kind == "trig_checkerboard":
        base = float(spec.get("base", 2.0))
        amp = float(spec.get("amplitude", 1.0))
        period = float(spec.get("period", 1.0))
        scalar = np.full(base_shape, base)
        prod = np.ones(base_shape)
        for ax in range(dim):
            prod = prod * np.sin(2.0 * np.pi * x[ax] / period)
        scalar = scalar + amp * prod
        for m in range(dim):
            out[m, m] = scalar
        return out
    raise ConfigurationError(f"coefficient kind {kind!r} has no analytic form")


def coefficient_from_spec(spec: dict, grid: TorusGrid) -> CoefficientField:
    """Build a CoefficientField from a catalog tag or a raw grid of entries."""
    kind = spec.get("kind")
    if kind == "raw":
        values = np.asarray(spec["values"], dtype=float)
        return CoefficientField(grid, values, spec=spec)
    axes = grid.coordinate_axes()
    x = np.stack([np.broadcast_to(ax, grid.shape) for ax in axes])
    values = evaluate_coefficient(spec, x, grid.dim)
    return CoefficientField(grid, values, spec=spec)
