"""Weighted transport moments and the scaled ballistic experiment.

The moment of a wave field weights its mass by (1 + lam |x|)^2 around the
data center (minimum-image distance on the periodic box), and the windowed
moment averages its square over one interaction time 1/lam.  Ballistic
transport shows up as linear growth of the windowed moment along the
hyperbolically rescaled time axis; the experiment measures the growth ratio
against the dispersive defect budget.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .torus import ConfigurationError
from .wave import (
    BoxGrid,
    WaveTrajectory,
    box_coordinates,
    coefficient_on_box,
    solve_fine_wave,
    wrap_guard,
)


def min_image_radius(box: BoxGrid, center: np.ndarray) -> np.ndarray:
    """Distance to ``center`` with the periodic minimum-image convention."""
    x = box_coordinates(box)
    delta = np.abs(x - np.asarray(center).reshape((box.dim,) + (1,) * box.dim))
    delta = np.minimum(delta, box.side - delta)
    return np.sqrt(np.sum(delta ** 2, axis=0))


def gaussian_data(box: BoxGrid, lam: float, center=None) -> np.ndarray:
    """Centered Gaussian (lam/pi)^(d/2) exp(-lam^2 |x|^2 / 2) on the box.

    The formula is used verbatim (its L2 norm is pi^(-d/4), not 1).  The
    tail must fit the box: exp(-lam^2 (L/2)^2 / 2) below 1e-12.
    """
    if center is None:
        center = np.full(box.dim, 0.5 * box.side)
    tail = math.exp(-0.5 * (lam * 0.5 * box.side) ** 2)
    if tail > 1e-12:
        raise ConfigurationError(
            f"Gaussian of width 1/{lam:g} does not fit the box "
            f"(tail {tail:.2e} at side/2)")
    r = min_image_radius(box, np.asarray(center, dtype=float))
    return (lam / math.pi) ** (box.dim / 2.0) * np.exp(-0.5 * (lam * r) ** 2)


def transport_moment(u: np.ndarray, box: BoxGrid, lam: float,
                     center) -> float:
    """Weighted mass ( integral (1 + lam |x|)^2 u^2 )^(1/2)."""
    r = min_image_radius(box, np.asarray(center, dtype=float))
    w = (1.0 + lam * r) ** 2
    return float(np.sqrt(np.sum(w * u ** 2) * box.h ** box.dim))


def moment_history(traj: WaveTrajectory, lam: float, center) -> np.ndarray:
    return np.array([transport_moment(traj.u[i], traj.box, lam, center)
                     for i in range(traj.times.size)])


def windowed_moment(traj: WaveTrajectory, lam: float, T: float,
                    center) -> float:
    """sqrt of the integral of the squared moment over [T, T + 1/lam].

    Needs snapshots covering the window with spacing at most 1/(16 lam);
    integration is trapezoidal in time.
    """
    window = 1.0 / lam
    sel = (traj.times >= T - 1e-12) & (traj.times <= T + window + 1e-12)
    ts = traj.times[sel]
    if ts.size < 2 or ts[0] > T + 1e-9 or ts[-1] < T + window - 1e-9:
        raise ConfigurationError(
            f"snapshots do not cover the window [{T}, {T + window}]")
    if np.max(np.diff(ts)) > window / 16.0 + 1e-12:
        raise ConfigurationError(
            f"snapshot spacing exceeds {window / 16.0:g} over the window")
    msq = np.array([transport_moment(traj.u[i], traj.box, lam, center) ** 2
                    for i in np.nonzero(sel)[0]])
    return float(math.sqrt(np.trapezoid(msq, ts)))


@dataclass
class MomentReport:
    lam: float
    times: np.ndarray
    moments: np.ndarray
    windowed: dict
    valid: bool
    guard: dict = dc_field(default_factory=dict)


@dataclass
class BallisticRow:
    eps: float
    T_rescaled: float
    windowed: float
    ratio: float
    defect_bound: float
    conclusive: bool
    valid: bool
    guard_reach: float


@dataclass
class BallisticReport:
    gamma: float
    T: float
    ell: int
    rows: list

    def table(self):
        out = [("eps", "T_rescaled", "windowed_moment", "ratio",
                "defect_bound", "conclusive", "valid")]
        for r in self.rows:
            out.append((format(r.eps, ".17g"), format(r.T_rescaled, ".17g"),
                        format(r.windowed, ".17g"), format(r.ratio, ".17g"),
                        format(r.defect_bound, ".17g"),
                        str(r.conclusive), str(r.valid)))
        return out


def _mu(alpha, t):
    return (1.0 + t) ** alpha[0] * math.log2(2.0 + t) ** alpha[1]


def ballistic_experiment(coeff_spec: dict, box: BoxGrid, eps_list, gamma: float,
                         T: float, ell: int, gamma_bar: float,
                         alpha=(0.0, 0.0), cfl: float = 0.9,
                         snapshots_per_window: int = 17) -> BallisticReport:
    """Scaled transport experiment after the hyperbolic rescaling.

    For each eps the fine wave runs with unit-width Gaussian data in the
    rescaled variables up to T' = eps^(-1-gamma) T; the windowed moment over
    [T', T'+1] measured against T' is the ballistic ratio, reported next to
    the dispersive defect budget eps^(ell-1-gamma) T mu(eps^(-2-gamma) T).
    Wrap-around of the wavefront invalidates the weighted moment and flags
    the row.
    """
    center = np.full(box.dim, 0.5 * box.side)
    rows = []
    for eps in eps_list:
        t_resc = eps ** (-1.0 - gamma) * T
        a_box = coefficient_on_box(coeff_spec, box, eps)
        g1 = gaussian_data(box, 1.0)
        ok, _, reach = wrap_guard(g1, box, center, t_resc + 1.0, gamma_bar)
        times = np.linspace(t_resc, t_resc + 1.0, snapshots_per_window)
        traj = solve_fine_wave(a_box, box, g1, times=times, eps=eps, cfl=cfl)
        m_win = windowed_moment(traj, 1.0, t_resc, center)
        defect = (eps ** (ell - 1.0 - gamma) * T
                  * _mu(alpha, eps ** (-2.0 - gamma) * T))
        rows.append(BallisticRow(
            eps=float(eps), T_rescaled=t_resc, windowed=m_win,
            ratio=m_win / t_resc, defect_bound=defect,
            conclusive=defect < 1.0, valid=bool(ok), guard_reach=reach))
    return BallisticReport(gamma=gamma, T=T, ell=ell, rows=rows)


def affine_ballistic_fit(T_values, windowed_values):
    """Fit windowed moments to offset + slope * T and return per-T slopes.

    The windowed moment at zero offset is an O(1) quantity (the data's own
    weighted mass), so the ballistic law is affine in the window offset;
    removing the fitted offset isolates the transport rate, whose per-T
    values should be flat for a ballistic medium.
    """
    T = np.asarray(list(T_values), dtype=float)
    M = np.asarray(list(windowed_values), dtype=float)
    slope, offset = np.polyfit(T, M, 1)
    per_T = (M - offset) / T
    return float(offset), float(slope), per_T


def constant_medium_moment_scan(box: BoxGrid, lam: float, T_values,
                                cfl: float = 0.9) -> MomentReport:
    """Windowed moments of free propagation at several window offsets.

    Used to exhibit the ballistic scaling M(lam, T/lam) ~ T for the
    homogeneous medium; all windows are gathered from one trajectory.
    """
    center = np.full(box.dim, 0.5 * box.side)
    a_box = np.zeros((box.dim, box.dim) + box.shape)
    for m in range(box.dim):
        a_box[m, m] = 1.0
    u0 = gaussian_data(box, lam)
    window = 1.0 / lam
    times = set()
    for T in T_values:
        start = T / lam
        times.update(np.linspace(start, start + window, 17).tolist())
    times = sorted(times)
    traj = solve_fine_wave(a_box, box, u0, times=times, cfl=cfl)
    guard_T = max(T_values) / lam + window
    ok, r0, reach = wrap_guard(u0, box, center, guard_T, 1.0)
    windowed = {float(T): windowed_moment(traj, lam, T / lam, center)
                for T in T_values}
    return MomentReport(lam=lam, times=traj.times,
                        moments=moment_history(traj, lam, center),
                        windowed=windowed, valid=bool(ok),
                        guard={"r0": r0, "reach": reach, "limit": box.side / 2})
