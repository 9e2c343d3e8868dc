"""Complex classical trajectories along complex time contours.

Propagates phase-space points, the classical action and the 2x2 stability
matrix under Hamilton's equations

    dq/dt = p/m,   dp/dt = -V'(q),   dS/dt = p^2/(2m) - V(q),
    dM/dt = [[0, 1/m], [-V''(q), 0]] M,

where q, p, S, M and t are all complex.  A time contour is a polyline of
complex waypoints; each straight segment is integrated with an embedded
Dormand-Prince 5(4) scheme, vectorized over a whole batch of independent
trajectories with per-trajectory adaptive steps.

Optionally a fixed linear functional of M (the projected-map derivative
d xi/d nu) is evaluated at every accepted step and its complex argument
is continued in time, unwrapping across branch cuts of the square root
that no final-time snapshot can resolve once the manifold winds faster
than any practical label grid.

The symplectic invariant det M = 1 and energy conservation are monitored,
not enforced.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .potentials import potential_gradient, potential_hessian, potential_value, singularity_distance

__all__ = [
    "PhasePoint",
    "TimeContour",
    "StabilityMatrix",
    "TrajectoryRecord",
    "propagate",
    "batch_propagate",
    "StepFailure",
]

# trajectory status codes
OK = 0
SINGULARITY_HIT = 1
STEP_FAILURE = 2
DIVERGED = 3

_STATUS_NAMES = {OK: "ok", SINGULARITY_HIT: "singularity-hit",
                 STEP_FAILURE: "step-failure", DIVERGED: "diverged"}


class StepFailure(RuntimeError):
    """Adaptive step control could not meet the requested tolerance."""


@dataclass(frozen=True)
class PhasePoint:
    q: complex
    p: complex


@dataclass(frozen=True)
class TimeContour:
    """Polyline in the complex time plane, starting at t = 0.

    ``steps_per_segment`` switches to fixed-step integration (mainly for
    convergence studies); by default steps are adaptive.
    """

    waypoints: tuple
    steps_per_segment: int | None = None

    def __post_init__(self):
        wps = tuple(complex(w) for w in self.waypoints)
        if len(wps) < 2:
            raise ValueError("contour needs at least two waypoints")
        if wps[0] != 0:
            raise ValueError("contour must start at t = 0")
        if any(a == b for a, b in zip(wps, wps[1:])):
            raise ValueError("consecutive waypoints must be distinct")
        object.__setattr__(self, "waypoints", wps)

    @property
    def final_time(self):
        return self.waypoints[-1]

    @classmethod
    def real_axis(cls, t_final, **kw):
        """Straight real segment [0, T]."""
        return cls(waypoints=(0.0, t_final), **kw)

    @classmethod
    def rectangle(cls, t_final, depth, **kw):
        """Detour 0 -> -i*depth -> T - i*depth -> T (depth > 0 dips below the axis)."""
        return cls(waypoints=(0.0, -1j * depth, t_final - 1j * depth, t_final), **kw)

    def is_real(self):
        return all(abs(w.imag) == 0 for w in self.waypoints)


@dataclass(frozen=True)
class StabilityMatrix:
    m_qq: complex
    m_qp: complex
    m_pq: complex
    m_pp: complex

    @property
    def det(self):
        return self.m_qq * self.m_pp - self.m_qp * self.m_pq


@dataclass
class TrajectoryRecord:
    """One complex trajectory and the derived map/exponent values.

    ``xi`` through ``prefactor`` are filled by the manifold/reconstruction
    layers; ``mask`` stays 1 until Stokes processing.
    """

    nu: complex
    initial: PhasePoint
    final: PhasePoint
    action: complex
    stability: StabilityMatrix
    xi: complex | None = None
    xi_deriv: complex | None = None
    sigma: complex | None = None
    sigma_analytic: complex | None = None
    prefactor: complex | None = None
    mask: float = 1.0
    valid: bool = True
    status: int = OK
    energy_drift: float = 0.0
    det_error: float = 0.0

    @property
    def status_name(self):
        return _STATUS_NAMES[self.status]


# Dormand-Prince 5(4) tableau (FSAL: last stage of an accepted step is the
# first stage of the next).
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
# difference between 5th and embedded 4th order weights
_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])

_MIN_STEP = 1e-13
_MAX_FACTOR = 10.0
_MIN_FACTOR = 0.2
_SAFETY = 0.9


def _rhs(spec, y, dt):
    """Segment-parameter derivative dt * f(y) for state columns (q,p,S,Mqq,Mqp,Mpq,Mpp)."""
    q = y[:, 0]
    p = y[:, 1]
    m = spec.mass
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        v = potential_value(spec, q, check=False)
        dv = potential_gradient(spec, q, check=False)
        d2v = potential_hessian(spec, q, check=False)
        out = np.empty_like(y)
        out[:, 0] = p / m
        out[:, 1] = -dv
        out[:, 2] = p * p / (2.0 * m) - v
        out[:, 3] = y[:, 5] / m
        out[:, 4] = y[:, 6] / m
        out[:, 5] = -d2v * y[:, 3]
        out[:, 6] = -d2v * y[:, 4]
        out *= dt[:, None]
    return out


def _initial_step(y, f, tol):
    """Crude per-trajectory initial step in segment units."""
    scale = tol + tol * np.abs(y)
    d1 = np.sqrt(np.mean(np.abs(f / scale) ** 2, axis=1))
    with np.errstate(divide="ignore"):
        h = 0.01 / d1
    return np.clip(np.where(np.isfinite(h), h, 1e-6), 1e-10, 0.1)


def _deriv_value(cw, y, rows):
    """Projected-map derivative c . (M_qq, M_qp, M_pq, M_pp) for rows."""
    return (cw[rows, 0] * y[rows, 3] + cw[rows, 1] * y[rows, 4]
            + cw[rows, 2] * y[rows, 5] + cw[rows, 3] * y[rows, 6])


def _integrate_segment(spec, y, dt, tol, fixed_steps, diverge_radius, wind=None):
    """Advance all still-valid trajectories across one contour segment.

    Returns an int status array; trajectories that hit a singularity, blow
    up or exhaust step control are frozen at their last good state and
    reported accordingly.  ``wind`` is an optional (weights, value, arg)
    array triple updated in place at every accepted step: the continued
    argument accumulates the principal-value increment of the projected
    derivative, which adaptive steps keep far below pi per step.
    """
    n = y.shape[0]
    status = np.zeros(n, dtype=int)
    guarded = spec.kind in ("coulomb", "eckart")

    if fixed_steps is not None:
        h_fix = 1.0 / fixed_steps
        rows = np.arange(n)
        for _ in range(fixed_steps):
            k = np.empty((7, n, 7), dtype=complex)
            k[0] = _rhs(spec, y, dt)
            for i in range(1, 7):
                yi = y + h_fix * np.einsum("s,snj->nj", _A[i], k[:i])
                k[i] = _rhs(spec, yi, dt)
            y += h_fix * np.einsum("s,snj->nj", _B, k)
            if wind is not None:
                cw, w_cur, a_cum = wind
                w_new = _deriv_value(cw, y, rows)
                with np.errstate(invalid="ignore", divide="ignore"):
                    a_cum += np.angle(w_new / w_cur)
                w_cur[:] = w_new
        bad = ~np.isfinite(y).all(axis=1)
        status[bad] = DIVERGED
        return status

    active = np.ones(n, dtype=bool)
    s = np.zeros(n)
    f = _rhs(spec, y, dt)
    h = _initial_step(y, f, tol)
    nan_rows = ~np.isfinite(f).all(axis=1)
    if np.any(nan_rows):
        # bad right-hand side at the very start (e.g. launched on a pole)
        status[nan_rows] = SINGULARITY_HIT if guarded else DIVERGED
        active &= ~nan_rows

    max_iter = 500_000
    for _ in range(max_iter):
        if not np.any(active):
            break
        idx = np.flatnonzero(active)
        ya = y[idx]
        fa = f[idx]
        dta = dt[idx]
        ha = np.minimum(h[idx], 1.0 - s[idx])

        k = np.empty((7, len(idx), 7), dtype=complex)
        k[0] = fa
        for i in range(1, 7):
            yi = ya + ha[:, None] * np.einsum("s,snj->nj", _A[i], k[:i])
            k[i] = _rhs(spec, yi, dta)
        y_new = ya + ha[:, None] * np.einsum("s,snj->nj", _B, k)
        err_vec = ha[:, None] * np.einsum("s,snj->nj", _E, k)

        scale = tol + tol * np.maximum(np.abs(ya), np.abs(y_new))
        with np.errstate(invalid="ignore"):
            err = np.sqrt(np.mean(np.abs(err_vec / scale) ** 2, axis=1))
        err = np.where(np.isfinite(err), err, np.inf)

        accept = err <= 1.0
        with np.errstate(divide="ignore", over="ignore"):
            factor = _SAFETY * err ** (-0.2)
        factor = np.clip(np.where(np.isfinite(factor), factor, _MAX_FACTOR),
                         _MIN_FACTOR, _MAX_FACTOR)

        acc = idx[accept]
        if len(acc):
            ka = k[:, accept]
            y[acc] = y_new[accept]
            f[acc] = ka[6]  # FSAL
            s[acc] += ha[accept]
            h[acc] = ha[accept] * factor[accept]
            if wind is not None:
                cw, w_cur, a_cum = wind
                w_new = _deriv_value(cw, y, acc)
                with np.errstate(invalid="ignore", divide="ignore"):
                    a_cum[acc] += np.angle(w_new / w_cur[acc])
                w_cur[acc] = w_new

            q_acc = y[acc, 0]
            dead = np.abs(q_acc) > diverge_radius
            dead |= np.abs(y[acc, 1]) > diverge_radius
            if np.any(dead):
                status[acc[dead]] = DIVERGED
                active[acc[dead]] = False
            if guarded:
                hit = singularity_distance(spec, q_acc) < spec.guard_radius
                if np.any(hit):
                    status[acc[hit]] = SINGULARITY_HIT
                    active[acc[hit]] = False
            done = s[acc] >= 1.0 - 1e-14
            active[acc[done]] = False

        rej = idx[~accept]
        if len(rej):
            h_rej = ha[~accept] * factor[~accept]
            stuck = h_rej < _MIN_STEP
            status[rej[stuck]] = STEP_FAILURE
            active[rej[stuck]] = False
            h[rej] = np.maximum(h_rej, _MIN_STEP)
    else:
        status[active] = STEP_FAILURE

    return status


def batch_propagate(spec, q0, p0, contour, tol=1e-10, s0=None, diverge_radius=1e6,
                    deriv_weights=None):
    """Propagate a batch of trajectories along a contour.

    Parameters
    ----------
    spec : PotentialSpec
    q0, p0 : complex arrays, shape (n,)
        Initial phase-space points.
    contour : TimeContour
    tol : float
        Relative/absolute tolerance of the embedded step control.
    s0 : complex array, optional
        Initial value of the action integral (defaults to 0).
    diverge_radius : float
        |q| or |p| beyond this flags the trajectory as diverged.
    deriv_weights : length-4 complex sequence, optional
        Coefficients c such that c . (M_qq, M_qp, M_pq, M_pp) equals the
        projected-map derivative d xi/d nu.  When given, the result gains
        "xi_arg": the argument of that derivative continued along the
        trajectory from its t = 0 value (principal, since M starts at the
        identity), re-anchored to the final principal argument to shed
        accumulated rounding.

    Returns
    -------
    dict of arrays: q, p, action, m_qq, m_qp, m_pq, m_pp, status, valid,
    energy_drift, det_error (and xi_arg when requested).
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    q0 = np.asarray(q0, dtype=complex).ravel()
    p0 = np.asarray(p0, dtype=complex).ravel()
    n = q0.size
    y = np.zeros((n, 7), dtype=complex)
    y[:, 0] = q0
    y[:, 1] = p0
    if s0 is not None:
        y[:, 2] = np.asarray(s0, dtype=complex).ravel()
    y[:, 3] = 1.0  # M = identity
    y[:, 6] = 1.0

    if deriv_weights is not None:
        cw = np.tile(np.asarray(deriv_weights, dtype=complex).reshape(1, 4), (n, 1))
        w_cur = cw[:, 0] + cw[:, 3]  # M = identity
        a_cum = np.angle(w_cur)
    else:
        cw = w_cur = a_cum = None

    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        e0 = p0**2 / (2.0 * spec.mass) + potential_value(spec, q0, check=False)

    status = np.zeros(n, dtype=int)
    launched_on_pole = singularity_distance(spec, q0) < spec.guard_radius
    status[launched_on_pole] = SINGULARITY_HIT

    for t_a, t_b in zip(contour.waypoints, contour.waypoints[1:]):
        live = status == OK
        if not np.any(live):
            break
        dt = np.full(live.sum(), t_b - t_a, dtype=complex)
        y_live = y[live]
        if cw is not None:
            wind = (cw[live], w_cur[live], a_cum[live])
        else:
            wind = None
        seg_status = _integrate_segment(spec, y_live, dt, tol,
                                        contour.steps_per_segment, diverge_radius,
                                        wind=wind)
        y[live] = y_live
        if wind is not None:
            w_cur[live] = wind[1]
            a_cum[live] = wind[2]
        idx = np.flatnonzero(live)
        status[idx[seg_status != OK]] = seg_status[seg_status != OK]

    valid = status == OK
    q, p = y[:, 0], y[:, 1]
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        e1 = np.where(valid, p**2 / (2.0 * spec.mass)
                      + potential_value(spec, np.where(valid, q, 1.0), check=False), np.nan)
    energy_drift = np.where(valid, np.abs(e1 - e0) / (1.0 + np.abs(e0)), np.nan)
    det = y[:, 3] * y[:, 6] - y[:, 4] * y[:, 5]
    det_error = np.where(valid, np.abs(det - 1.0), np.nan)

    out = {
        "q": q, "p": p, "action": y[:, 2],
        "m_qq": y[:, 3], "m_qp": y[:, 4], "m_pq": y[:, 5], "m_pp": y[:, 6],
        "status": status, "valid": valid,
        "energy_drift": energy_drift, "det_error": det_error,
    }
    if cw is not None:
        w_fin = _deriv_value(cw, y, np.arange(n))
        with np.errstate(invalid="ignore", divide="ignore"):
            arg_fin = np.angle(w_fin)
            turns = np.round((a_cum - arg_fin) / (2.0 * np.pi))
        xi_arg = arg_fin + 2.0 * np.pi * turns
        out["xi_arg"] = np.where(np.isfinite(xi_arg), xi_arg, a_cum)
    return out


def propagate(spec, start, contour, tol=1e-10, s0=0.0, nu=None):
    """Propagate a single trajectory; see batch_propagate.

    Raises StepFailure if the step control gives up (a singularity hit is
    reported via the record's ``valid``/``status`` instead, since grid
    builds must tolerate it).
    """
    res = batch_propagate(spec, [start.q], [start.p], contour, tol=tol, s0=[s0])
    status = int(res["status"][0])
    if status == STEP_FAILURE:
        raise StepFailure("adaptive step control could not meet tolerance "
                          f"{tol:g} (trajectory from q={start.q}, p={start.p})")
    return TrajectoryRecord(
        nu=nu if nu is not None else start.q,
        initial=start,
        final=PhasePoint(q=complex(res["q"][0]), p=complex(res["p"][0])),
        action=complex(res["action"][0]),
        stability=StabilityMatrix(
            m_qq=complex(res["m_qq"][0]), m_qp=complex(res["m_qp"][0]),
            m_pq=complex(res["m_pq"][0]), m_pp=complex(res["m_pp"][0]),
        ),
        valid=bool(res["valid"][0]),
        status=status,
        energy_drift=float(res["energy_drift"][0]) if res["valid"][0] else np.nan,
        det_error=float(res["det_error"][0]) if res["valid"][0] else np.nan,
    )
