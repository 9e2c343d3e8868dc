"""Complex Lagrangian manifolds sampled on a grid of labels.

The initial manifold is derived from an analytic Gaussian wavepacket

    psi_0(x) = (2 g0/pi)^(1/4) exp(-g0 (x - chi/(2 g0))^2 - (Im chi)^2/(4 g0))

by q0(nu) = nu, p0(nu) = -i hbar d/dx ln psi_0 |_{x=nu} = i hbar (2 g0 nu - chi),
with the label nu ranging over a rectangle in the complex plane.  The
parameter chi = 2 g0 q_c + i p_c/hbar packs the phase-space center: the
packet sits at q_c = Re chi/(2 g0) with mean momentum p_c = hbar Im chi.  After
propagation each trajectory is projected through the linear map

    xi(nu) = alpha q_t + beta p_t / hbar

and annotated with the exponent sigma and its analytic part sigma_A:

    sigma_A = (i/hbar) S_t + p_t^2 / (4 gamma hbar^2)
    sigma   = sigma_A - (Im xi)^2 / (4 gamma)

The action S_t carried by the records starts from the initial-state
exponent S_0(nu) = -i hbar ln psi_0(nu), which makes phi(nu) e^sigma
exactly the analytic continuation of the coherent-state transform of
psi_0 at t = 0; sigma's last term controls normalization and is the only
non-analytic piece.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dynamics import OK, PhasePoint, StabilityMatrix, TrajectoryRecord, batch_propagate

__all__ = [
    "ProjectionParams",
    "GaussianState",
    "ManifoldGrid",
    "initial_conditions",
    "initial_action",
    "project",
    "xi_derivative",
    "sigma",
    "sigma_analytic",
    "build_and_propagate",
]


@dataclass(frozen=True)
class ProjectionParams:
    """Coefficients of the linear phase-space map and the basis width."""

    alpha: complex
    beta: complex
    gamma: float
    hbar: float = 1.0

    def __post_init__(self):
        if self.gamma <= 0 or self.hbar <= 0:
            raise ValueError("gamma and hbar must be positive")

    @classmethod
    def finco(cls, gamma=0.5, hbar=1.0):
        """Final-value coherent-state map: alpha = 2 gamma, beta = -i."""
        return cls(alpha=2.0 * gamma, beta=-1.0j, gamma=gamma, hbar=hbar)


@dataclass(frozen=True)
class GaussianState:
    """Normalized Gaussian wavepacket with complex center parameter chi.

    chi = 2 gamma0 q_c + i p_c encodes the phase-space center (q_c, p_c):
    the wavepacket is centered at q_c = Re chi/(2 gamma0) and carries
    mean momentum p_c = Im chi (in units of hbar).
    """

    gamma0: float
    chi: complex

    def __post_init__(self):
        if self.gamma0 <= 0:
            raise ValueError("gamma0 must be positive")

    @property
    def center(self):
        """Stationary label chi/(2 gamma0), where p0(nu) = 0."""
        return self.chi / (2.0 * self.gamma0)

    def log_psi(self, x):
        """ln psi_0 continued to complex x (principal normalization constant)."""
        g0 = self.gamma0
        return (0.25 * np.log(2.0 * g0 / np.pi)
                - g0 * (x - self.chi / (2.0 * g0)) ** 2
                - np.imag(self.chi) ** 2 / (4.0 * g0))

    def psi(self, x):
        return np.exp(self.log_psi(x))


def initial_conditions(state, nu, hbar=1.0):
    """Phase point on the initial manifold at label nu."""
    p0 = 1j * hbar * (2.0 * state.gamma0 * nu - state.chi)
    return PhasePoint(q=nu, p=p0)


def initial_action(state, nu, hbar=1.0):
    """Initial-state exponent S_0(nu) = -i hbar ln psi_0(nu)."""
    return -1j * hbar * state.log_psi(nu)


def project(record, params):
    """Fill record.xi = alpha q_t + beta p_t/hbar and return it."""
    xi = params.alpha * record.final.q + params.beta * record.final.p / params.hbar
    record.xi = xi
    return xi


def xi_derivative(record, params, state):
    """Fill record.xi_deriv = d xi/d nu from the stability matrix.

    Uses d q0/d nu = 1 and the analytic d p0/d nu = 2 i hbar gamma0 of a
    Gaussian state; no finite differencing.
    """
    m = record.stability
    a, b, hb = params.alpha, params.beta, params.hbar
    dp0 = 2.0j * hb * state.gamma0
    val = (a * m.m_qp + b * m.m_pp / hb) * dp0 + (a * m.m_qq + b * m.m_pq / hb)
    record.xi_deriv = val
    return val


def sigma_analytic(record, params):
    """Fill the analytic exponent sigma_A = (i/hbar) S_t + p_t^2/(4 gamma hbar^2)."""
    val = (1j / params.hbar * record.action
           + record.final.p ** 2 / (4.0 * params.gamma * params.hbar ** 2))
    record.sigma_analytic = val
    return val


def sigma(record, params):
    """Fill the full exponent sigma = sigma_A - (Im xi)^2/(4 gamma).

    Requires record.xi; the subtracted term is real, so
    Im(sigma - sigma_A) = 0 identically.
    """
    if record.xi is None:
        raise ValueError("record must be projected before sigma is evaluated")
    sig_a = sigma_analytic(record, params)
    val = sig_a - np.imag(record.xi) ** 2 / (4.0 * params.gamma)
    record.sigma = val
    return val


# CSV column layout of ManifoldGrid.to_csv, stable across releases.
CSV_COLUMNS = [
    "re_nu", "im_nu", "re_q", "im_q", "re_p", "im_p", "re_action", "im_action",
    "re_m_qq", "im_m_qq", "re_m_qp", "im_m_qp", "re_m_pq", "im_m_pq", "re_m_pp", "im_m_pp",
    "re_xi", "im_xi", "re_xi_deriv", "im_xi_deriv",
    "re_sigma", "im_sigma", "re_sigma_a", "im_sigma_a",
    "re_prefactor", "im_prefactor", "mask", "valid",
]


@dataclass
class ManifoldGrid:
    """Rectangular sample grid over the complex label plane.

    Records are stored as dense arrays in row-major label order: index
    i = i_re * n_im + i_im, with the real part varying slowest.  All
    per-record fields share that indexing.  The grid is immutable after
    build except for the annotation fields (prefactor, mask), which are
    written by a single downstream stage at a time.
    """

    bounds: tuple        # (re_min, re_max, im_min, im_max)
    resolution: tuple    # (n_re, n_im)
    nu: np.ndarray
    q0: np.ndarray
    p0: np.ndarray
    q: np.ndarray
    p: np.ndarray
    action: np.ndarray
    m_qq: np.ndarray
    m_qp: np.ndarray
    m_pq: np.ndarray
    m_pp: np.ndarray
    xi: np.ndarray
    xi_deriv: np.ndarray
    sigma: np.ndarray
    sigma_analytic: np.ndarray
    prefactor: np.ndarray
    mask: np.ndarray
    valid: np.ndarray
    status: np.ndarray
    params: ProjectionParams
    state: GaussianState | None = None
    spec: object = None
    contour: object = None
    energy_drift: np.ndarray | None = None
    det_error: np.ndarray | None = None
    # arg of xi_deriv continued along each trajectory in time (propagated
    # grids only); the square-root branch of the prefactor follows from it
    # without any grid-adjacency reasoning.
    xi_deriv_arg: np.ndarray | None = None

    def __post_init__(self):
        n_re, n_im = self.resolution
        if n_re < 8 or n_im < 8:
            raise ValueError("grid resolution must be at least 8x8")
        if self.nu.size != n_re * n_im:
            raise ValueError("records array length must equal n_re * n_im")

    # -- geometry ---------------------------------------------------------

    @property
    def d_re(self):
        return (self.bounds[1] - self.bounds[0]) / (self.resolution[0] - 1)

    @property
    def d_im(self):
        return (self.bounds[3] - self.bounds[2]) / (self.resolution[1] - 1)

    @property
    def dnu(self):
        """Coarsest spacing; the scale used for fit radii and dedup radii."""
        return max(self.d_re, self.d_im)

    @property
    def area_weight(self):
        """Quadrature area element d(Re nu) * d(Im nu)."""
        return self.d_re * self.d_im

    @property
    def n_records(self):
        return self.nu.size

    def in_bounds(self, z):
        re_min, re_max, im_min, im_max = self.bounds
        z = np.asarray(z)
        return ((z.real >= re_min) & (z.real <= re_max)
                & (z.imag >= im_min) & (z.imag <= im_max))

    def points_within(self, center, radius, valid_only=True):
        """Indices of records within |nu - center| <= radius."""
        sel = np.abs(self.nu - center) <= radius
        if valid_only:
            sel &= self.valid
        return np.flatnonzero(sel)

    def nearest_record(self, z, valid_only=True):
        """Index of the record closest to z."""
        d = np.abs(self.nu - z)
        if valid_only:
            d = np.where(self.valid, d, np.inf)
        return int(np.argmin(d))

    def record(self, i):
        """Materialize record i as a TrajectoryRecord (a copy, not a view)."""
        return TrajectoryRecord(
            nu=complex(self.nu[i]),
            initial=PhasePoint(q=complex(self.q0[i]), p=complex(self.p0[i])),
            final=PhasePoint(q=complex(self.q[i]), p=complex(self.p[i])),
            action=complex(self.action[i]),
            stability=StabilityMatrix(complex(self.m_qq[i]), complex(self.m_qp[i]),
                                      complex(self.m_pq[i]), complex(self.m_pp[i])),
            xi=complex(self.xi[i]),
            xi_deriv=complex(self.xi_deriv[i]),
            sigma=complex(self.sigma[i]),
            sigma_analytic=complex(self.sigma_analytic[i]),
            prefactor=None if np.isnan(self.prefactor[i]) else complex(self.prefactor[i]),
            mask=float(self.mask[i]),
            valid=bool(self.valid[i]),
            status=int(self.status[i]),
        )

    @property
    def n_invalid(self):
        return int(np.count_nonzero(~self.valid))

    # -- construction -----------------------------------------------------

    @staticmethod
    def label_grid(bounds, resolution):
        re_min, re_max, im_min, im_max = bounds
        n_re, n_im = resolution
        re = np.linspace(re_min, re_max, n_re)
        im = np.linspace(im_min, im_max, n_im)
        return (re[:, None] + 1j * im[None, :]).ravel()

    @classmethod
    def from_callables(cls, bounds, resolution, xi_func, sigma_a_func, params,
                       xi_deriv_func=None, fd_step=1e-6):
        """Synthetic grid with prescribed analytic maps (for validation).

        xi and sigma_A come from the supplied callables; sigma adds the
        standard non-analytic normalization term.  The derivative falls
        back to central differences of xi_func when not supplied.
        """
        nu = cls.label_grid(bounds, resolution)
        xi = np.asarray(xi_func(nu), dtype=complex)
        if xi_deriv_func is not None:
            xi_d = np.asarray(xi_deriv_func(nu), dtype=complex)
        else:
            xi_d = (np.asarray(xi_func(nu + fd_step), dtype=complex)
                    - np.asarray(xi_func(nu - fd_step), dtype=complex)) / (2.0 * fd_step)
        sig_a = np.asarray(sigma_a_func(nu), dtype=complex)
        n = nu.size
        zeros = np.zeros(n, dtype=complex)
        return cls(
            bounds=tuple(bounds), resolution=tuple(resolution), nu=nu,
            q0=nu.copy(), p0=zeros.copy(), q=zeros.copy(), p=zeros.copy(),
            action=zeros.copy(),
            m_qq=np.ones(n, dtype=complex), m_qp=zeros.copy(),
            m_pq=zeros.copy(), m_pp=np.ones(n, dtype=complex),
            xi=xi, xi_deriv=xi_d,
            sigma=sig_a - np.imag(xi) ** 2 / (4.0 * params.gamma),
            sigma_analytic=sig_a,
            prefactor=np.full(n, np.nan, dtype=complex),
            mask=np.ones(n), valid=np.ones(n, dtype=bool),
            status=np.zeros(n, dtype=int), params=params,
        )

    # -- output -----------------------------------------------------------

    def to_csv(self, path):
        """Dump one row per record with the documented stable column schema."""
        cols = {
            "re_nu": self.nu.real, "im_nu": self.nu.imag,
            "re_q": self.q.real, "im_q": self.q.imag,
            "re_p": self.p.real, "im_p": self.p.imag,
            "re_action": self.action.real, "im_action": self.action.imag,
            "re_m_qq": self.m_qq.real, "im_m_qq": self.m_qq.imag,
            "re_m_qp": self.m_qp.real, "im_m_qp": self.m_qp.imag,
            "re_m_pq": self.m_pq.real, "im_m_pq": self.m_pq.imag,
            "re_m_pp": self.m_pp.real, "im_m_pp": self.m_pp.imag,
            "re_xi": self.xi.real, "im_xi": self.xi.imag,
            "re_xi_deriv": self.xi_deriv.real, "im_xi_deriv": self.xi_deriv.imag,
            "re_sigma": self.sigma.real, "im_sigma": self.sigma.imag,
            "re_sigma_a": self.sigma_analytic.real, "im_sigma_a": self.sigma_analytic.imag,
            "re_prefactor": self.prefactor.real, "im_prefactor": self.prefactor.imag,
            "mask": self.mask, "valid": self.valid.astype(int),
        }
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for i in range(self.n_records):
                w.writerow([_fmt(cols[c][i]) for c in CSV_COLUMNS])


def _fmt(v):
    if isinstance(v, (np.integer, int)):
        return str(int(v))
    return f"{float(v):.17g}"


def propagate_labels(state, spec, contour, nu, params, tol=1e-10, threads=1):
    """Propagate arbitrary label points and return per-point map fields.

    Shared by the rectangular grid builder and the strip refiner.  The
    returned dict extends the raw trajectory output with the projected
    map `xi`, its label derivative `xi_deriv`, the exponents `sigma` and
    `sigma_analytic`, and the initial conditions; `xi_arg` carries the
    argument of xi' continued in time along each trajectory.
    """
    nu = np.asarray(nu, dtype=complex)
    hb = params.hbar
    q0 = nu.copy()
    p0 = 1j * hb * (2.0 * state.gamma0 * nu - state.chi)
    s0 = initial_action(state, nu, hbar=hb)
    dp0 = 2.0j * hb * state.gamma0
    dw = (params.alpha, params.alpha * dp0,
          params.beta / hb, params.beta * dp0 / hb)

    if threads > 1 and nu.size > 4 * threads:
        chunks = np.array_split(np.arange(nu.size), threads)
        results = [None] * len(chunks)

        def work(j):
            c = chunks[j]
            results[j] = batch_propagate(spec, q0[c], p0[c], contour, tol=tol,
                                         s0=s0[c], deriv_weights=dw)

        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, range(len(chunks))))
        res = {k: np.concatenate([r[k] for r in results]) for k in results[0]}
    else:
        res = batch_propagate(spec, q0, p0, contour, tol=tol, s0=s0,
                              deriv_weights=dw)

    res["q0"] = q0
    res["p0"] = p0
    res["xi"] = params.alpha * res["q"] + params.beta * res["p"] / hb
    res["xi_deriv"] = (
        (params.alpha * res["m_qp"] + params.beta * res["m_pp"] / hb) * dp0
        + (params.alpha * res["m_qq"] + params.beta * res["m_pq"] / hb))
    with np.errstate(over="ignore", invalid="ignore"):
        res["sigma_analytic"] = (1j / hb * res["action"]
                                 + res["p"] ** 2 / (4.0 * params.gamma * hb ** 2))
        res["sigma"] = (res["sigma_analytic"]
                        - np.imag(res["xi"]) ** 2 / (4.0 * params.gamma))
    return res


def build_and_propagate(state, spec, contour, bounds, resolution, params,
                        tol=1e-10, threads=1):
    """Build the initial manifold, propagate it and fill all map fields.

    Per-trajectory failures (singularity hits, step failures, blow-ups)
    are recorded as flags with mask 0; the grid build itself never aborts.
    """
    nu = ManifoldGrid.label_grid(bounds, resolution)
    res = propagate_labels(state, spec, contour, nu, params, tol=tol,
                           threads=threads)
    valid = res["valid"]
    return ManifoldGrid(
        bounds=tuple(bounds), resolution=tuple(resolution), nu=nu,
        q0=res["q0"], p0=res["p0"], q=res["q"], p=res["p"],
        action=res["action"],
        m_qq=res["m_qq"], m_qp=res["m_qp"], m_pq=res["m_pq"], m_pp=res["m_pp"],
        xi=res["xi"], xi_deriv=res["xi_deriv"], sigma=res["sigma"],
        sigma_analytic=res["sigma_analytic"],
        prefactor=np.full(nu.size, np.nan, dtype=complex),
        mask=valid.astype(float), valid=valid, status=res["status"],
        params=params, state=state, spec=spec, contour=contour,
        energy_drift=res["energy_drift"], det_error=res["det_error"],
        xi_deriv_arg=res["xi_arg"],
    )
