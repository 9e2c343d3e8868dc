"""Stokes treatment of caustics in a complex trajectory manifold.

Caustics are the roots of d xi/d nu.  Near a first-order caustic the
projection map is a local double cover: two labels nu_1, nu_2 share one
xi.  The divergence of the subdominant contribution (Stokes phenomenon)
is controlled by the Stokes variable, the exponent difference

    F(nu_1) = sigma(nu_1) - sigma(nu_2(nu_1)),

which this module approximates from third-order Taylor data at the
caustic (a local expansion in the label and, more accurately, in the
square-root variable of the map itself), without searching for the
conjugate label.  A brute-force conjugate root search is kept as an
independent oracle.

The treatment splits the neighborhood into the six sectors bounded by
the anti-Stokes lines Re F = 0, removes the sector whose central Stokes
line (Im F = 0) carries exponential growth of Re sigma, and ramps the
two adjacent sectors smoothly with the error-function factor of Berry's
uniform asymptotics.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import polynomial as P
from scipy.special import erf

__all__ = [
    "GridTooCoarseError",
    "CausticRecord",
    "StokesField",
    "find_caustics",
    "local_expansion",
    "nu_tilde",
    "stokes_value",
    "label_stokes_value",
    "oracle_stokes_value",
    "conjugate_root_search",
    "berry_factor",
    "ownership_reach",
    "treatment_factors",
    "apply_stokes_treatment",
]

FIT_DEGREE = 4
MIN_FIT_POINTS = 15
R_FIT_FACTOR = 5.0       # fit radius in units of grid spacing
DEDUPE_FACTOR = 10.0     # root merge radius in units of grid spacing
SEED_FACTOR = 0.3        # |xi'| local minima below this * median seed Newton
CAUSTIC_TOL_FACTOR = 1e-8


class GridTooCoarseError(RuntimeError):
    """Raised when a local fit has too few grid points to be trusted."""


@dataclass
class CausticRecord:
    """First-order caustic with its local third-order expansion data.

    f3 and f4 are the cubic and quartic coefficients of the Stokes
    variable in the label displacement; f4 = -(3 rho/2) f3 follows from
    the conjugate-label symmetry and needs no fourth-order input.
    """

    nu_star: complex
    xi_star: complex = 0.0j
    xi2: complex = 0.0j          # second derivative of xi at nu_star
    xi3: complex = 0.0j          # third derivative of xi at nu_star
    sigma2: complex = 0.0j       # second derivative of sigma_A at nu_star
    sigma3: complex = 0.0j       # third derivative of sigma_A at nu_star
    rho: complex = 0.0j
    f3: complex = 0.0j
    f4: complex = 0.0j
    removed_sector: int = -1     # 0..5 once treatment ran; -1 undetermined
    dormant: bool = False
    r_fit: float = 0.0
    n_fit_points: int = 0
    fit_residual: float = 0.0

    @property
    def adjacent_sectors(self):
        if self.removed_sector < 0:
            return ()
        return ((self.removed_sector - 1) % 6, (self.removed_sector + 1) % 6)


@dataclass
class StokesField:
    """Per-record Stokes classification for every caustic of a grid.

    Arrays are shaped (n_caustics, n_records); `factor` is the
    multiplicative mask contribution of each caustic (0 in its removed
    sector, the Berry factor in the two adjacent sectors, 1 elsewhere)
    and `mask` is the combined per-record mask including validity.
    """

    caustics: list
    nu_tilde: np.ndarray
    f_value: np.ndarray
    sector: np.ndarray
    factor: np.ndarray
    mask: np.ndarray
    mode: str = "berry"
    overlap_count: int = 0

    def to_csv(self, path, grid):
        cols = ["re_nu", "im_nu"]
        for c in range(len(self.caustics)):
            cols += [f"sector_{c}", f"re_F_{c}", f"im_F_{c}", f"berry_{c}"]
        cols.append("mask")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for i in range(grid.n_records):
                row = [f"{grid.nu[i].real:.17g}", f"{grid.nu[i].imag:.17g}"]
                for c in range(len(self.caustics)):
                    row += [str(int(self.sector[c, i])),
                            f"{self.f_value[c, i].real:.17g}",
                            f"{self.f_value[c, i].imag:.17g}",
                            f"{self.factor[c, i]:.17g}"]
                row.append(f"{self.mask[i]:.17g}")
                w.writerow(row)


# -- local polynomial fits ---------------------------------------------------


def _fit_poly(nu_pts, values, center, degree, scale):
    """Least-squares complex polynomial in (nu - center), ascending coeffs.

    The fit runs in the scaled variable (nu - center)/scale for
    conditioning and is rescaled back, so coeffs[k] approximates the
    k-th Taylor coefficient (derivative / k!).
    """
    z = (np.asarray(nu_pts) - center) / scale
    v = z[:, None] ** np.arange(degree + 1)
    coeffs, *_ = np.linalg.lstsq(v, np.asarray(values), rcond=None)
    resid = float(np.max(np.abs(v @ coeffs - values))) if len(values) else 0.0
    return coeffs / scale ** np.arange(degree + 1), resid


def fit_grid_field(grid, values, center, radius, degree=FIT_DEGREE,
                   min_points=MIN_FIT_POINTS):
    """Fit `values` (per-record array) around `center` using records in radius."""
    idx = grid.points_within(center, radius)
    need = max(min_points, degree + 2)
    if idx.size < need:
        raise GridTooCoarseError(
            f"only {idx.size} valid records within {radius:.3g} of "
            f"{center:.6g}; need at least {need} — use a denser grid")
    return _fit_poly(grid.nu[idx], values[idx], center, degree, radius)


def interpolate_field(grid, values, z, degree=3, radius=None):
    """Local polynomial interpolation of a per-record field at point z."""
    if radius is None:
        radius = 3.0 * grid.dnu
    coeffs, _ = fit_grid_field(grid, values, z, radius, degree=degree,
                               min_points=degree + 3)
    return complex(coeffs[0])


# -- caustic location --------------------------------------------------------


def _seed_points(grid, seed_factor):
    """Labels of local |xi'| minima below seed_factor * median |xi'|."""
    n_re, n_im = grid.resolution
    mag = np.abs(grid.xi_deriv).reshape(n_re, n_im)
    mag = np.where(grid.valid.reshape(n_re, n_im), mag, np.inf)
    finite = mag[np.isfinite(mag)]
    if finite.size == 0:
        return [], 0.0
    med = float(np.median(finite))
    pad = np.pad(mag, 1, constant_values=np.inf)
    is_min = np.ones_like(mag, dtype=bool)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            is_min &= mag <= pad[1 + di:1 + di + n_re, 1 + dj:1 + dj + n_im]
    is_min &= mag < seed_factor * med
    seeds = grid.nu.reshape(n_re, n_im)[is_min]
    return list(seeds), med


def _newton_root(grid, values, z0, tol_abs, r_fit, max_iter=60):
    """Newton iteration for a root of the fitted local model of `values`."""
    z = complex(z0)
    re_min, re_max, im_min, im_max = grid.bounds
    span = max(re_max - re_min, im_max - im_min)
    for _ in range(max_iter):
        try:
            coeffs, _ = fit_grid_field(grid, values, z, r_fit, degree=3,
                                       min_points=8)
        except GridTooCoarseError:
            return None
        val, der = coeffs[0], coeffs[1]
        if abs(val) < tol_abs:
            return z
        if der == 0:
            return None
        step = -val / der
        if abs(step) > 2.0 * r_fit:
            step *= 2.0 * r_fit / abs(step)
        z += step
        # bail out when the iterate runs far away from the sampled manifold
        if (z.real < re_min - span or z.real > re_max + span
                or z.imag < im_min - span or z.imag > im_max + span):
            return None
    return None


def find_caustics(grid, tol=None, r_fit=None, seed_factor=SEED_FACTOR):
    """Locate first-order caustics (roots of xi') on the manifold grid.

    tol is the absolute convergence threshold on |xi'|; by default it is
    scale-free, CAUSTIC_TOL_FACTOR times the grid median of |xi'|.
    Converged roots are deduplicated within DEDUPE_FACTOR grid spacings
    and roots outside the grid bounds are discarded.
    """
    if r_fit is None:
        r_fit = R_FIT_FACTOR * grid.dnu
    seeds, med = _seed_points(grid, seed_factor)
    if not seeds:
        return []
    tol_abs = tol if tol is not None else CAUSTIC_TOL_FACTOR * med
    roots = []
    dropped = 0
    for z0 in seeds:
        z = _newton_root(grid, grid.xi_deriv, z0, tol_abs, r_fit)
        if z is None or not grid.in_bounds(z):
            dropped += 1
            continue
        roots.append(z)
    if dropped:
        warnings.warn(f"{dropped} caustic seed(s) did not converge to an "
                      "in-bounds root", stacklevel=2)
    merged = []
    for z in sorted(roots, key=lambda w: (w.real, w.imag)):
        if any(abs(z - m) < DEDUPE_FACTOR * grid.dnu for m in merged):
            continue
        merged.append(z)
    out = []
    for z in merged:
        try:
            out.append(local_expansion(z, grid, r_fit=r_fit))
        except ValueError as exc:
            warnings.warn(f"caustic at {z:.6g} skipped: {exc}", stacklevel=2)
    return out


def local_expansion(nu_star, grid, r_fit=None):
    """Complete a caustic record with third-order data fitted near nu_star.

    Fits degree-4 polynomials to xi(nu) and sigma_A(nu) over all valid
    records within r_fit and extracts the second and third derivatives.
    Only first-order caustics are supported: a vanishing second
    derivative of xi raises ValueError.
    """
    if isinstance(nu_star, CausticRecord):
        nu_star = nu_star.nu_star
    if r_fit is None:
        r_fit = R_FIT_FACTOR * grid.dnu
    idx = grid.points_within(nu_star, r_fit)
    xi_c, res_xi = fit_grid_field(grid, grid.xi, nu_star, r_fit)
    sg_c, res_sg = fit_grid_field(grid, grid.sigma_analytic, nu_star, r_fit)
    xi2, xi3 = 2.0 * xi_c[2], 6.0 * xi_c[3]
    s2, s3 = 2.0 * sg_c[2], 6.0 * sg_c[3]
    scale = max(abs(xi3) * r_fit, abs(xi_c[1]) / r_fit, 1.0e-300)
    if abs(xi2) < 1e-10 * scale or xi2 == 0:
        raise ValueError("xi'' vanishes at the root: higher-order caustic "
                         "(out of scope)")
    rho = -xi3 / (3.0 * xi2)
    f3 = s3 / 3.0 + s2 * rho
    return CausticRecord(
        nu_star=complex(nu_star), xi_star=complex(xi_c[0]),
        xi2=complex(xi2), xi3=complex(xi3),
        sigma2=complex(s2), sigma3=complex(s3),
        rho=complex(rho), f3=complex(f3), f4=complex(-1.5 * rho * f3),
        r_fit=float(r_fit), n_fit_points=int(idx.size),
        fit_residual=float(max(res_xi, res_sg)),
    )


# -- the PCSE ---------------------------------------------------------------


def nu_tilde(nu, caustic, xi_value):
    """Square-root label proxy built from the measured map value.

    nu_tilde^2 equals (xi - xi*) divided by the quadratic Taylor
    coefficient xi2/2, so nu_tilde ~ (nu - nu*) near the caustic; the
    branch sign is chosen per point to minimize |nu_tilde - (nu - nu*)|.
    """
    nu = np.asarray(nu, dtype=complex)
    xi_value = np.asarray(xi_value, dtype=complex)
    d = nu - caustic.nu_star
    s = np.sqrt((xi_value - caustic.xi_star) / (caustic.xi2 / 2.0))
    flip = np.abs(-s - d) < np.abs(s - d)
    out = np.where(flip, -s, s)
    return out if out.ndim else complex(out)


def stokes_value(nu, caustic, grid=None, xi_value=None, include_quartic=True):
    """PCSE Stokes variable at nu, expanded in the square-root proxy.

    xi at nu comes from xi_value when supplied, otherwise from local
    interpolation of the grid records.  include_quartic adds the
    f4 * nu_tilde^4 term on top of the cubic one.
    """
    if xi_value is None:
        if grid is None:
            raise ValueError("stokes_value needs xi_value or a grid")
        nu_arr = np.atleast_1d(np.asarray(nu, dtype=complex))
        xi_value = np.array([interpolate_field(grid, grid.xi, z)
                             for z in nu_arr])
        if np.ndim(nu) == 0:
            xi_value = xi_value[0]
    nt = nu_tilde(nu, caustic, xi_value)
    val = caustic.f3 * nt ** 3
    if include_quartic:
        val = val + caustic.f4 * nt ** 4
    return val


def label_stokes_value(nu, caustic, include_quartic=True):
    """Label-space expansion f3 (nu-nu*)^3 [+ f4 (nu-nu*)^4] (diagnostic)."""
    d = np.asarray(nu, dtype=complex) - caustic.nu_star
    val = caustic.f3 * d ** 3
    if include_quartic:
        val = val + caustic.f4 * d ** 4
    return val if np.ndim(nu) else complex(val)


# -- brute-force oracle ------------------------------------------------------


def conjugate_root_search(nu1, grid, caustic, tol=None, max_iter=50):
    """Find the conjugate label nu2 != nu1 with xi(nu2) = xi(nu1).

    Newton iteration on locally fitted xi, seeded at the reflection
    2 nu* - nu1.  This is the brute-force double-cover inversion used to
    validate the PCSE; it shares no expansion coefficients with it.
    """
    nu1 = complex(nu1)
    d1 = abs(nu1 - caustic.nu_star)
    if d1 < 1e-6 * (1.0 + abs(caustic.nu_star)):
        raise ValueError("nu1 coincides with the caustic: conjugate "
                         "degenerate")
    xi_target = interpolate_field(grid, grid.xi, nu1)
    if tol is None:
        tol = 1e-10 * (1.0 + abs(xi_target))
    z = 2.0 * caustic.nu_star - nu1
    for _ in range(max_iter):
        radius = max(3.0 * grid.dnu, 0.0)
        coeffs, _ = fit_grid_field(grid, grid.xi, z, radius, degree=3,
                                   min_points=8)
        val = coeffs[0] - xi_target
        if abs(val) < tol:
            if abs(z - nu1) < 1e-3 * d1:
                raise ValueError("conjugate root search converged back to "
                                 "nu1")
            return z
        der = coeffs[1]
        if der == 0:
            break
        step = -val / der
        if abs(step) > 5.0 * grid.dnu:
            step *= 5.0 * grid.dnu / abs(step)
        z += step
    raise RuntimeError(f"conjugate root search did not converge from "
                       f"nu1={nu1:.6g}")


def oracle_stokes_value(nu1, grid, caustic):
    """Stokes variable sigma_A(nu1) - sigma_A(nu2) via conjugate root search."""
    nu2 = conjugate_root_search(nu1, grid, caustic)
    sa1 = interpolate_field(grid, grid.sigma_analytic, nu1)
    sa2 = interpolate_field(grid, grid.sigma_analytic, nu2)
    return sa1 - sa2


# -- Berry smoothing ---------------------------------------------------------


def berry_factor(f):
    """Smoothing multiplier of the subdominant contribution, in (0, 1).

    Equals the cumulative Gaussian of Im F / sqrt(2 Re F); 1/2 exactly on
    the Stokes line Im F = 0.  Only meaningful where the kept conjugate
    dominates, so Re F must be positive.
    """
    f = complex(f)
    if f.real <= 0:
        raise ValueError("berry_factor requires Re F > 0 (adjacent sectors "
                         "only)")
    return float(0.5 * (1.0 + erf(f.imag / np.sqrt(2.0 * f.real))))


def _berry_array(f):
    """Vectorized berry_factor with boundary limits instead of errors."""
    f = np.asarray(f, dtype=complex)
    re = np.maximum(f.real, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        arg = np.where(re > 0, f.imag / np.sqrt(2.0 * re),
                       np.where(f.imag > 0, np.inf, -np.inf))
    return 0.5 * (1.0 + erf(arg))


# -- sector classification and treatment ------------------------------------


def _sector_index(nt, f3):
    """Six-fold sector id from the cubic winding around the caustic.

    F ~ f3 nu_tilde^3 to leading order, so arg F winds three times per
    nu_tilde revolution; the six anti-Stokes sectors 0..5 are the
    angular wedges where cos(3 arg nt + arg f3) keeps its sign, with
    even ids on the Re F > 0 side.  The quartic correction is left out
    here: it would break the global six-sector topology far from the
    caustic while changing nothing at the boundaries, which are pinned
    by the cubic term.
    """
    guide = 3.0 * np.angle(nt) + np.angle(f3)
    return np.mod(np.floor((guide + 0.5 * np.pi) / np.pi).astype(int), 6)


def _bisector_directions(caustic):
    """Map sector id -> label-space direction of its central Stokes line."""
    arg3 = np.angle(caustic.f3)
    out = {}
    for m in range(-4, 5):
        theta = (m * np.pi - arg3) / 3.0
        if -np.pi < theta <= np.pi:
            out[m % 6] = theta
    return out


# Median Re sigma must fall this far below its running peak before the
# climb along a sector is called off as somebody else's mountain.
VALLEY_DROP = 10.0

# A caustic's factors act unconditionally only on records within this
# multiple of the distance to its nearest fellow caustic.  The local
# expansion describes one coalescing pair of contributions; past the
# midline to the next caustic the folding is someone else's, and at
# long times, when caustics tile the label plane densely, an uncapped
# wedge would blindly cut through sheets unrelated to its own pair.  A
# lone caustic owns the whole plane.
WEDGE_REACH = 0.75

# ... and never beyond this multiple of |xi2/xi3|, the radius where the
# cubic term overtakes the quadratic one and the sector geometry the
# factors are built on stops describing the actual map.
CUBIC_TRUST = 1.0

# Beyond the ownership radius a factor is applied only where Re sigma
# exceeds this level.  Bounded contributions sit at or below zero (the
# amplitude of a normalisable state cannot grow), so anything above it
# belongs to a divergent ridge and must stay removable by whichever
# wedge covers it, however remote its owner.
MOUNTAIN_SIGMA = 0.0


def _detect_removed_sector(grid, caustic, nt, sec, radii_factors=(0.5, 1.0, 1.5),
                           reach=np.inf):
    """Pick the sector whose own Re sigma ridge grows past zero.

    Walks outward through each sector in equal-count shells of
    |nu_tilde|, following the shell medians of the full (non-analytic)
    exponent: medians are immune to the sub-grid sector aliasing that
    breaks pointwise sampling near strong caustics, and the walk stops
    at the first deep valley so that a divergent region merely visible
    across a dip -- another caustic's responsibility -- is not claimed.
    The walk also never leaves the caustic's own territory (`reach`):
    a divergence that only shows up beyond the next caustic over is not
    this one's.  A sector qualifies when the ridge climbs above
    Re sigma = 0 before stopping; the highest ridge wins.  All six
    sectors are candidates: which side of the cubic Stokes variable
    diverges depends on the branch the map hands each caustic, so no
    parity is assumed.  Returns -1 when no sector qualifies: a dormant
    caustic, whose divergent region lies outside the sampled manifold.
    """
    re_sig = np.where(grid.valid, grid.sigma.real, np.nan)
    inner = radii_factors[0] * caustic.r_fit
    outer = max(2.0 * caustic.r_fit, reach)
    best, best_peak = -1, -np.inf
    for k in range(6):
        pick = (sec == k) & np.isfinite(nt) & (np.abs(nt) >= inner) \
            & (np.abs(nt) <= outer) & np.isfinite(re_sig)
        n_k = int(np.count_nonzero(pick))
        if n_k < 8:
            continue
        radii = np.abs(nt[pick])
        values = re_sig[pick][np.argsort(radii, kind="stable")]
        m = max(6, n_k // 24)
        medians = [float(np.median(values[s:s + m]))
                   for s in range(0, n_k - m + 1, m)]
        peak = medians[0]
        for v in medians[1:]:
            if v > peak:
                peak = v
            elif v < peak - VALLEY_DROP:
                break
        if peak <= 0:
            continue
        if peak > best_peak:
            best, best_peak = k, peak
    return best


def ownership_reach(caustics):
    """Ownership radius of each caustic in the label plane.

    CUBIC_TRUST times the cubic/quadratic crossover radius |xi2/xi3|,
    capped at WEDGE_REACH times the distance to the nearest fellow
    caustic.  A lone caustic with no cubic term owns the whole plane.
    """
    n_c = len(caustics)
    reach = CUBIC_TRUST * np.array(
        [abs(ca.xi2 / ca.xi3) if ca.xi3 else np.inf for ca in caustics])
    if n_c > 1:
        nus = np.array([ca.nu_star for ca in caustics])
        sep = np.abs(nus[:, None] - nus[None, :])
        np.fill_diagonal(sep, np.inf)
        reach = np.minimum(reach, WEDGE_REACH * sep.min(axis=1))
    return reach


def _caustic_factor(nu, xi_value, ca, mode):
    """Factor array of one caustic from its stored removed sector.

    0 in the removed sector; in mode "berry" the error-function ramp in
    the two adjacent sectors, oriented so the factor vanishes at the
    boundary shared with the removed sector and reaches 1 at the far
    one; 1 elsewhere.  Ownership gating is the caller's business.
    """
    nt = nu_tilde(nu, ca, xi_value)
    sec = _sector_index(nt, ca.f3)
    removed = ca.removed_sector
    fac = np.ones(np.shape(nu))
    fac[sec == removed] = 0.0
    if mode == "berry":
        # Orient the cubic Stokes variable so its real part is positive
        # inside the two adjacent sectors; the smoothing then ramps
        # 0 -> 1 across each neighbor away from the removed sector, with
        # the sense of its imaginary part flipping between the two sides.
        f_cubic = ca.f3 * nt ** 3
        w = f_cubic if removed % 2 else -f_cubic
        idx = sec == (removed + 1) % 6
        fac[idx] = _berry_array(w[idx])
        idx = sec == (removed - 1) % 6
        fac[idx] = 1.0 - _berry_array(w[idx])
    return fac


def treatment_factors(nu, xi_value, sigma_real, caustics, mode="berry"):
    """Combined treatment factor at arbitrary points from stored records.

    Replays the removed-sector choices a previous apply_stokes_treatment
    left on the caustic records -- no detection runs here -- so off-grid
    points (interpolants, refinement samples) get the same factors as
    the grid records around them, including the ownership gating and the
    unclaimed-ridge cut.
    """
    nu = np.asarray(nu, dtype=complex)
    sigma_real = np.asarray(sigma_real)
    fac = np.ones(nu.shape)
    n_c = len(caustics)
    if not n_c:
        return fac
    reach = ownership_reach(caustics)
    nus = np.array([ca.nu_star for ca in caustics])
    dist = np.abs(nu[None, :] - nus[:, None])
    hot = sigma_real > MOUNTAIN_SIGMA
    active = np.array([not ca.dormant and ca.removed_sector >= 0
                       for ca in caustics], dtype=bool)
    for c, ca in enumerate(caustics):
        if not active[c]:
            continue
        f = _caustic_factor(nu, xi_value, ca, mode)
        f[(dist[c] > reach[c]) & ~hot] = 1.0
        fac = fac * f
    covered = (dist[active] <= reach[active, None]).any(axis=0)
    fac[hot & ~covered] = 0.0
    return fac


def apply_stokes_treatment(grid, caustics, mode="berry",
                           radii_factors=(0.5, 1.0, 1.5)):
    """Annotate the grid mask with the per-caustic Stokes treatment.

    For each caustic the records are classified into the six anti-Stokes
    sectors of its local expansion; the divergent sector's records get
    factor 0 and (mode "berry") the two adjacent sectors get the error-
    function smoothing of the cubic Stokes variable, which vanishes at
    the boundary shared with the removed sector and reaches 1 at the far
    one.  mode "hard" removes the divergent sector with a 0/1 step and
    leaves the neighbors untouched.

    Factors multiply across caustics and the grid mask is reset to the
    validity baseline before applying them.  Records within WEDGE_REACH
    times a caustic's nearest-neighbor distance are always subject to
    its factor; farther out the factor is applied only where the
    amplitude exponent Re sigma is positive, i.e. on the divergent
    ridges a sector wedge is meant to cut.  Without that gate the far
    reaches of every wedge sweep across the bounded records that carry
    the reconstruction and extinguish them; with a pure distance cap
    the ridges of remote caustics survive inside the window.
    """
    if mode not in ("berry", "hard"):
        raise ValueError(f"unknown treatment mode {mode!r}")
    n = grid.n_records
    n_c = len(caustics)
    nt_all = np.zeros((n_c, n), dtype=complex)
    f_all = np.zeros((n_c, n), dtype=complex)
    sec_all = np.zeros((n_c, n), dtype=int)
    fac_all = np.ones((n_c, n))
    reach = np.full(n_c, np.inf)
    if n_c:
        nus = np.array([ca.nu_star for ca in caustics])
        dist = np.abs(grid.nu[None, :] - nus[:, None])
        reach = ownership_reach(caustics)
    for c, ca in enumerate(caustics):
        nt = nu_tilde(grid.nu, ca, grid.xi)
        nt_all[c] = nt
        f_all[c] = ca.f3 * nt ** 3 + ca.f4 * nt ** 4
        scale = abs(ca.sigma2) * ca.r_fit ** 2 + abs(ca.sigma3) * ca.r_fit ** 3
        if abs(ca.f3) * ca.r_fit ** 3 < 1e-9 * (1.0 + scale):
            ca.dormant = True
            continue
        sec = _sector_index(nt, ca.f3)
        sec_all[c] = sec
        removed = _detect_removed_sector(grid, ca, nt, sec, radii_factors,
                                         reach=reach[c])
        if removed < 0:
            ca.dormant = True
            continue
        ca.removed_sector = removed
        ca.dormant = False
        fac = _caustic_factor(grid.nu, grid.xi, ca, mode)
        spare = (dist[c] > reach[c]) & (grid.sigma.real <= MOUNTAIN_SIGMA)
        fac[spare] = 1.0
        fac_all[c] = fac
    mask = grid.valid.astype(float) * np.prod(fac_all, axis=0)
    active = np.array([not ca.dormant for ca in caustics], dtype=bool)
    if n_c:
        # Divergent-branch material not owned by any active caustic's
        # wedge is removed outright: no normalizable contribution can
        # climb past the sigma gate, so an unclaimed record up there is
        # a ridge whose caustic was missed, truncated, or out of reach.
        covered = (dist[active] <= reach[active, None]).any(axis=0)
        hot = grid.sigma.real > MOUNTAIN_SIGMA
        mask[hot & ~covered] = 0.0
    overlap = int(np.count_nonzero(np.sum(fac_all < 1.0 - 1e-12, axis=0) >= 2))
    grid.mask = mask
    return StokesField(caustics=list(caustics), nu_tilde=nt_all, f_value=f_all,
                       sector=sec_all, factor=fac_all, mask=mask, mode=mode,
                       overlap_count=overlap)
