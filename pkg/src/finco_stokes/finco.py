"""Wavefunction reconstruction from the masked trajectory manifold.

The time-evolved wavepacket is a Gaussian-basis integral over the label
plane,

    psi_t(x) = (-1/(4 pi gamma)) Int d^2nu |xi'(nu)|^2
               g_gamma(x, xi(nu)) phi(nu) e^{sigma(nu)} ,

evaluated as a Riemann sum with the grid's area weight times each
record's Stokes mask.  The prefactor phi(nu) = (8 gamma pi)^(1/4)
[xi'(nu)]^(-1/2) carries a square-root branch that must be continued
continuously across the grid; branch cuts may terminate only at
caustics, where xi' = 0.
"""

from __future__ import annotations

import csv
import warnings
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "WavefunctionGrid",
    "BranchInconsistencyError",
    "basis_gaussian",
    "prefactor_branch",
    "reconstruct",
]

# Cap on Re sigma when exponentiating untreated (divergent) manifolds so
# diagnostics stay finite; treated runs never reach it.
SIGMA_REAL_CAP = 200.0
CHUNK = 2048


class BranchInconsistencyError(RuntimeError):
    """Square-root branch not single-valued around a caustic-free loop."""


@dataclass
class WavefunctionGrid:
    """Complex amplitudes on a uniform real-space grid."""

    x: np.ndarray
    psi: np.ndarray
    dx: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.psi = np.asarray(self.psi, dtype=complex)
        if self.x.shape != self.psi.shape:
            raise ValueError("x and psi must have matching shapes")

    def norm_squared(self):
        return float(np.trapezoid(np.abs(self.psi) ** 2, dx=self.dx))

    def norm(self):
        return float(np.sqrt(self.norm_squared()))

    def check_boundary(self, rel_tol=1e-8):
        peak = float(np.max(np.abs(self.psi))) if self.psi.size else 0.0
        if peak == 0.0:
            return
        edge = max(abs(self.psi[0]), abs(self.psi[-1]))
        if edge > rel_tol * peak:
            warnings.warn(
                f"boundary amplitude {edge:.3g} exceeds {rel_tol:g} of peak "
                f"{peak:.3g}; widen the x window", stacklevel=2)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "re_psi", "im_psi", "abs2_psi"])
            for xi, pi in zip(self.x, self.psi):
                w.writerow([f"{xi:.17g}", f"{pi.real:.17g}",
                            f"{pi.imag:.17g}", f"{abs(pi) ** 2:.17g}"])

    @classmethod
    def from_csv(cls, path):
        data = np.loadtxt(path, delimiter=",", skiprows=1)
        data = np.atleast_2d(data)
        x = data[:, 0]
        if x.size < 2:
            raise ValueError("wavefunction file needs at least two samples")
        return cls(x=x, psi=data[:, 1] + 1j * data[:, 2],
                   dx=float(x[1] - x[0]))


def basis_gaussian(x, xi, gamma):
    """Gaussian basis state of width gamma centered by the complex label xi.

    For real xi this is a normalized real Gaussian centered at
    xi/(2 gamma); complex Im xi damps the amplitude through the
    normalization term.
    """
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=complex)
    val = ((2.0 * gamma / np.pi) ** 0.25
           * np.exp(-gamma * (x - np.conj(xi) / (2.0 * gamma)) ** 2
                    - np.imag(xi) ** 2 / (4.0 * gamma)))
    return val if val.ndim else complex(val)


def _edge_keeps_branch(w_a, w_b):
    """True when the principal sqrt continues directly from w_a to w_b."""
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.sqrt(w_b / w_a)
        t = np.sqrt(w_b) / np.sqrt(w_a)
        return (t / r).real > 0.0


def prefactor_branch(grid, caustics=(), sigma_window=46.0):
    """Fill grid.prefactor with a continuously branched (xi')^(-1/2).

    Propagated grids carry the argument of xi' continued in time along
    each trajectory (from t = 0, where the map is the same positive
    constant for every label); the square root then follows per record
    with no reference to neighbors, so the branch stays exact no matter
    how fast the final-time manifold winds across the label grid.

    Grids without that annotation (synthetic manifolds prescribed at a
    single instant) fall back to continuation over the 4-neighbor grid
    graph, seeded with the principal branch at the record nearest the
    state's center label (grid center if no state).  Transport prefers
    edges inside the significant region -- records whose peak
    log-contribution Re sigma + 1.5 ln|xi'| lies within sigma_window of
    the maximum -- so a mistracked branch in exponentially suppressed
    territory cannot leak into records that matter.  Within the
    significant region every plaquette demanding an odd number of sign
    flips must enclose a caustic; otherwise the grid is too coarse there
    and an error is raised.  Suppressed regions may wind faster than the
    grid resolves without complaint.  Disconnected valid regions are
    seeded independently with a warning.
    """
    arg_cont = getattr(grid, "xi_deriv_arg", None)
    if arg_cont is not None:
        w_flat = grid.xi_deriv
        ok = (grid.valid & np.isfinite(w_flat) & (w_flat != 0)
              & np.isfinite(arg_cont))
        with np.errstate(divide="ignore", invalid="ignore"):
            phi = ((8.0 * grid.params.gamma * np.pi) ** 0.25
                   * np.exp(-0.5 * np.log(np.abs(w_flat)) - 0.5j * arg_cont))
        grid.prefactor = np.where(ok, phi, np.nan)
        return grid

    n_re, n_im = grid.resolution
    w = grid.xi_deriv.reshape(n_re, n_im)
    valid = grid.valid.reshape(n_re, n_im) & (w != 0) & np.isfinite(w)

    with np.errstate(divide="ignore", invalid="ignore"):
        score = grid.sigma.real.reshape(n_re, n_im) + 1.5 * np.log(np.abs(w))
    score = np.where(valid & np.isfinite(score), score, -np.inf)
    if np.any(np.isfinite(score)):
        active = score >= score.max() - sigma_window
    else:
        active = valid.copy()

    keep_h = _edge_keeps_branch(w[:-1, :], w[1:, :])
    keep_v = _edge_keeps_branch(w[:, :-1], w[:, 1:])

    sign = np.zeros((n_re, n_im), dtype=np.int8)
    if grid.state is not None:
        seed_label = grid.state.center
    else:
        seed_label = 0.5 * (grid.bounds[0] + grid.bounds[1]) \
            + 0.5j * (grid.bounds[2] + grid.bounds[3])
    # active seeds first, each ordered by distance to the center label
    order = np.lexsort((np.abs(grid.nu - seed_label), ~active.ravel()))
    components = 0
    for flat in order:
        i, j = divmod(int(flat), n_im)
        if not valid[i, j] or sign[i, j] != 0:
            continue
        components += 1
        sign[i, j] = 1
        queue = deque([(i, j)])
        while queue:
            a, b = queue.popleft()
            for da, db in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                na, nb = a + da, b + db
                if not (0 <= na < n_re and 0 <= nb < n_im):
                    continue
                if not valid[na, nb] or sign[na, nb] != 0:
                    continue
                if da:
                    keep = keep_h[min(a, na), b]
                else:
                    keep = keep_v[a, min(b, nb)]
                sign[na, nb] = sign[a, b] if keep else -sign[a, b]
                # an active-to-active step is a trusted continuation;
                # expand it before any step through suppressed records
                if active[a, b] and active[na, nb]:
                    queue.appendleft((na, nb))
                else:
                    queue.append((na, nb))
    if components > 1:
        warnings.warn(f"{components} disconnected valid regions; prefactor "
                      "branch seeded independently in each", stacklevel=2)

    _check_plaquettes(grid, keep_h, keep_v, valid & active, caustics)

    with np.errstate(divide="ignore", invalid="ignore"):
        phi = (8.0 * grid.params.gamma * np.pi) ** 0.25 \
            * sign.astype(complex) / np.sqrt(w)
    phi[~valid] = np.nan
    grid.prefactor = phi.ravel()
    return grid


def _check_plaquettes(grid, keep_h, keep_v, enforce, caustics):
    flip_h = ~keep_h
    flip_v = ~keep_v
    odd = (flip_h[:, :-1] ^ flip_v[1:, :] ^ flip_h[:, 1:] ^ flip_v[:-1, :])
    corners = (enforce[:-1, :-1] & enforce[1:, :-1]
               & enforce[1:, 1:] & enforce[:-1, 1:])
    odd &= corners
    if not np.any(odd):
        return
    # an odd loop is legal only around a zero of xi'
    n_re, n_im = enforce.shape
    re_ax = np.linspace(grid.bounds[0], grid.bounds[1], n_re)
    im_ax = np.linspace(grid.bounds[2], grid.bounds[3], n_im)
    pad = grid.dnu
    attributed = np.zeros_like(odd)
    for c in caustics:
        z = c.nu_star if hasattr(c, "nu_star") else complex(c)
        in_re = (re_ax[:-1] - pad <= z.real) & (z.real <= re_ax[1:] + pad)
        in_im = (im_ax[:-1] - pad <= z.imag) & (z.imag <= im_ax[1:] + pad)
        attributed |= in_re[:, None] & in_im[None, :]
    bad = odd & ~attributed
    n_bad = int(np.count_nonzero(bad))
    if n_bad:
        i, j = np.argwhere(bad)[0]
        raise BranchInconsistencyError(
            f"{n_bad} plaquette(s) with inconsistent sqrt branch not "
            f"attributable to a caustic (first near "
            f"({re_ax[i]}, {im_ax[j]})); the grid is too coarse")


def reconstruct(grid, x_samples, params=None, threads=1,
                sigma_cap=SIGMA_REAL_CAP, nu_window=None):
    """Riemann-sum reconstruction of psi on x_samples from the manifold.

    Invalid records contribute zero; each contribution is weighted by
    the record's mask and the area element |xi'|^2 d(Re nu) d(Im nu).
    nu_window (re_min, re_max, im_min, im_max) restricts the label-plane
    integration domain: a grid propagated on padded bounds -- so that
    every divergent region reaching the domain has its caustic sampled
    and treated -- is integrated only over the inner window.
    Returns a WavefunctionGrid whose meta reports the masked-out weight
    and the applied Re sigma cap count.
    """
    if params is None:
        params = grid.params
    if grid.prefactor is None or np.all(np.isnan(grid.prefactor)):
        raise ValueError("prefactor branch must be filled before "
                         "reconstruction")
    x = np.asarray(x_samples, dtype=float)
    if x.size < 2:
        raise ValueError("need at least two x samples")
    dx = float(x[1] - x[0])
    gamma = params.gamma

    keep = grid.valid & np.isfinite(grid.prefactor) & (np.abs(grid.xi_deriv) > 0)
    if nu_window is not None:
        re0, re1, im0, im1 = map(float, nu_window)
        keep = keep & (grid.nu.real >= re0) & (grid.nu.real <= re1) \
            & (grid.nu.imag >= im0) & (grid.nu.imag <= im1)
    sig = np.where(keep, grid.sigma, -np.inf)
    capped = int(np.count_nonzero(sig.real > sigma_cap))
    sig = np.where(sig.real > sigma_cap, sigma_cap + 1j * sig.imag, sig)
    weight = np.where(
        keep,
        grid.area_weight * grid.mask * np.abs(grid.xi_deriv) ** 2
        * grid.prefactor,
        0.0)
    removed = np.where(
        keep,
        grid.area_weight * (1.0 - grid.mask) * np.abs(grid.xi_deriv) ** 2
        * np.abs(grid.prefactor),
        0.0)
    with np.errstate(over="ignore", under="ignore"):
        masked_mass = float(np.sum(removed * np.exp(np.minimum(
            grid.sigma.real, sigma_cap))))

    chunks = [slice(s, min(s + CHUNK, grid.n_records))
              for s in range(0, grid.n_records, CHUNK)]

    def partial(sl):
        wgt = weight[sl]
        live = np.abs(wgt) > 0
        if not np.any(live):
            return np.zeros(x.size, dtype=complex)
        xi = grid.xi[sl][live]
        ex = (-gamma * (x[None, :] - np.conj(xi)[:, None] / (2.0 * gamma)) ** 2
              - (np.imag(xi) ** 2 / (4.0 * gamma))[:, None]
              + sig[sl][live][:, None])
        with np.errstate(over="ignore", under="ignore"):
            block = wgt[live][:, None] * np.exp(ex)
        return block.sum(axis=0)

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(partial, chunks))
    else:
        parts = [partial(sl) for sl in chunks]
    acc = np.zeros(x.size, dtype=complex)
    for p in parts:
        acc += p
    psi = -(2.0 * gamma / np.pi) ** 0.25 / (4.0 * np.pi * gamma) * acc

    out = WavefunctionGrid(x=x, psi=psi, dx=dx, meta={
        "masked_mass": masked_mass,
        "sigma_capped_records": capped,
        "kept_records": int(np.count_nonzero(np.abs(weight) > 0)),
    })
    out.check_boundary()
    return out
