"""Strip quadrature for manifold regions the label grid cannot resolve.

At long propagation times the map nu -> xi stretches the label plane
exponentially.  Over most records the reconstruction integrand then
advances its phase by several turns per grid cell, and a Riemann sum
over such records is aliasing noise.  Their actual contribution is
concentrated in narrow ribbons around the ridges of Re sigma -- the
curves along which the integrand's magnitude is transversally maximal.
Transverse to a ridge the exponent is quadratic with a negative real
second derivative, so the transverse integral has a closed form and
only the quadrature along the ridge needs explicit samples.

march_strips walks those ridges with steps of fixed length in xi,
propagating fresh trajectories as it goes and holding each step on the
ridge with Newton corrections fed by the measured gradient
d sigma_A/d nu = (i/2 gamma) p xi'.  strip_wavefunction turns the
walked points into amplitudes by integrating the full second-order
transverse expansion of the exponent; anchoring on the ridge keeps the
real part of the Gaussian curvature positive, so the closed form is
bounded by the integrand along the real transverse line and cannot
blow past it.  reconstruct_refined splits the records by the
resolution angle (per-cell phase advance): below the split the grid's
own Riemann sum integrates them, above it the strips do, so nothing is
counted twice.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field

import numpy as np

_DEBUG = bool(os.environ.get("FINCO_STRIP_DEBUG"))

from .finco import WavefunctionGrid, reconstruct
from .manifold import propagate_labels
from .stokes import treatment_factors

__all__ = [
    "StripSet",
    "resolution_angle",
    "march_strips",
    "strip_wavefunction",
    "reconstruct_refined",
]

# Per-cell phase advance above which a record is handed to the strips.
THETA_SPLIT = np.pi / 2
# ln-scale amplitude (Re sigma - ln|xi'|/2) below which strip samples
# stop mattering; seeds below it are skipped and runs linger only
# PATIENCE steps under it.
SCORE_FLOOR = -16.0
XI_STEP = 0.25          # walk step along the ridge, in xi units
RIDGE_TOL = 0.1         # Newton |dt| below this fraction of a step is on-ridge
RIDGE_LOST = 0.5        # Newton |dt| above this fraction of a step has lost it
CURV_FLOOR = 0.02       # min transverse curvature, units of |xi'|^2/(2 gamma)
MOUNTAIN_STOP = 0.5     # Re sigma above this cannot belong to a kept ridge
PATIENCE = 25
MAX_ROUNDS = 3000
MAX_RUNS = 2000
MERGE_STEP = 0.5        # merge distance along a shared ridge, in xi steps
SEED_SEP = 4.0          # min seed spacing within a wave, in grid cells
COVER_RADIUS = 1.0      # candidates this close (cells) to a walk are done
RECENT_EXCLUDE = 4      # own trailing points exempt from the merge test
A_FLOOR = 1e-4          # min Re of the transverse curvature, rel. |d1|^2/4g
EXPO_CAP = 12.0         # cap on the real exponent of a strip kernel


@dataclass
class StripSet:
    """Ridge-walk samples with everything the closed form consumes.

    One row per accepted walk point; `weight` is the trapezoid arc
    element |d xi| along the point's own ridge, `tangent` the unit walk
    direction in the label plane, and `run` identifies the ridge
    segment.  Empty sets (fully resolved manifolds) are legal.
    """

    nu: np.ndarray
    xi: np.ndarray
    xi_deriv: np.ndarray
    xi_second: np.ndarray   # d2 xi / d nu2, differenced along the walk
    sigma_analytic: np.ndarray
    p: np.ndarray
    p_nu: np.ndarray        # dp/dnu from the stability blocks
    phi: np.ndarray         # branched prefactor (8 gamma pi)^(1/4) (xi')^(-1/2)
    factor: np.ndarray      # treatment factor, [0, 1]
    weight: np.ndarray
    tangent: np.ndarray     # unit complex walk direction s; transverse is i s
    run: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n_points(self):
        return self.nu.size

    @classmethod
    def empty(cls, meta=None):
        z = np.zeros(0, dtype=complex)
        r = np.zeros(0)
        return cls(nu=z, xi=z.copy(), xi_deriv=z.copy(), xi_second=z.copy(),
                   sigma_analytic=z.copy(), p=z.copy(), p_nu=z.copy(),
                   phi=z.copy(), factor=r, weight=r.copy(),
                   tangent=z.copy(), run=np.zeros(0, dtype=int),
                   meta=meta or {})


def resolution_angle(grid, p=None, xi_deriv=None):
    """Largest per-cell phase advance of the reconstruction integrand.

    The analytic exponent changes by d sigma_A = (i/2 gamma) p xi' d nu,
    so its oscillation across one cell is |Im a| d_re along the real
    label direction and |Re a| d_im along the imaginary one, with
    a = (i/2 gamma) p xi'.  Records above ~pi/2 alias.
    """
    if p is None:
        p = grid.p
    if xi_deriv is None:
        xi_deriv = grid.xi_deriv
    a = 0.5j / grid.params.gamma * p * xi_deriv
    return np.maximum(np.abs(a.imag) * grid.d_re, np.abs(a.real) * grid.d_im)


def _score(sigma_real, xi_deriv):
    with np.errstate(divide="ignore", invalid="ignore"):
        return sigma_real - 0.5 * np.log(np.abs(xi_deriv))


def _ridge_gradient(ev, gamma):
    """Complex W with dRe(sigma)/d(nu direction e) = Re(W e).

    Combines the analytic slope d sigma_A/d nu = (i/2g) p xi' with the
    transverse part of -(Im xi)^2/4g; zero only at stationary points.
    """
    return 0.5j / gamma * (ev["p"] + ev["xi"].imag) * ev["xi_deriv"]


def _ridge_frame(ev, gamma):
    """Local quadratic model of Re sigma in xi coordinates.

    Every evaluated point carries the full curvature tensor for free:
    the analytic part has d2(sigma)/dxi2 = (i/2g) dp/dxi and the
    smoothing term -(Im xi)^2/4g is exactly quadratic.  Returns the
    gradient wxi (dRe sigma = Re(wxi e) for a xi-step e), the most
    negative eigenvalue lam1 (always <= -1/4g) and its unit
    eigendirection v1; i*v1 is the ridge tangent.  Divide xi-space
    steps by xi' to move in nu.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        a2 = 0.5j / gamma * ev["p_nu"] / ev["xi_deriv"]
    wxi = 0.5j / gamma * (ev["p"] + ev["xi"].imag)
    hxx = a2.real
    hc = -a2.imag
    hyy = -a2.real - 0.5 / gamma
    span = np.sqrt((0.5 * (hxx - hyy)) ** 2 + hc ** 2)
    lam1 = 0.5 * (hxx + hyy) - span
    # eigenvector of lam1; either closed form can degenerate, so keep
    # whichever is better conditioned
    va = (lam1 - hyy) + 1j * hc
    vb = hc + 1j * (lam1 - hxx)
    v1 = np.where(np.abs(va) >= np.abs(vb), va, vb)
    n = np.abs(v1)
    v1 = np.where(n > 0, v1, 1.0 + 0.0j) / np.where(n > 0, n, 1.0)
    return wxi, lam1, v1


def _default_evaluate(grid, threads):
    state, spec, contour = grid.state, grid.spec, grid.contour
    if state is None or spec is None or contour is None:
        raise ValueError("grid carries no propagation provenance; pass "
                         "evaluate= to march off-grid points")
    dp0 = 2.0j * grid.params.hbar * state.gamma0

    def evaluate(nus):
        ev = propagate_labels(state, spec, contour, np.asarray(nus, complex),
                              grid.params, threads=threads)
        ev["p_nu"] = ev["m_pq"] + dp0 * ev["m_pp"]
        return ev

    return evaluate


def _merge_rows(ev, rows, sub):
    for k, v in ev.items():
        v[rows] = sub[k]


class _Runlet:
    __slots__ = ("seed", "sign", "nu", "xid", "txi",
                 "cold", "steps", "idx", "stop")

    def __init__(self, seed, sign, nu, xid, txi):
        self.seed = seed
        self.sign = sign
        self.nu = nu
        self.xid = xid
        self.txi = txi          # shared ridge tangent, unit, xi space
        self.cold = 0
        self.steps = 0
        self.idx = []
        self.stop = ""


class _Cloud:
    """Accepted walk points, columnar, with per-point run id and age."""

    COLS = ("nu", "xi", "xi_deriv", "sigma_analytic", "sigma", "p",
            "p_nu", "xi_arg")

    def __init__(self):
        self.data = {k: [] for k in self.COLS}
        self.tangent = []
        self.run = []
        self.runlet = []
        self.step = []

    @property
    def n(self):
        return len(self.run)

    def add(self, ev, row, tangent, run_id, runlet_id, step):
        for k in self.COLS:
            self.data[k].append(ev[k][row])
        self.tangent.append(tangent)
        self.run.append(run_id)
        self.runlet.append(runlet_id)
        self.step.append(step)
        return self.n - 1

    def column(self, k):
        return np.asarray(self.data[k])


def march_strips(grid, caustics, *, theta_split=THETA_SPLIT,
                 score_floor=SCORE_FLOOR, xi_step=XI_STEP, x_span=None,
                 nu_window=None, mode="berry", threads=1, evaluate=None):
    """Walk the unresolved ridges of a treated manifold grid.

    Seeds are taken from valid, masked-in records that fail the
    resolution split and sit above the score floor; each seed is pulled
    onto the transverse maximum of Re sigma by Newton steps and walked
    both ways in lockstep waves until it merges with another walk,
    hands off to a resolved record's cell, leaves the grid (or
    nu_window), climbs into treated territory (Re sigma > 0), loses its
    ridge, or spends PATIENCE steps below the score floor or outside
    x_span.  Treatment factors are replayed from the caustic records'
    stored removed sectors, so apply_stokes_treatment must have run on
    this grid.

    Returns a StripSet; meta counts runs, points, evaluations and stop
    reasons.
    """
    gamma = grid.params.gamma
    if evaluate is None:
        evaluate = _default_evaluate(grid, threads)

    theta = resolution_angle(grid)
    score = _score(grid.sigma.real, grid.xi_deriv)
    ok = (grid.valid & (grid.mask > 0) & (theta >= theta_split)
          & (score > score_floor))
    if x_span is not None:
        pad = np.sqrt(16.0 / (2.0 * gamma))
        lo, hi = x_span[0] - pad, x_span[1] + pad
        xc = grid.xi.real / (2.0 * gamma)
        ok &= (xc >= lo) & (xc <= hi)
    else:
        lo, hi = -np.inf, np.inf
    re0, re1, im0, im1 = grid.bounds
    if nu_window is not None:
        re0, re1, im0, im1 = map(float, nu_window)
        ok &= ((grid.nu.real >= re0) & (grid.nu.real <= re1)
               & (grid.nu.imag >= im0) & (grid.nu.imag <= im1))

    cand = np.flatnonzero(ok)
    cand = cand[np.argsort(-score[cand], kind="stable")]
    meta = {"strip_seed_candidates": int(cand.size), "strip_runs": 0,
            "strip_points": 0, "strip_evaluations": 0, "strip_waves": 0,
            "strip_stops": {}, "strip_dropped_seeds": 0}
    if not cand.size:
        return StripSet.empty(meta)

    n_im = grid.resolution[1]
    d_re, d_im = grid.d_re, grid.d_im

    def cell_of(nu):
        i = int(round((nu.real - grid.bounds[0]) / d_re))
        j = int(round((nu.imag - grid.bounds[2]) / d_im))
        i = min(max(i, 0), grid.resolution[0] - 1)
        j = min(max(j, 0), n_im - 1)
        return i * n_im + j

    cloud = _Cloud()
    n_eval = [0]

    def run_eval(nus):
        nus = np.asarray(nus, dtype=complex)
        n_eval[0] += nus.size
        ev = evaluate(nus)
        ev["nu"] = nus.copy()
        return ev

    def stopped(reason):
        meta["strip_stops"][reason] = meta["strip_stops"].get(reason, 0) + 1

    def transverse_step(ev):
        # Newton ascent toward the transverse maximum, in xi units;
        # lam1 <= -1/4g keeps it bounded without a floor
        wxi, lam1, v1 = _ridge_frame(ev, gamma)
        return np.real(wxi * v1) / (-lam1), v1

    run_id = 0
    wave = 0
    while cand.size and run_id < MAX_RUNS:
        wave += 1
        if cloud.n:
            pts = cloud.column("nu")
            d = np.abs(grid.nu[cand][:, None] - pts[None, :]).min(axis=1)
            cand = cand[d > COVER_RADIUS * d_re]
            if not cand.size:
                break
        sel = []
        for c in cand:
            z = grid.nu[c]
            if all(abs(z - grid.nu[s]) > SEED_SEP * d_re for s in sel):
                sel.append(c)
        cand = cand[~np.isin(cand, sel)]

        # pull the wave's seeds onto the transverse maximum of Re sigma;
        # each evaluation carries an exact local quadratic model, so a
        # couple of Newton steps suffice
        seeds = np.array([grid.nu[s] for s in sel], dtype=complex)
        ev = run_eval(seeds)
        alive = ev["valid"].copy()
        for _ in range(4):
            dxi, v1 = transverse_step(ev)
            with np.errstate(invalid="ignore"):
                dnu = np.clip(dxi, -2.0 * xi_step, 2.0 * xi_step) \
                    * v1 / ev["xi_deriv"]
            move = (alive & np.isfinite(dnu)
                    & (np.abs(dxi) > RIDGE_TOL * xi_step))
            if not move.any():
                break
            seeds[move] += dnu[move]
            sub = run_eval(seeds[move])
            alive[move] &= sub["valid"]
            _merge_rows(ev, move, sub)
        dxi, v1 = transverse_step(ev)

        runlets = []
        for r in range(seeds.size):
            xid_r = ev["xi_deriv"][r]
            bad = (not alive[r] or not np.isfinite(xid_r) or xid_r == 0
                   or not np.isfinite(dxi[r])
                   or abs(dxi[r]) > RIDGE_LOST * xi_step
                   or _score(ev["sigma"][r].real, xid_r) <= score_floor
                   or ev["sigma"][r].real > MOUNTAIN_STOP)
            rec = grid.valid[cell_of(seeds[r])] and \
                theta[cell_of(seeds[r])] < theta_split
            if bad or rec:
                meta["strip_dropped_seeds"] += 1
                continue
            if cloud.n:
                sep = np.abs(seeds[r] - cloud.column("nu")).min()
                if sep * abs(xid_r) < MERGE_STEP * xi_step \
                        or sep < COVER_RADIUS * d_re:
                    meta["strip_dropped_seeds"] += 1
                    continue
            txi = 1j * v1[r]
            tn = txi / xid_r
            k = cloud.add(ev, r, tn / abs(tn), run_id, 2 * run_id, 0)
            plus = _Runlet(run_id, +1, seeds[r], xid_r, txi)
            plus.idx.append(k)
            minus = _Runlet(run_id, -1, seeds[r], xid_r, txi)
            runlets += [plus, minus]
            run_id += 1
            meta["strip_runs"] += 1

        rounds = 0
        while rounds < MAX_ROUNDS:
            rounds += 1
            act = [r for r in runlets if not r.stop]
            if not act:
                break
            pred = np.array([r.nu + r.sign * xi_step * r.txi / r.xid
                             for r in act])
            ev = run_eval(pred)
            for _ in range(3):
                dxi, v1 = transverse_step(ev)
                with np.errstate(invalid="ignore"):
                    dnu = np.clip(dxi, -0.75 * xi_step, 0.75 * xi_step) \
                        * v1 / ev["xi_deriv"]
                move = (ev["valid"] & np.isfinite(dnu)
                        & (np.abs(dxi) > RIDGE_TOL * xi_step))
                if not move.any():
                    break
                pred[move] += dnu[move]
                sub = run_eval(pred[move])
                _merge_rows(ev, move, sub)
            dxi, v1 = transverse_step(ev)
            lost = ~np.isfinite(dxi) | (np.abs(dxi) > RIDGE_LOST * xi_step)
            if _DEBUG:
                for r_i, r in enumerate(act):
                    print("dbg rnd=%d run=%d sgn=%+d stp=%d "
                          "dxi/lim=%.2f sig=%.2f" %
                          (rounds, r.seed, r.sign, r.steps,
                           abs(dxi[r_i]) / (RIDGE_LOST * xi_step),
                           ev["sigma"][r_i].real))
            all_nu = cloud.column("nu")
            all_run = np.asarray(cloud.run)
            all_runlet = np.asarray(cloud.runlet)
            all_step = np.asarray(cloud.step)
            for r_i, r in enumerate(act):
                z = pred[r_i]
                xid_z = ev["xi_deriv"][r_i]
                r.steps += 1
                rl_id = 2 * r.seed + (0 if r.sign > 0 else 1)
                if not ev["valid"][r_i] or not np.isfinite(xid_z) or xid_z == 0:
                    r.stop = "invalid"
                elif lost[r_i]:
                    r.stop = "ridge-lost"
                elif ev["sigma"][r_i].real > MOUNTAIN_STOP:
                    r.stop = "mountain"
                elif not (re0 <= z.real <= re1 and im0 <= z.imag <= im1):
                    r.stop = "edge"
                else:
                    cell = cell_of(z)
                    if grid.valid[cell] and theta[cell] < theta_split:
                        r.stop = "handoff"
                    else:
                        dd = np.abs(z - all_nu)
                        own_recent = (all_runlet == rl_id) \
                            & (all_step > r.steps - RECENT_EXCLUDE)
                        sibling_seed = (all_run == r.seed) & (all_step < 1)
                        dd[own_recent | sibling_seed] = np.inf
                        if dd.size and (dd.min() * abs(xid_z)
                                        < MERGE_STEP * xi_step):
                            r.stop = "merge"
                if r.stop:
                    stopped(r.stop)
                    continue
                sc = _score(ev["sigma"][r_i].real, xid_z)
                xc = ev["xi"][r_i].real / (2.0 * gamma)
                if r.idx:
                    xc_old = cloud.data["xi"][r.idx[-1]].real / (2.0 * gamma)
                else:
                    xc_old = xc
                # leaving the x span while still moving away means the
                # run is departing for good
                outward = (xc > hi and xc >= xc_old) or \
                    (xc < lo and xc <= xc_old)
                if sc <= score_floor or xc < lo or xc > hi:
                    r.cold += 1
                    if outward or r.cold > PATIENCE:
                        r.stop = "cold"
                        stopped("cold")
                        continue
                else:
                    r.cold = 0
                txi = 1j * v1[r_i]
                if np.real(txi * np.conj(r.txi)) < 0:
                    txi = -txi
                r.txi = txi
                tn = txi / xid_z
                k = cloud.add(ev, r_i, tn / abs(tn), r.seed, rl_id, r.steps)
                r.idx.append(k)
                r.nu = z
                r.xid = xid_z
        else:
            warnings.warn("strip walk hit the round cap; strips may be "
                          "truncated", stacklevel=2)
        meta["strip_waves"] = wave

    if run_id >= MAX_RUNS:
        warnings.warn(f"strip walk stopped at {MAX_RUNS} runs; strips may "
                      "be missing", stacklevel=2)
    if not cloud.n:
        return StripSet.empty(meta)

    # assemble per-run polylines: reversed minus side + seed + plus side
    order = []
    run_of = []
    by_runlet = {}
    for i, rl in enumerate(cloud.runlet):
        by_runlet.setdefault(rl, []).append(i)
    for seed in range(run_id):
        minus = by_runlet.get(2 * seed + 1, [])
        plus = by_runlet.get(2 * seed, [])
        line = minus[::-1] + plus
        order += line
        run_of += [seed] * len(line)
    order = np.asarray(order, dtype=int)
    run_of = np.asarray(run_of, dtype=int)

    xi = cloud.column("xi")[order]
    xid = cloud.column("xi_deriv")[order]
    arg = cloud.column("xi_arg")[order]
    sig_a = cloud.column("sigma_analytic")[order]
    sig = cloud.column("sigma")[order]
    nu = cloud.column("nu")[order]
    p = cloud.column("p")[order]
    pn = cloud.column("p_nu")[order]
    tang = np.asarray(cloud.tangent)[order]

    weight = np.zeros(order.size)
    xi2 = np.zeros(order.size, dtype=complex)
    for seed in range(run_id):
        m = np.flatnonzero(run_of == seed)
        n_m = m.size
        if n_m == 0:
            continue
        if n_m == 1:
            weight[m] = xi_step
            continue
        zz = nu[m]
        d = np.abs(np.diff(xi[m]))
        w = np.empty(n_m)
        w[0], w[-1] = d[0] / 2.0, d[-1] / 2.0
        w[1:-1] = (d[:-1] + d[1:]) / 2.0
        weight[m] = w
        # walk tangent and second derivative of xi from the polyline
        dz = np.empty(n_m, dtype=complex)
        dz[1:-1] = zz[2:] - zz[:-2]
        dz[0] = zz[1] - zz[0]
        dz[-1] = zz[-1] - zz[-2]
        with np.errstate(divide="ignore", invalid="ignore"):
            t_new = dz / np.abs(dz)
            dxid = np.empty(n_m, dtype=complex)
            dxid[1:-1] = (xid[m][2:] - xid[m][:-2]) / dz[1:-1]
            dxid[0] = (xid[m][1] - xid[m][0]) / dz[0]
            dxid[-1] = (xid[m][-1] - xid[m][-2]) / dz[-1]
        ok_t = np.isfinite(t_new)
        # keep the marched orientation: flip where the polyline runs the
        # minus side backwards
        flip = np.real(t_new * np.conj(tang[m])) < 0
        t_new = np.where(flip, -t_new, t_new)
        tang[m] = np.where(ok_t, t_new, tang[m])
        xi2[m] = np.where(np.isfinite(dxid), dxid, 0.0)

    phi = (8.0 * gamma * np.pi) ** 0.25 * np.exp(
        -0.5 * np.log(np.abs(xid)) - 0.5j * arg)
    fac = treatment_factors(nu, xi, sig.real, caustics, mode=mode)
    meta["strip_points"] = int(order.size)
    meta["strip_evaluations"] = n_eval[0]
    return StripSet(nu=nu, xi=xi, xi_deriv=xid, xi_second=xi2,
                    sigma_analytic=sig_a, p=p, p_nu=pn, phi=phi, factor=fac,
                    weight=weight, tangent=tang, run=run_of, meta=meta)


def strip_wavefunction(strips, x_samples, gamma, chunk=512):
    """Amplitude of the strip samples via the transverse closed form.

    Each walk point anchors a straight transverse line in the xi plane,
    xi(tau) = xi0 + e tau with unit direction e = i xi' s / |xi' s| (s
    the walk tangent in the label plane).  Along that line the
    conjugate-xi and Im-xi pieces of the reconstruction exponent are
    exactly linear in tau, so only sigma_A and the prefactor are
    expanded: to second order the exponent is E0 + B tau - A tau^2 with

        E0 = sigma_A - gamma u0^2 - eta0^2/2g,  u0 = x - conj(xi0)/2g,
        B  = (i/2g) p e + u0 conj(e) - eta0 Im(e)/g + b_w,
        A  = -(i/4g) (dp/dxi) e^2 + conj(e)^2/4g + Im(e)^2/2g,

    where dp/dxi is measured as p_nu/xi', and b_w is the prefactor's
    log-drift from xi'' differenced along the walk.  The transverse
    integral is sqrt(pi/A) exp(E0 + B^2/4A), and psi(x) sums
    weight * factor * phi over the walk (weight is arc length in xi)
    with the reconstruction's overall prefactor.

    Anchoring on the ridge keeps Re A positive; points where it is not
    (no transverse maximum in quadratic range) are skipped and counted,
    and real exponents beyond EXPO_CAP are clipped and counted.
    """
    x = np.asarray(x_samples, dtype=float)
    psi = np.zeros(x.size, dtype=complex)
    strips.meta.setdefault("strip_skipped_points", 0)
    strips.meta.setdefault("strip_expo_clipped", 0)
    if strips.n_points == 0:
        return psi
    usable = ((strips.factor > 0) & (strips.weight > 0)
              & np.isfinite(strips.xi_deriv) & (np.abs(strips.xi_deriv) > 0))
    idx = np.flatnonzero(usable)
    n_skip = 0
    n_clip = 0
    for s in range(0, idx.size, chunk):
        rows = idx[s:s + chunk]
        xid = strips.xi_deriv[rows]
        walk = xid * strips.tangent[rows]
        e = 1j * walk / np.abs(walk)
        xi0 = strips.xi[rows]
        p = strips.p[rows]
        with np.errstate(divide="ignore", invalid="ignore"):
            p_xi = strips.p_nu[rows] / xid
            kap = strips.xi_second[rows] / xid ** 2
        p_xi = np.where(np.isfinite(p_xi), p_xi, 0.0)
        kap = np.where(np.isfinite(kap), kap, 0.0)
        # in the xi measure the only amplitude drift is the prefactor's
        b_w = -0.5 * kap * e
        eta0 = xi0.imag
        m1 = e.imag
        s1 = 0.5j / gamma * p * e
        A = (-0.25j / gamma * p_xi * e ** 2 + np.conj(e) ** 2 / (4.0 * gamma)
             + m1 ** 2 / (2.0 * gamma))[:, None]

        u0 = x[None, :] - np.conj(xi0)[:, None] / (2.0 * gamma)
        E0 = (strips.sigma_analytic[rows] - eta0 ** 2 / (2.0 * gamma))[:, None] \
            - gamma * u0 ** 2
        B = (s1 + b_w - eta0 * m1 / gamma)[:, None] + u0 * np.conj(e)[:, None]
        floor = A_FLOOR / (4.0 * gamma)
        good = A.real > floor
        n_skip += int(np.count_nonzero(~good & np.isfinite(A.real)))
        A = np.where(good, A, 1.0)
        with np.errstate(over="ignore", under="ignore", invalid="ignore"):
            expo = E0 + B ** 2 / (4.0 * A)
            hot = expo.real > EXPO_CAP
            n_clip += int(np.count_nonzero(hot & good))
            expo = np.where(hot, EXPO_CAP + 1j * expo.imag, expo)
            kern = np.where(good, np.sqrt(np.pi / A) * np.exp(expo), 0.0)
        wgt = (strips.weight[rows] * strips.factor[rows]
               * strips.phi[rows])[:, None]
        psi += (wgt * kern).sum(axis=0)
    strips.meta["strip_skipped_points"] = n_skip
    strips.meta["strip_expo_clipped"] = n_clip
    if n_clip:
        warnings.warn(f"{n_clip} strip kernel value(s) exceeded the exponent "
                      "cap and were clipped", stacklevel=2)
    prefix = -(2.0 * gamma / np.pi) ** 0.25 / (4.0 * np.pi * gamma)
    return prefix * psi


def reconstruct_refined(grid, x_samples, caustics, *, params=None, threads=1,
                        nu_window=None, theta_split=THETA_SPLIT,
                        score_floor=SCORE_FLOOR, xi_step=XI_STEP,
                        mode="berry", evaluate=None):
    """Reconstruction with strip quadrature for the unresolved records.

    Records whose resolution angle stays below theta_split are summed
    exactly as in reconstruct; the rest are masked out of the Riemann
    sum and their ridges are walked and integrated transversally.  On a
    fully resolved grid this reduces to reconstruct exactly (and walks
    nothing).  The grid must already carry its Stokes treatment.
    """
    if params is None:
        params = grid.params
    theta = resolution_angle(grid)
    saved = grid.mask
    grid.mask = np.where(theta < theta_split, saved, 0.0)
    try:
        base = reconstruct(grid, x_samples, params=params, threads=threads,
                           nu_window=nu_window)
    finally:
        grid.mask = saved
    x = base.x
    strips = march_strips(grid, caustics, theta_split=theta_split,
                          score_floor=score_floor, xi_step=xi_step,
                          x_span=(float(x[0]), float(x[-1])),
                          nu_window=nu_window, mode=mode, threads=threads,
                          evaluate=evaluate)
    psi_s = strip_wavefunction(strips, x, params.gamma)
    meta = dict(base.meta)
    meta.update(strips.meta)
    out = WavefunctionGrid(x=x, psi=base.psi + psi_s, dx=base.dx, meta=meta)
    out.check_boundary()
    return out
