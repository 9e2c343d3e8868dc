"""Analytic 1-D model potentials evaluated at complex coordinates.

All potentials are complex-analytic functions of the coordinate q (away
from their poles), so they can be fed complex phase-space points during
trajectory and stability-matrix propagation.  Values, gradients and
hessians are exact closed forms; everything is vectorized over numpy
arrays of complex q.

Atomic units throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "KINDS",
    "PotentialSpec",
    "SingularPointError",
    "potential_value",
    "potential_gradient",
    "potential_hessian",
    "singularity_distance",
    "benchmark_spec",
    "BENCHMARKS",
]

KINDS = frozenset({"morse", "quartic", "coulomb", "eckart", "harmonic", "free"})

# Default parameters of the four benchmark systems (atomic units), plus the
# coherent-state center chi, classical reference time and mass used with them.
# chi encodes the phase-space center (q_c, p_c) as chi = 2*gamma0*q_c + i*p_c.
BENCHMARKS = {
    "morse": {
        "params": {"depth": 10.25, "width": 0.2209},
        "mass": 1.0,
        "chi": 9.342 + 0.0j,
        "t_classical": 12.88,
    },
    "quartic": {
        "params": {"quadratic": 0.5, "quartic": 0.1},
        "mass": 1.0,
        "chi": -2.0j,
        "t_classical": 4.72,
    },
    "coulomb": {
        "params": {"charge": 1.0},
        "mass": 1.0,
        "chi": 2.0 + 0.0j,
        "t_classical": 2.0 * math.pi,
    },
    # chi = -8+4i places the packet at q = -8 moving toward the barrier with
    # p = +4 (turning-point time ~ 8/(4/1060) ~ 2113).
    "eckart": {
        "params": {"barrier": 0.01562, "width": 0.734},
        "mass": 1060.0,
        "chi": -8.0 + 4.0j,
        "t_classical": 2113.0,
    },
}

_DEFAULT_PARAMS = {
    "morse": {"depth": 10.25, "width": 0.2209},
    "quartic": {"quadratic": 0.5, "quartic": 0.1},
    "coulomb": {"charge": 1.0},
    "eckart": {"barrier": 0.01562, "width": 0.734},
    "harmonic": {"omega": 1.0},
    "free": {},
}


class SingularPointError(ValueError):
    """Raised when a coordinate falls within the guard radius of a pole."""


@dataclass(frozen=True)
class PotentialSpec:
    """One analytic potential: kind, named parameters, particle mass.

    Parameters left out of ``params`` fall back to the benchmark defaults
    for that kind.  ``guard_radius`` is the exclusion radius around poles
    (Coulomb q = 0, Eckart q = i*pi*width*(k + 1/2)).
    """

    kind: str
    params: dict = field(default_factory=dict)
    mass: float = 1.0
    guard_radius: float = 1e-6

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown potential kind {self.kind!r}; choose from {sorted(KINDS)}")
        if self.mass <= 0:
            raise ValueError("mass must be positive")
        merged = dict(_DEFAULT_PARAMS[self.kind])
        unknown = set(self.params) - set(merged)
        if unknown:
            raise ValueError(f"unknown parameters for {self.kind}: {sorted(unknown)}")
        merged.update(self.params)
        object.__setattr__(self, "params", merged)


def benchmark_spec(name, **overrides):
    """PotentialSpec for one of the benchmark systems (morse/quartic/coulomb/eckart)."""
    entry = BENCHMARKS[name]
    return PotentialSpec(kind=name, params=dict(entry["params"]), mass=entry["mass"], **overrides)


def singularity_distance(spec, q):
    """Distance from q to the nearest pole of the potential (inf if entire).

    Vectorized over q.
    """
    q = np.asarray(q, dtype=complex)
    if spec.kind == "coulomb":
        return np.abs(q)
    if spec.kind == "eckart":
        a = spec.params["width"]
        # poles of cosh(q/a)^-2 at q = i*pi*a*(k + 1/2)
        period = math.pi * a
        im = np.imag(q) - period / 2.0
        im_wrapped = np.abs(im - period * np.round(im / period))
        return np.hypot(np.real(q), im_wrapped)
    return np.full_like(np.real(q), np.inf, dtype=float)


def _check_guard(spec, q):
    d = singularity_distance(spec, q)
    if np.any(d < spec.guard_radius):
        bad = np.asarray(q, dtype=complex)[np.asarray(d < spec.guard_radius)]
        raise SingularPointError(
            f"{spec.kind} potential evaluated within guard radius "
            f"{spec.guard_radius:g} of a pole (e.g. q = {bad.flat[0]:g})"
        )


def potential_value(spec, q, check=True):
    """V(q) by analytic continuation of the closed-form potential."""
    q = np.asarray(q, dtype=complex)
    if check:
        _check_guard(spec, q)
    p = spec.params
    if spec.kind == "morse":
        return p["depth"] * (1.0 - np.exp(-p["width"] * q)) ** 2
    if spec.kind == "quartic":
        return p["quadratic"] * q**2 + p["quartic"] * q**4
    if spec.kind == "coulomb":
        return -p["charge"] / q
    if spec.kind == "eckart":
        return p["barrier"] / np.cosh(q / p["width"]) ** 2
    if spec.kind == "harmonic":
        return 0.5 * spec.mass * p["omega"] ** 2 * q**2
    return np.zeros_like(q)


def potential_gradient(spec, q, check=True):
    """dV/dq, exact closed form."""
    q = np.asarray(q, dtype=complex)
    if check:
        _check_guard(spec, q)
    p = spec.params
    if spec.kind == "morse":
        u = np.exp(-p["width"] * q)
        return 2.0 * p["depth"] * p["width"] * u * (1.0 - u)
    if spec.kind == "quartic":
        return 2.0 * p["quadratic"] * q + 4.0 * p["quartic"] * q**3
    if spec.kind == "coulomb":
        return p["charge"] / q**2
    if spec.kind == "eckart":
        y = q / p["width"]
        return -2.0 * p["barrier"] / p["width"] * np.tanh(y) / np.cosh(y) ** 2
    if spec.kind == "harmonic":
        return spec.mass * p["omega"] ** 2 * q
    return np.zeros_like(q)


def potential_hessian(spec, q, check=True):
    """d2V/dq2, exact closed form."""
    q = np.asarray(q, dtype=complex)
    if check:
        _check_guard(spec, q)
    p = spec.params
    if spec.kind == "morse":
        u = np.exp(-p["width"] * q)
        return 2.0 * p["depth"] * p["width"] ** 2 * u * (2.0 * u - 1.0)
    if spec.kind == "quartic":
        return 2.0 * p["quadratic"] + 12.0 * p["quartic"] * q**2
    if spec.kind == "coulomb":
        return -2.0 * p["charge"] / q**3
    if spec.kind == "eckart":
        y = q / p["width"]
        s2 = 1.0 / np.cosh(y) ** 2
        t = np.tanh(y)
        return 2.0 * p["barrier"] / p["width"] ** 2 * s2 * (2.0 * t**2 - s2)
    if spec.kind == "harmonic":
        return np.full_like(q, spec.mass * p["omega"] ** 2)
    return np.zeros_like(q)
