"""Closed-form reference solutions and the scenario presets built on them.

All references are returned as exact cell averages on the target grid, so
that comparing them with scheme output measures only the scheme's error.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import beta as beta_fn
from scipy.special import erf

from . import helmholtz as hz
from .measures import Domain, EnergySpec, GridMeasure, entropy, power

# --- Gaussians and the heat kernel -------------------------------------------------


def _gauss_cdf(x, mean, var):
    return 0.5 * (1.0 + erf((x - mean) / math.sqrt(2.0 * var)))


def _images(domain: Domain, axis: int, mean: float, reach: int):
    """Image sources and signs for the heat kernel on an interval.

    Periodic axes use translated copies; no-flux axes alternate reflections.
    """
    lo, hi = domain.bounds[axis]
    L = hi - lo
    if domain.periodic:
        return [mean + k * L for k in range(-reach, reach + 1)]
    out = []
    for k in range(-reach, reach + 1):
        out.append(mean + 2 * k * L)
        out.append(2 * lo - mean + 2 * k * L)
    return out


def gaussian_axis_masses(domain: Domain, axis: int, mean: float, var: float, images: bool = True, reach: int = 3):
    """Exact cell masses along one axis of a Gaussian, optionally with the
    image sum that makes it the heat kernel of the bounded axis."""
    e = domain.axis_edges(axis)
    centers = _images(domain, axis, mean, reach) if images else [mean]
    m = np.zeros(domain.cells[axis])
    for c in centers:
        m += np.diff(_gauss_cdf(e, c, var))
    return m


def gaussian(domain: Domain, mean=0.0, var=1.0, images: bool = True) -> GridMeasure:
    """Isotropic Gaussian cell averages (with images when ``images``)."""
    mean = np.broadcast_to(np.asarray(mean, float), (domain.dim,))
    masses = None
    for a in range(domain.dim):
        m = gaussian_axis_masses(domain, a, mean[a], var, images)
        masses = m if masses is None else np.multiply.outer(masses, m)
    return GridMeasure.from_density(domain, masses / domain.cell_volume)


def heat_solution(domain: Domain, t: float, var0: float = 0.25, mean=0.0, drift_velocity=None) -> GridMeasure:
    """Exact solution of ``d_t rho = lap rho`` from a Gaussian of variance
    ``var0``; on periodic grids an optional constant velocity translates it."""
    mean = np.broadcast_to(np.asarray(mean, float), (domain.dim,)).copy()
    if drift_velocity is not None:
        mean = mean + t * np.broadcast_to(np.asarray(drift_velocity, float), (domain.dim,))
    return gaussian(domain, mean, var0 + 2.0 * t, images=True)


def gaussian_jko_sigma(sigma0: float, h: float, steps: int):
    """Standard deviations of the exact JKO iterates of the heat flow on a
    1D Gaussian: ``sigma' = (sigma + sqrt(sigma^2 + 4h)) / 2``."""
    s = [sigma0]
    for _ in range(steps):
        s.append(0.5 * (s[-1] + math.sqrt(s[-1] ** 2 + 4.0 * h)))
    return np.array(s)


# --- Barenblatt ------------------------------------------------------------------------


@dataclass(frozen=True)
class Barenblatt:
    """Self-similar solution of ``d_t u = lap(c u^m)`` in dimension ``d``.

    ``u = tau^-a (C - k |x|^2 tau^-2b)_+^(1/(m-1))`` with ``tau = c t``,
    ``a = d / (d(m-1) + 2)``, ``b = a / d``, ``k = a (m-1) / (2 m d)``; ``C``
    fixes unit mass.
    """

    m: float = 2.0
    d: int = 1
    coeff: float = 1.0

    @property
    def alpha(self):
        return self.d / (self.d * (self.m - 1) + 2)

    @property
    def beta(self):
        return self.alpha / self.d

    @property
    def k(self):
        return self.alpha * (self.m - 1) / (2 * self.m * self.d)

    @property
    def C(self):
        p = 1.0 / (self.m - 1)
        if self.d == 1:
            return (math.sqrt(self.k) / beta_fn(0.5, p + 1)) ** (1.0 / (p + 0.5))
        # d = 2: mass = pi C^(p+1) / (k (p+1))
        return (self.k * (p + 1) / math.pi) ** (1.0 / (p + 1))

    def radius(self, t):
        tau = self.coeff * t
        return math.sqrt(self.C / self.k) * tau**self.beta

    def __call__(self, t, *x):
        tau = self.coeff * t
        r2 = sum(np.asarray(xi, float) ** 2 for xi in x)
        core = np.maximum(self.C - self.k * r2 * tau ** (-2 * self.beta), 0.0)
        return tau ** (-self.alpha) * core ** (1.0 / (self.m - 1))

    def cells(self, domain: Domain, t: float, nodes: int = 8) -> GridMeasure:
        """Cell averages, exact for ``m = 2`` (piecewise polynomial profile)."""
        if domain.dim != 1:
            from .measures import cell_average

            return GridMeasure.from_density(domain, cell_average(domain, lambda *x: self(t, *x), subsamples=8))
        R = self.radius(t)
        e = domain.axis_edges(0)
        a, b = np.maximum(e[:-1], -R), np.minimum(e[1:], R)
        gx, gw = np.polynomial.legendre.leggauss(nodes)
        w = np.clip(b - a, 0.0, None)
        pts = 0.5 * (a + b)[:, None] + 0.5 * w[:, None] * gx[None, :]
        mass = 0.5 * w * np.sum(gw[None, :] * self(t, pts), axis=1)
        return GridMeasure.from_density(domain, mass / domain.cell_volume)


def porous_medium_energy(m: float = 2.0) -> EnergySpec:
    """``F = s^m`` gives ``d_t rho = lap((m-1) rho^m)``."""
    return power(m)


# --- rigid rotation ------------------------------------------------------------------


def rotate_points(x, y, angle, center=(0.0, 0.0)):
    cx, cy = center
    c, s = math.cos(angle), math.sin(angle)
    return cx + c * (x - cx) - s * (y - cy), cy + s * (x - cx) + c * (y - cy)


def rotated_gaussian(domain: Domain, mean, var, angle) -> GridMeasure:
    """A Gaussian blob after rotation by ``angle`` about the origin."""
    mx, my = rotate_points(mean[0], mean[1], angle)
    return gaussian(domain, (mx, my), var, images=domain.periodic)


# --- stationary states -------------------------------------------------------------------


def gibbs_state(domain: Domain, V) -> GridMeasure:
    """``rho = exp(-V) / Z`` from cell values of ``V``."""
    V = np.asarray(V, float)
    w = np.exp(-(V - V.min()))
    return GridMeasure.from_density(domain, w)


def fixed_point_stationary(domain: Domain, potential_of: Callable, rho0: GridMeasure, damping: float = 0.5,
                           tol: float = 1e-12, max_iter: int = 10000) -> GridMeasure:
    """Damped fixed point of ``rho = exp(-V[rho]) / Z`` (linear diffusion)."""
    rho = rho0
    for _ in range(max_iter):
        nxt = gibbs_state(domain, potential_of(rho))
        new = rho.mix(nxt, 1.0 - damping)
        if np.max(np.abs(new.density - rho.density)) < tol:
            return new
        rho = new
    raise RuntimeError("stationary fixed point did not converge")


# --- presets -------------------------------------------------------------------------------


@dataclass
class Scenario:
    """Everything needed to run one preset and compare it with its oracle."""

    name: str
    domain: Domain
    rho0: GridMeasure
    energy: EnergySpec | None
    drift: object
    oracle: Callable | None = None
    t0: float = 0.0
    params: dict = field(default_factory=dict)


def heat(cells: int = 256, half_width: float = 4.0, sigma: float = 0.5) -> Scenario:
    dom = Domain.interval(-half_width, half_width, cells)
    var0 = sigma**2
    return Scenario("heat", dom, gaussian(dom, 0.0, var0), entropy(), hz.zero_drift(),
                    oracle=lambda t: heat_solution(dom, t, var0), params={"sigma": sigma})


def porous_medium(cells: int = 256, half_width: float = 4.0, t0: float = 0.25, m: float = 2.0) -> Scenario:
    dom = Domain.interval(-half_width, half_width, cells)
    B = Barenblatt(m=m, d=1, coeff=m - 1)
    return Scenario("porous-medium", dom, B.cells(dom, t0), porous_medium_energy(m), hz.zero_drift(),
                    oracle=lambda t: B.cells(dom, t0 + t), t0=t0, params={"m": m})


def rotation_transport(cells: int = 128, half_width: float = 4.0, omega: float = 1.0,
                       mean=(1.2, 0.4), var: float = 0.25) -> Scenario:
    dom = Domain.square(-half_width, half_width, cells, boundary="periodic")
    return Scenario("rotation-transport", dom, gaussian(dom, mean, var), entropy(), hz.rotation(omega),
                    oracle=lambda t: rotated_gaussian(dom, mean, var, -omega * t),
                    params={"omega": omega, "mean": mean, "var": var})


def mixed_drift(cells: int = 64, half_width: float = 4.0, omega: float = 1.0, mean=(1.0, 0.5),
                var: float = 0.5) -> Scenario:
    """Confinement ``grad |x|^2 / 2`` plus a rigid rotation, on a box."""
    dom = Domain.square(-half_width, half_width, cells)
    drift = hz.external(lambda x, y: 0.5 * (x * x + y * y), lambda x, y: (x, y)) + hz.rotation(omega)
    return Scenario("mixed-drift", dom, gaussian(dom, mean, var, images=False), entropy(), drift,
                    params={"omega": omega})


def stationary_gaussian(cells: int = 256, half_width: float = 4.0) -> Scenario:
    dom = Domain.interval(-half_width, half_width, cells)
    drift = hz.external(lambda x: 0.5 * x * x, lambda x: (x,))
    x = dom.axis_centers(0)
    rho = gibbs_state(dom, 0.5 * x * x)
    return Scenario("stationary-gaussian", dom, rho, entropy(), drift, oracle=lambda t: rho)


def aggregation_diffusion(cells: int = 256, half_width: float = 4.0, strength: float = 1.0) -> Scenario:
    """Linear diffusion with attraction ``K = strength |x|^2 / 2``."""
    dom = Domain.interval(-half_width, half_width, cells)
    drift = hz.interaction(lambda d: (strength * d,))
    return Scenario("aggregation-diffusion", dom, gaussian(dom, 0.7, 0.5, images=False), entropy(), drift,
                    params={"strength": strength})


def drifted_heat(cells: int = 256, half_width: float = 4.0, velocity: float = 1.0, sigma: float = 0.5) -> Scenario:
    """Heat flow carried by a constant velocity on a periodic interval."""
    dom = Domain.interval(-half_width, half_width, cells, boundary="periodic")
    var0 = sigma**2
    drift = hz.custom(lambda d, rho: np.full((1,) + d.shape, -velocity))
    return Scenario("drifted-heat", dom, gaussian(dom, 0.0, var0), entropy(), drift,
                    oracle=lambda t: heat_solution(dom, t, var0, drift_velocity=velocity),
                    params={"velocity": velocity})


def two_species(cells: int = 128, half_width: float = 4.0, cross: float = 1.0, self_: float = 0.0) -> dict:
    """Two linear-diffusion species with symmetric cross attraction; the
    initial data are mirror images of each other."""
    dom = Domain.interval(-half_width, half_width, cells)
    k_cross = hz.interaction(lambda d: (cross * d,))
    k_self = hz.interaction(lambda d: (self_ * d,)) if self_ else hz.zero_drift()
    rho0 = [gaussian(dom, -1.0, 0.3, images=False), gaussian(dom, 1.0, 0.3, images=False)]
    coupling = [[k_self, k_cross], [k_cross, k_self]]
    return {"domain": dom, "rho0": rho0, "energies": [entropy(), entropy()], "coupling": coupling}


PRESETS = {
    "heat": heat,
    "porous-medium": porous_medium,
    "rotation-transport": rotation_transport,
    "mixed-drift": mixed_drift,
    "aggregation-diffusion": aggregation_diffusion,
    "stationary-gaussian": stationary_gaussian,
    "drifted-heat": drifted_heat,
}
