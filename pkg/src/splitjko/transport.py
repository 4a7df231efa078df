"""Pure transport phase: push a density along a divergence-free field.

Characteristics are integrated with classical RK4 from every cell center,
forward and backward in time. Because the flow preserves Lebesgue measure,
the pushforward density is the old density composed with the backward map,
evaluated by spline interpolation (semi-Lagrangian step).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates

from .fitting import fit_power_law
from .helmholtz import VectorField
from .measures import Domain, GridMeasure

CFL = 0.5


class TransportError(RuntimeError):
    """A characteristic left the safety box (CFL violation)."""


@dataclass
class FlowMap:
    """Arrival points of the characteristics started at cell centers."""

    domain: Domain
    forward: np.ndarray
    backward: np.ndarray
    t: float
    substeps: int

    def jacobian(self, which="forward"):
        """Finite-difference determinant of the map (``~1`` for a
        measure-preserving flow). Periodic jumps are unwrapped first."""
        pts = self.forward if which == "forward" else self.backward
        dom = self.domain
        J = np.empty((dom.dim, dom.dim) + dom.shape)
        for i in range(dom.dim):
            p = pts[i]
            for j in range(dom.dim):
                if dom.periodic:
                    d = np.roll(p, -1, axis=j) - np.roll(p, 1, axis=j)
                    L = dom.lengths[i]
                    d = d - L * np.round(d / L)
                    J[i, j] = d / (2 * dom.dx[j])
                else:
                    J[i, j] = np.gradient(p, dom.dx[j], axis=j)
        if dom.dim == 1:
            return J[0, 0]
        return J[0, 0] * J[1, 1] - J[0, 1] * J[1, 0]


def _to_index(points, domain):
    return np.stack([(points[a] - domain.axis_centers(a)[0]) / domain.dx[a] for a in range(domain.dim)])


def _mode(domain):
    return "grid-wrap" if domain.periodic else "nearest"


def _sample(values, points, domain, order):
    idx = _to_index(points, domain)
    return map_coordinates(values, idx, order=order, mode=_mode(domain), prefilter=order > 1)


def _velocity(W, points, order):
    return np.stack([_sample(W.values[a], points, W.domain, order) for a in range(W.domain.dim)])


def _wrap(points, domain):
    out = points.copy()
    for a in range(domain.dim):
        lo = domain.bounds[a][0]
        out[a] = lo + np.mod(out[a] - lo, domain.lengths[a])
    return out


def _contain(points, domain, margin):
    out = points.copy()
    for a in range(domain.dim):
        lo, hi = domain.bounds[a]
        bad = (out[a] < lo - margin[a]) | (out[a] > hi + margin[a])
        if np.any(bad):
            raise TransportError(f"characteristic left the box along axis {a} (CFL violation)")
        out[a] = np.clip(out[a], lo, hi)
    return out


def choose_substeps(W: VectorField, t: float, substeps: int | None = None) -> int:
    """Smallest count with ``max|W| t / n <= CFL dx``, at least ``substeps``."""
    need = math.ceil(abs(t) * W.max_norm() / (CFL * min(W.domain.dx)) - 1e-12)
    return max(int(substeps or 1), need, 1)


def _rk4(W, start, t, n, order):
    dom = W.domain
    dt = t / n
    margin = [2 * d for d in dom.dx]
    p = start.copy()
    for _ in range(n):
        k1 = _velocity(W, p, order)
        k2 = _velocity(W, p + 0.5 * dt * k1, order)
        k3 = _velocity(W, p + 0.5 * dt * k2, order)
        k4 = _velocity(W, p + dt * k3, order)
        p = p + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        p = _wrap(p, dom) if dom.periodic else _contain(p, dom, margin)
    return p


def integrate_flow(W: VectorField, h: float, substeps: int | None = None, velocity_order: int = 1) -> FlowMap:
    """Forward ``X(h, .)`` and backward ``X(-h, .)`` maps of the field ``W``.

    ``velocity_order`` is 1 (bilinear) or 3 (bicubic).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    dom = W.domain
    n = choose_substeps(W, h, substeps)
    start = np.stack(dom.centers())
    fwd = _rk4(W, start, h, n, velocity_order)
    bwd = _rk4(W, start, -h, n, velocity_order)
    return FlowMap(dom, fwd, bwd, h, n)


@dataclass
class TransportRecord:
    mass_drift: float
    clamped_mass: float
    energy_before: float | None = None
    energy_after: float | None = None
    substeps: int = 0

    @property
    def energy_change(self):
        if self.energy_before is None:
            return None
        return self.energy_after - self.energy_before


def pushforward(rho: GridMeasure, flow: FlowMap, density_order: int = 3):
    """``rho o X(-t, .)`` renormalized; returns ``(measure, record)``."""
    vals = _sample(rho.density, flow.backward, rho.domain, density_order)
    neg = vals < 0
    clamped = float(-np.sum(vals[neg]) * rho.domain.cell_volume)
    vals[neg] = 0.0
    mass = float(np.sum(vals) * rho.domain.cell_volume)
    out = GridMeasure.from_density(rho.domain, vals)
    return out, TransportRecord(mass_drift=mass - 1.0, clamped_mass=clamped, substeps=flow.substeps)


def transport_step_detailed(rho: GridMeasure, W: VectorField, h: float, energy=None, substeps=None,
                            velocity_order: int = 1, density_order: int = 3):
    """Transport step with its bookkeeping record and flow map."""
    if W.max_norm() == 0.0:
        rec = TransportRecord(0.0, 0.0, substeps=0)
        if energy is not None:
            from .measures import internal_energy
            rec.energy_before = rec.energy_after = internal_energy(energy, rho)
        return rho, rec, None
    flow = integrate_flow(W, h, substeps, velocity_order)
    out, rec = pushforward(rho, flow, density_order)
    if energy is not None:
        from .measures import internal_energy
        rec.energy_before = internal_energy(energy, rho)
        rec.energy_after = internal_energy(energy, out)
    return out, rec, flow


def transport_step(rho: GridMeasure, W: VectorField, h: float, **kw) -> GridMeasure:
    """Pushforward of ``rho`` by the time-``h`` flow of ``W``."""
    return transport_step_detailed(rho, W, h, **kw)[0]


def transport_distance_bound(rho: GridMeasure, rho_t: GridMeasure, h: float, W: VectorField | None = None,
                             growth: float | None = None, w2=None) -> dict:
    """Check record for ``W2^2(rho_t, rho) <= C h^2``.

    ``ratio`` is ``W2^2 / h^2``. With ``W`` the kinetic bound
    ``h^2 int |W|^2 d rho`` is reported; with a growth constant ``C_W`` the
    cruder ``h^2 C_W^2 (1 + M(rho))`` bound is reported too.
    """
    from . import ot
    from .measures import second_moment

    w2 = w2 or (lambda a, b: ot.w2(a, b).cost)
    d2 = float(w2(rho_t, rho))
    rec = {"h": h, "w2sq": d2, "ratio": d2 / h**2}
    if W is not None:
        kin = h**2 * rho.integrate(np.sum(W.values**2, axis=0))
        rec["kinetic_bound"] = kin
        rec["kinetic_ok"] = bool(d2 <= kin * (1 + 1e-6) + 1e-14)
    if growth is not None:
        crude = 2 * h**2 * growth**2 * (1 + second_moment(rho))
        rec["growth_bound"] = crude
        rec["growth_ok"] = bool(d2 <= crude + 1e-14)
    return rec


def fit_transport_exponent(records, window=0.2) -> dict:
    """Slope of ``log W2^2`` against ``log h`` over a set of records."""
    fit = fit_power_law([r["h"] for r in records], [r["w2sq"] for r in records])
    out = fit.as_dict()
    out["flag"] = bool(abs(fit.slope - 2.0) > window)
    return out
