"""Semi-implicit JKO step.

Minimize ``rho -> W2^2(rho, rho_t) + 2h (F(rho) + int V drho)`` with the
potential ``V`` frozen at the transported measure ``rho_t``.

Backends
--------
``quantile`` (1D)
    Lagrangian nodes at the cumulative-mass levels of ``rho_t``; ``rho`` is
    piecewise constant between nodes, so the transport term is an exact
    quadratic in the node positions and the energy is a convex function of
    the gaps. Solved by damped Newton with a tridiagonal (cyclic on periodic
    grids) Hessian, then remapped to the grid by spline interpolation of the
    cumulative distribution.
``entropic`` (1D or 2D)
    Scaling iterations in the log domain: a Sinkhorn half-step against the
    fixed marginal ``rho_t`` alternates with the cellwise KL proximal map of
    ``2h (F + V)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.interpolate import CubicSpline, make_interp_spline
from scipy.sparse.linalg import spsolve

from . import ot
from .measures import VACUUM, EnergySpec, GridMeasure, internal_energy

GAP_TOL = 1e-8


class JKOError(RuntimeError):
    pass


@dataclass
class JKOStepResult:
    rho: GridMeasure
    objective: float
    w2sq: float
    energy: float
    potential_term: float
    phi: np.ndarray | None
    iterations: int
    residual: float
    converged: bool
    fallback: bool
    backend: str
    competitor_objective: float
    h: float
    transport: object = None
    info: dict = field(default_factory=dict)

    @property
    def gap(self):
        """Competitor gap, ``<= 0`` for an admissible step."""
        return (self.objective - self.competitor_objective) / (2 * self.h)

    def record(self, k=None) -> dict:
        return {
            "k": k,
            "w2sq": self.w2sq,
            "energy": self.energy,
            "potential": self.potential_term,
            "objective": self.objective,
            "iterations": self.iterations,
            "residual": self.residual,
            "gap": self.gap,
            "fallback": self.fallback,
        }


def _w2sq(a: GridMeasure, b: GridMeasure, eps=None, warm=None) -> float:
    if a.domain.dim == 1:
        return ot.w2_exact_1d(a, b, with_plan=False).cost
    return ot.w2_entropic(a, b, eps=eps, warm=warm).cost


def objective(rho: GridMeasure, rho_t: GridMeasure, V, energy: EnergySpec, h: float, w2sq=None, eps=None,
              warm=None):
    """``(total, w2sq, F(rho), int V drho)``."""
    if w2sq is None:
        w2sq = _w2sq(rho, rho_t, eps, warm)
    e = internal_energy(energy, rho)
    v = rho.integrate(V)
    return w2sq + 2 * h * (e + v), w2sq, e, v


# --- 1D quantile backend ---------------------------------------------------------


class _Lagrangian:
    """Node problem for the quantile backend."""

    def __init__(self, rho_t: GridMeasure, V, energy: EnergySpec, h: float):
        dom = rho_t.domain
        self.dom, self.energy, self.tau = dom, energy, 2.0 * h
        n = dom.cells[0]
        if dom.periodic:
            self.cut = int(np.argmin(rho_t.density))
            order, edges, L = ot._unrolled(dom, self.cut)
            self.L = L
        else:
            order, edges = np.arange(n), dom.axis_edges(0)
            self.L = None
        m = rho_t.masses[order]
        idx = np.nonzero(m > 0)[0]
        if idx.size == 0:
            raise JKOError("empty measure")
        self.m = m[idx]
        self.xl, self.xr = edges[idx], edges[idx + 1]
        self.S = np.concatenate([[0.0], np.cumsum(self.m)])
        self.S /= self.S[-1]
        self.lo, self.hi = dom.bounds[0]
        x = dom.axis_centers(0)
        V = np.asarray(V, float)
        if dom.periodic:
            xs = np.concatenate([x, [x[0] + dom.lengths[0]]])
            self.Vs = CubicSpline(xs, np.concatenate([V, [V[0]]]), bc_type="periodic")
        else:
            self.Vs = CubicSpline(x, V)
        self.Mn = np.zeros(self.m.size + 1)
        self.Mn[:-1] += 0.5 * self.m
        self.Mn[1:] += 0.5 * self.m

    def initial(self):
        y = np.concatenate([[self.xl[0]], 0.5 * (self.xr[:-1] + self.xl[1:]), [self.xr[-1]]])
        return y

    def full(self, z):
        """Node vector including the periodic image of node 0."""
        if self.L is None:
            return z
        return np.concatenate([z, [z[0] + self.L]])

    def fold(self, g):
        if self.L is None:
            return g
        out = g[:-1].copy()
        out[0] += g[-1]
        return out

    def value(self, z):
        y = self.full(z)
        D = np.diff(y)
        if np.any(D <= 0):
            return np.inf
        s = self.m / D
        dl, dr = y[:-1] - self.xl, y[1:] - self.xr
        w = np.sum(self.m / 3 * (dl * dl + dl * dr + dr * dr))
        e = np.sum(D * self.energy.F(s))
        Vy = self.Vs(y)
        v = np.sum(self.m * 0.5 * (Vy[:-1] + Vy[1:]))
        return w + self.tau * (e + v)

    def grad_hess(self, z):
        y = self.full(z)
        D = np.diff(y)
        s = self.m / D
        dl, dr = y[:-1] - self.xl, y[1:] - self.xr
        g = np.zeros(y.size)
        g[:-1] += self.m / 3 * (2 * dl + dr)
        g[1:] += self.m / 3 * (2 * dr + dl)
        P = self.energy.pressure(s)
        g[:-1] += self.tau * P
        g[1:] -= self.tau * P
        g += self.tau * self.Mn * self.Vs(y, 1)
        c = s * s * self.energy.Fsecond(s) / D
        diag = np.zeros(y.size)
        diag[:-1] += 2 * self.m / 3 + self.tau * c
        diag[1:] += 2 * self.m / 3 + self.tau * c
        diag += self.tau * self.Mn * np.maximum(self.Vs(y, 2), 0.0)
        off = self.m / 3 - self.tau * c
        return g, diag, off

    def hessian(self, diag, off):
        k = diag.size
        i = np.arange(k - 1)
        rows = np.concatenate([np.arange(k), i, i + 1])
        cols = np.concatenate([np.arange(k), i + 1, i])
        vals = np.concatenate([diag, off, off])
        if self.L is not None:
            rows = np.where(rows == k - 1, 0, rows)
            cols = np.where(cols == k - 1, 0, cols)
            k -= 1
        return sp.csc_matrix((vals, (rows, cols)), shape=(k, k))

    def pinned(self, z, g):
        pin = np.zeros(z.size, bool)
        if self.L is None:
            pin[0] = z[0] <= self.lo + 1e-14 and g[0] > 0
            pin[-1] = z[-1] >= self.hi - 1e-14 and g[-1] < 0
        return pin

    def project(self, z):
        if self.L is None:
            z = z.copy()
            z[0] = max(z[0], self.lo)
            z[-1] = min(z[-1], self.hi)
        return z

    def residual(self, g, pin):
        Mn = self.fold(self.Mn) if self.L is not None else self.Mn
        r = np.abs(g) / (2 * Mn)
        r[pin] = 0.0
        return float(np.max(r))


def _newton(prob: _Lagrangian, z, tol, max_iter):
    J = prob.value(z)
    it, res = 0, np.inf
    best, stall = np.inf, 0
    for it in range(1, max_iter + 1):
        gf, diag, off = prob.grad_hess(z)
        g = prob.fold(gf)
        pin = prob.pinned(z, g)
        res = prob.residual(g, pin)
        if res <= tol:
            return z, it - 1, res
        H = prob.hessian(diag, off)
        free = np.nonzero(~pin)[0]
        Hf = H[free][:, free]
        d = np.zeros_like(z)
        d[free] = spsolve(Hf.tocsc(), -g[free])
        slope = float(g @ d)
        if not np.isfinite(slope) or slope >= 0:
            d = np.zeros_like(z)
            d[free] = -g[free] / (H.diagonal()[free])
            slope = float(g @ d)
        # keep node gaps positive
        dd = np.diff(prob.full(d))
        D = np.diff(prob.full(z))
        neg = dd < 0
        amax = min(1.0, 0.95 * float(np.min(-D[neg] / dd[neg]))) if neg.any() else 1.0
        a = amax
        if -slope < 1e-13 * (1.0 + abs(J)):
            # decrement below the resolution of J: Armijo is blind here
            zn = prob.project(z + a * d)
            Jn = prob.value(zn)
        else:
            while a > 1e-14:
                zn = prob.project(z + a * d)
                Jn = prob.value(zn)
                if Jn <= J + 1e-4 * a * slope:
                    break
                a *= 0.5
            else:
                return z, it, res
        if res < best:
            best, stall = res, 0
        else:
            stall += 1
            if stall > 50:
                return z, it, res
        z, J = zn, Jn
    gf, _, _ = prob.grad_hess(z)
    g = prob.fold(gf)
    return z, max_iter, prob.residual(g, prob.pinned(z, g))


def _spline(x, y, remap):
    if remap == "linear" or x.size < 6:
        return lambda t: np.interp(t, x, y)
    if remap == "cubic":
        return CubicSpline(x, y)
    if remap == "quintic":
        return make_interp_spline(x, y, k=5)
    raise ValueError(f"unknown remap {remap!r}")


def _remap(prob: _Lagrangian, z, remap="cubic") -> GridMeasure:
    """Cell masses of the interpolated cumulative distribution."""
    dom = prob.dom
    y = prob.full(z)
    S = prob.S
    edges = dom.axis_edges(0)
    if prob.L is None:
        C = _spline(y, S, remap)
        ce = np.where(edges <= y[0], 0.0, np.where(edges >= y[-1], 1.0, 0.0))
        inside = (edges > y[0]) & (edges < y[-1])
        ce[inside] = C(edges[inside])
    else:
        L, k = prob.L, 3
        ky = np.concatenate([y[-1 - k:-1] - L, y, y[1:1 + k] + L])
        kS = np.concatenate([S[-1 - k:-1] - 1, S, S[1:1 + k] + 1])
        C = _spline(ky, kS, remap)
        wraps = np.floor((edges - y[0]) / L)
        ce = C(edges - wraps * L) + wraps
    masses = np.diff(ce)
    masses = np.maximum(masses, 0.0)
    return GridMeasure.from_density(dom, masses / dom.cell_volume)


def _quantile_step(rho_t, V, energy, h, tol, max_iter, remap, init=None):
    prob = _Lagrangian(rho_t, V, energy, h)
    z = prob.initial()
    if prob.L is not None:
        z = z[:-1]
    if init is not None:
        z = prob.project(np.asarray(init, float))
    z, it, res = _newton(prob, z, tol, max_iter)
    rho = _remap(prob, z, remap)
    return rho, it, res, {"nodes": prob.full(z), "levels": prob.S}


# --- entropic-prox backend ------------------------------------------------------------


def _entropic_step(rho_t, V, energy, h, eps, tol, max_iter, f0=None, stage_iters=20):
    dom = rho_t.domain
    costs = ot.axis_costs(dom)
    vol = dom.cell_volume
    b = rho_t.masses
    with np.errstate(divide="ignore"):
        lb = np.log(b)
    tau = 2.0 * h
    V = np.asarray(V, float)
    L = lambda u, e: ot.logsumexp_kernel(u, costs, e)
    sched = ot._eps_schedule(dom, eps) if f0 is None else [eps]
    f = np.zeros(dom.shape) if f0 is None else np.array(f0, float)
    it, err, logp = 0, np.inf, None
    for si, e in enumerate(sched):
        last = si == len(sched) - 1
        Lf = L(f, e)
        n = max_iter if last else stage_iters
        for _ in range(n):
            g = e * lb - Lf
            Lg = L(g, e)
            logp = energy.kl_prox(Lg / e, tau, e, V, vol, log_p0=logp)
            f = e * logp - Lg
            Lf_new = L(f, e)
            it += 1
            with np.errstate(over="ignore", invalid="ignore"):
                err = float(np.max(np.abs(b * np.expm1((Lf_new - Lf) / e)))) / float(np.max(b))
            Lf = Lf_new
            if last and err <= tol:
                break
    p = np.exp(logp)
    rho = GridMeasure.from_density(dom, p / vol)
    # duals in the gauge of ot.sinkhorn (plan relative to the product of marginals)
    with np.errstate(divide="ignore", invalid="ignore"):
        warm = {"f": np.where(p > 0, f - eps * logp, 0.0), "g": np.where(b > 0, g - eps * lb, 0.0)}
    return rho, it, err, {"f": f, "eps": eps, "warm": warm}


# --- driver -------------------------------------------------------------------------


def h0_guard(h, semiconvexity):
    """Refuse ``h >= 1 / (2 C)`` when the semiconvexity constant is known."""
    if semiconvexity is not None and semiconvexity > 0 and h >= 1.0 / (2.0 * semiconvexity):
        raise ValueError(f"h={h} violates h < 1/(2C) = {1 / (2 * semiconvexity):.4g}")


def jko_step(rho_t: GridMeasure, V, energy: EnergySpec, h: float, backend: str = "auto", tol: float = 1e-7,
             max_iter: int = 5000, eps: float | None = None, semiconvexity: float | None = None,
             init=None, remap: str = "cubic", need_potential: bool = True) -> JKOStepResult:
    """One semi-implicit JKO step from ``rho_t`` with frozen potential ``V``.

    If the inner solver fails or does not beat ``rho_t`` itself as a
    competitor (gap above ``1e-8``), ``rho_t`` is returned with
    ``fallback=True``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    h0_guard(h, semiconvexity)
    dom = rho_t.domain
    V = np.broadcast_to(np.asarray(V, float), dom.shape)
    if not np.all(np.isfinite(V)):
        raise ValueError("V has non-finite entries")
    if backend == "auto":
        backend = "quantile" if dom.dim == 1 else "entropic"
    if eps is None:
        eps = min(dom.dx) ** 2
    comp, _, e0, v0 = objective(rho_t, rho_t, V, energy, h, w2sq=0.0)
    info = {}
    try:
        if backend == "quantile":
            if dom.dim != 1:
                raise ValueError("quantile backend is 1D only")
            rho, it, res, info = _quantile_step(rho_t, V, energy, h, tol, max_iter, remap, init)
        elif backend == "entropic":
            rho, it, res, info = _entropic_step(rho_t, V, energy, h, eps, tol, max_iter, f0=init)
        else:
            raise ValueError(f"unknown backend {backend!r}")
        failed = not np.isfinite(res)
    except (FloatingPointError, np.linalg.LinAlgError, JKOError) as exc:
        rho, it, res, failed = rho_t, 0, np.inf, True
        info = {"error": str(exc)}
    total, w2sq, e, v = objective(rho, rho_t, V, energy, h, eps=eps, warm=info.get("warm"))
    converged = bool(res <= tol)
    fallback = failed or (total - comp) / (2 * h) > GAP_TOL
    if fallback:
        info["rejected"] = {"objective": total, "residual": res}
        rho, total, w2sq, e, v = rho_t, comp, 0.0, e0, v0
    otr = transport_potential(rho, rho_t, eps) if need_potential else None
    phi = None if otr is None else otr.potential
    return JKOStepResult(rho, total, w2sq, e, v, phi, it, res, converged, fallback, backend, comp, h, otr, info)


def transport_potential(rho: GridMeasure, rho_t: GridMeasure, eps=None):
    """Kantorovich potential from ``rho`` to ``rho_t`` and the map, as an
    :class:`~splitjko.ot.OTResult`."""
    if rho.domain.dim == 1:
        return ot.w2_exact_1d(rho, rho_t)
    return ot.w2_entropic(rho, rho_t, eps=eps)


def competitor_gap(result: JKOStepResult, rho_t: GridMeasure, V, energy: EnergySpec, h: float) -> float:
    """``W2^2(rho, rho_t)/(2h) - [F(rho_t) - F(rho) + int V (rho_t - rho)]``."""
    rho = result.rho
    if rho is rho_t:
        return 0.0
    w2sq = _w2sq(rho, rho_t)
    dF = internal_energy(energy, rho_t) - internal_energy(energy, rho)
    dV = rho_t.integrate(V) - rho.integrate(V)
    return w2sq / (2 * h) - (dF + dV)


def euler_lagrange_residual(result: JKOStepResult, rho_t: GridMeasure, V, energy: EnergySpec, h: float,
                            grad_V=None) -> float:
    """``int |h (grad V rho + grad P(rho)) + grad(phi) rho| / h`` over
    non-vacuum cells, with ``grad phi = x - T`` from the optimal map ``T``
    of ``rho`` onto ``rho_t``. ``grad_V`` overrides the finite-difference
    gradient of ``V``."""
    from .helmholtz import grad
    from .measures import pressure_field

    rho = result.rho
    dom = rho.domain
    otr = result.transport if result.transport is not None else transport_potential(rho, rho_t)
    T = np.asarray(otr.map)
    if dom.dim == 1:
        T = T[None]
    x = np.stack(dom.centers())
    gphi = x - T
    if dom.periodic:
        L = np.array(dom.lengths).reshape((-1,) + (1,) * dom.dim)
        gphi = gphi - L * np.round(gphi / L)
    gV = grad(V, dom) if grad_V is None else np.asarray(grad_V).reshape(gphi.shape)
    gP = grad(pressure_field(energy, rho), dom)
    r = h * (gV * rho.density + gP) + gphi * rho.density
    live = rho.density > VACUUM
    norm = np.sqrt(np.sum(np.where(live, r, 0.0) ** 2, axis=0))
    return float(np.sum(norm) * dom.cell_volume / h)
