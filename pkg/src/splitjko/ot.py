"""Quadratic-cost optimal transport between grid measures.

Three routes to the same quantity:

* :func:`w2_exact_1d` -- monotone rearrangement of the two cumulative
  distributions, exact for piecewise-constant densities (``mode="density"``)
  or for point masses at cell centers (``mode="atoms"``);
* :func:`w2_entropic` -- log-domain Sinkhorn on a separable Gibbs kernel,
  debiased, usable in 1D and 2D;
* :func:`brute_force_lp` -- the transportation linear program, for small
  supports only (test oracle).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from . import kernels
from .measures import VACUUM, Domain, GridMeasure


class OTError(RuntimeError):
    pass


@dataclass
class OTResult:
    """Outcome of a transport computation from ``source`` to ``target``.

    ``cost`` is the squared distance. ``plan`` is a sparse cell-to-cell
    coupling (mass units) when available. ``map`` gives the (barycentric)
    image of each source cell center, NaN on vacuum cells. ``potential`` is
    the Kantorovich potential for the cost ``|x-y|^2 / 2`` with zero
    source-weighted mean, so that ``grad(potential) = x - map``.
    """

    cost: float
    source: GridMeasure | None = None
    target: GridMeasure | None = None
    plan: object = None
    map: np.ndarray | None = None
    potential: np.ndarray | None = None
    dual: tuple | None = None
    info: dict = field(default_factory=dict)

    def summary(self) -> dict:
        out = {"cost": self.cost}
        for key in ("iterations", "marginal_error", "converged", "eps", "plan_cost"):
            if key in self.info:
                out[key] = self.info[key]
        return out


def _check_same(rho: GridMeasure, mu: GridMeasure):
    if rho.domain != mu.domain:
        raise ValueError("measures live on different domains")


# --- exact 1D ---------------------------------------------------------------


def _periodic_cut(rho, mu):
    """Cell index where a periodic interval is cut open: the lightest cell of
    ``rho + mu``. Only sound when little mass sits near that cell."""
    return int(np.argmin(rho.density + mu.density))


def _unrolled(domain: Domain, cut: int):
    """Cell order and edge coordinates after cutting a periodic axis at ``cut``."""
    n = domain.cells[0]
    order = np.roll(np.arange(n), -cut)
    edges = domain.axis_edges(0)
    lo = edges[cut]
    L = domain.lengths[0]
    xs = lo + domain.dx[0] * np.arange(n + 1)
    return order, xs, L


def _segments(masses, edges):
    """Positive-mass pieces of a piecewise-linear quantile function."""
    cdf = np.concatenate([[0.0], np.cumsum(masses)])
    cdf /= cdf[-1]
    keep = masses > 0
    return (
        np.ascontiguousarray(cdf[:-1][keep]),
        np.ascontiguousarray(cdf[1:][keep]),
        np.ascontiguousarray(edges[:-1][keep]),
        np.ascontiguousarray(edges[1:][keep]),
    )


def _extend(levels_hi, values, L, copies=(-1, 0, 1, 2)):
    """Lift a quantile description to the real line: ``Y(u + k) = Y(u) + k L``."""
    if L is None:
        return levels_hi, values, np.arange(len(values))
    lv = np.concatenate([levels_hi + k for k in copies])
    vals = np.concatenate([values + k * L for k in copies])
    idx = np.tile(np.arange(len(values)), len(copies))
    return lv, vals, idx


def _merge(ma, mb, theta=0.0, L=None, yb=None):
    """Merged monotone coupling of two mass vectors.

    Returns intervals ``[u, v]`` of the source quantile axis, the source cell
    ``ia`` and target cell ``ib`` they pair, and the (lifted) target
    position when ``yb`` is given. With ``L`` set the target quantile
    function is lifted periodically and shifted by ``theta``.
    """
    ca = np.cumsum(ma) / np.sum(ma)
    cb = np.cumsum(mb) / np.sum(mb)
    yb = np.zeros(len(mb)) if yb is None else yb
    cbx, ybx, ibx = _extend(cb, yb, L)
    if L is None:
        shifted = cb
    else:
        shifted = cbx - theta
        shifted = shifted[(shifted > 0) & (shifted < 1)]
    knots = np.union1d(np.concatenate([[0.0, 1.0], ca]), shifted)
    knots = knots[(knots >= 0) & (knots <= 1)]
    u, v = knots[:-1], knots[1:]
    keep = v > u
    u, v = u[keep], v[keep]
    mid = 0.5 * (u + v)
    ia = np.minimum(np.searchsorted(ca, mid), len(ma) - 1)
    jb = np.minimum(np.searchsorted(cbx, mid + theta), len(cbx) - 1)
    return u, v, ia, ibx[jb], ybx[jb], ca, cb


def _density_segments(mb, edges, L, theta):
    """Target segments for :func:`kernels.quantile_l2`, lifted and shifted."""
    s0, s1, x0, x1 = _segments(mb, edges)
    if L is None:
        return s0, s1, x0, x1
    parts = [[], [], [], []]
    for k in (-1, 0, 1, 2):
        a0, a1 = s0 + k - theta, s1 + k - theta
        keep = (a1 > 0) & (a0 < 1)
        for lst, arr in zip(parts, (a0, a1, x0 + k * L, x1 + k * L)):
            lst.append(arr[keep])
    return tuple(np.ascontiguousarray(np.concatenate(q)) for q in parts)


def _shift_breaks(ma, mb):
    """Shifts in [-1, 1] where a cumulative level of ``mb`` meets one of
    ``ma``; the shift cost is smooth between consecutive ones."""
    ca = np.concatenate([[0.0], np.cumsum(ma)]) / np.sum(ma)
    cb = np.concatenate([[0.0], np.cumsum(mb)]) / np.sum(mb)
    d = np.mod(np.subtract.outer(cb[np.r_[True, mb > 0]], ca[np.r_[True, ma > 0]]).ravel(), 1.0)
    return np.unique(np.concatenate([d - 1.0, d, [-1.0, 1.0]]))


def _circle_shift(cost_of, breaks=None):
    """Minimize the convex shift cost ``theta -> cost_of(theta)`` on [-1, 1].

    Bounded Brent gets close; with the smoothness ``breaks`` the result is
    then polished over the nearby pieces (endpoints plus the vertex of the
    quadratic through each piece), which settles minima sitting on a kink.
    """
    from scipy.optimize import minimize_scalar

    res = minimize_scalar(cost_of, bounds=(-1.0, 1.0), method="bounded", options={"xatol": 1e-13})
    best, cost = float(res.x), float(min(res.fun, cost_of(float(res.x))))
    if breaks is None:
        return best, cost
    k = int(np.searchsorted(breaks, best))
    near = breaks[max(k - 3, 0):k + 3]
    vals = [cost_of(float(t)) for t in near]
    cands = list(zip(vals, near))
    for (p, fp), (q, fq) in zip(zip(near, vals), zip(near[1:], vals[1:])):
        m = 0.5 * (p + q)
        fm = cost_of(float(m))
        curv = fp - 2.0 * fm + fq
        if curv > 0:
            t = m + 0.25 * (q - p) * (fp - fq) / curv
            if p < t < q:
                cands.append((cost_of(float(t)), t))
    c, t = min(cands)
    if c < cost:
        best, cost = float(t), float(c)
    return best, cost


def w2_exact_1d(rho: GridMeasure, mu: GridMeasure, mode: str = "density", with_plan: bool = True) -> OTResult:
    """Exact squared W2 between two 1D grid measures.

    ``mode="density"`` treats each cell as uniform mass on the cell (the
    scheme's interpretation); ``mode="atoms"`` places each cell's mass at
    its center (matches :func:`brute_force_lp` on the same points).
    On a periodic interval the monotone coupling of the lifted quantile
    functions is optimized over the cyclic shift ``theta`` (the cost is
    convex in ``theta``).
    """
    _check_same(rho, mu)
    dom = rho.domain
    if dom.dim != 1:
        raise ValueError("w2_exact_1d needs 1D measures")
    n = dom.cells[0]
    if dom.periodic:
        cut = _periodic_cut(rho, mu)
        order, edges, L = _unrolled(dom, cut)
    else:
        order, edges, L = np.arange(n), dom.axis_edges(0), None
    ma, mb = rho.masses[order], mu.masses[order]
    centers = 0.5 * (edges[:-1] + edges[1:])

    if mode == "density":
        sa = _segments(ma, edges)

        def cost_of(theta):
            return kernels.quantile_l2(*sa, *_density_segments(mb, edges, L, theta))
    elif mode == "atoms":
        def cost_of(theta):
            u, v, ia, _, y, _, _ = _merge(ma, mb, theta, L, centers)
            return float(np.sum((v - u) * (centers[ia] - y) ** 2))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if L is None:
        theta, cost = 0.0, cost_of(0.0)
    else:
        theta, cost = _circle_shift(cost_of, _shift_breaks(ma, mb))

    res = OTResult(cost=max(cost, 0.0), source=rho, target=mu, info={"mode": mode, "shift": theta})
    if not with_plan:
        return res

    u, v, ia, ib, y, ca, cb = _merge(ma, mb, theta, L, centers)
    w = v - u
    plan = sp.coo_matrix((w, (order[ia], order[ib])), shape=(n, n)).tocsr()
    if mode == "atoms":
        tsum = np.bincount(ia, weights=w * y, minlength=n)
        with np.errstate(invalid="ignore", divide="ignore"):
            tmap = tsum / ma
    else:
        # T = G^{-1}(F + theta) at cell centers, on the lifted target
        Fa = ca - 0.5 * ma / np.sum(ma) + theta
        segs = _density_segments(mb, edges, L, 0.0)
        if L is not None:
            o = np.argsort(segs[0], kind="stable")
            segs = tuple(q[o] for q in segs)
        k = np.clip(np.searchsorted(segs[0], Fa, side="right") - 1, 0, len(segs[0]) - 1)
        tmap = segs[2][k] + (Fa - segs[0][k]) / (segs[1][k] - segs[0][k]) * (segs[3][k] - segs[2][k])
    vac = rho.density[order] <= VACUUM
    tmap = np.where(vac, np.nan, tmap)
    disp = centers - tmap
    phi = _integrate_1d(centers, disp, ma)
    out_map = np.empty(n)
    out_phi = np.empty(n)
    out_map[order] = tmap
    out_phi[order] = phi
    if dom.periodic:
        lo = dom.bounds[0][0]
        out_map = lo + np.mod(out_map - lo, L)
    res.plan = plan
    res.map = out_map
    res.potential = out_phi
    return res


def _integrate_1d(x, dphi, weights):
    """Cumulative trapezoid of ``dphi`` (NaN gaps filled linearly), gauge
    fixed to zero weighted mean."""
    good = np.isfinite(dphi)
    if not good.any():
        raise OTError("potential undefined: source is vacuum everywhere")
    d = np.interp(x, x[good], dphi[good])
    phi = np.concatenate([[0.0], np.cumsum(0.5 * (d[1:] + d[:-1]) * np.diff(x))])
    return phi - np.sum(phi * weights) / np.sum(weights)


# --- entropic -----------------------------------------------------------------


def axis_costs(domain: Domain):
    """Per-axis squared-distance matrices (minimum image on periodic axes)."""
    out = []
    for a in range(domain.dim):
        c = domain.axis_centers(a)
        d = c[:, None] - c[None, :]
        if domain.periodic:
            L = domain.lengths[a]
            d = d - L * np.round(d / L)
        out.append(np.ascontiguousarray(d * d))
    return out


def logsumexp_kernel(h, costs, eps):
    """``L(h)_i = eps * log sum_j exp((h_j - C_ij) / eps)`` for a separable
    cost ``C = sum_axis C_axis``; ``h`` has grid shape."""
    if h.ndim == 1:
        return kernels.softmin_rows(np.ascontiguousarray(h[None, :]), costs[0], eps)[0]
    a = kernels.softmin_rows(np.ascontiguousarray(h), costs[1], eps)
    b = kernels.softmin_rows(np.ascontiguousarray(a.T), costs[0], eps)
    return np.ascontiguousarray(b.T)


def _log_weights(m):
    with np.errstate(divide="ignore"):
        return np.log(m)


def _dual_value(f, g, a, b):
    return float(np.sum(np.where(a > 0, f * a, 0.0)) + np.sum(np.where(b > 0, g * b, 0.0)))


def _eps_schedule(domain, eps, scaling=0.5):
    start = max(domain.diameter() ** 2 / 4, eps)
    if domain.periodic:
        start = max(sum((L / 2) ** 2 for L in domain.lengths), eps)
    n = max(int(math.ceil(math.log(start / eps) / -math.log(scaling))), 0)
    return [start * scaling**k for k in range(n)] + [eps]


@dataclass
class SinkhornState:
    f: np.ndarray
    g: np.ndarray
    iterations: int
    marginal_error: float
    converged: bool


def sinkhorn(a, b, costs, eps, domain, tol=1e-9, max_iter=20000, f0=None, g0=None, anneal=True,
             relax=1.0) -> SinkhornState:
    """Log-domain Sinkhorn for ``min <C, pi> + eps KL(pi | a x b)``.

    ``a`` and ``b`` are mass arrays of grid shape. Stops when the first
    marginal is off by less than ``tol`` in every cell. ``relax`` in
    ``[1, 2)`` over-relaxes the final-stage updates once the marginal error
    is below ``1e-3``.
    """
    if not 1.0 <= relax < 2.0:
        raise ValueError("relax must lie in [1, 2)")
    la, lb = _log_weights(a), _log_weights(b)
    schedule = _eps_schedule(domain, eps) if (anneal and f0 is None) else [eps]
    f = np.zeros_like(a) if f0 is None else f0.copy()
    g = np.zeros_like(b) if g0 is None else g0.copy()
    it = 0
    for e in schedule[:-1]:
        # symmetric averaged updates while annealing
        ft = -logsumexp_kernel(g + e * lb, costs, e)
        gt = -logsumexp_kernel(f + e * la, costs, e)
        f, g = 0.5 * (f + ft), 0.5 * (g + gt)
        it += 1
    err = np.inf
    f = -logsumexp_kernel(g + eps * lb, costs, eps)
    live_a, live_b = np.isfinite(la), np.isfinite(lb)
    # over-relax only close to convergence; an error climbing back above
    # 1e-2 switches to plain updates for good
    w, relaxed = 1.0, False
    while it < max_iter:
        gn = -logsumexp_kernel(f + eps * la, costs, eps)
        g = gn if w == 1.0 else np.where(live_b, g + w * (gn - g), gn)
        fn = -logsumexp_kernel(g + eps * lb, costs, eps)
        with np.errstate(over="ignore", invalid="ignore"):
            err = float(np.max(np.abs(a * np.expm1((f - fn) / eps))))
        f = fn if w == 1.0 else np.where(live_a, f + w * (fn - f), fn)
        it += 1
        if err < tol:
            break
        if w != 1.0 and not err <= 1e-2:
            w, relax = 1.0, 1.0
        elif relax != 1.0 and err < 1e-3:
            w, relaxed = relax, True
    if relaxed:
        # finish on a plain half-step so that the second marginal is exact
        g = -logsumexp_kernel(f + eps * la, costs, eps)
    return SinkhornState(f, g, it, err, bool(err < tol))


def sinkhorn_symmetric(a, costs, eps, domain, tol=1e-9, max_iter=20000, f0=None):
    """Self-transport ``OT_eps(a, a)``; returns ``(f, iterations, error)``."""
    la = _log_weights(a)
    f = np.zeros_like(a) if f0 is None else f0.copy()
    schedule = _eps_schedule(domain, eps) if f0 is None else [eps]
    it = 0
    for e in schedule[:-1]:
        f = 0.5 * (f - logsumexp_kernel(f + e * la, costs, e))
        it += 1
    err = np.inf
    while it < max_iter:
        fn = -logsumexp_kernel(f + eps * la, costs, eps)
        with np.errstate(over="ignore", invalid="ignore"):
            err = float(np.max(np.abs(a * np.expm1((f - fn) / (2 * eps)))))
        f = 0.5 * (f + fn)
        it += 1
        if err < tol:
            break
    return f, it, err


def barycentric_map(f, g, b, costs, eps, domain):
    """``E[y | x]`` under the entropic plan, one array per axis."""
    h = g + eps * _log_weights(b)
    base = logsumexp_kernel(h, costs, eps)
    out = []
    for ax, y in enumerate(domain.centers()):
        shift = domain.bounds[ax][0] - 1.0
        w = eps * np.log(y - shift)
        out.append(np.exp((logsumexp_kernel(h + w, costs, eps) - base) / eps) + shift)
    return np.stack(out)


def entropic_plan_cost(f, g, a, b, costs, eps, domain):
    """``<C, pi>`` for the entropic plan, computed without forming ``pi``.

    Per axis, ``E[C_a | x]`` follows from a second kernel application with
    the axis cost replaced by ``C_a - eps log C_a``.
    """
    h = g + eps * _log_weights(b)
    base = logsumexp_kernel(h, costs, eps)
    live = a > 0
    total = 0.0
    for ax in range(domain.dim):
        with np.errstate(divide="ignore"):
            mod = np.ascontiguousarray(costs[ax] - eps * np.log(costs[ax]))
        c = list(costs)
        c[ax] = mod
        cond = np.exp((logsumexp_kernel(h, c, eps) - base) / eps)
        total += float(np.sum(np.where(live, a * cond, 0.0)))
    return total


def w2_entropic(rho: GridMeasure, mu: GridMeasure, eps: float | None = None, tol: float = 1e-9,
                max_iter: int = 50000, warm: dict | None = None, strict: bool = False,
                relax: float = 1.8) -> OTResult:
    """Debiased entropic estimate of squared W2.

    ``cost = OT_eps(rho, mu) - (OT_eps(rho, rho) + OT_eps(mu, mu)) / 2``.
    ``eps`` defaults to the squared cell size. ``warm`` may carry dual
    potentials from a previous call (keys ``f``, ``g``, ``fa``, ``fb``).
    With ``strict=True`` non-convergence raises :class:`OTError`.
    ``relax`` is the over-relaxation factor of the Sinkhorn updates.
    """
    _check_same(rho, mu)
    dom = rho.domain
    if eps is None:
        eps = min(dom.dx) ** 2
    if eps <= 0:
        raise ValueError("eps must be positive")
    costs = axis_costs(dom)
    a, b = rho.masses, mu.masses
    warm = warm or {}
    st = sinkhorn(a, b, costs, eps, dom, tol, max_iter, warm.get("f"), warm.get("g"), relax=relax)
    fa, ita, erra = sinkhorn_symmetric(a, costs, eps, dom, tol, max_iter, warm.get("fa"))
    fb, itb, errb = sinkhorn_symmetric(b, costs, eps, dom, tol, max_iter, warm.get("fb"))
    ot_ab = _dual_value(st.f, st.g, a, b)
    ot_aa = 2 * _dual_value(fa, 0 * fa, a, a)
    ot_bb = 2 * _dual_value(fb, 0 * fb, b, b)
    cost = ot_ab - 0.5 * (ot_aa + ot_bb)
    err = max(st.marginal_error, erra, errb)
    converged = st.converged and erra < tol and errb < tol
    if strict and not converged:
        raise OTError(f"Sinkhorn did not converge: marginal error {err:.3e}")
    tmap = barycentric_map(st.f, st.g, b, costs, eps, dom)
    vac = rho.density <= VACUUM
    tmap = np.where(vac[None], np.nan, tmap)
    phi = st.f / 2.0
    phi = phi - rho.integrate(phi)
    if dom.dim == 1:
        tmap = tmap[0]
    info = {
        "eps": eps,
        "iterations": st.iterations + ita + itb,
        "marginal_error": err,
        "converged": converged,
        "ot_eps": ot_ab,
        "plan_cost": entropic_plan_cost(st.f, st.g, a, b, costs, eps, dom),
        "warm": {"f": st.f, "g": st.g, "fa": fa, "fb": fb},
    }
    return OTResult(cost=max(cost, 0.0), source=rho, target=mu, map=tmap, potential=phi,
                    dual=(st.f, st.g), info=info)


def entropic_plan(result: OTResult) -> np.ndarray:
    """Dense plan of an entropic result (small grids only)."""
    rho, mu = result.source, result.target
    dom = rho.domain
    f, g = result.dual
    eps = result.info["eps"]
    costs = axis_costs(dom)
    C = costs[0] if dom.dim == 1 else (costs[0][:, None, :, None] + costs[1][None, :, None, :]).reshape(
        dom.cells[0] * dom.cells[1], -1)
    a, b = rho.masses.ravel(), mu.masses.ravel()
    with np.errstate(divide="ignore"):
        logp = (f.ravel()[:, None] + g.ravel()[None, :] - C) / eps + np.log(a)[:, None] + np.log(b)[None, :]
    return np.exp(logp)


# --- linear programming oracle ---------------------------------------------------


MAX_LP_SUPPORT = 64


def brute_force_lp(x, a, y, b) -> OTResult:
    """Exact discrete OT by the transportation LP (HiGHS simplex).

    ``x`` and ``y`` are ``(n, d)`` point arrays (or 1D arrays), ``a`` and
    ``b`` nonnegative weights with equal sums.
    """
    x = np.asarray(x, float).reshape(len(a), -1)
    y = np.asarray(y, float).reshape(len(b), -1)
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    n, m = len(a), len(b)
    if n > MAX_LP_SUPPORT or m > MAX_LP_SUPPORT:
        raise ValueError(f"support too large for the LP oracle (max {MAX_LP_SUPPORT})")
    C = ((x[:, None, :] - y[None, :, :]) ** 2).sum(-1)
    rows = sp.kron(sp.eye(n), np.ones((1, m)))
    cols = sp.kron(np.ones((1, n)), sp.eye(m))
    A = sp.vstack([rows, cols]).tocsr()
    res = linprog(C.ravel(), A_eq=A, b_eq=np.concatenate([a, b]), bounds=(0, None), method="highs")
    if res.status != 0:
        raise OTError(f"LP failed: {res.message}")
    plan = res.x.reshape(n, m)
    with np.errstate(invalid="ignore", divide="ignore"):
        tmap = plan @ y / a[:, None]
    return OTResult(cost=float(np.sum(plan * C)), plan=plan, map=tmap, info={"method": "highs"})


def grid_support(rho: GridMeasure):
    """Points and masses of the nonzero cells of ``rho``."""
    centers = np.stack([c.ravel() for c in rho.domain.centers()], axis=1)
    m = rho.masses.ravel()
    keep = m > 0
    return centers[keep], m[keep]


def kantorovich_potential(result: OTResult) -> np.ndarray:
    """Potential ``phi`` with ``grad phi = x - map`` and zero source mean."""
    rho = result.source
    if rho is None:
        raise OTError("result carries no source measure")
    if np.all(rho.density <= VACUUM):
        raise OTError("vacuum-only source")
    if result.potential is not None:
        return result.potential
    if result.map is None:
        raise OTError("result has neither a map nor dual potentials")
    if rho.domain.dim != 1:
        raise OTError("potential reconstruction from a map is 1D only")
    x = rho.domain.axis_centers(0)
    return _integrate_1d(x, x - result.map, rho.masses)


def w2(rho: GridMeasure, mu: GridMeasure, eps: float | None = None, **kw) -> OTResult:
    """Default route: exact in 1D, entropic otherwise."""
    if rho.domain.dim == 1:
        return w2_exact_1d(rho, mu, **kw)
    return w2_entropic(rho, mu, eps=eps, **kw)
