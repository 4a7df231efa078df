"""Numerical checks of the scheme's a priori estimates, of its discrete weak
formulation, and h-convergence studies.
"""
from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import helmholtz as hz
from . import ot
from . import scheme as sc
from . import transport as tr
from .fitting import PowerFit, fit_power_law
from .measures import GridMeasure, internal_energy, pressure_field, second_moment

__all__ = [
    "BumpFunction", "TestFunctionBasis", "weak_residual", "bv_pressure_report", "estimate_report",
    "interpolation_agreement", "convergence_study", "fit_power_law", "PowerFit", "write_json", "write_csv",
    "write_dat", "w2",
]


def w2(a: GridMeasure, b: GridMeasure, eps=None) -> float:
    """W2 (not squared) with the default backend for the dimension."""
    if a is b:
        return 0.0
    if a.domain.dim == 1:
        return math.sqrt(ot.w2_exact_1d(a, b, with_plan=False).cost)
    return math.sqrt(ot.w2_entropic(a, b, eps=eps).cost)


# --- test functions ----------------------------------------------------------------------


@dataclass(frozen=True)
class BumpFunction:
    """``phi(t, x) = b(x) c(t)`` with ``b = (1 - |x - center|^2 / r^2)^3_+``
    and ``c = (1 - (t / t_cut)^2)^3`` for ``t < t_cut``, zero after."""

    center: tuple
    radius: float
    t_cut: float

    def _q(self, *x):
        r2 = sum((xi - ci) ** 2 for xi, ci in zip(x, self.center))
        return 1.0 - r2 / self.radius**2, r2

    def space(self, *x):
        q, _ = self._q(*x)
        return np.where(q > 0, q**3, 0.0)

    def space_grad(self, *x):
        q, _ = self._q(*x)
        f = np.where(q > 0, -6.0 * q * q / self.radius**2, 0.0)
        return np.stack([f * (xi - ci) for xi, ci in zip(x, self.center)])

    def space_laplacian(self, *x):
        q, r2 = self._q(*x)
        d = len(self.center)
        R2 = self.radius**2
        return np.where(q > 0, 24.0 * q * r2 / R2**2 - 6.0 * d * q * q / R2, 0.0)

    def time(self, t):
        u = t / self.t_cut
        return (1.0 - u * u) ** 3 if u < 1 else 0.0

    def time_derivative(self, t):
        u = t / self.t_cut
        return -6.0 * u * (1.0 - u * u) ** 2 / self.t_cut if u < 1 else 0.0

    @property
    def hessian_sup(self):
        """``sup |D^2 b|`` (spectral norm), attained at the center."""
        return 6.0 / self.radius**2


@dataclass
class TestFunctionBasis:
    functions: list

    @classmethod
    def default(cls, domain, T, radii=None, per_axis=3, t_cut_fraction=0.9):
        """Bumps on a regular lattice of centers well inside the domain."""
        radii = radii or [0.3 * min(domain.lengths)]
        funcs = []
        for r in radii:
            axes = []
            for a in range(domain.dim):
                lo, hi = domain.bounds[a]
                if domain.periodic:
                    axes.append(np.linspace(lo, hi, per_axis, endpoint=False) + 0.5 * (hi - lo) / per_axis)
                else:
                    axes.append(np.linspace(lo + r * 1.05, hi - r * 1.05, per_axis) if hi - lo > 2.1 * r
                                else np.array([0.5 * (lo + hi)]))
            for c in itertools.product(*axes):
                funcs.append(BumpFunction(tuple(float(v) for v in c), float(r), t_cut_fraction * T))
        return cls(funcs)


# --- discrete weak formulation ----------------------------------------------------------------


def _plan_pairs(rho: GridMeasure, rho_t: GridMeasure, eps=None):
    """Coupling between cell centers: ``(i, j, mass)`` flat indices."""
    if rho.domain.dim == 1:
        res = ot.w2_exact_1d(rho, rho_t, mode="atoms")
        P = res.plan.tocoo()
        return P.row, P.col, P.data
    res = ot.w2_entropic(rho, rho_t, eps=eps)
    P = ot.entropic_plan(res)
    i, j = np.nonzero(P > 0)
    return i, j, P[i, j]


def _displacement(dom, xi, yj):
    d = yj - xi
    if dom.periodic:
        L = np.array(dom.lengths)[:, None]
        d = d - L * np.round(d / L)
    return d


def _wrap_center(dom, f: BumpFunction, pts):
    """Evaluate ``b`` at points, choosing the nearest periodic image."""
    if not dom.periodic:
        return pts
    out = []
    for a, c in enumerate(f.center):
        L = dom.lengths[a]
        out.append(c + (pts[a] - c) - L * np.round((pts[a] - c) / L))
    return np.stack(out)


def weak_residual(traj: sc.SchemeTrajectory, basis: TestFunctionBasis | None = None, quad_nodes: int = 4,
                  eps=None) -> list:
    """Terms of the discrete weak identity for each test function.

    With ``gamma_k`` the optimal plan between ``rho^{k+1}`` (x) and
    ``rho~^{k+1}`` (y) on cell centers and ``phi_k = phi(t_{k+1}, .)``:

    * ``lhs``: ``sum_k int rho^k [phi(t_{k+1}, X_h^k(h, x)) - phi(t_k, x)]``
      (transport term integrated along discrete characteristics);
    * ``el_term``: ``sum_k int (y - x) . grad phi_k(x) dgamma_k``;
    * ``remainder``: ``sum_k int R[phi_k] dgamma_k``, with
      ``remainder_bound = sup|D^2 phi| / 2 * sum_k int |x - y|^2 dgamma_k``;
    * ``initial``, ``final``: ``int phi(0) rho_0``, ``int phi(T) rho^N``;
    * ``transport_defect``: semi-Lagrangian grid versus particle pushforward;
    * ``imbalance``: ``lhs - (el_term + remainder + transport_defect + final
      - initial + marginal_defect)``, zero up to round-off.

    Also reported: ``pressure_term`` and ``potential_term`` (the finite
    difference form ``h sum int grad P . grad phi_k`` and
    ``h sum int grad V . grad phi_k rho^{k+1}``), ``el_defect = el_term -
    pressure_term - potential_term``, ``lhs_quadrature`` (Gauss-Legendre in
    time of ``int rho~^2 (d_t phi + W . grad phi)``), and the continuum
    residual of the weak formulation evaluated on ``rho_h``.
    """
    cfg = traj.config
    dom = traj.domain
    N, h = traj.steps, traj.h
    if any(k not in traj.rho for k in range(N + 1)):
        raise ValueError("weak_residual needs every step stored (snapshot_stride = 1)")
    basis = basis or TestFunctionBasis.default(dom, traj.T)
    energy = cfg.energy
    drift = cfg.drift if cfg.drift is not None else hz.zero_drift()
    X = np.stack(dom.centers())
    Xf = X.reshape(dom.dim, -1)
    vol = dom.cell_volume
    gl_x, gl_w = np.polynomial.legendre.leggauss(quad_nodes)

    steps = []
    for k in range(N):
        rk, rk1, rt = traj.rho[k], traj.rho[k + 1], traj.rho_tilde[k + 1]
        W = traj.W.get(k)
        moving = W is not None and W.max_norm() > 0
        flow = tr.integrate_flow(W, h, cfg.substeps, cfg.velocity_order) if moving else None
        i, j, g = _plan_pairs(rk1, rt, eps)
        split = hz.decompose(hz.evaluate_drift(drift, rt))
        U_rho = hz.evaluate_drift(drift, rk1).values
        mids = []
        for xq in gl_x:
            s = 0.5 * h * (xq + 1.0)
            mids.append(tr.transport_step(rk, W, s, substeps=cfg.substeps, velocity_order=cfg.velocity_order,
                                          density_order=cfg.density_order).density if moving else rk.density)
        steps.append((rk, rk1, rt, W, flow, i, j, g, split.grad_V.values, U_rho, mids))

    out = []
    for f in basis.functions:
        rec = dict(center=f.center, radius=f.radius, t_cut=f.t_cut, hessian_sup=f.hessian_sup)
        lhs = lhs_q = el = rem = sq = pres = pot = tdef = mdef = cont = 0.0
        Xw = _wrap_center(dom, f, X)
        b0 = f.space(*Xw)
        gb = f.space_grad(*Xw)
        lb = f.space_laplacian(*Xw)
        for k, (rk, rk1, rt, W, flow, i, j, g, gV, U, mids) in enumerate(steps):
            t0, t1 = k * h, (k + 1) * h
            c0, c1 = f.time(t0), f.time(t1)
            # transport term along characteristics
            if flow is not None:
                end = f.space(*_wrap_center(dom, f, flow.forward))
            else:
                end = b0
            lhs += float(np.sum(rk.density * (c1 * end - c0 * b0)) * vol)
            tdef += float(np.sum(rk.density * c1 * end) * vol - np.sum(rt.density * c1 * b0) * vol)
            # time quadrature of int rho~2 (d_t phi + W . grad phi)
            adv = np.sum(W.values * gb, axis=0) if flow is not None else 0.0
            for xq, wq, mid in zip(gl_x, gl_w, mids):
                t = t0 + 0.5 * h * (xq + 1.0)
                integrand = f.time_derivative(t) * b0 + f.time(t) * adv
                lhs_q += 0.5 * h * wq * float(np.sum(mid * integrand) * vol)
            # plan terms with phi_k = phi(t_{k+1}, .)
            xi, yj = Xf[:, i], Xf[:, j]
            d = _displacement(dom, xi, yj)
            xi = _wrap_center(dom, f, xi)
            bx = f.space(*xi)
            by = f.space(*_wrap_center(dom, f, xi + d))
            gx = f.space_grad(*xi)
            lin = np.sum(d * gx, axis=0)
            el += c1 * float(np.sum(g * lin))
            rem += c1 * float(np.sum(g * (by - bx - lin)))
            sq += float(np.sum(g * np.sum(d * d, axis=0)))
            a_mass = np.bincount(i, weights=g, minlength=b0.size)
            b_mass = np.bincount(j, weights=g, minlength=b0.size)
            bf = b0.ravel()
            mdef += c1 * float(np.sum(bf * (rt.masses.ravel() - b_mass)) - np.sum(bf * (rk1.masses.ravel() - a_mass)))
            # finite-difference Euler-Lagrange form
            Pk = pressure_field(energy, rk1) if energy is not None else None
            if Pk is not None:
                gP = hz.grad(Pk, dom)
                pres += h * c1 * float(np.sum(gP * gb) * vol)
            pot += h * c1 * float(np.sum(gV * gb * rk1.density) * vol)
            # continuum weak formulation on rho_h (constant on the step)
            for xq, wq in zip(gl_x, gl_w):
                t = t0 + 0.5 * h * (xq + 1.0)
                val = rk1.density * (f.time_derivative(t) * b0 - f.time(t) * np.sum(gb * U, axis=0))
                if Pk is not None:
                    val = val + f.time(t) * Pk * lb
                cont += 0.5 * h * wq * float(np.sum(val) * vol)
        initial = float(np.sum(traj.rho[0].density * f.time(0.0) * b0) * vol)
        final = float(np.sum(traj.rho[N].density * f.time(N * h) * b0) * vol)
        rhs = el + rem + tdef + final - initial + mdef
        rec.update(lhs=lhs, lhs_quadrature=lhs_q, quadrature_gap=lhs_q - lhs, el_term=el, remainder=rem,
                   remainder_bound=0.5 * f.hessian_sup * sq, plan_sq_sum=sq, initial=initial, final=final,
                   transport_defect=tdef, marginal_defect=mdef, imbalance=lhs - rhs, pressure_term=pres,
                   potential_term=pot, el_defect=el - pres - pot, continuum_residual=cont + initial)
        out.append(rec)
    return out


# --- estimates ----------------------------------------------------------------------------------


def _grad_p_field(energy, rho):
    gP = hz.grad(pressure_field(energy, rho), rho.domain)
    return np.sqrt(np.sum(gP**2, axis=0))


def bv_pressure_report(traj: sc.SchemeTrajectory, energy=None, sets=None) -> dict:
    """``int_0^T int |grad P(rho_h)|`` and the tightness ratio.

    ``sets`` is a list of ``(center, radius)`` balls; for each,
    ``int int_A |grad P| / ((1 + sqrt h) (int int_A rho)^{1/2})`` over
    ``A = [0, T] x ball`` is computed and the maximum reported as
    ``tightness_constant``.
    """
    energy = energy or traj.config.energy
    dom, h, N = traj.domain, traj.h, traj.steps
    if any(k not in traj.rho for k in range(1, N + 1)):
        raise ValueError("bv_pressure_report needs every step stored")
    vol = dom.cell_volume
    if sets is None:
        sets = []
        for r in (0.5, 0.25, 0.125):
            span = [np.linspace(lo + r, hi - r, 5) for lo, hi in dom.bounds]
            for c in itertools.product(*span):
                sets.append((tuple(c), r * min(dom.lengths) / 2))
    gps = [_grad_p_field(energy, traj.rho[k]) for k in range(1, N + 1)]
    per_step = [h * float(np.sum(g) * vol) for g in gps]
    total = float(sum(per_step))
    jumps = []
    for k in range(N):
        r = traj.records[k]
        w = math.sqrt(max(r.get("w2sq_jko", 0.0), 0.0))
        jumps.append((per_step[k] - w) / h)
    tight = []
    for c, rad in sets:
        mask = sum((x - ci) ** 2 for x, ci in zip(dom.centers(), c)) <= rad * rad
        num = sum(h * float(np.sum(g[mask]) * vol) for g in gps)
        mass = sum(h * float(np.sum(traj.rho[k].density[mask]) * vol) for k in range(1, N + 1))
        if mass > 0:
            tight.append({"center": c, "radius": rad, "grad_p": num, "mass": mass,
                          "ratio": num / ((1 + math.sqrt(h)) * math.sqrt(mass))})
    return {
        "h": h,
        "T": traj.T,
        "total": total,
        "total_over_T": total / traj.T,
        "per_step": per_step,
        "step_constant": float(max(jumps)) if jumps else 0.0,
        "tightness": tight,
        "tightness_constant": max((t["ratio"] for t in tight), default=0.0),
    }


def _probe_steps(N, count):
    if N <= count:
        return list(range(N + 1))
    return sorted(set(np.linspace(0, N, count).round().astype(int).tolist()))


def estimate_report(traj: sc.SchemeTrajectory, energy=None, holder_probes: int = 12) -> dict:
    """Uniform bounds along one trajectory: energy, second moment, summed
    squared distances, and the Holder-type ratio
    ``W2(rho_h(t), rho_h(s)) / sqrt(|t - s| + h)``."""
    energy = energy or traj.config.energy
    recs = traj.records
    stored = traj.stored_steps()
    energies = [internal_energy(energy, traj.rho[k]) for k in stored] if energy is not None else []
    moments = [second_moment(traj.rho[k]) for k in stored]
    out = {
        "h": traj.h,
        "steps": traj.steps,
        "sup_abs_energy": max(abs(e) for e in energies) if energies else None,
        "sup_second_moment": max(moments),
        "sum_w2sq_jko": float(sum(r.get("w2sq_jko", 0.0) for r in recs)),
        "sum_w2sq_step": float(sum(r.get("w2sq_step", 0.0) for r in recs)),
        "sum_w2sq_transport": float(sum(r.get("w2sq_transport", 0.0) for r in recs)),
        "max_w2sq_transport": float(max((r.get("w2sq_transport", 0.0) for r in recs), default=0.0)),
    }
    ks = [k for k in _probe_steps(traj.steps, holder_probes) if k in traj.rho]
    ratios = []
    for a, b in itertools.combinations(ks, 2):
        d = w2(traj.rho[a], traj.rho[b])
        ratios.append(d / math.sqrt(abs(b - a) * traj.h + traj.h))
    out["holder_constant"] = max(ratios) if ratios else 0.0
    return out


def interpolation_agreement(traj: sc.SchemeTrajectory, probes: int = 8, fractions=(0.25, 0.5, 0.75, 1.0)) -> dict:
    """Pairwise sup-W2 among the three interpolations at probe times inside
    steps; ``constant = sup / sqrt(h)``."""
    N, h = traj.steps, traj.h
    ks = [k for k in _probe_steps(N - 1, probes) if k < N]
    sup = {"rho_tilde1": 0.0, "rho_tilde2": 0.0, "tilde1_tilde2": 0.0}
    for k in ks:
        for th in fractions:
            t = (k + th) * h
            a = sc.evaluate_interpolation(traj, t, "rho")
            b = sc.evaluate_interpolation(traj, t, "tilde1")
            c = sc.evaluate_interpolation(traj, t, "tilde2")
            sup["rho_tilde1"] = max(sup["rho_tilde1"], w2(a, b))
            sup["rho_tilde2"] = max(sup["rho_tilde2"], w2(a, c))
            sup["tilde1_tilde2"] = max(sup["tilde1_tilde2"], w2(b, c))
    s = max(sup.values())
    return {"h": h, "sup": s, "pairs": sup, "constant": s / math.sqrt(h),
            "tilde_constant_h": sup["tilde1_tilde2"] / h}


# --- convergence --------------------------------------------------------------------------------


def sup_error(traj: sc.SchemeTrajectory, reference) -> float:
    """``max_k W2(rho^k, reference(t_k))`` over the stored steps ``k >= 1``."""
    return max(w2(traj.rho[k], reference(k * traj.h)) for k in traj.stored_steps() if k > 0)


def convergence_study(rho0: GridMeasure, make_config, hs, reference="analytic", oracle=None,
                      agreement: bool = True, trajectories: dict | None = None) -> dict:
    """Run the scheme for each ``h`` and fit the error order.

    ``make_config(h)`` returns a :class:`SchemeConfig`. With
    ``reference="analytic"`` ``oracle(t)`` gives the exact solution; with
    ``"finest"`` the run at the smallest ``h`` is the reference, evaluated
    through its piecewise-constant interpolation. Precomputed runs may be
    passed as ``trajectories`` (keyed by ``h``); missing ones are run here.
    """
    hs = sorted(hs, reverse=True)
    if len(hs) < 3:
        raise ValueError("need at least three step sizes")
    trajs = dict(trajectories or {})
    for h in hs:
        if h not in trajs:
            trajs[h] = sc.run_scheme(rho0, make_config(h))
    rows = []
    if reference == "analytic":
        if oracle is None:
            raise ValueError("analytic reference needs an oracle")
        use = hs
        ref_for = lambda h: oracle
    elif reference == "finest":
        fine = trajs[hs[-1]]
        use = hs[:-1]
        ref_for = lambda h: (lambda t: sc.evaluate_interpolation(fine, t, "rho"))
    else:
        raise ValueError(f"unknown reference {reference!r}")
    for h in use:
        row = {"h": h, "error": sup_error(trajs[h], ref_for(h))}
        if agreement:
            ag = interpolation_agreement(trajs[h])
            row.update(agreement_sup=ag["sup"], agreement_constant=ag["constant"])
        rows.append(row)
    errs = [r["error"] for r in rows]
    fit = fit_power_law([r["h"] for r in rows], errs)
    monotone = all(b < a for a, b in zip(errs, errs[1:]))
    return {"rows": rows, "fit": fit.as_dict(), "order": fit.slope, "monotone": monotone,
            "reference": reference, "trajectories": trajs}


# --- serialization ---------------------------------------------------------------------------------


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, PowerFit):
        return _clean(obj.as_dict())
    return obj


def to_json(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n"


def write_json(obj, path):
    with open(path, "w") as fh:
        fh.write(to_json(obj))


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if v is None:
        return ""
    return str(v)


def to_csv(rows) -> str:
    """Flat CSV; columns in first-seen order across rows."""
    cols = []
    for r in rows:
        for c in r:
            if c not in cols:
                cols.append(c)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in cols])
    return buf.getvalue()


def write_csv(rows, path):
    with open(path, "w") as fh:
        fh.write(to_csv(rows))


def write_dat(columns: dict, path, comment: str | None = None):
    """Whitespace-separated columns with a ``#`` header, for gnuplot."""
    names = list(columns)
    data = np.column_stack([np.asarray(columns[n], float) for n in names])
    with open(path, "w") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        fh.write("# " + " ".join(names) + "\n")
        for row in data:
            fh.write(" ".join(format(v, ".17g") for v in row) + "\n")
