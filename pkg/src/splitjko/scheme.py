"""The splitting driver: transport by ``W[rho^k]``, then a JKO step with
``V[rho~^{k+1}]``; the three time interpolations of the iterates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import helmholtz as hz
from . import jko as jk
from . import ot
from . import transport as tr
from .measures import Domain, EnergySpec, GridMeasure, internal_energy, second_moment


class SchemeError(RuntimeError):
    """Solver failure at a given step."""

    def __init__(self, step, msg):
        super().__init__(f"step {step}: {msg}")
        self.step = step


@dataclass
class SchemeConfig:
    """Numerical settings of a run.

    ``T`` is rounded up to a whole number of steps, ``N = ceil(T/h)``.
    ``transport_only`` skips the JKO phase. ``h0`` (or a known
    ``semiconvexity`` constant) caps the step.
    """

    h: float
    T: float
    energy: EnergySpec | None = None
    drift: object = None
    backend: str = "auto"
    tol: float = 1e-7
    max_iter: int = 5000
    eps: float | None = None
    transport_only: bool = False
    snapshot_stride: int = 1
    substeps: int | None = None
    velocity_order: int = 1
    density_order: int = 3
    remap: str = "cubic"
    h0: float | None = None
    semiconvexity: float | None = None
    step_distances: bool = True

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("h must be positive")
        if not self.T > 0:
            raise ValueError("T must be positive")
        if self.h0 is not None and self.h > self.h0:
            raise ValueError(f"h={self.h} exceeds h0={self.h0}")
        if self.snapshot_stride < 1:
            raise ValueError("snapshot_stride must be >= 1")
        jk.h0_guard(self.h, self.semiconvexity)

    @property
    def steps(self):
        return max(1, math.ceil(self.T / self.h - 1e-9))

    @property
    def horizon(self):
        return self.steps * self.h


@dataclass
class SchemeTrajectory:
    """Iterates of one species.

    ``rho[k]`` and ``rho_tilde[k]`` are stored for ``k`` multiple of the
    snapshot stride (and always for ``k = N``); ``W[k]`` is the field that
    carried ``rho^k`` to ``rho~^{k+1}``.
    """

    domain: Domain
    h: float
    steps: int
    rho: dict
    rho_tilde: dict
    W: dict
    records: list
    config: SchemeConfig | None = None
    info: dict = field(default_factory=dict)

    @property
    def T(self):
        return self.h * self.steps

    @property
    def times(self):
        return self.h * np.arange(self.steps + 1)

    def stored_steps(self):
        return sorted(self.rho)

    def final(self):
        return self.rho[self.steps]


def _index(traj: SchemeTrajectory, t: float) -> int:
    """Step ``k`` with ``t`` in ``(hk, h(k+1)]``."""
    if t < -1e-12 * traj.h or t > traj.T * (1 + 1e-12) + 1e-15:
        raise ValueError(f"t={t} outside [0, {traj.T}]")
    k = math.ceil(t / traj.h - 1e-9) - 1
    return min(max(k, 0), traj.steps - 1)


def evaluate_interpolation(traj: SchemeTrajectory, t: float, which: str = "rho") -> GridMeasure:
    """Piecewise-constant (``rho``, ``tilde1``) or continuous (``tilde2``)
    interpolation at time ``t``."""
    if which not in ("rho", "tilde1", "tilde2"):
        raise ValueError(f"unknown interpolation {which!r}")
    if t <= 1e-12 * traj.h:
        if t < -1e-12 * traj.h:
            raise ValueError(f"t={t} outside [0, {traj.T}]")
        return traj.rho[0]
    k = _index(traj, t)
    store = traj.rho if which == "rho" else traj.rho_tilde
    if which in ("rho", "tilde1"):
        if k + 1 not in store:
            raise KeyError(f"step {k + 1} not stored (snapshot stride)")
        return store[k + 1]
    if k not in traj.rho or k not in traj.W:
        raise KeyError(f"step {k} not stored (snapshot stride)")
    s = t - k * traj.h
    W = traj.W[k]
    cfg = traj.config
    if W is None or W.max_norm() == 0.0:
        return traj.rho[k]
    if abs(s - traj.h) <= 1e-12 * traj.h:
        s = traj.h
    return tr.transport_step(traj.rho[k], W, s, substeps=cfg.substeps if cfg else None,
                             velocity_order=cfg.velocity_order if cfg else 1,
                             density_order=cfg.density_order if cfg else 3)


# --- driver ---------------------------------------------------------------------------


def _drift_field(row, rhos):
    """``U_i = sum_j U_ij[rho_j]`` for one species' coupling row."""
    terms = [(model, rho) for model, rho in zip(row, rhos) if model is not None and model.kind != "zero"]
    if not terms:
        return hz.VectorField.zeros(rhos[0].domain)
    out = hz.evaluate_drift(terms[0][0], terms[0][1])
    for model, rho in terms[1:]:
        out = out + hz.evaluate_drift(model, rho)
    return out


def _row_static(row):
    return all(m is None or not m.depends_on_density for m in row)


def _w2sq(a, b, eps):
    if a is b:
        return 0.0
    if a.domain.dim == 1:
        return ot.w2_exact_1d(a, b, with_plan=False).cost
    return ot.w2_entropic(a, b, eps=eps).cost


def run_scheme_system(rho0s, coupling, energies, cfg: SchemeConfig, progress: Callable | None = None):
    """Multi-species splitting scheme.

    ``coupling[i][j]`` is the drift model acting on species ``i`` through the
    density of species ``j`` (``None`` for no coupling). All species are
    transported with the joint state frozen at ``rho^k``, then each takes its
    own JKO step with potentials frozen at the joint ``rho~^{k+1}``.
    """
    rho0s = list(rho0s)
    ns = len(rho0s)
    if len(coupling) != ns or any(len(r) != ns for r in coupling) or len(energies) != ns:
        raise ValueError("coupling must be a square table matching the species")
    dom = rho0s[0].domain
    if any(r.domain != dom for r in rho0s):
        raise ValueError("all species must share the domain")
    for i, (r, E) in enumerate(zip(rho0s, energies)):
        if E is not None and not np.isfinite(internal_energy(E, r)):
            raise ValueError(f"species {i}: initial energy is not finite")
    N, h = cfg.steps, cfg.h
    trajs = [SchemeTrajectory(dom, h, N, {0: r}, {0: r}, {}, [], cfg,
                              info={"T_requested": cfg.T, "T": cfg.horizon}) for r in rho0s]
    static = [_row_static(row) for row in coupling]
    cache = [None] * ns
    cur = list(rho0s)
    for k in range(N):
        keep = (k % cfg.snapshot_stride == 0) or k + 1 == N
        keep_next = ((k + 1) % cfg.snapshot_stride == 0) or k + 1 == N
        splits = []
        for i in range(ns):
            if static[i] and cache[i] is not None:
                splits.append(cache[i])
                continue
            try:
                s = hz.decompose(_drift_field(coupling[i], cur))
            except np.linalg.LinAlgError as exc:
                raise SchemeError(k, f"Helmholtz solve failed: {exc}") from exc
            splits.append(s)
            if static[i]:
                cache[i] = s
        tilde, trecs = [], []
        for i in range(ns):
            try:
                rt, rec, _ = tr.transport_step_detailed(cur[i], splits[i].W, h, energy=energies[i],
                                                        substeps=cfg.substeps, velocity_order=cfg.velocity_order,
                                                        density_order=cfg.density_order)
            except tr.TransportError as exc:
                raise SchemeError(k, str(exc)) from exc
            tilde.append(rt)
            trecs.append(rec)
        if cfg.transport_only:
            nxt = list(tilde)
            jres = [None] * ns
        else:
            vs = []
            for i in range(ns):
                if static[i]:
                    vs.append(splits[i].V)
                else:
                    vs.append(hz.decompose(_drift_field(coupling[i], tilde)).V)
            nxt, jres = [], []
            for i in range(ns):
                r = jk.jko_step(tilde[i], vs[i], energies[i], h, backend=cfg.backend, tol=cfg.tol,
                                max_iter=cfg.max_iter, eps=cfg.eps, remap=cfg.remap, need_potential=False)
                nxt.append(r.rho)
                jres.append(r)
        for i in range(ns):
            rec = {"k": k, "t": (k + 1) * h}
            trec = trecs[i]
            rec.update(mass_drift=trec.mass_drift, clamped_mass=trec.clamped_mass, substeps=trec.substeps,
                       energy_transport_change=trec.energy_change)
            if jres[i] is not None:
                j = jres[i].record()
                rec.update(jko_w2sq=j["w2sq"], jko_objective=j["objective"], iterations=j["iterations"],
                           residual=j["residual"], gap=j["gap"], fallback=j["fallback"],
                           potential_term=j["potential"])
            if cfg.step_distances:
                rec["w2sq_transport"] = _w2sq(tilde[i], cur[i], cfg.eps)
                rec["w2sq_jko"] = jres[i].w2sq if jres[i] is not None else 0.0
                rec["w2sq_step"] = _w2sq(nxt[i], cur[i], cfg.eps)
            if energies[i] is not None:
                rec["energy"] = internal_energy(energies[i], nxt[i])
            rec["second_moment"] = second_moment(nxt[i])
            trajs[i].records.append(rec)
            if keep:
                trajs[i].W[k] = splits[i].W
                trajs[i].rho[k] = cur[i]
            if keep_next:
                trajs[i].rho[k + 1] = nxt[i]
                trajs[i].rho_tilde[k + 1] = tilde[i]
        if progress is not None:
            progress(k + 1, N, [t.records[-1] for t in trajs])
        cur = nxt
    return trajs


def run_scheme(rho0: GridMeasure, cfg: SchemeConfig, progress: Callable | None = None) -> SchemeTrajectory:
    """Single-species scheme; identical to the one-species system."""
    drift = cfg.drift if cfg.drift is not None else hz.zero_drift()
    return run_scheme_system([rho0], [[drift]], [cfg.energy], cfg, progress)[0]
