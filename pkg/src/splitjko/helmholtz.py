"""Drift models and the Helmholtz split ``U = -W + grad V``.

On periodic grids the split is a spectral projection built on the symbol of
the centered difference, so ``div W`` vanishes to round-off for the same
discrete divergence used everywhere else. On a no-flux box, ``V`` solves a
face-based Neumann problem by cosine transform; the normal face component of
``W`` is then zero by construction.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import fft as sfft
from scipy.signal import fftconvolve

from .measures import Domain, GridMeasure


@dataclass
class VectorField:
    """Cell-centered vector field; ``values`` has shape ``(dim, *cells)``.

    ``faces`` optionally holds the normal components on the cell faces of a
    no-flux box, one array per axis with ``n_axis + 1`` entries along it.
    """

    domain: Domain
    values: np.ndarray
    faces: tuple | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.domain.dim,) + self.domain.shape:
            raise ValueError(f"field shape {self.values.shape} does not match the domain")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("vector field has non-finite entries")

    def norm(self):
        return np.sqrt(np.sum(self.values**2, axis=0))

    def max_norm(self):
        return float(np.max(self.norm()))

    def __add__(self, other):
        return VectorField(self.domain, self.values + other.values)

    def __neg__(self):
        return VectorField(self.domain, -self.values)

    def __sub__(self, other):
        return VectorField(self.domain, self.values - other.values)

    def scaled(self, c):
        return VectorField(self.domain, c * self.values)

    @classmethod
    def zeros(cls, domain):
        return cls(domain, np.zeros((domain.dim,) + domain.shape))


# --- discrete calculus ------------------------------------------------------


def grad(f, domain: Domain):
    """Centered-difference gradient, shape ``(dim, *cells)``.

    Periodic axes wrap; on a box the boundary rows use second-order one-sided
    differences.
    """
    f = np.asarray(f, float)
    out = []
    for a in range(domain.dim):
        h = domain.dx[a]
        if domain.periodic:
            out.append((np.roll(f, -1, axis=a) - np.roll(f, 1, axis=a)) / (2 * h))
        else:
            out.append(np.gradient(f, h, axis=a, edge_order=2))
    return np.stack(out)


def divergence(u, domain: Domain):
    """Centered-difference divergence of a ``(dim, *cells)`` array."""
    u = np.asarray(u, float)
    return sum(grad(u[a], domain)[a] for a in range(domain.dim))


def hessian(f, domain: Domain):
    """Second differences, shape ``(dim, dim, *cells)``."""
    g = grad(f, domain)
    return np.stack([grad(g[a], domain) for a in range(domain.dim)])


def face_divergence(faces, domain: Domain):
    """Flux divergence of face-normal components on a box."""
    out = np.zeros(domain.shape)
    for a, f in enumerate(faces):
        out += np.diff(f, axis=a) / domain.dx[a]
    return out


# --- decomposition ------------------------------------------------------------


@dataclass
class HelmholtzSplit:
    """``V`` (zero mean) and ``W`` with ``U = -W + grad V``."""

    V: np.ndarray
    W: VectorField
    grad_V: VectorField

    @property
    def domain(self):
        return self.W.domain

    def reconstruct(self) -> VectorField:
        return self.grad_V - self.W


def _centered_symbols(domain):
    """Per-axis Fourier symbols ``i sin(k dx) / dx`` on the rfft/fft grid."""
    syms = []
    for a in range(domain.dim):
        n, h = domain.cells[a], domain.dx[a]
        k = 2 * np.pi * np.fft.fftfreq(n, d=h)
        s = 1j * np.sin(k * h) / h
        shape = [1] * domain.dim
        shape[a] = n
        syms.append(s.reshape(shape))
    return syms


def _decompose_periodic(U: VectorField) -> HelmholtzSplit:
    dom = U.domain
    axes = tuple(range(dom.dim))
    D = _centered_symbols(dom)
    Uh = [np.fft.fftn(U.values[a], axes=axes) for a in axes]
    div_h = sum(D[a] * Uh[a] for a in axes)
    lap = sum(D[a] ** 2 for a in axes) * np.ones(dom.shape)
    null = np.abs(lap) < 1e-12 * np.max(np.abs(lap))
    Vh = np.where(null, 0.0, div_h / np.where(null, 1.0, lap))
    V = np.real(np.fft.ifftn(Vh, axes=axes))
    gV = np.stack([np.real(np.fft.ifftn(D[a] * Vh, axes=axes)) for a in axes])
    W = gV - U.values
    return HelmholtzSplit(V - V.mean(), VectorField(dom, W), VectorField(dom, gV))


def _boundary_faces(U: VectorField):
    """Face-normal components: averages inside, linear extrapolation at walls."""
    dom = U.domain
    faces = []
    for a in range(dom.dim):
        u = np.moveaxis(U.values[a], a, 0)
        inner = 0.5 * (u[1:] + u[:-1])
        if u.shape[0] > 1:
            lo = 1.5 * u[0] - 0.5 * u[1]
            hi = 1.5 * u[-1] - 0.5 * u[-2]
        else:
            lo = hi = u[0]
        f = np.concatenate([lo[None], inner, hi[None]], axis=0)
        faces.append(np.moveaxis(f, 0, a))
    return faces


def _neumann_solve(rhs, domain):
    """Zero-mean solution of the face-based Neumann Laplacian ``L V = rhs``."""
    axes = tuple(range(domain.dim))
    rh = sfft.dctn(rhs, type=2, axes=axes, norm="ortho")
    lam = np.zeros(domain.shape)
    for a in axes:
        n, h = domain.cells[a], domain.dx[a]
        ev = -(2 - 2 * np.cos(np.pi * np.arange(n) / n)) / h**2
        shape = [1] * domain.dim
        shape[a] = n
        lam = lam + ev.reshape(shape)
    compat = abs(rh.flat[0]) / max(np.max(np.abs(rh)), 1e-300)
    if compat > 1e-8:
        raise np.linalg.LinAlgError(f"Neumann compatibility violated ({compat:.2e})")
    lam.flat[0] = 1.0
    vh = rh / lam
    vh.flat[0] = 0.0
    return sfft.idctn(vh, type=2, axes=axes, norm="ortho")


def _decompose_box(U: VectorField) -> HelmholtzSplit:
    dom = U.domain
    faces = _boundary_faces(U)
    inner = []
    for a, f in enumerate(faces):
        g = np.moveaxis(f.copy(), a, 0)
        g[0] = 0.0
        g[-1] = 0.0
        inner.append(np.moveaxis(g, 0, a))
    V = _neumann_solve(face_divergence(inner, dom), dom)
    gV_faces, W_faces, gV, W = [], [], [], []
    for a, f in enumerate(faces):
        v = np.moveaxis(V, a, 0)
        uf = np.moveaxis(f, a, 0)
        g = np.empty_like(uf)
        g[1:-1] = np.diff(v, axis=0) / dom.dx[a]
        g[0], g[-1] = uf[0], uf[-1]
        w = g - uf
        w[0] = 0.0
        w[-1] = 0.0
        gV_faces.append(np.moveaxis(g, 0, a))
        W_faces.append(np.moveaxis(w, 0, a))
        gV.append(np.moveaxis(0.5 * (g[1:] + g[:-1]), 0, a))
        W.append(np.moveaxis(0.5 * (w[1:] + w[:-1]), 0, a))
    if dom.dim == 1:
        # the only tangential divergence-free field on an interval is zero
        W = [np.zeros(dom.shape)]
        W_faces = [np.zeros(dom.cells[0] + 1)]
        gV = [U.values[0]]
    Wf = VectorField(dom, np.stack(W), faces=tuple(W_faces))
    gVf = VectorField(dom, np.stack(gV), faces=tuple(gV_faces))
    return HelmholtzSplit(V - V.mean(), Wf, gVf)


def decompose(U: VectorField) -> HelmholtzSplit:
    """Split ``U`` into ``-W + grad V`` with ``div W = 0`` and ``W . n = 0``."""
    if U.domain.periodic:
        return _decompose_periodic(U)
    return _decompose_box(U)


def discrete_divergence(W: VectorField):
    """Divergence matching the decomposition: face fluxes on a box when
    available, centered differences otherwise."""
    if W.faces is not None and not W.domain.periodic:
        return face_divergence(W.faces, W.domain)
    return divergence(W.values, W.domain)


# --- drift models -----------------------------------------------------------------


DRIFT_KINDS = ("zero", "interaction", "hamiltonian", "rotation", "custom", "external", "sum")


@dataclass
class DriftModel:
    """Density-dependent drift ``U[rho]``.

    kinds and their parameters:

    ``zero``
    ``interaction``   ``grad_kernel(*displacement) -> tuple of components``
    ``hamiltonian``   ``H(domain, density) -> field``; ``U = J grad H`` (2D)
    ``rotation``      ``omega``, optional ``center``; ``U = omega (-y, x)``
    ``custom``        ``field(domain, density) -> array`` or a fixed array
    ``external``      ``potential(*coords)``, optional ``gradient(*coords)``
    ``sum``           ``parts``: list of DriftModel
    """

    kind: str = "zero"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in DRIFT_KINDS:
            raise ValueError(f"unknown drift kind {self.kind!r}")

    def __add__(self, other):
        return DriftModel("sum", {"parts": [self, other]})

    @property
    def depends_on_density(self):
        if self.kind == "sum":
            return any(p.depends_on_density for p in self.params["parts"])
        return self.kind in ("interaction", "hamiltonian", "custom")


def zero_drift():
    return DriftModel("zero")


def rotation(omega=1.0, center=(0.0, 0.0)):
    return DriftModel("rotation", {"omega": omega, "center": center})


def external(potential, gradient=None):
    return DriftModel("external", {"potential": potential, "gradient": gradient})


def interaction(grad_kernel):
    return DriftModel("interaction", {"grad_kernel": grad_kernel})


def quadratic_interaction():
    """``K(x) = |x|^2 / 2``, so ``grad K * rho = x - mean(rho)``."""
    return interaction(lambda *d: d)


def hamiltonian(H):
    return DriftModel("hamiltonian", {"H": H})


def custom(fn):
    return DriftModel("custom", {"field": fn})


def _displacements(domain):
    """Displacement grids for the convolution stencil, per axis."""
    out = []
    for a in range(domain.dim):
        n, h = domain.cells[a], domain.dx[a]
        if domain.periodic:
            d = h * np.arange(n)
            L = domain.lengths[a]
            d = d - L * np.round(d / L)
        else:
            d = h * np.arange(-(n - 1), n)
        out.append(d)
    return np.meshgrid(*out, indexing="ij")


def _convolve(rho, kernel, domain):
    vol = domain.cell_volume
    if domain.periodic:
        axes = tuple(range(domain.dim))
        return np.real(np.fft.ifftn(np.fft.fftn(rho, axes=axes) * np.fft.fftn(kernel, axes=axes), axes=axes)) * vol
    full = fftconvolve(rho, kernel, mode="full")
    sl = tuple(slice(n - 1, 2 * n - 1) for n in domain.cells)
    return full[sl] * vol


def evaluate_drift(model: DriftModel, rho: GridMeasure) -> VectorField:
    """Sample ``U[rho]`` at cell centers."""
    dom = rho.domain
    kind, p = model.kind, model.params
    if kind == "zero":
        return VectorField.zeros(dom)
    if kind == "sum":
        out = VectorField.zeros(dom)
        for part in p["parts"]:
            out = out + evaluate_drift(part, rho)
        return out
    if kind == "rotation":
        if dom.dim != 2:
            raise ValueError("rotation drift needs a 2D domain")
        x, y = dom.centers()
        cx, cy = p.get("center", (0.0, 0.0))
        w = p.get("omega", 1.0)
        return VectorField(dom, np.stack([-w * (y - cy), w * (x - cx)]))
    if kind == "external":
        xs = dom.centers()
        if p.get("gradient") is not None:
            g = p["gradient"](*xs)
            return VectorField(dom, np.stack([np.broadcast_to(c, dom.shape) for c in g]))
        return VectorField(dom, grad(p["potential"](*xs), dom))
    if kind == "interaction":
        comps = p["grad_kernel"](*_displacements(dom))
        vals = [_convolve(rho.density, np.broadcast_to(c, _displacements(dom)[0].shape), dom) for c in comps]
        return VectorField(dom, np.stack(vals))
    if kind == "hamiltonian":
        if dom.dim != 2:
            raise ValueError("hamiltonian drift needs a 2D domain")
        gH = grad(p["H"](dom, rho.density), dom)
        return VectorField(dom, np.stack([-gH[1], gH[0]]))
    if kind == "custom":
        f = p["field"]
        vals = f(dom, rho.density) if callable(f) else f
        return VectorField(dom, np.asarray(vals, float).reshape((dom.dim,) + dom.shape))
    raise ValueError(kind)


def split_drift(model: DriftModel, rho: GridMeasure) -> HelmholtzSplit:
    return decompose(evaluate_drift(model, rho))


# --- assumption checks -------------------------------------------------------------


@dataclass
class DriftReport:
    grad_V_sup: float
    semiconvexity: float
    linear_lower_bound: float
    grad_V_energy: float
    lipschitz_V: float
    lipschitz_W: float
    W_growth: float
    compact_radius: float
    pairs: int

    def as_dict(self):
        return dict(self.__dict__)


def check_drift_assumptions(model: DriftModel, probes, compact_radius: float | None = None,
                            w2: Callable | None = None) -> DriftReport:
    """Empirical constants for the drift hypotheses over a family of probes.

    Lipschitz ratios are ``int |A[rho] - A[mu]|^2 d rho / W2^2(rho, mu)`` for
    ``A`` the gradient part and the divergence-free part; pairs closer than
    ``1e-12`` in W2 are skipped.
    """
    from . import ot

    probes = list(probes)
    if not probes:
        raise ValueError("need at least one probe measure")
    dom = probes[0].domain
    w2 = w2 or (lambda r, m: ot.w2(r, m).cost)
    R = compact_radius if compact_radius is not None else 0.5 * min(dom.lengths) / 2
    r2 = dom.radius_sq()
    inside = r2 <= R * R
    norm_x = np.sqrt(r2)
    splits = [split_drift(model, r) for r in probes]
    sup_g = semi = lower = energy = growth = 0.0
    for r, s in zip(probes, splits):
        gnorm = s.grad_V.norm()
        if inside.any():
            sup_g = max(sup_g, float(np.max(gnorm[inside])))
        H = hessian(s.V, dom)
        if dom.dim == 1:
            lam_min = H[0, 0]
        else:
            a, b, c = H[0, 0], 0.5 * (H[0, 1] + H[1, 0]), H[1, 1]
            lam_min = 0.5 * (a + c) - np.sqrt(0.25 * (a - c) ** 2 + b * b)
        semi = max(semi, float(np.max(-lam_min[inside])) if inside.any() else 0.0)
        lower = max(lower, float(np.max(-s.V / (1 + norm_x))))
        energy = max(energy, r.integrate(gnorm**2))
        growth = max(growth, float(np.max(s.W.norm() / (1 + norm_x))))
    lipV = lipW = 0.0
    pairs = 0
    for (i, r), (j, m) in itertools.combinations(enumerate(probes), 2):
        d2 = w2(r, m)
        if d2 < 1e-12:
            continue
        pairs += 1
        dV = np.sum((splits[i].grad_V.values - splits[j].grad_V.values) ** 2, axis=0)
        dW = np.sum((splits[i].W.values - splits[j].W.values) ** 2, axis=0)
        lipV = max(lipV, r.integrate(dV) / d2)
        lipW = max(lipW, r.integrate(dW) / d2)
    clean = lambda v: 0.0 if abs(v) < 1e-13 else v
    return DriftReport(clean(sup_g), max(clean(semi), 0.0), max(clean(lower), 0.0), clean(energy),
                       clean(lipV), clean(lipW), clean(growth), R, pairs)
