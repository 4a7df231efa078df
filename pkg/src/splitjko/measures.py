"""Probability densities on uniform 1D/2D grids and internal energies.

Densities are cell averages; every integral is a midpoint sum over cells.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

MASS_TOL = 1e-12
VACUUM = 1e-14


@dataclass(frozen=True)
class Domain:
    """Axis-aligned box split into uniform cells.

    ``bounds`` holds one ``(lo, hi)`` pair per axis and ``cells`` the number
    of cells along that axis. ``boundary`` is ``"periodic"`` or ``"noflux"``.
    """

    bounds: tuple
    cells: tuple
    boundary: str = "noflux"

    def __post_init__(self):
        bounds = tuple((float(lo), float(hi)) for lo, hi in self.bounds)
        cells = tuple(int(n) for n in self.cells)
        object.__setattr__(self, "bounds", bounds)
        object.__setattr__(self, "cells", cells)
        if len(bounds) not in (1, 2) or len(cells) != len(bounds):
            raise ValueError("domain must be 1D or 2D with one cell count per axis")
        if any(hi <= lo for lo, hi in bounds) or any(n < 1 for n in cells):
            raise ValueError("empty domain axis")
        if self.boundary not in ("periodic", "noflux"):
            raise ValueError(f"unknown boundary mode {self.boundary!r}")

    @classmethod
    def interval(cls, lo, hi, n, boundary="noflux"):
        return cls(((lo, hi),), (n,), boundary)

    @classmethod
    def square(cls, lo, hi, n, boundary="noflux"):
        return cls(((lo, hi), (lo, hi)), (n, n), boundary)

    @property
    def dim(self) -> int:
        return len(self.cells)

    @property
    def periodic(self) -> bool:
        return self.boundary == "periodic"

    @property
    def dx(self) -> tuple:
        return tuple((hi - lo) / n for (lo, hi), n in zip(self.bounds, self.cells))

    @property
    def lengths(self) -> tuple:
        return tuple(hi - lo for lo, hi in self.bounds)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.dx))

    @property
    def shape(self) -> tuple:
        return self.cells

    def axis_centers(self, axis: int) -> np.ndarray:
        (lo, _), n, h = self.bounds[axis], self.cells[axis], self.dx[axis]
        return lo + h * (np.arange(n) + 0.5)

    def axis_edges(self, axis: int) -> np.ndarray:
        (lo, hi), n = self.bounds[axis], self.cells[axis]
        return np.linspace(lo, hi, n + 1)

    def centers(self) -> list:
        """Cell-center coordinate arrays, one per axis, each of grid shape."""
        axes = [self.axis_centers(a) for a in range(self.dim)]
        return list(np.meshgrid(*axes, indexing="ij"))

    def radius_sq(self) -> np.ndarray:
        return sum(c**2 for c in self.centers())

    def diameter(self) -> float:
        return math.sqrt(sum(L**2 for L in self.lengths))


@dataclass(frozen=True, eq=False)
class GridMeasure:
    """Nonnegative cell-averaged density with unit total mass."""

    domain: Domain
    density: np.ndarray

    def __post_init__(self):
        rho = np.asarray(self.density, dtype=float)
        if rho.shape != self.domain.shape:
            raise ValueError(f"density shape {rho.shape} does not match grid {self.domain.shape}")
        if not np.all(np.isfinite(rho)):
            raise ValueError("density has non-finite entries")
        if rho.min() < 0:
            raise ValueError("density has negative entries")
        mass = _pairwise_sum(rho) * self.domain.cell_volume
        if abs(mass - 1.0) > MASS_TOL:
            raise ValueError(f"density has mass {mass!r}, expected 1")
        rho.setflags(write=False)
        object.__setattr__(self, "density", rho)

    @classmethod
    def from_density(cls, domain: Domain, density, clip: bool = True) -> "GridMeasure":
        """Build a measure from any nonnegative array, renormalising its mass."""
        rho = np.array(density, dtype=float)
        if clip:
            rho = np.maximum(rho, 0.0)
        mass = _pairwise_sum(rho) * domain.cell_volume
        if not mass > 0:
            raise ValueError("cannot normalise a density with zero mass")
        return cls(domain, _renormalize(rho, domain.cell_volume, mass))

    @classmethod
    def from_function(cls, domain: Domain, fn: Callable, subsamples: int = 4) -> "GridMeasure":
        """Cell averages of ``fn`` by tensor Gauss-Legendre quadrature per cell."""
        return cls.from_density(domain, cell_average(domain, fn, subsamples))

    @classmethod
    def uniform(cls, domain: Domain) -> "GridMeasure":
        return cls.from_density(domain, np.ones(domain.shape))

    @property
    def masses(self) -> np.ndarray:
        return self.density * self.domain.cell_volume

    def mass(self) -> float:
        return _pairwise_sum(self.density) * self.domain.cell_volume

    def mean(self) -> np.ndarray:
        m = self.masses
        return np.array([_pairwise_sum(c * m) for c in self.domain.centers()])

    def integrate(self, values) -> float:
        """``sum(values * rho) * cell_volume``."""
        return _pairwise_sum(np.asarray(values) * self.density) * self.domain.cell_volume

    def mix(self, other: "GridMeasure", t: float) -> "GridMeasure":
        """Cellwise mixture ``t*self + (1-t)*other``."""
        return GridMeasure.from_density(self.domain, t * self.density + (1 - t) * other.density)


def _pairwise_sum(a) -> float:
    # np.sum uses pairwise summation on contiguous data; ravel fixes the order
    return float(np.sum(np.ascontiguousarray(a).ravel()))


def _renormalize(rho, vol, mass):
    rho = rho / mass
    # one correction pass absorbs the rounding left by the division
    rho /= _pairwise_sum(rho) * vol
    return rho


def cell_average(domain: Domain, fn: Callable, subsamples: int = 4) -> np.ndarray:
    """Average of ``fn(*coords)`` over each cell (Gauss-Legendre per axis)."""
    nodes, weights = np.polynomial.legendre.leggauss(subsamples)
    total = np.zeros(domain.shape)
    if domain.dim == 1:
        c, h = domain.axis_centers(0), domain.dx[0]
        for xi, wi in zip(nodes, weights):
            total += 0.5 * wi * fn(c + 0.5 * h * xi)
        return total
    cx, cy = domain.centers()
    hx, hy = domain.dx
    for xi, wi in zip(nodes, weights):
        for yj, wj in zip(nodes, weights):
            total += 0.25 * wi * wj * fn(cx + 0.5 * hx * xi, cy + 0.5 * hy * yj)
    return total


# --- energies -----------------------------------------------------------------


@dataclass(frozen=True)
class EnergySpec:
    """Convex internal-energy density ``F`` and its pressure ``sF'(s) - F(s)``.

    ``F`` must be vectorised and satisfy ``F(0) = 0``; zero cells are never
    passed to ``Fprime``. ``alpha`` is the exponent of the energy lower bound
    and is only read by the diagnostics.
    """

    name: str
    F: Callable
    Fprime: Callable
    Fsecond: Callable
    alpha: float = 0.5
    m: float = field(default=1.0)

    def value(self, s):
        s = np.asarray(s, dtype=float)
        out = np.zeros_like(s)
        pos = s > 0
        out[pos] = self.F(s[pos])
        return out

    def pressure(self, s):
        s = np.asarray(s, dtype=float)
        out = np.zeros_like(s)
        pos = s > 0
        sp = s[pos]
        out[pos] = sp * self.Fprime(sp) - self.F(sp)
        return out

    def pressure_derivative(self, s):
        """``P'(s) = s F''(s)``."""
        s = np.asarray(s, dtype=float)
        out = np.zeros_like(s)
        pos = s > 0
        out[pos] = s[pos] * self.Fsecond(s[pos])
        return out

    def kl_prox(self, log_q, tau, eps, tilt, vol, log_p0=None, max_iter=50, tol=1e-13):
        """Cellwise ``argmin_p tau*(vol*F(p/vol) + tilt*p) + eps*KL(p | q)``.

        Works on logarithms: takes ``log q`` and returns ``log p``. Closed form
        for the entropy, scalar Newton otherwise.
        """
        log_q = np.asarray(log_q, dtype=float)
        log_vol = math.log(vol)
        if self.name == "entropy":
            return (eps * log_q + tau * (log_vol - 1.0 - tilt)) / (eps + tau)
        finite = np.isfinite(log_q)
        u = np.where(finite, log_q, 0.0) if log_p0 is None else np.where(finite, log_p0, 0.0)
        target = np.where(finite, log_q, 0.0)
        tilt = np.broadcast_to(tilt, u.shape)
        for _ in range(max_iter):
            s = np.exp(u - log_vol)
            g = tau * (self.Fprime(s) + tilt) + eps * (u - target)
            dg = tau * s * self.Fsecond(s) + eps
            step = g / dg
            # g is convex increasing in u: downhill steps are monotone, only
            # upward steps need a cap to keep exp() in range
            step = np.maximum(step, -5.0)
            u = u - step
            if np.max(np.abs(step)) < tol:
                break
        return np.where(finite, u, -np.inf)


def entropy(alpha: float = 0.5) -> EnergySpec:
    """``F(s) = s log s`` (linear diffusion, pressure ``P(s) = s``)."""
    return EnergySpec(
        "entropy",
        F=lambda s: s * np.log(s),
        Fprime=lambda s: np.log(s) + 1.0,
        Fsecond=lambda s: 1.0 / s,
        alpha=alpha,
    )


def power(m: float, alpha: float = 0.5) -> EnergySpec:
    """``F(s) = s^m`` with ``m > 1`` (porous medium, ``P(s) = (m-1) s^m``)."""
    if m <= 1:
        raise ValueError("power energy needs m > 1")
    return EnergySpec(
        "power",
        F=lambda s: s**m,
        Fprime=lambda s: m * s ** (m - 1),
        Fsecond=lambda s: m * (m - 1) * s ** (m - 2),
        alpha=alpha,
        m=m,
    )


def linear() -> EnergySpec:
    """``F(s) = s``; violates strict convexity, kept for assumption checks."""
    return EnergySpec(
        "linear",
        F=lambda s: s,
        Fprime=lambda s: np.ones_like(s),
        Fsecond=lambda s: np.zeros_like(s),
    )


def second_moment(rho: GridMeasure) -> float:
    return rho.integrate(rho.domain.radius_sq())


def internal_energy(energy: EnergySpec, rho: GridMeasure) -> float:
    """``sum F(rho) * cell_volume``; raises ``FloatingPointError`` if non-finite."""
    vals = energy.value(rho.density)
    if not np.all(np.isfinite(vals)):
        raise FloatingPointError("internal energy is not finite")
    return _pairwise_sum(vals) * rho.domain.cell_volume


def pressure_field(energy: EnergySpec, rho: GridMeasure) -> np.ndarray:
    return energy.pressure(rho.density)


@dataclass
class EnergyReport:
    convex: bool
    superlinear: bool
    pressure_bounded: bool
    pressure_constant: float
    violations: list

    @property
    def ok(self) -> bool:
        return not self.violations


def check_energy_assumptions(energy: EnergySpec, samples: Sequence[float] | None = None) -> EnergyReport:
    """Sample-based check of convexity, superlinearity and ``P <= C(s + |F|)``.

    ``samples`` should span several decades; the default runs from 1e-6 to 1e6.
    """
    s = np.sort(np.asarray(samples if samples is not None else np.geomspace(1e-6, 1e6, 241), float))
    if s[-1] / s[0] < 1e3:
        raise ValueError("samples must cover at least three decades")
    F = energy.value(s)
    slopes = np.diff(F) / np.diff(s)
    convex = bool(np.all(np.diff(slopes) > 1e-9 * np.abs(slopes[1:])))
    ratio = F / s
    top = ratio[len(ratio) // 2 :]
    superlinear = bool(np.all(np.diff(top) > 0) and top[-1] > 10 * max(1.0, abs(top[0])))
    P = energy.pressure(s)
    denom = s + np.abs(F)
    C = float(np.max(P / denom))
    bounded = bool(np.isfinite(C))
    violations = []
    if not convex:
        violations.append("strict_convexity")
    if not superlinear:
        violations.append("superlinearity")
    if not bounded:
        violations.append("pressure_bound")
    if abs(float(energy.value(np.array([0.0]))[0])) > 0:
        violations.append("F(0)=0")
    return EnergyReport(convex, superlinear, bounded, C, violations)


# --- snapshot files ----------------------------------------------------------------


def write_snapshot(path, rho: GridMeasure, t: float = 0.0) -> None:
    """Plain-text snapshot: header ``dim nx [ny] x0 x1 [y0 y1] t``, then values."""
    d = rho.domain
    head = [str(d.dim), *map(str, d.cells)]
    for lo, hi in d.bounds:
        head += [repr(lo), repr(hi)]
    head.append(repr(float(t)))
    values = rho.density.ravel(order="C")
    with open(path, "w") as fh:
        fh.write(" ".join(head) + "\n")
        fh.write("\n".join(f"{v:.17g}" for v in values))
        fh.write("\n")


def read_snapshot(path, boundary: str = "noflux"):
    """Inverse of :func:`write_snapshot`; returns ``(measure, t)``."""
    with open(path) as fh:
        header = fh.readline().split()
        values = np.array(fh.read().split(), dtype=float)
    dim = int(header[0])
    cells = tuple(int(v) for v in header[1 : 1 + dim])
    nums = [float(v) for v in header[1 + dim :]]
    bounds = tuple((nums[2 * a], nums[2 * a + 1]) for a in range(dim))
    t = nums[2 * dim]
    domain = Domain(bounds, cells, boundary)
    try:
        rho = GridMeasure(domain, values.reshape(cells))
    except ValueError:
        rho = GridMeasure.from_density(domain, values.reshape(cells))
    return rho, t
