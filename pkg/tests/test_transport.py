import numpy as np
import pytest

from splitjko import helmholtz as hz
from splitjko import scenarios as S
from splitjko import transport as tr
from splitjko.measures import Domain, GridMeasure, entropy, internal_energy


@pytest.fixture(scope="module")
def rotation():
    p = S.rotation_transport(cells=64)
    return p, hz.split_drift(p.drift, p.rho0).W


def test_rotation_flow_is_rigid(rotation):
    p, W = rotation
    flow = tr.integrate_flow(W, 0.3)
    x, y = p.domain.centers()
    c, s = np.cos(0.3), np.sin(0.3)
    # W = -U: the flow turns clockwise; compare away from the periodic seam
    inner = x**2 + y**2 < 9
    fx, fy = c * x + s * y, -s * x + c * y
    assert np.abs(flow.forward[0] - fx)[inner].max() < 1e-6
    assert np.abs(flow.forward[1] - fy)[inner].max() < 1e-6
    assert np.abs(flow.jacobian() - 1)[inner].max() < 1e-6


def test_rotation_matches_oracle(rotation):
    p, W = rotation
    rho = p.rho0
    for _ in range(10):
        rho = tr.transport_step(rho, W, 0.05)
    exact = p.oracle(0.5)
    assert np.abs(rho.density - exact.density).max() < 2e-2 * exact.density.max()
    assert np.allclose(rho.mean(), exact.mean(), atol=5e-3)


def test_mass_and_energy_bookkeeping(rotation):
    p, W = rotation
    out, rec, flow = tr.transport_step_detailed(p.rho0, W, 0.01, energy=entropy())
    assert abs(out.mass() - 1) < 1e-13
    assert abs(rec.mass_drift) < 1e-8
    assert rec.clamped_mass < 1e-10
    assert abs(rec.energy_change) < 1e-6
    assert rec.energy_before == pytest.approx(internal_energy(entropy(), p.rho0))
    assert rec.substeps == flow.substeps >= 1


def test_zero_field_is_identity():
    d = Domain.interval(0.0, 1.0, 16)
    rho = GridMeasure.from_density(d, np.arange(16.0) + 1)
    out, rec, flow = tr.transport_step_detailed(rho, hz.VectorField.zeros(d), 0.1, energy=entropy())
    assert out is rho and flow is None and rec.energy_change == 0.0


def test_periodic_constant_shift():
    d = Domain.interval(0.0, 1.0, 50, boundary="periodic")
    rho = GridMeasure.from_function(d, lambda x: 1.1 + np.sin(2 * np.pi * x))
    W = hz.VectorField(d, np.full((1, 50), 0.5))
    out = tr.transport_step(rho, W, 0.04)
    # a shift by exactly one cell
    assert np.allclose(out.density, np.roll(rho.density, 1), atol=1e-12)


def test_substep_rule():
    d = Domain.interval(0.0, 1.0, 10)
    W = hz.VectorField(d, np.full((1, 10), 2.0))
    assert tr.choose_substeps(W, 0.1) == 4
    assert tr.choose_substeps(W, 0.1, substeps=7) == 7
    with pytest.raises(ValueError):
        tr.integrate_flow(W, 0.0)


def test_distance_bound_and_exponent(rotation):
    p, W = rotation
    recs = []
    for h in (1e-3, 3e-3, 1e-2):
        rec = tr.transport_distance_bound(p.rho0, tr.transport_step(p.rho0, W, h), h, W=W, growth=6.0)
        assert rec["kinetic_ok"] and rec["growth_ok"]
        recs.append(rec)
    fit = tr.fit_transport_exponent(recs)
    assert not fit["flag"]
    assert fit["slope"] == pytest.approx(2.0, abs=0.05)


def test_box_characteristics_stay_inside():
    b = Domain.square(-1.0, 1.0, 24)
    x, y = b.centers()
    psi_grad = np.stack([-(1 - x**2) ** 2 * 4 * y * (1 - y**2), 4 * x * (1 - x**2) * (1 - y**2) ** 2])
    W = hz.VectorField(b, psi_grad)
    flow = tr.integrate_flow(W, 0.5)
    for a in range(2):
        assert np.all(flow.forward[a] >= -1.0) and np.all(flow.forward[a] <= 1.0)
