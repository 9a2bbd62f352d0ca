import numpy as np
import pytest
import scipy.linalg as la
from hypothesis import given, settings, strategies as st

from semiwell.agmon import (
    ScalarField,
    agmon_distance,
    build_cutoffs,
    build_weight,
    eigenfunction_decay,
    energy_identity_residual,
    l2_normalize,
    smoothstep,
    weight_class_margin,
)
from semiwell.errors import BandTooNarrow, EmptyCore, EmptySource, NotNormalized
from semiwell.lattice import assemble_hamiltonian, build_grid, find_wells


def four_wells(n=513, spacing=1 / 64):
    return build_grid(1, [n], spacing, potential_fn=lambda x: np.cos(np.pi * x[:, 0] / 2) ** 2)


def test_smoothstep_profile():
    t = np.array([-1.0, 0.0, 0.5, 1.0, 2.0])
    assert np.allclose(smoothstep(t), [0, 0, 0.5, 1, 1])


def test_distance_degenerate_metric():
    m = build_grid(1, [20], 0.1, potential_fn=np.full(20, 0.7))
    d = agmon_distance(m, 0.7, [5])
    assert np.all(d.values == 0)
    with pytest.raises(EmptySource):
        agmon_distance(m, 0.0, [])


def test_distance_unit_factor_2d():
    m = build_grid(2, [7, 6], 0.5, potential_fn=np.full(42, 3.0))
    d = agmon_distance(m, 2.0, [0])
    assert np.allclose(d.values, m.distances([0]).ravel())


def test_distance_harmonic_oracle():
    a = 0.004
    m = build_grid(1, [1001], a, potential_fn=lambda x: x[:, 0] ** 2, origin=[-2.0])
    x = m.coords[:, 0]
    d = agmon_distance(m, 0.0, [500])
    assert np.max(np.abs(d.values - x**2 / 2)) <= 0.01


def test_weight_zero_on_core_and_lower_bound():
    m = four_wells()
    dec = find_wells(m, 1.0)
    E2, E3 = 0.3, 0.5
    Phi = build_weight(m, dec, E2, E3, 1)
    core = dec.core(m, 1, E3)
    assert np.all(Phi.values[core] == 0)
    # walking out of the core until V drops below E3 again, every step but
    # the first costs at least a * sqrt(E3 - E2); the first costs half that
    low = np.flatnonzero(m.potential < E3)
    left = low[low < core[0]].max() + 1
    right = low[low > core[-1]].min()
    far = np.setdiff1d(np.arange(left, right), core)
    dist = m.distances(far, core).min(axis=1)
    assert np.all(Phi.values[far] >= np.sqrt(E3 - E2) * (dist - m.spacing / 2) - 1e-12)
    with pytest.raises(EmptyCore):
        build_weight(m, dec, 0.0, -0.1, 0)


def test_weight_quadratic_near_harmonic_core():
    m = build_grid(1, [801], 0.005, potential_fn=lambda x: x[:, 0] ** 2, origin=[-2.0])
    dec = find_wells(m, 3.0)
    Phi = build_weight(m, dec, 0.0, 1e-9, 0)
    x = m.coords[:, 0]
    assert np.max(np.abs(Phi.values - x**2 / 2)) <= 0.01


def test_weight_class_on_outer_region():
    m = four_wells()
    dec = find_wells(m, 0.95)
    E1 = 0.3
    Phi = build_weight(m, dec, E1, 0.6, 0)
    outer = np.flatnonzero(m.potential >= dec.threshold)
    assert weight_class_margin(m, Phi, E1, outer) > 0


def test_cutoff_plateaus_and_partition():
    m = four_wells()
    dec = find_wells(m, 1.0)
    E1, eta = 0.3, 0.2
    cf = build_cutoffs(m, dec, E1, eta)
    V = m.potential
    phi = sum(p.values for p in cf.phi_h)
    assert np.all((phi + cf.phi0.values)[:] == 1.0)
    assert np.all(phi[V < E1 + eta] == 1.0)
    assert np.all(phi[V > E1 + 2 * eta] == 0.0)
    assert np.all(cf.phi0.values[V > E1 + 2 * eta] == 1.0)
    for h, (p, q) in enumerate(zip(cf.phi_h, cf.psi_h)):
        assert np.array_equal(p.values * q.values, p.values)
        assert np.all(p.values[V >= E1 + 2 * eta] == 0)
        assert np.all(q.values[V >= E1 + 3 * eta] == 0)
        core = dec.core(m, h, E1 + eta)
        assert np.all(p.values[core] == 1)
        assert np.all(p.values[np.setdiff1d(np.arange(m.n_sites), dec.components[h])] == 0)
    assert np.array_equal(cf.phi0.values * cf.psi0.values, cf.phi0.values)
    assert np.all(cf.psi0.values[np.setdiff1d(np.arange(m.n_sites), cf.M0)] == 0)


def test_cutoff_band_too_narrow():
    m = build_grid(1, [33], 1 / 8, potential_fn=lambda x: np.cos(np.pi * x[:, 0] / 2) ** 2)
    dec = find_wells(m, 1.0)
    with pytest.raises(BandTooNarrow):
        build_cutoffs(m, dec, 0.3, 0.2)


def test_cutoff_gradient_scaling():
    m = build_grid(1, [4097], 1 / 1024, potential_fn=lambda x: np.cos(np.pi * x[:, 0] / 2) ** 2)
    dec = find_wells(m, 1.0)
    etas = [0.2 / 2**k for k in range(4)]
    prods = [eta * build_cutoffs(m, dec, 0.3, eta).gradient_bound() for eta in etas]
    assert max(prods) <= 10 * prods[0]


def test_energy_identity_trivial_weights():
    rng = np.random.default_rng(1)
    m = build_grid(2, [6, 7], 0.25, potential_fn=lambda x: rng.random(len(x)),
                   vector_potential_fn=lambda p: np.stack([-p[:, 1], p[:, 0]], axis=1))
    H = assemble_hamiltonian(m, 5.0)
    u = rng.normal(size=m.n_sites) + 1j * rng.normal(size=m.n_sites)
    for c in (0.0, 0.7):
        Phi = ScalarField(m, np.full(m.n_sites, c))
        assert energy_identity_residual(H, m, Phi, 0.3 + 0.2j, u, 5.0) < 1e-12


def test_energy_identity_first_order():
    res = []
    # spacings 1/512 and 1/1024 on [0, 2]
    for N in (1024, 2048):
        m = build_grid(1, [N + 1], 2 / N, potential_fn=lambda x: np.cos(np.pi * x[:, 0]) ** 2)
        dec = find_wells(m, 1.0)
        H = assemble_hamiltonian(m, 100.0)
        ev, vec = la.eigh(H.toarray(), subset_by_index=[0, 0])
        u = l2_normalize(m, vec[:, 0])
        Phi = build_weight(m, dec, 0.3, 0.5, 0)
        res.append(energy_identity_residual(H, m, Phi, ev[0], u, 100.0))
    assert res[1] < res[0] / 1.7


def test_decay_trivial_cases():
    m = four_wells()
    dec = find_wells(m, 1.0)
    comp = dec.components[0]
    inside = dec.core(m, 0, 0.5)
    u = np.zeros(m.n_sites)
    u[inside] = 1.0
    assert eigenfunction_decay(m, dec, 0, 0.5, l2_normalize(m, u)) == 0.0
    v = l2_normalize(m, np.ones(comp.size))
    frac = np.mean(m.potential[comp] >= 0.5)
    assert eigenfunction_decay(m, dec, 0, 0.5, v) == pytest.approx(frac, rel=1e-12)
    with pytest.raises(NotNormalized):
        eigenfunction_decay(m, dec, 0, 0.5, 2 * v)


def test_decay_monotone_in_mu():
    m = four_wells()
    dec = find_wells(m, 1.0)
    comp = dec.components[0]
    masses = []
    for mu in (100.0, 400.0):
        H = assemble_hamiltonian(m, mu)[comp][:, comp].toarray()
        _, vec = la.eigh(H)
        masses.append(eigenfunction_decay(m, dec, 0, 0.5, l2_normalize(m, vec[:, 0])))
    assert masses[1] < masses[0]


def test_csv_export(tmp_path):
    m = build_grid(2, [3, 2], 0.5, potential_fn=np.arange(6.0))
    d = agmon_distance(m, 0.0, [0])
    d.to_csv(tmp_path / "d.csv")
    rows = (tmp_path / "d.csv").read_text().splitlines()
    assert rows[0] == "site,x,y,value" and len(rows) == 7


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_triangle_inequality_and_energy_monotonicity(seed):
    rng = np.random.default_rng(seed)
    m = build_grid(2, [6, 5], 0.3, potential_fn=lambda x: 2 * rng.random(len(x)))
    E, Ep = sorted(rng.uniform(0, 2, 2))
    src = rng.choice(m.n_sites, 3, replace=False)
    dS = agmon_distance(m, E, src).values
    y = int(rng.integers(m.n_sites))
    dy = agmon_distance(m, E, [y]).values
    assert np.all(dS <= dy + dS[y] + 1e-12)
    assert np.all(dS[src] == 0) and np.all(dS >= 0)
    assert np.all(agmon_distance(m, Ep, src).values <= dS + 1e-12)


@settings(max_examples=200, deadline=None)
@given(st.floats(0.0, 1.0))
def test_partition_exact_for_any_value(p):
    # the complement construction sums back to one bit-for-bit
    assert (1.0 - p) + p == 1.0
