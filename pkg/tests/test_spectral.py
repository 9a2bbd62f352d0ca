import numpy as np
import pytest
import scipy.linalg as la
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from semiwell.errors import FactorizationSingular, TooLarge
from semiwell.lattice import assemble_hamiltonian, build_grid, dirichlet_restrict, find_wells
from semiwell.spectral import (
    count_below,
    count_states,
    detect_gaps,
    eig_dense,
    eig_window,
    fermi_level,
    inertia,
    separated_net,
    well_spectrum,
)


def four_well_model(n=1025, spacing=1 / 128):
    return build_grid(1, [n], spacing, potential_fn=lambda x: np.cos(np.pi * x[:, 0] / 2) ** 2)


def test_dense_closed_forms():
    T = sp.diags([[-1, -1], [2, 2, 2], [-1, -1]], [-1, 0, 1]).astype(complex)
    w = eig_dense(T).eigenvalues
    assert np.allclose(w, 2 - 2 * np.cos(np.arange(1, 4) * np.pi / 4), atol=1e-14)
    assert np.allclose(eig_dense(sp.identity(4)).eigenvalues, 1)
    assert np.allclose(eig_dense(sp.diags([1.0, 2, 5, 6])).eigenvalues, [1, 2, 5, 6])


def test_dense_too_large():
    with pytest.raises(TooLarge):
        eig_dense(sp.identity(4097))


def test_window_diagonal():
    D = sp.diags([1.0, 2, 5, 6]).astype(complex)
    win = eig_window(D, 0, 3)
    assert np.allclose(win.eigenvalues, [1, 2]) and win.count == 2
    assert eig_window(D, 3, 4).count == 0


def test_inertia_singular_shift():
    D = sp.diags([1.0, 2, 5, 6])
    assert inertia(D, 3.0) == 2
    with pytest.raises(FactorizationSingular):
        inertia(D, 2.0)
    assert count_below(D, 2.0, inclusive=True) == 2
    assert count_below(D, 2.0) == 1


def test_inertia_magnetic_2d_matches_dense():
    # shift 4.0 forces SuperLU off the diagonal on this model
    m = build_grid(2, [20, 20], 1.0, vector_potential_fn=lambda p: np.stack([-0.05 * p[:, 1], 0.05 * p[:, 0]], axis=1))
    H = assemble_hamiltonian(m, 1.0)
    ev = la.eigvalsh(H.toarray())
    for s in (0.5, 1.3, 2.7, 4.0, 6.1):
        assert inertia(H, s) == np.sum(ev < s)


def test_window_matches_dense_double_well():
    m = build_grid(1, [1025], 1 / 512, potential_fn=lambda x: np.cos(np.pi * x[:, 0]) ** 2)
    mu, E1 = 200.0, 0.3
    H = assemble_hamiltonian(m, mu)
    win = eig_window(H, 0, E1 * mu)
    ev = la.eigvalsh(H.toarray())
    ref = ev[ev <= E1 * mu]
    assert win.count == len(ref) > 0
    assert np.max(np.abs(win.eigenvalues - ref)) <= 1e-8
    assert win.check()


def test_well_spectrum_identical_wells():
    m = four_well_model()
    H = assemble_hamiltonian(m, 200.0)
    dec = find_wells(m, 1.0)
    ws = well_spectrum(dec, H, 0, 60.0)
    base = ws.windows[0].eigenvalues
    for w in ws.windows[1:]:
        assert np.allclose(w.eigenvalues, base, atol=1e-10)
    assert np.allclose(ws.merged, np.repeat(base, 4), atol=1e-10)
    # merged multiset sits inside the spectrum of the union
    union = la.eigvalsh(dirichlet_restrict(H, dec.sites).toarray())
    assert all(np.min(np.abs(union - e)) <= 1e-10 for e in ws.merged)


def test_well_spectrum_single_well():
    m = build_grid(1, [300], 1 / 100, potential_fn=lambda x: (x[:, 0] - 1.5) ** 2)
    H = assemble_hamiltonian(m, 50.0)
    dec = find_wells(m, 10.0)
    assert len(dec) == 1 and dec.components[0].size == 300
    assert np.allclose(well_spectrum(dec, H, 0, 60).merged, eig_window(H, 0, 60).eigenvalues, atol=1e-10)


def test_two_decoupled_wells_duplicate():
    blk = sp.diags([[-1] * 9, [2] * 10, [-1] * 9], [-1, 0, 1])
    H = sp.block_diag([blk, blk]).astype(complex)
    V = np.zeros(20)
    m = build_grid(1, [20], 1.0, potential_fn=V)
    dec = find_wells(build_grid(1, [21], 1.0, potential_fn=np.r_[V[:10], 5.0, V[10:]]), 1.0)
    ws = well_spectrum(dec, sp.block_diag([blk, sp.identity(1) * 7, blk]).astype(complex), 0, 5)
    assert np.allclose(ws.merged[::2], ws.merged[1::2])
    assert m.n_sites == 20 and H.shape == (20, 20)


def test_detect_gaps_conventions():
    g = detect_gaps([1, 2, 5, 6], 0, 7, 1)
    assert g.intervals == [(2.0, 5.0)]
    assert len(detect_gaps([], 0, 7, 1)) == 0
    assert len(detect_gaps([1, 1 + 1e-12], 0, 2, 1e-6)) == 0


def test_fermi_level_clips_to_window():
    lam, gap = fermi_level([1, 1.1, 4, 9], 0, 6, 10)
    assert gap == (1.1, 4.0) and lam == pytest.approx(2.55)
    lam, gap = fermi_level([1, 9], 0, 6, 10)
    assert gap == (1.0, 6.0)


def test_count_states_simple():
    m = four_well_model()
    dec = find_wells(m, 1.0)
    H = assemble_hamiltonian(m, 200.0)
    assert np.all(count_states(dec, H, 1e-3, 200.0) == 0)
    ref = la.eigvalsh(dirichlet_restrict(H, dec.components[0]).toarray())
    assert count_states(dec, H, 0.3, 200.0)[0] == np.sum(ref <= 60.0)
    D = sp.diags([0.5, 3.0, 1.0, 7.0])
    assert count_states(find_wells(build_grid(1, [4], 1.0), 1.0), D, 0.1, 10.0)[0] == 2


def test_weyl_growth_harmonic_well():
    m = build_grid(1, [1025], 1 / 256, potential_fn=lambda x: (x[:, 0] - 2) ** 2)
    dec = find_wells(m, 3.0)
    mus = np.array([100, 200, 400, 800, 1600.0])
    counts = [count_states(dec, assemble_hamiltonian(m, mu), 1.0, mu)[0] for mu in mus]
    slope = np.polyfit(np.log(mus), np.log(counts), 1)[0]
    assert 0.3 <= slope <= 0.8


def test_separated_net_examples():
    m = build_grid(1, [9], 0.5)
    assert separated_net(range(9), 1.0, m).tolist() == [0, 2, 4, 6, 8]
    assert separated_net([3], 1.0, m).tolist() == [3]
    g = build_grid(2, [10, 10], 1.0)
    kept = separated_net(range(100), 3.0, g)
    D = g.distances(kept, kept)
    assert np.all(D[~np.eye(len(kept), dtype=bool)] >= 3)
    assert np.all(g.distances(range(100), kept).min(axis=1) < 3)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_window_count_is_inertia_difference(seed):
    rng = np.random.default_rng(seed)
    n = 60
    A = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
    A = sp.csr_matrix((A + A.conj().T) / 2)
    lo, hi = sorted(rng.uniform(-8, 8, 2))
    win = eig_window(A, lo, hi)
    ev = la.eigvalsh(A.toarray())
    assert win.count == inertia(A, hi) - inertia(A, lo) == np.sum((ev >= lo) & (ev <= hi))
    assert win.check()


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 10), max_size=15), st.floats(1e-3, 2))
def test_gaps_exclude_values_and_cover(vals, mw):
    v = np.sort(vals)
    g = detect_gaps(v, 0, 10, mw)
    for a, b in g.intervals:
        assert not np.any((v > a) & (v < b))
        assert b - a > mw
    # interior points far from all values are covered
    if len(v) >= 2:
        for x in np.linspace(v[0], v[-1], 50):
            if np.min(np.abs(v - x)) >= mw:
                assert any(a < x < b for a, b in g.intervals)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.5, 4))
def test_net_separated_and_covering(seed, r):
    rng = np.random.default_rng(seed)
    g = build_grid(2, [8, 8], 0.5)
    pts = rng.permutation(64)[:40]
    kept = separated_net(pts, r, g)
    D = g.distances(kept, kept)
    assert np.all(D[~np.eye(len(kept), dtype=bool)] >= r)
    assert np.all(g.distances(pts, kept).min(axis=1) < r)
