import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from semiwell.agmon import build_cutoffs
from semiwell.errors import DimTooLarge, FrameMismatch, SubspaceNotLocal
from semiwell.lattice import assemble_hamiltonian, build_grid, find_wells
from semiwell.projections import ProjectionMatrix, build_quasi_projection
from semiwell.resolvent import eigen_projection
from semiwell.roe import (
    band_truncate,
    build_wannier_frame,
    conjugation_check,
    isometry_error,
    propagation_profile,
    propagation_radius,
    well_subspaces,
)
from semiwell.spectral import eig_window, fermi_level, well_spectrum


def cosine_model(n=1025, a=1 / 128):
    return build_grid(1, [n], a, potential_fn=lambda x: np.cos(np.pi * x[:, 0] / 2) ** 2)


def test_profile_of_diagonal_and_adjacency():
    m = build_grid(2, [6, 5], 0.5)
    radii = np.array([0.5, 1.0, 2.0])
    prof = propagation_profile(sp.diags(np.arange(1.0, 31.0)), m, radii)
    assert np.all(prof.sup_offdiag == 0)
    A = m.adjacency()
    prof = propagation_profile(A, m, np.array([0.5, 0.5001, 1.0]))
    assert prof.sup_offdiag[0] == pytest.approx(1 / 0.25)
    assert np.all(prof.sup_offdiag[1:] == 0)


def test_profile_exponential_oracle():
    # kernel e^{-2|x-y|} on a chain is recovered exactly by the fit
    m = build_grid(1, [200], 0.05)
    x = m.coords[:, 0]
    K = np.exp(-2 * np.abs(x[:, None] - x[None, :])) * m.cell_volume
    prof = propagation_profile(K, m, np.arange(0, 5, 0.25))
    assert prof.nu == pytest.approx(2.0, rel=1e-10)
    assert prof.prefactor == pytest.approx(1.0, rel=1e-9)
    assert prof.r_squared == pytest.approx(1.0)


def test_band_truncate_trivial():
    m = build_grid(1, [30], 0.1)
    K = np.random.default_rng(0).normal(size=(30, 30))
    K = K + K.T
    B, err = band_truncate(K, m, 3.0)
    assert err == pytest.approx(0, abs=1e-13)
    B, err = band_truncate(np.diag(np.arange(30.0)), m, 0.1)
    assert err == 0
    with pytest.raises(ValueError):
        band_truncate(K, m, 0.05)


def test_band_truncate_tridiagonal():
    m = build_grid(1, [40], 1.0)
    T = m.adjacency().toarray() + np.diag(np.full(40, 2.0))
    B, err = band_truncate(T + 0.01 * np.eye(40, k=3) + 0.01 * np.eye(40, k=-3), m, 1.0)
    assert np.allclose(B.toarray(), T)
    # the dropped part is 0.01 times a symmetric shift pair of norm at most 2
    assert 0.01 <= err <= 0.02 + 1e-15


def test_propagation_radius():
    m = build_grid(1, [10], 0.5)
    K = np.eye(10) + np.eye(10, k=2)
    assert propagation_radius(K, m) == pytest.approx(1.0)
    assert propagation_radius(np.eye(10), m) == 0


def test_projection_profile_decays():
    m = cosine_model()
    dec = find_wells(m, 1.0)
    H = assemble_hamiltonian(m, 200.0)
    ws = well_spectrum(dec, H, 0, 200.0)
    lam, _ = fermi_level(ws.merged, 0, 60.0, 200.0)
    E = eigen_projection(eig_window(H, 0, lam).eigenvectors)
    prof = propagation_profile(E, m, np.arange(0, 8, 0.125))
    assert np.all(np.diff(prof.sup_offdiag) <= 0)
    assert prof.nu > 0 and prof.r_squared >= 0.9
    # dense input gives the same profile
    prof2 = propagation_profile(E.dense(), m, np.arange(0, 8, 0.125))
    assert np.allclose(prof.sup_offdiag, prof2.sup_offdiag, rtol=1e-10, atol=1e-16)


def local_vectors(comp, k, n, rng):
    Q, _ = np.linalg.qr(rng.normal(size=(len(comp), k)) + 1j * rng.normal(size=(len(comp), k)))
    V = np.zeros((n, k), dtype=complex)
    V[comp] = Q
    return V


def test_frame_all_empty():
    m = cosine_model(257, 1 / 32)
    dec = find_wells(m, 1.0)
    frame = build_wannier_frame(dec, [np.zeros((m.n_sites, 0))] * 4, m)
    assert frame.n == 0 and frame.D_k == {}
    assert conjugation_check(frame, ProjectionMatrix.zero(m.n_sites, "quasi_gram")) == 0


def test_frame_single_well_coordinates():
    m = build_grid(1, [20], 0.1, potential_fn=np.zeros(20))
    dec = find_wells(m, 1.0)
    k = 3
    V = np.eye(20)[:, :k]
    frame = build_wannier_frame(dec, [V], m)
    assert list(frame.D_k) == [3]
    Jp = frame.j(frame.gamma())
    assert np.abs(Jp - np.diag(np.r_[np.ones(k), np.zeros(17)])).max() <= 1e-15
    P = ProjectionMatrix.from_factor(V, "quasi_gram")
    assert conjugation_check(frame, P) <= 1e-15


def test_frame_four_wells_mixed_ranks():
    m = cosine_model(257, 1 / 32)
    dec = find_wells(m, 1.0)
    rng = np.random.default_rng(3)
    subs = [local_vectors(c, k, m.n_sites, rng) for c, k in zip(dec.components, (1, 2, 1, 2))]
    frame = build_wannier_frame(dec, subs, m)
    assert frame.n == 2
    assert {k: len(v) for k, v in frame.D_k.items()} == {1: 2, 2: 2}
    assert frame.pk_identity_residual() == 0
    assert isometry_error(frame) <= 1e-12
    Q = np.hstack(subs)
    P = ProjectionMatrix.from_factor(Q, "quasi_gram")
    assert conjugation_check(frame, P) <= 1e-12
    # supports stay inside the domains
    for i, dom in enumerate(frame.domains):
        blk = frame.U[:, i * frame.n:(i + 1) * frame.n].toarray()
        out = np.ones(m.n_sites, bool)
        out[dom] = False
        assert np.abs(blk[out]).max(initial=0) == 0


def test_frame_net_extends_far_from_wells():
    # a single narrow well in a long box leaves room for extension points
    m = build_grid(1, [200], 0.05, potential_fn=lambda x: np.minimum(1.0, 4 * (x[:, 0] - 1) ** 2))
    dec = find_wells(m, 0.9)
    V = np.zeros((200, 1))
    V[dec.anchors[0]] = 1
    frame = build_wannier_frame(dec, [V], m)
    r = 2 * frame.delta + frame.epsilon
    extra = frame.D_prime[1:]
    assert len(extra) > 0
    D = m.distances(frame.D_prime, extra)
    distinct = frame.D_prime[:, None] != extra[None, :]
    assert np.all(D[distinct] >= r - 1e-12)
    assert np.all(m.distances(None, frame.D_prime).min(axis=1) < r)
    assert isometry_error(frame) <= 1e-12
    assert np.all(frame.dims[1:] == 0)


def test_frame_errors():
    m = cosine_model(257, 1 / 32)
    dec = find_wells(m, 1.0)
    bad = np.zeros((m.n_sites, 1))
    bad[dec.components[1][0]] = 1
    empty = np.zeros((m.n_sites, 0))
    with pytest.raises(SubspaceNotLocal):
        build_wannier_frame(dec, [bad, empty, empty, empty], m)
    tiny = build_grid(1, [5], 1.0, potential_fn=np.array([0, 0, 5, 0, 5.0]))
    dt = find_wells(tiny, 1.0)
    with pytest.raises(DimTooLarge):
        build_wannier_frame(dt, [np.eye(5)[:, :1], np.eye(5)[:, [3, 3]]], tiny)
    with pytest.raises(FrameMismatch):
        build_wannier_frame(dec, [empty], m)
    frame = build_wannier_frame(dec, [empty] * 4, m)
    with pytest.raises(FrameMismatch):
        conjugation_check(frame, ProjectionMatrix.zero(10))


def test_quasi_projection_frame_pipeline():
    m = cosine_model()
    dec = find_wells(m, 1.0)
    cf = build_cutoffs(m, dec, 0.3, 0.22)
    H = assemble_hamiltonian(m, 200.0)
    ws = well_spectrum(dec, H, 0, 200.0)
    lam, _ = fermi_level(ws.merged, 0, 60.0, 200.0)
    P, _ = build_quasi_projection(dec, cf, ws.windows, lam)
    frame = build_wannier_frame(dec, well_subspaces(P, dec), m)
    assert conjugation_check(frame, P) <= 1e-10
    assert propagation_radius(P, m) <= frame.delta
    prof = propagation_profile(P, m, np.array([0.0, frame.delta + m.spacing]))
    assert prof.sup_offdiag[-1] == 0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.lists(st.integers(0, 3), min_size=4, max_size=4))
def test_frame_properties(seed, ks):
    m = cosine_model(257, 1 / 32)
    dec = find_wells(m, 1.0)
    rng = np.random.default_rng(seed)
    subs = [local_vectors(c, k, m.n_sites, rng) for c, k in zip(dec.components, ks)]
    frame = build_wannier_frame(dec, subs, m)
    assert isometry_error(frame) <= 1e-12
    for b, k in zip(frame.p_blocks(), frame.dims):
        assert np.array_equal(b @ b, b) and np.array_equal(b, b.conj().T) and round(np.trace(b)) == k
    assert frame.pk_identity_residual() == 0
    if frame.n:
        # j is isometric on block-diagonal matrices
        blocks = [rng.normal(size=(frame.n, frame.n)) for _ in frame.D_prime]
        T = frame.gamma(blocks).toarray()
        assert np.linalg.norm(frame.j(T), 2) == pytest.approx(np.linalg.norm(T, 2), rel=1e-10)
