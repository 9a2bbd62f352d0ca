"""Resolvent solves, Riesz projections and the well parametrix.

The parametrix glues Dirichlet resolvents of the wells and of the exterior
region ``M0`` with the cutoff family:

    R(z) = sum_h psi_h (H_{U_h} - z)^{-1} phi_h + psi0 (H_{M0} - z)^{-1} phi0

and its defect ``K(z) = (H - z) R(z) - I`` is evaluated through the
commutators ``[H, psi]`` rather than by subtraction.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse import csgraph

from .agmon import CutoffFamily, ScalarField
from .errors import (
    EmptyWellSpectrum,
    FactorizationSingular,
    NearSingular,
    NotInGap,
    QuadratureNotConverged,
    SpectralCollision,
)
from .lattice import WellDecomposition, dirichlet_restrict, gershgorin_lower, operator_norm_bound
from .projections import ProjectionMatrix
from .spectral import inertia

SINGULAR_RTOL = 1e-10


# bandwidth (after reverse Cuthill-McKee) up to which LAPACK band solves are used
MAX_BAND = 64


class _BandSolver:
    """Banded LU, optionally in a bandwidth-reducing ordering."""

    def __init__(self, A: sp.csr_matrix, perm, lower: int, upper: int):
        self.perm = perm
        self.inv = None if perm is None else np.argsort(perm)
        Ap = (A if perm is None else A[perm][:, perm]).tocoo()
        self.lu = (lower, upper)
        self.ab = self._band(Ap.row, Ap.col, Ap.data, lower, upper, A.shape[0])
        self.ab_h = self._band(Ap.col, Ap.row, Ap.data.conj(), upper, lower, A.shape[0])

    @staticmethod
    def _band(r, c, v, lower, upper, n):
        ab = np.zeros((lower + upper + 1, n), dtype=complex)
        ab[upper + r - c, c] = v
        return ab

    def solve(self, b, trans="N"):
        bp = b if self.perm is None else b[self.perm]
        if trans == "N":
            x = la.solve_banded(self.lu, self.ab, bp, check_finite=False)
        else:
            x = la.solve_banded(self.lu[::-1], self.ab_h, bp, check_finite=False)
        return x if self.inv is None else x[self.inv]


def _bandwidths(A):
    C = A.tocoo()
    if C.nnz == 0:
        return 0, 0
    d = C.row - C.col
    return int(max(d.max(), 0)), int(max(-d.min(), 0))


def _factorize(A: sp.csr_matrix):
    lower, upper = _bandwidths(A)
    if max(lower, upper) <= MAX_BAND:
        return _BandSolver(A, None, lower, upper)
    perm = np.asarray(csgraph.reverse_cuthill_mckee(A.tocsr(), symmetric_mode=True))
    lower, upper = _bandwidths(A[perm][:, perm])
    if max(lower, upper) <= MAX_BAND:
        return _BandSolver(A, perm, lower, upper)
    return spla.splu(A.tocsc())


class ShiftedSolver:
    """LU of ``H - z`` with one step of iterative refinement."""

    def __init__(self, H, z: complex):
        self.H = sp.csr_matrix(H, dtype=complex)
        self.z = complex(z)
        n = self.H.shape[0]
        self.norm = max(operator_norm_bound(self.H), 1.0)
        self.A = (self.H - self.z * sp.identity(n, dtype=complex, format="csr")).tocsr()
        self.AH = self.A.getH().tocsr()
        try:
            self.lu = _factorize(self.A)
        except (RuntimeError, la.LinAlgError) as exc:
            raise NearSingular(f"H - z is exactly singular at z={z}") from exc

    def _raw(self, b, trans):
        try:
            return self.lu.solve(b, trans=trans)
        except la.LinAlgError as exc:
            raise NearSingular(f"H - z is exactly singular at z={self.z}") from exc

    def solve(self, b: np.ndarray, adjoint: bool = False) -> np.ndarray:
        b = np.asarray(b, dtype=complex)
        trans = "H" if adjoint else "N"
        A = self.AH if adjoint else self.A
        x = self._raw(b, trans)
        r = b - A @ x
        x = x + self._raw(r, trans)
        bn = np.linalg.norm(b, axis=0)
        xn = np.linalg.norm(x, axis=0)
        # ||x|| / ||b|| <= 1/dist(z, spectrum), so a huge ratio proves z is too close
        if np.any(xn * SINGULAR_RTOL * self.norm > bn * (1 + 1e-6)):
            raise NearSingular(f"z={self.z} is within {SINGULAR_RTOL:g}*||H|| of the spectrum")
        res = np.linalg.norm(b - A @ x, axis=0)
        if np.any(res > 1e-10 * bn):
            raise NearSingular(f"backward error {res.max():.2e} after refinement at z={self.z}")
        return x


def resolvent_apply(H, z: complex, v) -> np.ndarray:
    """``(H - z)^{-1} v`` with backward error at most ``1e-10 ||v||``."""
    return ShiftedSolver(H, z).solve(v)


@dataclass(frozen=True)
class Contour:
    """Circle crossing the real axis at ``left`` and ``lam``, trapezoid nodes."""

    left: float
    lam: float
    order: int

    @property
    def center(self) -> float:
        return 0.5 * (self.left + self.lam)

    @property
    def radius(self) -> float:
        return 0.5 * (self.lam - self.left)

    @property
    def angles(self) -> np.ndarray:
        return 2 * np.pi * (np.arange(self.order) + 0.5) / self.order

    @property
    def nodes(self) -> np.ndarray:
        return self.center + self.radius * np.exp(1j * self.angles)

    @property
    def weights(self) -> np.ndarray:
        """``P = sum_k w_k (H - z_k)^{-1}`` (counter-clockwise, factor i/2pi folded in)."""
        return -self.radius / self.order * np.exp(1j * self.angles)

    def filter(self, x) -> np.ndarray:
        """Scalar rational filter the quadrature applies to an eigenvalue ``x``."""
        x = np.asarray(x, dtype=float)[..., None]
        return np.real(np.sum(self.weights / (x - self.nodes), axis=-1))


def default_contour(H, lam: float, order: int = 32) -> Contour:
    left = min(0.0, gershgorin_lower(H)) - 1.0
    if not lam > left:
        raise NotInGap(f"lambda={lam:g} lies left of the contour's far crossing")
    return Contour(left, float(lam), int(order))


def check_in_gap(H, lam: float) -> int:
    """Inertia count at ``lam``; NotInGap if ``lam`` touches the spectrum."""
    delta = SINGULAR_RTOL * max(operator_norm_bound(H), 1.0)
    try:
        lo, hi = inertia(H, lam - delta), inertia(H, lam + delta)
    except FactorizationSingular as exc:
        raise NotInGap(f"lambda={lam:g} is an eigenvalue") from exc
    if lo != hi:
        raise NotInGap(f"lambda={lam:g} is within {delta:.1e} of an eigenvalue")
    return lo


def idempotence_error(P: np.ndarray) -> float:
    """``||P^2 - P||_2`` for Hermitian ``P``; iterative above 600 rows."""
    n = P.shape[0]
    if n <= 600:
        return float(np.linalg.norm(P @ P - P, 2))
    op = spla.LinearOperator((n, n), matvec=lambda v: P @ (P @ v) - P @ v, dtype=complex)
    w = spla.eigsh(op, k=1, which="LM", tol=1e-3, return_eigenvectors=False,
                   v0=np.ones(n, dtype=complex))
    return float(np.abs(w).max())


def _contour_sum(H, contour: Contour, threads: int) -> np.ndarray:
    n = H.shape[0]
    eye = np.eye(n, dtype=complex)
    upper = np.flatnonzero(contour.angles < np.pi)

    def term(k):
        # quadrature accuracy is policed by the idempotence test, so no refinement here
        X = ShiftedSolver(H, contour.nodes[k])._raw(eye, "N")
        X *= contour.weights[k]
        return X

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            terms = list(pool.map(term, upper))
        S = np.sum(terms, axis=0)
    else:
        S = np.zeros((n, n), dtype=complex)
        for k in upper:
            S += term(k)
    # lower-half nodes are conjugates: their terms are adjoints of the upper ones
    return S + S.conj().T


def riesz_projection(H, lam: float, quad_order: int = 32, threads: int = 1, tol: float = 1e-10) -> ProjectionMatrix:
    """Spectral projection of ``H`` onto ``(-inf, lam]`` by contour quadrature.

    The order doubles until ``||P^2 - P|| <= tol`` (at most 256 nodes).
    """
    H = sp.csr_matrix(H, dtype=complex)
    rank = check_in_gap(H, lam)
    order = int(quad_order)
    while True:
        contour = default_contour(H, lam, order)
        P = _contour_sum(H, contour, threads)
        P = 0.5 * (P + P.conj().T)
        err = idempotence_error(P)
        if err <= tol:
            return ProjectionMatrix.from_dense(P, "riesz", rank=rank, meta={"quad_order": order, "idempotence": err})
        if order >= 256:
            raise QuadratureNotConverged(f"||P^2-P|| = {err:.2e} with {order} nodes")
        order *= 2


def eigen_projection(eigenvectors: np.ndarray) -> ProjectionMatrix:
    """``sum v v*`` over orthonormal columns."""
    V = np.asarray(eigenvectors, dtype=complex)
    return ProjectionMatrix.from_factor(V, "eigen")


def _real_collision(H, z: complex, scale: float) -> bool:
    if abs(z.imag) > SINGULAR_RTOL * scale:
        return False
    d = SINGULAR_RTOL * scale
    try:
        return inertia(H, z.real - d) != inertia(H, z.real + d)
    except FactorizationSingular:
        return True


class ParametrixOps:
    """Action-only ``R(z)``, ``K(z)`` and ``K(z)^*``."""

    def __init__(self, H, decomp: WellDecomposition, cutoffs: CutoffFamily, z: complex, mu: float | None = None):
        self.H = sp.csr_matrix(H, dtype=complex)
        self.z = complex(z)
        self.mu = mu
        self.cutoffs = cutoffs
        self.n = self.H.shape[0]
        scale = max(operator_norm_bound(self.H), 1.0)
        pieces = [(c, p.values, q.values) for c, p, q in zip(decomp.components, cutoffs.phi_h, cutoffs.psi_h)]
        if cutoffs.M0.size:
            pieces.append((cutoffs.M0, cutoffs.phi0.values, cutoffs.psi0.values))
        self.pieces = []
        for label, (sites, phi, psi) in enumerate(pieces):
            if not np.any(phi[sites]) and not np.any(psi[sites]):
                continue
            sub = dirichlet_restrict(self.H, sites)
            name = "M0" if label == len(decomp.components) else f"well {label}"
            if _real_collision(sub, self.z, scale):
                raise SpectralCollision(f"z={self.z} hits the spectrum of the {name} operator")
            try:
                solver = ShiftedSolver(sub, self.z)
            except NearSingular as exc:
                raise SpectralCollision(f"{name}: {exc}") from exc
            self.pieces.append((sites, phi, psi, solver))

    def _commutator(self, psi, w):
        """``[H, psi] w`` (adjoint is ``-[H, psi]`` since psi is real)."""
        return self.H @ (psi * w) - psi * (self.H @ w)

    def _solve(self, solver, b, adjoint=False):
        try:
            return solver.solve(b, adjoint)
        except NearSingular as exc:
            raise SpectralCollision(str(exc)) from exc

    def R(self, v):
        v = np.asarray(v, dtype=complex)
        out = np.zeros(v.shape, dtype=complex)
        for sites, phi, psi, solver in self.pieces:
            w = self._solve(solver, (phi[:, None] * v if v.ndim == 2 else phi * v)[sites])
            full = np.zeros(v.shape, dtype=complex)
            full[sites] = w
            out += psi[:, None] * full if v.ndim == 2 else psi * full
        return out

    def K(self, v):
        v = np.asarray(v, dtype=complex)
        out = np.zeros(self.n, dtype=complex)
        for sites, phi, psi, solver in self.pieces:
            full = np.zeros(self.n, dtype=complex)
            full[sites] = self._solve(solver, (phi * v)[sites])
            out += self._commutator(psi, full)
        return out

    def K_adjoint(self, v):
        v = np.asarray(v, dtype=complex)
        out = np.zeros(self.n, dtype=complex)
        for sites, phi, psi, solver in self.pieces:
            c = -self._commutator(psi, v)
            full = np.zeros(self.n, dtype=complex)
            full[sites] = self._solve(solver, c[sites], adjoint=True)
            out += phi * full
        return out

    def resolvent_identity_error(self, v) -> float:
        """Relative mismatch of ``(H - z) R v - v`` against ``K v``."""
        v = np.asarray(v, dtype=complex)
        lhs = self.H @ self.R(v) - self.z * self.R(v) - v
        return float(np.linalg.norm(lhs - self.K(v)) / max(np.linalg.norm(v), 1e-300))

    def reconstruct(self, v, tol: float = 1e-14, maxiter: int = 2000):
        """``(H - z)^{-1} v = R (I + K)^{-1} v`` with a Neumann series."""
        v = np.asarray(v, dtype=complex)
        y = v.copy()
        term = v.copy()
        vn = np.linalg.norm(v)
        for _ in range(maxiter):
            term = -self.K(term)
            y += term
            if np.linalg.norm(term) <= tol * vn:
                return self.R(y)
        raise NearSingular("Neumann series for (I + K)^{-1} did not converge")

    def as_operator(self) -> spla.LinearOperator:
        return spla.LinearOperator((self.n, self.n), matvec=self.K, rmatvec=self.K_adjoint, dtype=complex)


def build_parametrix(H, decomp: WellDecomposition, cutoffs: CutoffFamily, z: complex, mu: float | None = None) -> ParametrixOps:
    return ParametrixOps(H, decomp, cutoffs, z, mu)


@dataclass(frozen=True)
class NormEstimate:
    value: float
    rel_change: float
    iterations: int

    def __float__(self):
        return self.value


def defect_norm(ops, iters: int = 50, tol: float = 1e-6, seed: int = 0) -> NormEstimate:
    """Power iteration on ``K^* K`` for the operator 2-norm of ``K``.

    ``ops`` is a :class:`ParametrixOps` or any scipy ``LinearOperator``.
    """
    if isinstance(ops, ParametrixOps):
        fwd, adj, n = ops.K, ops.K_adjoint, ops.n
    else:
        fwd, adj, n = ops.matvec, ops.rmatvec, ops.shape[1]
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n) + 1j * rng.normal(size=n)
    x /= np.linalg.norm(x)
    est, change = 0.0, np.inf
    for it in range(1, iters + 1):
        y = adj(fwd(x))
        ny = np.linalg.norm(y)
        new = float(np.sqrt(ny))
        change = abs(new - est) / new if new > 0 else 0.0
        est = new
        if ny == 0:
            return NormEstimate(0.0, 0.0, it)
        x = y / ny
        if change < tol:
            break
    return NormEstimate(est, change, it)


def spectral_distance(full_eigs, well_merged):
    """Per-eigenvalue distance from ``full_eigs`` to the well spectrum and its max."""
    full = np.asarray(getattr(full_eigs, "eigenvalues", full_eigs), dtype=float)
    wells = np.sort(np.asarray(well_merged, dtype=float))
    if full.size == 0:
        return np.zeros(0), 0.0
    if wells.size == 0:
        raise EmptyWellSpectrum("no well eigenvalues to compare against")
    d = np.abs(full[:, None] - wells[None, :]).min(axis=1)
    return d, float(d.max())


def weighted_resolvent_probe(H, Phi: ScalarField, sites, z: complex, mu: float, n_probes: int = 5, seed: int = 0) -> float:
    """Max over random probes of ``||e^{s Phi} (H_W - z)^{-1} e^{-s Phi} v|| / ||v||``."""
    sites = np.asarray(sites, dtype=int)
    s = np.sqrt(mu)
    w = np.exp(s * (Phi.values[sites] - Phi.values[sites].min()))
    solver = ShiftedSolver(dirichlet_restrict(H, sites), z)
    rng = np.random.default_rng(seed)
    best = 0.0
    for _ in range(n_probes):
        v = rng.normal(size=sites.size) + 1j * rng.normal(size=sites.size)
        x = w * solver.solve(v / w)
        best = max(best, float(np.linalg.norm(x) / np.linalg.norm(v)))
    return best
