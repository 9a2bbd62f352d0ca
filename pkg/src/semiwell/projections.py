"""Projection matrices, Gram-corrected quasi-projections and their comparison.

Projections of small rank are kept as an orthonormal factor ``Q`` with
``P = Q Q*``; all norms of differences are then computed exactly on the
joint column space instead of on n-by-n matrices.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
import scipy.sparse.linalg as spla

from .errors import DimensionMismatch, GramSingular, ProjectionsTooFar

PROVENANCES = ("riesz", "eigen", "quasi_gram")
GRAM_FLOOR = 1e-6


def lowrank_norm(L: np.ndarray, R: np.ndarray) -> float:
    """``||L R*||_2`` through thin QR factors."""
    if L.shape[1] == 0:
        return 0.0
    _, RL = np.linalg.qr(L)
    _, RR = np.linalg.qr(R)
    return float(np.linalg.norm(RL @ RR.conj().T, 2))


class ProjectionMatrix:
    """Hermitian projection with provenance.

    Built either from a dense matrix (``from_dense``) or from orthonormal
    columns (``from_factor``). Dense ones compute an orthonormal factor on
    demand by subspace iteration with the known rank.
    """

    def __init__(self, n, provenance, rank, dense=None, factor=None, meta=None):
        if provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {provenance!r}")
        self.n = int(n)
        self.provenance = provenance
        self.rank = int(rank)
        self._dense = dense
        self._factor = factor
        self.meta = dict(meta or {})

    @classmethod
    def from_dense(cls, P, provenance, rank=None, meta=None):
        P = np.asarray(P, dtype=complex)
        P = 0.5 * (P + P.conj().T)
        tr = float(np.trace(P).real)
        r = int(round(tr))
        if rank is not None and int(rank) != r:
            raise ValueError(f"trace {tr:.6f} disagrees with rank {rank}")
        if abs(tr - r) > 1e-6:
            raise ValueError(f"trace {tr:.9f} is not an integer")
        m = dict(meta or {})
        m["trace"] = tr
        return cls(P.shape[0], provenance, r, dense=P, meta=m)

    @classmethod
    def from_factor(cls, Q, provenance, meta=None):
        Q = np.asarray(Q, dtype=complex)
        return cls(Q.shape[0], provenance, Q.shape[1], factor=Q, meta=meta)

    @classmethod
    def zero(cls, n, provenance="eigen"):
        return cls.from_factor(np.zeros((n, 0), dtype=complex), provenance)

    @property
    def factor(self) -> np.ndarray:
        if self._factor is None:
            self._factor = _dense_to_factor(self._dense, self.rank)
        return self._factor

    def dense(self) -> np.ndarray:
        if self._dense is None:
            Q = self._factor
            self._dense = Q @ Q.conj().T
        return self._dense

    @property
    def has_dense(self) -> bool:
        return self._dense is not None

    def apply(self, v):
        if self._dense is not None:
            return self._dense @ v
        Q = self._factor
        return Q @ (Q.conj().T @ v)

    def trace(self) -> float:
        if self._dense is not None:
            return float(np.trace(self._dense).real)
        return float(np.sum(np.abs(self._factor) ** 2))

    def idempotence_error(self) -> float:
        if self._dense is None:
            Q = self._factor
            return float(np.linalg.norm(Q.conj().T @ Q - np.eye(Q.shape[1]), 2)) if Q.shape[1] else 0.0
        P = self._dense
        if self.n <= 600:
            return float(np.linalg.norm(P @ P - P, 2))
        op = spla.LinearOperator((self.n, self.n), matvec=lambda v: P @ (P @ v) - P @ v, dtype=complex)
        w = spla.eigsh(op, k=1, which="LM", tol=1e-3, return_eigenvectors=False, v0=np.ones(self.n, complex))
        return float(np.abs(w).max())


def _dense_to_factor(P: np.ndarray, rank: int) -> np.ndarray:
    n = P.shape[0]
    if rank == 0:
        return np.zeros((n, 0), dtype=complex)
    if n <= 600 or rank > n // 4:
        w, V = la.eigh(P)
        return V[:, np.argsort(w)[::-1][:rank]]
    rng = np.random.default_rng(0)
    Q, _ = np.linalg.qr(P @ (rng.normal(size=(n, rank + 8)) + 0j))
    for _ in range(3):
        Q, _ = np.linalg.qr(P @ Q)
    w, S = la.eigh(Q.conj().T @ P @ Q)
    return Q @ S[:, np.argsort(w)[::-1][:rank]]


@dataclass(frozen=True, eq=False)
class GramData:
    g: list[np.ndarray]
    G: list[np.ndarray]
    deviation: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def max_deviation(self) -> float:
        return float(self.deviation.max()) if self.deviation.size else 0.0


def _local_eigvecs(win, lam):
    sel = win.eigenvalues <= lam
    return win.eigenvectors[:, sel]


def build_quasi_projection(decomp, cutoffs, well_windows, lam: float):
    """Orthogonal projection onto ``span{phi_h u_{j,h}}`` over all wells.

    ``well_windows[h]`` holds Dirichlet eigenpairs of well ``h`` as vectors
    on ``decomp.components[h]``; those with eigenvalue ``<= lam`` are used.
    Returns ``(ProjectionMatrix, GramData)`` with ``P = sum_h B_h G_h B_h*``
    stored as ``Q Q*``, ``Q_h = B_h L_h^{-*}`` and ``g_h = L_h L_h*``.
    """
    n = cutoffs.phi0.model.n_sites
    blocks, gs, Gs, dev = [], [], [], []
    for h, (comp, win) in enumerate(zip(decomp.components, well_windows)):
        U = _local_eigvecs(win, lam)
        k = U.shape[1]
        if k == 0:
            gs.append(np.zeros((0, 0)))
            Gs.append(np.zeros((0, 0)))
            dev.append(0.0)
            continue
        B = cutoffs.phi_h[h].values[comp][:, None] * U
        g = B.conj().T @ B
        g = 0.5 * (g + g.conj().T)
        gmin = la.eigvalsh(g).min()
        if gmin < GRAM_FLOOR:
            raise GramSingular(f"well {h}: smallest Gram eigenvalue {gmin:.2e} < {GRAM_FLOOR:g}")
        L = la.cholesky(g, lower=True)
        G = la.cho_solve((L, True), np.eye(k))
        Qh = la.solve_triangular(L, B.conj().T, lower=True).conj().T
        full = np.zeros((n, k), dtype=complex)
        full[comp] = Qh
        blocks.append(full)
        gs.append(g)
        Gs.append(G)
        dev.append(float(np.linalg.norm(g - np.eye(k), 2)))
    Q = np.hstack(blocks) if blocks else np.zeros((n, 0), dtype=complex)
    P = ProjectionMatrix.from_factor(Q, "quasi_gram", meta={"lam": lam})
    return P, GramData(gs, Gs, np.asarray(dev))


def _check_dims(E, P):
    if E.n != P.n:
        raise DimensionMismatch(f"projections act on {E.n} and {P.n} sites")


def projection_gap_norm(E: ProjectionMatrix, P: ProjectionMatrix) -> float:
    """Operator 2-norm of ``E - P``."""
    _check_dims(E, P)
    if not (E.has_dense and P.has_dense) or E.n > 600:
        QE, QP = E.factor, P.factor
        L = np.hstack([QE, QP])
        R = np.hstack([QE, -QP])
        return lowrank_norm(L, R)
    return float(np.linalg.norm(E.dense() - P.dense(), 2))


@dataclass(frozen=True, eq=False)
class PartialIsometry:
    """``W = left @ right*`` with residuals against the two projections."""

    left: np.ndarray
    right: np.ndarray
    residual_E: float
    residual_P: float
    norm: float

    def dense(self) -> np.ndarray:
        return self.left @ self.right.conj().T

    def apply(self, v):
        return self.left @ (self.right.conj().T @ v)


def mvn_partial_isometry(E: ProjectionMatrix, P: ProjectionMatrix) -> PartialIsometry:
    """Polar part of ``P E``: ``W* W = E`` and ``W W* = P``.

    With ``Q_P* Q_E = X S Y*`` the isometry is ``W = Q_P X Y* Q_E*``, which
    equals ``P E (E P E)^{-1/2}`` on the range of ``E``.
    """
    _check_dims(E, P)
    gap = projection_gap_norm(E, P)
    if gap >= 1.0 or E.rank != P.rank:
        raise ProjectionsTooFar(f"||E - P|| = {gap:.6f} (ranks {E.rank}, {P.rank})")
    QE, QP = E.factor, P.factor
    if QE.shape[1] == 0:
        z = np.zeros((E.n, 0), dtype=complex)
        return PartialIsometry(z, z, 0.0, 0.0, 0.0)
    X, s, Yh = la.svd(QP.conj().T @ QE)
    left = QP @ X
    right = QE @ Yh.conj().T
    # W*W = right (left* left) right* and W W* = left (right* right) left*
    res_E = lowrank_norm(np.hstack([right @ (left.conj().T @ left), QE]), np.hstack([right, -QE]))
    res_P = lowrank_norm(np.hstack([left @ (right.conj().T @ right), QP]), np.hstack([left, -QP]))
    nrm = lowrank_norm(left, right)
    if E.has_dense and E.provenance != "eigen":
        res_E = max(res_E, _dense_residual(E.dense(), right @ (left.conj().T @ left), right))
    if P.has_dense and P.provenance != "quasi_gram":
        res_P = max(res_P, _dense_residual(P.dense(), left @ (right.conj().T @ right), left))
    return PartialIsometry(left, right, res_E, res_P, nrm)


def _dense_residual(M, F, G):
    D = F @ G.conj().T - M
    if D.shape[0] <= 600:
        return float(np.linalg.norm(D, 2))
    op = spla.LinearOperator(D.shape, matvec=lambda v: D @ v, dtype=complex)
    return float(np.abs(spla.eigsh(op, k=1, which="LM", tol=1e-3, return_eigenvectors=False)).max())


def decomposition_check(E: ProjectionMatrix, decomp, cutoffs, well_windows, lam: float):
    """``(||E - sum psi_h E_h phi_h||, ||P - sum phi_h E_h phi_h||)``.

    ``E_h`` is the well's Dirichlet spectral projection below ``lam`` and
    ``P`` the Gram-corrected quasi-projection.
    """
    n = E.n
    P, _ = build_quasi_projection(decomp, cutoffs, well_windows, lam)
    if P.n != n:
        raise DimensionMismatch(f"projections act on {n} and {P.n} sites")
    psiU, phiU = [], []
    for h, (comp, win) in enumerate(zip(decomp.components, well_windows)):
        U = _local_eigvecs(win, lam)
        full = np.zeros((n, U.shape[1]), dtype=complex)
        full[comp] = U
        psiU.append(cutoffs.psi_h[h].values[:, None] * full)
        phiU.append(cutoffs.phi_h[h].values[:, None] * full)
    A = np.hstack(psiU) if psiU else np.zeros((n, 0))
    B = np.hstack(phiU) if phiU else np.zeros((n, 0))
    QE, QP = E.factor, P.factor
    r1 = lowrank_norm(np.hstack([QE, A]), np.hstack([QE, -B]))
    r2 = lowrank_norm(np.hstack([QP, B]), np.hstack([QP, -B]))
    return r1, r2
