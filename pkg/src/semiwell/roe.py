"""Finite-propagation diagnostics and the Wannier frame of a well projection.

Kernels are read in the L^2 convention: an n-by-n matrix ``K`` acting on
grid functions has kernel ``K(x, y) = K[x, y] / a^dim``.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import DimTooLarge, FrameMismatch, SubspaceNotLocal
from .lattice import GridModel, WellDecomposition
from .projections import ProjectionMatrix, lowrank_norm
from .spectral import separated_net

LOCAL_TOL = 1e-12
FIT_FLOOR = 1e-12
_CHUNK = 512


def _row_block(K, rows):
    if isinstance(K, ProjectionMatrix):
        Q = K.factor
        return Q[rows] @ Q.conj().T
    if sp.issparse(K):
        return sp.csr_matrix(K)[rows].toarray()
    return np.asarray(K)[rows]


def _shape(K):
    return (K.n, K.n) if isinstance(K, ProjectionMatrix) else K.shape


@dataclass(frozen=True)
class PropagationProfile:
    """``sup_{d(x,y) >= R} |K(x,y)|`` per radius plus an exponential fit."""

    radii: np.ndarray
    sup_offdiag: np.ndarray
    nu: float = np.nan
    prefactor: float = np.nan
    r_squared: float = np.nan
    fit_range: tuple[float, float] = (np.nan, np.nan)

    def envelope(self, R) -> np.ndarray:
        return self.prefactor * np.exp(-self.nu * np.asarray(R, dtype=float))

    def as_dict(self) -> dict:
        return {
            "radii": self.radii.tolist(),
            "sup_offdiag": self.sup_offdiag.tolist(),
            "nu": self.nu,
            "prefactor": self.prefactor,
            "r_squared": self.r_squared,
            "fit_range": list(self.fit_range),
        }


def _fit_tail(radii, sup):
    """Line through ``log sup`` past the diagonal peak and above round-off."""
    if sup.size == 0 or sup[0] <= 0:
        return np.nan, np.nan, np.nan, (np.nan, np.nan)
    past_peak = np.cumsum(sup < sup[0] / np.e) > 0
    sel = past_peak & (sup > FIT_FLOOR * sup[0])
    if sel.sum() < 3:
        return np.nan, np.nan, np.nan, (np.nan, np.nan)
    x, y = radii[sel], np.log(sup[sel])
    slope, icpt = np.polyfit(x, y, 1)
    resid = y - (slope * x + icpt)
    ss = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(resid**2) / ss if ss > 0 else 1.0
    return float(-slope), float(np.exp(icpt)), float(r2), (float(x[0]), float(x[-1]))


def propagation_profile(K, model: GridModel, radii) -> PropagationProfile:
    """Off-diagonal kernel profile of ``K`` (dense, sparse or ProjectionMatrix)."""
    radii = np.asarray(radii, dtype=float)
    if np.any(np.diff(radii) <= 0):
        raise ValueError("radii must be increasing")
    n = model.n_sites
    if _shape(K) != (n, n):
        raise ValueError(f"K has shape {_shape(K)}, model has {n} sites")
    scale = model.cell_volume
    # per-radius-bin maxima, then suffix maxima give sup over d >= R
    best = np.zeros(len(radii))
    for start in range(0, n, _CHUNK):
        rows = np.arange(start, min(start + _CHUNK, n))
        d = model.distances(rows, None).ravel()
        k = np.abs(_row_block(K, rows)).ravel() / scale
        b = np.searchsorted(radii, d * (1 + 1e-12), side="right") - 1
        ok = b >= 0
        np.maximum.at(best, b[ok], k[ok])
    sup = np.maximum.accumulate(best[::-1])[::-1]
    nu, pref, r2, rng = _fit_tail(radii, sup)
    return PropagationProfile(radii, sup, nu, pref, r2, rng)


def propagation_radius(K, model: GridModel, tol: float = 0.0) -> float:
    """Largest ``d(x, y)`` with ``|K[x, y]| > tol``."""
    n = model.n_sites
    out = 0.0
    for start in range(0, n, _CHUNK):
        rows = np.arange(start, min(start + _CHUNK, n))
        blk = np.abs(_row_block(K, rows)) > tol
        if blk.any():
            out = max(out, float(model.distances(rows, None)[blk].max()))
    return out


def _two_norm(A) -> float:
    if A.shape[0] <= 1024:
        return float(np.linalg.norm(A, 2))
    s = spla.svds(A, k=1, return_singular_vectors=False, random_state=0)
    return float(s[0])


def band_truncate(K, model: GridModel, R: float):
    """Drop entries with ``d(x, y) > R``; return the banded part and the 2-norm error."""
    if R < model.spacing:
        raise ValueError("R must be at least one spacing")
    A = K.dense() if isinstance(K, ProjectionMatrix) else (K.toarray() if sp.issparse(K) else np.asarray(K))
    near = model.distances() <= R * (1 + 1e-12)
    B = np.where(near, A, 0)
    B = 0.5 * (B + B.conj().T)
    return sp.csr_matrix(B), _two_norm(A - B)


@dataclass(frozen=True, eq=False)
class WannierFrame:
    """Site-indexed orthonormal frame over the extended net ``D'``.

    ``D_prime[:len(D)]`` are the well anchors. ``bases[i]`` is an
    (n_sites, n) array whose first ``dims[i]`` columns span the given
    subspace of site ``D_prime[i]``. ``U`` maps ``l^2(D') (x) C^n`` into
    grid functions, column ``i * n + j`` being ``bases[i][:, j]``.
    """

    D: np.ndarray
    D_prime: np.ndarray
    dims: np.ndarray
    n: int
    domains: list[np.ndarray]
    U: sp.csc_matrix
    delta: float
    epsilon: float
    D_k: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return len(self.D_prime) * self.n

    def p_blocks(self) -> list[np.ndarray]:
        """``p(h)``: the first ``n_h`` coordinates on ``D``, zero on ``D' \\ D``."""
        return [np.diag((np.arange(self.n) < k).astype(float)) for k in self.dims]

    def gamma(self, blocks=None) -> sp.csr_matrix:
        """Block-diagonal matrix on ``l^2(D') (x) C^n``."""
        blocks = self.p_blocks() if blocks is None else blocks
        if self.n == 0:
            return sp.csr_matrix((0, 0))
        return sp.block_diag(blocks, format="csr")

    def p_k(self, k: int) -> sp.csr_matrix:
        """``p`` restricted to ``D_k``, zero elsewhere."""
        members = set(self.D_k.get(k, []))
        blocks = [b if i in members else np.zeros_like(b) for i, b in enumerate(self.p_blocks())]
        return self.gamma(blocks)

    def pk_identity_residual(self) -> float:
        """``max |p - sum_k p|_{D_k}|`` entrywise (zero when exact)."""
        p = self.gamma()
        total = sp.csr_matrix(p.shape)
        for k in range(1, self.n + 1):
            total = total + self.p_k(k)
        diff = (p - total).toarray()
        return float(np.abs(diff).max()) if diff.size else 0.0

    def j(self, T) -> np.ndarray:
        """``U T U*`` as a dense grid matrix."""
        T = T.toarray() if sp.issparse(T) else np.asarray(T)
        Ud = self.U.toarray()
        return Ud @ T @ Ud.conj().T

    def given_factor(self) -> np.ndarray:
        """Columns of ``U`` selected by ``p``: the given subspace vectors."""
        cols = [i * self.n + j for i, k in enumerate(self.dims) for j in range(k)]
        return self.U[:, cols].toarray()

    def summary(self, residual: float | None = None, radius: float | None = None) -> dict:
        return {
            "num_wells": int(len(self.D)),
            "n_max": int(self.n),
            "D_prime_size": int(len(self.D_prime)),
            "D_k_sizes": {int(k): len(v) for k, v in self.D_k.items()},
            "conjugation_residual": residual,
            "propagation_radius": radius,
        }


def _mgs_complete(V: np.ndarray, pool: np.ndarray, n_total: int, n_sites: int) -> np.ndarray:
    """Extend orthonormal ``V`` (n_sites, k) with delta vectors at ``pool`` sites."""
    cols = [V[:, j] for j in range(V.shape[1])]
    for s in pool:
        if len(cols) >= n_total:
            break
        w = np.zeros(n_sites, dtype=complex)
        w[s] = 1.0
        for _ in range(2):
            for c in cols:
                w -= np.vdot(c, w) * c
        nw = np.linalg.norm(w)
        if nw > 1e-8:
            cols.append(w / nw)
    if len(cols) < n_total:
        raise DimTooLarge(f"domain spans only {len(cols)} of the {n_total} required directions")
    return np.stack(cols, axis=1) if cols else np.zeros((n_sites, 0), dtype=complex)


def _as_full(vecs, comp, n_sites):
    V = np.asarray(vecs, dtype=complex)
    if V.ndim == 1:
        V = V[:, None]
    if V.shape[0] == n_sites:
        return V
    if V.shape[0] == len(comp):
        full = np.zeros((n_sites, V.shape[1]), dtype=complex)
        full[comp] = V
        return full
    raise FrameMismatch(f"subspace vectors have length {V.shape[0]}")


def build_wannier_frame(decomp: WellDecomposition, subspaces, model: GridModel) -> WannierFrame:
    """Frame over ``D'`` completing each well's subspace to dimension ``n``.

    ``subspaces[h]`` holds orthonormal columns, either on the full grid or
    on ``decomp.components[h]``.
    """
    if len(subspaces) != len(decomp):
        raise FrameMismatch(f"{len(subspaces)} subspaces for {len(decomp)} wells")
    N = model.n_sites
    delta = float(decomp.max_diameter)
    eps = float(decomp.min_pairwise_distance)
    if not np.isfinite(eps):
        eps = model.spacing
    anchors = np.asarray(decomp.anchors, dtype=int)

    given = []
    for h, (comp, vecs) in enumerate(zip(decomp.components, subspaces)):
        V = _as_full(vecs, comp, N)
        outside = np.ones(N, bool)
        outside[comp] = False
        leak = float(np.sum(np.abs(V[outside]) ** 2)) if V.size else 0.0
        if leak > LOCAL_TOL:
            raise SubspaceNotLocal(f"well {h}: mass {leak:.2e} outside its domain")
        if V.shape[1] > len(comp):
            raise DimTooLarge(f"well {h}: {V.shape[1]} vectors on {len(comp)} sites")
        given.append(V)
    dims_D = np.array([V.shape[1] for V in given], dtype=int)
    n = int(dims_D.max()) if len(dims_D) else 0

    # extension points: far from the anchors and from each other
    r = 2 * delta + eps
    in_wells = np.zeros(N, bool)
    in_wells[decomp.sites] = True
    D_prime = separated_net(np.arange(N), r, model, seeds=anchors)
    extra = D_prime[len(anchors):]
    ball_r = delta if delta > 0 else model.spacing

    domains, bases = [], []
    for h, V in enumerate(given):
        comp = decomp.components[h]
        domains.append(comp)
        bases.append(_mgs_complete(V, comp, n, N))
    for s in extra:
        ball = np.flatnonzero(model.distances([s], None)[0] <= ball_r * (1 + 1e-12))
        domains.append(ball)
        bases.append(_mgs_complete(np.zeros((N, 0), dtype=complex), ball, n, N))

    dims = np.r_[dims_D, np.zeros(len(extra), dtype=int)]
    U = sp.csc_matrix(np.hstack(bases)) if n else sp.csc_matrix((N, 0), dtype=complex)
    counts = Counter(int(k) for k in dims_D if k > 0)
    D_k = {k: [i for i, d in enumerate(dims_D) if d == k] for k in sorted(counts)}
    return WannierFrame(anchors, D_prime, dims, n, domains, U, delta, eps, D_k)


def isometry_error(frame: WannierFrame) -> float:
    """``||U* U - I||`` on ``l^2(D') (x) C^n``."""
    if frame.size == 0:
        return 0.0
    G = (frame.U.conj().T @ frame.U).toarray()
    return float(np.abs(G - np.eye(frame.size)).max())


def conjugation_check(frame: WannierFrame, P: ProjectionMatrix) -> float:
    """``||U gamma_n(p) U* - P||`` computed on the joint column span."""
    if P.n != frame.U.shape[0]:
        raise FrameMismatch(f"P acts on {P.n} sites, frame on {frame.U.shape[0]}")
    if P.rank != int(frame.dims.sum()):
        raise FrameMismatch(f"P has rank {P.rank}, frame carries {int(frame.dims.sum())} vectors")
    F = frame.given_factor()
    Q = P.factor
    return lowrank_norm(np.hstack([F, Q]), np.hstack([F, -Q]))


def well_subspaces(P: ProjectionMatrix, decomp: WellDecomposition) -> list[np.ndarray]:
    """Split the factor of a well-supported projection into per-well blocks."""
    Q = P.factor
    lab = decomp.labels(P.n)
    owner = np.full(Q.shape[1], -1)
    for j in range(Q.shape[1]):
        mass = np.bincount(lab[lab >= 0], weights=np.abs(Q[lab >= 0, j]) ** 2, minlength=len(decomp))
        owner[j] = int(np.argmax(mass))
    return [Q[:, owner == h] for h in range(len(decomp))]
