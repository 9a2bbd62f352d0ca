"""Eigensolvers, inertia counts, gap detection and separated nets."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConvergenceFailure, FactorizationSingular, SemiwellError, TooLarge
from .lattice import GridModel, WellDecomposition, dirichlet_restrict, operator_norm_bound

DENSE_LIMIT = 4096
# below this size a dense solve is cheaper than ARPACK
SMALL_DENSE = 400


@dataclass(frozen=True, eq=False)
class SpectralWindow:
    window: tuple[float, float]
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    residuals: np.ndarray
    norm: float = 0.0

    @property
    def count(self) -> int:
        return int(len(self.eigenvalues))

    def check(self, rtol: float = 1e-8, otol: float = 1e-10) -> bool:
        V = self.eigenvectors
        ok_res = np.all(self.residuals <= rtol * (np.abs(self.eigenvalues) + self.norm))
        ok_orth = V.shape[1] == 0 or np.abs(V.conj().T @ V - np.eye(V.shape[1])).max() <= otol
        return bool(ok_res and ok_orth)


def _residuals(H, w, V):
    if V.shape[1] == 0:
        return np.zeros(0)
    return np.linalg.norm(H @ V - V * w, axis=0)


def _make_window(H, lo, hi, w, V, norm) -> SpectralWindow:
    w = np.asarray(w, float)
    order = np.argsort(w, kind="stable")
    w, V = w[order], V[:, order]
    return SpectralWindow((float(lo), float(hi)), w, V, _residuals(H, w, V), norm)


def eig_dense(H) -> SpectralWindow:
    """Full spectrum by LAPACK (oracle path)."""
    n = H.shape[0]
    if n > DENSE_LIMIT:
        raise TooLarge(f"dense eigensolve refused for n={n} > {DENSE_LIMIT}")
    A = H.toarray() if sp.issparse(H) else np.asarray(H)
    w, V = la.eigh(A)
    lo, hi = (w[0], w[-1]) if n else (0.0, 0.0)
    return _make_window(A, lo, hi, w, V, float(np.abs(w).max()) if n else 0.0)


def _inertia_sparse(A: sp.csc_matrix):
    lu = spla.splu(
        A,
        permc_spec="MMD_AT_PLUS_A",
        diag_pivot_thresh=0.0,
        options={"SymmetricMode": True},
    )
    d = lu.U.diagonal()
    if not np.array_equal(lu.perm_r, lu.perm_c):
        return None
    if np.abs(d.imag).max(initial=0.0) > 1e-8 * np.abs(d).max(initial=1.0):
        return None
    # a pivot-free LDL* is only trustworthy if it actually solves the system
    b = np.random.default_rng(0).normal(size=A.shape[0])
    x = lu.solve(b.astype(A.dtype))
    if np.linalg.norm(A @ x - b) > 1e-6 * np.linalg.norm(b):
        return None
    return d.real


def _inertia_dense(A: np.ndarray):
    _, D, _ = la.ldl(A, hermitian=True)
    d = []
    k, n = 0, D.shape[0]
    while k < n:
        if k + 1 < n and D[k + 1, k] != 0:
            d.extend(la.eigvalsh(D[k:k + 2, k:k + 2]))
            k += 2
        else:
            d.append(D[k, k].real)
            k += 1
    return np.asarray(d)


def inertia(H, sigma: float) -> int:
    """Number of eigenvalues strictly below ``sigma`` (Sylvester's law).

    Uses a symmetric-mode sparse LDL* and falls back to a dense
    Bunch-Kaufman factorization if SuperLU had to pivot off the diagonal.
    Raises FactorizationSingular when ``sigma`` hits an eigenvalue.
    """
    H = sp.csc_matrix(H)
    n = H.shape[0]
    if n == 0:
        return 0
    A = (H - sigma * sp.identity(n, dtype=H.dtype, format="csc")).tocsc()
    scale = max(operator_norm_bound(H), abs(sigma), 1.0)
    d = None
    try:
        d = _inertia_sparse(A)
    except RuntimeError:
        d = None
    if d is None:
        if n > DENSE_LIMIT:
            raise ConvergenceFailure("sparse LDL* needed pivoting and the matrix is too large for the dense fallback")
        d = _inertia_dense(A.toarray())
    if np.abs(d).min() <= 1e-14 * scale:
        raise FactorizationSingular(f"shift {sigma!r} is an eigenvalue to machine precision")
    return int(np.sum(d < 0))


def count_below(H, sigma: float, inclusive: bool = False) -> int:
    """Eigenvalues ``< sigma`` (``<= sigma`` if inclusive), nudging singular shifts."""
    step = 1e-10 * max(abs(sigma), 1.0)
    for k in range(1, 6):
        try:
            return inertia(H, sigma)
        except FactorizationSingular:
            sigma = sigma + step * k if inclusive else sigma - step * k
    return inertia(H, sigma)


def _rayleigh_ritz(H, X, lo, hi):
    Q, _ = np.linalg.qr(X)
    T = Q.conj().T @ (H @ Q)
    w, S = la.eigh((T + T.conj().T) / 2)
    V = Q @ S
    keep = (w >= lo) & (w <= hi)
    return w[keep], V[:, keep]


def _arpack(H, lo, hi, k, n):
    sigma = 0.5 * (lo + hi)
    ncv = min(n, max(2 * k + 1, 20))
    # fixed start vector keeps repeated runs bit-identical
    v0 = np.random.default_rng(0).normal(size=n).astype(H.dtype)
    w, X = spla.eigsh(H, k=k, sigma=sigma, which="LM", ncv=ncv, tol=1e-13, maxiter=max(1000, 50 * n), v0=v0)
    return _rayleigh_ritz(H, X, lo, hi)


def eig_window(H, lo: float, hi: float, allow_dense: bool = True) -> SpectralWindow:
    """All eigenpairs with eigenvalue in ``[lo, hi]``.

    The expected count comes from two inertia counts. Shift-invert Lanczos
    at the window midpoint is tried first; if it misses eigenpairs the
    window is bisected (at most five refactorizations), then the dense
    solver is used as a last resort.
    """
    if not lo < hi:
        raise ValueError("window needs lo < hi")
    H = sp.csr_matrix(H)
    n = H.shape[0]
    norm = operator_norm_bound(H)
    count = count_below(H, hi, inclusive=True) - count_below(H, lo)
    empty = np.zeros((n, 0), dtype=complex)
    if count == 0:
        return _make_window(H, lo, hi, np.zeros(0), empty, norm)

    def dense():
        if n > DENSE_LIMIT:
            raise ConvergenceFailure(f"window [{lo:g}, {hi:g}]: shift-invert missed eigenpairs and n={n} is too large for dense")
        w, V = la.eigh(H.toarray(), subset_by_value=(np.nextafter(lo, -np.inf), hi))
        return w, V.astype(complex)

    if n <= SMALL_DENSE or count > n // 3:
        w, V = dense()
    else:
        pieces = [(lo, hi, count)]
        ws, Vs = [], []
        budget = 5
        while pieces:
            a, b, k = pieces.pop()
            if k == 0:
                continue
            try:
                w, V = _arpack(H, a, b, k, n)
            except (spla.ArpackNoConvergence, spla.ArpackError, RuntimeError):
                w, V = np.zeros(0), empty
            if len(w) == k:
                ws.append(w)
                Vs.append(V)
                continue
            if budget <= 0:
                ws = None
                break
            budget -= 1
            mid = 0.5 * (a + b)
            kl = count_below(H, mid) - count_below(H, a)
            pieces += [(a, mid, kl), (mid, b, k - kl)]
        if ws is None:
            if not allow_dense:
                raise ConvergenceFailure("shift-invert did not recover the inertia count")
            w, V = dense()
        else:
            w, V = _rayleigh_ritz(H, np.hstack(Vs), lo, hi)
    win = _make_window(H, lo, hi, w, V, norm)
    if win.count != count:
        raise ConvergenceFailure(f"found {win.count} eigenpairs, inertia count says {count}")
    if not win.check():
        raise ConvergenceFailure("eigenpairs fail the residual/orthogonality check")
    return win


@dataclass(frozen=True, eq=False)
class WellSpectra:
    windows: list[SpectralWindow]
    merged: np.ndarray
    labels: np.ndarray

    def rows(self, mu=None):
        """CSV rows (mu, well_id, index, eigenvalue)."""
        out = []
        for h, w in enumerate(self.windows):
            for j, e in enumerate(w.eigenvalues):
                out.append((mu, h, j, float(e)))
        return out


def _with_label(exc: SemiwellError, h: int) -> SemiwellError:
    return type(exc)(f"well {h}: {exc}")


def well_spectrum(decomp: WellDecomposition, H, lo: float, hi: float, threads: int = 1) -> WellSpectra:
    """Dirichlet eigenpairs of each well in ``[lo, hi]`` plus the merged list."""
    if len(decomp) == 0:
        raise ValueError("empty decomposition")
    H = sp.csr_matrix(H)

    def solve(h):
        try:
            return eig_window(dirichlet_restrict(H, decomp.components[h]), lo, hi)
        except SemiwellError as exc:
            raise _with_label(exc, h) from exc

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            wins = list(pool.map(solve, range(len(decomp))))
    else:
        wins = [solve(h) for h in range(len(decomp))]
    vals = np.concatenate([w.eigenvalues for w in wins]) if wins else np.zeros(0)
    labs = np.concatenate([np.full(w.count, h) for h, w in enumerate(wins)])
    order = np.argsort(vals, kind="stable")
    return WellSpectra(wins, vals[order], labs[order])


@dataclass(frozen=True)
class GapList:
    intervals: list[tuple[float, float]] = field(default_factory=list)

    @property
    def widths(self) -> np.ndarray:
        return np.array([b - a for a, b in self.intervals])

    def __len__(self):
        return len(self.intervals)

    def widest(self):
        if not self.intervals:
            return None
        return self.intervals[int(np.argmax(self.widths))]


def detect_gaps(values, lo: float, hi: float, min_width: float | None = None) -> GapList:
    """Interior gaps: open intervals between consecutive values in ``[lo, hi]``

    A gap must be strictly wider than ``min_width``.
    """
    if min_width is None:
        min_width = 1e-8 * max(1.0, hi)
    v = np.asarray(values, dtype=float)
    v = v[(v >= lo) & (v <= hi)]
    if np.any(np.diff(v) < 0):
        raise ValueError("values must be sorted")
    out = [(float(a), float(b)) for a, b in zip(v[:-1], v[1:]) if b - a > min_width]
    return GapList(out)


def fermi_level(values, lo: float, hi: float, top: float, min_width: float | None = None):
    """Midpoint of the widest gap of ``values`` clipped to ``(lo, hi)``.

    Gaps are detected on ``[lo, top]`` so a gap may be closed by spectrum
    above ``hi``; it is then clipped at ``hi``. Returns ``(lam, (a, b))`` or
    ``None`` when no gap meets ``hi``'s side of the spectrum.
    """
    gaps = detect_gaps(values, lo, top, min_width)
    clipped = [(a, min(b, hi)) for a, b in gaps.intervals if a < hi]
    if not clipped:
        return None
    a, b = max(clipped, key=lambda g: g[1] - g[0])
    return 0.5 * (a + b), (a, b)


def count_states(decomp: WellDecomposition, H, E1: float, mu: float) -> np.ndarray:
    """Per-well number of Dirichlet eigenvalues ``<= E1 mu`` (inertia only)."""
    H = sp.csr_matrix(H)
    out = []
    for h, comp in enumerate(decomp.components):
        try:
            out.append(count_below(dirichlet_restrict(H, comp), E1 * mu, inclusive=True))
        except SemiwellError as exc:
            raise _with_label(exc, h) from exc
    return np.asarray(out, dtype=int)


def separated_net(sites, r: float, model: GridModel, seeds=()) -> np.ndarray:
    """Greedy maximal ``r``-separated subset of ``sites``.

    ``seeds`` are kept unconditionally and new points must be at distance
    ``>= r`` from them too; the seeds themselves need not be separated.
    """
    if not r > 0:
        raise ValueError("r must be positive")
    kept = [int(s) for s in seeds]
    for s in np.asarray(sites, dtype=int):
        if kept and model.distances([s], kept).min() < r:
            continue
        kept.append(int(s))
    return np.asarray(kept, dtype=int)
