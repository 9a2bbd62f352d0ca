"""Agmon distances, weights, cutoff families and decay diagnostics.

Inner products here are the L2 ones of the continuum problem: a sum over
sites times the cell volume ``spacing**dim``. Eigenvectors coming out of a
matrix eigensolver are unit vectors in the site basis and must be rescaled
with :func:`l2_normalize` before being passed to :func:`eigenfunction_decay`.
"""

from __future__ import annotations

import csv
import heapq
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import BandTooNarrow, ConfigError, EmptyCore, EmptySource, NotNormalized
from .lattice import GridModel, WellDecomposition


@dataclass(frozen=True, eq=False)
class ScalarField:
    model: GridModel
    values: np.ndarray
    role: str = ""

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=float)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def to_csv(self, path) -> None:
        coords = self.model.coords
        names = ["x", "y"][: self.model.dim]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["site", *names, "value"])
            for i, (c, v) in enumerate(zip(coords, self.values)):
                w.writerow([i, *[repr(float(t)) for t in c], repr(float(v))])


def smoothstep(t):
    """Quintic smoothstep: 0 for t <= 0, 1 for t >= 1, C2 in between."""
    t = np.clip(t, 0.0, 1.0)
    return t**3 * (10.0 - 15.0 * t + 6.0 * t * t)


def _edge_weights(model: GridModel, E: float) -> np.ndarray:
    f = np.sqrt(np.maximum(model.potential - E, 0.0))
    t, h = model.edges[:, 0], model.edges[:, 1]
    return model.spacing * 0.5 * (f[t] + f[h])


def dijkstra(n: int, edges: np.ndarray, weights: np.ndarray, source) -> np.ndarray:
    """Multi-source shortest paths with a binary heap.

    Entries are popped in (distance, site) order, so ties resolve by site
    index. Zero-weight edges are kept (scipy's csgraph drops them).
    """
    t, h = edges[:, 0], edges[:, 1]
    nbr = np.concatenate([h, t])
    w = np.concatenate([weights, weights])
    order = np.argsort(np.concatenate([t, h]), kind="stable")
    start = np.searchsorted(np.concatenate([t, h])[order], np.arange(n + 1))
    nbr, w = nbr[order].tolist(), w[order].tolist()
    start = start.tolist()

    dist = [np.inf] * n
    heap = []
    for s in sorted(set(int(s) for s in source)):
        dist[s] = 0.0
        heap.append((0.0, s))
    heapq.heapify(heap)
    done = [False] * n
    while heap:
        d, x = heapq.heappop(heap)
        if done[x]:
            continue
        done[x] = True
        for k in range(start[x], start[x + 1]):
            y = nbr[k]
            nd = d + w[k]
            if nd < dist[y]:
                dist[y] = nd
                heapq.heappush(heap, (nd, y))
    return np.asarray(dist)


def agmon_distance(model: GridModel, E: float, source) -> ScalarField:
    """Distance to ``source`` in the degenerate metric ``[V - E]_+ g``."""
    source = np.atleast_1d(np.asarray(source, dtype=int))
    if source.size == 0:
        raise EmptySource("Agmon distance needs a nonempty source set")
    d = dijkstra(model.n_sites, model.edges, _edge_weights(model, E), source)
    return ScalarField(model, d, role="agmon_distance")


def build_weight(model: GridModel, decomp: WellDecomposition, E2: float, E3: float, well: int) -> ScalarField:
    """``Phi_h = d_{E2}(., U_{E3,h})``."""
    core = decomp.core(model, well, E3)
    if core.size == 0:
        raise EmptyCore(f"U_(E3={E3:g}) of well {well} is empty")
    d = agmon_distance(model, E2, core)
    return ScalarField(model, d.values, role=f"weight[{well}]")


def edge_differences(model: GridModel, values) -> np.ndarray:
    v = np.asarray(values)
    return (v[model.edges[:, 1]] - v[model.edges[:, 0]]) / model.spacing


def grad_sq(model: GridModel, values) -> np.ndarray:
    """Per-site mean over incident edges of squared difference quotients."""
    dq2 = np.abs(edge_differences(model, values)) ** 2
    n = model.n_sites
    t, h = model.edges[:, 0], model.edges[:, 1]
    tot = np.bincount(t, dq2, n) + np.bincount(h, dq2, n)
    deg = np.bincount(t, minlength=n) + np.bincount(h, minlength=n)
    return np.divide(tot, deg, out=np.zeros(n), where=deg > 0)


def max_gradient(model: GridModel, values) -> float:
    if len(model.edges) == 0:
        return 0.0
    return float(np.abs(edge_differences(model, values)).max())


def weight_class_margin(model: GridModel, Phi: ScalarField, E: float, sites=None) -> float:
    """min over ``sites`` of ``V - E - |grad Phi|^2`` (positive means admissible)."""
    m = model.potential - E - grad_sq(model, Phi.values)
    if sites is not None:
        m = m[np.asarray(sites, dtype=int)]
    return float(m.min()) if m.size else np.inf


@dataclass(frozen=True, eq=False)
class CutoffFamily:
    """IMS-type partition built from the potential.

    ``phi_h``/``psi_h`` vanish off ``U_h``. ``M0`` lists the sites of the
    exterior Dirichlet domain carrying ``psi0``.
    """

    phi_h: list[ScalarField]
    phi0: ScalarField
    psi_h: list[ScalarField]
    psi0: ScalarField
    eta: float
    E1: float
    M0: np.ndarray

    @property
    def phi(self) -> np.ndarray:
        return 1.0 - self.phi0.values

    def gradient_bound(self) -> float:
        """max over wells of ``max|grad phi_h| + max|grad psi_h|``."""
        m = self.phi0.model
        return max(max_gradient(m, p.values) + max_gradient(m, q.values) for p, q in zip(self.phi_h, self.psi_h))


def build_cutoffs(model: GridModel, decomp: WellDecomposition, E1: float, eta: float) -> CutoffFamily:
    """Cutoffs ``phi = chi(V)``, ``psi = chi1(V)`` split per well.

    ``chi`` falls from 1 to 0 across ``[E1+eta, E1+2eta]`` and ``chi1`` across
    ``[E1+5eta/2, E1+3eta]``. The exterior cutoff ``psi0`` rises across
    ``[E1+eta/2, E1+3eta/4]`` and lives on ``M0 = {V >= E1+eta/2}``, which keeps
    ``phi0 psi0 = phi0`` with a smooth ``psi0``.
    """
    if not eta > 0:
        raise ConfigError("eta must be positive")
    if not E1 + 3 * eta < decomp.threshold:
        raise ConfigError(f"need E1 + 3 eta < E0, got {E1 + 3 * eta:g} >= {decomp.threshold:g}")
    step = 2.0 * model.lipschitz_bound * model.spacing
    if eta / 4 < step:
        raise BandTooNarrow(f"narrowest band eta/4={eta / 4:g} is below two grid steps of V variation ({step:g})")

    V = model.potential
    chi = 1.0 - smoothstep((V - E1 - eta) / eta)
    chi1 = 1.0 - smoothstep((V - E1 - 2.5 * eta) / (0.5 * eta))
    psi0 = smoothstep((V - E1 - 0.5 * eta) / (0.25 * eta))

    phi_h, psi_h = [], []
    total = np.zeros(model.n_sites)
    for h, comp in enumerate(decomp.components):
        p = np.zeros(model.n_sites)
        q = np.zeros(model.n_sites)
        p[comp] = chi[comp]
        q[comp] = chi1[comp]
        total[comp] = chi[comp]
        phi_h.append(ScalarField(model, p, role=f"phi[{h}]"))
        psi_h.append(ScalarField(model, q, role=f"psi[{h}]"))
    phi0 = 1.0 - total
    M0 = np.flatnonzero(V >= E1 + 0.5 * eta)
    return CutoffFamily(
        phi_h=phi_h,
        phi0=ScalarField(model, phi0, role="phi0"),
        psi_h=psi_h,
        psi0=ScalarField(model, psi0, role="psi0"),
        eta=float(eta),
        E1=float(E1),
        M0=M0,
    )


def _ghost_count(model: GridModel) -> np.ndarray:
    """Missing grid neighbours per site (zero Dirichlet data sits there)."""
    n = model.n_sites
    deg = np.bincount(model.edges[:, 0], minlength=n) + np.bincount(model.edges[:, 1], minlength=n)
    return 2 * model.dim - deg


def magnetic_gradient_sq(model: GridModel, v: np.ndarray) -> float:
    """``||grad_A v||^2`` in L2, including edges to the zero exterior."""
    t, h = model.edges[:, 0], model.edges[:, 1]
    a = model.spacing
    e = (np.exp(1j * model.edge_phase) * v[h] - v[t]) / a
    total = np.sum(np.abs(e) ** 2) + np.sum(_ghost_count(model) * np.abs(v) ** 2) / a**2
    return float(total * model.cell_volume)


def energy_identity_residual(H, model: GridModel, Phi: ScalarField, z: complex, u: np.ndarray, mu: float) -> float:
    """Relative defect of the weighted energy identity.

    Compares ``Re <e^{2 s Phi}(H - z)u, u>`` with
    ``||grad_A(e^{s Phi} u)||^2 + <(mu (V - |grad Phi|^2) - Re z) e^{2 s Phi} u, u>``
    where ``s = mu**0.5``; returns ``|L - R| / (|L| + |R| + 1)``.
    """
    u = np.asarray(u, dtype=complex)
    s = np.sqrt(mu)
    Phi_v = Phi.values
    w1 = np.exp(s * Phi_v)
    w2 = w1 * w1
    dv = model.cell_volume
    Hu = sp.csr_matrix(H) @ u - z * u
    lhs = float(np.real(np.vdot(u, w2 * Hu)) * dv)
    grad = magnetic_gradient_sq(model, w1 * u)
    pot = mu * (model.potential - grad_sq(model, Phi_v)) - np.real(z)
    rhs = grad + float(np.sum(pot * w2 * np.abs(u) ** 2) * dv)
    return abs(lhs - rhs) / (abs(lhs) + abs(rhs) + 1.0)


def l2_norm(model: GridModel, u) -> float:
    return float(np.sqrt(np.sum(np.abs(u) ** 2) * model.cell_volume))


def l2_normalize(model: GridModel, u) -> np.ndarray:
    u = np.asarray(u)
    return u / l2_norm(model, u)


def eigenfunction_decay(model: GridModel, decomp: WellDecomposition, well: int, E2: float, u) -> float:
    """L2 mass of ``u`` on ``U_h \\ U_{E2,h}``.

    ``u`` is either a full grid vector or a vector on the sites of well
    ``h`` (in the order of ``decomp.components[h]``), normalized in L2.
    """
    comp = decomp.components[well]
    u = np.asarray(u)
    if u.shape[0] == model.n_sites:
        local = u[comp]
        nrm = l2_norm(model, u)
    elif u.shape[0] == comp.size:
        local = u
        nrm = l2_norm(model, u)
    else:
        raise ValueError(f"vector of length {u.shape[0]} fits neither the grid nor well {well}")
    if abs(nrm - 1.0) > 1e-8:
        raise NotNormalized(f"L2 norm is {nrm:.12g}")
    outside = model.potential[comp] >= E2
    return float(np.sum(np.abs(local[outside]) ** 2) * model.cell_volume)
