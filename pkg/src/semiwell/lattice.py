"""Grid models of magnetic Schrodinger operators and their well decomposition.

A :class:`GridModel` is a flat 1D or 2D grid carrying a non-negative potential
and Peierls phases on its nearest-neighbour edges. Operators are assembled in
the orthonormal site basis, so a matrix entry relates to the integral kernel
by a factor ``spacing**dim``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse import csgraph

from .errors import BadShape, EmptySiteSet, NegativePotential, NoWells

BOUNDARIES = ("dirichlet_box", "periodic_torus")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class GridModel:
    """Discretized ``(M, g, A, V)``.

    Sites are numbered in C order over ``shape``. ``edges[e] = (tail, head)``
    points along ``+axis`` (wrapping on a torus) and ``edge_phase[e]`` is the
    line integral of the vector potential along that direction; the reverse
    edge carries the opposite phase.
    """

    dim: int
    shape: tuple[int, ...]
    spacing: float
    boundary: str
    potential: np.ndarray
    edges: np.ndarray
    edge_axis: np.ndarray
    edge_phase: np.ndarray
    origin: tuple[float, ...] = field(default=())

    @property
    def n_sites(self) -> int:
        return int(np.prod(self.shape))

    @property
    def cell_volume(self) -> float:
        return self.spacing**self.dim

    @property
    def periodic(self) -> bool:
        return self.boundary == "periodic_torus"

    @property
    def multi_index(self) -> np.ndarray:
        """(n_sites, dim) integer grid coordinates."""
        idx = np.indices(self.shape).reshape(self.dim, -1).T
        return idx

    @property
    def coords(self) -> np.ndarray:
        """(n_sites, dim) physical coordinates."""
        return np.asarray(self.origin) + self.spacing * self.multi_index

    @property
    def lipschitz_bound(self) -> float:
        """max over edges of |V(head) - V(tail)| / spacing."""
        if len(self.edges) == 0:
            return 0.0
        dv = np.abs(self.potential[self.edges[:, 1]] - self.potential[self.edges[:, 0]])
        return float(dv.max() / self.spacing)

    def adjacency(self) -> sp.csr_matrix:
        """Symmetric 0/1 adjacency of the grid graph."""
        n = self.n_sites
        t, h = self.edges[:, 0], self.edges[:, 1]
        keep = t != h
        ones = np.ones(int(keep.sum()))
        a = sp.coo_matrix((ones, (t[keep], h[keep])), shape=(n, n))
        a = (a + a.T).tocsr()
        a.data[:] = 1.0
        return a

    def reversed_phase(self, e: int) -> float:
        return -float(self.edge_phase[e])

    def distances(self, rows=None, cols=None) -> np.ndarray:
        """Graph (Manhattan, toroidal if periodic) distances, in length units."""
        mi = self.multi_index
        r = mi if rows is None else mi[np.asarray(rows)]
        c = mi if cols is None else mi[np.asarray(cols)]
        out = np.zeros((len(r), len(c)))
        for ax in range(self.dim):
            d = np.abs(r[:, ax][:, None] - c[:, ax][None, :])
            if self.periodic:
                d = np.minimum(d, self.shape[ax] - d)
            out += d
        return out * self.spacing

    def plaquette_flux(self) -> np.ndarray:
        """Counter-clockwise phase sum around each unit plaquette (2D only)."""
        if self.dim != 2:
            raise ValueError("plaquette flux is defined for 2D grids only")
        lookup = {(int(t), int(ax)): e for e, (t, ax) in enumerate(zip(self.edges[:, 0], self.edge_axis))}
        nx, ny = self.shape
        site = lambda i, j: (i % nx) * ny + (j % ny)
        flux = []
        irange = range(nx) if self.periodic else range(nx - 1)
        jrange = range(ny) if self.periodic else range(ny - 1)
        for i in irange:
            for j in jrange:
                s = site(i, j)
                total = (
                    self.edge_phase[lookup[(s, 0)]]
                    + self.edge_phase[lookup[(site(i + 1, j), 1)]]
                    - self.edge_phase[lookup[(site(i, j + 1), 0)]]
                    - self.edge_phase[lookup[(s, 1)]]
                )
                flux.append(total)
        return np.asarray(flux)

    def with_phases(self, edge_phase: np.ndarray) -> "GridModel":
        """Same geometry and potential, different edge phases."""
        return GridModel(
            self.dim, self.shape, self.spacing, self.boundary, self.potential,
            self.edges, self.edge_axis, _frozen(np.asarray(edge_phase, float)), self.origin,
        )

    def gauge_transform(self, chi: np.ndarray) -> "GridModel":
        """theta_e -> theta_e + chi(head) - chi(tail)."""
        chi = np.asarray(chi, float)
        return self.with_phases(self.edge_phase + chi[self.edges[:, 1]] - chi[self.edges[:, 0]])


def _grid_edges(shape: Sequence[int], periodic: bool):
    idx = np.arange(int(np.prod(shape))).reshape(shape)
    tails, heads, axes = [], [], []
    for ax, n_ax in enumerate(shape):
        fwd = np.roll(idx, -1, axis=ax)
        t = idx
        if not periodic or n_ax < 2:
            sl = [slice(None)] * len(shape)
            sl[ax] = slice(0, n_ax - 1)
            t = idx[tuple(sl)]
            fwd = fwd[tuple(sl)]
        tails.append(t.ravel())
        heads.append(fwd.ravel())
        axes.append(np.full(t.size, ax))
    if not tails:
        return np.zeros((0, 2), int), np.zeros(0, int)
    return np.stack([np.concatenate(tails), np.concatenate(heads)], axis=1), np.concatenate(axes)


def build_grid(
    dim: int,
    shape: Sequence[int],
    spacing: float,
    boundary: str = "dirichlet_box",
    potential_fn: Callable[[np.ndarray], np.ndarray] | np.ndarray | None = None,
    vector_potential_fn: Callable[[np.ndarray], np.ndarray] | None = None,
    origin: Sequence[float] | None = None,
) -> GridModel:
    """Sample ``V`` at sites and ``A`` at edge midpoints.

    ``potential_fn`` maps an ``(n, dim)`` coordinate array to ``n`` values (an
    array of site values is also accepted). ``vector_potential_fn`` maps
    ``(m, dim)`` midpoints to ``(m, dim)`` vectors; the phase of an edge is
    ``A(midpoint) . (edge vector)``.
    """
    if dim not in (1, 2):
        raise BadShape(f"dim must be 1 or 2, got {dim}")
    shape = tuple(int(s) for s in shape)
    if len(shape) != dim or any(s < 1 for s in shape):
        raise BadShape(f"shape {shape} incompatible with dim={dim}")
    if not spacing > 0:
        raise BadShape(f"spacing must be positive, got {spacing}")
    if boundary not in BOUNDARIES:
        raise BadShape(f"unknown boundary {boundary!r}")
    origin = tuple(float(o) for o in (origin if origin is not None else [0.0] * dim))
    periodic = boundary == "periodic_torus"

    mi = np.indices(shape).reshape(dim, -1).T
    coords = np.asarray(origin) + spacing * mi
    if potential_fn is None:
        V = np.zeros(len(coords))
    elif callable(potential_fn):
        V = np.asarray(potential_fn(coords), dtype=float).reshape(-1)
    else:
        V = np.asarray(potential_fn, dtype=float).reshape(-1)
    if V.shape != (len(coords),):
        raise BadShape(f"potential has {V.size} values for {len(coords)} sites")
    if np.any(V < 0) or not np.all(np.isfinite(V)):
        raise NegativePotential(f"potential minimum {V.min():.3g} < 0")

    edges, axes = _grid_edges(shape, periodic)
    if vector_potential_fn is None or len(edges) == 0:
        phase = np.zeros(len(edges))
    else:
        step = np.eye(dim)[axes] * spacing
        mid = coords[edges[:, 0]] + 0.5 * step
        A = np.asarray(vector_potential_fn(mid), dtype=float).reshape(len(edges), dim)
        phase = np.einsum("ij,ij->i", A, step)

    return GridModel(
        dim=dim,
        shape=shape,
        spacing=float(spacing),
        boundary=boundary,
        potential=_frozen(V),
        edges=_frozen(edges),
        edge_axis=_frozen(axes),
        edge_phase=_frozen(phase),
        origin=origin,
    )


def kinetic_matrix(model: GridModel) -> sp.csr_matrix:
    """Magnetic graph Laplacian in Peierls form (``mu = 0``)."""
    n = model.n_sites
    a2 = model.spacing**2
    t, h = model.edges[:, 0], model.edges[:, 1]
    hop = -np.exp(1j * model.edge_phase) / a2
    rows = np.concatenate([t, h, np.arange(n)])
    cols = np.concatenate([h, t, np.arange(n)])
    diag = np.full(n, 2.0 * model.dim / a2, dtype=complex)
    vals = np.concatenate([hop, hop.conj(), diag])
    K = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    K.sum_duplicates()
    return ((K + K.getH()) * 0.5).tocsr()


def assemble_hamiltonian(model: GridModel, mu: float) -> sp.csr_matrix:
    """``H(mu) = nabla_A^* nabla_A + mu V`` on the grid.

    Off-diagonal entry ``(tail, head)`` is ``-exp(i theta_e)/a**2``; the
    diagonal is ``2*dim/a**2 + mu*V`` (ghost zero sites outside the box).
    """
    H = kinetic_matrix(model) + sp.diags(mu * model.potential.astype(complex))
    H = H.tocsr()
    H.sort_indices()
    return H


def is_hermitian(H) -> bool:
    """Bitwise Hermitian check."""
    D = (sp.csr_matrix(H) - sp.csr_matrix(H).getH()).tocsr()
    D.eliminate_zeros()
    return D.nnz == 0


def operator_norm_bound(H) -> float:
    """Gershgorin bound on the spectral radius."""
    return float(np.abs(sp.csr_matrix(H)).sum(axis=1).max())


def gershgorin_lower(H) -> float:
    H = sp.csr_matrix(H)
    d = H.diagonal().real
    off = np.asarray(np.abs(H).sum(axis=1)).ravel() - np.abs(d)
    return float((d - off).min())


def dirichlet_restrict(H, sites) -> sp.csr_matrix:
    """Principal submatrix on ``sites`` (zero Dirichlet data elsewhere)."""
    sites = np.asarray(sites, dtype=int)
    if sites.size == 0:
        raise EmptySiteSet("cannot restrict to an empty site set")
    H = sp.csr_matrix(H)
    return H[sites][:, sites].tocsr()


@dataclass(frozen=True, eq=False)
class WellDecomposition:
    """Connected components of ``{V < threshold}``, ordered by first site."""

    threshold: float
    components: list[np.ndarray]
    diameters: np.ndarray
    min_pairwise_distance: float
    max_diameter: float
    well_minima: np.ndarray
    anchors: np.ndarray

    def __len__(self) -> int:
        return len(self.components)

    @property
    def sites(self) -> np.ndarray:
        return np.sort(np.concatenate(self.components))

    def core(self, model: GridModel, h: int, E: float) -> np.ndarray:
        """Sites of ``U_{E,h} = {x in U_h : V(x) < E}``."""
        c = self.components[h]
        return c[model.potential[c] < E]

    def labels(self, n_sites: int) -> np.ndarray:
        """Per-site well index, -1 outside the sublevel set."""
        lab = np.full(n_sites, -1)
        for h, c in enumerate(self.components):
            lab[c] = h
        return lab


def _diameter(model: GridModel, sites: np.ndarray) -> float:
    if len(sites) < 2:
        return 0.0
    mi = model.multi_index[sites]
    if not model.periodic:
        best = 0
        for signs in itertools.product((1, -1), repeat=model.dim):
            proj = mi @ np.asarray(signs)
            best = max(best, int(proj.max() - proj.min()))
        return best * model.spacing
    best = 0.0
    for start in range(0, len(sites), 1024):
        best = max(best, float(model.distances(sites[start:start + 1024], sites).max()))
    return best


def _boundary_sites(adj: sp.csr_matrix, sites: np.ndarray, n: int) -> np.ndarray:
    inside = np.zeros(n, bool)
    inside[sites] = True
    outside_nbrs = adj[sites] @ (~inside).astype(float)
    b = sites[np.asarray(outside_nbrs).ravel() > 0]
    return b if len(b) else sites


def find_wells(model: GridModel, E0: float) -> WellDecomposition:
    """Label the connected components of ``{V < E0}`` under grid adjacency.

    Diameters are graph diameters. The separation between two wells is the
    width of the gap between them, i.e. their graph distance minus one
    spacing, so two wells one site apart are ``spacing`` apart.
    """
    if not E0 > 0:
        raise ValueError("E0 must be positive")
    V = model.potential
    mask = V < E0
    if not mask.any():
        raise NoWells(f"sublevel set {{V < {E0}}} is empty")
    sub = np.flatnonzero(mask)
    adj = model.adjacency()
    n_comp, lab = csgraph.connected_components(adj[sub][:, sub], directed=False)
    comps = [sub[lab == k] for k in range(n_comp)]
    comps.sort(key=lambda c: int(c[0]))

    diam = np.array([_diameter(model, c) for c in comps])
    minima = np.array([V[c].min() for c in comps])
    anchors = np.array([int(c[np.argmin(V[c])]) for c in comps])

    eps = np.inf
    if len(comps) > 1:
        bnd = [_boundary_sites(adj, c, model.n_sites) for c in comps]
        for i, j in itertools.combinations(range(len(comps)), 2):
            d = model.distances(bnd[i], bnd[j]).min() - model.spacing
            eps = min(eps, float(d))
    return WellDecomposition(
        threshold=float(E0),
        components=comps,
        diameters=diam,
        min_pairwise_distance=eps,
        max_diameter=float(diam.max()),
        well_minima=minima,
        anchors=anchors,
    )


@dataclass
class Assumption1Report:
    max_diameter: float
    min_separation: float
    sup_minimum: float
    E0: float
    E1: float
    empty_cores: list[int]

    @property
    def diameter_finite(self) -> bool:
        return bool(np.isfinite(self.max_diameter))

    @property
    def separation_positive(self) -> bool:
        return self.min_separation > 0

    @property
    def thresholds_ordered(self) -> bool:
        return self.sup_minimum < self.E1 < self.E0

    @property
    def passed(self) -> bool:
        return (
            self.diameter_finite
            and self.separation_positive
            and self.thresholds_ordered
            and not self.empty_cores
        )

    def as_dict(self) -> dict:
        return {
            "max_diameter": self.max_diameter,
            "min_separation": self.min_separation,
            "sup_minimum": self.sup_minimum,
            "E0": self.E0,
            "E1": self.E1,
            "empty_cores": list(self.empty_cores),
            "diameter_finite": self.diameter_finite,
            "separation_positive": self.separation_positive,
            "thresholds_ordered": self.thresholds_ordered,
            "passed": self.passed,
        }


def check_assumption1(decomp: WellDecomposition, E1: float) -> Assumption1Report:
    """Diagnostics for the well assumptions at working energy ``E1``."""
    if len(decomp) == 0:
        raise NoWells("empty decomposition")
    return Assumption1Report(
        max_diameter=decomp.max_diameter,
        min_separation=decomp.min_pairwise_distance,
        sup_minimum=float(decomp.well_minima.max()),
        E0=decomp.threshold,
        E1=float(E1),
        empty_cores=[h for h, m in enumerate(decomp.well_minima) if not m < E1],
    )
