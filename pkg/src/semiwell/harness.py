"""Configuration-driven mu sweeps, decay-law fits and the eigendata cache."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .agmon import build_cutoffs, build_weight, eigenfunction_decay, energy_identity_residual, l2_normalize
from .errors import AllBelowFloor, ConfigError, SemiwellError, TooFewPoints
from .lattice import GridModel, assemble_hamiltonian, build_grid, dirichlet_restrict, find_wells
from .projections import (
    ProjectionMatrix,
    build_quasi_projection,
    decomposition_check,
    mvn_partial_isometry,
    projection_gap_norm,
)
from .resolvent import build_parametrix, defect_norm, eigen_projection, resolvent_apply, spectral_distance
from .roe import band_truncate, build_wannier_frame, conjugation_check, propagation_profile, propagation_radius, well_subspaces
from .spectral import SpectralWindow, WellSpectra, count_states, detect_gaps, eig_window, well_spectrum

log = logging.getLogger(__name__)

EXPERIMENTS = ("thmD", "lemma_kh", "thm_equiv", "decay_p10a", "weyl", "roe", "wannier", "energy_identity")
FLOOR = 1e-14
GAP_REL_WIDTH = 1e-6


# ---------------------------------------------------------------- models

def _cosine_wells(spec, dim):
    period = float(spec.get("period", 2.0))
    amp = float(spec.get("amplitude", 1.0))

    def V(x):
        s = np.prod(np.sin(np.pi * x / period) ** 2, axis=1)
        return amp * (1.0 - s) if dim > 1 else amp * np.cos(np.pi * x[:, 0] / period) ** 2

    return V


def _gaussian_wells(spec, dim):
    centers = np.atleast_2d(np.asarray(spec["centers"], dtype=float))
    if centers.shape[1] != dim:
        raise ConfigError(f"gaussian_wells centers must have {dim} coordinates")
    width = float(spec.get("width", 0.5))
    depth = float(spec.get("depth", 1.0))

    def V(x):
        out = np.ones(len(x))
        for c in centers:
            out *= 1.0 - np.exp(-np.sum((x - c) ** 2, axis=1) / width**2)
        return depth * out

    return V


def _load_table(spec, key):
    vals = spec.get(key)
    if vals is None and "path" in spec:
        p = Path(spec["path"])
        vals = np.load(p) if p.suffix == ".npy" else np.loadtxt(p, delimiter=",")
    if vals is None:
        raise ConfigError(f"table needs '{key}' or 'path'")
    return np.asarray(vals, dtype=float).ravel()


def build_model(spec: dict) -> GridModel:
    """GridModel from a plain-dict model spec (see ``configs/default_1d.yaml``)."""
    try:
        dim = int(spec.get("dim", 1))
        shape = [int(s) for s in spec["shape"]]
        spacing = float(spec["spacing"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"model spec needs dim, shape and spacing: {exc}") from exc
    boundary = spec.get("boundary", "dirichlet_box")
    pot = dict(spec.get("potential", {"kind": "zero"}))
    kind = pot.get("kind", "zero")
    if kind == "cosine_wells":
        V = _cosine_wells(pot, dim)
    elif kind == "gaussian_wells":
        V = _gaussian_wells(pot, dim)
    elif kind == "table":
        V = _load_table(pot, "values")
    elif kind == "zero":
        V = None
    else:
        raise ConfigError(f"unknown potential kind {kind!r}")

    fld = dict(spec.get("field", {"kind": "zero"}))
    fkind = fld.get("kind", "zero")
    A = None
    if fkind == "uniform_b":
        b = float(fld.get("b", 0.0))
        if dim == 2:
            A = lambda p: np.stack([-0.5 * b * p[:, 1], 0.5 * b * p[:, 0]], axis=1)  # noqa: E731
    elif fkind not in ("zero", "table"):
        raise ConfigError(f"unknown field kind {fkind!r}")
    model = build_grid(dim, shape, spacing, boundary=boundary, potential_fn=V,
                       vector_potential_fn=A, origin=spec.get("origin"))
    if fkind == "table":
        phases = _load_table(fld, "edge_phase")
        if phases.size != len(model.edges):
            raise ConfigError(f"edge_phase has {phases.size} entries for {len(model.edges)} edges")
        model = model.with_phases(phases)
    return model


def refine_spec(spec: dict) -> dict:
    """Same domain at half the spacing."""
    out = json.loads(json.dumps(spec))
    out["shape"] = [2 * (int(s) - 1) + 1 for s in spec["shape"]]
    out["spacing"] = float(spec["spacing"]) / 2
    return out


# ---------------------------------------------------------------- config

@dataclass(frozen=True)
class SweepConfig:
    model: dict
    E0: float
    E1: float
    mu_list: tuple
    experiments: tuple = EXPERIMENTS
    E2: float | None = None
    E3: float | None = None
    eta: float | None = None
    seed: int = 0
    roe_step: float = 0.125
    probes: int = 10

    def __post_init__(self):
        mus = np.asarray(self.mu_list, dtype=float)
        if mus.size and (np.any(mus <= 0) or np.any(np.diff(mus) <= 0)):
            raise ConfigError("mu_list must be strictly increasing positive reals")
        bad = set(self.experiments) - set(EXPERIMENTS)
        if bad:
            raise ConfigError(f"unknown experiments {sorted(bad)}")
        if not 0 < self.E1 < self.E0:
            raise ConfigError(f"need 0 < E1 < E0, got E1={self.E1}, E0={self.E0}")
        chain = [self.E1] + [e for e in (self.E2, self.E3) if e is not None] + [self.E0]
        if np.any(np.diff(chain) <= 0):
            raise ConfigError(f"thresholds must satisfy E1 < E2 < E3 < E0, got {chain}")
        if self.eta is not None and not (self.eta > 0 and self.E1 + 3 * self.eta < self.E0):
            raise ConfigError(f"eta={self.eta} must be positive with E1 + 3 eta < E0")

    @property
    def eta_value(self) -> float:
        return self.eta if self.eta is not None else (self.E0 - self.E1) / 3.5

    @property
    def E2_value(self) -> float:
        return self.E2 if self.E2 is not None else 0.5 * (self.E1 + self.E0)

    @property
    def E3_value(self) -> float:
        return self.E3 if self.E3 is not None else 0.5 * (self.E2_value + self.E0)

    @classmethod
    def from_dict(cls, d: dict) -> "SweepConfig":
        d = dict(d)
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        for key in ("model", "E0", "E1"):
            if key not in d:
                raise ConfigError(f"config is missing '{key}'")
        d["mu_list"] = tuple(float(m) for m in d.get("mu_list", ()))
        d["experiments"] = tuple(d.get("experiments", EXPERIMENTS))
        for key in ("E0", "E1", "E2", "E3", "eta"):
            if d.get(key) is not None:
                d[key] = float(d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mu_list"] = list(self.mu_list)
        d["experiments"] = list(self.experiments)
        return d


def load_config(path) -> SweepConfig:
    """Read a YAML or JSON sweep configuration."""
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    try:
        data = json.loads(text) if p.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse {p}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{p} does not hold a mapping")
    return SweepConfig.from_dict(data)


# ---------------------------------------------------------------- fits

@dataclass(frozen=True)
class DecayFit:
    """Least-squares line of ``log value`` against ``mu**0.5``."""

    points: list
    slope: float
    intercept: float
    r_squared: float

    @property
    def C(self) -> float:
        return float(np.exp(self.intercept))

    @property
    def c(self) -> float:
        return -self.slope

    def as_dict(self) -> dict:
        return {"slope": self.slope, "intercept": self.intercept, "r_squared": self.r_squared,
                "C": self.C, "c": self.c, "points": [list(p) for p in self.points]}


def _line_fit(x, y):
    slope, icpt = np.polyfit(x, y, 1)
    ss = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum((y - slope * x - icpt) ** 2) / ss if ss > 0 else 1.0
    return float(slope), float(icpt), float(r2)


def _usable(points, floor):
    pts = [(float(m), float(v)) for m, v in points if np.isfinite(v)]
    if len(pts) < 3:
        raise TooFewPoints(f"{len(pts)} points, need at least 3")
    good = [(m, v) for m, v in pts if v > floor]
    if not good:
        raise AllBelowFloor(f"all {len(pts)} values are at or below {floor:g}")
    if len(good) < 3:
        raise TooFewPoints(f"only {len(good)} values above {floor:g}")
    return good


def fit_exponential_rate(points) -> DecayFit:
    """Fit ``value ~ C exp(slope * mu**0.5)`` over values above the round-off floor."""
    good = _usable(points, FLOOR)
    mu = np.array([m for m, _ in good])
    val = np.array([v for _, v in good])
    slope, icpt, r2 = _line_fit(np.sqrt(mu), np.log(val))
    return DecayFit(good, slope, icpt, r2)


def fit_power_law(points):
    """``(exponent, r_squared)`` of a log-log fit over positive values."""
    good = _usable(points, 0.0)
    mu = np.array([m for m, _ in good])
    val = np.array([v for _, v in good])
    slope, _, r2 = _line_fit(np.log(mu), np.log(val))
    return slope, r2


# ---------------------------------------------------------------- cache

def cache_key(model_spec: dict, E0: float, E1: float, mu: float) -> str:
    blob = json.dumps({"model": model_spec, "E0": E0, "E1": E1, "mu": float(mu)}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:24]


def _window_arrays(prefix, win):
    return {f"{prefix}_w": win.eigenvalues, f"{prefix}_v": win.eigenvectors,
            f"{prefix}_r": win.residuals, f"{prefix}_meta": np.array([*win.window, win.norm])}


def _window_from(data, prefix):
    lo, hi, nrm = data[f"{prefix}_meta"]
    return SpectralWindow((float(lo), float(hi)), data[f"{prefix}_w"], data[f"{prefix}_v"], data[f"{prefix}_r"], float(nrm))


def _save_npz(path: Path, arrays: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".npz")
    os.close(fd)
    np.savez(tmp, **arrays)
    os.replace(tmp, path)


@dataclass
class Eigendata:
    """Well spectra on ``[0, E0 mu]`` and full eigenpairs on ``[0, E1 mu]``."""

    wells: WellSpectra
    full: SpectralWindow


def eigendata(model, decomp, H, cfg: SweepConfig, mu: float, cache_dir=None) -> Eigendata:
    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / f"{cache_key(cfg.model, cfg.E0, cfg.E1, mu)}.npz"
        if path.exists():
            with np.load(path) as data:
                wins = [_window_from(data, f"w{h}") for h in range(int(data["n_wells"]))]
                full = _window_from(data, "full")
            vals = np.concatenate([w.eigenvalues for w in wins])
            labs = np.concatenate([np.full(w.count, h) for h, w in enumerate(wins)])
            order = np.argsort(vals, kind="stable")
            return Eigendata(WellSpectra(wins, vals[order], labs[order]), full)
    ws = well_spectrum(decomp, H, 0.0, cfg.E0 * mu)
    full = eig_window(H, 0.0, cfg.E1 * mu)
    if path is not None:
        arrays = {"n_wells": np.array(len(ws.windows))}
        for h, w in enumerate(ws.windows):
            arrays.update(_window_arrays(f"w{h}", w))
        arrays.update(_window_arrays("full", full))
        _save_npz(path, arrays)
    return Eigendata(ws, full)


# ---------------------------------------------------------------- sweep

@dataclass
class Context:
    cfg: SweepConfig
    model: GridModel
    decomp: object
    cutoffs: object = None
    cache_dir: object = None
    extra: dict = field(default_factory=dict)


def choose_lambda(well_values, E1mu: float, top: float):
    """Widest interior gap of the well spectrum, clipped to ``(0, E1 mu)``."""
    gaps = detect_gaps(well_values, 0.0, top)
    clipped = [(a, min(b, E1mu)) for a, b in gaps.intervals if a < E1mu]
    if not clipped:
        return None
    a, b = max(clipped, key=lambda g: g[1] - g[0])
    return 0.5 * (a + b), (a, b)


def _exp_thmD(ctx, mu, H, ed, lam, row):
    _, d = spectral_distance(ed.full.eigenvalues, ed.wells.merged)
    row["hausdorff"] = d
    row["n_levels"] = int(ed.full.count)


def _exp_lemma_kh(ctx, mu, H, ed, lam, row):
    ops = build_parametrix(H, ctx.decomp, ctx.cutoffs, lam, mu)
    est = defect_norm(ops, seed=ctx.cfg.seed)
    row["K_norm"] = est.value
    row["K_rel_change"] = est.rel_change
    err = np.nan
    if est.value < 0.5:
        rng = np.random.default_rng(ctx.cfg.seed)
        err = 0.0
        for _ in range(ctx.cfg.probes):
            v = rng.normal(size=H.shape[0]) + 1j * rng.normal(size=H.shape[0])
            direct = resolvent_apply(H, lam, v)
            err = max(err, float(np.linalg.norm(ops.reconstruct(v) - direct) / np.linalg.norm(direct)))
    row["reconstruction_error"] = err


def _projections(ctx, H, ed, lam):
    key = ("proj", lam)
    if key not in ctx.extra:
        V = ed.full.eigenvectors[:, ed.full.eigenvalues <= lam]
        E = eigen_projection(V)
        P, gram = build_quasi_projection(ctx.decomp, ctx.cutoffs, ed.wells.windows, lam)
        ctx.extra[key] = (E, P, gram)
    return ctx.extra[key]


def _exp_thm_equiv(ctx, mu, H, ed, lam, row):
    E, P, gram = _projections(ctx, H, ed, lam)
    row["norm_E_minus_P"] = projection_gap_norm(E, P)
    row["gram_deviation_max"] = gram.max_deviation
    row["rank_E"], row["rank_P"] = E.rank, P.rank
    if row["norm_E_minus_P"] < 1 and E.rank == P.rank:
        W = mvn_partial_isometry(E, P)
        row["mvn_residual_E"], row["mvn_residual_P"], row["mvn_norm"] = W.residual_E, W.residual_P, W.norm
    r1, r2 = decomposition_check(E, ctx.decomp, ctx.cutoffs, ed.wells.windows, lam)
    row["decomposition_E"], row["decomposition_P"] = r1, r2


def _exp_decay(ctx, mu, H, ed, lam, row):
    E2 = ctx.cfg.E2_value
    by_index = []
    for h, win in enumerate(ed.wells.windows):
        sel = np.flatnonzero(win.eigenvalues <= ctx.cfg.E1 * mu)
        for j, col in enumerate(sel):
            u = l2_normalize(ctx.model, win.eigenvectors[:, col])
            m = eigenfunction_decay(ctx.model, ctx.decomp, h, E2, u)
            if j == len(by_index):
                by_index.append(m)
            else:
                by_index[j] = max(by_index[j], m)
    row["outside_mass"] = by_index
    row["outside_mass_max"] = max(by_index) if by_index else np.nan


def _exp_weyl(ctx, mu, H, ed, lam, row):
    counts = count_states(ctx.decomp, H, ctx.cfg.E1, mu)
    row["weyl_counts"] = [int(c) for c in counts]
    row["weyl_max"] = int(np.max(counts))


def _exp_roe(ctx, mu, H, ed, lam, row):
    E, _, _ = _projections(ctx, H, ed, lam)
    m = ctx.model
    L = float(np.max(m.distances([0], None)))
    prof = propagation_profile(E, m, np.arange(0.0, L + ctx.cfg.roe_step, ctx.cfg.roe_step))
    row["roe_nu"], row["roe_prefactor"], row["roe_r2"] = prof.nu, prof.prefactor, prof.r_squared
    row["roe_fit_range"] = list(prof.fit_range)
    ratios = []
    if np.isfinite(prof.nu):
        lo, hi = prof.fit_range
        for R in np.linspace(lo, hi, 4):
            _, err = band_truncate(E, m, R)
            ratios.append(err / float(prof.envelope(R)))
    row["band_ratio_max"] = max(ratios) if ratios else np.nan
    row["band_ratio_min"] = min(ratios) if ratios else np.nan


def _exp_wannier(ctx, mu, H, ed, lam, row):
    _, P, _ = _projections(ctx, H, ed, lam)
    frame = build_wannier_frame(ctx.decomp, well_subspaces(P, ctx.decomp), ctx.model)
    res = conjugation_check(frame, P)
    radius = propagation_radius(P, ctx.model)
    row.update({f"wannier_{k}": v for k, v in frame.summary(res, radius).items()})
    row["wannier_delta"] = frame.delta
    row["wannier_pk_residual"] = frame.pk_identity_residual()


def _energy_residual(spec, cfg, mu):
    model = build_model(spec)
    dec = find_wells(model, cfg.E0)
    H = assemble_hamiltonian(model, mu)
    comp = dec.components[0]
    win = eig_window(dirichlet_restrict(H, comp), 0.0, cfg.E0 * mu)
    if win.count == 0:
        return np.nan
    u = np.zeros(model.n_sites, dtype=complex)
    u[comp] = win.eigenvectors[:, 0]
    u = l2_normalize(model, u)
    Phi = build_weight(model, dec, cfg.E2_value, cfg.E3_value, 0)
    return energy_identity_residual(H, model, Phi, win.eigenvalues[0], u, mu)


def _exp_energy(ctx, mu, H, ed, lam, row):
    r0 = _energy_residual(ctx.cfg.model, ctx.cfg, mu)
    r1 = _energy_residual(refine_spec(ctx.cfg.model), ctx.cfg, mu)
    row["energy_residual"], row["energy_residual_half"] = r0, r1
    row["energy_ratio"] = r0 / r1 if r1 > 0 else np.inf


RUNNERS = {
    "thmD": _exp_thmD,
    "lemma_kh": _exp_lemma_kh,
    "thm_equiv": _exp_thm_equiv,
    "decay_p10a": _exp_decay,
    "weyl": _exp_weyl,
    "roe": _exp_roe,
    "wannier": _exp_wannier,
    "energy_identity": _exp_energy,
}


def run_row(ctx: Context, mu: float) -> dict:
    """All requested experiments at one coupling; failures are recorded, not raised."""
    row = {"mu": float(mu), "status": "ok"}
    stage = "eigendata"
    try:
        H = assemble_hamiltonian(ctx.model, mu)
        ed = eigendata(ctx.model, ctx.decomp, H, ctx.cfg, mu, ctx.cache_dir)
        stage = "gap"
        choice = choose_lambda(ed.wells.merged, ctx.cfg.E1 * mu, ctx.cfg.E0 * mu)
        if choice is None:
            lam, (a, b) = np.nan, (np.nan, np.nan)
        else:
            lam, (a, b) = choice
        row["gap_a"], row["gap_b"], row["lambda"] = a, b, lam
        row["has_gap"] = choice is not None and bool(b - a >= GAP_REL_WIDTH * max(abs(lam), 1.0))
        sub = Context(ctx.cfg, ctx.model, ctx.decomp, ctx.cutoffs, ctx.cache_dir)
        for name in ctx.cfg.experiments:
            stage = name
            if name != "energy_identity" and name != "weyl" and choice is None:
                raise SemiwellError("no spectral gap below E1*mu")
            RUNNERS[name](sub, mu, H, ed, row.get("lambda"), row)
    except SemiwellError as exc:
        row["status"] = "failed"
        row["error"] = f"mu={mu:g}, {stage}: {type(exc).__name__}: {exc}"
        log.warning(row["error"])
    return row


def run_sweep(cfg: SweepConfig, cache_dir=None, threads: int = 1) -> list[dict]:
    """Result table: one row per mu in ``cfg.mu_list``."""
    if not cfg.mu_list:
        return []
    model = build_model(cfg.model)
    decomp = find_wells(model, cfg.E0)
    needs_cutoffs = {"lemma_kh", "thm_equiv", "roe", "wannier"} & set(cfg.experiments)
    cutoffs = build_cutoffs(model, decomp, cfg.E1, cfg.eta_value) if needs_cutoffs else None
    ctx = Context(cfg, model, decomp, cutoffs, cache_dir)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(lambda mu: run_row(ctx, mu), cfg.mu_list))
    return [run_row(ctx, mu) for mu in cfg.mu_list]


def outside_mass_fits(rows: list[dict]) -> list[dict]:
    """Decay fit per eigenfunction index, for indices present at three or more couplings."""
    ok = [r for r in rows if r.get("status") == "ok" and "outside_mass" in r]
    depth = max((len(r["outside_mass"]) for r in ok), default=0)
    fits = []
    for j in range(depth):
        pts = [(r["mu"], r["outside_mass"][j]) for r in ok if len(r["outside_mass"]) > j]
        if len(pts) < 3:
            continue
        try:
            fits.append({"index": j, **fit_exponential_rate(pts).as_dict()})
        except AllBelowFloor as exc:
            fits.append({"index": j, "error": str(exc)})
        except TooFewPoints:
            continue
    return fits


def summarize(rows: list[dict]) -> dict:
    """Decay fits over the sweep for every column that has enough points."""
    ok = [r for r in rows if r.get("status") == "ok"]
    out = {}
    for col in ("hausdorff", "K_norm", "norm_E_minus_P", "outside_mass_max", "gram_deviation_max",
                "decomposition_E", "decomposition_P"):
        pts = [(r["mu"], r[col]) for r in ok if col in r]
        try:
            out[col] = fit_exponential_rate(pts).as_dict()
        except (TooFewPoints, AllBelowFloor) as exc:
            out[col] = {"error": str(exc)}
    out["outside_mass_by_index"] = outside_mass_fits(rows)
    pts = [(r["mu"], r["weyl_max"]) for r in ok if "weyl_max" in r]
    try:
        expo, r2 = fit_power_law(pts)
        out["weyl_exponent"] = {"exponent": expo, "r_squared": r2}
    except (TooFewPoints, AllBelowFloor) as exc:
        out["weyl_exponent"] = {"error": str(exc)}
    below = [r["mu"] for r in ok if r.get("norm_E_minus_P", np.inf) < 1]
    out["mu_star"] = min(below) if below else None
    return out


# ---------------------------------------------------------------- output

def jsonable(v):
    if isinstance(v, (np.floating, float)):
        return None if not np.isfinite(v) else float(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.bool_,)):
        return bool(v)
    if isinstance(v, (list, tuple, np.ndarray)):
        return [jsonable(x) for x in v]
    if isinstance(v, dict):
        return {str(k): jsonable(x) for k, x in v.items()}
    return v


def write_table(rows: list[dict], path, fmt: str = "csv") -> Path:
    """Write rows as CSV (list cells JSON-encoded) or as a JSON array."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "json":
        path.write_text(json.dumps(jsonable(rows), indent=2))
        return path
    if fmt != "csv":
        raise ConfigError(f"unknown format {fmt!r}")
    cols = []
    for r in rows:
        cols += [c for c in r if c not in cols]
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: json.dumps(jsonable(v)) if isinstance(v, (list, dict, tuple)) else jsonable(v)
                        for k, v in r.items()})
    return path
