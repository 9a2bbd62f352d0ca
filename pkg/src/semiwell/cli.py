"""Command-line entry point: ``semiwell <command> <config> [options]``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .agmon import build_cutoffs, build_weight
from .errors import ConfigError, NumericalError, SemiwellError
from .harness import (
    SweepConfig,
    jsonable,
    build_model,
    choose_lambda,
    eigendata,
    load_config,
    run_sweep,
    summarize,
    write_table,
)
from .lattice import assemble_hamiltonian, check_assumption1, find_wells
from .projections import build_quasi_projection, decomposition_check, mvn_partial_isometry, projection_gap_norm
from .resolvent import eigen_projection, riesz_projection
from .roe import band_truncate, build_wannier_frame, conjugation_check, propagation_profile, propagation_radius, well_subspaces
from .spectral import detect_gaps

EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
COMMANDS = ("spectrum", "gaps", "agmon", "project", "compare", "roe", "wannier", "sweep")


class Setup:
    """Model, wells and eigendata at one coupling, built lazily."""

    def __init__(self, cfg: SweepConfig, mu: float, cache, threads: int):
        self.cfg, self.mu, self.cache, self.threads = cfg, mu, cache, threads
        self.model = build_model(cfg.model)
        self.decomp = find_wells(self.model, cfg.E0)
        self.H = assemble_hamiltonian(self.model, mu)
        self._ed = None

    @property
    def ed(self):
        if self._ed is None:
            self._ed = eigendata(self.model, self.decomp, self.H, self.cfg, self.mu, self.cache)
        return self._ed

    def lam(self):
        choice = choose_lambda(self.ed.wells.merged, self.cfg.E1 * self.mu, self.cfg.E0 * self.mu)
        if choice is None:
            raise NumericalError(f"no spectral gap below E1*mu = {self.cfg.E1 * self.mu:g}")
        return choice

    def cutoffs(self):
        return build_cutoffs(self.model, self.decomp, self.cfg.E1, self.cfg.eta_value)


def _emit(rows, args, name):
    path = Path(args.out) / f"{name}.{args.format}"
    write_table(rows, path, args.format)
    print(path)


def _emit_record(record, args, name):
    path = Path(args.out) / f"{name}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(jsonable(record), indent=2))
    print(path)


def cmd_spectrum(s: Setup, args):
    rows = []
    for j, (w, r) in enumerate(zip(s.ed.full.eigenvalues, s.ed.full.residuals)):
        rows.append({"mu": s.mu, "source": "full", "index": j, "eigenvalue": w, "residual": r})
    for h, win in enumerate(s.ed.wells.windows):
        for j, (w, r) in enumerate(zip(win.eigenvalues, win.residuals)):
            rows.append({"mu": s.mu, "source": f"well{h}", "index": j, "eigenvalue": w, "residual": r})
    _emit(rows, args, "spectrum")


def cmd_gaps(s: Setup, args):
    top = s.cfg.E0 * s.mu
    gaps = detect_gaps(s.ed.wells.merged, 0.0, top)
    rows = [{"mu": s.mu, "a": a, "b": b, "width": b - a} for a, b in gaps.intervals]
    _emit(rows, args, "gaps")
    choice = choose_lambda(s.ed.wells.merged, s.cfg.E1 * s.mu, top)
    report = check_assumption1(s.decomp, s.cfg.E1).as_dict()
    rec = {"mu": s.mu, "lambda": None if choice is None else choice[0],
           "gap": None if choice is None else list(choice[1]), "assumption1": report}
    _emit_record(rec, args, "lambda")


def cmd_agmon(s: Setup, args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for h in range(len(s.decomp)):
        Phi = build_weight(s.model, s.decomp, s.cfg.E2_value, s.cfg.E3_value, h)
        path = out / f"agmon_well{h}.csv"
        Phi.to_csv(path)
        print(path)


def cmd_project(s: Setup, args):
    lam, gap = s.lam()
    t0 = time.perf_counter()
    P = riesz_projection(s.H, lam, threads=s.threads)
    secs = time.perf_counter() - t0
    E = eigen_projection(s.ed.full.eigenvectors[:, s.ed.full.eigenvalues <= lam])
    rec = {"mu": s.mu, "lambda": lam, "gap": list(gap), "rank": P.rank, "quad_order": P.meta["quad_order"],
           "idempotence": P.meta["idempotence"], "norm_riesz_minus_eigen": projection_gap_norm(E, P),
           "seconds": secs}
    _emit_record(rec, args, "project")


def _compare(s: Setup):
    lam, gap = s.lam()
    cf = s.cutoffs()
    E = eigen_projection(s.ed.full.eigenvectors[:, s.ed.full.eigenvalues <= lam])
    P, gram = build_quasi_projection(s.decomp, cf, s.ed.wells.windows, lam)
    return lam, gap, cf, E, P, gram


def cmd_compare(s: Setup, args):
    lam, gap, cf, E, P, gram = _compare(s)
    W = mvn_partial_isometry(E, P)
    r1, r2 = decomposition_check(E, s.decomp, cf, s.ed.wells.windows, lam)
    rec = {"mu": s.mu, "lambda": lam, "gap": list(gap), "norm_E_minus_P": projection_gap_norm(E, P),
           "gram_deviation_max": gram.max_deviation, "ranks": [E.rank, P.rank],
           "mvn_residuals": [W.residual_E, W.residual_P], "decomposition_residuals": [r1, r2]}
    _emit_record(rec, args, "compare")


def cmd_roe(s: Setup, args):
    lam, _ = s.lam()
    E = eigen_projection(s.ed.full.eigenvectors[:, s.ed.full.eigenvalues <= lam])
    L = float(s.model.distances([0], None).max())
    prof = propagation_profile(E, s.model, np.arange(0.0, L + s.cfg.roe_step, s.cfg.roe_step))
    rows = [{"mu": s.mu, "radius": r, "sup_offdiag": v} for r, v in zip(prof.radii, prof.sup_offdiag)]
    _emit(rows, args, "roe_profile")
    rec = {k: v for k, v in prof.as_dict().items() if k not in ("radii", "sup_offdiag")}
    if np.isfinite(prof.nu):
        R = 0.5 * sum(prof.fit_range)
        _, err = band_truncate(E, s.model, R)
        rec.update(band_radius=R, band_error=err, band_envelope=float(prof.envelope(R)))
    _emit_record({"mu": s.mu, "lambda": lam, **rec}, args, "roe_fit")


def cmd_wannier(s: Setup, args):
    lam, gap, cf, E, P, gram = _compare(s)
    frame = build_wannier_frame(s.decomp, well_subspaces(P, s.decomp), s.model)
    rec = frame.summary(conjugation_check(frame, P), propagation_radius(P, s.model))
    rec.update(mu=s.mu, delta=frame.delta, pk_identity_residual=frame.pk_identity_residual())
    _emit_record(rec, args, "wannier")


def cmd_sweep(cfg: SweepConfig, args):
    rows = run_sweep(cfg, cache_dir=args.cache, threads=args.threads)
    _emit(rows, args, "sweep")
    _emit_record(summarize(rows), args, "sweep_summary")
    failed = [r["error"] for r in rows if r.get("status") == "failed"]
    for msg in failed:
        print(f"semiwell: sweep row failed: {msg}", file=sys.stderr)


HANDLERS = {
    "spectrum": cmd_spectrum,
    "gaps": cmd_gaps,
    "agmon": cmd_agmon,
    "project": cmd_project,
    "compare": cmd_compare,
    "roe": cmd_roe,
    "wannier": cmd_wannier,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="semiwell", description="Semiclassical multi-well spectral experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        c = sub.add_parser(name)
        c.add_argument("config", help="YAML or JSON sweep configuration")
        c.add_argument("--out", default=".", help="output directory")
        c.add_argument("--format", choices=("csv", "json"), default="csv")
        c.add_argument("--cache", default=None, help="eigendata cache directory")
        c.add_argument("--threads", type=int, default=1)
        c.add_argument("--seed", type=int, default=None)
        if name != "sweep":
            c.add_argument("--mu", type=float, default=None, help="coupling (default: first of mu_list)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    stage = "config"
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, seed=args.seed)
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        stage = args.command
        if args.command == "sweep":
            cmd_sweep(cfg, args)
            return 0
        mu = args.mu if args.mu is not None else (cfg.mu_list[0] if cfg.mu_list else None)
        if mu is None or not mu > 0:
            raise ConfigError("a positive --mu or a non-empty mu_list is required")
        HANDLERS[args.command](Setup(cfg, mu, args.cache, args.threads), args)
    except (ConfigError, ValueError) as exc:
        print(f"semiwell: {stage} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SemiwellError as exc:
        print(f"semiwell: {stage} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return 0


if __name__ == "__main__":
    sys.exit(main())
