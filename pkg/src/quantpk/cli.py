"""Command-line interface: validate, fit, simulate, optimize, qbench, report.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 configuration error.
Failures print a JSON object to stderr.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, load_config
from .data import build_subjects, read_dataset, summarize
from .diagnostics import compute_cv_profile, compute_residuals
from .errors import ConfigError, QuantPKError
from .fock import FockEncoding, FockRates, encode_amounts, extract_expectations, propagate
from .likelihood import ObservationSet, individual_loglik, predict_subject, psd_factor
from .model import ETA_NAMES, UNIT_SCALE, FixedEffects, adjust_parameters
from .ode import Solver, TrajectoryCache, simulate_doses
from .qsampler import QuantumEngine
from .saem import ClassicalEngine, run_saem
from .trial import (grid_csv, recommendations_csv, reductions, reductions_csv, run_scenarios,
                    trial_solver)

log = logging.getLogger("quantpk")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="quantpk", description="Population PK/PD modelling and dose optimization.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, needs_config=True):
        sp.add_argument("--config", required=needs_config, help="YAML run configuration")
        sp.add_argument("--seed", type=int, help="override the configured seed")
        sp.add_argument("--workers", type=int, help="override the configured worker count")
        sp.add_argument("--output-dir", help="override the configured output directory")

    sp = sub.add_parser("validate", help="parse a dataset and print diagnostics")
    sp.add_argument("dataset", nargs="?", help="dataset CSV (default: the configured one)")
    common(sp, needs_config=False)

    sp = sub.add_parser("fit", help="estimate population parameters by SAEM")
    common(sp)
    sp.add_argument("--engine", choices=("classical", "quantum"))

    sp = sub.add_parser("simulate", help="simulate population profiles")
    common(sp)

    sp = sub.add_parser("optimize", help="run the dose-optimization scenario matrix")
    common(sp)

    sp = sub.add_parser("qbench", help="compare Fock-encoded and classical dynamics")
    common(sp)

    sp = sub.add_parser("report", help="write CV% profiles and residual diagnostics")
    common(sp)
    sp.add_argument("--fit-dir", help="directory holding fit outputs (theta.csv, etas.csv)")
    return p


# ---------------------------------------------------------------------------
# helpers


def _effective_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.workers is not None:
        if args.workers < 1:
            raise UsageError("--workers must be >= 1")
        cfg = replace(cfg, workers=args.workers)
    if args.output_dir is not None:
        cfg = replace(cfg, output_dir=args.output_dir)
    if getattr(args, "engine", None):
        cfg = replace(cfg, saem={**cfg.saem, "engine": args.engine})
    return cfg


def _write(cfg: RunConfig, name: str, body: str) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(cfg.header() + body)
    return path


def _rows_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


def _subjects(cfg: RunConfig, path: str | None = None):
    path = path or cfg.dataset
    if not path:
        raise ConfigError("no dataset given")
    records = read_dataset(path)
    return records, build_subjects(records)


def _solver(cfg: RunConfig) -> Solver:
    cache = TrajectoryCache(cfg.solver.cache_size) if cfg.solver.cache_size > 0 else None
    return Solver(cfg.solve_settings(), cache)


def _read_table(path: Path) -> list[list[str]]:
    lines = [ln for ln in path.read_text().splitlines() if not ln.startswith("#")]
    return list(csv.reader(lines))


# ---------------------------------------------------------------------------
# subcommands


def cmd_validate(args) -> int:
    cfg = _effective_config(args)
    records, subjects = _subjects(cfg, args.dataset)
    print(json.dumps(summarize(records, subjects), indent=2))
    return 0


def cmd_fit(args) -> int:
    cfg = _effective_config(args)
    _, subjects = _subjects(cfg)
    settings = cfg.saem_settings()
    engine = (QuantumEngine.from_seed(settings.seed, n_qubits=len(ETA_NAMES))
              if settings.engine == "quantum" else ClassicalEngine())
    result = run_saem(subjects, cfg.fixed_effects(), cfg.omega_matrix(), cfg.residual_model(),
                      settings, engine, _solver(cfg))
    theta_rows = [(k, float(v)) for k, v in result.theta.to_dict().items()]
    theta_rows += [("sigma_pk", result.residual.sigma_pk), ("sigma_pd", result.residual.sigma_pd)]
    _write(cfg, "theta.csv", _rows_csv(("parameter", "value"), theta_rows))
    _write(cfg, "omega.csv", _rows_csv(("eta",) + ETA_NAMES,
                                       [(n,) + tuple(float(x) for x in row) for n, row in zip(ETA_NAMES, result.omega)]))
    _write(cfg, "trace.csv", result.trace.to_csv())
    _write(cfg, "etas.csv", _rows_csv(("id",) + ETA_NAMES,
                                      [(s.id,) + tuple(float(x) for x in e) for s, e in zip(subjects, result.etas)]))
    if isinstance(engine, QuantumEngine):
        _write(cfg, "quantum_angles.csv", engine.history_csv())
    print(json.dumps({"theta": result.theta.to_dict(), "final_loglik": result.trace.loglik[-1]}, indent=2))
    return 0


def cmd_simulate(args) -> int:
    cfg = _effective_config(args)
    sc = cfg.simulate
    theta, solver = cfg.fixed_effects(), _solver(cfg)
    rng = np.random.default_rng([cfg.seed, 11])
    factor = psd_factor(cfg.omega_matrix())
    t_end = sc.interval * sc.n_doses
    times = np.arange(0.0, t_end + 1e-9, sc.dt)
    doses = [(i * sc.interval, sc.dose) for i in range(sc.n_doses)]
    rows = []
    for i in range(sc.population_size):
        bw = float(rng.uniform(*sc.bw_range))
        comed = int(rng.random() < sc.comed_probability)
        eta = factor @ rng.standard_normal(len(ETA_NAMES))
        p = adjust_parameters(theta, eta, bw, comed)
        y = simulate_doses(p, doses, t_end, solver, covariates=(bw, comed)).evaluate(times)
        for t, yy in zip(times, y):
            rows.append((i + 1, bw, comed, float(t), float(yy[0] * UNIT_SCALE / p.v1), float(yy[3])))
    _write(cfg, "profiles.csv", _rows_csv(("subject", "bw", "comed", "time", "conc_ng_ml", "response"), rows))
    return 0


def cmd_optimize(args) -> int:
    cfg = _effective_config(args)
    grids = {"daily": cfg.trial.daily_grid, "weekly": cfg.trial.weekly_grid}
    recs = run_scenarios(cfg.scenario_matrix(), cfg.fixed_effects(), cfg.omega_matrix(), grids,
                         trial_solver(), cfg.trial.threshold, cfg.workers)
    _write(cfg, "recommendations.csv", recommendations_csv(recs))
    _write(cfg, "dose_grid.csv", grid_csv(recs))
    _write(cfg, "reductions.csv", reductions_csv(reductions(recs)))
    return 0


def cmd_qbench(args) -> int:
    cfg = _effective_config(args)
    qb = cfg.qbench
    theta = cfg.fixed_effects()
    p = adjust_parameters(theta, None, 70.0, 0)
    rates = FockRates.from_parameters(p)
    # single excitation: one Fock level of A1 holds the whole dose
    enc = FockEncoding((qb.dose, qb.dose, qb.dose, p.baseline / 6))
    y0 = (qb.dose, 0.0, 0.0, p.baseline)
    state = encode_amounts(y0, enc)
    # classical reference: the same linear system without absorption or response feedback
    solver = _solver(cfg)
    t_end = qb.n_steps * qb.dt
    traj = simulate_doses(p, [], t_end, solver, y0=y0)
    states = [state] + propagate(state, rates, qb.dt, qb.n_steps, enc)
    rows = []
    for k, st in enumerate(states):
        t = k * qb.dt
        c = traj.evaluate(t)[0]
        q = extract_expectations(st, enc)
        rows.append((k, t, float(c[0]), q.a1, float(c[1]), q.a2, float(c[2]), q.ae))
    _write(cfg, "qbench.csv", _rows_csv(
        ("step", "time", "classical_a1", "quantum_a1", "classical_a2", "quantum_a2",
         "classical_ae", "quantum_ae"), rows))

    n_subjects = 0
    if cfg.dataset:
        _, subjects = _subjects(cfg)
        res = cfg.residual_model()
        for _ in range(2):  # the second pass is served from the trajectory cache
            for s in subjects:
                individual_loglik(s, theta, None, res, solver)
                n_subjects += 1
    counters = solver.counters()
    counters.update({"subjects_simulated": n_subjects, "fock_steps": qb.n_steps,
                     "statevector_bytes": int(state.amplitudes.nbytes)})
    _write(cfg, "counters.csv", _rows_csv(("metric", "value"), sorted(counters.items())))
    return 0


def cmd_report(args) -> int:
    cfg = _effective_config(args)
    _, subjects = _subjects(cfg)
    theta, res, solver = cfg.fixed_effects(), cfg.residual_model(), _solver(cfg)
    etas = {}
    if args.fit_dir:
        fit_dir = Path(args.fit_dir)
        values = {r[0]: float(r[1]) for r in _read_table(fit_dir / "theta.csv")[1:]}
        sig = {k: values.pop(k) for k in ("sigma_pk", "sigma_pd") if k in values}
        theta = FixedEffects(**values)
        res = replace(res, **sig)
        for r in _read_table(fit_dir / "etas.csv")[1:]:
            etas[int(r[0])] = np.array([float(x) for x in r[1:]])

    skipped = []
    resid_rows = []
    for s in subjects:
        obs = ObservationSet.from_subject(s, res)
        pk, pd = predict_subject(s, theta, etas.get(s.id), solver, obs)
        for kind, t, o, pr in (("pk", obs.pk_t, obs.pk_y, pk), ("pd", obs.pd_t, obs.pd_y, pd)):
            r = compute_residuals(o, pr, kind, res)
            for i in range(len(t)):
                if not r.valid[i]:
                    skipped.append(f"residual id={s.id} {kind} time={t[i]!r}: non-positive value")
                    continue
                resid_rows.append((s.id, kind, float(t[i]), float(o[i]), float(pr[i]), float(r.residual[i]),
                                   float(r.percent[i]), float(r.standardized[i])))
    _write(cfg, "residuals.csv", _rows_csv(
        ("id", "observable", "time", "obs", "pred", "residual", "percent", "standardized"), resid_rows))

    cv_rows = []
    for kind in ("pk", "pd"):
        for dose in sorted({s.nominal_dose for s in subjects}):
            group = [s for s in subjects if s.nominal_dose == dose]
            pairs = [dict(s.pk_observations if kind == "pk" else s.pd_observations) for s in group]
            times = sorted({t for d in pairs for t in d})
            values = np.array([[d.get(t, np.nan) for t in times] for d in pairs]).reshape(len(pairs), len(times))
            prof = compute_cv_profile(times, values)
            cv_rows += [(kind, float(dose), float(t), float(c)) for t, c in zip(prof.times, prof.cv_percent)]
            skipped += [f"cv {kind} dose={dose!r} time={t!r}: {why}" for t, why in prof.skipped]
    _write(cfg, "cv_profile.csv", _rows_csv(("observable", "dose", "time", "cv_percent"), cv_rows))
    _write(cfg, "report_skipped.log", "".join(line + "\n" for line in skipped))
    return 0


COMMANDS = {"validate": cmd_validate, "fit": cmd_fit, "simulate": cmd_simulate,
            "optimize": cmd_optimize, "qbench": cmd_qbench, "report": cmd_report}


def _fail(kind: str, exc: BaseException, code: int) -> int:
    print(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
    return code


def run_cli(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        return _fail("usage", exc, 2)
    except ConfigError as exc:
        return _fail("config", exc, 3)
    except (QuantPKError, OSError, ValueError) as exc:
        return _fail("runtime", exc, 1)


def main() -> None:
    sys.exit(run_cli())
