"""Command-line front end: solve / da-twin / complexity / sweep.

All commands read an optional JSON config (versioned schema field), write
RFC-4180 CSV artifacts into --out, and draw every bit of randomness from
the master seed, so a rerun with the same config and seed produces
byte-identical files.  Exit codes: 0 success, 1 config error, 2 runtime
failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import data_assim, diagnostics, oracles, problems, subproblem
from .core import SolverConfig, run

SCHEMA = "stochlm/1"
KINDS = ("solve", "da-twin", "complexity", "sweep")


class ConfigError(Exception):
    pass


@dataclass
class ExperimentConfig:
    kind: str
    payload: dict
    out_dir: Path
    master_seed: int
    workers: int
    quiet: bool


# ---------------------------------------------------------------- defaults

DEFAULT_CONFIGS = {
    "solve": {
        "schema": SCHEMA,
        "kind": "solve",
        "master_seed": 0,
        "problem": {"name": "linear", "params": {"m": 10, "n": 5,
                                                 "cond": 4.0, "seed": 0}},
        "oracle": {"name": "exact"},
        "solver": {"eta1": 0.1, "eta2": 1e-12, "mu_min": 1e-16, "mu0": 1.0,
                   "lambda": 2.0, "mu_max": 1e16, "max_iters": 200,
                   "grad_tol": 1e-10},
    },
    "da-twin": {
        "schema": SCHEMA,
        "kind": "da-twin",
        "master_seed": 0,
        "lorenz": {"sigma": 10.0, "rho": 28.0, "beta": 8.0 / 3.0,
                   "dt": 0.01, "steps_per_window": 10},
        "sigma_b": 1.0,
        "r_scale": 0.1,
        "obs_every": 1,
        "h_point": "identity",
        "ensemble_sizes": [4, 100, 1000, "inf"],
        "y_mode": "noise_only",
        "seeds": list(range(10)),
        "solver": {"eta1": 0.1, "eta2": 1.0, "mu_min": 1e-16, "mu0": 1.0,
                   "lambda": 2.0, "mu_max": 1e16, "max_iters": 400},
    },
    "complexity": {
        "schema": SCHEMA,
        "kind": "complexity",
        "master_seed": 0,
        "epsilons": [1e-1, 3e-2, 1e-2],
        "replications": 200,
        "p": 0.9,
        "q": 0.9,
        "oracle": {"kappa_ef": 0.01, "kappa_eg": 0.5, "eps_f": 0.01,
                   "jac_sigma": 0.05, "kappa_jm": 1.0},
        "solver": {"eta1": 0.1, "eta2": 1.0, "mu_min": 0.25, "mu0": 1.0,
                   "lambda": 2.0, "mu_max": 1e300, "max_iters": 20000},
    },
    "sweep": {
        "schema": SCHEMA,
        "kind": "sweep",
        "master_seed": 0,
        "count": 1000,
        "n_min": 2,
        "n_max": 8,
        "gamma_log10_min": -6.0,
        "gamma_log10_max": 6.0,
    },
}


def _fmt(value) -> str:
    """Stable CSV cell formatting; empty for missing values."""
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    x = float(value)
    if math.isnan(x):
        return ""
    return repr(x)


def write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def load_config(path, kind):
    if path is None:
        return json.loads(json.dumps(DEFAULT_CONFIGS[kind]))
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"config parse error at line {exc.lineno}, column {exc.colno}: "
            f"{exc.msg}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    schema = cfg.get("schema")
    if schema != SCHEMA:
        raise ConfigError(f"unsupported schema {schema!r}; expected {SCHEMA}")
    cfg_kind = cfg.get("kind")
    if cfg_kind != kind:
        raise ConfigError(
            f"config kind {cfg_kind!r} does not match command {kind!r}")
    merged = json.loads(json.dumps(DEFAULT_CONFIGS[kind]))
    for key, value in cfg.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = {**merged[key], **value}
        else:
            merged[key] = value
    return merged


def solver_config(d: dict) -> SolverConfig:
    d = dict(d)
    if "lambda" in d:
        d["lam"] = d.pop("lambda")
    valid = {f.name for f in fields(SolverConfig)}
    unknown = set(d) - valid
    if unknown:
        raise ConfigError(f"unknown solver keys: {sorted(unknown)}")
    try:
        return SolverConfig(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid solver config: {exc}") from exc


def build_oracle(spec: dict):
    name = spec.get("name", "exact")
    if name == "exact":
        return oracles.ExactOracle()
    consts = oracles.AccuracyConstants(
        kappa_ef=spec.get("kappa_ef", 0.01),
        kappa_eg=spec.get("kappa_eg", 0.5),
        eps_f=spec.get("eps_f", 0.01),
        p=spec.get("p", 0.9), q=spec.get("q", 0.9),
    )
    if name == "gaussian":
        return oracles.GaussianOracle(consts,
                                      jac_sigma=spec.get("jac_sigma", 0.0),
                                      kappa_jm=spec.get("kappa_jm"))
    if name == "bernoulli":
        return oracles.BernoulliOracle(consts,
                                       corruption=spec.get("corruption", 1e3))
    if name == "subsample":
        return oracles.SubsampleOracle(spec.get("batch_fraction", 0.5),
                                       constants=consts)
    raise ConfigError(f"unknown oracle {name!r}")


# ---------------------------------------------------------------- commands

def cmd_solve(cfg: ExperimentConfig) -> int:
    payload = cfg.payload
    pspec = payload["problem"]
    try:
        problem = problems.make_problem(pspec.get("name", "linear"),
                                        **pspec.get("params", {}))
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    oracle = build_oracle(payload.get("oracle", {}))
    scfg = solver_config(payload.get("solver", {}))
    scfg.record_truth = True
    scfg.record_grad = True
    trace = run(problem, oracle, oracle, cfg=scfg, seed=cfg.master_seed)

    rows = [
        (r.iter, r.f0, r.f1, r.rho, r.mu_before, r.step_norm, r.success,
         r.true_f_before, r.true_grad_norm)
        for r in trace.records
    ]
    rows.append((trace.n_iters, None, None, None, trace.mu_final, None,
                 None, trace.final_true_f, trace.final_grad_norm))
    write_csv(cfg.out_dir / "trace.csv",
              ["iter", "f0", "f1", "rho", "mu", "step_norm", "success",
               "true_f", "grad_norm"], rows)
    if not cfg.quiet:
        print(f"solve: {trace.n_iters} iterations, termination "
              f"{trace.termination}, final grad norm "
              f"{trace.final_grad_norm:.3e}")
    return 0


def _twin_sizes(raw):
    sizes = []
    for item in raw:
        if item in ("inf", None):
            sizes.append(None)
        else:
            sizes.append(int(item))
    return tuple(sizes)


def _n_label(N):
    return "inf" if N is None else str(N)


def cmd_da_twin(cfg: ExperimentConfig) -> int:
    payload = cfg.payload
    lz = payload["lorenz"]
    twin = data_assim.TwinConfig(
        lorenz=data_assim.Lorenz63Params(
            sigma=lz["sigma"], rho=lz["rho"], beta=lz["beta"], dt=lz["dt"],
            steps_per_window=lz["steps_per_window"]),
        sigma_b=payload["sigma_b"], r_scale=payload["r_scale"],
        obs_every=payload["obs_every"], h_point=payload["h_point"],
        ensemble_sizes=_twin_sizes(payload["ensemble_sizes"]),
        y_mode=payload["y_mode"],
        resample_each_iteration=payload.get("resample_each_iteration",
                                            False),
        solver=solver_config(payload.get("solver", {})),
    )
    seeds = [int(s) for s in payload["seeds"]]
    tasks = [(seed, N) for seed in seeds for N in twin.ensemble_sizes]
    cells = {}
    failures = []

    def record_outcome(key, getter):
        try:
            cells[key] = getter()
        except Exception as exc:
            failures.append((f"N={_n_label(key[0])} seed={key[1]}",
                             repr(exc)))

    if cfg.workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            futures = {
                (N, seed): pool.submit(data_assim.run_twin_cell, twin,
                                       cfg.master_seed, seed, N)
                for seed, N in tasks
            }
            for key, fut in futures.items():
                record_outcome(key, fut.result)
    else:
        for seed, N in tasks:
            record_outcome((N, seed),
                           lambda s=seed, n=N: data_assim.run_twin_cell(
                               twin, cfg.master_seed, s, n))

    for (N, seed), cell in sorted(
            cells.items(), key=lambda kv: (_n_label(kv[0][0]), kv[0][1])):
        rows = [(r.iter, r.f0, r.true_f_before, r.mu_before, r.success)
                for r in cell.trace.records]
        write_csv(cfg.out_dir / f"twin_N{_n_label(N)}_seed{seed}.csv",
                  ["iter", "f0", "true_f", "mu", "success"], rows)
    summary_rows = []
    for seed in seeds:
        for N in twin.ensemble_sizes:
            cell = cells.get((N, seed))
            if cell is None:
                continue
            inf_cell = cells.get((None, seed))
            dist = None
            if N is not None and inf_cell is not None:
                dist = float(np.linalg.norm(cell.final_x
                                            - inf_cell.final_x))
            summary_rows.append(
                (_n_label(N), seed, dist, cell.final_f0, cell.final_true_f,
                 cell.final_grad_norm, cell.trace.n_iters,
                 cell.trace.termination))
    write_csv(cfg.out_dir / "summary.csv",
              ["N", "seed", "distance_to_inf", "final_f0", "final_true_f",
               "final_grad_norm", "iterations", "termination"],
              summary_rows)
    if not cfg.quiet:
        print(f"da-twin: {len(cells)} cells -> {cfg.out_dir}")
    if failures:
        write_csv(cfg.out_dir / "failures.csv", ["cell", "error"], failures)
        for cell_name, err in failures:
            print(f"FAILED {cell_name}: {err}", file=sys.stderr)
        return 2
    return 0


def complexity_theory_constants(payload) -> diagnostics.TheoryConstants:
    problem = problems.quadratic2_problem()
    ospec = payload["oracle"]
    sspec = payload["solver"]
    return diagnostics.TheoryConstants.from_primitives(
        nu=problem.lipschitz_grad(),
        kappa_Jm=ospec.get("kappa_jm", problem.jacobian_bound()),
        theta_fcd=subproblem.DEFAULT_CONTRACT.theta_fcd,
        theta_in=subproblem.DEFAULT_CONTRACT.theta_in,
        kappa_ef=ospec["kappa_ef"], kappa_eg=ospec["kappa_eg"],
        eps_f=ospec["eps_f"],
        eta1=sspec["eta1"], eta2=sspec["eta2"], lam=sspec["lambda"],
    )


def _complexity_cell(payload: dict, master_seed: int, i_eps: int):
    """One epsilon cell; top level so worker processes can pickle it."""
    p = float(payload["p"])
    q = float(payload["q"])
    constants = complexity_theory_constants(payload)
    scfg = solver_config(payload["solver"])
    ospec = dict(payload["oracle"])
    ospec.update({"name": "gaussian", "p": p, "q": q})

    def oracle_factory():
        oracle = build_oracle(ospec)
        return oracle, oracle

    eps = float(payload["epsilons"][i_eps])
    return diagnostics.estimate_T_epsilon(
        problems.quadratic2_problem, oracle_factory, scfg, [eps],
        int(payload["replications"]), master_seed,
        constants=constants, p=p, q=q, eps_indices=[i_eps],
    )


def cmd_complexity(cfg: ExperimentConfig) -> int:
    payload = cfg.payload
    p = float(payload["p"])
    q = float(payload["q"])
    if p * q <= 0.5:
        raise ConfigError(
            f"p*q = {p * q} <= 1/2; the stopping-time analysis requires "
            "pq > 1/2")
    epsilons = [float(e) for e in payload["epsilons"]]
    reps = int(payload["replications"])
    indices = list(range(len(epsilons)))
    if cfg.workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            cells = list(pool.map(_complexity_cell,
                                  [payload] * len(indices),
                                  [cfg.master_seed] * len(indices),
                                  indices))
    else:
        cells = [_complexity_cell(payload, cfg.master_seed, i)
                 for i in indices]

    mean_T = [c.mean_T[0] for c in cells]
    capped = [c.n_capped[0] for c in cells]
    slope = diagnostics.fit_loglog_slope(
        epsilons, mean_T, [c / reps for c in capped])

    rep_rows = []
    for i, eps in enumerate(epsilons):
        for r in range(reps):
            rep_rows.append((eps, r, cells[i].T_values[0][r],
                             cells[i].capped_flags[0][r]))
    write_csv(cfg.out_dir / "replications.csv",
              ["epsilon", "replication", "T", "capped"], rep_rows)
    summary_rows = [
        (eps, mean_T[i], cells[i].stderr_T[0], reps, capped[i],
         cells[i].bounds[0] if cells[i].bounds else None, slope)
        for i, eps in enumerate(epsilons)
    ]
    write_csv(cfg.out_dir / "summary.csv",
              ["epsilon", "mean_T", "stderr", "replications", "capped",
               "theory_bound", "fitted_slope"], summary_rows)
    if not cfg.quiet:
        print(f"complexity: slope {slope:.3f} over "
              f"{len(epsilons)} epsilon values -> {cfg.out_dir}")
    return 0


def cmd_sweep(cfg: ExperimentConfig) -> int:
    payload = cfg.payload
    count = int(payload["count"])
    rng = np.random.default_rng(cfg.master_seed)
    rows = []
    violations = 0
    from .core import ModelSnapshot
    for index in range(count):
        n = int(rng.integers(payload["n_min"], payload["n_max"] + 1))
        m = int(rng.integers(n, 2 * n + 1))
        J = rng.standard_normal((m, n))
        g = rng.standard_normal(n)
        log_gamma = rng.uniform(payload["gamma_log10_min"],
                                payload["gamma_log10_max"])
        gamma = 10.0 ** log_gamma
        mu = gamma / np.linalg.norm(g)
        snap = ModelSnapshot(center=np.zeros(n), m_at_center=0.0, g=g, J=J,
                             gamma=gamma, mu=mu)
        s = subproblem.solve_cg(snap)
        report = subproblem.contract_report(snap, s)
        ok = subproblem.contract_holds(report)
        violations += not ok
        rows.append((index, n, gamma, mu, report["step_lhs"],
                     report["decrease_lhs"], report["decrease_rhs"],
                     report["product_lhs"], report["product_rhs"], ok))
    write_csv(cfg.out_dir / "sweep.csv",
              ["index", "n", "gamma", "mu", "step_norm_times_mu",
               "decrease_lhs", "decrease_rhs", "product_lhs", "product_rhs",
               "ok"], rows)
    if not cfg.quiet:
        print(f"sweep: {count} snapshots, {violations} violations")
    return 0 if violations == 0 else 2


COMMANDS = {
    "solve": cmd_solve,
    "da-twin": cmd_da_twin,
    "complexity": cmd_complexity,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="stochlm",
        description="Stochastic Levenberg-Marquardt experiment runner")
    parser.add_argument("kind", choices=KINDS)
    parser.add_argument("--config", default=None,
                        help="JSON config (built-in defaults if omitted)")
    parser.add_argument("--out", default="stochlm-out",
                        help="output directory for CSV artifacts")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the master seed")
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--quiet", action="store_true")
    args = parser.parse_args(argv)

    try:
        payload = load_config(args.config, args.kind)
        master_seed = args.seed if args.seed is not None \
            else int(payload.get("master_seed", 0))
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        cfg = ExperimentConfig(kind=args.kind, payload=payload,
                               out_dir=out_dir, master_seed=master_seed,
                               workers=max(1, args.workers),
                               quiet=args.quiet)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1

    try:
        return COMMANDS[args.kind](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"runtime failure: {exc!r}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
