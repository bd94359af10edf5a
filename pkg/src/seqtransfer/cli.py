"""Command-line entry point.

Subcommands: run-ptum, run-sequential (with --static ablation), learn-hmm,
diagnose, export-env.  Exit codes: 0 success, 2 configuration error,
3 runtime failure.
"""
from __future__ import annotations

import argparse
import math
import sys
import traceback
from pathlib import Path

import numpy as np

from .envs import GenerativeModel
from .harness import (
    ConfigError,
    ExperimentConfig,
    aggregate,
    build_family,
    export_models_json,
    family_min_gap,
    random_hmm_family,
    run_rng,
    simulate_hmm_observations,
    sweep,
    true_task_values,
    write_csv,
    write_json,
)
from .mdp import policy_evaluation, value_iteration
from .ptum import ApproxModelSet, run_ptum, theta_eps_and_bound
from .sequential import SequentialConfig, run_sequential
from .spectral import (
    ObservationLayout,
    align_columns,
    apply_permutation,
    spectral_estimate,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _out_dir(cfg: ExperimentConfig, args) -> Path:
    out = Path(args.output_dir) if args.output_dir else (cfg.output_dir or Path("."))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _eps_optimal(truth, v_star, policy, eps, tol=1e-6) -> bool:
    v_pi = policy_evaluation(truth, policy)
    return bool(np.max(v_star - v_pi) <= eps + tol)


def cmd_run_ptum(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    family, _ = build_family(cfg)
    eps = float(cfg.get("eps", 0.1))
    delta = float(cfg.get("delta", 0.01))
    budget = int(cfg.get("budget", 100_000))
    star = int(cfg.get("true_task", 0))
    values = true_task_values(family)
    approx = ApproxModelSet(family)
    theta_eps, bound = theta_eps_and_bound(approx, star, eps, delta, budget)

    def one_run(i):
        rng = run_rng(cfg.base_seed, i)
        g = GenerativeModel(family[star])
        res = run_ptum(approx, g, eps, delta, budget, rng)
        star_survived = all(star in step for step in res.survived_trace)
        opt = _eps_optimal(family[star], values[star], res.policy, eps)
        return (i, res.tau, res.mode, int(opt), int(star_survived), res.queries_total)

    rows = sweep(one_run, cfg.num_runs)
    out = _out_dir(cfg, args)
    write_csv(out / "ptum_results.csv",
              ["run", "tau", "mode", "eps_optimal", "star_survived", "queries_total"],
              rows)
    taus = [r[1] for r in rows]
    summary = {
        "scenario": cfg.scenario,
        "eps": eps,
        "delta": delta,
        "num_runs": cfg.num_runs,
        "tau": aggregate(taus).as_dict(),
        "eps_optimal_fraction": sum(r[3] for r in rows) / len(rows),
        "star_survived_fraction": sum(r[4] for r in rows) / len(rows),
        "theta_eps": sorted(theta_eps),
        "query_bound": bound if math.isfinite(bound) else None,
    }
    write_json(out / "ptum_summary.json", summary)
    print(f"run-ptum: {cfg.num_runs} runs, mean tau {summary['tau']['mean']:.1f}, "
          f"eps-optimal fraction {summary['eps_optimal_fraction']:.3f}")
    return EXIT_OK


def _sequential_config(cfg: ExperimentConfig, static: bool) -> SequentialConfig:
    return SequentialConfig(
        num_tasks=int(cfg.get("num_tasks_sequence", 150)),
        startup_tasks=int(cfg.get("startup_tasks", 100)),
        startup_per_pair=int(cfg.get("startup_per_pair", 50)),
        post_sample_per_pair=int(cfg.get("post_sample_per_pair", 30)),
        eps=float(cfg.get("eps", 0.5)),
        delta=float(cfg.get("delta", 1e-6)),
        delta_prime=float(cfg.get("delta_prime", 0.1)),
        rho=float(cfg.get("rho", 0.135)),
        eta=0.0 if static else float(cfg.get("eta", 0.087)),
        rho_t=float(cfg.get("rho_t", 0.001)),
        top_keep=int(cfg.get("top_keep", 3)),
        pre_elimination=not static,
        budget=int(cfg.get("budget", 100_000)),
        fallback_per_pair=cfg.get("fallback_per_pair"),
        rho_final=cfg.get("rho_final"),
        rho_decay_tasks=int(cfg.get("rho_decay_tasks", 0)),
        rtp_restarts=int(cfg.get("rtp_restarts", 20)),
        rtp_iters=int(cfg.get("rtp_iters", 50)),
    )


def cmd_run_sequential(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    family, chain = build_family(cfg)
    if chain is None:
        raise ConfigError("run-sequential needs a scenario with a task chain")
    seq_cfg = _sequential_config(cfg, args.static)

    def one_run(i):
        rng = run_rng(cfg.base_seed, i)
        return i, run_sequential(seq_cfg, family, chain, rng)

    results = sweep(one_run, cfg.num_runs)
    rows = []
    for i, trace in results:
        for r in trace.records:
            rows.append((i, r.h, r.true_task, r.mode, r.queries, int(r.eps_optimal),
                         r.active_set_size, r.delta_h, r.o_col_err_max, r.t_err_max))
    out = _out_dir(cfg, args)
    variant = "static" if args.static else "sequential"
    write_csv(out / f"{variant}_trace.csv",
              ["run", "h", "true_task", "mode", "queries", "eps_optimal",
               "active_set_size", "delta_h", "o_col_err_max", "t_err_max"],
              rows)
    transfer_queries = [
        r.queries for _, t in results for r in t.records if r.mode != "startup"
    ]
    summary = {
        "variant": variant,
        "num_runs": cfg.num_runs,
        "eps_optimal_fraction": float(np.mean([
            t.eps_optimal_fraction() for _, t in results
        ])),
        "degraded_fraction": float(np.mean([
            t.degraded_fraction() for _, t in results
        ])),
        "transfer_queries": aggregate(transfer_queries).as_dict()
        if transfer_queries else None,
    }
    write_json(out / f"{variant}_summary.json", summary)
    print(f"run-sequential ({variant}): {cfg.num_runs} runs, "
          f"eps-optimal fraction {summary['eps_optimal_fraction']:.3f}")
    return EXIT_OK


def cmd_learn_hmm(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    if cfg.scenario != "synthetic-hmm":
        raise ConfigError("learn-hmm needs the synthetic-hmm scenario")
    k = int(cfg.get("num_tasks", 3))
    S = int(cfg.get("num_states", 2))
    A = int(cfg.get("num_actions", 3))
    U = int(cfg.get("num_rewards", 3))
    steps = int(cfg.get("steps", 300))
    per_pair = int(cfg.get("samples_per_pair", 20))
    gamma = float(cfg.get("gamma", 0.9))

    def one_run(i):
        rng = run_rng(cfg.base_seed, i)
        family, chain = random_hmm_family(k, S, A, U, gamma, rng)
        layout = ObservationLayout(S, A, U)
        o_true = np.stack([layout.vectorize(m.q, m.p) for m in family], axis=1)
        obs, _ = simulate_hmm_observations(family, chain, steps, per_pair, rng)
        est = spectral_estimate(obs, k, layout, restarts=50, iters=50, rng=rng)
        est = apply_permutation(est, align_columns(est, o_true))
        o_err = float(np.max(np.linalg.norm(est.observation - o_true, axis=0)))
        t_err = float(np.max(np.abs(est.transition - chain.transition)))
        return i, o_err, t_err

    rows = sweep(one_run, cfg.num_runs)
    out = _out_dir(cfg, args)
    write_csv(out / "hmm_results.csv", ["run", "o_col_err_max", "t_err_max"], rows)
    summary = {
        "num_runs": cfg.num_runs,
        "steps": steps,
        "o_col_err_max": aggregate([r[1] for r in rows]).as_dict(),
        "t_err_max": aggregate([r[2] for r in rows]).as_dict(),
    }
    write_json(out / "hmm_summary.json", summary)
    print(f"learn-hmm: mean max column error {summary['o_col_err_max']['mean']:.4f}")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    family, _ = build_family(cfg)
    eps = float(cfg.get("eps", 0.1))
    delta = float(cfg.get("delta", 0.01))
    budget = int(cfg.get("budget", 100_000))
    star = int(cfg.get("true_task", 0))
    approx = ApproxModelSet(family)
    theta_eps, bound = theta_eps_and_bound(approx, star, eps, delta, budget)
    gap = family_min_gap(family)
    report = {
        "scenario": cfg.scenario,
        "true_task": star,
        "eps": eps,
        "delta": delta,
        "theta_eps": sorted(theta_eps),
        "query_bound": bound if math.isfinite(bound) else None,
        "min_gap": gap,
    }
    out = _out_dir(cfg, args)
    write_json(out / "diagnose.json", report)
    print(f"diagnose: |Theta_eps| = {len(theta_eps)}, min gap {gap:.6g}, "
          f"bound {bound:.6g}")
    return EXIT_OK


def cmd_export_env(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    family, chain = build_family(cfg)
    doc = export_models_json(family)
    if chain is not None:
        doc["chain"] = {
            "transition": chain.transition.tolist(),
            "initial": chain.initial.tolist(),
        }
    out = _out_dir(cfg, args)
    write_json(out / "models.json", doc)
    print(f"export-env: wrote {len(family)} models to {out / 'models.json'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="seqtransfer",
        description="Active model identification and sequential transfer experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.add_argument("config", help="path to a JSON experiment config")
        p.add_argument("--output-dir", default=None, help="where to write results")
        p.set_defaults(fn=fn)
        return p

    add("run-ptum", cmd_run_ptum, help="single-task identification sweep")
    seq = add("run-sequential", cmd_run_sequential, help="sequential transfer run")
    seq.add_argument("--static", action="store_true",
                     help="disable pre-elimination (static-transfer ablation)")
    add("learn-hmm", cmd_learn_hmm, help="synthetic spectral-recovery benchmark")
    add("diagnose", cmd_diagnose, help="identifiability and bound report")
    add("export-env", cmd_export_env, help="emit the task family as JSON")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception:
        traceback.print_exc()
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
