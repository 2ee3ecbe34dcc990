"""Command-line interface.

Subcommands: simulate, fit, dic, summarize, connectivity, bench. Options can
come from a YAML config file (see README for the schema); explicit flags win
over config values. The worker thread count falls back to the RESSM_THREADS
environment variable.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import __version__, bench, io
from .diagnostics import (
    compute_cdic,
    compute_dic_variants,
    connectivity_edges,
    connectivity_set,
    draws_long_table,
    group_contrast,
    summarize,
)
from .engine import run_chain
from .model import Hyperparams, MCMCSchedule, ModelSpec, default_hyperparams, validate
from .simulate import simulate_hierarchy
from .tensorfile import write_tensor


def _default_threads() -> int:
    return int(os.environ.get("RESSM_THREADS", "1"))


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ressm",
        description="Hierarchical random-effects state-space modeling of "
                    "multichannel time series.",
    )
    parser.add_argument("--version", action="version", version=f"ressm {__version__}")
    sub = parser.add_subparsers(dest="mode", required=True)

    def common(p, needs_out=True):
        p.add_argument("--config", type=Path, help="YAML config file")
        p.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
        p.add_argument("--threads", type=int, default=None,
                       help="worker threads (default: RESSM_THREADS or 1)")
        if needs_out:
            p.add_argument("--out", type=Path, help="output directory")

    p_sim = sub.add_parser("simulate", help="generate a synthetic dataset with truth")
    common(p_sim)

    p_fit = sub.add_parser("fit", help="two-stage fit of a dataset")
    common(p_fit)
    p_fit.add_argument("--data", type=Path, help="dataset manifest (or its directory)")
    p_fit.add_argument("--q", type=int, help="latent dimension")
    p_fit.add_argument("--m", type=int, help="autoregressive order")
    p_fit.add_argument("--mode", dest="re_mode", choices=("full", "fixed_loading", "fixed_all"),
                       help="random-effects structure")
    p_fit.add_argument("--iters", type=int, help="total MCMC iterations")
    p_fit.add_argument("--burnin", type=int, help="burn-in iterations")
    p_fit.add_argument("--thin", type=int, help="thinning rate")
    p_fit.add_argument("--init-iters", type=int, help="stage-1 iterations")
    p_fit.add_argument("--rho0", type=float, help="sign-tracking cosine threshold (<= 0)")
    p_fit.add_argument("--scale", type=float, default=1.0,
                       help="divide all iteration counts by this factor")
    p_fit.add_argument("--checkpoint-every", type=int, default=0)
    p_fit.add_argument("--resume", type=Path, help="checkpoint directory to resume from")

    p_dic = sub.add_parser("dic", help="tabulate information criteria of fits")
    p_dic.add_argument("--fit", type=Path, nargs="+", required=True,
                       help="fit output directories")

    p_sum = sub.add_parser("summarize", help="posterior summary tables of a fit")
    p_sum.add_argument("--fit", type=Path, required=True)
    p_sum.add_argument("--out", type=Path, help="directory for TSV tables (default: fit dir)")
    p_sum.add_argument("--contrast", type=float, nargs="+",
                       help="group weights for a contrast summary")

    p_con = sub.add_parser("connectivity", help="directional connectivity outputs")
    p_con.add_argument("--fit", type=Path, required=True)
    p_con.add_argument("--out", type=Path, help="output directory (default: fit dir)")
    p_con.add_argument("--threshold", type=float, default=0.05)
    p_con.add_argument("--lag", type=int, default=1)

    p_bench = sub.add_parser("bench", help="replicated simulation experiments")
    common(p_bench)

    return parser


def _load_cfg(path: Path | None) -> dict:
    return io.load_config(path) if path else {}


def _schedule_from_cfg(cfg: dict, args) -> MCMCSchedule:
    s = cfg.get("schedule", {})
    sched = MCMCSchedule(
        n_iter=args.iters if getattr(args, "iters", None) else int(s.get("iters", 7500)),
        n_burnin=args.burnin if getattr(args, "burnin", None) is not None
        else int(s.get("burnin", 2500)),
        thin=args.thin if getattr(args, "thin", None) else int(s.get("thin", 10)),
        n_init_iter=args.init_iters if getattr(args, "init_iters", None) is not None
        else s.get("init_iters"),
        sign_check_start=s.get("sign_start"),
        sign_check_end=s.get("sign_end"),
        sign_check_every=int(s.get("sign_every", 10)),
        rho0=args.rho0 if getattr(args, "rho0", None) is not None
        else float(s.get("rho0", 0.0)),
        checkpoint_every=getattr(args, "checkpoint_every", 0)
        or int(s.get("checkpoint_every", 0)),
    )
    scale = getattr(args, "scale", 1.0) or 1.0
    if scale != 1.0:
        sched = sched.scaled(scale)
    return sched


def _hyper_from_cfg(cfg: dict, n_channels: int, q: int, m: int) -> Hyperparams:
    h = dict(cfg.get("hyper", {}))
    small_kappa = float(h.pop("small_kappa", 1e-3))
    hyper = default_hyperparams(n_channels, q, m, small_kappa=small_kappa)
    if h:
        hyper = replace(hyper, **{k: float(v) for k, v in h.items()})
    return hyper


def _resolve(value, cfg_value, default):
    if value is not None:
        return value
    if cfg_value is not None:
        return cfg_value
    return default


def cmd_simulate(args) -> int:
    cfg = _load_cfg(args.config)
    if "scenario" not in cfg:
        print("error: simulate requires a config file with a 'scenario' block",
              file=sys.stderr)
        return 2
    seed = int(_resolve(args.seed, cfg.get("seed"), 0))
    out = Path(_resolve(args.out, cfg.get("out"), "sim_out"))
    scenario = bench.scenario_from_config(cfg["scenario"])
    ds, truth = simulate_hierarchy(scenario, seed)
    out.mkdir(parents=True, exist_ok=True)
    manifest = io.write_dataset(ds, out)
    io.write_truth(truth, out)
    io.write_run_metadata(out, seed, cfg, extra={"command": "simulate"})
    print(f"wrote {ds.n_segments} segments to {manifest}")
    return 0


def cmd_fit(args) -> int:
    cfg = _load_cfg(args.config)
    model_cfg = cfg.get("model", {})
    run_cfg = cfg.get("run", {})
    data = _resolve(args.data, cfg.get("data"), None)
    if data is None:
        print("error: fit requires --data or a config 'data' entry", file=sys.stderr)
        return 2
    out = Path(_resolve(args.out, run_cfg.get("out"), "fit_out"))
    seed = int(_resolve(args.seed, run_cfg.get("seed"), 0))
    threads = int(_resolve(args.threads, run_cfg.get("threads"), _default_threads()))
    q = int(_resolve(args.q, model_cfg.get("q"), 2))
    m = int(_resolve(args.m, model_cfg.get("m"), 1))
    re_mode = _resolve(args.re_mode, model_cfg.get("mode"), "full")

    ds = io.read_dataset(Path(data))
    spec = ModelSpec(n_latent=q, ar_order=m, mode=re_mode)
    problems = validate(ds, spec)
    if problems:
        for msg in problems:
            print(f"validation: {msg}", file=sys.stderr)
        return 1
    hyper = _hyper_from_cfg(cfg, ds.n_channels, q, m)
    sched = _schedule_from_cfg(cfg, args)

    out.mkdir(parents=True, exist_ok=True)
    ckpt_dir = out / "checkpoint"
    resume = io.load_checkpoint(args.resume) if args.resume else None
    ckpt_cb = (lambda snap, t: io.save_checkpoint(snap, ckpt_dir)) \
        if sched.checkpoint_every else None

    try:
        output = run_chain(ds, spec, hyper, sched, seed=seed, n_threads=threads,
                           checkpoint_every=sched.checkpoint_every, checkpoint_cb=ckpt_cb,
                           resume=resume)
    except (RuntimeError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"fit failed: {exc}", file=sys.stderr)
        return 1
    io.save_output(output, out)
    criteria = {"cDIC": compute_cdic(output)}
    criteria.update(compute_dic_variants(output, ds))
    io.atomic_write_text(out / "criteria.yaml",
                         yaml.safe_dump({k: float(v) for k, v in criteria.items()}))
    io.write_run_metadata(out, seed, cfg, extra={
        "command": "fit", "threads": threads, "q": q, "m": m, "re_mode": re_mode,
        "wall_seconds": float(output.timings.get("total", 0.0)),
    })
    print(f"fit complete: {output.n_kept} kept draws, "
          f"cDIC={criteria['cDIC']:.2f}, output in {out}")
    return 0


def cmd_dic(args) -> int:
    rows = []
    for fit_dir in args.fit:
        meta = yaml.safe_load((fit_dir / "run_meta.yaml").read_text())
        crit = yaml.safe_load((fit_dir / "criteria.yaml").read_text())
        rows.append((str(fit_dir), meta.get("q"), meta.get("m"), crit))
    header = f"{'fit':<30}{'q':>4}{'m':>4}{'cDIC':>16}{'DIC1':>16}{'DIC2':>16}{'DIC3':>16}"
    print(header)
    for name, q, m, crit in rows:
        print(f"{name:<30}{q:>4}{m:>4}{crit['cDIC']:>16.2f}{crit['DIC1']:>16.2f}"
              f"{crit['DIC2']:>16.2f}{crit['DIC3']:>16.2f}")
    best = min(rows, key=lambda r: r[3]["cDIC"])
    print(f"smallest cDIC: {best[0]} (q={best[1]}, m={best[2]})")
    return 0


def cmd_summarize(args) -> int:
    output = io.load_output(args.fit)
    out = args.out or args.fit
    out.mkdir(parents=True, exist_ok=True)
    table = summarize(output)
    table.to_csv(out / "posterior_summary.tsv", sep="\t", index=False)
    draws_long_table(output).to_csv(out / "draws_long.tsv", sep="\t", index=False)
    if args.contrast:
        contrast = group_contrast(output, args.contrast)
        contrast.to_csv(out / "group_contrast.tsv", sep="\t", index=False)
        flagged = contrast[contrast["excludes_zero"]]
        print(f"contrast entries excluding zero: {len(flagged)}/{len(contrast)}")
    print(table.head(10).to_string(index=False))
    print(f"summary tables written to {out}")
    return 0


def cmd_connectivity(args) -> int:
    output = io.load_output(args.fit)
    out = args.out or args.fit
    out.mkdir(parents=True, exist_ok=True)
    cs = connectivity_set(output)
    for level in ("segment", "subject", "group"):
        write_tensor(out / f"connectivity_{level}.rssm", cs[level])
    h = args.lag - 1
    if not 0 <= h < output.ar_order:
        print(f"error: --lag must be in 1..{output.ar_order}", file=sys.stderr)
        return 2
    frames = []
    for r in range(cs["group"].shape[0]):
        edges = connectivity_edges(cs["group"][r, h], threshold=args.threshold)
        edges.insert(0, "group", r)
        frames.append(edges)
    import pandas as pd
    edge_table = pd.concat(frames, ignore_index=True)
    edge_table.to_csv(out / "connectivity_edges.tsv", sep="\t", index=False)
    print(f"{len(edge_table)} edges above |{args.threshold}| written to {out}")
    return 0


def cmd_bench(args) -> int:
    cfg = _load_cfg(args.config)
    if "experiment" not in cfg:
        print("error: bench requires a config file with an 'experiment' entry",
              file=sys.stderr)
        return 2
    kind = cfg["experiment"]
    seed = int(_resolve(args.seed, cfg.get("seed"), 0))
    threads = int(_resolve(args.threads, cfg.get("threads"), _default_threads()))
    workers = int(cfg.get("workers", 1))
    n_rep = int(cfg.get("n_rep", 1))
    out = Path(_resolve(args.out, cfg.get("out"), "bench_out"))
    scenario = bench.scenario_from_config(cfg["scenario"])

    class _Args:
        iters = burnin = thin = init_iters = rho0 = None
        checkpoint_every = 0
        scale = cfg.get("scale", 1.0)

    sched = _schedule_from_cfg(cfg, _Args())
    model_cfg = cfg.get("model", {})
    q = int(model_cfg.get("q", scenario.n_latent))
    m = int(model_cfg.get("m", scenario.ar_order))
    spec = ModelSpec(n_latent=q, ar_order=m, mode=model_cfg.get("mode", "full"))
    hyper = _hyper_from_cfg(cfg, scenario.n_channels, q, m)

    if kind == "coverage":
        report = bench.run_coverage_experiment(scenario, spec, hyper, sched, n_rep,
                                               seed=seed, n_workers=workers,
                                               n_threads=threads)
    elif kind == "sign":
        report = bench.run_sign_experiment(scenario, spec, hyper, sched, n_rep,
                                           seed=seed, n_workers=workers, n_threads=threads)
    elif kind == "dic":
        dic_cfg = cfg.get("dic", {})
        report = bench.run_dic_experiment(
            scenario, tuple(dic_cfg.get("q_grid", (2, 3, 4))),
            tuple(dic_cfg.get("m_grid", (1, 2))), sched, n_rep, seed=seed,
            n_workers=workers, n_threads=threads)
    elif kind == "restricted":
        report = bench.run_restricted_experiment(scenario, sched, n_rep, seed=seed,
                                                 n_workers=workers, n_threads=threads)
    elif kind == "perf":
        report = bench.run_perf_experiment(scenario, seed=seed, n_threads=threads,
                                           n_measure=int(cfg.get("n_measure", 3)))
    else:
        print(f"error: unknown experiment {kind!r}", file=sys.stderr)
        return 2
    out.mkdir(parents=True, exist_ok=True)
    io.atomic_write_text(out / "report.yaml", yaml.safe_dump(report, sort_keys=False))
    io.write_run_metadata(out, seed, cfg, extra={"command": f"bench/{kind}"})
    print(yaml.safe_dump(report, sort_keys=False))
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {
        "simulate": cmd_simulate,
        "fit": cmd_fit,
        "dic": cmd_dic,
        "summarize": cmd_summarize,
        "connectivity": cmd_connectivity,
        "bench": cmd_bench,
    }
    return handlers[args.mode](args)


if __name__ == "__main__":
    sys.exit(main())
