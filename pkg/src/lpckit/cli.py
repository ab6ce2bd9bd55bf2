"""Command line entry points.

Subcommands: fit, design, run, campaign, compare, sweep-nu, persist. All
outputs are batch artifacts (CSV traces and JSON summaries) under --out.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .harness import (
    DesignBundle,
    ExperimentConfig,
    campaign,
    nu_sweep,
    offline_design,
    persistent_learning_campaign,
    run_episode,
    write_metrics_json,
    write_trace_csv,
)
from .koopman import collect_snapshots, fit_model, model_residuals
from .plants import get_plant


def _build_config(args) -> ExperimentConfig:
    overrides = {}
    if args.config:
        with open(args.config) as fh:
            overrides = json.load(fh)
    if args.plant:
        overrides["plant"] = args.plant
    if getattr(args, "controller", None):
        overrides["controller"] = args.controller
    if getattr(args, "seeds", None):
        overrides["seeds"] = [int(s) for s in args.seeds.split(",")]
    if args.paper_scale:
        overrides["paper_scale"] = True
    overrides.setdefault("plant", "vdp")
    return ExperimentConfig.from_dict(overrides)


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _design(cfg: ExperimentConfig, out: Path) -> DesignBundle:
    cache = out / f"design_{cfg.plant}.json"
    if cache.exists():
        with open(cache) as fh:
            return DesignBundle.from_dict(json.load(fh))
    bundle = offline_design(cfg, np.random.default_rng(0))
    with open(cache, "w") as fh:
        json.dump(bundle.to_dict(), fh)
    return bundle


def cmd_fit(args) -> int:
    cfg = _build_config(args)
    out = _outdir(args)
    from .harness import _dictionary_for, _split

    spec = get_plant(cfg.plant)
    data = collect_snapshots(spec, cfg.M, np.random.default_rng(args.seed))
    train, val = _split(data, cfg.val_fraction)
    model = fit_model(
        train, _dictionary_for(cfg, spec), cfg.theta,
        fit_disturbance=spec.disturbance_bound > 0,
    )
    w_res, v_res = model_residuals(model, val)
    report = {
        "plant": cfg.plant,
        "snapshots": data.count,
        "lifted_dim": model.dictionary.lifted_dim,
        "max_process_residual": float(np.abs(w_res).max()),
        "max_output_residual": float(np.abs(v_res).max()),
        "rms_process_residual": float(np.sqrt(np.mean(w_res**2))),
    }
    write_metrics_json(report, out / f"fit_{cfg.plant}.json")
    print(json.dumps(report, indent=2))
    return 0


def cmd_design(args) -> int:
    cfg = _build_config(args)
    out = _outdir(args)
    cache = out / f"design_{cfg.plant}.json"
    if cache.exists():
        cache.unlink()
    bundle = _design(cfg, out)
    rep = bundle.report
    print(
        f"design written to {cache} "
        f"(validation risk {rep.empirical_risk:.4f} + eps {rep.epsilon:.4f}, "
        f"{'pass' if rep.passed else 'FAIL'})"
    )
    return 0


def cmd_run(args) -> int:
    cfg = _build_config(args)
    out = _outdir(args)
    bundle = _design(cfg, out)
    trace = run_episode(bundle, cfg, np.asarray(cfg.x0, float), args.seed)
    path = out / f"trace_{args.seed}.csv"
    write_trace_csv(trace, path)
    j, jx, ju = trace.sums(
        np.eye(len(cfg.x0)) if cfg.Q is None else np.atleast_2d(cfg.Q),
        np.atleast_2d(cfg.R),
    )
    print(
        f"{cfg.controller} seed {args.seed}: status={trace.status} "
        f"J={j:.4f} Jx={jx:.4f} Ju={ju:.4f} -> {path}"
    )
    return 0


def cmd_campaign(args) -> int:
    cfg = _build_config(args)
    out = _outdir(args)
    bundle = _design(cfg, out)
    traces, mets = campaign(bundle, cfg)
    for t in traces:
        write_trace_csv(t, out / f"trace_{t.seed}.csv")
    write_metrics_json(mets, out / "metrics.json")
    print(json.dumps(mets, indent=2))
    return 0


def cmd_compare(args) -> int:
    cfg = _build_config(args)
    out = _outdir(args)
    bundle = _design(cfg, out)
    table = {}
    for ctrl in ("drlpc", "drmpc", "dhp-baseline"):
        _, table[ctrl] = campaign(bundle, cfg, ctrl)
    ratio = table["drmpc"]["mean_step_time"] / max(
        table["drlpc"]["mean_step_time"], 1e-12
    )
    table["step_time_ratio"] = ratio
    write_metrics_json(table, out / "compare.json")
    hdr = f"{'controller':14s} {'Jx':>10s} {'Ju':>10s} {'success':>8s} {'ms/step':>8s}"
    print(hdr)
    for ctrl in ("drlpc", "drmpc", "dhp-baseline"):
        m = table[ctrl]
        print(
            f"{ctrl:14s} {m['Jx']:10.4f} {m['Ju']:10.4f} "
            f"{m['success_rate']:8.2f} {m['mean_step_time'] * 1e3:8.3f}"
        )
    print(f"per-step speedup drmpc/drlpc: {ratio:.1f}x")
    return 0


def cmd_sweep_nu(args) -> int:
    cfg = _build_config(args)
    out = _outdir(args)
    bundle = _design(cfg, out)
    nus = [float(v) for v in args.nu_values.split(",")]
    rows = nu_sweep(bundle, cfg, nus)
    write_metrics_json({"rows": rows}, out / "nu_sweep.json")
    for r in rows:
        print(f"nu={r['nu']:g}: J={r['J']:.4f} Jx={r['Jx']:.4f}")
    return 0


def cmd_persist(args) -> int:
    cfg = _build_config(args)
    out = _outdir(args)
    bundle = _design(cfg, out)
    rows = persistent_learning_campaign(bundle, cfg)
    write_metrics_json({"rows": rows}, out / "persist.json")
    for r in rows:
        print(
            f"run {r['run']}: J={r['J']:.4f} Jx={r['Jx']:.4f} "
            f"Ju={r['Ju']:.4f} success={r['success_rate']:.2f}"
        )
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="lpckit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, controller=True):
        p.add_argument("--plant", choices=["vdp", "pendulum", "linear-test"])
        if controller:
            p.add_argument(
                "--controller", choices=["drlpc", "drmpc", "dhp-baseline"]
            )
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--seeds", help="comma-separated seed list")
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", default="out")
        p.add_argument("--paper-scale", action="store_true")

    p = sub.add_parser("fit", help="fit the lifted model and report residuals")
    common(p, controller=False)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("design", help="run the offline design pipeline")
    common(p, controller=False)
    p.set_defaults(func=cmd_design)

    p = sub.add_parser("run", help="single closed-loop episode")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("campaign", help="multi-seed campaign")
    common(p)
    p.set_defaults(func=cmd_campaign)

    p = sub.add_parser("compare", help="all three controllers side by side")
    common(p, controller=False)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sweep-nu", help="time-scaling sweep")
    common(p, controller=False)
    p.add_argument("--nu-values", default="0.01,0.1,1")
    p.set_defaults(func=cmd_sweep_nu)

    p = sub.add_parser("persist", help="multi-run persistent learning")
    common(p, controller=False)
    p.set_defaults(func=cmd_persist)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
