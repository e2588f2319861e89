"""Command-line entry point.

Subcommands:

* ``gen-data`` — sample the constraint manifold into a dataset file.
* ``train`` — fit the decoder on a dataset, write a parameter file.
* ``run`` — simulate one episode from a scenario file.
* ``bench`` — the benchmark suites (hard-constraint, static-obstacle,
  dynamic-obstacle).
* ``plots`` — turn an episode log into CSV plot data.

Exit codes: 0 on success, 1 when the simulated episode (or suite) fails
its success criterion, 2 on usage errors. The default output directory
comes from $MCMPPI_OUT_DIR (falling back to the working directory).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np


def _out_dir(args) -> Path:
    base = args.out or os.environ.get("MCMPPI_OUT_DIR") or "."
    p = Path(base)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mcmppi",
        description="Latent-space sampling MPC for closed kinematic chains.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="sample the constraint manifold")
    p.add_argument("--model", default="planar_dual_3r")
    p.add_argument("--count", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="output directory")

    p = sub.add_parser("train", help="train the decoder on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", default="planar_dual_3r")
    p.add_argument("--epochs", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)

    p = sub.add_parser("run", help="simulate one episode")
    p.add_argument("--scenario", required=True)
    p.add_argument("--mode", default="mc_mppi",
                   choices=("mc_mppi", "latent_only", "vanilla_penalty"))
    p.add_argument("--decoder", default="analytic", choices=("analytic", "learned"))
    p.add_argument("--params", default=None, help="decoder parameter file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", default=None)

    p = sub.add_parser("bench", help="run a benchmark suite")
    p.add_argument("suite",
                   choices=("hard-constraint", "static-obstacle", "dynamic-obstacle"))
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--decoder", default="analytic", choices=("analytic", "learned"))
    p.add_argument("--params", default=None)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", default=None)

    p = sub.add_parser("plots", help="episode log -> CSV plot data")
    p.add_argument("--log", required=True)
    p.add_argument("--out", default=None)
    return parser


def _load_decoder(args):
    from .codec import VaeDecoder, load_params

    if args.decoder == "analytic":
        return None
    if not args.params:
        raise SystemExit("--decoder learned requires --params <file>")
    return VaeDecoder(load_params(args.params))


def _cmd_gen_data(args) -> int:
    from .codec import generate_dataset, save_dataset
    from .kinematics import load_model

    model = load_model(args.model)
    ds = generate_dataset(model, args.count, args.seed)
    path = _out_dir(args) / f"{args.model}_{args.count}_{args.seed}.dataset"
    save_dataset(ds, path)
    print(f"wrote {path} ({ds.count} configurations)")
    return 0


def _cmd_train(args) -> int:
    from .codec import load_dataset, save_params, train_vae
    from .kinematics import load_model

    model = load_model(args.model)
    ds = load_dataset(args.dataset)
    params = train_vae(ds, model, epochs=args.epochs, seed=args.seed)
    path = _out_dir(args) / f"{args.model}_e{args.epochs}_s{args.seed}.params"
    save_params(params, path)
    print(
        f"wrote {path} (recon {params.final_recon:.3e}, "
        f"kl {params.final_kl:.3f}, bound {params.recon_bound:.3e})"
    )
    return 0


def _scenario_spec(args):
    from .scenario import load_scenario

    try:
        spec = load_scenario(args.scenario)
    except FileNotFoundError as exc:
        raise SystemExit(f"scenario not found: {exc}")
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    if args.threads != 1:
        spec = replace(spec, planner=replace(spec.planner, threads=args.threads))
    return spec


def _cmd_run(args) -> int:
    from .harness import run_episode

    spec = _scenario_spec(args)
    decoder = _load_decoder(args)
    choice = args.decoder
    log = run_episode(spec, args.mode, choice, decoder)
    path = _out_dir(args) / f"{spec.name}_{args.mode}_{spec.seed}.jsonl"
    log.save_jsonl(path)
    status = log.outcome["status"]
    print(
        f"{status} at t={log.outcome['t']:.3f}s  "
        f"avg |h|={log.time_avg_h():.3e}  max |h|={log.max_h():.3e}  -> {path}"
    )
    return 0 if status == "success" else 1


def _deterministic_summary(summary: dict) -> dict:
    """Strip wall-clock-derived fields so reports are byte-stable."""
    out = {}
    for mode, stats in summary.items():
        out[mode] = {k: v for k, v in stats.items() if not k.startswith("plan_ms")}
    return out


def _cmd_bench(args) -> int:
    from .harness import compare_sampling_modes, run_experiment
    from .scenario import load_scenario

    decoder = _load_decoder(args)
    out = _out_dir(args)
    if args.suite == "static-obstacle":
        spec = load_scenario("cluttered")
        if args.threads != 1:
            spec = replace(spec, planner=replace(spec.planner, threads=args.threads))
        seeds = range(args.seed, args.seed + args.trials)
        result = compare_sampling_modes(spec, seeds, decoder, args.decoder, log_every=10)
        path = out / f"bench_static_obstacle_{args.seed}.json"
        with open(path, "w") as f:
            json.dump(result, f, indent=2, sort_keys=True)
        print(f"median convergence-time ratio per_step/single_instance: "
              f"{result['median_time_ratio']:.2f} -> {path}")
        ok = all(r["status"] == "success" for r in result["single_instance"])
        return 0 if ok else 1

    name = "hard_constraint" if args.suite == "hard-constraint" else "dynamic"
    spec = load_scenario(name)
    if args.threads != 1:
        spec = replace(spec, planner=replace(spec.planner, threads=args.threads))
    modes = (
        ("mc_mppi", "latent_only", "vanilla_penalty")
        if args.suite == "hard-constraint"
        else ("mc_mppi",)
    )
    report = run_experiment(
        spec, modes, args.trials, args.seed, decoder, args.decoder, log_every=10
    )
    payload = {
        "scenario": report.scenario,
        "trials": report.trials,
        "seed_base": report.seed_base,
        "modes": list(report.modes),
        "summary": _deterministic_summary(report.summary),
        "outcomes": {
            mode: [lg.outcome for lg in logs] for mode, logs in report.logs.items()
        },
    }
    path = out / f"bench_{name}_{args.seed}.json"
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
    timing = {
        mode: {k: v for k, v in stats.items() if k.startswith("plan_ms")}
        for mode, stats in report.summary.items()
    }
    with open(out / f"bench_{name}_{args.seed}_timing.json", "w") as f:
        json.dump(timing, f, indent=2, sort_keys=True)
    rate = report.summary["mc_mppi"]["success_rate"]
    print(f"mc_mppi success rate {rate:.0%} over {args.trials} trials -> {path}")
    return 0 if rate == 1.0 else 1


def _cmd_plots(args) -> int:
    from .harness import EpisodeLog, emit_plots

    if not Path(args.log).exists():
        raise SystemExit(f"log not found: {args.log}")
    log = EpisodeLog.load_jsonl(args.log)
    paths = emit_plots(log, _out_dir(args))
    for p in paths:
        print(f"wrote {p}")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "run": _cmd_run,
    "bench": _cmd_bench,
    "plots": _cmd_plots,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return _COMMANDS[args.command](args)
    except SystemExit as exc:
        if isinstance(exc.code, str):
            print(exc.code, file=sys.stderr)
            return 2
        return 2 if exc.code not in (0, None) else 0


if __name__ == "__main__":
    sys.exit(main())
