"""Command-line entry point: run, sweep, report."""

import argparse
import json
import sys
from pathlib import Path

from .runner import RunConfig, load_scenario, run, sweep_robots, write_sweep_csv


def parse_seed_range(text: str):
    """"a..b" inclusive, or a comma list, or a single seed."""
    if ".." in text:
        a, b = text.split("..")
        return list(range(int(a), int(b) + 1))
    if "," in text:
        return [int(x) for x in text.split(",")]
    return [int(text)]


def build_parser():
    p = argparse.ArgumentParser(prog="coopvio",
                                description="multi-robot visual-inertial "
                                            "cooperative localization toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    pr = sub.add_parser("run", help="run one estimator variant over Monte Carlo seeds")
    pr.add_argument("--config", help="run-config yaml; flags below override it")
    pr.add_argument("--scenario", help="scenario preset name or yaml file")
    pr.add_argument("--variant", help="estimator variant id")
    pr.add_argument("--seeds", help="seed range a..b or comma list", default=None)
    pr.add_argument("--out", help="output directory", default=None)
    pr.add_argument("--transport", choices=["bus", "sockets"], default=None)
    pr.add_argument("--zero-noise", action="store_true")

    ps = sub.add_parser("sweep", help="sweep an axis and emit a comparison table")
    ps.add_argument("--axis", choices=["robots", "weights", "rates"], required=True)
    ps.add_argument("--values", required=True,
                    help="robots: a..b; weights/rates: comma list of floats")
    ps.add_argument("--scenario", default="ar3")
    ps.add_argument("--variant", default="dc-cmsckf")
    ps.add_argument("--seeds", default="0")
    ps.add_argument("--out", default=None)

    pq = sub.add_parser("report", help="summarize manifests under an output directory")
    pq.add_argument("--out", required=True)
    return p


def cmd_run(args) -> int:
    if args.config:
        cfg = RunConfig.from_yaml(args.config)
    else:
        cfg = RunConfig()
    if args.scenario:
        cfg.scenario = args.scenario
    if args.variant:
        cfg.variant = args.variant
    if args.seeds:
        cfg.seeds = parse_seed_range(args.seeds)
    if args.out:
        cfg.out_dir = args.out
    if args.transport:
        cfg.transport = args.transport
    if args.zero_noise:
        cfg.zero_noise = True
    summary = run(cfg)
    print(f"variant={summary.variant}")
    print(f"average ATE: {summary.average_ate[0]:.4f} deg / {summary.average_ate[1]:.4f} m")
    print(f"mean NEES: orient {summary.mean_nees[0]:.3f}, position {summary.mean_nees[1]:.3f}")
    print(f"per-frame cost: {summary.per_frame_ms:.2f} ms")
    if summary.diverged_seeds:
        print(f"DIVERGED seeds: {summary.diverged_seeds}", file=sys.stderr)
        return 2
    return 0


def cmd_sweep(args) -> int:
    cfg = RunConfig(scenario=args.scenario, variant=args.variant,
                    seeds=parse_seed_range(args.seeds))
    if args.axis == "robots":
        counts = parse_seed_range(args.values)
        rows = sweep_robots(cfg, counts)
        for r in rows:
            print(f"n={r['robots']}: distributed {r['distributed_ms']:.2f} ms, "
                  f"centralized {r['centralized_ms']:.2f} ms")
        if args.out:
            Path(args.out).mkdir(parents=True, exist_ok=True)
            write_sweep_csv(rows, Path(args.out) / "timing_sweep.csv")
        return 0
    values = [float(x) for x in args.values.split(",")]
    scenario = load_scenario(args.scenario)
    results = []
    for v in values:
        sub = RunConfig(**cfg.to_dict())
        if args.axis == "weights":
            sub.ci_weight_other = v
        else:
            sub.miss_rate = v
        summary = run(sub, scenario=scenario)
        results.append((v, summary))
        print(f"{args.axis}={v}: ATE {summary.average_ate[1]:.4f} m, "
              f"NEES ({summary.mean_nees[0]:.2f}, {summary.mean_nees[1]:.2f})")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        import csv

        with open(Path(args.out) / f"sweep_{args.axis}.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow([args.axis, "ate_deg", "ate_m", "nees_orient", "nees_pos"])
            for v, s in results:
                w.writerow([v, f"{s.average_ate[0]:.6f}", f"{s.average_ate[1]:.6f}",
                            f"{s.mean_nees[0]:.4f}", f"{s.mean_nees[1]:.4f}"])
    return 0


def cmd_report(args) -> int:
    root = Path(args.out)
    manifests = sorted(root.glob("manifest_*.json"))
    if not manifests:
        print(f"no manifests under {root}", file=sys.stderr)
        return 1
    print(f"{'variant':>18s} {'ATE deg':>9s} {'ATE m':>9s} {'NEES or':>8s} "
          f"{'NEES pos':>9s} {'ms/frame':>9s}")
    for m in manifests:
        with open(m) as f:
            data = json.load(f)
        s = data["summary"]
        print(f"{s['variant']:>18s} {s['average_ate_deg']:9.4f} {s['average_ate_m']:9.4f} "
              f"{s['mean_nees_orient']:8.3f} {s['mean_nees_pos']:9.3f} "
              f"{s['per_frame_ms']:9.2f}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return cmd_run(args)
    if args.command == "sweep":
        return cmd_sweep(args)
    return cmd_report(args)


if __name__ == "__main__":
    sys.exit(main())
