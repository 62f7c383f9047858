"""Command-line entry point: ``mtlight <command> ...``.

Outputs land under ``$MTLIGHT_OUTPUT_ROOT`` (default ``./runs``) unless an
explicit ``--out`` is given. Failures exit nonzero and print a JSON error
object on stderr.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import export
from .harness import (ABLATION_ORDER, CLASSICAL, ExperimentConfig, ScenarioConfig, comparison_table, config_hash,
                      ablation_suite, run_training, save_controller, simulate, summarize, train_seed,
                      build_scenario, phase_and_turning_stats)
from .baselines import CONTROLLERS
from .scenario import (LaneParams, ScenarioError, gen_grid, gen_synthetic_peak, grid_routes, save_flow,
                       save_roadnet, uniform_flow)

OUTPUT_ROOT_ENV = "MTLIGHT_OUTPUT_ROOT"


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def _out_dir(args, default_name: str) -> Path:
    return Path(args.out) if args.out else output_root() / default_name


def parse_grid(text: str) -> tuple[int, int]:
    try:
        r, c = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like 4x4, got {text!r}")
    if r < 1 or c < 1:
        raise argparse.ArgumentTypeError("grid dimensions must be >= 1")
    return r, c


def parse_seeds(text: str) -> list[int]:
    return [int(s) for s in text.split(",") if s.strip()]


def _scenario_from_args(args) -> ScenarioConfig:
    if getattr(args, "scenario", None):
        d = Path(args.scenario)
        for f in ("roadnet.json", "flow.json"):
            if not (d / f).exists():
                raise FileNotFoundError(f"scenario directory {d} has no {f}")
        return ScenarioConfig(grid=None, roadnet_path=str(d / "roadnet.json"), flow=str(d / "flow.json"),
                              horizon=args.horizon)
    return ScenarioConfig(grid=args.grid, flow=args.flow.replace("-", "_"), rate=args.rate, horizon=args.horizon)


def _add_scenario_args(p):
    p.add_argument("--scenario", help="directory holding roadnet.json and flow.json (from gen-scenario)")
    p.add_argument("--grid", type=parse_grid, default=(4, 4), help="generated grid, e.g. 4x4")
    p.add_argument("--flow", choices=["synthetic-peak", "uniform"], default="synthetic-peak")
    p.add_argument("--rate", type=float, default=1.0, help="arrivals per second for --flow uniform")
    p.add_argument("--horizon", type=int, default=3600)


def cmd_gen_scenario(args) -> dict:
    out = _out_dir(args, f"scenario_{args.grid[0]}x{args.grid[1]}")
    out.mkdir(parents=True, exist_ok=True)
    spec = gen_grid(*args.grid, LaneParams(args.lane_length, args.lane_capacity))
    routes = grid_routes(spec)
    if args.flow == "synthetic-peak":
        flow = gen_synthetic_peak(args.horizon, routes, seed=args.seed, mode=args.mode)
    else:
        flow = uniform_flow(args.rate, args.horizon, routes, seed=args.seed, mode=args.mode)
    save_roadnet(spec, out / "roadnet.json")
    save_flow(flow, out / "flow.json")
    return {"out": str(out), "intersections": len(spec.intersections), "lanes": len(spec.lanes),
            "routes": len(routes), "expected_vehicles": float(sum(flow.expected_totals()))}


def cmd_simulate(args) -> dict:
    cfg = ExperimentConfig(scenario=_scenario_from_args(args), controller=args.controller, episodes=1,
                           seeds=args.seeds)
    cfg.train.horizon = args.horizon
    records = [simulate(cfg, seed=s, checkpoint=args.checkpoint) for s in args.seeds]
    out = _out_dir(args, f"simulate_{args.controller}")
    files = export.write_csvs(records, out)
    stats = phase_and_turning_stats(records[0].phase_counts, records[0].turning)
    return {"controller": args.controller, "out": str(out),
            "avg_travel_time": [r.avg_travel_time for r in records],
            "mean_avg_travel_time": float(np.mean([r.avg_travel_time for r in records])),
            "network_phase_percent": [round(float(v), 2) for v in stats["network_phase_percent"]],
            "files": sorted(str(p) for p in files.values())}


def load_config(path) -> ExperimentConfig:
    doc = json.loads(Path(path).read_text())
    return ExperimentConfig.from_dict(doc)


def cmd_train(args) -> dict:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.episodes is not None:
        cfg.episodes = args.episodes
    if args.seeds is not None:
        cfg.seeds = args.seeds
    if args.controller is not None:
        cfg = cfg.replace(controller=args.controller)
    if cfg.controller in CLASSICAL:
        raise ValueError(f"{cfg.controller} does not train; use simulate")
    out = Path(args.out or cfg.out_dir or output_root() / f"train_{cfg.controller}")
    out.mkdir(parents=True, exist_ok=True)
    scenario = build_scenario(cfg.scenario)
    records = []
    for seed in cfg.seeds:
        recs, ctrl = train_seed(cfg, seed, scenario, return_controller=True)
        records += recs
        save_controller(ctrl, out / f"checkpoint_seed{seed}.npz")
        if ctrl.mt is not None:
            ctrl.mt.write_loss_csv(out / f"multitask_loss_seed{seed}.csv")
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    export.export_run(records, out, cfg.to_dict(), config_hash(cfg), cfg.seeds)
    summ = summarize(records)
    return {"controller": cfg.controller, "out": str(out), "final_att": summ["final"], "best_att": summ["best"]}


def cmd_ablate(args) -> dict:
    base = load_config(args.config) if args.config else ExperimentConfig()
    cfg = ExperimentConfig.from_dict({**base.to_dict(), "scenario": vars(_scenario_from_args(args))})
    if args.episodes is not None:
        cfg.episodes = args.episodes
    if args.seeds is not None:
        cfg.seeds = args.seeds
    out = _out_dir(args, "ablation")
    result = ablation_suite(cfg, variants=args.variants, jobs=args.jobs)
    records = [r for v in args.variants for r in result["records"][v]]
    export.export_run(records, out, cfg.to_dict(), config_hash(cfg), cfg.seeds)
    table = comparison_table(result["rows"])
    (out / "table.txt").write_text(table + "\n")
    print(table, file=sys.stderr)
    return {"out": str(out), "rows": [{"method": v, "final": s["final"], "best": s["best"]}
                                      for v, s in result["rows"]]}


def report_rows(rows) -> list[dict]:
    """Per controller: mean over seeds of final-episode and best-episode ATT."""
    out = []
    for ctrl in sorted({r["controller"] for r in rows}):
        per_seed = {}
        for r in rows:
            if r["controller"] == ctrl:
                per_seed.setdefault(r["seed"], []).append(r)
        finals = [max(rs, key=lambda r: r["episode"])["avg_travel_time"] for rs in per_seed.values()]
        bests = [min(r["avg_travel_time"] for r in rs) for rs in per_seed.values()]
        out.append({"method": ctrl, "seeds": len(per_seed), "final": float(np.mean(finals)),
                    "best": float(np.mean(bests))})
    return out


def cmd_report(args) -> dict:
    run = Path(args.run_dir)
    path = run / "episodes.csv"
    if not path.exists():
        raise FileNotFoundError(f"{run} has no episodes.csv")
    rows = export.read_episodes(path)
    summary = report_rows(rows)
    export.plot_convergence(export.convergence_series(rows), run / "convergence.svg")
    lines = [f"{'method':<14}{'seeds':>6}{'final ATT':>12}{'best ATT':>12}"]
    lines += [f"{s['method']:<14}{s['seeds']:>6}{s['final']:>12.2f}{s['best']:>12.2f}" for s in summary]
    print("\n".join(lines), file=sys.stderr)
    return {"run_dir": str(run), "summary": summary}


class _JsonErrorParser(argparse.ArgumentParser):
    """Usage errors are reported in the same JSON shape as runtime failures."""

    def error(self, message):
        print(json.dumps({"error": "UsageError", "message": message, "command": self.prog}), file=sys.stderr)
        sys.exit(2)


def build_parser() -> argparse.ArgumentParser:
    p = _JsonErrorParser(prog="mtlight", description="Traffic signal control lab")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_JsonErrorParser)

    g = sub.add_parser("gen-scenario", help="write a grid roadnet and flow schedule")
    g.add_argument("--grid", type=parse_grid, default=(4, 4))
    g.add_argument("--flow", choices=["synthetic-peak", "uniform"], default="synthetic-peak")
    g.add_argument("--rate", type=float, default=1.0)
    g.add_argument("--horizon", type=int, default=3600)
    g.add_argument("--mode", choices=["quota", "poisson"], default="quota")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--lane-length", type=float, default=300.0)
    g.add_argument("--lane-capacity", type=int, default=40)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen_scenario)

    s = sub.add_parser("simulate", help="evaluate one controller for one episode per seed")
    s.add_argument("--controller", choices=CONTROLLERS, required=True)
    _add_scenario_args(s)
    s.add_argument("--seeds", type=parse_seeds, default=[0])
    s.add_argument("--checkpoint", help="npz written by train (learned controllers)")
    s.add_argument("--out")
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="train a learned controller")
    t.add_argument("--config", help="ExperimentConfig JSON")
    t.add_argument("--controller", choices=CONTROLLERS)
    t.add_argument("--episodes", type=int)
    t.add_argument("--seeds", type=parse_seeds)
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("ablate", help="train the ablation ladder under shared seeds")
    _add_scenario_args(a)
    a.add_argument("--config", help="ExperimentConfig JSON for training settings")
    a.add_argument("--variants", nargs="+", choices=ABLATION_ORDER, default=list(ABLATION_ORDER))
    a.add_argument("--episodes", type=int)
    a.add_argument("--seeds", type=parse_seeds)
    a.add_argument("--jobs", type=int, default=1)
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("report", help="summarise a run directory and redraw its chart")
    r.add_argument("--run-dir", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = args.func(args)
    except Exception as e:  # reported as JSON for callers
        err = {"error": type(e).__name__, "message": str(e), "command": args.command}
        if isinstance(e, ScenarioError):
            err.update({"field": e.field, "line": e.line})
        print(json.dumps(err), file=sys.stderr)
        return 1
    print(json.dumps(result, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
