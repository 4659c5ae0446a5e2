"""Command-line entry point: ``bikvil <command> [options]``.

Exit codes: 0 success, 1 I/O or schema problem, 2 usage error, 3 the
controller did not converge.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .bikac import StepLog, point_cloud_frames, reproduce
from .config import PipelineConfig, dump_toml, load_config
from .errors import BikvilError
from .evaluation import aggregate, format_table, score_graph
from .hmsr import HmsrGraph
from .pipeline import extract
from .scene import SimScene
from .synthgen import TASKS, ScenarioConfig, generate, generate_novel_scene, load_ground_truth, save_scenario
from .trajdata import load_demonstration_set

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_NOT_CONVERGED = 0, 1, 2, 3

log = logging.getLogger("bikvil")


class UsageError(Exception):
    pass


def _write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, allow_nan=False)


def _meta(cfg: PipelineConfig, args, **extra) -> dict:
    return {"config": cfg.to_dict(), "seed": args.seed, **extra}


def _read_json(path) -> dict:
    return json.loads(Path(path).read_text())


# ----------------------------------------------------------------------------
# Commands


def cmd_generate(args, cfg: PipelineConfig) -> int:
    if args.demos < 2:
        raise UsageError("--demos must be >= 2")
    seed = 0 if args.seed is None else args.seed
    scen = ScenarioConfig(args.task, n_demos=args.demos, seed=seed, noise_sigma=args.noise,
                          pose_jitter=args.pose_jitter, start_lift=args.start_lift)
    dset, truth = generate(scen)
    out = Path(args.out)
    save_scenario(dset, truth, out)
    scene = generate_novel_scene(scen, seed=seed + 1000)
    _write_atomic(out / "scene.json", _dump(scene.to_json()))
    _write_atomic(out / "generate.json", _dump(_meta(cfg, args, scenario=asdict(scen))))
    print(f"wrote {len(dset.demos)} demonstrations of '{args.task}' to {out}")
    return EXIT_OK


def _report_text(graph: HmsrGraph, report: dict) -> str:
    lines = [f"task: {graph.meta.get('task')}  demos: {graph.meta.get('n_demos')}", "", "edges:"]
    for e in graph.edges:
        kinds = ", ".join(c.kind.value for c in e.constraints) or "-"
        lines.append(f"  {e.master:>14} -> {e.slave:<14} {kinds}")
    if graph.coordination is not None:
        lines += ["", f"coordination: {graph.coordination.value}", f"  evidence: {graph.coordination.evidence}"]
    labels = report["saliency"]["objects"]
    lines += ["", f"static: {sorted(k for k, v in labels.items() if v['label'] == 'static')}",
              f"moving: {sorted(k for k, v in labels.items() if v['label'] == 'moving')}",
              f"grasps: {report['grasps']['grasped']}"]
    return "\n".join(lines) + "\n"


def cmd_extract(args, cfg: PipelineConfig) -> int:
    dset = load_demonstration_set(args.input)
    result = extract(dset, cfg.preprocess, cfg.saliency, cfg.grasp, cfg.geomcon, cfg.hmsr,
                     meta=_meta(cfg, args))
    out = Path(args.out)
    _write_atomic(out, _dump(result.graph.to_json()))
    report_path = Path(args.report) if args.report else out.with_suffix(".report.json")
    _write_atomic(report_path, _dump({**result.report, "meta": _meta(cfg, args)}))
    text = _report_text(result.graph, result.report)
    _write_atomic(report_path.with_suffix(".txt"), text)
    print(text, end="")
    return EXIT_OK


def cmd_reproduce(args, cfg: PipelineConfig) -> int:
    graph = HmsrGraph.from_json(_read_json(args.graph))
    scene = SimScene.load(args.scene)
    params = cfg.bikac if args.seed is None else replace(cfg.bikac, seed=args.seed)
    steplog, _, _ = reproduce(graph, scene, params, horizon=args.horizon)
    steplog.verdict["meta"] = _meta(replace(cfg, bikac=params), args)
    _write_atomic(Path(args.out), json.dumps(steplog.to_json(), allow_nan=False))
    v = steplog.verdict
    print(f"converged: {v['converged']}  steps: {v['steps']}  time: {v['time_to_converge']}")
    for label, c in sorted(v["constraints"].items()):
        mark = "ok " if c["success"] else "no "
        extra = f"  angle {np.degrees(c['final_angle']):.2f} deg" if "final_angle" in c else ""
        print(f"  {mark}{label:<32} {c['final_residual'] * 1000:8.2f} mm{extra}")
    return EXIT_OK if v["converged"] else EXIT_NOT_CONVERGED


def cmd_evaluate(args, cfg: PipelineConfig) -> int:
    if len(args.truth) not in (1, len(args.graph)):
        raise UsageError("give one --truth or one per --graph")
    truths = args.truth * len(args.graph) if len(args.truth) == 1 else args.truth
    rows = []
    for g, t in zip(args.graph, truths):
        rows.append((str(g), score_graph(HmsrGraph.from_json(_read_json(g)), load_ground_truth(t))))
    payload = {
        "items": [{"graph": name, **s.to_json()} for name, s in rows],
        "aggregate": aggregate([s for _, s in rows]),
        "meta": _meta(cfg, args),
    }
    if args.json:
        _write_atomic(Path(args.json), _dump(payload))
    print(format_table(rows))
    print(_dump(payload["aggregate"]))
    return EXIT_OK


def cmd_export_scene(args, cfg: PipelineConfig) -> int:
    if args.stride < 1:
        raise UsageError("--stride must be >= 1")
    scene = SimScene.load(args.scene)
    steplog = StepLog.load(args.log) if args.log else StepLog()
    clouds = point_cloud_frames(scene, steplog, args.stride)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(out, **clouds)
    print(f"wrote {len(clouds)} bodies x {next(iter(clouds.values())).shape[0]} frames to {out}")
    return EXIT_OK


# ----------------------------------------------------------------------------
# Parser


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # the subcommand copies must not reset values given before the command
    def default(value):
        return argparse.SUPPRESS if suppress else value

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=default(None), help="TOML config file (default: $BIKVIL_CONFIG)")
    common.add_argument("--seed", type=int, default=default(None), help="master random seed")
    common.add_argument("--verbose", "-v", action="store_true", default=default(False))
    common.add_argument("--set", dest="overrides", action="append", default=default([]), metavar="TABLE.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--print-config", action="store_true", default=default(False),
                        help="print the effective config as TOML")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(suppress=True)
    p = argparse.ArgumentParser(prog="bikvil", description=__doc__.splitlines()[0],
                                parents=[_global_flags(suppress=False)])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="render a synthetic demonstration set")
    g.add_argument("--task", required=True, choices=TASKS)
    g.add_argument("--demos", type=int, default=7)
    g.add_argument("--out", required=True)
    g.add_argument("--noise", type=float, default=0.001, help="point noise sigma (m)")
    g.add_argument("--pose-jitter", type=float, default=0.05, help="start pose jitter (m)")
    g.add_argument("--start-lift", type=float, default=0.0, help="master start height variation (m)")
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("extract", parents=[common], help="learn an HMSR graph from demonstrations")
    e.add_argument("--in", dest="input", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--report", help="analysis report path (JSON; a .txt summary is written alongside)")
    e.set_defaults(func=cmd_extract)

    r = sub.add_parser("reproduce", parents=[common], help="run the controller on a scene")
    r.add_argument("--graph", required=True)
    r.add_argument("--scene", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--horizon", type=float, default=20.0, help="seconds")
    r.set_defaults(func=cmd_reproduce)

    v = sub.add_parser("evaluate", parents=[common], help="score graphs against ground truth")
    v.add_argument("--graph", required=True, nargs="+")
    v.add_argument("--truth", required=True, nargs="+")
    v.add_argument("--json", help="write the JSON report here")
    v.set_defaults(func=cmd_evaluate)

    x = sub.add_parser("export-scene", parents=[common], help="per-step point clouds as .npz")
    x.add_argument("--scene", required=True)
    x.add_argument("--log", help="StepLog from reproduce (omit for the start state only)")
    x.add_argument("--out", required=True)
    x.add_argument("--stride", type=int, default=1)
    x.set_defaults(func=cmd_export_scene)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        if args.print_config:
            print(dump_toml(cfg))
        return args.func(args, cfg)
    except UsageError as exc:
        parser.error(str(exc))
    except BikvilError as exc:
        print(f"error: {exc.tagged()}", file=sys.stderr)
        return EXIT_IO
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        print(f"error: [cli] {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
