"""Command-line entry point: ``advplan <command> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import shutil
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .adversarial import (
    LoopError,
    dump_json,
    evaluate_rmse,
    evaluate_success_rate,
    plan_queries,
    read_robot_motion,
    run_loop,
    write_robot_motion,
)
from .collision import Scene, motion_in_collision
from .experiments import (
    ConfigError,
    chain_for,
    demonstration_query,
    frozen_config,
    load_config,
    loop_config,
    prepare_demonstrations,
    scene_for,
    sphere_queries,
    toy_motion_set,
    write_demonstration_set,
)
from .kinematics import IKFailure, analytic_seeds, forward_kinematics, inverse_kinematics, state_swivel
from .motion_repr import REAL, LabeledDataset, prefix_representations
from .neuralnet import CheckpointError, Discriminator, gradient_check
from .planner import LengthObjective, PlanningError

log = logging.getLogger("advplan")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    """Bad invocation: missing inputs, refusing to overwrite, malformed arguments."""


class RuntimeFailure(Exception):
    """The command ran but could not produce its result."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _setup_logging(verbose):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        datefmt="%Y-%m-%dT%H:%M:%S%z",
        stream=sys.stderr,
        force=True,
    )


def _config(args):
    return load_config(args.config, args.preset, args.seed, args.out)


def _prepare_dir(path, force, what):
    path = Path(path)
    if path.exists() and any(path.iterdir()):
        if not force:
            raise UsageError(f"{what} {path} already exists; pass --force to overwrite")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


# --- gen-targets --------------------------------------------------------------------------

def cmd_gen_targets(args):
    cfg = _config(args)
    out = Path(cfg["out"])
    if cfg["experiment"] == "imitation":
        target = _prepare_dir(out / "demos", args.force, "demonstration directory")
        manifest = write_demonstration_set(target, cfg)
        log.info("wrote demonstration fixture %s", manifest)
        return EXIT_OK
    chain, scene = chain_for(cfg), scene_for(cfg)
    queries = sphere_queries(chain, cfg, scene)
    target = _prepare_dir(out / "targets", args.force, "target archive")
    motions = plan_queries(chain, queries, LengthObjective(), scene, cfg["budget"],
                           loop_config(cfg, queries).planner, cfg["seed"], args.jobs)
    index = []
    for qi, (q, m) in enumerate(zip(queries, motions)):
        name = None
        if m is not None:
            name = f"q{qi:04d}.csv"
            write_robot_motion(target / name, m, m.meta["report"])
        index.append({"query": q.name, "file": name})
    dump_json(target / "index.json", {"config": frozen_config(cfg), "targets": index})
    ok = sum(m is not None for m in motions)
    log.info("planned %d of %d target motions into %s", ok, len(queries), target)
    if ok == 0:
        raise RuntimeFailure("no target motion could be planned")
    return EXIT_OK


# --- loop ---------------------------------------------------------------------------------

def _sphere_inputs(cfg, chain):
    target = Path(cfg["out"]) / "targets"
    index_path = target / "index.json"
    if not index_path.exists():
        raise UsageError(f"target archive {target} is missing; run gen-targets first")
    index = json.loads(index_path.read_text(encoding="utf-8"))
    fractions = cfg["loop"]["fractions"]
    reprs = []
    for entry in index["targets"]:
        if entry["file"] is not None:
            motion, _ = read_robot_motion(target / entry["file"])
            reprs += prefix_representations(chain, motion, fractions)
    if not reprs:
        raise UsageError(f"target archive {target} holds no motions")
    scene = scene_for(cfg)
    queries = sphere_queries(chain, cfg, scene)

    def metric(motions, _eval):
        return {"success_rate": evaluate_success_rate(chain, [m for m in motions if m is not None], scene)}

    return LabeledDataset.from_reprs(reprs, REAL), queries, None, metric


def _manifest_path(cfg):
    if cfg.get("manifest"):
        return Path(cfg["manifest"])
    return Path(cfg["out"]) / "demos" / "manifest.json"


def _imitation_demos(cfg, chain):
    manifest = _manifest_path(cfg)
    if not manifest.exists():
        raise UsageError(f"demonstration manifest {manifest} is missing; run gen-targets first")
    demos = prepare_demonstrations(manifest, chain)
    pairs = {}
    for split in ("train", "test"):
        pairs[split] = [(demonstration_query(chain, d, f"{split}{i}"), d) for i, d in enumerate(demos[split])]
        dropped = sum(q is None for q, _ in pairs[split])
        if dropped:
            log.warning("%d %s demonstrations have no IK solution and are skipped", dropped, split)
        pairs[split] = [(q, d) for q, d in pairs[split] if q is not None]
        if not pairs[split]:
            raise UsageError(f"no usable {split} demonstrations in {manifest}")
    return pairs


def _imitation_inputs(cfg, chain):
    pairs = _imitation_demos(cfg, chain)
    fractions = cfg["loop"]["fractions"]
    reprs = [r for _, d in pairs["train"] for r in prefix_representations(chain, d, fractions)]
    reference = [d for _, d in pairs["test"]]

    def metric(_motions, eval_motions):
        ok = [(m, r) for m, r in zip(eval_motions, reference) if m is not None]
        elbow, hand = evaluate_rmse(chain, [m for m, _ in ok], [r for _, r in ok])
        return {"elbow_rmse": elbow, "hand_rmse": hand, "evaluated": len(ok)}

    return (LabeledDataset.from_reprs(reprs, REAL), [q for q, _ in pairs["train"]],
            [q for q, _ in pairs["test"]], metric)


def _run_json(cfg):
    frozen = frozen_config(cfg)
    out = Path(cfg["out"]).resolve()
    if frozen.get("manifest") is None and cfg["experiment"] == "imitation":
        frozen["manifest"] = "demos/manifest.json"
    elif frozen.get("manifest"):
        m = Path(frozen["manifest"]).resolve()
        frozen["manifest"] = str(m.relative_to(out)) if m.is_relative_to(out) else str(m)
    return {"advplan_version": __version__, "config": frozen}


def cmd_loop(args):
    cfg = _config(args)
    chain = chain_for(cfg)
    out = Path(cfg["out"])
    if cfg["experiment"] == "imitation":
        target_set, queries, eval_queries, metric = _imitation_inputs(cfg, chain)
    else:
        target_set, queries, eval_queries, metric = _sphere_inputs(cfg, chain)
    stale = sorted(out.glob("iter_*")) + ([out / "run.json"] if (out / "run.json").exists() else [])
    if stale:
        if not args.force:
            raise UsageError(f"run directory {out} already holds results; pass --force to overwrite")
        for p in stale:
            shutil.rmtree(p) if p.is_dir() else p.unlink()
    out.mkdir(parents=True, exist_ok=True)
    lc = loop_config(cfg, queries, eval_queries, args.jobs)
    log.info("loop: %d queries, %d real entries, %d rounds", len(queries), len(target_set), lc.iterations)
    # the obstacle is hidden from the planner; it only enters through the target motions
    result = run_loop(chain, target_set, lc, Scene(), metric, out)
    dump_json(out / "run.json", _run_json(cfg))
    for r in result.reports:
        print(json.dumps({"iteration": r.iteration, **r.metrics}, sort_keys=True))
    return EXIT_OK


# --- eval ---------------------------------------------------------------------------------

def _run_dir(args):
    run = Path(args.run) if args.run else None
    if run is None:
        run = Path(_config(args)["out"])
    if not (run / "run.json").exists():
        raise UsageError(f"{run} is not a run directory (no run.json)")
    return run, json.loads((run / "run.json").read_text(encoding="utf-8"))["config"]


def _iterations(run):
    return sorted((p for p in run.glob("iter_*") if p.is_dir()), key=lambda p: int(p.name.split("_")[1]))


def _load_motions(directory, prefix="q"):
    return [read_robot_motion(p)[0] for p in sorted((directory / "motions").glob(f"{prefix}*.csv"))]


def cmd_eval(args):
    run, cfg = _run_dir(args)
    chain = chain_for(cfg)
    rows = []
    for it in _iterations(run):
        k = int(it.name.split("_")[1])
        stored = json.loads((it / "report.json").read_text(encoding="utf-8"))
        row = {"iteration": k, "held_out_accuracy": stored["held_out_accuracy"]}
        if cfg["experiment"] == "imitation":
            row.update(stored["metrics"])
        else:
            motions = _load_motions(it)
            row["success_rate"] = evaluate_success_rate(chain, motions, scene_for(cfg)) if motions else math.nan
        Discriminator.load(it / "model.idsc")
        rows.append(row)
    if not rows:
        raise RuntimeFailure(f"{run} holds no iterations")
    for row in rows:
        print(json.dumps(row, sort_keys=True))
    return EXIT_OK


# --- export-plot --------------------------------------------------------------------------

_SVG_STYLE = (
    ".sphere{fill:#ddd;stroke:#555;stroke-width:1}"
    ".arm{fill:none;stroke:#246;stroke-width:1;opacity:0.6}"
    ".arm.collision{stroke:#d22;opacity:0.9}"
    ".hand{fill:#246}.hand.collision{fill:#d22}"
    ".shoulder{fill:#000}"
)


def _fmt(v):
    return f"{v:.6f}"


def plot_records(chain, motions, scene, kind):
    """Rows (motion, point, x, y, collision) for a top view of ``motions``."""
    rows = []
    for mi, m in enumerate(motions):
        hit = bool(not scene.empty and motion_in_collision(chain, m.states, scene))
        if kind == "endpoints":
            P = forward_kinematics(chain, m.states[-1])
            for name, p in zip(("shoulder", "elbow", "hand"), P):
                rows.append((mi, name, float(p[0]), float(p[1]), hit))
        else:
            for si, q in enumerate(m.states):
                p = forward_kinematics(chain, q)[2]
                rows.append((mi, str(si), float(p[0]), float(p[1]), hit))
    return rows


def render_svg(rows, scene, kind, scale=1000.0, margin=20.0):
    xs = [r[2] for r in rows] + [0.0]
    ys = [r[3] for r in rows] + [0.0]
    for s in scene.spheres:
        xs += [s.center[0] - s.radius, s.center[0] + s.radius]
        ys += [s.center[1] - s.radius, s.center[1] + s.radius]
    x0, x1, y0, y1 = min(xs), max(xs), min(ys), max(ys)
    width = (x1 - x0) * scale + 2 * margin
    height = (y1 - y0) * scale + 2 * margin

    def px(x, y):
        # top view: +X to the right, +Y up
        return _fmt((x - x0) * scale + margin), _fmt((y1 - y) * scale + margin)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_fmt(width)}" height="{_fmt(height)}" '
           f'viewBox="0 0 {_fmt(width)} {_fmt(height)}">', f"<style>{_SVG_STYLE}</style>"]
    for s in scene.spheres:
        cx, cy = px(s.center[0], s.center[1])
        out.append(f'<circle class="sphere" cx="{cx}" cy="{cy}" r="{_fmt(s.radius * scale)}"/>')
    by_motion = {}
    for r in rows:
        by_motion.setdefault(r[0], []).append(r)
    for mi in sorted(by_motion):
        pts = by_motion[mi]
        cls = "collision" if pts[0][4] else "free"
        line = " ".join(",".join(px(r[2], r[3])) for r in pts)
        out.append(f'<polyline class="arm {cls}" data-motion="{mi}" points="{line}"/>')
        hx, hy = px(pts[-1][2], pts[-1][3])
        out.append(f'<circle class="hand {cls}" cx="{hx}" cy="{hy}" r="2"/>')
    sx, sy = px(0.0, 0.0)
    out.append(f'<circle class="shoulder" cx="{sx}" cy="{sy}" r="3"/>')
    out.append(f"<!-- {kind} -->")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def cmd_export_plot(args):
    run, cfg = _run_dir(args)
    it = run / f"iter_{args.iteration}"
    if not it.is_dir():
        raise UsageError(f"{run} has no iteration {args.iteration}")
    chain = chain_for(cfg)
    scene = scene_for(cfg) if cfg["experiment"] == "sphere" else Scene()
    rows = plot_records(chain, _load_motions(it), scene, args.kind)
    target = Path(args.plot_dir) if args.plot_dir else run / "plots"
    target.mkdir(parents=True, exist_ok=True)
    stem = target / f"iter_{args.iteration}_{args.kind}"
    svg, table = stem.with_suffix(".svg"), stem.with_suffix(".csv")
    if not args.force and (svg.exists() or table.exists()):
        raise UsageError(f"{svg} already exists; pass --force to overwrite")
    svg.write_text(render_svg(rows, scene, args.kind), encoding="utf-8")
    with table.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["motion", "point", "x", "y", "collision"])
        for mi, name, x, y, hit in rows:
            w.writerow([mi, name, _fmt(x), _fmt(y), int(hit)])
    log.info("wrote %s and %s", svg, table)
    return EXIT_OK


# --- grad-check / ik-probe ----------------------------------------------------------------

def cmd_grad_check(args):
    cfg = _config(args)
    chain = chain_for(cfg)
    data = toy_motion_set(chain, args.samples, cfg["seed"])
    worst = 0.0
    for seed in args.seeds:
        err = gradient_check(Discriminator.initialize(seed), data, args.loss, args.h)
        worst = max(worst, err)
        print(json.dumps({"seed": seed, "max_relative_error": err}))
    if not worst < args.tolerance:
        raise RuntimeFailure(f"gradient check failed: {worst:.3e} >= {args.tolerance:.1e}")
    return EXIT_OK


def cmd_ik_probe(args):
    cfg = _config(args)
    chain = chain_for(cfg)
    target = np.array(args.target, dtype=np.float64)
    solutions = []
    for seed in analytic_seeds(chain, target, args.swivel):
        try:
            q = inverse_kinematics(chain, target, args.swivel, seed)
        except IKFailure as exc:
            log.debug("seed %s: %s", np.round(seed, 3).tolist(), exc)
            continue
        hand = forward_kinematics(chain, q)[2]
        solutions.append({"state": q.tolist(), "hand_error": float(np.linalg.norm(hand - target)),
                          "swivel": state_swivel(chain, q)})
    if not solutions:
        raise RuntimeFailure(f"no IK solution for target {target.tolist()} at swivel {args.swivel}")
    print(json.dumps({"target": target.tolist(), "swivel": args.swivel, "solutions": solutions}, indent=2))
    return EXIT_OK


# --- argument parsing ---------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config (JSON)")
    common.add_argument("--preset", help="sphere experiment preset: paper or desk")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", type=Path, help="override the output directory")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--jobs", type=int, default=1, help="concurrent planning queries")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="advplan", description="Adversarial RRT* planning experiments.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("gen-targets", parents=[common], help="plan target motions or write demonstrations")
    sub.add_parser("loop", parents=[common], help="run the adversarial loop")
    p = sub.add_parser("eval", parents=[common], help="re-evaluate a run directory")
    p.add_argument("run", nargs="?", help="run directory (default: the config's output directory)")
    p = sub.add_parser("export-plot", parents=[common], help="top-view SVG and CSV of one iteration")
    p.add_argument("run", nargs="?", help="run directory (default: the config's output directory)")
    p.add_argument("--iteration", type=int, default=0)
    p.add_argument("--kind", choices=("endpoints", "paths"), default="endpoints")
    p.add_argument("--plot-dir", help="where to write the plot (default: <run>/plots)")
    p = sub.add_parser("grad-check", parents=[common], help="compare backprop with finite differences")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--samples", type=int, default=4, help="motion pairs in the probe set")
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--loss", choices=("bce", "paper_eq1"), default="bce")
    p.add_argument("--tolerance", type=float, default=1e-5)
    p = sub.add_parser("ik-probe", parents=[common], help="solve IK for a hand target and swivel")
    p.add_argument("--target", type=float, nargs=3, required=True, metavar=("X", "Y", "Z"))
    p.add_argument("--swivel", type=float, default=0.0)
    return parser


COMMANDS = {
    "gen-targets": cmd_gen_targets,
    "loop": cmd_loop,
    "eval": cmd_eval,
    "export-plot": cmd_export_plot,
    "grad-check": cmd_grad_check,
    "ik-probe": cmd_ik_probe,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)
    if args.jobs < 1:
        log.error("--jobs must be at least 1")
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (RuntimeFailure, LoopError, PlanningError, CheckpointError, IKFailure, ValueError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
