"""Command line: run, eval, infer, fit, distill, plot.

Exit status is 0 on success, 1 for configuration or input errors and 2 for
failures while running.
"""
from __future__ import annotations

import argparse
import csv
import glob
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from jointplan.config import CONFIG_ENV, RunConfig, load_config
from jointplan.errors import CapacityError, ConfigurationError, JointPlanError
from jointplan.inference import PairwiseMRF, enumerate_exact, lbp_marginals
from jointplan.sim.episode import SCHEMA_VERSION, EpisodeTrace
from jointplan.sim.metrics import run_many, summarize

log = logging.getLogger("jointplan")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
METRIC_COLUMNS = ("mode", "SR", "RL", "collisions", "timeouts", "mean_planning_time_s", "episodes", "schema_version")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _overrides(args) -> dict:
    o = {}
    for k in ("mode", "seed", "episodes", "workers", "out"):
        v = getattr(args, k, None)
        if v is not None:
            o[k] = v
    return o


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    raw = dict(cfg.raw, **_overrides(args))
    if args.episodes is not None and isinstance(raw["seed"], list):
        raw["seed"] = raw["seed"][0]
    return RunConfig(raw, cfg.base_dir)


def _outdir(cfg: RunConfig) -> Path:
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    return out


def _episodes(cfg: RunConfig, mode: str, on_trace=None) -> list:
    scenarios = [cfg.scenario(s) for s in cfg.seeds]
    return run_many(scenarios, cfg.weights(), mode, cfg.episode_options(), cfg.workers, on_trace)


def _summary_line(tr: EpisodeTrace) -> dict:
    return {"kind": "episode", "seed": tr.header["seed"], "mode": tr.header["mode"], "outcome": tr.outcome,
            "ticks": len(tr.ticks), "route_fraction": round(tr.route_fraction, 6)}


def cmd_run(cfg: RunConfig, args) -> int:
    out = _outdir(cfg)
    summaries = []

    def write(sc, tr):
        path = out / f"trace_{tr.header['mode']}_seed{sc.seed}.jsonl"
        tr.write(path)
        line = _summary_line(tr)
        summaries.append(line)
        print(json.dumps(line, sort_keys=True))

    for mode in cfg.modes:
        _episodes(cfg, mode, write)
    with open(out / "summary.jsonl", "w") as f:
        f.write(json.dumps({"kind": "header", "schema_version": SCHEMA_VERSION, "episodes": len(summaries)}) + "\n")
        for line in summaries:
            f.write(json.dumps(line, sort_keys=True) + "\n")
    return EXIT_OK


def format_table(rows: list, columns) -> str:
    cells = [[str(c) for c in columns]] + [[_fmt(r[c]) for c in columns] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(columns))]
    lines = ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _fmt(v) -> str:
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def cmd_eval(cfg: RunConfig, args) -> int:
    out = _outdir(cfg)
    rows = []
    for mode in cfg.modes:
        m = summarize(_episodes(cfg, mode))
        rows.append(dict(m.as_row(mode), schema_version=SCHEMA_VERSION))
    with open(out / "metrics.csv", "w", newline="") as f:
        w = csv.DictWriter(f, METRIC_COLUMNS, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    print(format_table(rows, METRIC_COLUMNS[:-1]))
    return EXIT_OK


def load_mrf_fixture(path: Path) -> PairwiseMRF:
    """JSON or YAML: ``unary`` (N x K log-potentials) and ``pairwise``, a list of ``{i, j, potential}``."""
    if not path.is_file():
        raise ConfigurationError(f"fixture not found: {path}")
    try:
        d = yaml.safe_load(path.read_text())
        pairs = {(int(e["i"]), int(e["j"])): np.array(e["potential"], dtype=float) for e in d.get("pairwise", [])}
        return PairwiseMRF(np.array(d["unary"], dtype=float), pairs)
    except (yaml.YAMLError, KeyError, TypeError, ValueError, AttributeError) as e:
        if isinstance(e, ConfigurationError):
            raise
        raise ConfigurationError(f"malformed fixture {path}: {e}") from None


def marginal_report(mrf: PairwiseMRF, lbp, exact=None) -> str:
    n, k = mrf.log_unary.shape
    lines = [f"# jointplan infer schema_version={SCHEMA_VERSION} nodes={n} states={k} "
             f"lbp_converged={lbp.converged} lbp_iterations={lbp.iterations}"]
    head = f"{'node':>4} {'state':>5} {'lbp':>12}" + (f" {'exact':>12}" if exact is not None else "")
    lines.append(head)
    for i in range(n):
        for s in range(k):
            row = f"{i:>4} {s:>5} {lbp.unary[i, s]:>12.8f}"
            if exact is not None:
                row += f" {exact.unary[i, s]:>12.8f}"
            lines.append(row)
    if exact is not None:
        tv = 0.5 * np.abs(lbp.unary - exact.unary).sum(axis=1)
        lines.append(f"{'node':>4} {'tv':>12}")
        lines += [f"{i:>4} {tv[i]:>12.3e}" for i in range(n)]
        lines.append(f"max_tv {tv.max(initial=0.0):.3e}")
    return "\n".join(lines)


def cmd_infer(cfg: RunConfig, args) -> int:
    src = args.path or cfg.raw["infer"]["fixture"]
    if not src:
        raise ConfigurationError("infer needs a fixture path (argument or infer.fixture)")
    mrf = load_mrf_fixture(cfg.path(src))
    lbp = lbp_marginals(mrf, cfg.lbp("infer"))
    cap = int(cfg.raw["infer"]["max_states"])
    exact = None
    if mrf.n_states ** mrf.n_nodes > cap:
        print(f"exact marginals skipped: K^N = {mrf.n_states}^{mrf.n_nodes} exceeds the cap {cap}")
    else:
        try:
            exact = enumerate_exact(mrf)
        except CapacityError as e:
            print(f"exact marginals skipped: {e}")
    print(marginal_report(mrf, lbp, exact))
    return EXIT_OK


def _trace_paths(cfg: RunConfig, extra) -> list:
    pats = list(extra or []) or list(cfg.raw["fit"]["traces"] or [])
    paths = []
    for p in pats:
        hits = sorted(glob.glob(str(cfg.path(p))))
        if not hits:
            raise ConfigurationError(f"no trace files match {cfg.path(p)}")
        paths += hits
    return paths


def _read_trace(path) -> EpisodeTrace:
    try:
        return EpisodeTrace.read(path)
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise ConfigurationError(f"cannot read trace {path}: {e}") from None


def cmd_fit(cfg: RunConfig, args) -> int:
    from jointplan.learning.fit import minimize, planning_objective, scene_fixture
    from jointplan.learning.gradient import finite_difference, relative_error
    from jointplan.learning.traces import scenes_from_traces

    sec = cfg.raw["fit"]
    traces = [_read_trace(p) for p in _trace_paths(cfg, args.path and [args.path])]
    prof = cfg.profile()
    ep = cfg.raw["episode"]
    scenes = scenes_from_traces(traces, prof, int(sec["stride"]), float(ep["radius"]), int(ep["max_agents"]))
    if not scenes:
        raise ConfigurationError("no training episodes: the traces hold no tick with a full logged horizon")
    init = cfg.weights(sec["init"]) if sec["init"] else cfg.weights()
    opts = cfg.fit_options("fit")
    fixtures = [scene_fixture(s, init, float(sec["epsilon"])) for s in scenes]
    objective = planning_objective(fixtures, opts.lbp)
    if sec["gradient_check"] or args.gradient_check:
        _, g = objective(init.w)
        fd = finite_difference(lambda w: objective(w)[0], init.w, 1e-5)
        print(f"gradient check: max relative error {relative_error(g, fd):.3e} over {len(init.w)} weights")
    curve = []
    res = minimize(objective, init.w, opts, lambda step, loss, w: curve.append((step, loss)))
    out = _outdir(cfg)
    fitted = init.with_w(res.w)
    (out / "weights.txt").write_text(fitted.to_text())
    with open(out / "loss_curve.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss", "schema_version"])
        w.writerows([s, repr(float(v)), SCHEMA_VERSION] for s, v in curve)
    print(f"fit {len(scenes)} scenes from {len(traces)} traces: loss {curve[0][1]:.6g} -> {curve[-1][1]:.6g} "
          f"in {res.steps} steps")
    return EXIT_OK


def cmd_distill(cfg: RunConfig, args) -> int:
    from jointplan.learning.corpus import packaged_corpus, read_corpus
    from jointplan.learning.distill import fit_teacher, run_splits

    sec = cfg.raw["distill"]
    corpus = read_corpus(cfg.path(sec["corpus"])) if sec["corpus"] else packaged_corpus()
    n_train = int(sec["train"] or corpus.header["train"])
    n_test = int(sec["test"] or corpus.header["test"])
    eps = float(sec["epsilon"])
    scenes = corpus.scenes()
    lw = cfg.loss_weights()
    teacher = fit_teacher([scenes[i] for i in corpus.teacher_indices], cfg.fit_options("distill", "teacher_options"),
                          epsilon=eps)
    out = _outdir(cfg)
    (out / "teacher_weights.txt").write_text(teacher.to_text())
    first = cfg.seeds[0]
    seeds = range(first, first + int(sec["splits"]))
    rows = []

    def show(r):
        rows.append({"split_seed": r.seed, "undistilled": r.plain_loss, "distilled": r.distilled_loss,
                     "helped": r.distillation_helped})
        print(f"split {r.seed}: held-out loss undistilled {r.plain_loss:.6f} distilled {r.distilled_loss:.6f}")

    run_splits(teacher, scenes, corpus.split_pool, seeds, n_train, n_test, lw, cfg.fit_options("distill"), eps, show)
    with open(out / "distill.csv", "w", newline="") as f:
        w = csv.DictWriter(f, ["split_seed", "undistilled", "distilled", "helped", "schema_version"])
        w.writeheader()
        w.writerows(dict(r, schema_version=SCHEMA_VERSION) for r in rows)
    wins = sum(r["helped"] for r in rows)
    print(format_table(rows, ("split_seed", "undistilled", "distilled", "helped")))
    print(f"distillation helped in {wins} of {len(rows)} splits")
    return EXIT_OK


def _svg_frame(tick: dict, lanes: list, boxes: dict, ego_box, scale: float) -> str:
    ex = tick["ego"][0]
    ys = [y for l in lanes for _, y in l["centerline"]]
    x0, x1 = ex - 30.0, ex + 70.0
    y0, y1 = min(ys) - 6.0, max(ys) + 6.0
    W, H = (x1 - x0) * scale, (y1 - y0) * scale

    def pt(x, y):
        return f"{(x - x0) * scale:.2f},{(y1 - y) * scale:.2f}"

    def poly(path, cls, extra=""):
        return f'<polyline class="{cls}" points="{" ".join(pt(x, y) for x, y in path)}" fill="none"{extra}/>'

    def box(state, b, cls):
        x, y, h = state[0], state[1], state[2]
        c, s = np.cos(h), np.sin(h)
        hl, hw = b["length"] / 2, b["width"] / 2
        corners = [(x + c * dx - s * dy, y + s * dx + c * dy) for dx, dy in ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw))]
        return f'<polygon class="{cls}" points="{" ".join(pt(*p) for p in corners)}"/>'

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W:.0f}" height="{H:.0f}" '
           f'data-schema-version="{SCHEMA_VERSION}" data-tick="{tick["tick"]}">',
           '<style>.lane{stroke:#bbb;stroke-dasharray:4 4}.edge{stroke:#555}.ego{fill:#2a6fdb}'
           '.agent{fill:#999}.plan{stroke:#2a6fdb;stroke-width:2}.prediction{stroke:#e07b00}</style>']
    for l in lanes:
        cl = np.array(l["centerline"], dtype=float)
        out.append(poly(cl, "lane"))
        for side in (-1, 1):
            out.append(poly(cl + [0.0, side * l["width"] / 2], "edge"))
    for a in tick.get("agents", []):
        out.append(box(a["state"], boxes.get(a["id"], ego_box), "agent"))
    out.append(box(tick["ego"], ego_box, "ego"))
    if tick.get("plan_path"):
        out.append(poly(tick["plan_path"], "plan"))
    for pred in tick.get("predictions", []):
        for (k, p), path in zip(pred["top"], pred["paths"]):
            if p > 0.1:
                out.append(poly(path, "prediction", f' stroke-opacity="{min(1.0, 0.2 + p):.2f}" data-agent="{pred["agent"]}"'))
    out.append("</svg>")
    return "\n".join(out) + "\n"


def cmd_plot(cfg: RunConfig, args) -> int:
    src = args.path or cfg.raw["plot"]["trace"]
    if not src:
        raise ConfigurationError("plot needs a trace path (argument or plot.trace)")
    path = cfg.path(src)
    if not path.is_file():
        raise ConfigurationError(f"trace not found: {path}")
    if not path.read_text().strip():
        print("empty trace: 0 frames")
        return EXIT_OK
    tr = _read_trace(path)
    out = _outdir(cfg)
    try:
        sc = tr.header["scenario"]
        lanes, ego_box = sc["lanes"], sc["ego_box"]
        boxes = {i: a["box"] for i, a in enumerate(sc.get("agents", []))}
        scale = float(cfg.raw["plot"]["scale"])
        frames = [_svg_frame(t, lanes, boxes, ego_box, scale) for t in tr.ticks]
    except (KeyError, TypeError, ValueError, IndexError) as e:
        raise ConfigurationError(f"malformed trace {path}: {e}") from None
    for t, svg in zip(tr.ticks, frames):
        (out / f"frame_{t['tick']:04d}.svg").write_text(svg)
    print(f"{len(frames)} frames written to {out}")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "eval": cmd_eval, "infer": cmd_infer, "fit": cmd_fit, "distill": cmd_distill,
            "plot": cmd_plot}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="jointplan", description="Interactive joint prediction and planning toolkit.",
                epilog=f"The config file defaults to ${CONFIG_ENV} when --config is not given.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help=f"YAML config file (default: ${CONFIG_ENV})")
        s.add_argument("--mode", choices=("interactive", "non_interactive", "both"))
        s.add_argument("--seed", type=int)
        s.add_argument("--episodes", type=int)
        s.add_argument("--workers", type=int)
        s.add_argument("--out")
        if name in ("infer", "plot", "fit"):
            s.add_argument("path", nargs="?", help={"infer": "MRF fixture", "plot": "trace file",
                                                    "fit": "trace file or glob"}[name])
        if name == "fit":
            s.add_argument("--gradient-check", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    args.path = getattr(args, "path", None)
    args.gradient_check = getattr(args, "gradient_check", False)
    try:
        cfg = _config(args)
        return COMMANDS[args.command](cfg, args)
    except ConfigurationError as e:
        print(f"jointplan {args.command}: configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (JointPlanError, OSError, ArithmeticError) as e:
        print(f"jointplan {args.command}: failed: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
