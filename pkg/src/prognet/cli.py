"""Command-line front end.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
Every output file goes under ``--out``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (AnalysisError, SensitivityReport, afs_spectrum, aps_matrix, attach_aps,
                       collect_rho_samples, compute_afs)
from .checkpoint import CheckpointError, checkpoint_load, file_digest
from .envs import TASKS
from .harness import (ARCHITECTURES, ConfigError, ExperimentConfig, TransferMatrix, run_baseline1,
                      sweep_and_score)
from .network import HEADS, add_column
from .plots import line_plot, matrix_plot
from .trainer import LearningCurve, TrainingDiverged, train

log = logging.getLogger("prognet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _task(value: str) -> str:
    if value not in TASKS:
        raise argparse.ArgumentTypeError(f"unknown task {value!r} (choose from {', '.join(TASKS)})")
    return value


def _positive(value: str) -> int:
    try:
        v = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {value!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return v


def _nonneg(value: str) -> int:
    v = int(value) if value.lstrip("-").isdigit() else None
    if v is None or v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {value!r}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="prognet", description="Progressive networks on the MiniCatch suite.")
    p.add_argument("--version", action="version", version=f"prognet {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out=True):
        if out:
            sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=_nonneg, default=0)

    def run_flags(sp):
        sp.add_argument("--config", help="experiment config (JSON); flags override it")
        sp.add_argument("--budget", type=_nonneg, help="agent steps per trained column")
        sp.add_argument("--workers", type=_positive, help="parallel environments per update")
        sp.add_argument("--action-repeat", type=_positive)
        sp.add_argument("--window", type=_positive, help="agent steps per curve point")

    sp = sub.add_parser("train", help="train a fresh single column")
    common(sp)
    run_flags(sp)
    sp.add_argument("--task", type=_task)

    sp = sub.add_parser("add-column", help="freeze a checkpoint and train a new column on a task")
    common(sp)
    run_flags(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--task", type=_task, required=True)

    sp = sub.add_parser("analyze-afs", help="Fisher sensitivity report for the last column")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--task", type=_task, required=True)
    sp.add_argument("--samples", type=_positive, default=10_000)
    sp.add_argument("--workers", type=_positive, default=16)

    sp = sub.add_parser("analyze-aps", help="perturbation sensitivity for the last column")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--task", type=_task, required=True)
    sp.add_argument("--episodes", type=_positive, default=20, help="episodes per noise probe")
    sp.add_argument("--samples", type=_positive, default=2000, help="samples for activation variances")
    sp.add_argument("--report", help="AFS report to extend with the APS values")

    sp = sub.add_parser("sweep", help="seeded jobs per cell, scored against baseline 1")
    common(sp)
    run_flags(sp)
    sp.add_argument("--task", type=_task, nargs="+", help="target task(s)")
    sp.add_argument("--source", type=_task, nargs="+", help="source task(s), one matrix row each")
    sp.add_argument("--architecture", nargs="+", choices=ARCHITECTURES)
    sp.add_argument("--jobs", type=_positive, help="jobs per cell")
    sp.add_argument("--top-k", type=_positive)

    sp = sub.add_parser("matrix", help="assemble transfer matrices from sweep reports")
    sp.add_argument("--reports", required=True, help="directory searched for transfer_report.json")
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("spectrum", help="sorted AFS spectra from sensitivity reports")
    sp.add_argument("--reports", required=True, nargs="+", help="report files or directories")
    sp.add_argument("--layer", type=_positive, required=True)
    sp.add_argument("--which", choices=("final_column", "source_columns"), default="final_column")
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("plot", help="render learning curve CSVs as SVG")
    sp.add_argument("--curve", required=True, nargs="+")
    sp.add_argument("--out", required=True, help="SVG file to write")
    sp.add_argument("--title", default="")

    sp = sub.add_parser("inspect-checkpoint", help="summarise a checkpoint")
    sp.add_argument("path")
    return p


# ------------------------------------------------------------------ helpers

def _config(args, **fixed) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if getattr(args, "config", None) else ExperimentConfig()
    over = dict(fixed)
    for flag, key in (("budget", "budget"), ("workers", "n_workers"), ("action_repeat", "action_repeat"),
                      ("window", "window"), ("jobs", "n_jobs"), ("top_k", "top_k")):
        v = getattr(args, flag, None)
        if v is not None:
            over[key] = v
    if args.seed is not None:
        over["seed"] = args.seed
    over["out"] = args.out
    return cfg.replace(**over).validate()


def _out_dir(path) -> Path:
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    return d


# ----------------------------------------------------------------- commands

def cmd_train(args) -> int:
    cfg = _config(args, architecture="baseline1", sources=[],
                  **({"target": args.task} if args.task else {}))
    out = _out_dir(args.out)
    res = run_baseline1(cfg, 0, out_dir=out)
    res.curve.to_csv(out / "curve.csv")
    for name in ("run.json", "log.csv", "final.ckpt"):
        (out / "stage1" / name).replace(out / name)
    (out / "stage1").rmdir()
    final = res.curve.scores[-1] if res.curve.scores else float("nan")
    print(f"trained column 1 on {cfg.target}: final mean score {final:.3f}")
    return 0


def cmd_add_column(args) -> int:
    cfg = _config(args, architecture="baseline1", sources=[], target=args.task)
    net = checkpoint_load(args.checkpoint)
    hyper = cfg.job_hyper(0)
    out = _out_dir(args.out)
    k = add_column(net, cfg.seed + 1000 * net.n_columns, hyper.alpha_init)
    net.column(k).task = args.task
    curve = train(net, k, args.task, hyper, cfg.budget, seed=cfg.seed, task_seed=cfg.task_seed,
                  window=cfg.window, log_dir=out, env_kwargs=cfg.env_kwargs)
    curve.to_csv(out / "curve.csv")
    print(f"trained column {k} on {args.task}")
    return 0


def cmd_analyze_afs(args) -> int:
    net = checkpoint_load(args.checkpoint)
    k = net.n_columns
    samples = collect_rho_samples(net, k, args.task, args.samples, seed=args.seed,
                                  n_workers=args.workers)
    rep = compute_afs(net, k, samples)
    rep.meta.update({"checkpoint_sha256": file_digest(args.checkpoint), "seed": args.seed})
    out = _out_dir(args.out)
    rep.save(out / "afs_report.json")
    rep.write_feature_csv(out / "afs_features.csv")
    _write_layer_csv(out / "afs_layers.csv", rep.layer_labels, rep.column_labels, rep.afs_layer)
    print(_format_layers("AFS", rep.layer_labels, rep.column_labels, rep.afs_layer))
    return 0


def cmd_analyze_aps(args) -> int:
    net = checkpoint_load(args.checkpoint)
    k = net.n_columns
    if args.report:
        rep = SensitivityReport.load(args.report)
        if rep.n_columns != k:
            raise ConfigError(f"{args.report} describes {rep.n_columns} columns, checkpoint has {k}")
    else:
        rep = None
    lam, aps, results = aps_matrix(net, k, args.task, n_samples=args.samples,
                                   episodes_per_probe=args.episodes, seed=args.seed)
    out = _out_dir(args.out)
    labels = [f"{s.kind}{i}" for i, s in enumerate(net.layer_specs, 1)]
    cols = [net.column(j).task or f"column{j}" for j in range(1, k + 1)]
    _write_layer_csv(out / "aps_layers.csv", labels, cols, aps)
    _write_layer_csv(out / "aps_lambda.csv", labels, cols, lam)
    with open(out / "aps_probes.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "column", "sigma2", "score", "baseline", "floor", "threshold"])
        for r in results:
            for s2, sc in r.probes:
                w.writerow([r.layer, r.column, repr(s2), repr(sc), repr(r.baseline), repr(r.floor),
                            repr(r.threshold)])
    if rep is not None:
        attach_aps(rep, lam, results)
        rep.save(out / "afs_aps_report.json")
    print(_format_layers("APS", labels, cols, aps))
    return 0


def cmd_sweep(args) -> int:
    sources = args.source or []
    archs = args.architecture
    fixed = {}
    if args.task:
        fixed["target"] = args.task[0]
    if archs:
        fixed["architecture"] = next((a for a in archs if a != "baseline1"), "baseline1")
    if sources:
        fixed["sources"] = [sources[0]]
    if archs and fixed["architecture"] == "baseline1":
        fixed["sources"] = []
    cfg = _config(args, **fixed)
    res = sweep_and_score(cfg, sources=sources or None, targets=args.task, architectures=archs,
                          out_dir=_out_dir(args.out))
    for a, m in res.matrices.items():
        print(f"{a}: mean {m.mean():.1f}  median {m.median():.1f}")
    return 0


def cmd_matrix(args) -> int:
    root = Path(args.reports)
    paths = sorted(root.rglob("transfer_report.json")) if root.is_dir() else [root]
    if not paths:
        raise ConfigError(f"no transfer_report.json under {root}")
    cells: dict[str, dict[tuple[str, str], float]] = {}
    for p in paths:
        for c in json.loads(p.read_text())["cells"]:
            score = np.nan if c["score"] is None else c["score"]
            cells.setdefault(c["architecture"], {})[(c["source"], c["target"])] = score
    out = _out_dir(args.out)
    for arch, vals in sorted(cells.items()):
        sources = sorted({s for s, _ in vals})
        targets = sorted({t for _, t in vals}, key=lambda t: (TASKS.index(t) if t in TASKS else 99, t))
        grid = np.array([[vals.get((s, t), np.nan) for t in targets] for s in sources])
        m = TransferMatrix(arch, sources, targets, grid)
        m.to_csv(out / f"matrix_{arch}.csv")
        (out / f"matrix_{arch}.svg").write_text(
            matrix_plot(m.display(), sources, targets, title=f"{arch} transfer (%)"))
        print(f"{arch}: {len(sources)}x{len(targets)} matrix, median {m.median():.1f}")
    return 0


def _report_paths(items) -> list[Path]:
    paths = []
    for it in items:
        p = Path(it)
        paths += sorted(p.rglob("afs*report.json")) if p.is_dir() else [p]
    if not paths:
        raise ConfigError("no sensitivity reports found")
    return paths


def cmd_spectrum(args) -> int:
    reports = [SensitivityReport.load(p) for p in _report_paths(args.reports)]
    by_k: dict[int, list] = {}
    for r in reports:
        if args.layer > r.n_layers:
            raise ConfigError(f"layer {args.layer} out of range (reports have {r.n_layers})")
        by_k.setdefault(r.n_columns, []).append(r)
    out = _out_dir(args.out)
    summary, series = {}, []
    for k, reps in sorted(by_k.items()):
        sp = afs_spectrum(reps, args.layer, args.which)
        with open(out / f"spectrum_K{k}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["position", "mean_afs"])
            for x, y in zip(sp.abscissa, sp.mean):
                w.writerow([repr(float(x)), repr(float(y))])
        summary[f"K={k}"] = {"networks": len(reps), "area": sp.area, "values": len(sp.mean)}
        series.append((f"K={k}", sp.abscissa.tolist(), sp.mean.tolist()))
    areas = [summary[f"K={k}"]["area"] for k in sorted(by_k)]
    trend = None
    if len(areas) > 1:
        trend = "declining" if all(b <= a for a, b in zip(areas, areas[1:])) else "not declining"
    summary = {"layer": args.layer, "which": args.which, "spectra": summary, "area_trend": trend}
    (out / "spectrum.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    (out / "spectrum.svg").write_text(line_plot(series, title=f"AFS spectrum, layer {args.layer}",
                                                xlabel="sorted feature position", ylabel="AFS"))
    for k in sorted(by_k):
        print(f"K={k}: area {summary['spectra'][f'K={k}']['area']:.4f}")
    if trend:
        print(f"area trend with K: {trend}")
    return 0


def cmd_plot(args) -> int:
    out = Path(args.out)
    series = []
    for path in args.curve:
        c = LearningCurve.from_csv(path)
        series.append((Path(path).stem, c.steps, c.scores))
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(line_plot(series, title=args.title, xlabel="agent steps", ylabel="mean score"))
    return 0


def inspect_checkpoint(path) -> str:
    net = checkpoint_load(path)
    lines = [f"checkpoint: {path}", f"sha256: {file_digest(path)}", f"columns: {net.n_columns}",
             f"observation: {tuple(net.obs_shape)}  actions: {net.n_actions}",
             f"layers: {net.n_layers}"]
    for i, (s, shape) in enumerate(zip(net.layer_specs, net.hidden_shapes), 1):
        desc = (f"conv {s.width}@{s.kernel[0]}x{s.kernel[1]}/{s.stride[0]}" if s.kind == "conv"
                else f"dense {s.width}")
        lines.append(f"  layer {i}: {desc} -> {tuple(shape)}")
    lines.append(f"heads: {len(HEADS)} ({', '.join(f'{h} {n}' for h, n in zip(HEADS, (net.n_actions, 1)))})")
    total = 0
    for col in net.columns:
        own = sum(a.size for a in col.params.values())
        lat = net.adapters.param_count(col.index)
        total += own + lat
        lines.append(f"column {col.index}: task={col.task or '-'} frozen={'yes' if col.frozen else 'no'} "
                     f"params={own + lat} (own {own}, adapters {lat})")
    lines.append(f"frozen columns: {sum(c.frozen for c in net.columns)}")
    lines.append(f"total params: {total}")
    return "\n".join(lines)


def cmd_inspect(args) -> int:
    print(inspect_checkpoint(args.path))
    return 0


def _write_layer_csv(path, layers, cols, values) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", *cols])
        for lab, row in zip(layers, np.asarray(values, float)):
            w.writerow([lab, *("" if np.isnan(v) else repr(float(v)) for v in row)])


def _format_layers(name, layers, cols, values) -> str:
    head = f"{name:<8}" + "".join(f"{c:>10}" for c in cols)
    rows = [f"{lab:<8}" + "".join(f"{v:>10.3f}" for v in row) for lab, row in zip(layers, values)]
    return "\n".join([head, *rows])


COMMANDS = {"train": cmd_train, "add-column": cmd_add_column, "analyze-afs": cmd_analyze_afs,
            "analyze-aps": cmd_analyze_aps, "sweep": cmd_sweep, "matrix": cmd_matrix,
            "spectrum": cmd_spectrum, "plot": cmd_plot, "inspect-checkpoint": cmd_inspect}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, argparse.ArgumentTypeError) as e:
        print(f"prognet {args.command}: error: {e}", file=sys.stderr)
        return 1
    except (CheckpointError, AnalysisError, TrainingDiverged, OSError, ValueError, RuntimeError) as e:
        print(f"prognet {args.command}: failed: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
