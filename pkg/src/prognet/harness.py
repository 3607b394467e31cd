"""Experiment orchestration: baselines, progressive runs, sweeps and transfer matrices.

A sweep writes everything under one output directory::

    config.json
    runs/<architecture>/<source chain or ->/<target>/job<j>/
        stage<k>/{run.json, log.csv, final.ckpt}   one per trained column
        curve.csv, result.json
    cells.csv                 one row per job
    matrix_<architecture>.csv
    transfer_report.json

Finished jobs (those with ``result.json``) are reused, so an interrupted
sweep resumes where it stopped and architectures sharing a directory share
their baseline-1 and source runs.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .analysis import auc
from .checkpoint import checkpoint_load
from .envs import TASKS
from .network import HEADS, ProgressiveNetwork, add_column, desk_layers, new_network, reinit_heads
from .trainer import DEFAULT_WINDOW, Hyper, LearningCurve, sample_hyper, train

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
ARCHITECTURES = ("baseline1", "baseline2", "baseline3", "baseline4", "progressive")
DISPLAY_CLIP = 200.0
NO_SOURCE = "-"
N_ACTIONS = 3


class ConfigError(ValueError):
    """An experiment configuration that cannot be run."""


@dataclass
class ExperimentConfig:
    """One experiment; sweeps vary the job index, which selects seed and hyperparameters.

    ``hyper`` holds fixed overrides. With ``sample_grid`` each job draws its
    remaining hyperparameters from the grid, seeded by the job seed.
    """
    architecture: str = "progressive"
    sources: list[str] = field(default_factory=list)
    target: str = "base"
    budget: int = 300_000
    n_jobs: int = 5
    top_k: int = 3
    seed: int = 0
    window: int = DEFAULT_WINDOW
    n_workers: int = 16
    action_repeat: int = 2
    task_seed: int = 0
    sample_grid: bool = True
    hyper: dict = field(default_factory=dict)
    out: str | None = None
    schema_version: int = SCHEMA_VERSION

    def validate(self) -> "ExperimentConfig":
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"config schema {self.schema_version} unsupported "
                              f"(expected {SCHEMA_VERSION})")
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"architecture must be one of {', '.join(ARCHITECTURES)}")
        n_src = len(self.sources)
        if self.architecture == "baseline1" and n_src:
            raise ConfigError("baseline1 takes no source task")
        if self.architecture in ("baseline2", "baseline3", "baseline4") and n_src != 1:
            raise ConfigError(f"{self.architecture} needs exactly one source task")
        if self.architecture == "progressive" and n_src < 1:
            raise ConfigError("progressive needs at least one source task")
        for t in [*self.sources, self.target]:
            if t not in TASKS:
                raise ConfigError(f"unknown task {t!r}; choose from {', '.join(TASKS)}")
        for name in ("budget", "n_jobs", "top_k", "window", "n_workers", "action_repeat"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < (0 if name == "budget" else 1):
                raise ConfigError(f"{name} must be a {'non-negative' if name == 'budget' else 'positive'} integer")
        if self.n_jobs < self.top_k:
            raise ConfigError(f"n_jobs ({self.n_jobs}) must be at least top_k ({self.top_k})")
        known = {f.name for f in fields(Hyper)}
        if set(self.hyper) - known:
            raise ConfigError(f"unknown hyperparameters: {sorted(set(self.hyper) - known)}")
        return self

    # -- derived values ------------------------------------------------------

    def job_seed(self, job: int) -> int:
        return self.seed + job

    def job_hyper(self, job: int) -> Hyper:
        fixed = dict(self.hyper, n_workers=self.n_workers)
        if self.sample_grid:
            return sample_hyper(self.job_seed(job), **fixed)
        return Hyper(**fixed)

    def layer_specs(self):
        return desk_layers()

    @property
    def env_kwargs(self) -> dict:
        return {"action_repeat": self.action_repeat}

    def replace(self, **kw) -> "ExperimentConfig":
        return ExperimentConfig(**{**asdict(self), **kw})

    # -- persistence ---------------------------------------------------------

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        d = dict(d)
        d.setdefault("schema_version", SCHEMA_VERSION)
        return cls(**d).validate()

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON ({e})") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return cls.from_dict(d)


# ------------------------------------------------------------------ single runs

@dataclass
class RunResult:
    curve: LearningCurve
    net: ProgressiveNetwork
    hyper: Hyper
    seed: int
    checkpoints: list[Path] = field(default_factory=list)


def stage_seed(job_seed: int, stage: int) -> int:
    """Seed for column initialisation and training of one stage (stage 1 = first column)."""
    return job_seed + 1000 * (stage - 1)


def _stage_dir(out_dir, stage: int) -> Path | None:
    return None if out_dir is None else Path(out_dir) / f"stage{stage}"


def _train_stage(net, task, cfg: ExperimentConfig, hyper: Hyper, seed: int, out_dir, stage: int,
                 params=None) -> tuple[LearningCurve, Path | None]:
    net.column(net.n_columns).task = task
    d = _stage_dir(out_dir, stage)
    curve = train(net, net.n_columns, task, hyper, cfg.budget, seed=seed, task_seed=cfg.task_seed,
                  window=cfg.window, params=params, log_dir=d, env_kwargs=cfg.env_kwargs)
    return curve, (None if d is None else d / "final.ckpt")


def _single_column(cfg: ExperimentConfig, job: int, task: str, out_dir) -> RunResult:
    hyper, seed = cfg.job_hyper(job), cfg.job_seed(job)
    net = new_network(cfg.layer_specs(), N_ACTIONS, stage_seed(seed, 1))
    curve, ck = _train_stage(net, task, cfg, hyper, stage_seed(seed, 1), out_dir, 1)
    return RunResult(curve, net, hyper, seed, [ck] if ck else [])


def run_baseline1(cfg: ExperimentConfig, job: int = 0, out_dir=None) -> RunResult:
    """A fresh single column trained on the target."""
    return _single_column(cfg, job, cfg.target, out_dir)


def _pretrained(cfg: ExperimentConfig, job: int, sources: Sequence[str], out_dir,
                source_ckpt) -> tuple[ProgressiveNetwork, list[Path]]:
    """A network whose columns were trained on ``sources`` in order (loaded or trained here)."""
    if source_ckpt is not None:
        net = checkpoint_load(source_ckpt)  # missing file -> FileNotFoundError
        if net.n_columns != len(sources):
            raise ConfigError(f"{source_ckpt} has {net.n_columns} columns, expected {len(sources)}")
        return net, [Path(source_ckpt)]
    hyper, seed = cfg.job_hyper(job), cfg.job_seed(job)
    net = new_network(cfg.layer_specs(), N_ACTIONS, stage_seed(seed, 1))
    cks = []
    for stage, task in enumerate(sources, 1):
        if stage > 1:
            add_column(net, stage_seed(seed, stage), hyper.alpha_init)
        _, ck = _train_stage(net, task, cfg, hyper, stage_seed(seed, stage), out_dir, stage)
        if ck:
            cks.append(ck)
    return net, cks


def _finetune(cfg: ExperimentConfig, job: int, out_dir, source_ckpt, heads_only: bool) -> RunResult:
    hyper, seed = cfg.job_hyper(job), cfg.job_seed(job)
    net, cks = _pretrained(cfg, job, cfg.sources, out_dir, source_ckpt)
    if net.n_columns != 1:
        raise ConfigError("fine-tuning baselines start from a single column")
    col = net.column(1)
    col.frozen = False
    col.params = {n: np.array(a) for n, a in col.params.items()}
    reinit_heads(net, stage_seed(seed, 2))
    params = [f"c1/{n}" for n in net.column(1).params if n.split(".")[0] in HEADS] if heads_only else None
    curve, ck = _train_stage(net, cfg.target, cfg, hyper, stage_seed(seed, 2), out_dir, 2, params)
    return RunResult(curve, net, hyper, seed, cks + ([ck] if ck else []))


def run_baseline2(cfg: ExperimentConfig, job: int = 0, out_dir=None, source_ckpt=None) -> RunResult:
    """Pretrained on the source; only fresh output heads are trained on the target."""
    return _finetune(cfg, job, out_dir, source_ckpt, heads_only=True)


def run_baseline3(cfg: ExperimentConfig, job: int = 0, out_dir=None, source_ckpt=None) -> RunResult:
    """Pretrained on the source; fresh heads and the whole column trained on the target."""
    return _finetune(cfg, job, out_dir, source_ckpt, heads_only=False)


def run_baseline4(cfg: ExperimentConfig, job: int = 0, out_dir=None) -> RunResult:
    """Two columns where the first is random and frozen; the second learns the target."""
    hyper, seed = cfg.job_hyper(job), cfg.job_seed(job)
    net = new_network(cfg.layer_specs(), N_ACTIONS, stage_seed(seed, 1))
    net.column(1).task = "random"
    add_column(net, stage_seed(seed, 2), hyper.alpha_init)
    curve, ck = _train_stage(net, cfg.target, cfg, hyper, stage_seed(seed, 2), out_dir, 2)
    return RunResult(curve, net, hyper, seed, [ck] if ck else [])


def run_progressive(cfg: ExperimentConfig, job: int = 0, out_dir=None, source_ckpt=None) -> RunResult:
    """One column per source in order, then a final column on the target."""
    hyper, seed = cfg.job_hyper(job), cfg.job_seed(job)
    net, cks = _pretrained(cfg, job, cfg.sources, out_dir, source_ckpt)
    stage = len(cfg.sources) + 1
    add_column(net, stage_seed(seed, stage), hyper.alpha_init)
    curve, ck = _train_stage(net, cfg.target, cfg, hyper, stage_seed(seed, stage), out_dir, stage)
    return RunResult(curve, net, hyper, seed, cks + ([ck] if ck else []))


RUNNERS = {"baseline1": run_baseline1, "baseline2": run_baseline2, "baseline3": run_baseline3,
           "baseline4": run_baseline4, "progressive": run_progressive}


# ----------------------------------------------------------------------- jobs

@dataclass(frozen=True)
class JobSpec:
    architecture: str
    sources: tuple[str, ...]
    target: str
    job: int

    @property
    def source_label(self) -> str:
        return "+".join(self.sources) if self.sources else NO_SOURCE

    def directory(self, root: Path) -> Path:
        return root / "runs" / self.architecture / self.source_label / self.target / f"job{self.job}"


@dataclass
class JobRecord:
    architecture: str
    source: str
    target: str
    job: int
    seed: int
    auc: float
    failed: bool = False
    error: str = ""


def _job_key(arch: str, sources: Sequence[str]) -> tuple[str, tuple[str, ...]]:
    # Baseline 4's random column does not depend on the source, so one run serves every row.
    return (arch, ()) if arch in ("baseline1", "baseline4") else (arch, tuple(sources))


def _execute(cfg_dict: dict, spec: JobSpec, root: str, source_ckpt: str | None) -> JobRecord:
    cfg = ExperimentConfig.from_dict(cfg_dict).replace(
        architecture=spec.architecture, sources=list(spec.sources), target=spec.target)
    d = spec.directory(Path(root))
    result_path = d / "result.json"
    if result_path.exists():
        return JobRecord(**json.loads(result_path.read_text()))
    if d.exists():
        shutil.rmtree(d)  # unfinished leftovers from an interrupted sweep
    d.mkdir(parents=True)
    runner = RUNNERS[spec.architecture]
    kw = {"source_ckpt": source_ckpt} if spec.architecture in ("baseline2", "baseline3", "progressive") else {}
    try:
        res = runner(cfg, spec.job, out_dir=d, **kw)
        res.curve.to_csv(d / "curve.csv")
        rec = JobRecord(spec.architecture, spec.source_label, spec.target, spec.job,
                        cfg.job_seed(spec.job), auc(res.curve))
    except FloatingPointError as e:  # divergence, including non-finite forward values
        log.warning("job %s failed: %s", d, e)
        rec = JobRecord(spec.architecture, spec.source_label, spec.target, spec.job,
                        cfg.job_seed(spec.job), math.nan, True, f"{type(e).__name__}: {e}")
    result_path.write_text(json.dumps(asdict(rec), sort_keys=True) + "\n")
    return rec


def max_parallel() -> int:
    env = os.environ.get("PROGNET_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"PROGNET_THREADS must be an integer, got {env!r}") from None
        if n < 1:
            raise ConfigError("PROGNET_THREADS must be at least 1")
        return n
    return os.cpu_count() or 1


def _run_all(cfg: ExperimentConfig, tasks: list[tuple[JobSpec, str | None]], root: Path,
             parallel: int) -> list[JobRecord]:
    args = [(cfg.to_dict(), spec, str(root), ck) for spec, ck in tasks]
    if parallel <= 1 or len(args) <= 1:
        return [_execute(*a) for a in args]
    with ProcessPoolExecutor(max_workers=min(parallel, len(args))) as pool:
        return list(pool.map(_execute, *zip(*args)))


# ------------------------------------------------------------------- matrices

@dataclass
class TransferMatrix:
    """Transfer percentages; rows are sources, columns are targets. NaN marks a failed cell."""
    architecture: str
    sources: list[str]
    targets: list[str]
    values: np.ndarray

    def display(self) -> np.ndarray:
        """Values clipped at 200% for rendering; stored values are never clipped."""
        return np.minimum(self.values, DISPLAY_CLIP)

    def cell(self, source: str, target: str) -> float:
        return float(self.values[self.sources.index(source), self.targets.index(target)])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"source\\target ({self.architecture})", *self.targets])
            for s, row in zip(self.sources, self.values):
                w.writerow([s, *("failed" if math.isnan(v) else repr(float(v)) for v in row)])

    @classmethod
    def from_csv(cls, path) -> "TransferMatrix":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        head = rows[0][0]
        arch = head[head.index("(") + 1:head.rindex(")")] if "(" in head else ""
        vals = np.array([[math.nan if v == "failed" else float(v) for v in r[1:]] for r in rows[1:]])
        return cls(arch, [r[0] for r in rows[1:]], rows[0][1:], vals.reshape(len(rows) - 1, len(rows[0]) - 1))

    def median(self) -> float:
        v = self.values[~np.isnan(self.values)]
        return float(np.median(v)) if v.size else math.nan

    def mean(self) -> float:
        v = self.values[~np.isnan(self.values)]
        return float(np.mean(v)) if v.size else math.nan


def top_k_mean(scores: Sequence[float], k: int) -> tuple[float, list[float]]:
    """Mean of the ``k`` largest finite scores (fewer if fewer survive)."""
    ok = sorted((s for s in scores if not math.isnan(s)), reverse=True)
    chosen = ok[:k]
    return (float(np.mean(chosen)) if chosen else math.nan), chosen


@dataclass
class SweepResult:
    matrices: dict[str, TransferMatrix]
    report: dict
    records: list[JobRecord]


def sweep_and_score(cfg: ExperimentConfig, *, sources: Sequence[str] | None = None,
                    targets: Sequence[str] | None = None, architectures: Sequence[str] | None = None,
                    out_dir=None, parallel: int | None = None) -> SweepResult:
    """Run ``n_jobs`` jobs per cell and score each cell against baseline 1.

    Rows are single sources (or, for progressive runs, ``cfg.sources`` as one
    chain when ``sources`` is not given). Cell score = 100 x top-k mean AUC of
    the architecture / top-k mean AUC of baseline 1 on the same target.
    """
    cfg.validate()
    archs = list(architectures or [cfg.architecture])
    for a in archs:
        if a not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {a!r}")
    rows: list[tuple[str, ...]] = [(s,) for s in sources] if sources is not None else \
        ([tuple(cfg.sources)] if cfg.sources else [()])
    targets = list(targets or [cfg.target])
    for t in [*targets, *(s for r in rows for s in r)]:
        if t not in TASKS:
            raise ConfigError(f"unknown task {t!r}")
    for a in archs:
        if a != "baseline1" and rows == [()]:
            raise ConfigError(f"{a} needs source tasks")
    root = Path(out_dir or cfg.out or ".")
    root.mkdir(parents=True, exist_ok=True)
    cfg_path = root / "config.json"
    if cfg_path.exists():
        old = json.loads(cfg_path.read_text())
        if {k: v for k, v in old.items() if k not in ("architecture", "sources", "target", "out")} != \
                {k: v for k, v in cfg.to_dict().items() if k not in ("architecture", "sources", "target", "out")}:
            raise ConfigError(f"{root} holds a sweep with a different configuration")
    cfg.save(cfg_path)
    parallel = max_parallel() if parallel is None else parallel
    jobs = range(cfg.n_jobs)

    # Phase 1: baseline 1 on every target and every single-column source.
    b1_tasks = list(dict.fromkeys([*targets, *(r[0] for r in rows if r)]))
    phase1 = [(JobSpec("baseline1", (), t, j), None) for t in b1_tasks for j in jobs]
    records = _run_all(cfg, phase1, root, parallel)

    def source_ckpt(arch, row, j):
        if arch == "baseline4" or len(row) != 1:
            return None  # chains are trained inside the job
        return str(JobSpec("baseline1", (), row[0], j).directory(root) / "stage1" / "final.ckpt")

    phase2, seen = [], set()
    for a in archs:
        if a == "baseline1":
            continue
        for row in rows:
            for t in targets:
                for j in jobs:
                    arch, srcs = _job_key(a, row)
                    spec = JobSpec(arch, srcs, t, j)
                    if spec not in seen:
                        seen.add(spec)
                        phase2.append((spec, source_ckpt(a, row, j)))
    records += _run_all(cfg, phase2, root, parallel)
    by_cell: dict[tuple, list[JobRecord]] = {}
    for r in records:
        by_cell.setdefault((r.architecture, r.source, r.target), []).append(r)

    report = {"config": cfg.to_dict(), "architectures": archs, "targets": targets,
              "sources": ["+".join(r) or NO_SOURCE for r in rows],
              "protocol": {"score": "100 * topk_mean(AUC arch) / topk_mean(AUC baseline1)",
                           "auc": "trapezoid over (agent_steps, mean_score - min_score)",
                           "top_k": cfg.top_k, "n_jobs": cfg.n_jobs, "budget_per_stage": cfg.budget,
                           "window": cfg.window, "display_clip": DISPLAY_CLIP},
              "baseline1": {}, "cells": []}
    b1 = {}
    for t in targets:
        recs = by_cell.get(("baseline1", NO_SOURCE, t), [])
        stat, chosen = top_k_mean([r.auc for r in recs], cfg.top_k)
        b1[t] = stat
        report["baseline1"][t] = {"top_k_mean_auc": stat, "aucs": [r.auc for r in recs],
                                  "failed": sum(r.failed for r in recs)}
    matrices = {}
    for a in archs:
        vals = np.full((len(rows), len(targets)), math.nan)
        for ri, row in enumerate(rows):
            for ti, t in enumerate(targets):
                arch, srcs = _job_key(a, row)
                recs = by_cell.get((arch, "+".join(srcs) or NO_SOURCE, t), [])
                stat, chosen = top_k_mean([r.auc for r in recs], cfg.top_k)
                flags = []
                n_ok = sum(not r.failed for r in recs)
                if n_ok < cfg.top_k:
                    flags.append(f"only {n_ok} of {cfg.n_jobs} jobs survived (top_k={cfg.top_k})")
                denom = b1[t]
                if not denom > 0:
                    flags.append("degenerate baseline1 area")
                    score = math.nan
                else:
                    score = 100.0 * stat / denom
                vals[ri, ti] = score
                report["cells"].append({
                    "architecture": a, "source": "+".join(row) or NO_SOURCE, "target": t,
                    "score": None if math.isnan(score) else score,
                    "top_k_mean_auc": None if math.isnan(stat) else stat,
                    "baseline1_top_k_mean_auc": denom, "aucs": [r.auc for r in recs],
                    "chosen": chosen, "errors": [r.error for r in recs if r.failed], "flags": flags})
        m = TransferMatrix(a, ["+".join(r) or NO_SOURCE for r in rows], targets, vals)
        m.to_csv(root / f"matrix_{a}.csv")
        matrices[a] = m
    report["summary"] = {a: {"mean": matrices[a].mean(), "median": matrices[a].median()} for a in archs}
    _write_cells(root / "cells.csv", records)
    (root / "transfer_report.json").write_text(
        json.dumps(_jsonable(report), indent=1, sort_keys=True) + "\n")
    return SweepResult(matrices, report, records)


def _write_cells(path: Path, records: list[JobRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["architecture", "source", "target", "job", "seed", "auc", "failed", "error"])
        for r in sorted(records, key=lambda r: (r.architecture, r.source, r.target, r.job)):
            w.writerow([r.architecture, r.source, r.target, r.job, r.seed,
                        "" if math.isnan(r.auc) else repr(r.auc), int(r.failed), r.error])


def _jsonable(x):
    if isinstance(x, float):
        return None if math.isnan(x) else x
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x
