"""Transfer measurements.

* Average Fisher Sensitivity (AFS): diagonal Fisher of ``log pi(a|s)`` with
  respect to normalised hidden activations, shared out across columns per
  feature and summarised per layer.
* Average Perturbation Sensitivity (APS): the noise level, relative to each
  feature's activation variance, that halves performance; its inverse is
  shared out across columns per layer.
* Transfer scores from learning-curve areas, and sorted AFS spectra.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as tc
from .envs import MIN_SCORE, Variant, random_policy_score
from .network import ProgressiveNetwork, forward, policy_value
from .tensor import Graph
from .trainer import LearningCurve, evaluate, make_batch, sample_actions

log = logging.getLogger(__name__)

NORM_EPS = 1e-8
APS_GRID = tuple(10.0 ** e for e in range(-3, 5))
APS_BISECT_STEPS = 12
APS_EPISODES = 20


class AnalysisError(ValueError):
    """Inputs that make a measurement meaningless."""


class DegenerateBaselineError(AnalysisError):
    """The baseline curve has zero area after shifting, so ratios are undefined."""


# ----------------------------------------------------------------- samples

@dataclass
class RhoSamples:
    """State-action pairs gathered by running one column's policy on a task."""
    obs: np.ndarray
    actions: np.ndarray
    column: int
    task: str

    def __len__(self) -> int:
        return len(self.actions)

    def batches(self, size: int):
        for s in range(0, len(self), size):
            yield self.obs[s:s + size], self.actions[s:s + size]


def _task_name(task) -> str:
    return task.kind if isinstance(task, Variant) else str(task)


def collect_rho_samples(net: ProgressiveNetwork, k: int, task, n_samples: int, *, seed: int = 0,
                        task_seed: int = 0, n_workers: int = 16,
                        env_kwargs: dict | None = None) -> RhoSamples:
    if n_samples <= 0:
        raise AnalysisError(f"n_samples must be positive, got {n_samples}")
    envs = make_batch(task, n_workers, seed, task_seed, **(env_kwargs or {}))
    rng = np.random.default_rng([seed, 0x5A])
    obs, actions = [], []
    have = 0
    while have < n_samples:
        p = policy_value(net, k, envs.obs)[0]
        a = sample_actions(p, rng)
        obs.append(envs.obs.copy())
        actions.append(a)
        have += len(a)
        envs.step(a)
    return RhoSamples(np.concatenate(obs)[:n_samples], np.concatenate(actions)[:n_samples],
                      k, _task_name(task))


# ------------------------------------------------------------- accumulators

@dataclass
class Moments:
    """Per-feature count, mean and sum of squared deviations; mergeable."""
    count: int
    mean: np.ndarray
    m2: np.ndarray

    @classmethod
    def of(cls, x: np.ndarray) -> "Moments":
        """Moments of rows of ``x`` (``[n, features]``)."""
        mean = x.mean(axis=0)
        return cls(len(x), mean, ((x - mean) ** 2).sum(axis=0))

    def merge(self, other: "Moments") -> "Moments":
        n = self.count + other.count
        if n == 0:
            return self
        delta = other.mean - self.mean
        mean = self.mean + delta * other.count / n
        m2 = self.m2 + other.m2 + delta ** 2 * self.count * other.count / n
        return Moments(n, mean, m2)

    @property
    def var(self) -> np.ndarray:
        if self.count == 0:
            raise AnalysisError("no samples behind these moments")
        return self.m2 / self.count


def _feature_rows(h: np.ndarray) -> np.ndarray:
    """``[B, C, H, W]`` -> ``[B*H*W, C]``; dense ``[B, M]`` is returned unchanged."""
    if h.ndim == 4:
        return h.transpose(0, 2, 3, 1).reshape(-1, h.shape[1])
    return h


def _per_feature(v: np.ndarray, ndim: int) -> np.ndarray:
    return v[None, :, None, None] if ndim == 4 else v[None, :]


@dataclass
class ActivationStats:
    """Running activation moments per ``(layer, column)``."""
    moments: dict[tuple[int, int], Moments] = field(default_factory=dict)

    def add(self, key: tuple[int, int], h: np.ndarray) -> None:
        m = Moments.of(_feature_rows(h))
        self.moments[key] = self.moments[key].merge(m) if key in self.moments else m

    def merge(self, other: "ActivationStats") -> "ActivationStats":
        out = ActivationStats(dict(self.moments))
        for key, m in other.moments.items():
            out.moments[key] = out.moments[key].merge(m) if key in out.moments else m
        return out

    def var(self, key) -> np.ndarray:
        return self.moments[key].var

    def std(self, key, eps: float = NORM_EPS) -> np.ndarray:
        return np.sqrt(self.var(key) + eps)


def activation_stats(net: ProgressiveNetwork, k: int, samples: RhoSamples,
                     batch: int = 512) -> ActivationStats:
    stats = ActivationStats()
    for obs, _ in samples.batches(batch):
        for key, h in forward(net, k, obs).activations.items():
            stats.add(key, h.data)
    return stats


@dataclass
class FisherAccumulator:
    """Sums of squared normalised-activation gradients per ``(layer, column)``."""
    sums: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    count: int = 0

    def add(self, key, sq: np.ndarray) -> None:
        self.sums[key] = self.sums[key] + sq if key in self.sums else sq

    def merge(self, other: "FisherAccumulator") -> "FisherAccumulator":
        out = FisherAccumulator(dict(self.sums), self.count + other.count)
        for key, s in other.sums.items():
            out.sums[key] = out.sums[key] + s if key in out.sums else s
        return out

    def mean(self, key) -> np.ndarray:
        if self.count == 0:
            raise AnalysisError("empty Fisher accumulator")
        return self.sums[key] / self.count


def log_policy_grads(net: ProgressiveNetwork, k: int, obs: np.ndarray, actions: np.ndarray):
    """Per-sample d log pi(a|s) / d h for every hidden activation of columns 1..k.

    Samples do not interact in the forward pass, so one backward pass of the
    summed log-likelihood yields every per-sample gradient at once.
    """
    g = Graph()
    out = forward(net, k, obs, graph=g, params=(), watch=True)
    loss = tc.sum(tc.pick(tc.log_softmax(out.logits), actions))
    return {key: t.data for key, t in g.backward(loss).items()}


def compute_fisher(net: ProgressiveNetwork, k: int, samples: RhoSamples, stats: ActivationStats,
                   batch: int = 512, eps: float = NORM_EPS) -> FisherAccumulator:
    acc = FisherAccumulator()
    for obs, actions in samples.batches(batch):
        for key, grad in log_policy_grads(net, k, obs, actions).items():
            ghat = grad * _per_feature(stats.std(key, eps), grad.ndim)
            sq = ghat ** 2
            if sq.ndim == 4:
                sq = sq.sum(axis=(2, 3))  # pixel locations of a feature map
            acc.add(key, sq.sum(axis=0))
        acc.count += len(actions)
    return acc


# ------------------------------------------------------------------ reports

@dataclass
class SensitivityReport:
    layer_labels: list[str]
    column_labels: list[str]
    fisher: list[np.ndarray]            # per layer, [K, M_i]
    afs_feature: list[np.ndarray]       # per layer, [K, M_i]; NaN where undefined
    afs_layer_raw: np.ndarray           # [L, K] sums over defined features
    afs_layer: np.ndarray               # [L, K] renormalised to sum to 1 per layer
    n_samples: int
    aps_lambda: np.ndarray | None = None
    aps: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_layers(self) -> int:
        return len(self.layer_labels)

    @property
    def n_columns(self) -> int:
        return len(self.column_labels)

    @property
    def missing(self) -> list[tuple[int, int]]:
        """(layer, feature) pairs, 1-based, whose total Fisher is zero."""
        return [(i + 1, int(m)) for i, a in enumerate(self.afs_feature)
                for m in np.flatnonzero(np.isnan(a[0]))]

    def to_dict(self) -> dict:
        return {
            "layers": self.layer_labels,
            "columns": self.column_labels,
            "n_samples": self.n_samples,
            "afs_layer": _nan_to_none(self.afs_layer),
            "afs_layer_raw": _nan_to_none(self.afs_layer_raw),
            "aps": None if self.aps is None else _nan_to_none(self.aps),
            "aps_lambda": None if self.aps_lambda is None else _nan_to_none(self.aps_lambda),
            "fisher": [_nan_to_none(f) for f in self.fisher],
            "afs_feature": [_nan_to_none(a) for a in self.afs_feature],
            "missing": self.missing,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SensitivityReport":
        arr = lambda v: None if v is None else _none_to_nan(v)
        return cls(d["layers"], d["columns"], [arr(f) for f in d["fisher"]],
                   [arr(a) for a in d["afs_feature"]], arr(d["afs_layer_raw"]), arr(d["afs_layer"]),
                   d["n_samples"], arr(d.get("aps_lambda")), arr(d.get("aps")), d.get("meta", {}))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "SensitivityReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def write_feature_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "column", "feature", "fisher", "afs"])
            for i, (f, a) in enumerate(zip(self.fisher, self.afs_feature), 1):
                for j in range(f.shape[0]):
                    for m in range(f.shape[1]):
                        w.writerow([i, j + 1, m, repr(float(f[j, m])),
                                    "" if np.isnan(a[j, m]) else repr(float(a[j, m]))])


def _nan_to_none(a: np.ndarray):
    return [(_nan_to_none(x) if isinstance(x, np.ndarray) else (None if math.isnan(x) else float(x)))
            for x in np.asarray(a, dtype=float)]


def _none_to_nan(v) -> np.ndarray:
    def conv(x):
        return [conv(y) for y in x] if isinstance(x, list) else (math.nan if x is None else x)
    return np.array(conv(v), dtype=float)


def afs_from_fisher(F: Sequence[np.ndarray]) -> tuple[list[np.ndarray], np.ndarray, np.ndarray]:
    """Normalise per-layer Fisher blocks ``[K, M_i]`` across columns.

    Returns per-feature AFS (NaN where the total is zero), raw per-layer sums
    and per-layer shares renormalised to sum to one.
    """
    feats, raw = [], []
    for i, f in enumerate(F, 1):
        total = f.sum(axis=0)
        defined = total > 0
        a = np.full(f.shape, np.nan)
        a[:, defined] = f[:, defined] / total[defined]
        if not defined.all():
            log.info("layer %d: AFS undefined for %d feature(s) with zero Fisher: %s",
                     i, int((~defined).sum()), np.flatnonzero(~defined).tolist())
        feats.append(a)
        raw.append(a[:, defined].sum(axis=1))
    raw = np.array(raw)
    sums = raw.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        layer = np.where(sums > 0, raw / np.where(sums > 0, sums, 1.0), np.nan)
    return feats, raw, layer


def compute_afs(net: ProgressiveNetwork, k: int, samples: RhoSamples, *, batch: int = 512,
                eps: float = NORM_EPS, column_labels: Sequence[str] | None = None) -> SensitivityReport:
    if len(samples) == 0:
        raise AnalysisError("no samples")
    stats = activation_stats(net, k, samples, batch)
    fisher = compute_fisher(net, k, samples, stats, batch, eps)
    F = [np.stack([fisher.mean((i, j)) for j in range(1, k + 1)]) for i in range(1, net.n_layers + 1)]
    feats, raw, layer = afs_from_fisher(F)
    labels = list(column_labels) if column_labels is not None else \
        [net.column(j).task or f"column{j}" for j in range(1, k + 1)]
    return SensitivityReport(
        layer_labels=[f"{s.kind}{i}" for i, s in enumerate(net.layer_specs, 1)],
        column_labels=labels, fisher=F, afs_feature=feats, afs_layer_raw=raw, afs_layer=layer,
        n_samples=len(samples),
        meta={"task": samples.task, "column": k, "norm_eps": eps,
              "conv_features": "squared gradients summed over pixel locations"})


# ---------------------------------------------------------------------- APS

@dataclass
class ApsResult:
    layer: int
    column: int
    lam: float                     # 1 / sigma^2, or 0 when the drop is never reached
    sigma2: float | None
    baseline: float
    floor: float
    threshold: float
    probes: list[tuple[float, float]]
    flag: str | None = None


def noise_perturbation(std: np.ndarray, sigma2: float, seed) -> callable:
    """Fresh Gaussian noise per call, variance ``sigma2 * var`` per feature."""
    rng = np.random.default_rng(seed)
    scale = np.sqrt(sigma2) * std

    def perturb(h: np.ndarray) -> np.ndarray:
        return h + rng.standard_normal(h.shape) * _per_feature(scale, h.ndim)

    return perturb


def compute_aps(net: ProgressiveNetwork, k: int, task, layer: int, column: int, *,
                episodes_per_probe: int = APS_EPISODES, target_drop: float = 0.5,
                stats: ActivationStats, floor: float, baseline: float | None = None,
                seed: int = 0, grid: Sequence[float] = APS_GRID,
                bisect_steps: int = APS_BISECT_STEPS) -> ApsResult:
    """Noise precision at which column ``column``'s layer ``layer`` halves performance.

    Every probe uses the same episode seeds, action draws and unit-noise
    stream, so only the noise scale differs between probes. The score is
    assumed non-increasing in sigma^2; the smallest crossing wins.
    """
    std = np.sqrt(stats.var((layer, column)))
    def score(sigma2: float) -> float:
        perturb = {(layer, column): noise_perturbation(std, sigma2, [seed, layer, column, 0x4E])}
        return evaluate(net, k, task, episodes_per_probe, seed=seed, perturb=perturb)

    if baseline is None:
        baseline = evaluate(net, k, task, episodes_per_probe, seed=seed)
    threshold = baseline - target_drop * (baseline - floor)
    if baseline <= floor:
        return ApsResult(layer, column, 0.0, None, baseline, floor, threshold, [],
                         "baseline at or below the random-policy floor")
    sigma2, probes = bisect_noise_level(score, threshold, grid, bisect_steps)
    if sigma2 is None:
        return ApsResult(layer, column, 0.0, None, baseline, floor, threshold, probes,
                         f"no {target_drop:.0%} drop up to sigma^2={grid[-1]:g}")
    return ApsResult(layer, column, 1.0 / sigma2, sigma2, baseline, floor, threshold, probes)


def bisect_noise_level(score, threshold: float, grid: Sequence[float] = APS_GRID,
                       steps: int = APS_BISECT_STEPS) -> tuple[float | None, list[tuple[float, float]]]:
    """Smallest grid level whose score is at or below ``threshold``, refined by
    log-space bisection against the grid point before it.

    Returns ``(None, probes)`` when no grid point crosses.
    """
    probes: list[tuple[float, float]] = []
    hit = None
    for idx, s2 in enumerate(grid):
        sc = score(s2)
        probes.append((s2, sc))
        if sc <= threshold:
            hit = idx
            break
    if hit is None:
        return None, probes
    hi = grid[hit]
    lo = grid[hit - 1] if hit > 0 else grid[0] / 10.0
    for _ in range(steps):
        mid = math.sqrt(lo * hi)
        sc = score(mid)
        probes.append((mid, sc))
        if sc <= threshold:
            hi = mid
        else:
            lo = mid
    return hi, probes


def normalize_aps(lam: np.ndarray) -> np.ndarray:
    """Share of each column in every layer's total precision; NaN rows where all are zero."""
    lam = np.asarray(lam, dtype=float)
    tot = lam.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(tot > 0, lam / np.where(tot > 0, tot, 1.0), np.nan)


def aps_matrix(net: ProgressiveNetwork, k: int, task, *, samples: RhoSamples | None = None,
               n_samples: int = 2000, episodes_per_probe: int = APS_EPISODES,
               target_drop: float = 0.5, floor_episodes: int = 500, seed: int = 0,
               ) -> tuple[np.ndarray, np.ndarray, list[ApsResult]]:
    """Lambda and normalised APS for every (layer, column) of column ``k``'s network."""
    if samples is None:
        samples = collect_rho_samples(net, k, task, n_samples, seed=seed)
    stats = activation_stats(net, k, samples)
    floor = random_policy_score(task, floor_episodes, seed)
    baseline = evaluate(net, k, task, episodes_per_probe, seed=seed)
    lam = np.zeros((net.n_layers, k))
    results = []
    for i in range(1, net.n_layers + 1):
        for j in range(1, k + 1):
            r = compute_aps(net, k, task, i, j, episodes_per_probe=episodes_per_probe,
                            target_drop=target_drop, stats=stats, floor=floor,
                            baseline=baseline, seed=seed)
            if r.flag:
                log.info("APS layer %d column %d: %s", i, j, r.flag)
            lam[i - 1, j - 1] = r.lam
            results.append(r)
    return lam, normalize_aps(lam), results


def attach_aps(report: SensitivityReport, lam: np.ndarray, results: Sequence[ApsResult]) -> None:
    report.aps_lambda = np.asarray(lam, dtype=float)
    report.aps = normalize_aps(lam)
    report.meta["aps"] = {
        "grid": list(APS_GRID), "bisect_steps": APS_BISECT_STEPS,
        "monotonicity": "score assumed non-increasing in sigma^2; smallest crossing taken",
        "floor": "random-policy score",
        "flags": [[r.layer, r.column, r.flag] for r in results if r.flag],
    }


# ---------------------------------------------------------- rank agreement

def rankdata(x) -> np.ndarray:
    """1-based ranks, ties sharing their average rank."""
    x = np.asarray(x, dtype=float)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    xs = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def spearman(a, b) -> float:
    """Spearman rank correlation; NaN if either side is constant."""
    ra, rb = rankdata(a), rankdata(b)
    ra, rb = ra - ra.mean(), rb - rb.mean()
    den = math.sqrt(float((ra * ra).sum() * (rb * rb).sum()))
    return float((ra * rb).sum() / den) if den > 0 else math.nan


# ------------------------------------------------------------ transfer score

@dataclass(frozen=True)
class TransferScore:
    percent: float
    source: str | None = None
    target: str | None = None
    architecture: str | None = None


def _xy(curve) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(curve, LearningCurve):
        return np.asarray(curve.steps, float), np.asarray(curve.scores, float)
    pts = np.asarray(curve, dtype=float)
    return pts[:, 0], pts[:, 1]


def trapezoid(x: np.ndarray, y: np.ndarray) -> float:
    x, y = np.asarray(x, float), np.asarray(y, float)
    return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0))


def auc(curve, min_score: float = MIN_SCORE) -> float:
    """Trapezoidal area under a curve shifted so the task's worst score sits at zero."""
    x, y = _xy(curve)
    return trapezoid(x, y - min_score)


def transfer_score(curve_arch, curve_baseline1, *, min_score: float = MIN_SCORE,
                   source: str | None = None, target: str | None = None,
                   architecture: str | None = None) -> TransferScore:
    """100 x AUC(arch) / AUC(baseline); arch is linearly resampled onto the baseline grid."""
    xa, ya = _xy(curve_arch)
    xb, yb = _xy(curve_baseline1)
    if len(xa) != len(xb) or not np.array_equal(xa, xb):
        ya = np.interp(xb, xa, ya)
    den = trapezoid(xb, yb - min_score)
    if not den > 0:
        raise DegenerateBaselineError(f"baseline area is {den}; transfer score undefined")
    return TransferScore(100.0 * trapezoid(xb, ya - min_score) / den, source, target, architecture)


# ------------------------------------------------------------------ spectra

@dataclass
class Spectrum:
    per_network: list[np.ndarray]
    abscissa: np.ndarray
    mean: np.ndarray

    @property
    def area(self) -> float:
        """Area under the mean spectrum on the unit abscissa (mean AFS value if flat)."""
        if len(self.mean) == 1:
            return float(self.mean[0])
        return trapezoid(self.abscissa, self.mean)


def _unit_axis(n: int) -> np.ndarray:
    return np.zeros(1) if n == 1 else np.linspace(0.0, 1.0, n)


def afs_spectrum(reports: Iterable[SensitivityReport], layer: int,
                 which: str = "final_column", n_points: int | None = None) -> Spectrum:
    """Sorted (descending) per-feature AFS of the chosen columns at ``layer`` (1-based).

    Networks with different numbers of values are stretched onto a common
    unit abscissa by linear interpolation before averaging.
    """
    if which not in ("final_column", "source_columns"):
        raise ValueError("which must be 'final_column' or 'source_columns'")
    vecs = []
    for r in reports:
        a = r.afs_feature[layer - 1]
        block = a[-1:] if which == "final_column" else a[:-1]
        v = block.reshape(-1)
        vecs.append(np.sort(v[~np.isnan(v)])[::-1])
    if not vecs:
        raise AnalysisError("need at least one report")
    n = n_points or max(len(v) for v in vecs)
    grid = _unit_axis(n)
    resampled = []
    for v in vecs:
        if len(v) == n:
            resampled.append(v)
        elif len(v) == 0:
            resampled.append(np.full(n, np.nan))
        else:
            resampled.append(np.interp(grid, _unit_axis(len(v)), v) if len(v) > 1 else np.full(n, v[0]))
    return Spectrum(vecs, grid, np.nanmean(np.stack(resampled), axis=0))
