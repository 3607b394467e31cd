"""Synchronous batched advantage actor-critic.

A fixed set of worker environments is stepped in lockstep; every ``n_step``
agent steps the whole batch of transitions is turned into n-step returns and
one RMSProp update is applied to the trainable parameters.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from . import tensor as tc
from .checkpoint import checkpoint_save
from .envs import MIN_SCORE, CatchBatch, MiniCatch, Variant, make_variant
from .network import ALPHA_CHOICES, ProgressiveNetwork, forward, policy_value, trainable_params
from .tensor import Graph, NonFiniteError, Tensor

LEARNING_RATES = (1e-3, 5e-4, 1e-4)
ENTROPY_COEFS = (1e-2, 1e-3, 1e-4)
GRAD_CLIPS = (20.0, 40.0)
ALPHA_INITS = ALPHA_CHOICES

RMS_DECAY = 0.99
RMS_EPS = 1e-5
DEFAULT_WINDOW = 5000

LOG_COLUMNS = ("agent_steps", "mean_score", "episodes", "policy_loss", "value_loss",
               "entropy", "grad_norm")


class TrainingDiverged(FloatingPointError):
    """A non-finite loss or gradient showed up during an update."""


@dataclass(frozen=True)
class Hyper:
    learning_rate: float = 1e-3
    entropy_coef: float = 1e-2
    grad_clip: float = 40.0
    alpha_init: float = 0.1
    gamma: float = 0.99
    n_step: int = 5
    n_workers: int = 8
    value_coef: float = 0.5

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Hyper":
        return cls(**d)


def sample_hyper(rng_seed: int, **overrides) -> Hyper:
    """Uniform draw from each categorical set; other fields keep their defaults."""
    rng = np.random.default_rng([rng_seed, 0xA2C])
    draw = lambda choices: choices[int(rng.integers(len(choices)))]
    h = Hyper(learning_rate=draw(LEARNING_RATES), entropy_coef=draw(ENTROPY_COEFS),
              grad_clip=draw(GRAD_CLIPS), alpha_init=draw(ALPHA_INITS))
    return Hyper(**{**h.to_dict(), **overrides})


# ------------------------------------------------------------------ rollouts

@dataclass
class Trajectory:
    """``T`` lockstep transitions from ``W`` workers; arrays are time-major ``[T, W]``."""
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    log_probs: np.ndarray
    entropies: np.ndarray
    dones: np.ndarray
    bootstrap: np.ndarray  # [W]; V(s_T) or 0 where the last step ended an episode
    episodes: list[tuple[int, float]] = field(default_factory=list)  # (t, score) at episode end

    @property
    def n_steps(self) -> int:
        return self.actions.shape[0]

    @property
    def n_workers(self) -> int:
        return self.actions.shape[1]

    def __len__(self) -> int:
        return self.actions.size


def n_step_returns(rewards: np.ndarray, dones: np.ndarray, bootstrap: np.ndarray,
                   gamma: float) -> np.ndarray:
    """Discounted returns R_t = r_t + gamma (1 - done_t) R_{t+1}, R_T = bootstrap."""
    rewards = np.asarray(rewards, dtype=float)
    out = np.empty_like(rewards)
    running = np.asarray(bootstrap, dtype=float)
    for t in range(len(rewards) - 1, -1, -1):
        running = rewards[t] + gamma * np.where(dones[t], 0.0, running)
        out[t] = running
    return out


class EnvBatch:
    """Any list of single environments stepped one by one, with auto-reset.

    Uses the same episode-seed stream as ``CatchBatch``.
    """

    def __init__(self, envs: Sequence, seed: int):
        if not envs:
            raise ValueError("need at least one worker environment")
        self.envs = list(envs)
        self.rng = np.random.default_rng([seed, 0xE9])
        self.obs = np.stack([self._reset(e) for e in self.envs])
        self.scores = np.zeros(len(self.envs))

    def _reset(self, env):
        return env.reset(int(self.rng.integers(2**31)))

    def __len__(self) -> int:
        return len(self.envs)

    def step(self, actions) -> tuple[np.ndarray, np.ndarray, list[float | None]]:
        """Step every worker; finished episodes auto-reset. Returns rewards, dones, scores."""
        rewards = np.zeros(len(self.envs))
        dones = np.zeros(len(self.envs), dtype=bool)
        finished: list[float | None] = [None] * len(self.envs)
        for w, (env, a) in enumerate(zip(self.envs, actions)):
            obs, r, done = env.step(int(a))
            rewards[w] = r
            self.scores[w] += r
            if done:
                dones[w] = True
                finished[w] = float(self.scores[w])
                self.scores[w] = 0.0
                obs = self._reset(env)
            self.obs[w] = obs
        return rewards, dones, finished


def make_batch(task: str | Variant, n_workers: int, seed: int, task_seed: int = 0,
               **env_kwargs) -> CatchBatch:
    v = task if isinstance(task, Variant) else make_variant(task, task_seed)
    return CatchBatch(v, n_workers, seed, **env_kwargs)


def sample_actions(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One categorical draw per row by inverse CDF."""
    u = rng.random(probs.shape[0])
    a = (np.cumsum(probs, axis=1) <= u[:, None]).sum(axis=1)
    return np.minimum(a, probs.shape[1] - 1)


def _log_probs(probs: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(probs)


def _entropy(probs: np.ndarray) -> np.ndarray:
    safe = np.where(probs > 0, probs, 1.0)
    return -np.sum(probs * np.log(safe), axis=1)


def collect_rollout(net: ProgressiveNetwork, column: int, envs: EnvBatch, n_step: int,
                    rng: np.random.Generator) -> Trajectory:
    W = len(envs)
    obs = np.empty((n_step, W, *envs.obs.shape[1:]))
    actions = np.empty((n_step, W), dtype=np.int64)
    rewards, values, logps, ents = (np.empty((n_step, W)) for _ in range(4))
    dones = np.empty((n_step, W), dtype=bool)
    episodes = []
    for t in range(n_step):
        obs[t] = envs.obs
        p, v = policy_value(net, column, envs.obs)
        a = sample_actions(p, rng)
        actions[t] = a
        values[t] = v
        logps[t] = _log_probs(p)[np.arange(W), a]
        ents[t] = _entropy(p)
        rewards[t], dones[t], finished = envs.step(a)
        episodes.extend((t, s) for s in finished if s is not None)
    bootstrap = policy_value(net, column, envs.obs)[1].copy()
    bootstrap[dones[-1]] = 0.0
    return Trajectory(obs, actions, rewards, values, logps, ents, dones, bootstrap, episodes)


# ------------------------------------------------------------------ updates

@dataclass
class UpdateStats:
    policy_loss: float
    value_loss: float
    entropy: float
    grad_norm: float  # before clipping
    clipped_norm: float


class RMSProp:
    """Plain RMSProp: no momentum, no centring; eps sits inside the square root."""

    def __init__(self, learning_rate: float, decay: float = RMS_DECAY, eps: float = RMS_EPS):
        self.learning_rate = learning_rate
        self.decay = decay
        self.eps = eps
        self.mean_square: dict[str, np.ndarray] = {}

    def step(self, net: ProgressiveNetwork, grads: dict[str, np.ndarray]) -> None:
        for pid, g in grads.items():
            ms = self.mean_square.get(pid)
            if ms is None:
                ms = self.mean_square[pid] = np.zeros_like(g)
            ms *= self.decay
            ms += (1.0 - self.decay) * g * g
            net.get(pid)[...] -= self.learning_rate * g / np.sqrt(ms + self.eps)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict, float]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        grads = {k: g * (max_norm / norm) for k, g in grads.items()}
    return grads, norm


def _diagnostic(traj: Trajectory) -> str:
    return (f"trajectory T={traj.n_steps} W={traj.n_workers}: reward sum {traj.rewards.sum():.3g}, "
            f"value range [{traj.values.min():.3g}, {traj.values.max():.3g}], "
            f"min log-prob {traj.log_probs.min():.3g}, mean entropy {traj.entropies.mean():.3g}")


def a2c_loss(net: ProgressiveNetwork, column: int, traj: Trajectory, hyper: Hyper,
             params: Sequence[str] | None = None):
    """Build the actor-critic loss on a fresh graph. Returns (graph, loss, parts)."""
    T, W = traj.actions.shape
    returns = n_step_returns(traj.rewards, traj.dones, traj.bootstrap, hyper.gamma).reshape(-1)
    g = Graph()
    out = forward(net, column, traj.obs.reshape(T * W, *traj.obs.shape[2:]), graph=g, params=params)
    advantage = returns - out.value.data  # constant for the policy term
    logp = tc.log_softmax(out.logits)
    policy_loss = tc.mul_const(tc.sum(tc.mul(Tensor(advantage), tc.pick(logp, traj.actions.reshape(-1)))), -1.0)
    value_loss = tc.sum(tc.square(tc.sub(Tensor(returns), out.value)))
    entropy = tc.mul_const(tc.sum(tc.mul(out.policy, logp)), -1.0)
    loss = tc.add(tc.add(policy_loss, tc.mul_const(value_loss, hyper.value_coef)),
                  tc.mul_const(entropy, -hyper.entropy_coef))
    return g, loss, (float(policy_loss.data), float(value_loss.data), float(entropy.data))


def a2c_update(net: ProgressiveNetwork, column: int, traj: Trajectory, hyper: Hyper,
               opt: RMSProp, params: Sequence[str] | None = None) -> UpdateStats:
    """One gradient step on ``params`` (default: the trainable set)."""
    if len(traj) == 0:
        raise ValueError("empty trajectory")
    params = list(trainable_params(net) if params is None else params)
    try:
        g, loss, (pl, vl, ent) = a2c_loss(net, column, traj, hyper, params)
        grads = {k: t.data for k, t in g.backward(loss).items()}
    except NonFiniteError as exc:
        raise TrainingDiverged(f"{exc}; {_diagnostic(traj)}") from exc
    grads, norm = clip_by_global_norm(grads, hyper.grad_clip)
    if not math.isfinite(norm):
        raise TrainingDiverged(f"non-finite gradient norm; {_diagnostic(traj)}")
    opt.step(net, grads)
    clipped = math.sqrt(sum(float(np.sum(v * v)) for v in grads.values()))
    return UpdateStats(pl, vl, ent / len(traj), norm, clipped)


# ------------------------------------------------------------------ training

@dataclass
class LearningCurve:
    steps: list[int] = field(default_factory=list)
    scores: list[float] = field(default_factory=list)
    episodes: list[int] = field(default_factory=list)
    window: int = DEFAULT_WINDOW

    def __len__(self) -> int:
        return len(self.steps)

    def points(self) -> list[tuple[int, float]]:
        return list(zip(self.steps, self.scores))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["agent_steps", "mean_score", "episodes"])
            for row in zip(self.steps, self.scores, self.episodes):
                w.writerow([row[0], repr(float(row[1])), row[2]])

    @classmethod
    def from_csv(cls, path, window: int | None = None) -> "LearningCurve":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        c = cls(steps=[int(r["agent_steps"]) for r in rows],
                scores=[float(r["mean_score"]) for r in rows],
                episodes=[int(r.get("episodes") or 0) for r in rows])
        if window is not None:
            c.window = window
        elif len(c.steps) > 0:
            c.window = c.steps[0]
        return c


@dataclass
class _Window:
    scores: list = field(default_factory=list)
    stats: list = field(default_factory=list)


def _fmt(x: float) -> str:
    return repr(float(x))


def train(net: ProgressiveNetwork, column: int, task: str | Variant, hyper: Hyper,
          budget_steps: int, *, seed: int = 0, task_seed: int = 0,
          window: int = DEFAULT_WINDOW, params: Sequence[str] | None = None,
          log_dir=None, checkpoint_every: int | None = None, env_kwargs: dict | None = None,
          on_update: Callable[[int, UpdateStats], None] | None = None) -> LearningCurve:
    """Train column ``column`` on ``task`` for ``budget_steps`` agent steps.

    Agent steps count actions summed over workers. One curve point is emitted
    per ``window`` agent steps (plus a final partial window), holding the mean
    score of the episodes that finished inside it.
    """
    if budget_steps < 0:
        raise ValueError("budget must be non-negative")
    if column != net.n_columns:
        raise ValueError(f"only the last column ({net.n_columns}) is trainable, got {column}")
    env_kwargs = dict(env_kwargs or {})
    window = max(1, min(window, budget_steps)) if budget_steps else window
    curve = LearningCurve(window=window)
    log_dir = Path(log_dir) if log_dir is not None else None
    if log_dir is not None:
        log_dir.mkdir(parents=True, exist_ok=True)
        _write_metadata(log_dir / "run.json", net, column, task, hyper, budget_steps, seed,
                        task_seed, window, env_kwargs, params)
    if budget_steps == 0:
        if log_dir is not None:
            _write_log(log_dir / "log.csv", [])
        return curve

    W = hyper.n_workers
    envs = make_batch(task, W, seed, task_seed, **env_kwargs)
    rng = np.random.default_rng([seed, 0xAC7])
    opt = RMSProp(hyper.learning_rate)
    rows = []
    steps, cur, last_score = 0, _Window(), MIN_SCORE
    next_ckpt = checkpoint_every or 0

    def close_window(at: int):
        nonlocal cur, last_score
        if cur.scores:
            last_score = float(np.mean(cur.scores))
        curve.steps.append(at)
        curve.scores.append(last_score)
        curve.episodes.append(len(cur.scores))
        st = np.array([[s.policy_loss, s.value_loss, s.entropy, s.grad_norm] for s in cur.stats]) \
            if cur.stats else np.full((1, 4), np.nan)
        rows.append([at, last_score, len(cur.scores), *st.mean(axis=0)])
        cur = _Window()

    while steps < budget_steps:
        n = min(hyper.n_step, math.ceil((budget_steps - steps) / W))
        traj = collect_rollout(net, column, envs, n, rng)
        for t, score in traj.episodes:
            at = min(steps + (t + 1) * W, budget_steps)
            while at > (len(curve) + 1) * window:
                close_window((len(curve) + 1) * window)
            cur.scores.append(score)
        stats = a2c_update(net, column, traj, hyper, opt, params)
        cur.stats.append(stats)
        steps = min(steps + n * W, budget_steps)
        if on_update is not None:
            on_update(steps, stats)
        while steps >= (len(curve) + 1) * window:
            close_window((len(curve) + 1) * window)
        if log_dir is not None and checkpoint_every and steps >= next_ckpt:
            checkpoint_save(net, log_dir / "latest.ckpt")
            next_ckpt += checkpoint_every
    if not curve.steps or curve.steps[-1] < budget_steps:
        close_window(budget_steps)
    if log_dir is not None:
        _write_log(log_dir / "log.csv", rows)
        checkpoint_save(net, log_dir / "final.ckpt")
    return curve


def _write_log(path: Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r[0], _fmt(r[1]), r[2], *(_fmt(v) for v in r[3:])])


def _write_metadata(path: Path, net, column, task, hyper, budget, seed, task_seed, window,
                    env_kwargs, params) -> None:
    env = MiniCatch(task if isinstance(task, Variant) else "base", **env_kwargs)
    meta = {
        "version": f"prognet {__version__}",
        "task": task.kind if isinstance(task, Variant) else task,
        "task_seed": task_seed,
        "seed": seed,
        "column": column,
        "n_columns": net.n_columns,
        "column_seeds": [c.seed for c in net.columns],
        "hyper": hyper.to_dict(),
        "optimizer": {"name": "rmsprop", "decay": RMS_DECAY, "eps": RMS_EPS,
                      "momentum": 0.0, "centered": False},
        "budget_agent_steps": budget,
        "action_repeat": env.action_repeat,
        "env_steps_per_agent_step": env.action_repeat,
        "window": window,
        "env_kwargs": env_kwargs,
        "trained_params": "trainable" if params is None else sorted(params),
    }
    path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def evaluate(net: ProgressiveNetwork, column: int, task: str | Variant, n_episodes: int, *,
             seed: int = 0, task_seed: int = 0, n_workers: int = 16, perturb=None,
             env_kwargs: dict | None = None) -> float:
    """Mean score of the first ``n_episodes`` episodes finished under the sampled policy.

    ``perturb`` is passed to :func:`forward`; with a fixed ``seed`` the episode
    seeds and action draws are shared across calls (common random numbers).
    """
    if n_episodes <= 0:
        raise ValueError("n_episodes must be positive")
    envs = make_batch(task, min(n_workers, n_episodes), seed, task_seed, **(env_kwargs or {}))
    rng = np.random.default_rng([seed, 0xE7A1])
    scores: list[float] = []
    while len(scores) < n_episodes:
        p = (policy_value(net, column, envs.obs)[0] if perturb is None
             else forward(net, column, envs.obs, perturb=perturb).policy.data)
        _, _, finished = envs.step(sample_actions(p, rng))
        scores.extend(s for s in finished if s is not None)
    return float(np.mean(scores[:n_episodes]))
