"""MiniCatch: a 16x16 single-channel paddle-and-ball game plus Pong-Soup style variants.

A ball spawns in a random cell of the top row with a random horizontal
velocity in {-1, 0, +1}, falls ``ball_speed`` rows per tick and bounces off
the side walls. The paddle (``2 * paddle_half_width + 1`` pixels, bottom row)
moves one cell per tick. When the ball reaches the row above the paddle it is
caught (+1) if it lies over the paddle, otherwise missed (-1). An episode ends
on a miss, after ``catch_limit`` catches, or after ``max_ticks`` ticks.

Variants change only what the agent sees (plus, for horizontal flips with
``flip_controls=False``, which way its actions move the paddle).
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np

LEFT, STAY, RIGHT = 0, 1, 2
N_ACTIONS = 3
_MOVE = (-1, 0, 1)

MIN_SCORE = -1.0  # a miss before any catch
TASKS = ("base", "noisy", "black", "white", "hflip", "vflip", "hvflip", "zoom")
GRID = 16


class EnvError(RuntimeError):
    """Environment used outside its contract (e.g. stepping a finished episode)."""


@dataclass(frozen=True)
class Variant:
    kind: str = "base"
    seed: int = 0
    flip_controls: bool = True
    noise_sigma: float = 0.2
    zoom_scale: float = 0.75
    zoom_offset: int = 2
    sprite_level: float = 0.5  # sprite intensity for "black"

    def __post_init__(self):
        if self.kind not in TASKS:
            raise ValueError(f"unknown task {self.kind!r}; choose from {', '.join(TASKS)}")

    @property
    def name(self) -> str:
        return self.kind

    @cached_property
    def noise_mask(self) -> np.ndarray:
        rng = np.random.default_rng([self.seed, 0x5EED])
        mask = rng.normal(0.0, self.noise_sigma, size=(GRID, GRID))
        mask.flags.writeable = False
        return mask

    @cached_property
    def _zoom_starts(self) -> np.ndarray:
        dest = np.floor(np.arange(GRID) * self.zoom_scale).astype(int)
        return np.flatnonzero(np.r_[True, dest[1:] != dest[:-1]])

    @property
    def mirrors_controls(self) -> bool:
        return self.kind in ("hflip", "hvflip") and not self.flip_controls


def make_variant(name: str, seed: int = 0, **kw) -> Variant:
    return Variant(kind=name, seed=seed, **kw)


def apply_variant(frame: np.ndarray, v: Variant) -> np.ndarray:
    """Turn raw frames (background 0, sprites 1; last two axes are rows, cols) into what the agent sees."""
    k = v.kind
    if k == "base":
        return frame
    if k == "noisy":
        return np.clip(frame + v.noise_mask, 0.0, 1.0)
    if k == "black":
        return frame * v.sprite_level
    if k == "white":
        return 1.0 - frame
    if k == "hflip":
        return frame[..., :, ::-1]
    if k == "vflip":
        return frame[..., ::-1, :]
    if k == "hvflip":
        return frame[..., ::-1, ::-1]
    # zoom: nearest-neighbour forward mapping, overlapping pixels combined by max
    starts = v._zoom_starts
    small = np.maximum.reduceat(np.maximum.reduceat(frame, starts, axis=-2), starts, axis=-1)
    out = np.zeros_like(frame)
    o, n = v.zoom_offset, small.shape[-1]
    out[..., o:o + n, o:o + n] = small[..., :GRID - o, :GRID - o]
    return out


@dataclass
class GameState:
    paddle: int
    ball_x: int
    ball_y: int
    ball_vx: int
    score: float = 0.0
    tick: int = 0
    catches: int = 0
    done: bool = False


class MiniCatch:
    def __init__(self, variant: Variant | str = "base", action_repeat: int = 2,
                 frame_stack: int = 2, paddle_half_width: int = 2, ball_speed: int = 3,
                 max_ticks: int = 128, catch_limit: int = 1):
        self.variant = make_variant(variant) if isinstance(variant, str) else variant
        if action_repeat < 1 or frame_stack < 1:
            raise ValueError("action_repeat and frame_stack must be >= 1")
        self.action_repeat = action_repeat
        self.frame_stack = frame_stack
        self.hw = paddle_half_width
        self.ball_speed = ball_speed
        self.max_ticks = max_ticks
        self.catch_limit = catch_limit
        self.size = GRID
        self.state: GameState | None = None
        self._frames: deque = deque(maxlen=frame_stack)
        self._balls: list[tuple[int, int]] = []
        self._rng = None

    @property
    def obs_shape(self) -> tuple[int, int, int]:
        return (self.frame_stack, GRID, GRID)

    # -- episode control ------------------------------------------------------

    def _ball(self, n: int) -> tuple[int, int]:
        while len(self._balls) <= n:
            x = int(self._rng.integers(GRID))
            vx = int(self._rng.integers(3)) - 1
            self._balls.append((x, vx))
        return self._balls[n]

    def reset(self, episode_seed: int) -> np.ndarray:
        self._rng = np.random.default_rng(episode_seed)
        self._balls = []
        x, vx = self._ball(0)
        return self.reset_state(GameState(paddle=GRID // 2, ball_x=x, ball_y=0, ball_vx=vx))

    def reset_state(self, state: GameState) -> np.ndarray:
        """Start from an explicit state; later balls come from the current seed."""
        if self._rng is None:
            self._rng = np.random.default_rng(0)
        self.state = replace(state)
        frame = self.observe_frame()
        self._frames.clear()
        for _ in range(self.frame_stack):
            self._frames.append(frame)
        return self.observation()

    # -- dynamics ---------------------------------------------------------------

    def advance(self, s: GameState, action: int) -> tuple[GameState, float]:
        """One tick from ``s`` under ``action`` (pure; returns a new state)."""
        s = replace(s)
        return s, self._tick(s, action)

    def _tick(self, s: GameState, action: int) -> float:
        if self.variant.mirrors_controls:
            action = 2 - action
        hw, top = self.hw, GRID - 1
        s.paddle = min(max(s.paddle + _MOVE[action], hw), top - hw)
        x, vx = s.ball_x + s.ball_vx, s.ball_vx
        if x < 0:
            x, vx = -x, -vx
        elif x > top:
            x, vx = 2 * top - x, -vx
        s.ball_x, s.ball_vx = x, vx
        s.ball_y += self.ball_speed
        s.tick += 1
        reward = 0.0
        if s.ball_y >= GRID - 2:
            s.ball_y = GRID - 2
            if abs(s.ball_x - s.paddle) <= hw:
                reward = 1.0
                s.catches += 1
                if s.catches >= self.catch_limit:
                    s.done = True
                else:
                    s.ball_x, s.ball_vx = self._ball(s.catches)
                    s.ball_y = 0
            else:
                reward = -1.0
                s.done = True
        if s.tick >= self.max_ticks:
            s.done = True
        s.score += reward
        return reward

    def step(self, action: int) -> tuple[np.ndarray, float, bool]:
        s = self.state
        if s is None or s.done:
            raise EnvError("step() called on a finished or unstarted episode; call reset()")
        if action not in (LEFT, STAY, RIGHT):
            raise EnvError(f"invalid action {action!r}")
        total = 0.0
        for _ in range(self.action_repeat):
            total += self._tick(s, action)
            self._frames.append(self.observe_frame())
            if s.done:
                break
        return self.observation(), total, s.done

    # -- rendering --------------------------------------------------------------

    def raw_frame(self, s: GameState | None = None) -> np.ndarray:
        s = self.state if s is None else s
        f = np.zeros((GRID, GRID))
        f[-1, s.paddle - self.hw:s.paddle + self.hw + 1] = 1.0
        f[s.ball_y, s.ball_x] = 1.0
        return f

    def observe_frame(self) -> np.ndarray:
        return apply_variant(self.raw_frame(), self.variant)

    def observation(self) -> np.ndarray:
        return np.stack(self._frames)

    # -- planning ---------------------------------------------------------------

    def optimal_return_from(self, state: GameState) -> float:
        """Best achievable return-to-go by exhaustive search over action sequences.

        Branches are memoised on the game state, which (with the seeded ball
        sequence) fully determines the future.
        """
        memo: dict[tuple, float] = {}

        def best(s: GameState) -> float:
            key = (s.paddle, s.ball_x, s.ball_y, s.ball_vx, s.tick, s.catches)
            if key in memo:
                return memo[key]
            value = -np.inf
            for a in (LEFT, STAY, RIGHT):
                cur, ret = s, 0.0
                for _ in range(self.action_repeat):
                    cur, r = self.advance(cur, a)
                    ret += r
                    if cur.done:
                        break
                if not cur.done:
                    ret += best(cur)
                value = max(value, ret)
            memo[key] = value
            return value

        return 0.0 if state.done else best(state)


def optimal_return(variant: Variant | str, episode_seed: int, **env_kwargs) -> float:
    env = MiniCatch(variant, **env_kwargs)
    env.reset(episode_seed)
    return env.optimal_return_from(env.state)


def mean_optimal_return(variant: Variant | str = "base", n_episodes: int = 200,
                        first_seed: int = 0, **env_kwargs) -> float:
    return float(np.mean([optimal_return(variant, s, **env_kwargs)
                          for s in range(first_seed, first_seed + n_episodes)]))


def random_policy_score(variant: Variant | str, n_episodes: int, seed: int, **env_kwargs) -> float:
    """Mean return of a uniformly random policy (the floor for noise probes)."""
    rng = np.random.default_rng(seed)
    env = MiniCatch(variant, **env_kwargs)
    total = 0.0
    for _ in range(n_episodes):
        env.reset(int(rng.integers(2**31)))
        done = False
        while not done:
            _, r, done = env.step(int(rng.integers(N_ACTIONS)))
            total += r
    return total / n_episodes


def make_env(task: str | Variant, task_seed: int = 0, **env_kwargs) -> MiniCatch:
    v = task if isinstance(task, Variant) else make_variant(task, task_seed)
    return MiniCatch(v, **env_kwargs)


class CatchBatch:
    """Lockstep MiniCatch games sharing one variant, vectorised over workers.

    Produces the same observation, reward and reset stream as stepping a list
    of ``MiniCatch`` instances one by one with auto-reset; episode seeds are
    drawn from ``default_rng([seed, 0xE9])`` in worker order.
    """

    def __init__(self, variant: Variant | str, n_workers: int, seed: int, action_repeat: int = 2,
                 frame_stack: int = 2, paddle_half_width: int = 2, ball_speed: int = 3,
                 max_ticks: int = 128, catch_limit: int = 1):
        if n_workers < 1:
            raise ValueError("need at least one worker")
        self.proto = MiniCatch(variant, action_repeat, frame_stack, paddle_half_width,
                               ball_speed, max_ticks, catch_limit)
        self.variant = self.proto.variant
        self.n = n_workers
        self.rng = np.random.default_rng([seed, 0xE9])
        self._rows = np.arange(n_workers)
        self._span = np.arange(-paddle_half_width, paddle_half_width + 1)
        z = lambda: np.zeros(n_workers, dtype=np.int64)
        self.paddle, self.bx, self.by, self.vx = z(), z(), z(), z()
        self.tick, self.catches = z(), z()
        self.done = np.zeros(n_workers, dtype=bool)
        self.scores = np.zeros(n_workers)
        self._ball_rngs: list = [None] * n_workers
        self._balls: list[list] = [[] for _ in range(n_workers)]
        self.obs = np.zeros((n_workers, *self.proto.obs_shape))
        for w in range(n_workers):
            self._reset(w)

    def __len__(self) -> int:
        return self.n

    def _ball(self, w: int, k: int) -> tuple[int, int]:
        balls, r = self._balls[w], self._ball_rngs[w]
        while len(balls) <= k:
            balls.append((int(r.integers(GRID)), int(r.integers(3)) - 1))
        return balls[k]

    def _reset(self, w: int) -> None:
        self._ball_rngs[w] = np.random.default_rng(int(self.rng.integers(2**31)))
        self._balls[w] = []
        self.bx[w], self.vx[w] = self._ball(w, 0)
        self.paddle[w], self.by[w] = GRID // 2, 0
        self.tick[w] = self.catches[w] = 0
        self.done[w] = False
        self.scores[w] = 0.0
        self.obs[w] = self._render(np.array([w]))[0]

    def _render(self, rows: np.ndarray) -> np.ndarray:
        f = np.zeros((len(rows), GRID, GRID))
        idx = np.arange(len(rows))
        f[idx[:, None], GRID - 1, self.paddle[rows][:, None] + self._span] = 1.0
        f[idx, self.by[rows], self.bx[rows]] = 1.0
        return apply_variant(f, self.variant)

    def _tick(self, move: np.ndarray) -> np.ndarray:
        p = self.proto
        live = ~self.done
        top = GRID - 1
        self.paddle = np.where(live, np.clip(self.paddle + move, p.hw, top - p.hw), self.paddle)
        x = self.bx + self.vx
        bounce = (x < 0) | (x > top)
        x = np.where(x < 0, -x, np.where(x > top, 2 * top - x, x))
        self.bx = np.where(live, x, self.bx)
        self.vx = np.where(live & bounce, -self.vx, self.vx)
        self.by = np.where(live, self.by + p.ball_speed, self.by)
        self.tick = self.tick + live
        land = live & (self.by >= GRID - 2)
        self.by = np.minimum(self.by, GRID - 2)
        caught = land & (np.abs(self.bx - self.paddle) <= p.hw)
        reward = caught.astype(float) - (land & ~caught)
        self.catches = self.catches + caught
        self.done = self.done | (land & ~caught) | (caught & (self.catches >= p.catch_limit))
        for w in np.flatnonzero(caught & ~self.done):
            self.bx[w], self.vx[w] = self._ball(w, int(self.catches[w]))
            self.by[w] = 0
        self.done = self.done | (live & (self.tick >= p.max_ticks))
        return reward

    def step(self, actions) -> tuple[np.ndarray, np.ndarray, list[float | None]]:
        """Advance every game by one agent step; finished games are reset."""
        actions = np.asarray(actions)
        if actions.shape != (self.n,) or np.any((actions < 0) | (actions >= N_ACTIONS)):
            raise EnvError(f"expected {self.n} actions in [0, {N_ACTIONS}), got {actions!r}")
        if self.variant.mirrors_controls:
            actions = 2 - actions
        move = actions - 1
        rewards = np.zeros(self.n)
        frames = []
        for _ in range(self.proto.action_repeat):
            rewards += self._tick(move)
            frames.append(self._render(self._rows))
        stack = self.proto.frame_stack
        seq = [self.obs[:, i] for i in range(stack)] + frames
        self.obs = np.stack(seq[-stack:], axis=1)
        self.scores += rewards
        dones = self.done.copy()
        finished: list[float | None] = [None] * self.n
        for w in np.flatnonzero(dones):
            finished[w] = float(self.scores[w])
            self._reset(w)
        return rewards, dones, finished
