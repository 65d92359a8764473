"""Built-in pixel environments and the adapter contract.

Any environment usable by the pipeline exposes: `action_count`, `max_steps`,
`reset(seed=None) -> EnvStep`, `step(action) -> EnvStep`, and
`episode_success(length, terminated) -> bool`. Observations are (H, W, 3)
uint8 images; the first step of an episode carries reward 0 and `is_first`;
truncation sets `is_last` without `is_terminal`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

AGENT_COLOR = (255, 255, 255)
TELEGRAPH_COLOR = (255, 255, 0)
PROJECTILE_COLOR = (255, 0, 0)
BACKGROUND_COLOR = (0, 0, 0)

LEFT, STAY, RIGHT = 0, 1, 2


@dataclass
class EnvStep:
    image: np.ndarray
    reward: float
    is_first: bool = False
    is_last: bool = False
    is_terminal: bool = False


@dataclass
class _Projectile:
    col: int
    age: int = 0  # steps since spawn; telegraphs first, then falls


class DodgeWorld:
    """Dodge telegraphed falling blocks on a 16x16 grid rendered as pixels.

    The agent (white) slides along the bottom row. Each step a projectile may
    spawn in a random unoccupied column; it telegraphs (yellow, top row) for
    `telegraph_steps` steps, then falls (red) one row per step starting from
    row 1. A projectile entering the bottom row in the agent's column ends
    the episode with the hit penalty; every survived step pays the survival
    reward; episodes truncate (is_last without is_terminal) at `max_steps`.
    """

    def __init__(self, grid: int = 16, cell_px: int = 2,
                 spawn_prob: float = 0.30, telegraph_steps: int = 3,
                 max_steps: int = 200, survival_reward: float = 0.1,
                 hit_penalty: float = -1.0, seed: int | None = None):
        if grid < 2 or cell_px < 1:
            raise ValueError("grid must be >= 2 and cell_px >= 1")
        if not 0.0 <= spawn_prob <= 1.0:
            raise ValueError("spawn_prob must be a probability")
        self.grid = grid
        self.cell_px = cell_px
        self.spawn_prob = spawn_prob
        self.telegraph_steps = telegraph_steps
        self.max_steps = max_steps
        self.survival_reward = survival_reward
        self.hit_penalty = hit_penalty
        self.action_count = 3
        self._rng = np.random.default_rng(seed)
        self._needs_reset = True
        self.agent_col = grid // 2
        self.projectiles: list[_Projectile] = []
        self.steps = 0

    # impact happens when a projectile's age reaches telegraph + (grid - 2):
    # telegraph at the top row, then rows 1 .. grid-1, one per step
    def _row(self, p: _Projectile) -> int:
        if p.age < self.telegraph_steps:
            return 0
        return p.age - self.telegraph_steps + 1

    def arrival_in(self, p: _Projectile) -> int:
        """Steps until this projectile enters the bottom row."""
        return (self.telegraph_steps + self.grid - 2) - p.age

    def reset(self, seed: int | None = None) -> EnvStep:
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        self.agent_col = self.grid // 2
        self.projectiles = []
        self.steps = 0
        self._needs_reset = False
        return EnvStep(image=self.render(), reward=0.0, is_first=True)

    def step(self, action: int) -> EnvStep:
        if self._needs_reset:
            raise RuntimeError("episode is over; call reset()")
        if action not in (LEFT, STAY, RIGHT):
            raise ValueError(f"action must be 0, 1 or 2, got {action!r}")
        self.agent_col = int(np.clip(self.agent_col + (action - 1),
                                     0, self.grid - 1))
        for p in self.projectiles:
            p.age += 1
        landed = [p for p in self.projectiles if self._row(p) >= self.grid - 1]
        hit = any(p.col == self.agent_col for p in landed)

        roll = self._rng.random()
        occupied = {p.col for p in self.projectiles}
        free = [c for c in range(self.grid) if c not in occupied]
        if roll < self.spawn_prob and free:
            self.projectiles.append(
                _Projectile(col=int(self._rng.choice(free))))

        self.steps += 1
        image = self.render()  # landed projectiles are visible in this frame
        self.projectiles = [p for p in self.projectiles
                            if self._row(p) < self.grid - 1]
        if hit:
            self._needs_reset = True
            return EnvStep(image=image, reward=self.hit_penalty,
                           is_last=True, is_terminal=True)
        is_last = self.steps >= self.max_steps
        self._needs_reset = is_last
        return EnvStep(image=image, reward=self.survival_reward,
                       is_last=is_last)

    def render(self) -> np.ndarray:
        px = self.cell_px
        size = self.grid * px
        img = np.zeros((size, size, 3), np.uint8)
        img[...] = BACKGROUND_COLOR
        r0 = (self.grid - 1) * px
        c0 = self.agent_col * px
        img[r0:r0 + px, c0:c0 + px] = AGENT_COLOR
        for p in self.projectiles:
            row = self._row(p)
            color = (TELEGRAPH_COLOR if p.age < self.telegraph_steps
                     else PROJECTILE_COLOR)
            img[row * px:(row + 1) * px, p.col * px:(p.col + 1) * px] = color
        return img

    def episode_success(self, length: int, terminated: bool) -> bool:
        return (not terminated) and length >= self.max_steps


def scripted_policy(env: DodgeWorld) -> int:
    """Clairvoyant dodge: pick the move that survives the longest.

    Reads the environment's internal projectile schedule (arrival times are
    deterministic) and searches column reachability forward in time,
    returning the action whose best-case survival horizon is largest. Ties
    prefer standing still, then smaller moves.
    """
    grid = env.grid
    horizon = env.telegraph_steps + grid + 2
    deadly = np.zeros((horizon + 2, grid), bool)
    for p in env.projectiles:
        t = env.arrival_in(p)
        if 1 <= t <= horizon + 1:
            deadly[t, p.col] = True

    def survival_depth(first_col: int) -> int:
        if deadly[1, first_col]:
            return 0
        alive = np.zeros(grid, bool)
        alive[first_col] = True
        for t in range(2, horizon + 2):
            reach = alive.copy()
            reach[:-1] |= alive[1:]
            reach[1:] |= alive[:-1]
            alive = reach & ~deadly[t]
            if not alive.any():
                return t - 1
        return horizon + 1

    best_action, best_depth = STAY, -1
    for action in (STAY, LEFT, RIGHT):
        col = int(np.clip(env.agent_col + (action - 1), 0, grid - 1))
        depth = survival_depth(col)
        if depth > best_depth:
            best_action, best_depth = action, depth
    return best_action


class ConstantImageEnv:
    """Fixed-image environment; world-model smoke tests and pipelines only."""

    def __init__(self, value: int = 128, size: int = 32,
                 episode_len: int = 100, action_count: int = 3):
        self.max_steps = episode_len
        self.action_count = action_count
        self._image = np.full((size, size, 3), np.uint8(value))
        self.steps = 0

    def reset(self, seed: int | None = None) -> EnvStep:
        self.steps = 0
        return EnvStep(image=self._image.copy(), reward=0.0, is_first=True)

    def step(self, action: int) -> EnvStep:
        if not 0 <= action < self.action_count:
            raise ValueError(f"action out of range: {action!r}")
        self.steps += 1
        return EnvStep(image=self._image.copy(), reward=0.0,
                       is_last=self.steps >= self.max_steps)

    def episode_success(self, length: int, terminated: bool) -> bool:
        return not terminated


class ResizeAdapter:
    """Wrap any env and resize its frames to (size, size) with nearest pixels."""

    def __init__(self, env, size: int):
        self.env = env
        self.size = size
        self.action_count = env.action_count
        self.max_steps = env.max_steps

    def _fit(self, step: EnvStep) -> EnvStep:
        img = step.image
        if img.shape[0] != self.size or img.shape[1] != self.size:
            from PIL import Image
            resized = Image.fromarray(img).resize(
                (self.size, self.size), Image.NEAREST)
            step.image = np.asarray(resized, np.uint8)
        return step

    def reset(self, seed: int | None = None) -> EnvStep:
        return self._fit(self.env.reset(seed))

    def step(self, action: int) -> EnvStep:
        return self._fit(self.env.step(action))

    def episode_success(self, length: int, terminated: bool) -> bool:
        return self.env.episode_success(length, terminated)
