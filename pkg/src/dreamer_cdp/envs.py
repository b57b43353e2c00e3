"""Environments: protocol, the MiniGather gridworld, a Crafter shim and the score."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np


class ProtocolError(RuntimeError):
    """Environment used out of order (e.g. step after a terminal step)."""


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    continuation: int
    achievements: frozenset[str] = frozenset()


class Env(Protocol):
    achievement_names: tuple[str, ...]
    num_actions: int

    def reset(self, seed: int) -> np.ndarray: ...

    def step(self, action: int) -> StepResult: ...


# -- scoring --------------------------------------------------------------------


@dataclass
class AchievementTable:
    """Per-achievement success rates in percent over a set of episodes."""

    rates: dict[str, float]
    episodes: int = 0

    def __post_init__(self):
        for name, s in self.rates.items():
            if not 0.0 <= s <= 100.0 or math.isnan(s):
                raise ValueError(f"achievement rate {name}={s} outside [0, 100]")

    @classmethod
    def from_episodes(cls, names: Sequence[str], unlocked: Sequence[set[str]]) -> "AchievementTable":
        n = len(unlocked)
        if n == 0:
            raise ValueError("no episodes")
        rates = {a: 100.0 * sum(a in u for u in unlocked) / n for a in names}
        return cls(rates, episodes=n)

    def to_csv(self) -> str:
        rows = ["achievement,success_rate"]
        rows += [f"{k},{v:.6f}" for k, v in self.rates.items()]
        return "\n".join(rows) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "AchievementTable":
        rates = {}
        for line in text.strip().splitlines()[1:]:
            if line.strip():
                name, value = line.rsplit(",", 1)
                rates[name.strip()] = float(value)
        return cls(rates)


def crafter_score(rates: AchievementTable | Sequence[float] | dict) -> float:
    """exp(mean(ln(1 + s_i))) - 1 over success rates s_i in percent."""
    if isinstance(rates, AchievementTable):
        rates = rates.rates
    if isinstance(rates, dict):
        rates = list(rates.values())
    s = np.asarray(rates, dtype=np.float64)
    if s.size == 0:
        raise ValueError("empty achievement table")
    if np.any(~np.isfinite(s)) or np.any(s < 0) or np.any(s > 100):
        raise ValueError("success rates must lie in [0, 100]")
    return float(np.exp(np.mean(np.log1p(s))) - 1.0)


CRAFTER_ACHIEVEMENTS = (
    "collect_coal", "collect_diamond", "collect_drink", "collect_iron",
    "collect_sapling", "collect_stone", "collect_wood", "defeat_skeleton",
    "defeat_zombie", "eat_cow", "eat_plant", "make_iron_pickaxe",
    "make_iron_sword", "make_stone_pickaxe", "make_stone_sword",
    "make_wood_pickaxe", "make_wood_sword", "place_furnace", "place_plant",
    "place_stone", "place_table", "wake_up",
)  # fmt: skip


# -- MiniGather -----------------------------------------------------------------

GRASS, TREE, STONE, WATER, GOAL, PATH = range(6)
OUTSIDE = 6

_COLORS = np.array(
    [
        [90, 170, 60],  # grass
        [20, 90, 20],  # tree
        [130, 130, 130],  # stone
        [40, 90, 220],  # water
        [240, 210, 40],  # goal
        [170, 140, 100],  # path
        [0, 0, 0],  # outside
    ],
    dtype=np.uint8,
)
_AGENT = np.array([230, 40, 40], np.uint8)
_WOOD = np.array([120, 70, 20], np.uint8)
_STONE_INV = np.array([200, 200, 200], np.uint8)

NOOP, LEFT, RIGHT, UP, DOWN, DO = range(6)
_MOVES = {LEFT: (0, -1), RIGHT: (0, 1), UP: (-1, 0), DOWN: (1, 0)}


@dataclass
class MiniGather:
    """12x12 gridworld seen through a 5x5 egocentric window.

    Actions: noop, left, right, up, down, do. Moving onto the goal unlocks
    ``reach_goal``; ``do`` on a facing tree collects wood, on a facing stone
    collects stone (needs one wood) and on facing water drinks. Each
    achievement pays reward 1 the first time it is unlocked in an episode.
    """

    size: int = 12
    view: int = 5
    image_size: int = 32
    time_limit: int = 200
    trees: int = 6
    stones: int = 4
    waters: int = 3

    achievement_names: tuple[str, ...] = ("reach_goal", "collect_wood", "collect_stone", "collect_drink")
    num_actions: int = 6
    grid: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self._active = False
        self.grid = np.zeros((self.size, self.size), np.int8)

    def layout(self, seed: int) -> tuple[np.ndarray, tuple[int, int]]:
        rng = np.random.default_rng(seed)
        grid = np.full((self.size, self.size), GRASS, np.int8)
        counts = [(TREE, self.trees), (STONE, self.stones), (WATER, self.waters), (GOAL, 1)]
        cells = rng.permutation(self.size * self.size)
        k = 0
        for tile, n in counts:
            for _ in range(n):
                grid.flat[cells[k]] = tile
                k += 1
        start = divmod(int(cells[k]), self.size)
        return grid, start

    def reset(self, seed: int) -> np.ndarray:
        self.grid, self.pos = self.layout(seed)
        self.facing = DOWN
        self.wood = 0
        self.stone = 0
        self.t = 0
        self.unlocked: set[str] = set()
        self._active = True
        return self.render()

    def _unlock(self, name: str) -> float:
        if name in self.unlocked:
            return 0.0
        self.unlocked.add(name)
        return 1.0

    def _tile(self, r: int, c: int) -> int:
        if 0 <= r < self.size and 0 <= c < self.size:
            return int(self.grid[r, c])
        return OUTSIDE

    def step(self, action: int) -> StepResult:
        if not self._active:
            raise ProtocolError("step() called on a finished episode; call reset() first")
        action = int(action)
        if not 0 <= action < self.num_actions:
            raise ValueError(f"action {action} outside [0, {self.num_actions})")
        reward = 0.0
        if action in _MOVES:
            self.facing = action
            dr, dc = _MOVES[action]
            r, c = self.pos[0] + dr, self.pos[1] + dc
            if self._tile(r, c) in (GRASS, GOAL, PATH):
                self.pos = (r, c)
                if self.grid[r, c] == GOAL:
                    reward += self._unlock("reach_goal")
        elif action == DO:
            dr, dc = _MOVES[self.facing]
            r, c = self.pos[0] + dr, self.pos[1] + dc
            tile = self._tile(r, c)
            if tile == TREE:
                self.wood += 1
                reward += self._unlock("collect_wood")
            elif tile == STONE and self.wood >= 1:
                self.stone += 1
                self.grid[r, c] = PATH
                reward += self._unlock("collect_stone")
            elif tile == WATER:
                reward += self._unlock("collect_drink")
        self.t += 1
        cont = 0 if self.t >= self.time_limit else 1
        if not cont:
            self._active = False
        return StepResult(self.render(), reward, cont, frozenset(self.unlocked))

    def render(self) -> np.ndarray:
        cell = self.image_size // self.view
        pad = (self.image_size - cell * self.view) // 2
        img = np.zeros((self.image_size, self.image_size, 3), np.uint8)
        half = self.view // 2
        r0, c0 = self.pos
        tiles = np.array(
            [[self._tile(r0 + i - half, c0 + j - half) for j in range(self.view)] for i in range(self.view)]
        )
        block = _COLORS[tiles].repeat(cell, 0).repeat(cell, 1)
        img[pad : pad + cell * self.view, pad : pad + cell * self.view] = block
        y, x = pad + half * cell, pad + half * cell
        img[y + 1 : y + cell - 1, x + 1 : x + cell - 1] = _AGENT
        dr, dc = _MOVES[self.facing]
        fy, fx = y + cell // 2 - 1 + dr * 2, x + cell // 2 - 1 + dc * 2
        img[fy : fy + 2, fx : fx + 2] = 255
        # inventory strip in the top margin
        if self.wood:
            img[0:pad, 0 : self.image_size // 2] = _WOOD
        if self.stone:
            img[0:pad, self.image_size // 2 :] = _STONE_INV
        return img


class CrafterAdapter:
    """Thin shim over the upstream ``crafter`` package (optional dependency)."""

    achievement_names = CRAFTER_ACHIEVEMENTS

    def __init__(self, image_size: int = 64, time_limit: int = 10_000):
        try:
            import crafter  # noqa: F401
        except ImportError as exc:  # pragma: no cover - depends on optional package
            raise ImportError("the crafter package is required for env=crafter (pip install crafter)") from exc
        self._env = crafter.Env(size=(image_size, image_size), length=time_limit)
        self.num_actions = self._env.action_space.n
        self._done = True

    def reset(self, seed: int) -> np.ndarray:
        self._env._seed = seed
        self._done = False
        return self._env.reset()

    def step(self, action: int) -> StepResult:
        if self._done:
            raise ProtocolError("step() called on a finished episode; call reset() first")
        obs, reward, done, info = self._env.step(int(action))
        self._done = bool(done)
        unlocked = frozenset(k for k, v in info.get("achievements", {}).items() if v > 0)
        return StepResult(obs, float(reward), 0 if done else 1, unlocked)


def make_env(cfg) -> Env:
    if cfg.env == "minigather":
        return MiniGather(image_size=cfg.image_size, time_limit=cfg.time_limit)
    if cfg.env == "crafter":
        return CrafterAdapter(cfg.image_size, cfg.time_limit)
    raise ValueError(f"unknown env {cfg.env!r}")
