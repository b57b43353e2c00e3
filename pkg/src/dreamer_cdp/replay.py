"""Ring-buffer replay with uniform fixed-length sequence sampling."""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class WarmupError(RuntimeError):
    """Not enough data in the buffer to sample a sequence yet."""


@dataclass
class Transition:
    """One step: the observation, the action that led to it and what came with it."""

    observation: np.ndarray
    prev_action: int
    reward: float
    continuation: int
    is_first: bool = False
    truncated: bool = False


@dataclass
class TrajectoryBatch:
    """Time-major arrays: images (L, B, H, W, 3), prev_actions (L, B), ..."""

    images: np.ndarray
    prev_actions: np.ndarray
    rewards: np.ndarray
    conts: np.ndarray
    is_first: np.ndarray
    starts: np.ndarray


class ReplayBuffer:
    def __init__(self, capacity: int, obs_shape: tuple[int, ...]):
        self.capacity = int(capacity)
        # np.zeros is lazily committed, so a large capacity only costs what is written
        self.obs = np.zeros((self.capacity, *obs_shape), np.uint8)
        self.prev_action = np.zeros(self.capacity, np.int64)
        self.reward = np.zeros(self.capacity, np.float32)
        self.cont = np.zeros(self.capacity, np.float32)
        self.is_first = np.zeros(self.capacity, bool)
        self.head = 0  # next physical write index
        self.size = 0
        self.total = 0  # steps ever written
        self.lock = threading.Lock()

    def __len__(self) -> int:
        return self.size

    def add_episode(self, transitions: Sequence[Transition]) -> None:
        if not transitions:
            raise ValueError("empty episode")
        last = transitions[-1]
        if last.continuation != 0 and not last.truncated:
            raise ValueError("episode must end with continuation 0 or a truncation marker")
        for i, tr in enumerate(transitions):
            if tuple(tr.observation.shape) != self.obs.shape[1:]:
                raise ValueError(f"transition {i}: observation shape {tr.observation.shape} != {self.obs.shape[1:]}")
            if tr.continuation not in (0, 1):
                raise ValueError(f"transition {i}: continuation must be 0 or 1")
            if tr.continuation == 0 and i != len(transitions) - 1:
                raise ValueError(f"transition {i}: terminal step inside episode")
        with self.lock:
            for i, tr in enumerate(transitions):
                j = self.head
                self.obs[j] = tr.observation
                self.prev_action[j] = tr.prev_action
                self.reward[j] = tr.reward
                self.cont[j] = tr.continuation
                self.is_first[j] = tr.is_first or i == 0
                self.head = (self.head + 1) % self.capacity
                self.size = min(self.size + 1, self.capacity)
                self.total += 1

    def valid_starts(self, length: int) -> int:
        """Number of logical start positions whose window stays inside stored data."""
        return max(self.size - length + 1, 0)

    def _physical(self, logical: np.ndarray) -> np.ndarray:
        oldest = (self.head - self.size) % self.capacity
        return (oldest + logical) % self.capacity

    def sample_starts(self, batch: int, length: int, rng: np.random.Generator) -> np.ndarray:
        n = self.valid_starts(length)
        if n <= 0:
            raise WarmupError(f"buffer holds {self.size} steps, need at least {length}")
        return rng.integers(0, n, size=batch)

    def sample_batch(self, batch: int, length: int, seed: int | np.random.Generator) -> TrajectoryBatch:
        """Uniform over logical starts, oldest to newest, so windows never wrap the write head."""
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        with self.lock:
            starts = self.sample_starts(batch, length, rng)
            idx = self._physical(starts[None, :] + np.arange(length)[:, None])
            is_first = self.is_first[idx].copy()
            is_first[0] = True
            return TrajectoryBatch(
                images=self.obs[idx],
                prev_actions=self.prev_action[idx],
                rewards=self.reward[idx],
                conts=self.cont[idx],
                is_first=is_first,
                starts=starts,
            )
