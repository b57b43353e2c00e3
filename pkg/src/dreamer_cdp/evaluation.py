"""Greedy evaluation episodes, run reports and multi-seed aggregation."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .envs import AchievementTable, crafter_score

EVAL_SEED_BASE = 1_000_000_000


def run_episode(env, wm, agent, seed: int, greedy: bool = True, generator=None) -> dict:
    obs = env.reset(seed)
    state = wm.initial(1)
    prev = torch.zeros(1, env.num_actions)
    first = torch.ones(1)
    ret, length = 0.0, 0
    while True:
        with torch.no_grad():
            state = wm.obs_step(state, prev, torch.from_numpy(obs)[None], first, generator, sample=not greedy)
            action = int(agent.act(torch.cat(state, -1), greedy=greedy, generator=generator)[0])
        res = env.step(action)
        ret += res.reward
        length += 1
        obs = res.observation
        prev = F.one_hot(torch.tensor([action]), env.num_actions).float()
        first = torch.zeros(1)
        if not res.continuation:
            return {"seed": seed, "length": length, "return": ret, "achievements": sorted(res.achievements)}


def evaluate(env, wm, agent, episodes: int, seed_base: int = EVAL_SEED_BASE) -> list[dict]:
    wm.eval()
    agent.eval()
    try:
        return [run_episode(env, wm, agent, seed_base + i) for i in range(episodes)]
    finally:
        wm.train()
        agent.train()


@dataclass
class RunReport:
    score: float
    return_mean: float
    return_std: float
    episodes: int
    achievements: dict[str, float]
    extra: dict = field(default_factory=dict)

    @property
    def table(self) -> AchievementTable:
        return AchievementTable(self.achievements, self.episodes)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)


def build_report(records: Sequence[dict], achievement_names: Sequence[str]) -> RunReport:
    """Everything here is recomputable from the episode records alone."""
    table = AchievementTable.from_episodes(achievement_names, [set(r["achievements"]) for r in records])
    returns = np.array([r["return"] for r in records], dtype=np.float64)
    return RunReport(
        score=crafter_score(table),
        return_mean=float(returns.mean()),
        return_std=float(returns.std(ddof=1)) if len(returns) > 1 else 0.0,
        episodes=len(records),
        achievements=table.rates,
    )


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (ddof=1) across seeds."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        raise ValueError("aggregation needs at least 2 seeds")
    return float(v.mean()), float(v.std(ddof=1))


def aggregate(reports: Sequence[RunReport]) -> dict:
    score = mean_std([r.score for r in reports])
    ret = mean_std([r.return_mean for r in reports])
    names = list(reports[0].achievements)
    per_ach = {a: mean_std([r.achievements[a] for r in reports]) for a in names}
    return {
        "n": len(reports),
        "score_mean": score[0],
        "score_std": score[1],
        "return_mean": ret[0],
        "return_std": ret[1],
        "per_seed_score": [r.score for r in reports],
        "per_seed_return": [r.return_mean for r in reports],
        "achievements": {a: {"mean": m, "std": s} for a, (m, s) in per_ach.items()},
    }


def write_jsonl(path: Path, records: Sequence[dict], mode: str = "w") -> None:
    with open(path, mode) as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def format_pm(mean: float, std: float, pct: bool = False) -> str:
    unit = "%" if pct else ""
    if math.isnan(std):
        return f"{mean:.1f}{unit}"
    return f"{mean:.1f} ± {std:.1f}{unit}"
