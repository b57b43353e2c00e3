"""Command line: train, eval, plot, score and the desk-scale ablation sweep.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import torch

from . import checkpoint
from .agent import ActorCritic
from .config import ABLATIONS, Config, ConfigError, load_config, parse_overrides, parse_text
from .envs import AchievementTable, crafter_score, make_env
from .evaluation import EVAL_SEED_BASE, aggregate, build_report, run_episode, write_jsonl
from .plotting import PlotError, achievement_bars, plot_runs
from .worldmodel import WorldModel

log = logging.getLogger("dreamer_cdp")

SWEEP_ARMS = {
    "full": (),
    "no_reward_grad": ("no_reward_grad",),
    "no_cdp_no_dyn_rep": ("no_cdp", "no_dyn_rep"),
}
EXTRA_ARMS = {"cdp_only": ("cdp_only",), "dreamer": ("no_cdp", "dreamer_recon"), "mudreamer": ("no_cdp", "mudreamer_action")}


class UsageError(Exception):
    pass


def _overrides(args) -> dict:
    pairs = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v.strip()
    values = parse_overrides(pairs)
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        values["steps"] = args.steps
    if getattr(args, "mode", None) is not None:
        values["mode"] = args.mode
    return values


def _build_config(args) -> Config:
    values = _overrides(args)
    base = parse_overrides(parse_text(Path(args.config).read_text())) if args.config else {}
    base.update(values)
    if args.ablate:
        base["ablations"] = tuple(dict.fromkeys(tuple(base.get("ablations", ())) + tuple(args.ablate)))
    return Config(**base)


def cmd_train(args) -> int:
    from .trainer import Trainer

    cfg = _build_config(args)
    run_dir = Path(args.run_dir or f"runs/{'_'.join(cfg.ablations) or 'full'}_seed{cfg.seed}")
    out = Trainer(cfg, run_dir).run(evaluate_at_end=not args.no_eval)
    msg = f"run dir: {run_dir}  env steps {out['env_steps']}  train steps {out['train_steps']}"
    if "report" in out:
        r = out["report"]
        msg += f"  score {r.score:.2f}%  return {r.return_mean:.2f} ± {r.return_std:.2f}"
    print(msg)
    return 0


def load_agent(path: str | Path, config: Config | None = None):
    tensors, text = checkpoint.read(path)
    cfg = config or (load_config(None, **parse_overrides(parse_text(text))) if text else Config())
    env = make_env(cfg)
    wm = WorldModel(cfg, env.num_actions)
    agent = ActorCritic(cfg.deter + cfg.groups * cfg.classes, env.num_actions, cfg.actor_hidden)
    checkpoint.load_into(tensors, {"worldmodel": wm, "agent": agent})
    return cfg, wm, agent


def evaluate_checkpoint(path, episodes: int, config: Config | None = None, workers: int = 1):
    cfg, wm, agent = load_agent(path, config)
    wm.eval()
    agent.eval()

    def one(i):
        return run_episode(make_env(cfg), wm, agent, EVAL_SEED_BASE + i)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            records = list(pool.map(one, range(episodes)))
    else:
        records = [one(i) for i in range(episodes)]
    names = make_env(cfg).achievement_names
    return records, build_report(records, names)


def cmd_eval(args) -> int:
    config = load_config(args.config) if args.config else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    for i, path in enumerate(args.checkpoints):
        records, report = evaluate_checkpoint(path, args.episodes, config, args.workers)
        tag = f"seed{i}" if len(args.checkpoints) > 1 else "run"
        sub = out / tag if len(args.checkpoints) > 1 else out
        sub.mkdir(parents=True, exist_ok=True)
        write_jsonl(sub / "eval_episodes.jsonl", records)
        (sub / "report.json").write_text(report.to_json())
        (sub / "achievements.csv").write_text(report.table.to_csv())
        reports.append(report)
        print(f"{path}: score {report.score:.2f}%  return {report.return_mean:.2f} ± {report.return_std:.2f}")
    if len(reports) > 1:
        agg = aggregate(reports)
        (out / "aggregate.json").write_text(json.dumps(agg, indent=1))
        rows = ["achievement,mean,std"] + [f"{a},{v['mean']:.6f},{v['std']:.6f}" for a, v in agg["achievements"].items()]
        (out / "achievements.csv").write_text("\n".join(rows) + "\n")
        achievement_bars(
            {"mean": {a: v["mean"] for a, v in agg["achievements"].items()}},
            out / "achievements.png",
            errors={"mean": {a: v["std"] for a, v in agg["achievements"].items()}},
        )
        print(
            f"n={agg['n']}: score {agg['score_mean']:.2f} ± {agg['score_std']:.2f}%  "
            f"return {agg['return_mean']:.2f} ± {agg['return_std']:.2f}"
        )
    else:
        achievement_bars({"run": reports[0].achievements}, out / "achievements.png")
    return 0


def cmd_plot(args) -> int:
    for path in plot_runs(args.run_dirs, args.out):
        print(path)
    return 0


def cmd_score(args) -> int:
    table = AchievementTable.from_csv(Path(args.table).read_text())
    print(f"{crafter_score(table):.6f}")
    return 0


def cmd_sweep(args) -> int:
    from .trainer import Trainer

    arms = {**SWEEP_ARMS, **EXTRA_ARMS}
    unknown = [a for a in args.arms if a not in arms]
    if unknown:
        raise UsageError(f"unknown arm(s): {', '.join(unknown)}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base = parse_overrides(parse_text(Path(args.config).read_text())) if args.config else {}
    base.update(_overrides(args))
    results = {}
    summary_path = out / "sweep.json"
    if summary_path.exists():
        results = json.loads(summary_path.read_text()).get("runs", {})
    for arm in args.arms:
        for seed in args.seeds:
            key = f"{arm}/seed{seed}"
            run_dir = out / arm / f"seed{seed}"
            if key in results and (run_dir / "report.json").exists():
                continue
            cfg = Config(**{**base, "seed": seed, "ablations": arms[arm]})
            start = time.time()
            res = Trainer(cfg, run_dir).run()
            report = res["report"]
            results[key] = {
                "arm": arm,
                "seed": seed,
                "final_return": report.return_mean,
                "score": report.score,
                "seconds": res["seconds"],
                "total_seconds": time.time() - start,
            }
            print(f"{key}: return {report.return_mean:.3f}  score {report.score:.2f}%  ({res['seconds']:.0f}s)", flush=True)
            summary_path.write_text(json.dumps({"config": Config(**base).to_text(), "runs": results}, indent=1))
    means = {}
    for arm in args.arms:
        vals = [results[f"{arm}/seed{s}"]["final_return"] for s in args.seeds]
        means[arm] = sum(vals) / len(vals)
        print(f"{arm:>20}: mean final return {means[arm]:.3f}")
    summary_path.write_text(json.dumps({"config": Config(**base).to_text(), "runs": results, "means": means}, indent=1))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dreamer-cdp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--steps", type=int)
        p.add_argument("--mode", choices=("serial", "threaded"))

    p = sub.add_parser("train", help="train one agent")
    common(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--ablate", action="append", choices=ABLATIONS, default=[])
    p.add_argument("--run-dir")
    p.add_argument("--no-eval", action="store_true", help="skip the final evaluation episodes")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="greedy evaluation of one or more checkpoints")
    p.add_argument("checkpoints", nargs="+")
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--config", help="expected config; shapes must match the checkpoint")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", default="eval")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="learning curves and achievement bars from run dirs")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out", default="figures")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("score", help="recompute the score from an achievement CSV table")
    p.add_argument("table")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("sweep", help="desk-scale ablation sweep (resumable)")
    common(p)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--arms", nargs="+", default=list(SWEEP_ARMS))
    p.add_argument("--out", default="results/ablation_sweep")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return 2
    except (checkpoint.CheckpointError, PlotError, FileNotFoundError, ValueError, RuntimeError) as exc:
        print(f"{parser.prog}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
