"""Optimizer groups, the world-model/policy train step and the interaction loop."""

from __future__ import annotations

import json
import logging
import queue
import threading
import time
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint
from .agent import ActorCritic
from .config import Config
from .envs import make_env
from .evaluation import build_report, evaluate, write_jsonl
from .objectives import (
    LossBreakdown,
    action_loss,
    aux_loss,
    cdp_loss,
    diagnostics,
    kl_balanced,
    recon_loss,
    total_loss,
)
from .replay import ReplayBuffer, TrajectoryBatch, Transition
from .worldmodel import Decoder, WorldModel

log = logging.getLogger(__name__)

WM_GROUPS = ("encoder", "rssm", "other")


class GroupAuditError(RuntimeError):
    pass


class TrainRatio:
    """Accrues ``ratio`` replayed steps per env step; spends them B*L at a time."""

    def __init__(self, ratio: float, cost: int):
        self.ratio = ratio
        self.cost = cost
        self.budget = 0.0
        self.consumed = 0

    def observe(self, env_steps: int = 1) -> None:
        self.budget += self.ratio * env_steps

    def ready(self) -> bool:
        return self.budget >= self.cost

    def spend(self) -> None:
        self.budget -= self.cost
        self.consumed += self.cost


def _to_tensors(batch: TrajectoryBatch, num_actions: int, dtype) -> dict[str, torch.Tensor]:
    return {
        "images": torch.from_numpy(batch.images),
        "prev_actions": F.one_hot(torch.from_numpy(batch.prev_actions), num_actions).to(dtype),
        "rewards": torch.from_numpy(batch.rewards).to(dtype),
        "conts": torch.from_numpy(batch.conts).to(dtype),
        "is_first": torch.from_numpy(batch.is_first),
    }


class Trainer:
    def __init__(self, cfg: Config, run_dir: str | Path | None = None, dtype=torch.float32):
        self.cfg = cfg
        self.dtype = dtype
        torch.manual_seed(cfg.seed)
        self.generator = torch.Generator().manual_seed(cfg.seed)
        self.rng = np.random.default_rng(cfg.seed)
        self.env = make_env(cfg)
        self.num_actions = self.env.num_actions
        self.wm = WorldModel(cfg, self.num_actions).to(dtype)
        feat = cfg.deter + cfg.groups * cfg.classes
        self.agent = ActorCritic(feat, self.num_actions, cfg.actor_hidden).to(dtype)
        self.viz = (
            Decoder(feat, cfg.image_size, cfg.cnn_depth, cfg.cnn_stages).to(dtype) if cfg.viz_decoder else None
        )
        self.weights = cfg.weights
        self.groups = self._build_groups()
        self.audit_groups()

        wm_groups = [{"params": [p for _, p in self.groups[g]], "lr": self._lr(g), "name": g} for g in WM_GROUPS]
        self.wm_opt = self._optimizer(wm_groups)
        self.policy_opt = self._optimizer([{"params": [p for _, p in self.groups["policy"]], "lr": cfg.lr_policy, "name": "policy"}])
        self.viz_opt = (
            self._optimizer([{"params": [p for _, p in self.groups["viz"]], "lr": cfg.lr_viz, "name": "viz"}])
            if self.viz is not None
            else None
        )
        self.buffer = ReplayBuffer(cfg.replay_capacity, (cfg.image_size, cfg.image_size, 3))
        self.ratio = TrainRatio(cfg.train_ratio, cfg.batch * cfg.seq_len)
        self.train_steps = 0
        self.env_steps = 0
        self.episodes = 0
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.lock = threading.Lock()

    # -- parameter groups ----------------------------------------------------------

    def _lr(self, group: str) -> float:
        return {"encoder": self.cfg.lr_encoder, "rssm": self.cfg.lr_rssm, "other": self.cfg.lr_other}[group]

    def _build_groups(self) -> dict[str, list]:
        groups = self.wm.param_groups()
        groups["policy"] = list(self.agent.named_parameters())
        groups["viz"] = list(self.viz.named_parameters()) if self.viz is not None else []
        return groups

    def modules(self) -> dict[str, torch.nn.Module]:
        mods = {"worldmodel": self.wm, "agent": self.agent}
        if self.viz is not None:
            mods["vizdecoder"] = self.viz
        return mods

    def audit_groups(self) -> None:
        """Every trainable parameter sits in exactly one optimizer group."""
        seen: dict[int, str] = {}
        for g, params in self.groups.items():
            for name, p in params:
                if id(p) in seen:
                    raise GroupAuditError(f"parameter {name} in groups {seen[id(p)]} and {g}")
                seen[id(p)] = g
        for prefix, module in self.modules().items():
            for name, p in module.named_parameters():
                if p.requires_grad and id(p) not in seen:
                    raise GroupAuditError(f"parameter {prefix}/{name} belongs to no optimizer group")

    def _optimizer(self, groups):
        if self.cfg.optimizer == "sgd":
            return torch.optim.SGD(groups)
        return torch.optim.Adam(groups, eps=self.cfg.adam_eps)

    def _apply(self, opt: torch.optim.Optimizer) -> float:
        params = [p for g in opt.param_groups for p in g["params"] if p.grad is not None]
        norm = torch.nn.utils.clip_grad_norm_(params, self.cfg.grad_clip) if params else torch.zeros(())
        opt.step()
        return float(norm)

    # -- losses ----------------------------------------------------------------------

    def world_model_loss(self, data: dict[str, torch.Tensor]):
        wm, cfg = self.wm, self.cfg
        post = wm.observe(data["images"], data["prev_actions"], data["is_first"], self.generator)
        heads = wm.predict_heads(post.h, post.z, with_cdp=True, sever_aux=cfg.sever_aux)
        terms = {}
        terms["cdp"] = cdp_loss(post.u, heads.u_hat)
        kl = kl_balanced(post.post, post.prior, cfg.free_bits)
        terms["dyn"], terms["rep"] = kl.dyn, kl.rep
        terms["aux_reward"], terms["aux_cont"] = aux_loss(heads, data["rewards"], data["conts"])
        if heads.recon is not None:
            terms["recon"] = recon_loss(heads.recon, data["images"])
        if wm.action is not None:
            # a_t is stored as prev_action of step t+1; it is undefined across episode starts
            logits = wm.action(torch.cat([post.feat[:-1], post.u[1:]], -1))
            terms["action"] = action_loss(logits, data["prev_actions"][1:], 1.0 - data["is_first"][1:].to(logits.dtype))
        diag = diagnostics(post.u, heads.u_hat, kl.raw)
        return total_loss(terms, self.weights, **diag), post

    def viz_update(self, feat: torch.Tensor, images: torch.Tensor) -> float:
        """Decoder step on stop-gradded model features; never touches the world model."""
        self.viz_opt.zero_grad(set_to_none=True)
        loss = recon_loss(self.viz(feat.detach()), images)
        loss.backward()
        self._apply(self.viz_opt)
        return loss.item()

    def policy_update(self, post) -> dict:
        cfg = self.cfg
        h, z = post.h.detach().flatten(0, 1), post.z.detach().flatten(0, 1)
        if 0 < cfg.imag_starts < h.shape[0]:
            idx = torch.randperm(h.shape[0], generator=self.generator)[: cfg.imag_starts]
            h, z = h[idx], z[idx]
        seed = (h, z)
        # gradients into the world model are impossible here: imagine() runs under no_grad
        rollout = self.agent.imagine(self.wm, seed, cfg.horizon, self.generator)
        actor_loss, critic_loss, ent = self.agent.losses(rollout, cfg.gamma, cfg.lam, cfg.entropy)
        self.policy_opt.zero_grad(set_to_none=True)
        (actor_loss + critic_loss).backward()
        self._apply(self.policy_opt)
        return {
            "actor_loss": actor_loss.item(),
            "critic_loss": critic_loss.item(),
            "entropy": ent.item(),
            "imag_reward": float(rollout.rewards.mean()),
        }

    def train_step(self, batch: TrajectoryBatch, policy: bool = True) -> LossBreakdown:
        data = _to_tensors(batch, self.num_actions, self.dtype)
        self.wm_opt.zero_grad(set_to_none=True)
        breakdown, post = self.world_model_loss(data)
        breakdown.total.backward()
        breakdown.extra["grad_norm"] = self._apply(self.wm_opt)
        if policy:
            breakdown.extra.update(self.policy_update(post))
        if self.viz is not None:
            breakdown.extra["viz_recon"] = self.viz_update(post.feat, data["images"])
        self.train_steps += 1
        return breakdown

    # -- interaction -----------------------------------------------------------------

    def episode_seed(self, index: int) -> int:
        return self.cfg.seed * 1_000_003 + index

    def _collect_episode(self, remaining: int):
        """Run one episode (or up to ``remaining`` steps). Yields after each env step."""
        env, cfg = self.env, self.cfg
        seed = self.episode_seed(self.episodes)
        self.episodes += 1
        obs = env.reset(seed)
        transitions = [Transition(obs, 0, 0.0, 1, is_first=True)]
        state = self.wm.initial(1)
        prev = 0
        ret = 0.0
        for i in range(remaining):
            with self.lock, torch.no_grad():
                state = self.wm.obs_step(
                    state,
                    F.one_hot(torch.tensor([prev]), self.num_actions).to(self.dtype),
                    torch.from_numpy(obs)[None],
                    torch.tensor([i == 0]),
                    self.generator,
                )
                if self.env_steps < cfg.prefill:
                    action = int(self.rng.integers(self.num_actions))
                else:
                    action = int(self.agent.act(torch.cat(state, -1), generator=self.generator)[0])
            res = env.step(action)
            ret += res.reward
            obs, prev = res.observation, action
            last = not res.continuation or i == remaining - 1
            transitions.append(Transition(obs, action, res.reward, res.continuation, truncated=last and res.continuation == 1))
            self.env_steps += 1
            yield None
            if last:
                break
        record = {
            "seed": seed,
            "length": len(transitions) - 1,
            "return": ret,
            "achievements": sorted(res.achievements),
            "env_step": self.env_steps,
        }
        yield (transitions, record)

    def _log(self, name: str, record: dict) -> None:
        if self.run_dir is not None:
            write_jsonl(self.run_dir / name, [record], mode="a")

    def _train_available(self) -> None:
        cfg = self.cfg
        while self.ratio.ready() and self.env_steps >= cfg.prefill and self.buffer.valid_starts(cfg.seq_len) > 0:
            batch = self.buffer.sample_batch(cfg.batch, cfg.seq_len, self.rng)
            with self.lock:
                breakdown = self.train_step(batch)
            self.ratio.spend()
            if self.train_steps % cfg.log_every == 0:
                self._log("metrics.jsonl", {"step": self.train_steps, "env_step": self.env_steps, **breakdown.record()})

    def save_checkpoint(self, path: Path) -> None:
        checkpoint.save(path, self.modules(), self.cfg.to_text())

    def run(self, evaluate_at_end: bool = True) -> dict:
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            (self.run_dir / "checkpoints").mkdir(exist_ok=True)
            self.cfg.save(self.run_dir / "config.txt")
            for name in ("metrics.jsonl", "episodes.jsonl"):
                (self.run_dir / name).write_text("")
        start = time.time()
        if self.cfg.mode == "threaded":
            self._run_threaded()
        else:
            self._run_serial()
        out = {"env_steps": self.env_steps, "train_steps": self.train_steps, "replayed": self.ratio.consumed, "seconds": time.time() - start}
        if self.run_dir is not None:
            self.save_checkpoint(self.run_dir / "checkpoint.ckpt")
            if evaluate_at_end and self.cfg.eval_episodes > 0:
                records = evaluate(self.env, self.wm, self.agent, self.cfg.eval_episodes)
                write_jsonl(self.run_dir / "eval_episodes.jsonl", records)
                report = build_report(records, self.env.achievement_names)
                (self.run_dir / "report.json").write_text(report.to_json())
                (self.run_dir / "achievements.csv").write_text(report.table.to_csv())
                out["report"] = report
            (self.run_dir / "summary.json").write_text(
                json.dumps({k: v for k, v in out.items() if k != "report"}, indent=1)
            )
        return out

    def _maybe_checkpoint(self) -> None:
        every = self.cfg.checkpoint_every
        if self.run_dir is not None and every > 0 and self.env_steps % every == 0:
            self.save_checkpoint(self.run_dir / "checkpoints" / f"step_{self.env_steps:08d}.ckpt")

    def _run_serial(self) -> None:
        while self.env_steps < self.cfg.steps:
            for item in self._collect_episode(self.cfg.steps - self.env_steps):
                if item is None:
                    self.ratio.observe()
                    self._maybe_checkpoint()
                    continue
                transitions, record = item
                self.buffer.add_episode(transitions)
                self._log("episodes.jsonl", record)
            self._train_available()

    def _run_threaded(self) -> None:
        """Collector thread feeds finished episodes through a queue to the training loop."""
        episodes: queue.Queue = queue.Queue()
        done = threading.Event()
        errors: list[BaseException] = []

        def collect():
            try:
                while self.env_steps < self.cfg.steps:
                    for item in self._collect_episode(self.cfg.steps - self.env_steps):
                        if item is not None:
                            episodes.put(item)
            except BaseException as exc:  # surfaced in the main thread
                errors.append(exc)
            finally:
                done.set()

        worker = threading.Thread(target=collect, daemon=True)
        worker.start()
        seen = 0
        while True:
            finished = done.is_set()
            while True:
                try:
                    transitions, record = episodes.get_nowait()
                except queue.Empty:
                    break
                self.buffer.add_episode(transitions)
                self._log("episodes.jsonl", record)
            steps = self.env_steps
            self.ratio.observe(steps - seen)
            seen = steps
            self._train_available()
            if finished and episodes.empty():
                break
            time.sleep(0.001)
        worker.join()
        if errors:
            raise errors[0]
