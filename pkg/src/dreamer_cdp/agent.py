"""Minimal imagination actor-critic on top of a frozen world model."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .worldmodel import WorldModel, mlp


@dataclass
class ImaginedRollout:
    """H-step latent rollout. ``feats`` and ``values`` have H+1 entries (seed first)."""

    feats: torch.Tensor  # (H+1, N, F)
    actions: torch.Tensor  # (H, N, A) one-hot
    rewards: torch.Tensor  # (H, N)
    conts: torch.Tensor  # (H, N)
    values: torch.Tensor  # (H+1, N)

    @property
    def horizon(self) -> int:
        return self.actions.shape[0]


def lambda_returns(rewards, conts, values, gamma: float, lam: float) -> torch.Tensor:
    """R_t = r_t + gamma c_t ((1 - lam) V_{t+1} + lam R_{t+1}), R_H = V_H."""
    H = rewards.shape[0]
    if values.shape[0] != H + 1:
        raise ValueError(f"need H+1={H + 1} values, got {values.shape[0]}")
    out = [None] * H
    nxt = values[H]
    for t in reversed(range(H)):
        nxt = rewards[t] + gamma * conts[t] * ((1 - lam) * values[t + 1] + lam * nxt)
        out[t] = nxt
    return torch.stack(out)


class ActorCritic(nn.Module):
    def __init__(self, feat: int, num_actions: int, hidden: int):
        super().__init__()
        self.num_actions = num_actions
        self.actor = mlp(feat, hidden, num_actions, layers=2)
        self.critic = mlp(feat, hidden, 1, layers=2)

    def logits(self, feat: torch.Tensor) -> torch.Tensor:
        return self.actor(feat)

    def value(self, feat: torch.Tensor) -> torch.Tensor:
        return self.critic(feat).squeeze(-1)

    def act(self, feat: torch.Tensor, greedy: bool = False, generator=None) -> torch.Tensor:
        """Integer actions for a batch of features."""
        logits = self.logits(feat)
        if greedy:
            return logits.argmax(-1)
        return torch.multinomial(torch.softmax(logits, -1), 1, generator=generator).squeeze(-1)

    @torch.no_grad()
    def imagine(self, wm: WorldModel, seed: tuple[torch.Tensor, torch.Tensor], horizon: int, generator=None):
        """Roll out ``horizon`` prior steps from a posterior state; reads no observations."""
        if horizon < 1:
            raise ValueError("horizon must be >= 1")
        h, z = seed[0].detach(), seed[1].detach()
        feats, actions, rewards, conts = [torch.cat([h, z], -1)], [], [], []
        for _ in range(horizon):
            a = F.one_hot(self.act(feats[-1], generator=generator), self.num_actions).to(h.dtype)
            h, z = wm.img_step(h, z, a, generator)
            heads = wm.predict_heads(h, z)
            feats.append(torch.cat([h, z], -1))
            actions.append(a)
            rewards.append(heads.reward)
            conts.append(heads.cont)
        feats_t = torch.stack(feats)
        return ImaginedRollout(
            feats=feats_t,
            actions=torch.stack(actions),
            rewards=torch.stack(rewards),
            conts=torch.stack(conts),
            values=self.value(feats_t),
        )

    def losses(self, rollout: ImaginedRollout, gamma: float, lam: float, entropy_coef: float):
        """Returns (actor_loss, critic_loss, mean entropy) as tensors."""
        feats = rollout.feats.detach()
        with torch.no_grad():
            returns = lambda_returns(rollout.rewards, rollout.conts, rollout.values, gamma, lam)
            disc = gamma * rollout.conts
            weight = torch.cumprod(torch.cat([torch.ones_like(disc[:1]), disc[:-1]]), 0)
        logits = self.logits(feats[:-1])
        logp = torch.log_softmax(logits, -1)
        logp_a = (logp * rollout.actions).sum(-1)
        ent = -(logp.exp() * logp).sum(-1)
        value = self.value(feats[:-1])
        adv = (returns - value).detach()
        actor_loss = -(weight * (logp_a * adv + entropy_coef * ent)).mean()
        critic_loss = (weight * 0.5 * (value - returns) ** 2).mean()
        return actor_loss, critic_loss, ent.mean()


def policy_update(rollout: ImaginedRollout, gamma: float, lam: float, agent: ActorCritic, entropy_coef: float = 3e-4):
    return agent.losses(rollout, gamma, lam, entropy_coef)
