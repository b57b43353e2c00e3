"""Recurrent state-space world model with a continuous deterministic prediction head.

Components: a convolutional feature extractor x -> u, a gated recurrent
sequence model, categorical posterior q(z|h,u) and prior p(z|h), an MLP
predictor h -> u_hat, reward/continuation heads, and optional pixel decoder
and action-prediction heads.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import Config, ConfigError
from .distributions import CategoricalCode, symexp

CONT_EPS = 1e-6


def mlp(inp: int, hidden: int, out: int, layers: int = 1) -> nn.Sequential:
    mods: list[nn.Module] = []
    width = inp
    for _ in range(layers):
        mods += [nn.Linear(width, hidden), nn.LayerNorm(hidden), nn.SiLU()]
        width = hidden
    mods.append(nn.Linear(width, out))
    return nn.Sequential(*mods)


def preprocess(image: torch.Tensor, dtype: torch.dtype | None = None) -> torch.Tensor:
    """uint8 (..., H, W, 3) -> float (..., 3, H, W) in [-0.5, 0.5]."""
    x = image.to(dtype or torch.get_default_dtype()) / 255.0 - 0.5
    return x.movedim(-1, -3)


class FeatureExtractor(nn.Module):
    """Strided conv stack; output is the flattened final feature map (the embedding u)."""

    def __init__(self, image_size: int, depth: int, stages: int):
        super().__init__()
        self.image_size = image_size
        layers: list[nn.Module] = []
        ch = 3
        for i in range(stages):
            out = depth * 2**i
            layers += [nn.Conv2d(ch, out, 4, 2, 1), nn.GroupNorm(1, out), nn.SiLU()]
            ch = out
        self.net = nn.Sequential(*layers)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        if image.dim() < 3 or tuple(image.shape[-3:]) != (self.image_size, self.image_size, 3):
            raise ConfigError(
                f"observation shape {tuple(image.shape[-3:])} != "
                f"({self.image_size}, {self.image_size}, 3)"
            )
        lead = image.shape[:-3]
        dtype = next(self.parameters()).dtype
        x = preprocess(image, dtype).reshape(-1, 3, self.image_size, self.image_size)
        return self.net(x).reshape(*lead, -1)


class Decoder(nn.Module):
    """Transposed-conv decoder from model features to the pixel mean."""

    def __init__(self, feat: int, image_size: int, depth: int, stages: int):
        super().__init__()
        self.side = image_size // 2**stages
        self.top = depth * 2 ** (stages - 1)
        self.inp = nn.Linear(feat, self.top * self.side * self.side)
        layers: list[nn.Module] = []
        ch = self.top
        for i in reversed(range(stages)):
            out = 3 if i == 0 else depth * 2 ** (i - 1)
            layers.append(nn.ConvTranspose2d(ch, out, 4, 2, 1))
            if i:
                layers += [nn.GroupNorm(1, out), nn.SiLU()]
            ch = out
        self.net = nn.Sequential(*layers)

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        lead = feat.shape[:-1]
        x = self.inp(feat).reshape(-1, self.top, self.side, self.side)
        x = self.net(x)
        return x.reshape(*lead, *x.shape[1:]).movedim(-3, -1)


class SequenceModel(nn.Module):
    def __init__(self, stoch: int, actions: int, hidden: int, deter: int):
        super().__init__()
        self.inp = nn.Sequential(nn.Linear(stoch + actions, hidden), nn.LayerNorm(hidden), nn.SiLU())
        self.cell = nn.GRUCell(hidden, deter)

    def forward(self, h, z, a):
        return self.cell(self.inp(torch.cat([z, a], -1)), h)


@dataclass
class HeadOutputs:
    reward_mean: torch.Tensor  # symlog space, unit variance
    cont: torch.Tensor  # Bernoulli parameter in (0, 1)
    u_hat: torch.Tensor | None = None
    recon: torch.Tensor | None = None
    action_logits: torch.Tensor | None = None

    @property
    def reward(self) -> torch.Tensor:
        return symexp(self.reward_mean)


@dataclass
class Posterior:
    """Outputs of a posterior unroll, all time-major (T, B, ...)."""

    u: torch.Tensor
    h: torch.Tensor
    z: torch.Tensor
    post: CategoricalCode
    prior: CategoricalCode

    @property
    def feat(self) -> torch.Tensor:
        return torch.cat([self.h, self.z], -1)


class WorldModel(nn.Module):
    def __init__(self, cfg: Config, num_actions: int):
        super().__init__()
        self.cfg = cfg
        self.num_actions = num_actions
        self.groups, self.classes = cfg.groups, cfg.classes
        self.stoch = cfg.groups * cfg.classes
        self.deter = cfg.deter
        self.unimix = cfg.unimix
        feat = cfg.deter + self.stoch

        self.encoder = FeatureExtractor(cfg.image_size, cfg.cnn_depth, cfg.cnn_stages)
        self.seq = SequenceModel(self.stoch, num_actions, cfg.hidden, cfg.deter)
        self.prior = mlp(cfg.deter, cfg.hidden, self.stoch)
        self.posterior = mlp(cfg.deter + cfg.embed, cfg.hidden, self.stoch)
        self.cdp = mlp(cfg.deter, cfg.cdp_hidden, cfg.embed)
        self.reward = mlp(feat, cfg.hidden, 1)
        self.cont = mlp(feat, cfg.hidden, 1)
        self.decoder = (
            Decoder(feat, cfg.image_size, cfg.cnn_depth, cfg.cnn_stages)
            if cfg.has("dreamer_recon")
            else None
        )
        self.action = (
            mlp(feat + cfg.embed, cfg.hidden, num_actions) if cfg.has("mudreamer_action") else None
        )

    # -- parameter groups ------------------------------------------------------

    def param_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        """encoder: feature extractor; rssm: sequence model, prior, posterior,
        CDP predictor; other: every remaining head."""
        groups: dict[str, list] = {"encoder": [], "rssm": [], "other": []}
        for name, p in self.named_parameters():
            top = name.split(".", 1)[0]
            if top == "encoder":
                groups["encoder"].append((name, p))
            elif top in ("seq", "prior", "posterior", "cdp"):
                groups["rssm"].append((name, p))
            else:
                groups["other"].append((name, p))
        return groups

    # -- single operations -----------------------------------------------------

    def extract_features(self, image: torch.Tensor) -> torch.Tensor:
        return self.encoder(image)

    def code(self, logits: torch.Tensor) -> CategoricalCode:
        return CategoricalCode(logits.reshape(*logits.shape[:-1], self.groups, self.classes), self.unimix)

    def encode_posterior(self, h: torch.Tensor, u: torch.Tensor) -> CategoricalCode:
        return self.code(self.posterior(torch.cat([h, u], -1)))

    def predict_prior(self, h: torch.Tensor) -> CategoricalCode:
        return self.code(self.prior(h))

    def sequence_step(self, h, z, a) -> torch.Tensor:
        return self.seq(h, z, a)

    def predict_cdp(self, h: torch.Tensor) -> torch.Tensor:
        return self.cdp(h)

    def predict_heads(self, h, z, u_next=None, with_cdp: bool = False, sever_aux: bool = False) -> HeadOutputs:
        """Reward/continuation heads plus the optional decoder and action heads.

        With ``sever_aux`` the reward and continuation heads see detached
        features: they still train but send no gradient into (h, z).
        """
        feat = torch.cat([h, z], -1)
        aux_feat = feat.detach() if sever_aux else feat
        p = torch.sigmoid(self.cont(aux_feat).squeeze(-1)).clamp(CONT_EPS, 1.0 - CONT_EPS)
        out = HeadOutputs(reward_mean=self.reward(aux_feat).squeeze(-1), cont=p)
        if with_cdp:
            out.u_hat = self.predict_cdp(h)
        if self.decoder is not None:
            out.recon = self.decoder(feat)
        if self.action is not None and u_next is not None:
            out.action_logits = self.action(torch.cat([feat, u_next], -1))
        return out

    def initial(self, batch: int) -> tuple[torch.Tensor, torch.Tensor]:
        ref = self.seq.cell.weight_hh
        return (
            torch.zeros(batch, self.deter, dtype=ref.dtype, device=ref.device),
            torch.zeros(batch, self.stoch, dtype=ref.dtype, device=ref.device),
        )

    # -- unrolls ---------------------------------------------------------------

    def observe(
        self,
        images: torch.Tensor,
        prev_actions: torch.Tensor,
        is_first: torch.Tensor,
        generator: torch.Generator | None = None,
        state: tuple[torch.Tensor, torch.Tensor] | None = None,
    ) -> Posterior:
        """Posterior unroll over time-major inputs (T, B, ...).

        Recurrent state is reset to zero wherever ``is_first`` is set.
        """
        T, B = images.shape[:2]
        u = self.extract_features(images)
        h, z = state if state is not None else self.initial(B)
        prev_actions = prev_actions.to(u.dtype)
        keep = 1.0 - is_first.to(u.dtype).unsqueeze(-1)
        hs, zs, logits = [], [], []
        for t in range(T):
            h = self.sequence_step(h * keep[t], z * keep[t], prev_actions[t] * keep[t])
            post = self.encode_posterior(h, u[t])
            z = post.sample(generator).flatten(-2)
            hs.append(h)
            zs.append(z)
            logits.append(post.logits)
        h_seq = torch.stack(hs)
        post = CategoricalCode(torch.stack(logits), self.unimix)
        return Posterior(u=u, h=h_seq, z=torch.stack(zs), post=post, prior=self.predict_prior(h_seq))

    @torch.no_grad()
    def obs_step(self, state, prev_action, image, is_first, generator=None, sample=True):
        """One filtering step for acting in the environment."""
        h, z = state
        keep = 1.0 - is_first.to(h.dtype).unsqueeze(-1)
        h = self.sequence_step(h * keep, z * keep, prev_action.to(h.dtype) * keep)
        post = self.encode_posterior(h, self.extract_features(image))
        z = (post.sample(generator) if sample else post.mode()).flatten(-2)
        return h, z

    def img_step(self, h, z, action, generator=None):
        h = self.sequence_step(h, z, action)
        z = self.predict_prior(h).sample(generator).flatten(-2)
        return h, z
