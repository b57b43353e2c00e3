"""World-model loss terms with explicit stop-gradient placement.

Every sequence argument is time-major: axis 0 is time, any further leading
axes are batch axes. Terms are summed over time and averaged over batch.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields

import torch
import torch.nn.functional as F

from .distributions import (
    CategoricalCode,
    NumericalError,
    bernoulli_nll,
    gaussian_nll,
    kl_divergence,
    symlog,
)

log = logging.getLogger(__name__)

COS_EPS = 1e-8
COLLAPSE_VAR = 1e-6


@dataclass
class LossWeights:
    cdp: float = 500.0
    aux: float = 1.0
    dyn: float = 1.0
    rep: float = 0.1
    recon: float = 0.0
    action: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be >= 0")


@dataclass
class LossBreakdown:
    cdp: torch.Tensor
    aux_reward: torch.Tensor
    aux_cont: torch.Tensor
    dyn: torch.Tensor
    rep: torch.Tensor
    recon: torch.Tensor
    action: torch.Tensor
    total: torch.Tensor
    raw_kl: float = 0.0
    cos_mean: float = 0.0
    u_var: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def aux(self) -> torch.Tensor:
        return self.aux_reward + self.aux_cont

    def record(self) -> dict:
        """Flat float record for the metrics stream."""
        out = {
            name: float(torch.as_tensor(getattr(self, name)).detach())
            for name in ("cdp", "aux_reward", "aux_cont", "dyn", "rep", "recon", "action", "total")
        }
        out["aux"] = out["aux_reward"] + out["aux_cont"]
        out.update(raw_kl=self.raw_kl, cos_mean=self.cos_mean, u_var=self.u_var)
        out.update(self.extra)
        return out


def _time_sum(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 0:
        return x
    return x.reshape(x.shape[0], -1).mean(1).sum(0)


def cosine(a: torch.Tensor, b: torch.Tensor, eps: float = COS_EPS) -> torch.Tensor:
    na = a.norm(dim=-1).clamp_min(eps)
    nb = b.norm(dim=-1).clamp_min(eps)
    return (a * b).sum(-1) / (na * nb)


def cdp_loss(u_target: torch.Tensor, u_hat: torch.Tensor) -> torch.Tensor:
    """Negative cosine similarity summed over time; the target is stop-gradded."""
    if u_target.shape != u_hat.shape:
        raise ValueError(f"length mismatch: target {tuple(u_target.shape)} vs prediction {tuple(u_hat.shape)}")
    return -_time_sum(cosine(u_target.detach(), u_hat))


@dataclass
class KLTerms:
    dyn: torch.Tensor
    rep: torch.Tensor
    raw: torch.Tensor  # unclipped KL per time step (batch mean)


def kl_balanced(post: CategoricalCode, prior: CategoricalCode, free_bits: float = 1.0) -> KLTerms:
    """dyn = max(1, KL[sg(post) || prior]), rep = max(1, KL[post || sg(prior)]).

    The floor is applied to the batch-mean KL of each time step.
    """
    dyn_kl = kl_divergence(post.detach(), prior)
    rep_kl = kl_divergence(post, prior.detach())
    if not (torch.isfinite(dyn_kl).all() and torch.isfinite(rep_kl).all()):
        raise NumericalError("non-finite KL between posterior and prior")

    def per_step(kl):
        return kl.reshape(1) if kl.dim() == 0 else kl.reshape(kl.shape[0], -1).mean(1)

    dyn_t, rep_t = per_step(dyn_kl), per_step(rep_kl)
    return KLTerms(
        dyn=dyn_t.clamp_min(free_bits).sum(),
        rep=rep_t.clamp_min(free_bits).sum(),
        raw=dyn_t.detach(),
    )


def aux_loss(heads, rewards: torch.Tensor, conts: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Reward and continuation negative log-likelihoods (summed over time)."""
    reward = _time_sum(gaussian_nll(heads.reward_mean, symlog(rewards.to(heads.reward_mean.dtype))))
    cont = _time_sum(bernoulli_nll(heads.cont, conts.to(heads.cont.dtype)))
    return reward, cont


def recon_loss(decoded: torch.Tensor | None, images: torch.Tensor) -> torch.Tensor:
    """Per-pixel unit Gaussian NLL in [-0.5, 0.5] pixel space, summed over pixels."""
    if decoded is None:
        return torch.zeros(())
    target = images.to(decoded.dtype) / 255.0 - 0.5
    if decoded.shape != target.shape:
        raise ValueError(f"decoded {tuple(decoded.shape)} vs images {tuple(target.shape)}")
    nll = gaussian_nll(decoded, target).flatten(-3).sum(-1)
    return _time_sum(nll)


def action_loss(logits: torch.Tensor | None, actions: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Cross-entropy of the action-prediction head against one-hot actions."""
    if logits is None:
        return torch.zeros(())
    nll = -(actions.to(logits.dtype) * torch.log_softmax(logits, -1)).sum(-1)
    if mask is not None:
        nll = nll * mask.to(nll.dtype)
    return _time_sum(nll)


def total_loss(terms: dict[str, torch.Tensor], weights: LossWeights, **diagnostics) -> LossBreakdown:
    """Weighted sum of the loss terms.

    ``terms`` holds cdp, aux_reward, aux_cont, dyn, rep and optionally recon
    and action; missing optional terms count as zero.
    """
    ref = terms["dyn"]
    zero = torch.zeros((), dtype=ref.dtype, device=ref.device)
    t = {k: terms.get(k, zero) for k in ("cdp", "aux_reward", "aux_cont", "dyn", "rep", "recon", "action")}
    for k, v in t.items():
        if not torch.isfinite(v).all():
            dump = ", ".join(f"{n}={float(x.detach()):.6g}" for n, x in t.items())
            raise NumericalError(f"non-finite loss term {k}: {dump}")
    total = (
        weights.cdp * t["cdp"]
        + weights.aux * (t["aux_reward"] + t["aux_cont"])
        + weights.dyn * t["dyn"]
        + weights.rep * t["rep"]
        + weights.recon * t["recon"]
        + weights.action * t["action"]
    )
    out = LossBreakdown(total=total, **t)
    out.raw_kl = float(diagnostics.get("raw_kl", 0.0))
    out.cos_mean = float(diagnostics.get("cos_mean", 0.0))
    out.u_var = float(diagnostics.get("u_var", 0.0))
    if out.u_var < COLLAPSE_VAR and out.cos_mean > 0.99 and "u_var" in diagnostics:
        log.warning("possible representation collapse: u_hat batch variance %.3g, cosine %.4f", out.u_var, out.cos_mean)
    return out


def diagnostics(u: torch.Tensor, u_hat: torch.Tensor, raw_kl: torch.Tensor) -> dict:
    with torch.no_grad():
        flat = u_hat.reshape(-1, u_hat.shape[-1])
        return dict(
            raw_kl=float(raw_kl.mean()),
            cos_mean=float(cosine(u, u_hat).mean()),
            u_var=float(flat.var(0, unbiased=False).mean()) if flat.shape[0] > 1 else 0.0,
        )
