"""Factored categorical codes with uniform mixing and straight-through samples."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F


class NumericalError(FloatingPointError):
    pass


def symlog(x: torch.Tensor) -> torch.Tensor:
    return torch.sign(x) * torch.log1p(torch.abs(x))


def symexp(x: torch.Tensor) -> torch.Tensor:
    return torch.sign(x) * (torch.exp(torch.abs(x)) - 1.0)


@dataclass
class CategoricalCode:
    """G independent categoricals over C classes, stored as raw logits (..., G, C).

    Probabilities are mixed with ``unimix`` of the uniform distribution so that
    every class keeps mass >= unimix / C.
    """

    logits: torch.Tensor
    unimix: float = 0.01

    def __post_init__(self):
        if not torch.isfinite(self.logits).all():
            bad = (~torch.isfinite(self.logits)).sum().item()
            raise NumericalError(
                f"non-finite logits: {bad} of {self.logits.numel()} entries, "
                f"shape {tuple(self.logits.shape)}"
            )

    @property
    def groups(self) -> int:
        return self.logits.shape[-2]

    @property
    def classes(self) -> int:
        return self.logits.shape[-1]

    @property
    def probs(self) -> torch.Tensor:
        probs = torch.softmax(self.logits, -1)
        if self.unimix > 0:
            probs = (1.0 - self.unimix) * probs + self.unimix / self.classes
        return probs

    @property
    def log_probs(self) -> torch.Tensor:
        if self.unimix > 0:
            return torch.log(self.probs)
        return torch.log_softmax(self.logits, -1)

    def detach(self) -> "CategoricalCode":
        return CategoricalCode(self.logits.detach(), self.unimix)

    def sample(self, generator: torch.Generator | None = None) -> torch.Tensor:
        """One-hot sample whose value is the hard code and whose gradient is d(probs)."""
        probs = self.probs
        flat = probs.detach().reshape(-1, self.classes)
        idx = torch.multinomial(flat, 1, generator=generator).squeeze(-1)
        hard = F.one_hot(idx, self.classes).to(probs.dtype).reshape(probs.shape)
        # (probs - probs.detach()) is exactly zero, so the value stays one-hot bit for bit
        return hard + (probs - probs.detach())

    def mode(self) -> torch.Tensor:
        probs = self.probs
        hard = F.one_hot(probs.argmax(-1), self.classes).to(probs.dtype)
        return hard + (probs - probs.detach())

    def entropy(self) -> torch.Tensor:
        return -(self.probs * self.log_probs).sum((-2, -1))


def kl_divergence(p: CategoricalCode, q: CategoricalCode) -> torch.Tensor:
    """KL[p || q] summed over groups and classes, shape ``logits.shape[:-2]``."""
    return (p.probs * (p.log_probs - q.log_probs)).sum((-2, -1))


def gaussian_nll(mean: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Unit-variance Gaussian negative log-likelihood, elementwise."""
    return 0.5 * (target - mean) ** 2 + 0.5 * math.log(2 * math.pi)


def bernoulli_nll(p: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return -(target * torch.log(p) + (1.0 - target) * torch.log1p(-p))
