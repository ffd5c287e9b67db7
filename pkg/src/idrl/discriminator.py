"""Structured adversarial discriminator ``D = exp(R) / (exp(R) + pi(a|x))`` and its reward."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
from torch.nn import functional as F

from .nn import DTYPE, Mlp, descend, input_gradient_penalty, make_adam

DENSITY_FLOOR = 1e-300
LOG_DENSITY_FLOOR = math.log(DENSITY_FLOOR)


@dataclass
class Pairs:
    """Augmented state-action pairs: encoded state, raw action (for the policy density), encoded action."""

    x: torch.Tensor
    a: torch.Tensor
    a_feat: torch.Tensor

    @property
    def inputs(self) -> torch.Tensor:
        return torch.cat([self.x, self.a_feat], dim=-1)

    def __len__(self):
        return self.x.shape[0]


class Discriminator:
    def __init__(self, in_dim: int, hidden: Sequence[int], policy, generator: torch.Generator,
                 delta: float = 1e-7, lambda_gp: float = 10.0, lambda_ent: float = 1e-3, lr: float = 3e-4):
        self.reward_net = Mlp([in_dim, *hidden, 1], generator)
        self.policy = policy
        self.delta = delta
        self.lambda_gp = lambda_gp
        self.lambda_ent = lambda_ent
        self.opt = make_adam(self.reward_net.parameters(), lr)

    def r_theta(self, pairs: Pairs) -> torch.Tensor:
        return self.reward_net(pairs.inputs).squeeze(-1)

    def policy_logp(self, pairs: Pairs) -> torch.Tensor:
        # the policy enters the discriminator as a constant
        with torch.no_grad():
            return torch.clamp(self.policy.log_prob(pairs.x, pairs.a), min=LOG_DENSITY_FLOOR)

    def logits(self, pairs: Pairs) -> torch.Tensor:
        return self.r_theta(pairs) - self.policy_logp(pairs)

    def d_value(self, pairs: Pairs) -> torch.Tensor:
        with torch.no_grad():
            return torch.sigmoid(self.logits(pairs))

    def loss(self, expert: Pairs, gen: Pairs, generator: torch.Generator | None = None,
             mix: torch.Tensor | None = None) -> tuple[torch.Tensor, dict]:
        """Cross-entropy on both batches plus gradient penalty and output-entropy bonus.

        The penalty is evaluated on the reward network at random convex mixes
        of paired expert/generator inputs; ``mix`` fixes the mixing weights.
        """
        if len(expert) == 0 or len(gen) == 0:
            raise ValueError("both batches must be non-empty")
        le = self.logits(expert)
        lg = self.logits(gen)
        bce = -F.logsigmoid(le).mean() - F.logsigmoid(-lg).mean()
        total = bce
        terms = {"bce": float(bce.detach())}
        if self.lambda_gp > 0:
            m = min(len(expert), len(gen))
            if mix is None:
                mix = torch.rand((m, 1), generator=generator, dtype=DTYPE)
            points = mix * expert.inputs[:m] + (1.0 - mix) * gen.inputs[:m]
            gp = input_gradient_penalty(self.reward_net, points)
            total = total + self.lambda_gp * gp
            terms["gp"] = float(gp.detach())
        if self.lambda_ent > 0:
            logits = torch.cat([le, lg])
            d = torch.sigmoid(logits)
            h = -(d * F.logsigmoid(logits) + (1.0 - d) * F.logsigmoid(-logits))
            ent = -h.mean()
            total = total + self.lambda_ent * ent
            terms["entropy"] = float(ent.detach())
        return total, terms

    def update(self, expert: Pairs, gen: Pairs, generator: torch.Generator) -> float:
        loss, _ = self.loss(expert, gen, generator)
        descend(self.reward_net, self.opt, loss)
        return float(loss.detach())

    def reward(self, pairs: Pairs, delta: float | None = None) -> torch.Tensor:
        """``log(D + delta) - log(1 - D + delta)``; with ``delta = 0`` this is exactly the logit."""
        delta = self.delta if delta is None else delta
        with torch.no_grad():
            z = self.logits(pairs)
            if delta == 0:
                return F.logsigmoid(z) - F.logsigmoid(-z)
            return torch.log(torch.sigmoid(z) + delta) - torch.log(torch.sigmoid(-z) + delta)


def d_value(disc: Discriminator, pairs: Pairs) -> torch.Tensor:
    return disc.d_value(pairs)


def disc_loss(disc: Discriminator, expert: Pairs, gen: Pairs, generator=None):
    return disc.loss(expert, gen, generator)


def reward(disc: Discriminator, pairs: Pairs) -> torch.Tensor:
    return disc.reward(pairs)
