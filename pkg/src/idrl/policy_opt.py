"""Auxiliary-delay soft actor-critic with n-step bootstrapping across the delay gap.

Critics live on the short-delay augmented state ``x^tau``; two actors act on
``x^tau`` and on the full-delay state ``x``. Only the full-delay actor is
deployable. Discrete action spaces use exact expectations over actions.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .nn import CategoricalPolicyHead, GaussianPolicyHead, Mlp, descend, make_adam, soft_update as _polyak


@dataclass
class TorchBatch:
    x: torch.Tensor        # encoded x_t
    x_aux: torch.Tensor    # encoded x^tau_t
    a: torch.Tensor        # raw a_t
    a_feat: torch.Tensor   # encoded a_t
    r_seq: torch.Tensor    # [B, n]
    x_n: torch.Tensor
    x_aux_n: torch.Tensor
    done: torch.Tensor     # float 0/1

    def __len__(self):
        return self.x.shape[0]


class AuxDelayAgent:
    def __init__(self, x_dim: int, x_aux_dim: int, generator: torch.Generator, *,
                 n_actions: int | None = None, action_low=None, action_high=None,
                 actor_hidden: Sequence[int] = (256, 256), critic_hidden: Sequence[int] = (256, 256),
                 gamma: float = 0.99, alpha: float = 0.2, polyak: float = 0.995, n_step: int = 1,
                 lr: float = 3e-4):
        self.discrete = n_actions is not None
        self.n_actions = n_actions
        self.gamma, self.alpha, self.polyak, self.n_step = gamma, alpha, polyak, n_step
        if self.discrete:
            self.actor = CategoricalPolicyHead(x_dim, n_actions, actor_hidden, generator)
            self.aux_actor = CategoricalPolicyHead(x_aux_dim, n_actions, actor_hidden, generator)
            self.q1 = Mlp([x_aux_dim, *critic_hidden, n_actions], generator)
            self.q2 = Mlp([x_aux_dim, *critic_hidden, n_actions], generator)
        else:
            action_dim = len(action_low)
            self.actor = GaussianPolicyHead(x_dim, action_dim, actor_hidden, action_low, action_high, generator)
            self.aux_actor = GaussianPolicyHead(x_aux_dim, action_dim, actor_hidden, action_low, action_high,
                                                generator)
            self.q1 = Mlp([x_aux_dim + action_dim, *critic_hidden, 1], generator)
            self.q2 = Mlp([x_aux_dim + action_dim, *critic_hidden, 1], generator)
        self.q1_targ = copy.deepcopy(self.q1)
        self.q2_targ = copy.deepcopy(self.q2)
        for p in list(self.q1_targ.parameters()) + list(self.q2_targ.parameters()):
            p.requires_grad_(False)
        self.opt_actor = make_adam(self.actor.parameters(), lr)
        self.opt_aux = make_adam(self.aux_actor.parameters(), lr)
        self.opt_q1 = make_adam(self.q1.parameters(), lr)
        self.opt_q2 = make_adam(self.q2.parameters(), lr)

    def modules(self) -> dict:
        return {"actor": self.actor, "aux_actor": self.aux_actor, "q1": self.q1, "q2": self.q2,
                "q1_targ": self.q1_targ, "q2_targ": self.q2_targ}

    def optimizers(self) -> dict:
        return {"actor": self.opt_actor, "aux_actor": self.opt_aux, "q1": self.opt_q1, "q2": self.opt_q2}

    # -- critics -----------------------------------------------------------
    def q(self, critic: Mlp, x_aux: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
        """Q at given raw actions."""
        if self.discrete:
            idx = a.reshape(a.shape[0], -1)[:, 0].round().long()
            return critic(x_aux).gather(-1, idx.unsqueeze(-1)).squeeze(-1)
        return critic(torch.cat([x_aux, a], dim=-1)).squeeze(-1)

    def _soft_value(self, critic, x_aux, actor, x_actor, noise=None, generator=None):
        """``E_{a~actor(.|x_actor)}[critic(x_aux, a) - alpha log actor(a|x_actor)]``."""
        if self.discrete:
            logp = actor.log_probs(x_actor)
            return (logp.exp() * (critic(x_aux) - self.alpha * logp)).sum(-1)
        a, logp = actor.sample(x_actor, generator, noise)
        return self.q(critic, x_aux, a) - self.alpha * logp

    def act(self, x: torch.Tensor, deterministic: bool = False, generator=None):
        with torch.no_grad():
            if deterministic:
                return self.actor.mode(x)
            return self.actor.sample(x, generator)[0]


def td_target(agent: AuxDelayAgent, batch: TorchBatch, generator=None, noise=None) -> torch.Tensor:
    """``sum_i gamma^i r_{t+i} + gamma^n min(Y1, Y2)``; ``noise`` = (eps for Y1, eps for Y2) freezes the draws."""
    n = batch.r_seq.shape[1]
    disc = agent.gamma ** torch.arange(n, dtype=batch.r_seq.dtype)
    ret = (batch.r_seq * disc).sum(-1)
    e1, e2 = (None, None) if noise is None else noise
    with torch.no_grad():
        y1 = agent._soft_value(agent.q1_targ, batch.x_aux_n, agent.aux_actor, batch.x_aux_n, e1, generator)
        y2 = agent._soft_value(agent.q2_targ, batch.x_aux_n, agent.actor, batch.x_n, e2, generator)
        boot = torch.minimum(y1, y2)
    return ret + (agent.gamma ** n) * (1.0 - batch.done) * boot


def critic_losses(agent: AuxDelayAgent, batch: TorchBatch, target: torch.Tensor):
    l1 = ((agent.q(agent.q1, batch.x_aux, batch.a) - target) ** 2).mean()
    l2 = ((agent.q(agent.q2, batch.x_aux, batch.a) - target) ** 2).mean()
    return l1, l2


def critic_update(agent: AuxDelayAgent, batch: TorchBatch, generator=None, target=None) -> float:
    if target is None:
        target = td_target(agent, batch, generator)
    l1, l2 = critic_losses(agent, batch, target)
    descend(agent.q1, agent.opt_q1, l1)
    descend(agent.q2, agent.opt_q2, l2)
    return float((l1 + l2).detach()) / 2


def actor_loss(agent: AuxDelayAgent, batch: TorchBatch, branch: str, noise=None, generator=None) -> torch.Tensor:
    """``E[alpha log pi(a|s) - min_i Q_i(x^tau_t, a)]`` with ``a`` drawn from the chosen actor."""
    if branch == "aux":
        actor, x_actor = agent.aux_actor, batch.x_aux
    elif branch == "full":
        actor, x_actor = agent.actor, batch.x
    else:
        raise ValueError(f"unknown actor branch {branch!r}")
    if agent.discrete:
        logp = actor.log_probs(x_actor)
        qmin = torch.minimum(agent.q1(batch.x_aux), agent.q2(batch.x_aux))
        return (logp.exp() * (agent.alpha * logp - qmin)).sum(-1).mean()
    a, logp = actor.sample(x_actor, generator, noise)
    qmin = torch.minimum(agent.q(agent.q1, batch.x_aux, a), agent.q(agent.q2, batch.x_aux, a))
    return (agent.alpha * logp - qmin).mean()


def actor_update(agent: AuxDelayAgent, batch: TorchBatch, coin: float, generator=None) -> tuple[str, float]:
    """``coin > 0.5`` updates the auxiliary actor, otherwise the full-delay actor."""
    branch = "aux" if coin > 0.5 else "full"
    loss = actor_loss(agent, batch, branch, generator=generator)
    if branch == "aux":
        descend(agent.aux_actor, agent.opt_aux, loss)
    else:
        descend(agent.actor, agent.opt_actor, loss)
    return branch, float(loss.detach())


def soft_update(agent: AuxDelayAgent, rho: float | None = None):
    rho = agent.polyak if rho is None else rho
    _polyak(agent.q1_targ, agent.q1, rho)
    _polyak(agent.q2_targ, agent.q2, rho)


def train_iteration(agent: AuxDelayAgent, batch: TorchBatch, rng: np.random.Generator,
                    generator: torch.Generator) -> dict:
    """One pass: TD target, both critics, one actor (coin flip), Polyak update."""
    critic_loss = critic_update(agent, batch, generator)
    branch, a_loss = actor_update(agent, batch, float(rng.random()), generator)
    soft_update(agent)
    return {"critic_loss": critic_loss, "actor_loss": a_loss, "branch": branch}
