"""Constant observation delay: augmented states, the delayed environment and belief machinery."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .envs import Env, TabularEnv, TabularMDP

NEG_INF = float("-inf")


@dataclass(frozen=True)
class AugmentedState:
    """Last observed state plus the actions issued since it was generated."""

    delayed_obs: object
    action_window: tuple = ()

    @property
    def delay(self) -> int:
        return len(self.action_window)

    def flat(self) -> np.ndarray:
        parts = [np.atleast_1d(np.asarray(self.delayed_obs, dtype=np.float64))]
        parts += [np.atleast_1d(np.asarray(a, dtype=np.float64)) for a in self.action_window]
        return np.concatenate(parts)

    def __eq__(self, other):
        if not isinstance(other, AugmentedState) or self.delay != other.delay:
            return NotImplemented
        return bool(np.array_equal(self.flat(), other.flat()))

    def __hash__(self):
        return hash(self.flat().tobytes())


def augment(delayed_obs, action_window: Sequence = (), delay: int | None = None) -> AugmentedState:
    """Concatenate ``s_{t-D}`` with ``(a_{t-D}, ..., a_{t-1})``."""
    window = tuple(action_window)
    if delay is not None and len(window) != delay:
        raise ValueError(f"action window has length {len(window)}, expected delay {delay}")
    return AugmentedState(delayed_obs, window)


def split_flat(flat: np.ndarray, state_dim: int, action_dim: int, delay: int):
    """Inverse of :meth:`AugmentedState.flat` on raw rows: ``(obs [.., state_dim], window [.., delay, action_dim])``."""
    flat = np.asarray(flat)
    if flat.shape[-1] != state_dim + delay * action_dim:
        raise ValueError(f"flat augmented state has width {flat.shape[-1]}, "
                         f"expected {state_dim} + {delay}*{action_dim}")
    obs = flat[..., :state_dim]
    window = flat[..., state_dim:].reshape(flat.shape[:-1] + (delay, action_dim))
    return obs, window


class DelayedEnv:
    """Wraps a delay-free env so the agent sees ``x_t = (s_{t-D}, a_{t-D}, ..., a_{t-1})``.

    The first ``D`` steps reveal the initial state again, with the window padded by
    the zero action. ``aux_delay`` additionally tracks the augmented state at a
    shorter delay (used for critic learning only).
    """

    def __init__(self, env: Env, delay: int, aux_delay: int | None = None):
        if delay < 0:
            raise ValueError(f"delay must be non-negative, got {delay}")
        if aux_delay is not None and not 0 <= aux_delay <= delay:
            raise ValueError(f"aux delay must lie in [0, {delay}], got {aux_delay}")
        self.env = env
        self.delay = delay
        self.aux_delay = aux_delay
        self._states: list = []
        self._actions: list = []
        self._rewards: list[float] = []
        self.t = 0
        self.done = True

    def reset(self, seed) -> AugmentedState:
        self._states = [self.env.reset(seed)]
        self._actions = []
        self._rewards = []
        self.t = 0
        self.done = False
        return self.observe()

    def _augmented(self, delay: int) -> AugmentedState:
        t = self.t
        obs = self._states[max(t - delay, 0)]
        pad = self.env.zero_action
        window = tuple(self._actions[k] if k >= 0 else pad for k in range(t - delay, t))
        return AugmentedState(obs, window)

    def observe(self) -> AugmentedState:
        return self._augmented(self.delay)

    def observe_aux(self) -> AugmentedState:
        if self.aux_delay is None:
            raise ValueError("no auxiliary delay configured")
        return self._augmented(self.aux_delay)

    @property
    def true_state(self):
        return self._states[-1]

    @property
    def pending(self) -> list:
        """The ``D`` states generated but not yet revealed (initial state repeated while padding)."""
        t = self.t
        return [self._states[max(k, 0)] for k in range(t - self.delay + 1, t + 1)]

    @property
    def true_reward(self) -> float:
        """Reward ``R(s_t, a_t)`` of the most recent true step (evaluation only)."""
        return self._rewards[-1]

    @property
    def revealed_reward(self) -> float:
        """Reward travelling with the revealed observation: ``R(s_{t-D}, a_{t-D})``, 0 while padding."""
        k = self.t - 1 - self.delay
        return self._rewards[k] if k >= 0 else 0.0

    def step(self, action, noise=None):
        """Advance the true process one step; returns ``(x_{t+1}, done)``."""
        if self.done:
            raise RuntimeError("delayed_step called after the episode finished; call reset first")
        action = self.env.check_action(action)
        nxt, r, done = self.env.step(self._states[-1], action, noise, t=self.t)
        self._states.append(nxt)
        self._actions.append(action)
        self._rewards.append(r)
        self.t += 1
        self.done = bool(done)
        return self.observe(), self.done


def delayed_step(denv: DelayedEnv, action, noise=None):
    return denv.step(action, noise)


# ---------------------------------------------------------------------------
# beliefs


@dataclass(frozen=True)
class BeliefDist:
    """Distribution over the current true state: an exact vector (``support`` = state indices) or particles."""

    support: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        if abs(float(np.sum(self.weights)) - 1.0) > 1e-9:
            raise ValueError("belief weights must sum to 1")

    def probs(self, n_states: int) -> np.ndarray:
        """Histogram over tabular states."""
        idx = np.asarray(self.support).reshape(len(self.weights), -1)[:, 0].round().astype(np.int64)
        return np.bincount(idx, weights=self.weights, minlength=n_states)

    def mean(self) -> np.ndarray:
        return np.tensordot(self.weights, np.asarray(self.support, dtype=np.float64), axes=1)


def belief_matrix(mdp: TabularMDP, window: Sequence[int]) -> np.ndarray:
    """``prod_i T_{a_i}`` for the recorded actions; row ``s`` is the belief from ``s_{t-D} = s``."""
    out = np.eye(mdp.n_states)
    for a in window:
        out = out @ mdp.transition[int(a)]
    return out


def belief_exact(mdp: TabularMDP | TabularEnv, x: AugmentedState) -> BeliefDist:
    if isinstance(mdp, TabularEnv):
        mdp = mdp.mdp
    s = int(x.delayed_obs)
    vec = np.zeros(mdp.n_states)
    vec[s] = 1.0
    for a in x.action_window:
        vec = vec @ mdp.transition[int(a)]
    return BeliefDist(np.arange(mdp.n_states), vec)


def belief_mc(env: Env, x: AugmentedState, n_particles: int, seed) -> BeliefDist:
    """Roll ``n_particles`` copies of ``s_{t-D}`` forward under the recorded actions."""
    if n_particles < 1:
        raise ValueError("n_particles must be >= 1")
    if x.delay == 0:
        return BeliefDist(np.asarray([x.delayed_obs]), np.ones(1))
    rng = np.random.default_rng(seed)
    states = np.repeat(np.atleast_1d(np.asarray(x.delayed_obs))[None], n_particles, axis=0)
    if isinstance(env, TabularEnv):
        states = states[:, 0].astype(np.int64)
    for a in x.action_window:
        states = env.sample_next(states, a, rng)
    return BeliefDist(states, np.full(n_particles, 1.0 / n_particles))


def tv_distance(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


# ---------------------------------------------------------------------------
# trajectory probability


def delayed_traj_logprob(mdp: TabularMDP, policy: Callable[[AugmentedState], np.ndarray],
                         states: Sequence[AugmentedState], actions: Sequence[int], gamma: float,
                         pad_action: int = 0) -> float:
    """``log[rho_D(x_0) prod_t gamma^t T_D(x_{t+1}|x_t,a_t) pi_D(a_t|x_t)]``, gamma inside the product.

    ``policy(x)`` returns the action probability vector at ``x``. Impossible
    trajectories (zero transition, broken window shift, zero policy mass) give ``-inf``.
    """
    if len(states) != len(actions) + 1:
        raise ValueError("need one more augmented state than actions")
    delay = states[0].delay
    x0 = states[0]
    if any(int(a) != pad_action for a in x0.action_window):
        return NEG_INF
    p0 = mdp.initial_dist[int(x0.delayed_obs)]
    if p0 <= 0:
        return NEG_INF
    total = math.log(p0)
    log_gamma = math.log(gamma)
    for t, (x, a) in enumerate(zip(states[:-1], actions)):
        nxt = states[t + 1]
        a = int(a)
        if nxt.delay != delay:
            return NEG_INF
        if delay == 0:
            p_obs = mdp.transition[a, int(x.delayed_obs), int(nxt.delayed_obs)]
        else:
            expected_window = tuple(int(b) for b in x.action_window[1:]) + (a,)
            if tuple(int(b) for b in nxt.action_window) != expected_window:
                return NEG_INF
            p_obs = mdp.transition[int(x.action_window[0]), int(x.delayed_obs), int(nxt.delayed_obs)]
        p_act = float(np.asarray(policy(x))[a])
        if p_obs <= 0 or p_act <= 0:
            return NEG_INF
        total += t * log_gamma + math.log(p_obs) + math.log(p_act)
    return total


# ---------------------------------------------------------------------------
# exact augmented MDP


@dataclass
class AugmentedTabular:
    """The delayed MDP on ``S x A^D`` written out explicitly.

    ``transition[a, i, j]`` follows the Dirac window shift; ``reward[i, a]`` is the
    belief-averaged reward; ``reward_delayed[i, a]`` is ``R(s_{t-D}, a)``.
    """

    states: list[AugmentedState]
    index: dict
    transition: np.ndarray
    reward: np.ndarray
    reward_delayed: np.ndarray
    initial_dist: np.ndarray
    beliefs: np.ndarray
    delay: int

    @property
    def n(self) -> int:
        return len(self.states)


def build_augmented(mdp: TabularMDP, delay: int, pad_action: int = 0) -> AugmentedTabular:
    S, A = mdp.n_states, mdp.n_actions
    if S * A ** delay > 100_000:
        raise ValueError(f"augmented space too large to enumerate: {S} * {A}^{delay}")
    windows = list(itertools.product(range(A), repeat=delay))
    states = [AugmentedState(s, w) for s in range(S) for w in windows]
    index = {(x.delayed_obs, x.action_window): i for i, x in enumerate(states)}
    n = len(states)
    P = np.zeros((A, n, n))
    beliefs = np.zeros((n, S))
    for i, x in enumerate(states):
        s, w = x.delayed_obs, x.action_window
        beliefs[i] = belief_exact(mdp, x).weights
        for a in range(A):
            if delay == 0:
                for s2 in range(S):
                    P[a, i, index[(s2, ())]] = mdp.transition[a, s, s2]
            else:
                w2 = w[1:] + (a,)
                for s2 in range(S):
                    P[a, i, index[(s2, w2)]] += mdp.transition[w[0], s, s2]
    R_belief = beliefs @ mdp.reward
    R_delayed = np.array([mdp.reward[x.delayed_obs] for x in states])
    rho = np.zeros(n)
    pad = (pad_action,) * delay
    for s in range(S):
        rho[index[(s, pad)]] = mdp.initial_dist[s]
    return AugmentedTabular(states, index, P, R_belief, R_delayed, rho, beliefs, delay)
