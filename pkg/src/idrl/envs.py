"""Delay-free toy environments with known Lipschitz constants.

Two tabular environments (slippery chain, 5x5 gridworld) admit exact
oracles; two continuous ones (torque-limited pendulum, 1-D point mass)
exercise the continuous-action path. All randomness enters through an
explicit ``noise`` argument: an integer seed or a ``numpy.random.Generator``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any

import numpy as np

ROW_TOL = 1e-12


@dataclass(frozen=True)
class EnvSpec:
    state_dim: int
    action_dim: int
    horizon: int
    gamma: float
    r_max: float
    n_actions: int | None = None  # set for discrete action spaces
    action_low: tuple[float, ...] | None = None
    action_high: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.state_dim < 1 or self.action_dim < 1:
            raise ValueError("state_dim and action_dim must be positive")
        if self.horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie strictly inside (0, 1), got {self.gamma}")
        if self.r_max <= 0:
            raise ValueError(f"r_max must be positive, got {self.r_max}")
        if self.n_actions is None and (self.action_low is None or self.action_high is None):
            raise ValueError("continuous action spaces need per-dimension bounds")

    @property
    def discrete(self) -> bool:
        return self.n_actions is not None


def _rng(noise) -> np.random.Generator:
    if noise is None:
        raise ValueError("stochastic step needs an explicit noise seed or Generator")
    return np.random.default_rng(noise)


class Env:
    """Base class. States and actions are passed explicitly; instances hold no episode state."""

    spec: EnvSpec
    env_id: str = "env"

    def reset(self, seed) -> Any:
        raise NotImplementedError

    def step(self, state, action, noise=None, t: int = 0):
        """Advance one step from ``state`` at time ``t``; returns ``(next_state, reward, done)``."""
        raise NotImplementedError

    def sample_next(self, states: np.ndarray, action, rng: np.random.Generator) -> np.ndarray:
        """Vectorised transition draw for a batch of states under one action."""
        raise NotImplementedError

    def reward(self, state, action) -> float:
        raise NotImplementedError

    def check_action(self, action):
        raise NotImplementedError

    @property
    def zero_action(self):
        raise NotImplementedError

    # network featurisation of raw state/action rows
    def encode_states(self, raw: np.ndarray) -> np.ndarray:
        return np.asarray(raw, dtype=np.float64)

    def encode_actions(self, raw: np.ndarray) -> np.ndarray:
        return np.asarray(raw, dtype=np.float64)

    @property
    def state_feature_dim(self) -> int:
        return self.spec.state_dim

    @property
    def action_feature_dim(self) -> int:
        return self.spec.action_dim

    def state_row(self, state) -> np.ndarray:
        return np.atleast_1d(np.asarray(state, dtype=np.float64))

    def action_row(self, action) -> np.ndarray:
        return np.atleast_1d(np.asarray(action, dtype=np.float64))

    def state_from_row(self, row):
        return np.array(row, dtype=np.float64)

    def action_from_row(self, row):
        return np.array(row, dtype=np.float64)


# ---------------------------------------------------------------------------
# tabular


@dataclass
class TabularMDP:
    """Exact finite MDP. ``transition[a, s, s']`` is row-stochastic for every action."""

    transition: np.ndarray
    reward: np.ndarray
    initial_dist: np.ndarray
    embedding: np.ndarray | None = None
    gamma: float = 0.9
    horizon: int = 50

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.reward = np.asarray(self.reward, dtype=np.float64)
        self.initial_dist = np.asarray(self.initial_dist, dtype=np.float64)
        if self.embedding is None:
            self.embedding = np.arange(self.n_states, dtype=np.float64)
        self.embedding = np.asarray(self.embedding, dtype=np.float64)
        self.validate()

    @property
    def n_states(self) -> int:
        return self.transition.shape[1]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[0]

    @property
    def r_max(self) -> float:
        return float(np.abs(self.reward).max())

    def validate(self):
        A, S, S2 = self.transition.shape
        if S != S2:
            raise ValueError(f"transition must be [A, S, S], got {self.transition.shape}")
        if self.reward.shape != (S, A):
            raise ValueError(f"reward must be [S, A] = [{S}, {A}], got {self.reward.shape}")
        if self.initial_dist.shape != (S,) or self.embedding.shape != (S,):
            raise ValueError("initial_dist and embedding must have one entry per state")
        if (self.transition < 0).any():
            raise ValueError("transition probabilities must be non-negative")
        rows = self.transition.sum(axis=2)
        if np.abs(rows - 1.0).max() > ROW_TOL:
            raise ValueError(f"transition rows must sum to 1 (max error {np.abs(rows - 1.0).max():.3e})")
        if (self.initial_dist < 0).any() or abs(self.initial_dist.sum() - 1.0) > ROW_TOL:
            raise ValueError("initial_dist must be a probability vector")

    def set_transition(self, a: int, s: int, row):
        """Replace one transition row, re-checking stochasticity."""
        row = np.asarray(row, dtype=np.float64)
        old = self.transition[a, s].copy()
        self.transition[a, s] = row
        try:
            self.validate()
        except ValueError:
            self.transition[a, s] = old
            raise


class TabularEnv(Env):
    """Environment view over a :class:`TabularMDP`. States and actions are integer indices."""

    def __init__(self, mdp: TabularMDP, env_id: str = "tabular"):
        self.mdp = mdp
        self.env_id = env_id
        self.spec = EnvSpec(state_dim=1, action_dim=1, horizon=mdp.horizon, gamma=mdp.gamma,
                            r_max=max(mdp.r_max, 1e-12), n_actions=mdp.n_actions)
        self._cdf = np.cumsum(mdp.transition, axis=2)
        self._init_cdf = np.cumsum(mdp.initial_dist)

    def reset(self, seed) -> int:
        u = np.random.default_rng(seed).random()
        return int(min(np.searchsorted(self._init_cdf, u, side="right"), self.mdp.n_states - 1))

    def check_action(self, action) -> int:
        a = np.asarray(action)
        if a.size != 1:
            raise ValueError(f"discrete action must be a single index, got shape {a.shape}")
        a = int(a.reshape(()))
        if not 0 <= a < self.mdp.n_actions:
            raise ValueError(f"action index {a} outside [0, {self.mdp.n_actions})")
        return a

    def step(self, state, action, noise=None, t: int = 0):
        a = self.check_action(action)
        s = int(state)
        row = self.mdp.transition[a, s]
        if row.max() == 1.0:
            nxt = int(row.argmax())
        else:
            u = _rng(noise).random()
            nxt = int(min(np.searchsorted(self._cdf[a, s], u, side="right"), self.mdp.n_states - 1))
        return nxt, float(self.mdp.reward[s, a]), t + 1 >= self.spec.horizon

    def sample_next(self, states, action, rng):
        states = np.asarray(states, dtype=np.int64)
        u = rng.random(states.shape[0])
        cdf = self._cdf[int(action), states]
        idx = (u[:, None] >= cdf).sum(axis=1)
        return np.minimum(idx, self.mdp.n_states - 1)

    def reward(self, state, action) -> float:
        return float(self.mdp.reward[int(state), int(action)])

    @property
    def zero_action(self) -> int:
        return 0

    def encode_states(self, raw):
        idx = np.asarray(raw, dtype=np.float64).reshape(-1).round().astype(np.int64)
        return np.eye(self.mdp.n_states)[idx]

    def encode_actions(self, raw):
        idx = np.asarray(raw, dtype=np.float64).reshape(-1).round().astype(np.int64)
        return np.eye(self.mdp.n_actions)[idx]

    @property
    def state_feature_dim(self) -> int:
        return self.mdp.n_states

    @property
    def action_feature_dim(self) -> int:
        return self.mdp.n_actions

    def state_from_row(self, row) -> int:
        return int(round(float(np.asarray(row).reshape(-1)[0])))

    def action_from_row(self, row) -> int:
        return int(round(float(np.asarray(row).reshape(-1)[0])))


def slippery_chain(n_states: int = 6, slip: float = 0.1, goal: int | None = None,
                   goal_reward: float = 1.0, init: str = "start", gamma: float = 0.9,
                   horizon: int = 50) -> TabularMDP:
    """K-state chain, actions 0=left / 1=right; with probability ``slip`` the move is reversed.

    Moves past either end leave the state unchanged. Reward ``goal_reward`` is
    paid in the goal state (default: right end) under any action.
    """
    if n_states < 2:
        raise ValueError("chain needs at least 2 states")
    if not 0.0 <= slip <= 1.0:
        raise ValueError(f"slip must be a probability, got {slip}")
    goal = n_states - 1 if goal is None else int(goal)
    T = np.zeros((2, n_states, n_states))
    for s in range(n_states):
        left, right = max(s - 1, 0), min(s + 1, n_states - 1)
        T[0, s, left] += 1.0 - slip
        T[0, s, right] += slip
        T[1, s, right] += 1.0 - slip
        T[1, s, left] += slip
    R = np.zeros((n_states, 2))
    R[goal, :] = goal_reward
    if init == "start":
        rho = np.zeros(n_states)
        rho[0] = 1.0
    elif init == "uniform":
        rho = np.full(n_states, 1.0 / n_states)
    else:
        raise ValueError(f"unknown init mode {init!r}")
    return TabularMDP(T, R, rho, gamma=gamma, horizon=horizon)


def gridworld(size: int = 5, slip: float = 0.1, goal: tuple[int, int] | None = None,
              gamma: float = 0.9, horizon: int = 50) -> TabularMDP:
    """``size`` x ``size`` grid, actions up/down/left/right; a slip replaces the move by a uniform one."""
    n = size * size
    goal = (size - 1, size - 1) if goal is None else tuple(goal)
    moves = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    T = np.zeros((4, n, n))
    for r in range(size):
        for c in range(size):
            s = r * size + c
            dest = []
            for dr, dc in moves:
                rr, cc = r + dr, c + dc
                dest.append(rr * size + cc if 0 <= rr < size and 0 <= cc < size else s)
            for a in range(4):
                T[a, s, dest[a]] += 1.0 - slip
                for d in dest:
                    T[a, s, d] += slip / 4
    R = np.zeros((n, 4))
    R[goal[0] * size + goal[1], :] = 1.0
    rho = np.zeros(n)
    rho[0] = 1.0
    return TabularMDP(T, R, rho, gamma=gamma, horizon=horizon)


# ---------------------------------------------------------------------------
# continuous


class ContinuousEnv(Env):
    """Continuous-state, box-action environment. Out-of-bound actions are clamped before dynamics."""

    declared_lipschitz: tuple[float, float] | None = None

    def check_action(self, action) -> np.ndarray:
        a = np.asarray(action, dtype=np.float64).reshape(-1)
        if a.shape != (self.spec.action_dim,):
            raise ValueError(f"action must have dimension {self.spec.action_dim}, got shape {np.shape(action)}")
        return np.clip(a, self.spec.action_low, self.spec.action_high)

    @property
    def zero_action(self) -> np.ndarray:
        return np.zeros(self.spec.action_dim)


class Pendulum(ContinuousEnv):
    """Torque-limited pendulum, semi-implicit Euler. State is ``(cos th, sin th, th_dot)``; th=0 is upright.

    Reward ``exp(-(2(1 - cos th) + 0.1 th_dot^2 + 0.001 u^2))`` lies in (0, 1].
    Episodes start in a box around the upright position (a balancing task).
    """

    env_id = "pendulum"

    def __init__(self, dt: float = 0.05, g: float = 10.0, m: float = 1.0, length: float = 1.0,
                 max_torque: float = 2.0, max_speed: float = 8.0, init_angle: float = 0.2,
                 init_speed: float = 0.2, noise_std: float = 0.0, horizon: int = 100,
                 gamma: float = 0.99):
        self.dt, self.g, self.m, self.length = dt, g, m, length
        self.max_torque, self.max_speed = max_torque, max_speed
        self.init_angle, self.init_speed = init_angle, init_speed
        self.noise_std = noise_std
        self.spec = EnvSpec(state_dim=3, action_dim=1, horizon=horizon, gamma=gamma, r_max=1.0,
                            action_low=(-max_torque,), action_high=(max_torque,))
        gain = 3.0 / (m * length ** 2)
        dw = (1.5 * g / length + gain * max_torque) * dt + gain * dt * noise_std * math.sqrt(2 / math.pi)
        dth = max_speed * dt
        self.declared_lipschitz = (math.hypot(dth, dw), 2.0)

    def reset(self, seed) -> np.ndarray:
        rng = np.random.default_rng(seed)
        th = rng.uniform(-self.init_angle, self.init_angle)
        w = rng.uniform(-self.init_speed, self.init_speed)
        return np.array([math.cos(th), math.sin(th), w])

    @staticmethod
    def angle(state) -> float:
        return math.atan2(state[1], state[0])

    def _advance(self, th, w, u):
        gain = 3.0 / (self.m * self.length ** 2)
        w_new = np.clip(w + (1.5 * self.g / self.length * np.sin(th) + gain * u) * self.dt,
                        -self.max_speed, self.max_speed)
        return th + w_new * self.dt, w_new

    def step(self, state, action, noise=None, t: int = 0):
        u = float(self.check_action(action)[0])
        state = np.asarray(state, dtype=np.float64)
        th, w = self.angle(state), float(state[2])
        r = self._reward(state[0], w, u)
        u_eff = u + (self.noise_std * _rng(noise).standard_normal() if self.noise_std > 0 else 0.0)
        th_new, w_new = self._advance(th, w, u_eff)
        nxt = np.array([math.cos(th_new), math.sin(th_new), float(w_new)])
        return nxt, r, t + 1 >= self.spec.horizon

    def sample_next(self, states, action, rng):
        states = np.asarray(states, dtype=np.float64)
        u = float(self.check_action(action)[0])
        u_eff = u + (self.noise_std * rng.standard_normal(len(states)) if self.noise_std > 0 else 0.0)
        th = np.arctan2(states[:, 1], states[:, 0])
        th_new, w_new = self._advance(th, states[:, 2], u_eff)
        return np.stack([np.cos(th_new), np.sin(th_new), w_new], axis=1)

    @staticmethod
    def _reward(cos_th, w, u) -> float:
        return float(np.exp(-(2.0 * (1.0 - cos_th) + 0.1 * w * w + 0.001 * u * u)))

    def reward(self, state, action) -> float:
        u = float(self.check_action(action)[0])
        return self._reward(state[0], state[2], u)

    def reward_batch(self, states, actions):
        states = np.asarray(states, dtype=np.float64)
        u = np.clip(np.asarray(actions, dtype=np.float64).reshape(-1), -self.max_torque, self.max_torque)
        return np.exp(-(2.0 * (1.0 - states[:, 0]) + 0.1 * states[:, 2] ** 2 + 0.001 * u ** 2))


class PointMass(ContinuousEnv):
    """1-D point mass under velocity control: ``s' = clip(s + a dt + noise, -bound, bound)``, reward ``-(s^2 + 0.1 a^2)``."""

    env_id = "pointmass"

    def __init__(self, dt: float = 0.05, bound: float = 2.0, max_action: float = 1.0,
                 init_box: float = 1.0, noise_std: float = 0.0, horizon: int = 50, gamma: float = 0.95):
        self.dt, self.bound, self.max_action = dt, bound, max_action
        self.init_box, self.noise_std = init_box, noise_std
        self.spec = EnvSpec(state_dim=1, action_dim=1, horizon=horizon, gamma=gamma,
                            r_max=bound ** 2 + 0.1 * max_action ** 2,
                            action_low=(-max_action,), action_high=(max_action,))
        l_t = max_action * dt + noise_std * math.sqrt(2 / math.pi)
        self.declared_lipschitz = (l_t, max(2.0 * bound, 0.2 * max_action))

    def reset(self, seed) -> np.ndarray:
        return np.array([np.random.default_rng(seed).uniform(-self.init_box, self.init_box)])

    def step(self, state, action, noise=None, t: int = 0):
        a = self.check_action(action)
        s = np.asarray(state, dtype=np.float64).reshape(-1)
        r = float(-(s[0] ** 2 + 0.1 * a[0] ** 2))
        eps = self.noise_std * _rng(noise).standard_normal() if self.noise_std > 0 else 0.0
        nxt = np.clip(s + a * self.dt + eps, -self.bound, self.bound)
        return nxt, r, t + 1 >= self.spec.horizon

    def sample_next(self, states, action, rng):
        a = self.check_action(action)
        states = np.asarray(states, dtype=np.float64)
        eps = self.noise_std * rng.standard_normal(states.shape) if self.noise_std > 0 else 0.0
        return np.clip(states + a * self.dt + eps, -self.bound, self.bound)

    def reward(self, state, action) -> float:
        a = self.check_action(action)
        return float(-(np.asarray(state).reshape(-1)[0] ** 2 + 0.1 * a[0] ** 2))


# ---------------------------------------------------------------------------


def w1_to_point(probs: np.ndarray, coords: np.ndarray, point: float) -> float:
    """Exact W1 between a discrete distribution on the line and a Dirac mass."""
    return float(np.dot(probs, np.abs(coords - point)))


@dataclass(frozen=True)
class LipschitzConstants:
    transition: float
    reward: float


def lipschitz_constants(env) -> LipschitzConstants | None:
    """``(L_T, L_R)`` for a tabular env (exact) or a continuous env with declared constants.

    Tabular: ``L_T = max_{s,a} W1(T(.|s,a), delta_s)`` under the state embedding,
    ``L_R = max |R(s1,a1) - R(s2,a2)| / (|e(s1) - e(s2)| + |a1 - a2|)`` over all
    distinct pairs, actions embedded by index. Returns ``None`` when unavailable.
    """
    if isinstance(env, TabularEnv):
        env = env.mdp
    if isinstance(env, TabularMDP):
        emb = env.embedding
        l_t = 0.0
        for a in range(env.n_actions):
            for s in range(env.n_states):
                l_t = max(l_t, w1_to_point(env.transition[a, s], emb, emb[s]))
        ds = np.abs(emb[:, None] - emb[None, :])
        acts = np.arange(env.n_actions, dtype=np.float64)
        da = np.abs(acts[:, None] - acts[None, :])
        dist = ds[:, None, :, None] + da[None, :, None, :]
        diff = np.abs(env.reward[:, :, None, None] - env.reward[None, None, :, :])
        with np.errstate(divide="ignore", invalid="ignore"):
            slope = np.where(dist > 0, diff / np.where(dist > 0, dist, 1.0),
                             np.where(diff > 0, np.inf, 0.0))
        return LipschitzConstants(float(l_t), float(slope.max()))
    declared = getattr(env, "declared_lipschitz", None)
    if declared is None:
        return None
    return LipschitzConstants(float(declared[0]), float(declared[1]))


ENV_IDS = ("chain", "grid5", "pendulum", "pointmass")


def make_env(env_id: str, **params) -> Env:
    """Build an environment by string id with parameter overrides."""
    if env_id == "chain":
        return TabularEnv(slippery_chain(**params), env_id="chain")
    if env_id == "grid5":
        params.setdefault("size", 5)
        return TabularEnv(gridworld(**params), env_id="grid5")
    if env_id == "pendulum":
        return Pendulum(**params)
    if env_id == "pointmass":
        return PointMass(**params)
    raise ValueError(f"unknown env id {env_id!r}; expected one of {', '.join(ENV_IDS)}")
