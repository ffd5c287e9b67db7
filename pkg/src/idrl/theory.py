"""Executable delay-error bounds: exact W1, tabular dynamic programming and bound certificates.

Three inequalities are checked numerically:

* belief drift: ``W1(b(.|x), delta_{s_{t-D}}) <= D * L_T``
* reward drift: ``|E_{s~b}[R(s,a)] - R(s_{t-D}, a)| <= D * L_R * L_T``
* value gap: ``max_x |V^{pi_D}(x) - V^{pi}(x)| <= (R_max + D * L_R * L_T) / (1 - gamma)``
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .delay import AugmentedState, belief_exact, belief_matrix, belief_mc, build_augmented
from .envs import Env, TabularEnv, TabularMDP, lipschitz_constants, make_env, w1_to_point

SLACK_TOL = -1e-9
NORM_TOL = 1e-9


# ---------------------------------------------------------------------------
# Wasserstein


def w1_discrete(p, q, coords) -> float:
    """Exact W1 between two distributions on shared 1-D support points (CDF-difference integral)."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64)
    if not p.shape == q.shape == coords.shape or p.ndim != 1:
        raise ValueError(f"shape mismatch: p {p.shape}, q {q.shape}, coords {coords.shape}")
    for name, v in (("p", p), ("q", q)):
        if (v < -NORM_TOL).any() or abs(v.sum() - 1.0) > NORM_TOL:
            raise ValueError(f"{name} is not a normalized distribution (sum {v.sum():.12g})")
    order = np.argsort(coords, kind="stable")
    c = coords[order]
    diff = np.cumsum(p[order] - q[order])[:-1]
    return float(np.sum(np.abs(diff) * np.diff(c)))


# ---------------------------------------------------------------------------
# tabular dynamic programming on explicit (P, R)


def policy_matrix(P: np.ndarray, R: np.ndarray, policy: np.ndarray):
    """Policy-averaged transition ``[n, n]`` and reward ``[n]``; ``P`` is ``[A, n, n]``, ``R``/``policy`` ``[n, A]``."""
    P_pi = np.einsum("ia,aij->ij", policy, P)
    r_pi = (policy * R).sum(axis=1)
    return P_pi, r_pi


def policy_evaluation(P, R, policy, gamma: float) -> np.ndarray:
    """Exact ``V = (I - gamma P_pi)^{-1} r_pi``."""
    P_pi, r_pi = policy_matrix(P, R, policy)
    return np.linalg.solve(np.eye(len(r_pi)) - gamma * P_pi, r_pi)


def policy_evaluation_iterative(P, R, policy, gamma: float, tol: float = 1e-10, max_iter: int = 100_000):
    P_pi, r_pi = policy_matrix(P, R, policy)
    V = np.zeros(len(r_pi))
    for _ in range(max_iter):
        V_new = r_pi + gamma * P_pi @ V
        res = float(np.abs(V_new - V).max())
        V = V_new
        if res <= tol:
            return V, res
    return V, res


def value_iteration(P, R, gamma: float, tol: float = 1e-10, max_iter: int = 100_000):
    """Returns ``(V, Q, residual)`` with sup-norm Bellman residual ``<= tol`` on success."""
    P = np.asarray(P, dtype=np.float64)
    R = np.asarray(R, dtype=np.float64)
    V = np.zeros(P.shape[1])
    res = math.inf
    for _ in range(max_iter):
        Q = R + gamma * np.einsum("aij,j->ia", P, V)
        V_new = Q.max(axis=1)
        res = float(np.abs(V_new - V).max())
        V = V_new
        if res <= tol:
            break
    Q = R + gamma * np.einsum("aij,j->ia", P, V)
    return V, Q, res


def greedy(Q: np.ndarray) -> np.ndarray:
    return Q.argmax(axis=1)


def one_hot_policy(actions: np.ndarray, n_actions: int) -> np.ndarray:
    return np.eye(n_actions)[np.asarray(actions, dtype=np.int64)]


# ---------------------------------------------------------------------------
# certificates


@dataclass
class BoundCertificate:
    kind: str
    lhs: float
    rhs: float
    delay: int
    l_t: float
    l_r: float
    gamma: float
    r_max: float
    where: str = ""

    @property
    def slack(self) -> float:
        return self.rhs - self.lhs

    @property
    def passed(self) -> bool:
        return self.slack >= SLACK_TOL

    def row(self) -> dict:
        d = asdict(self)
        d["slack"] = self.slack
        d["passed"] = self.passed
        return d


CSV_FIELDS = ("kind", "where", "delay", "lhs", "rhs", "slack", "passed", "l_t", "l_r", "gamma", "r_max")


def _as_mdp(mdp) -> TabularMDP:
    return mdp.mdp if isinstance(mdp, TabularEnv) else mdp


def _windows(n_actions: int, delay: int):
    return itertools.product(range(n_actions), repeat=delay)


def belief_telescoping(mdp: TabularMDP, x: AugmentedState) -> list[tuple[float, float, float]]:
    """Per intermediate ``k``: ``(W1(b_k, delta), W1(b_k, b_{k-1}), W1(b_{k-1}, delta))``.

    ``b_k`` pushes the Dirac at ``s_{t-D}`` through the first ``k`` recorded actions.
    """
    mdp = _as_mdp(mdp)
    emb = mdp.embedding
    s0 = int(x.delayed_obs)
    prev = np.zeros(mdp.n_states)
    prev[s0] = 1.0
    out = []
    for a in x.action_window:
        cur = prev @ mdp.transition[int(a)]
        out.append((w1_to_point(cur, emb, emb[s0]), w1_discrete(cur, prev, emb), w1_to_point(prev, emb, emb[s0])))
        prev = cur
    return out


def certify_belief_bound(mdp, delay_max: int, l_t: float | None = None) -> list[BoundCertificate]:
    """Every augmented state with delay ``1..delay_max``: exact belief drift against ``D * L_T``."""
    mdp = _as_mdp(mdp)
    lc = lipschitz_constants(mdp)
    l_t = lc.transition if l_t is None else l_t
    emb = mdp.embedding
    certs = []
    for d in range(1, delay_max + 1):
        for s in range(mdp.n_states):
            for w in _windows(mdp.n_actions, d):
                b = belief_exact(mdp, AugmentedState(s, w)).weights
                lhs = w1_to_point(b, emb, emb[s])
                certs.append(BoundCertificate("belief", lhs, d * l_t, d, l_t, lc.reward, mdp.gamma, mdp.r_max,
                                              f"s={s};w={'-'.join(map(str, w))}"))
    return certs


def certify_reward_bound_tabular(mdp, delay: int, reward: np.ndarray | None = None,
                                 l_t: float | None = None) -> list[BoundCertificate]:
    """Exact reward drift for every ``(s, window, a)``; ``reward`` overrides the MDP's own table."""
    mdp = _as_mdp(mdp)
    R = mdp.reward if reward is None else np.asarray(reward, dtype=np.float64)
    probe = TabularMDP(mdp.transition, R, mdp.initial_dist, mdp.embedding, mdp.gamma, mdp.horizon)
    lc = lipschitz_constants(probe)
    l_t = lc.transition if l_t is None else l_t
    certs = []
    rhs = delay * lc.reward * l_t if lc.reward > 0 else 0.0
    for s in range(mdp.n_states):
        for w in _windows(mdp.n_actions, delay):
            b = belief_matrix(mdp, w)[s]
            for a in range(mdp.n_actions):
                lhs = abs(float(b @ R[:, a]) - R[s, a])
                certs.append(BoundCertificate("reward", lhs, rhs, delay, l_t, lc.reward, mdp.gamma,
                                              float(np.abs(R).max()),
                                              f"s={s};w={'-'.join(map(str, w))};a={a}"))
    return certs


def estimate_lipschitz(fn: Callable[[torch.Tensor], torch.Tensor], low, high, n: int = 10_000,
                       seed: int = 0, inflate: float = 1.1) -> float:
    """``inflate * max ||grad fn||`` over ``n`` uniform points of the box ``[low, high]``."""
    low = np.asarray(low, dtype=np.float64)
    high = np.asarray(high, dtype=np.float64)
    rng = np.random.default_rng(seed)
    pts = torch.tensor(rng.uniform(low, high, size=(n, len(low))), requires_grad=True)
    out = fn(pts).sum()
    (g,) = torch.autograd.grad(out, pts)
    return inflate * float(g.norm(dim=1).max())


def certify_reward_bound(target, delay: int, reward_fn: Callable | None = None, l_r: float | None = None,
                         states: Sequence | None = None, n_states: int = 5, n_particles: int = 100_000,
                         seed: int = 0, l_t: float | None = None) -> list[BoundCertificate]:
    """Reward-drift certificates.

    Tabular targets (``TabularMDP``/``TabularEnv``) are handled exactly with
    ``reward_fn`` an optional ``[S, A]`` table. Continuous envs sample
    ``n_states`` augmented states from random-action rollouts and estimate the
    belief expectation with ``n_particles`` particles. ``reward_fn(states, actions)``
    maps raw ``[N, state_dim]``/``[N, action_dim]`` arrays to ``[N]`` rewards and
    defaults to the env's true reward; for a learned reward pass ``l_r``
    (see :func:`estimate_lipschitz`).
    """
    if isinstance(target, (TabularMDP, TabularEnv)):
        table = None if reward_fn is None else np.asarray(reward_fn, dtype=np.float64)
        return certify_reward_bound_tabular(target, delay, table, l_t)
    env: Env = target
    lc = lipschitz_constants(env)
    if lc is None and (l_t is None or l_r is None):
        raise ValueError(f"no Lipschitz constants available for {env.env_id!r}; pass l_t and l_r")
    l_t = lc.transition if l_t is None else l_t
    if reward_fn is None:
        if not hasattr(env, "reward_batch"):
            raise ValueError("env has no batched reward; pass reward_fn")
        reward_fn = env.reward_batch
        l_r = lc.reward if l_r is None else l_r
    elif l_r is None:
        raise ValueError("a custom reward_fn needs an explicit l_r")
    rng = np.random.default_rng(seed)
    if states is None:
        states = _sample_augmented(env, delay, n_states, rng)
    certs = []
    for i, x in enumerate(states):
        b = belief_mc(env, x, n_particles, rng)
        a = env.check_action(rng.uniform(env.spec.action_low, env.spec.action_high))
        acts = np.repeat(a[None], len(b.weights), axis=0)
        lhs_mc = float(np.dot(b.weights, reward_fn(np.asarray(b.support), acts)))
        r0 = float(np.asarray(reward_fn(np.asarray(x.delayed_obs)[None], a[None])).reshape(-1)[0])
        certs.append(BoundCertificate("reward_mc", abs(lhs_mc - r0), delay * l_r * l_t, delay, l_t, l_r,
                                      env.spec.gamma, env.spec.r_max, f"sample={i}"))
    return certs


def _sample_augmented(env: Env, delay: int, n: int, rng: np.random.Generator) -> list[AugmentedState]:
    out = []
    for _ in range(n):
        s = env.reset(rng)
        for _ in range(int(rng.integers(0, env.spec.horizon // 2))):
            s, _, _ = env.step(s, rng.uniform(env.spec.action_low, env.spec.action_high), rng)
        window = tuple(env.check_action(rng.uniform(env.spec.action_low, env.spec.action_high))
                       for _ in range(delay))
        out.append(AugmentedState(s, window))
    return out


def certify_perf_bound(mdp, delay: int, policy_aug: np.ndarray, policy_obs: np.ndarray,
                       gamma: float | None = None, l_t: float | None = None) -> BoundCertificate:
    """Value gap between an augmented-state policy and a delayed-observation policy.

    ``V^{pi_D}`` runs ``policy_aug`` (``[n_aug, A]``, rows in ``build_augmented``
    order) with belief-averaged rewards; ``V^{pi}`` runs ``policy_obs``
    (``[S, A]``, applied to ``s_{t-D}``) with rewards ``R(s_{t-D}, a)``. Both are
    exact linear solves on the same augmented chain.
    """
    mdp = _as_mdp(mdp)
    gamma = mdp.gamma if gamma is None else gamma
    aug = build_augmented(mdp, delay)
    lc = lipschitz_constants(mdp)
    l_t = lc.transition if l_t is None else l_t
    obs_idx = np.array([int(x.delayed_obs) for x in aug.states])
    v_aug = policy_evaluation(aug.transition, aug.reward, np.asarray(policy_aug), gamma)
    v_obs = policy_evaluation(aug.transition, aug.reward_delayed, np.asarray(policy_obs)[obs_idx], gamma)
    lhs = float(np.abs(v_aug - v_obs).max())
    rhs = (mdp.r_max + delay * lc.reward * l_t) / (1.0 - gamma)
    return BoundCertificate("value_gap", lhs, rhs, delay, l_t, lc.reward, gamma, mdp.r_max, f"n_aug={aug.n}")


# ---------------------------------------------------------------------------
# suites


def random_mdp(rng: np.random.Generator, max_states: int = 6, max_actions: int = 3,
               gamma: float = 0.9) -> TabularMDP:
    """Random MDP with rewards in [0, 1] and sparse-ish Dirichlet transition rows."""
    S = int(rng.integers(2, max_states + 1))
    A = int(rng.integers(1, max_actions + 1))
    T = np.zeros((A, S, S))
    for a in range(A):
        for s in range(S):
            k = int(rng.integers(1, S + 1))
            support = rng.choice(S, size=k, replace=False)
            T[a, s, support] = rng.dirichlet(np.ones(k))
    T /= T.sum(axis=2, keepdims=True)
    R = rng.uniform(0.0, 1.0, size=(S, A))
    rho = rng.dirichlet(np.ones(S))
    emb = np.sort(rng.uniform(0.0, float(S), size=S))
    return TabularMDP(T, R, rho, emb, gamma=gamma)


def random_policy(rng: np.random.Generator, n: int, n_actions: int) -> np.ndarray:
    return rng.dirichlet(np.ones(n_actions), size=n)


def certify_mdp(mdp: TabularMDP, delays: Sequence[int], rng: np.random.Generator,
                lt_scale: float = 1.0, tag: str = "") -> list[BoundCertificate]:
    """Belief, reward and value-gap certificates for one MDP at each delay."""
    lc = lipschitz_constants(mdp)
    l_t = lc.transition * lt_scale
    certs = []
    for d in delays:
        if d >= 1:
            certs += [c for c in certify_belief_bound(mdp, d, l_t) if c.delay == d]
        certs += certify_reward_bound_tabular(mdp, d, l_t=l_t)
        n_aug = mdp.n_states * mdp.n_actions ** d
        pi_aug = random_policy(rng, n_aug, mdp.n_actions)
        pi_obs = random_policy(rng, mdp.n_states, mdp.n_actions)
        certs.append(certify_perf_bound(mdp, d, pi_aug, pi_obs, l_t=l_t))
    for c in certs:
        c.where = f"{tag};{c.where}" if tag else c.where
    return certs


def random_suite(n_mdps: int = 100, delays: Sequence[int] = (1, 2, 3), seed: int = 0, max_states: int = 6,
                 max_actions: int = 3, gamma: float = 0.9, lt_scale: float = 1.0) -> list[BoundCertificate]:
    rng = np.random.default_rng(seed)
    certs = []
    for i in range(n_mdps):
        mdp = random_mdp(rng, max_states, max_actions, gamma)
        certs += certify_mdp(mdp, delays, rng, lt_scale, tag=f"mdp={i}")
    return certs


def named_suite(env_ids: Sequence[str] = ("chain", "grid5"), max_delay: int = 2, seed: int = 0,
                lt_scale: float = 1.0) -> list[BoundCertificate]:
    rng = np.random.default_rng(seed)
    certs = []
    for env_id in env_ids:
        env = make_env(env_id)
        certs += certify_mdp(env.mdp, range(1, max_delay + 1), rng, lt_scale, tag=f"env={env_id}")
    return certs


def default_suite(cfg_certify) -> list[BoundCertificate]:
    c = cfg_certify
    certs = random_suite(c.n_random, c.delays, c.seed, c.max_states, c.max_actions, c.gamma)
    return certs + named_suite(c.suites, c.suite_max_delay, c.seed)


# ---------------------------------------------------------------------------
# export


def summarize(certs: Sequence[BoundCertificate]) -> dict:
    out = {"total": len(certs), "failures": sum(not c.passed for c in certs), "by_kind": {}}
    for kind in sorted({c.kind for c in certs}):
        group = [c for c in certs if c.kind == kind]
        out["by_kind"][kind] = {
            "count": len(group),
            "failures": sum(not c.passed for c in group),
            "min_slack": min(c.slack for c in group),
            "max_lhs": max(c.lhs for c in group),
        }
    return out


def write_certificates_csv(certs: Sequence[BoundCertificate], path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        for c in certs:
            row = c.row()
            w.writerow({k: (repr(float(row[k])) if isinstance(row[k], float) else row[k]) for k in CSV_FIELDS})


def write_summary_json(certs: Sequence[BoundCertificate], path):
    with open(path, "w") as fh:
        json.dump(summarize(certs), fh, indent=2, sort_keys=True)
        fh.write("\n")
