"""Independent numerical oracles shared by the tests."""

import itertools
import math

import numpy as np
import torch


def fd_gradient(loss_fn, params, h=1e-6):
    """Central finite differences of ``loss_fn()`` w.r.t. every element of ``params``."""
    out = []
    for p in params:
        g = torch.zeros_like(p)
        flat, gflat = p.data.view(-1), g.view(-1)
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + h
            up = float(loss_fn().detach())
            flat[i] = old - h
            down = float(loss_fn().detach())
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
        out.append(g)
    return out


def rel_error(a, b):
    a = torch.cat([x.reshape(-1) for x in a])
    b = torch.cat([x.reshape(-1) for x in b])
    denom = max(float(a.norm()), float(b.norm()), 1e-8)
    return float((a - b).norm()) / denom


def fd_input_gradient(fn, x, h=1e-6):
    """Finite-difference gradient of a scalar-per-row function w.r.t. its input rows."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for j in range(x.shape[1]):
        e = np.zeros(x.shape[1])
        e[j] = h
        g[:, j] = (fn(x + e) - fn(x - e)) / (2 * h)
    return g


def deterministic_chain_records(delay, aux_delay, n_step, actions, gamma=0.9):
    """Roll a deterministic 5-state chain by hand and push every step into a replay buffer.

    Returns ``(env, buffer, history)`` where ``history`` holds the true states,
    actions and rewards of the single episode.
    """
    from idrl.data import ReplayBuffer
    from idrl.delay import DelayedEnv
    from idrl.envs import TabularEnv, TabularMDP, slippery_chain

    base = slippery_chain(5, slip=0.0, horizon=len(actions), gamma=gamma)
    R = np.array([[s + 0.1 * a for a in range(2)] for s in range(5)])
    mdp = TabularMDP(base.transition, R, base.initial_dist, gamma=gamma, horizon=len(actions))
    env = TabularEnv(mdp, "chain")
    denv = DelayedEnv(env, delay, aux_delay)
    buf = ReplayBuffer(100, 1 + delay, 1 + aux_delay, 1, n_step)
    denv.reset(0)
    states, rewards = [0], []
    s = 0
    for a in actions:
        x, xa = denv.observe().flat(), denv.observe_aux().flat()
        nx, done = denv.step(a)
        buf.push(x, xa, [a], nx.flat(), denv.observe_aux().flat(), done, 0, reward=denv.true_reward)
        rewards.append(R[s, a])
        s = mdp.transition[a, s].argmax()
        states.append(int(s))
    return env, buf, {"states": states, "actions": list(actions), "rewards": rewards}


def hand_augmented(history, t, delay):
    """``x_t`` rebuilt directly from the true history (zero-padded)."""
    s = history["states"][max(t - delay, 0)]
    window = [history["actions"][k] if k >= 0 else 0 for k in range(t - delay, t)]
    return np.array([s] + window, dtype=np.float64)


def brute_belief(mdp, s0, window):
    """Sum the probability of every intermediate state path."""
    S = mdp.n_states
    out = np.zeros(S)
    for path in itertools.product(range(S), repeat=len(window)):
        p, prev = 1.0, s0
        for a, s in zip(window, path):
            p *= mdp.transition[a, prev, s]
            prev = s
        out[path[-1] if path else s0] += p
    return out


def traj_logprob_enumeration_error(mdp, policy, delay, gamma, horizon):
    """Largest gap between ``delayed_traj_logprob`` and products over every augmented path.

    Also returns the total enumerated mass, which must equal ``gamma ** (0 + 1 + ... + horizon-1)``.
    """
    from idrl.delay import build_augmented, delayed_traj_logprob

    aug = build_augmented(mdp, delay)
    worst, total = 0.0, 0.0
    for i0 in range(aug.n):
        if aug.initial_dist[i0] == 0:
            continue
        for acts in itertools.product(range(mdp.n_actions), repeat=horizon):
            for path in itertools.product(range(aug.n), repeat=horizon):
                idx = (i0,) + path
                p = aug.initial_dist[i0]
                for t, a in enumerate(acts):
                    p *= gamma ** t * aug.transition[a, idx[t], idx[t + 1]] * policy(aug.states[idx[t]])[a]
                lp = delayed_traj_logprob(mdp, policy, [aug.states[j] for j in idx], acts, gamma)
                if p == 0:
                    worst = max(worst, 0.0 if lp == -math.inf else math.inf)
                else:
                    worst = max(worst, abs(math.exp(lp) - p))
                    total += p
    return worst, total


ACTIONS = [1, 1, 0, 1, 1, 1, 0, 0, 1, 1]


def chain_agent(env, delay, aux, n, seed=0, alpha=0.3):
    from idrl.nn import make_generator
    from idrl.policy_opt import AuxDelayAgent
    from idrl.training import Featurizer

    fx, fa = Featurizer(env, delay), Featurizer(env, aux)
    agent = AuxDelayAgent(fx.dim, fa.dim, make_generator(seed), n_actions=2, actor_hidden=[8], critic_hidden=[8],
                          gamma=0.9, alpha=alpha, n_step=n)
    # targets different from online critics so the test sees which one is used
    for p in list(agent.q1_targ.parameters()) + list(agent.q2_targ.parameters()):
        p.data.add_(0.05)
    return agent, fx, fa


def chain_batch(buf, fx, fa, idx):
    from idrl.policy_opt import TorchBatch

    rec = buf.gather(np.asarray(idx))
    tb = TorchBatch(fx(rec.x), fa(rec.x_aux), torch.from_numpy(rec.action), fx.actions(rec.action),
                    torch.from_numpy(rec.r_seq), fx(rec.x_n), fa(rec.x_aux_n),
                    torch.from_numpy(rec.done.astype(np.float64)))
    return rec, tb


def _soft_value(q_row, logp_row, alpha):
    return float(np.sum(np.exp(logp_row) * (q_row - alpha * logp_row)))


def td_target_hand_error(n, delay, aux, alpha=0.3):
    """Max gap between ``td_target`` and an n-step return rolled out by hand on the deterministic chain."""
    from idrl.policy_opt import td_target

    env, buf, hist = deterministic_chain_records(delay, aux, n, ACTIONS)
    agent, fx, fa = chain_agent(env, delay, aux, n, alpha=alpha)
    T = len(ACTIONS)
    _, tb = chain_batch(buf, fx, fa, range(T))
    target = td_target(agent, tb).numpy()
    worst = 0.0
    for t in range(T):
        steps = min(n, T - t)
        ret = sum(0.9 ** i * hist["rewards"][t + i] for i in range(steps))
        if t + n < T:
            x_n = fx(hand_augmented(hist, t + n, delay))
            xa_n = fa(hand_augmented(hist, t + n, aux))
            with torch.no_grad():
                y1 = _soft_value(agent.q1_targ(xa_n).numpy()[0], agent.aux_actor.log_probs(xa_n).numpy()[0], alpha)
                y2 = _soft_value(agent.q2_targ(xa_n).numpy()[0], agent.actor.log_probs(x_n).numpy()[0], alpha)
            ret += 0.9 ** n * min(y1, y2)
        worst = max(worst, abs(target[t] - ret))
    return worst


ACCEPTANCE_LINES: list[str] = []


def report(criterion: int, passed: bool, detail: str):
    """Record and print one pass/fail line for an acceptance criterion."""
    line = f"criterion {criterion:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)
    return passed
