import itertools
import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy.optimize import linprog

from idrl.delay import AugmentedState, build_augmented
from idrl.envs import TabularMDP, lipschitz_constants, make_env, slippery_chain
from idrl.nn import Mlp, make_generator
from idrl.theory import (BoundCertificate, belief_telescoping, certify_belief_bound, certify_perf_bound,
                         certify_reward_bound, estimate_lipschitz, named_suite, one_hot_policy, policy_evaluation,
                         policy_evaluation_iterative, random_mdp, random_suite, summarize, value_iteration,
                         w1_discrete, write_certificates_csv, write_summary_json)


def lp_w1(p, q, coords):
    """Transport LP: min sum c_ij T_ij s.t. row sums p, column sums q."""
    n = len(p)
    cost = np.abs(coords[:, None] - coords[None, :]).reshape(-1)
    A = np.zeros((2 * n, n * n))
    for i in range(n):
        A[i, i * n:(i + 1) * n] = 1.0
        A[n + i, i::n] = 1.0
    res = linprog(cost, A_eq=A, b_eq=np.concatenate([p, q]), bounds=(0, None), method="highs")
    return res.fun


def test_w1_closed_forms():
    assert w1_discrete([0.2, 0.8], [0.2, 0.8], [0.0, 1.0]) == 0.0
    assert w1_discrete([1.0, 0.0], [0.5, 0.5], [0.0, 1.0]) == pytest.approx(0.5, abs=1e-15)


def test_w1_rejects_unnormalized_and_mismatched():
    with pytest.raises(ValueError):
        w1_discrete([0.5, 0.6], [0.5, 0.5], [0, 1])
    with pytest.raises(ValueError):
        w1_discrete([0.5, 0.5], [1.0], [0, 1])


@pytest.mark.parametrize("seed", range(20))
def test_w1_matches_transport_lp(seed):
    rng = np.random.default_rng(seed)
    p, q = rng.dirichlet(np.ones(5)), rng.dirichlet(np.ones(5))
    coords = rng.normal(size=5) * 3
    assert w1_discrete(p, q, coords) == pytest.approx(lp_w1(p, q, coords), abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_w1_metric_properties(seed):
    rng = np.random.default_rng(seed)
    p, q, r = (rng.dirichlet(np.ones(6)) for _ in range(3))
    c = rng.uniform(-5, 5, size=6)
    assert abs(w1_discrete(p, q, c) - w1_discrete(q, p, c)) <= 1e-9
    assert w1_discrete(p, r, c) <= w1_discrete(p, q, c) + w1_discrete(q, r, c) + 1e-9
    assert w1_discrete(p, q, c) >= 0


def test_value_iteration_residual_and_linear_solve_agree():
    rng = np.random.default_rng(0)
    mdp = random_mdp(rng)
    V, Q, res = value_iteration(mdp.transition, mdp.reward, 0.9)
    assert res <= 1e-10
    pi = one_hot_policy(Q.argmax(axis=1), mdp.n_actions)
    assert np.abs(policy_evaluation(mdp.transition, mdp.reward, pi, 0.9) - V).max() <= 1e-8
    V_it, res_it = policy_evaluation_iterative(mdp.transition, mdp.reward, pi, 0.9)
    assert res_it <= 1e-10 and np.abs(V_it - V).max() <= 1e-8


def test_value_iteration_chain_goes_right():
    mdp = slippery_chain(6)
    _, Q, _ = value_iteration(mdp.transition, mdp.reward, mdp.gamma)
    assert (Q.argmax(axis=1)[:-1] == 1).all()


def test_belief_bound_identity_dynamics_zero_slack():
    mdp = TabularMDP(np.stack([np.eye(3)] * 2), np.zeros((3, 2)), np.ones(3) / 3)
    certs = certify_belief_bound(mdp, 2)
    assert all(c.lhs == 0 and c.rhs == 0 and c.slack == 0 and c.passed for c in certs)


def test_belief_bound_two_state_example():
    T = np.array([[[0.9, 0.1], [0.2, 0.8]]])
    mdp = TabularMDP(T, np.array([[0.0], [1.0]]), np.array([1.0, 0.0]))
    certs = [c for c in certify_belief_bound(mdp, 2) if c.delay == 2 and c.where.startswith("s=0")]
    assert len(certs) == 1
    c = certs[0]
    assert c.lhs == pytest.approx(0.17, abs=1e-12)
    assert c.rhs == pytest.approx(2 * lipschitz_constants(mdp).transition)
    assert c.passed


def test_belief_telescoping_holds_everywhere():
    rng = np.random.default_rng(1)
    for _ in range(20):
        mdp = random_mdp(rng)
        for s in range(mdp.n_states):
            for w in itertools.product(range(mdp.n_actions), repeat=3):
                for lhs, step, rest in belief_telescoping(mdp, AugmentedState(s, w)):
                    assert lhs <= step + rest + 1e-12


def test_reward_bound_constant_reward_and_arithmetic():
    mdp = slippery_chain(4)
    flat = np.full((4, 2), 0.7)
    certs = certify_reward_bound(mdp, 2, reward_fn=flat)
    assert all(c.lhs == pytest.approx(0.0, abs=1e-15) and c.passed for c in certs)
    c = BoundCertificate("reward", 0.1, 3 * 2 * 0.1, 3, 0.1, 2.0, 0.9, 1.0)
    assert c.rhs == pytest.approx(0.6) and c.passed


def test_reward_bound_on_pendulum_true_reward():
    env = make_env("pendulum")
    certs = certify_reward_bound(env, 2, n_states=3, n_particles=1000, seed=0)
    assert len(certs) == 3 and all(c.passed for c in certs)


def test_reward_bound_with_network_reward_needs_lipschitz():
    env = make_env("pointmass", noise_std=0.1)
    net = Mlp([2, 16, 1], make_generator(0))

    def fn(s, a):
        with torch.no_grad():
            return net(torch.from_numpy(np.concatenate([s, a], axis=1))).squeeze(-1).numpy()

    with pytest.raises(ValueError):
        certify_reward_bound(env, 2, reward_fn=fn)
    l_r = estimate_lipschitz(lambda z: net(z).squeeze(-1), [-2, -1], [2, 1], n=10_000)
    certs = certify_reward_bound(env, 2, reward_fn=fn, l_r=l_r, n_states=3, n_particles=20_000)
    assert all(c.passed for c in certs)


def test_estimate_lipschitz_linear_function():
    w = torch.tensor([3.0, -4.0], dtype=torch.float64)
    assert estimate_lipschitz(lambda z: z @ w, [0, 0], [1, 1], n=10) == pytest.approx(5.5)


def test_perf_bound_identical_processes_at_zero_delay():
    mdp = slippery_chain(5)
    pi = np.random.default_rng(0).dirichlet(np.ones(2), size=5)
    c = certify_perf_bound(mdp, 0, pi, pi)
    assert c.lhs == pytest.approx(0.0, abs=1e-12)
    assert c.rhs == pytest.approx(mdp.r_max / (1 - mdp.gamma))


def test_perf_bound_arithmetic():
    c = BoundCertificate("value_gap", 0.0, (1.0 + 2 * 1.0 * 0.5) / (1 - 0.9), 2, 0.5, 1.0, 0.9, 1.0)
    assert c.rhs == pytest.approx(20.0)


def test_perf_bound_values_match_iterative_evaluation():
    rng = np.random.default_rng(3)
    mdp = random_mdp(rng, max_states=4, max_actions=2)
    aug = build_augmented(mdp, 2)
    pi_aug = rng.dirichlet(np.ones(mdp.n_actions), size=aug.n)
    V, _ = policy_evaluation_iterative(aug.transition, aug.reward, pi_aug, 0.9)
    assert np.abs(V - policy_evaluation(aug.transition, aug.reward, pi_aug, 0.9)).max() < 1e-8


def test_small_random_suite_passes_and_negative_control_fails():
    certs = random_suite(10, (1, 2), seed=0)
    assert certs and all(c.passed for c in certs)
    bad = random_suite(10, (1, 2), seed=0, lt_scale=0.5)
    assert any(not c.passed for c in bad)


def test_named_suite_passes():
    certs = named_suite(("chain", "grid5"), max_delay=2)
    assert {c.kind for c in certs} == {"belief", "reward", "value_gap"}
    assert all(c.passed for c in certs)


def test_certificate_pass_flag_tolerance():
    assert BoundCertificate("x", 1.0 + 5e-10, 1.0, 1, 1, 1, 0.9, 1).passed
    assert not BoundCertificate("x", 1.0 + 2e-9, 1.0, 1, 1, 1, 0.9, 1).passed


def test_exports(tmp_path):
    certs = random_suite(2, (1,), seed=0)
    write_certificates_csv(certs, tmp_path / "c.csv")
    write_summary_json(certs, tmp_path / "s.json")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0].split(",")[:3] == ["kind", "where", "delay"] and len(lines) == len(certs) + 1
    s = json.loads((tmp_path / "s.json").read_text())
    assert s == json.loads(json.dumps(summarize(certs))) and s["failures"] == 0
