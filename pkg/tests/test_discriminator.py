import math

import numpy as np
import pytest
import torch

from helpers import fd_gradient, fd_input_gradient, rel_error
from idrl.discriminator import Discriminator, Pairs, d_value, reward
from idrl.nn import CategoricalPolicyHead, GaussianPolicyHead, grad_params, make_generator


def _setup(seed=0, n=16, x_dim=4, discrete=False, **kw):
    g = make_generator(seed)
    if discrete:
        policy = CategoricalPolicyHead(x_dim, 3, [8], g)
        a = torch.randint(0, 3, (n, 1), generator=g).double()
        a_feat = torch.nn.functional.one_hot(a[:, 0].long(), 3).double()
    else:
        policy = GaussianPolicyHead(x_dim, 1, [8], [-2.0], [2.0], g)
        a = 3.8 * torch.rand((n, 1), generator=g, dtype=torch.float64) - 1.9
        a_feat = a
    disc = Discriminator(x_dim + a_feat.shape[1], [8, 8], policy, g, **kw)
    x = torch.randn(n, x_dim, generator=g, dtype=torch.float64)
    return disc, Pairs(x, a, a_feat), g


@pytest.mark.parametrize("discrete", [False, True])
def test_d_value_structured_form(discrete):
    disc, p, _ = _setup(discrete=discrete)
    with torch.no_grad():
        r = disc.r_theta(p)
        pi = disc.policy.log_prob(p.x, p.a).exp()
    expected = torch.exp(r) / (torch.exp(r) + pi)
    assert torch.allclose(d_value(disc, p), expected, atol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_reward_with_zero_delta_is_reward_minus_log_policy(seed):
    disc, p, _ = _setup(seed, discrete=seed % 2 == 1)
    with torch.no_grad():
        expected = disc.r_theta(p) - disc.policy.log_prob(p.x, p.a)
    assert torch.allclose(disc.reward(p, delta=0.0), expected, atol=1e-9, rtol=0)


def test_reward_with_positive_delta_is_bounded_and_close_to_logit():
    disc, p, _ = _setup(delta=1e-7)
    r = reward(disc, p)
    assert (r.abs() <= math.log((1 + 1e-7) / 1e-7) + 1e-9).all()
    assert torch.allclose(r, disc.reward(p, delta=0.0), atol=1e-4)


def test_loss_matches_numpy_formula():
    disc, e, g = _setup(0, n=12, lambda_gp=10.0, lambda_ent=0.1)
    _, gen, _ = _setup(1, n=12)
    mix = torch.rand((12, 1), generator=g, dtype=torch.float64)
    total, terms = disc.loss(e, gen, mix=mix)
    with torch.no_grad():
        le, lg = disc.logits(e).numpy(), disc.logits(gen).numpy()

    def sig(z):
        return 1 / (1 + np.exp(-z))

    bce = -np.mean(np.log(sig(le))) - np.mean(np.log(1 - sig(lg)))
    pts = (mix * e.inputs + (1 - mix) * gen.inputs).numpy()

    def f(z):
        with torch.no_grad():
            return disc.reward_net(torch.from_numpy(z)).squeeze(-1).numpy()

    gp = np.mean((np.linalg.norm(fd_input_gradient(f, pts), axis=1) - 1) ** 2)
    d = sig(np.concatenate([le, lg]))
    ent = -np.mean(-(d * np.log(d) + (1 - d) * np.log(1 - d)))
    assert terms["bce"] == pytest.approx(bce, rel=1e-10)
    assert terms["gp"] == pytest.approx(gp, rel=1e-6)
    assert terms["entropy"] == pytest.approx(ent, rel=1e-10)
    assert float(total.detach()) == pytest.approx(bce + 10 * gp + 0.1 * ent, rel=1e-6)


@pytest.mark.parametrize("seed", range(4))
def test_loss_gradient_matches_finite_differences(seed):
    disc, e, g = _setup(seed, n=8, discrete=seed % 2 == 1)
    _, gen, _ = _setup(seed + 100, n=8, discrete=seed % 2 == 1)
    mix = torch.rand((8, 1), generator=g, dtype=torch.float64)
    ad = grad_params(disc.reward_net, disc.loss(e, gen, mix=mix)[0])
    fd = fd_gradient(lambda: disc.loss(e, gen, mix=mix)[0], list(disc.reward_net.parameters()))
    assert rel_error(ad, fd) < 1e-4


def test_update_leaves_policy_untouched():
    disc, e, g = _setup(0)
    _, gen, _ = _setup(1)
    before = [p.clone() for p in disc.policy.parameters()]
    r_before = [p.clone() for p in disc.reward_net.parameters()]
    disc.update(e, gen, g)
    assert all(torch.equal(a, b) for a, b in zip(before, disc.policy.parameters()))
    assert not all(torch.equal(a, b) for a, b in zip(r_before, disc.reward_net.parameters()))


def test_empty_batch_rejected():
    disc, e, _ = _setup(0)
    empty = Pairs(e.x[:0], e.a[:0], e.a_feat[:0])
    with pytest.raises(ValueError):
        disc.loss(e, empty)


def test_policy_density_floor_keeps_logits_finite():
    disc, p, _ = _setup(0)
    far = Pairs(p.x * 1e3, p.a, p.a_feat)
    assert torch.isfinite(disc.logits(far)).all()


def test_discriminator_learns_to_separate():
    g = make_generator(0)
    policy = CategoricalPolicyHead(2, 2, [8], g)
    disc = Discriminator(2 + 2, [16], policy, g, lambda_gp=0.0, lambda_ent=0.0, lr=1e-2)
    x = torch.zeros(64, 2, dtype=torch.float64)
    ea = torch.ones(64, 1, dtype=torch.float64)
    ga = torch.zeros(64, 1, dtype=torch.float64)
    oh = torch.nn.functional.one_hot
    exp = Pairs(x, ea, oh(ea[:, 0].long(), 2).double())
    gen = Pairs(x, ga, oh(ga[:, 0].long(), 2).double())
    for _ in range(200):
        disc.update(exp, gen, g)
    assert float(disc.reward(exp).mean()) > float(disc.reward(gen).mean()) + 2.0
