import math

import numpy as np
import pytest
import torch

from dreamer_cdp.agent import ActorCritic, ImaginedRollout, lambda_returns
from dreamer_cdp.worldmodel import WorldModel

from conftest import tiny_config


def brute_force_lambda_return(r, c, v, gamma, lam):
    """Weighted average of n-step returns, evaluated directly (no recursion)."""
    H = len(r)
    out = []
    for t in range(H):
        def n_step(n):
            g, disc = 0.0, 1.0
            for k in range(n):
                g += disc * r[t + k]
                disc *= gamma * c[t + k]
            return g + disc * v[t + n]

        m = H - t
        total = sum((1 - lam) * lam ** (n - 1) * n_step(n) for n in range(1, m))
        total += lam ** (m - 1) * n_step(m)
        out.append(total)
    return out


def as_t(*xs):
    return [torch.tensor(x, dtype=torch.float64)[:, None] for x in xs]


def test_hand_unrolled_example():
    r, c, v = [1.0, 0.0, 2.0], [1.0, 1.0, 1.0], [0.0, 0.0, 0.0, 1.0]
    # R3 = 1; R2 = 2 + .9 (.5 * 1 + .5 * 1); R1 = .9 (.5 * R2); R0 = 1 + .9 (.5 * R1)
    R2 = 2 + 0.9 * 1.0
    R1 = 0.9 * 0.5 * R2
    R0 = 1 + 0.9 * 0.5 * R1
    got = lambda_returns(*as_t(r, c, v), gamma=0.9, lam=0.5)[:, 0].tolist()
    assert got == pytest.approx([R0, R1, R2], abs=1e-12)
    assert brute_force_lambda_return(r, c, v, 0.9, 0.5) == pytest.approx([R0, R1, R2], abs=1e-12)


def test_lambda_zero_is_one_step_bootstrap():
    rng = np.random.default_rng(0)
    r, c, v = rng.normal(size=4), (rng.random(4) > 0.3).astype(float), rng.normal(size=5)
    got = lambda_returns(*as_t(r, c, v), gamma=0.97, lam=0.0)[:, 0].numpy()
    assert np.allclose(got, r + 0.97 * c * v[1:])


def test_lambda_one_is_monte_carlo():
    rng = np.random.default_rng(1)
    H, gamma = 5, 0.9
    r, v = rng.normal(size=H), rng.normal(size=H + 1)
    got = lambda_returns(*as_t(r, np.ones(H), v), gamma=gamma, lam=1.0)[:, 0].numpy()
    for t in range(H):
        mc = sum(gamma**k * r[t + k] for k in range(H - t)) + gamma ** (H - t) * v[H]
        assert got[t] == pytest.approx(mc, abs=1e-12)


def test_values_length_checked():
    with pytest.raises(ValueError):
        lambda_returns(torch.zeros(3, 1), torch.ones(3, 1), torch.zeros(3, 1), 0.9, 0.5)


@pytest.fixture
def setup():
    torch.manual_seed(0)
    cfg = tiny_config()
    wm = WorldModel(cfg, 6)
    ac = ActorCritic(cfg.deter + 6, 6, 32)
    h = torch.randn(5, cfg.deter)
    z = wm.predict_prior(h).sample(torch.Generator().manual_seed(0)).flatten(-2)
    return wm, ac, (h, z)


def test_imagine_horizon_one(setup):
    wm, ac, seed = setup
    ro = ac.imagine(wm, seed, 1, torch.Generator().manual_seed(0))
    assert ro.horizon == 1
    assert ro.feats.shape[0] == 2 and ro.values.shape[0] == 2
    assert ro.rewards.shape == (1, 5)


def test_imagine_zero_horizon_rejected(setup):
    wm, ac, seed = setup
    with pytest.raises(ValueError):
        ac.imagine(wm, seed, 0)


def test_imagine_deterministic(setup):
    wm, ac, seed = setup
    a = ac.imagine(wm, seed, 6, torch.Generator().manual_seed(3))
    b = ac.imagine(wm, seed, 6, torch.Generator().manual_seed(3))
    for x, y in zip((a.feats, a.actions, a.rewards, a.conts), (b.feats, b.actions, b.rewards, b.conts)):
        assert torch.equal(x, y)


def test_policy_losses_do_not_reach_world_model(setup):
    wm, ac, seed = setup
    ro = ac.imagine(wm, seed, 5, torch.Generator().manual_seed(3))
    actor_loss, critic_loss, _ = ac.losses(ro, 0.99, 0.95, 3e-4)
    (actor_loss + critic_loss).backward()
    assert all(p.grad is None for p in wm.parameters())
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in ac.actor.parameters())
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in ac.critic.parameters())


def test_uniform_policy_has_max_entropy():
    ac = ActorCritic(4, 6, 8)
    for p in ac.actor[-1].parameters():
        torch.nn.init.zeros_(p)
    H, N = 3, 2
    ro = ImaginedRollout(
        feats=torch.randn(H + 1, N, 4),
        actions=torch.nn.functional.one_hot(torch.zeros(H, N, dtype=torch.long), 6).float(),
        rewards=torch.zeros(H, N),
        conts=torch.ones(H, N),
        values=torch.zeros(H + 1, N),
    )
    _, _, ent = ac.losses(ro, 0.99, 0.95, 3e-4)
    assert ent.item() == pytest.approx(math.log(6), abs=1e-6)
