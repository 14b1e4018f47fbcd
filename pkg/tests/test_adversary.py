import math

import numpy as np
import pytest
import torch

from camadv.adversary import (
    Discriminator,
    GradientRouting,
    camera_probe_accuracy,
    discriminate,
    frozen,
    grad_reverse,
    stop_gradient,
)
from camadv.embedding import build_model
from camadv.objectives import Batch, single_composition


def test_outputs_are_stochastic_rows():
    disc = Discriminator(5, 4, conditional=True, hidden=16)
    probs = disc(torch.randn(7, 5) * 10, torch.randn(7, 5))
    assert (probs >= 0).all()
    torch.testing.assert_close(probs.sum(dim=1), torch.ones(7), atol=1e-5, rtol=0)


@pytest.mark.parametrize("merge", ["sum", "concat"])
def test_zeroed_conditioning_branch_makes_output_independent_of_conditioning(merge):
    disc = Discriminator(5, 4, conditional=True, hidden=16, merge=merge)
    with torch.no_grad():
        for p in disc.conditioning_branch.parameters():
            p.zero_()
    disc.eval()
    feats = torch.randn(3, 5)
    a = discriminate(disc, feats, torch.randn(3, 5))
    b = discriminate(disc, feats, torch.randn(3, 5) * 100)
    assert torch.equal(a, b)


def test_untrained_head_is_near_uniform():
    disc = Discriminator(8, 6, hidden=1024)
    probs = disc(torch.randn(32, 8))
    entropy = -(probs * probs.log()).sum(dim=1)
    np.testing.assert_allclose(entropy.detach().numpy(), math.log(6), atol=5e-3)


def test_shape_and_conditioning_checks():
    plain = Discriminator(4, 2, hidden=8)
    cond = Discriminator(4, 2, conditional=True, hidden=8)
    with pytest.raises(ValueError, match="features"):
        plain(torch.randn(3, 5))
    with pytest.raises(ValueError, match="conditioning input"):
        cond(torch.randn(3, 4))
    with pytest.raises(ValueError, match="no conditioning"):
        plain(torch.randn(3, 4), torch.randn(3, 4))
    with pytest.raises(ValueError, match="shape"):
        cond(torch.randn(3, 4), torch.randn(2, 4))


def test_grad_reverse_and_stop_gradient():
    x = torch.randn(4, requires_grad=True)
    (grad_reverse(x, 0.3) * torch.arange(4.0)).sum().backward()
    torch.testing.assert_close(x.grad, -0.3 * torch.arange(4.0))
    y = torch.randn(4, requires_grad=True)
    out = stop_gradient(y)
    assert torch.equal(out, y.detach())
    (out * 5).sum().backward()
    assert torch.equal(y.grad, torch.zeros(4))


def _setup(conditional=True):
    model = build_model("feature", 6, input_dim=5, hidden=8, seed=0).double()
    model.reset_pseudo_head(3, seed=0)
    disc = Discriminator(6, 3, conditional=conditional, hidden=16, seed=1).double()
    with torch.no_grad():
        disc.head.weight.normal_(0, 0.3)
    g = torch.Generator().manual_seed(2)
    labels = torch.arange(3).repeat_interleave(2)
    batch = Batch(
        torch.randn(6, 5, generator=g, dtype=torch.float64),
        torch.tensor([0, 1, 2, 0, 1, 2]),
        {"F": labels},
        {"F": torch.randn(3, 6, generator=g, dtype=torch.float64)[labels].requires_grad_(True)},
    )
    return model, disc, batch


def _adv_backbone_grad(model, disc, batch, hook):
    model.zero_grad()
    obj = single_composition(model, disc, batch, 0.1, hook=hook)
    obj.adv.value.backward()
    return torch.cat([p.grad.view(-1) for p in model.backbone.parameters()])


def test_reversal_gradient_is_minus_mu_times_plain_gradient():
    model, disc, batch = _setup()
    mu = 0.1
    plain = _adv_backbone_grad(model, disc, batch, None)
    reversed_ = _adv_backbone_grad(model, disc, batch, GradientRouting("reversal", mu).hook())
    torch.testing.assert_close(reversed_, -mu * plain, rtol=1e-10, atol=1e-14)
    zero = _adv_backbone_grad(model, disc, batch, GradientRouting("reversal", 0.0).hook())
    assert not zero.any()


@pytest.mark.parametrize("mode", ["reversal", "alternating"])
def test_conditioning_path_gets_exactly_zero_gradient(mode):
    model, disc, batch = _setup()
    routing = GradientRouting(mode, 0.1)
    model_opt = torch.optim.SGD(model.parameters(), lr=0.1)
    disc_opt = torch.optim.SGD(disc.parameters(), lr=0.1)
    routing.step(lambda hook: single_composition(model, disc, batch, 0.1, hook=hook), model_opt, disc_opt, [disc])
    assert batch.centroids["F"].grad.norm() == 0


def test_alternating_step_updates_both_players():
    model, disc, batch = _setup(conditional=False)
    before_m = [p.detach().clone() for p in model.backbone.parameters()]
    before_d = [p.detach().clone() for p in disc.parameters()]
    GradientRouting("alternating", 0.5).step(
        lambda hook: single_composition(model, disc, batch, 0.5, hook=hook),
        torch.optim.SGD(model.parameters(), lr=0.1),
        torch.optim.SGD(disc.parameters(), lr=0.1),
        [disc],
    )
    assert any(not torch.equal(a, b) for a, b in zip(before_m, model.backbone.parameters()))
    assert any(not torch.equal(a, b) for a, b in zip(before_d, disc.parameters()))
    assert all(p.requires_grad for p in disc.parameters())


def test_frozen_restores_flags():
    disc = Discriminator(4, 2, hidden=8)
    with frozen([disc]):
        assert not any(p.requires_grad for p in disc.parameters())
    assert all(p.requires_grad for p in disc.parameters())


def test_invalid_routing_rejected():
    with pytest.raises(ValueError):
        GradientRouting("sideways", 0.1)
    with pytest.raises(ValueError):
        GradientRouting("reversal", -1.0)


def test_probe_detects_camera_information():
    rng = np.random.default_rng(0)
    cams = rng.integers(0, 3, 300)
    informative = np.eye(3)[cams] * 3 + rng.normal(size=(300, 3)) * 0.1
    noise = rng.normal(size=(300, 3))
    assert camera_probe_accuracy(informative, cams, 3, steps=150) > 0.9
    assert camera_probe_accuracy(noise, cams, 3, steps=150) < 0.6
