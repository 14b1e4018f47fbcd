"""Camera discriminators and the gradient-routing contract of the min-max game."""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .embedding import seeded

ROUTING_MODES = ("reversal", "alternating")


class _ReverseGrad(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, scale):
        ctx.scale = scale
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return -ctx.scale * grad, None


class _StopGrad(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        return x.clone()

    @staticmethod
    def backward(ctx, grad):
        return torch.zeros_like(grad)


def grad_reverse(x: torch.Tensor, scale: float = 1.0) -> torch.Tensor:
    """Identity on the forward pass; multiplies the incoming gradient by ``-scale``."""
    return _ReverseGrad.apply(x, float(scale))


def stop_gradient(x: torch.Tensor) -> torch.Tensor:
    """Identity on the forward pass; the gradient sent back is an explicit zero tensor.

    Unlike ``detach`` the input stays in the graph, so callers can check that
    the conditioning path contributes exactly zero.
    """
    return _StopGrad.apply(x)


def _block(n_in: int, n_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(n_in, n_out), nn.BatchNorm1d(n_out), nn.ReLU())


class Discriminator(nn.Module):
    """Camera classifier, optionally conditioned on the sample's cluster centroid.

    Layout (hidden width ``h``, 1024 by default): feature branch d->h,
    conditioning branch d->h (conditional only), merge h->h, head h->K.
    Branch outputs are summed before the merge layer, or concatenated
    when ``merge="concat"``.
    """

    def __init__(
        self,
        feature_dim: int,
        num_cameras: int,
        conditional: bool = False,
        hidden: int = 1024,
        merge: str = "sum",
        seed: int = 0,
    ):
        super().__init__()
        if merge not in ("sum", "concat"):
            raise ValueError(f"unknown merge {merge!r}")
        self.conditional = conditional
        self.feature_dim = feature_dim
        self.num_cameras = num_cameras
        self.merge_mode = merge
        with seeded(seed):
            self.feature_branch = _block(feature_dim, hidden)
            self.conditioning_branch = _block(feature_dim, hidden) if conditional else None
            width = 2 * hidden if (conditional and merge == "concat") else hidden
            self.merge = _block(width, hidden)
            self.head = nn.Linear(hidden, num_cameras)
            nn.init.normal_(self.head.weight, std=1e-3)
            nn.init.zeros_(self.head.bias)

    def forward(self, features: torch.Tensor, conditioning: Optional[torch.Tensor] = None) -> torch.Tensor:
        return self.log_probs(features, conditioning).exp()

    def log_probs(self, features: torch.Tensor, conditioning: Optional[torch.Tensor] = None) -> torch.Tensor:
        if features.dim() != 2 or features.shape[1] != self.feature_dim:
            raise ValueError(f"features must be N x {self.feature_dim}, got {tuple(features.shape)}")
        hidden = self.feature_branch(features)
        if self.conditional:
            if conditioning is None:
                raise ValueError("conditional discriminator needs a conditioning input")
            if conditioning.shape != features.shape:
                raise ValueError(
                    f"conditioning shape {tuple(conditioning.shape)} != features {tuple(features.shape)}"
                )
            cond = self.conditioning_branch(stop_gradient(conditioning))
            hidden = hidden + cond if self.merge_mode == "sum" else torch.cat([hidden, cond], dim=1)
        elif conditioning is not None:
            raise ValueError("unconditional discriminator takes no conditioning input")
        return torch.log_softmax(self.head(self.merge(hidden)), dim=1)


def discriminate(disc: Discriminator, features: torch.Tensor, conditioning: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Camera probabilities, ``batch x K``; conditioning is cut from the graph."""
    return disc(features, conditioning)


@contextmanager
def frozen(modules: Sequence[nn.Module]):
    params = [p for m in modules for p in m.parameters()]
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, flag in zip(params, flags):
            p.requires_grad_(flag)


@dataclass(frozen=True)
class GradientRouting:
    """How one training step splits gradients between extractor and discriminators.

    ``reversal``: a single backward pass through a gradient-reversal layer;
    the discriminators descend on the camera loss and the extractor receives
    ``-mu`` times that gradient on the feature path.
    ``alternating``: a discriminator step on detached features, then an
    extractor step on ``ps_id - mu * adv`` with the discriminators frozen.
    """

    mode: str
    mu: float

    def __post_init__(self):
        if self.mode not in ROUTING_MODES:
            raise ValueError(f"unknown routing mode {self.mode!r}")
        if self.mu < 0:
            raise ValueError("mu must be non-negative")

    def hook(self) -> Callable[[torch.Tensor], torch.Tensor]:
        if self.mode == "reversal":
            return lambda f: grad_reverse(f, self.mu)
        return lambda f: f

    def step(self, compose, model_optimizer, disc_optimizer, discriminators):
        """Run one update. ``compose(hook)`` must return an Objectives record."""
        if self.mode == "reversal":
            obj = compose(self.hook())
            model_optimizer.zero_grad(set_to_none=True)
            disc_optimizer.zero_grad(set_to_none=True)
            (obj.ps_id.value + obj.adv.value).backward()
            model_optimizer.step()
            disc_optimizer.step()
            return obj

        disc_obj = compose(lambda f: f.detach())
        disc_optimizer.zero_grad(set_to_none=True)
        disc_obj.adv.value.backward()
        disc_optimizer.step()
        with frozen(discriminators):
            obj = compose(self.hook())
            model_optimizer.zero_grad(set_to_none=True)
            obj.generator.backward()
            model_optimizer.step()
        return obj


def route_gradients(mode: str, mu: float) -> GradientRouting:
    return GradientRouting(mode, mu)


def camera_probe_accuracy(
    features: np.ndarray,
    cameras: np.ndarray,
    num_cameras: int,
    *,
    steps: int = 200,
    hidden: int = 64,
    lr: float = 1e-2,
    batch_size: int = 64,
    seed: int = 0,
) -> float:
    """Held-out accuracy of a fresh plain discriminator trained on frozen features.

    Samples are split in halves at random; the probe trains on one half and
    is scored on the other.
    """
    rng = np.random.default_rng(seed)
    n = len(features)
    if n < 4:
        raise ValueError("need at least 4 samples for a probe")
    order = rng.permutation(n)
    train_idx, test_idx = order[: n // 2], order[n // 2 :]
    x = torch.as_tensor(np.asarray(features), dtype=torch.float32)
    y = torch.as_tensor(np.asarray(cameras), dtype=torch.long)
    probe = Discriminator(x.shape[1], num_cameras, hidden=hidden, seed=seed)
    opt = torch.optim.Adam(probe.parameters(), lr=lr)
    probe.train()
    for _ in range(steps):
        idx = torch.as_tensor(rng.choice(train_idx, size=min(batch_size, len(train_idx)), replace=False))
        if len(idx) < 2:
            break
        loss = -probe.log_probs(x[idx]).gather(1, y[idx, None]).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    probe.eval()
    with torch.no_grad():
        pred = probe.log_probs(x[test_idx]).argmax(dim=1)
    return float((pred == y[test_idx]).float().mean())
