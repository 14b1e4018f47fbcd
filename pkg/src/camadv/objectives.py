"""Identity, triplet and camera-adversarial losses and their min-max compositions."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence, Union

import torch

from .adversary import Discriminator
from .embedding import BRANCHES, EmbeddingModel, ModelPair

LOG_CLAMP = 1e-12

Hook = Optional[Callable[[torch.Tensor], torch.Tensor]]


@dataclass
class LossValue:
    """A scalar loss with its named parts; ``value = sum(weights[k] * parts[k])``.

    ``details`` holds extra scalars for logging that are not summed.
    """

    parts: dict
    weights: dict
    details: dict = field(default_factory=dict)
    value: torch.Tensor = field(init=False)

    def __post_init__(self):
        if set(self.parts) != set(self.weights):
            raise ValueError("every loss part needs a weight")
        total = None
        for name, part in self.parts.items():
            term = self.weights[name] * part
            total = term if total is None else total + term
        self.value = total

    def breakdown(self) -> dict:
        out = {k: float(v.detach()) for k, v in self.parts.items()}
        out.update({k: float(v.detach()) for k, v in self.details.items()})
        return out


def _check_stochastic(probs: torch.Tensor) -> None:
    if probs.dim() != 2:
        raise ValueError(f"expected batch x classes probabilities, got {tuple(probs.shape)}")
    with torch.no_grad():
        if (probs < 0).any() or not torch.allclose(
            probs.sum(dim=1), torch.ones(len(probs), dtype=probs.dtype), atol=1e-4
        ):
            raise ValueError("rows must be stochastic vectors")


def cross_entropy(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean of ``-log <probs_i, onehot_i>``; probabilities are clamped at 1e-12."""
    _check_stochastic(probs)
    labels = torch.as_tensor(labels)
    if labels.dim() == 2:
        if labels.shape != probs.shape:
            raise ValueError("one-hot labels must match the probability matrix")
        picked = (probs * labels.to(probs.dtype)).sum(dim=1)
    else:
        picked = probs.gather(1, labels.long().view(-1, 1)).squeeze(1)
    return -torch.log(picked.clamp_min(LOG_CLAMP)).mean()


def ce_id_loss(probs: torch.Tensor, labels: torch.Tensor) -> LossValue:
    return LossValue({"ce": cross_entropy(probs, labels)}, {"ce": 1.0})


def camera_adv_loss(disc_probs: torch.Tensor, cameras: torch.Tensor) -> LossValue:
    return LossValue({"camera": cross_entropy(disc_probs, cameras)}, {"camera": 1.0})


def pairwise_distances(x: torch.Tensor) -> torch.Tensor:
    """Euclidean distance matrix with a zero (not NaN) gradient at coincident points."""
    sq = ((x[:, None, :] - x[None, :, :]) ** 2).sum(dim=-1)
    positive = sq > 0
    safe = torch.where(positive, sq, torch.ones_like(sq))
    return torch.where(positive, safe.sqrt(), torch.zeros_like(sq))


def triplet_loss(
    features: torch.Tensor,
    labels: torch.Tensor,
    margin: float = 0.5,
    skip_invalid: bool = False,
) -> LossValue:
    """Batch-hard triplet loss.

    Each anchor is paired with its farthest same-label sample and its
    closest different-label sample; the hinge ``max(0, d_ap + m - d_an)``
    is averaged over anchors. Samples labelled ``-1`` are ignored entirely.
    With ``skip_invalid`` anchors lacking a positive or a negative are
    dropped instead of raising.
    """
    labels = torch.as_tensor(labels).long().view(-1)
    if len(labels) != len(features):
        raise ValueError("features and labels differ in length")
    keep = labels >= 0
    features, labels = features[keep], labels[keep]
    dist = pairwise_distances(features)
    same = labels[:, None] == labels[None, :]
    eye = torch.eye(len(labels), dtype=torch.bool)
    pos_mask, neg_mask = same & ~eye, ~same
    valid = pos_mask.any(dim=1) & neg_mask.any(dim=1)
    if not bool(valid.all()) and not skip_invalid:
        bad = int((~valid).nonzero()[0]) if len(valid) else 0
        raise ValueError(
            f"triplet anchor {bad} has no positive or no negative in the batch; "
            "the P x K sampler must provide >= 2 instances of >= 2 identities"
        )
    if not bool(valid.any()):
        zero = features.sum() * 0.0
        return LossValue({"triplet": zero}, {"triplet": 1.0})
    hardest_pos = dist.masked_fill(~pos_mask, float("-inf")).max(dim=1).values
    hardest_neg = dist.masked_fill(~neg_mask, float("inf")).min(dim=1).values
    hinge = torch.clamp(hardest_pos - hardest_neg + margin, min=0.0)
    return LossValue({"triplet": hinge[valid].mean()}, {"triplet": 1.0})


def id_loss(
    probs: torch.Tensor,
    features: torch.Tensor,
    labels: torch.Tensor,
    lam: float = 1.0,
    margin: float = 0.5,
) -> LossValue:
    """Cross-entropy plus ``lam`` times batch-hard triplet; the triplet is skipped when ``lam == 0``."""
    parts = {"ce": cross_entropy(probs, labels)}
    weights = {"ce": 1.0}
    if lam != 0:
        parts["triplet"] = triplet_loss(features, labels, margin).value
        weights["triplet"] = float(lam)
    return LossValue(parts, weights)


def conditional_camera_adv_loss(
    features: torch.Tensor,
    centroids: Optional[torch.Tensor],
    cameras: torch.Tensor,
    discriminator: Discriminator,
) -> LossValue:
    """Camera cross-entropy of a centroid-conditioned discriminator.

    The discriminator cuts the centroid input from the graph, so the loss
    carries no gradient back through the conditioning vector.
    """
    if centroids is None or bool(torch.isnan(centroids).any()):
        raise ValueError("every sample needs the centroid of its cluster (outliers must be excluded)")
    return camera_adv_loss(discriminator(features, centroids), cameras)


def adversarial_objective(ps_id: LossValue, adv: LossValue, mu: float):
    """Return ``(generator, discriminator)`` objectives, both to be minimised.

    The extractor minimises ``ps_id - mu * adv``; the discriminator
    minimises ``adv``.
    """
    if mu < 0:
        raise ValueError("mu must be non-negative")
    return ps_id.value - mu * adv.value, adv.value


@dataclass
class Objectives:
    ps_id: LossValue
    adv: Optional[LossValue]
    mu: float

    @property
    def generator(self) -> torch.Tensor:
        if self.adv is None:
            return self.ps_id.value
        return adversarial_objective(self.ps_id, self.adv, self.mu)[0]

    @property
    def discriminator(self) -> Optional[torch.Tensor]:
        return None if self.adv is None else self.adv.value

    def breakdown(self) -> dict:
        out = {f"ps_id.{k}": v for k, v in self.ps_id.breakdown().items()}
        out["ps_id"] = float(self.ps_id.value.detach())
        if self.adv is not None:
            out.update({f"adv.{k}": v for k, v in self.adv.breakdown().items()})
            out["adv"] = float(self.adv.value.detach())
        out["generator"] = float(self.generator.detach())
        return out


@dataclass
class Batch:
    """A training batch with per-branch pseudo-labels and per-sample centroids."""

    inputs: torch.Tensor
    cameras: torch.Tensor
    labels: Mapping[str, torch.Tensor]
    centroids: Mapping[str, torch.Tensor] = field(default_factory=dict)


def _adversarial_part(
    disc: Discriminator, features: torch.Tensor, centroids: Optional[torch.Tensor], cameras, hook: Hook
) -> torch.Tensor:
    fed = hook(features) if hook is not None else features
    if disc.conditional:
        return conditional_camera_adv_loss(fed, centroids, cameras, disc).value
    return camera_adv_loss(disc(fed), cameras).value


def single_composition(
    model: EmbeddingModel,
    discriminator: Optional[Discriminator],
    batch: Batch,
    mu: float,
    *,
    lam: float = 1.0,
    margin: float = 0.5,
    outputs: Optional[dict] = None,
    hook: Hook = None,
) -> Objectives:
    """One extractor, one (optional) camera discriminator on the full-body feature."""
    out = outputs if outputs is not None else model(batch.inputs)
    feats, labels = out["F"], batch.labels["F"]
    ps = id_loss(model.classify(feats), feats, labels, lam, margin)
    adv = None
    if discriminator is not None:
        part = _adversarial_part(discriminator, feats, batch.centroids.get("F"), batch.cameras, hook)
        adv = LossValue({"camera": part}, {"camera": 1.0})
    return Objectives(ps, adv, mu)


def ssg_composition(
    model: EmbeddingModel,
    discriminators: Optional[Mapping[str, Discriminator]],
    batch: Batch,
    mu: float,
    *,
    margin: float = 0.5,
    outputs: Optional[dict] = None,
    hook: Hook = None,
) -> Objectives:
    """Per-branch triplet losses minus ``mu`` times one camera loss per branch.

    All three discriminators are conditioned on the full-body centroid.
    Upper/lower-body anchors without a positive or negative under their own
    branch labelling are skipped.
    """
    out = outputs if outputs is not None else model(batch.inputs)
    for b in BRANCHES:
        if b not in batch.labels:
            raise ValueError(f"missing pseudo-labels for branch {b}")
    parts = {
        f"triplet_{b}": triplet_loss(out[b], batch.labels[b], margin, skip_invalid=(b != "F")).value
        for b in BRANCHES
    }
    ps = LossValue(parts, {k: 1.0 for k in parts})
    adv = None
    if discriminators is not None:
        missing = [b for b in BRANCHES if b not in discriminators]
        if missing:
            raise ValueError(f"missing discriminator for branch(es) {missing}")
        cond = batch.centroids.get("F")
        adv_parts = {
            f"camera_{b}": _adversarial_part(discriminators[b], out[b], cond, batch.cameras, hook)
            for b in BRANCHES
        }
        adv = LossValue(adv_parts, {k: 1.0 for k in adv_parts})
    return Objectives(ps, adv, mu)


def mmt_composition(
    pair: Union[ModelPair, Sequence[EmbeddingModel]],
    discriminators: Optional[Sequence[Discriminator]],
    batch: Batch,
    mu: float,
    *,
    lam: float = 1.0,
    margin: float = 0.5,
    outputs: Optional[Sequence[dict]] = None,
    hook: Hook = None,
) -> Objectives:
    """Two models, each with its own pseudo-ID loss and its own discriminator.

    Hard pseudo-label cross-entropy plus triplet stands in for each model's
    loss; both models share the full-body labelling and centroids.
    """
    if not isinstance(pair, ModelPair):
        pair = ModelPair(*pair)
    models = (pair.model_1, pair.model_2)
    outs = outputs if outputs is not None else [m(batch.inputs) for m in models]
    labels = batch.labels["F"]
    parts, details = {}, {}
    for i, (m, out) in enumerate(zip(models, outs), start=1):
        loss = id_loss(m.classify(out["F"]), out["F"], labels, lam, margin)
        parts[f"ps_id_{i}"] = loss.value
        details.update({f"{k}_{i}": v for k, v in loss.parts.items()})
    ps = LossValue(parts, {k: 1.0 for k in parts}, details)
    adv = None
    if discriminators is not None:
        if len(discriminators) != 2:
            raise ValueError("the pair needs exactly two discriminators")
        cond = batch.centroids.get("F")
        adv_parts = {
            f"camera_{i}": _adversarial_part(d, out["F"], cond, batch.cameras, hook)
            for i, (d, out) in enumerate(zip(discriminators, outs), start=1)
        }
        adv = LossValue(adv_parts, {k: 1.0 for k in adv_parts})
    return Objectives(ps, adv, mu)
