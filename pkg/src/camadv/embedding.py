"""Feature extractors with full/upper/lower-body branches and classifier heads."""

from __future__ import annotations

import hashlib
import json
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import _payload_array

BRANCHES = ("F", "U", "L")
CHECKPOINT_FORMAT = "camadv-checkpoint"
CHECKPOINT_VERSION = 1


@contextmanager
def seeded(seed: int):
    """Run a block under a fixed torch seed without touching the global RNG."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def split_branches(feature_map: torch.Tensor):
    """Pool an ``N x C x H x W`` map into full, upper-half and lower-half vectors."""
    if feature_map.dim() != 4:
        raise ValueError(f"expected an N x C x H x W feature map, got {tuple(feature_map.shape)}")
    height = feature_map.shape[2]
    if height % 2:
        raise ValueError(f"feature map height must be even, got {height}")
    half = height // 2
    full = feature_map.mean(dim=(2, 3))
    upper = feature_map[:, :, :half].mean(dim=(2, 3))
    lower = feature_map[:, :, half:].mean(dim=(2, 3))
    return full, upper, lower


class VectorBackbone(nn.Module):
    """MLP stand-in for precomputed-feature payloads; emits a d x 2 x 1 map."""

    def __init__(self, input_dim: int, feature_dim: int, hidden: int = 64):
        super().__init__()
        self.feature_dim = feature_dim
        self.net = nn.Sequential(
            nn.Linear(input_dim, hidden),
            nn.ReLU(),
            nn.Linear(hidden, 2 * feature_dim),
        )

    def forward(self, x):
        return self.net(x).view(x.shape[0], self.feature_dim, 2, 1)


class ConvBackbone(nn.Module):
    """Small strided CNN; output height is input height / 8 (kept even)."""

    def __init__(self, feature_dim: int, width: int = 16):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, width, 3, stride=2, padding=1),
            nn.BatchNorm2d(width),
            nn.ReLU(),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1),
            nn.BatchNorm2d(2 * width),
            nn.ReLU(),
            nn.Conv2d(2 * width, feature_dim, 3, stride=2, padding=1),
        )

    def forward(self, x):
        return self.net(x)


class EmbeddingModel(nn.Module):
    """Backbone plus optional identity and pseudo-identity classifiers.

    ``arch`` records the constructor arguments so checkpoints can rebuild
    the model; see :func:`build_model`.
    """

    def __init__(self, backbone: nn.Module, feature_dim: int, payload_kind: str, num_ids: Optional[int] = None):
        super().__init__()
        self.backbone = backbone
        self.feature_dim = feature_dim
        self.payload_kind = payload_kind
        self.id_classifier = nn.Linear(feature_dim, num_ids) if num_ids else None
        self.pseudo_id_classifier: Optional[nn.Linear] = None
        self.arch: dict = {}

    def forward(self, x: torch.Tensor) -> dict:
        full, upper, lower = split_branches(self.backbone(x))
        return {"F": full, "U": upper, "L": lower}

    def classify(self, features: torch.Tensor, head: str = "pseudo") -> torch.Tensor:
        layer = self.pseudo_id_classifier if head == "pseudo" else self.id_classifier
        if layer is None:
            raise ValueError(f"model has no {head} classifier head")
        return F.softmax(layer(features), dim=1)

    def reset_pseudo_head(self, num_clusters: int, seed: int) -> None:
        """Allocate a fresh pseudo-ID classifier for ``num_clusters`` classes."""
        ref = next(self.parameters())
        with seeded(seed):
            head = nn.Linear(self.feature_dim, num_clusters)
        self.pseudo_id_classifier = head.to(dtype=ref.dtype)

    def backbone_parameters(self):
        return list(self.backbone.parameters())


def build_model(
    payload_kind: str,
    feature_dim: int,
    *,
    input_dim: Optional[int] = None,
    hidden: int = 64,
    num_ids: Optional[int] = None,
    image_size: Optional[tuple] = None,
    seed: int = 0,
) -> EmbeddingModel:
    if payload_kind == "feature":
        if not input_dim:
            raise ValueError("input_dim is required for feature payloads")
        make = lambda: VectorBackbone(input_dim, feature_dim, hidden)  # noqa: E731
    elif payload_kind == "image":
        make = lambda: ConvBackbone(feature_dim, hidden)  # noqa: E731
    else:
        raise ValueError(f"unknown payload kind {payload_kind!r}")
    with seeded(seed):
        model = EmbeddingModel(make(), feature_dim, payload_kind, num_ids)
    model.arch = dict(
        payload_kind=payload_kind,
        feature_dim=feature_dim,
        input_dim=input_dim,
        hidden=hidden,
        num_ids=num_ids,
        image_size=tuple(image_size) if image_size else None,
        seed=seed,
    )
    return model


@dataclass
class ModelPair:
    """Two independently initialised models trained side by side."""

    model_1: EmbeddingModel
    model_2: EmbeddingModel

    def __post_init__(self):
        ptrs = {p.data_ptr() for p in self.model_1.parameters()}
        if self.model_1 is self.model_2 or any(p.data_ptr() in ptrs for p in self.model_2.parameters()):
            raise ValueError("the two models of a pair must not share parameters")

    def __iter__(self):
        return iter((self.model_1, self.model_2))


def to_input(payloads: Union[np.ndarray, torch.Tensor, Sequence], kind: str, dtype=torch.float32) -> torch.Tensor:
    """Convert stacked payloads (images as N x H x W x C) to a model input tensor."""
    if isinstance(payloads, torch.Tensor):
        x = payloads.to(dtype)
    else:
        x = torch.as_tensor(np.asarray(payloads), dtype=dtype)
    if kind == "image":
        if x.dim() != 4:
            raise ValueError(f"image batch must be N x H x W x C, got {tuple(x.shape)}")
        x = x.permute(0, 3, 1, 2).contiguous()
    elif x.dim() != 2:
        raise ValueError(f"feature batch must be N x d, got {tuple(x.shape)}")
    return x


def embed(model: EmbeddingModel, batch, branch: str = "F") -> torch.Tensor:
    """Embed a list of :class:`~camadv.data.Sample` (or a ready tensor) on one branch."""
    if branch not in BRANCHES:
        raise ValueError(f"unknown branch {branch!r}")
    ref = next(model.parameters())
    if isinstance(batch, torch.Tensor):
        x = batch
    else:
        batch = list(batch)
        if not batch:
            return torch.zeros((0, model.feature_dim), dtype=ref.dtype)
        kinds = {s.kind for s in batch}
        if kinds != {model.payload_kind}:
            raise ValueError(f"payload kind {sorted(kinds)} does not match model ({model.payload_kind})")
        image_size = model.arch.get("image_size")
        x = to_input(np.stack([_payload_array(s, image_size) for s in batch]), model.payload_kind, ref.dtype)
    return model(x)[branch]


def hflip(x: torch.Tensor, kind: str) -> torch.Tensor:
    # Feature-vector payloads have no horizontal axis.
    return torch.flip(x, dims=[3]) if kind == "image" else x


@torch.no_grad()
def eval_features(
    model: Union[EmbeddingModel, ModelPair],
    inputs: torch.Tensor,
    mode: str = "mmt",
    batch_size: int = 256,
) -> np.ndarray:
    """Retrieval features.

    ``ssg``: per branch, sum the features of the input and its horizontal
    flip, L2-normalise, and concatenate F, U, L (length 3d).
    ``mmt`` / ``single``: the raw full-body feature (length d); for a pair
    the first model is used.
    """
    if isinstance(model, ModelPair):
        model = model.model_1
    was_training = model.training
    model.eval()
    chunks = []
    try:
        for start in range(0, len(inputs), batch_size):
            x = inputs[start : start + batch_size]
            if mode == "ssg":
                out, flipped = model(x), model(hflip(x, model.payload_kind))
                blocks = [F.normalize(out[b] + flipped[b], dim=1) for b in BRANCHES]
                chunks.append(torch.cat(blocks, dim=1))
            elif mode in ("mmt", "single"):
                chunks.append(model(x)["F"])
            else:
                raise ValueError(f"unknown evaluation mode {mode!r}")
    finally:
        model.train(was_training)
    if not chunks:
        width = 3 * model.feature_dim if mode == "ssg" else model.feature_dim
        return np.zeros((0, width), dtype=np.float32)
    return torch.cat(chunks).cpu().numpy()


def config_fingerprint(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def save_checkpoint(path, models: dict, *, config_text: str = "", extra: Optional[dict] = None) -> None:
    """Save named models (state dicts + architecture) with a config fingerprint."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "fingerprint": config_fingerprint(config_text),
        "config": config_text,
        "models": {},
        "extra": extra or {},
    }
    for name, model in models.items():
        entry = {"state": model.state_dict()}
        if isinstance(model, EmbeddingModel):
            head = model.pseudo_id_classifier
            entry["arch"] = dict(model.arch)
            entry["pseudo_classes"] = head.out_features if head is not None else None
        payload["models"][name] = entry
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def read_checkpoint(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    return payload


def restore_model(entry: dict) -> EmbeddingModel:
    arch = dict(entry["arch"])
    model = build_model(arch.pop("payload_kind"), arch.pop("feature_dim"), **arch)
    if entry.get("pseudo_classes"):
        model.reset_pseudo_head(entry["pseudo_classes"], seed=0)
    state = entry["state"]
    dtype = next(iter(state.values())).dtype if state else torch.float32
    model.to(dtype=dtype)
    model.load_state_dict(state)
    return model


def load_models(path, names: Optional[Sequence[str]] = None) -> dict:
    """Rebuild the embedding models stored in a checkpoint (discriminators are skipped)."""
    payload = read_checkpoint(path)
    out = {}
    for name, entry in payload["models"].items():
        if "arch" not in entry or (names is not None and name not in names):
            continue
        out[name] = restore_model(entry)
    return out


def checkpoint_summary(path) -> dict:
    payload = read_checkpoint(path)
    return {
        "format": payload["format"],
        "version": payload["version"],
        "fingerprint": payload["fingerprint"],
        "models": sorted(payload["models"]),
        "extra": json.loads(json.dumps(payload["extra"], default=str)),
    }
