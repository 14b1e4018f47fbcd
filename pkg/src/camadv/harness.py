"""Experiment wiring: data and model construction from a config, and run directories."""

from __future__ import annotations

import hashlib
import json
import os
import time
from pathlib import Path
from typing import Optional

from . import __version__
from .config import ExperimentConfig, dumps
from .data import (
    DataError,
    DatasetSplit,
    FilenameLayout,
    SyntheticSpec,
    generate_synthetic,
    load_dataset_dir,
    load_split,
    save_split,
    with_role,
)
from .embedding import build_model, load_models
from .training import EpochReport, derive_seed

RUN_ROOT_ENV = "CAMADV_RUN_ROOT"
ROLE_KEYS = {"source_train": "source", "target_train": "target", "gallery": "gallery", "query": "query"}
SPLIT_FILES = {role: f"{role}.npz" for role in ROLE_KEYS}


def synthetic_spec(cfg: ExperimentConfig, source: bool = False) -> SyntheticSpec:
    s = cfg.synth
    return SyntheticSpec(
        num_identities=s.source_num_identities if source else s.num_identities,
        num_cameras=s.num_cameras,
        samples_per_id=s.samples_per_id,
        id_dim=s.id_dim,
        camera_shift_scale=s.camera_shift_scale,
        correlation=s.source_correlation if source else s.correlation,
        noise_sigma=s.noise_sigma,
        seed=s.source_seed if source else s.seed,
        query_per_id=s.query_per_id,
        gallery_per_id=s.gallery_per_id,
        num_distractors=0 if source else s.num_distractors,
    )


def synthetic_splits(cfg: ExperimentConfig) -> dict:
    """All four roles from the synthetic generator (the source uses its own seed and population)."""
    target, gallery, query = generate_synthetic(synthetic_spec(cfg))
    source, _, _ = generate_synthetic(synthetic_spec(cfg, source=True))
    return {
        "source_train": with_role(source, "source_train"),
        "target_train": target,
        "gallery": gallery,
        "query": query,
    }


def write_synthetic(cfg: ExperimentConfig, out_dir: Path) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    splits = synthetic_splits(cfg)
    for role, split in splits.items():
        save_split(split, out_dir / SPLIT_FILES[role])
    (out_dir / "spec.json").write_text(
        json.dumps({"target": synthetic_spec(cfg).to_dict(), "source": synthetic_spec(cfg, True).to_dict()}, indent=2)
    )
    return {role: out_dir / name for role, name in SPLIT_FILES.items()}


def _load_role(cfg: ExperimentConfig, role: str, location: str, synthetic: dict) -> DatasetSplit:
    if location == "synthetic":
        return synthetic[role]
    path = Path(location)
    if path.is_dir() and (path / SPLIT_FILES[role]).exists():
        path = path / SPLIT_FILES[role]
    if path.suffix == ".npz":
        return load_split(path, role=role)
    layout = FilenameLayout(image_size=(cfg.model.image_height, cfg.model.image_width))
    return load_dataset_dir(path, layout, role=role)


def load_experiment_data(cfg: ExperimentConfig, roles=tuple(ROLE_KEYS)) -> dict:
    """Resolve ``data.*`` locations: ``synthetic``, a ``.npz`` split, a directory of
    such splits, or a directory of image crops. Empty gallery/query follow the target.
    """
    synthetic = synthetic_splits(cfg) if "synthetic" in _locations(cfg).values() else {}
    out = {}
    for role in roles:
        location = _locations(cfg)[role]
        if not location:
            raise DataError(f"no location configured for the {role} split (data.{ROLE_KEYS[role]})")
        out[role] = _load_role(cfg, role, location, synthetic)
    return out


def _locations(cfg: ExperimentConfig) -> dict:
    d = cfg.data
    return {
        "source_train": d.source,
        "target_train": d.target,
        "gallery": d.gallery or d.target,
        "query": d.query or d.target,
    }


def model_names(cfg: ExperimentConfig) -> list:
    return ["model_1", "model_2"] if cfg.composition == "mmt" else ["model"]


def build_models(cfg: ExperimentConfig, split: DatasetSplit) -> list:
    """Fresh extractors for ``split``'s payload kind; a pair gets two different seeds."""
    kind = split.payload_kind
    input_dim = split.stack([0]).shape[1] if kind == "feature" else None
    image_size = (cfg.model.image_height, cfg.model.image_width) if kind == "image" else None
    return [
        build_model(
            kind,
            cfg.model.feature_dim,
            input_dim=input_dim,
            hidden=cfg.model.hidden,
            image_size=image_size,
            seed=derive_seed(cfg.seed, 23, i),
        )
        for i in range(len(model_names(cfg)))
    ]


def load_pretrained(path: Path, cfg: ExperimentConfig) -> list:
    models = load_models(path)
    names = model_names(cfg)
    if all(n in models for n in names):
        return [models[n] for n in names]
    if cfg.composition == "mmt" and "model" in models:
        raise DataError(f"{path} holds one model; the mmt composition needs model_1 and model_2")
    if "model" in models:
        return [models["model"]]
    raise DataError(f"{path} holds no usable model (found {sorted(models)})")


def code_fingerprint() -> str:
    """Hash of the package sources, so a run directory records the code that produced it."""
    h = hashlib.sha256()
    root = Path(__file__).parent
    for path in sorted(root.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def resolve_run_dir(run_dir: Optional[str], command: str) -> Path:
    if run_dir:
        return Path(run_dir)
    root = Path(os.environ.get(RUN_ROOT_ENV, "runs"))
    stamp = time.strftime("%Y%m%d-%H%M%S")
    path = root / f"{command}-{stamp}"
    n = 1
    while path.exists():
        path = root / f"{command}-{stamp}-{n}"
        n += 1
    return path


def init_run_dir(path: Path, cfg: ExperimentConfig, command: str) -> Path:
    """Create a self-describing run directory with a config snapshot and code fingerprint."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / "config.toml").write_text(dumps(cfg))
    (path / "fingerprint.json").write_text(
        json.dumps({"version": __version__, "code": code_fingerprint(), "command": command}, indent=2) + "\n"
    )
    return path


def read_reports(path: Path) -> list:
    path = Path(path)
    if path.is_dir():
        path = path / "reports.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"no epoch reports at {path}")
    with open(path) as fh:
        return [EpochReport.from_dict(json.loads(line)) for line in fh if line.strip()]
