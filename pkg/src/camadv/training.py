"""Source pre-training and the cluster / adversarial fine-tune alternation on the target."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch

from .adversary import Discriminator, GradientRouting, camera_probe_accuracy
from .config import ExperimentConfig, dumps
from .data import DatasetSplit, hide_labels
from .embedding import (
    BRANCHES,
    EmbeddingModel,
    ModelPair,
    eval_features,
    read_checkpoint,
    save_checkpoint,
    seeded,
    to_input,
)
from .evaluation import (
    DiagnosticSeries,
    RetrievalResult,
    cluster_quality,
    mutual_information,
    retrieve_and_score,
    unseal,
)
from .objectives import Batch, id_loss, mmt_composition, single_composition, ssg_composition
from .pseudo_labels import OUTLIER, ClusteringFailed, cluster_epoch, lost_ids

logger = logging.getLogger(__name__)


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


class PKSampler:
    """Draws P identities and K instances of each (with replacement when a cluster is smaller than K)."""

    def __init__(self, labels: np.ndarray, p: int, k: int, rng: np.random.Generator):
        labels = np.asarray(labels)
        self.ids = sorted(int(x) for x in np.unique(labels) if x != OUTLIER)
        if len(self.ids) < 2:
            raise ValueError("P x K sampling needs at least two identities")
        self.members = {i: np.flatnonzero(labels == i) for i in self.ids}
        self.p, self.k, self.rng = p, k, rng

    def sample(self) -> np.ndarray:
        chosen = self.rng.choice(len(self.ids), size=min(self.p, len(self.ids)), replace=False)
        out = []
        for c in chosen:
            members = self.members[self.ids[c]]
            out.append(self.rng.choice(members, size=self.k, replace=len(members) < self.k))
        return np.concatenate(out)


class InputSource:
    """Model inputs for a split; feature payloads are materialised once."""

    def __init__(self, split: DatasetSplit, dtype=torch.float32):
        self.split = split
        self.kind = split.payload_kind
        self.dtype = dtype
        self._all = to_input(split.stack(), self.kind, dtype) if self.kind == "feature" else None

    def __len__(self) -> int:
        return len(self.split)

    def get(self, indices) -> torch.Tensor:
        if self._all is not None:
            return self._all[torch.as_tensor(np.asarray(indices), dtype=torch.long)]
        return to_input(self.split.stack(list(indices)), self.kind, self.dtype)

    def chunks(self, size: int = 256):
        for start in range(0, len(self), size):
            yield self.get(range(start, min(start + size, len(self))))


def make_optimizer(params, cfg, epoch: int = 0, lr: Optional[float] = None):
    lr = cfg.lr if lr is None else lr
    if cfg.schedule == "step":
        lr = lr * cfg.gamma ** (epoch // cfg.step_size)
    params = [p for p in params if p.requires_grad]
    if cfg.name == "adam":
        return torch.optim.Adam(params, lr=lr, weight_decay=cfg.weight_decay)
    return torch.optim.SGD(params, lr=lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


@dataclass
class PretrainResult:
    model: EmbeddingModel
    history: list
    label_map: dict


def _source_labels(source: DatasetSplit):
    ids = source.person_ids
    if any(i is None for i in ids):
        raise ValueError("source pre-training needs a person id on every sample")
    label_map = {pid: i for i, pid in enumerate(sorted(set(ids)))}
    if len(label_map) < 2:
        raise ValueError("source pre-training needs at least two identities")
    return np.array([label_map[i] for i in ids]), label_map


def pretrain_source(
    model: EmbeddingModel,
    source: DatasetSplit,
    config: ExperimentConfig,
    *,
    steps: Optional[int] = None,
    seed: Optional[int] = None,
    checkpoint_dir: Optional[Path] = None,
    resume: Optional[Path] = None,
) -> PretrainResult:
    """Train the extractor and identity classifier on the labelled source split.

    The loss is cross-entropy plus ``config.lam`` times batch-hard triplet.
    With ``checkpoint_dir`` set, a resumable checkpoint is written every
    ``config.pretrain.checkpoint_every`` steps and at the end.
    """
    labels, label_map = _source_labels(source)
    steps = config.pretrain.steps if steps is None else steps
    seed = config.seed if seed is None else seed
    num_ids = len(label_map)
    dtype = next(model.parameters()).dtype
    if model.id_classifier is None or model.id_classifier.out_features != num_ids:
        with seeded(derive_seed(seed, 7)):
            model.id_classifier = torch.nn.Linear(model.feature_dim, num_ids).to(dtype)
        model.arch["num_ids"] = num_ids

    params = [p for name, p in model.named_parameters() if not name.startswith("pseudo_id_classifier")]
    optimizer = torch.optim.Adam(params, lr=config.pretrain.lr)
    rng = np.random.default_rng(derive_seed(seed, 11))
    sampler = PKSampler(labels, config.sampler.p, config.sampler.k, rng)
    inputs = InputSource(source, dtype)
    history: list = []
    start = 0
    if resume is not None:
        payload = read_checkpoint(resume)
        model.load_state_dict(payload["models"]["model"]["state"])
        extra = payload["extra"]
        optimizer.load_state_dict(extra["optimizer"])
        rng.bit_generator.state = extra["rng"]
        start = extra["step"]
        history = list(extra["history"])

    def checkpoint(step: int, name: str):
        if checkpoint_dir is None:
            return
        save_checkpoint(
            Path(checkpoint_dir) / name,
            {"model": model},
            config_text=dumps(config),
            extra={
                "optimizer": optimizer.state_dict(),
                "rng": rng.bit_generator.state,
                "step": step,
                "history": history,
                "label_map": label_map,
            },
        )

    labels_t = torch.as_tensor(labels)
    model.train()
    every = config.pretrain.checkpoint_every
    for step in range(start, steps):
        idx = sampler.sample()
        out = model(inputs.get(idx))
        feats = out["F"]
        loss = id_loss(model.classify(feats, head="id"), feats, labels_t[idx], config.lam, config.margin)
        optimizer.zero_grad(set_to_none=True)
        loss.value.backward()
        optimizer.step()
        history.append({"step": step, "loss": float(loss.value.detach()), **loss.breakdown()})
        if every and (step + 1) % every == 0 and step + 1 < steps:
            checkpoint(step + 1, f"pretrain_step{step + 1:06d}.pt")
    checkpoint(steps, "pretrain.pt")
    return PretrainResult(model, history, label_map)


@dataclass
class EpochReport:
    epoch: int
    losses: dict
    pseudo: dict
    diagnostics: dict
    wall_time: float
    skipped: bool = False
    iterations: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def scalars(self) -> dict:
        """Logged scalars excluding wall-clock time (the determinism contract)."""
        d = self.to_dict()
        d.pop("wall_time")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EpochReport":
        return cls(**d)


@dataclass
class AdaptResult:
    models: list
    reports: list
    series: DiagnosticSeries
    final: dict = field(default_factory=dict)

    @property
    def model(self) -> Union[EmbeddingModel, ModelPair]:
        return self.models[0] if len(self.models) == 1 else ModelPair(*self.models)


def _as_model_list(models) -> list:
    if isinstance(models, EmbeddingModel):
        return [models]
    if isinstance(models, ModelPair):
        return [models.model_1, models.model_2]
    return list(models)


@torch.no_grad()
def extract_features(models: Sequence[EmbeddingModel], inputs: InputSource) -> dict:
    """Eval-mode F/U/L features for every sample; averaged over the models of a pair."""
    per_model = []
    for m in models:
        was = m.training
        m.eval()
        chunks = defaultdict(list)
        for x in inputs.chunks():
            out = m(x)
            for b in BRANCHES:
                chunks[b].append(out[b].double().numpy())
        m.train(was)
        per_model.append({b: np.concatenate(chunks[b]) if chunks[b] else np.zeros((0, m.feature_dim)) for b in BRANCHES})
    return {b: np.mean([pm[b] for pm in per_model], axis=0) for b in BRANCHES}


def cluster_features(features: dict, config: ExperimentConfig, epoch: int, branches: Sequence[str]) -> dict:
    c = config.cluster
    return {
        b: cluster_epoch(
            features[b],
            c.algorithm,
            eps=c.eps,
            eps_percentile=c.eps_percentile,
            min_samples=c.min_samples,
            k=c.kmeans_k,
            subsample=c.subsample,
            eps_growth=c.eps_growth,
            max_retries=c.max_retries,
            seed=derive_seed(config.seed, epoch, 3),
            epoch=epoch,
            branch=b,
        )
        for b in branches
    }


def clustering_diagnostics(
    labelings: dict,
    features: dict,
    cameras: np.ndarray,
    true_ids: Optional[list],
    config: ExperimentConfig,
    epoch: int,
    num_cameras: int,
) -> dict:
    diag: dict = {}
    for b, lab in labelings.items():
        suffix = "" if b == "F" else f"_{b}"
        inlier = ~lab.outlier_mask
        diag[f"mutual_information_nats{suffix}"] = (
            mutual_information(lab.assignments, cameras) if inlier.any() else 0.0
        )
        diag[f"cluster_count{suffix}"] = lab.num_clusters
        diag[f"num_outliers{suffix}"] = int(lab.outlier_mask.sum())
        if true_ids is not None:
            diag[f"lost_ids{suffix}"] = lost_ids(lab, true_ids)
            if inlier.any():
                q = cluster_quality(lab, true_ids)
                diag[f"nmi{suffix}"] = q["nmi"]
                diag[f"purity{suffix}"] = q["purity"]
    if true_ids is not None:
        diag["gt_mutual_information"] = mutual_information(true_ids, cameras)
    if config.probe_steps > 0:
        diag["camera_accuracy_probe"] = camera_probe_accuracy(
            features["F"], cameras, num_cameras, steps=config.probe_steps, seed=derive_seed(config.seed, epoch, 5)
        )
    return diag


def build_discriminators(config: ExperimentConfig, num_cameras: int, feature_dim: int, dtype=torch.float32):
    """Discriminators for the configured composition (none in baseline mode)."""
    if config.mode == "baseline":
        return None
    names = {"single": ["F"], "ssg": list(BRANCHES), "mmt": ["1", "2"]}[config.composition]
    discs = {
        name: Discriminator(
            feature_dim,
            num_cameras,
            conditional=config.conditional,
            hidden=config.disc.hidden,
            merge=config.disc.merge,
            seed=derive_seed(config.seed, 17, i),
        ).to(dtype)
        for i, name in enumerate(names)
    }
    return discs


def _compose_fn(config: ExperimentConfig, models, discs, batch, outputs):
    mu, lam, margin = config.mu, config.lam, config.margin
    if config.composition == "single":
        disc = discs["F"] if discs else None
        return lambda hook: single_composition(
            models[0], disc, batch, mu, lam=lam, margin=margin, outputs=outputs[0], hook=hook
        )
    if config.composition == "ssg":
        return lambda hook: ssg_composition(models[0], discs, batch, mu, margin=margin, outputs=outputs[0], hook=hook)
    pair = ModelPair(*models)
    dlist = [discs["1"], discs["2"]] if discs else None
    return lambda hook: mmt_composition(pair, dlist, batch, mu, lam=lam, margin=margin, outputs=outputs, hook=hook)


def adapt_target(
    models,
    target: DatasetSplit,
    config: ExperimentConfig,
    *,
    run_dir: Optional[Path] = None,
    on_epoch_end: Optional[Callable[[int, list], None]] = None,
) -> AdaptResult:
    """Alternate target clustering and (conditional) adversarial fine-tuning.

    Each epoch: extract features in eval mode, cluster them, reallocate the
    pseudo-ID heads, then fine-tune on P x K batches of non-outlier
    samples. Discriminators live only for the duration of this call.
    """
    models = _as_model_list(models)
    expected = 2 if config.composition == "mmt" else 1
    if len(models) != expected:
        raise ValueError(f"composition {config.composition} needs {expected} model(s), got {len(models)}")
    if config.composition == "mmt":
        ModelPair(*models)
    if target.role != "target_train":
        raise ValueError("adapt_target expects a target_train split")
    if target.diagnostics is None and any(i is not None for i in target.person_ids):
        target = hide_labels(target)
    true_ids = unseal(target.diagnostics) if target.diagnostics is not None else None
    if true_ids is not None and all(i is None for i in true_ids):
        true_ids = None

    dtype = next(models[0].parameters()).dtype
    inputs = InputSource(target, dtype)
    cameras = target.cameras
    cameras_t = torch.as_tensor(cameras)
    feature_dim = models[0].feature_dim
    branches = list(BRANCHES) if config.composition == "ssg" else ["F"]

    discs = build_discriminators(config, target.num_cameras, feature_dim, dtype)
    disc_list = list(discs.values()) if discs else []
    disc_opt = (
        torch.optim.Adam([p for d in disc_list for p in d.parameters()], lr=config.disc.lr) if discs else None
    )
    routing = GradientRouting(config.disc.routing, config.mu)
    sampler_rng = np.random.default_rng(derive_seed(config.seed, 13))

    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "reports.jsonl").write_text("")

    series = DiagnosticSeries()
    reports: list = []
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        features = extract_features(models, inputs)
        try:
            labelings = cluster_features(features, config, epoch, branches)
        except ClusteringFailed as exc:
            logger.error("skipping fine-tuning: %s", exc)
            report = EpochReport(epoch, {}, {}, {"epoch": epoch}, time.perf_counter() - t0, skipped=True)
            _emit(report, reports, series, run_dir)
            continue

        diag = clustering_diagnostics(labelings, features, cameras, true_ids, config, epoch, target.num_cameras)
        diag["epoch"] = epoch
        pseudo = {b: lab.summary() for b, lab in labelings.items()}
        if run_dir is not None:
            for b, lab in labelings.items():
                path = run_dir / "labelings" / f"epoch{epoch:03d}_{b}.json"
                path.parent.mkdir(exist_ok=True)
                path.write_text(json.dumps(lab.to_dict()))

        main = labelings["F"]
        if main.num_clusters < 2:
            logger.error("epoch %d: %d cluster(s); skipping fine-tuning", epoch, main.num_clusters)
            report = EpochReport(epoch, {}, pseudo, diag, time.perf_counter() - t0, skipped=True)
            _emit(report, reports, series, run_dir)
            continue

        if config.composition != "ssg":
            for i, m in enumerate(models):
                m.reset_pseudo_head(main.num_clusters, seed=derive_seed(config.seed, epoch, 19, i))
        params = [
            p for m in models for name, p in m.named_parameters() if not name.startswith("id_classifier")
        ]
        optimizer = make_optimizer(params, config.optim, epoch)

        labels_t = {b: torch.as_tensor(lab.assignments) for b, lab in labelings.items()}
        centroids_t = {b: torch.as_tensor(lab.sample_centroids(), dtype=dtype) for b, lab in labelings.items()}
        sampler = PKSampler(main.assignments, config.sampler.p, config.sampler.k, sampler_rng)
        n_inliers = int((~main.outlier_mask).sum())
        iterations = config.iterations_per_epoch or max(1, math.ceil(n_inliers / config.batch_size))

        for m in models:
            m.train()
        for d in disc_list:
            d.train()
        sums: dict = defaultdict(float)
        for _ in range(iterations):
            idx = torch.as_tensor(sampler.sample())
            batch = Batch(
                inputs.get(idx),
                cameras_t[idx],
                {b: t[idx] for b, t in labels_t.items()},
                {b: t[idx] for b, t in centroids_t.items()},
            )
            outputs = [m(batch.inputs) for m in models]
            compose = _compose_fn(config, models, discs, batch, outputs)
            if discs is None:
                obj = compose(None)
                optimizer.zero_grad(set_to_none=True)
                obj.generator.backward()
                optimizer.step()
            else:
                obj = routing.step(compose, optimizer, disc_opt, disc_list)
            for k, v in obj.breakdown().items():
                sums[k] += v
        losses = {k: v / iterations for k, v in sums.items()}
        report = EpochReport(epoch, losses, pseudo, diag, time.perf_counter() - t0, iterations=iterations)
        _emit(report, reports, series, run_dir)
        if on_epoch_end is not None:
            on_epoch_end(epoch, models)

    final_features = extract_features(models, inputs)
    final: dict = {"epoch": config.epochs}
    try:
        labelings = cluster_features(final_features, config, config.epochs, branches)
        final.update(
            clustering_diagnostics(
                labelings, final_features, cameras, true_ids, config, config.epochs, target.num_cameras
            )
        )
    except ClusteringFailed as exc:
        logger.error("final clustering failed: %s", exc)
    if run_dir is not None:
        (run_dir / "final_diagnostics.json").write_text(json.dumps(final, indent=2, sort_keys=True))
        np.savez(run_dir / "target_features.npz", features=final_features["F"], cameras=cameras)
    return AdaptResult(models, reports, series, final)


def _emit(report: EpochReport, reports: list, series: DiagnosticSeries, run_dir: Optional[Path]) -> None:
    reports.append(report)
    series.append({"epoch": report.epoch, **{k: v for k, v in report.diagnostics.items() if k != "epoch"}})
    level = logging.WARNING if report.skipped else logging.INFO
    logger.log(
        level,
        "epoch %d: clusters=%s mi=%.4f losses=%s",
        report.epoch,
        report.diagnostics.get("cluster_count"),
        report.diagnostics.get("mutual_information_nats", float("nan")),
        {k: round(v, 4) for k, v in report.losses.items()},
    )
    if run_dir is not None:
        with open(run_dir / "reports.jsonl", "a") as fh:
            fh.write(json.dumps(report.to_dict(), sort_keys=True) + "\n")


def eval_mode_for(config: ExperimentConfig) -> str:
    return "ssg" if config.composition == "ssg" else "mmt"


def evaluate_models(models, gallery: DatasetSplit, query: DatasetSplit, mode: str = "mmt") -> RetrievalResult:
    models = _as_model_list(models)
    model = models[0] if len(models) == 1 else ModelPair(*models)
    ref = models[0]
    dtype = next(ref.parameters()).dtype
    g = eval_features(model, InputSource(gallery, dtype).get(range(len(gallery))), mode)
    q = eval_features(model, InputSource(query, dtype).get(range(len(query))), mode)
    return retrieve_and_score(query, gallery, q, g)


def mu_sweep(
    config: ExperimentConfig,
    mus: Sequence[float],
    pretrained,
    target: DatasetSplit,
    gallery: DatasetSplit,
    query: DatasetSplit,
    *,
    run_dir: Optional[Path] = None,
) -> list:
    """Adapt from one shared pre-trained checkpoint per ``mu`` and score each result."""
    rows = []
    base = _as_model_list(pretrained)
    for mu in mus:
        cfg = replace(config, mu=float(mu))
        sub = None if run_dir is None else Path(run_dir) / f"mu_{mu:g}"
        result = adapt_target([copy.deepcopy(m) for m in base], target, cfg, run_dir=sub)
        scores = evaluate_models(result.models, gallery, query, eval_mode_for(cfg))
        rows.append({"mu": float(mu), "rank1": scores.rank1, "mAP": scores.mAP})
    if run_dir is not None:
        write_table(Path(run_dir) / "mu_sweep.csv", rows)
    return rows


def write_table(path: Path, rows: Sequence[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["mu", "rank1", "mAP"])
        writer.writeheader()
        writer.writerows(rows)
