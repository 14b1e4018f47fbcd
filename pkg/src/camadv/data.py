"""Dataset model, directory ingestion and the synthetic multi-camera generator."""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image

ROLES = ("source_train", "target_train", "gallery", "query")
IMAGE_EXTENSIONS = (".jpg", ".jpeg", ".png", ".bmp")


class DataError(ValueError):
    """Raised for malformed dataset directories, files or splits."""


@dataclass(frozen=True)
class Sample:
    """One detection: an image (H x W x C in [0, 1]) or a raw feature vector.

    Image samples loaded from disk keep ``payload=None`` and a ``path``; the
    pixels are read on demand by :meth:`DatasetSplit.stack`.
    """

    camera: int
    source_index: int
    payload: Optional[np.ndarray] = None
    person_id: Optional[int] = None
    path: Optional[str] = None
    distractor: bool = False

    @property
    def kind(self) -> str:
        if self.payload is None:
            return "image"
        return "feature" if self.payload.ndim == 1 else "image"


class SealedIds:
    """Ground-truth identities withheld from training code.

    The ids are only read back through :func:`camadv.evaluation.unseal`.
    """

    __slots__ = ("_ids",)

    def __init__(self, ids: Iterable[Optional[int]]):
        self._ids = tuple(ids)

    def __len__(self) -> int:
        return len(self._ids)

    def __repr__(self) -> str:
        return f"SealedIds(<{len(self._ids)} hidden>)"

    def __eq__(self, other: object) -> bool:
        return isinstance(other, SealedIds) and self._ids == other._ids

    def __hash__(self) -> int:
        return hash(self._ids)


@dataclass(frozen=True)
class DatasetSplit:
    samples: tuple
    role: str
    num_cameras: int
    num_identities: Optional[int] = None
    image_size: Optional[tuple] = None
    diagnostics: Optional[SealedIds] = field(default=None, compare=True)

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        if self.role not in ROLES:
            raise DataError(f"unknown split role {self.role!r}")
        if self.num_cameras < 1:
            raise DataError("a split needs at least one camera")
        kinds = {s.kind for s in self.samples}
        if len(kinds) > 1:
            raise DataError(f"mixed payload kinds in one split: {sorted(kinds)}")
        for s in self.samples:
            if not 0 <= s.camera < self.num_cameras:
                raise DataError(
                    f"sample {s.source_index}: camera {s.camera} outside [0, {self.num_cameras})"
                )
            if s.person_id is not None and s.person_id < 0:
                raise DataError(f"sample {s.source_index}: negative person id")
            needs_id = self.role in ("source_train", "gallery", "query") and not s.distractor
            if needs_id and s.person_id is None:
                raise DataError(f"sample {s.source_index}: {self.role} samples must carry a person id")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def payload_kind(self) -> Optional[str]:
        return self.samples[0].kind if self.samples else None

    @property
    def cameras(self) -> np.ndarray:
        return np.array([s.camera for s in self.samples], dtype=np.int64)

    @property
    def person_ids(self) -> list:
        return [s.person_id for s in self.samples]

    @property
    def distractor_mask(self) -> np.ndarray:
        return np.array([s.distractor for s in self.samples], dtype=bool)

    def stack(self, indices: Optional[Sequence[int]] = None) -> np.ndarray:
        """Return the payloads of ``indices`` (default: all) as one float32 array."""
        if indices is None:
            indices = range(len(self.samples))
        arrays = [_payload_array(self.samples[i], self.image_size) for i in indices]
        if not arrays:
            return np.zeros((0,), dtype=np.float32)
        return np.stack(arrays).astype(np.float32, copy=False)


def _payload_array(sample: Sample, image_size: Optional[tuple]) -> np.ndarray:
    if sample.payload is not None:
        return sample.payload
    if sample.path is None:
        raise DataError(f"sample {sample.source_index} has neither payload nor path")
    return load_image(sample.path, image_size)


def load_image(path: str | Path, image_size: Optional[tuple] = None) -> np.ndarray:
    with Image.open(path) as img:
        img = img.convert("RGB")
        if image_size is not None:
            height, width = image_size
            img = img.resize((width, height), Image.BILINEAR)
        return np.asarray(img, dtype=np.float32) / 255.0


@dataclass(frozen=True)
class FilenameLayout:
    """How person id and camera are encoded in image filenames.

    The default matches the Market-1501 / DukeMTMC naming
    (``0002_c1s1_000451_03.jpg``): ids listed in ``distractor_ids`` are
    flagged as distractors and never match a query.
    """

    pattern: str = r"^(?P<pid>-?\d+)_c(?P<camera>\d+)"
    camera_base: int = 1
    distractor_ids: frozenset = frozenset({0, -1})
    extensions: tuple = IMAGE_EXTENSIONS
    image_size: Optional[tuple] = (256, 128)


def load_dataset_dir(
    path: str | Path,
    layout: FilenameLayout = FilenameLayout(),
    role: str = "gallery",
    num_cameras: Optional[int] = None,
) -> DatasetSplit:
    """Index a directory of re-ID crops; pixels are loaded lazily."""
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"dataset directory not found: {root}")
    files = sorted(p for p in root.iterdir() if p.suffix.lower() in layout.extensions)
    if not files:
        raise DataError(f"empty split: no images in {root}")

    regex = re.compile(layout.pattern)
    samples = []
    for index, file in enumerate(files):
        match = regex.match(file.name)
        if match is None:
            raise DataError(f"cannot parse id/camera from filename {file.name!r}")
        pid = int(match.group("pid"))
        camera = int(match.group("camera")) - layout.camera_base
        if camera < 0:
            raise DataError(f"camera index below base in {file.name!r}")
        distractor = pid in layout.distractor_ids
        samples.append(
            Sample(
                camera=camera,
                source_index=index,
                person_id=None if distractor else pid,
                path=str(file),
                distractor=distractor,
            )
        )
    ids = {s.person_id for s in samples if s.person_id is not None}
    cams = max(s.camera for s in samples) + 1
    return DatasetSplit(
        samples=tuple(samples),
        role=role,
        num_cameras=max(cams, num_cameras or 0),
        num_identities=len(ids),
        image_size=layout.image_size,
    )


def hide_labels(split: DatasetSplit) -> DatasetSplit:
    """Strip person ids from a target training split, sealing them for diagnostics."""
    if split.role != "target_train":
        raise DataError(f"hide_labels expects a target_train split, got {split.role}")
    if split.diagnostics is not None and all(s.person_id is None for s in split.samples):
        return split
    sealed = SealedIds(s.person_id for s in split.samples)
    samples = tuple(replace(s, person_id=None) for s in split.samples)
    return replace(split, samples=samples, num_identities=None, diagnostics=sealed)


def with_role(split: DatasetSplit, role: str) -> DatasetSplit:
    return replace(split, role=role)


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the synthetic multi-camera feature dataset.

    ``correlation`` mixes each identity's camera distribution between uniform
    (0) and one-hot on a randomly assigned camera (1). Held-out query and
    gallery samples are spread uniformly over cameras.
    """

    num_identities: int = 20
    num_cameras: int = 4
    samples_per_id: int = 16
    id_dim: int = 16
    camera_shift_scale: float = 1.0
    correlation: float = 0.0
    noise_sigma: float = 0.3
    seed: int = 0
    query_per_id: int = 1
    gallery_per_id: int = 4
    num_distractors: int = 0

    def __post_init__(self):
        if self.samples_per_id < 2:
            raise DataError("samples_per_id must be >= 2 for triplet mining")
        if not 0.0 <= self.correlation <= 1.0:
            raise DataError("correlation must lie in [0, 1]")
        if self.camera_shift_scale < 0 or self.noise_sigma < 0:
            raise DataError("camera_shift_scale and noise_sigma must be non-negative")
        if self.num_identities < 1 or self.num_cameras < 1 or self.id_dim < 1:
            raise DataError("num_identities, num_cameras and id_dim must be positive")
        if self.query_per_id < 0 or self.gallery_per_id < 0 or self.num_distractors < 0:
            raise DataError("held-out counts must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def camera_distributions(spec: SyntheticSpec, assigned: np.ndarray) -> np.ndarray:
    uniform = np.full((len(assigned), spec.num_cameras), 1.0 / spec.num_cameras)
    onehot = np.eye(spec.num_cameras)[assigned]
    return (1.0 - spec.correlation) * uniform + spec.correlation * onehot


def generate_synthetic(spec: SyntheticSpec) -> tuple:
    """Generate ``(target_train, gallery, query)`` feature splits.

    Every random draw has a fixed shape independent of the scale parameters,
    so changing ``camera_shift_scale`` or ``noise_sigma`` under a fixed seed
    rescales the same underlying draws.
    """
    rng = np.random.default_rng(spec.seed)
    m, k, dim = spec.num_identities, spec.num_cameras, spec.id_dim

    codes = rng.normal(size=(m, dim))
    shift_dirs = rng.normal(size=(k, dim)) / math.sqrt(dim)
    assigned = rng.integers(k, size=m)
    probs = camera_distributions(spec, assigned)

    n_train, n_query, n_gallery = spec.samples_per_id, spec.query_per_id, spec.gallery_per_id
    uniforms = rng.random(size=(m, n_train))
    heldout_cams = rng.integers(k, size=(m, n_query + n_gallery))
    noise = rng.normal(size=(m, n_train + n_query + n_gallery, dim))
    distractor_codes = rng.normal(size=(spec.num_distractors, dim))
    distractor_cams = rng.integers(k, size=spec.num_distractors)
    distractor_noise = rng.normal(size=(spec.num_distractors, dim))

    shifts = spec.camera_shift_scale * shift_dirs
    cdf = np.cumsum(probs, axis=1)
    cdf[:, -1] = 1.0
    train_cams = np.array([np.searchsorted(cdf[i], uniforms[i], side="right") for i in range(m)])

    def feature(pid: int, cam: int, j: int) -> np.ndarray:
        vec = codes[pid] + shifts[cam] + spec.noise_sigma * noise[pid, j]
        return vec.astype(np.float32)

    train, query, gallery = [], [], []
    for pid in range(m):
        for j in range(n_train):
            cam = int(train_cams[pid, j])
            train.append(Sample(cam, len(train), feature(pid, cam, j), pid))
        for j in range(n_query + n_gallery):
            cam = int(heldout_cams[pid, j])
            vec = feature(pid, cam, n_train + j)
            if j < n_query:
                query.append(Sample(cam, len(query), vec, pid))
            else:
                gallery.append(Sample(cam, len(gallery), vec, pid))
    for j in range(spec.num_distractors):
        cam = int(distractor_cams[j])
        vec = distractor_codes[j] + shifts[cam] + spec.noise_sigma * distractor_noise[j]
        gallery.append(Sample(cam, len(gallery), vec.astype(np.float32), None, distractor=True))

    def split(samples, role):
        return DatasetSplit(tuple(samples), role, num_cameras=k, num_identities=m)

    return split(train, "target_train"), split(gallery, "gallery"), split(query, "query")


def save_split(split: DatasetSplit, path: str | Path) -> None:
    """Write a feature-payload split to ``.npz`` (ids sealed in diagnostics are kept)."""
    if split.payload_kind not in (None, "feature"):
        raise DataError("only feature-payload splits can be saved as npz")
    ids = split.person_ids
    if split.diagnostics is not None:
        ids = list(split.diagnostics._ids)
    np.savez(
        path,
        features=split.stack() if len(split) else np.zeros((0, 0), np.float32),
        cameras=split.cameras,
        person_ids=np.array([-1 if i is None else i for i in ids], dtype=np.int64),
        distractor=split.distractor_mask,
        hidden=np.array(split.diagnostics is not None),
        role=np.array(split.role),
        num_cameras=np.array(split.num_cameras),
    )


def load_split(path: str | Path, role: Optional[str] = None) -> DatasetSplit:
    """Load a split saved by :func:`save_split`."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"split file not found: {path}")
    with np.load(path) as z:
        features = z["features"]
        cameras = z["cameras"]
        pids = z["person_ids"]
        distractor = z["distractor"]
        hidden = bool(z["hidden"])
        stored_role = str(z["role"])
        k = int(z["num_cameras"])
    samples = tuple(
        Sample(
            int(cameras[i]),
            i,
            features[i],
            None if pids[i] < 0 else int(pids[i]),
            distractor=bool(distractor[i]),
        )
        for i in range(len(cameras))
    )
    ids = {int(p) for p in pids if p >= 0}
    split = DatasetSplit(samples, role or stored_role, k, len(ids) or None)
    if hidden:
        split = hide_labels(replace(split, role="target_train"))
    return split
