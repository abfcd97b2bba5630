"""Domain construction: IDX (MNIST) ingestion, rotated-MNIST domains, a
download-free synthetic generator, heterogeneous label-space splits and
mini-batch sampling.

Images are float64 arrays of shape (n, h, w) with values in [0, 1]. Labels are
indices into the domain's ``label_space`` (the original class ids).
"""

import gzip
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import (
    BadMagic,
    BatchTooLarge,
    CountMismatch,
    DatasetNotFound,
    InsufficientSamples,
    OverlappingLabelSpaces,
    TruncatedFile,
)

logger = logging.getLogger(__name__)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

MNIST_FILES = {
    "images": ("train-images-idx3-ubyte", "train-images.idx3-ubyte"),
    "labels": ("train-labels-idx1-ubyte", "train-labels.idx1-ubyte"),
}


# ---------------------------------------------------------------------------
# IDX files
# ---------------------------------------------------------------------------


def _read_bytes(path: Path) -> bytes:
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_idx(
    raw: bytes, expected_magic: int, n_dims: int, path: Path
) -> np.ndarray:
    header_size = 4 + 4 * n_dims
    if len(raw) < header_size:
        raise TruncatedFile(
            f"{path}: header needs {header_size} bytes, file has {len(raw)}"
        )
    (magic,) = struct.unpack(">i", raw[:4])
    if magic != expected_magic:
        raise BadMagic(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    dims = struct.unpack(f">{n_dims}i", raw[4:header_size])
    payload = int(np.prod(dims))
    if len(raw) - header_size < payload:
        raise TruncatedFile(
            f"{path}: header announces {payload} bytes of data, "
            f"found {len(raw) - header_size}"
        )
    data = np.frombuffer(raw, dtype=np.uint8, count=payload, offset=header_size)
    return data.reshape(dims)


def load_idx(images_path, labels_path) -> Tuple[np.ndarray, np.ndarray]:
    """Parse an IDX image/label pair. Pixels are scaled to [0, 1]."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    images = _parse_idx(_read_bytes(images_path), IMAGE_MAGIC, 3, images_path)
    labels = _parse_idx(_read_bytes(labels_path), LABEL_MAGIC, 1, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatch(
            f"{images.shape[0]} images in {images_path.name} but "
            f"{labels.shape[0]} labels in {labels_path.name}"
        )
    logger.info(
        f"Loaded {images.shape[0]} images of {images.shape[1:]} from {images_path}"
    )
    return images.astype(np.float64) / 255.0, labels.astype(np.int64)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (magic 0x0803 for 3-D, 0x0801 for 1-D)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = {3: IMAGE_MAGIC, 1: LABEL_MAGIC}[array.ndim]
    header = struct.pack(f">i{array.ndim}i", magic, *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def _find(root: Path, names: Sequence[str]) -> Path:
    for name in names:
        for candidate in (root / name, root / f"{name}.gz"):
            if candidate.exists():
                return candidate
    raise DatasetNotFound(f"none of {list(names)} (or .gz) found under {root}")


def load_mnist(root) -> Tuple[np.ndarray, np.ndarray]:
    root = Path(root)
    return load_idx(
        _find(root, MNIST_FILES["images"]), _find(root, MNIST_FILES["labels"])
    )


# ---------------------------------------------------------------------------
# Domains
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class Domain:
    """One domain D_i = {X, Y}; ``labels`` index into ``label_space``."""

    id: int
    name: str
    images: np.ndarray
    labels: np.ndarray
    label_space: Tuple[int, ...]
    split: str = "all"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.label_space = tuple(int(c) for c in self.label_space)
        if self.images.ndim != 3:
            raise ValueError(
                f"{self.name}: images must be (n, h, w), got {self.images.shape}"
            )
        if self.images.shape[0] != self.labels.shape[0]:
            raise CountMismatch(
                f"{self.name}: {self.images.shape[0]} images, "
                f"{self.labels.shape[0]} labels"
            )
        if self.labels.size and (
            self.labels.min() < 0 or self.labels.max() >= len(self.label_space)
        ):
            raise ValueError(f"{self.name}: labels outside its label space")
        if not np.all(np.isfinite(self.images)):
            raise ValueError(f"{self.name}: images contain non-finite values")
        self.images.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def n_classes(self) -> int:
        return len(self.label_space)

    def subset(self, index: np.ndarray, split: Optional[str] = None) -> "Domain":
        index = np.asarray(index, dtype=np.int64)
        return Domain(
            self.id,
            self.name,
            self.images[index],
            self.labels[index],
            self.label_space,
            split or self.split,
        )

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)


@dataclass(eq=False)
class DomainSet:
    """Source domains plus the held-out target with its train/test splits."""

    sources: List[Domain]
    target_train: Domain
    target_test: Domain
    heterogeneous: bool = False
    source_ids: Tuple[int, ...] = field(init=False)

    def __post_init__(self):
        spaces = {d.label_space for d in self.sources}
        target_space = set(self.target_test.label_space)
        if self.heterogeneous:
            for domain in self.sources:
                shared = sorted(target_space & set(domain.label_space))
                if shared:
                    raise OverlappingLabelSpaces(
                        f"source {domain.name} shares classes {shared} with the target"
                    )
        elif len(spaces | {self.target_test.label_space}) != 1:
            raise ValueError("homogeneous domain set with differing label spaces")
        self.source_ids = tuple(d.id for d in self.sources)

    @property
    def target(self) -> Domain:
        return self.target_test

    @property
    def target_all(self) -> Domain:
        """The target domain with its train and test splits joined again."""
        train, test = self.target_train, self.target_test
        return Domain(
            test.id,
            test.name,
            np.concatenate([train.images, test.images]),
            np.concatenate([train.labels, test.labels]),
            test.label_space,
        )

    def source(self, domain_id: int) -> Domain:
        for domain in self.sources:
            if domain.id == domain_id:
                return domain
        raise KeyError(domain_id)


def stratified_split(
    domain: Domain, test_fraction: float, rng: np.random.Generator
) -> Tuple[Domain, Domain]:
    """Per-class shuffle; the first ``round(n_c * test_fraction)`` go to test."""
    train_index, test_index = [], []
    for label in range(domain.n_classes):
        members = rng.permutation(np.flatnonzero(domain.labels == label))
        n_test = int(round(len(members) * test_fraction))
        test_index.append(members[:n_test])
        train_index.append(members[n_test:])
    train = np.sort(np.concatenate(train_index)) if train_index else np.zeros(0, int)
    test = np.sort(np.concatenate(test_index)) if test_index else np.zeros(0, int)
    return domain.subset(train, "train"), domain.subset(test, "test")


def rotate_images(images: np.ndarray, angle: float) -> np.ndarray:
    """Rotate clockwise by ``angle`` degrees about the image centre.

    Bilinear interpolation, zero fill; angle 0 returns an exact copy.
    """
    images = np.asarray(images, dtype=np.float64)
    if angle == 0:
        return images.copy()
    rotated = ndimage.rotate(
        images, -angle, axes=(2, 1), reshape=False, order=1, mode="constant", cval=0.0
    )
    return np.clip(rotated, 0.0, 1.0)


def make_rotated_domains(
    images: np.ndarray,
    labels: np.ndarray,
    per_class: int,
    angles: Sequence[float],
    rng: np.random.Generator,
    n_classes: int = 10,
) -> List[Domain]:
    """Sample ``per_class`` images of each class as M0, then rotate M0 per angle."""
    labels = np.asarray(labels, dtype=np.int64)
    chosen = []
    for label in range(n_classes):
        members = np.flatnonzero(labels == label)
        if len(members) < per_class:
            raise InsufficientSamples(
                f"class {label} has {len(members)} images, {per_class} requested"
            )
        chosen.append(np.sort(rng.choice(members, per_class, replace=False)))
    index = np.concatenate(chosen)
    base_images = np.asarray(images, dtype=np.float64)[index]
    base_labels = labels[index]

    domains = []
    for domain_id, angle in enumerate(angles):
        domains.append(
            Domain(
                domain_id,
                f"M{int(angle) if float(angle).is_integer() else angle}",
                rotate_images(base_images, angle),
                base_labels,
                tuple(range(n_classes)),
            )
        )
    logger.info(
        f"Built {len(domains)} rotated domains of {len(index)} images "
        f"({', '.join(d.name for d in domains)})"
    )
    return domains


def synth_domains(
    n_domains: int,
    per_class: int,
    n_classes: int,
    shift: float,
    rng: np.random.Generator,
    image_size: int = 16,
    noise: float = 0.1,
) -> List[Domain]:
    """Class-conditional Gaussian-blob images; domain d rotates every blob
    pattern by ``shift * d`` degrees, so shift 0 gives identically
    distributed domains."""
    if n_domains < 2:
        raise ValueError(f"need at least two domains, got {n_domains}")
    grid = np.linspace(-1.0, 1.0, image_size)
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    labels = np.repeat(np.arange(n_classes), per_class)

    domains = []
    for d in range(n_domains):
        turn = np.deg2rad(shift * d)
        images = np.empty((labels.size, image_size, image_size))
        for i, label in enumerate(labels):
            position = 2.0 * np.pi * label / n_classes + turn
            orientation = np.pi * label / n_classes + turn
            jitter = rng.normal(0.0, 0.05, 2)
            cy = 0.45 * np.sin(position) + jitter[0]
            cx = 0.45 * np.cos(position) + jitter[1]
            dy, dx = yy - cy, xx - cx
            along = dx * np.cos(orientation) + dy * np.sin(orientation)
            across = -dx * np.sin(orientation) + dy * np.cos(orientation)
            blob = np.exp(-0.5 * ((along / 0.35) ** 2 + (across / 0.12) ** 2))
            images[i] = blob + noise * rng.normal(size=blob.shape)
        images = np.clip(images, 0.0, 1.0)
        domains.append(Domain(d, f"S{d}", images, labels, tuple(range(n_classes))))
    return domains


def heterogeneous_split(
    domains: Sequence[Domain],
    source_classes: Sequence[int],
    target_classes: Sequence[int],
    rng: np.random.Generator,
    target_id: Optional[int] = None,
    test_fraction: float = 0.5,
) -> DomainSet:
    """Sources keep ``source_classes``, the target keeps ``target_classes``;
    both are relabelled to 0..C-1 so each gets its own head."""
    overlap = set(source_classes) & set(target_classes)
    if overlap:
        raise OverlappingLabelSpaces(f"classes {sorted(overlap)} on both sides")
    target_id = domains[-1].id if target_id is None else target_id

    def restrict(domain: Domain, classes: Sequence[int]) -> Domain:
        original = np.asarray(domain.label_space)[domain.labels]
        keep = np.isin(original, classes)
        relabel = {c: i for i, c in enumerate(classes)}
        return Domain(
            domain.id,
            domain.name,
            domain.images[keep],
            np.array([relabel[c] for c in original[keep]], dtype=np.int64),
            tuple(classes),
            domain.split,
        )

    sources = [restrict(d, source_classes) for d in domains if d.id != target_id]
    target = restrict(next(d for d in domains if d.id == target_id), target_classes)
    train, test = stratified_split(target, test_fraction, rng)
    return DomainSet(sources, train, test, heterogeneous=True)


def leave_one_domain_out(
    domains: Sequence[Domain], rng: np.random.Generator, test_fraction: float = 0.5
) -> Iterator[DomainSet]:
    """Yield one homogeneous DomainSet per domain, each domain the target once."""
    for target in domains:
        sources = [d for d in domains if d.id != target.id]
        train, test = stratified_split(target, test_fraction, rng)
        yield DomainSet(sources, train, test)


def holdout(
    domains: Sequence[Domain],
    target_name: str,
    rng: np.random.Generator,
    test_fraction: float = 0.5,
) -> DomainSet:
    """Homogeneous DomainSet with the domain called ``target_name`` held out."""
    for target in domains:
        if target.name == target_name:
            sources = [d for d in domains if d.id != target.id]
            train, test = stratified_split(target, test_fraction, rng)
            return DomainSet(sources, train, test)
    raise KeyError(f"no domain named {target_name!r}")


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def sample_minibatch(
    domain: Domain, size: int, rng: np.random.Generator
) -> Tuple[np.ndarray, np.ndarray]:
    """Uniform draw of ``size`` distinct examples."""
    if size > len(domain):
        raise BatchTooLarge(
            f"batch of {size} from {domain.name} with {len(domain)} items"
        )
    index = rng.choice(len(domain), size, replace=False)
    return domain.images[index], domain.labels[index]


class EpochSampler:
    """Draws batches from a shuffled epoch; reshuffles when fewer than
    ``size`` unseen examples remain, so no example repeats within an epoch."""

    def __init__(self, domain: Domain, size: int, rng: np.random.Generator):
        if size > len(domain):
            raise BatchTooLarge(
                f"batch of {size} from {domain.name} with {len(domain)} items"
            )
        self.domain = domain
        self.size = size
        self.rng = rng
        self._order = np.zeros(0, dtype=np.int64)
        self._cursor = 0
        self.epochs = 0

    def next(self) -> Tuple[np.ndarray, np.ndarray]:
        if self._cursor + self.size > len(self._order):
            self._order = self.rng.permutation(len(self.domain))
            self._cursor = 0
            self.epochs += 1
        index = self._order[self._cursor : self._cursor + self.size]
        self._cursor += self.size
        return self.domain.images[index], self.domain.labels[index]
