"""Synthetic images with known, tunable attribute correlations.

Five latent Gaussian factors are drawn through a Gaussian copula and
binarized at per-attribute quantiles.  Each factor drives a disjoint part of
the picture:

* ``blob_size``, ``elongation``, ``brightness``: a centred ellipse
* ``frame``: a 2-pixel border, drawn only when the frame label is 1
* ``texture``: frequency of a sinusoidal background grating

so a classifier that reads pixels outside its own attribute's footprint is
using a spurious feature by construction.
"""

import json
import math
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.stats import norm

from . import tensorfile
from .errors import ConfigError, TensorFileError

logger = logging.getLogger(__name__)

FRAME_FLOOR = 0.4
ATTRIBUTES = ("blob_size", "elongation", "brightness", "frame", "texture")
SPLIT_FRACTIONS = (0.70, 0.15, 0.15)
FRAME_WIDTH = 2
MANIFEST_VERSION = 1


@dataclass
class DatasetConfig:
    n_samples: int = 5000
    image_side: int = 32
    attributes: list = field(default_factory=lambda: list(ATTRIBUTES))
    correlation: Optional[list] = None
    thresholds: Optional[list] = None
    seed: int = 0
    group_pair: Optional[list] = None
    pixel_noise: float = 0.1

    def __post_init__(self):
        k = len(self.attributes)
        if self.correlation is None:
            self.correlation = np.eye(k).tolist()
        if self.thresholds is None:
            self.thresholds = [0.5] * k
        if self.group_pair is None:
            self.group_pair = list(self.attributes[:2])
        self.correlation = np.asarray(self.correlation, dtype=float).tolist()
        self.thresholds = [float(t) for t in self.thresholds]
        self.attributes = list(self.attributes)
        self.group_pair = list(self.group_pair)

    @classmethod
    def from_dict(cls, raw: dict) -> "DatasetConfig":
        """Build from JSON-style dict.

        Besides a full ``correlation`` matrix, ``correlated_pairs`` may list
        ``[name_a, name_b, rho]`` triples on top of an identity matrix.
        """
        raw = dict(raw)
        pairs = raw.pop("correlated_pairs", None)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"dataset config: unknown keys {sorted(unknown)}")
        cfg = cls(**raw)
        if pairs:
            mat = np.asarray(cfg.correlation)
            for a, b, rho in pairs:
                i, j = cfg.index(a), cfg.index(b)
                mat[i, j] = mat[j, i] = float(rho)
            cfg.correlation = mat.tolist()
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def index(self, name: str) -> int:
        try:
            return self.attributes.index(name)
        except ValueError:
            raise ConfigError(f"unknown attribute {name!r}") from None

    def validate(self) -> None:
        k = len(self.attributes)
        if k == 0 or len(set(self.attributes)) != k:
            raise ConfigError("attributes must be a non-empty list of unique names")
        for name in self.attributes:
            if name not in ATTRIBUTES:
                raise ConfigError(f"unknown attribute {name!r}; choose from {ATTRIBUTES}")
        if self.n_samples < 1:
            raise ConfigError("n_samples must be positive")
        if not 0 <= self.pixel_noise < 1:
            raise ConfigError("pixel_noise must lie in [0, 1)")
        if self.image_side < 16:
            raise ConfigError("image_side must be at least 16")
        if len(self.thresholds) != k or not all(0 < t < 1 for t in self.thresholds):
            raise ConfigError("thresholds: one value in (0, 1) per attribute")
        self.cholesky()
        if len(self.group_pair) != 2 or self.group_pair[0] == self.group_pair[1]:
            raise ConfigError("group_pair must name two distinct attributes")
        for name in self.group_pair:
            self.index(name)

    def cholesky(self) -> np.ndarray:
        k = len(self.attributes)
        mat = np.asarray(self.correlation, dtype=float)
        if mat.shape != (k, k):
            raise ConfigError(f"correlation matrix must be {k}x{k}, got {mat.shape}")
        if not np.array_equal(mat, mat.T):
            raise ConfigError("correlation matrix is not symmetric")
        if not np.all(np.diag(mat) == 1.0):
            raise ConfigError("correlation matrix must have a unit diagonal")
        try:
            return np.linalg.cholesky(mat)
        except np.linalg.LinAlgError:
            raise ConfigError(
                f"correlation matrix is not positive definite: {mat.tolist()}"
            ) from None


@dataclass(frozen=True)
class FactorRecord:
    gaussian_factors: dict
    binary_labels: dict
    group_id: int


@dataclass
class FactorTable:
    """Column-major view of every sample's factors."""

    attributes: list
    gaussian: np.ndarray  # (n, k)
    labels: np.ndarray  # (n, k) of 0.0 / 1.0
    group_pair: list

    def __len__(self):
        return self.gaussian.shape[0]

    @property
    def group_ids(self) -> np.ndarray:
        t = self.attributes.index(self.group_pair[0])
        s = self.attributes.index(self.group_pair[1])
        return (2 * self.labels[:, t] + self.labels[:, s]).astype(int)

    def label(self, name: str) -> np.ndarray:
        return self.labels[:, self.attributes.index(name)]

    def record(self, i: int) -> FactorRecord:
        return FactorRecord(
            gaussian_factors=dict(zip(self.attributes, self.gaussian[i].tolist())),
            binary_labels={a: int(v) for a, v in zip(self.attributes, self.labels[i])},
            group_id=int(self.group_ids[i]),
        )


def sample_factors(config: DatasetConfig) -> FactorTable:
    config.validate()
    chol = config.cholesky()
    k = len(config.attributes)
    normals = np.empty((config.n_samples, k))
    for i in range(config.n_samples):
        # per-sample stream keyed on (seed, index): independent of batching
        normals[i] = np.random.default_rng([config.seed, i]).standard_normal(k)
    gaussian = normals @ chol.T
    cut = norm.ppf(np.asarray(config.thresholds))
    labels = (gaussian > cut).astype(float)
    return FactorTable(list(config.attributes), gaussian, labels, list(config.group_pair))


# ------------------------------------------------------------------ rendering


def _phi(x: float) -> float:
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def _grid(side: int):
    coords = np.arange(side, dtype=float)
    return np.meshgrid(coords, coords, indexing="xy")


def render_image(factors: FactorRecord, config: DatasetConfig) -> np.ndarray:
    """Render one ``side x side`` image in [0, 1] from a sample's factors.

    Attributes absent from the config sit at their median (factor 0, label 0).
    """
    g = {a: 0.0 for a in ATTRIBUTES}
    g.update(factors.gaussian_factors)
    for name, value in g.items():
        if not np.isfinite(value):
            raise ConfigError(f"factor {name!r} is not finite")
    side = config.image_side
    unit = side / 32.0
    xs, ys = _grid(side)

    freq = (0.06 + 0.22 * _phi(g["texture"])) / unit
    image = 0.10 + 0.06 * np.sin(2.0 * np.pi * freq * xs)

    radius = unit * (4.0 + 4.0 * _phi(g["blob_size"]))
    aspect = np.exp(0.9 * (2.0 * _phi(g["elongation"]) - 1.0))
    limit = side / 2.0 - FRAME_WIDTH - 1.5
    half_x = min(radius * np.sqrt(aspect), limit)
    half_y = min(radius / np.sqrt(aspect), limit)
    centre = (side - 1) / 2.0
    rho = np.sqrt(((xs - centre) / half_x) ** 2 + ((ys - centre) / half_y) ** 2)
    # ~1 pixel anti-aliased rim
    mask = np.clip((1.0 - rho) * min(half_x, half_y) + 0.5, 0.0, 1.0)
    intensity = 0.4 + 0.2 * _phi(g["brightness"])
    image = image * (1.0 - mask) + intensity * mask

    if factors.binary_labels.get("frame", 0) == 1:
        # ring brightness grows with the factor above its cut, so the border
        # varies smoothly within the positive class
        cut = _phi(_frame_cut(config))
        excess = max(_phi(g["frame"]) - cut, 0.0) / max(1.0 - cut, 1e-12)
        image[frame_ring_mask(side)] = FRAME_FLOOR + (1.0 - FRAME_FLOOR) * excess
    return np.clip(image, 0.0, 1.0)


def _frame_cut(config: DatasetConfig) -> float:
    k = list(config.attributes).index("frame")
    return float(norm.ppf(config.thresholds[k]))


def frame_ring_mask(side: int) -> np.ndarray:
    ring = np.zeros((side, side), dtype=bool)
    ring[:FRAME_WIDTH, :] = ring[-FRAME_WIDTH:, :] = True
    ring[:, :FRAME_WIDTH] = ring[:, -FRAME_WIDTH:] = True
    return ring


def render_sample(table: FactorTable, index: int, config: DatasetConfig) -> np.ndarray:
    """Clean render plus i.i.d. pixel noise keyed on (seed, index)."""
    image = render_image(table.record(index), config)
    if config.pixel_noise > 0:
        rng = np.random.default_rng([config.seed, index, 1])
        image = np.clip(image + rng.normal(0.0, config.pixel_noise, image.shape), 0.0, 1.0)
    return image


def render_all(table: FactorTable, config: DatasetConfig, workers: int = 1) -> np.ndarray:
    side = config.image_side
    out = np.empty((len(table), side, side))

    def work(i):
        out[i] = render_sample(table, i, config)

    if workers <= 1:
        for i in range(len(table)):
            work(i)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(work, range(len(table))))
    return out


# ------------------------------------------------------------------- datasets


@dataclass
class Dataset:
    config: DatasetConfig
    images: np.ndarray  # (n, side, side)
    factors: FactorTable
    split: dict  # name -> index array

    def __len__(self):
        return self.images.shape[0]

    @property
    def attributes(self) -> list:
        return self.factors.attributes

    @property
    def input_dim(self) -> int:
        return self.images.shape[1] * self.images.shape[2]

    def flat(self, indices=None) -> np.ndarray:
        imgs = self.images if indices is None else self.images[np.asarray(indices, dtype=np.int64)]
        return imgs.reshape(imgs.shape[0], self.input_dim)

    def indices(self, split: str = "all") -> np.ndarray:
        if split == "all":
            return np.arange(len(self))
        try:
            return np.asarray(self.split[split])
        except KeyError:
            raise ConfigError(f"unknown split {split!r}") from None


def make_splits(n: int, seed: int) -> dict:
    perm = np.random.default_rng([seed, 0x5EED]).permutation(n)
    n_train = int(SPLIT_FRACTIONS[0] * n)
    n_valid = int(SPLIT_FRACTIONS[1] * n)
    return {
        "train": np.sort(perm[:n_train]),
        "valid": np.sort(perm[n_train : n_train + n_valid]),
        "test": np.sort(perm[n_train + n_valid :]),
    }


def build_dataset(config: DatasetConfig, workers: int = 1) -> Dataset:
    table = sample_factors(config)
    images = render_all(table, config, workers=workers)
    return Dataset(config, images, table, make_splits(config.n_samples, config.seed))


def save_dataset(dataset: Dataset, directory) -> Path:
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise TensorFileError(f"{directory}: cannot create directory ({exc.strerror})") from exc
    files = {"images": "images.cfat", "factors": "factors.cfat", "labels": "labels.cfat"}
    tensorfile.save(directory / files["images"], dataset.images)
    tensorfile.save(directory / files["factors"], dataset.factors.gaussian)
    tensorfile.save(directory / files["labels"], dataset.factors.labels)
    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "config": dataset.config.to_dict(),
        "attribute_names": list(dataset.attributes),
        "split_indices": {k: [int(i) for i in v] for k, v in dataset.split.items()},
        "files": files,
    }
    _write_json(directory / "manifest.json", manifest)
    return directory


def generate_dataset(config: DatasetConfig, directory=None, workers: int = 1) -> Dataset:
    dataset = build_dataset(config, workers=workers)
    if directory is not None:
        save_dataset(dataset, directory)
    return dataset


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
    except OSError as exc:
        raise TensorFileError(f"{directory / 'manifest.json'}: cannot read ({exc.strerror})") from exc
    config = DatasetConfig(**manifest["config"])
    files = manifest["files"]
    images = tensorfile.load(directory / files["images"])
    gaussian = tensorfile.load(directory / files["factors"])
    labels = tensorfile.load(directory / files["labels"])
    table = FactorTable(list(config.attributes), gaussian, labels, list(config.group_pair))
    split = {k: np.asarray(v, dtype=int) for k, v in manifest["split_indices"].items()}
    return Dataset(config, images, table, split)


def _write_json(path: Path, obj) -> None:
    try:
        path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise TensorFileError(f"{path}: cannot write ({exc.strerror})") from exc


# ---------------------------------------------------------------- statistics


@dataclass
class CorrelationTable:
    names: list
    values: np.ndarray
    constant: list  # names whose column had zero variance

    @property
    def warning(self) -> bool:
        return bool(self.constant)


def pearson_table(columns: np.ndarray, names) -> CorrelationTable:
    """Pearson correlation between columns; zero-variance columns give 0."""
    columns = np.asarray(columns, dtype=float)
    if columns.shape[0] == 0:
        raise ConfigError("correlation needs at least one sample")
    centred = columns - columns.mean(axis=0)
    norms = np.sqrt((centred * centred).sum(axis=0))
    constant = norms == 0
    safe = np.where(constant, 1.0, norms)
    unit = centred / safe
    values = unit.T @ unit
    values[constant, :] = 0.0
    values[:, constant] = 0.0
    np.fill_diagonal(values, np.where(constant, 0.0, 1.0))
    values = np.clip(values, -1.0, 1.0)
    bad = [n for n, c in zip(names, constant) if c]
    if bad:
        warnings.warn(f"constant columns reported as zero correlation: {bad}", stacklevel=2)
    return CorrelationTable(list(names), values, bad)


def empirical_label_correlation(dataset: Dataset, indices=None) -> CorrelationTable:
    labels = dataset.factors.labels
    if indices is not None:
        labels = labels[np.asarray(indices)]
    return pearson_table(labels, dataset.attributes)


def balanced_group_subset(dataset: Dataset, n: int, seed: int, split: str = "all") -> np.ndarray:
    """Pick n/4 samples (without replacement) from each (target, sensitive) group."""
    idx = dataset.indices(split)
    groups = dataset.factors.group_ids[idx]
    rng = np.random.default_rng([seed, 0xB41])
    per_group = n // 4
    chosen = []
    for g in range(4):
        members = idx[groups == g]
        if len(members) == 0:
            raise ConfigError(f"group {g} of {dataset.config.group_pair} is empty")
        take = min(per_group, len(members))
        chosen.append(rng.choice(members, size=take, replace=False))
    return np.sort(np.concatenate(chosen))


def inversely_correlated(dataset: Dataset, target: str, sensitive: str, split: str = "test") -> np.ndarray:
    """Indices whose target label disagrees with the sensitive label."""
    idx = dataset.indices(split)
    t = dataset.factors.label(target)[idx]
    s = dataset.factors.label(sensitive)[idx]
    return idx[t != s]
