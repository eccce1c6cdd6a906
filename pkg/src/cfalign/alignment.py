"""Relative change between classifiers under shared counterfactuals, and its aggregates."""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .cf import SearchConfig, decode, encode, search_from_latent
from .data import CorrelationTable, Dataset, empirical_label_correlation, pearson_table
from .errors import DegenerateInputError
from .models import predict_batch
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

MIN_BASE_DELTA = 0.3
MIN_SUPPORT = 10


@dataclass(frozen=True)
class AlignmentRecord:
    sample_id: int
    base_name: str
    downstream_name: str
    r_value: float
    base_delta: float
    downstream_delta: float
    included: bool

    def with_threshold(self, min_base_delta: float) -> "AlignmentRecord":
        return replace(self, included=abs(self.base_delta) >= min_base_delta)


def make_record(sample_id, base_name, downstream_name, base_delta, downstream_delta,
                min_base_delta=MIN_BASE_DELTA) -> AlignmentRecord:
    r = downstream_delta / base_delta if base_delta != 0 else math.nan
    return AlignmentRecord(
        sample_id=sample_id,
        base_name=base_name,
        downstream_name=downstream_name,
        r_value=r,
        base_delta=base_delta,
        downstream_delta=downstream_delta,
        included=abs(base_delta) >= min_base_delta,
    )


def _score(model, image) -> float:
    with no_grad():
        return model.forward(Tensor._wrap(np.asarray(image, dtype=float).reshape(1, -1))).item()


def relative_change(f1, f_b, decoder, z0, z_star, min_base_delta=MIN_BASE_DELTA,
                    sample_id=-1, base_name="base", downstream_name="downstream") -> AlignmentRecord:
    """Ratio of ``f1``'s prediction change to ``f_b``'s between D(z0) and D(z_star)."""
    x0, x1 = decode(decoder, z0), decode(decoder, z_star)
    base_delta = _score(f_b, x1) - _score(f_b, x0)
    ds_delta = _score(f1, x1) - _score(f1, x0)
    return make_record(sample_id, base_name, downstream_name, base_delta, ds_delta, min_base_delta)


def mean_stderr(values):
    """Order-independent mean and standard error (exactly rounded sums)."""
    n = len(values)
    if n == 0:
        return math.nan, math.nan
    mean = math.fsum(values) / n
    if n == 1:
        return mean, 0.0
    var = math.fsum((v - mean) ** 2 for v in values) / (n - 1)
    return mean, math.sqrt(var / n)


@dataclass
class AlignmentMatrix:
    base_names: list
    downstream_names: list
    mean: np.ndarray
    stderr: np.ndarray
    n_included: np.ndarray
    records: list = field(default_factory=list, repr=False)
    low_support: list = field(default_factory=list)
    min_base_delta: float = MIN_BASE_DELTA

    def cell(self, base: str, downstream: str):
        i, j = self.base_names.index(base), self.downstream_names.index(downstream)
        return self.mean[i, j], self.stderr[i, j], int(self.n_included[i, j])

    def rethreshold(self, min_base_delta: float) -> "AlignmentMatrix":
        records = [r.with_threshold(min_base_delta) for r in self.records]
        return aggregate(records, self.base_names, self.downstream_names, min_base_delta)

    def to_csv(self) -> str:
        lines = [",".join(["base"] + self.downstream_names)]
        for i, b in enumerate(self.base_names):
            cells = [
                f"{self.mean[i, j]:.9g}|{self.stderr[i, j]:.9g}|{int(self.n_included[i, j])}"
                for j in range(len(self.downstream_names))
            ]
            lines.append(",".join([b] + cells))
        return "\n".join(lines) + "\n"


def aggregate(records, base_names, downstream_names, min_base_delta=MIN_BASE_DELTA,
              min_support=MIN_SUPPORT) -> AlignmentMatrix:
    nb, nd = len(base_names), len(downstream_names)
    buckets = {}
    for r in records:
        if r.included:
            buckets.setdefault((r.base_name, r.downstream_name), []).append(r.r_value)
    mean = np.full((nb, nd), np.nan)
    stderr = np.full((nb, nd), np.nan)
    count = np.zeros((nb, nd), dtype=int)
    for i, b in enumerate(base_names):
        for j, d in enumerate(downstream_names):
            vals = buckets.get((b, d), [])
            count[i, j] = len(vals)
            if vals:
                mean[i, j], stderr[i, j] = mean_stderr(vals)
    low = [b for i, b in enumerate(base_names) if count[i].max(initial=0) < min_support]
    return AlignmentMatrix(list(base_names), list(downstream_names), mean, stderr, count,
                           list(records), low, min_base_delta)


def select_positive(model, dataset: Dataset, encoder, decoder, n: int, seed: int,
                    split: str = "test", salt: int = 0) -> np.ndarray:
    """Up to ``n`` indices (without replacement) whose reconstruction scores > 0.5."""
    idx = dataset.indices(split)
    recon = reconstruct(encoder, decoder, dataset.flat(idx))
    preds = predict_batch(model, recon)
    positive = idx[preds > 0.5]
    rng = np.random.default_rng([seed, salt])
    take = min(n, len(positive))
    return np.sort(rng.choice(positive, size=take, replace=False))


def reconstruct(encoder, decoder, images) -> np.ndarray:
    with no_grad():
        return decoder.forward(encoder.forward(Tensor._wrap(np.asarray(images, dtype=float)))).data


def counterfactuals(base, encoder, decoder, dataset: Dataset, indices, search: SearchConfig = None,
                    workers: int = 1) -> list:
    """One CFResult per index; degenerate samples yield ``None``."""
    search = search or SearchConfig()
    images = dataset.flat(indices)

    def work(k):
        z0 = encode(encoder, images[k])
        try:
            return search_from_latent(base, decoder, z0, search, sample_id=int(indices[k]))
        except DegenerateInputError:
            logger.warning("sample %d: zero latent gradient, skipped", int(indices[k]))
            return None

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(work, range(len(indices))))
    return [work(k) for k in range(len(indices))]


def records_for(results, base_name, base, downstream: dict, min_base_delta=MIN_BASE_DELTA) -> list:
    """Relative-change records of every downstream classifier over finished CFs."""
    results = [r for r in results if r is not None]
    if not results:
        return []
    x0 = np.vstack([r.x0_recon for r in results])
    x1 = np.vstack([r.x_cf for r in results])
    base_delta = predict_batch(base, x1) - predict_batch(base, x0)
    out = []
    for name, model in downstream.items():
        if model is base:
            ds_delta = base_delta
        else:
            ds_delta = predict_batch(model, x1) - predict_batch(model, x0)
        for r, bd, dd in zip(results, base_delta, ds_delta):
            out.append(make_record(r.sample_id, base_name, name, float(bd), float(dd), min_base_delta))
    return out


def alignment_matrix(classifiers: dict, dataset: Dataset, encoder, decoder, n_per_class: int = 400,
                     seed: int = 0, split: str = "test", min_base_delta=MIN_BASE_DELTA,
                     search: SearchConfig = None, downstream: dict = None, workers: int = 1,
                     min_support=MIN_SUPPORT) -> AlignmentMatrix:
    """Mean relative change for every (base row, downstream column) pair.

    ``classifiers`` supplies the rows; ``downstream`` (default: the same
    dict) supplies the columns.  Sample selection happens before any CF is
    generated, so results do not depend on ``workers``.
    """
    downstream = classifiers if downstream is None else downstream
    records = []
    for row, (name, base) in enumerate(classifiers.items()):
        idx = select_positive(base, dataset, encoder, decoder, n_per_class, seed, split, salt=row)
        results = counterfactuals(base, encoder, decoder, dataset, idx, search, workers)
        records += records_for(results, name, base, downstream, min_base_delta)
        logger.info("alignment row %s: %d samples", name, len(idx))
    return aggregate(records, list(classifiers), list(downstream), min_base_delta, min_support)


def prediction_correlation(classifiers: dict, dataset: Dataset, split: str = "test") -> CorrelationTable:
    images = dataset.flat(dataset.indices(split))
    cols = np.column_stack([predict_batch(m, images) for m in classifiers.values()])
    return pearson_table(cols, list(classifiers))


def label_correlation(dataset: Dataset, split: str = "test") -> CorrelationTable:
    return empirical_label_correlation(dataset, dataset.indices(split))


@dataclass
class Flag:
    base: str
    downstream: str
    relative_change: float
    label_correlation: float
    kind: str  # "introduced_by_classifier" or "not_used_by_classifier"


def disagreement_flags(matrix: AlignmentMatrix, labels: CorrelationTable, attribute_of: dict,
                       gap: float = 0.3) -> list:
    """Cells whose |R| and |label correlation| differ by more than ``gap``.

    ``attribute_of`` maps classifier names to dataset attribute names.
    """
    flags = []
    for i, b in enumerate(matrix.base_names):
        for j, d in enumerate(matrix.downstream_names):
            if b == d or matrix.n_included[i, j] == 0:
                continue
            ab, ad = attribute_of.get(b), attribute_of.get(d)
            if ab not in labels.names or ad not in labels.names or ab == ad:
                continue
            r = float(matrix.mean[i, j])
            c = float(labels.values[labels.names.index(ab), labels.names.index(ad)])
            if abs(r) - abs(c) > gap:
                flags.append(Flag(b, d, r, c, "introduced_by_classifier"))
            elif abs(c) - abs(r) > gap:
                flags.append(Flag(b, d, r, c, "not_used_by_classifier"))
    return flags
