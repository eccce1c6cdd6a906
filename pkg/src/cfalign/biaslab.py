"""Planting a known bias by composition, detecting it, and tuning it back out.

Rectification optimises the coefficient beta of ``f_target + beta * f_bias``
with a pseudo-gradient step: beta moves against the mean relative change psi
of ``f_bias`` under counterfactuals of the current composite,

    beta_n = beta_{n-1} - lr * psi_n + momentum * (beta_{n-1} - beta_{n-2})

so a positive psi (the composite's CFs also move ``f_bias``) lowers beta.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import report
from .alignment import (
    MIN_BASE_DELTA,
    AlignmentMatrix,
    alignment_matrix,
    counterfactuals,
    mean_stderr,
    records_for,
    select_positive,
)
from .cf import SearchConfig, sweep
from .data import Dataset
from .errors import ContractError, IneligibleSampleError, LowSupportError, TensorFileError
from .models import CompositeClassifier, input_dim

logger = logging.getLogger(__name__)


def induce_bias(f_target, f_planted, c: float, name: str = "") -> CompositeClassifier:
    """``f_target + c * f_planted``; no retraining."""
    return CompositeClassifier([(f_target, 1.0), (f_planted, c)], name=name)


@dataclass
class BiasExperimentReport:
    base_name: str
    planted_name: str
    coefficient: float
    r_before: float
    r_after: float
    stderr_before: float = math.nan
    stderr_after: float = math.nan
    n_before: int = 0
    n_after: int = 0
    low_support: bool = False
    cf_image_pairs: list = field(default_factory=list)  # (sample_id, original pgm, cf pgm)

    @property
    def gap(self) -> float:
        return self.r_after - self.r_before

    def to_json(self) -> str:
        return json.dumps(asdict(self) | {"gap": self.gap}, indent=2, sort_keys=True) + "\n"


def _psi(records):
    vals = [r.r_value for r in records if r.included]
    mean, se = mean_stderr(vals)
    return mean, se, len(vals)


def detect_bias(f_biased, f_target, f_planted, dataset: Dataset, encoder, decoder, n: int = 100,
                seed: int = 0, split: str = "test", coefficient: float = math.nan,
                base_name: str = "target", planted_name: str = "planted", out_dir=None,
                n_examples: int = 4, search: SearchConfig = None, workers: int = 1,
                min_base_delta: float = MIN_BASE_DELTA, min_support: int = 10) -> BiasExperimentReport:
    """Mean relative change of ``f_planted`` under CFs of ``f_target`` (before) and ``f_biased`` (after).

    Both searches start from the same samples: positives of the unbiased target.
    """
    idx = select_positive(f_target, dataset, encoder, decoder, n, seed, split)
    down = {planted_name: f_planted}
    res_before = counterfactuals(f_target, encoder, decoder, dataset, idx, search, workers)
    res_after = counterfactuals(f_biased, encoder, decoder, dataset, idx, search, workers)
    before = records_for(res_before, base_name, f_target, down, min_base_delta)
    after = records_for(res_after, f"{base_name}_biased", f_biased, down, min_base_delta)
    rb, sb, nb = _psi(before)
    ra, sa, na = _psi(after)
    rep = BiasExperimentReport(base_name, planted_name, coefficient, rb, ra, sb, sa, nb, na,
                               low_support=min(nb, na) < min_support)
    if rep.low_support:
        logger.warning("bias experiment: only %d/%d samples pass the base-change filter", nb, na)

    if out_dir is not None:
        out = Path(out_dir)
        shown = [(b, a) for b, a in zip(res_before, res_after) if b is not None and a is not None]
        for b, a in shown[:n_examples]:
            sid = b.sample_id
            for tag, res, model in (("before", b, f_target), ("after", a, f_biased)):
                trace = sweep(model, down, res, decoder, base_name=f"{base_name}_{tag}")
                report.write_text(out / f"sweep_{sid}_{tag}.csv", trace.to_csv())
                report.write_text(out / f"sweep_{sid}_{tag}.svg", report.sweep_svg(trace))
            orig = report.write_pgm(out / f"sample_{sid}_orig.pgm", b.x0_recon)
            cf = report.write_pgm(out / f"sample_{sid}_cf.pgm", a.x_cf)
            rep.cf_image_pairs.append([sid, orig.name, cf.name])
        report.write_text(out / "report.json", rep.to_json())
    return rep


# ------------------------------------------------------------------ rectify


@dataclass
class RectifyParams:
    lr: float = 0.001
    momentum: float = 0.1
    batch: int = 10
    max_iter: int = 200
    min_base_change: float = 0.6
    patience: int = 10
    n_valid: int = 64
    beta0: float = 0.0
    seed: int = 0


@dataclass
class RectifyState:
    beta: float
    psi: float = math.nan
    momentum_term: float = 0.0  # beta_{n-1} - beta_{n-2}
    iteration: int = 0
    curves: list = field(default_factory=list)  # (train_psi, valid_psi, beta) per iteration
    initial_valid_psi: float = math.nan
    best_beta: float = math.nan
    best_valid_psi: float = math.nan  # signed value at the best |psi|
    since_best: int = 0
    epoch: int = 0
    cursor: int = 0
    stopped: str = ""  # "", "early_stop", "max_iter"

    def __post_init__(self):
        if len(self.curves) != self.iteration:
            raise ContractError("curves length must equal iteration count")
        if not math.isfinite(self.momentum_term):
            raise ContractError("momentum term is not finite")

    @property
    def diverged(self) -> bool:
        """No post-update check ever beat the starting validation |psi|."""
        vals = [abs(v) for _, v, _ in self.curves if math.isfinite(v)]
        return bool(vals) and min(vals) > abs(self.initial_valid_psi)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True, allow_nan=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RectifyState":
        raw = json.loads(text)
        raw["curves"] = [tuple(c) for c in raw["curves"]]
        return cls(**raw)

    def curves_csv(self) -> str:
        lines = ["iteration,beta,train_psi,valid_psi"]
        for i, (tp, vp, b) in enumerate(self.curves, start=1):
            lines.append(f"{i},{b:.9g},{tp:.9g},{vp:.9g}")
        return "\n".join(lines) + "\n"


def rectified(f_target, f_bias, beta: float) -> CompositeClassifier:
    return CompositeClassifier([(f_target, 1.0), (f_bias, beta)],
                               name=f"{getattr(f_target, 'name', 'target')}{beta:+.4f}*{getattr(f_bias, 'name', 'bias')}")


def _eligible(results, threshold):
    return [r for r in results if r is not None and -r.base_delta > threshold]


def _batch_psi(results, composite, f_bias, min_base_change):
    recs = records_for(results, "composite", composite, {"bias": f_bias}, min_base_delta=0.0)
    vals = [r.r_value for r in recs]
    return math.fsum(vals) / len(vals) if vals else math.nan


def validation_indices(f_target, dataset: Dataset, encoder, decoder, params: RectifyParams,
                       split: str = "valid") -> np.ndarray:
    return select_positive(f_target, dataset, encoder, decoder, params.n_valid, params.seed,
                           split, salt=0xA11D)


def validation_psi(composite, f_bias, dataset, encoder, decoder, indices, params: RectifyParams,
                   search=None, workers=1) -> float:
    results = counterfactuals(composite, encoder, decoder, dataset, indices, search, workers)
    return _batch_psi(_eligible(results, params.min_base_change), composite, f_bias, params.min_base_change)


def _next_batch(state: RectifyState, composite, dataset, encoder, decoder, pool, params, search, workers):
    """Walk the shuffled pool until ``batch`` CFs pass the base-change filter."""
    chosen = []
    scanned = 0
    while len(chosen) < params.batch:
        if scanned >= len(pool):
            raise IneligibleSampleError(
                f"fewer than {params.batch} training samples pass the base-change filter "
                f"(> {params.min_base_change}) for the current composite")
        order = np.random.default_rng([params.seed, 0xBA7C, state.epoch]).permutation(pool)
        take = order[state.cursor:state.cursor + params.batch - len(chosen)]
        if len(take) == 0:
            state.epoch += 1
            state.cursor = 0
            continue
        state.cursor += len(take)
        scanned += len(take)
        results = counterfactuals(composite, encoder, decoder, dataset, take, search, workers)
        chosen += _eligible(results, params.min_base_change)
    for r in chosen:
        if not -r.base_delta > params.min_base_change:
            raise ContractError("training CF violates the base-change filter")
    return chosen


def rectify(f_target, f_bias, dataset: Dataset, encoder, decoder, params: RectifyParams = None,
            state: Optional[RectifyState] = None, run_dir=None, search: SearchConfig = None,
            workers: int = 1, train_split: str = "train", valid_split: str = "valid"):
    """Optimise beta; returns (state, best composite).  Pass ``state`` to resume."""
    params = params or RectifyParams()
    if input_dim(f_target) != input_dim(f_bias):
        raise ContractError("target and bias classifiers disagree on input size")
    pool = dataset.indices(train_split)
    valid_idx = validation_indices(f_target, dataset, encoder, decoder, params, valid_split)
    run_dir = Path(run_dir) if run_dir is not None else None

    if state is None:
        state = RectifyState(beta=params.beta0, best_beta=params.beta0)
        v0 = validation_psi(rectified(f_target, f_bias, state.beta), f_bias, dataset, encoder,
                            decoder, valid_idx, params, search, workers)
        state.initial_valid_psi = v0
        state.best_valid_psi = v0
        _persist(state, run_dir)

    while not state.stopped:
        if state.iteration >= params.max_iter:
            state.stopped = "max_iter"
            break
        composite = rectified(f_target, f_bias, state.beta)
        batch = _next_batch(state, composite, dataset, encoder, decoder, pool, params, search, workers)
        psi = _batch_psi(batch, composite, f_bias, params.min_base_change)
        new_beta = state.beta - params.lr * psi + params.momentum * state.momentum_term
        state.momentum_term = new_beta - state.beta
        state.beta = new_beta
        state.psi = psi
        v = validation_psi(rectified(f_target, f_bias, state.beta), f_bias, dataset, encoder,
                           decoder, valid_idx, params, search, workers)
        state.curves.append((psi, v, state.beta))
        state.iteration += 1
        if math.isfinite(v) and (not math.isfinite(state.best_valid_psi) or abs(v) < abs(state.best_valid_psi)):
            state.best_valid_psi, state.best_beta, state.since_best = v, state.beta, 0
        else:
            state.since_best += 1
            if state.since_best >= params.patience:
                state.stopped = "early_stop"
        logger.info("rectify it %d beta %.5f train psi %.4f valid psi %.4f", state.iteration, state.beta, psi, v)
        _persist(state, run_dir)

    _persist(state, run_dir)
    if state.diverged:
        logger.warning("rectification diverged: validation |psi| never fell below its start %.4f",
                       abs(state.initial_valid_psi))
    return state, rectified(f_target, f_bias, state.best_beta)


def _persist(state: RectifyState, run_dir):
    if run_dir is None:
        return
    report.write_text(run_dir / "state.json", state.to_json())
    report.write_text(run_dir / "curves.csv", state.curves_csv())
    report.write_text(run_dir / "curves.svg", curves_svg(state))


def curves_svg(state: RectifyState) -> str:
    it = np.arange(1, len(state.curves) + 1)
    cols = np.array(state.curves, dtype=float).reshape(-1, 3)
    return report.line_plot_svg(it, {"train psi": cols[:, 0], "valid psi": cols[:, 1], "beta": cols[:, 2]},
                                title="rectification", xlabel="iteration", ylabel="value")


def load_state(run_dir) -> RectifyState:
    path = Path(run_dir) / "state.json"
    try:
        return RectifyState.from_json(path.read_text())
    except OSError as exc:
        raise TensorFileError(f"{path}: cannot read ({exc.strerror})") from exc


@dataclass
class RectifyReport:
    before: AlignmentMatrix
    after: AlignmentMatrix
    bias_name: str

    def moved_toward_zero(self) -> dict:
        """Per rectified row: did |R| in the bias column shrink?"""
        j = self.before.downstream_names.index(self.bias_name)
        out = {}
        for i, name in enumerate(self.before.base_names):
            if name == self.bias_name:
                continue
            b, a = self.before.mean[i, j], self.after.mean[i, j]
            out[name] = bool(math.isfinite(a) and math.isfinite(b) and abs(a) < abs(b))
        return out


def rectify_report(targets: dict, f_bias, states: dict, downstream: dict, dataset: Dataset, encoder,
                   decoder, bias_name: str = "bias", n: int = 100, seed: int = 0, split: str = "test",
                   out_dir=None, search: SearchConfig = None, workers: int = 1) -> RectifyReport:
    """Before/after alignment matrices on ``split`` for every rectified target.

    ``targets`` maps row names to the (biased) targets, ``states`` the same
    names to finished RectifyStates.  The bias classifier itself is kept as an
    untouched row.
    """
    before_rows = {name: t for name, t in targets.items()}
    after_rows = {name: rectified(t, f_bias, states[name].best_beta) for name, t in targets.items()}
    before_rows[bias_name] = after_rows[bias_name] = f_bias
    kw = dict(n_per_class=n, seed=seed, split=split, search=search, downstream=downstream, workers=workers)
    before = alignment_matrix(before_rows, dataset, encoder, decoder, **kw)
    after = alignment_matrix(after_rows, dataset, encoder, decoder, **kw)
    rep = RectifyReport(before, after, bias_name)
    if out_dir is not None:
        report.write_matrix(before, out_dir, "before", "before rectification")
        report.write_matrix(after, out_dir, "after", "after rectification")
    if all(len(m.low_support) == len(m.base_names) for m in (before, after)):
        raise LowSupportError("no row of the rectification report has enough support")
    return rep
