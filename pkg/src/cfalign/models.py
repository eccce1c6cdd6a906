"""MLP encoder/decoder/classifier networks, their training, and checkpoints."""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from . import tensorfile
from .data import Dataset
from .errors import (
    CheckpointError,
    ConfigError,
    DimensionError,
    NumericError,
    TensorFileError,
    TrainingDivergence,
)
from .tensor import Adam, Tape, Tensor, no_grad

logger = logging.getLogger(__name__)

KINDS = ("encoder", "decoder", "classifier")
CHECKPOINT_VERSION = 1


@dataclass
class MlpSpec:
    layer_dims: list
    activation: str = "relu"
    output_activation: str = "none"

    def __post_init__(self):
        self.layer_dims = [int(d) for d in self.layer_dims]
        if len(self.layer_dims) < 2 or min(self.layer_dims) < 1:
            raise ConfigError(f"layer_dims needs >= 2 positive widths, got {self.layer_dims}")
        if self.activation != "relu":
            raise ConfigError(f"unsupported activation {self.activation!r}")
        if self.output_activation not in ("sigmoid", "none"):
            raise ConfigError(f"unsupported output activation {self.output_activation!r}")

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]


class Mlp:
    """A fully connected network; also the unit that gets checkpointed.

    Parameters are frozen (``requires_grad=False``) unless a trainer unfreezes
    them, so a loaded model can be shared between threads for inference.
    """

    def __init__(self, spec: MlpSpec, weights: list, kind: str = "classifier",
                 name: str = "", training_meta: Optional[dict] = None):
        if kind not in KINDS:
            raise ConfigError(f"unknown model kind {kind!r}")
        self.spec = spec
        self.kind = kind
        self.name = name
        self.training_meta = dict(training_meta or {})
        self.layers = []
        for i, (w, b) in enumerate(weights):
            fan_in, fan_out = spec.layer_dims[i], spec.layer_dims[i + 1]
            w, b = np.asarray(w, dtype=float), np.asarray(b, dtype=float)
            if w.shape != (fan_in, fan_out) or b.shape != (fan_out,):
                raise CheckpointError(
                    f"layer {i}: weight {w.shape}/bias {b.shape} do not match spec "
                    f"({fan_in}, {fan_out})"
                )
            self.layers.append((Tensor(w), Tensor(b)))
        if len(self.layers) != len(spec.layer_dims) - 1:
            raise CheckpointError(
                f"expected {len(spec.layer_dims) - 1} layers, got {len(self.layers)}"
            )

    @classmethod
    def init(cls, spec: MlpSpec, seed: int, kind="classifier", name=""):
        rng = np.random.default_rng([seed, 0x1417])
        weights = [
            (T.xavier_uniform(rng, a, b), np.zeros(b))
            for a, b in zip(spec.layer_dims[:-1], spec.layer_dims[1:])
        ]
        return cls(spec, weights, kind=kind, name=name)

    def parameters(self) -> list:
        return [t for layer in self.layers for t in layer]

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag
            p.grad = None

    def forward(self, x: Tensor) -> Tensor:
        x = T._as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.spec.input_dim:
            raise DimensionError(
                f"{self.kind} {self.name!r} expects (batch, {self.spec.input_dim}), got {x.shape}"
            )
        h = x
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            h = T.add(T.matmul(h, w), b)
            if i < last:
                h = T.relu(h)
        if self.spec.output_activation == "sigmoid":
            h = T.sigmoid(h)
        return h

    __call__ = forward

    def weight_arrays(self) -> dict:
        out = {}
        for i, (w, b) in enumerate(self.layers):
            out[f"layer{i}_w"] = w.data
            out[f"layer{i}_b"] = b.data
        return out

    def __repr__(self):
        return f"Mlp({self.kind}, {self.name!r}, dims={self.spec.layer_dims})"


# Accepted name for the persisted unit.
ModelCheckpoint = Mlp


class CompositeClassifier:
    """Unsquashed linear combination ``sum(c_i * f_i(x))`` of classifiers."""

    def __init__(self, terms, name: str = ""):
        terms = [(model, float(c)) for model, c in terms]
        if not terms:
            raise ConfigError("a composite needs at least one term")
        dims = {input_dim(m) for m, _ in terms}
        if len(dims) != 1:
            raise DimensionError(f"composite members disagree on input size: {sorted(dims)}")
        self.terms = terms
        self.name = name or " + ".join(f"{c:g}*{getattr(m, 'name', '?')}" for m, c in terms)

    @property
    def input_dim(self) -> int:
        return input_dim(self.terms[0][0])

    def forward(self, x: Tensor) -> Tensor:
        out = None
        for model, c in self.terms:
            term = T.scale(model.forward(x), c)
            out = term if out is None else T.add(out, term)
        return out

    __call__ = forward

    def __repr__(self):
        return f"CompositeClassifier({self.name!r})"


def input_dim(model) -> int:
    if isinstance(model, Mlp):
        return model.spec.input_dim
    return model.input_dim


def compose(terms, name: str = "") -> CompositeClassifier:
    return CompositeClassifier(terms, name=name)


def predict(model, image) -> float:
    """Scalar output of a classifier or composite for one image."""
    arr = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=float)
    if arr.size != input_dim(model):
        raise DimensionError(f"image of size {arr.size} does not match input {input_dim(model)}")
    with no_grad():
        return model.forward(Tensor(arr.reshape(1, -1))).item()


def predict_batch(model, images, batch_size: int = 512) -> np.ndarray:
    arr = np.asarray(images, dtype=float)
    arr = arr.reshape(arr.shape[0], -1)
    if arr.shape[1] != input_dim(model):
        raise DimensionError(f"images of size {arr.shape[1]} do not match input {input_dim(model)}")
    out = np.empty(arr.shape[0])
    with no_grad():
        for start in range(0, arr.shape[0], batch_size):
            chunk = Tensor._wrap(arr[start : start + batch_size])
            out[start : start + batch_size] = model.forward(chunk).data.reshape(-1)
    return out


# ------------------------------------------------------------------- training


@dataclass
class AutoencoderParams:
    latent_dim: int = 16
    hidden: int = 256
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0


@dataclass
class ClassifierParams:
    hidden: list = field(default_factory=lambda: [128])
    epochs: int = 15
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    mode: str = "erm"
    eta: float = 0.1
    group_pair: Optional[list] = None


@dataclass
class History:
    columns: tuple
    rows: list = field(default_factory=list)

    def add(self, *values):
        self.rows.append(tuple(values))

    def to_csv(self) -> str:
        lines = [",".join(self.columns)]
        for row in self.rows:
            lines.append(",".join(v if isinstance(v, str) else _fmt(v) for v in row))
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.9g}"


def _batches(rng, n, batch_size):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _mse_eval(encoder, decoder, x) -> float:
    with no_grad():
        recon = decoder.forward(encoder.forward(Tensor._wrap(x)))
    return float(((recon.data - x) ** 2).mean())


def train_autoencoder(dataset: Dataset, params: AutoencoderParams = None):
    """Fit encoder/decoder by Adam on per-pixel MSE over the train split.

    Returns ``(encoder, decoder, history)``.
    """
    params = params or AutoencoderParams()
    d = dataset.input_dim
    enc_spec = MlpSpec([d, params.hidden, params.latent_dim], output_activation="none")
    dec_spec = MlpSpec([params.latent_dim, params.hidden, d], output_activation="sigmoid")
    encoder = Mlp.init(enc_spec, params.seed, kind="encoder", name="encoder")
    decoder = Mlp.init(dec_spec, params.seed + 1, kind="decoder", name="decoder")
    x_train = dataset.flat(dataset.indices("train"))
    x_valid = dataset.flat(dataset.indices("valid"))
    encoder.set_trainable(True)
    decoder.set_trainable(True)
    opt = Adam(encoder.parameters() + decoder.parameters(), lr=params.lr)
    rng = np.random.default_rng([params.seed, 0xAE])
    history = History(("epoch", "train_mse", "valid_mse"))
    for epoch in range(params.epochs):
        total, count = 0.0, 0
        try:
            for idx in _batches(rng, len(x_train), params.batch_size):
                opt.zero_grad()
                xb = Tensor._wrap(x_train[idx])
                with Tape() as tape:
                    loss = T.mse(decoder.forward(encoder.forward(xb)), xb)
                    tape.backward(loss)
                opt.step()
                total += loss.item() * len(idx)
                count += len(idx)
        except NumericError as exc:
            raise TrainingDivergence(f"autoencoder diverged in epoch {epoch}: {exc}", epoch) from exc
        valid = _mse_eval(encoder, decoder, x_valid) if len(x_valid) else float("nan")
        history.add(epoch, total / count, valid)
        logger.info("ae epoch %d train_mse %.5f valid_mse %.5f", epoch, total / count, valid)
    encoder.set_trainable(False)
    decoder.set_trainable(False)
    meta = {
        "seed": params.seed,
        "epochs": params.epochs,
        "final_train_mse": history.rows[-1][1] if history.rows else None,
        "final_valid_mse": history.rows[-1][2] if history.rows else None,
        "mode": "autoencoder",
        "hyperparams": asdict(params),
    }
    encoder.training_meta = dict(meta)
    decoder.training_meta = dict(meta)
    return encoder, decoder, history


def accuracy(model, images, labels) -> float:
    pred = predict_batch(model, images) > 0.5
    return float((pred == (np.asarray(labels) > 0.5)).mean())


def train_classifier(dataset: Dataset, attribute: str, params: ClassifierParams = None,
                     name: str = ""):
    """Train a sigmoid classifier for one binary attribute.

    ``mode="erm"`` minimises mean BCE.  ``mode="worst_group"`` keeps weights
    ``q`` over the four (target, sensitive) label cells, updates them once per
    batch as ``q_g <- q_g * exp(eta * loss_g)`` (then normalises), and
    minimises the q-weighted BCE in which each sample carries its cell's
    weight.  With ``eta=0`` the weights never move and the run is
    bit-identical to ERM.

    Returns ``(classifier, history)``.
    """
    params = params or ClassifierParams()
    if params.mode not in ("erm", "worst_group"):
        raise ConfigError(f"unknown training mode {params.mode!r}")
    col = dataset.config.index(attribute)
    train_idx = dataset.indices("train")
    x_train = dataset.flat(train_idx)
    y_train = dataset.factors.labels[train_idx, col].reshape(-1, 1)

    pair = params.group_pair or [attribute, dataset.config.group_pair[1]]
    if params.mode == "worst_group":
        if pair[0] == pair[1]:
            raise ConfigError("worst_group needs distinct target and sensitive attributes")
        dataset.config.index(pair[0]), dataset.config.index(pair[1])
        t = dataset.factors.label(pair[0])[train_idx]
        s = dataset.factors.label(pair[1])[train_idx]
        groups = (2 * t + s).astype(int)
        counts = np.bincount(groups, minlength=4)
        if (counts == 0).any():
            raise ConfigError(f"worst_group: empty group(s) {np.flatnonzero(counts == 0).tolist()} for {pair}")
    else:
        groups = np.zeros(len(train_idx), dtype=int)
    eta = params.eta if params.mode == "worst_group" else 0.0
    q = np.full(4, 0.25)

    spec = MlpSpec([dataset.input_dim, *params.hidden, 1], output_activation="sigmoid")
    model = Mlp.init(spec, params.seed, kind="classifier", name=name or attribute)
    model.set_trainable(True)
    opt = Adam(model.parameters(), lr=params.lr)
    rng = np.random.default_rng([params.seed, 0xC1F])
    valid_idx = dataset.indices("valid")
    history = History(("epoch", "train_loss", "valid_acc", "q0", "q1", "q2", "q3"))
    for epoch in range(params.epochs):
        total, count = 0.0, 0
        try:
            for idx in _batches(rng, len(x_train), params.batch_size):
                opt.zero_grad()
                xb = Tensor._wrap(x_train[idx])
                yb = Tensor._wrap(y_train[idx])
                gb = groups[idx]
                with Tape() as tape:
                    pred = model.forward(xb)
                    if eta != 0.0:
                        per = _per_sample_bce(pred.data, yb.data)
                        present = np.unique(gb)
                        for g in present:
                            q[g] *= math.exp(eta * per[gb == g].mean())
                        q /= q.sum()
                    w = q[gb]
                    w = (w / w.sum()).reshape(-1, 1)
                    loss = T.bce(pred, yb, weights=w)
                    tape.backward(loss)
                opt.step()
                total += loss.item() * len(idx)
                count += len(idx)
        except NumericError as exc:
            raise TrainingDivergence(f"classifier {attribute!r} diverged in epoch {epoch}: {exc}", epoch) from exc
        valid_acc = (
            accuracy(model, dataset.flat(valid_idx), dataset.factors.labels[valid_idx, col])
            if len(valid_idx) else float("nan")
        )
        history.add(epoch, total / count, valid_acc, *q)
        logger.info("clf %s epoch %d loss %.4f valid_acc %.3f", attribute, epoch, total / count, valid_acc)
    model.set_trainable(False)
    model.training_meta = {
        "seed": params.seed,
        "epochs": params.epochs,
        "final_train_loss": history.rows[-1][1] if history.rows else None,
        "final_valid_acc": history.rows[-1][2] if history.rows else None,
        "mode": params.mode,
        "attribute": attribute,
        "group_pair": pair if params.mode == "worst_group" else None,
        "hyperparams": asdict(params),
        "group_weights": q.tolist(),
    }
    return model, history


def _per_sample_bce(p, t):
    p = np.clip(p, T.BCE_EPS, 1.0 - T.BCE_EPS)
    return -(t * np.log(p) + (1.0 - t) * np.log1p(-p)).reshape(-1)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(model: Mlp, directory) -> Path:
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CheckpointError(f"{directory}: cannot create ({exc.strerror})") from exc
    files = {}
    for key, arr in model.weight_arrays().items():
        fname = f"{key}.cfat"
        tensorfile.save(directory / fname, arr)
        files[key] = fname
    manifest = {
        "checkpoint_version": CHECKPOINT_VERSION,
        "kind": model.kind,
        "name": model.name,
        "spec": asdict(model.spec),
        "weights": files,
        "training_meta": model.training_meta,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_checkpoint(directory) -> Mlp:
    directory = Path(directory)
    path = directory / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read ({exc.strerror})") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: invalid JSON ({exc})") from exc
    if manifest.get("checkpoint_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {manifest.get('checkpoint_version')}")
    spec = MlpSpec(**manifest["spec"])
    weights = []
    for i in range(len(spec.layer_dims) - 1):
        pair = []
        for part in ("w", "b"):
            key = f"layer{i}_{part}"
            fname = manifest["weights"].get(key)
            if fname is None:
                raise CheckpointError(f"{path}: manifest lists no file for {key}")
            fpath = directory / fname
            if not fpath.exists():
                raise CheckpointError(f"{fpath}: weight file listed in manifest is missing")
            try:
                pair.append(tensorfile.load(fpath))
            except TensorFileError as exc:
                raise CheckpointError(str(exc)) from exc
        weights.append(tuple(pair))
    return Mlp(spec, weights, kind=manifest["kind"], name=manifest.get("name", ""),
               training_meta=manifest.get("training_meta"))


def save_composite(composite: CompositeClassifier, path, member_dirs: dict) -> None:
    """Write a composite as JSON referencing member checkpoint directories by name."""
    terms = []
    for model, c in composite.terms:
        if not isinstance(model, Mlp) or model.name not in member_dirs:
            raise CheckpointError(f"composite member {getattr(model, 'name', model)!r} has no checkpoint")
        terms.append({"checkpoint": str(member_dirs[model.name]), "coefficient": c})
    Path(path).write_text(json.dumps({"name": composite.name, "terms": terms}, indent=2) + "\n")


def load_composite(path) -> CompositeClassifier:
    raw = json.loads(Path(path).read_text())
    base = Path(path).parent
    terms = []
    for term in raw["terms"]:
        ckpt = Path(term["checkpoint"])
        terms.append((load_checkpoint(ckpt if ckpt.is_absolute() else base / ckpt), term["coefficient"]))
    return CompositeClassifier(terms, name=raw.get("name", ""))
