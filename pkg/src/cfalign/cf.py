"""Latent-shift counterfactuals.

An image is encoded to ``z0``; the gradient ``g`` of the base classifier
through the decoder is taken once at ``z0``; candidates ``z0 - lam * g`` are
decoded along an increasing geometric ``lam`` schedule until the base
prediction has dropped by ``target_drop`` or begins to rise again.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import DegenerateInputError, DimensionError
from .models import input_dim
from .tensor import Tape, Tensor, no_grad

CROSSED = "crossed"
TURNING_POINT = "turning_point"
EXHAUSTED = "exhausted"


@dataclass
class SearchConfig:
    lambda0: float = 1.0
    multiplier: float = 1.5
    max_steps: int = 40
    target_drop: float = 0.6


@dataclass
class CFResult:
    z0: np.ndarray
    z_star: np.ndarray
    direction: np.ndarray  # d f_b(D(z)) / dz at z0
    lambda_star: float
    trace: list  # (lambda, base prediction), lambda = 0 first
    x0_recon: np.ndarray
    x_cf: np.ndarray
    base_pred_0: float
    base_pred_star: float
    status: str
    sample_id: Optional[int] = None

    @property
    def base_delta(self) -> float:
        return self.base_pred_star - self.base_pred_0

    def latent_at(self, lam: float) -> np.ndarray:
        return self.z0 - lam * self.direction


def _latent(z) -> np.ndarray:
    arr = np.asarray(z.data if isinstance(z, Tensor) else z, dtype=float)
    return arr.reshape(1, -1)


def encode(encoder, image) -> np.ndarray:
    arr = np.asarray(image, dtype=float).reshape(1, -1)
    if arr.shape[1] != encoder.spec.input_dim:
        raise DimensionError(f"encoder expects {encoder.spec.input_dim} pixels, got {arr.shape[1]}")
    with no_grad():
        return encoder.forward(Tensor._wrap(arr)).data


def decode(decoder, z) -> np.ndarray:
    z = _latent(z)
    if z.shape[1] != decoder.spec.input_dim:
        raise DimensionError(f"decoder expects latent size {decoder.spec.input_dim}, got {z.shape[1]}")
    with no_grad():
        return decoder.forward(Tensor._wrap(z)).data


def _score(classifier, decoder, z: np.ndarray) -> float:
    with no_grad():
        return classifier.forward(decoder.forward(Tensor._wrap(z))).item()


def latent_gradient(classifier, decoder, z) -> np.ndarray:
    """Reverse-mode ``d classifier(decoder(z)) / dz`` for one latent vector."""
    z = Tensor(_latent(z), requires_grad=True)
    if z.shape[1] != decoder.spec.input_dim:
        raise DimensionError(f"decoder expects latent size {decoder.spec.input_dim}, got {z.shape[1]}")
    if input_dim(classifier) != decoder.spec.output_dim:
        raise DimensionError("classifier input does not match decoder output")
    with Tape() as tape:
        out = classifier.forward(decoder.forward(z))
        tape.backward(T.tensor_sum(out))
    return z.grad


def lambda_search(classifier, encoder, decoder, image, config: SearchConfig = None,
                  sample_id=None) -> CFResult:
    config = config or SearchConfig()
    z0 = encode(encoder, image)
    return search_from_latent(classifier, decoder, z0, config, sample_id=sample_id)


def search_from_latent(classifier, decoder, z0, config: SearchConfig = None,
                       sample_id=None) -> CFResult:
    config = config or SearchConfig()
    z0 = _latent(z0)
    x0 = decode(decoder, z0)
    p0 = _score(classifier, decoder, z0)
    g = latent_gradient(classifier, decoder, z0)
    if not np.any(g):
        raise DegenerateInputError("latent gradient is zero: no direction to move")

    trace = [(0.0, p0)]
    lam = float(config.lambda0)
    prev = p0
    status, lam_star = EXHAUSTED, None
    for _ in range(config.max_steps):
        p = _score(classifier, decoder, z0 - lam * g)
        trace.append((lam, p))
        if p0 - p >= config.target_drop:
            status, lam_star = CROSSED, lam
            break
        if p > prev:
            status, lam_star = TURNING_POINT, trace[-2][0]
            break
        prev = p
        lam *= config.multiplier
    if status == EXHAUSTED:
        lam_star = min(trace, key=lambda e: e[1])[0]

    z_star = z0 - lam_star * g
    x_cf = decode(decoder, z_star)
    return CFResult(
        z0=z0,
        z_star=z_star,
        direction=g,
        lambda_star=lam_star,
        trace=trace,
        x0_recon=x0,
        x_cf=x_cf,
        base_pred_0=p0,
        base_pred_star=_score(classifier, decoder, z_star),
        status=status,
        sample_id=sample_id,
    )


@dataclass
class SweepTrace:
    base_name: str
    lambdas: np.ndarray
    base: np.ndarray
    downstream: dict = field(default_factory=dict)  # name -> predictions

    def to_csv(self) -> str:
        names = list(self.downstream)
        lines = [",".join(["lambda", f"base:{self.base_name}"] + [f"ds:{n}" for n in names])]
        for i, lam in enumerate(self.lambdas):
            row = [lam, self.base[i]] + [self.downstream[n][i] for n in names]
            lines.append(",".join(f"{v:.9g}" for v in row))
        return "\n".join(lines) + "\n"


def sweep(base, downstream: dict, result: CFResult, decoder, n_points: int = 20,
          base_name: str = "base") -> SweepTrace:
    """Decode ``n_points`` evenly spaced latents on [0, lambda*] and score every classifier."""
    if n_points < 2:
        raise ValueError("n_points must be at least 2")
    lambdas = np.linspace(0.0, result.lambda_star, n_points)
    images = [decode(decoder, result.latent_at(lam)) for lam in lambdas]

    def column(model):
        with no_grad():
            return np.array([model.forward(Tensor._wrap(img)).item() for img in images])

    return SweepTrace(
        base_name=base_name,
        lambdas=lambdas,
        base=column(base),
        downstream={name: column(m) for name, m in downstream.items()},
    )
