import math

import numpy as np
import pytest
from scipy.optimize import brentq
from scipy.special import expit

from cfalign import cf
from cfalign.cf import SearchConfig
from cfalign.errors import DegenerateInputError, DimensionError
from cfalign.models import Mlp, MlpSpec
from graphs import central_difference, relative_error


def sigmoid(a):
    return float(expit(a))


def identity_decoder(d):
    return Mlp(MlpSpec([d, d]), [(np.eye(d), np.zeros(d))], kind="decoder")


def linear_classifier(w, b):
    w = np.asarray(w, dtype=float)
    return Mlp(MlpSpec([len(w), 1], output_activation="sigmoid"), [(w.reshape(-1, 1), np.array([b]))])


def vee_classifier(k, c):
    """sigmoid(k*|z| - c) on a scalar latent, via two ReLUs."""
    spec = MlpSpec([1, 2, 1], output_activation="sigmoid")
    return Mlp(spec, [(np.array([[1.0, -1.0]]), np.zeros(2)), (np.array([[k], [k]]), np.array([-c]))])


W = np.array([0.7, -1.2, 0.4])
B = 0.3
Z0 = np.array([[1.5, -0.8, 0.2]])


def test_gradient_matches_analytic():
    f, dec = linear_classifier(W, B), identity_decoder(3)
    a = (Z0 @ W).item() + B
    expected = sigmoid(a) * (1 - sigmoid(a)) * W
    got = cf.latent_gradient(f, dec, Z0).ravel()
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-10)


def test_gradient_matches_finite_difference(lab):
    f, dec = lab.classifiers["blob_size"], lab.decoder
    z0 = cf.encode(lab.encoder, lab.dataset.flat([3]))
    g = cf.latent_gradient(f, dec, z0)

    z = z0.copy()
    fd = central_difference(lambda: cf._score(f, dec, z), [z], h=1e-5)[0]
    assert relative_error(g.ravel(), fd) < 1e-5


def test_crossed_lambda_matches_root_oracle():
    f, dec = linear_classifier(W, B), identity_decoder(3)
    res = cf.search_from_latent(f, dec, Z0)
    a = (Z0 @ W).item() + B
    slope = sigmoid(a) * (1 - sigmoid(a)) * float(W @ W)
    p0 = sigmoid(a)
    # prediction along the path is sigmoid(a - lam * slope); solve for a drop of 0.6
    lam_cross = brentq(lambda lam: p0 - sigmoid(a - lam * slope) - 0.6, 0, 1e3)
    k = math.ceil(math.log(lam_cross) / math.log(1.5))
    assert res.status == cf.CROSSED
    assert res.lambda_star == pytest.approx(1.5**k, rel=1e-12)
    assert res.base_pred_0 - res.base_pred_star >= 0.6
    preds = [p for _, p in res.trace]
    assert all(b < a for a, b in zip(preds, preds[1:]))


def test_turning_point_by_hand():
    f, dec = vee_classifier(2.0, 1.5), identity_decoder(1)
    res = cf.search_from_latent(f, dec, np.array([[1.0]]))
    assert res.status == cf.TURNING_POINT
    # z moves 1 -> 0.53 -> 0.30 -> -0.06 -> -0.59; |z| grows again on the 4th step
    assert res.lambda_star == pytest.approx(2.25)
    lams = [l for l, _ in res.trace]
    i = lams.index(res.lambda_star)
    assert res.trace[i + 1][1] > res.trace[i][1]
    assert res.base_pred_star == pytest.approx(res.trace[i][1], abs=1e-15)


def test_exhausted_returns_argmin():
    f, dec = linear_classifier([0.05], 2.0), identity_decoder(1)
    res = cf.search_from_latent(f, dec, np.array([[0.0]]), SearchConfig(max_steps=3))
    assert res.status == cf.EXHAUSTED
    assert len(res.trace) == 4
    assert res.lambda_star == min(res.trace, key=lambda e: e[1])[0]


def test_zero_gradient_is_degenerate():
    f, dec = linear_classifier([0.0, 0.0], 1.0), identity_decoder(2)
    with pytest.raises(DegenerateInputError):
        cf.search_from_latent(f, dec, np.zeros((1, 2)))


def test_dimension_errors(lab):
    with pytest.raises(DimensionError):
        cf.encode(lab.encoder, np.zeros(17))
    with pytest.raises(DimensionError):
        cf.decode(lab.decoder, np.zeros(3))
    with pytest.raises(DimensionError):
        cf.latent_gradient(linear_classifier([1.0] * 5, 0.0), lab.decoder, np.zeros(16))


def test_search_contract_on_trained_models(lab):
    f = lab.classifiers["blob_size"]
    te = lab.dataset.indices("test")
    for i in te[:20]:
        res = cf.lambda_search(f, lab.encoder, lab.decoder, lab.dataset.flat([i]))
        assert res.trace[0] == (0.0, res.base_pred_0)
        if res.status == cf.CROSSED:
            assert res.base_pred_0 - res.base_pred_star >= 0.6
        elif res.status == cf.TURNING_POINT:
            lams = [l for l, _ in res.trace]
            j = lams.index(res.lambda_star)
            assert res.trace[j + 1][1] > res.trace[j][1]
        np.testing.assert_array_equal(res.z_star, res.latent_at(res.lambda_star))


def test_search_deterministic(lab):
    f, x = lab.classifiers["texture"], lab.dataset.flat([7])
    a = cf.lambda_search(f, lab.encoder, lab.decoder, x)
    b = cf.lambda_search(f, lab.encoder, lab.decoder, x)
    assert a.trace == b.trace and a.x_cf.tobytes() == b.x_cf.tobytes()


def test_sweep_properties():
    f, dec = linear_classifier(W, B), identity_decoder(3)
    g = linear_classifier([0.1, 0.5, -0.3], 0.0)
    res = cf.search_from_latent(f, dec, Z0)
    tr = cf.sweep(f, {"self": f, "other": g}, res, dec, n_points=12, base_name="f")
    assert tr.lambdas[0] == 0 and tr.lambdas[-1] == res.lambda_star
    assert tr.base[0] == pytest.approx(res.base_pred_0, abs=1e-15)
    assert tr.base[-1] == pytest.approx(res.base_pred_star, abs=1e-15)
    np.testing.assert_array_equal(tr.base, tr.downstream["self"])
    assert np.all(np.diff(tr.base) <= 0)
    lines = tr.to_csv().splitlines()
    assert lines[0] == "lambda,base:f,ds:self,ds:other"
    assert len(lines) == 13
    with pytest.raises(ValueError):
        cf.sweep(f, {}, res, dec, n_points=1)
