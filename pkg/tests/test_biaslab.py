import math

import numpy as np
import pytest

from cfalign import biaslab as BL
from cfalign import cf
from cfalign.biaslab import RectifyParams, RectifyState
from cfalign.errors import ContractError, IneligibleSampleError
from cfalign.models import predict_batch


def small(**kw):
    base = dict(lr=0.05, max_iter=3, n_valid=12, batch=5, patience=10, seed=2)
    base.update(kw)
    return RectifyParams(**base)


def test_zero_coefficient_bitwise(lab):
    f, g = lab.classifiers["blob_size"], lab.classifiers["texture"]
    x = lab.dataset.flat(np.arange(40))
    assert predict_batch(BL.induce_bias(f, g, 0.0), x).tobytes() == predict_batch(f, x).tobytes()


def test_composite_gradient_linear(lab):
    f, g = lab.classifiers["blob_size"], lab.classifiers["texture"]
    z = cf.encode(lab.encoder, lab.dataset.flat([5]))
    for c in (0.3, -1.7):
        got = cf.latent_gradient(BL.induce_bias(f, g, c), lab.decoder, z)
        want = cf.latent_gradient(f, lab.decoder, z) + c * cf.latent_gradient(g, lab.decoder, z)
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


def test_detect_self_planted(lab):
    f = lab.classifiers["blob_size"]
    rep = BL.detect_bias(BL.induce_bias(f, f, 0.0), f, f, lab.dataset, lab.encoder, lab.decoder, n=20)
    assert rep.r_before == pytest.approx(1.0, abs=1e-12) and rep.r_after == pytest.approx(1.0, abs=1e-12)
    # (1 + c) f moves f by exactly 1 / (1 + c) of its own change
    rep = BL.detect_bias(BL.induce_bias(f, f, 0.3), f, f, lab.dataset, lab.encoder, lab.decoder, n=20)
    assert rep.r_after == pytest.approx(1 / 1.3, abs=1e-12)


def test_detect_zero_coefficient_no_gap(lab, tmp_path):
    f, g = lab.classifiers["blob_size"], lab.classifiers["texture"]
    rep = BL.detect_bias(BL.induce_bias(f, g, 0.0), f, g, lab.dataset, lab.encoder, lab.decoder,
                         n=20, coefficient=0.0, out_dir=tmp_path, n_examples=2)
    assert abs(rep.gap) < 0.05
    assert len(rep.cf_image_pairs) == 2
    sid = rep.cf_image_pairs[0][0]
    assert (tmp_path / f"sweep_{sid}_before.csv").exists() and (tmp_path / "report.json").exists()


def test_zero_iterations_keeps_beta(lab):
    f, g = lab.classifiers["blob_size"], lab.classifiers["texture"]
    st, comp = BL.rectify(BL.induce_bias(f, g, 0.3), g, lab.dataset, lab.encoder, lab.decoder,
                          small(max_iter=0, beta0=0.25))
    assert st.best_beta == 0.25 and st.beta == 0.25 and st.curves == [] and st.iteration == 0


def test_zero_learning_rate_keeps_beta(lab):
    f, g = lab.classifiers["blob_size"], lab.classifiers["texture"]
    st, _ = BL.rectify(BL.induce_bias(f, g, 0.3), g, lab.dataset, lab.encoder, lab.decoder,
                       small(lr=0.0, max_iter=3))
    assert [b for _, _, b in st.curves] == [0.0, 0.0, 0.0]


def test_self_bias_starts_at_one_and_best_is_monotone(lab):
    f = lab.classifiers["blob_size"]
    st, _ = BL.rectify(f, f, lab.dataset, lab.encoder, lab.decoder, small(max_iter=4))
    assert st.initial_valid_psi == pytest.approx(1.0, abs=1e-12)
    best = [abs(st.initial_valid_psi)]
    for _, v, _ in st.curves:
        best.append(min(best[-1], abs(v)))
    assert all(b <= a for a, b in zip(best, best[1:]))


def test_returns_best_not_last(lab):
    f, g = lab.classifiers["blob_size"], lab.classifiers["texture"]
    st, comp = BL.rectify(BL.induce_bias(f, g, 0.3), g, lab.dataset, lab.encoder, lab.decoder,
                          small(max_iter=6, lr=0.2))
    candidates = [(abs(st.initial_valid_psi), 0.0)] + [(abs(v), b) for _, v, b in st.curves]
    assert st.best_beta == min(candidates)[1]
    assert comp.terms[1][1] == st.best_beta


def test_batches_respect_filter(lab):
    f, g = lab.classifiers["blob_size"], lab.classifiers["texture"]
    target = BL.induce_bias(f, g, 0.3)
    params = small()
    st = RectifyState(beta=0.0)
    batch = BL._next_batch(st, BL.rectified(target, g, 0.0), lab.dataset, lab.encoder, lab.decoder,
                           lab.dataset.indices("train"), params, None, 1)
    assert len(batch) >= params.batch
    assert all(-r.base_delta > 0.6 for r in batch)


def test_ineligible_filter_error(lab):
    f = lab.classifiers["blob_size"]
    with pytest.raises(IneligibleSampleError, match="base-change filter"):
        BL.rectify(f, lab.classifiers["texture"], lab.dataset, lab.encoder, lab.decoder,
                   small(min_base_change=1.5, max_iter=1))


def test_resume_continues_exactly(lab, tmp_path):
    f, g = lab.classifiers["blob_size"], lab.classifiers["texture"]
    target = BL.induce_bias(f, g, 0.3)
    full, _ = BL.rectify(target, g, lab.dataset, lab.encoder, lab.decoder, small(max_iter=4))
    BL.rectify(target, g, lab.dataset, lab.encoder, lab.decoder, small(max_iter=2), run_dir=tmp_path)
    state = BL.load_state(tmp_path)
    state.stopped = ""
    resumed, _ = BL.rectify(target, g, lab.dataset, lab.encoder, lab.decoder, small(max_iter=4),
                            state=state, run_dir=tmp_path)
    assert resumed.curves == full.curves and resumed.beta == full.beta
    lines = (tmp_path / "curves.csv").read_text().splitlines()
    assert lines[0] == "iteration,beta,train_psi,valid_psi" and len(lines) == 5


def test_state_invariants_and_json():
    with pytest.raises(ContractError):
        RectifyState(beta=0.0, iteration=2, curves=[(0.1, 0.1, 0.0)])
    with pytest.raises(ContractError):
        RectifyState(beta=0.0, momentum_term=math.inf)
    st = RectifyState(beta=-0.1, iteration=1, curves=[(0.5, math.nan, -0.1)], initial_valid_psi=0.4)
    back = RectifyState.from_json(st.to_json())
    assert back.beta == st.beta and back.curves[0][0] == 0.5 and math.isnan(back.curves[0][1])


def test_divergence_reported_not_raised():
    st = RectifyState(beta=0.0, iteration=2, curves=[(0.5, 0.6, -0.1), (0.5, 0.7, -0.2)], initial_valid_psi=0.5)
    assert st.diverged
    st.curves[1] = (0.5, 0.2, -0.2)
    assert not st.diverged


def test_report_untouched_row_identical(lab, tmp_path):
    f, g = lab.classifiers["blob_size"], lab.classifiers["texture"]
    targets = {"blob_size": BL.induce_bias(f, g, 0.3)}
    states = {"blob_size": RectifyState(beta=-0.3, best_beta=-0.3)}
    rep = BL.rectify_report(targets, g, states, {"texture": g, "frame": lab.classifiers["frame"]},
                            lab.dataset, lab.encoder, lab.decoder, bias_name="texture", n=15, out_dir=tmp_path)
    i = rep.before.base_names.index("texture")
    np.testing.assert_array_equal(rep.before.mean[i], rep.after.mean[i])
    assert set(rep.moved_toward_zero()) == {"blob_size"}
    for stem in ("before", "after"):
        assert (tmp_path / f"{stem}.csv").exists() and (tmp_path / f"{stem}.svg").exists()
