import json

import numpy as np
import pytest

from cfalign import models, tensor as T
from cfalign.data import DatasetConfig, build_dataset
from cfalign.errors import CheckpointError, ConfigError, DimensionError
from cfalign.models import ClassifierParams, CompositeClassifier, Mlp, MlpSpec
from cfalign.tensor import Tensor


@pytest.fixture(scope="module")
def tiny():
    return build_dataset(DatasetConfig(n_samples=300, seed=5, group_pair=["blob_size", "frame"]))


def const_model(value, dim=4):
    # zero weights, bias = logit(value)
    spec = MlpSpec([dim, 1], output_activation="sigmoid")
    b = np.array([np.log(value / (1 - value))])
    return Mlp(spec, [(np.zeros((dim, 1)), b)])


def test_composite_arithmetic():
    x = Tensor(np.ones((1, 4)))
    comp = CompositeClassifier([(const_model(0.8), 1.0), (const_model(0.5), 0.3)])
    assert comp.forward(x).item() == pytest.approx(0.95, abs=1e-12)


def test_composite_unsquashed_above_one():
    comp = CompositeClassifier([(const_model(0.9), 1.0), (const_model(0.9), 1.0)])
    assert comp.forward(Tensor(np.zeros((1, 4)))).item() == pytest.approx(1.8)


def test_composite_zero_coefficient_bitwise(lab):
    f = lab.classifiers["blob_size"]
    comp = CompositeClassifier([(f, 1.0), (lab.classifiers["texture"], 0.0)])
    x = lab.dataset.flat(lab.dataset.indices("test")[:50])
    assert models.predict_batch(comp, x).tobytes() == models.predict_batch(f, x).tobytes()


def test_composite_shape_mismatch():
    with pytest.raises(DimensionError):
        CompositeClassifier([(const_model(0.5, 4), 1.0), (const_model(0.5, 5), 1.0)])


def test_predict_dimension_error(lab):
    with pytest.raises(DimensionError):
        models.predict(lab.classifiers["frame"], np.zeros(10))


def test_classifier_training_deterministic(tiny):
    p = ClassifierParams(epochs=2, seed=4)
    a, ha = models.train_classifier(tiny, "blob_size", p)
    b, hb = models.train_classifier(tiny, "blob_size", p)
    assert ha.to_csv() == hb.to_csv()
    for (wa, ba), (wb, bb) in zip(a.layers, b.layers):
        assert wa.data.tobytes() == wb.data.tobytes() and ba.data.tobytes() == bb.data.tobytes()


def test_worst_group_eta_zero_is_erm(tiny):
    erm, h1 = models.train_classifier(tiny, "blob_size", ClassifierParams(epochs=2, seed=1))
    wg, h2 = models.train_classifier(
        tiny, "blob_size", ClassifierParams(epochs=2, seed=1, mode="worst_group", eta=0.0))
    assert [r[1] for r in h1.rows] == [r[1] for r in h2.rows]
    for (wa, _), (wb, _) in zip(erm.layers, wg.layers):
        assert wa.data.tobytes() == wb.data.tobytes()


def test_worst_group_upweights_hard_group(tiny):
    _, h = models.train_classifier(
        tiny, "blob_size", ClassifierParams(epochs=2, seed=1, mode="worst_group", eta=0.5))
    q = np.array(h.rows[-1][3:])
    assert q.sum() == pytest.approx(1.0)
    assert not np.allclose(q, 0.25)


def test_worst_group_empty_group_rejected():
    cfg = DatasetConfig(n_samples=200, seed=1, thresholds=[0.5, 0.5, 0.5, 0.999999, 0.5])
    ds = build_dataset(cfg)
    with pytest.raises(ConfigError, match="empty"):
        models.train_classifier(ds, "blob_size", ClassifierParams(epochs=1, mode="worst_group",
                                                                  group_pair=["blob_size", "frame"]))


def test_unknown_mode(tiny):
    with pytest.raises(ConfigError):
        models.train_classifier(tiny, "blob_size", ClassifierParams(epochs=1, mode="dro"))


def test_trained_accuracy(lab):
    ds = lab.dataset
    te = ds.indices("test")
    for name, m in lab.classifiers.items():
        acc = models.accuracy(m, ds.flat(te), ds.factors.label(name)[te])
        assert acc > 0.85, (name, acc)


def test_autoencoder_reconstruction(lab):
    ds = lab.dataset
    x = ds.flat(ds.indices("test"))
    with T.no_grad():
        recon = lab.decoder.forward(lab.encoder.forward(Tensor(x))).data
    mse = float(((recon - x) ** 2).mean())
    assert mse < 0.02
    assert lab.ae_history.rows[-1][2] < lab.ae_history.rows[0][2]


def test_checkpoint_round_trip(lab, tmp_path):
    m = lab.classifiers["texture"]
    models.save_checkpoint(m, tmp_path / "c")
    back = models.load_checkpoint(tmp_path / "c")
    x = lab.dataset.flat(np.arange(20))
    assert models.predict_batch(back, x).tobytes() == models.predict_batch(m, x).tobytes()
    assert back.training_meta["attribute"] == "texture"
    assert back.name == m.name and back.kind == "classifier"


def test_checkpoint_missing_file(lab, tmp_path):
    models.save_checkpoint(lab.classifiers["frame"], tmp_path / "c")
    (tmp_path / "c" / "layer1_w.cfat").unlink()
    with pytest.raises(CheckpointError, match="layer1_w"):
        models.load_checkpoint(tmp_path / "c")


def test_checkpoint_bad_magic(lab, tmp_path):
    models.save_checkpoint(lab.classifiers["frame"], tmp_path / "c")
    (tmp_path / "c" / "layer0_b.cfat").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(CheckpointError, match="layer0_b"):
        models.load_checkpoint(tmp_path / "c")


def test_checkpoint_version(lab, tmp_path):
    models.save_checkpoint(lab.classifiers["frame"], tmp_path / "c")
    path = tmp_path / "c" / "manifest.json"
    man = json.loads(path.read_text())
    man["checkpoint_version"] = 99
    path.write_text(json.dumps(man))
    with pytest.raises(CheckpointError, match="version"):
        models.load_checkpoint(tmp_path / "c")


def test_composite_json_round_trip(lab, tmp_path):
    dirs = {}
    for n in ("blob_size", "texture"):
        dirs[n] = models.save_checkpoint(lab.classifiers[n], tmp_path / n)
    comp = CompositeClassifier([(lab.classifiers["blob_size"], 1.0), (lab.classifiers["texture"], 0.3)])
    models.save_composite(comp, tmp_path / "comp.json", dirs)
    back = models.load_composite(tmp_path / "comp.json")
    x = lab.dataset.flat(np.arange(10))
    np.testing.assert_array_equal(models.predict_batch(back, x), models.predict_batch(comp, x))
