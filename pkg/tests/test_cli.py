import json

import pytest

from cfalign import cli


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "data.json").write_text(json.dumps({"n_samples": 900}))
    assert cli.main(["gen-data", "--config", str(root / "data.json"), "--out", str(root / "d"), "--seed", "4"]) == 0
    train = {"dataset": str(root / "d"), "autoencoder": {"epochs": 6},
             "classifiers": [{"attribute": "blob_size", "epochs": 6}, {"attribute": "texture", "epochs": 6}]}
    (root / "train.json").write_text(json.dumps(train))
    assert cli.main(["train", "--config", str(root / "train.json"), "--out", str(root / "m"), "--seed", "1"]) == 0
    return root


def write(path, obj):
    path.write_text(json.dumps(obj) if not isinstance(obj, str) else obj)
    return str(path)


def test_gen_data_layout_and_run_json(pipeline):
    d = pipeline / "d"
    names = sorted(p.name for p in d.iterdir())
    assert names == ["factors.cfat", "images.cfat", "labels.cfat", "manifest.json", "run.json"]
    run = json.loads((d / "run.json").read_text())
    assert run["config"]["n_samples"] == 900 and run["config"]["seed"] == 4
    assert run["config"]["pixel_noise"] == 0.1  # defaults are materialised


def test_malformed_json_exit_2(tmp_path, capsys):
    cfg = write(tmp_path / "bad.json", '{"n_samples": 10,\n  oops}')
    assert cli.main(["gen-data", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "line 2, column 3" in capsys.readouterr().err


def test_unknown_key_exit_2(tmp_path):
    cfg = write(tmp_path / "c.json", {"n_sample": 10})
    assert cli.main(["gen-data", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


def test_missing_dataset_exit_3(tmp_path):
    cfg = write(tmp_path / "t.json", {"dataset": str(tmp_path / "missing")})
    assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == 3


def test_eta_zero_matches_erm(pipeline, tmp_path):
    cfg = write(tmp_path / "t.json", {"dataset": str(pipeline / "d"),
                                      "classifiers": [{"attribute": "blob_size", "epochs": 2,
                                                       "group_pair": ["blob_size", "texture"]}]})
    assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / "erm"), "--seed", "3"]) == 0
    assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / "wg"), "--seed", "3",
                     "--mode", "worst_group", "--eta", "0"]) == 0
    loss = [l.split(",")[1] for l in (tmp_path / "erm" / "blob_size_history.csv").read_text().splitlines()]
    loss_wg = [l.split(",")[1] for l in (tmp_path / "wg" / "blob_size_history.csv").read_text().splitlines()]
    assert loss == loss_wg


def test_align_diagonal(pipeline, tmp_path):
    cfg = write(tmp_path / "a.json", {"dataset": str(pipeline / "d"), "models": str(pipeline / "m"),
                                      "classifiers": ["blob_size", "texture"], "n_per_class": 12,
                                      "min_support": 1})
    assert cli.main(["align", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    rows = (tmp_path / "a" / "matrix.csv").read_text().splitlines()[1:]
    for i, row in enumerate(rows):
        cell = row.split(",")[1 + i]
        if not cell.endswith("|0"):
            assert cell.startswith("1|0|")
    for name in ("matrix.svg", "prediction_correlation.svg", "label_correlation.svg", "flags.csv"):
        assert (tmp_path / "a" / name).exists()


def test_align_low_support_exit_5(pipeline, tmp_path):
    cfg = write(tmp_path / "a.json", {"dataset": str(pipeline / "d"), "models": str(pipeline / "m"),
                                      "classifiers": ["blob_size"], "n_per_class": 3})
    assert cli.main(["align", "--config", cfg, "--out", str(tmp_path / "a")]) == 5


def _positive_and_negative(pipeline):
    from cfalign import alignment, cf, data, models

    ds = data.load_dataset(pipeline / "d")
    f = models.load_checkpoint(pipeline / "m" / "blob_size")
    enc, dec = models.load_checkpoint(pipeline / "m" / "encoder"), models.load_checkpoint(pipeline / "m" / "decoder")
    scores = models.predict_batch(f, alignment.reconstruct(enc, dec, ds.flat()))
    assert scores.max() > 0.5 > scores.min()
    return int(scores.argmax()), int(scores.argmin())


def test_cf_outputs_and_duplicate_column(pipeline, tmp_path):
    pos, _ = _positive_and_negative(pipeline)
    cfg = write(tmp_path / "c.json", {"dataset": str(pipeline / "d"), "models": str(pipeline / "m"),
                                      "base": "blob_size", "downstream": ["blob_size", "texture"],
                                      "samples": [pos]})
    assert cli.main(["cf", "--config", cfg, "--out", str(tmp_path / "c")]) == 0
    lines = (tmp_path / "c" / f"sweep_{pos}.csv").read_text().splitlines()
    assert lines[0] == "lambda,base:blob_size,ds:blob_size,ds:texture"
    for line in lines[1:]:
        cols = line.split(",")
        assert cols[1] == cols[2]
    for name in (f"sample_{pos}_cf.pgm", f"sweep_{pos}.svg", "montage.svg"):
        assert (tmp_path / "c" / name).exists()


def test_cf_negative_sample_exit_6(pipeline, tmp_path, capsys):
    _, neg = _positive_and_negative(pipeline)
    cfg = write(tmp_path / "c.json", {"dataset": str(pipeline / "d"), "models": str(pipeline / "m"),
                                      "base": "blob_size", "samples": [neg]})
    assert cli.main(["cf", "--config", cfg, "--out", str(tmp_path / "c")]) == 6
    assert "not positive" in capsys.readouterr().err


def test_bias_zero_coefficient(pipeline, tmp_path):
    cfg = write(tmp_path / "b.json", {"dataset": str(pipeline / "d"), "models": str(pipeline / "m"),
                                      "target": "blob_size", "planted": "texture", "coefficient": 0.0, "n": 15})
    assert cli.main(["bias", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    rep = json.loads((tmp_path / "b" / "report.json").read_text())
    assert abs(rep["gap"]) < 0.05


def test_rectify_resume(pipeline, tmp_path):
    base = {"dataset": str(pipeline / "d"), "models": str(pipeline / "m"), "bias": "texture",
            "targets": ["blob_size"], "report_n": 10,
            "params": {"lr": 0.05, "batch": 4, "n_valid": 8, "max_iter": 4}}
    cfg = write(tmp_path / "full.json", base)
    assert cli.main(["rectify", "--config", cfg, "--out", str(tmp_path / "full")]) == 0
    half = dict(base, params=dict(base["params"], max_iter=2))
    assert cli.main(["rectify", "--config", write(tmp_path / "half.json", half), "--out", str(tmp_path / "r")]) == 0
    state = json.loads((tmp_path / "r" / "blob_size" / "state.json").read_text())
    state["stopped"] = ""
    (tmp_path / "r" / "blob_size" / "state.json").write_text(json.dumps(state))
    assert cli.main(["rectify", "--config", write(tmp_path / "resume.json", dict(base, resume=True)),
                     "--out", str(tmp_path / "r")]) == 0
    a = (tmp_path / "full" / "blob_size" / "curves.csv").read_text()
    assert a == (tmp_path / "r" / "blob_size" / "curves.csv").read_text()
    assert len(a.splitlines()) == 5
