"""Command-line entry point: ``cfalign <subcommand> --config run.json --out dir``.

Every run writes ``run.json`` (the resolved config, defaults filled in) next
to its outputs.  Failures map to exit codes through ``CfalignError.exit_code``.
"""

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

from . import alignment, biaslab, cf, report
from .data import DatasetConfig, generate_dataset, load_dataset
from .errors import (
    CfalignError,
    ConfigError,
    IneligibleSampleError,
    LowSupportError,
    TensorFileError,
)
from .models import (
    AutoencoderParams,
    ClassifierParams,
    load_checkpoint,
    save_checkpoint,
    save_composite,
    train_autoencoder,
    train_classifier,
)

logger = logging.getLogger("cfalign")


# ------------------------------------------------------------------ config


def read_config(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise TensorFileError(f"{path}: cannot read config ({exc.strerror})") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return raw


def build(cls, raw, where: str):
    """Dataclass from a dict, refusing keys the class does not know."""
    raw = dict(raw or {})
    known = {f.name for f in fields(cls)}
    extra = sorted(set(raw) - known)
    if extra:
        raise ConfigError(f"{where}: unknown keys {extra}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def take(raw: dict, defaults: dict, where: str) -> dict:
    extra = sorted(set(raw) - set(defaults))
    if extra:
        raise ConfigError(f"{where}: unknown keys {extra}")
    out = dict(defaults)
    out.update(raw)
    return out


def require(cfg: dict, key: str, where: str):
    if cfg.get(key) is None:
        raise ConfigError(f"{where}: '{key}' is required")
    return cfg[key]


def write_run_json(out: Path, command: str, args, resolved: dict) -> None:
    doc = {"command": command, "seed": args.seed, "workers": args.workers, "config": resolved}
    report.write_text(out / "run.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _load_models(models_dir, names):
    base = Path(models_dir)
    return {n: load_checkpoint(base / n) for n in names}


def _load_ae(models_dir):
    base = Path(models_dir)
    return load_checkpoint(base / "encoder"), load_checkpoint(base / "decoder")


def _dataset(path):
    if not Path(path).is_dir():
        raise TensorFileError(f"{path}: dataset directory not found")
    return load_dataset(path)


# ---------------------------------------------------------------- commands


def cmd_gen_data(args, raw):
    raw = dict(raw)
    if args.seed is not None:
        raw["seed"] = args.seed
    cfg = DatasetConfig.from_dict(raw)
    resolved = cfg.to_dict()
    ds = generate_dataset(cfg, args.out, workers=args.workers)
    write_run_json(args.out, "gen-data", args, resolved)
    table = alignment.label_correlation(ds, "all")
    sys.stdout.write(report.correlation_csv(table))
    return 0


TRAIN_DEFAULTS = {"dataset": None, "autoencoder": None, "classifiers": []}
CLASSIFIER_KEYS = {"name", "attribute"}


def cmd_train(args, raw):
    cfg = take(raw, TRAIN_DEFAULTS, "train")
    ds = _dataset(require(cfg, "dataset", "train"))
    seed = args.seed if args.seed is not None else 0
    resolved = {"dataset": cfg["dataset"], "autoencoder": None, "classifiers": []}

    if cfg["autoencoder"] is not None:
        ae = build(AutoencoderParams, {"seed": seed, **cfg["autoencoder"]}, "train.autoencoder")
        resolved["autoencoder"] = asdict(ae)
    clf_specs = []
    for i, entry in enumerate(cfg["classifiers"]):
        entry = dict(entry)
        attribute = require(entry, "attribute", f"train.classifiers[{i}]")
        name = entry.pop("name", attribute)
        entry.pop("attribute")
        entry.setdefault("seed", seed)
        if args.mode is not None:
            entry["mode"] = args.mode
        if args.eta is not None:
            entry["eta"] = args.eta
        params = build(ClassifierParams, entry, f"train.classifiers[{i}]")
        ds.config.index(attribute)
        clf_specs.append((name, attribute, params))
        resolved["classifiers"].append({"name": name, "attribute": attribute, **asdict(params)})
    write_run_json(args.out, "train", args, resolved)

    if cfg["autoencoder"] is not None:
        enc, dec, hist = train_autoencoder(ds, ae)
        save_checkpoint(enc, args.out / "encoder")
        save_checkpoint(dec, args.out / "decoder")
        report.write_text(args.out / "autoencoder_history.csv", hist.to_csv())
    for name, attribute, params in clf_specs:
        model, hist = train_classifier(ds, attribute, params, name=name)
        save_checkpoint(model, args.out / name)
        report.write_text(args.out / f"{name}_history.csv", hist.to_csv())
        logger.info("trained %s (%s, %s)", name, attribute, params.mode)
    return 0


ALIGN_DEFAULTS = {
    "dataset": None,
    "models": None,
    "classifiers": None,
    "attributes": {},
    "downstream": None,
    "n_per_class": 400,
    "split": "test",
    "min_base_delta": alignment.MIN_BASE_DELTA,
    "min_support": alignment.MIN_SUPPORT,
    "gap": 0.3,
    "search": {},
}


def cmd_align(args, raw):
    cfg = take(raw, ALIGN_DEFAULTS, "align")
    search = build(cf.SearchConfig, cfg["search"], "align.search")
    cfg["search"] = asdict(search)
    ds = _dataset(require(cfg, "dataset", "align"))
    names = require(cfg, "classifiers", "align")
    cfg["downstream"] = cfg["downstream"] or list(names)
    cfg["attributes"] = {n: cfg["attributes"].get(n, n) for n in dict.fromkeys(names + cfg["downstream"])}
    write_run_json(args.out, "align", args, cfg)

    enc, dec = _load_ae(require(cfg, "models", "align"))
    models = _load_models(cfg["models"], dict.fromkeys(names + cfg["downstream"]))
    rows = {n: models[n] for n in names}
    cols = {n: models[n] for n in cfg["downstream"]}
    seed = args.seed if args.seed is not None else 0
    m = alignment.alignment_matrix(rows, ds, enc, dec, cfg["n_per_class"], seed, cfg["split"],
                                   cfg["min_base_delta"], search, cols, args.workers, cfg["min_support"])
    labels = alignment.label_correlation(ds, cfg["split"])
    flags = alignment.disagreement_flags(m, labels, cfg["attributes"], cfg["gap"])
    preds = alignment.prediction_correlation(cols, ds, cfg["split"])

    report.write_matrix(m, args.out, "matrix", "CF alignment (relative change)", flags)
    report.write_text(args.out / "prediction_correlation.csv", report.correlation_csv(preds))
    report.write_text(args.out / "prediction_correlation.svg",
                      report.heatmap_svg(preds.values, preds.names, preds.names, "prediction correlation"))
    report.write_text(args.out / "label_correlation.csv", report.correlation_csv(labels))
    report.write_text(args.out / "label_correlation.svg",
                      report.heatmap_svg(labels.values, labels.names, labels.names, "label correlation"))
    lines = ["base,downstream,relative_change,label_correlation,kind"]
    lines += [f"{f.base},{f.downstream},{f.relative_change:.9g},{f.label_correlation:.9g},{f.kind}" for f in flags]
    report.write_text(args.out / "flags.csv", "\n".join(lines) + "\n")
    for f in flags:
        logger.info("flag %s -> %s: R %.2f vs label corr %.2f (%s)", f.base, f.downstream,
                    f.relative_change, f.label_correlation, f.kind)
    if len(m.low_support) == len(m.base_names):
        raise LowSupportError(f"every row has fewer than {cfg['min_support']} samples passing the base-change filter")
    return 0


CF_DEFAULTS = {"dataset": None, "models": None, "base": None, "downstream": [], "samples": [],
               "n_points": 20, "search": {}}


def cmd_cf(args, raw):
    cfg = take(raw, CF_DEFAULTS, "cf")
    search = build(cf.SearchConfig, cfg["search"], "cf.search")
    cfg["search"] = asdict(search)
    ds = _dataset(require(cfg, "dataset", "cf"))
    base_name = require(cfg, "base", "cf")
    write_run_json(args.out, "cf", args, cfg)

    enc, dec = _load_ae(require(cfg, "models", "cf"))
    base = _load_models(cfg["models"], [base_name])[base_name]
    down = _load_models(cfg["models"], cfg["downstream"])
    rows, labels = [], []
    for sid in cfg["samples"]:
        if not 0 <= sid < len(ds.images):
            raise ConfigError(f"cf: sample id {sid} out of range")
        res = cf.lambda_search(base, enc, dec, ds.flat([sid]), search, sample_id=sid)
        if res.base_pred_0 <= 0.5:
            raise IneligibleSampleError(
                f"sample {sid}: base prediction {res.base_pred_0:.4f} is not positive (> 0.5)")
        trace = cf.sweep(base, down, res, dec, cfg["n_points"], base_name)
        report.write_text(args.out / f"sweep_{sid}.csv", trace.to_csv())
        report.write_text(args.out / f"sweep_{sid}.svg", report.sweep_svg(trace))
        report.write_pgm(args.out / f"sample_{sid}_input.pgm", ds.flat([sid]))
        report.write_pgm(args.out / f"sample_{sid}_recon.pgm", res.x0_recon)
        report.write_pgm(args.out / f"sample_{sid}_cf.pgm", res.x_cf)
        rows.append([ds.flat([sid]), res.x0_recon, res.x_cf, res.x_cf - res.x0_recon + 0.5])
        labels.append(f"#{sid} {res.status}")
        logger.info("sample %d: %s at lambda %.4g, base %.3f -> %.3f", sid, res.status,
                    res.lambda_star, res.base_pred_0, res.base_pred_star)
    if rows:
        report.write_text(args.out / "montage.svg", report.montage_svg(rows, labels))
    return 0


BIAS_DEFAULTS = {"dataset": None, "models": None, "target": None, "planted": None, "coefficient": 0.3,
                 "n": 100, "split": "test", "min_base_delta": alignment.MIN_BASE_DELTA, "n_examples": 4,
                 "search": {}}


def cmd_bias(args, raw):
    cfg = take(raw, BIAS_DEFAULTS, "bias")
    search = build(cf.SearchConfig, cfg["search"], "bias.search")
    cfg["search"] = asdict(search)
    ds = _dataset(require(cfg, "dataset", "bias"))
    t, p = require(cfg, "target", "bias"), require(cfg, "planted", "bias")
    write_run_json(args.out, "bias", args, cfg)

    enc, dec = _load_ae(require(cfg, "models", "bias"))
    models = _load_models(cfg["models"], [t, p])
    biased = biaslab.induce_bias(models[t], models[p], cfg["coefficient"], name=f"{t}_biased")
    member_dirs = {t: Path(cfg["models"]).resolve() / t, p: Path(cfg["models"]).resolve() / p}
    args.out.mkdir(parents=True, exist_ok=True)
    save_composite(biased, args.out / "composite.json", member_dirs)
    seed = args.seed if args.seed is not None else 0
    rep = biaslab.detect_bias(biased, models[t], models[p], ds, enc, dec, cfg["n"], seed, cfg["split"],
                              cfg["coefficient"], t, p, args.out, cfg["n_examples"], search, args.workers,
                              cfg["min_base_delta"])
    sys.stdout.write(f"{t} -> {p}: before {rep.r_before:.3f} (n={rep.n_before}), "
                     f"after {rep.r_after:.3f} (n={rep.n_after}), gap {rep.gap:.3f}\n")
    return 0


RECTIFY_DEFAULTS = {"dataset": None, "models": None, "bias": None, "targets": [], "coefficient": 0.3,
                    "params": {}, "report_n": 100, "downstream": None, "resume": False, "search": {}}


def cmd_rectify(args, raw):
    cfg = take(raw, RECTIFY_DEFAULTS, "rectify")
    seed = args.seed if args.seed is not None else 0
    params = build(biaslab.RectifyParams, {"seed": seed, **cfg["params"]}, "rectify.params")
    search = build(cf.SearchConfig, cfg["search"], "rectify.search")
    cfg["params"], cfg["search"] = asdict(params), asdict(search)
    ds = _dataset(require(cfg, "dataset", "rectify"))
    bias_name = require(cfg, "bias", "rectify")
    names = list(cfg["targets"])
    if not names:
        raise ConfigError("rectify: 'targets' must name at least one classifier")
    cfg["downstream"] = cfg["downstream"] or list(dict.fromkeys(names + [bias_name]))
    write_run_json(args.out, "rectify", args, cfg)

    enc, dec = _load_ae(require(cfg, "models", "rectify"))
    models = _load_models(cfg["models"], dict.fromkeys(names + [bias_name] + cfg["downstream"]))
    f_bias = models[bias_name]
    targets, states = {}, {}
    for name in names:
        # the target arrives with the bias planted at the configured strength
        targets[name] = biaslab.induce_bias(models[name], f_bias, cfg["coefficient"], name=f"{name}_biased")
        run_dir = args.out / name
        state = None
        if cfg["resume"] and (run_dir / "state.json").exists():
            state = biaslab.load_state(run_dir)
            logger.info("resuming %s at iteration %d", name, state.iteration)
        states[name], _ = biaslab.rectify(targets[name], f_bias, ds, enc, dec, params, state, run_dir,
                                          search, args.workers)
        st = states[name]
        sys.stdout.write(f"{name}: beta {st.best_beta:.4f}, valid psi {st.initial_valid_psi:.3f} -> "
                         f"{st.best_valid_psi:.3f} after {st.iteration} iterations ({st.stopped})"
                         f"{' DIVERGED' if st.diverged else ''}\n")
    down = {n: models[n] for n in cfg["downstream"]}
    rep = biaslab.rectify_report(targets, f_bias, states, down, ds, enc, dec, bias_name, cfg["report_n"],
                                 seed, "test", args.out, search, args.workers)
    moved = rep.moved_toward_zero()
    sys.stdout.write(f"bias column moved toward 0 for {sum(moved.values())} of {len(moved)} targets\n")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "align": cmd_align,
    "cf": cmd_cf,
    "bias": cmd_bias,
    "rectify": cmd_rectify,
}


def parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cfalign", description="Counterfactual alignment toolkit.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", type=Path, help="JSON config file (see docs/config.md)")
        s.add_argument("--out", type=Path, required=True, help="output directory")
        s.add_argument("--seed", type=int, default=None)
        s.add_argument("--workers", type=int, default=1)
        s.add_argument("--verbose", "-v", action="store_true")
        if name == "train":
            s.add_argument("--mode", choices=["erm", "worst_group"], default=None)
            s.add_argument("--eta", type=float, default=None)
    return p


def main(argv=None) -> int:
    args = parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        if args.workers < 1:
            raise ConfigError("--workers must be at least 1")
        raw = read_config(args.config)
        return COMMANDS[args.command](args, raw)
    except CfalignError as exc:
        sys.stderr.write(f"cfalign {args.command}: error: {exc}\n")
        return exc.exit_code
    except OSError as exc:
        sys.stderr.write(f"cfalign {args.command}: I/O error: {exc}\n")
        return TensorFileError.exit_code


if __name__ == "__main__":
    sys.exit(main())
