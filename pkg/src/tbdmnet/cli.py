"""
Command line interface.

Usage::

    tbdmnet extract  --manifest ravdess.csv --features feats/ --preset ravdess
    tbdmnet crossval --manifest ravdess.csv --features feats/ --output runs/ --seed 7
    tbdmnet predict  --checkpoint runs/fold00_FINAL.ckpt utterance.wav

Every key of the configuration file can be given as ``--some-key value``. Exit codes are
0 on success, 2 for configuration errors, 3 for data errors and 4 for numeric failures.
"""
import argparse
import json
import sys
from pathlib import Path
from typing import Any, Callable, List, Optional, Sequence

from . import _repr_text, reference
from .checkpoint import load_checkpoint, save_checkpoint
from .config import KEYS, RunConfig, option_name
from .features import (
    GENDER_MODES,
    FeatureMatrix,
    FeatureSet,
    extract_features,
    fit_frames,
    get_preset,
    inject_gender,
    load_audio,
    load_feature_set,
    mfcc,
    read_features,
    read_gender_sidecar,
    read_manifest,
)
from .metrics import CSV_HEADER, FoldMetrics, MetricsReport, compute_metrics
from .train import (
    ABLATIONS,
    GENDER_SYSTEMS,
    crossval,
    evaluate,
    kfold_split,
    run_ablation,
    run_gender_system,
    train,
)
from .util import ConfigError, DataError, TbdmError
from .version import version


def _run_config(args: argparse.Namespace) -> RunConfig:
    rc = RunConfig.from_file(args.config) if args.config else RunConfig()
    for key in KEYS:
        value = getattr(args, key, None)
        if value is not None:
            rc.set(key, value)
    return rc


def _dataset_name(rc: RunConfig) -> Optional[str]:
    return rc.get("dataset") or rc.get("preset")


def _load_dataset(rc: RunConfig) -> FeatureSet:
    rc.require_paths("manifest", "features")
    manifest = read_manifest(rc.path("manifest"), get_preset(rc.get("preset")))
    return load_feature_set(manifest, rc.path("features"))


def _output_dir(rc: RunConfig) -> Path:
    out = rc.path("output")
    if out is None:
        raise ConfigError(f"{option_name('output')} is required")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj: Any) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _sidecar(rc: RunConfig, needed: bool):
    path = rc.path("gender_file")
    if path is None:
        if needed:
            raise ConfigError(
                f"{option_name('gender_file')} is required for this gender mode or system"
            )
        return None
    rc.require_paths("gender_file")
    return read_gender_sidecar(path)


def summary_rows(reports: Sequence[MetricsReport], with_reference: bool = True) -> List:
    """Return results table rows (dataset, model, uar, war, f1), published rows appended."""
    rows = []
    for r in reports:
        m = r.mean
        dataset = r.dataset or "unnamed"
        name = f"{r.tag or 'tbdm'}::{r.checkpoint_kind}"
        rows.append((dataset, name, m["uar"], m["war"], m["f1"]))
        ref = reference.lookup(r.dataset, r.tag, r.checkpoint_kind) if with_reference else None
        if ref is not None:
            rows.append((dataset, f"{name} (reference)", *ref))
    return rows


def cmd_extract(args: argparse.Namespace, rc: RunConfig) -> int:
    rc.require_paths("manifest")
    features = rc.path("features")
    if features is None:
        raise ConfigError(f"{option_name('features')} is required")
    mode = rc.get("gender_mode", "none")
    if mode not in GENDER_MODES:
        raise ConfigError(f"gender mode {mode!r} must be one of {GENDER_MODES}")
    sidecar = _sidecar(rc, mode in ("binary", "probabilities"))
    preset = get_preset(rc.get("preset"))
    manifest = read_manifest(rc.path("manifest"), preset)
    frames = rc.get("frames")
    if frames is None and preset is not None:
        frames = preset.frames
    result = extract_features(
        manifest,
        features,
        frames,
        mode,
        sidecar,
        rc.get("jobs", 1),
        rc.get("verbose", 0),
    )
    print(
        f"extracted {len(result.written)} of {len(manifest)} utterances, "
        f"frames={result.frames} ({result.frames_source}), "
        f"padded={result.padded}, cropped={result.cropped}"
    )
    for uid, msg in sorted(result.failures.items()):
        print(f"failed {uid}: {msg}", file=sys.stderr)
    return 0 if result.ok else DataError.exit_code


def cmd_train(args: argparse.Namespace, rc: RunConfig) -> int:
    dataset = _load_dataset(rc)
    out = _output_dir(rc)
    model_cfg = rc.model_config(dataset.n_classes, dataset.n_channels)
    result = train(dataset, model_cfg, rc.train_config())
    for kind in ("BT", "FINAL"):
        save_checkpoint(
            out / f"checkpoint_{kind}.ckpt",
            result.checkpoint(kind),
            model_cfg,
            dataset.label_set,
            dataset.frames,
            dataset.gender_mode,
        )
    _write_json(out / "history_train.json", result.history_dict())
    last = result.history[-1]
    print(
        f"trained {len(result.history)} epochs, best training WAR at epoch "
        f"{result.best_epoch}, final loss {last.loss:.6g}, final training WAR {last.war:.2f}"
    )
    return 0


def _print_reports(reports: Sequence[MetricsReport]) -> None:
    print(_repr_text.results(summary_rows(reports)))


def _write_summary(path: Path, reports: Sequence[MetricsReport]) -> None:
    lines = [CSV_HEADER] + [r.csv_row() for r in reports]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_crossval(args: argparse.Namespace, rc: RunConfig) -> int:
    dataset = _load_dataset(rc)
    out = _output_dir(rc)
    model_cfg = rc.model_config(dataset.n_classes, dataset.n_channels)
    train_cfg = rc.train_config()
    plan = kfold_split(list(dataset.ids), rc.get("folds", 10), train_cfg.seed)
    result = crossval(
        dataset,
        model_cfg,
        train_cfg,
        plan,
        rc.get("jobs", 1),
        _dataset_name(rc),
        keep_models=True,
    )
    for k, fold in enumerate(result.models):
        for kind in ("BT", "FINAL"):
            save_checkpoint(
                out / f"fold{k:02d}_{kind}.ckpt",
                fold.checkpoint(kind),
                model_cfg,
                dataset.label_set,
                dataset.frames,
                dataset.gender_mode,
            )
        _write_json(out / f"history_fold{k:02d}.json", fold.history_dict())
    for report in result:
        report.save(out / f"report_{report.checkpoint_kind}.json")
    _write_summary(out / "summary.csv", list(result))
    _print_reports(list(result))
    return 0


def cmd_evaluate(args: argparse.Namespace, rc: RunConfig) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    dataset = _load_dataset(rc)
    index = {name: i for i, name in enumerate(ckpt.label_set)}
    unknown = sorted(set(dataset.label_set[i] for i in dataset.y) - set(index))
    if unknown:
        raise DataError(
            f"labels {unknown} are not in the checkpoint label set {list(ckpt.label_set)}"
        )
    labels = [index[dataset.label_set[i]] for i in dataset.y]
    preds, _ = evaluate(ckpt.params, ckpt.config, dataset)
    m = compute_metrics(preds, labels, ckpt.config.n_classes, ckpt.label_set)
    report = MetricsReport(
        _dataset_name(rc),
        ckpt.config.hash(),
        args.kind,
        ckpt.label_set,
        [FoldMetrics.from_metrics(0, m)],
        "evaluate",
    )
    out = rc.path("output")
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        report.save(out / "report_evaluate.json")
    print(report)
    print(m.confusion)
    return 0


def cmd_ablate(args: argparse.Namespace, rc: RunConfig) -> int:
    dataset = _load_dataset(rc)
    out = _output_dir(rc)
    model_cfg = rc.model_config(dataset.n_classes, dataset.n_channels)
    report = run_ablation(
        args.variant,
        dataset,
        model_cfg,
        rc.train_config(),
        n_folds=rc.get("folds", 10),
        jobs=rc.get("jobs", 1),
        dataset_name=_dataset_name(rc),
    )
    report.save(out / f"report_{args.variant}.json")
    _print_reports([report])
    return 0


def cmd_gender(args: argparse.Namespace, rc: RunConfig) -> int:
    dataset = _load_dataset(rc)
    out = _output_dir(rc)
    needs_sidecar = args.system in ("posthoc_binary", "posthoc_probabilities")
    sidecar = _sidecar(rc, needs_sidecar)
    model_cfg = rc.model_config(dataset.n_classes, dataset.n_channels)
    report = run_gender_system(
        args.system,
        dataset,
        model_cfg,
        rc.train_config(),
        sidecar,
        n_folds=rc.get("folds", 10),
        jobs=rc.get("jobs", 1),
        dataset_name=_dataset_name(rc),
    )
    report.save(out / f"report_{args.system}.json")
    _print_reports([report])
    return 0


def cmd_predict(args: argparse.Namespace, rc: RunConfig) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    path = Path(args.input)
    if path.suffix.lower() == ".wav":
        if ckpt.frames is None:
            raise DataError(
                f"{args.checkpoint} records no frame count, predict on a feature file"
            )
        samples, rate = load_audio(path)
        grid = fit_frames(mfcc(samples, rate), ckpt.frames)
        info = None
        if ckpt.gender_mode == "probabilities":
            if args.p_male is None:
                raise ConfigError("the model needs gender probabilities, pass --p-male")
            info = (args.p_male, 1.0 - args.p_male)
        elif ckpt.gender_mode != "none":
            if args.gender is None:
                raise ConfigError("the model needs the speaker gender, pass --gender M|F")
            info = args.gender
        values = FeatureMatrix(path.stem, inject_gender(grid, ckpt.gender_mode, info)).values
    else:
        values = read_features(path).values
    if values.shape[0] != ckpt.config.input_channels:
        raise DataError(
            f"{path} has {values.shape[0]} feature rows but the checkpoint expects "
            f"{ckpt.config.input_channels}"
        )
    probs = ckpt.predict(values[None])[0]
    ranked = sorted(zip(ckpt.label_set, probs.tolist()), key=lambda x: -x[1])
    result = {
        "label": ranked[0][0],
        "probs": [{"label": label, "prob": p} for label, p in ranked],
    }
    print(json.dumps(result, indent=2))
    return 0


def cmd_summary(args: argparse.Namespace, rc: RunConfig) -> int:
    reports = [MetricsReport.load(p) for p in args.reports]
    rows = summary_rows(reports, not args.no_reference)
    if args.tabulate:
        import tabulate

        print(tabulate.tabulate(rows, headers=("Dataset", "Model", "UAR", "WAR", "F1")))
    else:
        print(_repr_text.results(rows))
    return 0


def _add_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="INI file with run settings")
    group = p.add_argument_group("configuration overrides")
    for key, (section, _) in KEYS.items():
        group.add_argument(option_name(key), dest=key, metavar="VALUE", help=f"[{section}]")


def make_parser() -> argparse.ArgumentParser:
    """Return the argument parser of the ``tbdmnet`` command."""
    parser = argparse.ArgumentParser(
        prog="tbdmnet",
        description="Speech emotion recognition with temporal-aware bi-direction "
        "multi-scale networks.",
        allow_abbrev=False,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {version}")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def add(name: str, fn: Callable, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help, description=help, allow_abbrev=False)
        p.set_defaults(func=fn)
        return p

    p = add("extract", cmd_extract, "compute MFCC feature files for a manifest")
    _add_overrides(p)
    p = add("train", cmd_train, "train one model on all utterances")
    _add_overrides(p)
    p = add("crossval", cmd_crossval, "k-fold cross-validation")
    _add_overrides(p)
    p = add("evaluate", cmd_evaluate, "score a checkpoint on a feature set")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--kind", choices=("BT", "FINAL"), default="FINAL")
    _add_overrides(p)
    p = add("ablate", cmd_ablate, "cross-validate an architecture ablation")
    p.add_argument("--variant", choices=ABLATIONS, required=True)
    _add_overrides(p)
    p = add("gender", cmd_gender, "cross-validate a gender-aware system")
    p.add_argument("--system", choices=GENDER_SYSTEMS, required=True)
    _add_overrides(p)
    p = add("predict", cmd_predict, "class probabilities of one WAV or feature file")
    p.add_argument("input", type=Path, help="WAV or .tbf file")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--gender", choices=("M", "F"), help="speaker gender if the model needs it")
    p.add_argument("--p-male", type=float, help="male probability for gender-aware models")
    _add_overrides(p)
    p = add("summary", cmd_summary, "tabulate report files")
    p.add_argument("reports", type=Path, nargs="+", help="report JSON files")
    p.add_argument("--tabulate", action="store_true", help="plain output via tabulate")
    p.add_argument("--no-reference", action="store_true", help="omit published numbers")
    p.add_argument("--config", type=Path, help=argparse.SUPPRESS)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run the command line interface and return the exit code."""
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        rc = _run_config(args)
        return args.func(args, rc)
    except TbdmError as e:
        print(f"tbdmnet {args.command}: error: {e}", file=sys.stderr)
        return e.exit_code
