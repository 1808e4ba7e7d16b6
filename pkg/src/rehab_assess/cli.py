"""Command-line entry point.

Every subcommand writes ``resolved_config.json`` to its output directory.
That file is a complete config for the same subcommand: passing it back
with ``--spec`` reproduces the run.

Exit codes: 0 success, 1 usage or configuration error, 2 data or schema
error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

from . import evaluation, gmm, io, stgcn, synthetic
from .errors import (
    ConfigurationError, DataError, NumericalError, ParseError, PreprocessError,
    SchemaError, UsageError,
)
from .metrics import accuracy, cohens_kappa, f1_score, krippendorff_alpha
from .sequence import PreprocessConfig, preprocess
from .skeleton import FORMAT_IDS

logger = logging.getLogger("rehab_assess")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
SUBCOMMANDS = ("ingest", "generate", "train-gmm", "train-stgcn", "evaluate", "sweep", "report", "agreement")


class _Usage(Exception):
    def __init__(self, message: str, usage: str = ""):
        super().__init__(message)
        self.usage = usage


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _Usage(message, self.format_usage())


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rehab-assess", description="Exercise assessment with GMM and STGCN models.")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND", parser_class=_Parser)
    sub.required = True
    helps = {
        "ingest": "convert raw exports or documents into a canonical dataset",
        "generate": "write a labeled synthetic dataset",
        "train-gmm": "fit a GMM (and calibrate its threshold on validation items)",
        "train-stgcn": "train an STGCN classifier",
        "evaluate": "score a trained model on a dataset",
        "sweep": "run a training-size sweep and emit the report",
        "report": "re-emit summary and plots from a report table",
        "agreement": "inter-annotator agreement of a dataset",
    }
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--data", help="manifest, sequence file or directory")
        p.add_argument("--spec", help="JSON config file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--jobs", type=int, default=None, help="worker processes (default: CPU count)")
        p.add_argument("--format", choices=FORMAT_IDS, help="skeleton format")
        p.add_argument("--algorithm", choices=("gmm", "stgcn"))
        p.add_argument("--verbose", "-v", action="count", default=0)
        if name == "evaluate":
            p.add_argument("--model", help="output directory of a train-gmm / train-stgcn run")
        if name in ("train-gmm", "train-stgcn", "evaluate"):
            p.add_argument("--exercise", help="restrict to one exercise of the dataset")
        if name == "ingest":
            p.add_argument("--exercise", default="", help="exercise id for raw exports")
            p.add_argument("--label", choices=("correct", "incorrect"), help="label for raw exports")
            p.add_argument("--impute", action="store_true", help="interpolate missing joints")
            p.add_argument("--fps", type=float, default=io.KIMORE_FPS)
    return parser


# --- helpers ----------------------------------------------------------------


def _need(args, *names):
    missing = [n for n in names if getattr(args, n) in (None, "")]
    if missing:
        raise UsageError(f"{args.command} requires " + ", ".join(f"--{n}" for n in missing))


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} {path} does not exist")
    return p


def _read_spec(args) -> dict:
    if not args.spec:
        return {}
    path = _existing(args.spec, "spec file")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"malformed spec {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigurationError(f"spec {path} must be a JSON object")
    return doc


def _out_dir(args) -> Path:
    out = Path(args.out)
    if out.exists() and not out.is_dir():
        raise UsageError(f"--out {out} exists and is not a directory")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_resolved(out: Path, config: dict) -> None:
    (out / "resolved_config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")


def _is_manifest(doc) -> bool:
    if isinstance(doc, dict):
        return "sequences" in doc
    if isinstance(doc, list) and doc:
        first = doc[0]
        return isinstance(first, str) or (isinstance(first, dict) and "path" in first)
    return False


def _load(args):
    path = _existing(args.data, "--data")
    if path.is_dir():
        manifest = path / "manifest.json"
        if not manifest.exists():
            raise UsageError(f"directory {path} has no manifest.json")
        path = manifest
    try:
        doc = json.loads(path.read_text())
    except (json.JSONDecodeError, UnicodeDecodeError):
        doc = None
    if _is_manifest(doc):
        entries = io.read_manifest(path)
        for e in entries:
            _existing(str(e.path), "manifest entry")
        seqs = [io.read_sequence(e.path, args.format) for e in entries]
        return seqs, [e.split for e in entries]
    seq = io.read_sequence(path, args.format)
    return [seq], [None]


# --- subcommands -------------------------------------------------------------


def cmd_ingest(args) -> int:
    _need(args, "data", "out")
    src = _existing(args.data, "--data")
    files = sorted(p for p in src.iterdir() if p.is_file()) if src.is_dir() else [src]
    seqs = []
    for f in files:
        if f.name == "manifest.json":
            continue
        seq = io.read_sequence(
            f, args.format, impute=args.impute, exercise_id=args.exercise,
            subject_id=f.stem, fps=args.fps,
        )
        if args.label and seq.label is None:
            seq = seq.with_label(args.label)
        seqs.append(seq)
    if not seqs:
        raise DataError(f"no sequence files found in {src}")
    out = _out_dir(args)
    manifest = io.write_dataset(seqs, out)
    _write_resolved(out, {
        "command": "ingest", "data": str(src), "format": args.format, "exercise": args.exercise,
        "label": args.label, "impute": args.impute, "fps": args.fps,
    })
    print(f"wrote {len(seqs)} sequences, manifest {manifest}")
    return EXIT_OK


def _generate_config(args) -> dict:
    doc = _read_spec(args)
    doc.pop("command", None)
    counts = evaluation.BENCHMARK_COUNTS
    cfg = {
        "n_correct": int(doc.pop("n_correct", counts[0])),
        "n_incorrect": int(doc.pop("n_incorrect", counts[1])),
        "exercises": list(doc.pop("exercises", ["ex0"])),
        "annotators": int(doc.pop("annotators", 0)),
        "annotator_flip": float(doc.pop("annotator_flip", 0.1)),
    }
    if args.format and args.format != "custom":
        doc["format"] = args.format
    if args.seed is not None:
        doc["seed"] = args.seed
    try:
        spec = synthetic.spec_from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"invalid synthetic spec: {exc}") from exc
    return {"command": "generate", **cfg, **synthetic.spec_to_dict(spec)}


def cmd_generate(args) -> int:
    _need(args, "out")
    cfg = _generate_config(args)
    spec_doc = {k: v for k, v in cfg.items() if k not in (
        "command", "n_correct", "n_incorrect", "exercises", "annotators", "annotator_flip")}
    spec = synthetic.spec_from_dict(spec_doc)
    out = _out_dir(args)
    seqs = synthetic.generate_dataset(
        spec, cfg["n_correct"], cfg["n_incorrect"], tuple(cfg["exercises"]),
        annotators=cfg["annotators"], annotator_flip=cfg["annotator_flip"], out_dir=out,
    )
    _write_resolved(out, cfg)
    print(f"wrote {len(seqs)} synthetic sequences to {out}")
    return EXIT_OK


def _train_config(args, kind: str) -> dict:
    doc = _read_spec(args)
    doc.pop("command", None)
    try:
        pre = PreprocessConfig(**doc.get("preprocess", {}))
        if kind == "gmm":
            model_cfg = gmm.GmmFitConfig(**doc.get("gmm", {}))
            if args.seed is not None:
                model_cfg = gmm.GmmFitConfig(**{**asdict(model_cfg), "seed": args.seed})
            model_doc = asdict(model_cfg)
        else:
            sc = dict(doc.get("stgcn", {}))
            sc.setdefault("input_length", pre.target_length)
            if args.seed is not None:
                sc["seed"] = args.seed
            model_doc = stgcn.StgcnConfig.from_dict(sc).to_dict()
    except TypeError as exc:
        raise ConfigurationError(f"invalid {kind} config: {exc}") from exc
    unknown = set(doc) - {"preprocess", kind, "merge_policy", "exercise"}
    if unknown:
        raise ConfigurationError(f"unknown config fields {sorted(unknown)}")
    exercise = args.exercise if args.exercise is not None else doc.get("exercise")
    return {
        "command": f"train-{kind}",
        "exercise": exercise,
        "preprocess": asdict(pre),
        kind: model_doc,
        "merge_policy": doc.get("merge_policy", "unanimous_correct"),
    }


def _for_exercise(seqs, splits, exercise):
    if exercise is None:
        found = sorted({s.exercise_id for s in seqs})
        if len(found) > 1:
            raise UsageError(f"dataset holds exercises {found}; choose one with --exercise")
        return seqs, splits
    keep = [i for i, s in enumerate(seqs) if s.exercise_id == exercise]
    if not keep:
        raise DataError(f"no sequences of exercise {exercise!r}")
    return [seqs[i] for i in keep], [splits[i] for i in keep]


def _training_data(args, cfg):
    seqs, splits = _for_exercise(*_load(args), cfg["exercise"])
    pre = PreprocessConfig(**cfg["preprocess"])
    labels = evaluation.resolve_labels(seqs, cfg["merge_policy"])
    items = [(preprocess(s, pre), lab, sp) for s, lab, sp in zip(seqs, labels, splits)]
    return items


def cmd_train_gmm(args) -> int:
    _need(args, "data", "out")
    cfg = _train_config(args, "gmm")
    items = _training_data(args, cfg)
    train = [s for s, lab, sp in items if sp in (None, "train") and lab == "correct"]
    validation = [(s, lab) for s, lab, sp in items if sp == "validation"]
    model = gmm.fit(train, gmm.GmmFitConfig(**cfg["gmm"]))
    out = _out_dir(args)
    if validation:
        model = gmm.calibrate_threshold(model, validation)
        print(f"threshold {model.threshold!r} calibrated on {len(validation)} validation items")
    gmm.save_model(model, out / "model.json")
    _write_resolved(out, cfg)
    print(f"fitted GMM on {len(train)} correct sequences -> {out / 'model.json'}")
    return EXIT_OK


def cmd_train_stgcn(args) -> int:
    _need(args, "data", "out")
    cfg = _train_config(args, "stgcn")
    items = _training_data(args, cfg)
    train = [(s, lab) for s, lab, sp in items if sp in (None, "train")]
    if not train:
        raise DataError("no training sequences")
    model = stgcn.train(stgcn.StgcnConfig.from_dict(cfg["stgcn"]), train[0][0].graph, train)
    out = _out_dir(args)
    stgcn.save_model(model, out / "model.pt")
    _write_resolved(out, cfg)
    _, loss, acc = model.training_history[-1]
    print(f"trained STGCN on {len(train)} sequences: final loss {loss:.4g}, accuracy {acc:.3f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    _need(args, "data", "model", "out")
    model_dir = _existing(args.model, "--model")
    trained = json.loads(_existing(str(model_dir / "resolved_config.json"), "model config").read_text())
    pre = PreprocessConfig(**trained["preprocess"])
    exercise = args.exercise if args.exercise is not None else trained.get("exercise")
    seqs, splits = _for_exercise(*_load(args), exercise)
    if any(sp is not None for sp in splits):
        seqs = [s for s, sp in zip(seqs, splits) if sp == "test"]
    processed = [preprocess(s, pre) for s in seqs]
    if (model_dir / "model.json").exists():
        clf = gmm.load_model(model_dir / "model.json")
        if not isinstance(clf, gmm.GmmClassifier):
            raise UsageError("GMM model has no threshold; train it with validation items")
        pred = [gmm.classify(clf, s) for s in processed]
        algorithm = "gmm"
    elif (model_dir / "model.pt").exists():
        pred = stgcn.predict_batch(stgcn.load_model(model_dir / "model.pt"), processed)
        algorithm = "stgcn"
    else:
        raise UsageError(f"{model_dir} contains no model.json or model.pt")
    result = {"algorithm": algorithm, "predictions": [
        {"subject_id": s.subject_id, "exercise_id": s.exercise_id, "prediction": p}
        for s, p in zip(seqs, pred)
    ]}
    labeled = [s.label is not None or s.annotations for s in seqs]
    if seqs and all(labeled):
        truth = evaluation.resolve_labels(seqs, trained.get("merge_policy", "unanimous_correct"))
        result["f1"] = f1_score(pred, truth)
        result["accuracy"] = accuracy(pred, truth)
        print(f"F1 {result['f1']:.4f} accuracy {result['accuracy']:.4f} on {len(seqs)} sequences")
    out = _out_dir(args)
    (out / "predictions.json").write_text(json.dumps(result, indent=1) + "\n")
    _write_resolved(out, {"command": "evaluate", "model": str(model_dir), **trained})
    return EXIT_OK


def _sweep_spec(args) -> evaluation.SweepSpec:
    doc = _read_spec(args)
    doc.pop("command", None)
    if not doc:
        if not args.algorithm:
            raise UsageError("sweep needs --spec or --algorithm")
        spec = evaluation.benchmark_specs()[args.algorithm]
        doc = spec.to_dict()
    if args.algorithm:
        if doc.get("algorithm", args.algorithm) != args.algorithm:
            raise UsageError(f"--algorithm {args.algorithm} contradicts the spec ({doc['algorithm']})")
        doc["algorithm"] = args.algorithm
    if args.format:
        doc["skeleton_format"] = args.format
    if args.seed is not None:
        doc["base_seed"] = args.seed
    return evaluation.SweepSpec.from_dict(doc)


def cmd_sweep(args) -> int:
    _need(args, "data", "out")
    spec = _sweep_spec(args)
    seqs, _ = _load(args)
    out = _out_dir(args)
    _write_resolved(out, spec.to_dict())
    jobs = args.jobs if args.jobs is not None else (os.cpu_count() or 1)
    report = evaluation.run_sweep(seqs, spec, jobs=jobs)
    files = evaluation.emit_report(report, out)
    failed = sum(not r.ok for r in report.rows)
    for (alg, fmt, ts, vs), a in report.aggregates.items():
        print(f"{alg} {fmt} train={ts} validation={vs}: F1 {a['f1_mean']:.4f} +- {a['f1_std']:.4f}")
    print(f"{len(report.rows)} cells ({failed} failed); report {files['table']}")
    return EXIT_OK


def cmd_report(args) -> int:
    _need(args, "data")
    path = _existing(args.data, "--data")
    if path.is_dir():
        path = _existing(str(path / "report.csv"), "report table")
    rows = evaluation.read_report_table(path)
    report = evaluation.EvaluationReport.from_rows(rows)
    out = Path(args.out) if args.out else path.parent
    evaluation.emit_report(report, out)
    _write_resolved(out, {"command": "report", "data": str(path)})
    sys.stdout.write(evaluation._summary_markdown(report))
    return EXIT_OK


def cmd_agreement(args) -> int:
    _need(args, "data")
    seqs, _ = _load(args)
    annotations = [list(s.annotations) if s.annotations else [] for s in seqs]
    if not any(annotations):
        raise DataError("no sequence carries annotations")
    width = max(len(a) for a in annotations)
    padded = [a + [None] * (width - len(a)) for a in annotations]
    result = {"items": len(padded), "annotators": width}
    if width == 2:
        pairs = [a for a in padded if None not in a]
        result["cohens_kappa"] = cohens_kappa([a[0] for a in pairs], [a[1] for a in pairs])
    result["krippendorff_alpha"] = krippendorff_alpha(padded)
    for k in ("cohens_kappa", "krippendorff_alpha"):
        if k in result:
            print(f"{k} {result[k]!r}")
    if args.out:
        out = _out_dir(args)
        (out / "agreement.json").write_text(json.dumps(result, indent=1) + "\n")
        _write_resolved(out, {"command": "agreement", "data": str(args.data)})
    return EXIT_OK


COMMANDS = {
    "ingest": cmd_ingest,
    "generate": cmd_generate,
    "train-gmm": cmd_train_gmm,
    "train-stgcn": cmd_train_stgcn,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "report": cmd_report,
    "agreement": cmd_agreement,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _Usage as exc:
        sys.stderr.write(exc.usage)
        sys.stderr.write(f"rehab-assess: error: {exc}\n")
        return EXIT_USAGE
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    logger.setLevel(level)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigurationError) as exc:
        sys.stderr.write(parser.format_usage())
        sys.stderr.write(f"rehab-assess {args.command}: error: {exc}\n")
        return EXIT_USAGE
    except (ParseError, SchemaError, DataError, PreprocessError, json.JSONDecodeError, OSError) as exc:
        sys.stderr.write(f"rehab-assess {args.command}: data error: {exc}\n")
        return EXIT_DATA
    except (NumericalError, ArithmeticError) as exc:
        sys.stderr.write(f"rehab-assess {args.command}: numerical error: {exc}\n")
        return EXIT_NUMERICAL


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
