"""Training-size sweeps: splitting, per-cell training/evaluation, reports.

A sweep cell is one ``(exercise, train_size, validation_size, repeat)``
tuple. Every cell derives its seeds from the base seed and its own
coordinates, so cells can run in any order and in any number of worker
processes with identical results. Test sets depend on ``(exercise, repeat)``
only and are therefore shared by all train sizes of a repeat.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from multiprocessing import get_context
from pathlib import Path
from typing import Any, NamedTuple, Sequence

import numpy as np

from . import gmm, stgcn
from .errors import ConfigurationError, DataError, RehabError, SizingError
from .metrics import accuracy, f1_score, merge_annotations
from .sequence import MotionSequence, PreprocessConfig, preprocess
from .skeleton import FORMAT_IDS

logger = logging.getLogger(__name__)

REPORT_COLUMNS = (
    "algorithm", "skeleton_format", "exercise_id", "train_size", "validation_size",
    "repeat_index", "seed", "f1", "accuracy", "status",
)


@dataclass(frozen=True)
class SweepSpec:
    algorithm: str
    skeleton_format: str
    train_sizes: tuple[int, ...]
    validation_sizes: tuple[int, ...] = (0,)
    repeats: int = 5
    base_seed: int = 0
    test_fraction: float = 0.3
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    gmm: gmm.GmmFitConfig = field(default_factory=gmm.GmmFitConfig)
    stgcn: stgcn.StgcnConfig = field(default_factory=stgcn.StgcnConfig)
    merge_policy: str = "unanimous_correct"

    def __post_init__(self):
        object.__setattr__(self, "train_sizes", tuple(int(s) for s in self.train_sizes))
        object.__setattr__(self, "validation_sizes", tuple(int(s) for s in self.validation_sizes))
        if self.algorithm not in ("gmm", "stgcn"):
            raise ConfigurationError(f"unknown algorithm {self.algorithm!r}")
        if self.skeleton_format not in FORMAT_IDS:
            raise ConfigurationError(f"unknown skeleton format {self.skeleton_format!r}")
        if not self.train_sizes or any(s < 1 for s in self.train_sizes):
            raise ConfigurationError("train_sizes must be a non-empty list of positive integers")
        if list(self.train_sizes) != sorted(self.train_sizes):
            raise ConfigurationError("train_sizes must be sorted ascending")
        if self.algorithm == "stgcn":
            if self.validation_sizes != (0,):
                raise ConfigurationError("stgcn sweeps take no validation data: validation_sizes must be [0]")
            if self.stgcn.input_length != self.preprocess.target_length:
                raise ConfigurationError(
                    f"stgcn input_length {self.stgcn.input_length} differs from "
                    f"preprocess target_length {self.preprocess.target_length}"
                )
        elif not self.validation_sizes or any(s < 1 for s in self.validation_sizes):
            raise ConfigurationError("gmm validation_sizes must be positive integers")
        if self.repeats < 1:
            raise ConfigurationError("repeats must be positive")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigurationError("test_fraction must lie in (0, 1)")
        if self.merge_policy not in ("unanimous_correct", "majority"):
            raise ConfigurationError(f"unknown merge policy {self.merge_policy!r}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "algorithm": self.algorithm,
            "skeleton_format": self.skeleton_format,
            "train_sizes": list(self.train_sizes),
            "validation_sizes": list(self.validation_sizes),
            "repeats": self.repeats,
            "base_seed": self.base_seed,
            "test_fraction": self.test_fraction,
            "preprocess": asdict(self.preprocess),
            "gmm": asdict(self.gmm),
            "stgcn": self.stgcn.to_dict(),
            "merge_policy": self.merge_policy,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SweepSpec":
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown sweep spec fields {sorted(unknown)}")
        try:
            if "preprocess" in d:
                d["preprocess"] = PreprocessConfig(**d["preprocess"])
            if "gmm" in d:
                d["gmm"] = gmm.GmmFitConfig(**d["gmm"])
            if "stgcn" in d:
                d["stgcn"] = stgcn.StgcnConfig.from_dict(d["stgcn"])
            return cls(**d)
        except TypeError as exc:
            raise ConfigurationError(f"invalid sweep spec: {exc}") from exc


def load_sweep_spec(path) -> SweepSpec:
    try:
        return SweepSpec.from_dict(json.loads(Path(path).read_text()))
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"malformed sweep spec {path}: {exc}") from exc


# --- seeding ----------------------------------------------------------------


def derive_seed(*keys: int) -> int:
    """A 31-bit seed that depends only on ``keys``."""
    ss = np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in keys])
    return int(ss.generate_state(1)[0] >> 1)


def exercise_key(exercise_id: str) -> int:
    return zlib.crc32(exercise_id.encode("utf-8"))


_TEST_TAG = 0x7E57


def test_seed(base_seed: int, exercise_id: str, repeat: int) -> int:
    return derive_seed(base_seed, exercise_key(exercise_id), repeat, _TEST_TAG)


def cell_seed(base_seed: int, exercise_id: str, train_size: int, validation_size: int, repeat: int) -> int:
    return derive_seed(base_seed, exercise_key(exercise_id), train_size, validation_size, repeat)


# --- labels and splitting ---------------------------------------------------


def resolve_labels(dataset: Sequence[MotionSequence], policy: str = "unanimous_correct") -> list[str]:
    """Sequence labels; unlabeled sequences fall back to merged annotations."""
    out = []
    for i, s in enumerate(dataset):
        if s.label is not None:
            out.append(s.label)
        elif s.annotations:
            out.append(merge_annotations([s.annotations], policy)[0])
        else:
            raise DataError(f"sequence {i} ({s.subject_id!r}) has neither label nor annotations")
    return out


class Split(NamedTuple):
    train: list[int]
    validation: list[int]
    test: list[int]


def _stratified_take(pools: dict[str, list[int]], n: int) -> dict[str, int]:
    """How many items to draw from each class pool for a stratified sample of ``n``."""
    available = sum(len(p) for p in pools.values())
    if n > available:
        raise SizingError(f"requested {n} items but only {available} remain")
    if n == 0:
        return {c: 0 for c in pools}
    take = {c: int(round(n * len(p) / available)) for c, p in pools.items()}
    # fix rounding so the counts add up to n and respect availability
    classes = sorted(pools, key=lambda c: (-len(pools[c]), c))
    while sum(take.values()) > n:
        c = max(classes, key=lambda c: (take[c], c))
        take[c] -= 1
    while sum(take.values()) < n:
        c = next(c for c in classes if take[c] < len(pools[c]))
        take[c] += 1
    # represent every available class once n allows it
    if n >= len(pools):
        for c in classes:
            if take[c] == 0 and pools[c]:
                donor = max(classes, key=lambda d: take[d])
                take[donor] -= 1
                take[c] += 1
    return take


def split_dataset(
    labels: Sequence[str],
    train_size: int,
    validation_size: int,
    test_fraction: float,
    seed: int,
    algorithm: str = "gmm",
    split_seed: int | None = None,
) -> Split:
    """Index split into train / validation / test.

    The test set is drawn first, stratified by label, from ``seed`` alone.
    The rest uses ``split_seed`` (default: derived from ``seed`` and the
    sizes). GMM train sets contain correct items only; STGCN train sets and
    validation sets are stratified by label.
    """
    labels = list(labels)
    if split_seed is None:
        split_seed = derive_seed(seed, train_size, validation_size)
    rng_test = np.random.default_rng(seed)
    remainder: dict[str, list[int]] = {}
    test: list[int] = []
    for c in ("correct", "incorrect"):
        idx = np.array([i for i, lab in enumerate(labels) if lab == c], dtype=int)
        idx = idx[rng_test.permutation(len(idx))]
        n_test = int(round(test_fraction * len(idx)))
        test.extend(idx[:n_test].tolist())
        remainder[c] = idx[n_test:].tolist()

    rng = np.random.default_rng(split_seed)
    pools = {c: [p[i] for i in rng.permutation(len(p))] for c, p in remainder.items()}
    if algorithm == "gmm":
        if train_size > len(pools["correct"]):
            raise SizingError(
                f"train_size {train_size} exceeds the {len(pools['correct'])} correct items "
                f"left after reserving {len(test)} test items"
            )
        train = pools["correct"][:train_size]
        pools["correct"] = pools["correct"][train_size:]
    else:
        available = sum(len(p) for p in pools.values())
        if train_size > available:
            raise SizingError(
                f"train_size {train_size} exceeds the {available} items left after "
                f"reserving {len(test)} test items (correct {len(pools['correct'])}, "
                f"incorrect {len(pools['incorrect'])})"
            )
        take = _stratified_take(pools, train_size)
        train = []
        for c in ("correct", "incorrect"):
            train.extend(pools[c][: take[c]])
            pools[c] = pools[c][take[c] :]
    available = sum(len(p) for p in pools.values())
    if validation_size > available:
        raise SizingError(
            f"validation_size {validation_size} exceeds the {available} items left "
            f"(correct {len(pools['correct'])}, incorrect {len(pools['incorrect'])})"
        )
    take = _stratified_take(pools, validation_size)
    validation = []
    for c in ("correct", "incorrect"):
        validation.extend(pools[c][: take[c]])
    return Split(sorted(train), sorted(validation), sorted(test))


# --- report -----------------------------------------------------------------


@dataclass(frozen=True)
class ReportRow:
    algorithm: str
    skeleton_format: str
    exercise_id: str
    train_size: int
    validation_size: int
    repeat_index: int
    seed: int
    f1: float | None
    accuracy: float | None
    status: str = "ok"

    @property
    def ok(self) -> bool:
        return self.status == "ok"


AggregateKey = tuple[str, str, int, int]


def compute_aggregates(rows: Sequence[ReportRow]) -> dict[AggregateKey, dict[str, float]]:
    """Mean / population std of F1 and accuracy over exercises and repeats."""
    groups: dict[AggregateKey, list[ReportRow]] = {}
    for r in rows:
        groups.setdefault((r.algorithm, r.skeleton_format, r.train_size, r.validation_size), [])
        if r.ok:
            groups[(r.algorithm, r.skeleton_format, r.train_size, r.validation_size)].append(r)
    out = {}
    for key in sorted(groups):
        good = groups[key]
        f1s = np.array([r.f1 for r in good], dtype=np.float64)
        accs = np.array([r.accuracy for r in good], dtype=np.float64)
        nan = float("nan")
        out[key] = {
            "n": len(good),
            "f1_mean": float(f1s.mean()) if len(good) else nan,
            "f1_std": float(f1s.std()) if len(good) else nan,
            "accuracy_mean": float(accs.mean()) if len(good) else nan,
            "accuracy_std": float(accs.std()) if len(good) else nan,
        }
    return out


@dataclass
class EvaluationReport:
    rows: list[ReportRow] = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)

    @classmethod
    def from_rows(cls, rows: Sequence[ReportRow]) -> "EvaluationReport":
        rows = list(rows)
        return cls(rows, compute_aggregates(rows))

    def mean_f1(self, train_size: int, validation_size: int | None = None) -> float:
        vals = [
            r.f1 for r in self.rows
            if r.ok and r.train_size == train_size
            and (validation_size is None or r.validation_size == validation_size)
        ]
        return float(np.mean(vals)) if vals else float("nan")


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def report_table(report: EvaluationReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for r in report.rows:
        writer.writerow([_fmt(getattr(r, c)) for c in REPORT_COLUMNS])
    return buf.getvalue()


def read_report_table(path) -> list[ReportRow]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != REPORT_COLUMNS:
            raise DataError(f"{path}: unexpected report columns {reader.fieldnames}")
        for rec in reader:
            rows.append(
                ReportRow(
                    rec["algorithm"], rec["skeleton_format"], rec["exercise_id"],
                    int(rec["train_size"]), int(rec["validation_size"]), int(rec["repeat_index"]),
                    int(rec["seed"]),
                    float(rec["f1"]) if rec["f1"] else None,
                    float(rec["accuracy"]) if rec["accuracy"] else None,
                    rec["status"],
                )
            )
    return rows


def _plot_learning_curves(report: EvaluationReport, out_dir: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    pairs = sorted({(k[0], k[1]) for k in report.aggregates})
    for algorithm, fmt in pairs:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        keys = [k for k in report.aggregates if k[:2] == (algorithm, fmt)]
        for vs in sorted({k[3] for k in keys}):
            pts = sorted((k[2], report.aggregates[k]) for k in keys if k[3] == vs)
            xs = [p[0] for p in pts]
            ys = [p[1]["f1_mean"] for p in pts]
            es = [p[1]["f1_std"] for p in pts]
            label = f"validation {vs}" if algorithm == "gmm" else algorithm
            ax.errorbar(xs, ys, yerr=es, marker="o", capsize=3, label=label)
        ax.set_xlabel("training examples")
        ax.set_ylabel("F1 (mean over exercises and repeats)")
        ax.set_ylim(0, 1.05)
        ax.set_title(f"{algorithm} / {fmt}")
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = out_dir / f"learning_curve_{algorithm}_{fmt}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        written.append(path)
    return written


def _summary_markdown(report: EvaluationReport) -> str:
    lines = [
        "# Sweep summary",
        "",
        f"rows: {len(report.rows)} ({sum(not r.ok for r in report.rows)} failed)",
        "",
        "| algorithm | format | train | validation | n | F1 mean | F1 std | acc mean | acc std |",
        "|---|---|---|---|---|---|---|---|---|",
    ]
    for (alg, fmt, ts, vs), a in report.aggregates.items():
        lines.append(
            f"| {alg} | {fmt} | {ts} | {vs} | {a['n']} | {a['f1_mean']:.4f} | {a['f1_std']:.4f} "
            f"| {a['accuracy_mean']:.4f} | {a['accuracy_std']:.4f} |"
        )
    failed = [r for r in report.rows if not r.ok]
    if failed:
        lines += ["", "## Failed cells", ""]
        lines += [
            f"- {r.exercise_id} train={r.train_size} validation={r.validation_size} "
            f"repeat={r.repeat_index}: {r.status}"
            for r in failed
        ]
    return "\n".join(lines) + "\n"


def emit_report(report: EvaluationReport, out_dir, plots: bool = True) -> dict[str, Path]:
    """Write ``report.csv``, ``summary.md`` and one learning-curve PNG per (algorithm, format)."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        table = out_dir / "report.csv"
        table.write_text(report_table(report))
        summary = out_dir / "summary.md"
        summary.write_text(_summary_markdown(report))
    except OSError as exc:
        raise OSError(f"cannot write report to {out_dir}: {exc}") from exc
    files = {"table": table, "summary": summary}
    if plots:
        for p in _plot_learning_curves(report, out_dir):
            files[p.stem] = p
    return files


# --- sweep ------------------------------------------------------------------


def _train_and_test(spec: SweepSpec, seqs, labels, split: Split, seed: int):
    train = [seqs[i] for i in split.train]
    test = [seqs[i] for i in split.test]
    truth = [labels[i] for i in split.test]
    if not test:
        raise SizingError("empty test set")
    if spec.algorithm == "gmm":
        config = gmm.GmmFitConfig(**{**asdict(spec.gmm), "seed": seed})
        model = gmm.fit(train, config)
        classifier = gmm.calibrate_threshold(
            model, [(seqs[i], labels[i]) for i in split.validation]
        )
        pred = [gmm.classify(classifier, s) for s in test]
    else:
        config = stgcn.StgcnConfig.from_dict({**spec.stgcn.to_dict(), "seed": seed})
        model = stgcn.train(config, train[0].graph, [(seqs[i], labels[i]) for i in split.train])
        pred = stgcn.predict_batch(model, test)
    return f1_score(pred, truth), accuracy(pred, truth)


def run_cell(spec: SweepSpec, exercise_id: str, seqs, labels, train_size: int,
             validation_size: int, repeat: int) -> ReportRow:
    """Evaluate one sweep cell; ``seqs`` are the exercise's preprocessed sequences."""
    seed = cell_seed(spec.base_seed, exercise_id, train_size, validation_size, repeat)
    start = time.perf_counter()
    try:
        split = split_dataset(
            labels, train_size, validation_size, spec.test_fraction,
            test_seed(spec.base_seed, exercise_id, repeat), spec.algorithm, split_seed=seed,
        )
        f1, acc = _train_and_test(spec, seqs, labels, split, seed)
        status = "ok"
    except (RehabError, ArithmeticError, ValueError, RuntimeError) as exc:
        f1 = acc = None
        status = f"failed: {type(exc).__name__}: {exc}".replace("\n", " ")
    logger.info(
        "%s %s %s train=%d val=%d repeat=%d: %s (%.2fs)",
        spec.algorithm, spec.skeleton_format, exercise_id, train_size, validation_size,
        repeat, status if f1 is None else f"F1={f1:.3f} acc={acc:.3f}", time.perf_counter() - start,
    )
    return ReportRow(
        spec.algorithm, spec.skeleton_format, exercise_id, train_size, validation_size,
        repeat, seed, f1, acc, status,
    )


def prepare_dataset(dataset: Sequence[MotionSequence], spec: SweepSpec):
    """Preprocess and group the sweep's sequences: ``{exercise: (seqs, labels)}``."""
    seqs = [s for s in dataset if s.format_id == spec.skeleton_format]
    if not seqs:
        raise DataError(f"dataset has no {spec.skeleton_format!r} sequences")
    labels = resolve_labels(seqs, spec.merge_policy)
    grouped: dict[str, tuple[list, list]] = {}
    for s, lab in zip(seqs, labels):
        g = grouped.setdefault(s.exercise_id, ([], []))
        g[0].append(preprocess(s, spec.preprocess))
        g[1].append(lab)
    return dict(sorted(grouped.items()))


def sweep_cells(spec: SweepSpec, exercises: Sequence[str]):
    for ex in exercises:
        for ts in spec.train_sizes:
            for vs in spec.validation_sizes:
                for r in range(spec.repeats):
                    yield ex, ts, vs, r


def _run_cell_star(args):
    return run_cell(*args)


def run_sweep(dataset: Sequence[MotionSequence], spec: SweepSpec, jobs: int = 1) -> EvaluationReport:
    """Evaluate every cell of ``spec`` on ``dataset``.

    Rows come back in cell order regardless of ``jobs``; failed cells are
    recorded with their reason and excluded from the aggregates.
    """
    grouped = prepare_dataset(dataset, spec)
    cells = list(sweep_cells(spec, list(grouped)))
    tasks = [(spec, ex, *grouped[ex], ts, vs, r) for ex, ts, vs, r in cells]
    if jobs <= 1 or len(tasks) <= 1:
        rows = [_run_cell_star(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs, mp_context=get_context("spawn")) as pool:
            rows = list(pool.map(_run_cell_star, tasks))
    return EvaluationReport.from_rows(rows)


# --- synthetic benchmark ----------------------------------------------------

BENCHMARK_COUNTS = (60, 60)  # correct, incorrect executions per exercise
BENCHMARK_LENGTH = 32

# a smaller network than the default so the benchmark fits on one CPU core
BENCHMARK_STGCN = stgcn.StgcnConfig(
    blocks=(stgcn.BlockSpec(3, 16, 16, 3), stgcn.BlockSpec(16, 16, 16, 3)),
    lstm_hidden=16,
    input_length=BENCHMARK_LENGTH,
)


def benchmark_specs(base_seed: int = 0, repeats: int = 5) -> dict[str, SweepSpec]:
    """Sweeps of the synthetic benchmark, keyed by algorithm.

    At the largest size the GMM sees 30 correct train + 20 validation items
    and the STGCN 50 labeled train items.
    """
    pre = PreprocessConfig(target_length=BENCHMARK_LENGTH)
    return {
        "gmm": SweepSpec(
            "gmm", "kinect_v2", (10, 30), (20,), repeats, base_seed, preprocess=pre,
        ),
        "stgcn": SweepSpec(
            "stgcn", "kinect_v2", (10, 50), (0,), repeats, base_seed, preprocess=pre,
            stgcn=BENCHMARK_STGCN,
        ),
    }
