"""Cross-validated evaluation: type-balanced folds, baselines, quartile error reports.

Aggregation: for every procedure the error is averaged within each quarter of
its timeline (frame i of N belongs to quarter ceil(4i/N)), over all frames
(``mean``) and read at frame ceil(N/2) (``halftime``). Those per-procedure
values are then summarised as mean and *population* standard deviation across
procedures.
"""

from __future__ import annotations

import json
import math
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from procdur.datamodel import ProcedureRecord
from procdur.estimator import FusionConfig, Model, PredictionPoint, predict_record, train

N_FOLDS = 4
METRICS = ("Q1", "Q2", "Q3", "Q4", "mean", "halftime")
AGGREGATION_NOTE = "per-procedure means, then mean +/- population std across procedures"


# --------------------------------------------------------------------------
# folds


@dataclass(frozen=True)
class FoldSplit:
    folds: tuple[tuple[str, ...], ...]

    def __post_init__(self) -> None:
        ids = [i for f in self.folds for i in f]
        if len(ids) != len(set(ids)):
            raise ValueError("folds must be disjoint")

    def fold_of(self, record_id: str) -> int:
        for k, f in enumerate(self.folds):
            if record_id in f:
                return k
        raise KeyError(record_id)

    def split(self, dataset: Sequence[ProcedureRecord], k: int) -> tuple[list[ProcedureRecord], list[ProcedureRecord]]:
        held = set(self.folds[k])
        train_set = [r for r in dataset if r.id not in held]
        test_set = [r for r in dataset if r.id in held]
        return train_set, test_set


def make_folds(dataset: Sequence[ProcedureRecord], seed: int, n_folds: int = N_FOLDS) -> FoldSplit:
    """Shuffle ids within each type, then deal them round-robin over the folds.

    The dealing position carries over from one type to the next, so overall
    fold sizes and per-type counts both differ by at most one.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(seed)
    by_type: dict[int, list[str]] = {}
    for r in dataset:
        by_type.setdefault(r.ptype.id, []).append(r.id)
    folds: list[list[str]] = [[] for _ in range(n_folds)]
    pos = 0
    for t in sorted(by_type):
        ids = sorted(by_type[t])
        for j in rng.permutation(len(ids)):
            folds[pos % n_folds].append(ids[j])
            pos += 1
    return FoldSplit(tuple(tuple(sorted(f)) for f in folds))


# --------------------------------------------------------------------------
# baselines


@dataclass(frozen=True)
class BaselinePredictor:
    """Constant duration prediction: training mean overall or per procedure type.

    Types without training procedures fall back to the overall training mean.
    """

    kind: str
    global_mean: float
    type_means: Mapping[int, float] = field(default_factory=dict)

    def duration(self, record: ProcedureRecord) -> float:
        if self.kind == "naive":
            return self.global_mean
        return self.type_means.get(record.ptype.id, self.global_mean)

    def n_hat(self, record: ProcedureRecord) -> np.ndarray:
        return np.full(record.duration_n, self.duration(record))


def fit_baseline(train_records: Sequence[ProcedureRecord], kind: str) -> BaselinePredictor:
    if kind not in ("naive", "per_type"):
        raise ValueError(f"unknown baseline kind {kind!r}")
    if not train_records:
        raise ValueError("cannot fit a baseline on an empty training set")
    durations = sorted((r.id, r.duration_n, r.ptype.id) for r in train_records)
    global_mean = float(np.mean([d for _, d, _ in durations]))
    type_means: dict[int, float] = {}
    if kind == "per_type":
        for t in sorted({t for _, _, t in durations}):
            type_means[t] = float(np.mean([d for _, d, tt in durations if tt == t]))
    return BaselinePredictor(kind, global_mean, type_means)


# --------------------------------------------------------------------------
# errors


def errors_for_procedure(
    predictions: Sequence[PredictionPoint] | np.ndarray, n: int
) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame absolute error |n_hat_i - N| (seconds) and relative error abs_i / N."""
    if len(predictions) != n:
        raise ValueError(f"expected {n} predictions, got {len(predictions)}")
    if len(predictions) and isinstance(predictions[0], PredictionPoint):
        if [p.i for p in predictions] != list(range(1, n + 1)):
            raise ValueError("predictions must cover frames 1..N in order")
        n_hat = np.array([p.n_hat for p in predictions], dtype=np.float64)
    else:
        n_hat = np.asarray(predictions, dtype=np.float64)
    abs_err = np.abs(n_hat - n)
    return abs_err, abs_err / n


def quartile_of(i: np.ndarray | int, n: int):
    """Quarter (1..4) containing frame i of an n-frame procedure."""
    q = -((-4 * np.asarray(i)) // n)  # integer ceil(4i/n)
    return np.clip(q, 1, 4)


@dataclass(frozen=True, eq=False)
class ProcedureErrors:
    record_id: str
    ptype: int
    n: int
    fold: int
    abs: np.ndarray
    rel: np.ndarray

    def summary(self) -> dict[str, tuple[float, float]]:
        """(abs, rel) per metric; quarters without frames are NaN."""
        q = quartile_of(np.arange(1, self.n + 1), self.n)
        out = {}
        for k in range(1, 5):
            m = q == k
            out[f"Q{k}"] = (
                (float(self.abs[m].mean()), float(self.rel[m].mean())) if m.any() else (math.nan, math.nan)
            )
        out["mean"] = (float(self.abs.mean()), float(self.rel.mean()))
        h = (self.n + 1) // 2  # ceil(n/2)
        out["halftime"] = (float(self.abs[h - 1]), float(self.rel[h - 1]))
        return out


@dataclass(frozen=True)
class Stat:
    abs_mean: float
    abs_std: float
    rel_mean: float
    rel_std: float
    count: int


def _stat(pairs: list[tuple[float, float]]) -> Stat:
    a = np.array([p[0] for p in pairs if not math.isnan(p[0])])
    r = np.array([p[1] for p in pairs if not math.isnan(p[1])])
    if len(a) == 0:
        return Stat(math.nan, math.nan, math.nan, math.nan, 0)
    return Stat(float(a.mean()), float(a.std()), float(r.mean()), float(r.std()), len(a))


def quartile_report(errors: Sequence[ProcedureErrors]) -> dict[str, Stat]:
    """Mean and population std across procedures of each per-procedure metric."""
    ordered = sorted(errors, key=lambda e: e.record_id)
    summaries = [e.summary() for e in ordered]
    return {m: _stat([s[m] for s in summaries]) for m in METRICS}


# --------------------------------------------------------------------------
# report


@dataclass(eq=False)
class EvalReport:
    seed: int
    folds: FoldSplit
    errors: dict[str, list[ProcedureErrors]]
    configs: dict[str, dict] = field(default_factory=dict)

    @property
    def methods(self) -> list[str]:
        return list(self.errors)

    def summary(self, method: str) -> dict[str, Stat]:
        return quartile_report(self.errors[method])

    def per_type(self, method: str) -> dict[int, dict[str, Stat]]:
        types = sorted({e.ptype for e in self.errors[method]})
        return {t: quartile_report([e for e in self.errors[method] if e.ptype == t]) for t in types}

    def per_fold(self, method: str) -> dict[int, dict[str, Stat]]:
        return {
            k: quartile_report([e for e in self.errors[method] if e.fold == k])
            for k in range(len(self.folds.folds))
        }

    def mean_relative_error(self, method: str, fold: int | None = None) -> float:
        stats = self.summary(method) if fold is None else self.per_fold(method)[fold]
        return stats["mean"].rel_mean

    def to_text(self) -> str:
        def block(title: str, rows: list[tuple[str, dict[str, Stat]]], rel: bool) -> list[str]:
            head = f"{'Method':<18}" + "".join(f"{m:>18}" for m in METRICS)
            lines = [title, head, "-" * len(head)]
            for name, stats in rows:
                cells = []
                for m in METRICS:
                    s = stats[m]
                    if s.count == 0:
                        cells.append(f"{'n/a':>18}")
                    elif rel:
                        cells.append(f"{f'{100 * s.rel_mean:.1f}%+-{100 * s.rel_std:.1f}%':>18}")
                    else:
                        cells.append(f"{f'{s.abs_mean:.0f}+-{s.abs_std:.0f}':>18}")
                lines.append(f"{name:<18}" + "".join(cells))
            return lines

        rows = [(m, self.summary(m)) for m in self.methods]
        out = [f"# evaluation report (seed {self.seed}, {len(self.folds.folds)} folds; {AGGREGATION_NOTE})", ""]
        out += block("Absolute error (seconds)", rows, rel=False) + [""]
        out += block("Relative error", rows, rel=True)
        for m in self.methods:
            if m in ("naive", "type"):
                continue
            type_rows = [(f"type {t}", s) for t, s in self.per_type(m).items()]
            out += ["", f"{m} by procedure type"]
            out += block("Absolute error (seconds)", type_rows, rel=False)
            out += block("Relative error", type_rows, rel=True)
        return "\n".join(out) + "\n"

    def to_dict(self) -> dict:
        def stats(s: dict[str, Stat]) -> dict:
            return {m: vars(v) for m, v in s.items()}

        methods = {}
        for m in self.methods:
            methods[m] = {
                "summary": stats(self.summary(m)),
                "per_type": {str(t): stats(s) for t, s in self.per_type(m).items()},
                "per_fold": {str(k): stats(s) for k, s in self.per_fold(m).items()},
                "procedures": [
                    {
                        "id": e.record_id, "ptype": e.ptype, "n": e.n, "fold": e.fold,
                        "abs": e.abs.tolist(), "rel": e.rel.tolist(),
                    }
                    for e in sorted(self.errors[m], key=lambda e: e.record_id)
                ],
            }
        return {
            "format_version": 1,
            "seed": self.seed,
            "aggregation": AGGREGATION_NOTE,
            "std": "population",
            "quartile_rule": "frame i of N belongs to quarter ceil(4i/N); halftime is frame ceil(N/2)",
            "folds": [list(f) for f in self.folds.folds],
            "configs": self.configs,
            "methods": methods,
        }

    def write(self, path: str | Path) -> tuple[Path, Path]:
        """Write ``<path>.txt`` (tables) and ``<path>.json`` (all raw errors)."""
        base = Path(path)
        if base.suffix in (".txt", ".json"):
            base = base.with_suffix("")
        txt, js = base.with_suffix(".txt"), base.with_suffix(".json")
        txt.write_text(self.to_text(), encoding="utf-8")
        js.write_text(json.dumps(self.to_dict(), indent=1, allow_nan=True) + "\n", encoding="utf-8")
        return txt, js


def _errors(record: ProcedureRecord, fold: int, n_hat) -> ProcedureErrors:
    a, r = errors_for_procedure(n_hat, record.duration_n)
    return ProcedureErrors(record.id, record.ptype.id, record.duration_n, fold, a, r)


def run_eval(
    dataset: Sequence[ProcedureRecord],
    configs: Mapping[str, FusionConfig],
    seed: int,
    *,
    baselines: bool = True,
    folds: FoldSplit | None = None,
    on_model: Callable[[str, int, Model], None] | None = None,
) -> EvalReport:
    """Leave-one-fold-out evaluation of every config plus the naive and type baselines."""
    folds = make_folds(dataset, seed) if folds is None else folds
    names = (["naive", "type"] if baselines else []) + list(configs)
    errors: dict[str, list[ProcedureErrors]] = {m: [] for m in names}
    for k in range(len(folds.folds)):
        train_set, test_set = folds.split(dataset, k)
        if not test_set:
            continue
        if baselines:
            for name, kind in (("naive", "naive"), ("type", "per_type")):
                b = fit_baseline(train_set, kind)
                errors[name] += [_errors(r, k, b.n_hat(r)) for r in test_set]
        for name, cfg in configs.items():
            model = train(train_set, cfg)
            if on_model is not None:
                on_model(name, k, model)
            errors[name] += [_errors(r, k, predict_record(model, r)) for r in test_set]
    return EvalReport(seed, folds, errors, {n: c.to_dict() for n, c in configs.items()})
