"""Ablation sweeps over noise rank, attack radius and attack iterations, and their CSV reports."""
from __future__ import annotations

import copy
import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import ExperimentConfig
from .exceptions import ContractError
from .training import Checkpoint

log = logging.getLogger(__name__)

VARIABLES = ("rank", "epsilon", "k")
CSV_HEADER = ["config_id", "variable", "value", "seed_count", "clean_mean", "clean_std", "adv_mean", "adv_std", "wall_s"]


def _six(x: float) -> float:
    # canonical 6-decimal value so that emit/parse round-trips exactly
    return float(f"{x:.6f}")


@dataclass
class ReportRow:
    config_id: str
    variable: str
    value: float
    seed_count: int
    clean_mean: float
    clean_std: float
    adv_mean: float
    adv_std: float
    wall_s: float = 0.0

    def __post_init__(self):
        for name in ("value", "clean_mean", "clean_std", "adv_mean", "adv_std", "wall_s"):
            setattr(self, name, _six(float(getattr(self, name))))
        self.seed_count = int(self.seed_count)
        for name in ("clean_std", "adv_std"):
            v = getattr(self, name)
            if v < 0:
                raise ContractError(f"{name} must be >= 0, got {v}")

    def csv_fields(self) -> list[str]:
        return [
            self.config_id,
            self.variable,
            f"{self.value:.6f}",
            str(self.seed_count),
            f"{self.clean_mean:.6f}",
            f"{self.clean_std:.6f}",
            f"{self.adv_mean:.6f}",
            f"{self.adv_std:.6f}",
            f"{self.wall_s:.6f}",
        ]

    def __eq__(self, other):
        if not isinstance(other, ReportRow):
            return NotImplemented
        a, b = self.csv_fields(), other.csv_fields()
        return a == b


@dataclass
class RunReport:
    rows: list[ReportRow] = field(default_factory=list)
    train_steps: int = 0
    errors: dict[str, str] = field(default_factory=dict)

    def sorted_rows(self) -> list[ReportRow]:
        return sorted(self.rows, key=lambda r: (r.value, r.config_id))

    def row(self, value) -> ReportRow:
        for r in self.rows:
            if r.value == _six(value):
                return r
        raise KeyError(value)

    def __eq__(self, other):
        if not isinstance(other, RunReport):
            return NotImplemented
        return self.sorted_rows() == other.sorted_rows()


def emit_report(report: RunReport, path) -> None:
    """Write the report CSV (header always present, rows sorted by value then id)."""
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_HEADER)
            for row in report.sorted_rows():
                writer.writerow(row.csv_fields())
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc.strerror or exc}") from exc


def read_report(path) -> RunReport:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise ContractError(f"{path}: unexpected header {header}")
        rows = [
            ReportRow(r[0], r[1], float(r[2]), int(r[3]), float(r[4]), float(r[5]), float(r[6]), float(r[7]), float(r[8]))
            for r in reader
        ]
    return RunReport(rows)


def pooled_row(config_id, variable, value, seed_count, clean, adv, wall) -> ReportRow:
    def stats(xs):
        if not xs:
            return math.nan, math.nan
        return float(np.mean(xs)), float(np.std(xs))

    cm, cs = stats(clean)
    am, ast = stats(adv)
    return ReportRow(config_id, variable, value, seed_count, cm, cs, am, ast, wall)


@dataclass
class SweepSpec:
    variable: str
    values: list
    repetitions: int = 3
    base: ExperimentConfig = field(default_factory=ExperimentConfig)

    def __post_init__(self):
        if self.variable not in VARIABLES:
            raise ContractError(f"sweep variable must be one of {VARIABLES}, got {self.variable!r}")
        if not self.values:
            raise ContractError("sweep needs at least one value")
        if self.repetitions < 1:
            raise ContractError("repetitions must be >= 1")
        if self.variable in ("rank", "k") and any(int(v) != v or v < (0 if self.variable == "rank" else 1)
                                                  for v in self.values):
            raise ContractError(f"{self.variable} values must be integers in range, got {self.values}")
        if self.variable == "epsilon" and any(v < 0 for v in self.values):
            raise ContractError("epsilon values must be >= 0")

    @classmethod
    def from_config(cls, cfg: ExperimentConfig) -> "SweepSpec":
        s = cfg.raw["sweep"]
        return cls(s["variable"], list(s["values"]), int(s["repetitions"]), cfg)


def config_id(variable: str, value) -> str:
    return f"{variable}={value:g}"


def eval_seed(seed: int) -> int:
    return seed ^ 0x5EED


def run_sweep(spec: SweepSpec, checkpoint: Checkpoint | None = None, record_time: bool = False,
              n_jobs: int = 1) -> RunReport:
    """Train/evaluate every (value, seed) grid point and pool accuracies per value.

    Rank sweeps train one model per point.  Epsilon and k sweeps train one
    model per seed (or reuse ``checkpoint``) and only re-run the attack.
    Failed points are logged, reported with NaN statistics and skipped.
    """
    cfg = spec.base
    if checkpoint is not None and spec.variable == "rank":
        raise ContractError("a fixed checkpoint cannot be swept over rank")
    train_set, val_set, test_set = (cfg.shape_for_model(d) for d in cfg.datasets())
    seeds = [cfg.seed + r for r in range(spec.repetitions)]
    draws = int(cfg.raw["eval"]["n_noise_draws"])
    report = RunReport()

    def fit(seed, rank=None):
        est = cfg.estimator(seed=seed, rank=rank)
        est.fit(train_set.inputs, train_set.labels, val_set.inputs, val_set.labels)
        return est

    def score(est, attack, seed):
        clean = est.robust_score(test_set.inputs, test_set.labels, None, draws, eval_seed(seed))
        adv = est.robust_score(test_set.inputs, test_set.labels, attack, draws, eval_seed(seed))
        return clean.accuracies, adv.accuracies

    def run_map(fn, items):
        if n_jobs > 1:
            with ThreadPoolExecutor(max_workers=n_jobs) as pool:
                return list(pool.map(fn, items))
        return [fn(it) for it in items]

    grid = [(v, s) for v in spec.values for s in seeds]
    results: dict = {}

    if spec.variable == "rank":
        def point(item):
            value, seed = item
            t0 = time.perf_counter()
            try:
                est = fit(seed, rank=int(value))
                clean, adv = score(est, cfg.attack_config(), seed)
                return item, (clean, adv, est.n_train_steps_, time.perf_counter() - t0, None)
            except Exception as exc:  # noqa: BLE001 - a failed point must not abort the sweep
                return item, ([], [], 0, time.perf_counter() - t0, f"{type(exc).__name__}: {exc}")

        results = dict(run_map(point, grid))
    else:
        from .estimator import NoiseInjectedClassifier

        if checkpoint is not None:
            models = {s: NoiseInjectedClassifier.from_checkpoint(checkpoint) for s in seeds}
        else:
            models = dict(zip(seeds, run_map(fit, seeds)))
            report.train_steps += sum(m.n_train_steps_ for m in models.values())

        def point(item):
            value, seed = item
            t0 = time.perf_counter()
            try:
                est = models[seed] if n_jobs == 1 else copy.deepcopy(models[seed])
                change = {"epsilon": float(value)} if spec.variable == "epsilon" else {"k": int(value)}
                clean, adv = score(est, cfg.attack_config(**change), seed)
                return item, (clean, adv, 0, time.perf_counter() - t0, None)
            except Exception as exc:  # noqa: BLE001
                return item, ([], [], 0, time.perf_counter() - t0, f"{type(exc).__name__}: {exc}")

        results = dict(run_map(point, grid))

    for value in spec.values:
        clean, adv, wall, ok = [], [], 0.0, 0
        for seed in seeds:
            c, a, steps, dt, err = results[(value, seed)]
            report.train_steps += steps
            wall += dt
            if err:
                report.errors[f"{config_id(spec.variable, value)}/seed={seed}"] = err
                log.error("sweep point %s seed %d failed: %s", config_id(spec.variable, value), seed, err)
                continue
            ok += 1
            clean.extend(c)
            adv.extend(a)
        report.rows.append(
            pooled_row(config_id(spec.variable, value), spec.variable, value, ok, clean, adv,
                       wall if record_time else 0.0)
        )
    return report
