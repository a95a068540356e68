"""Seeded train-and-evaluate runs shared by the CLI sweep and the acceptance suite."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from .config import RunConfig
from .localization import MetricsReport, evaluate
from .model import ModelConfig, Network, SGDConfig, TrainLog, build_model, train
from .rng import Rng
from .synthdata import DataSpec, Dataset, generate_dataset, read_spec_header, read_split

METRICS = ("top1_loc", "top1_clas", "gt_known_loc")


@dataclass
class RunResult:
    seed: int
    net: Network
    log: TrainLog
    report: MetricsReport


def load_data(rc: RunConfig, seed: int) -> tuple[Dataset, Dataset, DataSpec]:
    """Train/test splits: read from ``rc.data_path`` or generated with the data seed set to ``seed``."""
    if rc.data_path is not None:
        return read_split(rc.data_path / "train"), read_split(rc.data_path / "test"), read_spec_header(rc.data_path / "train")
    spec = replace(rc.data, seed=seed)
    train_set, test_set = _generated(spec)
    return train_set, test_set, spec


@lru_cache(maxsize=8)
def _generated(spec: DataSpec) -> tuple[Dataset, Dataset]:
    return generate_dataset(spec)


def fit(cfg: ModelConfig, opt: SGDConfig, train_set: Dataset, seed: int, pin: str | None = None) -> tuple[Network, TrainLog]:
    net = build_model(cfg, Rng.derive(seed, "init"))
    log = train(net, train_set.images, train_set.labels, opt, Rng.derive(seed, "train"), pin=pin)
    return net, log


_RUNS: dict[tuple, RunResult] = {}
_RUNS_MAX = 64


def clear_run_cache() -> None:
    _RUNS.clear()
    _generated.cache_clear()


def run_seed(rc: RunConfig, cfg: ModelConfig, seed: int, pin: str | None = None) -> RunResult:
    """Train on the seed's train split and evaluate on its test split.

    Runs are deterministic, so results are memoized per process on everything
    that affects them; a sweep point equal to an earlier run is not retrained.
    """
    key = (cfg.to_ini(), rc.opt, rc.data, str(rc.data_path), rc.theta_box, seed, pin)
    if key in _RUNS:
        return _RUNS[key]
    train_set, test_set, _ = load_data(rc, seed)
    net, log = fit(cfg, rc.opt, train_set, seed, pin)
    report = evaluate(net, test_set.images, test_set.labels, test_set.boxes, rc.theta_box)
    if len(_RUNS) >= _RUNS_MAX:
        _RUNS.pop(next(iter(_RUNS)))
    _RUNS[key] = result = RunResult(seed, net, log, report)
    return result


def mean_metrics(reports: list[MetricsReport]) -> dict[str, float]:
    return {m: float(np.mean([getattr(r, m) for r in reports])) for m in METRICS}


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("ADLLAB_THREADS", "1")))
    except ValueError:
        return 1


def sweep(rc: RunConfig) -> list[tuple[str, int, MetricsReport]]:
    """Train and evaluate every (sweep point, seed); rows come back in point-major order."""
    jobs = [(label, cfg, seed) for label, cfg in rc.sweep_points() for seed in rc.seeds]

    def one(job):
        label, cfg, seed = job
        return label, seed, run_seed(rc, cfg, seed).report

    if _workers() > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(_workers()) as pool:
            return list(pool.map(one, jobs))
    return [one(j) for j in jobs]


def sweep_tables(rc: RunConfig, rows: list[tuple[str, int, MetricsReport]]) -> tuple[str, str]:
    """(mean table, per-seed table) as tab-separated text."""
    axis = rc.sweep_axis
    per_seed = ["\t".join((axis, "seed") + METRICS)]
    grouped: dict[str, list[MetricsReport]] = {}
    for label, seed, rep in rows:
        grouped.setdefault(label, []).append(rep)
        per_seed.append("\t".join([label, str(seed)] + [f"{getattr(rep, m):.6f}" for m in METRICS]))
    table = ["\t".join((axis,) + METRICS)]
    for label, reps in grouped.items():
        means = mean_metrics(reps)
        table.append("\t".join([label] + [f"{means[m]:.6f}" for m in METRICS]))
    return "\n".join(table) + "\n", "\n".join(per_seed) + "\n"
