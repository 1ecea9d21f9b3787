"""Strong and weak scaling of the ensemble engine on one machine.

A run times the complete user-facing workflow for a storage mode:

* ``none``: :func:`run_ensemble_nostorage`;
* ``shared`` / ``persistent``: :func:`add_realizations` then :func:`map_aggregate`.

Model parsing and compilation happen before the clock starts. Strong scaling
keeps the job count fixed; weak scaling gives every worker the same number of
jobs. Report schema (``rdmeflow-bench/1``)::

    {"schema", "mode", "storage", "cpu_count", "model", "postprocessor",
     "rows": [{"workers", "jobs", "wall_seconds", "speedup", "efficiency",
               "karp_flatt"}],
     "saturation": {"serial_fraction", "speedup_limit", "warnings"}}

``speedup`` is ``T1 / Tw`` (strong) or ``jobs_w * T1 / (jobs_1 * Tw)`` (weak);
``efficiency`` is ``speedup / workers`` (strong) or ``T1 / Tw`` (weak).
``karp_flatt`` is the experimentally determined serial fraction
``(1/S - 1/p) / (1 - 1/p)``, its mean over rows giving the overhead that
caps the attainable speedup at ``1 / serial_fraction``.
"""
from __future__ import annotations

import csv
import json
import math
import os
import tempfile
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .ensemble import PostProcessor, add_realizations, create_ensemble, map_aggregate, run_ensemble_nostorage
from .model import ModelSpec
from .solver import compile_model, run_nsm
from .storage import SharedStorage, StorageBackend

SCHEMA = "rdmeflow-bench/1"
BENCH_N = 1000
BENCH_T_END = 5.0


def bench_model(n_total: int = BENCH_N, mesh_subdiv: int = 2) -> ModelSpec:
    """Benchmark workload: the yeast model at fixed ``N`` over a short horizon."""
    from .polarization import build_yeast_model

    return build_yeast_model(n_total, mesh_subdiv=mesh_subdiv, tspan=np.linspace(0.0, BENCH_T_END, 11))


def _finite(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


@dataclass
class BenchRow:
    workers: int
    jobs: int
    wall_seconds: float
    speedup: float = 1.0
    efficiency: float = 1.0
    karp_flatt: float = math.nan


@dataclass
class BenchReport:
    mode: str
    storage: str
    rows: list
    model: str = ""
    postprocessor: str = ""
    cpu_count: int = field(default_factory=lambda: os.cpu_count() or 1)
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        ws = [r.workers for r in self.rows]
        if any(b <= a for a, b in zip(ws, ws[1:])):
            raise ValueError("worker counts must be strictly increasing")
        if any(not r.wall_seconds > 0 for r in self.rows):
            raise ValueError("wall times must be positive")
        self._derive()

    def _derive(self):
        if not self.rows:
            return
        base = self.rows[0]
        for r in self.rows:
            ratio = base.wall_seconds / r.wall_seconds
            if self.mode == "strong":
                r.speedup = ratio * base.workers
                r.efficiency = r.speedup / r.workers
            else:
                r.speedup = ratio * (r.jobs / base.jobs) * base.workers
                r.efficiency = ratio
            p = r.workers
            r.karp_flatt = (1 / r.speedup - 1 / p) / (1 - 1 / p) if p > 1 else math.nan

    def row(self, workers) -> BenchRow:
        for r in self.rows:
            if r.workers == workers:
                return r
        raise KeyError(workers)

    @property
    def serial_fraction(self) -> float:
        vals = [r.karp_flatt for r in self.rows if not math.isnan(r.karp_flatt)]
        return float(np.mean(vals)) if vals else math.nan

    def to_dict(self) -> dict:
        """Plain report; undefined or unbounded quantities are ``None`` (JSON null)."""
        e = self.serial_fraction
        return {
            "schema": SCHEMA, "mode": self.mode, "storage": self.storage, "cpu_count": self.cpu_count,
            "model": self.model, "postprocessor": self.postprocessor,
            "rows": [{k: _finite(v) for k, v in vars(r).items()} for r in self.rows],
            "saturation": {"serial_fraction": _finite(e),
                           "speedup_limit": _finite(1 / e) if e > 0 else None,
                           "warnings": list(self.warnings)},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, allow_nan=False)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["mode", "storage", "workers", "jobs", "wall_seconds", "speedup", "efficiency", "karp_flatt"])
            for r in self.rows:
                w.writerow([self.mode, self.storage, r.workers, r.jobs, repr(r.wall_seconds), repr(r.speedup),
                            repr(r.efficiency), repr(r.karp_flatt)])

    def write(self, path):
        """Write ``path`` as JSON, or CSV when it ends in ``.csv``."""
        if str(path).endswith(".csv"):
            self.write_csv(path)
        else:
            with open(path, "w") as fh:
                fh.write(self.to_json())


def _default_g(model):
    return PostProcessor.make("species_total", species=model.species_names[0])


def _time_workflow(model, jobs, workers, storage_mode, backend, g, base_seed):
    if storage_mode == "none":
        t0 = time.perf_counter()
        run_ensemble_nostorage(model, jobs, g, workers, base_seed)
        return time.perf_counter() - t0
    owned = backend is None
    if owned:
        if storage_mode != "shared":
            raise ValueError(f"storage mode {storage_mode!r} needs an explicit backend")
        backend = SharedStorage(tempfile.mkdtemp(prefix="rf-bench-"))
    try:
        t0 = time.perf_counter()
        handle = add_realizations(create_ensemble(model, base_seed, backend, storage_mode), jobs, workers)
        map_aggregate(handle, g, workers, use_cache=False)
        return time.perf_counter() - t0
    finally:
        if owned:
            backend.teardown()


def _prepare(model, worker_counts):
    worker_counts = sorted(set(int(w) for w in worker_counts))
    if not worker_counts or worker_counts[0] < 1:
        raise ValueError("worker counts must be positive")
    notes = []
    cpus = os.cpu_count() or 1
    if worker_counts[-1] > cpus:
        msg = f"{worker_counts[-1]} workers requested on a machine with {cpus} logical CPUs"
        warnings.warn(msg, RuntimeWarning, stacklevel=3)
        notes.append(msg)
    # compile and warm the kernels outside the timed region
    compile_model(model)
    run_nsm(model, seed=0)
    return worker_counts, notes


def bench_strong(model: ModelSpec, n_jobs: int = 100, worker_counts=(1, 2, 4, 8), storage_mode: str = "none",
                 backend: StorageBackend | None = None, g: PostProcessor | None = None,
                 base_seed: int = 0) -> BenchReport:
    worker_counts, notes = _prepare(model, worker_counts)
    g = g or _default_g(model)
    rows = [BenchRow(w, n_jobs, _time_workflow(model, n_jobs, w, storage_mode, backend, g, base_seed))
            for w in worker_counts]
    return BenchReport("strong", storage_mode, rows, model.name, g.name, warnings=notes)


def bench_weak(model: ModelSpec, jobs_per_worker: int = 8, worker_counts=(1, 2, 4, 8), storage_mode: str = "none",
               backend: StorageBackend | None = None, g: PostProcessor | None = None,
               base_seed: int = 0) -> BenchReport:
    worker_counts, notes = _prepare(model, worker_counts)
    g = g or _default_g(model)
    rows = [BenchRow(w, jobs_per_worker * w,
                     _time_workflow(model, jobs_per_worker * w, w, storage_mode, backend, g, base_seed))
            for w in worker_counts]
    report = BenchReport("weak", storage_mode, rows, model.name, g.name, warnings=notes)
    worst = min(r.efficiency for r in report.rows)
    if worst < 0.9:
        report.warnings.append(f"weak scaling deviates from constant time: efficiency down to {worst:.2f}")
    return report
