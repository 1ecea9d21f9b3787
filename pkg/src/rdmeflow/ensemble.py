"""Parallel ensembles, post-processing statistics and parameter sweeps.

Three workflows share one task runner:

* fused (no storage): each task simulates realizations and reduces them with
  the post-processor ``g`` straight away;
* generate: tasks simulate and write trajectories to a storage backend under
  ``<ensemble id>/r<index>``;
* post-process: tasks read stored trajectories back and reduce them.

Realization ``i`` always uses seed ``derive_seed(base_seed, i)``. Work is cut
into chunks of ``CHUNK_SIZE`` consecutive indices; each chunk yields a
partial ``(count, mean, M2)`` and the controller merges partials in chunk
order. Chunking depends only on indices, so every summary is bit-identical
whatever the worker count, and the fused and store-then-process paths agree
exactly.

Workers are local processes. A task is a pure function of (model text,
seed, post-processor name and parameters); a failed task is retried once.
"""
from __future__ import annotations

import csv
import hashlib
import itertools
import json
import math
import multiprocessing
import re
import uuid
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field, replace

import numpy as np
import xxhash

from .errors import PostProcessorError, RdmeflowError, TaskError, VarianceUndefinedError
from .model import ModelSpec
from .modelfile import parse_model
from .rng import derive_seed
from .solver import run_nsm
from .storage import LocalStorage, StorageBackend, StorageError, cache_through
from .trajectory import Trajectory, from_bytes, to_bytes

CHUNK_SIZE = 4
Z95 = 1.96
_REALIZATION = re.compile(r"^r(\d+)$")


# --------------------------------------------------------------------------
# post-processors
# --------------------------------------------------------------------------

_REGISTRY: dict = {}
_EXTENSIONS = ("rdmeflow.polarization",)


def register_postprocessor(name, arity):
    """Register ``fn(traj, model, **params) -> sequence of floats``.

    ``arity(model, **params)`` returns the output length, fixed before any
    realization is processed.
    """
    def deco(fn):
        _REGISTRY[name] = (fn, arity)
        return fn
    return deco


@dataclass(frozen=True)
class PostProcessor:
    """A registered reduction ``g`` plus its parameters (picklable by name)."""

    name: str
    params: tuple = ()

    @classmethod
    def make(cls, name, **params):
        return cls(name, tuple(sorted(params.items())))

    def _entry(self):
        if self.name not in _REGISTRY:
            import importlib

            for mod in _EXTENSIONS:
                importlib.import_module(mod)
        try:
            return _REGISTRY[self.name]
        except KeyError:
            raise PostProcessorError(f"unknown post-processor {self.name!r}") from None

    def arity(self, model) -> int:
        return int(self._entry()[1](model, **dict(self.params)))

    def __call__(self, traj, model) -> np.ndarray:
        fn, _ = self._entry()
        out = np.asarray(fn(traj, model, **dict(self.params)), dtype=float).reshape(-1)
        n = self.arity(model)
        if len(out) != n:
            raise PostProcessorError(f"post-processor {self.name!r} returned {len(out)} values, declared {n}")
        return out


def _time_index(traj, time_index):
    return int(time_index) if time_index is not None else -1


@register_postprocessor("species_total", lambda model, **_: 1)
def _species_total(traj, model, species, time_index=-1):
    """Whole-domain count of ``species`` at one output time."""
    return [traj.counts[_time_index(traj, time_index), :, traj.species_index(species)].sum()]


@register_postprocessor("species_total_series", lambda model, **_: len(model.tspan))
def _species_total_series(traj, model, species):
    return traj.counts[:, :, traj.species_index(species)].sum(axis=1)


@register_postprocessor("voxel_counts", lambda model, **_: model.num_voxels)
def _voxel_counts(traj, model, species, time_index=-1):
    return traj.counts[_time_index(traj, time_index), :, traj.species_index(species)]


@register_postprocessor("second_moment", lambda model, **_: 1)
def _second_moment(traj, model, species, origin, time_index=-1):
    """Mean squared distance of ``species`` molecules from the point ``origin``."""
    x = traj.counts[_time_index(traj, time_index), :, traj.species_index(species)]
    d2 = ((model.mesh.coords - np.asarray(origin, dtype=float)[: model.mesh.coords.shape[1]]) ** 2).sum(axis=1)
    total = x.sum()
    return [float(np.dot(x, d2) / total) if total else 0.0]


@register_postprocessor("constant", lambda model, **_: 1)
def _constant(traj, model, value):
    return [value]


# --------------------------------------------------------------------------
# statistics
# --------------------------------------------------------------------------

@dataclass
class Partial:
    """Mergeable running moments: count, mean and sum of squared deviations."""

    count: int
    mean: np.ndarray
    m2: np.ndarray

    @classmethod
    def empty(cls, n):
        return cls(0, np.zeros(n), np.zeros(n))

    def add(self, value):
        value = np.asarray(value, dtype=float)
        self.count += 1
        delta = value - self.mean
        self.mean = self.mean + delta / self.count
        self.m2 = self.m2 + delta * (value - self.mean)

    def merge(self, other: "Partial") -> "Partial":
        if other.count == 0:
            return Partial(self.count, self.mean.copy(), self.m2.copy())
        if self.count == 0:
            return Partial(other.count, other.mean.copy(), other.m2.copy())
        n = self.count + other.count
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.count / n)
        m2 = self.m2 + other.m2 + delta * delta * (self.count * other.count / n)
        return Partial(n, mean, m2)


@dataclass(frozen=True, eq=False)
class StatSummary:
    mean: np.ndarray
    variance: np.ndarray
    ci95: np.ndarray
    count: int
    name: str = ""

    def __eq__(self, other):
        if not isinstance(other, StatSummary):
            return NotImplemented
        return (self.count == other.count and np.array_equal(self.mean, other.mean)
                and np.array_equal(self.variance, other.variance) and np.array_equal(self.ci95, other.ci95))

    @classmethod
    def from_partial(cls, p: Partial, name=""):
        if p.count < 2:
            raise VarianceUndefinedError(f"variance needs at least 2 realizations, got {p.count}")
        var = np.maximum(p.m2 / (p.count - 1), 0.0)
        return cls(p.mean, var, Z95 * np.sqrt(var / p.count), p.count, name)

    def to_dict(self):
        return {"name": self.name, "K": self.count, "mean": self.mean.tolist(),
                "variance": self.variance.tolist(), "ci95_halfwidth": self.ci95.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["mean"], float), np.array(d["variance"], float),
                   np.array(d["ci95_halfwidth"], float), int(d["K"]), d.get("name", ""))


def summarize(values, name="") -> StatSummary:
    """Summary of per-realization outputs in index order, with the engine's chunked merge."""
    values = [np.asarray(v, dtype=float).reshape(-1) for v in values]
    if not values:
        raise VarianceUndefinedError("no realizations")
    partials = []
    for lo in range(0, len(values), CHUNK_SIZE):
        p = Partial.empty(len(values[0]))
        for v in values[lo:lo + CHUNK_SIZE]:
            p.add(v)
        partials.append(p)
    return StatSummary.from_partial(_merge_all(partials, len(values[0])), name)


def _merge_all(partials, n):
    total = Partial.empty(n)
    for p in partials:
        total = total.merge(p)
    return total


# --------------------------------------------------------------------------
# task runner
# --------------------------------------------------------------------------

_MODEL_CACHE: dict = {}
_LOCAL_CACHE: dict = {}


def _model_from_text(text: str) -> ModelSpec:
    key = hashlib.sha256(text.encode()).digest()
    model = _MODEL_CACHE.get(key)
    if model is None:
        if len(_MODEL_CACHE) > 32:
            _MODEL_CACHE.clear()
        model = _MODEL_CACHE[key] = parse_model(text)
    return model


def _worker_cache(origin: StorageBackend) -> LocalStorage:
    # one cache per origin, so equal keys in different stores never alias
    tag = xxhash.xxh64_hexdigest(repr(origin).encode())
    if tag not in _LOCAL_CACHE:
        _LOCAL_CACHE[tag] = LocalStorage()
    return _LOCAL_CACHE[tag]


@dataclass(frozen=True)
class _Task:
    kind: str              # "fused", "generate" or "reduce"
    model_text: str
    base_seed: int
    indices: tuple
    ensemble_id: str = ""
    backend: StorageBackend | None = None
    g: PostProcessor | None = None
    hook: object = None
    use_cache: bool = True


def _run_task(task: _Task, attempt: int):
    model = _model_from_text(task.model_text)
    partial = Partial.empty(task.g.arity(model)) if task.g is not None else None
    for index in task.indices:
        seed = derive_seed(task.base_seed, index)
        key = realization_key(task.ensemble_id, index)
        try:
            if task.hook is not None:
                task.hook(index, attempt)
            if task.kind == "reduce":
                if task.use_cache:
                    data = cache_through(_worker_cache(task.backend), task.backend, key)
                else:
                    data = task.backend.get(key)
                traj = from_bytes(data, model.species_names)
            else:
                traj = run_nsm(model, seed=seed)
                if task.kind == "generate":
                    task.backend.put(key, to_bytes(traj))
            if partial is not None:
                partial.add(task.g(traj, model))
        except PostProcessorError:
            raise
        except StorageError as exc:
            raise TaskError(f"realization {index}: {exc}", index=index, seed=seed, key=exc.key) from exc
        except Exception as exc:  # noqa: BLE001 - solver, format or injected failures
            raise TaskError(f"realization {index} (seed {seed}): {exc}", index=index, seed=seed, key=key) from exc
    return partial


def _pool(workers):
    return ProcessPoolExecutor(max_workers=workers, mp_context=multiprocessing.get_context("fork"))


def run_tasks(tasks, workers: int, retries: int = 1):
    """Run ``tasks`` on ``workers`` processes (in-process when 1).

    Returns ``(results, errors)``: results in task order (``None`` where the
    task failed) and ``{task position: exception}`` for tasks that failed
    ``retries + 1`` times.
    """
    n = len(tasks)
    results = [None] * n
    attempts = [0] * n
    errors: dict = {}
    pending = list(range(n))
    while pending:
        failed = []
        if workers <= 1:
            for i in pending:
                try:
                    results[i] = _run_task(tasks[i], attempts[i])
                except Exception as exc:  # noqa: BLE001 - any task failure is retried once
                    attempts[i] += 1
                    (failed.append(i) if attempts[i] <= retries else errors.__setitem__(i, exc))
        else:
            with _pool(min(workers, len(pending))) as pool:
                futures = {pool.submit(_run_task, tasks[i], attempts[i]): i for i in pending}
                for fut in as_completed(futures):
                    i = futures[fut]
                    try:
                        results[i] = fut.result()
                    except Exception as exc:  # noqa: BLE001
                        attempts[i] += 1
                        (failed.append(i) if attempts[i] <= retries else errors.__setitem__(i, exc))
        pending = sorted(failed)
    return results, errors


def _chunks(start, stop):
    # chunk boundaries are aligned to multiples of CHUNK_SIZE so they never depend on workers
    lo = start
    while lo < stop:
        hi = min(stop, (lo // CHUNK_SIZE + 1) * CHUNK_SIZE)
        yield tuple(range(lo, hi))
        lo = hi


def _raise_first(errors):
    i = min(errors)
    exc = errors[i]
    if isinstance(exc, (TaskError, PostProcessorError)):
        raise exc
    raise TaskError(f"task {i} failed: {exc!r}") from exc


# --------------------------------------------------------------------------
# ensembles
# --------------------------------------------------------------------------

def realization_key(ensemble_id: str, index: int) -> str:
    return f"{ensemble_id}/r{index}"


@dataclass(frozen=True)
class EnsembleHandle:
    ensemble_id: str
    model_text: str
    base_seed: int
    count: int = 0
    storage_mode: str = "none"
    backend: StorageBackend | None = field(default=None, compare=False)

    @property
    def model(self) -> ModelSpec:
        return _model_from_text(self.model_text)

    @property
    def keys(self) -> list:
        return [realization_key(self.ensemble_id, i) for i in range(self.count)]

    def manifest(self) -> dict:
        return {"ensemble_id": self.ensemble_id, "base_seed": self.base_seed, "count": self.count,
                "storage_mode": self.storage_mode, "model": self.model_text}

    def save_manifest(self):
        if self.backend is not None:
            self.backend.put(f"{self.ensemble_id}/manifest.json", json.dumps(self.manifest(), indent=1).encode())

    @classmethod
    def load(cls, backend, ensemble_id, storage_mode="shared"):
        data = json.loads(backend.get(f"{ensemble_id}/manifest.json"))
        return cls(data["ensemble_id"], data["model"], int(data["base_seed"]), int(data["count"]),
                   data.get("storage_mode", storage_mode), backend)


def create_ensemble(model: ModelSpec | str, base_seed: int = 0, backend: StorageBackend | None = None,
                    storage_mode: str | None = None, ensemble_id: str | None = None) -> EnsembleHandle:
    text = model if isinstance(model, str) else model.text
    mode = storage_mode or (getattr(backend, "name", "none") if backend is not None else "none")
    return EnsembleHandle(ensemble_id or f"ens-{uuid.uuid4().hex[:12]}", text, int(base_seed), 0, mode, backend)


def add_realizations(handle: EnsembleHandle, n: int, workers: int = 1, hook=None) -> EnsembleHandle:
    """Generate ``n`` more realizations and store them (workflow C)."""
    if handle.backend is None:
        raise RdmeflowError("add_realizations needs a shared or persistent storage backend")
    if n <= 0:
        return handle
    tasks = [_Task("generate", handle.model_text, handle.base_seed, idx, handle.ensemble_id, handle.backend, hook=hook)
             for idx in _chunks(handle.count, handle.count + n)]
    _, errors = run_tasks(tasks, workers)
    if errors:
        _raise_first(errors)
    new = replace(handle, count=handle.count + n)
    new.save_manifest()
    return new


def stored_indices(handle: EnsembleHandle) -> list:
    out = []
    for key in handle.backend.list(handle.ensemble_id):
        m = _REALIZATION.match(key.rsplit("/", 1)[-1])
        if m:
            out.append(int(m.group(1)))
    return sorted(out)


def map_aggregate(handle: EnsembleHandle, g: PostProcessor, workers: int = 1, hook=None,
                  use_cache: bool = True) -> StatSummary:
    """Apply ``g`` to every realization and summarize.

    With a backend this reads stored trajectories (workflow D); without one
    the realizations are generated on the fly (workflow B).
    """
    if handle.count < 2:
        raise VarianceUndefinedError(f"variance needs at least 2 realizations, got {handle.count}")
    model = handle.model
    arity = g.arity(model)
    kind = "reduce" if handle.backend is not None else "fused"
    tasks = [_Task(kind, handle.model_text, handle.base_seed, idx, handle.ensemble_id, handle.backend, g, hook, use_cache)
             for idx in _chunks(0, handle.count)]
    results, errors = run_tasks(tasks, workers)
    if errors:
        _raise_first(errors)
    return StatSummary.from_partial(_merge_all(results, arity), g.name)


def run_ensemble_nostorage(model: ModelSpec, n: int, g: PostProcessor, workers: int = 1,
                           base_seed: int = 0, hook=None) -> StatSummary:
    """Fused generate-and-reduce with nothing persisted (workflow B)."""
    if n < 2:
        raise VarianceUndefinedError(f"variance needs at least 2 realizations, got {n}")
    return map_aggregate(replace(create_ensemble(model, base_seed), count=n), g, workers, hook)


# --------------------------------------------------------------------------
# sweeps
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepSpec:
    axes: dict
    ensemble_size: int
    postprocessor: PostProcessor

    def points(self) -> list:
        names = list(self.axes)
        return [dict(zip(names, combo)) for combo in itertools.product(*(self.axes[n] for n in names))]

    def validate(self, model: ModelSpec):
        if not self.axes:
            raise RdmeflowError("a sweep needs at least one parameter axis")
        known = set(model.parameter_values)
        missing = [a for a in self.axes if a not in known]
        if missing:
            raise RdmeflowError(f"sweep axes {missing} are not model parameters")
        if any(len(v) == 0 for v in self.axes.values()):
            raise RdmeflowError("every sweep axis needs at least one value")
        if self.ensemble_size < 2:
            raise VarianceUndefinedError("each sweep point needs at least 2 realizations")


def point_seed(base_seed: int, point: dict) -> int:
    """Base seed of one sweep point, from the point's own values (order independent)."""
    canon = json.dumps(sorted((k, float(v)) for k, v in point.items()))
    return derive_seed(base_seed, xxhash.xxh64_intdigest(canon.encode(), seed=0))


def _point_tag(point):
    return xxhash.xxh64_hexdigest(json.dumps(sorted((k, float(v)) for k, v in point.items())).encode())


@dataclass
class SweepRow:
    params: dict
    seed: int
    summary: StatSummary | None = None
    error: str | None = None

    @property
    def ok(self):
        return self.error is None


@dataclass
class SweepResult:
    rows: list
    postprocessor: PostProcessor

    @property
    def complete(self):
        return all(r.ok for r in self.rows)

    def by_params(self, **params):
        for r in self.rows:
            if all(float(r.params[k]) == float(v) for k, v in params.items()):
                return r
        raise KeyError(params)

    def to_json(self) -> str:
        return json.dumps({
            "postprocessor": {"name": self.postprocessor.name, "params": dict(self.postprocessor.params)},
            "complete": self.complete,
            "points": [{"params": r.params, "seed": r.seed, "error": r.error,
                        "summary": r.summary.to_dict() if r.summary is not None else None} for r in self.rows],
        }, indent=1, default=_json_default)

    def write_csv(self, path):
        write_summary_csv(path, [(r.params, r.summary) for r in self.rows if r.summary is not None],
                          list(self.rows[0].params) if self.rows else [])


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def write_summary_csv(path, rows, param_names):
    """``param_1..param_p,stat_name,component,mean,variance,ci95_halfwidth,K``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([*param_names, "stat_name", "component", "mean", "variance", "ci95_halfwidth", "K"])
        for params, s in rows:
            for c in range(len(s.mean)):
                w.writerow([*(repr(float(params[p])) for p in param_names), s.name, c,
                            repr(float(s.mean[c])), repr(float(s.variance[c])), repr(float(s.ci95[c])), s.count])


def run_parameter_sweep(model: ModelSpec, sweep: SweepSpec, workers: int = 1, storage_mode: str = "none",
                        backend: StorageBackend | None = None, base_seed: int = 0,
                        sweep_id: str | None = None, hook=None) -> SweepResult:
    """One ensemble per point of the cartesian product of ``sweep.axes``.

    A point's seed depends only on its parameter values, so reordering axes
    or values leaves every per-point summary unchanged. Failed points are
    reported in their row and the sweep carries on. In ``none`` mode only
    the summaries are written to ``backend`` (when one is given).
    """
    sweep.validate(model)
    sweep_id = sweep_id or f"sweep-{uuid.uuid4().hex[:12]}"
    points = sweep.points()
    rows = [SweepRow(p, point_seed(base_seed, p)) for p in points]
    texts = [model.with_parameters(**p).text for p in points]
    n = sweep.ensemble_size
    g = sweep.postprocessor
    stored = storage_mode != "none"
    if stored and backend is None:
        raise RdmeflowError(f"storage mode {storage_mode!r} needs a backend")

    owners: list = []
    tasks: list = []
    if stored:
        gen = []
        for pi, (row, text) in enumerate(zip(rows, texts)):
            eid = f"{sweep_id}-{_point_tag(row.params)}"
            for idx in _chunks(0, n):
                gen.append(_Task("generate", text, row.seed, idx, eid, backend, hook=hook))
                owners.append(pi)
        _, errors = run_tasks(gen, workers)
        failed = {owners[i]: errors[i] for i in errors}
        owners = []
        for pi, (row, text) in enumerate(zip(rows, texts)):
            if pi in failed:
                continue
            eid = f"{sweep_id}-{_point_tag(row.params)}"
            EnsembleHandle(eid, text, row.seed, n, storage_mode, backend).save_manifest()
            for idx in _chunks(0, n):
                tasks.append(_Task("reduce", text, row.seed, idx, eid, backend, g, hook))
                owners.append(pi)
    else:
        failed = {}
        for pi, (row, text) in enumerate(zip(rows, texts)):
            for idx in _chunks(0, n):
                tasks.append(_Task("fused", text, row.seed, idx, "", None, g, hook))
                owners.append(pi)
    results, errors = run_tasks(tasks, workers)
    for i, exc in errors.items():
        failed.setdefault(owners[i], exc)
    for pi, row in enumerate(rows):
        if pi in failed:
            row.error = f"{type(failed[pi]).__name__}: {failed[pi]}"
            continue
        parts = [results[i] for i in range(len(tasks)) if owners[i] == pi]
        row.summary = StatSummary.from_partial(_merge_all(parts, len(parts[0].mean)), g.name)
    result = SweepResult(rows, g)
    if backend is not None:
        backend.put(f"{sweep_id}/summary.json", result.to_json().encode())
    return result
