"""``rdmeflow`` command line.

Exit status: 0 success, 1 user error (bad flags, invalid model, too few
realizations, ...), 2 runtime failure (solver, storage, workers).
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import (ModelError, ModelRuntimeError, PostProcessorError, RdmeflowError, TaskError,
                     VarianceUndefinedError, MetricError, BudgetExceededError, CapacityError)
from .model import validate_model
from .storage import (KeyValidationError, NotFoundError, StorageError, backend_for_mode, load_storage_config)

PRESETS = ("yeast-polarization",)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _common(p):
    p.add_argument("--model", help="model file")
    p.add_argument("--preset", choices=PRESETS, help="built-in model instead of --model")
    p.add_argument("--N", type=int, default=1000, help="total molecules for the yeast preset")
    p.add_argument("--mesh-subdiv", type=int, default=2, help="sphere refinement for the yeast preset")
    p.add_argument("--set", action="append", default=[], metavar="NAME=VALUE", help="override a model parameter")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--storage", choices=("none", "shared", "persistent"), default="none")
    p.add_argument("--storage-config", help="INI file with a [storage] section")
    p.add_argument("--out", default=".", help="output directory")


def _g_flags(p, required=False):
    p.add_argument("--postprocess", required=required, metavar="NAME",
                   help="registered post-processor (species_total, polarization, ...)")
    p.add_argument("--gparam", action="append", default=[], metavar="KEY=VALUE",
                   help="post-processor parameter; values parse as JSON when possible")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rdmeflow", description="Spatial stochastic simulation ensembles.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", help="simulate one realization to a trajectory file")
    _common(p)
    p.add_argument("--name", help="output file name (default traj-s<seed>.rftraj)")

    p = sub.add_parser("ensemble", help="fused ensemble (--storage none) or generate into storage")
    _common(p)
    p.add_argument("--n", type=int, required=True, help="number of realizations")
    p.add_argument("--ensemble-id")
    _g_flags(p)

    p = sub.add_parser("postprocess", help="summarize a stored ensemble")
    _common(p)
    p.add_argument("--ensemble-id", required=True)
    p.add_argument("--no-cache", action="store_true", help="read every trajectory from the origin")
    _g_flags(p, required=True)

    p = sub.add_parser("sweep", help="parameter sweep, or the polarization switch sweep for the yeast preset")
    _common(p)
    p.add_argument("--axis", action="append", default=[], metavar="NAME=V1,V2,...")
    p.add_argument("--n", type=int, default=3, help="realizations per point")
    p.add_argument("--N-values", help="comma-separated molecule counts (yeast preset)")
    _g_flags(p)

    p = sub.add_parser("bench", help="strong or weak scaling benchmark")
    _common(p)
    p.add_argument("--mode", choices=("strong", "weak"), default="strong")
    p.add_argument("--workers-list", "--worker-counts", dest="worker_counts", default="1,2,4,8")
    p.add_argument("--jobs", type=int, default=100, help="total jobs (strong) or jobs per worker (weak)")
    p.add_argument("--report", help="report path (.json or .csv)")

    p = sub.add_parser("export", help="convert a trajectory file to CSV")
    _common(p)
    p.add_argument("--trajectory", required=True)
    p.add_argument("--format", choices=("csv", "snapshot"), default="csv")
    p.add_argument("--t-index", type=int, default=-1)
    p.add_argument("--dest", help="output CSV path")

    p = sub.add_parser("validate", help="check a model and print diagnostics")
    _common(p)
    return parser


def _parse_assignments(items, what):
    out = {}
    for item in items:
        name, sep, value = item.partition("=")
        if not sep or not name:
            raise UsageError(f"{what} must look like NAME=VALUE, got {item!r}")
        out[name.strip()] = value.strip()
    return out


def _load_model(args):
    if bool(args.model) == bool(args.preset):
        raise UsageError("give exactly one of --model or --preset")
    if args.preset == "yeast-polarization":
        from .polarization import build_yeast_model

        model = build_yeast_model(args.N, mesh_subdiv=args.mesh_subdiv)
    else:
        from .modelfile import load_model

        model = load_model(args.model)
    overrides = _parse_assignments(args.set, "--set")
    if overrides:
        try:
            model = model.with_parameters(**{k: float(v) for k, v in overrides.items()})
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    return model


def _postprocessor(args, model):
    from .ensemble import PostProcessor

    params = {}
    for k, v in _parse_assignments(args.gparam, "--gparam").items():
        try:
            params[k] = json.loads(v)
        except json.JSONDecodeError:
            params[k] = v
    if args.postprocess:
        return PostProcessor.make(args.postprocess, **params)
    if args.preset == "yeast-polarization":
        return PostProcessor.make("polarization", **params)
    return PostProcessor.make("species_total", species=model.species_names[0], **params)


def _backend(args):
    if args.storage == "none":
        return None
    cfg = load_storage_config(args.storage_config)
    if args.storage == "shared" and not cfg.get("shared_dir"):
        cfg["shared_dir"] = str(Path(args.out) / "shared")
    return backend_for_mode(args.storage, cfg)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_summary(out, stem, summary, params=None):
    from .ensemble import write_summary_csv

    (out / f"{stem}.json").write_text(json.dumps(summary.to_dict(), indent=1))
    write_summary_csv(out / f"{stem}.csv", [(params or {}, summary)], list(params or {}))


def cmd_run(args):
    from .solver import run_nsm
    from .trajectory import write_trajectory

    model = _load_model(args)
    traj = run_nsm(model, seed=args.seed)
    path = _out_dir(args) / (args.name or f"traj-s{args.seed}.rftraj")
    n = write_trajectory(traj, path)
    print(f"wrote {path} ({n} bytes)")
    return 0


def cmd_ensemble(args):
    from .ensemble import add_realizations, create_ensemble, map_aggregate, run_ensemble_nostorage

    model = _load_model(args)
    g = _postprocessor(args, model)
    out = _out_dir(args)
    if args.storage == "none":
        summary = run_ensemble_nostorage(model, args.n, g, args.workers, args.seed)
        _write_summary(out, "summary", summary)
        print(json.dumps(summary.to_dict()))
        return 0
    backend = _backend(args)
    handle = create_ensemble(model, args.seed, backend, args.storage, args.ensemble_id)
    handle = add_realizations(handle, args.n, args.workers)
    print(f"ensemble {handle.ensemble_id}: {handle.count} realizations in {args.storage} storage")
    if args.postprocess:
        summary = map_aggregate(handle, g, args.workers)
        _write_summary(out, f"{handle.ensemble_id}-summary", summary)
        print(json.dumps(summary.to_dict()))
    return 0


def cmd_postprocess(args):
    from .ensemble import EnsembleHandle, map_aggregate

    if args.storage == "none":
        raise UsageError("postprocess reads a stored ensemble; use --storage shared or persistent")
    backend = _backend(args)
    handle = EnsembleHandle.load(backend, args.ensemble_id, args.storage)
    g = _postprocessor(args, handle.model)
    summary = map_aggregate(handle, g, args.workers, use_cache=not args.no_cache)
    _write_summary(_out_dir(args), f"{handle.ensemble_id}-{g.name}", summary)
    print(json.dumps(summary.to_dict()))
    return 0


def _floats(text, flag):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"{flag}: expected comma-separated numbers, got {text!r}") from None


def cmd_sweep(args):
    out = _out_dir(args)
    if args.preset == "yeast-polarization" and not args.axis:
        from .polarization import run_switch_sweep

        values = [int(v) for v in _floats(args.N_values or "250,400,550,700,1000,3000,6000", "--N-values")]
        result = run_switch_sweep(values, ensemble_size=args.n, workers=args.workers,
                                  mesh_subdiv=args.mesh_subdiv, base_seed=args.seed)
        (out / "switch.json").write_text(json.dumps(result.to_json(), indent=1))
        result.write_csv(out / "switch.csv")
        for p in result.points:
            print(f"N={p.n_total} polarization={p.polarization:.1f}% membrane={p.membrane_count:.1f}"
                  + (f" error={p.error}" if p.error else ""))
        return 0 if all(p.error is None for p in result.points) else 2
    from .ensemble import SweepSpec, run_parameter_sweep

    model = _load_model(args)
    axes = {k: _floats(v, "--axis") for k, v in _parse_assignments(args.axis, "--axis").items()}
    spec = SweepSpec(axes, args.n, _postprocessor(args, model))
    try:
        spec.validate(model)
    except RdmeflowError as exc:
        raise UsageError(str(exc)) from exc
    result = run_parameter_sweep(model, spec, args.workers, args.storage, _backend(args), args.seed)
    (out / "sweep.json").write_text(result.to_json())
    result.write_csv(out / "sweep.csv")
    for row in result.rows:
        status = f"mean={row.summary.mean.tolist()}" if row.ok else f"error={row.error}"
        print(f"{row.params} {status}")
    return 0 if result.complete else 2


def cmd_bench(args):
    from .bench import bench_model, bench_strong, bench_weak

    try:
        counts = [int(w) for w in args.worker_counts.split(",") if w.strip()]
    except ValueError:
        raise UsageError(f"--workers-list: expected integers, got {args.worker_counts!r}") from None
    if args.model or args.preset:
        model = _load_model(args)
    else:
        model = bench_model()
    backend = _backend(args) if args.storage == "persistent" else None
    fn = bench_strong if args.mode == "strong" else bench_weak
    report = fn(model, args.jobs, counts, args.storage, backend, base_seed=args.seed)
    if args.report:
        report.write(args.report)
    print(report.to_json())
    return 0


def cmd_export(args):
    from .trajectory import export_csv, export_mesh_snapshot, read_trajectory

    names = None
    model = None
    if args.model or args.preset:
        model = _load_model(args)
        names = model.species_names
    traj = read_trajectory(args.trajectory, names)
    dest = args.dest or str(_out_dir(args) / (Path(args.trajectory).stem + ".csv"))
    if args.format == "csv":
        export_csv(traj, dest)
    else:
        if model is None:
            raise UsageError("snapshot export needs --model or --preset for the mesh")
        export_mesh_snapshot(traj, args.t_index, dest, model.mesh, model.subdomains)
    print(f"wrote {dest}")
    return 0


def cmd_validate(args):
    model = _load_model(args)
    diags = validate_model(model)
    for d in diags:
        print(d, file=sys.stderr)
    if diags:
        return 1
    print(f"{model.name}: ok ({model.num_voxels} voxels, {len(model.species)} species, "
          f"{len(model.reactions)} reactions)")
    return 0


COMMANDS = {
    "run": cmd_run, "ensemble": cmd_ensemble, "postprocess": cmd_postprocess, "sweep": cmd_sweep,
    "bench": cmd_bench, "export": cmd_export, "validate": cmd_validate,
}

_USER_ERRORS = (UsageError, ModelError, VarianceUndefinedError, PostProcessorError, MetricError,
                KeyValidationError, NotFoundError, CapacityError, FileNotFoundError, ValueError)
_RUNTIME_ERRORS = (ModelRuntimeError, BudgetExceededError, TaskError, StorageError, RdmeflowError, OSError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except _USER_ERRORS as exc:
        print(f"rdmeflow {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except _RUNTIME_ERRORS as exc:
        print(f"rdmeflow {args.command}: failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
