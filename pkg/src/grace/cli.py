"""Command-line entry point: ``grace {validate,diagnose,build-vector,search,simulate}``.

Exit codes: 0 success, 2 input or validation error, 3 oracle or runtime error.
"""

from __future__ import annotations

import argparse
import csv
import fcntl
import hashlib
import json
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path

from . import __version__
from .diagnostics import GraceThresholds, diagnose, pilot_decision
from .errors import (
    DecompositionUndefinedError,
    DegenerateDirectionError,
    GraceError,
    InputError,
    InsufficientDataError,
    OracleError,
    UnbalancedGridError,
)
from .geometry import LayerSet, geometry_profile, rank_layers, union_top_k
from .harness import ExternalEvaluator, LandscapeConfig, LandscapeOracle, SynthConfig
from .search import (
    DEFAULT_COEFFICIENTS,
    GRID_COEFFICIENTS,
    Problem,
    SearchAborted,
    SearchConfig,
    SearchResult,
    SearchSpace,
    TrialCache,
    VectorSource,
    aggregate,
    grid_layers,
    grid_search,
    run_search,
)
from .simulate import CouplingConfig, run_study
from .store import ConceptDataset, Variant, validate_dataset
from .vectors import Method, build_vector

log = logging.getLogger("grace")

EXIT_OK, EXIT_INPUT, EXIT_RUNTIME = 0, 2, 3
TOOL = "grace"
MODES = ("full", "topk", "union", "grid")
# simulation defaults: 63 layers, prompt dispersion giving G roughly in [1, 3] over the ratio grid
STUDY_SYNTH = {"n_layers": 63, "sigma_prompt": 0.03}
# errors caused by the data rather than the tool
DATA_ERRORS = (InputError, DecompositionUndefinedError, InsufficientDataError, DegenerateDirectionError, UnbalancedGridError)


class UsageError(InputError):
    pass


# ---------------------------------------------------------------------- helpers


def _load_json(path: str | Path, what: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read {what} {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{what} {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError(f"{what} {path} must hold a JSON object")
    return data


def _digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _dump(obj: dict) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _write_json(path: Path, obj: dict) -> None:
    path.write_text(_dump(obj), encoding="utf-8")


def _write_curve(path: Path, result: SearchResult) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trial", "best_utility"])
        for i, best in result.convergence_rows():
            w.writerow([i, repr(float(best))])


@contextmanager
def _owned_output(out: str | Path):
    """Create ``out`` and hold an exclusive lock on it for the duration."""
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / ".grace.lock", "w")
    except OSError as exc:
        raise UsageError(f"cannot use output directory {out}: {exc}") from None
    try:
        try:
            fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            raise UsageError(f"output directory {out} is in use by another invocation") from None
        yield out
    finally:
        fh.close()


def _section(config: dict, key: str) -> dict:
    val = config.get(key, {})
    if not isinstance(val, dict):
        raise UsageError(f"config section {key!r} must be an object")
    return val


def _build(cls, data: dict, what: str):
    try:
        return cls.from_dict(data)
    except TypeError as exc:
        raise UsageError(f"bad {what}: {exc}") from None


def _header(command: str, config: dict, inputs: dict) -> dict:
    return {"tool": TOOL, "version": __version__, "command": command, "config": config, "inputs": inputs}


def _dataset_inputs(ds: ConceptDataset) -> dict:
    return {
        "manifest": str(ds.manifest_path) if ds.manifest_path else None,
        "manifest_sha256": _digest(ds.manifest_path) if ds.manifest_path else None,
        "files_sha256": dict(sorted(ds.file_digests.items())),
    }


def _pick_variant(ds: ConceptDataset, name: str | None) -> Variant:
    if name is None:
        return Variant.PROMPT_BOUNDARY if Variant.PROMPT_BOUNDARY in ds.variants else ds.variants[0]
    variant = Variant(name)
    ds.tensor(variant)  # raises MissingVariantError
    return variant


# --------------------------------------------------------------------- commands


def cmd_validate(args: argparse.Namespace) -> int:
    ds = validate_dataset(args.manifest)
    summary = {
        "concept_name": ds.concept_name,
        "model_name": ds.model_name,
        "variants": [v.value for v in ds.variants],
        "shape": list(ds.shape),
        **_dataset_inputs(ds),
    }
    sys.stdout.write(_dump(summary))
    return EXIT_OK


def cmd_diagnose(args: argparse.Namespace) -> int:
    config = _load_json(args.config, "config") if args.config else {}
    th = _build(GraceThresholds, _section(config, "thresholds"), "thresholds")
    ds = validate_dataset(args.manifest)
    primary = _pick_variant(ds, args.variant)
    body = diagnose(ds, th, primary)
    resolved = {"variant": primary.value, "thresholds": th.to_dict()}
    report = {
        **_header("diagnose", resolved, _dataset_inputs(ds)),
        "concept_name": ds.concept_name,
        "model_name": ds.model_name,
        "shape": list(ds.shape),
        **body,
    }
    with _owned_output(args.out) as out:
        _write_json(out / "diagnose.json", report)
    sys.stdout.write(_dump(report["grace"]))
    return EXIT_OK


def cmd_build_vector(args: argparse.Namespace) -> int:
    ds = validate_dataset(args.manifest)
    variant = _pick_variant(ds, args.variant)
    tensor = ds.tensor(variant)
    kwargs = {"threshold": args.threshold} if args.method == Method.CLUSTER.value else {}
    if not 0 <= args.layer < tensor.n_layers:
        raise UsageError(f"layer {args.layer} out of range [0, {tensor.n_layers})")
    vec = build_vector(tensor, args.layer, args.method, **kwargs)
    vec.metadata.update(variant=variant.value, concept=ds.concept_name, model=ds.model_name)
    with _owned_output(args.out) as out:
        path = vec.save(out / f"{ds.concept_name}.{args.method}.L{args.layer}")
    sys.stdout.write(_dump({"path": str(path), **vec.sidecar()}))
    return EXIT_OK


def _make_oracle(args: argparse.Namespace, config: dict):
    if args.evaluator:
        return ExternalEvaluator(args.evaluator, timeout=args.timeout, retries=args.retries), {
            "kind": "external",
            "command": args.evaluator,
            "timeout": args.timeout,
            "retries": args.retries,
        }
    data = _load_json(args.landscape, "landscape config") if args.landscape else _section(config, "landscape")
    if not data:
        raise UsageError("search needs --landscape <json> or --evaluator <command>")
    landscape = _build(LandscapeConfig, data, "landscape config")
    return LandscapeOracle(landscape), {"kind": "landscape", "landscape": data}


def _search_layers(args: argparse.Namespace, ds: ConceptDataset, variant: Variant) -> LayerSet:
    n_layers = ds.shape[0]
    if args.mode == "full":
        return LayerSet.full(n_layers)
    if args.mode == "grid":
        return grid_layers(n_layers, args.stride)
    if args.mode == "topk":
        return rank_layers(geometry_profile(ds.tensor(variant)).alignment, args.k, variant.value)
    pb = geometry_profile(ds.tensor(Variant.PROMPT_BOUNDARY)).alignment
    ra = geometry_profile(ds.tensor(Variant.RESPONSE_AVG)).alignment
    return union_top_k(pb, ra, args.k)


def _vector_source(ds: ConceptDataset, variant: Variant, layers, method: str, vec_dir: Path) -> VectorSource:
    entries = {}
    tensor = ds.tensor(variant)
    for layer in layers:
        vec = build_vector(tensor, layer, method)
        path = vec.save(vec_dir / f"{ds.concept_name}.{method}.L{layer}")
        entries[layer] = (vec.vector_id(), str(path.resolve()))
    return VectorSource(entries, default_id=None)


def _run_pilot(problem: Problem, ds: ConceptDataset, variant: Variant, results, vec_dir: Path, n_points: int = 10) -> dict:
    """Evaluate cluster vs diffmeans vectors at the best matched points of the first seed."""
    seed = results[0].seed
    ranked = sorted(results[0].history, key=lambda t: (-t.utility, t.index))
    points = []
    seen = set()
    for t in ranked:
        if (t.layer, t.coefficient) not in seen:
            seen.add((t.layer, t.coefficient))
            points.append((t.layer, t.coefficient))
        if len(points) == n_points:
            break
    layers = sorted({layer for layer, _ in points})
    sources = {m: _vector_source(ds, variant, layers, m, vec_dir) for m in ("cluster", "diffmeans")}
    rows = []
    for layer, coef in points:
        row = {"layer": layer, "coefficient": coef}
        for m, src in sources.items():
            res, _ = Problem(problem.oracle, problem.concept, problem.model, src, problem.cache).evaluate(layer, coef, seed)
            row[f"{m}_utility"] = res.utility
            row[f"{m}_coherence"] = res.coherence
        rows.append(row)
    return pilot_decision(rows).to_dict()


def cmd_search(args: argparse.Namespace) -> int:
    config = _load_json(args.config, "config") if args.config else {}
    search_cfg = dict(_section(config, "search"))
    if args.seeds:
        search_cfg["seeds"] = args.seeds
    if args.budget is not None:
        search_cfg["budget"] = args.budget
    sc = _build(SearchConfig, search_cfg, "search config")
    if args.mode == "union" and args.variant:
        raise UsageError("--variant does not apply to union mode")
    if args.stride < 1 or args.k < 1:
        raise UsageError("--stride and --k must be >= 1")

    ds = validate_dataset(args.manifest)
    variant = _pick_variant(ds, args.variant)
    layers = _search_layers(args, ds, variant)
    coefs = tuple(args.coefficients) if args.coefficients else (GRID_COEFFICIENTS if args.mode == "grid" else DEFAULT_COEFFICIENTS)
    space = SearchSpace(layers, coefs)

    with _owned_output(args.out) as out:
        cache_dir = Path(os.environ.get("GRACE_CACHE_DIR") or out)
        cache_dir.mkdir(parents=True, exist_ok=True)
        cache = TrialCache(cache_dir / "trials.jsonl", fsync=args.fsync)
        vec_dir = out / "vectors"
        vectors = _vector_source(ds, variant, layers.layers, args.method, vec_dir)
        oracle, oracle_desc = _make_oracle(args, config)
        resolved = {
            "mode": args.mode,
            "variant": None if args.mode == "union" else variant.value,
            "method": args.method,
            "k": args.k if args.mode in ("topk", "union") else None,
            "stride": args.stride if args.mode == "grid" else None,
            "search": sc.to_dict(),
            "oracle": oracle_desc,
            "pilot": args.pilot,
        }
        header = _header("search", resolved, _dataset_inputs(ds))
        problem = Problem(oracle, ds.concept_name, ds.model_name, vectors, cache)
        calls_before = getattr(oracle, "calls", 0)
        results: list[SearchResult] = []
        try:
            try:
                if args.mode == "grid":
                    for seed in sc.seeds:
                        results.append(grid_search(problem, ds.shape[0], args.stride, coefs, seed))
                else:
                    results = run_search(problem, space, sc, sampler=args.sampler, mode=args.mode, workers=args.workers)
            except SearchAborted as exc:
                partial = exc.partial
                record = {**header, "aborted": str(exc), "seed": partial.seed, "history": [t.to_dict() for t in partial.history]}
                _write_json(out / f"search.{partial.seed}.partial.json", record)
                raise
            for r in results:
                _write_json(out / f"search.{r.seed}.json", {**header, **r.to_dict()})
                _write_curve(out / f"convergence.{r.seed}.csv", r)
            agg = {**header, "space": space.to_dict(), **aggregate(results)}
            if args.pilot:
                agg["pilot"] = _run_pilot(problem, ds, variant, results, vec_dir)
            _write_json(out / "aggregate.json", agg)
            run_log = {
                "oracle_calls": getattr(oracle, "calls", 0) - calls_before,
                "cache_hits": cache.hits,
                "cache_misses": cache.misses,
                "cache_path": str(cache.path),
                "retries": getattr(oracle, "total_retries", 0),
            }
            _write_json(out / "run_log.json", run_log)
        finally:
            if isinstance(oracle, ExternalEvaluator):
                oracle.close()
    sys.stdout.write(_dump({k: agg[k] for k in ("best_utility_mean", "best_utility_std", "t95_mean", "t95_std")}))
    return EXIT_OK


def _simulate_csv(path: Path, report: dict) -> None:
    modes = report["modes"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "seed", "ratio", "granularity"] + [f"{m}_{c}" for m in modes for c in ("mean_t95", "mean_best_utility")])
        for row in report["table"]:
            w.writerow(
                [row["index"], row["seed"], row["ratio"], row["granularity"]]
                + [row[m][c] for m in modes for c in ("mean_t95", "mean_best_utility")]
            )


def cmd_simulate(args: argparse.Namespace) -> int:
    config = _load_json(args.config, "config") if args.config else {}
    synth_data = {**STUDY_SYNTH, **_section(config, "synth")}
    if args.seed is not None:
        synth_data["seed"] = args.seed
    synth = _build(SynthConfig, synth_data, "synth config")
    coupling = _build(CouplingConfig, _section(config, "coupling"), "coupling config")
    sc = _build(SearchConfig, _section(config, "search"), "search config")
    if args.replications < 0:
        raise UsageError("--replications must be >= 0")
    modes = tuple(args.modes)
    if "full" not in modes:
        raise UsageError("--modes must include full")
    body, _ = run_study(synth, coupling, sc, args.replications, modes)
    inputs = {"config": args.config, "config_sha256": _digest(args.config) if args.config else None}
    report = {**_header("simulate", {"replications": args.replications, "modes": list(modes)}, inputs), **body}
    with _owned_output(args.out) as out:
        _write_json(out / "simulate.json", report)
        _simulate_csv(out / "simulate.csv", report)
    summary = {"coupling": body["coupling"], "replications": args.replications, "correlations": body["correlations"]["full"]}
    sys.stdout.write(_dump(summary))
    return EXIT_OK


# ----------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="grace", description="Activation-geometry diagnostics and steering search.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    sub = parser.add_subparsers(dest="command", required=True)
    variants = [v.value for v in Variant]

    p = sub.add_parser("validate", help="load and check a dataset manifest")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("diagnose", help="geometry, ANOVA and GRACE recommendations")
    p.add_argument("--manifest", required=True)
    p.add_argument("--variant", choices=variants, help="variant driving the recommendations")
    p.add_argument("--config", help="JSON with a 'thresholds' section")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("build-vector", help="construct one steering vector")
    p.add_argument("--manifest", required=True)
    p.add_argument("--variant", choices=variants)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--method", choices=[m.value for m in Method], default=Method.DIFFMEANS.value)
    p.add_argument("--threshold", type=float, default=0.7, help="cluster similarity threshold")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_vector)

    p = sub.add_parser("search", help="budgeted (layer, coefficient) search")
    p.add_argument("--manifest", required=True)
    p.add_argument("--variant", choices=variants, help="variant for vectors and top-k ranking")
    p.add_argument("--mode", choices=MODES, default="full")
    p.add_argument("--k", type=int, default=15)
    p.add_argument("--stride", type=int, default=5)
    p.add_argument("--coefficients", type=float, nargs="+")
    p.add_argument("--method", choices=[m.value for m in Method], default=Method.DIFFMEANS.value)
    p.add_argument("--sampler", choices=("tpe", "random"), default="tpe")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--budget", type=int)
    p.add_argument("--config", help="JSON with 'search' and optionally 'landscape' sections")
    oracle = p.add_mutually_exclusive_group()
    oracle.add_argument("--landscape", help="synthetic LandscapeConfig JSON")
    oracle.add_argument("--evaluator", help="evaluator command speaking line-delimited JSON")
    p.add_argument("--timeout", type=float, default=600.0)
    p.add_argument("--retries", type=int, default=2)
    p.add_argument("--workers", type=int, default=1, help="seeds run concurrently")
    p.add_argument("--fsync", action="store_true", help="fsync the trial journal after each append")
    p.add_argument("--pilot", action="store_true", help="compare cluster and diffmeans vectors at 10 matched points")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("simulate", help="coupled granularity/search correlation study")
    p.add_argument("--config", help="JSON with 'synth', 'coupling' and 'search' sections")
    p.add_argument("--replications", type=int, default=50)
    p.add_argument("--modes", nargs="+", choices=("full", "topk", "union"), default=["full", "topk"])
    p.add_argument("--seed", type=int, help="base seed; concept i uses seed + i")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except OracleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        stderr = getattr(exc, "stderr", None) or getattr(exc.__cause__, "stderr", None)
        if stderr:
            print(f"evaluator stderr:\n{stderr}", file=sys.stderr)
        return EXIT_RUNTIME
    except (*DATA_ERRORS, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except GraceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
