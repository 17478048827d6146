"""Budgeted search over (layer, coefficient): TPE, uniform random, and grid sweeps.

Both search dimensions are categorical. A run is strictly sequential for one
seed; results are cached durably by (concept, model, vector, layer,
coefficient, seed) so a configuration is never evaluated twice.
"""

from __future__ import annotations

import json
import logging
import math
import os
import threading
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import OracleError, ValidationError
from .geometry import LayerProvenance, LayerSet
from .harness import Oracle, UtilityQuery, UtilityResult

log = logging.getLogger(__name__)

DEFAULT_COEFFICIENTS = (0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5)
GRID_COEFFICIENTS = (1.0, 2.0, 3.0)


@dataclass(frozen=True)
class SearchSpace:
    layers: LayerSet
    coefficients: tuple[float, ...] = DEFAULT_COEFFICIENTS

    def __post_init__(self) -> None:
        coefs = tuple(float(c) for c in self.coefficients)
        if not coefs:
            raise ValidationError("coefficient list is empty")
        if any(c <= 0 for c in coefs) or any(b <= a for a, b in zip(coefs, coefs[1:])):
            raise ValidationError("coefficients must be positive and strictly increasing")
        object.__setattr__(self, "coefficients", coefs)

    @property
    def points(self) -> list[tuple[int, float]]:
        return [(layer, c) for layer in self.layers.layers for c in self.coefficients]

    def __len__(self) -> int:
        return len(self.layers) * len(self.coefficients)

    def to_dict(self) -> dict:
        return {"layers": self.layers.to_dict(), "coefficients": list(self.coefficients)}


@dataclass(frozen=True)
class SearchConfig:
    budget: int = 50
    seeds: tuple[int, ...] = (1, 2, 3)
    n_startup: int = 10
    gamma_fraction: float = 0.25
    n_candidates: int = 24
    prior_weight: float = 1.0

    def __post_init__(self) -> None:
        if self.budget < 1:
            raise ValidationError("budget must be >= 1")
        # n_startup >= budget is allowed and makes the run purely random
        if self.n_startup < 0:
            raise ValidationError("n_startup must be >= 0")
        if not 0.0 < self.gamma_fraction < 1.0:
            raise ValidationError("gamma_fraction must lie in (0, 1)")
        if self.n_candidates < 1 or self.prior_weight <= 0:
            raise ValidationError("n_candidates must be >= 1 and prior_weight > 0")
        if not self.seeds:
            raise ValidationError("at least one seed is required")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))

    @classmethod
    def from_dict(cls, d: dict) -> SearchConfig:
        d = dict(d)
        if "seeds" in d:
            d["seeds"] = tuple(d["seeds"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d


@dataclass(frozen=True)
class Trial:
    index: int
    layer: int
    coefficient: float
    seed: int
    utility: float
    concept_score: float
    coherence: float
    cache_hit: bool = False

    def to_dict(self) -> dict:
        # cache_hit is run bookkeeping, not part of the deterministic record
        d = asdict(self)
        del d["cache_hit"]
        return d


def compute_t95(utilities: Sequence[float] | Sequence[Trial]) -> int:
    """First 1-based trial whose running best reaches 95% of the final best."""
    values = [t.utility if isinstance(t, Trial) else float(t) for t in utilities]
    if not values:
        raise ValueError("t95 of an empty history")
    threshold = 0.95 * max(values)
    best = -math.inf
    for i, u in enumerate(values, start=1):
        best = max(best, u)
        if best >= threshold:
            return i
    raise AssertionError("unreachable")


def best_so_far(history: Sequence[Trial]) -> list[float]:
    return list(np.maximum.accumulate([t.utility for t in history])) if history else []


@dataclass
class SearchResult:
    seed: int
    mode: str
    history: list[Trial]
    space: SearchSpace
    exhausted: bool = False

    @property
    def best_trial(self) -> Trial:
        # earliest trial attaining the maximum
        return max(self.history, key=lambda t: (t.utility, -t.index))

    @property
    def best_layer(self) -> int:
        return self.best_trial.layer

    @property
    def best_coefficient(self) -> float:
        return self.best_trial.coefficient

    @property
    def best_utility(self) -> float:
        return self.best_trial.utility

    @property
    def t95(self) -> int:
        return compute_t95(self.history)

    def best_at(self, n_trials: int) -> float:
        return max(t.utility for t in self.history[:n_trials])

    @property
    def cache_hits(self) -> int:
        return sum(t.cache_hit for t in self.history)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "mode": self.mode,
            "best_layer": self.best_layer,
            "best_coefficient": self.best_coefficient,
            "best_utility": self.best_utility,
            "t95": self.t95,
            "n_trials": len(self.history),
            "exhausted": self.exhausted,
            "space": self.space.to_dict(),
            "history": [t.to_dict() for t in self.history],
            "best_so_far": best_so_far(self.history),
        }

    def convergence_rows(self) -> list[tuple[int, float]]:
        return list(enumerate(best_so_far(self.history), start=1))


def aggregate(results: Iterable[SearchResult]) -> dict:
    results = list(results)
    best = np.array([r.best_utility for r in results])
    t95 = np.array([r.t95 for r in results], dtype=np.float64)
    return {
        "n_runs": len(results),
        "seeds": [r.seed for r in results],
        "best_utility_mean": float(best.mean()),
        "best_utility_std": float(best.std()),
        "t95_mean": float(t95.mean()),
        "t95_std": float(t95.std()),
    }


# ---------------------------------------------------------------- trial cache

CacheKey = tuple[str, str, str, int, float, int]


def _key_from_record(rec: dict) -> CacheKey:
    return (
        str(rec["concept"]),
        str(rec["model"]),
        str(rec["vector_id"]),
        int(rec["layer"]),
        float(rec["coefficient"]),
        int(rec["seed"]),
    )


class TrialCache:
    """Append-only JSON-lines journal of evaluated configurations.

    A torn final line (crash mid-append) is ignored on load.
    """

    def __init__(self, path: str | Path | None = None, fsync: bool = False) -> None:
        self.path = Path(path) if path is not None else None
        self.fsync = fsync
        self._entries: dict[CacheKey, UtilityResult] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0
        if self.path is not None and self.path.exists():
            self._load()

    def _load(self) -> None:
        assert self.path is not None
        with open(self.path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    key = _key_from_record(rec)
                    result = UtilityResult(
                        float(rec["concept_score"]), float(rec["coherence"]), float(rec["utility"])
                    )
                except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                    log.warning("%s:%d: skipping unreadable journal line", self.path, lineno)
                    continue
                self._entries.setdefault(key, result)

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: CacheKey) -> bool:
        return key in self._entries

    def get(self, key: CacheKey) -> UtilityResult | None:
        with self._lock:
            return self._entries.get(key)

    def put(self, key: CacheKey, result: UtilityResult) -> None:
        with self._lock:
            if key in self._entries:
                return
            self._entries[key] = result
            if self.path is None:
                return
            rec = dict(zip(("concept", "model", "vector_id", "layer", "coefficient", "seed"), key))
            rec.update(asdict(result))
            try:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                # a torn previous line must not swallow this record
                needs_newline = self.path.exists() and self.path.stat().st_size > 0 and not _ends_with_newline(self.path)
                with open(self.path, "a", encoding="utf-8") as fh:
                    if needs_newline:
                        fh.write("\n")
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
                    fh.flush()
                    if self.fsync:
                        os.fsync(fh.fileno())
            except OSError as exc:
                warnings.warn(f"trial journal write failed ({exc}); result kept in memory only", stacklevel=2)

    def count(self, hit: bool) -> None:
        with self._lock:
            if hit:
                self.hits += 1
            else:
                self.misses += 1

    def keys(self) -> list[CacheKey]:
        return list(self._entries)


def _ends_with_newline(path: Path) -> bool:
    with open(path, "rb") as fh:
        fh.seek(-1, os.SEEK_END)
        return fh.read(1) == b"\n"


def cache_get_or_evaluate(
    cache: TrialCache,
    key: CacheKey,
    oracle: Oracle,
    query: UtilityQuery,
) -> tuple[UtilityResult, bool]:
    hit = cache.get(key)
    if hit is not None:
        cache.count(True)
        return hit, True
    result = oracle.evaluate(query)
    cache.put(key, result)  # journaled before the caller sees it
    cache.count(False)
    return result, False


# --------------------------------------------------------------------- vectors


@dataclass(frozen=True)
class VectorSource:
    """Per-layer steering vector identity: ``layer -> (vector_id, path)``.

    ``default_id`` covers layers without an explicit entry, e.g. synthetic
    landscapes that ignore the vector entirely.
    """

    entries: dict[int, tuple[str, str]] = field(default_factory=dict)
    default_id: str | None = "synthetic"

    def lookup(self, layer: int) -> tuple[str, str]:
        if layer in self.entries:
            return self.entries[layer]
        if self.default_id is None:
            raise KeyError(f"no steering vector for layer {layer}")
        return self.default_id, ""


# ---------------------------------------------------------------------- sampler


def _startup_pick(remaining: list[tuple[int, float]], rng: np.random.Generator) -> tuple[int, float]:
    return remaining[int(rng.integers(len(remaining)))]


def tpe_suggest(
    history: Sequence[Trial],
    space: SearchSpace,
    config: SearchConfig,
    rng: np.random.Generator,
) -> tuple[int, float] | None:
    """Next (layer, coefficient) to evaluate, or None once every point is used.

    Candidates are drawn from the good-set density restricted to unevaluated
    points and ranked by the product over dimensions of l(x)/g(x).
    """
    seen = {(t.layer, t.coefficient) for t in history}
    points = space.points
    remaining = [pt for pt in points if pt not in seen]
    if not remaining:
        return None
    if len(history) < max(config.n_startup, 1):
        return _startup_pick(remaining, rng)

    order = sorted(range(len(history)), key=lambda i: (-history[i].utility, i))
    n_good = max(1, math.ceil(config.gamma_fraction * len(history)))
    good = [history[i] for i in order[:n_good]]
    bad = [history[i] for i in order[n_good:]]

    def densities(domain: Sequence, attr: str) -> tuple[dict, dict]:
        prior = config.prior_weight / len(domain)
        out = []
        for group in (good, bad):
            counts = {x: prior for x in domain}
            for t in group:
                counts[getattr(t, attr)] += 1.0
            total = sum(counts.values())
            out.append({x: c / total for x, c in counts.items()})
        return out[0], out[1]

    l_layer, g_layer = densities(space.layers.layers, "layer")
    l_coef, g_coef = densities(space.coefficients, "coefficient")

    l_joint = np.array([l_layer[a] * l_coef[c] for a, c in remaining])
    ratio = np.array([(l_layer[a] / g_layer[a]) * (l_coef[c] / g_coef[c]) for a, c in remaining])
    draws = rng.choice(len(remaining), size=config.n_candidates, p=l_joint / l_joint.sum())
    return remaining[int(draws[int(np.argmax(ratio[draws]))])]


def random_suggest(
    history: Sequence[Trial],
    space: SearchSpace,
    config: SearchConfig,
    rng: np.random.Generator,
) -> tuple[int, float] | None:
    seen = {(t.layer, t.coefficient) for t in history}
    remaining = [pt for pt in space.points if pt not in seen]
    return _startup_pick(remaining, rng) if remaining else None


SAMPLERS: dict[str, Callable] = {"tpe": tpe_suggest, "random": random_suggest}


class SearchAborted(OracleError):
    """Oracle failure mid-run; ``partial`` holds the trials completed so far."""

    def __init__(self, message: str, partial: SearchResult):
        super().__init__(message)
        self.partial = partial


@dataclass
class Problem:
    """Everything a run needs besides the space and sampler settings."""

    oracle: Oracle
    concept: str = "synthetic"
    model: str = "synthetic"
    vectors: VectorSource = field(default_factory=VectorSource)
    cache: TrialCache = field(default_factory=TrialCache)

    def evaluate(self, layer: int, coefficient: float, seed: int) -> tuple[UtilityResult, bool]:
        vector_id, vector_path = self.vectors.lookup(layer)
        key: CacheKey = (self.concept, self.model, vector_id, int(layer), float(coefficient), int(seed))
        query = UtilityQuery(self.concept, self.model, vector_path, int(layer), float(coefficient), int(seed))
        return cache_get_or_evaluate(self.cache, key, self.oracle, query)


def _record(problem: Problem, history: list[Trial], layer: int, coef: float, seed: int, result: SearchResult) -> None:
    try:
        res, hit = problem.evaluate(layer, coef, seed)
    except OracleError as exc:
        raise SearchAborted(f"oracle failed at trial {len(history) + 1}: {exc}", result) from exc
    history.append(
        Trial(len(history) + 1, int(layer), float(coef), int(seed), res.utility, res.concept_score, res.coherence, hit)
    )


def run_seed(
    problem: Problem,
    space: SearchSpace,
    config: SearchConfig,
    seed: int,
    sampler: str = "tpe",
    mode: str | None = None,
) -> SearchResult:
    suggest = SAMPLERS[sampler]
    rng = np.random.default_rng(seed)
    history: list[Trial] = []
    result = SearchResult(seed, mode or sampler, history, space)
    for _ in range(config.budget):
        point = suggest(history, space, config, rng)
        if point is None:
            result.exhausted = True
            break
        _record(problem, history, point[0], point[1], seed, result)
    return result


def run_search(
    problem: Problem,
    space: SearchSpace,
    config: SearchConfig,
    sampler: str = "tpe",
    mode: str | None = None,
    workers: int = 1,
) -> list[SearchResult]:
    """One run per seed in ``config.seeds``; results come back in seed order."""
    if workers > 1 and len(config.seeds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run_seed, problem, space, config, s, sampler, mode) for s in config.seeds]
            return [f.result() for f in futures]
    return [run_seed(problem, space, config, s, sampler, mode) for s in config.seeds]


def grid_layers(n_layers: int, stride: int = 5) -> LayerSet:
    if stride < 1:
        raise ValidationError("grid stride must be >= 1")
    return LayerSet(tuple(range(0, n_layers, stride)), LayerProvenance.FULL)


def grid_search(
    problem: Problem,
    n_layers: int,
    stride: int = 5,
    coefficients: Sequence[float] = GRID_COEFFICIENTS,
    seed: int = 1,
) -> SearchResult:
    """Evaluate every (layer, coefficient) on the strided grid in row-major order."""
    space = SearchSpace(grid_layers(n_layers, stride), tuple(coefficients))
    history: list[Trial] = []
    result = SearchResult(seed, "grid", history, space)
    for layer, coef in space.points:
        _record(problem, history, layer, coef, seed, result)
    return result
