"""Rank-1 steering vector constructions.

``diffmeans`` keeps the raw magnitude of the averaged differences; every other
construction returns a unit direction.
"""

from __future__ import annotations

import enum
import hashlib
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .anova import AnovaResult, eta_squared
from .errors import DegenerateDirectionError, InsufficientDataError, ValidationError
from .geometry import UnitVectors, _as_array, unit_normalize
from .store import DiffTensor

DEGENERATE_NORM = 1e-10
MAX_CLUSTER_PROMPTS = 12
WEIGHT_EPS = 1e-9


class Method(str, enum.Enum):
    DIFFMEANS = "diffmeans"
    UNIT_MEAN = "unit_mean"
    CLUSTER = "cluster"
    PROMPT_WEIGHTED = "prompt_weighted"
    DROP_WORST_PROMPT = "drop_worst_prompt"
    QUESTION_SVD = "question_svd"


@dataclass
class SteeringVector:
    direction: np.ndarray
    layer: int
    method: Method
    included_prompts: tuple[int, ...]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.direction = np.asarray(self.direction, dtype=np.float64)
        if not np.isfinite(self.direction).all():
            raise ValidationError("steering direction contains non-finite values")
        if not self.included_prompts:
            raise ValidationError("steering vector must include at least one prompt")

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.direction))

    @property
    def unit_norm(self) -> bool:
        return self.method is not Method.DIFFMEANS

    def vector_id(self) -> str:
        """Content hash of the stored f32 payload and its provenance."""
        h = hashlib.sha256(self.direction.astype("<f4").tobytes())
        h.update(f"{self.method.value}:{self.layer}".encode())
        return h.hexdigest()[:16]

    def sidecar(self) -> dict:
        return {
            "method": self.method.value,
            "layer": self.layer,
            "dim": int(self.direction.shape[0]),
            "included_prompts": list(self.included_prompts),
            "norm_convention": "unit" if self.unit_norm else "raw_mean",
            "norm": self.norm,
            "vector_id": self.vector_id(),
            "metadata": self.metadata,
        }

    def save(self, stem: str | Path) -> Path:
        """Write ``<stem>.f32`` and ``<stem>.json``; return the binary path."""
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        bin_path = stem.with_suffix(".f32")
        bin_path.write_bytes(self.direction.astype("<f4").tobytes())
        stem.with_suffix(".json").write_text(json.dumps(self.sidecar(), indent=2, sort_keys=True) + "\n")
        return bin_path

    @classmethod
    def load(cls, stem: str | Path) -> SteeringVector:
        stem = Path(stem)
        meta = json.loads(stem.with_suffix(".json").read_text())
        direction = np.frombuffer(stem.with_suffix(".f32").read_bytes(), dtype="<f4").astype(np.float64)
        if direction.shape[0] != meta["dim"]:
            raise ValidationError(f"{stem}: payload has {direction.shape[0]} components, sidecar says {meta['dim']}")
        return cls(direction, meta["layer"], Method(meta["method"]), tuple(meta["included_prompts"]), meta.get("metadata", {}))


def _normalize(v: np.ndarray, what: str) -> np.ndarray:
    n = np.linalg.norm(v)
    if n < DEGENERATE_NORM:
        raise DegenerateDirectionError(f"{what}: mean direction has near-zero norm ({n:.3g})")
    return v / n


def _layer_arrays(tensor, layer: int) -> tuple[np.ndarray, UnitVectors]:
    arr = _as_array(tensor)
    if not 0 <= layer < arr.shape[0]:
        raise IndexError(f"layer {layer} out of range [0, {arr.shape[0]})")
    raw = arr[layer : layer + 1]
    return raw[0], unit_normalize(raw)


def _mean_raw(raw: np.ndarray, valid: np.ndarray, prompts) -> np.ndarray:
    prompts = list(prompts)
    mask = valid[prompts]
    if not mask.any():
        raise InsufficientDataError("all samples dropped")
    return raw[prompts][mask].mean(axis=0)


def diffmeans(tensor, layer: int) -> SteeringVector:
    raw, unit = _layer_arrays(tensor, layer)
    prompts = range(raw.shape[0])
    return SteeringVector(_mean_raw(raw, unit.valid[0], prompts), layer, Method.DIFFMEANS, tuple(prompts))


def unit_mean(tensor, layer: int) -> SteeringVector:
    _, unit = _layer_arrays(tensor, layer)
    valid = unit.valid[0]
    if not valid.any():
        raise InsufficientDataError("all samples dropped")
    direction = _normalize(unit.data[0][valid].mean(axis=0), "unit_mean")
    return SteeringVector(direction, layer, Method.UNIT_MEAN, tuple(range(valid.shape[0])))


def prompt_means(unit: UnitVectors, layer: int = 0) -> np.ndarray:
    """Per-prompt mean of unit vectors over usable questions, shape ``(P, D)``."""
    v = unit.data[layer]
    counts = unit.valid[layer].sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return v.sum(axis=1) / np.where(counts > 0, counts, 1)[:, None]


def prompt_mean_similarity(unit: UnitVectors, layer: int = 0) -> np.ndarray:
    m = prompt_means(unit, layer)
    norms = np.linalg.norm(m, axis=1)
    m = m / np.where(norms > DEGENERATE_NORM, norms, 1.0)[:, None]
    return m @ m.T


def select_cluster(sim: np.ndarray, threshold: float = 0.7) -> tuple[tuple[int, ...], bool]:
    """Largest prompt subset (size >= 2) whose pairwise similarities all exceed ``threshold``.

    Ties: higher mean intra-subset similarity, then lexicographically smallest
    indices. Returns ``(subset, fell_back)``; with no qualifying pair the full
    set is returned and ``fell_back`` is True.
    """
    n = sim.shape[0]
    if n > MAX_CLUSTER_PROMPTS:
        raise ValueError(f"exhaustive clustering supports at most {MAX_CLUSTER_PROMPTS} prompts, got {n}")
    for size in range(n, 1, -1):
        best: tuple[float, tuple[int, ...]] | None = None
        for subset in itertools.combinations(range(n), size):
            pairs = [sim[i, j] for i, j in itertools.combinations(subset, 2)]
            if min(pairs) > threshold:
                score = float(np.mean(pairs))
                # combinations() yields lexicographic order, so strict > keeps the smallest
                if best is None or score > best[0]:
                    best = (score, subset)
        if best is not None:
            return best[1], False
    return tuple(range(n)), True


def cluster_vector(tensor, layer: int, threshold: float = 0.7) -> SteeringVector:
    raw, unit = _layer_arrays(tensor, layer)
    sim = prompt_mean_similarity(unit)
    subset, fell_back = select_cluster(sim, threshold)
    direction = _normalize(_mean_raw(raw, unit.valid[0], subset), "cluster")
    meta = {"threshold": threshold, "fallback": fell_back}
    return SteeringVector(direction, layer, Method.CLUSTER, subset, meta)


def _interaction_by_prompt(tensor, layer: int, anova: AnovaResult | None) -> np.ndarray:
    if anova is not None:
        return np.asarray(anova[layer].interaction_by_prompt, dtype=np.float64)
    return eta_squared(_as_array(tensor)[layer : layer + 1], 0).interaction_by_prompt


def prompt_weighted(tensor, layer: int, anova: AnovaResult | None = None) -> SteeringVector:
    _, unit = _layer_arrays(tensor, layer)
    contrib = _interaction_by_prompt(tensor, layer, anova)
    weights = 1.0 / (contrib + WEIGHT_EPS)
    weights /= weights.sum()
    direction = _normalize(weights @ prompt_means(unit), "prompt_weighted")
    meta = {"weights": weights.tolist(), "interaction_by_prompt": contrib.tolist(), "eps": WEIGHT_EPS}
    return SteeringVector(direction, layer, Method.PROMPT_WEIGHTED, tuple(range(len(weights))), meta)


def drop_worst_prompt(tensor, layer: int, anova: AnovaResult | None = None) -> SteeringVector:
    raw, unit = _layer_arrays(tensor, layer)
    n_prompts = raw.shape[0]
    if n_prompts < 3:
        raise InsufficientDataError("drop_worst_prompt needs at least 3 prompts")
    contrib = _interaction_by_prompt(tensor, layer, anova)
    worst = int(np.argmax(contrib))  # first max wins ties
    keep = tuple(p for p in range(n_prompts) if p != worst)
    direction = _normalize(_mean_raw(raw, unit.valid[0], keep), "drop_worst_prompt")
    meta = {"dropped_prompt": worst, "interaction_by_prompt": contrib.tolist()}
    return SteeringVector(direction, layer, Method.DROP_WORST_PROMPT, keep, meta)


def question_svd(tensor, layer: int) -> SteeringVector:
    raw, unit = _layer_arrays(tensor, layer)
    v, valid = unit.data[0], unit.valid[0]
    counts = valid.sum(axis=0)
    usable = counts > 0
    if usable.sum() < 2:
        raise InsufficientDataError("question_svd needs at least 2 questions")
    q_means = v.sum(axis=0)[usable] / counts[usable][:, None]
    centered = q_means - q_means.mean(axis=0)
    if np.linalg.norm(centered) < DEGENERATE_NORM:
        raise DegenerateDirectionError("question means are identical; no cross-question axis")
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    direction = vt[0]
    ref = _mean_raw(raw, valid, range(raw.shape[0]))
    dot = float(direction @ ref)
    if dot < 0 or (dot == 0 and direction[np.flatnonzero(direction)[0]] < 0):
        direction = -direction
    meta = {"singular_values": s[:3].tolist()}
    return SteeringVector(direction, layer, Method.QUESTION_SVD, tuple(range(raw.shape[0])), meta)


def build_vector(tensor, layer: int, method: Method | str, **kwargs) -> SteeringVector:
    method = Method(method)
    builders = {
        Method.DIFFMEANS: diffmeans,
        Method.UNIT_MEAN: unit_mean,
        Method.CLUSTER: cluster_vector,
        Method.PROMPT_WEIGHTED: prompt_weighted,
        Method.DROP_WORST_PROMPT: drop_worst_prompt,
        Method.QUESTION_SVD: question_svd,
    }
    return builders[method](tensor, layer, **kwargs)
