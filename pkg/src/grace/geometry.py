"""Directional statistics of contrastive difference vectors.

All pairwise statistics are computed from per-layer sums of unit vectors, so a
layer with ``N`` samples costs ``O(N * D)`` rather than ``O(N^2 * D)``.

Undefined values (too few usable vectors, zero variance, ``A`` near zero) are
reported as ``NaN`` and serialised as JSON ``null``.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import DecompositionUndefinedError, InsufficientDataError
from .store import DiffTensor

DEFAULT_NORM_EPS = 1e-12
DEFAULT_GRANULARITY_EPS = 1e-6


def _as_array(tensor: DiffTensor | np.ndarray) -> np.ndarray:
    if isinstance(tensor, DiffTensor):
        return tensor.as_float64()
    arr = np.asarray(tensor, dtype=np.float64)
    if arr.ndim != 4:
        raise ValueError(f"expected a (L, P, Q, D) array, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class UnitVectors:
    """Unit-normalised difference vectors plus a mask of usable samples.

    ``data`` has shape ``(L, P, Q, D)``; rows where ``valid`` is False are zero
    and must not enter any pairwise statistic.
    """

    data: np.ndarray
    valid: np.ndarray

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return tuple(int(s) for s in self.data.shape)  # type: ignore[return-value]

    @property
    def dropped(self) -> list[tuple[int, int, int]]:
        return [tuple(int(i) for i in idx) for idx in np.argwhere(~self.valid)]

    @property
    def balanced(self) -> bool:
        return bool(self.valid.all())

    def n_valid(self) -> np.ndarray:
        return self.valid.reshape(self.valid.shape[0], -1).sum(axis=1)


def unit_normalize(tensor: DiffTensor | np.ndarray, eps: float = DEFAULT_NORM_EPS) -> UnitVectors:
    if eps <= 0:
        raise ValueError("eps must be positive")
    arr = _as_array(tensor)
    norms = np.linalg.norm(arr, axis=-1)
    valid = norms >= eps
    safe = np.where(valid, norms, 1.0)
    unit = np.where(valid[..., None], arr / safe[..., None], 0.0)
    return UnitVectors(unit, valid)


def ensure_unit(x: DiffTensor | np.ndarray | UnitVectors) -> UnitVectors:
    return x if isinstance(x, UnitVectors) else unit_normalize(x)


def alignment_profile(unit: UnitVectors) -> np.ndarray:
    """Mean pairwise cosine per layer: ``(||sum v||^2 - N) / (N (N - 1))``."""
    sums = unit.data.sum(axis=(1, 2))
    n = unit.n_valid().astype(np.float64)
    sq = np.einsum("ld,ld->l", sums, sums)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = (sq - n) / (n * (n - 1.0))
    out[n < 2] = np.nan
    return out


@dataclass(frozen=True)
class PairCounts:
    total: int
    within: int
    cross: int

    @classmethod
    def for_grid(cls, n_prompts: int, n_questions: int) -> PairCounts:
        n = n_prompts * n_questions
        total = n * (n - 1) // 2
        within = n_questions * n_prompts * (n_prompts - 1) // 2
        return cls(total, within, total - within)

    @property
    def weight_within(self) -> float:
        return self.within / self.total

    @property
    def weight_cross(self) -> float:
        return self.cross / self.total


@dataclass(frozen=True)
class Decomposition:
    within_q: np.ndarray
    cross_q: np.ndarray
    cross_q_via_means: np.ndarray
    counts: PairCounts
    layer_weight_within: np.ndarray
    layer_weight_cross: np.ndarray

    @property
    def weight_within(self) -> float:
        return self.counts.weight_within

    @property
    def weight_cross(self) -> float:
        return self.counts.weight_cross


def decompose_alignment(unit: UnitVectors) -> Decomposition:
    n_layers, n_prompts, n_questions, _ = unit.shape
    if n_prompts < 2 or n_questions < 2:
        raise DecompositionUndefinedError(
            f"within/cross decomposition needs P >= 2 and Q >= 2, got P={n_prompts}, Q={n_questions}"
        )
    v = unit.data
    q_sums = v.sum(axis=1)  # (L, Q, D)
    n_q = unit.valid.sum(axis=1).astype(np.float64)  # (L, Q)
    tot = q_sums.sum(axis=1)
    n = n_q.sum(axis=1)

    total_pairs = n * (n - 1) / 2
    within_pairs = (n_q * (n_q - 1) / 2).sum(axis=1)
    cross_pairs = total_pairs - within_pairs

    total_dot = (np.einsum("ld,ld->l", tot, tot) - n) / 2
    within_dot = ((np.einsum("lqd,lqd->lq", q_sums, q_sums) - n_q) / 2).sum(axis=1)
    cross_dot = total_dot - within_dot

    with np.errstate(divide="ignore", invalid="ignore"):
        gamma = np.where(within_pairs > 0, within_dot / within_pairs, np.nan)
        lam = np.where(cross_pairs > 0, cross_dot / cross_pairs, np.nan)
        w_within = np.where(total_pairs > 0, within_pairs / total_pairs, np.nan)
        w_cross = np.where(total_pairs > 0, cross_pairs / total_pairs, np.nan)

    # Cross-check: mean dot of question-level mean directions (full grid only).
    means = q_sums / n_prompts
    gram = np.einsum("lqd,lrd->lqr", means, means)
    off = gram.sum(axis=(1, 2)) - np.trace(gram, axis1=1, axis2=2)
    via_means = off / (n_questions * (n_questions - 1))
    full = unit.valid.reshape(n_layers, -1).all(axis=1)
    via_means = np.where(full, via_means, np.nan)

    return Decomposition(
        within_q=gamma,
        cross_q=lam,
        cross_q_via_means=via_means,
        counts=PairCounts.for_grid(n_prompts, n_questions),
        layer_weight_within=w_within,
        layer_weight_cross=w_cross,
    )


def granularity_profile(
    alignment: np.ndarray,
    within_q: np.ndarray,
    eps: float = DEFAULT_GRANULARITY_EPS,
) -> tuple[np.ndarray, float, int]:
    """Return per-layer ``within_q / alignment``, its mean, and the undefined count."""
    alignment = np.asarray(alignment, dtype=np.float64)
    within_q = np.asarray(within_q, dtype=np.float64)
    defined = np.isfinite(alignment) & np.isfinite(within_q) & (np.abs(alignment) > eps)
    g = np.full_like(alignment, np.nan)
    g[defined] = within_q[defined] / alignment[defined]
    if not defined.any():
        raise InsufficientDataError("granularity undefined at every layer")
    return g, float(g[defined].mean()), int((~defined).sum())


def prompt_pair_matrix(unit: UnitVectors) -> np.ndarray:
    """Per-layer ``(P, P)`` matrix of question-averaged cosines between prompts."""
    v = unit.data
    mask = unit.valid.astype(np.float64)
    counts = np.einsum("lpq,lrq->lpr", mask, mask)
    sums = np.einsum("lpqd,lrqd->lpr", v, v)
    with np.errstate(divide="ignore", invalid="ignore"):
        mat = np.where(counts > 0, sums / counts, np.nan)
    n_prompts = mat.shape[1]
    idx = np.arange(n_prompts)
    mat[:, idx, idx] = 1.0
    return np.clip(mat, -1.0, 1.0)


@dataclass(frozen=True)
class MagnitudeStats:
    layer_mean: np.ndarray
    layer_std: np.ndarray
    layer_cv: np.ndarray
    pooled_mean: float
    pooled_std: float
    pooled_cv: float


def _cv(values: np.ndarray) -> tuple[float, float, float]:
    mean = float(values.mean())
    std = float(values.std())  # population
    if mean == 0.0:
        return mean, std, math.nan
    if std < 1e-12 * abs(mean):
        std = 0.0
    return mean, std, std / mean


def magnitude_cv(tensor: DiffTensor | np.ndarray) -> MagnitudeStats:
    norms = np.linalg.norm(_as_array(tensor), axis=-1)
    per_layer = [_cv(norms[i].ravel()) for i in range(norms.shape[0])]
    mean, std, cv = (np.array(col) for col in zip(*per_layer))
    pm, ps, pc = _cv(norms.ravel())
    return MagnitudeStats(mean, std, cv, pm, ps, pc)


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    x = x - x.mean()
    y = y - y.mean()
    sx = math.sqrt(float(x @ x))
    sy = math.sqrt(float(y @ y))
    if sx == 0.0 or sy == 0.0:
        return math.nan
    return float(np.clip((x @ y) / (sx * sy), -1.0, 1.0))


def fragmentation_correlation(profile_pb: np.ndarray, profile_ra: np.ndarray) -> float:
    """Pearson correlation across layers of two alignment profiles."""
    a = np.asarray(profile_pb, dtype=np.float64)
    b = np.asarray(profile_ra, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("alignment profiles must cover the same layers")
    both = np.isfinite(a) & np.isfinite(b)
    if both.sum() < 3:
        raise InsufficientDataError(f"need >= 3 common defined layers, have {int(both.sum())}")
    return _pearson(a[both], b[both])


def correlation_stats(x, y) -> tuple[float, float]:
    """Return ``(pearson, spearman)``; Spearman uses tie-averaged ranks."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-D arrays of equal length")
    if len(x) < 3:
        raise InsufficientDataError("correlation needs at least 3 observations")
    return _pearson(x, y), _pearson(rankdata(x), rankdata(y))


class LayerProvenance(str, enum.Enum):
    FULL = "full"
    TOP_K = "top_k_alignment"
    UNION_TOP_K = "union_top_k"


@dataclass(frozen=True)
class LayerSet:
    layers: tuple[int, ...]
    provenance: LayerProvenance
    k: int | None = None
    variant: str | None = None
    truncated: bool = False

    def __post_init__(self) -> None:
        if len(set(self.layers)) != len(self.layers):
            raise ValueError("layer indices must be unique")
        if not self.layers:
            raise ValueError("layer set is empty")

    def __len__(self) -> int:
        return len(self.layers)

    def __contains__(self, layer: object) -> bool:
        return layer in self.layers

    @classmethod
    def full(cls, n_layers: int) -> LayerSet:
        return cls(tuple(range(n_layers)), LayerProvenance.FULL)

    def to_dict(self) -> dict:
        return {
            "layers": list(self.layers),
            "provenance": self.provenance.value,
            "k": self.k,
            "variant": self.variant,
            "truncated": self.truncated,
        }


def rank_layers(profile: np.ndarray, k: int, variant: str | None = None) -> LayerSet:
    """Top-``k`` layers by descending alignment; ties go to the lower index."""
    if k < 1:
        raise ValueError("k must be >= 1")
    profile = np.asarray(profile, dtype=np.float64)
    defined = [i for i in range(len(profile)) if np.isfinite(profile[i])]
    if not defined:
        raise InsufficientDataError("no layer has a defined alignment")
    order = sorted(defined, key=lambda i: (-profile[i], i))
    truncated = k > len(order)
    if truncated:
        warnings.warn(f"k={k} exceeds the {len(order)} defined layers; returning all", stacklevel=2)
    return LayerSet(tuple(order[:k]), LayerProvenance.TOP_K, k=k, variant=variant, truncated=truncated)


def union_top_k(profile_pb: np.ndarray, profile_ra: np.ndarray, k: int) -> LayerSet:
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        a = rank_layers(profile_pb, k)
        b = rank_layers(profile_ra, k)
    for w in caught:
        warnings.warn(w.message, stacklevel=2)
    layers = tuple(sorted(set(a.layers) | set(b.layers)))
    return LayerSet(layers, LayerProvenance.UNION_TOP_K, k=k, truncated=a.truncated or b.truncated)


@dataclass
class GeometryProfile:
    alignment: np.ndarray
    within_q: np.ndarray
    cross_q: np.ndarray
    granularity: np.ndarray
    weight_within: float
    weight_cross: float
    concept_granularity: float
    n_vectors: int
    n_valid: np.ndarray
    n_granularity_undefined: int
    max_identity_residual: float
    dropped: list[tuple[int, int, int]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "alignment": _listify(self.alignment),
            "within_q": _listify(self.within_q),
            "cross_q": _listify(self.cross_q),
            "granularity": _listify(self.granularity),
            "weight_within": self.weight_within,
            "weight_cross": self.weight_cross,
            "concept_granularity": _num(self.concept_granularity),
            "n_vectors": self.n_vectors,
            "n_valid": [int(n) for n in self.n_valid],
            "n_granularity_undefined": self.n_granularity_undefined,
            "max_identity_residual": self.max_identity_residual,
            "dropped": [list(d) for d in self.dropped],
            "drop_policy": "near-zero vectors excluded from all pairwise statistics",
        }


def geometry_profile(
    tensor: DiffTensor | np.ndarray | UnitVectors,
    granularity_eps: float = DEFAULT_GRANULARITY_EPS,
) -> GeometryProfile:
    unit = ensure_unit(tensor)
    _, n_prompts, n_questions, _ = unit.shape
    align = alignment_profile(unit)
    dec = decompose_alignment(unit)
    try:
        gran, concept_g, n_undef = granularity_profile(align, dec.within_q, granularity_eps)
    except InsufficientDataError:
        gran, concept_g, n_undef = np.full_like(align, np.nan), math.nan, len(align)
    recon = dec.layer_weight_within * dec.within_q + dec.layer_weight_cross * dec.cross_q
    resid = np.abs(align - recon)
    return GeometryProfile(
        alignment=align,
        within_q=dec.within_q,
        cross_q=dec.cross_q,
        granularity=gran,
        weight_within=dec.weight_within,
        weight_cross=dec.weight_cross,
        concept_granularity=concept_g,
        n_vectors=n_prompts * n_questions,
        n_valid=unit.n_valid(),
        n_granularity_undefined=n_undef,
        max_identity_residual=float(np.nanmax(resid)) if np.isfinite(resid).any() else math.nan,
        dropped=unit.dropped,
    )


def _num(x: float) -> float | None:
    x = float(x)
    return x if math.isfinite(x) else None


def _listify(arr: np.ndarray) -> list:
    arr = np.asarray(arr)
    if arr.ndim == 0:
        return _num(arr)  # type: ignore[return-value]
    return [_listify(a) for a in arr] if arr.ndim > 1 else [_num(a) for a in arr]


__all__ = [
    "GeometryProfile",
    "LayerProvenance",
    "LayerSet",
    "MagnitudeStats",
    "PairCounts",
    "UnitVectors",
    "alignment_profile",
    "correlation_stats",
    "decompose_alignment",
    "fragmentation_correlation",
    "geometry_profile",
    "granularity_profile",
    "magnitude_cv",
    "prompt_pair_matrix",
    "rank_layers",
    "union_top_k",
    "unit_normalize",
]
