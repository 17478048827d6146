"""Diagnose-then-remedy report assembled from cached difference tensors."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .anova import anova_profile
from .errors import DecompositionUndefinedError, InsufficientDataError, UnbalancedGridError
from .geometry import (
    _listify,
    _num,
    correlation_stats,
    fragmentation_correlation,
    geometry_profile,
    magnitude_cv,
    prompt_pair_matrix,
    rank_layers,
    union_top_k,
    unit_normalize,
)
from .store import ConceptDataset, Variant
from .vectors import select_cluster


@dataclass(frozen=True)
class GraceThresholds:
    # pooled magnitude CV above which unit-mean construction is recommended
    cv: float = 0.5
    # block structure: some off-diagonal entry below block_low while others exceed block_high
    block_low: float = 0.5
    block_high: float = 0.7
    persistence: float = 0.5
    cluster_threshold: float = 0.7
    fragmentation: float = 0.2
    k: int = 15

    @classmethod
    def from_dict(cls, d: dict) -> GraceThresholds:
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def block_structure(mats: np.ndarray, th: GraceThresholds) -> dict:
    """Per-layer block flags on prompt-pair matrices and the prompts they implicate.

    A prompt is implicated when the largest high-similarity clique leaves it
    out on more than ``persistence`` of the flagged layers.
    """
    n_layers, n_prompts, _ = mats.shape
    off = ~np.eye(n_prompts, dtype=bool)
    flagged = []
    excluded = np.zeros(n_prompts)
    for layer in range(n_layers):
        vals = mats[layer][off]
        vals = vals[np.isfinite(vals)]
        if vals.size and (vals < th.block_low).any() and (vals > th.block_high).any():
            flagged.append(layer)
            subset, fell_back = select_cluster(np.nan_to_num(mats[layer], nan=-1.0), th.cluster_threshold)
            if not fell_back:
                excluded[[p for p in range(n_prompts) if p not in subset]] += 1
    fraction = len(flagged) / n_layers if n_layers else 0.0
    persistent = fraction > th.persistence
    implicated = [int(p) for p in range(n_prompts) if flagged and excluded[p] / len(flagged) > th.persistence]
    return {
        "flagged_layers": flagged,
        "fraction_flagged": fraction,
        "persistent": persistent,
        "implicated_prompts": implicated if persistent else [],
    }


def diagnose(dataset: ConceptDataset, th: GraceThresholds | None = None, primary: Variant | None = None) -> dict:
    """Full diagnostic body; ``primary`` selects the variant behind the recommendations."""
    th = th or GraceThresholds()
    variants = dataset.variants
    out: dict = {"geometry": {}, "anova": {}, "prompt_similarity": {}, "magnitude": {}, "layer_sets": {}}
    profiles = {}
    for variant in variants:
        tensor = dataset.tensor(variant)
        unit = unit_normalize(tensor)
        prof = geometry_profile(unit)
        profiles[variant] = prof
        out["geometry"][variant.value] = prof.to_dict()
        try:
            out["anova"][variant.value] = anova_profile(unit, variant=variant.value).to_dict()
        except (UnbalancedGridError, DecompositionUndefinedError) as exc:
            out["anova"][variant.value] = {"error": str(exc)}
        mats = prompt_pair_matrix(unit)
        out["prompt_similarity"][variant.value] = {"matrices": _listify(mats), **block_structure(mats, th)}
        mags = magnitude_cv(tensor)
        out["magnitude"][variant.value] = {
            "layer_mean": _listify(mags.layer_mean),
            "layer_std": _listify(mags.layer_std),
            "layer_cv": _listify(mags.layer_cv),
            "pooled_mean": _num(mags.pooled_mean),
            "pooled_std": _num(mags.pooled_std),
            "pooled_cv": _num(mags.pooled_cv),
        }
        try:
            out["layer_sets"][variant.value] = rank_layers(prof.alignment, th.k, variant.value).to_dict()
        except InsufficientDataError as exc:
            out["layer_sets"][variant.value] = {"error": str(exc)}

    frag: dict = {"pearson": None, "defined": False, "reason": None}
    pb, ra = Variant.PROMPT_BOUNDARY, Variant.RESPONSE_AVG
    if pb in profiles and ra in profiles:
        try:
            r = fragmentation_correlation(profiles[pb].alignment, profiles[ra].alignment)
            frag.update(pearson=_num(r), defined=math.isfinite(r))
            if not math.isfinite(r):
                frag["reason"] = "an alignment profile is constant across layers"
        except InsufficientDataError as exc:
            frag["reason"] = str(exc)
        try:
            out["layer_sets"]["union"] = union_top_k(profiles[pb].alignment, profiles[ra].alignment, th.k).to_dict()
        except InsufficientDataError as exc:
            out["layer_sets"]["union"] = {"error": str(exc)}
    else:
        frag["reason"] = "needs both prompt_boundary and response_avg tensors"
    out["fragmentation"] = frag

    if primary is None:
        primary = pb if pb in profiles else variants[0]
    cv = out["magnitude"][primary.value]["pooled_cv"]
    blocks = out["prompt_similarity"][primary.value]
    both = pb in profiles and ra in profiles
    # a constant profile carries no layer ranking, so it counts as fragmented
    union = both and (not frag["defined"] or frag["pearson"] < th.fragmentation)
    out["grace"] = {
        "variant": primary.value,
        "use_unit_mean": bool(cv is not None and cv > th.cv),
        "magnitude_cv": cv,
        "cluster_candidate": bool(blocks["persistent"]),
        "implicated_prompts": blocks["implicated_prompts"],
        "use_union_layers": bool(union),
        "fragmentation_correlation": frag["pearson"],
    }
    out["thresholds"] = th.to_dict()
    return out


@dataclass(frozen=True)
class PilotOutcome:
    accepted: bool
    coherence_delta: float
    delta_coefficient_correlation: float
    points: list[dict]

    def to_dict(self) -> dict:
        return {
            "accepted": self.accepted,
            "coherence_delta": _num(self.coherence_delta),
            "delta_coefficient_correlation": _num(self.delta_coefficient_correlation),
            "points": self.points,
        }


def pilot_decision(points: list[dict]) -> PilotOutcome:
    """Accept the cluster vector if coherence holds and its utility gain grows with the coefficient.

    Each point carries ``coefficient`` and the ``utility``/``coherence`` of
    both the cluster and the diffmeans vector at that matched (layer, coefficient).
    """
    if len(points) < 3:
        raise InsufficientDataError("the pilot needs at least 3 matched points")
    coef = np.array([p["coefficient"] for p in points], dtype=np.float64)
    delta = np.array([p["cluster_utility"] - p["diffmeans_utility"] for p in points])
    coh = float(np.mean([p["cluster_coherence"] - p["diffmeans_coherence"] for p in points]))
    r, _ = correlation_stats(coef, delta)
    accepted = coh >= 0.0 and math.isfinite(r) and r > 0.0
    return PilotOutcome(bool(accepted), coh, r, points)
