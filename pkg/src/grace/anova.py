"""Balanced two-way ANOVA of directional variance over the prompt x question grid.

With one observation per (prompt, question) cell the interaction term is the
residual, so the three components always add up to the total sum of squares.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DecompositionUndefinedError, UnbalancedGridError
from .geometry import UnitVectors, _listify, ensure_unit
from .store import DiffTensor

COMPONENTS = ("prompt", "question", "interaction")


@dataclass(frozen=True)
class AnovaLayer:
    ss_prompt: float
    ss_question: float
    ss_interaction: float
    ss_total: float
    # per-prompt residual contribution  sum_q ||v_pq - v_p. - v_.q + v..||^2
    interaction_by_prompt: np.ndarray

    @property
    def defined(self) -> bool:
        return self.ss_total > 0.0

    def eta2(self, component: str) -> float:
        if not self.defined:
            return math.nan
        return getattr(self, f"ss_{component}") / self.ss_total

    @property
    def eta2_prompt(self) -> float:
        return self.eta2("prompt")

    @property
    def eta2_question(self) -> float:
        return self.eta2("question")

    @property
    def eta2_interaction(self) -> float:
        return self.eta2("interaction")


def _grid_ss(cells: np.ndarray) -> AnovaLayer:
    n_prompts, n_questions, _ = cells.shape
    grand = cells.mean(axis=(0, 1))
    row = cells.mean(axis=1)  # (P, D)
    col = cells.mean(axis=0)  # (Q, D)
    ss_total = float(((cells - grand) ** 2).sum())
    ss_prompt = n_questions * float(((row - grand) ** 2).sum())
    ss_question = n_prompts * float(((col - grand) ** 2).sum())
    resid = cells - row[:, None, :] - col[None, :, :] + grand
    by_prompt = (resid**2).sum(axis=(1, 2))

    ss_prompt = max(ss_prompt, 0.0)
    ss_question = max(ss_question, 0.0)
    ss_interaction = ss_total - ss_prompt - ss_question
    if ss_interaction < 0.0:
        # floating-point cancellation only; anything larger is a bug
        if ss_interaction < -1e-9 * max(ss_total, 1.0):
            raise ArithmeticError(f"negative interaction sum of squares {ss_interaction}")
        ss_interaction = 0.0
        ss_total = ss_prompt + ss_question
    if ss_total <= 1e-12 * cells.size:
        return AnovaLayer(0.0, 0.0, 0.0, 0.0, by_prompt)
    return AnovaLayer(ss_prompt, ss_question, ss_interaction, ss_total, by_prompt)


def eta_squared(
    tensor: DiffTensor | np.ndarray | UnitVectors,
    layer: int,
    normalize: bool = True,
) -> AnovaLayer:
    """ANOVA for one layer; unit-normalises first unless ``normalize=False``."""
    if normalize:
        unit = ensure_unit(tensor)
        if not unit.valid[layer].all():
            bad = np.argwhere(~unit.valid[layer]).tolist()
            raise UnbalancedGridError(
                f"layer {layer}: dropped samples {bad} leave the grid unbalanced; "
                "impute or sub-select prompts/questions first"
            )
        cells = unit.data[layer]
    else:
        if isinstance(tensor, UnitVectors):
            cells = tensor.data[layer]
        elif isinstance(tensor, DiffTensor):
            cells = tensor.as_float64()[layer]
        else:
            cells = np.asarray(tensor, dtype=np.float64)[layer]
    n_prompts, n_questions, _ = cells.shape
    if n_prompts < 2 or n_questions < 2:
        raise DecompositionUndefinedError("two-way ANOVA needs P >= 2 and Q >= 2")
    return _grid_ss(cells)


@dataclass(frozen=True)
class AnovaResult:
    layers: tuple[AnovaLayer, ...]
    normalized: bool = True
    variant: str | None = None

    def __getitem__(self, layer: int) -> AnovaLayer:
        return self.layers[layer]

    def __len__(self) -> int:
        return len(self.layers)

    def eta2(self, component: str) -> np.ndarray:
        return np.array([lay.eta2(component) for lay in self.layers])

    def concept_mean(self, component: str) -> float:
        vals = self.eta2(component)
        vals = vals[np.isfinite(vals)]
        return float(vals.mean()) if vals.size else math.nan

    def to_dict(self) -> dict:
        out: dict = {
            "normalized": self.normalized,
            "variant": self.variant,
            "ss_total": [lay.ss_total for lay in self.layers],
        }
        for comp in COMPONENTS:
            out[f"ss_{comp}"] = [getattr(lay, f"ss_{comp}") for lay in self.layers]
            out[f"eta2_{comp}"] = _listify(self.eta2(comp))
            out[f"mean_eta2_{comp}"] = _listify(np.float64(self.concept_mean(comp)))
        return out


def anova_profile(
    tensor: DiffTensor | np.ndarray | UnitVectors,
    normalize: bool = True,
    variant: str | None = None,
) -> AnovaResult:
    if normalize:
        tensor = ensure_unit(tensor)
    n_layers = tensor.shape[0]
    layers = tuple(eta_squared(tensor, i, normalize=normalize) for i in range(n_layers))
    return AnovaResult(layers, normalized=normalize, variant=variant)
