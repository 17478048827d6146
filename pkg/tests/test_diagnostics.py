from __future__ import annotations

import json

import numpy as np
import pytest

from grace.diagnostics import GraceThresholds, block_structure, diagnose, pilot_decision
from grace.errors import InsufficientDataError, ValidationError
from grace.harness import SynthConfig, generate_concept
from grace.search import SearchConfig
from grace.simulate import COUPLING_LABEL, CouplingConfig, bump_envelope, coupled_landscape, run_study
from grace.store import ConceptDataset, DiffTensor, Variant


def synth(**kw) -> ConceptDataset:
    base = dict(n_layers=30, n_prompts=5, n_questions=30, dim=32)
    base.update(kw)
    return generate_concept(SynthConfig(**base))


def test_shared_envelope_needs_no_remedy():
    report = diagnose(synth(seed=1))
    g = report["grace"]
    assert g["use_union_layers"] is False
    assert g["fragmentation_correlation"] > 0.8
    assert g["use_unit_mean"] is False
    assert g["cluster_candidate"] is False
    json.dumps(report, allow_nan=False)


def test_fragmented_recommends_union():
    g = diagnose(synth(fragmented=True, seed=2))["grace"]
    assert g["use_union_layers"] is True
    assert g["fragmentation_correlation"] < 0.2


def test_outlier_prompt_is_implicated():
    g = diagnose(synth(outlier_prompts=(2,), seed=3))["grace"]
    assert g["cluster_candidate"] is True
    assert g["implicated_prompts"] == [2]


def test_heavy_magnitudes_recommend_unit_mean():
    g = diagnose(synth(magnitude_sigma=1.0, seed=4))["grace"]
    assert g["use_unit_mean"] is True
    assert g["magnitude_cv"] > 0.5


def test_single_variant_dataset():
    ds = synth(seed=5)
    single = ConceptDataset("c", "m", {Variant.RESPONSE_AVG: ds.tensor(Variant.RESPONSE_AVG)})
    report = diagnose(single)
    assert report["grace"]["variant"] == "response_avg"
    assert report["grace"]["use_union_layers"] is False
    assert report["fragmentation"]["defined"] is False


def test_unbalanced_grid_reports_anova_error():
    data = np.random.default_rng(0).standard_normal((3, 3, 4, 5))
    data[1, 0, 0] = 0.0
    with pytest.warns(UserWarning, match="k=15 exceeds"):
        report = diagnose(ConceptDataset("c", "m", {Variant.PROMPT_BOUNDARY: DiffTensor(data)}))
    assert "impute" in report["anova"]["prompt_boundary"]["error"]


def test_block_structure_persistence():
    th = GraceThresholds()
    block = np.full((5, 5), 0.9)
    block[3, :] = block[:, 3] = 0.1
    np.fill_diagonal(block, 1.0)
    flat = np.full((5, 5), 0.9)
    np.fill_diagonal(flat, 1.0)
    mostly = np.stack([block] * 6 + [flat] * 4)
    res = block_structure(mostly, th)
    assert res["flagged_layers"] == list(range(6))
    assert res["persistent"] and res["implicated_prompts"] == [3]
    rarely = np.stack([block] * 4 + [flat] * 6)
    res = block_structure(rarely, th)
    assert not res["persistent"] and res["implicated_prompts"] == []


def pilot_points(deltas, coh):
    return [
        {"coefficient": c, "cluster_utility": 50 + d, "diffmeans_utility": 50.0, "cluster_coherence": 80 + coh, "diffmeans_coherence": 80.0}
        for c, d in zip((0.5, 1.5, 2.5, 3.5), deltas)
    ]


def test_pilot_decision():
    assert pilot_decision(pilot_points([0, 1, 2, 4], 1.0)).accepted
    assert not pilot_decision(pilot_points([4, 2, 1, 0], 1.0)).accepted
    assert not pilot_decision(pilot_points([0, 1, 2, 4], -1.0)).accepted
    with pytest.raises(InsufficientDataError):
        pilot_decision(pilot_points([0, 1], 0.0)[:2])


def test_bump_envelope_shape():
    env = np.array(bump_envelope(63, 10.0, 0.25, seed=3))
    peak = int(np.argmax(env))
    assert 0.2 * 62 - 1 <= peak <= 0.8 * 62 + 1
    assert env.max() == pytest.approx(1.0, abs=1e-3)
    assert env.min() >= 0.25


def test_coupled_landscape_scales_with_granularity():
    coupling = CouplingConfig()
    align = np.linspace(0, 1, 40)
    narrow = coupled_landscape(3.0, align, coupling, seed=0)
    broad = coupled_landscape(1.0, align, coupling, seed=0)
    assert narrow.width_layer == pytest.approx(broad.width_layer / 3)
    assert narrow.peak_utility == pytest.approx(72.0)
    assert broad.peak_utility == pytest.approx(92.0)
    assert narrow.peak_layer >= 25  # drawn from the 15 most aligned layers
    assert narrow.collapse_coefficient >= narrow.peak_coefficient


def test_coupling_config_round_trip():
    c = CouplingConfig(width_layer=3.0, ratio_grid=(1.0, 2.0))
    assert CouplingConfig.from_dict(c.to_dict()) == c
    with pytest.raises(ValidationError):
        CouplingConfig(width_layer=0)


def test_small_study():
    cfg = SynthConfig(n_layers=20, n_questions=20, dim=16, sigma_prompt=0.03)
    report, runs = run_study(cfg, CouplingConfig(), SearchConfig(budget=12, seeds=(1,)), 4, ("full", "topk"))
    assert report["coupling"] == COUPLING_LABEL
    assert len(report["table"]) == 4
    assert report["correlations"]["full"]["granularity_vs_t95"]["defined"]
    assert set(report["comparisons"]) == {"topk"}
    for r in runs:
        assert len(r.layer_sets["topk"]) == 15
    empty, _ = run_study(cfg, CouplingConfig(), SearchConfig(budget=12, seeds=(1,)), 0, ("full",))
    assert empty["correlations"]["full"]["granularity_vs_t95"]["defined"] is False
    json.dumps(report, allow_nan=False)
