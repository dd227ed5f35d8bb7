import math

import numpy as np
import pytest

from sml_ctr.diagnostics import (
    DiagnosticsReport,
    SweepRow,
    cosine_profile,
    dead_neuron_histogram,
    depth_sweep,
    layer_variance_profile,
    merge_rows,
    pairwise_cosine_similarity,
    probe_vector,
    relu_variance_mc,
    tanh_variance_check,
    taylor_check,
    variance_law_check,
)
from sml_ctr.errors import ContractViolation
from sml_ctr.network import ModelConfig, SkipLogitModel
from sml_ctr.numerics import RngState
from sml_ctr.training import TrainConfig


def _dense(skip="dnn", depth=3, width=16, inputs=8, **overrides):
    return SkipLogitModel.initialize(
        ModelConfig(vocab_sizes=[], continuous_count=inputs, tower_widths=[width] * depth, skip=skip, **overrides)
    )


def _gaussian(n, d, seed=0):
    return np.random.default_rng(seed).normal(size=(n, d))


# =====================================================================
# Профили по слоям
# =====================================================================

def test_constant_batch_has_zero_variance():
    model = _dense("meta_tanh")
    profile = layer_variance_profile(model, np.ones((10, 8)))
    assert [r.layer for r in profile] == [0, 1, 2, 3]
    for row in profile:
        assert row.contrib_var == pytest.approx(0.0, abs=1e-20)
        assert row.activation_norm_var == pytest.approx(0.0, abs=1e-20)


def test_linear_path_variance_matches_closed_form():
    model = _dense("vanilla", depth=1, hidden_act="identity", include_input_skip=False, tower_head=False)
    x0 = _gaussian(500, 8)
    profile = layer_variance_profile(model, x0)
    p = model.params
    direction = p["tower.1.w"] @ p["skip.1.w"]
    shift = p["tower.1.b"] @ p["skip.1.w"]
    expected = np.var(x0 @ direction + shift, ddof=1)
    assert profile[1].source == "skip"
    assert profile[1].contrib_var == pytest.approx(expected, rel=1e-10)
    # у входа нет skip-пути: вклад меряется пробной проекцией
    assert profile[0].source == "probe"
    assert profile[0].contrib_var == pytest.approx(np.var(x0 @ probe_vector(model.config, 0), ddof=1), rel=1e-10)


def test_variance_profile_needs_two_samples():
    with pytest.raises(ContractViolation):
        layer_variance_profile(_dense(), np.ones((1, 8)))


def test_dead_neurons_follow_biases():
    model = _dense(depth=1, width=4)
    model.params["tower.1.w"] = 1e-3 * model.params["tower.1.w"]
    model.params["tower.1.b"] = np.array([100.0, -100.0, 100.0, -100.0])
    (layer,) = dead_neuron_histogram(model, _gaussian(200, 8), bins=10)
    assert layer.rates == [1.0, 0.0, 1.0, 0.0]
    assert layer.histogram[0] == 2 and layer.histogram[-1] == 2
    assert layer.bipolarity == 1.0
    assert len(layer.bin_edges) == 11


def test_dead_neurons_require_rectifiers():
    with pytest.raises(ContractViolation):
        dead_neuron_histogram(_dense(hidden_act="tanh"), _gaussian(10, 8))


def test_deeper_relu_layers_are_more_bipolar():
    model = _dense(depth=10, width=64, inputs=64, seed=0)
    layers = dead_neuron_histogram(model, _gaussian(2000, 64))
    spread = [np.mean(np.abs(np.array(l.rates) - 0.5)) for l in layers]
    assert layers[9].bipolarity >= layers[1].bipolarity
    assert spread[9] > spread[1]


def test_cosine_of_duplicates_and_orthogonal_rows():
    model = _dense()
    same = pairwise_cosine_similarity(model, np.tile(_gaussian(1, 8), (5, 1)), layer=0)
    assert same.mean == pytest.approx(1.0, abs=1e-12)
    orthogonal = pairwise_cosine_similarity(model, np.eye(8), layer=0)
    assert orthogonal.mean == pytest.approx(0.0, abs=1e-12)
    assert orthogonal.samples == 8 and not orthogonal.degenerate


def test_cosine_excludes_zero_rows():
    x = np.zeros((4, 8))
    x[0, 0] = 1.0
    result = pairwise_cosine_similarity(_dense(), x, layer=0)
    assert result.degenerate and result.mean is None
    assert result.zero_count == 3

    x[1, 0] = 2.0
    result = pairwise_cosine_similarity(_dense(), x, layer=0)
    assert result.mean == pytest.approx(1.0) and result.zero_count == 2


def test_cosine_layer_out_of_range():
    with pytest.raises(ContractViolation):
        pairwise_cosine_similarity(_dense(depth=2), _gaussian(4, 8), layer=3)
    with pytest.raises(ContractViolation):
        cosine_profile(_dense(depth=2), _gaussian(4, 8), layers=[-1])


def test_cosine_grows_with_relu_depth():
    model = _dense(depth=5, width=256, inputs=256, seed=1)
    means = [c.mean for c in cosine_profile(model, _gaussian(500, 256, seed=1))]
    assert means[0] == pytest.approx(0.0, abs=0.01)
    for shallow, deep in zip(means, means[1:]):
        assert deep >= shallow - 0.01


def test_skip_paths_do_not_change_tower_at_init():
    x0 = _gaussian(300, 8)
    sml = _dense("meta_tanh", depth=6, width=32, seed=4)
    dnn = _dense("dnn", depth=6, width=32, seed=4)
    for a, b in zip(cosine_profile(sml, x0), cosine_profile(dnn, x0)):
        assert a.mean == b.mean
    for a, b in zip(dead_neuron_histogram(sml, x0), dead_neuron_histogram(dnn, x0)):
        assert a.bipolarity == b.bipolarity


# =====================================================================
# Монте-Карло
# =====================================================================

def test_relu_variance_unit_gaussian():
    result = relu_variance_mc(1.0, 10_000_000, RngState(0))
    exact = 0.5 - 1.0 / (2.0 * math.pi)
    assert result.exact == pytest.approx(exact)
    assert abs(result.estimate - 0.340845) <= 0.005 * 0.340845
    assert result.within_bound
    assert result.bound == pytest.approx(1.0 - 2.0 / math.pi)


@pytest.mark.parametrize("delta", [0.1, 2.0, 5.0])
def test_relu_variance_scales_with_delta(delta):
    result = relu_variance_mc(delta, 200_000, RngState(1))
    assert result.within_bound
    assert abs(result.estimate - result.exact) <= 4 * result.standard_error


def test_relu_variance_of_zero_input():
    result = relu_variance_mc(0.0, 10_000, RngState(0))
    assert result.estimate == 0.0 and result.standard_error == 0.0
    assert result.within_bound


@pytest.mark.parametrize("delta, n", [(1.0, 9_999), (-0.5, 10_000)])
def test_relu_variance_contract(delta, n):
    with pytest.raises(ContractViolation):
        relu_variance_mc(delta, n, RngState(0))


def test_tanh_variance_is_bounded():
    result = tanh_variance_check(RngState(2), n=20_000)
    assert result["passed"]
    assert result["variances"]["100.0"] < 1.0


def test_taylor_bound_holds():
    result = taylor_check()
    assert result["passed"]
    assert result["max_excess"] <= 0.0


# =====================================================================
# Законы дисперсии
# =====================================================================

def test_resnet_without_branch_keeps_variance():
    report = variance_law_check("resnet_doubling", [3], RngState(0), width=8, samples=1000, seeds=2, branch_scale=0.0)
    assert report.rows[0].per_seed == [1.0, 1.0]
    assert report.passed


def test_resnet_variance_doubles_per_block():
    report = variance_law_check("resnet_doubling", [4], RngState(1), width=64, samples=5000, seeds=3)
    assert report.passed
    assert report.rows[0].measured == pytest.approx(2.0, rel=0.2)


def test_skip_logit_variance_grows_linearly():
    report = variance_law_check("skiplogit_linear", [1, 2, 3], RngState(2), width=256, samples=4000, seeds=20)
    assert report.passed
    assert report.slope == pytest.approx(report.reference, rel=0.15)


def test_meta_tanh_logit_variance_is_bounded():
    report = variance_law_check("mtn_bound", [2, 4], RngState(3), width=64, samples=5000, seeds=5)
    assert report.passed
    for row in report.rows:
        assert row.predicted == pytest.approx(row.detail["input_path_variance"] + row.depth - 1)


@pytest.mark.parametrize("kind, depth", [("mtn_bound", 1), ("resnet_doubling", 0), ("softmax", 2)])
def test_variance_law_contract(kind, depth):
    with pytest.raises(ContractViolation):
        variance_law_check(kind, [depth], RngState(0), width=4, samples=10, seeds=1)


# =====================================================================
# Свип и отчёт
# =====================================================================

def test_merge_rows_later_row_wins():
    a = [SweepRow(4, "dnn", 0, 0.7, 0.5, False), SweepRow(2, "dnn", 0, 0.6, 0.6, False)]
    b = [SweepRow(4, "dnn", 0, 0.75, 0.45, False)]
    merged = merge_rows(a, b)
    assert [(r.depth, r.auc) for r in merged] == [(2, 0.6), (4, 0.75)]


def test_empty_sweep(small_model_config, small_splits):
    train, valid, _ = small_splits
    assert depth_sweep([], small_model_config, train, valid, TrainConfig(epochs=1)) == []


def test_sweep_rows_cover_grid(small_model_config, small_splits):
    train, valid, _ = small_splits
    rows = depth_sweep([1, 2], small_model_config, train, valid,
                       TrainConfig(epochs=1, batch_size=256), seeds=[0], width=8)
    assert [(r.depth, r.variant) for r in rows] == [
        (1, "dnn"), (1, "meta_tanh"), (2, "dnn"), (2, "meta_tanh"),
    ]
    assert all(r.auc is not None and not r.collapsed for r in rows)


def test_report_tables(small_model):
    x0 = _gaussian(50, small_model.config.input_width)
    report = DiagnosticsReport(
        mode="init",
        variance=layer_variance_profile(small_model, x0),
        cosine=cosine_profile(small_model, x0),
    )
    tables = report.csv_tables()
    assert set(tables) == {"variance", "cosine"}
    header, rows = tables["variance"]
    assert header[0] == "layer" and len(rows) == small_model.config.depth + 1
    assert report.to_dict()["mode"] == "init"
