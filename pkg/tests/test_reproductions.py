"""Направленные воспроизведения на синтетике; долгие, запускаются через pytest -m slow."""
from dataclasses import replace

import numpy as np
import pytest

from sml_ctr.data import SyntheticSpec, encode_records, split_811, split_indices_811, synthesize
from sml_ctr.diagnostics import depth_sweep
from sml_ctr.metrics import auc
from sml_ctr.network import ModelConfig, SkipLogitModel
from sml_ctr.training import CollapsePolicy, TrainConfig, fit

pytestmark = pytest.mark.slow

SEEDS = [0, 1, 2, 3, 4]


def _splits(samples):
    spec = SyntheticSpec(field_count=10, vocab_size=200, truth_dim=4, interaction_count=20,
                         linear_scale=1.0, interaction_scale=1.5, bias=-1.0, sample_count=samples, seed=42)
    batch = encode_records(synthesize(spec).records, spec.schema())
    train, valid, _ = split_811(batch, seed=0)
    return spec.schema(), train, valid


def _base(schema):
    return ModelConfig(embedding_dim=8, vocab_sizes=schema.buckets, continuous_count=schema.continuous_count)


def _mean_auc(rows, variant):
    return float(np.mean([r.auc for r in rows if r.variant == variant]))


def test_meta_logit_does_not_hurt_shallow_towers():
    schema, train, valid = _splits(20_000)
    rows = depth_sweep([4], _base(schema), train, valid, TrainConfig(epochs=2, batch_size=256),
                       variants=("dnn", "meta_tanh"), seeds=SEEDS, width=64)
    assert _mean_auc(rows, "meta_tanh") >= _mean_auc(rows, "dnn") - 0.002


def test_meta_logit_trains_very_deep_towers():
    schema, train, valid = _splits(20_000)
    cfg = TrainConfig(epochs=1, batch_size=256, collapse=CollapsePolicy(min_epochs=1))
    rows = depth_sweep([50], _base(schema), train, valid, cfg, variants=("meta_tanh",), seeds=SEEDS, width=16)
    assert all(not r.collapsed for r in rows)


def test_skip_variant_ordering():
    schema, train, valid = _splits(100_000)
    rows = depth_sweep([3], _base(schema), train, valid, TrainConfig(epochs=2, batch_size=512),
                       variants=("dnn", "vanilla", "meta_tanh"), seeds=SEEDS, width=64)
    dnn, vanilla, meta = (_mean_auc(rows, v) for v in ("dnn", "vanilla", "meta_tanh"))
    assert vanilla - dnn >= -0.001
    assert meta - vanilla >= -0.001


def test_plain_dnn_degrades_when_very_deep():
    schema, train, valid = _splits(20_000)
    cfg = TrainConfig(epochs=1, batch_size=256, collapse=CollapsePolicy(min_epochs=1))
    rows = depth_sweep([4, 30], _base(schema), train, valid, cfg, variants=("dnn",), seeds=SEEDS, width=16)
    by_key = {(r.depth, r.seed): r for r in rows}
    degraded = 0
    for seed in SEEDS:
        shallow, deep = by_key[(4, seed)], by_key[(30, seed)]
        if deep.collapsed or deep.auc is None or shallow.auc - deep.auc >= 0.03:
            degraded += 1
    assert degraded >= 3


def test_shallow_meta_logit_approaches_bayes_auc():
    spec = SyntheticSpec(field_count=6, vocab_size=50, truth_dim=4, interaction_count=6,
                         linear_scale=1.0, interaction_scale=1.0, bias=-1.0, sample_count=100_000, seed=3)
    dataset = synthesize(spec)
    batch = encode_records(dataset.records, spec.schema())
    train, valid, _ = split_811(batch, seed=0)
    valid_rows = split_indices_811(len(batch), seed=0)[1]
    np.testing.assert_array_equal(valid.labels, dataset.labels[valid_rows])
    bayes_auc = auc(dataset.bayes_scores[valid_rows], valid.labels)

    config = replace(_base(spec.schema()), tower_widths=[64, 64, 64, 64], skip="meta_tanh", seed=0)
    result = fit(SkipLogitModel.initialize(config), train, valid, TrainConfig(epochs=4, batch_size=256, seed=0))
    assert not result.collapsed
    assert bayes_auc - result.best_epoch.val_auc <= 0.01
