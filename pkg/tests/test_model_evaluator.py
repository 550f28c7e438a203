import json
from dataclasses import replace

import numpy as np
import pytest
from statsmodels.stats.proportion import proportion_confint

from src.data_splitter import split
from src.errors import EmptyMatrix, SchemaMismatch, ShapeMismatch, UnlabeledData
from src.masking_pretrain import PretrainConfig, model_view, pretrain
from src.model_building import FlowSemModel, Hyper, encoder_digest
from src.model_evaluator import (
    EvalReport,
    FineTuneStrategy,
    FrozenProbeStrategy,
    ModelEvaluator,
    ProbeConfig,
    apply_checkpoint_view,
    build_report,
    finetune,
    label_efficiency,
    logistic_oracle,
    majority_baseline,
    metrics,
    probe_frozen,
    representations,
)
from src.synth_corpus import load_synth_spec, synth_corpus

FAST = ProbeConfig(epochs=3, finetune_epochs=1, lr=1e-2, batch_size=16, seed=5)


@pytest.fixture(scope="module")
def splits(two_class_generalizable):
    train, test = split(two_class_generalizable, (0.75, 0.25), seed=1)
    return train, test


@pytest.fixture
def encoder():
    return FlowSemModel.init(2, Hyper(d=8, L=1, h=2, T=10, N=41, C=2))


def test_metrics_on_a_hand_matrix():
    accuracy, macro_f1, table = metrics([[5, 0], [1, 4]])
    assert accuracy == pytest.approx(0.9)
    assert table["precision"].tolist() == pytest.approx([5 / 6, 1.0])
    assert table["recall"].tolist() == pytest.approx([1.0, 0.8])
    assert macro_f1 == pytest.approx((10 / 11 + 8 / 9) / 2)
    assert table["support"].tolist() == [5, 5]


def test_metrics_treat_empty_classes_as_zero():
    accuracy, macro_f1, table = metrics([[2, 0, 0], [0, 3, 0], [0, 0, 0]])
    assert accuracy == 1.0
    assert table["f1"].tolist() == [1.0, 1.0, 0.0]
    assert macro_f1 == pytest.approx(2 / 3)


def test_metrics_preconditions():
    with pytest.raises(ShapeMismatch):
        metrics([[1, 2, 3], [4, 5, 6]])
    with pytest.raises(ValueError):
        metrics([[1, -1], [0, 2]])
    with pytest.raises(EmptyMatrix):
        metrics([[0, 0], [0, 0]])


def test_build_report_carries_a_wilson_interval():
    y_true = [0] * 5 + [1] * 5
    y_pred = [0] * 5 + [1] * 4 + [0]
    report = build_report("frozen", y_true, y_pred, 2, ["a", "b"], seed=9)
    low, high = proportion_confint(9, 10, alpha=0.05, method="wilson")
    assert report.accuracy_ci == pytest.approx((low, high))
    assert report.accuracy_ci[0] < report.accuracy < report.accuracy_ci[1]
    assert report.confusion == [[5, 0], [1, 4]]
    assert [row["class"] for row in report.per_class] == ["a", "b"]
    assert report.n_test == 10 and report.seed == 9


def test_report_serialization():
    report = build_report("majority", [0, 1, 1], [1, 1, 1], 2, ["x", "y"])
    payload = json.loads(report.to_json())
    assert payload["protocol"] == "majority"
    assert payload["confusion"] == [[0, 1], [0, 2]]
    frame = report.confusion_frame()
    assert frame.loc["x", "y"] == 1
    assert "macro F1" in report.to_text()


def test_apply_checkpoint_view(two_class_dataset, schema):
    header = {"schema_hash": schema.schema_hash.hex(), "columns": ["ip.ttl", "frame.time_delta"],
              "flags": {"no_temporal": True}}
    view = apply_checkpoint_view(two_class_dataset, header)
    assert view.column_names == ["ip.ttl", "frame.time_delta"]
    assert not view.values[..., 1].any()
    with pytest.raises(SchemaMismatch):
        apply_checkpoint_view(two_class_dataset, {**header, "schema_hash": bytes(32).hex()})
    forced = apply_checkpoint_view(two_class_dataset, {**header, "schema_hash": bytes(32).hex()}, force=True)
    assert forced.N == 2


def test_representations_match_direct_forward(encoder, splits):
    train, _ = splits
    Z = representations(encoder, train, batch_size=7)
    assert Z.shape == (len(train), 8)
    direct = encoder.represent(train.values[:3], train.valid[:3]).data
    np.testing.assert_allclose(Z[:3], direct, rtol=1e-5, atol=1e-6)


def test_frozen_probe_leaves_the_encoder_untouched(encoder, splits):
    train, test = splits
    before = encoder_digest(encoder)
    report = probe_frozen(encoder, train, test, FAST)
    assert report.protocol == "frozen"
    assert report.digest_before == report.digest_after == before
    assert encoder_digest(encoder) == before
    assert all(t.requires_grad for t in encoder.trainable_params().values())
    assert 0.0 <= report.accuracy <= 1.0
    assert report.n_train == len(train) and report.n_test == len(test)
    assert report.class_names == train.class_names


def test_frozen_head_standardizes_representations(encoder, splits):
    train, test = splits
    probe_frozen(encoder, train, test, FAST)
    Z = representations(encoder, train)
    np.testing.assert_allclose(encoder.params["head.z_mean"].data, Z.mean(axis=0), rtol=1e-4, atol=1e-6)
    standardized = (Z - encoder.params["head.z_mean"].data) * encoder.params["head.z_scale"].data
    spread = Z.std(axis=0) > 1e-6
    np.testing.assert_allclose(standardized.std(axis=0)[spread], 1.0, rtol=1e-3)


def test_frozen_head_separates_narrow_representations(encoder, splits, monkeypatch):
    # class signal 2e-3 wide on top of a large common offset
    train, test = splits

    def narrow(model, dataset, batch_size=64):
        rng = np.random.default_rng(len(dataset))
        Z = 3.0 + 2e-4 * rng.normal(size=(len(dataset), model.hyper.d))
        Z[:, 0] += 2e-3 * (2.0 * dataset.labels - 1.0)
        return Z

    monkeypatch.setattr("src.model_evaluator.representations", narrow)
    report = probe_frozen(encoder, train, test, ProbeConfig(epochs=30, lr=1e-2, batch_size=16, seed=5))
    assert report.accuracy >= 0.95


def test_frozen_probe_is_seeded(splits):
    train, test = splits
    hyper = Hyper(d=8, L=1, h=2, T=10, N=41, C=2)
    a = probe_frozen(FlowSemModel.init(2, hyper), train, test, FAST)
    b = probe_frozen(FlowSemModel.init(2, hyper), train, test, FAST)
    assert a.confusion == b.confusion


def test_finetune_updates_the_encoder(encoder, splits):
    train, test = splits
    report = finetune(encoder, train, test, FAST)
    assert report.protocol == "unfrozen"
    assert report.digest_before != report.digest_after
    assert report.digest_after == encoder_digest(encoder)


def test_evaluator_switches_strategy(encoder, splits):
    train, test = splits
    evaluator = ModelEvaluator(FrozenProbeStrategy())
    assert evaluator.evaluate(encoder, train, test, FAST).protocol == "frozen"
    evaluator.set_strategy(FineTuneStrategy())
    assert evaluator.evaluate(encoder, train, test, FAST).protocol == "unfrozen"


def test_label_efficiency_uses_nested_subsets(encoder, splits):
    train, test = splits
    reports = label_efficiency(encoder, train, test, [1.0, 0.25], FAST)
    assert [r.labeled_fraction for r in reports] == [0.25, 1.0]
    assert reports[0].n_train < reports[1].n_train == len(train)
    assert all(isinstance(r, EvalReport) for r in reports)


def test_logistic_oracle_separates_planted_classes(splits):
    train, test = splits
    report = logistic_oracle(train, test, seed=0)
    assert report.protocol == "logistic_oracle"
    assert report.accuracy >= 0.9


def test_majority_baseline(splits):
    train, test = splits
    report = majority_baseline(train, test)
    majority = int(np.bincount(train.labels).argmax())
    assert report.accuracy == pytest.approx(np.mean(test.labels == majority))


def test_unlabeled_data_is_rejected(encoder, splits):
    train, test = splits
    unlabeled = replace(test, labels=np.full(len(test), -1, dtype=np.int64))
    with pytest.raises(UnlabeledData):
        probe_frozen(encoder, train, unlabeled, FAST)
    with pytest.raises(UnlabeledData):
        logistic_oracle(unlabeled, test)
    with pytest.raises(UnlabeledData):
        majority_baseline(train, unlabeled)


def pretrained(dataset, **overrides):
    settings = dict(epochs=8, batch_size=16, d=32, L=1, h=4, lr=3e-3, seed=3)
    settings.update(overrides)
    cfg = PretrainConfig(**settings)
    return pretrain(dataset, cfg), cfg


def planted_splits(spec: str, n_flows: int, seed: int):
    corpus = synth_corpus(load_synth_spec(spec), n_flows, seed=seed, T=10)
    return split(corpus, (0.75, 0.25), seed=seed)


@pytest.mark.slow
def test_pretrained_encoder_separates_the_planted_classes():
    train, test = planted_splits("two_class", 200, seed=11)
    result, cfg = pretrained(train)
    train_view, test_view = model_view(train, cfg), model_view(test, cfg)

    frozen = probe_frozen(result.model, train_view, test_view, ProbeConfig(seed=5))
    assert frozen.accuracy >= 0.9
    assert frozen.digest_before == frozen.digest_after

    # same architecture and input statistics, no pretraining
    untrained = FlowSemModel.init(cfg.seed, result.model.hyper)
    untrained.fit_input_scaling(train_view.values, train_view.valid)
    baseline = probe_frozen(untrained, train_view, test_view, ProbeConfig(seed=5))
    assert frozen.accuracy >= baseline.accuracy - 0.05

    tuned = finetune(result.model, train_view, test_view, ProbeConfig(seed=5))
    assert tuned.accuracy >= 0.95
    assert logistic_oracle(train_view, test_view, seed=0).accuracy >= 0.9


@pytest.mark.slow
@pytest.mark.parametrize("seed", [1, 2, 3])
def test_zeroing_temporal_columns_loses_the_timing_classes(seed):
    train, test = planted_splits("timing_only", 160, seed=seed)
    accuracy = {}
    for name, flags in (("full", {}), ("no_temporal", {"no_temporal": True})):
        result, cfg = pretrained(train, epochs=5, d=16, seed=seed, **flags)
        report = probe_frozen(result.model, model_view(train, cfg), model_view(test, cfg), ProbeConfig(seed=seed))
        accuracy[name] = report.accuracy
    assert accuracy["full"] >= 0.9
    assert accuracy["full"] - accuracy["no_temporal"] >= 0.10
