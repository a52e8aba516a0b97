import numpy as np
import pytest

from crashforest import cart, evaluation, prep
from crashforest.cart import TreeParams
from crashforest.evaluation import (
    DataPreconditionError,
    ExperimentConfig,
    accuracy,
    confusion,
    run_all,
    run_one_vs_all,
    sensitivity,
)
from crashforest.mlp import TrainSchedule
from crashforest.prep import SplitSpec
from crashforest.schema import MODEL_FIELDS, InjurySeverity, filter_head_on_front, select_model_variables
from crashforest.synthgen import GeneratorSpec, Rule, generate

FAST = TrainSchedule(bp_epochs=10, cg_epochs=20)
SMALL_HIDDEN = {c: 4 for c in InjurySeverity}


def fast_config(**kw):
    return ExperimentConfig(**{"hidden_neurons": SMALL_HIDDEN, "schedule": FAST, **kw})


def dataset(**spec):
    records, _ = generate(GeneratorSpec(**spec))
    return prep.encode(select_model_variables(filter_head_on_front(records)))


def test_accuracy_examples():
    assert accuracy([1, 0, 1], [1, 0, 1]) == 100.0
    assert accuracy([1, 0], [0, 1]) == 0.0
    assert accuracy([1] * 7 + [0] * 3, [1] * 10) == 70.0
    with pytest.raises(ValueError):
        accuracy([], [])


def test_confusion_examples(rng):
    assert confusion([0] * 4, [0] * 4) == (4, 0, 0, 0)
    c = confusion([1, 0, 1], [1, 0, 1])
    assert c.fp == 0 and c.fn == 0
    p, y = rng.integers(0, 2, size=100), rng.integers(0, 2, size=100)
    c = confusion(p, y)
    assert sum(c) == 100
    assert 100.0 * (c.tn + c.tp) / 100 == accuracy(p, y)
    with pytest.raises(ValueError):
        confusion([], [])


def test_single_variable_rule_is_learned_perfectly():
    rules = (Rule({"restraint_used": ("no",)}, (0, 0, 0, 0, 1.0)),
             Rule({}, (0.4, 0.3, 0.2, 0.1, 0.0)))
    ds = dataset(n_rows=2000, seed=3, rule_table=rules)
    rep = run_one_vs_all(ds, InjurySeverity.Fatal, fast_config(repeats=3))
    assert rep.dt_mean_sd == (100.0, 0.0)
    for conf, n in zip(rep.dt_confusion, rep.test_rows):
        assert sum(conf) == n


def test_noise_labels_score_near_chance():
    ds = dataset(n_rows=3400, seed=8, rule_table=(), class_weights=(0.5, 0.5, 0, 0, 0))
    rep = run_one_vs_all(ds, InjurySeverity.PossibleInjury, fast_config(repeats=10))
    assert all(n >= 1000 for n in rep.test_rows)
    for acc in rep.dt_accuracy + rep.nn_accuracy:
        assert 40.0 <= acc <= 60.0


def test_single_repeat_has_zero_sd(planted_dataset):
    rep = run_one_vs_all(planted_dataset, InjurySeverity.Fatal, fast_config())
    assert rep.dt_mean_sd[1] == 0.0 and rep.nn_mean_sd[1] == 0.0


@pytest.fixture(scope="module")
def fast_table(planted_dataset):
    return run_all(planted_dataset, fast_config())


def test_run_all_shape(fast_table):
    assert [r.positive for r in fast_table.reports] == list(InjurySeverity)
    for r in fast_table.reports:
        assert all(0 <= a <= 100 for a in r.dt_accuracy + r.nn_accuracy)
    text = evaluation.render_text(fast_table)
    assert "# Hidden Neurons" in text and "Accuracy (%)" in text


def test_run_all_is_deterministic(planted_dataset, fast_table):
    again = run_all(planted_dataset, fast_config())
    assert evaluation.render_records(again) == evaluation.render_records(fast_table)
    assert evaluation.render_text(again) == evaluation.render_text(fast_table)


def test_fatal_is_most_predictable_for_the_tree(fast_table):
    dt = {r.positive: r.dt_mean_sd[0] for r in fast_table.reports}
    assert max(dt, key=dt.get) is InjurySeverity.Fatal


def test_paired_test_rows(planted_dataset):
    config = fast_config(repeats=2)
    for r in range(2):
        _, test = evaluation.repeat_split(planted_dataset, config, r)
        positives = [int(prep.one_vs_all(test, c).targets.sum()) for c in InjurySeverity]
        assert sum(positives) == len(test)
    a = evaluation.repeat_split(planted_dataset, config, 0)[1].row_ids
    b = evaluation.repeat_split(planted_dataset, config, 0)[1].row_ids
    assert np.array_equal(a, b)


def test_missing_class_is_named():
    ds = dataset(n_rows=300, rule_table=(), class_weights=(0.5, 0.5, 0, 0, 0))
    with pytest.raises(DataPreconditionError, match="nonincap, incap, fatal"):
        run_all(ds, fast_config())


def test_config_validation():
    with pytest.raises(ValueError, match="fatal"):
        ExperimentConfig(hidden_neurons={InjurySeverity.NoInjury: 3})
    with pytest.raises(ValueError):
        ExperimentConfig(repeats=0)
    assert ExperimentConfig().fingerprint() == ExperimentConfig().fingerprint()
    assert ExperimentConfig().fingerprint() != ExperimentConfig(repeats=2).fingerprint()


def test_sensitivity_on_single_planted_variable():
    rules = (Rule({"restraint_used": ("no",)}, (0.05, 0.05, 0.05, 0.05, 0.8)),
             Rule({}, (0.3, 0.3, 0.2, 0.15, 0.05)))
    ds = dataset(n_rows=3000, seed=5, rule_table=rules, proxy_pairs=())
    rep = sensitivity(ds, InjurySeverity.Fatal, fast_config(repeats=2))
    assert rep.scores[0].name == "restraint_used"
    assert max(rep.scores, key=lambda s: s.tree_importance).name == "restraint_used"


def test_sensitivity_invariants():
    # Every record is male, so permuting gender is the identity.
    ds = dataset(n_rows=3000, seed=6, rule_table=(), marginals={
        **GeneratorSpec().marginals, "gender": {"male": 1.0}})
    config = fast_config()
    train, test = evaluation.repeat_split(ds, config, 0)
    fit = evaluation.fit_repeat(train, test, InjurySeverity.Fatal, config, 0)
    tree_drop, nn_drop = evaluation.permutation_drops(fit, config, 0)
    assert tree_drop["gender"] == 0.0 and nn_drop["gender"] == 0.0
    read = set()
    for node in fit.tree.nodes():
        if not node.is_leaf:
            read.add(node.primary.name)
            read.update(s.name for s in node.surrogates)
    for name in MODEL_FIELDS:
        if name not in read:
            assert tree_drop[name] == 0.0
    # labels carry no signal: permutation cannot move accuracy much
    rep = sensitivity(ds, InjurySeverity.Fatal, config)
    for s in rep.scores:
        assert abs(s.tree_permutation) <= 2.0 and abs(s.nn_permutation) <= 2.0


def test_sensitivity_rendering_is_ranked(planted_dataset):
    rep = sensitivity(planted_dataset, InjurySeverity.Fatal, fast_config())
    drops = [s.tree_permutation for s in rep.scores]
    assert drops == sorted(drops, reverse=True)
    text = evaluation.render_sensitivity_text(rep)
    assert "DT permutation" in text and "restraint_used" in text
    assert len(evaluation.render_sensitivity_records(rep).splitlines()) >= len(MODEL_FIELDS)


def test_tree_params_reach_the_tree(planted_dataset):
    config = fast_config(tree_params=TreeParams(max_depth=1))
    train, test = evaluation.repeat_split(planted_dataset, config, 0)
    fit = evaluation.fit_repeat(train, test, InjurySeverity.Fatal, config, 0)
    assert fit.tree.depth <= 1
    assert isinstance(fit.tree, cart.Tree)
    assert SplitSpec().test_fraction == 0.3
