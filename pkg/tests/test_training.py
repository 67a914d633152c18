import copy

import numpy as np
import pytest
import torch

from distill_cl import (
    DistillConfig,
    GrowthPolicy,
    LabeledSet,
    ModelSpec,
    OptimizerConfig,
    REGIMES,
    aggregate,
    backward,
    build_model,
    class_incremental,
    count_flops,
    grow_if_needed,
    run_incremental,
    synthetic_digits,
    train_model,
    validate,
)
from distill_cl.distill import distill_flops_estimate
from distill_cl.errors import NumericError, ValidationError
from distill_cl.models import convnet_ladder, convnet_spec

from conftest import random_set


class TestTrainModel:
    @pytest.mark.parametrize("kind", ["adam", "sgd_momentum"])
    def test_zero_learning_rate_leaves_params_untouched(self, kind, tiny_spec, tiny_set):
        model = build_model(tiny_spec, seed=0)
        before = {n: p.detach().clone() for n, p in model.named_parameters()}
        opt = OptimizerConfig(kind=kind, lr=0.0, epochs=3, batch_size=4)
        train_model(model, tiny_set, opt, seed=1)
        for n, p in model.named_parameters():
            assert torch.equal(p, before[n]), n

    def test_single_sgd_step_matches_closed_form(self, tiny_spec, tiny_set):
        model = build_model(tiny_spec, seed=1)
        grads, _ = backward(model, tiny_set, reduction="mean")
        before = {n: p.detach().clone() for n, p in model.named_parameters()}
        opt = OptimizerConfig(
            kind="sgd_momentum", lr=0.25, momentum=0.0, weight_decay=0.0,
            epochs=1, batch_size=len(tiny_set),
        )
        train_model(model, tiny_set, opt, seed=0)
        for n, p in model.named_parameters():
            want = before[n].numpy() - 0.25 * grads[n]
            assert np.allclose(p.detach().numpy(), want, atol=1e-6), n

    def test_hand_computed_logistic_update(self):
        # 1x1 input: the norm maps the lone value to beta, so the feature is
        # relu(beta) = 0.5 and the classifier is a plain logistic model whose
        # cross-entropy gradient is (softmax(logits) - onehot) * feature.
        spec = ModelSpec(1, (1,), (1, 1, 1), 2)
        model = build_model(spec, seed=0)
        with torch.no_grad():
            model.norms[0].bias.fill_(0.5)
            model.classifier.weight.copy_(torch.tensor([[0.8], [-0.4]]))
            model.classifier.bias.zero_()
        feature = 0.5
        w = np.array([[0.8], [-0.4]])
        logits = (w * feature).ravel()
        p = np.exp(logits) / np.exp(logits).sum()
        grad_w = (p - np.array([1.0, 0.0]))[:, None] * feature
        grad_b = p - np.array([1.0, 0.0])

        data = LabeledSet(np.full((1, 1, 1, 1), 0.3, np.float32), np.zeros(1, np.int64), 2)
        opt = OptimizerConfig(
            kind="sgd_momentum", lr=0.5, momentum=0.0, weight_decay=0.0, epochs=1, batch_size=1
        )
        train_model(model, data, opt, seed=0)
        assert np.allclose(
            model.classifier.weight.detach().numpy(), w - 0.5 * grad_w, atol=1e-6
        )
        assert np.allclose(
            model.classifier.bias.detach().numpy(), -0.5 * grad_b, atol=1e-6
        )

    def test_flops_spent_arithmetic(self):
        spec = convnet_spec(1, (1, 8, 8), 5, width=2)
        model = build_model(spec, seed=0)
        data = random_set(100, (1, 8, 8), 5, seed=2)
        opt = OptimizerConfig(epochs=2, batch_size=10)
        fc = count_flops(spec)
        _, flops = train_model(model, data, opt, seed=0)
        assert flops == 20 * 10 * fc.train_step_per_sample + 20 * fc.update_flops_per_step

    def test_batch_size_capped_at_data_size(self, tiny_spec, tiny_set):
        model = build_model(tiny_spec, seed=0)
        opt = OptimizerConfig(epochs=2, batch_size=10_000)
        _, flops = train_model(model, tiny_set, opt, seed=0)
        fc = count_flops(tiny_spec)
        assert flops == 2 * len(tiny_set) * fc.train_step_per_sample + 2 * fc.update_flops_per_step

    def test_empty_data_rejected(self, tiny_spec):
        model = build_model(tiny_spec, seed=0)
        empty = LabeledSet(np.zeros((0, 1, 8, 8), np.float32), np.zeros(0, np.int64), 3)
        with pytest.raises(ValidationError):
            train_model(model, empty, OptimizerConfig())

    def test_non_finite_loss_reports_epoch_and_step(self, tiny_spec, tiny_set):
        model = build_model(tiny_spec, seed=0)
        with torch.no_grad():
            model.classifier.weight.fill_(float("nan"))
        with pytest.raises(NumericError, match="epoch 0"):
            train_model(model, tiny_set, OptimizerConfig(epochs=1), seed=0)

    def test_deterministic_given_seed(self, tiny_spec, tiny_set):
        results = []
        for _ in range(2):
            model = build_model(tiny_spec, seed=3)
            train_model(model, tiny_set, OptimizerConfig(epochs=3, batch_size=4), seed=9)
            results.append({n: p.detach().clone() for n, p in model.named_parameters()})
        for n in results[0]:
            assert torch.equal(results[0][n], results[1][n]), n


def scenario_fixture(n_train=120, n_test=60, classes_per_step=5, seed=0):
    train, test = synthetic_digits(n_train, n_test, seed=seed)
    return class_incremental(train, test, classes_per_step=classes_per_step, seed=seed)


class TestValidate:
    def test_all_correct_classifier(self, tiny_spec):
        scenario = scenario_fixture()
        spec = convnet_spec(2, (1, 28, 28), 10, width=4)
        model = build_model(spec, seed=0)
        # force constant prediction of class c, then evaluate on a scenario
        # whose cumulative test at t=1 contains only step-1 classes
        step1_classes = sorted(scenario.steps[0].classes_present)
        with torch.no_grad():
            model.classifier.weight.zero_()
            model.classifier.bias.zero_()
            model.classifier.bias[step1_classes[0]] = 10.0
        labels = scenario.steps[0].test.labels
        expected = float((labels == step1_classes[0]).mean())
        assert validate(model, scenario, 1) == pytest.approx(expected)

    def test_micro_average_weights_each_sample_equally(self):
        # step 1 test: 3 samples of class 0; step 2 test: 1 sample of class 1.
        images = np.zeros((4, 1, 6, 6), np.float32)
        mk = lambda idx, labels: LabeledSet(images[: len(idx)], np.array(labels), 2)
        from distill_cl.scenarios import Scenario, ScenarioStep

        steps = [
            ScenarioStep(1, mk([0], [0]), mk([0, 1, 2], [0, 0, 0]), frozenset({0})),
            ScenarioStep(2, mk([0], [1]), mk([0], [1]), frozenset({1})),
        ]
        scenario = Scenario(steps, "class_incremental", "toy", 2, 0)
        spec = convnet_spec(1, (1, 6, 6), 2, width=2)
        model = build_model(spec, seed=0)
        with torch.no_grad():
            model.classifier.weight.zero_()
            model.classifier.bias.copy_(torch.tensor([5.0, 0.0]))  # always class 0
        assert validate(model, scenario, 2) == pytest.approx(3 / 4)

    def test_untrained_model_near_chance(self):
        scenario = scenario_fixture(n_train=200, n_test=400, classes_per_step=10)
        model = build_model(convnet_spec(2, (1, 28, 28), 10, width=8), seed=17)
        acc = validate(model, scenario, 1)
        assert 0.02 <= acc <= 0.25  # chance is 0.1 on the balanced 10-class test

    def test_upto_t_bounds_checked(self):
        scenario = scenario_fixture()
        model = build_model(convnet_spec(2, (1, 28, 28), 10, width=4), seed=0)
        with pytest.raises(ValidationError):
            validate(model, scenario, 3)


class TestGrowIfNeeded:
    @pytest.fixture
    def policy(self):
        return GrowthPolicy(
            ladder=convnet_ladder((1, 28, 28), 10, widths={2: 4, 3: 8, 4: 16}),
            a_standard=0.8,
        )

    def test_boundary_equality_stays(self, policy):
        assert grow_if_needed(policy.ladder[0], 0.8, policy) == policy.ladder[0]

    def test_below_threshold_grows_one_rung(self, policy):
        assert grow_if_needed(policy.ladder[0], 0.799, policy) == policy.ladder[1]
        assert grow_if_needed(policy.ladder[1], 0.5, policy) == policy.ladder[2]

    def test_ladder_exhausted_stays(self, policy):
        assert grow_if_needed(policy.ladder[2], 0.01, policy) == policy.ladder[2]

    def test_relative_rule(self):
        policy = GrowthPolicy(
            ladder=convnet_ladder((1, 28, 28), 10, widths={2: 4, 3: 8, 4: 16}),
            a_standard=None,
            relative_factor=0.95,
        )
        spec = policy.ladder[0]
        assert grow_if_needed(spec, 0.90, policy, best_so_far=0.92) == spec
        assert grow_if_needed(spec, 0.80, policy, best_so_far=0.92) == policy.ladder[1]
        with pytest.raises(ValidationError):
            grow_if_needed(spec, 0.9, policy)  # best_so_far required

    def test_spec_not_on_ladder_rejected(self, policy):
        with pytest.raises(ValidationError):
            grow_if_needed(convnet_spec(2, (1, 28, 28), 10, width=6), 0.5, policy)

    def test_ladder_must_increase_in_flops(self):
        ladder = convnet_ladder((1, 28, 28), 10, widths={2: 4, 3: 8, 4: 16})
        with pytest.raises(ValidationError):
            GrowthPolicy(ladder=(ladder[1], ladder[0]), a_standard=0.5)


@pytest.fixture(scope="module")
def mini_run():
    """All four regimes on a tiny 2-step scenario, with audit events."""
    scenario = scenario_fixture(n_train=160, n_test=80, classes_per_step=5, seed=2)
    ladder = convnet_ladder((1, 28, 28), 10, widths={2: 4, 3: 8, 4: 16})
    policy = GrowthPolicy(ladder=ladder, a_standard=0.9)
    dcfg = DistillConfig(
        distill_spec=ladder[-1], ipc=2, outer_steps=8, real_batch_per_class=8, seed=0
    )
    opt = OptimizerConfig(epochs=20)
    real_opt = OptimizerConfig(epochs=5)
    cache = {}
    logs, events = {}, {}
    for regime in REGIMES:
        seen = []
        logs[regime] = run_incremental(
            scenario, dcfg, opt, policy, regime,
            master_seed=5, real_opt=real_opt, distill_cache=cache,
            data_access_hook=seen.append,
        )
        events[regime] = seen
    return scenario, dcfg, opt, real_opt, policy, logs, events


class TestRunIncremental:
    def test_one_metrics_row_per_step_in_order(self, mini_run):
        scenario, *_, logs, _ = mini_run
        for log in logs.values():
            assert [s.t for s in log.steps] == [1, 2]

    def test_cumulative_flops_strictly_increasing(self, mini_run):
        *_, logs, _ = mini_run
        for log in logs.values():
            flops = [s.cumulative_flops for s in log.steps]
            assert all(b > a for a, b in zip(flops, flops[1:]))
            assert flops[-1] == sum(s.train_flops + s.distill_flops for s in log.steps)

    def test_adaptive_spec_sequence_non_decreasing(self, mini_run):
        *_, logs, _ = mini_run
        depths = [s.model_spec_used["depth"] for s in logs["adaptive"].steps]
        assert depths == sorted(depths)

    def test_buffer_bytes_exact(self, mini_run):
        scenario, dcfg, *_, logs, _ = mini_run
        per_image = 1 * 28 * 28 * 4
        for regime in ("adaptive", "fixed_largest"):
            for s in logs[regime].steps:
                assert s.buffer_bytes == s.t * 5 * dcfg.ipc * per_image
        for regime in ("cumulative_baseline", "naive_forgetting"):
            assert all(s.buffer_bytes == 0 for s in logs[regime].steps)

    def test_buffer_regimes_never_touch_past_real_train(self, mini_run):
        *_, events = mini_run
        for regime in ("adaptive", "fixed_largest"):
            for e in events[regime]:
                if e["source"] == "real_train":
                    assert e["source_step"] == e["at_step"], e

    def test_cumulative_reads_all_past_real_train(self, mini_run):
        *_, events = mini_run
        reads = {
            (e["at_step"], e["source_step"])
            for e in events["cumulative_baseline"]
            if e["source"] == "real_train"
        }
        assert reads == {(1, 1), (2, 1), (2, 2)}

    def test_distill_cache_shares_work_but_flops_still_charged(self, mini_run):
        *_, logs, _ = mini_run
        a = [s.distill_flops for s in logs["adaptive"].steps]
        f = [s.distill_flops for s in logs["fixed_largest"].steps]
        assert a == f
        assert all(v > 0 for v in a)

    def test_distill_charge_matches_analytic_estimate(self, mini_run):
        scenario, dcfg, *_, logs, _ = mini_run
        for s, step in zip(logs["fixed_largest"].steps, scenario.steps):
            sizes = [len(step.train.indices_of(c)) for c in step.train.classes_present()]
            assert s.distill_flops == distill_flops_estimate(sizes, dcfg)

    def test_training_charge_matches_analytic_arithmetic(self, mini_run):
        scenario, dcfg, opt, *_ , logs, _ = mini_run
        fc = count_flops(dcfg.distill_spec)  # fixed_largest trains the largest spec
        for s in logs["fixed_largest"].steps:
            n = s.t * 5 * dcfg.ipc  # buffer size at step t
            bs = min(opt.batch_size, n)
            updates = opt.epochs * -(-n // bs)
            expected = opt.epochs * n * fc.train_step_per_sample + updates * fc.update_flops_per_step
            assert s.train_flops == expected

    def test_deterministic_rerun(self, mini_run):
        scenario, dcfg, opt, real_opt, policy, logs, _ = mini_run
        again = run_incremental(
            scenario, dcfg, opt, policy, "fixed_largest", master_seed=5, real_opt=real_opt
        )
        assert [s.accuracy for s in again.steps] == [
            s.accuracy for s in logs["fixed_largest"].steps
        ]
        assert again.cumulative_flops == logs["fixed_largest"].cumulative_flops

    def test_unknown_regime_rejected(self, mini_run):
        scenario, dcfg, opt, real_opt, policy, *_ = mini_run
        with pytest.raises(ValidationError):
            run_incremental(scenario, dcfg, opt, policy, "replay", master_seed=0)

    def test_stage_failure_carries_step_stage_and_partial_log(self, mini_run):
        scenario, dcfg, opt, real_opt, policy, *_ = mini_run
        bad_opt = OptimizerConfig(kind="sgd_momentum", lr=1e38, epochs=3, weight_decay=0.0)
        with pytest.raises(NumericError, match=r"step \d+, stage train") as exc_info:
            run_incremental(
                scenario, dcfg, opt, policy, "naive_forgetting",
                master_seed=5, real_opt=bad_opt,
            )
        assert hasattr(exc_info.value, "partial_log")

    def test_mixed_training_mode_runs(self, mini_run):
        scenario, dcfg, opt, real_opt, policy, *_ = mini_run
        log = run_incremental(
            scenario, dcfg, opt, policy, "adaptive",
            master_seed=5, real_opt=real_opt, mixed_training=True,
        )
        assert len(log.steps) == 2
        assert log.config["mixed_training"] is True


class TestAggregate:
    def test_reference_against_itself_is_unity(self, mini_run):
        *_, logs, _ = mini_run
        ref = logs["fixed_largest"]
        agg = aggregate(ref, ref)
        assert agg["needed_flops_fraction"] == 1.0
        assert agg["end_accuracy"] == ref.steps[-1].accuracy

    def test_memory_fraction_arithmetic(self, mini_run):
        scenario, dcfg, *_, logs, _ = mini_run
        agg = aggregate(logs["adaptive"], logs["fixed_largest"])
        expected = logs["adaptive"].steps[-1].buffer_bytes / (
            scenario.full_train_size * 28 * 28 * 4
        )
        assert agg["memory_fraction"] == pytest.approx(expected)

    def test_reference_regime_enforced(self, mini_run):
        *_, logs, _ = mini_run
        with pytest.raises(ValidationError):
            aggregate(logs["adaptive"], logs["adaptive"])

    def test_scenario_mismatch_rejected(self, mini_run):
        scenario, dcfg, opt, real_opt, policy, logs, _ = mini_run
        other = scenario_fixture(n_train=100, n_test=60, classes_per_step=5, seed=9)
        other_log = run_incremental(
            other, dcfg, opt, policy, "fixed_largest", master_seed=1, real_opt=real_opt
        )
        with pytest.raises(ValidationError):
            aggregate(logs["adaptive"], other_log)
