"""
Tests for training regimes
Freeze contracts, objective reductions, early stopping, loss scaling and gradient equilibrium
"""

import numpy as np
import pytest
from conftest import make_model

from src.core import regimes
from src.core.errors import DivergenceError, LengthMismatchError
from src.core.multiexit import CostModel, ExitWeights
from src.core.regimes import (
    EarlyStopState,
    EpochRecord,
    Objective,
    PhaseRunner,
    RegimeKind,
    RegimeSpec,
    ScalingScheme,
    StopDecision,
    TrainLog,
    early_stop_update,
    ge_combine,
    loss_weights,
    regime_phases,
    run_phase1,
    run_phase2,
    run_phase3,
    run_regime,
)


def replay_stop_epoch(stream: list[list[float]], patience: int) -> int | None:
    """Brute-force reading of the rule: stop once `patience` consecutive epochs saw no exit improve"""
    best = [-np.inf] * len(stream[0])
    quiet = 0
    for epoch, metrics in enumerate(stream, start=1):
        improved = [m > b for m, b in zip(metrics, best)]
        best = [max(m, b) for m, b in zip(metrics, best)]
        quiet = 0 if any(improved) else quiet + 1
        if quiet == patience:
            return epoch
    return None


@pytest.mark.unit
class TestEarlyStopping:
    def test_stops_after_patience_quiet_epochs(self):
        state = EarlyStopState.create(2, patience=3)
        assert early_stop_update(state, [0.5, 0.5]) is StopDecision.CONTINUE
        decisions = [early_stop_update(state, [0.4, 0.4]) for _ in range(3)]
        assert decisions == [StopDecision.CONTINUE, StopDecision.CONTINUE, StopDecision.STOP]

    def test_single_exit_improvement_resets(self):
        state = EarlyStopState.create(3, patience=3)
        early_stop_update(state, [0.5, 0.5, 0.5])
        early_stop_update(state, [0.4, 0.4, 0.4])
        assert early_stop_update(state, [0.6, 0.1, 0.1]) is StopDecision.CONTINUE
        assert state.counter == 0

    def test_lower_is_better(self):
        state = EarlyStopState.create(1, patience=1, higher_is_better=False)
        early_stop_update(state, [1.0])
        assert early_stop_update(state, [0.5]) is StopDecision.CONTINUE
        assert early_stop_update(state, [0.7]) is StopDecision.STOP

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatchError):
            early_stop_update(EarlyStopState.create(2, 3), [0.1])

    @pytest.mark.parametrize("patience", [1, 3, 50])
    @pytest.mark.parametrize("stream_seed", range(5))
    def test_matches_replay(self, patience, stream_seed):
        rng = np.random.default_rng(stream_seed)
        # new records grow rarer over time, so quiet stretches appear
        stream = rng.uniform(0.0, 1.0, (300, 3)).tolist()
        state = EarlyStopState.create(3, patience)
        stopped = None
        for epoch, metrics in enumerate(stream, start=1):
            if early_stop_update(state, metrics) is StopDecision.STOP:
                stopped = epoch
                break
        assert stopped == replay_stop_epoch(stream, patience)


@pytest.mark.unit
class TestLossWeights:
    def test_uniform(self):
        np.testing.assert_array_equal(loss_weights("uniform", 3).alpha, [1.0, 1.0, 1.0])

    def test_increasing(self):
        np.testing.assert_allclose(loss_weights("inc", 3).alpha, [0.5, 1.0, 1.5])

    def test_decreasing(self):
        np.testing.assert_allclose(loss_weights("dec", 3).alpha, [1.5, 1.0, 0.5])

    def test_sdn_from_relative_costs(self):
        cost = CostModel(block_flops=(20, 20, 45), head_flops=(5, 5, 5), placements=(1, 2, 3))
        np.testing.assert_allclose(cost.relative_costs(), [0.25, 0.5, 1.0])
        weights = loss_weights(ScalingScheme.SDN, 3, cost).alpha
        np.testing.assert_allclose(weights, [3 / 7, 6 / 7, 12 / 7], atol=1e-12)
        assert int(np.argmax(weights)) == 2

    @pytest.mark.parametrize("scheme", list(ScalingScheme))
    @pytest.mark.parametrize("k", [1, 2, 5])
    def test_sums_to_number_of_exits(self, scheme, k):
        cost = make_model(num_blocks=5, placements=tuple(range(6 - k, 6))).cost_model()
        assert loss_weights(scheme, k, cost).alpha.sum() == pytest.approx(k)

    def test_sdn_needs_matching_cost_model(self):
        with pytest.raises(LengthMismatchError):
            loss_weights("sdn", 3)


@pytest.mark.unit
class TestGradientEquilibrium:
    def _grads(self, model, seed):
        rng = np.random.default_rng(seed)
        return {n: rng.standard_normal(model.params[n].shape) for n in model.backbone_names}

    def test_single_exit_unchanged(self):
        model = make_model(num_blocks=2, placements=(2,))
        g = self._grads(model, 0)
        combined = ge_combine([g], model)
        for name in model.backbone_names:
            np.testing.assert_array_equal(combined[name], g[name])

    def test_equal_gradients_average_to_themselves(self, small_model):
        g = self._grads(small_model, 1)
        combined = ge_combine([g, g, g], small_model)
        np.testing.assert_allclose(combined["block1.weight"], g["block1.weight"], atol=1e-12)

    def test_weighted_summation_oracle(self, small_model):
        grads = [self._grads(small_model, s) for s in range(3)]
        combined = ge_combine(grads, small_model)
        # placements (1, 2, 3): block 1 feeds 3 exits, block 2 feeds 2, block 3 feeds 1
        np.testing.assert_allclose(
            combined["block1.weight"], sum(g["block1.weight"] for g in grads) / 3, atol=1e-12
        )
        np.testing.assert_allclose(
            combined["block2.bias"], (grads[1]["block2.bias"] + grads[2]["block2.bias"]) / 2, atol=1e-12
        )
        np.testing.assert_array_equal(combined["block3.weight"], grads[2]["block3.weight"])

    def test_never_exceeds_largest_input_norm(self, small_model):
        grads = [self._grads(small_model, s) for s in range(3)]
        combined = ge_combine(grads, small_model)
        for name in small_model.backbone_names:
            assert np.linalg.norm(combined[name]) <= max(np.linalg.norm(g[name]) for g in grads) + 1e-12

    def test_layout_mismatch(self, small_model):
        with pytest.raises(LengthMismatchError):
            ge_combine([self._grads(small_model, 0)], small_model)


@pytest.mark.unit
class TestObjectives:
    def test_joint_backbone_gradient_is_sum_of_exit_gradients(self, small_split):
        model = make_model(placements=(2, 3))
        g = model.graph
        g.forward(model.bindings(small_split.features, small_split.targets, np.ones(2)))
        total = g.grad(model.backbone_names)
        per_exit = [g.grad(model.backbone_names, root=g.outputs[f"loss{k}"]) for k in (1, 2)]
        for name in model.backbone_names:
            np.testing.assert_allclose(total[name], per_exit[0][name] + per_exit[1][name], atol=1e-12)

    def test_phase1_gradients_equal_one_hot_joint_gradients(self, tiny_dataset, tiny_spec):
        model = make_model(input_dim=4)
        runner = PhaseRunner(model, tiny_dataset, tiny_spec, TrainLog(3), seed=0)
        plan = regime_phases(RegimeSpec(kind="disjoint"), model)[0]
        x, y = tiny_dataset.train.features[:16], tiny_dataset.train.targets[:16]
        _, phase1 = runner._gradients(plan, Objective.EQ1, x, y)

        g = model.graph
        g.forward(model.bindings(x, y, ExitWeights.one_hot(3, 3).alpha))
        joint = g.grad(plan.trainable)
        assert list(phase1) == plan.trainable
        for name in plan.trainable:
            np.testing.assert_array_equal(phase1[name], joint[name])


@pytest.mark.integration
class TestFreezeContracts:
    def test_phase1_leaves_other_heads_untouched(self, tiny_dataset, tiny_spec):
        model = make_model()
        frozen = model.head_names(1) + model.head_names(2)
        before = model.state_hash(frozen)
        backbone_before = model.state_hash(model.backbone_names)
        run_phase1(model, tiny_dataset, tiny_spec)
        assert model.state_hash(frozen) == before
        assert model.state_hash(model.backbone_names) != backbone_before

    def test_phase3_leaves_backbone_untouched_and_its_moments_zero(self, tiny_dataset, tiny_spec):
        model = make_model()
        before = model.state_hash(model.backbone_names)
        heads_before = model.state_hash(model.all_head_names)
        plan = regime_phases(RegimeSpec(kind="disjoint"), model)[1]
        runner = PhaseRunner(model, tiny_dataset, tiny_spec, TrainLog(3), seed=0)
        runner.run(plan)
        assert model.state_hash(model.backbone_names) == before
        assert model.state_hash(model.all_head_names) != heads_before
        for name in model.backbone_names:
            assert not np.any(runner.optimizer.m[name])
            assert not np.any(runner.optimizer.v[name])

    def test_run_phase3_function(self, tiny_dataset, tiny_spec):
        model = make_model()
        before = model.state_hash(model.backbone_names)
        run_phase3(model, tiny_dataset, tiny_spec)
        assert model.state_hash(model.backbone_names) == before

    def test_disjoint_backbone_fixed_after_phase1(self, tiny_dataset, tiny_spec):
        model = make_model()
        seen: list[tuple[str, str]] = []
        run_regime(
            RegimeSpec(kind="disjoint", max_epochs=3, patience=10, batch_size=16, lr=1e-2),
            model,
            tiny_dataset,
            callbacks=[lambda ctx: seen.append((ctx.phase, ctx.model.state_hash(ctx.model.backbone_names)))],
        )
        phase1 = [h for p, h in seen if p == "phase1"]
        phase3 = [h for p, h in seen if p == "phase3"]
        assert phase1 and phase3
        assert set(phase3) == {phase1[-1]}

    def test_joint_with_detached_ics_reproduces_phase1(self, tiny_dataset):
        spec = RegimeSpec(max_epochs=35, patience=100, batch_size=16, lr=1e-2)
        a, b = make_model(), make_model()
        log_a, log_b = TrainLog(3), TrainLog(3)
        run_phase1(a, tiny_dataset, spec, log=log_a)
        run_phase2(b, tiny_dataset, spec, ExitWeights.one_hot(3, 3), detach_ics=True, log=log_b)
        assert sum(log_a.objective_steps.values()) >= 100
        assert a.state_hash() == b.state_hash()


@pytest.mark.integration
class TestRegimeSchedules:
    def test_mixed_has_two_phases_joint_one(self, tiny_dataset):
        mixed = run_regime(RegimeSpec(kind="mixed", max_epochs=2), make_model(), tiny_dataset)
        joint = run_regime(RegimeSpec(kind="joint", max_epochs=2), make_model(), tiny_dataset)
        assert mixed.log.phases == ["phase1", "phase2"]
        assert joint.log.phases == ["phase2"]
        assert [r.epoch for r in mixed.log.records] == list(range(1, len(mixed.log.records) + 1))

    def test_alternating_balances_objectives(self, tiny_dataset):
        spec = RegimeSpec(kind="alternating", max_epochs=2, patience=10, batch_size=16)
        result = run_regime(spec, make_model(), tiny_dataset)
        # 42 training rows in batches of 16 give 3 steps per epoch
        assert result.log.objective_steps == {"eq1": 3, "eq2": 3}

    def test_single_exit_joint_and_disjoint_share_the_phase1_trajectory(self, tiny_dataset):
        spec = dict(max_epochs=4, patience=10, batch_size=16, lr=1e-2)
        traces: dict[str, list[tuple[str, str]]] = {"joint": [], "disjoint": []}
        results = {}
        for kind in traces:
            model = make_model(num_blocks=2, placements=(2,))
            results[kind] = run_regime(
                RegimeSpec(kind=kind, **spec),
                model,
                tiny_dataset,
                seed=7,
                callbacks=[lambda ctx, kind=kind: traces[kind].append((ctx.phase, ctx.model.state_hash()))],
            )
        joint = [h for p, h in traces["joint"] if p == "phase2"]
        disjoint = [h for p, h in traces["disjoint"] if p == "phase1"]
        assert joint and joint == disjoint
        joint_loss = [r.train_loss for r in results["joint"].log.records if r.phase == "phase2"]
        disjoint_loss = [r.train_loss for r in results["disjoint"].log.records if r.phase == "phase1"]
        assert joint_loss == disjoint_loss

    def test_mixed_gradual_single_exit_matches_mixed(self):
        model = make_model(num_blocks=2, placements=(2,))
        gradual = regime_phases(RegimeSpec(kind="mixed-gradual"), model)
        mixed = regime_phases(RegimeSpec(kind="mixed"), model)
        assert [p.phase_id for p in gradual] == [p.phase_id for p in mixed]
        assert [p.trainable for p in gradual] == [p.trainable for p in mixed]

    def test_mixed_gradual_optimises_the_last_exits(self, small_model):
        plans = regime_phases(RegimeSpec(kind="mixed-gradual"), small_model)
        assert [p.phase_id for p in plans] == ["phase1", "gradual2", "gradual3"]
        assert plans[1].active_exits == [2, 3]
        assert plans[2].trainable == small_model.parameter_names

    def test_branch_wise_segments(self):
        model = make_model(num_blocks=3, placements=(1, 3))
        plans = regime_phases(RegimeSpec(kind="branch-wise"), model)
        assert plans[0].trainable == model.block_names(1) + model.head_names(1)
        assert plans[1].trainable == model.block_names(2) + model.block_names(3) + model.head_names(2)

    def test_separate_adds_one_exit_per_phase(self, small_model):
        plans = regime_phases(RegimeSpec(kind="separate"), small_model)
        assert [p.active_exits for p in plans] == [[1], [1, 2], [1, 2, 3]]
        assert "head3.fc1.weight" not in plans[1].trainable

    def test_ge_scaling_flags_every_joint_phase(self, small_model):
        plans = regime_phases(RegimeSpec(kind="mixed", scaling="ge"), small_model)
        assert [p.gradient_equilibrium for p in plans] == [False, True]

    def test_ge_training_runs(self, tiny_dataset):
        result = run_regime(RegimeSpec(kind="joint", scaling="ge", max_epochs=2), make_model(), tiny_dataset)
        assert len(result.log.records) == 2


@pytest.mark.unit
class TestDivergenceAndLogs:
    def test_divergence_aborts_the_phase(self, tiny_dataset, tiny_spec, monkeypatch):
        monkeypatch.setattr(regimes, "DIVERGENCE_THRESHOLD", -1.0)
        with pytest.raises(DivergenceError):
            run_phase1(make_model(), tiny_dataset, tiny_spec)

    def test_train_log_frame(self):
        log = TrainLog(2)
        log.append(EpochRecord(1, "phase1", 0.1, 0.5, [0.2, 0.3], 0.0))
        frame = log.to_frame()
        assert list(frame.columns) == ["epoch", "phase", "lr", "train_loss", "val_metric_exit_1", "val_metric_exit_2"]
        with pytest.raises(ValueError):
            log.append(EpochRecord(1, "phase1", 0.1, 0.5, [0.2, 0.3], 0.0))

    def test_validation_runs_once_per_epoch(self, tiny_dataset, tiny_spec, monkeypatch):
        calls = []
        original = regimes.evaluate_exits
        monkeypatch.setattr(regimes, "evaluate_exits", lambda *a: calls.append(1) or original(*a))
        log = TrainLog(3)
        run_phase1(make_model(), tiny_dataset, tiny_spec, log=log)
        assert len(calls) == len(log.records) == 3

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            RegimeSpec(patience=0)
        with pytest.raises(ValueError):
            RegimeSpec(kind="sideways")
        assert RegimeSpec(kind="joint").kind is RegimeKind.JOINT
