"""
Tests for AdamW and the warm-restart cosine schedule
"""

import math

import numpy as np
import pytest

from src.core.errors import NonFiniteError
from src.core.optim import AdamWState, LrSchedule, adamw_step, lr_at


@pytest.mark.unit
class TestAdamW:
    def test_decay_only_path(self):
        params = {"p": np.array(1.0)}
        state = AdamWState.create(params, weight_decay=0.1)
        adamw_step(state, params, {"p": np.array(0.0)}, lr=0.1)
        assert float(params["p"]) == pytest.approx(0.99, abs=1e-15)
        assert float(state.m["p"]) == 0.0
        assert float(state.v["p"]) == 0.0
        assert state.t == 1

    def test_momentum_free_limit(self):
        params = {"p": np.array(0.0)}
        state = AdamWState.create(params, beta1=0.0, beta2=0.0)
        adamw_step(state, params, {"p": np.array(4.0)}, lr=0.1)
        assert float(params["p"]) == pytest.approx(-0.1 * 4.0 / (4.0 + 1e-8), abs=1e-15)

    def test_two_steps_match_hand_recursion(self):
        b1, b2, eps, lr, wd = 0.9, 0.999, 1e-8, 0.01, 0.05
        params = {"p": np.array(0.7)}
        state = AdamWState.create(params, beta1=b1, beta2=b2, eps=eps, weight_decay=wd)
        grads = [0.3, -1.2]

        p, m, v = 0.7, 0.0, 0.0
        for t, g in enumerate(grads, start=1):
            adamw_step(state, params, {"p": np.array(g)}, lr)
            p = p * (1 - lr * wd)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            p = p - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        assert float(params["p"]) == pytest.approx(p, abs=1e-12)

    def test_partitioning_invariance(self):
        rng = np.random.default_rng(0)
        a = {"w": rng.standard_normal((3, 2)), "b": rng.standard_normal(2)}
        split_w, split_b = {"w": a["w"].copy()}, {"b": a["b"].copy()}
        joint = {n: v.copy() for n, v in a.items()}
        joint_state = AdamWState.create(joint)
        w_state, b_state = AdamWState.create(split_w), AdamWState.create(split_b)
        for _ in range(3):
            g = {"w": rng.standard_normal((3, 2)), "b": rng.standard_normal(2)}
            adamw_step(joint_state, joint, g, 1e-2)
            adamw_step(w_state, split_w, {"w": g["w"]}, 1e-2)
            adamw_step(b_state, split_b, {"b": g["b"]}, 1e-2)
        np.testing.assert_array_equal(joint["w"], split_w["w"])
        np.testing.assert_array_equal(joint["b"], split_b["b"])

    def test_non_finite_gradient(self):
        params = {"p": np.array(1.0)}
        state = AdamWState.create(params)
        with pytest.raises(NonFiniteError):
            adamw_step(state, params, {"p": np.array(np.inf)}, 0.1)
        assert state.t == 0

    def test_negative_learning_rate(self):
        params = {"p": np.array(1.0)}
        with pytest.raises(ValueError):
            adamw_step(AdamWState.create(params), params, {"p": np.array(1.0)}, -1.0)

    def test_parameters_without_gradient_untouched(self):
        params = {"p": np.array(1.0), "q": np.array(2.0)}
        state = AdamWState.create(params, weight_decay=0.5)
        adamw_step(state, params, {"p": np.array(1.0)}, 0.1)
        assert float(params["q"]) == 2.0
        assert float(state.m["q"]) == 0.0


@pytest.mark.unit
class TestLrSchedule:
    def test_cycle_start(self):
        assert lr_at(LrSchedule(eta_max=0.1, eta_min=0.0, t_0=10), 0) == pytest.approx(0.1)

    def test_half_period_is_midpoint(self):
        schedule = LrSchedule(eta_max=0.1, eta_min=0.02, t_0=10)
        assert lr_at(schedule, 5) == pytest.approx(0.06)

    def test_geometric_restarts(self):
        schedule = LrSchedule(eta_max=0.1, eta_min=0.0, t_0=10, t_mult=2)
        assert lr_at(schedule, 10) == pytest.approx(0.1)
        assert lr_at(schedule, 30) == pytest.approx(0.1)
        assert lr_at(schedule, 20) == pytest.approx(0.05)

    def test_restart_with_unit_multiplier(self):
        schedule = LrSchedule(eta_max=0.1, eta_min=0.0, t_0=4)
        assert lr_at(schedule, 4) == lr_at(schedule, 0)
        assert lr_at(schedule, 3) < lr_at(schedule, 2)

    def test_invalid_schedule(self):
        with pytest.raises(ValueError):
            LrSchedule(eta_max=0.0, eta_min=0.1)
        with pytest.raises(ValueError):
            lr_at(LrSchedule(), -1)
