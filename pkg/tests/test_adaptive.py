"""Tests for the adaptive-interval estimators, interval choice and engine."""

import math

import numpy as np
import pytest

from fogml.config import SMOOTHING_FACTOR
from fogml.core.exceptions import DimensionMismatchError, InvalidArgumentError
from fogml.netsim import BudgetState, CostBudget, Exhausted
from fogml.protocols.adaptive import (
    AdaptiveEstimates,
    choose_interval,
    divergence_gap,
    estimate_divergence,
    estimate_lipschitz,
    estimate_smoothness,
    run_adaptive,
)
from fogml.sim.settings import ExperimentConfig
from fogml.sim.simulator import Simulator


def _state(total, consumed=0.0):
    budget = CostBudget(c_comp=1.0, c_comm=10.0, total=total)
    return BudgetState(budget=budget, consumed=consumed)


def test_divergence_of_opposite_gradients():
    assert estimate_divergence([np.array([1.0]), np.array([-1.0])], [1, 1]) == 1.0


def test_divergence_of_identical_gradients_is_zero():
    g = np.array([0.3, -2.0])
    assert estimate_divergence([g, g, g], [1, 2, 3]) == 0.0


def test_divergence_validates_input():
    with pytest.raises(InvalidArgumentError):
        estimate_divergence([np.zeros(2)], [1])
    with pytest.raises(DimensionMismatchError):
        estimate_divergence([np.zeros(2), np.zeros(3)], [1, 1])
    with pytest.raises(DimensionMismatchError):
        estimate_divergence([np.zeros(2), np.zeros(2)], [1])


@pytest.mark.parametrize("a", [0.5, 2.0, 7.0])
def test_smoothness_of_quadratic(a, rng):
    # F(w) = a/2 ||w||^2 has gradient a * w
    w0, w1 = rng.standard_normal(5), rng.standard_normal(5)
    assert estimate_smoothness(w0, w1, a * w0, a * w1) == pytest.approx(a)


def test_smoothness_blends_previous_estimate():
    w0, w1 = np.zeros(1), np.ones(1)
    raw = estimate_smoothness(w0, w1, np.zeros(1), np.array([4.0]))
    blended = estimate_smoothness(w0, w1, np.zeros(1), np.array([4.0]), previous=2.0)
    assert raw == 4.0
    expected = SMOOTHING_FACTOR * 2.0 + (1 - SMOOTHING_FACTOR) * 4.0
    assert blended == pytest.approx(expected)


def test_zero_step_keeps_previous():
    w = np.ones(3)
    assert estimate_smoothness(w, w, w, 2 * w) == 0.0
    assert estimate_smoothness(w, w, w, 2 * w, previous=1.5) == 1.5
    assert estimate_lipschitz(w, w, 1.0, 2.0, previous=0.7) == 0.7


def test_lipschitz_secant():
    assert estimate_lipschitz(np.zeros(2), np.array([3.0, 4.0]), 1.0, 3.5) == 0.5


def test_divergence_gap_vanishes_at_one():
    assert divergence_gap(1, 2.0, 3.0, 0.1) == 0.0
    assert divergence_gap(5, 0.0, 3.0, 0.1) == 0.0
    assert divergence_gap(5, 2.0, 0.0, 0.1) == 0.0


def test_divergence_gap_closed_form():
    delta, beta, lr = 1.5, 2.0, 0.05
    for tau in range(1, 12):
        closed = delta / beta * ((lr * beta + 1) ** tau - 1) - lr * delta * tau
        assert divergence_gap(tau, delta, beta, lr) == pytest.approx(closed, abs=1e-12)


def test_divergence_gap_is_non_decreasing():
    gaps = [divergence_gap(t, 1.0, 5.0, 0.1) for t in range(1, 60)]
    assert all(b >= a for a, b in zip(gaps, gaps[1:]))


def test_zero_divergence_picks_longest_interval():
    est = AdaptiveEstimates(
        delta_hat=0.0, beta_hat=1.0, rho_hat=1.0, c_comp=1.0, c_comm=10.0
    )
    decision = choose_interval(est, _state(1000.0), lr=0.1, tau_max=25, num_devices=2)
    assert decision.tau_star == 25
    assert set(decision.candidate_scores) == set(range(1, 26))


def test_ties_resolve_to_smallest_interval():
    est = AdaptiveEstimates(
        delta_hat=0.0, beta_hat=0.0, rho_hat=0.0, c_comp=1.0, c_comm=0.0
    )
    decision = choose_interval(est, _state(64.0), lr=0.1, tau_max=2)
    assert decision.candidate_scores[1] == decision.candidate_scores[2]
    assert decision.tau_star == 1


def test_large_divergence_prefers_frequent_communication():
    est = AdaptiveEstimates(
        delta_hat=50.0, beta_hat=10.0, rho_hat=10.0, c_comp=1.0, c_comm=10.0
    )
    decision = choose_interval(est, _state(1000.0), lr=0.1, tau_max=20)
    assert decision.tau_star < 5


def test_spent_budget_is_exhausted():
    est = AdaptiveEstimates(c_comp=1.0, c_comm=10.0)
    out = choose_interval(est, _state(50.0, consumed=50.0), lr=0.1, tau_max=5)
    assert isinstance(out, Exhausted)


def test_unlimited_budget_orders_ties_by_cost_per_iteration():
    est = AdaptiveEstimates(c_comp=1.0, c_comm=10.0)
    state = BudgetState(budget=CostBudget(c_comp=1.0, c_comm=10.0, total=math.inf))
    assert choose_interval(est, state, lr=0.1, tau_max=8).tau_star == 8


def test_adaptive_needs_budget_or_round_cap(make_federation):
    with pytest.raises(InvalidArgumentError):
        run_adaptive(make_federation(), lr=0.1, batch_size=8)


def test_adaptive_respects_budget(make_federation):
    budget = CostBudget(c_comp=1.0, c_comm=10.0, total=300.0)
    fed = make_federation(num_devices=3, budget=budget)
    outcome = run_adaptive(fed, lr=0.1, batch_size=8, tau_max=20, initial_tau=2)
    frame = fed.metrics_frame()
    assert outcome.taus[:2] == [2, 2]
    assert frame["tau"].tolist() == outcome.taus
    assert frame["cum_cost"].iloc[-1] <= 300.0
    assert all(1 <= t <= 20 for t in outcome.taus)
    assert len(fed.ledger.select(kind="gradient")) == 3 * len(outcome.taus)
    # whatever is left cannot pay for one more round at tau = 1
    assert fed.budget.remaining < 3 * 1.0 + 10.0


def test_adaptive_round_cap_without_budget(make_federation):
    fed = make_federation(num_devices=2)
    outcome = run_adaptive(fed, lr=0.1, batch_size=8, tau_max=10, max_rounds=4)
    assert len(outcome.taus) == 4
    assert len(outcome.estimates) == 4
    assert outcome.estimates[0].beta_hat == 0.0


@pytest.mark.slow
def test_adaptive_interval_is_close_to_the_best_fixed_one():
    base = {
        "dataset": {
            "kind": "blobs",
            "num_labels": 4,
            "input_dim": 8,
            "n_per_label": 300,
            "spread": 1.5,
            "test_per_label": 100,
        },
        "partition": {"kind": "iid", "num_devices": 5, "per_label": 40},
        "training": {"rounds": 10_000, "tau": 1, "lr": 0.05, "batch_size": 16},
        "budget": {"c_comp": 1.0, "c_comm": 10.0, "total": 1153.0},
        "adaptive": {"tau_max": 100},
        "master_seed": 3,
    }
    fixed = []
    for tau in (1, 2, 5, 10, 20, 50, 100):
        config = ExperimentConfig.from_dict({**base, "protocol": "fedavg"})
        result = Simulator(config.with_override("training.tau", tau)).run()
        assert result.final["cum_cost"] <= 1153.0
        fixed.append(result.final["test_acc"])
    config = ExperimentConfig.from_dict({**base, "protocol": "adaptive"})
    adaptive = Simulator(config).run()
    assert adaptive.final["cum_cost"] <= 1153.0
    assert adaptive.final["test_acc"] >= 0.95 * max(fixed)
