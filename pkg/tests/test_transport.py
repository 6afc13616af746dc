import itertools

import numpy as np
import pytest

from particlemap.transport import (
    SubProblem,
    TransportPlan,
    exact_plan_oracle,
    init_uniform_plan,
    make_subproblem,
    normalized_frobenius,
    pair_cost,
    plan_objective,
    random_pivot_search,
    refine_round,
    sample_indices,
    splice,
    sub_lp_solve,
    transport_loss_grad,
    w2_estimate,
)


def brute_objective(plan, F, Y):
    total = 0.0
    for i in range(plan.n):
        for j in range(plan.n):
            total += pair_cost(F[i], Y[j]) * plan.entries[i, j]
    return total


def random_subproblem(m, rng):
    r = rng.random(m) + 0.1
    c = rng.random(m) + 0.1
    c *= r.sum() / c.sum()
    costs = rng.random((m, m))
    return SubProblem(np.arange(m), np.arange(m), costs, r, c)


def uniform_start(sp):
    return np.outer(sp.row_budgets, sp.col_budgets) / sp.row_budgets.sum()


# -- plan basics ---------------------------------------------------------


def test_uniform_plan():
    plan = init_uniform_plan(4)
    assert np.all(plan.entries == 0.25)
    np.testing.assert_array_equal(plan.entries.sum(axis=1), np.ones(4))
    assert normalized_frobenius(plan) == pytest.approx(0.5, abs=1e-15)


def test_pair_cost():
    assert pair_cost([0, 0], [0, 0]) == 0.0
    assert pair_cost([1, 0], [0, 1]) == 2.0
    assert pair_cost([3.0], [-1.0]) == 16.0
    with pytest.raises(ValueError):
        pair_cost([1, 2], [1, 2, 3])


def test_plan_objective_identity_zero():
    rng = np.random.default_rng(0)
    F = rng.random((5, 2))
    plan = TransportPlan(np.eye(5))
    assert plan_objective(plan, F, F) == pytest.approx(0.0, abs=1e-14)


def test_plan_objective_uniform_two_points():
    plan = init_uniform_plan(2)
    F = np.array([[0.0], [1.0]])
    assert plan_objective(plan, F, F) == pytest.approx(1.0, abs=1e-14)


def test_plan_objective_matches_brute_force():
    rng = np.random.default_rng(1)
    entries = rng.random((5, 5))
    entries /= entries.sum(axis=1, keepdims=True)  # row sums 1 (cols free)
    plan = TransportPlan(entries)
    F = rng.random((5, 3))
    Y = rng.random((5, 3))
    assert plan_objective(plan, F, Y) == pytest.approx(
        brute_objective(plan, F, Y), rel=1e-12
    )


def test_normalized_frobenius_cases():
    assert normalized_frobenius(TransportPlan(np.eye(6))) == pytest.approx(1.0)
    half = TransportPlan(np.full((2, 2), 0.5))
    assert normalized_frobenius(half) == pytest.approx(1.0 / np.sqrt(2.0))


def test_w2_estimate_convention():
    assert w2_estimate(8.0, 2) == pytest.approx(2.0)


# -- index selection -----------------------------------------------------


def test_pivot_search_on_permutation():
    rng = np.random.default_rng(3)
    perm = rng.permutation(6)
    entries = np.zeros((6, 6))
    entries[np.arange(6), perm] = 1.0
    plan = TransportPlan(entries)
    rows, cols = random_pivot_search(plan, 3, np.random.default_rng(4))
    assert np.all(plan.entries[rows, cols] == 1.0)


def test_pivot_search_uniform_tiebreak():
    plan = init_uniform_plan(6)
    rng = np.random.default_rng(8)
    probe = np.random.default_rng(8)
    i1 = int(probe.integers(6))
    rows, cols = random_pivot_search(plan, 3, rng)
    # all ties: first column argmax is 0, then smallest unused indices
    expected_rows = [i1] + [i for i in range(6) if i != i1][:2]
    assert rows.tolist() == expected_rows
    assert cols.tolist() == [0, 1, 2]


def test_pivot_search_diagonal_trace():
    entries = np.full((5, 5), 0.02)
    np.fill_diagonal(entries, 0.92)
    plan = TransportPlan(entries)
    seed = next(
        s for s in itertools.count() if np.random.default_rng(s).integers(5) == 0
    )
    rows, cols = random_pivot_search(plan, 5, np.random.default_rng(seed))
    assert rows.tolist() == [0, 1, 2, 3, 4]
    assert cols.tolist() == [0, 1, 2, 3, 4]


def test_pivot_search_rejects_oversize():
    with pytest.raises(ValueError):
        random_pivot_search(init_uniform_plan(3), 4, np.random.default_rng(0))


def test_sample_indices_full_permutation():
    idx = sample_indices(7, 7, np.random.default_rng(5))
    assert sorted(idx.tolist()) == list(range(7))


def test_sample_indices_deterministic():
    a = sample_indices(10, 4, np.random.default_rng(11))
    b = sample_indices(10, 4, np.random.default_rng(11))
    assert np.array_equal(a, b)


def test_sample_indices_inclusion_frequency():
    rng = np.random.default_rng(12)
    hits = sum(0 in sample_indices(10, 3, rng) for _ in range(10_000))
    assert abs(hits / 10_000 - 0.3) < 0.02


# -- sub-LP solver -------------------------------------------------------


def test_sub_lp_identity_optimum():
    sp = SubProblem(
        [0, 1], [0, 1], np.array([[0.0, 1.0], [1.0, 0.0]]), [1.0, 1.0], [1.0, 1.0]
    )
    res = sub_lp_solve(sp, uniform_start(sp))
    np.testing.assert_allclose(res.block, np.eye(2), atol=1e-7)
    assert float(np.sum(sp.costs * res.block)) == pytest.approx(0.0, abs=1e-7)
    assert res.converged


def test_sub_lp_constant_costs():
    rng = np.random.default_rng(21)
    sp = random_subproblem(4, rng)
    sp.costs[:] = 0.7
    res = sub_lp_solve(sp, uniform_start(sp))
    assert float(np.sum(sp.costs * res.block)) == pytest.approx(
        0.7 * sp.row_budgets.sum(), rel=1e-9
    )


def test_sub_lp_matches_oracle_100_random():
    rng = np.random.default_rng(2024)
    for trial in range(100):
        m = int(rng.integers(2, 7))
        sp = random_subproblem(m, rng)
        res = sub_lp_solve(sp, uniform_start(sp))
        ref_obj, _ = exact_plan_oracle(sp.costs, sp.row_budgets, sp.col_budgets)
        got = float(np.sum(sp.costs * res.block))
        assert abs(got - ref_obj) <= 1e-6, f"trial {trial}: {got} vs {ref_obj}"
        assert np.abs(res.block.sum(axis=1) - sp.row_budgets).max() <= 1e-8
        assert np.abs(res.block.sum(axis=0) - sp.col_budgets).max() <= 1e-8
        assert res.block.min() >= 0.0


def test_sub_lp_zero_budget_rows():
    costs = np.array([[1.0, 2.0, 0.5], [3.0, 0.1, 4.0], [0.3, 0.2, 0.9]])
    r = np.array([0.4, 0.0, 0.6])
    c = np.array([0.5, 0.5, 0.0])
    start = np.array([[0.2, 0.2, 0.0], [0.0, 0.0, 0.0], [0.3, 0.3, 0.0]])
    sp = SubProblem([0, 1, 2], [0, 1, 2], costs, r, c)
    res = sub_lp_solve(sp, start)
    assert np.all(res.block[1] == 0.0)
    assert np.all(res.block[:, 2] == 0.0)
    ref_obj, _ = exact_plan_oracle(costs, r, c)
    assert float(np.sum(costs * res.block)) == pytest.approx(ref_obj, abs=1e-8)


def test_sub_lp_inconsistent_budgets_rejected():
    with pytest.raises(ValueError, match="inconsistent"):
        SubProblem([0, 1], [0, 1], np.zeros((2, 2)), [1.0, 1.0], [1.0, 1.5])


def test_sub_lp_never_worse_than_start():
    # start is already optimal: solver must not regress
    sp = SubProblem(
        [0, 1], [0, 1], np.array([[0.0, 1.0], [1.0, 0.0]]), [1.0, 1.0], [1.0, 1.0]
    )
    res = sub_lp_solve(sp, np.eye(2))
    assert float(np.sum(sp.costs * res.block)) <= 1e-12


# -- splice --------------------------------------------------------------


def test_splice_noop():
    plan = init_uniform_plan(5)
    before = plan.entries.copy()
    rows, cols = np.array([0, 2]), np.array([1, 3])
    splice(plan, rows, cols, plan.entries[np.ix_(rows, cols)].copy())
    np.testing.assert_array_equal(plan.entries, before)


def test_splice_preserves_marginals():
    rng = np.random.default_rng(31)
    plan = init_uniform_plan(8)
    F = rng.random((8, 2))
    Y = rng.random((8, 2))
    for _ in range(30):
        refine_round(plan, F, Y, 4, rng)
    assert np.abs(plan.entries.sum(axis=1) - 1.0).max() <= 1e-9
    assert np.abs(plan.entries.sum(axis=0) - 1.0).max() <= 1e-9
    assert plan.entries.min() >= 0.0


def test_splice_rejects_budget_violation():
    plan = init_uniform_plan(4)
    rows, cols = np.array([0, 1]), np.array([0, 1])
    bad = plan.entries[np.ix_(rows, cols)] + 0.01
    with pytest.raises(ValueError, match="budget violation"):
        splice(plan, rows, cols, bad)


def test_objective_monotone_under_refinement():
    rng = np.random.default_rng(77)
    n = 30
    F = rng.random((n, 2))
    Y = rng.random((n, 2))
    plan = init_uniform_plan(n)
    obj = plan_objective(plan, F, Y)
    for step in range(100):
        refine_round(plan, F, Y, 6, rng)
        new_obj = plan_objective(plan, F, Y)
        assert new_obj <= obj + 1e-9, f"step {step}"
        obj = new_obj
    assert 1.0 / np.sqrt(n) - 1e-12 <= normalized_frobenius(plan) <= 1.0 + 1e-12


# -- gradients -----------------------------------------------------------


def test_loss_grad_zero_at_barycenters():
    rng = np.random.default_rng(41)
    plan = init_uniform_plan(6)
    Y = rng.random((6, 2))
    F = plan.entries @ Y  # row-sum-1 barycenters
    _, grad = transport_loss_grad(plan, F, Y)
    np.testing.assert_allclose(grad, 0.0, atol=1e-12)


def test_loss_grad_identity_plan():
    rng = np.random.default_rng(42)
    F = rng.random((5, 3))
    Y = rng.random((5, 3))
    loss, grad = transport_loss_grad(TransportPlan(np.eye(5)), F, Y)
    np.testing.assert_allclose(grad, 2.0 * (F - Y), rtol=1e-12)
    assert loss == pytest.approx(np.sum((F - Y) ** 2), rel=1e-12)


def test_loss_grad_matches_finite_differences():
    rng = np.random.default_rng(43)
    n = 6
    entries = rng.random((n, n))
    entries /= entries.sum(axis=1, keepdims=True)
    plan = TransportPlan(entries)
    F = rng.random((n, 2))
    Y = rng.random((n, 2))
    _, grad = transport_loss_grad(plan, F, Y)
    step = 1e-6
    for i in range(n):
        for k in range(2):
            fp = F.copy()
            fp[i, k] += step
            fm = F.copy()
            fm[i, k] -= step
            num = (plan_objective(plan, fp, Y) - plan_objective(plan, fm, Y)) / (
                2 * step
            )
            assert abs(grad[i, k] - num) / (abs(grad[i, k]) + 1e-5) <= 1e-5


# -- exact oracle --------------------------------------------------------


def test_oracle_identical_points():
    rng = np.random.default_rng(51)
    pts = rng.random((5, 2))
    costs = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=-1)
    obj, plan = exact_plan_oracle(costs, np.ones(5), np.ones(5))
    assert obj == pytest.approx(0.0, abs=1e-9)
    np.testing.assert_allclose(plan, np.eye(5), atol=1e-8)


def test_oracle_sorted_1d_monotone():
    rng = np.random.default_rng(52)
    x = np.sort(rng.random(6))
    y = np.sort(rng.random(6) + 0.5)
    costs = (x[:, None] - y[None, :]) ** 2
    obj, _ = exact_plan_oracle(costs, np.ones(6), np.ones(6))
    assert obj == pytest.approx(np.sum((x - y) ** 2), rel=1e-9)


def test_oracle_matches_permutation_brute_force():
    rng = np.random.default_rng(53)
    costs = rng.random((4, 4))
    obj, _ = exact_plan_oracle(costs, np.ones(4), np.ones(4))
    best = min(
        sum(costs[i, p[i]] for i in range(4))
        for p in itertools.permutations(range(4))
    )
    assert obj == pytest.approx(best, rel=1e-9)


def test_oracle_rejects_large_instances():
    with pytest.raises(ValueError):
        exact_plan_oracle(np.zeros((9, 9)), np.ones(9), np.ones(9))


def test_full_block_refinement_reaches_oracle():
    # M = n sub-LP from the uniform plan must land on the global optimum
    rng = np.random.default_rng(54)
    for n in (3, 5, 6):
        F = rng.random((n, 2))
        Y = rng.random((n, 2))
        plan = init_uniform_plan(n)
        rows = cols = np.arange(n)
        sp = make_subproblem(plan, F, Y, rows, cols)
        res = sub_lp_solve(sp, plan.entries.copy())
        splice(plan, rows, cols, res.block)
        ref_obj, _ = exact_plan_oracle(sp.costs, np.ones(n), np.ones(n))
        assert plan_objective(plan, F, Y) == pytest.approx(ref_obj, abs=1e-6)
