"""Discrete 2-Wasserstein machinery on the Birkhoff polytope.

A transport plan is a dense n x n nonnegative matrix whose rows and columns
each sum to 1 (the probabilistic coupling is ``entries / n``). Plans are
improved in place by repeatedly carving out an M x M sub-block, solving the
induced linear program under preserved row/column budgets with a primal-dual
interior-point method, and splicing the optimal block back in. Pair costs
are squared Euclidean distances and only the selected M x M block is ever
materialized; the full n x n cost matrix never is.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.optimize import linprog

# relative duality-gap target; comfortably inside the 1e-8 contract
_GAP_TOL = 1e-9
_FEAS_TOL = 1e-9
_MAX_ITER = 60
# budgets below this fraction of the total are treated as empty rows/cols
_ZERO_BUDGET = 1e-12
# cap on the x/s scaling to keep the normal equations solvable near vertices
_D_CAP = 1e16


@dataclass
class TransportPlan:
    entries: np.ndarray

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=float)
        if self.entries.ndim != 2 or self.entries.shape[0] != self.entries.shape[1]:
            raise ValueError("plan must be square")

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    def validate(self, atol: float = 1e-6):
        if np.any(self.entries < -1e-12):
            raise ValueError("plan has negative entries")
        rows = self.entries.sum(axis=1)
        cols = self.entries.sum(axis=0)
        if np.abs(rows - 1.0).max() > atol or np.abs(cols - 1.0).max() > atol:
            raise ValueError("plan marginals deviate from 1")


@dataclass
class SubProblem:
    """Block LP data: minimize sum(costs * block) at fixed marginals."""

    rows: np.ndarray
    cols: np.ndarray
    costs: np.ndarray
    row_budgets: np.ndarray
    col_budgets: np.ndarray

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=int)
        self.cols = np.asarray(self.cols, dtype=int)
        self.costs = np.asarray(self.costs, dtype=float)
        self.row_budgets = np.asarray(self.row_budgets, dtype=float)
        self.col_budgets = np.asarray(self.col_budgets, dtype=float)
        m = len(self.rows)
        if len(set(self.rows.tolist())) != m or len(set(self.cols.tolist())) != len(
            self.cols
        ):
            raise ValueError("row/col index lists must not repeat")
        if self.costs.shape != (m, len(self.cols)):
            raise ValueError("costs shape does not match index lists")
        if not np.all(np.isfinite(self.costs)):
            raise ValueError("costs must be finite")
        if np.any(self.row_budgets < 0) or np.any(self.col_budgets < 0):
            raise ValueError("budgets must be nonnegative")
        gap = abs(self.row_budgets.sum() - self.col_budgets.sum())
        if gap > 1e-10 * max(1.0, self.row_budgets.sum()):
            raise ValueError(
                f"inconsistent budgets: row total {self.row_budgets.sum()!r} "
                f"vs col total {self.col_budgets.sum()!r}"
            )


@dataclass
class SubLpResult:
    block: np.ndarray
    converged: bool
    iterations: int
    duality_gap: float


def init_uniform_plan(n: int) -> TransportPlan:
    if n < 1:
        raise ValueError("n must be >= 1")
    return TransportPlan(np.full((n, n), 1.0 / n))


def pair_cost(u, v) -> float:
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape != v.shape:
        raise ValueError("pair_cost requires equal dimensions")
    d = u - v
    return float(d @ d)


def plan_objective(plan: TransportPlan, F, Y) -> float:
    """sum_ij |F_i - Y_j|^2 gamma_ij without forming the cost matrix."""
    F = np.atleast_2d(np.asarray(F, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    g = plan.entries
    if F.shape[0] != plan.n or Y.shape[0] != plan.n:
        raise ValueError("F/Y row counts must match the plan size")
    rows = g.sum(axis=1)
    cols = g.sum(axis=0)
    cross = float(np.sum(F * (g @ Y)))
    return float(rows @ np.sum(F * F, axis=1) + cols @ np.sum(Y * Y, axis=1) - 2.0 * cross)


def w2_estimate(objective: float, n: int) -> float:
    """Reported distance for a unit-marginal plan: sqrt(objective / n)."""
    return float(np.sqrt(max(objective, 0.0) / n))


def normalized_frobenius(plan: TransportPlan) -> float:
    return float(np.linalg.norm(plan.entries) / np.sqrt(plan.n))


def transport_loss_grad(plan: TransportPlan, F, Y):
    """Loss and its gradient in F: grad_i = 2 (rowsum_i F_i - (gamma Y)_i)."""
    F = np.atleast_2d(np.asarray(F, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    g = plan.entries
    rows = g.sum(axis=1)
    cols = g.sum(axis=0)
    gy = g @ Y
    loss = float(rows @ np.sum(F * F, axis=1) + cols @ np.sum(Y * Y, axis=1)
                 - 2.0 * np.sum(F * gy))
    grad = 2.0 * (rows[:, None] * F - gy)
    return loss, grad


def sample_indices(n: int, M: int, rng: np.random.Generator) -> np.ndarray:
    if M > n:
        raise ValueError(f"cannot sample {M} of {n} indices without replacement")
    return rng.choice(n, size=M, replace=False)


def random_pivot_search(plan: TransportPlan, M: int, rng: np.random.Generator):
    """Greedy alternating row/column argmax walk from a random first row.

    Ties resolve to the smallest index. Returns (rows, cols), each of
    length M without repeats.
    """
    g = plan.entries
    n = plan.n
    if M > n:
        raise ValueError(f"pivot search needs M <= n, got M={M}, n={n}")
    rows = np.empty(M, dtype=int)
    cols = np.empty(M, dtype=int)
    row_used = np.zeros(n, dtype=bool)
    col_used = np.zeros(n, dtype=bool)
    i = int(rng.integers(n))
    j = int(np.argmax(g[i]))
    rows[0], cols[0] = i, j
    row_used[i] = col_used[j] = True
    for k in range(1, M):
        col = np.where(row_used, -np.inf, g[:, cols[k - 1]])
        i = int(np.argmax(col))
        row = np.where(col_used, -np.inf, g[i])
        j = int(np.argmax(row))
        rows[k], cols[k] = i, j
        row_used[i] = col_used[j] = True
    return rows, cols


def make_subproblem(plan: TransportPlan, F, Y, rows, cols) -> SubProblem:
    """Lazy block costs |F_rows_k - Y_cols_l|^2 plus current block budgets."""
    F = np.atleast_2d(np.asarray(F, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    rows = np.asarray(rows, dtype=int)
    cols = np.asarray(cols, dtype=int)
    diff = F[rows][:, None, :] - Y[cols][None, :, :]
    costs = np.sum(diff * diff, axis=-1)
    block = plan.entries[np.ix_(rows, cols)]
    return SubProblem(rows, cols, costs, block.sum(axis=1), block.sum(axis=0))


def _match_marginals(block, row_budgets, col_budgets, passes=3):
    """Least-norm additive projection onto the marginal equalities.

    One linear solve restores the budgets exactly; clamping the (tiny)
    negatives it may introduce re-perturbs them, so project up to three
    times. Total distortion is at the level of the solver's own residual.
    """
    mr, mc = block.shape
    tol = 1e-14 * max(row_budgets.sum(), 1e-300)
    lhs = np.zeros((mr + mc - 1, mr + mc - 1))
    lhs[:mr, :mr] = np.eye(mr) * mc
    lhs[mr:, mr:] = np.eye(mc - 1) * mr
    lhs[:mr, mr:] = 1.0
    lhs[mr:, :mr] = 1.0
    for _ in range(passes):
        rho = np.concatenate(
            [row_budgets - block.sum(axis=1), (col_budgets - block.sum(axis=0))[:-1]]
        )
        if np.abs(rho).max() <= tol:
            break
        lam = np.linalg.solve(lhs, rho)
        block += lam[:mr, None] + np.concatenate([lam[mr:], [0.0]])[None, :]
        np.clip(block, 0.0, None, out=block)
    return block


def _ipm_core(costs, row_budgets, col_budgets, x0):
    """Mehrotra-style predictor-corrector on the transportation block.

    Equality constraints are the row sums and all-but-the-last column sum
    (the dropped one is implied). Works in matrix form throughout; the
    normal-equation matrix has the classic two-diagonal-block structure.
    """
    mr, mc = costs.shape
    nv = mr * mc
    n_eq = mr + mc - 1

    def a_dot(v):  # v in matrix form -> constraint values
        return np.concatenate([v.sum(axis=1), v.sum(axis=0)[:-1]])

    def at_dot(y):  # adjoint of a_dot, in matrix form
        yc = np.concatenate([y[mr:], [0.0]])
        return y[:mr, None] + yc[None, :]

    b = np.concatenate([row_budgets, col_budgets[:-1]])
    c = costs
    x = x0.copy()

    # dual start: least-squares multipliers, slacks shifted positive
    lhs = np.zeros((n_eq, n_eq))
    lhs[:mr, :mr] = np.eye(mr) * mc
    lhs[mr:, mr:] = np.eye(mc - 1) * mr
    lhs[:mr, mr:] = 1.0
    lhs[mr:, :mr] = 1.0
    y = np.linalg.solve(lhs, a_dot(c))
    s = c - at_dot(y)
    shift = max(-1.5 * s.min(), 0.0)
    s = s + shift
    s += 0.5 * max(float(np.sum(x * s)), 1e-10) / max(float(s.sum()), 1e-10)
    if s.min() <= 0:
        s += 1e-2 * (1.0 + float(np.abs(c).max()))

    cost_scale = 1.0 + float(np.abs(c).max())
    b_scale = 1.0 + float(np.abs(b).max())
    best = (np.inf, x.copy())
    converged = False
    gap = np.inf
    it = 0
    stalled = 0
    for it in range(1, _MAX_ITER + 1):
        if not (
            np.all(np.isfinite(x)) and np.all(np.isfinite(y)) and np.all(np.isfinite(s))
        ):
            break
        r_p = b - a_dot(x)
        r_d = c - at_dot(y) - s
        gap = float(np.sum(x * s))
        obj = float(np.sum(c * x))
        feas = np.abs(r_p).max() <= _FEAS_TOL * b_scale
        if feas and obj < best[0]:
            best = (obj, x.copy())
        if (
            gap <= _GAP_TOL * (1.0 + abs(obj))
            and feas
            and np.abs(r_d).max() <= 1e-7 * cost_scale
        ):
            converged = True
            break

        with np.errstate(over="ignore", divide="ignore"):
            d = x / np.maximum(s, 1e-300)
        np.clip(d, 0.0, _D_CAP, out=d)
        mu = gap / nv

        m11 = d.sum(axis=1)
        m22 = d.sum(axis=0)[:-1]
        m12 = d[:, :-1]
        normal = np.zeros((n_eq, n_eq))
        normal[np.arange(mr), np.arange(mr)] = m11
        normal[np.arange(mr, n_eq), np.arange(mr, n_eq)] = m22
        normal[:mr, mr:] = m12
        normal[mr:, :mr] = m12.T
        reg = 1e-13 * max(1.0, m11.max())
        normal[np.diag_indices(n_eq)] += reg
        try:
            fac = cho_factor(normal, check_finite=False)
            solve = lambda rhs: cho_solve(fac, rhs, check_finite=False)
        except LinAlgError:
            normal[np.diag_indices(n_eq)] += 1e-8 * max(1.0, m11.max())
            solve = lambda rhs: np.linalg.solve(normal, rhs)

        def newton(r_c):
            with np.errstate(all="ignore"):
                safe_s = np.maximum(s, 1e-300)
                rhs = r_p + a_dot(d * r_d - r_c / safe_s)
                if not np.all(np.isfinite(rhs)):
                    return None
                dy = solve(rhs)
                dx = d * (at_dot(dy) - r_d) + r_c / safe_s
                ds = (r_c - s * dx) / np.maximum(x, 1e-300)
            if not (
                np.all(np.isfinite(dx))
                and np.all(np.isfinite(dy))
                and np.all(np.isfinite(ds))
            ):
                return None
            return dx, dy, ds

        def max_step(v, dv):
            neg = dv < 0
            if not np.any(neg):
                return 1.0
            return min(1.0, float(np.min(-v[neg] / dv[neg])))

        # predictor
        predictor = newton(-x * s)
        if predictor is None:
            break
        dx_a, dy_a, ds_a = predictor
        ap = max_step(x, dx_a)
        ad = max_step(s, ds_a)
        mu_aff = float(np.sum((x + ap * dx_a) * (s + ad * ds_a))) / nv
        sigma = min(1.0, max((mu_aff / mu) ** 3, 1e-10)) if mu > 0 else 0.0

        # corrector
        r_c = sigma * mu - x * s - dx_a * ds_a
        corrector = newton(r_c)
        if corrector is None:
            break
        dx, dy, ds = corrector
        ap = 0.9995 * max_step(x, dx)
        ad = 0.9995 * max_step(s, ds)
        x = x + ap * dx
        y = y + ad * dy
        s = s + ad * ds
        if max(ap, ad) < 1e-3:
            stalled += 1
            if stalled >= 2:
                break
        else:
            stalled = 0

    if not converged:
        obj = float(np.sum(c * x))
        if np.abs(b - a_dot(x)).max() <= _FEAS_TOL * b_scale and obj < best[0]:
            best = (obj, x.copy())
        x = best[1] if np.isfinite(best[0]) else x
    return x, converged, it, gap


def sub_lp_solve(sp: SubProblem, start) -> SubLpResult:
    """Minimize the block objective at preserved marginals.

    ``start`` is the current (feasible) block; the interior-point iteration
    begins from it blended with the uniform feasible block. Rows/columns
    with (numerically) zero budget are fixed at zero and removed before
    solving. The returned block never has a larger objective than ``start``.
    """
    start = np.asarray(start, dtype=float)
    m = len(sp.rows)
    if start.shape != (m, len(sp.cols)):
        raise ValueError("start block shape mismatch")
    total = sp.row_budgets.sum()
    start_obj = float(np.sum(sp.costs * start))

    block = np.zeros_like(start)
    if total <= _ZERO_BUDGET:
        return SubLpResult(block, True, 0, 0.0)

    active_r = np.where(sp.row_budgets > _ZERO_BUDGET * total)[0]
    active_c = np.where(sp.col_budgets > _ZERO_BUDGET * total)[0]
    r = sp.row_budgets[active_r]
    c = sp.col_budgets[active_c]
    costs = sp.costs[np.ix_(active_r, active_c)]

    if len(active_r) == 1:
        block[np.ix_(active_r, active_c)] = c[None, :]
        return SubLpResult(block, True, 0, 0.0)
    if len(active_c) == 1:
        block[np.ix_(active_r, active_c)] = r[:, None]
        return SubLpResult(block, True, 0, 0.0)

    # normalize to unit total mass for conditioning; undo on the way out
    scale = c.sum()
    r = r / scale
    c = c / scale
    uniform = np.outer(r, c) / c.sum()
    x0 = 0.9 * np.maximum(start[np.ix_(active_r, active_c)], 0.0) / scale + 0.1 * uniform
    x, converged, iters, gap = _ipm_core(costs, r, c, x0)
    np.clip(x, 0.0, None, out=x)
    x = _match_marginals(x, r, c) * scale
    r = r * scale
    c = c * scale
    block[np.ix_(active_r, active_c)] = x

    # fall back to the feasible start if the block is infeasible (solver
    # bail-out on a degenerate instance) or fails to improve the objective
    row_err = np.abs(block.sum(axis=1) - sp.row_budgets).max()
    col_err = np.abs(block.sum(axis=0) - sp.col_budgets).max()
    infeasible = max(row_err, col_err) > 5e-9
    if infeasible or float(np.sum(sp.costs * block)) > start_obj:
        return SubLpResult(start.copy(), converged and not infeasible, iters, gap)
    return SubLpResult(block, converged, iters, gap)


def splice(plan: TransportPlan, rows, cols, block) -> TransportPlan:
    """Overwrite the (rows x cols) block in place, marginals preserved.

    The block must reproduce the current block's row and column sums to
    1e-8; tiny negative entries (interior-point roundoff) are clamped to 0.
    """
    rows = np.asarray(rows, dtype=int)
    cols = np.asarray(cols, dtype=int)
    block = np.asarray(block, dtype=float)
    current = plan.entries[np.ix_(rows, cols)]
    row_gap = np.abs(block.sum(axis=1) - current.sum(axis=1)).max()
    col_gap = np.abs(block.sum(axis=0) - current.sum(axis=0)).max()
    if max(row_gap, col_gap) > 1e-8:
        raise ValueError(
            f"splice rejected: budget violation {max(row_gap, col_gap):.3e} > 1e-8"
        )
    if block.min() < -1e-12:
        raise ValueError("splice rejected: negative block entries")
    cleaned = np.where((block < 0.0), 0.0, block)
    plan.entries[np.ix_(rows, cols)] = cleaned
    return plan


def refine_round(
    plan: TransportPlan,
    F,
    Y,
    M: int,
    rng: np.random.Generator,
    pivot_fraction: float = 0.5,
) -> SubLpResult:
    """One select/solve/splice round; mixes pivot search with uniform picks."""
    if rng.random() < pivot_fraction:
        rows, cols = random_pivot_search(plan, M, rng)
    else:
        rows = sample_indices(plan.n, M, rng)
        cols = sample_indices(plan.n, M, rng)
    sp = make_subproblem(plan, F, Y, rows, cols)
    start = plan.entries[np.ix_(rows, cols)].copy()
    result = sub_lp_solve(sp, start)
    splice(plan, rows, cols, result.block)
    return result


def exact_plan_oracle(costs, row_budgets, col_budgets):
    """Exact small-instance LP optimum (simplex), for testing the IP path."""
    costs = np.asarray(costs, dtype=float)
    n = costs.shape[0]
    if costs.shape != (n, n) or n > 8:
        raise ValueError("oracle accepts square cost matrices up to n=8")
    row_budgets = np.asarray(row_budgets, dtype=float)
    col_budgets = np.asarray(col_budgets, dtype=float)
    a_eq = np.zeros((2 * n, n * n))
    for i in range(n):
        a_eq[i, i * n : (i + 1) * n] = 1.0
        a_eq[n + i, i::n] = 1.0
    b_eq = np.concatenate([row_budgets, col_budgets])
    res = linprog(
        costs.ravel(), A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs"
    )
    if not res.success:
        raise RuntimeError(f"oracle LP failed: {res.message}")
    return float(res.fun), res.x.reshape(n, n)
