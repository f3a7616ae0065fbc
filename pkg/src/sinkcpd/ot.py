"""Entropic optimal transport with a learnable linear ground metric.

The ground cost between samples x and y is the squared Euclidean norm of
``transform @ (x - y)``, so a learned r-by-d transform induces a (possibly
low-rank) Mahalanobis cost. Regularized transport problems are solved by a
log-domain Sinkhorn fixed point, which stays stable down to very small
regularization strengths. Debiased divergences and envelope gradients with
respect to the transform are built on top of the solver.

Sign convention: the regularized objective is ``<C, P> - gamma * H(P)`` with
``H(P) = -sum_ij P_ij (log P_ij - 1)``. With this (convex) convention the
Sinkhorn plan is the minimizer, the zero-cost problem selects the product
coupling, and the divergence of a distribution with itself vanishes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import InputError, NumericalError

__all__ = [
    "PointCloud",
    "GroundMetric",
    "TransportPlan",
    "DualPotentials",
    "SinkhornResult",
    "SolverConfig",
    "BatchSolveResult",
    "cost_matrix",
    "sinkhorn_solve",
    "sinkhorn_solve_batch",
    "sinkhorn_distance",
    "sinkhorn_divergence",
    "sinkhorn_divergence_batch",
    "transport_gradient",
    "divergence_gradient",
    "plan_entropy",
]

GRAD_MODES = ("cross_only", "full_debiased")


def _as_points(points):
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    return pts


@dataclass(frozen=True)
class PointCloud:
    """Weighted samples in R^d.

    ``points`` is an n-by-d matrix (one sample per row) and ``weights`` is a
    nonnegative length-n vector summing to 1.
    """

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = _as_points(self.points)
        w = np.asarray(self.weights, dtype=float)
        if pts.size == 0:
            raise InputError("point cloud must contain at least one sample")
        if not np.isfinite(pts).all():
            raise InputError("point cloud contains non-finite coordinates")
        if w.shape != (pts.shape[0],):
            raise InputError(
                f"weights have shape {w.shape}, expected ({pts.shape[0]},)"
            )
        if not np.isfinite(w).all() or (w < 0).any():
            raise InputError("weights must be finite and nonnegative")
        if abs(w.sum() - 1.0) > 1e-9:
            raise InputError(f"weights sum to {w.sum()!r}, expected 1")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, points):
        """Cloud with uniform weights 1/n over the given samples."""
        pts = _as_points(points)
        return cls(pts, np.full(pts.shape[0], 1.0 / pts.shape[0]))

    @property
    def n(self):
        return self.points.shape[0]

    @property
    def dim(self):
        return self.points.shape[1]


@dataclass(frozen=True)
class GroundMetric:
    """Linear transform plus entropic regularization strength.

    ``transform`` has shape (r, d); with the identity transform the induced
    cost is plain squared Euclidean distance.
    """

    transform: np.ndarray
    gamma: float

    def __post_init__(self):
        mat = np.asarray(self.transform, dtype=float)
        if mat.ndim != 2 or mat.shape[0] < 1 or mat.shape[1] < 1:
            raise InputError("transform must be a nonempty r x d matrix")
        if not np.isfinite(mat).all():
            raise InputError("transform contains non-finite entries")
        gamma = float(self.gamma)
        if not np.isfinite(gamma) or gamma <= 0:
            raise InputError(f"gamma must be positive and finite, got {gamma!r}")
        object.__setattr__(self, "transform", mat)
        object.__setattr__(self, "gamma", gamma)

    @classmethod
    def identity(cls, dim, gamma):
        return cls(np.eye(dim), gamma)

    @property
    def projection_dim(self):
        return self.transform.shape[0]

    @property
    def dim(self):
        return self.transform.shape[1]


@dataclass(frozen=True)
class TransportPlan:
    """Coupling matrix with its prescribed marginals."""

    plan: np.ndarray
    row_marginal: np.ndarray
    col_marginal: np.ndarray

    def __post_init__(self):
        plan = np.asarray(self.plan, dtype=float)
        a = np.asarray(self.row_marginal, dtype=float)
        b = np.asarray(self.col_marginal, dtype=float)
        if plan.ndim != 2 or plan.shape != (a.shape[0], b.shape[0]):
            raise InputError("plan shape does not match the marginals")
        if (plan < 0).any():
            raise InputError("transport plan has negative entries")
        object.__setattr__(self, "plan", plan)
        object.__setattr__(self, "row_marginal", a)
        object.__setattr__(self, "col_marginal", b)

    def marginal_residual(self):
        """Largest absolute deviation of the plan's marginals."""
        row = np.abs(self.plan.sum(axis=1) - self.row_marginal).max()
        col = np.abs(self.plan.sum(axis=0) - self.col_marginal).max()
        return max(row, col)


@dataclass(frozen=True)
class DualPotentials:
    """Dual variables; the plan factorizes as exp((f_i + g_j - C_ij) / gamma)."""

    f: np.ndarray
    g: np.ndarray


@dataclass(frozen=True)
class SinkhornResult:
    """Solution of one regularized transport problem.

    ``value`` is the regularized objective at the returned plan and
    ``transport_cost`` the plain inner product with the cost matrix.
    """

    value: float
    transport_cost: float
    plan: TransportPlan
    potentials: DualPotentials
    iterations: int
    converged: bool


@dataclass(frozen=True)
class SolverConfig:
    """Stopping rule: L-infinity marginal residual below ``tol``."""

    tol: float = 1e-6
    max_iter: int = 1000

    def __post_init__(self):
        if not (self.tol > 0):
            raise InputError(f"tol must be positive, got {self.tol!r}")
        if int(self.max_iter) < 1:
            raise InputError(f"max_iter must be >= 1, got {self.max_iter!r}")
        object.__setattr__(self, "tol", float(self.tol))
        object.__setattr__(self, "max_iter", int(self.max_iter))


@dataclass(frozen=True)
class BatchSolveResult:
    """Stacked solutions for a batch of same-shape transport problems."""

    values: np.ndarray
    transport_costs: np.ndarray
    plans: np.ndarray
    f: np.ndarray
    g: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray


def _pairwise_cost(x, y, transform):
    # Project first, then take squared norms of pairwise differences. The
    # direct difference keeps the identity-transform case bit-identical to
    # plain pairwise squared Euclidean distances.
    px = x @ transform.T
    py = y @ transform.T
    diff = px[:, None, :] - py[None, :, :]
    return (diff * diff).sum(axis=-1)


def cost_matrix(x: PointCloud, y: PointCloud, metric: GroundMetric):
    """Pairwise squared norms of transform-projected differences."""
    if x.dim != y.dim:
        raise InputError(f"point dimensions differ: {x.dim} vs {y.dim}")
    if metric.dim != x.dim:
        raise InputError(
            f"metric expects dimension {metric.dim}, point clouds have {x.dim}"
        )
    return _pairwise_cost(x.points, y.points, metric.transform)


def _check_weights(w, n, name):
    w = np.asarray(w, dtype=float)
    if w.shape != (n,):
        raise InputError(f"{name} has shape {w.shape}, expected ({n},)")
    if not np.isfinite(w).all() or (w < 0).any():
        raise InputError(f"{name} must be finite and nonnegative")
    if abs(w.sum() - 1.0) > 1e-9:
        raise InputError(f"{name} sums to {w.sum()!r}, expected 1")
    return w


def _log_weights(w):
    with np.errstate(divide="ignore"):
        return np.log(w)


def plan_entropy(plan, log_plan=None):
    """Entropy ``-sum P (log P - 1)`` with 0 log 0 treated as 0."""
    plan = np.asarray(plan, dtype=float)
    if log_plan is None:
        with np.errstate(divide="ignore"):
            log_plan = np.log(plan)
    terms = np.where(plan > 0, plan * (log_plan - 1.0), 0.0)
    return -terms.sum(axis=(-2, -1))


_ANDERSON_DEPTH = 5


def _anderson_step(hist_in, hist_out, plain):
    """Anderson(mixing) update from per-problem iterate histories.

    ``hist_in``/``hist_out`` hold the last k inputs and sweep outputs of the
    fixed-point map, shape (batch, k, m) with k >= 2; ``plain`` is the newest
    sweep output, used as the fallback when the extrapolation is unusable.
    """
    res = hist_out - hist_in
    d_res = res[:, :-1, :] - res[:, -1:, :]
    gram = np.einsum("bkm,blm->bkl", d_res, d_res)
    rhs = -np.einsum("bkm,bm->bk", d_res, res[:, -1, :])
    k = gram.shape[1]
    ridge = 1e-10 * np.maximum(
        np.einsum("bkk->b", gram) / k, 1e-300
    )[:, None, None] * np.eye(k)
    try:
        coef = np.linalg.solve(gram + ridge, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError:
        return plain.copy()
    d_out = hist_out[:, :-1, :] - hist_out[:, -1:, :]
    correction = np.einsum("bk,bkm->bm", coef, d_out)
    candidate = hist_out[:, -1, :] + correction
    # Reject only catastrophic steps; legitimate corrections can be several
    # orders of magnitude longer than the residual on slowly-mixing problems,
    # and the following plain sweep self-corrects mild overshoots.
    res_norm = np.linalg.norm(res[:, -1, :], axis=1)
    corr_norm = np.linalg.norm(correction, axis=1)
    bad = ~np.isfinite(candidate).all(axis=1) | (corr_norm > 1e8 * (res_norm + 1e-300))
    if bad.any():
        candidate[bad] = plain[bad]
    return candidate


def _solve_stack(C, loga, logb, gamma, tol, max_iter, f0=None, g0=None):
    """Log-domain Sinkhorn on a stack of problems of identical shape.

    Cold starts anneal the regularization from the cost scale down to the
    target (halving per sweep), which keeps the iteration count manageable for
    very small ``gamma``; warm starts skip the annealing. A full sweep is a
    fixed-point map on the column potential alone (the row update is a pure
    function of it), and that map is Anderson-accelerated to tame the slow
    tail that appears when the regularization is far below the cost scale.
    Convergence is tested at the target strength on plain sweep iterates, and
    each problem freezes as soon as its own marginal residual drops below
    ``tol``, so a slice of the batch follows exactly the trajectory it would
    have alone.
    """
    n_problems, n, m = C.shape
    a = np.exp(loga)
    b = np.exp(logb)
    warm = f0 is not None or g0 is not None
    f = np.zeros((n_problems, n)) if f0 is None else np.array(f0, dtype=float)
    g = np.zeros((n_problems, m)) if g0 is None else np.array(g0, dtype=float)
    if warm:
        gamma_now = np.full(n_problems, gamma)
    else:
        gamma_now = np.maximum(gamma, 0.5 * C.max(axis=(1, 2)))
    iterations = np.zeros(n_problems, dtype=int)
    active = np.ones(n_problems, dtype=bool)
    hist_in = np.zeros((n_problems, _ANDERSON_DEPTH, m))
    hist_out = np.zeros((n_problems, _ANDERSON_DEPTH, m))
    hist_len = np.zeros(n_problems, dtype=int)
    best_err = np.full(n_problems, np.inf)
    stall = np.zeros(n_problems, dtype=int)

    for sweep in range(1, max_iter + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        c_act = C[idx]
        g_in = g[idx]
        eps = gamma_now[idx][:, None, None]
        f_act = gamma_now[idx][:, None] * (
            loga[idx] - logsumexp((g_in[:, None, :] - c_act) / eps, axis=2)
        )
        g_act = gamma_now[idx][:, None] * (
            logb[idx] - logsumexp((f_act[:, :, None] - c_act) / eps, axis=1)
        )
        f[idx] = f_act
        g[idx] = g_act
        at_target = gamma_now[idx] == gamma
        check = idx[at_target]
        if check.size:
            loc = at_target.nonzero()[0]
            log_plan = (
                f_act[loc][:, :, None] + g_act[loc][:, None, :] - c_act[loc]
            ) / gamma
            plan = np.exp(log_plan)
            row_err = np.abs(plan.sum(axis=2) - a[check]).max(axis=1)
            col_err = np.abs(plan.sum(axis=1) - b[check]).max(axis=1)
            err = np.maximum(row_err, col_err)
            if np.isnan(err).any():
                raise NumericalError("Sinkhorn iteration produced non-finite values")
            active[check[err <= tol]] = False
        iterations[idx] = sweep
        gamma_now[idx] = np.maximum(gamma, 0.5 * gamma_now[idx])

        # Anderson mixing for problems that are still running at the target
        # strength; everything else just takes the plain sweep. A problem
        # whose residual has not improved for a while restarts its history,
        # which breaks the rare mixing cycles on near-degenerate problems.
        live_mask = at_target & active[idx]
        live = idx[live_mask]
        if live.size:
            err_live = err[np.isin(check, live)]
            improved = err_live < best_err[live]
            best_err[live] = np.minimum(best_err[live], err_live)
            stall[live] = np.where(improved, 0, stall[live] + 1)
            restart = live[stall[live] >= 10]
            hist_len[restart] = 0
            stall[restart] = 0
            hist_in[live, :-1] = hist_in[live, 1:]
            hist_out[live, :-1] = hist_out[live, 1:]
            hist_in[live, -1] = g_in[live_mask]
            hist_out[live, -1] = g_act[live_mask]
            hist_len[live] = np.minimum(hist_len[live] + 1, _ANDERSON_DEPTH)
            for depth in np.unique(hist_len[live]):
                if depth < 2:
                    continue
                grp = live[hist_len[live] == depth]
                g[grp] = _anderson_step(
                    hist_in[grp, -depth:], hist_out[grp, -depth:], g[grp]
                )
        stale = idx[~at_target]
        hist_len[stale] = 0

    # Problems that hit the iteration cap carry a mixed column potential that
    # was never paired with a row update; one plain sweep restores a
    # consistent (f, g) pair (row marginals exact up to rounding).
    left = np.flatnonzero(active)
    if left.size:
        c_act = C[left]
        f_act = gamma * (
            loga[left] - logsumexp((g[left][:, None, :] - c_act) / gamma, axis=2)
        )
        g_act = gamma * (
            logb[left] - logsumexp((f_act[:, :, None] - c_act) / gamma, axis=1)
        )
        f[left] = f_act
        g[left] = g_act

    log_plan = (f[:, :, None] + g[:, None, :] - C) / gamma
    plans = np.exp(log_plan)
    if np.isnan(plans).any():
        raise NumericalError("Sinkhorn solution contains non-finite entries")
    costs = np.einsum("bij,bij->b", C, plans)
    values = costs - gamma * plan_entropy(plans, log_plan)
    return BatchSolveResult(
        values=values,
        transport_costs=costs,
        plans=plans,
        f=f,
        g=g,
        iterations=iterations,
        converged=~active,
    )


def sinkhorn_solve_batch(C, a, b, gamma, tol=1e-6, max_iter=1000, f0=None, g0=None):
    """Solve a stack of transport problems sharing one (n, m) shape.

    ``C`` has shape (batch, n, m); ``a``/``b`` are either shared vectors or
    per-problem (batch, n)/(batch, m) arrays.
    """
    C = np.asarray(C, dtype=float)
    if C.ndim != 3:
        raise InputError(f"cost stack must be 3-dimensional, got shape {C.shape}")
    if not np.isfinite(C).all():
        raise InputError("cost matrices must be finite")
    if (C < 0).any():
        raise InputError("cost matrices must be nonnegative")
    if not (float(gamma) > 0):
        raise InputError(f"gamma must be positive, got {gamma!r}")
    cfg = SolverConfig(tol=tol, max_iter=max_iter)
    n_problems, n, m = C.shape
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim == 1:
        a = np.broadcast_to(_check_weights(a, n, "row weights"), (n_problems, n))
    else:
        for row in a:
            _check_weights(row, n, "row weights")
    if b.ndim == 1:
        b = np.broadcast_to(_check_weights(b, m, "column weights"), (n_problems, m))
    else:
        for row in b:
            _check_weights(row, m, "column weights")
    return _solve_stack(
        C, _log_weights(a), _log_weights(b), float(gamma), cfg.tol, cfg.max_iter,
        f0=f0, g0=g0,
    )


def sinkhorn_solve(C, a, b, gamma, tol=1e-6, max_iter=1000):
    """Solve one entropic transport problem.

    Returns a :class:`SinkhornResult`; ``converged`` is False when the
    iteration cap was reached before the marginal residual fell below ``tol``.
    """
    C = np.asarray(C, dtype=float)
    if C.ndim != 2:
        raise InputError(f"cost matrix must be 2-dimensional, got shape {C.shape}")
    batch = sinkhorn_solve_batch(
        C[None, :, :], np.asarray(a, dtype=float), np.asarray(b, dtype=float),
        gamma, tol=tol, max_iter=max_iter,
    )
    plan = TransportPlan(
        batch.plans[0],
        np.asarray(a, dtype=float),
        np.asarray(b, dtype=float),
    )
    return SinkhornResult(
        value=float(batch.values[0]),
        transport_cost=float(batch.transport_costs[0]),
        plan=plan,
        potentials=DualPotentials(batch.f[0], batch.g[0]),
        iterations=int(batch.iterations[0]),
        converged=bool(batch.converged[0]),
    )


def sinkhorn_distance(x: PointCloud, y: PointCloud, metric: GroundMetric,
                      config: SolverConfig = SolverConfig()):
    """Regularized transport between two clouds under the given metric."""
    C = cost_matrix(x, y, metric)
    return sinkhorn_solve(
        C, x.weights, y.weights, metric.gamma,
        tol=config.tol, max_iter=config.max_iter,
    )


def sinkhorn_divergence(x: PointCloud, y: PointCloud, metric: GroundMetric,
                        config: SolverConfig = SolverConfig()):
    """Debiased divergence: cross term minus half of each self term.

    Zero (up to solver tolerance) when both clouds coincide, symmetric in its
    arguments, and nonnegative for the squared-distance cost family.
    """
    cross = sinkhorn_distance(x, y, metric, config)
    self_x = sinkhorn_distance(x, x, metric, config)
    self_y = sinkhorn_distance(y, y, metric, config)
    return cross.value - 0.5 * self_x.value - 0.5 * self_y.value


def _divergence_values_stack(x_stack, y_stack, weights, metric, config):
    """Divergences for aligned stacks of equal-size windows.

    Solves every cross problem and each distinct self problem exactly once;
    results match per-pair :func:`sinkhorn_divergence` calls bit for bit
    because the batched solver freezes each slice independently.
    """
    n_pairs = x_stack.shape[0]
    L = metric.transform
    cross_costs = np.stack(
        [_pairwise_cost(x_stack[i], y_stack[i], L) for i in range(n_pairs)]
    )
    cross = sinkhorn_solve_batch(
        cross_costs, weights, weights, metric.gamma,
        tol=config.tol, max_iter=config.max_iter,
    )

    # Self terms: dedupe identical windows by object identity of the data they
    # were sliced from is not available here, so hash the raw bytes instead.
    selves = {}
    order = []
    for stack in (x_stack, y_stack):
        for i in range(stack.shape[0]):
            key = stack[i].tobytes()
            if key not in selves:
                selves[key] = len(order)
                order.append(stack[i])
    self_costs = np.stack([_pairwise_cost(w, w, L) for w in order])
    self_res = sinkhorn_solve_batch(
        self_costs, weights, weights, metric.gamma,
        tol=config.tol, max_iter=config.max_iter,
    )
    self_values = self_res.values

    values = np.empty(n_pairs)
    for i in range(n_pairs):
        vx = self_values[selves[x_stack[i].tobytes()]]
        vy = self_values[selves[y_stack[i].tobytes()]]
        values[i] = cross.values[i] - 0.5 * vx - 0.5 * vy
    converged = cross.converged.copy()
    return values, converged


def sinkhorn_divergence_batch(x_stack, y_stack, metric: GroundMetric,
                              config: SolverConfig = SolverConfig()):
    """Divergence of each aligned pair in two stacks of uniform windows.

    ``x_stack`` and ``y_stack`` have shape (batch, w, d); every window is
    treated as a uniform-weight cloud.
    """
    x_stack = np.asarray(x_stack, dtype=float)
    y_stack = np.asarray(y_stack, dtype=float)
    if x_stack.shape != y_stack.shape or x_stack.ndim != 3:
        raise InputError("window stacks must share one (batch, w, d) shape")
    w = x_stack.shape[1]
    weights = np.full(w, 1.0 / w)
    values, _ = _divergence_values_stack(x_stack, y_stack, weights, metric, config)
    return values


def _plan_scatter(x, y, plan):
    """Plan-weighted scatter of pairwise differences: sum P_ij d_ij d_ij^T."""
    row = plan.sum(axis=1)
    col = plan.sum(axis=0)
    cross = x.T @ plan @ y
    return x.T @ (row[:, None] * x) + y.T @ (col[:, None] * y) - cross - cross.T


def transport_gradient(x: PointCloud, y: PointCloud, plan, transform):
    """Envelope gradient of the transport value with respect to the transform.

    With the optimal plan held fixed this equals
    ``2 L sum_ij P_ij (x_i - y_j)(x_i - y_j)^T`` and is the exact gradient of
    the regularized transport value, since the plan is a stationary point.
    """
    transform = np.asarray(transform, dtype=float)
    plan_matrix = plan.plan if isinstance(plan, TransportPlan) else np.asarray(plan)
    if plan_matrix.shape != (x.n, y.n):
        raise InputError(
            f"plan shape {plan_matrix.shape} does not match clouds ({x.n}, {y.n})"
        )
    if transform.shape[1] != x.dim:
        raise InputError(
            f"transform expects dimension {transform.shape[1]}, clouds have {x.dim}"
        )
    return 2.0 * transform @ _plan_scatter(x.points, y.points, plan_matrix)


def divergence_gradient(x: PointCloud, y: PointCloud, metric: GroundMetric,
                        config: SolverConfig = SolverConfig(),
                        mode: str = "cross_only"):
    """Gradient of the divergence with respect to the metric transform.

    ``cross_only`` differentiates the cross transport term alone and is the
    default; ``full_debiased`` also differentiates both self terms, giving the
    exact gradient of the debiased divergence.
    """
    if mode not in GRAD_MODES:
        raise InputError(f"mode must be one of {GRAD_MODES}, got {mode!r}")
    L = metric.transform
    cross = sinkhorn_distance(x, y, metric, config)
    grad = transport_gradient(x, y, cross.plan, L)
    if mode == "full_debiased":
        self_x = sinkhorn_distance(x, x, metric, config)
        self_y = sinkhorn_distance(y, y, metric, config)
        grad = grad - 0.5 * transport_gradient(x, x, self_x.plan, L)
        grad = grad - 0.5 * transport_gradient(y, y, self_y.plan, L)
    return grad
