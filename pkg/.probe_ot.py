"""Risk probes for the OT core before committing to the design."""
import itertools
import time

import numpy as np

from sinkcpd.ot import (
    GroundMetric, PointCloud, SolverConfig, cost_matrix,
    sinkhorn_distance, sinkhorn_divergence, sinkhorn_solve, transport_gradient,
)

rng = np.random.default_rng(0)

# --- Probe 1: tiny-gamma convergence speed / accuracy (criterion 1) ---
def exact_ot_uniform(C):
    n = C.shape[0]
    best = np.inf
    for perm in itertools.permutations(range(n)):
        cost = sum(C[i, perm[i]] for i in range(n)) / n
        best = min(best, cost)
    return best

t0 = time.time()
worst_rel = 0.0
worst_res = 0.0
max_its = 0
for trial in range(200):
    n = int(rng.integers(1, 5))
    X = rng.normal(size=(n, 3))
    Y = rng.normal(size=(n, 3))
    C = ((X[:, None, :] - Y[None, :, :]) ** 2).sum(-1)
    a = np.full(n, 1.0 / n)
    res = sinkhorn_solve(C, a, a, 1e-3, tol=1e-7, max_iter=200000)
    exact = exact_ot_uniform(C)
    rel = abs(res.transport_cost - exact) / max(exact, 1e-12)
    worst_rel = max(worst_rel, rel)
    worst_res = max(worst_res, res.plan.marginal_residual())
    max_its = max(max_its, res.iterations)
elapsed = time.time() - t0
print(f"probe1 tiny-gamma: time={elapsed:.2f}s worst_rel={worst_rel:.2e} "
      f"worst_residual={worst_res:.2e} max_iters={max_its}")

# --- Probe 2: divergence nonnegativity / symmetry under the convention ---
worst_self = 0.0
worst_sym = 0.0
min_div = np.inf
cfg = SolverConfig(tol=1e-9, max_iter=5000)
for trial in range(200):
    n = int(rng.integers(2, 12))
    m = int(rng.integers(2, 12))
    d = int(rng.integers(1, 6))
    r = int(rng.integers(1, 6))
    X = PointCloud.uniform(rng.normal(size=(n, d)))
    Y = PointCloud.uniform(rng.normal(size=(m, d)))
    gamma = float(10 ** rng.uniform(-1.5, 0.8))
    L = rng.normal(size=(r, d))
    metric = GroundMetric(L, gamma)
    s_xy = sinkhorn_divergence(X, Y, metric, cfg)
    s_yx = sinkhorn_divergence(Y, X, metric, cfg)
    s_xx = sinkhorn_divergence(X, X, metric, cfg)
    worst_self = max(worst_self, abs(s_xx))
    worst_sym = max(worst_sym, abs(s_xy - s_yx))
    min_div = min(min_div, s_xy)
print(f"probe2 divergence: worst_self={worst_self:.2e} worst_sym={worst_sym:.2e} "
      f"min_div={min_div:.3e}")

# --- Probe 3: envelope gradient vs central finite differences ---
def fd_grad(fn, L, step=1e-5):
    G = np.zeros_like(L)
    for idx in np.ndindex(L.shape):
        Lp = L.copy(); Lp[idx] += step
        Lm = L.copy(); Lm[idx] -= step
        G[idx] = (fn(Lp) - fn(Lm)) / (2 * step)
    return G

tight = SolverConfig(tol=1e-12, max_iter=20000)
worst = 0.0
for trial in range(10):
    X = PointCloud.uniform(rng.normal(size=(3, 2)))
    Y = PointCloud.uniform(rng.normal(size=(3, 2)))
    L = rng.normal(size=(2, 2))
    gamma = 0.5
    res = sinkhorn_distance(X, Y, GroundMetric(L, gamma), tight)
    g_env = transport_gradient(X, Y, res.plan, L)
    g_fd = fd_grad(lambda M: sinkhorn_distance(X, Y, GroundMetric(M, gamma), tight).value, L)
    rel = np.linalg.norm(g_env - g_fd) / max(np.linalg.norm(g_fd), 1e-12)
    worst = max(worst, rel)
print(f"probe3 gradient: worst_rel={worst:.2e}")
