"""Brute-force checks of every block update and of backpropagation.

Each check rebuilds the block objective straight from its penalty terms and
minimizes it numerically (BFGS from a random start, or grid search), never
touching the closed forms in :mod:`dbcd.solver`. Solver functions are looked
up on the module at call time so tests can patch in broken versions.
"""

import time
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp

from dbcd import baselines, solver
from dbcd.model import BcdHyper, MlpParams, forward, loss
from dbcd.numerics import seeded_rng

CLOSED_FORM_TOL = 1e-6
CE_GRID_TOL = 2e-3
GRADIENT_TOL = 1e-4
GRID_VALUES = (0.1, 0.5, 1.0, 5.0, 10.0)


@dataclass
class CheckResult:
    name: str
    cases: int
    failures: int
    worst_gap: float
    tolerance: float


@dataclass
class SuiteResult:
    name: str
    checks: list
    seconds: float

    @property
    def passed(self):
        return all(c.failures == 0 for c in self.checks)

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        parts = "; ".join(f"{c.name} {c.failures}/{c.cases} failed, worst {c.worst_gap:.2e} (tol {c.tolerance:.0e})"
                          for c in self.checks)
        return f"{status} {self.name} [{self.seconds:.1f}s]: {parts}"


def _random_hyper(rng, **fixed):
    kw = dict(
        gamma=float(rng.choice(GRID_VALUES)),
        alpha=float(rng.choice(GRID_VALUES)),
        lambda_w=float(rng.choice([0.0, rng.uniform(0, 1)])),
        lambda_v=float(rng.choice([0.0, rng.uniform(0, 1)])),
        coupling=str(rng.choice(["printed", "consistent"])),
        loss_reduction=str(rng.choice(["sum", "mean"])),
    )
    kw.update(fixed)
    return BcdHyper(**kw)


def _sq(a):
    return float(np.sum(np.square(a)))


def _bfgs_min(f, shape, rng):
    x0 = rng.standard_normal(int(np.prod(shape)))
    res = minimize(lambda z: f(z.reshape(shape)), x0, method="BFGS", options={"gtol": 1e-10, "maxiter": 2000})
    return res.x.reshape(shape), float(res.fun)


def _coupling_weight(h):
    return h.gamma if h.coupling == "printed" else h.alpha


# ----------------------------------------------------------------- suites

def suite_output_block(n_cases, rng):
    """Output-layer v (squared loss vs BFGS, cross-entropy vs grid) and u (vs BFGS)."""
    checks = []
    worst, fails = 0.0, 0
    n_sq = n_ce = n_u = n_cases
    for _ in range(n_sq):
        h = _random_hyper(rng, loss="squared")
        k, n = int(rng.integers(2, 4)), int(rng.integers(1, 4))
        u, vp = rng.standard_normal((k, n)), rng.standard_normal((k, n))
        y = rng.integers(0, k, size=n)
        w = 1.0 / n if h.loss_reduction == "mean" else 1.0
        hot = np.eye(k)[:, y]

        def f(v):
            return (w * 0.5 * _sq(v - hot) + 0.5 * h.lambda_v * _sq(v)
                    + 0.5 * h.gamma * _sq(v - u) + 0.5 * h.alpha * _sq(v - vp))
        v, _, _ = solver.update_v_out(u, vp, y, n, h)
        _, f_num = _bfgs_min(f, (k, n), rng)
        gap = f(v) - f_num
        worst = max(worst, gap)
        fails += gap > CLOSED_FORM_TOL
    checks.append(CheckResult("v_out_squared", n_sq, int(fails), worst, CLOSED_FORM_TOL))
    worst, fails = 0.0, 0
    # cross-entropy: two classes, one sample, coarse-to-fine grid over [-10, 10]^2
    coarse = np.arange(-10.0, 10.0 + 1e-9, 0.05)
    fine = np.arange(-0.1, 0.1 + 1e-9, 1e-3)
    for _ in range(n_ce):
        h = _random_hyper(rng, loss="cross_entropy")
        u, vp = rng.uniform(-3, 3, (2, 1)), rng.uniform(-3, 3, (2, 1))
        y = int(rng.integers(0, 2))
        c_reg = (h.lambda_v, h.gamma, h.alpha)

        def f_grid(a, b):
            lse = np.logaddexp(a, b)
            ce = lse - (a if y == 0 else b)
            return (ce + 0.5 * c_reg[0] * (a ** 2 + b ** 2)
                    + 0.5 * c_reg[1] * ((a - u[0, 0]) ** 2 + (b - u[1, 0]) ** 2)
                    + 0.5 * c_reg[2] * ((a - vp[0, 0]) ** 2 + (b - vp[1, 0]) ** 2))
        A, B = np.meshgrid(coarse, coarse, indexing="ij")
        vals = f_grid(A, B)
        i, j = np.unravel_index(np.argmin(vals), vals.shape)
        A, B = np.meshgrid(coarse[i] + fine, coarse[j] + fine, indexing="ij")
        vals = f_grid(A, B)
        i, j = np.unravel_index(np.argmin(vals), vals.shape)
        v_grid = np.array([A[i, j], B[i, j]])
        v, _, _ = solver.update_v_out(u, vp, np.array([y]), 1, h)
        gap = max(float(np.abs(v[:, 0] - v_grid).max()), float(f_grid(v[0, 0], v[1, 0]) - vals[i, j]))
        worst = max(worst, gap)
        fails += gap > CE_GRID_TOL
    checks.append(CheckResult("v_out_cross_entropy", n_ce, int(fails), worst, CE_GRID_TOL))
    worst, fails = 0.0, 0
    for _ in range(n_u):
        h = _random_hyper(rng)
        k, n, d = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
        v_out, w_mat, v_in = rng.standard_normal((k, n)), rng.standard_normal((k, d)), rng.standard_normal((d, n))
        beta = _coupling_weight(h)

        def f(u):
            return 0.5 * h.gamma * _sq(v_out - u) + 0.5 * beta * _sq(u - w_mat @ v_in)
        u = solver.update_u_out(v_out, w_mat @ v_in, h)
        _, f_num = _bfgs_min(f, (k, n), rng)
        gap = f(u) - f_num
        worst = max(worst, gap)
        fails += gap > CLOSED_FORM_TOL
    checks.append(CheckResult("u_out", n_u, int(fails), worst, CLOSED_FORM_TOL))
    return checks


def suite_weight_block(n_cases, rng):
    """Weight update vs BFGS on random instances up to 3 x 3."""
    worst, fails = 0.0, 0
    for _ in range(n_cases):
        h = _random_hyper(rng)
        d_out, d_in, n = (int(rng.integers(1, 4)) for _ in range(3))
        u, v_in, w_prev = rng.standard_normal((d_out, n)), rng.standard_normal((d_in, n)), rng.standard_normal((d_out, d_in))
        beta = _coupling_weight(h)

        def f(w):
            return 0.5 * h.lambda_w * _sq(w) + 0.5 * beta * _sq(u - w @ v_in) + 0.5 * h.alpha * _sq(w - w_prev)
        w = solver.update_w(u, v_in, w_prev, h)
        _, f_num = _bfgs_min(f, (d_out, d_in), rng)
        gap = f(w) - f_num
        worst = max(worst, gap)
        fails += gap > CLOSED_FORM_TOL
    return [CheckResult("w", n_cases, int(fails), worst, CLOSED_FORM_TOL)]


def suite_hidden_v_block(n_cases, rng):
    """Hidden post-activation update vs BFGS."""
    worst, fails = 0.0, 0
    for _ in range(n_cases):
        h = _random_hyper(rng)
        d, d_next, n = (int(rng.integers(1, 4)) for _ in range(3))
        u_i, w_next, u_next = rng.standard_normal((d, n)), rng.standard_normal((d_next, d)), rng.standard_normal((d_next, n))

        def f(v):
            return (0.5 * h.lambda_v * _sq(v) + 0.5 * h.gamma * _sq(v - np.maximum(u_i, 0))
                    + 0.5 * h.alpha * _sq(u_next - w_next @ v))
        v = solver.update_v_hidden(u_i, w_next, u_next, h)
        _, f_num = _bfgs_min(f, (d, n), rng)
        gap = f(v) - f_num
        worst = max(worst, gap)
        fails += gap > CLOSED_FORM_TOL
    return [CheckResult("v_hidden", n_cases, int(fails), worst, CLOSED_FORM_TOL)]


def suite_relu_prox_block(n_cases, rng):
    """Hidden pre-activation update (through the ReLU) vs a two-stage grid, per entry."""
    n = max(n_cases, 10_000)
    gammas = rng.choice(GRID_VALUES, n)
    alphas = rng.choice(GRID_VALUES, n)
    printed = rng.random(n) < 0.5
    betas = np.where(printed, gammas, alphas)
    v = np.abs(rng.standard_normal(n)) * rng.choice([0.0, 1.0, 3.0], n)
    q = 3 * rng.standard_normal(n)
    p = 3 * rng.standard_normal(n)

    def f(u):
        return (0.5 * gammas[:, None] * (v[:, None] - np.maximum(u, 0)) ** 2
                + 0.5 * betas[:, None] * (u - q[:, None]) ** 2
                + 0.5 * alphas[:, None] * (u - p[:, None]) ** 2)
    lo = np.minimum.reduce([v, q, p, np.zeros(n)]) - 1.0
    hi = np.maximum.reduce([v, q, p, np.zeros(n)]) + 1.0
    best_u = np.zeros(n)
    best_f = np.full(n, np.inf)
    for start, stop in ((lo, np.zeros(n)), (np.zeros(n), hi)):
        grid = start[:, None] + (stop - start)[:, None] * np.linspace(0, 1, 2001)[None, :]
        vals = f(grid)
        centre = grid[np.arange(n), vals.argmin(axis=1)]
        step = (stop - start) / 2000
        fine = centre[:, None] + step[:, None] * np.linspace(-1, 1, 2001)[None, :]
        fine = np.clip(fine, start[:, None], stop[:, None])
        vals = f(fine)
        k = vals.argmin(axis=1)
        cand_f = vals[np.arange(n), k]
        better = cand_f < best_f
        best_f = np.where(better, cand_f, best_f)
        best_u = np.where(better, fine[np.arange(n), k], best_u)
    u = np.empty(n)
    for c in (True, False):
        for g in GRID_VALUES:
            for a in GRID_VALUES:
                mask = (printed == c) & (gammas == g) & (alphas == a)
                if mask.any():
                    h = BcdHyper(gamma=g, alpha=a, coupling="printed" if c else "consistent")
                    u[mask] = solver.update_u_hidden(v[mask], q[mask], p[mask], h)
    f_closed = f(u[:, None])[:, 0]
    gap = f_closed - best_f
    return [CheckResult("u_hidden", n, int((gap > CLOSED_FORM_TOL).sum()), float(gap.max()), CLOSED_FORM_TOL)]


def suite_backprop_gradient(n_cases, rng, n_nets=100, eps=1e-5):
    """Backpropagated gradients vs central finite differences on random small nets."""
    worst, fails, entries = 0.0, 0, 0
    for _ in range(n_nets):
        n_layers = int(rng.integers(1, 5))
        dims = [int(rng.integers(1, 9)) for _ in range(n_layers)] + [int(rng.integers(2, 9))]
        params = MlpParams.random(dims, rng)
        n = int(rng.integers(1, 6))
        x = rng.standard_normal((dims[0], n))
        y = rng.integers(0, dims[-1], size=n)
        grads = baselines.backprop_grad(params, x, y)
        for i, w in enumerate(params.weights):
            for idx in np.ndindex(w.shape):
                orig = w[idx]
                w[idx] = orig + eps
                f_plus = loss(forward(params, x), y)
                w[idx] = orig - eps
                f_minus = loss(forward(params, x), y)
                w[idx] = orig
                fd = (f_plus - f_minus) / (2 * eps)
                g = grads[i][idx]
                rel = abs(g - fd) / max(abs(g), abs(fd), 1e-6)
                worst = max(worst, rel)
                fails += rel > GRADIENT_TOL
                entries += 1
    return [CheckResult(f"gradient_entries_{n_nets}_nets", entries, int(fails), worst, GRADIENT_TOL)]


SUITES = {
    "output_block": suite_output_block,
    "weight_block": suite_weight_block,
    "hidden_v_block": suite_hidden_v_block,
    "relu_prox_block": suite_relu_prox_block,
    "backprop_gradient": suite_backprop_gradient,
}


def run_oracle_suites(n_cases=1000, seed=0, names=None):
    results = []
    for name in names or SUITES:
        rng = seeded_rng(seed)
        t0 = time.perf_counter()
        checks = SUITES[name](n_cases, rng)
        results.append(SuiteResult(name, checks, time.perf_counter() - t0))
    return results
