"""Closed-form and iterative block updates for the three-splitting BCD sweep.

Each ``update_*`` function solves one block subproblem with every other block
held fixed. ``device_bcd_iteration`` runs the backward cyclic sweep: output
layer (v, u, W) first, then (v, u, W) for hidden layers from the top down.
"""

import logging
from dataclasses import dataclass

import numpy as np

from dbcd.model import AuxState, device_objective, log_softmax, onehot, relu, softmax
from dbcd.numerics import NotPositiveDefinite, solve_spd

logger = logging.getLogger(__name__)


class BlockSolveError(RuntimeError):
    """A block subproblem failed; ``block`` names which one."""

    def __init__(self, block, cause):
        super().__init__(f"{block}: {cause}")
        self.block = block


@dataclass
class BlockUpdateReport:
    block: str
    objective_before: float = float("nan")
    objective_after: float = float("nan")
    inner_iters: int = 0
    converged: bool = True
    exact: bool = True


def _ce_prox_objective(v, y_hot, weight, c, target):
    ce = -(log_softmax(v) * y_hot).sum(axis=0)
    return ce * weight + 0.5 * c * ((v - target) ** 2).sum(axis=0)


def update_v_out(u_out, v_prev, y, n_samples, hyper):
    """Output post-activation block.

    Minimizes ``w * sum_j loss_j + lambda_v/2 ||v||^2 + gamma/2 ||v - u_out||^2 +
    alpha/2 ||v - v_prev||^2`` column by column, where ``w`` is ``1`` or
    ``1 / N`` by ``hyper.loss_reduction``. Returns ``(v, iters, converged)``.
    """
    c = hyper.lambda_v + hyper.gamma + hyper.alpha
    y_hot = onehot(np.asarray(y, dtype=np.int64), u_out.shape[0])
    weight = hyper.loss_weight(n_samples)
    if hyper.loss == "squared":
        v = (weight * y_hot + hyper.gamma * u_out + hyper.alpha * v_prev) / (weight + c)
        return v, 0, True

    target = (hyper.gamma * u_out + hyper.alpha * v_prev) / c
    v = target.copy()
    k, n = v.shape
    eye = np.eye(k)
    f = _ce_prox_objective(v, y_hot, weight, c, target)
    for it in range(1, hyper.vout_max_iter + 1):
        p = softmax(v)
        grad = weight * (p - y_hot) + c * (v - target)
        if np.sqrt((grad ** 2).sum(axis=0)).max() <= hyper.vout_tol:
            return v, it - 1, True
        # per-column Hessian (diag(p) - p p^T) / N + c I, shape (n, k, k)
        pt = p.T
        hess = weight * (pt[:, :, None] * eye - pt[:, :, None] * pt[:, None, :]) + c * eye
        step = np.linalg.solve(hess, grad.T[:, :, None])[:, :, 0].T
        t = np.ones(n)
        for _ in range(30):
            cand = v - t * step
            f_new = _ce_prox_objective(cand, y_hot, weight, c, target)
            bad = f_new > f + 1e-14 * (1.0 + np.abs(f))
            if not bad.any():
                break
            t = np.where(bad, 0.5 * t, t)
        else:
            # Newton stalled on some columns: take a safe gradient step there.
            lip = 0.5 * weight + c
            cand = np.where(bad, v - grad / lip, cand)
            f_new = _ce_prox_objective(cand, y_hot, weight, c, target)
        v, f = cand, f_new
    p = softmax(v)
    grad = weight * (p - y_hot) + c * (v - target)
    ok = bool(np.sqrt((grad ** 2).sum(axis=0)).max() <= hyper.vout_tol)
    if not ok:
        logger.debug("output v-update hit max_iter=%d", hyper.vout_max_iter)
    return v, hyper.vout_max_iter, ok


def update_u_out(v_out, pred, hyper):
    """Output pre-activation block; ``pred`` is ``W_L v_{L-1}``.

    With the printed coupling both terms carry gamma and the result is the midpoint.
    """
    beta = hyper.fit_weight
    return (hyper.gamma * v_out + beta * pred) / (hyper.gamma + beta)


def update_w(u, v_in, w_prev, hyper):
    """Ridge-type weight block: ``(b U V^T + a W_prev)(b V V^T + (a + lambda_w) I)^{-1}``."""
    beta = hyper.fit_weight
    gram = beta * (v_in @ v_in.T)
    gram[np.diag_indices_from(gram)] += hyper.alpha + hyper.lambda_w
    rhs = beta * (v_in @ u.T) + hyper.alpha * w_prev.T
    try:
        return solve_spd(gram, rhs).T
    except NotPositiveDefinite as exc:
        raise BlockSolveError("W", exc) from exc


def update_v_hidden(u_i, w_next, u_next, hyper):
    """Hidden post-activation block: ``((gamma + lambda_v) I + a W^T W) v = gamma relu(u_i) + a W^T u_next``."""
    lhs = hyper.alpha * (w_next.T @ w_next)
    lhs[np.diag_indices_from(lhs)] += hyper.gamma + hyper.lambda_v
    rhs = hyper.gamma * relu(u_i) + hyper.alpha * (w_next.T @ u_next)
    try:
        return solve_spd(lhs, rhs)
    except NotPositiveDefinite as exc:
        raise BlockSolveError("V", exc) from exc


def relu_prox_objective(u, v, pred, u_prev, hyper):
    """Elementwise objective minimized by :func:`update_u_hidden`."""
    beta = hyper.fit_weight
    return (0.5 * hyper.gamma * (v - relu(u)) ** 2
            + 0.5 * beta * (u - pred) ** 2
            + 0.5 * hyper.alpha * (u - u_prev) ** 2)


def update_u_hidden(v, pred, u_prev, hyper):
    """Hidden pre-activation block through the ReLU, solved exactly per entry.

    The objective is a convex quadratic on each half-line, so the minimizer is
    the better of the two clipped stationary points; ties go to ``u >= 0``.
    """
    g, b, a = hyper.gamma, hyper.fit_weight, hyper.alpha
    u_pos = np.maximum(0.0, (g * v + b * pred + a * u_prev) / (g + b + a))
    u_neg = np.minimum(0.0, (b * pred + a * u_prev) / (b + a))
    f_pos = relu_prox_objective(u_pos, v, pred, u_prev, hyper)
    f_neg = relu_prox_objective(u_neg, v, pred, u_prev, hyper)
    return np.where(f_neg < f_pos, u_neg, u_pos)


def device_bcd_iteration(params, aux, data, hyper, track=True):
    """One backward BCD sweep over a device's blocks.

    Returns new ``(params, aux, reports)``; inputs are left untouched. With
    ``track`` set, each report carries the device objective before and after
    its block (costs one objective evaluation per block).
    """
    weights = [w.copy() for w in params.weights]
    state = AuxState([a.copy() for a in aux.v], [a.copy() for a in aux.u])
    n_layers = len(weights)
    reports = []

    def current():
        return device_objective(type(params)(weights), state, data, hyper)

    def v_in(i):
        return data.x if i == 0 else state.v[i - 1]

    def record(name, fn, exact=True):
        before = current() if track else float("nan")
        try:
            iters, ok = fn()
        except (BlockSolveError, np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
            raise BlockSolveError(name, exc) from exc
        after = current() if track else float("nan")
        reports.append(BlockUpdateReport(name, before, after, iters, ok, exact))

    top = n_layers - 1

    def do_v_out():
        v, iters, ok = update_v_out(state.u[top], state.v[top], data.y, data.n_samples, hyper)
        state.v[top] = v
        return iters, ok

    def do_u_out():
        state.u[top] = update_u_out(state.v[top], weights[top] @ v_in(top), hyper)
        return 0, True

    def do_w(i):
        def run():
            weights[i] = update_w(state.u[i], v_in(i), weights[i], hyper)
            return 0, True
        return run

    def do_v_hidden(i):
        def run():
            state.v[i] = update_v_hidden(state.u[i], weights[i + 1], state.u[i + 1], hyper)
            return 0, True
        return run

    def do_u_hidden(i):
        def run():
            state.u[i] = update_u_hidden(state.v[i], weights[i] @ v_in(i), state.u[i], hyper)
            return 0, True
        return run

    record("VOut", do_v_out, exact=hyper.loss == "squared")
    record("UOut", do_u_out)
    record(f"W({n_layers})", do_w(top))
    for i in range(top - 1, -1, -1):
        record(f"VHidden({i + 1})", do_v_hidden(i))
        record(f"UHidden({i + 1})", do_u_hidden(i))
        record(f"W({i + 1})", do_w(i))
    return type(params)(weights), state, reports
