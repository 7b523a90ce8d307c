import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dbcd import solver
from dbcd.model import BcdHyper, LocalDataset, MlpParams, device_objective, init_state, onehot
from dbcd.numerics import seeded_rng
from dbcd.oracles import run_oracle_suites
from dbcd.solver import (BlockSolveError, device_bcd_iteration, relu_prox_objective, update_u_hidden,
                         update_u_out, update_v_hidden, update_v_out, update_w)

S = lambda x: np.array([[float(x)]])  # noqa: E731 - scalar as a 1x1 block
SQ = BcdHyper(loss="squared")


# --- hand examples for each block -------------------------------------------

def test_v_out_fixed_point():
    v, _, _ = update_v_out(np.array([[0.0], [1.0]]), np.array([[0.0], [1.0]]), np.array([1]), 1, SQ)
    np.testing.assert_allclose(v, [[0.0], [1.0]], atol=1e-15)


def test_v_out_hand_scalar():
    # one class with label absent is the scalar case: target 0, u = 3, v_prev = 0
    v, _, _ = update_v_out(np.array([[3.0], [0.0]]), np.array([[0.0], [0.0]]), np.array([1]), 1, SQ)
    assert v[0, 0] == pytest.approx(1.0)


def test_u_out_agreement_and_midpoint():
    np.testing.assert_allclose(update_u_out(S(2.5), S(2.5), BcdHyper()), S(2.5))
    np.testing.assert_allclose(update_u_out(S(4.0), S(0.0), BcdHyper()), S(2.0))


def test_w_fixed_point_and_hand_scalar(rng):
    w_prev = rng.standard_normal((3, 2))
    v = rng.standard_normal((2, 5))
    np.testing.assert_allclose(update_w(w_prev @ v, v, w_prev, BcdHyper()), w_prev, atol=1e-12)
    np.testing.assert_allclose(update_w(S(2.0), S(1.0), S(0.0), BcdHyper()), S(1.0))


def test_v_hidden_consistent_target_and_hand_scalar(rng):
    v_star = np.abs(rng.standard_normal((3, 4)))
    w_next = rng.standard_normal((2, 3))
    np.testing.assert_allclose(update_v_hidden(v_star, w_next, w_next @ v_star, BcdHyper()), v_star, atol=1e-12)
    np.testing.assert_allclose(update_v_hidden(S(1.0), S(1.0), S(3.0), BcdHyper()), S(2.0))


def test_u_hidden_consistent_cases():
    h = BcdHyper()
    assert update_u_hidden(S(1), S(1), S(1), h)[0, 0] == pytest.approx(1.0)
    assert relu_prox_objective(S(1), S(1), S(1), S(1), h) == pytest.approx(0.0)
    assert update_u_hidden(S(0), S(-2), S(-2), h)[0, 0] == pytest.approx(-2.0)


def test_u_hidden_tie_prefers_active_branch():
    # v = q = p = 0: both candidates sit at 0 with equal objective
    assert update_u_hidden(S(0), S(0), S(0), BcdHyper())[0, 0] == 0.0


def test_u_hidden_coupling_variants_differ():
    v, q, p = S(2.0), S(1.0), S(0.0)
    printed = update_u_hidden(v, q, p, BcdHyper(gamma=1.0, alpha=5.0))
    consistent = update_u_hidden(v, q, p, BcdHyper(gamma=1.0, alpha=5.0, coupling="consistent"))
    assert printed[0, 0] == pytest.approx((2 + 1 + 0) / (1 + 1 + 5))
    assert consistent[0, 0] == pytest.approx((2 + 5 * 1 + 0) / (1 + 5 + 5))


def test_v_out_cross_entropy_stationarity(rng):
    h = BcdHyper(gamma=0.5, alpha=0.1)
    u = 3 * rng.standard_normal((4, 6))
    vp = rng.standard_normal((4, 6))
    y = rng.integers(0, 4, 6)
    v, iters, ok = update_v_out(u, vp, y, 6, h)
    assert ok and iters <= h.vout_max_iter
    p = np.exp(v - v.max(0)) / np.exp(v - v.max(0)).sum(0)
    grad = (p - onehot(y, 4)) + h.gamma * (v - u) + h.alpha * (v - vp)
    assert np.abs(grad).max() < 1e-7


# --- sweep structure ---------------------------------------------------------

def _problem(rng, dims, n, loss="squared"):
    params = MlpParams.random(dims, rng)
    data = LocalDataset(rng.standard_normal((dims[0], n)), rng.integers(0, dims[-1], n))
    return params, init_state(params, data), data


def test_single_layer_has_three_reports(rng):
    p, a, d = _problem(rng, [3, 2], 4)
    _, _, reports = device_bcd_iteration(p, a, d, SQ)
    assert [r.block for r in reports] == ["VOut", "UOut", "W(1)"]


def test_block_order_is_backward(rng):
    p, a, d = _problem(rng, [3, 4, 4, 2], 5)
    _, _, reports = device_bcd_iteration(p, a, d, SQ)
    assert [r.block for r in reports] == ["VOut", "UOut", "W(3)", "VHidden(2)", "UHidden(2)", "W(2)",
                                         "VHidden(1)", "UHidden(1)", "W(1)"]


def test_call_order_matches_reports(rng, monkeypatch):
    calls = []
    for name in ("update_v_out", "update_u_out", "update_w", "update_v_hidden", "update_u_hidden"):
        orig = getattr(solver, name)
        monkeypatch.setattr(solver, name, lambda *a, _o=orig, _n=name: (calls.append(_n), _o(*a))[1])
    p, a, d = _problem(rng, [3, 4, 2], 5)
    device_bcd_iteration(p, a, d, SQ, track=False)
    assert calls == ["update_v_out", "update_u_out", "update_w", "update_v_hidden", "update_u_hidden", "update_w"]


def test_iteration_deterministic_and_pure(rng):
    p, a, d = _problem(rng, [3, 5, 5, 3], 8, "cross_entropy")
    snapshot = [w.copy() for w in p.weights]
    h = BcdHyper()
    p1, a1, _ = device_bcd_iteration(p, a, d, h)
    p2, a2, _ = device_bcd_iteration(p, a, d, h)
    for w0, w in zip(snapshot, p.weights):
        np.testing.assert_array_equal(w0, w)
    for x, y in zip(p1.weights + a1.u + a1.v, p2.weights + a2.u + a2.v):
        np.testing.assert_array_equal(x, y)


def test_fixed_point_at_perfect_fit():
    # identity weights, nonnegative inputs and one-hot inputs: forward state fits squared loss exactly
    x = np.eye(3)[:, [0, 1, 2, 1]]
    p = MlpParams([np.eye(3), np.eye(3)])
    d = LocalDataset(x, np.array([0, 1, 2, 1]))
    a = init_state(p, d)
    p1, a1, _ = device_bcd_iteration(p, a, d, SQ)
    for x0, x1 in zip(p.weights + a.u + a.v, p1.weights + a1.u + a1.v):
        assert np.abs(x0 - x1).max() <= 1e-9


def test_squared_objective_decreases_over_a_sweep(rng):
    p, a, d = _problem(rng, [4, 6, 6, 3], 10)
    _, _, reports = device_bcd_iteration(p, a, d, SQ)
    assert reports[-1].objective_after <= reports[0].objective_before + 1e-9


def test_cross_entropy_vout_marked_inexact(rng):
    p, a, d = _problem(rng, [3, 3], 4)
    _, _, reports = device_bcd_iteration(p, a, d, BcdHyper())
    assert not reports[0].exact and all(r.exact for r in reports[1:])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([0.1, 1.0, 10.0]), st.sampled_from([0.1, 1.0, 10.0]))
def test_consistent_coupling_descends_for_any_weights(seed, gamma, alpha):
    r = seeded_rng(seed)
    p, a, d = _problem(r, [3, 4, 4, 2], 6)
    h = BcdHyper(gamma=gamma, alpha=alpha, loss="squared", coupling="consistent")
    for _ in range(2):
        p, a, reports = device_bcd_iteration(p, a, d, h)
        for rep in reports:
            assert rep.objective_after <= rep.objective_before + 1e-9 * (1 + abs(rep.objective_before)), rep


def test_solver_error_names_block(rng, monkeypatch):
    def broken(*args):
        raise np.linalg.LinAlgError("boom")
    monkeypatch.setattr(solver, "update_w", broken)
    p, a, d = _problem(rng, [3, 2], 4)
    with pytest.raises(BlockSolveError) as info:
        device_bcd_iteration(p, a, d, SQ)
    assert info.value.block == "W(1)"


def test_objective_tracking_matches_direct_evaluation(rng):
    p, a, d = _problem(rng, [3, 4, 2], 5)
    p1, a1, reports = device_bcd_iteration(p, a, d, SQ)
    assert reports[0].objective_before == pytest.approx(device_objective(p, a, d, SQ))
    assert reports[-1].objective_after == pytest.approx(device_objective(p1, a1, d, SQ))


# --- oracle suites at reduced size (full size runs in the acceptance module) --

def test_oracles_small_pass():
    results = run_oracle_suites(n_cases=40, seed=1)
    assert len(results) == 5
    assert all(r.passed for r in results), [r.line() for r in results]


def test_oracle_catches_relu_prox_sign_error(monkeypatch):
    orig = solver.update_u_hidden
    monkeypatch.setattr(solver, "update_u_hidden", lambda v, q, p, h: -orig(v, q, p, h))
    (res,) = run_oracle_suites(n_cases=10, names=["relu_prox_block"])
    assert not res.passed


def test_printed_coupling_can_ascend_when_alpha_exceeds_gamma():
    # the printed u updates weight the u - W v fit by gamma, the objective by alpha
    r = seeded_rng(1)
    h = BcdHyper(gamma=0.1, alpha=10.0, loss="squared")
    ups = set()
    for _ in range(20):
        p, a, d = _problem(r, [3, 4, 4, 2], 6)
        for _ in range(3):
            p, a, reports = device_bcd_iteration(p, a, d, h)
            ups |= {rep.block for rep in reports if rep.objective_after > rep.objective_before + 1e-9}
    assert ups and all(b.startswith("U") for b in ups)
