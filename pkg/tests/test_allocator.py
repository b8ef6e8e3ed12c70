"""Optimizer tests: DC identities, gradients, subproblem solvers, CCP loop."""

import itertools

import numpy as np
import pytest

from ddlink.access import ddma_mask, uniform_power
from ddlink.allocator import (
    AllocationState,
    CcpConfig,
    DcModel,
    build_subproblem,
    dc_decompose,
    default_init,
    evaluate_allocation,
    grad_Zbar,
    linearize_Z,
    penalty_ccp,
    penalty_ccp_multistart,
    round_schedule,
    solve_subproblem,
    trace_to_csv,
)
from ddlink.channel import UserChannel
from ddlink.grid import FrameParams
from ddlink.linkmodel import LinkBudget, PowerGrid, otfs_sum_rate
from ddlink.subproblem import (
    SubproblemError,
    solve_interior_point,
    solve_projected_gradient,
)
from helpers import random_channel

P22 = FrameParams(M=2, N=2, delta_f=15e3)
P44 = FrameParams(M=4, N=4, delta_f=15e3)


def desk_instance(seed, params=P44, K=2, n_paths=3, snr_db=10.0):
    rng = np.random.default_rng(seed)
    channels = [random_channel(params, n_paths, rng, user_id=u) for u in range(K)]
    budget = LinkBudget.from_snr_db(snr_db, params)
    return channels, budget


def random_feasible_rho(params, K, P0, rng):
    rho = rng.uniform(0.0, 1.0, size=(params.M, params.N, K))
    return rho * (P0 / rho.sum()) * rng.uniform(0.3, 1.0)


# ---------------------------------------------------------------------------
# DC decomposition
# ---------------------------------------------------------------------------


def test_dc_decompose_no_interference_closed_form():
    ch = UserChannel.from_taps([0.8], [0], [0], P22)
    budget = LinkBudget.from_snr_db(10.0, P22)
    rng = np.random.default_rng(0)
    rho = random_feasible_rho(P22, 1, budget.P0, rng)
    terms = dc_decompose(rho, [ch], P22, budget.N0)
    # single path: Z is the constant noise log, Q - Z = log2(1 + w*rho/N0)
    w = 0.8**2
    assert terms.Z_bar == pytest.approx(4 * np.log2(budget.N0), rel=1e-12)
    expected = np.log2(1 + w * rho[:, :, 0] / budget.N0).sum()
    assert terms.Q_bar - terms.Z_bar == pytest.approx(expected, rel=1e-12)


def test_dc_decompose_matches_linkmodel_rate():
    channels, budget = desk_instance(1)
    rng = np.random.default_rng(2)
    rho = random_feasible_rho(P44, 2, budget.P0, rng)
    terms = dc_decompose(rho, channels, P44, budget.N0)
    rate = otfs_sum_rate(PowerGrid(rho), channels, P44, budget.N0)
    assert terms.Q_bar - terms.Z_bar == pytest.approx(2.0 * rate, abs=1e-10)


def test_dc_decompose_zero_power():
    channels, budget = desk_instance(3)
    terms = dc_decompose(np.zeros((4, 4, 2)), channels, P44, budget.N0)
    expected = 4 * 4 * 2 * np.log2(budget.N0)
    assert terms.Q_bar == pytest.approx(expected, rel=1e-12)
    assert terms.Z_bar == pytest.approx(expected, rel=1e-12)


# ---------------------------------------------------------------------------
# gradient of Zbar
# ---------------------------------------------------------------------------


def test_grad_zbar_zero_without_interference():
    ch = UserChannel.from_taps([1.0], [0], [0], P44)
    rng = np.random.default_rng(4)
    rho = rng.uniform(0.1, 1.0, size=(4, 4, 1))
    assert np.all(grad_Zbar(rho, [ch], P44, 0.1) == 0)


def test_grad_zbar_finite_differences():
    channels, budget = desk_instance(5)
    rng = np.random.default_rng(6)
    rho = random_feasible_rho(P44, 2, budget.P0, rng)
    model = DcModel(channels, P44, budget.N0)
    g = model.grad_zbar(rho)
    h = 1e-6 * budget.P0
    worst = 0.0
    for idx in itertools.product(range(4), range(4), range(2)):
        e = np.zeros_like(rho)
        e[idx] = h
        fd = (model.zbar(rho + e) - model.zbar(rho - e)) / (2 * h)
        worst = max(worst, abs(fd - g[idx]) / (1 + abs(g[idx])))
    assert worst < 1e-6


def test_grad_zbar_constant_under_uniform_power():
    # with all-equal powers every interference grid is flat, so the
    # gradient is translation invariant across Doppler (and delay)
    channels, budget = desk_instance(7)
    rho = np.full((4, 4, 2), budget.P0 / 32)
    g = grad_Zbar(rho, channels, P44, budget.N0)
    for i in range(2):
        assert np.max(np.abs(g[:, :, i] - g[0, 0, i])) < 1e-12


# ---------------------------------------------------------------------------
# linearization
# ---------------------------------------------------------------------------


def test_linearize_tangent_at_expansion_point():
    channels, budget = desk_instance(8)
    rng = np.random.default_rng(9)
    rho_m = random_feasible_rho(P44, 2, budget.P0, rng)
    terms = dc_decompose(rho_m, channels, P44, budget.N0)
    assert linearize_Z(rho_m, rho_m, terms) == pytest.approx(terms.Z_bar, rel=1e-12)


def test_linearize_majorizes_zbar_on_samples():
    channels, budget = desk_instance(10)
    rng = np.random.default_rng(11)
    rho_m = random_feasible_rho(P44, 2, budget.P0, rng)
    model = DcModel(channels, P44, budget.N0)
    terms = dc_decompose(rho_m, channels, P44, budget.N0)
    for _ in range(1000):
        rho = random_feasible_rho(P44, 2, budget.P0, rng)
        zhat = linearize_Z(rho, rho_m, terms)
        assert zhat >= model.zbar(rho) - 1e-9


def test_linearize_constant_when_gradient_zero():
    ch = UserChannel.from_taps([1.0], [0], [0], P44)
    budget = LinkBudget.from_snr_db(5.0, P44)
    rng = np.random.default_rng(12)
    rho_m = random_feasible_rho(P44, 1, budget.P0, rng)
    terms = dc_decompose(rho_m, [ch], P44, budget.N0)
    rho = random_feasible_rho(P44, 1, budget.P0, rng)
    assert linearize_Z(rho, rho_m, terms) == pytest.approx(terms.Z_bar, rel=1e-12)


# ---------------------------------------------------------------------------
# subproblem construction and solvers
# ---------------------------------------------------------------------------


def test_subproblem_c7_rows_at_binary_point():
    channels, budget = desk_instance(13, params=P22)
    s_m = np.ones((2, 2, 2))
    rho_m = np.full((2, 2, 2), budget.P0 / 8)
    spec = build_subproblem(rho_m, s_m, 1.0, channels, P22, budget, 1e-6 * budget.P0)
    # C7 at s_m = 1 reads 1 - s <= a
    s = np.full((2, 2, 2), 0.4)
    a = np.full((2, 2, 2), 0.61)
    x = spec.pack(rho_m, s, a)
    c7 = spec.constraint_values(x)[spec.row_slices()["slack_link"]]
    assert np.allclose(c7, (1 - 0.4) - 0.61)


def test_subproblem_anchor_point_feasible():
    channels, budget = desk_instance(14, params=P22)
    spec = build_subproblem(
        np.zeros((2, 2, 2)), np.zeros((2, 2, 2)), 1.0, channels, P22, budget,
        1e-6 * budget.P0,
    )
    rho = np.zeros((2, 2, 2))
    s = np.zeros((2, 2, 2))
    a = np.maximum(spec.s_m - spec.s_m**2, 0.0)
    assert np.all(spec.constraint_values(spec.pack(rho, s, a)) <= 1e-12)


def test_subproblem_objective_tangency_at_reference():
    channels, budget = desk_instance(15)
    rng = np.random.default_rng(16)
    rho_m = random_feasible_rho(P44, 2, budget.P0, rng)
    s_m = rng.uniform(0.1, 0.9, size=(4, 4, 2))
    xi = 3.0
    spec = build_subproblem(rho_m, s_m, xi, channels, P44, budget, 1e-6 * budget.P0)
    model = DcModel(channels, P44, budget.N0)
    rho_ref, s_ref, a_ref = spec.reference_point()
    got = spec.objective(rho_ref, s_ref, a_ref)
    expected = model.qbar(rho_m) - model.zbar(rho_m) - xi * a_ref.sum()
    assert got == pytest.approx(expected, rel=1e-12)


def test_solve_subproblem_single_user_waterfilling():
    # equal gains, no interference: uniform power, s = 1, a = 0
    params = P22
    ch = UserChannel.from_taps([1.0], [0], [0], params)
    budget = LinkBudget.from_snr_db(10.0, params)
    init = default_init(params, 1, budget.P0, jitter=0.0)
    spec = build_subproblem(
        init.rho, init.s, 10.0, [ch], params, budget, 1e-6 * budget.P0
    )
    state = solve_subproblem(spec, tol=1e-8, warm=(init.rho, init.s))
    assert np.max(np.abs(state.rho - budget.P0 / 4)) < 1e-4
    assert np.max(np.abs(state.s - 1.0)) < 1e-3
    assert np.max(state.a) < 1e-5


def test_solve_subproblem_kkt_residuals_below_tol():
    channels, budget = desk_instance(17)
    rng = np.random.default_rng(18)
    rho_m = random_feasible_rho(P44, 2, budget.P0, rng)
    s_m = np.clip(rho_m / rho_m.max(), 0.05, 0.95)
    spec = build_subproblem(rho_m, s_m, 5.0, channels, P44, budget, 1e-6 * budget.P0)
    x, lam, info = solve_interior_point(spec, tol=1e-7, warm=(rho_m, s_m))
    stat, feas, comp = spec.kkt_residuals(x, lam)
    assert stat < 1e-6 and feas <= 0 and comp < 1e-6


def test_solve_subproblem_improves_on_reference_point():
    channels, budget = desk_instance(19)
    rng = np.random.default_rng(20)
    rho_m = random_feasible_rho(P44, 2, budget.P0, rng)
    s_m = rng.uniform(0.2, 0.8, size=(4, 4, 2))
    spec = build_subproblem(rho_m, s_m, 2.0, channels, P44, budget, 1e-6 * budget.P0)
    state = solve_subproblem(spec, tol=1e-7, warm=(rho_m, s_m))
    assert spec.objective(state.rho, state.s, state.a) >= (
        spec.objective(*spec.reference_point()) - 1e-5
    )


def test_solve_subproblem_reports_infeasible_big_m():
    # eps_bigm beyond the budget makes C5 collide with C1; the solver
    # reports the infeasibility instead of crashing
    channels, budget = desk_instance(21, params=P22)
    rho_m = np.full((2, 2, 2), budget.P0 / 8)
    spec = build_subproblem(
        rho_m, np.ones((2, 2, 2)), 1.0, channels, P22, budget, 2.0 * budget.P0
    )
    with pytest.raises(SubproblemError, match="feasible"):
        solve_subproblem(spec, tol=1e-7, warm=(rho_m, np.ones((2, 2, 2))))


def test_interior_point_agrees_with_projected_gradient():
    channels, budget = desk_instance(22, params=P22)
    rng = np.random.default_rng(23)
    rho_m = random_feasible_rho(P22, 2, budget.P0, rng)
    s_m = rng.uniform(0.2, 0.8, size=(2, 2, 2))
    spec = build_subproblem(rho_m, s_m, 4.0, channels, P22, budget, 1e-6 * budget.P0)
    x_ip, _, _ = solve_interior_point(spec, tol=1e-7, warm=(rho_m, s_m))
    f_ip = spec.objective(*spec.unpack(x_ip))
    _, info = solve_projected_gradient(spec, max_iter=3000)
    assert abs(f_ip - info["objective"]) <= 1e-3 * max(1.0, abs(f_ip))


def test_interior_point_beats_feasible_grid_sample():
    # one-sided oracle: every feasible (rho on a simplex grid, s, a) point
    # lower-bounds the subproblem optimum
    channels, budget = desk_instance(24, params=P22)
    rng = np.random.default_rng(25)
    rho_m = random_feasible_rho(P22, 2, budget.P0, rng)
    s_m = rng.uniform(0.2, 0.8, size=(2, 2, 2))
    xi = 2.0
    spec = build_subproblem(rho_m, s_m, xi, channels, P22, budget, 1e-6 * budget.P0)
    x_ip, _, _ = solve_interior_point(spec, tol=1e-7, warm=(rho_m, s_m))
    f_ip = spec.objective(*spec.unpack(x_ip))

    best = -np.inf
    units = 5
    shape = (2, 2, 2)
    s_candidates = np.linspace(0.0, 1.0, 11)
    for comp in itertools.product(range(units + 1), repeat=7):
        rest = units - sum(comp)
        if rest < 0:
            continue
        rho = np.array(list(comp) + [rest], dtype=float).reshape(shape)
        rho *= budget.P0 / units
        # feasible s per block: largest allowed penalty-free-ish choice
        s = np.zeros(shape)
        a = np.zeros(shape)
        ok = True
        for l, k in itertools.product(range(2), range(2)):
            for i in range(2):
                lo = rho[l, k, i] / budget.P0
                cand = s_candidates[s_candidates >= lo - 1e-12]
                if cand.size == 0:
                    ok = False
                    break
                # pick s minimizing slack cost subject to sum_i s <= 1
                s[l, k, i] = cand[0]
            if not ok or s[l, k].sum() > 1 + 1e-12:
                ok = False
                break
            for i in range(2):
                c7 = spec.s_m[l, k, i] ** 2 + (1 - 2 * spec.s_m[l, k, i]) * s[l, k, i]
                a[l, k, i] = max(c7, 0.0)
        if not ok:
            continue
        best = max(best, spec.objective(rho, s, a))
    assert f_ip >= best - 1e-3


# ---------------------------------------------------------------------------
# penalty CCP loop
# ---------------------------------------------------------------------------


def test_ccp_single_user_single_path_closed_form():
    ch = UserChannel.from_taps([1.0], [0], [0], P22)
    budget = LinkBudget.from_snr_db(10.0, P22)
    res = penalty_ccp([ch], P22, budget)
    assert res.converged and res.iterations <= 3
    assert np.max(np.abs(res.state.rho - budget.P0 / 4)) < 1e-3
    snr = budget.snr(P22)
    # internal objective has no pre-log; the reported rate carries the 1/2
    model = DcModel([ch], P22, budget.N0)
    assert model.qbar(res.state.rho) - model.zbar(res.state.rho) == pytest.approx(
        4 * np.log2(1 + snr), rel=1e-4
    )
    assert res.trace[-1].objective == pytest.approx(2 * np.log2(1 + snr), rel=1e-4)


def test_ccp_trace_monotone_subproblem_improvement():
    channels, budget = desk_instance(26, params=P22)
    cfg = CcpConfig(m_max=6)
    init = default_init(P22, 2, budget.P0)
    rho, s = init.rho, init.s
    for m in range(3):
        spec = build_subproblem(rho, s, cfg.xi0 * cfg.mu**m, channels, P22, budget,
                                1e-6 * budget.P0)
        state = solve_subproblem(spec, tol=1e-8, warm=(rho, s))
        f_new = spec.objective(state.rho, state.s, state.a)
        f_ref = spec.objective(*spec.reference_point())
        assert f_new >= f_ref - 1e-6
        rho, s = state.rho, state.s


def test_ccp_binary_convergence_invariant():
    channels, budget = desk_instance(27, params=P22)
    cfg = CcpConfig()
    res = penalty_ccp(channels, P22, budget, config=cfg)
    if res.converged:
        delta2 = 1e-4 * 8
        assert np.max(np.abs(res.state.s * (res.state.s - 1))) <= delta2 + cfg.solver_tol


def test_ccp_dominates_oma_on_seeded_instance():
    channels, budget = desk_instance(28, params=P44, K=2, snr_db=15.0)
    res = penalty_ccp_multistart(channels, P44, budget)
    ccp_rate = evaluate_allocation(res.mask, res.power, channels, P44, budget.N0)
    oma_rate = otfs_sum_rate(
        uniform_power(ddma_mask(P44, 2), budget.P0), channels, P44, budget.N0
    )
    assert ccp_rate >= oma_rate


def test_ccp_output_satisfies_constraints():
    channels, budget = desk_instance(31, params=P22)
    cfg = CcpConfig()
    res = penalty_ccp(channels, P22, budget, config=cfg)
    rho, s = res.state.rho, res.state.s
    tol = 10 * cfg.solver_tol * budget.P0
    assert rho.sum() <= budget.P0 + tol
    assert np.all(rho >= -tol)
    assert np.all(rho <= budget.P0 * s + tol)
    assert np.all(s.sum(axis=2) <= 1 + tol)
    eps_bigm = 1e-6 * budget.P0
    assert np.all(rho >= budget.P0 * (s - 1) + eps_bigm - tol)
    # the one-user-per-block rule holds exactly after rounding (the mask
    # constructor enforces it)
    assert np.all(res.mask.s.sum(axis=2) <= 1)
    assert res.power.total() == pytest.approx(budget.P0, rel=1e-9)


# ---------------------------------------------------------------------------
# rounding
# ---------------------------------------------------------------------------


def test_round_schedule_identity_on_binary():
    s = np.zeros((2, 2, 2))
    s[:, :, 0] = 1.0
    rho = np.where(s > 0, 0.5, 0.0)
    mask, power = round_schedule(AllocationState(rho, s, np.zeros_like(s)), P0=2.0)
    assert np.array_equal(mask.s, s.astype(int))
    assert power.total() == pytest.approx(2.0)


def test_round_schedule_threshold_and_tie_break():
    s = np.zeros((1, 1, 2))
    s[0, 0, :] = [0.5001, 0.9]
    rho = np.zeros((1, 1, 2))
    rho[0, 0, :] = [3.0, 1.0]
    mask, power = round_schedule(
        AllocationState(rho, s, np.zeros_like(s)), P0=1.0, threshold=0.5
    )
    # both exceed the threshold; the larger power wins the block
    assert mask.s[0, 0, 0] == 1 and mask.s[0, 0, 1] == 0
    assert power.rho[0, 0, 0] == pytest.approx(1.0)
    sub = np.zeros((1, 1, 1))
    sub[0, 0, 0] = 0.5001
    m2, _ = round_schedule(AllocationState(np.ones_like(sub), sub, np.zeros_like(sub)), 1.0)
    assert m2.s[0, 0, 0] == 1


def test_rounded_rate_close_to_relaxed_objective():
    channels, budget = desk_instance(29, params=P22)
    res = penalty_ccp(channels, P22, budget)
    rounded = evaluate_allocation(res.mask, res.power, channels, P22, budget.N0)
    relaxed = res.trace[-1].objective
    assert rounded >= relaxed * 0.98


def test_trace_csv_export(tmp_path):
    channels, budget = desk_instance(30, params=P22)
    res = penalty_ccp(channels, P22, budget, config=CcpConfig(m_max=3))
    path = tmp_path / "trace.csv"
    trace_to_csv(res.trace, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "iteration,objective,sum_a,xi,drho_l1"
    assert len(lines) == 1 + len(res.trace)
