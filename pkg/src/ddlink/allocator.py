"""Joint power-allocation and symbol-scheduling via penalty CCP.

The sum rate splits into a difference of concave terms, R = Qbar -
Zbar, where both are sums of log2 of affine functions of the power
tensor.  Each outer iteration replaces Zbar by its first-order
expansion at the current iterate (a valid majorant by concavity),
penalizes the slacked binary constraint with an increasing weight xi,
and solves the resulting concave subproblem exactly.  The loop stops
when both the power tensor and the slack tensor settle, or at m_max.

The optimizer works in unscaled log2(1 + SINR) units (the 1/2 pre-log
factor does not move the argmax); reported rates reapply the 1/2.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .access import ScheduleMask, ddma_mask, uniform_power
from .grid import FrameParams
from .linkmodel import LinkBudget, PowerGrid, otfs_sum_rate
from .subproblem import SubproblemError, SubproblemSpec, solve_interior_point

LOG2 = np.log(2.0)


# ---------------------------------------------------------------------------
# DC model: Q/Z values, gradients, curvature
# ---------------------------------------------------------------------------


class DcModel:
    """Difference-of-concave pieces of the sum rate for a fixed channel set.

    For receiver i, u_i[l,k] is the total received power at block (l,k)
    plus noise and v_i the same without the desired term; Qbar = sum
    log2(u), Zbar = sum log2(v) and R = Qbar - Zbar (no pre-log).
    """

    def __init__(self, channels, params: FrameParams, N0: float):
        if N0 <= 0:
            raise ValueError("N0 must be positive")
        self.params = params
        self.N0 = float(N0)
        self.K = len(channels)
        self.weights = [np.array([abs(p.gain) ** 2 for p in ch.paths]) for ch in channels]
        self.delays = [np.array([p.delay_tap for p in ch.paths]) for ch in channels]
        self.dopplers = [np.array([p.doppler_tap for p in ch.paths]) for ch in channels]
        M, N = params.M, params.N
        ll, kk = np.meshgrid(np.arange(M), np.arange(N), indexing="ij")
        # flat grid index of the transmit block feeding receive block (l,k)
        self._src_index = [
            np.stack(
                [((ll - lp) % M) * N + (kk - kp) % N for lp, kp in zip(ls, ks)]
            )
            for ls, ks in zip(self.delays, self.dopplers)
        ]

    def _u_v(self, rho3):
        """Per-receiver total and interference-only power grids (+N0)."""
        total = rho3.sum(axis=2)
        us, vs = [], []
        for i in range(self.K):
            own = rho3[:, :, i]
            u = np.full(total.shape, self.N0)
            for w, lp, kp in zip(self.weights[i], self.delays[i], self.dopplers[i]):
                u += w * np.roll(total, (lp, kp), axis=(0, 1))
            v = u - self.weights[i][0] * np.roll(own, (self.delays[i][0], self.dopplers[i][0]), axis=(0, 1))
            us.append(u)
            vs.append(v)
        return us, vs

    def qbar(self, rho3) -> float:
        us, _ = self._u_v(rho3)
        return float(sum(np.log2(u).sum() for u in us))

    def zbar(self, rho3) -> float:
        _, vs = self._u_v(rho3)
        return float(sum(np.log2(v).sum() for v in vs))

    def rate(self, rho3) -> float:
        """Reported sum rate, 0.5 * (Qbar - Zbar)."""
        return 0.5 * (self.qbar(rho3) - self.zbar(rho3))

    def grad_qbar(self, rho3) -> np.ndarray:
        """d Qbar / d rho; identical for every user layer (Qbar depends on
        rho only through the per-block total)."""
        us, _ = self._u_v(rho3)
        M, N = self.params.M, self.params.N
        g = np.zeros((M, N))
        for i in range(self.K):
            inv_u = 1.0 / us[i]
            for w, lp, kp in zip(self.weights[i], self.delays[i], self.dopplers[i]):
                g += w * np.roll(inv_u, (-lp, -kp), axis=(0, 1))
        g /= LOG2
        return np.repeat(g[:, :, None], self.K, axis=2)

    def grad_zbar(self, rho3) -> np.ndarray:
        """d Zbar / d rho[l,k,i]: every receive block whose MPSI/MUI sum
        contains that transmit block contributes 1/(ln2 * v) times its
        path weight -- the user's own non-desired paths plus every path
        of every other receiver."""
        _, vs = self._u_v(rho3)
        M, N = self.params.M, self.params.N
        T = np.zeros((M, N))
        own_first = []
        for i in range(self.K):
            inv_v = 1.0 / vs[i]
            for w, lp, kp in zip(self.weights[i], self.delays[i], self.dopplers[i]):
                T += w * np.roll(inv_v, (-lp, -kp), axis=(0, 1))
            own_first.append(
                self.weights[i][0]
                * np.roll(inv_v, (-self.delays[i][0], -self.dopplers[i][0]), axis=(0, 1))
            )
        grad = np.empty((M, N, self.K))
        for i in range(self.K):
            grad[:, :, i] = (T - own_first[i]) / LOG2
        return grad

    def hess_neg_qbar_grid(self, rho3) -> np.ndarray:
        """Curvature pattern P (MN x MN) with hess(-Qbar) = kron(P, ones(K,K))."""
        us, _ = self._u_v(rho3)
        mn = self.params.grid_size
        P = np.zeros((mn, mn))
        for i in range(self.K):
            scale = 1.0 / (us[i] ** 2 * LOG2)
            idx = self._src_index[i]
            w = self.weights[i]
            for p in range(len(w)):
                for q in range(len(w)):
                    np.add.at(P, (idx[p].ravel(), idx[q].ravel()), (w[p] * w[q] * scale).ravel())
        return P


# ---------------------------------------------------------------------------
# public DC operations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DcTerms:
    """Qbar / Zbar values and the Zbar gradient at one power tensor."""

    Q_bar: float
    Z_bar: float
    grad_Z: np.ndarray


def dc_decompose(rho3, channels, params: FrameParams, N0: float) -> DcTerms:
    model = DcModel(channels, params, N0)
    rho3 = np.asarray(rho3, dtype=float)
    return DcTerms(model.qbar(rho3), model.zbar(rho3), model.grad_zbar(rho3))


def grad_Zbar(rho3, channels, params: FrameParams, N0: float) -> np.ndarray:
    return DcModel(channels, params, N0).grad_zbar(np.asarray(rho3, dtype=float))


def linearize_Z(rho3, rho_m3, terms_m: DcTerms) -> float:
    """First-order majorant Zhat of Zbar around rho_m."""
    return terms_m.Z_bar + float(np.sum(terms_m.grad_Z * (np.asarray(rho3) - np.asarray(rho_m3))))


# ---------------------------------------------------------------------------
# CCP configuration / state
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CcpConfig:
    """Penalty CCP knobs; None fields scale with the instance at run time:
    delta1 = 1e-3*P0, delta2 = 1e-4*M*N*K, eps_bigm = 1e-6*P0."""

    xi0: float = 1.0
    mu: float = 3.0
    xi_max: float = 1e4
    delta1: float = None
    delta2: float = None
    m_max: int = 50
    eps_bigm: float = None
    solver_tol: float = 1e-7
    round_threshold: float = 0.5

    def __post_init__(self):
        if self.xi0 <= 0 or self.mu < 1 or self.xi_max <= 0 or self.m_max < 1:
            raise ValueError("need xi0 > 0, mu >= 1, xi_max > 0, m_max >= 1")
        if self.solver_tol <= 0:
            raise ValueError("solver_tol must be positive")

    def resolved(self, P0: float, n1: int):
        return (
            self.delta1 if self.delta1 is not None else 1e-3 * P0,
            self.delta2 if self.delta2 is not None else 1e-4 * n1,
            self.eps_bigm if self.eps_bigm is not None else 1e-6 * P0,
        )


@dataclass
class AllocationState:
    """Relaxed optimizer state: powers rho, schedule s in [0,1], slacks a."""

    rho: np.ndarray
    s: np.ndarray
    a: np.ndarray

    def __post_init__(self):
        self.rho = np.asarray(self.rho, dtype=float)
        self.s = np.asarray(self.s, dtype=float)
        self.a = np.asarray(self.a, dtype=float)
        if not (self.rho.shape == self.s.shape == self.a.shape):
            raise ValueError("rho, s, a must share the M x N x K shape")


@dataclass(frozen=True)
class TraceRow:
    iteration: int
    objective: float  # reported sum rate (pre-log 1/2 applied)
    sum_a: float
    xi: float
    drho_l1: float
    da_l1: float


@dataclass
class CcpResult:
    state: AllocationState
    trace: list
    mask: ScheduleMask
    power: PowerGrid
    converged: bool
    iterations: int

    @property
    def final_rate(self) -> float:
        return self.trace[-1].objective if self.trace else float("nan")


# ---------------------------------------------------------------------------
# subproblem plumbing and the CCP loop
# ---------------------------------------------------------------------------


def build_subproblem(
    rho_m,
    s_m,
    xi_m: float,
    channels,
    params: FrameParams,
    budget: LinkBudget,
    eps_bigm: float,
    model: DcModel = None,
) -> SubproblemSpec:
    """Convexified subproblem around (rho_m, s_m) with penalty weight xi_m."""
    model = model or DcModel(channels, params, budget.N0)
    rho_m = np.asarray(rho_m, dtype=float)
    s_m = np.asarray(s_m, dtype=float)
    return SubproblemSpec(
        dc=model,
        params=params,
        K=model.K,
        P0=budget.P0,
        N0=budget.N0,
        eps_bigm=eps_bigm,
        xi=xi_m,
        rho_m=rho_m,
        s_m=s_m,
        grad_z_m=model.grad_zbar(rho_m),
        zbar_m=model.zbar(rho_m),
    )


def solve_subproblem(spec: SubproblemSpec, tol: float = 1e-7, warm=None) -> AllocationState:
    """Solve one subproblem to KKT residuals below tol (interior point)."""
    x, lam, _ = solve_interior_point(spec, tol=tol, warm=warm)
    rho3, s3, a3 = spec.unpack(x)
    return AllocationState(rho3, s3, a3)


def _jittered(rho: np.ndarray, P0: float, amount: float, seed: int) -> np.ndarray:
    """Deterministic multiplicative jitter, renormalized to the budget.

    Uniform inits sit on symmetric saddle points of the DC iteration
    (the surrogate is concave, so CCP cannot leave them); a small
    asymmetry lets the iteration descend into a proper local optimum.
    """
    if amount <= 0:
        return rho
    jit = np.random.default_rng(seed).uniform(1.0 - amount, 1.0 + amount, size=rho.shape)
    rho = rho * jit
    total = rho.sum()
    return rho * (P0 / total) if total > 0 else rho


def default_init(params: FrameParams, K: int, P0: float, jitter: float = 0.05,
                 jitter_seed: int = 0) -> AllocationState:
    """Uniform power on a DDMA mask (feasible for every subproblem
    constraint with the matching binary s),
    with a small deterministic symmetry-breaking jitter on the powers."""
    mask = ddma_mask(params, K)
    rho = _jittered(uniform_power(mask, P0).rho, P0, jitter, jitter_seed)
    return AllocationState(rho, mask.s.astype(float), np.zeros_like(rho))


def multistart_inits(params: FrameParams, K: int, P0: float, jitter: float = 0.05):
    """Deterministic start pool: every valid OMA mask plus each
    single-user full-grid allocation, all with symmetry-breaking jitter."""
    from .access import SCHEME_BUILDERS

    inits = []
    for idx, builder in enumerate(SCHEME_BUILDERS.values()):
        try:
            mask = builder(params, K)
        except ValueError:
            continue
        rho = _jittered(uniform_power(mask, P0).rho, P0, jitter, idx)
        inits.append(AllocationState(rho, mask.s.astype(float), np.zeros_like(rho)))
    mn = params.grid_size
    for u in range(K):
        rho = np.zeros((params.M, params.N, K))
        rho[:, :, u] = P0 / mn
        s = np.zeros_like(rho)
        s[:, :, u] = 1.0
        rho = _jittered(rho, P0, jitter, 100 + u)
        inits.append(AllocationState(rho, s, np.zeros_like(rho)))
    return inits


def penalty_ccp(
    channels,
    params: FrameParams,
    budget: LinkBudget,
    config: CcpConfig = CcpConfig(),
    init: AllocationState = None,
) -> CcpResult:
    """Alternate convexify / solve / increase-penalty until the state settles.

    Stops when ||rho_{m+1} - rho_m||_1 <= delta1 and ||A_{m+1} - A_m||_1
    <= delta2, or after m_max iterations.  The returned schedule is the
    thresholded s with per-block ties broken toward the larger power.
    """
    K = len(channels)
    n1 = params.grid_size * K
    delta1, delta2, eps_bigm = config.resolved(budget.P0, n1)
    model = DcModel(channels, params, budget.N0)
    if init is None:
        init = default_init(params, K, budget.P0)

    rho, s = init.rho, init.s
    a_prev = None
    xi = config.xi0
    trace = []
    state = AllocationState(rho, s, np.zeros_like(rho))
    converged = False
    for m in range(config.m_max):
        spec = build_subproblem(rho, s, xi, channels, params, budget, eps_bigm, model)
        try:
            state = solve_subproblem(spec, tol=config.solver_tol, warm=(rho, s))
        except SubproblemError as exc:
            raise SubproblemError(f"CCP iteration {m}: {exc}", exc.residuals) from exc
        drho = float(np.abs(state.rho - rho).sum())
        da = float(np.abs(state.a - a_prev).sum()) if a_prev is not None else float("inf")
        trace.append(
            TraceRow(m, model.rate(state.rho), float(state.a.sum()), xi, drho, da)
        )
        rho, s, a_prev = state.rho, state.s, state.a
        xi = min(config.mu * xi, config.xi_max)
        if drho <= delta1 and da <= delta2:
            converged = True
            break

    mask, power = round_schedule(state, budget.P0, config.round_threshold)
    return CcpResult(state, trace, mask, power, converged, len(trace))


def penalty_ccp_multistart(
    channels,
    params: FrameParams,
    budget: LinkBudget,
    config: CcpConfig = CcpConfig(),
    jitter: float = 0.05,
) -> CcpResult:
    """Run penalty_ccp from the deterministic start pool and keep the run
    whose rounded schedule scores the best exact sum rate."""
    best = None
    best_rate = -np.inf
    for init in multistart_inits(params, len(channels), budget.P0, jitter):
        result = penalty_ccp(channels, params, budget, config, init)
        rate = evaluate_allocation(result.mask, result.power, channels, params, budget.N0)
        if rate > best_rate:
            best, best_rate = result, rate
    return best


def round_schedule(state: AllocationState, P0: float, threshold: float = 0.5):
    """Threshold the relaxed schedule to a binary mask and rescale powers.

    Per-block ties (several users above threshold) go to the user with
    the largest power; powers are zeroed off-mask and renormalized to
    the budget.
    """
    s_bin = (state.s > threshold).astype(np.int8)
    multi = s_bin.sum(axis=2) > 1
    if np.any(multi):
        winner = np.argmax(np.where(s_bin > 0, state.rho, -np.inf), axis=2)
        fixed = np.zeros_like(s_bin)
        M, N = s_bin.shape[:2]
        ll, kk = np.nonzero(multi)
        fixed[ll, kk, winner[ll, kk]] = 1
        s_bin = np.where(multi[:, :, None], fixed, s_bin)
    rho = state.rho * s_bin
    total = rho.sum()
    if total > 0:
        rho = rho * (P0 / total)
    return ScheduleMask(s_bin), PowerGrid(rho)


def evaluate_allocation(mask: ScheduleMask, power: PowerGrid, channels,
                        params: FrameParams, N0: float) -> float:
    """Exact sum rate of a rounded allocation."""
    return otfs_sum_rate(power, channels, params, N0)


def trace_to_csv(trace, path):
    """Convergence trace as CSV: iteration, objective, sum_a, xi, drho_l1."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "objective", "sum_a", "xi", "drho_l1"])
        for row in trace:
            writer.writerow([row.iteration, repr(row.objective), repr(row.sum_a),
                             repr(row.xi), repr(row.drho_l1)])
