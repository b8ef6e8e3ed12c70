"""Convex inner problem of the penalty CCP optimizer, and its solvers.

Each CCP iteration maximizes

    Qbar(rho) - Zhat(rho; rho_m) - xi * sum(a)

over x = [rho; s; a] subject to the total power budget, rho >= 0, the
Big-M links rho <= P0*s and rho >= P0*(s-1) + eps, one user per
resource block, the convex half s*(s-1) <= 0 of the binary constraint,
its linearized concave half relaxed by the slacks a, and a >= 0.  Qbar
is concave (log of affine), Zhat affine, so the problem is a smooth
concave maximization over a convex set.

Two routes are provided: a primal-dual interior-point method with
log-barriers on every inequality and dense Newton steps (the production
path), and a projected-gradient method using Dykstra's alternating
projections (a slow, independent cross-check for desk-scale problems).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .grid import FrameParams

LOG2 = np.log(2.0)


class SubproblemError(RuntimeError):
    """Solver failure; carries the last residuals for diagnosis."""

    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = residuals


@dataclass
class SubproblemSpec:
    """One convexified CCP subproblem (maximization form).

    dc supplies the smooth objective pieces (qbar / grad_qbar /
    hess_neg_qbar_grid); the linear pieces come from the CCP state at
    the linearization point rho_m, s_m.
    """

    dc: object
    params: FrameParams
    K: int
    P0: float
    N0: float
    eps_bigm: float
    xi: float
    rho_m: np.ndarray
    s_m: np.ndarray
    grad_z_m: np.ndarray
    zbar_m: float
    _lin: tuple = field(default=None, repr=False)

    @property
    def n1(self) -> int:
        return self.params.grid_size * self.K

    @property
    def shape(self):
        return (self.params.M, self.params.N, self.K)

    # -- variable packing -------------------------------------------------

    def pack(self, rho3, s3, a3) -> np.ndarray:
        return np.concatenate([np.ravel(rho3), np.ravel(s3), np.ravel(a3)])

    def unpack(self, x):
        n1 = self.n1
        return (
            x[:n1].reshape(self.shape),
            x[n1:2 * n1].reshape(self.shape),
            x[2 * n1:].reshape(self.shape),
        )

    # -- objective ---------------------------------------------------------

    def zhat(self, rho3) -> float:
        """Affine majorant of Zbar around rho_m."""
        return self.zbar_m + float(np.sum(self.grad_z_m * (rho3 - self.rho_m)))

    def objective(self, rho3, s3, a3) -> float:
        """Penalized concave objective (to be maximized)."""
        return self.dc.qbar(rho3) - self.zhat(rho3) - self.xi * float(np.sum(a3))

    def reference_point(self):
        """The CCP iterate as a feasible point of this subproblem
        (slacks set to the exact linearized-binary violation)."""
        a_ref = np.maximum(self.s_m - self.s_m**2, 0.0)
        return self.rho_m, self.s_m, a_ref

    # -- constraints: A x <= b for the linear rows, then s^2 - s <= 0 ------

    def _linear_rows(self):
        if self._lin is not None:
            return self._lin
        n1 = self.n1
        M, N, K = self.shape
        mn = M * N
        rho_ix = np.arange(n1)
        s_ix = n1 + np.arange(n1)
        a_ix = 2 * n1 + np.arange(n1)
        rows, cols, vals, b = [], [], [], []
        r = 0

        def add_entries(rr, cc, vv):
            rows.append(rr)
            cols.append(cc)
            vals.append(vv)

        # budget: sum(rho) <= P0
        add_entries(np.zeros(n1, dtype=int), rho_ix, np.ones(n1))
        b.append([self.P0])
        r += 1
        # nonnegative power: -rho <= 0
        add_entries(r + np.arange(n1), rho_ix, -np.ones(n1))
        b.append(np.zeros(n1))
        r += n1
        # Big-M upper link: rho - P0 s <= 0
        add_entries(r + np.arange(n1), rho_ix, np.ones(n1))
        add_entries(r + np.arange(n1), s_ix, -self.P0 * np.ones(n1))
        b.append(np.zeros(n1))
        r += n1
        # one user per block: sum_i s[l,k,i] <= 1
        block = np.repeat(np.arange(mn), K)
        add_entries(r + block, s_ix, np.ones(n1))
        b.append(np.ones(mn))
        r += mn
        # Big-M lower link: -rho + P0 s <= P0 - eps
        add_entries(r + np.arange(n1), rho_ix, -np.ones(n1))
        add_entries(r + np.arange(n1), s_ix, self.P0 * np.ones(n1))
        b.append(np.full(n1, self.P0 - self.eps_bigm))
        r += n1
        # linearized binary half: (1 - 2 s_m) s - a <= -s_m^2
        beta = (1.0 - 2.0 * np.ravel(self.s_m))
        add_entries(r + np.arange(n1), s_ix, beta)
        add_entries(r + np.arange(n1), a_ix, -np.ones(n1))
        b.append(-np.ravel(self.s_m) ** 2)
        r += n1
        # nonnegative slack: -a <= 0
        add_entries(r + np.arange(n1), a_ix, -np.ones(n1))
        b.append(np.zeros(n1))
        r += n1

        A = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(r, 3 * n1),
        )
        self._lin = (A, np.concatenate(b))
        return self._lin

    def row_slices(self):
        """Constraint row ranges by family, in constraint_values() order."""
        n1 = self.n1
        mn = self.params.grid_size
        bounds = {}
        r = 0
        for name, size in (
            ("budget", 1), ("rho_nonneg", n1), ("bigm_upper", n1), ("one_user", mn),
            ("bigm_lower", n1), ("slack_link", n1), ("slack_nonneg", n1),
            ("binary_box", n1),
        ):
            bounds[name] = slice(r, r + size)
            r += size
        return bounds

    def constraint_values(self, x) -> np.ndarray:
        """All constraint functions c(x) (feasible iff c <= 0); the
        quadratic binary-box rows s^2 - s come last."""
        A, b = self._linear_rows()
        s = x[self.n1:2 * self.n1]
        return np.concatenate([A @ x - b, s * s - s])

    def num_constraints(self) -> int:
        A, _ = self._linear_rows()
        return A.shape[0] + self.n1

    def kkt_residuals(self, x, lam):
        """(stationarity, primal violation, complementarity), scale-normalized."""
        rho3, _, _ = self.unpack(x)
        g = self._grad_min(x)
        c = self.constraint_values(x)
        J = self._jacobian(x)
        r_dual = g + J.T @ lam
        scale = 1.0 + float(np.linalg.norm(g, np.inf))
        return (
            float(np.linalg.norm(r_dual, np.inf)) / scale,
            float(np.max(np.maximum(c, 0.0))) / (1.0 + abs(self.P0)),
            float(np.max(np.abs(lam * c))) / (1.0 + abs(self.objective(*self.unpack(x)))),
        )

    # -- pieces for the minimization form f = -objective -------------------

    def _grad_min(self, x) -> np.ndarray:
        rho3, _, _ = self.unpack(x)
        g_rho = -(self.dc.grad_qbar(rho3)) + self.grad_z_m
        return np.concatenate(
            [np.ravel(g_rho), np.zeros(self.n1), np.full(self.n1, self.xi)]
        )

    def _jacobian(self, x) -> sp.csr_matrix:
        A, _ = self._linear_rows()
        s = x[self.n1:2 * self.n1]
        n1 = self.n1
        J6 = sp.csr_matrix(
            (2.0 * s - 1.0, (np.arange(n1), n1 + np.arange(n1))),
            shape=(n1, 3 * n1),
        )
        return sp.vstack([A, J6], format="csr")

    def _f_min(self, x) -> float:
        return -self.objective(*self.unpack(x))


# ---------------------------------------------------------------------------
# primal-dual interior-point solver
# ---------------------------------------------------------------------------


def _newton_solver(spec: SubproblemSpec, rho3, s3, lam, c):
    """Factor the reduced Newton system H dx = rhs by block elimination.

    H = hess(-objective) + sum lam_i hess(c_i) + J^T diag(-lam/c) J.
    Only the rho block couples densely (objective curvature + the
    budget row); the a block is diagonal, the s block is K x K
    block-diagonal (the per-block user sum ties users sharing one
    resource block), and the
    rho<->s / s<->a couplings are per-index.  Eliminating a then s
    leaves one dense system of size M*N*K instead of 3*M*N*K.

    Returns (solve, apply): a solver reusable for iterative refinement
    and the matching H matvec.
    """
    n1 = spec.n1
    K = spec.K
    mn = spec.params.grid_size
    rows = spec.row_slices()
    w = -lam / c  # positive barrier weights
    w1 = w[rows["budget"]][0]
    w2, w3 = w[rows["rho_nonneg"]], w[rows["bigm_upper"]]
    w4, w5 = w[rows["one_user"]], w[rows["bigm_lower"]]
    w7, w8 = w[rows["slack_link"]], w[rows["slack_nonneg"]]
    w6 = w[rows["binary_box"]]
    lam6 = lam[rows["binary_box"]]
    beta = 1.0 - 2.0 * np.ravel(spec.s_m)
    sflat = np.ravel(s3)

    # eliminate a: H_aa diagonal, H_sa = diag(-beta*w7)
    d_aa = w7 + w8
    h_sa = -beta * w7
    # s diagonal after a-elimination; the binary box contributes both
    # its constraint curvature and its barrier term
    d_ss_diag = (
        (w3 + w5) * spec.P0**2 + w6 * (2.0 * sflat - 1.0) ** 2 + 2.0 * lam6 + beta**2 * w7
    )
    d_ss = d_ss_diag - h_sa**2 / d_aa
    # per-(l,k) blocks: S = diag(d_ss) + w4 * ones(K,K); invert via
    # Sherman-Morrison on the batch
    d_inv = (1.0 / d_ss).reshape(mn, K)
    denom = 1.0 + w4 * d_inv.sum(axis=1)

    def s_solve(v):  # apply S^{-1} to an (n1,) vector
        vb = v.reshape(mn, K) * d_inv
        corr = (w4 / denom) * vb.sum(axis=1)
        return (vb - corr[:, None] * d_inv).reshape(-1)

    h_rs = -spec.P0 * (w3 + w5)  # diag coupling rho_j <-> s_j

    # dense rho system: H_rr - H_rs S^{-1} H_sr
    Hg = spec.dc.hess_neg_qbar_grid(rho3)
    H = np.kron(Hg, np.ones((K, K)))
    H += w1
    diag_rr = w2 + w3 + w5
    H[np.arange(n1), np.arange(n1)] += diag_rr
    # blockwise correction: for each grid block g, D S_g^{-1} D
    Sg_inv = np.einsum("gi,gj->gij", d_inv, d_inv) * (-(w4 / denom))[:, None, None]
    ii = np.arange(K)
    Sg_inv[:, ii, ii] += d_inv
    hb = h_rs.reshape(mn, K)
    corr = hb[:, :, None] * Sg_inv * hb[:, None, :]
    H4 = H.reshape(mn, K, mn, K)
    idx = np.arange(mn)
    H4[idx, :, idx, :] -= corr

    try:
        cho = sla.cho_factor(H, check_finite=False)
    except np.linalg.LinAlgError:
        H[np.arange(n1), np.arange(n1)] += 1e-10 * (1.0 + np.trace(H) / n1)
        cho = sla.cho_factor(H, check_finite=False)

    def solve(rhs):
        r1, r2, r3 = rhs[:n1], rhs[n1:2 * n1], rhs[2 * n1:]
        r2p = r2 - (h_sa / d_aa) * r3
        rhs_rho = r1 - h_rs * s_solve(r2p)
        d_rho = sla.cho_solve(cho, rhs_rho, check_finite=False)
        d_s = s_solve(r2p - h_rs * d_rho)
        d_a = (r3 - h_sa * d_s) / d_aa
        return np.concatenate([d_rho, d_s, d_a])

    def apply(v):
        v1, v2, v3 = v[:n1], v[n1:2 * n1], v[2 * n1:]
        V = v1.reshape(mn, K)
        out1 = np.repeat(Hg @ V.sum(axis=1), K) + w1 * v1.sum() + diag_rr * v1
        out1 += h_rs * v2
        out2 = h_rs * v1 + d_ss_diag * v2 + np.repeat(w4 * v2.reshape(mn, K).sum(axis=1), K)
        out2 += h_sa * v3
        out3 = h_sa * v2 + d_aa * v3
        return np.concatenate([out1, out2, out3])

    return solve, apply


def _structured_newton_step(spec: SubproblemSpec, rho3, s3, lam, c, rhs, refine: int = 2):
    """Newton direction with a few rounds of iterative refinement (the
    barrier weights span ~1e14 near convergence, so a single solve can
    lose the last digits)."""
    solve, apply = _newton_solver(spec, rho3, s3, lam, c)
    dx = solve(rhs)
    rhs_norm = np.linalg.norm(rhs)
    for _ in range(refine):
        res = rhs - apply(dx)
        if np.linalg.norm(res) <= 1e-13 * (1.0 + rhs_norm):
            break
        dx = dx + solve(res)
    return dx


def _strictly_feasible_start(spec: SubproblemSpec, warm=None):
    """Interior anchor, optionally blended toward a warm-start (rho, s)."""
    shape = spec.shape
    n1 = spec.n1
    s_anchor = np.full(shape, 1.0 / (2.0 * spec.K))
    rho_anchor = np.full(shape, spec.P0 / (4.0 * n1))
    if warm is None:
        rho3, s3 = rho_anchor, s_anchor
    else:
        rho_w = np.clip(warm[0], 0.0, None)
        s_w = np.clip(warm[1], 0.0, 1.0)
        rho3, s3 = rho_anchor, s_anchor
        for theta in (0.95, 0.9, 0.75, 0.5, 0.0):
            cand_rho = theta * rho_w + (1 - theta) * rho_anchor
            cand_s = theta * s_w + (1 - theta) * s_anchor
            x_cand = spec.pack(cand_rho, cand_s, np.ones(shape))
            c = spec.constraint_values(x_cand)
            # ignore the slack-linked rows; slacks are set afterwards
            A, _ = spec._linear_rows()
            keep = np.ones(A.shape[0] + n1, dtype=bool)
            keep[A.shape[0] - 2 * n1:A.shape[0] - n1] = False  # slack-link rows
            if np.all(c[keep] < -1e-12):
                rho3, s3 = cand_rho, cand_s
                break
    c7 = spec.s_m**2 + (1.0 - 2.0 * spec.s_m) * s3
    a3 = np.maximum(c7, 0.0) + 0.1
    return spec.pack(rho3, s3, a3)


def solve_interior_point(
    spec: SubproblemSpec,
    tol: float = 1e-7,
    warm=None,
    max_iter: int = 200,
    mu: float = 10.0,
):
    """Primal-dual interior-point method (dense Newton steps).

    Returns (x, lam, info).  Stops once the surrogate duality gap and
    the dual residual fall below tol relative to the problem scale.
    """
    x = _strictly_feasible_start(spec, warm)
    c = spec.constraint_values(x)
    if np.any(c >= 0):
        raise SubproblemError("could not construct a strictly feasible start")
    lam = -1.0 / c
    m_c = c.size

    def converged(x_, lam_, c_, g_, J_):
        r_dual_ = g_ + J_.T @ lam_
        stat_ = np.linalg.norm(r_dual_, np.inf) / (1.0 + np.linalg.norm(g_, np.inf))
        comp_ = np.max(np.abs(lam_ * c_)) / (1.0 + abs(spec._f_min(x_)))
        return stat_ <= tol and comp_ <= tol, stat_, comp_, r_dual_

    for it in range(max_iter):
        g = spec._grad_min(x)
        J = spec._jacobian(x)
        done, stat, comp, r_dual = converged(x, lam, c, g, J)
        if done:
            return x, lam, {"iterations": it, "stationarity": stat, "complementarity": comp}

        eta = float(-c @ lam)
        t = mu * m_c / eta
        rho3, s3, _ = spec.unpack(x)
        rhs = -g + (1.0 / t) * (J.T @ (1.0 / c))
        dx = _structured_newton_step(spec, rho3, s3, lam, c, rhs)
        Jdx = J @ dx
        dlam = -(lam / c) * Jdx - lam - 1.0 / (t * c)

        # step length: keep lam > 0, then c < 0, then residual decrease
        neg = dlam < 0
        step = 1.0 if not np.any(neg) else min(1.0, 0.99 * np.min(-lam[neg] / dlam[neg]))
        r_norm = np.sqrt(np.linalg.norm(r_dual) ** 2 + np.linalg.norm(-lam * c - 1.0 / t) ** 2)
        ok = False
        for _ in range(40):
            x_new = x + step * dx
            c_new = spec.constraint_values(x_new)
            if np.all(c_new < 0):
                lam_new = lam + step * dlam
                g_new = spec._grad_min(x_new)
                J_new = spec._jacobian(x_new)
                r_new = np.sqrt(
                    np.linalg.norm(g_new + J_new.T @ lam_new) ** 2
                    + np.linalg.norm(-lam_new * c_new - 1.0 / t) ** 2
                )
                if r_new <= (1.0 - 0.01 * step) * r_norm:
                    ok = True
                    break
            step *= 0.5
        if not ok:
            # float64 floor: accept if the KKT contract already holds
            done, stat, comp, _ = converged(x, lam, c, g, J)
            if done:
                return x, lam, {"iterations": it, "stationarity": stat, "complementarity": comp}
            raise SubproblemError(
                f"line search stalled at iteration {it} "
                f"(stationarity {stat:.2e}, complementarity {comp:.2e})",
                residuals=spec.kkt_residuals(x, lam),
            )
        x, lam, c = x_new, lam_new, c_new

    g = spec._grad_min(x)
    J = spec._jacobian(x)
    done, stat, comp, _ = converged(x, lam, c, g, J)
    if done:
        return x, lam, {"iterations": max_iter, "stationarity": stat, "complementarity": comp}
    raise SubproblemError(
        f"iteration limit {max_iter} exceeded "
        f"(stationarity {stat:.2e}, complementarity {comp:.2e})",
        residuals=spec.kkt_residuals(x, lam),
    )


# ---------------------------------------------------------------------------
# projected-gradient fallback (Dykstra projections)
# ---------------------------------------------------------------------------


def _dykstra_project(spec: SubproblemSpec, x0, sweeps=400, tol=1e-11):
    """Euclidean projection onto the feasible set via Dykstra's algorithm.

    All constraint sets are boxes or halfspaces (the binary box
    s*(s-1) <= 0 is exactly s in [0, 1]), so each individual projection
    is closed-form.
    """
    n1 = spec.n1
    K = spec.K
    P0, eps = spec.P0, spec.eps_bigm
    beta = 1.0 - 2.0 * np.ravel(spec.s_m)
    b7 = -np.ravel(spec.s_m) ** 2

    def proj_c1(r, s, a):
        excess = r.sum() - P0
        if excess > 0:
            r = r - excess / r.size
        return r, s, a

    def proj_c2(r, s, a):
        return np.maximum(r, 0.0), s, a

    def proj_c3(r, s, a):
        viol = r - P0 * s
        mask = viol > 0
        f = viol[mask] / (1.0 + P0 * P0)
        r = r.copy()
        s = s.copy()
        r[mask] -= f
        s[mask] += P0 * f
        return r, s, a

    def proj_c4(r, s, a):
        s2 = s.reshape(-1, K)
        excess = s2.sum(axis=1) - 1.0
        s2 = s2 - np.maximum(excess, 0.0)[:, None] / K
        return r, s2.reshape(-1), a

    def proj_c5(r, s, a):
        viol = -r + P0 * s - (P0 - eps)
        mask = viol > 0
        f = viol[mask] / (1.0 + P0 * P0)
        r = r.copy()
        s = s.copy()
        r[mask] += f
        s[mask] -= P0 * f
        return r, s, a

    def proj_c6(r, s, a):
        return r, np.clip(s, 0.0, 1.0), a

    def proj_c7(r, s, a):
        viol = beta * s - a - b7
        mask = viol > 0
        f = viol[mask] / (beta[mask] ** 2 + 1.0)
        s = s.copy()
        a = a.copy()
        s[mask] -= beta[mask] * f
        a[mask] += f
        return r, s, a

    def proj_c8(r, s, a):
        return r, s, np.maximum(a, 0.0)

    projections = [proj_c1, proj_c2, proj_c3, proj_c4, proj_c5, proj_c6, proj_c7, proj_c8]
    x = x0.copy()
    corrections = [np.zeros_like(x) for _ in projections]
    for _ in range(sweeps):
        x_prev = x.copy()
        for idx, proj in enumerate(projections):
            y = x + corrections[idx]
            r, s, a = y[:n1], y[n1:2 * n1], y[2 * n1:]
            r, s, a = proj(r, s, a)
            x_new = np.concatenate([r, s, a])
            corrections[idx] = y - x_new
            x = x_new
        if np.max(np.abs(x - x_prev)) < tol:
            break
    return x


def solve_projected_gradient(
    spec: SubproblemSpec,
    max_iter: int = 20000,
    tol: float = 1e-10,
    x0=None,
):
    """Accelerated projected gradient ascent (Dykstra projections, Nesterov
    momentum with monotone restart); slow independent check for small
    problems."""
    if x0 is None:
        x0 = _strictly_feasible_start(spec)
    x = _dykstra_project(spec, x0)
    x_prev = x.copy()
    f_best = spec.objective(*spec.unpack(x))
    x_best = x.copy()
    step = 1.0
    theta = 1.0
    stall = 0
    for _ in range(max_iter):
        theta_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * theta**2))
        y = x + ((theta - 1.0) / theta_new) * (x - x_prev)
        g = -spec._grad_min(y)  # ascent direction
        f_y = spec.objective(*spec.unpack(_dykstra_project(spec, y)))
        x_new = None
        while step > 1e-14:
            cand = _dykstra_project(spec, y + step * g)
            f_cand = spec.objective(*spec.unpack(cand))
            if f_cand >= f_y - 1e-13 * (1.0 + abs(f_y)):
                x_new, f_new = cand, f_cand
                break
            step *= 0.5
        if x_new is None:
            break
        if f_new < f_best - 1e-13 * (1.0 + abs(f_best)):
            # momentum overshoot: restart from the best point
            x_prev = x_best.copy()
            x = x_best.copy()
            theta = 1.0
            step *= 0.5
            continue
        x_prev, x = x, x_new
        theta = theta_new
        if f_new > f_best + tol * (1.0 + abs(f_best)):
            stall = 0
        else:
            stall += 1
            if stall >= 80:
                break
        if f_new > f_best:
            f_best, x_best = f_new, x_new.copy()
        step = min(step * 1.3, 1e6)
    return x_best, {"objective": f_best}
