"""Sparse nonlinear programming by a primal-dual interior-point method.

Problems are posed over expression DAGs, so first and second derivatives
are exact and the sparsity pattern is read off the graph once.  The solver
is a monotone barrier method: for each barrier parameter it takes damped
Newton steps on the primal-dual KKT system, with slacks for inequality
rows, a fraction-to-boundary rule, an l1 merit line search, and diagonal
regularization sized by a curvature test on the computed step (the KKT
matrix is kept symmetric quasi-definite so a sparse LU factorization
always exists).

Form:  minimize phi(v)  s.t.  c_lb <= c(v) <= c_ub,  lb <= v <= ub,
with equality rows wherever c_lb == c_ub.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from hysopt.expr import ExprFunction, derive, var

__all__ = ["Nlp", "NlpSolution", "SolverOptions", "solve"]

_BIG = 1e19  # bounds at or beyond this magnitude are treated as absent


def _iter_bits(mask: int):
    while mask:
        lsb = mask & -mask
        yield lsb.bit_length() - 1
        mask ^= lsb


@dataclass
class SolverOptions:
    tol: float = 1e-8
    max_iter: int = 500
    mu0: float = 0.1
    mu_min: float = 1e-9
    kappa_mu: float = 0.2  # barrier reduction factor
    kappa_eps: float = 10.0  # subproblem tolerance = kappa_eps * mu
    tau_min: float = 0.99  # fraction-to-boundary
    delta0: float = 1e-8  # first inertia-correction shift
    delta_max: float = 1e13
    delta_c: float = 1e-11  # constant dual regularization (quasi-definiteness)
    max_ls: int = 25
    alpha_floor: float = 5e-2  # shorter accepted steps trigger more damping
    bound_push: float = 1e-2
    log_path: str | None = None


class Nlp:
    """Constrained program over one flat variable vector.

    Derivatives (gradient, constraint Jacobian, Lagrangian Hessian) are
    built symbolically on first use and compiled; the sparsity pattern is
    fixed by the expression graph and reused across all evaluations.
    """

    def __init__(self, objective: ExprFunction, constraints: ExprFunction, lb, ub, c_lb, c_ub):
        if objective.n_out != 1:
            raise ValueError("objective must be scalar")
        if constraints.n_in != objective.n_in:
            raise ValueError("objective and constraints must share the variable vector")
        self.objective = objective
        self.constraints = constraints
        self.n = objective.n_in
        self.m = constraints.n_out
        self.lb = np.asarray(lb, dtype=float).copy()
        self.ub = np.asarray(ub, dtype=float).copy()
        self.c_lb = np.asarray(c_lb, dtype=float).copy()
        self.c_ub = np.asarray(c_ub, dtype=float).copy()
        if self.lb.shape != (self.n,) or self.ub.shape != (self.n,):
            raise ValueError(f"variable bounds must have shape ({self.n},)")
        if self.c_lb.shape != (self.m,) or self.c_ub.shape != (self.m,):
            raise ValueError(f"constraint bounds must have shape ({self.m},)")
        if np.any(self.lb > self.ub) or np.any(self.c_lb > self.c_ub):
            raise ValueError("bounds must satisfy lb <= ub")
        self._derivs = None

    def derivatives(self) -> "_Derivatives":
        if self._derivs is None:
            self._derivs = _Derivatives(self)
        return self._derivs


class _Derivatives:
    """Compiled objective/constraint values, Jacobian, Lagrangian Hessian."""

    def __init__(self, nlp: Nlp):
        n, m = nlp.n, nlp.m
        self.obj_fn = nlp.objective.compiled()
        self.cons_fn = nlp.constraints.compiled() if m else None

        obj_expr = nlp.objective.outputs[0]
        self.grad_cols = list(_iter_bits(obj_expr.varmask))
        grad_exprs = [derive([obj_expr], j)[0] for j in self.grad_cols]
        self.grad_fn = (
            ExprFunction(nlp.objective.inputs, grad_exprs).compiled() if grad_exprs else None
        )

        # Jacobian: one derivative pass per column over the rows that use it,
        # sharing the memo within the column so common subtrees stay shared.
        rows_of_col = [[] for _ in range(n)]
        for k, out in enumerate(nlp.constraints.outputs):
            for j in _iter_bits(out.varmask):
                rows_of_col[j].append(k)
        jac_rows, jac_cols, jac_exprs = [], [], []
        for j in range(n):
            rows = rows_of_col[j]
            if not rows:
                continue
            d = derive([nlp.constraints.outputs[k] for k in rows], j)
            for k, e in zip(rows, d):
                if not e.is_const(0.0):
                    jac_rows.append(k)
                    jac_cols.append(j)
                    jac_exprs.append(e)
        self.jac_rows = np.array(jac_rows, dtype=np.int64)
        self.jac_cols = np.array(jac_cols, dtype=np.int64)
        self.jac_fn = (
            ExprFunction(nlp.constraints.inputs, jac_exprs).compiled() if jac_exprs else None
        )

        # Lagrangian gradient over extended inputs (v, sigma, lambda); its
        # Jacobian w.r.t. v is the Hessian of sigma*phi + lambda^T c.
        sigma = var(n, "obj_weight")
        lam = [var(n + 1 + k, f"lam{k}") for k in range(m)]
        ext_names = list(nlp.objective.inputs) + ["obj_weight"] + [f"lam{k}" for k in range(m)]
        grad_l = {}
        for idx, j in enumerate(self.grad_cols):
            grad_l[j] = sigma * grad_exprs[idx]
        for k, jc, e in zip(self.jac_rows, self.jac_cols, jac_exprs):
            term = lam[k] * e
            grad_l[jc] = term if jc not in grad_l else grad_l[jc] + term

        cols_of_row_i = [[] for _ in range(n)]
        for i, gexpr in grad_l.items():
            for j in _iter_bits(gexpr.varmask):
                if j < n and j <= i:
                    cols_of_row_i[j].append(i)
        h_rows, h_cols, h_exprs = [], [], []
        for j in range(n):
            rows = cols_of_row_i[j]
            if not rows:
                continue
            d = derive([grad_l[i] for i in rows], j)
            for i, e in zip(rows, d):
                if not e.is_const(0.0):
                    h_rows.append(i)
                    h_cols.append(j)
                    h_exprs.append(e)
        self.hess_rows = np.array(h_rows, dtype=np.int64)
        self.hess_cols = np.array(h_cols, dtype=np.int64)
        self.hess_fn = ExprFunction(ext_names, h_exprs).compiled() if h_exprs else None
        self.n, self.m = n, m

    def objective(self, v_list) -> float:
        return self.obj_fn(v_list)[0]

    def gradient(self, v_list) -> np.ndarray:
        g = np.zeros(self.n)
        if self.grad_fn is not None:
            g[self.grad_cols] = self.grad_fn(v_list)
        return g

    def cons(self, v_list) -> np.ndarray:
        if self.cons_fn is None:
            return np.zeros(0)
        return np.array(self.cons_fn(v_list))

    def jacobian(self, v_list) -> sp.csr_matrix:
        vals = self.jac_fn(v_list) if self.jac_fn is not None else ()
        return sp.csr_matrix(
            (np.array(vals), (self.jac_rows, self.jac_cols)), shape=(self.m, self.n)
        )

    def hessian(self, v_list, obj_weight: float, lam: np.ndarray) -> sp.csr_matrix:
        """Symmetric Hessian of ``obj_weight*phi + lam @ c`` at ``v``."""
        if self.hess_fn is None:
            return sp.csr_matrix((self.n, self.n))
        vals = np.array(self.hess_fn(v_list + [obj_weight] + list(lam)))
        lower = sp.coo_matrix(
            (vals, (self.hess_rows, self.hess_cols)), shape=(self.n, self.n)
        ).tocsr()
        diag = sp.diags(lower.diagonal())
        return lower + lower.T - diag


@dataclass
class NlpSolution:
    v: np.ndarray
    obj: float
    y: np.ndarray  # constraint duals: stationarity is grad + J^T y - z_l + z_u
    z_l: np.ndarray
    z_u: np.ndarray
    status: str  # solved | max-iter | infeasible-detected | regularization-failure
    iterations: int
    residuals: dict
    mu_final: float

    @property
    def solved(self) -> bool:
        return self.status == "solved"


def _init_slacks(c, lo, hi):
    """Feasibility-first slack seeds.

    Where the constraint value already lies inside its box the slack tracks
    it (tiny margin off an exactly-active bound); where it violates, the
    slack sits a generous margin inside so the barrier has room while the
    Newton steps pull the constraint value toward it.
    """
    s = np.asarray(c, dtype=float).copy()
    # Margins scale with the local magnitude so relaxation-sized boxes are
    # not blown open, while grazing a bound still leaves barrier room.
    local = np.maximum.reduce(
        [
            np.abs(np.where(hi < _BIG, hi, 0.0)),
            np.abs(np.where(lo > -_BIG, lo, 0.0)),
            np.abs(c),
            np.full_like(c, 1e-8),
        ]
    )
    margin = 1e-2 * local
    hi_room = np.where(hi < _BIG, hi - margin, np.inf)
    lo_room = np.where(lo > -_BIG, lo + margin, -np.inf)
    s = np.minimum(np.maximum(s, lo_room), hi_room)
    # Thin two-sided boxes: fall back to the midpoint.
    both = (lo > -_BIG) & (hi < _BIG)
    thin = both & ((s <= lo) | (s >= hi))
    s[thin] = 0.5 * (lo + hi)[thin]
    return s


def _push_inside(x, lo, hi, kappa):
    """Move a point strictly inside its box (standard interior-point push)."""
    x = np.asarray(x, dtype=float).copy()
    lo_f = lo > -_BIG
    hi_f = hi < _BIG
    both = lo_f & hi_f
    width = np.where(both, hi - lo, np.inf)
    if np.any(lo_f):
        p = np.minimum(kappa * np.maximum(1.0, np.abs(lo[lo_f])), kappa * width[lo_f])
        x[lo_f] = np.maximum(x[lo_f], lo[lo_f] + p)
    if np.any(hi_f):
        p = np.minimum(kappa * np.maximum(1.0, np.abs(hi[hi_f])), kappa * width[hi_f])
        x[hi_f] = np.minimum(x[hi_f], hi[hi_f] - p)
    return x


def _alpha_max(x, dx, lo, hi, tau) -> float:
    """Largest step keeping boundary distances above (1 - tau) of current."""
    alpha = 1.0
    lo_f = lo > -_BIG
    hi_f = hi < _BIG
    neg = lo_f & (dx < 0)
    if np.any(neg):
        alpha = min(alpha, float(np.min(-tau * (x[neg] - lo[neg]) / dx[neg])))
    pos = hi_f & (dx > 0)
    if np.any(pos):
        alpha = min(alpha, float(np.min(tau * (hi[pos] - x[pos]) / dx[pos])))
    return max(alpha, 0.0)


class _Iterate:
    """Bundles the (v, s, y, z) blocks plus their bound descriptions."""

    def __init__(self, nlp, derivs, v0, mu0, push):
        self.nlp = nlp
        self.d = derivs
        self.eq = nlp.c_lb == nlp.c_ub
        self.ineq_idx = np.flatnonzero(~self.eq)
        self.n_s = len(self.ineq_idx)
        self.s_lb = nlp.c_lb[self.ineq_idx]
        self.s_ub = nlp.c_ub[self.ineq_idx]
        self.fixed_v = nlp.lb == nlp.ub
        self.v = _push_inside(v0, nlp.lb, nlp.ub, push)
        self.v[self.fixed_v] = nlp.lb[self.fixed_v]
        c0 = derivs.cons(list(self.v))
        self.s = _init_slacks(c0[self.ineq_idx], self.s_lb, self.s_ub) if self.n_s else np.zeros(0)
        self.y = np.zeros(nlp.m)
        nz = nlp.n + self.n_s
        # Pinned variables (lb == ub) get no barrier terms; their steps are
        # suppressed by a huge diagonal shift and their stationarity is
        # absorbed by the pin multiplier.
        self.fixed = np.concatenate([self.fixed_v, np.zeros(self.n_s, dtype=bool)])
        self.x_lo = np.concatenate([nlp.lb, self.s_lb])
        self.x_hi = np.concatenate([nlp.ub, self.s_ub])
        self.lo_f = (self.x_lo > -_BIG) & ~self.fixed
        self.hi_f = (self.x_hi < _BIG) & ~self.fixed
        # Barrier-consistent dual seeds (z ~ mu/distance, capped) keep warm
        # starts with tiny boundary distances from opening with huge
        # stationarity; genuinely active bounds redevelop their duals fast.
        x = self.x
        d_lo = np.where(self.lo_f, np.maximum(x - self.x_lo, 1e-12), 1.0)
        d_hi = np.where(self.hi_f, np.maximum(self.x_hi - x, 1e-12), 1.0)
        self.z_lo = np.where(self.lo_f, np.clip(mu0 / d_lo, 1e-8, 1e2), 0.0)
        self.z_hi = np.where(self.hi_f, np.clip(mu0 / d_hi, 1e-8, 1e2), 0.0)

    @property
    def x(self) -> np.ndarray:
        return np.concatenate([self.v, self.s])

    def residual_vector(self, mu):
        """KKT residual blocks at the current iterate for barrier ``mu``."""
        d = self.d
        v_list = list(self.v)
        g = d.gradient(v_list)
        c = d.cons(v_list)
        J = d.jacobian(v_list)
        x = self.x
        lo_f, hi_f = self.lo_f, self.hi_f
        r_stat = np.concatenate([g + J.T @ self.y, -self.y[self.ineq_idx]])
        r_stat -= np.where(lo_f, self.z_lo, 0.0)
        r_stat += np.where(hi_f, self.z_hi, 0.0)
        r_stat[self.fixed] = 0.0  # absorbed by the pin multiplier
        r_feas = c - np.where(self.eq, self.nlp.c_lb, 0.0)
        if self.n_s:
            r_feas[self.ineq_idx] -= self.s
        comp = []
        if np.any(lo_f):
            comp.append(self.z_lo[lo_f] * (x - self.x_lo)[lo_f] - mu)
        if np.any(hi_f):
            comp.append(self.z_hi[hi_f] * (self.x_hi - x)[hi_f] - mu)
        r_comp = np.concatenate(comp) if comp else np.zeros(0)
        return r_stat, r_feas, r_comp, g, c, J

    def error(self, mu, r_stat, r_feas, r_comp) -> float:
        """IPOPT-style scaled optimality error for the barrier problem."""
        s_max = 100.0
        n_du = len(r_stat)
        z_sum = np.sum(np.abs(self.z_lo)) + np.sum(np.abs(self.z_hi))
        y_sum = np.sum(np.abs(self.y))
        s_d = max(s_max, (y_sum + z_sum) / max(1, self.nlp.m + len(self.z_lo))) / s_max
        s_c = max(s_max, z_sum / max(1, len(self.z_lo))) / s_max
        e = 0.0
        if n_du:
            e = np.max(np.abs(r_stat)) / s_d
        if len(r_feas):
            e = max(e, np.max(np.abs(r_feas)))
        if len(r_comp):
            e = max(e, np.max(np.abs(r_comp)) / s_c)
        return float(e)


def solve(nlp: Nlp, v0, opts: SolverOptions | None = None, y0=None, z0=None) -> NlpSolution:
    """Solve ``nlp`` from ``v0``; see module docstring for the method.

    ``y0`` warm-starts the constraint duals and ``z0 = (z_l, z_u)`` the
    variable-bound duals; unsupplied duals are seeded from the barrier
    parameter and the boundary distances.
    """
    opts = opts or SolverOptions()
    d = nlp.derivatives()
    it = _Iterate(nlp, d, np.asarray(v0, dtype=float), opts.mu0, opts.bound_push)
    if y0 is not None and nlp.m:
        it.y = np.asarray(y0, dtype=float).copy()
    if z0 is not None:
        z_l, z_u = z0
        keep = it.lo_f[: nlp.n]
        it.z_lo[: nlp.n][keep] = np.clip(np.asarray(z_l, float)[keep], 1e-12, 1e12)
        keep = it.hi_f[: nlp.n]
        it.z_hi[: nlp.n][keep] = np.clip(np.asarray(z_u, float)[keep], 1e-12, 1e12)

    mu = opts.mu0
    delta_last = 0.0
    status = "max-iter"
    iters = 0
    nu = 1.0  # merit penalty weight
    stall = 0
    log_rows = []

    n, m, n_s = nlp.n, nlp.m, it.n_s
    ineq = it.ineq_idx

    while iters < opts.max_iter:
        r_stat, r_feas, r_comp0, g, c, J = it.residual_vector(0.0)
        e_0 = it.error(0.0, r_stat, r_feas, r_comp0)
        if e_0 <= opts.tol:
            status = "solved"
            break

        r_stat, r_feas, r_comp, g, c, J = it.residual_vector(mu)
        e_mu = it.error(mu, r_stat, r_feas, r_comp)
        if e_mu <= opts.kappa_eps * mu and mu > opts.mu_min:
            # Strictly geometric reduction: superlinear schedules cascade to
            # the floor before the iterate is ready and destabilize the
            # complementarity-degenerate problems this solver exists for.
            mu = max(opts.mu_min, opts.kappa_mu * mu)
            continue

        x = it.x
        lo_f, hi_f = it.lo_f, it.hi_f
        d_lo = np.where(lo_f, x - it.x_lo, 1.0)
        d_hi = np.where(hi_f, it.x_hi - x, 1.0)
        sigma = np.where(lo_f, it.z_lo / d_lo, 0.0) + np.where(hi_f, it.z_hi / d_hi, 0.0)

        # Primal-dual right-hand side with bound duals eliminated.
        barrier_grad = -np.where(lo_f, mu / d_lo, 0.0) + np.where(hi_f, mu / d_hi, 0.0)
        rhs_x = np.concatenate([g + J.T @ it.y, -it.y[ineq]]) + barrier_grad
        rhs_x[it.fixed] = 0.0
        rhs_c = r_feas

        # Fixed variables are constants: drop their rows/columns so they do
        # not poison the KKT conditioning (they rejoin the step as zeros).
        free = ~it.fixed
        free_v = np.flatnonzero(free[:n])
        has_fixed = bool(np.any(it.fixed))
        W = d.hessian(list(it.v), 1.0, it.y)
        W_free = W[free_v][:, free_v].tocsr() if has_fixed else W
        sigma_free = sigma[free]
        rhs_x_free = rhs_x[free]
        n_vf = len(free_v)
        A_full = sp.hstack([J, _slack_block(m, n_s, ineq)]).tocsr() if m else None
        A = A_full[:, np.flatnonzero(free)].tocsr() if (m and has_fixed) else A_full

        def merit(v_try, s_try):
            try:
                f = d.objective(list(v_try))
                c_try = d.cons(list(v_try))
            except (ArithmeticError, ValueError, OverflowError):
                return np.inf
            x_try = np.concatenate([v_try, s_try])
            dl = np.where(lo_f, x_try - it.x_lo, 1.0)
            dh = np.where(hi_f, it.x_hi - x_try, 1.0)
            if np.any(dl <= 0) or np.any(dh <= 0):
                return np.inf
            bar = f - mu * (np.sum(np.log(dl[lo_f])) + np.sum(np.log(dh[hi_f])))
            viol = c_try - np.where(it.eq, nlp.c_lb, 0.0)
            if n_s:
                viol[ineq] -= s_try
            return bar + nu * np.sum(np.abs(viol))

        tau = max(opts.tau_min, 1.0 - mu)
        # Sticky damping: consecutive hard iterations keep a warm shift
        # instead of rediscovering it through failed factorizations.
        delta = 0.0 if delta_last <= opts.delta0 else 0.3 * delta_last
        last_resort = False
        accepted = False
        while True:  # step computation, retried with growing regularization
            H_full = sp.bmat(
                [
                    [W_free + sp.diags(sigma_free[:n_vf] + delta), None],
                    [None, sp.diags(sigma_free[n_vf:] + delta)],
                ]
                if n_s
                else [[W_free + sp.diags(sigma_free[:n_vf] + delta)]]
            )
            if m:
                # The dual shift keeps K quasi-definite (factorization always
                # exists) and selects minimum-norm duals when the constraint
                # Jacobian is rank-deficient, which complementarity-degenerate
                # problems routinely are.
                K = sp.bmat(
                    [[H_full, A.T], [A, -opts.delta_c * sp.identity(m)]], format="csc"
                )
                rhs = np.concatenate([-rhs_x_free, -rhs_c])
            else:
                K = H_full.tocsc()
                rhs = -rhs_x_free
            try:
                lu = splu(K)
                step = lu.solve(rhs)
                for _ in range(2):
                    resid = rhs - K @ step
                    step = step + lu.solve(resid)
            except RuntimeError:
                step = None

            step_ok = False
            if step is not None and np.all(np.isfinite(step)):
                dx_free = step[: len(sigma_free)]
                dx = np.zeros(n + n_s)
                dx[free] = dx_free
                dy = step[len(sigma_free) :] if m else np.zeros(0)
                # Inertia surrogate: the step must see strictly positive
                # curvature (catches indefiniteness; near-null directions of
                # curvature-free Lagrangians are caught by the line search
                # below, which sends us back here with a larger shift).
                curv = float(dx_free @ (H_full @ dx_free))
                step_ok = curv >= 1e-9 * float(dx_free @ dx_free)

            if step_ok:
                dv = dx[:n]
                ds = dx[n:]
                dz_lo = np.where(lo_f, (mu - it.z_lo * dx) / d_lo - it.z_lo, 0.0)
                dz_hi = np.where(hi_f, (mu + it.z_hi * dx) / d_hi - it.z_hi, 0.0)
                a_pri = _alpha_max(x, dx, it.x_lo, it.x_hi, tau)
                # Penalty weight just above the current dual estimate; not
                # monotone, so stale large multipliers cannot poison later
                # line searches.
                nu = 1.0 + (1.1 * float(np.max(np.abs(it.y + dy))) if m else 0.0)
                phi0 = merit(it.v, it.s)
                deriv_est = float(rhs_x @ dx) - nu * np.sum(np.abs(r_feas))
                if deriv_est > 0:
                    deriv_est = -1e-12
                noise = 1e-14 * (1.0 + abs(phi0))
                # Steps acceptable only at microscopic length indicate a
                # nearly singular subproblem (flat complementarity manifold);
                # they trigger heavier damping rather than a crawl.
                floor = 0.0 if last_resort else opts.alpha_floor * a_pri
                alpha = a_pri
                for ls_round in range(opts.max_ls):
                    phi_try = merit(it.v + alpha * dv, it.s + alpha * ds)
                    if phi_try <= phi0 + 1e-4 * alpha * deriv_est + noise:
                        accepted = True
                        break
                    if ls_round == 0 and m:
                        # Second-order correction: re-aim the step at the
                        # constraint values of the rejected trial point, so
                        # constraint curvature does not shrink the step.
                        soc = _soc_direction(
                            nlp, d, it, lu, K, rhs_x_free, r_feas,
                            alpha, dv, ds, free, n, n_s,
                        )
                        if soc is not None:
                            dv2, ds2, dy2, dx2 = soc
                            a2 = _alpha_max(x, dx2, it.x_lo, it.x_hi, tau)
                            phi2 = merit(it.v + a2 * dv2, it.s + a2 * ds2)
                            if phi2 <= phi0 + 1e-4 * a2 * deriv_est + noise:
                                dv, ds, dy, dx = dv2, ds2, dy2, dx2
                                dz_lo = np.where(
                                    lo_f, (mu - it.z_lo * dx) / d_lo - it.z_lo, 0.0
                                )
                                dz_hi = np.where(
                                    hi_f, (mu + it.z_hi * dx) / d_hi - it.z_hi, 0.0
                                )
                                alpha = a2
                                accepted = True
                                break
                    alpha *= 0.5
                    if alpha < floor:
                        break
                if accepted:
                    break

            # No acceptable step at this shift: regularize harder and retry.
            if delta == 0.0:
                delta = opts.delta0
            else:
                delta *= 10.0
            if delta > opts.delta_max:
                if not last_resort:
                    # Allow a crawl on the most damped direction before giving up.
                    delta = opts.delta_max
                    last_resort = True
                else:
                    feas_now = np.max(np.abs(r_feas)) if m else 0.0
                    status = (
                        "infeasible-detected"
                        if feas_now > 100 * opts.tol
                        else "regularization-failure"
                    )
                    return _finish(nlp, it, status, iters, mu, log_rows, opts)
        delta_last = delta

        a_z = min(
            _alpha_max(it.z_lo[lo_f], dz_lo[lo_f], np.zeros(lo_f.sum()), np.full(lo_f.sum(), np.inf), tau)
            if np.any(lo_f)
            else 1.0,
            _alpha_max(it.z_hi[hi_f], dz_hi[hi_f], np.zeros(hi_f.sum()), np.full(hi_f.sum(), np.inf), tau)
            if np.any(hi_f)
            else 1.0,
        )
        stall = stall + 1 if alpha <= 1e-10 else 0
        if stall >= 15:
            feas_now = np.max(np.abs(r_feas)) if m else 0.0
            status = "infeasible-detected" if feas_now > opts.tol else "max-iter"
            return _finish(nlp, it, status, iters, mu, log_rows, opts)

        it.v = it.v + alpha * dv
        it.v[it.fixed_v] = nlp.lb[it.fixed_v]
        it.s = it.s + alpha * ds
        it.y = it.y + alpha * dy if m else it.y
        it.z_lo = np.maximum(it.z_lo + a_z * dz_lo, 0.0)
        it.z_hi = np.maximum(it.z_hi + a_z * dz_hi, 0.0)
        # Keep bound duals compatible with the barrier (IPOPT's kappa-sigma box).
        x_new = it.x
        for zs, dist, mask in (
            (it.z_lo, x_new - it.x_lo, lo_f),
            (it.z_hi, it.x_hi - x_new, hi_f),
        ):
            ref = np.zeros_like(zs)
            np.divide(mu, np.maximum(dist, 1e-300), out=ref, where=mask)
            np.copyto(zs, np.clip(zs, ref / 1e10, ref * 1e10), where=mask)

        iters += 1
        if opts.log_path:
            log_rows.append(
                (iters, mu, float(np.max(np.abs(r_stat))), float(np.max(np.abs(r_feas))) if m else 0.0, alpha, delta)
            )

    return _finish(nlp, it, status, iters, mu, log_rows, opts)


def _slack_block(m, n_s, ineq_idx) -> sp.csr_matrix:
    """The -I block mapping slacks into their inequality rows."""
    if n_s == 0:
        return sp.csr_matrix((m, 0))
    return sp.csr_matrix((-np.ones(n_s), (ineq_idx, np.arange(n_s))), shape=(m, n_s))


def _soc_direction(nlp, d, it, lu, K, rhs_x_free, r_feas, alpha, dv, ds, free, n, n_s):
    """One second-order correction: same KKT matrix, constraints re-evaluated
    at the rejected trial point (IPOPT-style ``c_soc = alpha*c + c(trial)``).
    """
    try:
        c_trial = d.cons(list(it.v + alpha * dv))
    except (ArithmeticError, ValueError, OverflowError):
        return None
    r_trial = c_trial - np.where(it.eq, nlp.c_lb, 0.0)
    if n_s:
        r_trial[it.ineq_idx] -= it.s + alpha * ds
    c_soc = alpha * r_feas + r_trial
    rhs = np.concatenate([-rhs_x_free, -c_soc])
    try:
        step = lu.solve(rhs)
        step = step + lu.solve(rhs - K @ step)
    except RuntimeError:
        return None
    if not np.all(np.isfinite(step)):
        return None
    n_free = len(rhs_x_free)
    dx = np.zeros(n + n_s)
    dx[free] = step[:n_free]
    dy = step[n_free:]
    return dx[:n], dx[n:], dy, dx


def _finish(nlp, it, status, iters, mu, log_rows, opts) -> NlpSolution:
    d = nlp.derivatives()
    v_list = list(it.v)
    g = d.gradient(v_list)
    c = d.cons(v_list)
    J = d.jacobian(v_list)
    z_l = it.z_lo[: nlp.n].copy()
    z_u = it.z_hi[: nlp.n].copy()
    # Pinned variables: both bounds are active, so the pin multiplier can
    # absorb whatever stationarity remains (split by sign for z >= 0).
    if np.any(it.fixed_v):
        r = (g + (J.T @ it.y if nlp.m else 0.0))[it.fixed_v]
        z_l[it.fixed_v] = np.maximum(r, 0.0)
        z_u[it.fixed_v] = np.maximum(-r, 0.0)
    stat = g + (J.T @ it.y if nlp.m else 0.0) - z_l + z_u
    feas = np.zeros(0)
    if nlp.m:
        viol_lo = np.maximum(nlp.c_lb - c, 0.0)
        viol_hi = np.maximum(c - nlp.c_ub, 0.0)
        feas = np.maximum(viol_lo, viol_hi)
    x = it.x
    comps = []
    lo_f = it.x_lo > -_BIG
    hi_f = it.x_hi < _BIG
    if np.any(lo_f):
        comps.append(it.z_lo[lo_f] * (x - it.x_lo)[lo_f])
    if np.any(hi_f):
        comps.append(it.z_hi[hi_f] * (it.x_hi - x)[hi_f])
    comp = float(np.max(np.concatenate(comps))) if comps else 0.0
    residuals = {
        "stationarity": float(np.max(np.abs(stat))) if nlp.n else 0.0,
        "feasibility": float(np.max(feas)) if nlp.m else 0.0,
        "complementarity": comp,
    }
    if status == "solved" and residuals["feasibility"] > 10 * opts.tol:
        status = "infeasible-detected"
    if opts.log_path:
        with open(opts.log_path, "w") as fh:
            fh.write("iterate,mu,stationarity,feasibility,alpha,delta\n")
            for row in log_rows:
                fh.write(",".join(f"{x:.9g}" if isinstance(x, float) else str(x) for x in row) + "\n")
    return NlpSolution(
        v=it.v.copy(),
        obj=d.objective(v_list),
        y=it.y.copy(),
        z_l=z_l,
        z_u=z_u,
        status=status,
        iterations=iters,
        residuals=residuals,
        mu_final=mu,
    )
