"""Direct collocation and relaxation homotopy for time-freezing systems.

The reformulated dynamics are transcribed with two-stage Radau-IIA
(order 3) finite elements.  Each stage carries simplex weights over the
four regional fields plus Stewart-form algebraic variables: with ``ghat``
the squared distances to the Voronoi points, the coupling
``ghat - lam - mu*1 = 0`` with ``lam >= 0`` and ``theta _|_ lam`` selects
the weights supported on the nearest cells.  Element lengths are decision
variables; complementarity products are taken across all stage pairs of an
element and against the boundary multiplier of the previous element, so an
active-set change can only happen at an element boundary and the lengths
adapt to put switches there.  A bounded speed-of-time control per interval
scales the dynamics, making terminal physical time (the objective) a free
variable.

The complementarity products are kept as constraint rows with adjustable
upper bound, so one symbolic problem serves the entire homotopy: each
stage tightens the bound ``sigma`` and re-solves warm-started.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from hysopt.automaton import CSV_FLOAT_FMT, SimulationError
from hysopt.controls import ControlSchedule
from hysopt.expr import ExprFunction, const, substitute, sum_exprs, var
from hysopt.filippov import PssModel, Trajectory, integrate_pss
from hysopt.nlp import Nlp, NlpSolution, SolverOptions, solve
from hysopt.timefreeze import TimeFreezingPSS, project_physical

__all__ = [
    "OcpSpec",
    "CollocationProblem",
    "OcpSolution",
    "HomotopyError",
    "HomotopyOptions",
    "discretize",
    "relax",
    "homotopy_solve",
]

# Radau-IIA, two stages, order 3; the second stage is the right endpoint.
RADAU_C = np.array([1.0 / 3.0, 1.0])
RADAU_A = np.array([[5.0 / 12.0, -1.0 / 12.0], [3.0 / 4.0, 1.0 / 4.0]])
N_STAGES = 2

INF = float("inf")


class HomotopyError(RuntimeError):
    """An NLP stage of the relaxation homotopy failed."""

    def __init__(self, stage: int, sigma: float, status: str):
        super().__init__(
            f"homotopy stage {stage} (sigma={sigma:.3g}) failed with status {status!r}"
        )
        self.stage = stage
        self.sigma = sigma
        self.status = status


@dataclass(frozen=True, eq=False)
class OcpSpec:
    """Optimal control problem on a time-freezing system.

    ``terminal`` lists ``(state_index, value)`` equality targets on the
    original state at the end of the horizon.  ``s_max`` bounds the
    speed-of-time control in ``[1/s_max, s_max]``; ``None`` pins it to 1
    (fixed time scale).  ``objective`` is ``terminal-time`` (minimize the
    clock at the end), or ``feasibility`` (constant zero, for
    simulation-as-optimization).  ``switch_detection=False`` falls back to
    fixed element lengths with per-stage complementarity only.
    """

    pss: TimeFreezingPSS
    x0: np.ndarray
    w0: float
    tau_f: float
    n_intervals: int
    n_fe: int
    terminal: tuple = ()
    s_max: float | None = None
    objective: str = "terminal-time"
    control_penalty: float = 0.0
    switch_detection: bool = True
    h_min_frac: float = 1e-6
    h_max_frac: float = 2.0
    w_lb: float = -0.5
    w_ub: float = 1.5

    def __post_init__(self):
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float))
        object.__setattr__(self, "terminal", tuple(self.terminal))
        if self.tau_f <= 1e-12:
            raise ValueError("numerical horizon must be positive")
        if self.n_intervals < 1 or self.n_fe < 1:
            raise ValueError("need at least one control interval and one element")
        if self.s_max is not None and self.s_max <= 1.0:
            raise ValueError("speed-of-time bound must exceed 1")
        if self.x0.shape != (self.pss.n_x,):
            raise ValueError(f"x0 must have shape ({self.pss.n_x},)")
        if self.objective not in ("terminal-time", "feasibility"):
            raise ValueError(f"unknown objective {self.objective!r}")
        for idx, _ in self.terminal:
            if not 0 <= idx < self.pss.n_x:
                raise ValueError(f"terminal index {idx} outside the state")


class _Layout:
    """Deterministic flat variable indexing for the transcription."""

    def __init__(self, spec: OcpSpec):
        n_y, n_u, n_f = spec.pss.n_y, spec.pss.n_u, 4
        self.n_y, self.n_u, self.n_f = n_y, n_u, n_f
        self.names: list[str] = []
        self.iu = []
        self.i_s = []
        self.ih = []
        self.iy = []
        self.ith = []
        self.il = []
        self.imu = []
        for k in range(spec.n_intervals):
            self.iu.append(self._add([f"u{k}_{c}" for c in range(n_u)]))
            self.i_s.append(self._add([f"s{k}"]))
            ih_k, iy_k, ith_k, il_k, imu_k = [], [], [], [], []
            for n in range(spec.n_fe):
                ih_k.append(self._add([f"h{k}_{n}"]))
                ys, ths, ls, mus = [], [], [], []
                for j in range(N_STAGES):
                    ys.append(self._add([f"y{k}_{n}_{j}_{c}" for c in range(n_y)]))
                    ths.append(self._add([f"th{k}_{n}_{j}_{c}" for c in range(n_f)]))
                    ls.append(self._add([f"lam{k}_{n}_{j}_{c}" for c in range(n_f)]))
                    mus.append(self._add([f"mu{k}_{n}_{j}"]))
                iy_k.append(ys)
                ith_k.append(ths)
                il_k.append(ls)
                imu_k.append(mus)
            self.ih.append(ih_k)
            self.iy.append(iy_k)
            self.ith.append(ith_k)
            self.il.append(il_k)
            self.imu.append(imu_k)
        self.n = len(self.names)

    def _add(self, names) -> int:
        start = len(self.names)
        self.names.extend(names)
        return start


@dataclass(eq=False)
class CollocationProblem:
    """Symbolic transcription plus the reusable NLP behind the homotopy."""

    spec: OcpSpec
    layout: _Layout
    nlp: Nlp
    compl_rows: np.ndarray  # indices of the complementarity product rows
    counts: dict
    v_init: np.ndarray
    lambda00: np.ndarray

    @property
    def n_variables(self) -> int:
        return self.nlp.n

    @property
    def n_equalities(self) -> int:
        return self.nlp.m - len(self.compl_rows)

    @property
    def n_complementarities(self) -> int:
        return len(self.compl_rows)

    def complementarity_residual(self, v) -> float:
        d = self.nlp.derivatives()
        c = d.cons(list(v))
        return float(np.max(c[self.compl_rows])) if len(self.compl_rows) else 0.0


def expected_counts(spec: OcpSpec) -> dict:
    """Closed-form size of the transcription (documented layout formula)."""
    N, n_fe = spec.n_intervals, spec.n_fe
    n_y, n_u, n_f, n_s = spec.pss.n_y, spec.pss.n_u, 4, N_STAGES
    n_vars = N * (n_u + 1 + n_fe * (1 + n_s * (n_y + 2 * n_f + 1)))
    n_eq = N * (1 + n_fe * n_s * (n_y + n_f + 1)) + len(spec.terminal)
    if spec.switch_detection:
        n_compl = N * n_fe * (n_s * n_s + n_s) * n_f
    else:
        n_compl = N * n_fe * n_s * n_f
    return {"variables": n_vars, "equalities": n_eq, "complementarities": n_compl}


def discretize(spec: OcpSpec) -> CollocationProblem:
    """Build the finite-element transcription of ``spec`` as one flat NLP."""
    pss = spec.pss
    lay = _Layout(spec)
    n_y, n_u, n_f = lay.n_y, lay.n_u, lay.n_f
    N, n_fe = spec.n_intervals, spec.n_fe
    h_bar = spec.tau_f / (N * n_fe)

    y0 = pss.augment(spec.x0, spec.w0, 0.0)
    ghat0 = -pss.discriminants.eval(y0)
    lambda00 = ghat0 - ghat0.min()

    def yu_mapping(k, n, j):
        m = {c: var(lay.iy[k][n][j] + c, lay.names[lay.iy[k][n][j] + c]) for c in range(n_y)}
        for c in range(n_u):
            m[n_y + c] = var(lay.iu[k] + c, lay.names[lay.iu[k] + c])
        return m

    # Stage derivatives s * sum_m theta_m f_m(y, u), one expression per
    # component, shared by reference across the collocation rows.
    ydot = {}
    ghat_stage = {}
    for k in range(N):
        s_var = var(lay.i_s[k], lay.names[lay.i_s[k]])
        for n in range(n_fe):
            for j in range(N_STAGES):
                mapping = yu_mapping(k, n, j)
                ths = [
                    var(lay.ith[k][n][j] + m, lay.names[lay.ith[k][n][j] + m])
                    for m in range(n_f)
                ]
                fields = [substitute(f.outputs, mapping) for f in pss.fields]
                comps = []
                for c in range(n_y):
                    mix = sum_exprs([ths[m] * fields[m][c] for m in range(n_f)])
                    comps.append(s_var * mix)
                ydot[k, n, j] = comps
                g_sub = substitute(pss.discriminants.outputs, mapping)
                ghat_stage[k, n, j] = [const(0.0) - g for g in g_sub]

    rows = []
    c_lb_list = []
    c_ub_list = []

    def add_eq(exprs, rhs=0.0):
        for e in exprs:
            rows.append(e)
            c_lb_list.append(rhs)
            c_ub_list.append(rhs)

    for k in range(N):
        for n in range(n_fe):
            h_var = var(lay.ih[k][n], lay.names[lay.ih[k][n]])
            if n == 0 and k == 0:
                y_prev = [const(val) for val in y0]
            elif n == 0:
                base = lay.iy[k - 1][n_fe - 1][N_STAGES - 1]
                y_prev = [var(base + c, lay.names[base + c]) for c in range(n_y)]
            else:
                base = lay.iy[k][n - 1][N_STAGES - 1]
                y_prev = [var(base + c, lay.names[base + c]) for c in range(n_y)]
            for j in range(N_STAGES):
                base = lay.iy[k][n][j]
                yj = [var(base + c, lay.names[base + c]) for c in range(n_y)]
                coll = []
                for c in range(n_y):
                    acc = sum_exprs(
                        [const(RADAU_A[j, jj]) * ydot[k, n, jj][c] for jj in range(N_STAGES)]
                    )
                    coll.append(yj[c] - y_prev[c] - h_var * acc)
                add_eq(coll)
            for j in range(N_STAGES):
                lam = [
                    var(lay.il[k][n][j] + m, lay.names[lay.il[k][n][j] + m])
                    for m in range(n_f)
                ]
                mu = var(lay.imu[k][n][j], lay.names[lay.imu[k][n][j]])
                add_eq(
                    [ghat_stage[k, n, j][m] - lam[m] - mu for m in range(n_f)]
                )
            for j in range(N_STAGES):
                ths = [
                    var(lay.ith[k][n][j] + m, lay.names[lay.ith[k][n][j] + m])
                    for m in range(n_f)
                ]
                add_eq([sum_exprs(ths) - const(1.0)])
        h_vars = [var(lay.ih[k][n], lay.names[lay.ih[k][n]]) for n in range(n_fe)]
        add_eq([sum_exprs(h_vars) - const(spec.tau_f / N)])

    last_y = lay.iy[N - 1][n_fe - 1][N_STAGES - 1]
    for idx, target in spec.terminal:
        add_eq([var(last_y + idx, lay.names[last_y + idx]) - const(float(target))])

    n_eq_rows = len(rows)

    # Complementarity products, appended last so the homotopy can retune
    # their upper bound in place.
    def theta_var(k, n, j, m):
        return var(lay.ith[k][n][j] + m, lay.names[lay.ith[k][n][j] + m])

    def lam_var(k, n, j, m):
        return var(lay.il[k][n][j] + m, lay.names[lay.il[k][n][j] + m])

    for k in range(N):
        for n in range(n_fe):
            if spec.switch_detection:
                for j in range(N_STAGES):
                    for jj in range(N_STAGES):
                        for m in range(n_f):
                            rows.append(theta_var(k, n, j, m) * lam_var(k, n, jj, m))
                            c_lb_list.append(-INF)
                            c_ub_list.append(1.0)
                # Link to the boundary multiplier of the previous element.
                for j in range(N_STAGES):
                    for m in range(n_f):
                        if n == 0 and k == 0:
                            prev_lam = const(float(lambda00[m]))
                        elif n == 0:
                            prev_lam = lam_var(k - 1, n_fe - 1, N_STAGES - 1, m)
                        else:
                            prev_lam = lam_var(k, n - 1, N_STAGES - 1, m)
                        rows.append(theta_var(k, n, j, m) * prev_lam)
                        c_lb_list.append(-INF)
                        c_ub_list.append(1.0)
            else:
                for j in range(N_STAGES):
                    for m in range(n_f):
                        rows.append(theta_var(k, n, j, m) * lam_var(k, n, j, m))
                        c_lb_list.append(-INF)
                        c_ub_list.append(1.0)

    compl_rows = np.arange(n_eq_rows, len(rows))

    # Objective.
    obj_terms = []
    if spec.objective == "terminal-time":
        obj_terms.append(var(last_y + pss.t_index, lay.names[last_y + pss.t_index]))
    if spec.control_penalty > 0.0 and n_u:
        for k in range(N):
            for c in range(n_u):
                uv = var(lay.iu[k] + c, lay.names[lay.iu[k] + c])
                obj_terms.append(const(spec.control_penalty * spec.tau_f / N) * uv * uv)
    objective = ExprFunction(lay.names, [sum_exprs(obj_terms)])
    constraints = ExprFunction(lay.names, rows)

    # Variable bounds.
    lb = np.full(lay.n, -INF)
    ub = np.full(lay.n, INF)
    x_lb = pss.sys.x_lb if pss.sys.x_lb is not None else np.full(pss.n_x, -INF)
    x_ub = pss.sys.x_ub if pss.sys.x_ub is not None else np.full(pss.n_x, INF)
    for k in range(N):
        lb[lay.iu[k] : lay.iu[k] + n_u] = pss.sys.u_lb
        ub[lay.iu[k] : lay.iu[k] + n_u] = pss.sys.u_ub
        if spec.s_max is None:
            lb[lay.i_s[k]] = ub[lay.i_s[k]] = 1.0
        else:
            lb[lay.i_s[k]] = 1.0 / spec.s_max
            ub[lay.i_s[k]] = spec.s_max
        for n in range(n_fe):
            if spec.switch_detection:
                lb[lay.ih[k][n]] = spec.h_min_frac * h_bar
                ub[lay.ih[k][n]] = spec.h_max_frac * h_bar
            else:
                lb[lay.ih[k][n]] = ub[lay.ih[k][n]] = h_bar
            for j in range(N_STAGES):
                base = lay.iy[k][n][j]
                lb[base : base + pss.n_x] = x_lb
                ub[base : base + pss.n_x] = x_ub
                lb[base + pss.w_index] = spec.w_lb
                ub[base + pss.w_index] = spec.w_ub
                lb[base + pss.t_index] = 0.0
                tb = lay.ith[k][n][j]
                lb[tb : tb + n_f] = 0.0
                ub[tb : tb + n_f] = 1.0
                lb[lay.il[k][n][j] : lay.il[k][n][j] + n_f] = 0.0

    nlp = Nlp(objective, constraints, lb, ub, np.array(c_lb_list), np.array(c_ub_list))

    counts = {
        "variables": lay.n,
        "equalities": n_eq_rows,
        "complementarities": len(compl_rows),
    }
    expected = expected_counts(spec)
    assert counts == expected, f"layout drift: {counts} != {expected}"

    v_init = _initial_guess(spec, lay, y0)
    return CollocationProblem(
        spec=spec,
        layout=lay,
        nlp=nlp,
        compl_rows=compl_rows,
        counts=counts,
        v_init=v_init,
        lambda00=lambda00,
    )


def _initial_guess(spec: OcpSpec, lay: _Layout, y0: np.ndarray) -> np.ndarray:
    """Linear state interpolation toward the terminal targets; midpoint
    simplex weights; zero multipliers except the Stewart offset."""
    pss = spec.pss
    N, n_fe = spec.n_intervals, spec.n_fe
    h_bar = spec.tau_f / (N * n_fe)
    y_goal = y0.copy()
    for idx, target in spec.terminal:
        y_goal[idx] = target
    y_goal[pss.t_index] = spec.tau_f

    v = np.zeros(lay.n)
    total_stages = N * n_fe * N_STAGES
    stage = 0
    ghat_fn = pss.discriminants.compiled()
    for k in range(N):
        v[lay.i_s[k]] = 1.0
        for n in range(n_fe):
            v[lay.ih[k][n]] = h_bar
            for j in range(N_STAGES):
                stage += 1
                frac = stage / total_stages
                y_lin = (1 - frac) * y0 + frac * y_goal
                base = lay.iy[k][n][j]
                v[base : base + lay.n_y] = y_lin
                v[lay.ith[k][n][j] : lay.ith[k][n][j] + lay.n_f] = 0.25
                ghat = -np.array(ghat_fn(list(y_lin)))
                v[lay.imu[k][n][j]] = float(np.mean(ghat))
    return v


def relax(problem: CollocationProblem, sigma: float) -> Nlp:
    """Scholtes relaxation: every complementarity product bounded by sigma.

    The (nonnegative) factors keep their bound constraints; only the
    product cap changes, so the returned NLP shares the compiled
    derivatives of the transcription.
    """
    if sigma <= 0:
        raise ValueError("relaxation parameter must be positive")
    problem.nlp.c_ub[problem.compl_rows] = sigma
    return problem.nlp


@dataclass
class HomotopyOptions:
    sigma0: float = 1.0
    kappa: float = 0.1
    sigma_min: float = 1e-9
    nlp_tol: float = 1e-8
    max_iter: int = 600
    resim_tol: float = 1e-9
    # Below this relaxation level the vanished simplex weights are pinned to
    # zero (their values are far below any meaningful magnitude), which
    # removes the degenerate complementarity structure and lets the last
    # stages converge like regular NLPs.  Disable by setting to 0.
    pin_sigma: float = 1e-6
    pin_tol: float = 1e-5


@dataclass
class OcpSolution:
    spec: OcpSpec
    controls: np.ndarray  # (N, n_u)
    speeds: np.ndarray  # (N,)
    h: np.ndarray  # (N, n_fe)
    stage_states: np.ndarray  # (N, n_fe, n_stages, n_y)
    stage_thetas: np.ndarray  # (N, n_fe, n_stages, 4)
    terminal_time: float
    objective: float
    compl_residual: float
    homotopy: list  # (sigma, status, iterations)
    nlp_solution: NlpSolution
    sim_trajectory: Trajectory | None = None
    sim_physical: object | None = None
    terminal_error: float | None = None
    cpu_seconds: float = 0.0

    def control_schedule(self) -> ControlSchedule:
        """Piecewise-constant (u, s) on the numerical-time grid."""
        N = self.spec.n_intervals
        taus = np.arange(N) * self.spec.tau_f / N
        values = np.hstack([self.controls, self.speeds.reshape(-1, 1)])
        return ControlSchedule(taus, values)

    def stats(self) -> dict:
        return {
            "terminal_time": self.terminal_time,
            "terminal_error": self.terminal_error,
            "objective": self.objective,
            "complementarity_residual": self.compl_residual,
            "homotopy_stages": [
                {"sigma": s, "status": st, "iterations": it} for s, st, it in self.homotopy
            ],
            "cpu_seconds": self.cpu_seconds,
        }


def scaled_model(pss: TimeFreezingPSS) -> PssModel:
    """The PSS with fields multiplied by an extra speed-of-time control.

    Controls become ``(u, s)``; used to re-simulate homotopy solutions with
    the event-detecting integrator.
    """
    n_y, n_u = pss.n_y, pss.n_u
    names = list(pss.fields[0].inputs) + ["speed"]
    s_var = var(n_y + n_u, "speed")
    fields = []
    for f in pss.fields:
        fields.append(ExprFunction(names, [s_var * out for out in f.outputs]))
    return PssModel(
        discriminants=pss.discriminants, fields=tuple(fields), eps_act=pss.model.eps_act
    )


def _feasibility_presolve(problem: CollocationProblem, v0, max_iter=40, tol=1e-4):
    """Damped Gauss-Newton on the equality rows from the nominal guess.

    The prescribed initial guess interpolates states linearly, which can be
    strongly dynamics-inconsistent; a handful of minimum-norm corrections
    brings it near the collocation manifold so the barrier solver starts in
    its fast regime.  Bounds are maintained by projection with a small
    interior margin.
    """
    import scipy.sparse as sp
    from scipy.sparse.linalg import splu

    nlp = problem.nlp
    d = nlp.derivatives()
    eq = nlp.c_lb == nlp.c_ub
    eq_idx = np.flatnonzero(eq)
    if not len(eq_idx):
        return v0
    target = nlp.c_lb[eq_idx]
    lo = np.where(nlp.lb > -1e18, nlp.lb + 1e-9 * np.maximum(1, np.abs(nlp.lb)), nlp.lb)
    hi = np.where(nlp.ub < 1e18, nlp.ub - 1e-9 * np.maximum(1, np.abs(nlp.ub)), nlp.ub)
    fixed = nlp.lb == nlp.ub

    v = np.clip(v0, lo, hi)
    v[fixed] = nlp.lb[fixed]
    r = d.cons(list(v))[eq_idx] - target
    best = float(np.max(np.abs(r)))
    for _ in range(max_iter):
        if best <= tol:
            break
        J = d.jacobian(list(v))[eq_idx]
        n, m_eq = nlp.n, len(eq_idx)
        K = sp.bmat(
            [[1e-6 * sp.identity(n), J.T], [J, -1e-10 * sp.identity(m_eq)]],
            format="csc",
        )
        try:
            step = splu(K).solve(np.concatenate([np.zeros(n), -r]))
        except RuntimeError:
            break
        dv = step[:n]
        dv[fixed] = 0.0
        alpha = 1.0
        improved = False
        for _ in range(20):
            v_try = np.clip(v + alpha * dv, lo, hi)
            v_try[fixed] = nlp.lb[fixed]
            try:
                r_try = d.cons(list(v_try))[eq_idx] - target
            except (ArithmeticError, ValueError, OverflowError):
                alpha *= 0.5
                continue
            nrm = float(np.max(np.abs(r_try)))
            if nrm < best:
                v, r, best = v_try, r_try, nrm
                improved = True
                break
            alpha *= 0.5
        if not improved:
            break
    return v


def homotopy_solve(
    problem: CollocationProblem, opts: HomotopyOptions | None = None
) -> OcpSolution:
    """Drive the complementarity bound to zero through warm-started solves.

    After the last stage the optimal controls are re-simulated with the
    sliding-mode integrator and projected to physical time; the terminal
    error reported is the distance of the re-simulated end state to the
    terminal targets.
    """
    opts = opts or HomotopyOptions()
    spec = problem.spec
    lay = problem.layout
    t_start = time.perf_counter()

    sigmas = []
    s = opts.sigma0
    while s > opts.sigma_min:
        sigmas.append(s)
        s *= opts.kappa
    sigmas.append(opts.sigma_min)

    nlp = problem.nlp
    lb_orig = nlp.lb.copy()
    ub_orig = nlp.ub.copy()
    theta_idx = np.array(
        [
            lay.ith[k][n][j] + mm
            for k in range(spec.n_intervals)
            for n in range(spec.n_fe)
            for j in range(N_STAGES)
            for mm in range(4)
        ]
    )
    lam_idx = np.array(
        [
            lay.il[k][n][j] + mm
            for k in range(spec.n_intervals)
            for n in range(spec.n_fe)
            for j in range(N_STAGES)
            for mm in range(4)
        ]
    )

    v = _feasibility_presolve(problem, problem.v_init.copy())
    y_warm = None
    z_warm = None
    history = []
    sol = None
    pinned = False
    try:
        stage = 0
        while stage < len(sigmas):
            sigma = sigmas[stage]
            relax(problem, sigma)
            final = stage == len(sigmas) - 1
            if not pinned and opts.pin_sigma > 0 and sigma <= opts.pin_sigma and stage > 0:
                # Identified active set: pin one factor of each product pair
                # to zero, but only where its partner is decisively nonzero
                # (a weight pins its vanished indicator gap into an exact
                # surface tie - the sliding-mode DAE - and a positive gap
                # pins its weight).  Ambiguous pairs stay relaxed and keep
                # walking the remaining ladder; the pins remove most of the
                # complementarity degeneracy that otherwise stalls it.
                strong = 10.0 * opts.pin_tol
                dead = theta_idx[
                    (np.abs(v[theta_idx]) < opts.pin_tol) & (v[lam_idx] > strong)
                ]
                tied = lam_idx[
                    (np.abs(v[lam_idx]) < opts.pin_tol) & (v[theta_idx] > strong)
                ]
                for idx in (dead, tied):
                    nlp.lb[idx] = 0.0
                    nlp.ub[idx] = 0.0
                    v[idx] = 0.0
                pinned = True
            mu_min = 1e-9 if final else max(1e-11, 1e-3 * sigma)
            stage_opts = SolverOptions(
                tol=opts.nlp_tol if final else max(1e-6, 10 * mu_min),
                max_iter=opts.max_iter,
                mu0=0.1 if stage == 0 else max(sigma * 1e-2, 1e-7),
                mu_min=mu_min,
                # Warm stages must not be pushed off the converged active set.
                bound_push=1e-2 if stage == 0 else 1e-8,
            )
            sol = solve(nlp, v, stage_opts, y0=y_warm, z0=z_warm)
            history.append((sigma, sol.status, sol.iterations))
            if not sol.solved and pinned:
                # Pins may have frozen a wrong weight: lift them and fall
                # back to the plain ladder from the current level.
                nlp.lb[:] = lb_orig
                nlp.ub[:] = ub_orig
                pinned = False
                stage = next(i for i, s in enumerate(sigmas) if s <= opts.pin_sigma)
                sigma = sigmas[stage]
                relax(problem, sigma)
                stage_opts.tol = max(1e-6, 10 * max(1e-11, 1e-3 * sigma))
                sol = solve(nlp, v, stage_opts, y0=y_warm, z0=z_warm)
                history.append((sigma, sol.status, sol.iterations))
            if not sol.solved:
                raise HomotopyError(stage, sigma, sol.status)
            v = sol.v
            y_warm = sol.y
            z_warm = (sol.z_l, sol.z_u)
            stage += 1
    finally:
        nlp.lb[:] = lb_orig
        nlp.ub[:] = ub_orig

    N, n_fe, n_y, n_u = spec.n_intervals, spec.n_fe, lay.n_y, lay.n_u
    controls = np.array([sol.v[lay.iu[k] : lay.iu[k] + n_u] for k in range(N)]).reshape(
        N, n_u
    )
    speeds = np.array([sol.v[lay.i_s[k]] for k in range(N)])
    h = np.array([[sol.v[lay.ih[k][n]] for n in range(n_fe)] for k in range(N)])
    states = np.zeros((N, n_fe, N_STAGES, n_y))
    thetas = np.zeros((N, n_fe, N_STAGES, 4))
    for k in range(N):
        for n in range(n_fe):
            for j in range(N_STAGES):
                b = lay.iy[k][n][j]
                states[k, n, j] = sol.v[b : b + n_y]
                tb = lay.ith[k][n][j]
                thetas[k, n, j] = sol.v[tb : tb + 4]

    result = OcpSolution(
        spec=spec,
        controls=controls,
        speeds=speeds,
        h=h,
        stage_states=states,
        stage_thetas=thetas,
        terminal_time=float(states[-1, -1, -1, spec.pss.t_index]),
        objective=sol.obj,
        compl_residual=problem.complementarity_residual(sol.v),
        homotopy=history,
        nlp_solution=sol,
    )

    # Re-simulate the optimal controls with the event-detecting integrator.
    model = scaled_model(spec.pss)
    y0 = spec.pss.augment(spec.x0, spec.w0, 0.0)
    try:
        traj = integrate_pss(
            model,
            y0,
            controls=result.control_schedule(),
            tau_f=spec.tau_f,
            tol=opts.resim_tol,
        )
        result.sim_trajectory = traj
        phys = project_physical(traj, n_x=spec.pss.n_x)
        result.sim_physical = phys
        if spec.terminal:
            x_end, _ = phys.eval(phys.t_end)
            err = [x_end[idx] - target for idx, target in spec.terminal]
            result.terminal_error = float(np.linalg.norm(err))
    except SimulationError:
        result.terminal_error = None

    result.cpu_seconds = time.perf_counter() - t_start
    return result


def write_solution_csvs(result: OcpSolution, controls_path, trajectory_path):
    """Controls and collocation-trajectory exports for the plotting layer."""
    spec = result.spec
    with open(controls_path, "w") as fh:
        fh.write("interval," + ",".join(f"u{c+1}" for c in range(spec.pss.n_u)) + ",s\n")
        for k in range(spec.n_intervals):
            cells = [str(k)]
            cells += [CSV_FLOAT_FMT % u for u in result.controls[k]]
            cells.append(CSV_FLOAT_FMT % result.speeds[k])
            fh.write(",".join(cells) + "\n")
    n_x = spec.pss.n_x
    with open(trajectory_path, "w") as fh:
        header = (
            ["tau", "t"]
            + [f"x{i+1}" for i in range(n_x)]
            + ["w"]
            + [f"theta{i+1}" for i in range(4)]
        )
        fh.write(",".join(header) + "\n")
        tau = 0.0
        for k in range(spec.n_intervals):
            for n in range(spec.n_fe):
                h = result.h[k, n]
                for j in range(N_STAGES):
                    y = result.stage_states[k, n, j]
                    th = result.stage_thetas[k, n, j]
                    row = [CSV_FLOAT_FMT % (tau + RADAU_C[j] * h)]
                    row.append(CSV_FLOAT_FMT % y[spec.pss.t_index])
                    row += [CSV_FLOAT_FMT % y[c] for c in range(n_x)]
                    row.append(CSV_FLOAT_FMT % y[spec.pss.w_index])
                    row += [CSV_FLOAT_FMT % t for t in th]
                    fh.write(",".join(row) + "\n")
                tau += h
