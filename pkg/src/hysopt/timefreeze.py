"""Time-freezing reformulation of a delayed-relay hysteresis automaton.

The relay memory ``w`` becomes a continuous state on a new independent
variable (numerical time), alongside a clock state that recovers physical
time.  The ``(psi, w)``-plane is split into four Voronoi cells; the two
cells touching the feasible relay branches carry fields that reproduce the
original dynamics as sliding modes on those branches, while the other two
carry auxiliary fields that transport ``w`` across a jump with the state
and the clock frozen.  Projecting out the frozen intervals recovers the
hybrid solution exactly wherever the clock is running.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from hysopt.automaton import CSV_FLOAT_FMT, HysteresisAutomaton, JumpEvent, SimulationError
from hysopt.controls import ControlSchedule
from hysopt.expr import Expr, ExprFunction, const, power, substitute, var
from hysopt.filippov import PssModel, Segment, Trajectory, integrate_pss

__all__ = [
    "VoronoiPartition",
    "TimeFreezingPSS",
    "PhysicalTrajectory",
    "InvariantViolationError",
    "gamma",
    "aux_ode_a",
    "aux_ode_b",
    "dae_forming_a",
    "dae_forming_b",
    "build_time_freezing",
    "project_physical",
    "projection_matrix",
    "frozen_phases",
    "write_numerical_csv",
    "write_region_grid_csv",
]

DEFAULT_VORONOI_POINTS = np.array(
    [[0.25, -0.25], [0.25, 0.25], [0.75, 0.75], [0.75, 1.25]]
)


class InvariantViolationError(SimulationError):
    """A structural property of the reformulation failed numerically."""


def gamma(psi_val: float, a: float) -> float:
    """Jump-speed profile ``a * p^2 / (1 + p^2)``; zero only at ``p = 0``.

    The profile is bounded by ``a`` and flat at the origin, which makes the
    auxiliary fields tangent (not outward-pointing) at the two junction
    points of the relay characteristic.
    """
    if a <= 0:
        raise ValueError(f"relaxation speed must be positive, got {a}")
    p2 = psi_val * psi_val
    return a * p2 / (1.0 + p2)


def _gamma_expr(p: Expr, a: float) -> Expr:
    p2 = power(p, const(2.0))
    return const(a) * p2 / (const(1.0) + p2)


@dataclass(frozen=True, eq=False)
class VoronoiPartition:
    """Four generator points in the ``(psi, w)``-plane.

    The default symmetric choice puts the cell boundaries exactly on the
    two relay branches ``{w = 0}`` and ``{w = 1}`` and on the diagonal
    ``{psi + w = 1}`` that separates the two jump directions.
    """

    points: np.ndarray = None

    def __post_init__(self):
        pts = DEFAULT_VORONOI_POINTS if self.points is None else np.asarray(self.points, float)
        if pts.shape != (4, 2):
            raise ValueError("partition needs exactly four (psi, w) points")
        for i in range(4):
            for j in range(i + 1, 4):
                if np.allclose(pts[i], pts[j]):
                    raise ValueError(f"degenerate partition: points {i + 1} and {j + 1} coincide")
        object.__setattr__(self, "points", pts)

    def squared_distances(self, psi: float, w: float) -> np.ndarray:
        d = self.points - np.array([psi, w])
        return np.sum(d * d, axis=1)

    def nearest_indices(self, psi: float, w: float, tol: float = 1e-12) -> list[int]:
        d2 = self.squared_distances(psi, w)
        return [int(i) for i in np.flatnonzero(d2 <= d2.min() + tol)]

    def region_index(self, psi: float, w: float) -> int:
        """1-based cell index (ties resolve to the lowest index)."""
        return int(np.argmin(self.squared_distances(psi, w))) + 1


def projection_matrix(n_x: int) -> np.ndarray:
    """Map augmented state ``(x, w, t)`` to hybrid state ``(x, w)``."""
    return np.hstack([np.eye(n_x + 1), np.zeros((n_x + 1, 1))])


@dataclass(frozen=True, eq=False)
class TimeFreezingPSS:
    """Four-region piecewise-smooth system over ``y = (x, w, t)``.

    Regions, in discriminant order: branch-forming field for mode A,
    auxiliary field for the 1->0 jump, auxiliary field for the 0->1 jump,
    branch-forming field for mode B.  The convex midpoint of each
    branch-forming field with its auxiliary partner reproduces the original
    mode dynamics with unit clock rate.
    """

    sys: HysteresisAutomaton
    a: float
    partition: VoronoiPartition
    fields: tuple  # (f_df_a, f_aux_a, f_aux_b, f_df_b) over (y, u)
    discriminants: ExprFunction  # y -> 4 negated squared distances
    model: PssModel

    @property
    def n_x(self) -> int:
        return self.sys.n_x

    @property
    def n_u(self) -> int:
        return self.sys.n_u

    @property
    def n_y(self) -> int:
        return self.sys.n_x + 2

    @property
    def w_index(self) -> int:
        return self.sys.n_x

    @property
    def t_index(self) -> int:
        return self.sys.n_x + 1

    def augment(self, x, w: float, t: float = 0.0) -> np.ndarray:
        return np.concatenate([np.asarray(x, float), [float(w), float(t)]])

    def integrate(
        self,
        x0,
        w0: float,
        controls: ControlSchedule | None = None,
        horizon: float | None = None,
        tau_max: float | None = None,
        tol: float = 1e-7,
        **kwargs,
    ) -> Trajectory:
        """Simulate in numerical time, stopping once the clock reaches
        ``horizon`` (physical seconds) or at ``tau_max``.
        """
        if horizon is None and tau_max is None:
            raise ValueError("need a physical horizon or a numerical-time cap")
        stop = None
        if horizon is not None:
            names = self.discriminants.inputs
            stop = ExprFunction(names, [const(horizon) - var(self.t_index, names[self.t_index])])
            if tau_max is None:
                # Physical motion takes tau = horizon; every jump freezes 2/a.
                # Generous allowance for jumps plus one self-correction.
                tau_max = 2.0 * horizon + 40.0 / self.a + 1.0
        y0 = self.augment(x0, w0, 0.0)
        return integrate_pss(
            self.model, y0, controls=controls, tau_f=tau_max, tol=tol, stop=stop, **kwargs
        )


def aux_ode_a(y, sys: HysteresisAutomaton, a: float) -> np.ndarray:
    """Auxiliary field for the 1->0 jump: moves only ``w``, at rate
    ``-gamma(psi - 1)``; state and clock components are identically zero."""
    x = np.asarray(y, float)[: sys.n_x]
    out = np.zeros(sys.n_x + 2)
    out[sys.n_x] = -gamma(sys.psi_value(x) - 1.0, a)
    return out


def aux_ode_b(y, sys: HysteresisAutomaton, a: float) -> np.ndarray:
    """Auxiliary field for the 0->1 jump: ``w`` rate ``+gamma(psi)``."""
    x = np.asarray(y, float)[: sys.n_x]
    out = np.zeros(sys.n_x + 2)
    out[sys.n_x] = gamma(sys.psi_value(x), a)
    return out


def dae_forming_a(y, u, sys: HysteresisAutomaton, a: float) -> np.ndarray:
    """Branch field for mode A: ``2*(f_A, 0, 1) - aux_A``, so the midpoint
    with the auxiliary field is exactly ``(f_A, 0, 1)``."""
    x = np.asarray(y, float)[: sys.n_x]
    base = np.concatenate([sys.f_a.compiled()(list(x) + list(u)), [0.0, 1.0]])
    return 2.0 * base - aux_ode_a(y, sys, a)


def dae_forming_b(y, u, sys: HysteresisAutomaton, a: float) -> np.ndarray:
    """Branch field for mode B: ``2*(f_B, 0, 1) - aux_B``."""
    x = np.asarray(y, float)[: sys.n_x]
    base = np.concatenate([sys.f_b.compiled()(list(x) + list(u)), [0.0, 1.0]])
    return 2.0 * base - aux_ode_b(y, sys, a)


def build_time_freezing(
    sys: HysteresisAutomaton,
    a: float = 1.0,
    partition: VoronoiPartition | None = None,
    eps_act: float = 1e-9,
) -> TimeFreezingPSS:
    """Assemble the four-region reformulation of ``sys``.

    ``a`` trades jump duration (a frozen phase lasts ``2/a`` numerical
    seconds) against the stiffness of the sliding-mode algebra.
    """
    if a <= 0:
        raise ValueError(f"relaxation speed must be positive, got {a}")
    partition = partition or VoronoiPartition()
    n_x, n_u = sys.n_x, sys.n_u
    n_y = n_x + 2

    x_names = list(sys.psi.inputs)
    u_names = list(sys.f_a.inputs[n_x:])
    y_names = x_names + ["w", "t"]
    yu_names = y_names + u_names

    w = var(n_x, "w")
    psi = sys.psi.outputs[0]  # x variables occupy the same leading indices

    # Mode fields re-indexed from (x, u) to (y, u) input layout.
    shift = {n_x + j: var(n_y + j, name) for j, name in enumerate(u_names)}
    f_a = substitute(sys.f_a.outputs, shift)
    f_b = substitute(sys.f_b.outputs, shift)

    gamma_down = _gamma_expr(psi - const(1.0), a)  # rate of the 1->0 jump
    gamma_up = _gamma_expr(psi, a)  # rate of the 0->1 jump
    zero, two = const(0.0), const(2.0)

    f_aux_a = [zero] * n_x + [const(0.0) - gamma_down, zero]
    f_aux_b = [zero] * n_x + [gamma_up, zero]
    f_df_a = [two * c for c in f_a] + [gamma_down, two]
    f_df_b = [two * c for c in f_b] + [const(0.0) - gamma_up, two]

    g_exprs = []
    for p, q in partition.points:
        d2 = power(psi - const(p), const(2.0)) + power(w - const(q), const(2.0))
        g_exprs.append(const(0.0) - d2)

    fields = tuple(
        ExprFunction(yu_names, outs) for outs in (f_df_a, f_aux_a, f_aux_b, f_df_b)
    )
    discriminants = ExprFunction(y_names, g_exprs)
    model = PssModel(discriminants=discriminants, fields=fields, eps_act=eps_act)
    return TimeFreezingPSS(
        sys=sys,
        a=a,
        partition=partition,
        fields=fields,
        discriminants=discriminants,
        model=model,
    )


# ---------------------------------------------------------------------------
# Physical-time projection


@dataclass
class _PhysPiece:
    t0: float
    t1: float
    segment: Segment
    t_index: int

    def tau_of(self, t: float) -> float:
        """Invert the clock component of the segment (monotone) by bisection."""
        taus = self.segment.taus
        ts = self.segment.ys[:, self.t_index]
        k = int(np.searchsorted(ts, t, side="right") - 1)
        k = min(max(k, 0), len(taus) - 2) if len(taus) > 1 else 0
        lo, hi = taus[k], taus[min(k + 1, len(taus) - 1)]
        if hi <= lo:
            return float(lo)
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if self.segment.eval(mid)[self.t_index] < t:
                lo = mid
            else:
                hi = mid
            if hi - lo <= 1e-15 * max(1.0, abs(hi)):
                break
        return 0.5 * (lo + hi)


class PhysicalTrajectory:
    """Time-freezing run mapped back to the physical time axis.

    Frozen intervals are removed; what remains is the hybrid solution
    ``(x, w)`` with ``w`` snapped to the relay values, plus the jump events
    recovered from the frozen phases.
    """

    def __init__(self, n_x: int, tol_w: float):
        self.n_x = n_x
        self.tol_w = tol_w
        self.pieces: list[_PhysPiece] = []
        self.events: list[JumpEvent] = []
        self.frozen_intervals: list[tuple[float, float]] = []
        self.retained_intervals: list[tuple[float, float]] = []

    @property
    def t_end(self) -> float:
        return self.pieces[-1].t1 if self.pieces else 0.0

    def _snap_w(self, w: float) -> float:
        r = round(w)
        if r in (0.0, 1.0) and abs(w - r) <= self.tol_w:
            return float(r)
        return float(w)

    def eval(self, t: float) -> tuple[np.ndarray, float]:
        if not self.pieces:
            raise SimulationError("empty projected trajectory")
        piece = self.pieces[-1]
        for p in self.pieces:
            if t < p.t1 or p is self.pieces[-1]:
                piece = p
                break
        t_clamped = min(max(t, piece.t0), piece.t1)
        y = piece.segment.eval(piece.tau_of(t_clamped))
        return y[: self.n_x], self._snap_w(y[self.n_x])

    def sample(self, ts) -> tuple[np.ndarray, np.ndarray]:
        xs = np.empty((len(ts), self.n_x))
        ws = np.empty(len(ts))
        for i, t in enumerate(ts):
            xs[i], ws[i] = self.eval(t)
        return xs, ws

    def jump_times(self) -> np.ndarray:
        return np.array([e.t for e in self.events])

    def to_csv(self, path, n_samples: int = 1001):
        """Physical-time export with the same schema as the oracle CSV."""
        grid = np.linspace(0.0, self.t_end, n_samples) if self.pieces else np.zeros(1)
        ts = sorted(set(grid.tolist()) | {e.t for e in self.events})
        event_ts = {e.t for e in self.events}
        header = ",".join(
            ["t"] + [f"x{i + 1}" for i in range(self.n_x)] + ["w", "event"]
        )
        with open(path, "w") as fh:
            fh.write(header + "\n")
            for t in ts:
                x, w = self.eval(t)
                cells = [CSV_FLOAT_FMT % t]
                cells += [CSV_FLOAT_FMT % xi for xi in x]
                wcell = str(int(w)) if w in (0.0, 1.0) else CSV_FLOAT_FMT % w
                cells += [wcell, "1" if t in event_ts else "0"]
                fh.write(",".join(cells) + "\n")


def frozen_phases(traj: Trajectory, t_index: int, freeze_tol: float = 1e-9):
    """Intervals of numerical time during which the clock does not move.

    Returns ``(tau0, tau1, t_value, w_start, w_end)`` per frozen segment.
    """
    phases = []
    for seg in traj.segments:
        rate = np.max(np.abs(seg.fs[:, t_index])) if len(seg.fs) else 0.0
        if rate <= freeze_tol and seg.tau1 > seg.tau0:
            w_col = t_index - 1
            phases.append(
                (
                    seg.tau0,
                    seg.tau1,
                    float(seg.ys[0, t_index]),
                    float(seg.ys[0, w_col]),
                    float(seg.ys[-1, w_col]),
                )
            )
    return phases


def project_physical(
    traj: Trajectory,
    tol_w: float = 1e-6,
    freeze_tol: float = 1e-9,
    n_x: int | None = None,
) -> PhysicalTrajectory:
    """Drop frozen intervals and relabel the trajectory by its clock state.

    The clock must be nondecreasing along the input; a decreasing clock is
    an invariant violation and raises.  Jump events are emitted at the
    physical instant of each frozen phase with the direction implied by the
    relay motion during it.
    """
    if not traj.segments:
        raise SimulationError("cannot project an empty trajectory")
    n_y = traj.model.n_y
    t_index = n_y - 1
    if n_x is None:
        n_x = n_y - 2

    for seg in traj.segments:
        ts = seg.ys[:, t_index]
        if np.any(np.diff(ts) < -1e-9):
            raise InvariantViolationError(
                f"clock decreases inside segment starting at tau={seg.tau0:.6g}"
            )

    out = PhysicalTrajectory(n_x, tol_w)
    for seg in traj.segments:
        rate = np.max(np.abs(seg.fs[:, t_index])) if len(seg.fs) else 0.0
        t0 = float(seg.ys[0, t_index])
        t1 = float(seg.ys[-1, t_index])
        if rate <= freeze_tol:
            if seg.tau1 > seg.tau0:
                out.frozen_intervals.append((seg.tau0, seg.tau1))
                w0 = seg.ys[0, n_x]
                w1 = seg.ys[-1, n_x]
                if abs(w1 - w0) > 0.5:
                    direction = "0->1" if w1 > w0 else "1->0"
                    out.events.append(JumpEvent(t0, direction))
            continue
        if out.pieces and t0 < out.pieces[-1].t1 - 1e-9:
            raise InvariantViolationError(
                f"clock jumps backwards between segments at t={t0:.6g}"
            )
        if t1 > t0:
            out.retained_intervals.append((seg.tau0, seg.tau1))
            out.pieces.append(_PhysPiece(t0, t1, seg, t_index))
    return out


# ---------------------------------------------------------------------------
# CSV exports for the plotting layer


def write_numerical_csv(traj: Trajectory, pss: TimeFreezingPSS, path, n_samples: int = 2001):
    """Numerical-time export: tau, t, x..., w, mode tag, simplex weights."""
    n_x = pss.n_x
    header = (
        ["tau", "t"]
        + [f"x{i + 1}" for i in range(n_x)]
        + ["w", "mode"]
        + [f"theta{i + 1}" for i in range(4)]
    )
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        if not traj.segments:
            return
        grid = np.linspace(0.0, traj.tau_end, n_samples)
        for tau in grid:
            seg = traj._segment_at(tau)
            tau_c = min(max(tau, seg.tau0), seg.tau1)
            y = seg.eval(tau_c)
            if seg.mode[0] == "interior":
                tag = f"interior:{seg.mode[1] + 1}"
            else:
                tag = f"sliding:{seg.mode[1] + 1}-{seg.mode[2] + 1}"
            row = [CSV_FLOAT_FMT % tau, CSV_FLOAT_FMT % y[pss.t_index]]
            row += [CSV_FLOAT_FMT % v for v in y[:n_x]]
            row += [CSV_FLOAT_FMT % y[pss.w_index], tag]
            row += [CSV_FLOAT_FMT % v for v in seg.theta_at(tau_c)]
            fh.write(",".join(row) + "\n")


def write_region_grid_csv(
    pss: TimeFreezingPSS,
    path,
    psi_range=(-0.5, 1.5),
    w_range=(-0.5, 1.5),
    n: int = 101,
):
    """Sample grid of the Voronoi cells in the ``(psi, w)``-plane."""
    psis = np.linspace(*psi_range, n)
    ws = np.linspace(*w_range, n)
    with open(path, "w") as fh:
        fh.write("psi,w,region\n")
        for wv in ws:
            for pv in psis:
                r = pss.partition.region_index(pv, wv)
                fh.write(f"{CSV_FLOAT_FMT % pv},{CSV_FLOAT_FMT % wv},{r}\n")
