"""Delayed-relay hysteresis automaton and its event-driven reference simulator.

The automaton has two smooth modes ``f_A`` (relay state ``w = 0``) and
``f_B`` (``w = 1``) coupled through a scalar switching function ``psi``:
the relay flips 0 to 1 when ``psi`` reaches 1 from below and 1 to 0 when
``psi`` reaches 0 from above, with the continuous state unchanged at the
flip.  ``simulate_oracle`` integrates the active mode with an adaptive
Runge-Kutta scheme, localizes guard crossings by bisection on the dense
step, and applies the jump law exactly.  It is deliberately independent of
the piecewise-smooth reformulation elsewhere in the package so the two can
be checked against each other.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from hysopt.controls import ControlSchedule
from hysopt.expr import ExprFunction

__all__ = [
    "HysteresisAutomaton",
    "HybridTrajectory",
    "JumpEvent",
    "SimulationError",
    "ZenoSuspicionError",
    "InvalidInitializationError",
    "hybrid_rhs",
    "simulate_oracle",
]

CSV_FLOAT_FMT = "%.17g"


class SimulationError(RuntimeError):
    """Numerical failure during simulation."""


class ZenoSuspicionError(SimulationError):
    """Event cap hit: switching may be accumulating."""


class InvalidInitializationError(ValueError):
    """Initial state violates the relay's branch condition."""


@dataclass(frozen=True, eq=False)
class HysteresisAutomaton:
    """Two-mode hybrid system with delayed-relay switching.

    ``f_a`` and ``f_b`` map ``(x, u)`` to the state derivative; ``psi`` maps
    ``x`` to the scalar switching value.  Control bounds are required (empty
    arrays for autonomous systems); state path bounds are optional and only
    consumed by the optimal-control layer.
    """

    f_a: ExprFunction
    f_b: ExprFunction
    psi: ExprFunction
    u_lb: np.ndarray = field(default_factory=lambda: np.zeros(0))
    u_ub: np.ndarray = field(default_factory=lambda: np.zeros(0))
    x_lb: np.ndarray | None = None
    x_ub: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "u_lb", np.asarray(self.u_lb, dtype=float))
        object.__setattr__(self, "u_ub", np.asarray(self.u_ub, dtype=float))
        n_x = self.psi.n_in
        n_u = self.f_a.n_in - n_x
        if self.psi.n_out != 1:
            raise ValueError("psi must have exactly one output")
        if n_u < 0 or self.f_b.n_in != self.f_a.n_in:
            raise ValueError("f_A and f_B must share the input layout (x, u)")
        if self.f_a.n_out != n_x or self.f_b.n_out != n_x:
            raise ValueError(f"mode fields must output {n_x} components")
        if self.u_lb.shape != (n_u,) or self.u_ub.shape != (n_u,):
            raise ValueError(f"control bounds must have shape ({n_u},)")
        if np.any(self.u_lb > self.u_ub):
            raise ValueError("control bounds must satisfy lb <= ub")
        for b in (self.x_lb, self.x_ub):
            if b is not None and np.asarray(b).shape != (n_x,):
                raise ValueError(f"state bounds must have shape ({n_x},)")
        if self.x_lb is not None and self.x_ub is not None:
            if np.any(np.asarray(self.x_lb) > np.asarray(self.x_ub)):
                raise ValueError("state bounds must satisfy lb <= ub")

    @property
    def n_x(self) -> int:
        return self.psi.n_in

    @property
    def n_u(self) -> int:
        return self.f_a.n_in - self.psi.n_in

    @classmethod
    def from_strings(
        cls,
        variables,
        controls,
        f_a,
        f_b,
        psi,
        u_lb=None,
        u_ub=None,
        x_lb=None,
        x_ub=None,
    ) -> "HysteresisAutomaton":
        names = list(variables) + list(controls)
        n_u = len(controls)
        return cls(
            f_a=ExprFunction.parse(names, f_a),
            f_b=ExprFunction.parse(names, f_b),
            psi=ExprFunction.parse(list(variables), [psi]),
            u_lb=np.full(n_u, -np.inf) if u_lb is None else np.asarray(u_lb, float),
            u_ub=np.full(n_u, np.inf) if u_ub is None else np.asarray(u_ub, float),
            x_lb=None if x_lb is None else np.asarray(x_lb, float),
            x_ub=None if x_ub is None else np.asarray(x_ub, float),
        )

    def psi_value(self, x) -> float:
        return self.psi.compiled()(list(x))[0]


def hybrid_rhs(sys: HysteresisAutomaton, x, w, u=()) -> np.ndarray:
    """Mode-selected derivative: ``f_A`` when ``w = 0``, ``f_B`` when ``w = 1``."""
    if w not in (0, 1):
        raise ValueError(f"relay state must be 0 or 1, got {w!r}")
    args = list(x) + list(u)
    f = sys.f_b if w else sys.f_a
    return np.array(f.compiled()(args))


@dataclass(frozen=True)
class JumpEvent:
    t: float
    direction: str  # "0->1" or "1->0"


@dataclass(frozen=True)
class _Piece:
    """One dense integration leg with constant relay state."""

    t0: float
    t1: float
    w: int
    sol: object  # scipy OdeSolution over [t0, t1]

    def eval(self, t: float) -> np.ndarray:
        return np.atleast_1d(self.sol(t))


class HybridTrajectory:
    """Dense record of an oracle run: pieces of constant ``w`` plus jumps."""

    def __init__(self, x0, w0: int):
        self.x0 = np.asarray(x0, dtype=float)
        self.w0 = int(w0)
        self.pieces: list[_Piece] = []
        self.events: list[JumpEvent] = []

    @property
    def t_end(self) -> float:
        return self.pieces[-1].t1 if self.pieces else 0.0

    def eval(self, t: float) -> tuple[np.ndarray, int]:
        """State and relay value at physical time ``t``.

        At a jump instant the post-jump relay value is reported, matching the
        right-continuous convention of the jump law.
        """
        if not self.pieces:
            return self.x0.copy(), self.w0
        if t <= self.pieces[0].t0:
            return self.pieces[0].eval(self.pieces[0].t0), self.pieces[0].w
        for piece in self.pieces:
            if t < piece.t1 or piece is self.pieces[-1]:
                tc = min(max(t, piece.t0), piece.t1)
                return piece.eval(tc), piece.w
        raise AssertionError("unreachable")

    def sample(self, ts) -> tuple[np.ndarray, np.ndarray]:
        xs = np.empty((len(ts), len(self.x0)))
        ws = np.empty(len(ts), dtype=int)
        for i, t in enumerate(ts):
            xs[i], ws[i] = self.eval(t)
        return xs, ws

    def jump_times(self) -> np.ndarray:
        return np.array([e.t for e in self.events])

    def to_csv(self, path, n_samples: int = 1001):
        """Write ``t, x1..xn, w, event`` rows on a uniform grid plus events."""
        grid = np.linspace(0.0, self.t_end, n_samples) if self.pieces else np.zeros(1)
        ts = sorted(set(grid.tolist()) | {e.t for e in self.events})
        event_ts = {e.t for e in self.events}
        n_x = len(self.x0)
        header = ",".join(["t"] + [f"x{i + 1}" for i in range(n_x)] + ["w", "event"])
        with open(path, "w") as fh:
            fh.write(header + "\n")
            for t in ts:
                x, w = self.eval(t)
                cells = [CSV_FLOAT_FMT % t]
                cells += [CSV_FLOAT_FMT % xi for xi in x]
                cells += [str(w), "1" if t in event_ts else "0"]
                fh.write(",".join(cells) + "\n")


def _bisect_guard(sol, guard, t_lo: float, t_hi: float, tol_event: float) -> float:
    """Bisection on a dense step until the guard value is within tolerance.

    ``guard(x)`` changes sign on ``[t_lo, t_hi]`` for the dense solution
    ``sol``; returns the localized crossing time.
    """
    g_lo = guard(sol(t_lo))
    if abs(g_lo) <= tol_event:
        return t_lo
    for _ in range(200):
        t_mid = 0.5 * (t_lo + t_hi)
        g_mid = guard(sol(t_mid))
        if abs(g_mid) <= tol_event or t_hi - t_lo <= 4 * math.ulp(t_hi):
            return t_mid
        if (g_mid > 0) == (g_lo > 0):
            t_lo = t_mid
        else:
            t_hi = t_mid
    return 0.5 * (t_lo + t_hi)


def simulate_oracle(
    sys: HysteresisAutomaton,
    x0,
    w0: int,
    controls: ControlSchedule | None = None,
    horizon: float = 1.0,
    rtol: float = 1e-8,
    atol: float = 1e-10,
    tol_event: float = 1e-10,
    max_events: int = 10_000,
    max_step: float = np.inf,
) -> HybridTrajectory:
    """Reference simulation of the hysteresis automaton.

    The active mode is integrated with adaptive RK45; the guard
    (``psi - 1`` while ``w = 0``, ``psi`` while ``w = 1``) is monitored and
    its zero crossing localized by bisection on the dense step to
    ``|guard| <= tol_event``.  Jumps keep ``x`` continuous and flip ``w``.

    Initialization must lie strictly inside the active branch; starting
    exactly on the guard triggers the jump immediately, starting beyond it
    raises :class:`InvalidInitializationError`.
    """
    x0 = np.asarray(x0, dtype=float)
    if w0 not in (0, 1):
        raise InvalidInitializationError(f"relay state must be 0 or 1, got {w0!r}")
    if x0.shape != (sys.n_x,):
        raise InvalidInitializationError(f"x0 must have shape ({sys.n_x},)")
    if controls is None:
        controls = ControlSchedule.empty()
    if controls.n_u != sys.n_u:
        raise InvalidInitializationError(
            f"schedule provides {controls.n_u} controls, model needs {sys.n_u}"
        )
    if horizon < 0:
        raise InvalidInitializationError("horizon must be nonnegative")

    psi_fn = sys.psi.compiled()
    f_fns = (sys.f_a.compiled(), sys.f_b.compiled())

    traj = HybridTrajectory(x0, int(w0))
    w = int(w0)
    x = x0.copy()
    t = 0.0

    # Branch admissibility at t = 0; exactly on the guard means jump now.
    psi0 = psi_fn(list(x))[0]
    if w == 0 and psi0 > 1 + tol_event:
        raise InvalidInitializationError(
            f"w0=0 requires psi(x0) <= 1, got psi = {psi0:.6g}"
        )
    if w == 1 and psi0 < -tol_event:
        raise InvalidInitializationError(
            f"w0=1 requires psi(x0) >= 0, got psi = {psi0:.6g}"
        )
    if w == 0 and abs(psi0 - 1) <= tol_event:
        traj.events.append(JumpEvent(0.0, "0->1"))
        w = 1
    elif w == 1 and abs(psi0) <= tol_event:
        traj.events.append(JumpEvent(0.0, "1->0"))
        w = 0

    if horizon == 0.0:
        return traj

    while t < horizon:
        u = controls.value_at(t)
        leg_end = min([horizon] + controls.breakpoints_within(t, horizon))
        f_fast = f_fns[w]
        u_list = list(u)

        def rhs(_t, state):
            return f_fast(list(state) + u_list)

        if w == 0:

            def guard_fn(state):
                return psi_fn(list(state))[0] - 1.0

            direction = 1.0
        else:

            def guard_fn(state):
                return psi_fn(list(state))[0]

            direction = -1.0

        def guard_event(_t, state):
            return guard_fn(state)

        guard_event.terminal = True
        guard_event.direction = direction

        sol = solve_ivp(
            rhs,
            (t, leg_end),
            x,
            method="RK45",
            rtol=rtol,
            atol=atol,
            dense_output=True,
            events=[guard_event],
            max_step=max_step,
        )
        if not sol.success:
            raise SimulationError(f"integrator failed at t={t:.6g}: {sol.message}")

        if sol.t_events[0].size:
            t_event = float(sol.t_events[0][0])
            # Bisection polish on the dense step containing the crossing.
            k = int(np.searchsorted(sol.t, t_event, side="right"))
            t_lo = sol.t[max(k - 1, 0)]
            t_hi = sol.t[min(k, len(sol.t) - 1)]
            if t_hi > t_lo and (guard_fn(sol.sol(t_lo)) > 0) != (guard_fn(sol.sol(t_hi)) > 0):
                t_event = _bisect_guard(sol.sol, guard_fn, t_lo, t_hi, tol_event)
            traj.pieces.append(_Piece(t, t_event, w, sol.sol))
            x = np.atleast_1d(sol.sol(t_event)).copy()
            traj.events.append(JumpEvent(t_event, "0->1" if w == 0 else "1->0"))
            w = 1 - w
            t = t_event
            if len(traj.events) >= max_events:
                raise ZenoSuspicionError(
                    f"{len(traj.events)} events before t={t:.6g}; suspected Zeno behavior"
                )
        else:
            traj.pieces.append(_Piece(t, leg_end, w, sol.sol))
            x = np.atleast_1d(sol.sol(leg_end)).copy()
            t = leg_end

    return traj
