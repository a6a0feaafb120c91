"""Multi-region piecewise-smooth system integrator with Filippov sliding.

A :class:`PssModel` is a set of smooth vector fields indexed by region,
where the active region is the argmax of scalar discriminant functions.
On region boundaries the right-hand side is the convex combination of the
neighboring fields; this module integrates region interiors with an
embedded Dormand-Prince RK45 pair, localizes boundary crossings by
bisection over partial steps, classifies boundaries as crossing or
attracting from one-sided directional derivatives, and integrates
attracting boundaries as sliding modes with the convex weight solved from
the tangency condition at every stage, re-projecting onto the boundary
after each accepted step.

Sliding is restricted to codimension-1 surfaces.  Where three or more
discriminants tie (corner points), the integrator continues with the
unique region whose own flow strictly keeps it active; other corners are
flagged in the event log.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from hysopt.automaton import SimulationError, ZenoSuspicionError, CSV_FLOAT_FMT
from hysopt.controls import ControlSchedule
from hysopt.expr import ExprFunction

__all__ = [
    "PssModel",
    "FilippovPoint",
    "Trajectory",
    "SwitchEvent",
    "SlidingResult",
    "active_set",
    "sliding_dynamics",
    "integrate_pss",
]


@dataclass(frozen=True, eq=False)
class PssModel:
    """Piecewise-smooth system: argmax of ``discriminants`` picks the field."""

    discriminants: ExprFunction  # y -> R^m
    fields: tuple  # each ExprFunction, (y, u) -> R^{n_y}
    eps_act: float = 1e-9

    def __post_init__(self):
        object.__setattr__(self, "fields", tuple(self.fields))
        n_y = self.discriminants.n_in
        if len(self.fields) != self.discriminants.n_out:
            raise ValueError("need one field per discriminant")
        for f in self.fields:
            if f.n_out != n_y or f.n_in < n_y:
                raise ValueError("fields must map (y, u) to R^{n_y}")
        if len({f.n_in for f in self.fields}) != 1:
            raise ValueError("all fields must share the (y, u) input layout")
        object.__setattr__(self, "_g_fn", self.discriminants.compiled())
        object.__setattr__(self, "_grad_fn", self.discriminants.jacobian().compiled())
        object.__setattr__(self, "_f_fns", tuple(f.compiled() for f in self.fields))

    @property
    def m(self) -> int:
        return self.discriminants.n_out

    @property
    def n_y(self) -> int:
        return self.discriminants.n_in

    @property
    def n_u(self) -> int:
        return self.fields[0].n_in - self.n_y

    def g_values(self, y) -> np.ndarray:
        return np.array(self._g_fn(list(y)))

    def g_gradients(self, y) -> np.ndarray:
        return np.array(self._grad_fn(list(y))).reshape(self.m, self.n_y)

    def field_value(self, i: int, y, u=()) -> np.ndarray:
        return np.array(self._f_fns[i](list(y) + list(u)))


@dataclass(frozen=True)
class FilippovPoint:
    """State with its active set and simplex weights."""

    y: np.ndarray
    active: tuple
    theta: np.ndarray  # full length-m simplex vector

    def __post_init__(self):
        th = np.asarray(self.theta, dtype=float)
        if abs(th.sum() - 1.0) > 1e-10 or np.any(th < -1e-12):
            raise ValueError("theta must lie on the unit simplex")
        inactive = [i for i in range(len(th)) if i not in self.active]
        if np.any(np.abs(th[inactive]) > 1e-12):
            raise ValueError("theta must vanish outside the active set")


def active_set(model: PssModel, y) -> list[int]:
    """Indices within ``eps_act`` of the largest discriminant."""
    g = model.g_values(y)
    return [int(i) for i in np.flatnonzero(g >= g.max() - model.eps_act)]


@dataclass(frozen=True)
class SlidingResult:
    ydot: np.ndarray
    theta: np.ndarray  # weights for the ordered pair (i, j)
    kind: str  # "sliding" | "crossing" | "degenerate"
    rates: tuple  # one-sided derivatives (s_i, s_j) of g_i - g_j


def sliding_dynamics(model: PssModel, y, u, pair) -> SlidingResult:
    """Convex combination on the boundary between regions ``pair = (i, j)``.

    Solves ``d/dtau (g_i - g_j) = 0`` for the weight on ``f_i``.  The
    boundary is attracting (kind ``sliding``) when the flow of ``i`` pushes
    the difference down and the flow of ``j`` pushes it up; same-signed
    rates signal a transversal crossing instead; vanishing rates are the
    degenerate tie (identical neighboring fields), reported with the
    midpoint weight.
    """
    i, j = pair
    grads = model.g_gradients(y)
    grad_delta = grads[i] - grads[j]
    f_i = model.field_value(i, y, u)
    f_j = model.field_value(j, y, u)
    s_i = float(grad_delta @ f_i)
    s_j = float(grad_delta @ f_j)
    eps = 1e-12 * max(1.0, abs(s_i), abs(s_j))
    if abs(s_i) <= eps and abs(s_j) <= eps:
        theta = 0.5
        kind = "degenerate"
    elif s_i < 0.0 < s_j:
        theta = s_j / (s_j - s_i)
        kind = "sliding"
    else:
        kind = "crossing"
        theta = 1.0 if s_i >= 0.0 else 0.0
    ydot = theta * f_i + (1.0 - theta) * f_j
    return SlidingResult(ydot, np.array([theta, 1.0 - theta]), kind, (s_i, s_j))


@dataclass(frozen=True)
class SwitchEvent:
    tau: float
    kind: str  # "cross" | "enter-sliding" | "exit-sliding" | "corner" | "stop"
    from_mode: tuple
    to_mode: tuple | None
    flagged: bool = False
    note: str = ""


@dataclass
class Segment:
    """Dense record of one mode: samples with derivatives for Hermite eval."""

    mode: tuple  # ("interior", i) or ("sliding", i, j)
    taus: np.ndarray
    ys: np.ndarray
    fs: np.ndarray
    thetas: np.ndarray

    @property
    def tau0(self) -> float:
        return float(self.taus[0])

    @property
    def tau1(self) -> float:
        return float(self.taus[-1])

    def eval(self, tau: float) -> np.ndarray:
        return self._hermite(tau, self.ys, self.fs)

    def eval_derivative_sample(self, tau: float) -> np.ndarray:
        k = self._bracket(tau)
        return self.fs[k]

    def theta_at(self, tau: float) -> np.ndarray:
        return self.thetas[self._bracket(tau)]

    def _bracket(self, tau: float) -> int:
        k = int(np.searchsorted(self.taus, tau, side="right") - 1)
        return min(max(k, 0), len(self.taus) - 2) if len(self.taus) > 1 else 0

    def _hermite(self, tau, ys, fs) -> np.ndarray:
        if len(self.taus) == 1:
            return ys[0].copy()
        k = self._bracket(tau)
        t0, t1 = self.taus[k], self.taus[k + 1]
        h = t1 - t0
        if h <= 0:
            return ys[k].copy()
        s = (tau - t0) / h
        h00 = (1 + 2 * s) * (1 - s) ** 2
        h10 = s * (1 - s) ** 2
        h01 = s * s * (3 - 2 * s)
        h11 = s * s * (s - 1)
        return h00 * ys[k] + h * h10 * fs[k] + h01 * ys[k + 1] + h * h11 * fs[k + 1]


class Trajectory:
    """Piecewise record of a PSS integration in numerical time."""

    def __init__(self, model: PssModel):
        self.model = model
        self.segments: list[Segment] = []
        self.events: list[SwitchEvent] = []

    @property
    def tau_end(self) -> float:
        return self.segments[-1].tau1 if self.segments else 0.0

    def eval(self, tau: float) -> np.ndarray:
        seg = self._segment_at(tau)
        return seg.eval(min(max(tau, seg.tau0), seg.tau1))

    def theta_at(self, tau: float) -> np.ndarray:
        return self._segment_at(tau).theta_at(tau)

    def _segment_at(self, tau: float) -> Segment:
        if not self.segments:
            raise SimulationError("empty trajectory")
        for seg in self.segments:
            if tau < seg.tau1 or seg is self.segments[-1]:
                return seg
        raise AssertionError("unreachable")

    def to_csv(self, path, n_samples: int = 1001):
        """Generic export: tau, state components, mode tag, simplex weights."""
        n_y = self.model.n_y
        m = self.model.m
        header = (
            ["tau"]
            + [f"y{i + 1}" for i in range(n_y)]
            + ["mode"]
            + [f"theta{i + 1}" for i in range(m)]
        )
        with open(path, "w") as fh:
            fh.write(",".join(header) + "\n")
            if not self.segments:
                return
            grid = np.linspace(0.0, self.tau_end, n_samples)
            for tau in grid:
                seg = self._segment_at(tau)
                y = seg.eval(min(max(tau, seg.tau0), seg.tau1))
                tag = (
                    f"interior:{seg.mode[1]}"
                    if seg.mode[0] == "interior"
                    else f"sliding:{seg.mode[1]}-{seg.mode[2]}"
                )
                row = [CSV_FLOAT_FMT % tau]
                row += [CSV_FLOAT_FMT % v for v in y]
                row.append(tag)
                row += [CSV_FLOAT_FMT % v for v in seg.theta_at(tau)]
                fh.write(",".join(row) + "\n")


# ---------------------------------------------------------------------------
# Embedded Dormand-Prince RK45 core

_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0])
_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array(
    [5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40]
)
_ERR_W = _B5 - _B4


def _rk45_step(rhs, tau, y, h, f0):
    """One Dormand-Prince step; returns (y1, f1, scaled_error_vector)."""
    k = [f0]
    for s in range(1, 6):
        ys = y + h * (np.stack(k[:s], axis=0).T @ _A[s])
        k.append(rhs(tau + _C[s] * h, ys))
    y1 = y + h * (
        _B5[0] * k[0] + _B5[2] * k[2] + _B5[3] * k[3] + _B5[4] * k[4] + _B5[5] * k[5]
    )
    f1 = rhs(tau + h, y1)
    k.append(f1)
    err = h * sum(w * ki for w, ki in zip(_ERR_W, k) if w != 0.0)
    return y1, f1, err


class _LegResult:
    __slots__ = ("reason", "tau", "y", "event_name")

    def __init__(self, reason, tau, y, event_name=None):
        self.reason = reason  # "end" | "event" | "stop"
        self.tau = tau
        self.y = y
        self.event_name = event_name


class _Recorder:
    def __init__(self, mode, theta_of):
        self.mode = mode
        self.theta_of = theta_of
        self.taus: list[float] = []
        self.ys: list[np.ndarray] = []
        self.fs: list[np.ndarray] = []
        self.thetas: list[np.ndarray] = []

    def add(self, tau, y, f):
        if self.taus and tau <= self.taus[-1]:
            return
        self.taus.append(float(tau))
        self.ys.append(np.asarray(y, dtype=float).copy())
        self.fs.append(np.asarray(f, dtype=float).copy())
        self.thetas.append(self.theta_of(y))

    def to_segment(self) -> Segment:
        return Segment(
            self.mode,
            np.array(self.taus),
            np.array(self.ys),
            np.array(self.fs),
            np.array(self.thetas),
        )


def _integrate_leg(
    rhs,
    tau0,
    y0,
    tau_end,
    events,
    recorder,
    rtol,
    atol,
    h_max,
    tol_event,
    post_step=None,
):
    """Adaptive RK45 with partial-step bisection event localization.

    ``events`` is a list of ``(name, fn)`` with scalar ``fn(y)``; an event
    fires when its value, having been strictly positive after some accepted
    step, becomes negative.  The crossing is localized by bisection on the
    step fraction, re-taking a single partial RK45 step per probe, until the
    event value is within ``tol_event``.  ``post_step`` (used by sliding) may
    replace the accepted endpoint, e.g. to re-project onto a surface.
    """
    tau = float(tau0)
    y = np.asarray(y0, dtype=float).copy()
    f = rhs(tau, y)
    recorder.add(tau, y, f)

    armed = {}
    for name, fn in events:
        armed[name] = fn(y) > tol_event

    span = tau_end - tau0
    h = min(h_max, max(1e-8, 1e-3 * span))
    err_prev = 1.0
    min_step_floor = 1e-14 * max(1.0, abs(tau_end))

    while tau < tau_end:
        if tau_end - tau <= min_step_floor:
            tau = tau_end
            break
        h = min(h, tau_end - tau)
        y1, f1, err_vec = _rk45_step(rhs, tau, y, h, f)
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y1))
        # Error per unit step: accumulated error then scales (super)linearly
        # with the tolerance, so halving the tolerance at least halves it.
        err = float(np.sqrt(np.mean((err_vec / scale) ** 2))) / max(h, 1e-14)
        if err > 1.0:
            h *= max(0.2, 0.9 * err ** (-0.25))
            if h < min_step_floor:
                raise SimulationError(f"step size underflow at tau={tau:.6g}")
            continue

        if post_step is not None:
            y1 = post_step(y1)
            f1 = rhs(tau + h, y1)

        # Event scan on the accepted endpoint.
        fired = []
        for name, fn in events:
            v = fn(y1)
            if armed[name] and v < 0.0:
                fired.append((name, fn))
            elif not armed[name] and v > tol_event:
                armed[name] = True

        if fired:
            best = None
            for name, fn in fired:
                s_event, y_event, f_event = _bisect_event(
                    rhs, tau, y, f, h, fn, tol_event, post_step
                )
                if best is None or s_event < best[0]:
                    best = (s_event, y_event, f_event, name)
            s_event, y_event, f_event, name = best
            tau_event = tau + s_event * h
            recorder.add(tau_event, y_event, f_event)
            return _LegResult("event", tau_event, y_event, name)

        tau += h
        y, f = y1, f1
        recorder.add(tau, y, f)

        if err == 0.0:
            factor = 5.0
        else:
            factor = 0.9 * err ** (-0.7 / 4.0) * err_prev ** (0.4 / 4.0)
            factor = min(5.0, max(0.2, factor))
        err_prev = max(err, 1e-10)
        h = min(h_max, h * factor)

    return _LegResult("end", tau, y, None)


def _bisect_event(rhs, tau, y, f, h, fn, tol_event, post_step):
    """Bisection on the step fraction until |event value| <= tol_event."""

    def probe(s):
        ys, fs, _ = _rk45_step(rhs, tau, y, s * h, f)
        if post_step is not None:
            ys = post_step(ys)
            fs = rhs(tau + s * h, ys)
        return ys, fs

    lo, hi = 0.0, 1.0
    v_lo = fn(y)
    y_hi, f_hi = probe(1.0)
    best = (1.0, y_hi, f_hi)
    for _ in range(120):
        mid = 0.5 * (lo + hi)
        y_mid, f_mid = probe(mid)
        v_mid = fn(y_mid)
        if abs(v_mid) <= tol_event:
            return mid, y_mid, f_mid
        if (v_mid > 0.0) == (v_lo > 0.0):
            lo = mid
        else:
            hi = mid
            best = (mid, y_mid, f_mid)
        if hi - lo <= 1e-16:
            break
    return best


# ---------------------------------------------------------------------------
# Mode selection and the outer integration loop


def _retention_candidates(model, y, u, act, margin_eps=1e-12):
    """Regions in ``act`` whose own flow strictly keeps them argmax."""
    grads = model.g_gradients(y)
    out = []
    for k in act:
        f_k = model.field_value(k, y, u)
        margin = min(float((grads[k] - grads[j]) @ f_k) for j in act if j != k)
        if margin > margin_eps * max(1.0, float(np.linalg.norm(f_k))):
            out.append((margin, k))
    out.sort(reverse=True)
    return out


def _select_mode(model, y, u, act, prev_mode, events, tau):
    """Choose the continuation mode at a boundary/corner point.

    Returns ``(mode, flagged, note)``.  Preference order: a region whose
    flow strictly retains it (covers transversal crossings and corner
    points); otherwise, for two active regions, an attracting boundary
    becomes a sliding mode; degenerate ties slide with the midpoint weight.
    """
    if len(act) == 1:
        return ("interior", act[0]), False, ""
    cands = _retention_candidates(model, y, u, act)
    if cands:
        flagged = len(cands) > 1 or len(act) > 2
        note = ""
        if len(cands) > 1:
            note = f"ambiguous corner: retention candidates {[k for _, k in cands]}"
        elif len(act) > 2:
            note = f"corner with active set {act}"
        return ("interior", cands[0][1]), flagged, note
    if len(act) == 2:
        res = sliding_dynamics(model, y, u, (act[0], act[1]))
        if res.kind == "sliding":
            return ("sliding", act[0], act[1]), False, ""
        if res.kind == "degenerate":
            return ("sliding", act[0], act[1]), True, "degenerate boundary (tied fields)"
    raise SimulationError(
        f"no admissible continuation at tau={tau:.6g}: active set {act} "
        "has no retaining region and no attracting pair"
    )


def integrate_pss(
    model: PssModel,
    y0,
    controls: ControlSchedule | None = None,
    tau_f: float = 1.0,
    tol: float = 1e-8,
    tol_event: float = 1e-10,
    max_events: int = 10_000,
    h_max: float | None = None,
    stop: ExprFunction | None = None,
) -> Trajectory:
    """Integrate the Filippov system from ``y0`` over ``[0, tau_f]``.

    ``tol`` controls the local error (relative tolerance ``tol``, absolute
    ``tol * 1e-2``).  ``stop`` is an optional scalar function of the state;
    integration halts once it reaches zero from above (localized like any
    other event).  Events are recorded with their kind; corner passages the
    model cannot disambiguate are flagged rather than resolved.
    """
    y0 = np.asarray(y0, dtype=float)
    if y0.shape != (model.n_y,):
        raise ValueError(f"y0 must have shape ({model.n_y},)")
    if controls is None:
        controls = ControlSchedule.empty()
    if controls.n_u != model.n_u:
        raise ValueError(
            f"schedule provides {controls.n_u} controls, model needs {model.n_u}"
        )
    rtol = tol
    atol = tol * 1e-2
    if h_max is None:
        # Cap keeps the cubic Hermite dense output well below event/equivalence
        # tolerances regardless of how smooth the flow is.
        h_max = max(1e-6, min(0.25, tau_f))
    stop_fn = stop.compiled() if stop is not None else None

    traj = Trajectory(model)
    tau = 0.0
    y = y0.copy()

    act = active_set(model, y)
    mode, flagged, note = _select_mode(
        model, y, controls.value_at(0.0), act, None, traj.events, tau
    )
    if flagged:
        traj.events.append(SwitchEvent(tau, "corner", mode, mode, True, note))

    if stop_fn is not None and stop_fn(list(y))[0] <= 0.0:
        tau_f = 0.0

    while tau < tau_f:
        u = controls.value_at(tau)
        u_list = list(u)
        leg_end = min([tau_f] + controls.breakpoints_within(tau, tau_f))

        g_fn = model._g_fn
        events = []
        if mode[0] == "interior":
            i = mode[1]
            f_fast = model._f_fns[i]

            def rhs(_tau, state, _f=f_fast, _u=u_list):
                return np.array(_f(list(state) + _u))

            for j in range(model.m):
                if j == i:
                    continue

                def delta(state, _i=i, _j=j, _g=g_fn):
                    g = _g(list(state))
                    return g[_i] - g[_j]

                events.append((f"boundary:{j}", delta))
            post_step = None

            def theta_of(state, _i=i, _m=model.m):
                th = np.zeros(_m)
                th[_i] = 1.0
                return th

        else:
            i, j = mode[1], mode[2]

            def rhs(_tau, state, _i=i, _j=j, _u=u_list):
                return sliding_dynamics(model, state, _u, (_i, _j)).ydot

            def theta_pair(state, _i=i, _j=j, _u=u_list):
                return float(sliding_dynamics(model, state, _u, (_i, _j)).theta[0])

            events.append((f"theta-low:{j}", lambda s, _tp=theta_pair: _tp(s)))
            events.append((f"theta-high:{i}", lambda s, _tp=theta_pair: 1.0 - _tp(s)))
            for k in range(model.m):
                if k in (i, j):
                    continue

                def delta(state, _i=i, _k=k, _g=g_fn):
                    g = _g(list(state))
                    return g[_i] - g[_k]

                events.append((f"boundary:{k}", delta))

            grads_fn = model._grad_fn

            def post_step(state, _i=i, _j=j):
                # Newton re-projection onto g_i = g_j kills constraint drift.
                s = np.asarray(state, dtype=float).copy()
                for _ in range(4):
                    g = np.array(g_fn(list(s)))
                    d = g[_i] - g[_j]
                    if abs(d) <= 1e-15 * max(1.0, abs(g[_i])):
                        break
                    grads = np.array(grads_fn(list(s))).reshape(model.m, model.n_y)
                    gd = grads[_i] - grads[_j]
                    denom = float(gd @ gd)
                    if denom == 0.0:
                        break
                    s -= (d / denom) * gd
                return s

            def theta_of(state, _i=i, _j=j, _m=model.m, _tp=theta_pair):
                th = np.zeros(_m)
                t = min(max(_tp(state), 0.0), 1.0)
                th[_i] = t
                th[_j] = 1.0 - t
                return th

        if stop_fn is not None:
            events.append(("stop", lambda s, _fn=stop_fn: _fn(list(s))[0]))

        recorder = _Recorder(mode, theta_of)
        result = _integrate_leg(
            rhs, tau, y, leg_end, events, recorder, rtol, atol, h_max, tol_event, post_step
        )
        traj.segments.append(recorder.to_segment())
        tau, y = result.tau, result.y

        if result.reason == "end":
            if tau >= tau_f:
                break
            continue  # control breakpoint; same mode, new leg

        if result.event_name == "stop":
            traj.events.append(SwitchEvent(tau, "stop", mode, None))
            break

        if len(traj.events) >= max_events:
            raise ZenoSuspicionError(
                f"{len(traj.events)} switch events before tau={tau:.6g}"
            )

        prev_mode = mode
        act = active_set(model, y)
        mode, flagged, note = _select_mode(model, y, u, act, prev_mode, traj.events, tau)
        if mode == prev_mode:
            # A theta-exit that reselects the same sliding pair would stall.
            name = result.event_name or ""
            if name.startswith("theta-high"):
                mode = ("interior", prev_mode[1])
            elif name.startswith("theta-low"):
                mode = ("interior", prev_mode[2])
        kind = _event_kind(prev_mode, mode, len(act))
        traj.events.append(SwitchEvent(tau, kind, prev_mode, mode, flagged, note))

    return traj


def _event_kind(prev_mode, new_mode, n_active) -> str:
    if n_active >= 3:
        return "corner"
    if prev_mode[0] == "interior" and new_mode[0] == "sliding":
        return "enter-sliding"
    if prev_mode[0] == "sliding" and new_mode[0] == "interior":
        return "exit-sliding"
    return "cross"
