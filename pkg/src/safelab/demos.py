"""Hand-designed demonstration controllers and batch demo generation.

SPB/Bottleneck use waypoint schedules with a clipped proportional action law.
SVB uses velocity-demand guidance (track-to-point, fly-by-point fillet turns,
goal capture) closed by a gain-scheduled PID loop on the velocity error.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from safelab import seeding
from safelab.dataset import Dataset
from safelab.env import (EnvConfig, EpisodeRecord, constraint_centers, rollout,
                         sample_free_state)

log = logging.getLogger(__name__)

K_ORBIT = 4.0
TURN_RADIUS = 8.0
CRUISE_SPEED = 2.0

# (K_p, K_i, K_d) rows: en route s_0 -> s_2, then s_2 -> s_g
GAINS_CRUISE = (5.0, 0.05, 0.0)
GAINS_FINAL = (5.0, 0.5, 4.0)

SPB_WAYPOINTS = ((25.0, 57.0), (68.0, 57.0))
BOTTLENECK_WAYPOINTS = ((30.0, 37.5), (70.0, 37.5))
SVB_WAYPOINTS = ((10.0, 65.0), (50.0, 65.0))


class GeometryError(ValueError):
    pass


class DemoGenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class WaypointPlan:
    points: tuple[tuple[float, float], ...]  # (s_0, s_1, ..., s_g)
    goal_index: int = 0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if np.any(np.all(np.isclose(np.diff(pts, axis=0), 0.0), axis=1)):
            raise GeometryError("consecutive waypoints coincide")

    def point(self, i: int) -> np.ndarray:
        return np.asarray(self.points[i], dtype=float)


def default_plan(cfg: EnvConfig) -> WaypointPlan:
    mids = {"spb": SPB_WAYPOINTS, "bottleneck": BOTTLENECK_WAYPOINTS,
            "svb": SVB_WAYPOINTS}[cfg.name]
    return WaypointPlan((tuple(cfg.start), *mids, tuple(cfg.goal)))


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    w = np.mod(np.asarray(a) + np.pi, 2 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return float(w) if np.ndim(w) == 0 else w


# --- SPB-style waypoint controllers --------------------------------------------------

def clipped_step(target, s, a_max: float) -> np.ndarray:
    return np.clip(np.asarray(target, float) - np.asarray(s, float), -a_max, a_max)


def spb_goal_action(t: int, s, plan: WaypointPlan, a_max: float) -> np.ndarray:
    if t < 20:
        target = plan.point(1)
    elif t < 60:
        target = plan.point(2)
    else:
        target = plan.point(len(plan.points) - 1)
    return clipped_step(target, s, a_max)


def spb_constraint_action(t: int, s, s_d, s_c, a_max: float) -> np.ndarray:
    return clipped_step(s_d if t < 15 else s_c, s, a_max)


# --- PID ----------------------------------------------------------------------

@dataclass
class PidState:
    kp: float
    ki: float
    kd: float
    integral: np.ndarray = field(default_factory=lambda: np.zeros(2))
    prev_error: np.ndarray | None = None

    def set_gains(self, gains: tuple[float, float, float], reset: bool = True) -> None:
        self.kp, self.ki, self.kd = gains
        if reset:
            self.integral = np.zeros_like(self.integral)
            self.prev_error = None


def pid_accel(pid: PidState, error, dt: float = 1.0) -> np.ndarray:
    """K_p e + K_i * integral(e) + K_d * de/dt; updates the accumulator in place.

    On the first call the derivative is taken against a zero previous error.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    e = np.asarray(error, dtype=float)
    pid.integral = pid.integral + e * dt
    prev = np.zeros_like(e) if pid.prev_error is None else pid.prev_error
    deriv = (e - prev) / dt
    pid.prev_error = e.copy()
    return pid.kp * e + pid.ki * pid.integral + pid.kd * deriv


# --- guidance geometry -------------------------------------------------------------

def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if n < 1e-12:
        raise GeometryError("coincident points")
    return v / n


def turn_geometry(a, b, c) -> tuple[float, float, float]:
    """Track angles of legs a->b and b->c and the signed turn angle between them."""
    q0, q1 = _unit(np.subtract(b, a)), _unit(np.subtract(c, b))
    th_in = math.atan2(q0[1], q0[0])
    th_out = math.atan2(q1[1], q1[0])
    return th_in, th_out, wrap_angle(th_out - th_in)


def _tangent_distance(r: float, phi: float) -> float:
    # distance from the corner to the fillet tangent points; psi is the
    # interior angle between the legs, so psi = pi for a straight pass
    psi = math.pi - abs(phi)
    if abs(phi) < 1e-9:
        return 0.0
    return r / math.tan(psi / 2)


def track_to_point(s, a, b, c, r: float = TURN_RADIUS) -> tuple[float, bool]:
    """Heading along leg a->b and whether the agent has crossed the turn-entry plane."""
    s = np.asarray(s, dtype=float)
    a, b = np.asarray(a, float), np.asarray(b, float)
    th_in, _, phi = turn_geometry(a, b, c)
    q = _unit(b - a)
    z = b - _tangent_distance(r, phi) * q
    h = float(np.dot(s - z, q))
    d_obj = float(np.linalg.norm(s - b))
    d_track = float(np.linalg.norm(b - a))
    if d_obj < 1e-9:
        return th_in, h > 0
    beta = math.atan2(b[1] - s[1], b[0] - s[0])
    off_track = wrap_angle(beta - th_in)
    correction = float(np.clip(d_track * off_track / (2 * d_obj), -np.pi / 2, np.pi / 2))
    return wrap_angle(th_in + correction), h > 0


def fillet(a, b, c, r: float = TURN_RADIUS) -> tuple[np.ndarray, np.ndarray, float]:
    """(turn centre, exit point, direction) for the fillet at corner b.

    Direction is +1 for a counter-clockwise (left) turn, -1 for clockwise.
    Raises GeometryError when there is no turn.
    """
    a, b, c = (np.asarray(p, float) for p in (a, b, c))
    _, _, phi = turn_geometry(a, b, c)
    if abs(phi) < 1e-9:
        raise GeometryError("no turn at this corner")
    q0, q1 = _unit(b - a), _unit(c - b)
    q_mid = _unit(q1 - q0)
    psi = math.pi - abs(phi)
    centre = b + (r / math.sin(psi / 2)) * q_mid
    exit_point = b + (r / math.tan(psi / 2)) * q1
    return centre, exit_point, 1.0 if phi > 0 else -1.0


def fly_by_point(s, a, b, c, r: float = TURN_RADIUS,
                 k_orbit: float = K_ORBIT) -> tuple[float, bool]:
    """Orbit heading around the fillet centre and whether the exit plane is crossed."""
    s = np.asarray(s, dtype=float)
    try:
        centre, z, direction = fillet(a, b, c, r)
    except GeometryError:
        return track_to_point(s, b, c, c, r)[0], True
    q1 = _unit(np.subtract(c, b))
    h = float(np.dot(s - z, q1))
    rel = s - centre
    gamma = math.atan2(rel[1], rel[0])
    err = (float(np.linalg.norm(rel)) - r) / r
    heading = gamma + direction * (np.pi / 2 + math.atan(k_orbit * err))
    return wrap_angle(heading), h > 0


def goal_capture_speed(d_goal: float) -> float:
    if d_goal > 20.0:
        return 0.075 * d_goal ** 2
    if d_goal < 10.0:
        return 0.0
    return 3.0


# --- SVB controllers -----------------------------------------------------------------

class NavMode(Enum):
    TRACK_TO_POINT = "track"
    FLY_BY_POINT = "flyby"
    GOAL_CAPTURE = "capture"


class _VelocityLoop:
    """Estimates velocity from successive positions and closes the PID loop.

    The demanded velocity is capped at ``v_max`` and the PID output is scaled
    (not clipped per component) to ``a_max`` so its direction is kept.
    """

    def __init__(self, gains=GAINS_CRUISE, a_max: float = 0.5, v_max: float = 3.0):
        self.pid = PidState(*gains)
        self.a_max = a_max
        self.v_max = v_max
        self.prev_s: np.ndarray | None = None

    def accel(self, s: np.ndarray, v_dem: np.ndarray) -> np.ndarray:
        v = np.zeros(2) if self.prev_s is None else s - self.prev_s
        self.prev_s = s.copy()
        speed = float(np.linalg.norm(v_dem))
        if speed > self.v_max:
            v_dem = v_dem * (self.v_max / speed)
        u = pid_accel(self.pid, v_dem - v, dt=1.0)
        peak = float(np.max(np.abs(u)))
        return u * (self.a_max / peak) if peak > self.a_max else u


def _polar(speed: float, heading: float) -> np.ndarray:
    return speed * np.array([math.cos(heading), math.sin(heading)])


class SvbNavigator:
    """Goal-reaching SVB controller: ``policy(t, s) -> acceleration``."""

    def __init__(self, plan: WaypointPlan, r: float = TURN_RADIUS,
                 cruise: float = CRUISE_SPEED, k_orbit: float = K_ORBIT,
                 a_max: float = 0.5, v_max: float = 3.0):
        self.plan = plan
        self.r = r
        self.cruise = cruise
        self.k_orbit = k_orbit
        self.i_g = plan.goal_index
        self.mode = NavMode.TRACK_TO_POINT
        self.loop = _VelocityLoop(GAINS_CRUISE, a_max, v_max)
        self.headings: list[float] = []
        self._maybe_capture()

    def _maybe_capture(self) -> None:
        if self.i_g + 2 >= len(self.plan.points):
            self.mode = NavMode.GOAL_CAPTURE
            self.loop.pid.set_gains(GAINS_FINAL)

    def _legs(self):
        p = self.plan.point
        return p(self.i_g), p(self.i_g + 1), p(self.i_g + 2)

    def __call__(self, t: int, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        if self.mode is NavMode.TRACK_TO_POINT:
            heading, switch = track_to_point(s, *self._legs(), self.r)
            if switch:
                self.mode = NavMode.FLY_BY_POINT
        elif self.mode is NavMode.FLY_BY_POINT:
            heading, switch = fly_by_point(s, *self._legs(), self.r, self.k_orbit)
            if switch:
                self.i_g += 1
                self.mode = NavMode.TRACK_TO_POINT
                self._maybe_capture()
        if self.mode is NavMode.GOAL_CAPTURE:
            g = self.plan.point(len(self.plan.points) - 1)
            d = float(np.linalg.norm(g - s))
            heading = math.atan2(g[1] - s[1], g[0] - s[0])
            speed = goal_capture_speed(d)
        else:
            speed = self.cruise
        self.headings.append(heading)
        return self.loop.accel(s, _polar(speed, heading))


class SvbConstraintController:
    """Head for a random free point, then for the obstacle centre, under PID."""

    def __init__(self, s_d, s_c, cruise: float = CRUISE_SPEED,
                 a_max: float = 0.5, v_max: float = 3.0):
        self.s_d = np.asarray(s_d, float)
        self.s_c = np.asarray(s_c, float)
        self.cruise = cruise
        self.loop = _VelocityLoop(GAINS_CRUISE, a_max, v_max)

    def __call__(self, t: int, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        target = self.s_d if t < 15 else self.s_c
        d = target - s
        dist = float(np.linalg.norm(d))
        v_dem = np.zeros(2) if dist < 1e-9 else d / dist * min(self.cruise, dist)
        return self.loop.accel(s, v_dem)


# --- episode drivers ---------------------------------------------------------------

def goal_policy(cfg: EnvConfig, plan: WaypointPlan | None = None):
    plan = plan or default_plan(cfg)
    if cfg.dynamics == "acceleration":
        return SvbNavigator(plan, a_max=cfg.a_max, v_max=cfg.v_max)
    return lambda t, s: spb_goal_action(t, s, plan, cfg.a_max)


def constraint_policy(cfg: EnvConfig, rng: np.random.Generator):
    s_d = sample_free_state(cfg, rng)
    centres = constraint_centers(cfg)
    s_c = centres[rng.integers(len(centres))]
    if cfg.dynamics == "acceleration":
        return SvbConstraintController(s_d, s_c, a_max=cfg.a_max, v_max=cfg.v_max)
    return lambda t, s: spb_constraint_action(t, s, s_d, s_c, cfg.a_max)


def goal_episode(cfg: EnvConfig, seed: int, plan: WaypointPlan | None = None) -> EpisodeRecord:
    return rollout(cfg, goal_policy(cfg, plan), seed, origin="offline_gr")


def constraint_episode(cfg: EnvConfig, seed: int) -> EpisodeRecord:
    policy = constraint_policy(cfg, seeding.rng(seed, "cv-targets"))
    return rollout(cfg, policy, seed, origin="offline_cv")


def generate_demos(cfg: EnvConfig, n_gr: int, n_cv: int, seed: int,
                   max_retries: int = 5) -> Dataset:
    """``n_gr`` goal-reaching then ``n_cv`` constraint-violating controller episodes."""
    if n_gr < 0 or n_cv < 0:
        raise ValueError("demo counts must be non-negative")
    ds = Dataset(env_name=cfg.name)
    failures = []
    for i in range(n_gr):
        for attempt in range(max_retries + 1):
            ep = goal_episode(cfg, seeding.child_seed(seed, "demos", "gr", i, attempt))
            if ep.reached_goal and not ep.violated:
                ds.add(ep)
                break
        else:
            failures.append(i)
    if failures:
        raise DemoGenerationError(
            f"{len(failures)} goal-reaching demos failed after {max_retries} retries "
            f"(indices {failures[:10]})")
    for i in range(n_cv):
        ds.add(constraint_episode(cfg, seeding.child_seed(seed, "demos", "cv", i)))
    n_missed = sum(not ep.violated for ep in ds.constr)
    if n_missed:
        log.info("%d of %d constraint-violating demos ended without a violation",
                 n_missed, n_cv)
    return ds
