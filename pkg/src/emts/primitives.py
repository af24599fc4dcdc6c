"""Ego-centric motion-primitive trajectory library.

Three generator families: constant-control arcs, quintic lateral-offset
curves, and random waypoint splines. Every stored trajectory is the
re-rolled result of its clamped action sequence, so the state sequence is
always exactly what the bicycle model executes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .kinematics import (Action, KinematicsConfig, VehicleState, clamp,
                         rollout, step, wrap_angle)

FAMILIES = ("constant", "quintic", "spline")


@dataclass(frozen=True)
class Trajectory:
    initial: VehicleState
    actions: tuple[Action, ...]
    states: tuple[VehicleState, ...]


@dataclass
class LibraryEntry:
    trajectory: Trajectory
    family: str
    params: dict


@dataclass
class TrajectoryLibrary:
    entries: list[LibraryEntry]
    horizon: int
    skipped: int = 0

    def __len__(self):
        return len(self.entries)

    def action_matrix(self) -> np.ndarray:
        """(n, 2*T) matrix of flattened [throttle, steer] sequences."""
        return np.array([
            [c for a in e.trajectory.actions for c in (a.throttle, a.steer)]
            for e in self.entries
        ])

    def initial_speeds(self) -> np.ndarray:
        return np.array([e.trajectory.initial.v for e in self.entries])


@dataclass
class LibraryConfig:
    horizon: int = 10
    seed: int = 0
    kin: KinematicsConfig = field(default_factory=KinematicsConfig)
    families: list = field(default_factory=lambda: list(FAMILIES))
    const_throttles: list = field(default_factory=lambda: [-1.0, -0.6, -0.25, 0.0, 0.25, 0.6, 1.0])
    const_steers: list = field(default_factory=lambda: [-1.0, -0.5, -0.15, 0.0, 0.15, 0.5, 1.0])
    const_speeds: list = field(default_factory=lambda: [0.0, 4.0, 9.0, 14.0])
    quintic_offsets: list = field(default_factory=lambda: [-3.5, -1.75, 0.0, 1.75, 3.5])
    quintic_target_speeds: list = field(default_factory=lambda: [3.0, 6.0, 9.0, 12.0, 15.0])
    quintic_initial_speeds: list = field(default_factory=lambda: [3.0, 6.0, 9.0, 12.0, 15.0])
    spline_count: int = 1700
    spline_speed_max: float = 16.0
    spline_mid_offset: float = 3.0
    spline_end_offset: float = 4.0

    def validate(self):
        if self.horizon < 1:
            raise ValueError("library horizon must be >= 1")
        if not self.families:
            raise ValueError("at least one primitive family must be enabled")
        for name in self.families:
            if name not in FAMILIES:
                raise ValueError(f"unknown primitive family {name!r}")
        if "spline" in self.families and self.spline_count < 1:
            raise ValueError("spline_count must be >= 1")


def make_trajectory(initial: VehicleState, actions, cfg: KinematicsConfig) -> Trajectory:
    states = rollout(initial, actions, cfg)
    return Trajectory(initial, tuple(actions), tuple(states))


def gen_constant_control(pairs, initial_speeds, cfg: LibraryConfig) -> list[LibraryEntry]:
    """One trajectory per (throttle, steer) pair x initial speed."""
    if not pairs:
        raise ValueError("constant-control grid is empty")
    entries = []
    for throttle, steer in pairs:
        for v0 in initial_speeds:
            action = Action(throttle, steer)
            traj = make_trajectory(VehicleState(0.0, 0.0, 0.0, float(v0)),
                                   [action] * cfg.horizon, cfg.kin)
            entries.append(LibraryEntry(traj, "constant",
                                        {"throttle": throttle, "steer": steer, "v0": v0}))
    return entries


def _profile_to_actions(lat_rate, speed, v0: float, cfg: LibraryConfig):
    """Invert lateral-rate and speed profiles into clamped actions.

    Steering is a feedback inversion: each step aims the bicycle at the
    profile's desired heading for the end of the step, which tracks far
    better than an open-loop curvature table under clamping.
    """
    kin = cfg.kin
    dt = kin.dt
    state = VehicleState(0.0, 0.0, 0.0, float(v0))
    actions = []
    for i in range(cfg.horizon):
        t_next = (i + 1) * dt
        v_next = speed(t_next)
        throttle = (v_next - state.v) / (kin.max_accel * dt)
        ref_speed = max(speed(t_next), 0.5)
        ratio = clamp(lat_rate(t_next) / ref_speed, -0.95, 0.95)
        theta_des = math.asin(ratio)
        if state.v > 0.3:
            dtheta = wrap_angle(theta_des - state.theta)
            delta = math.atan(kin.wheelbase * dtheta / (dt * state.v))
        else:
            delta = 0.0
        action = Action(clamp(throttle, -1.0, 1.0),
                        clamp(delta / kin.max_steer_angle, -1.0, 1.0))
        state = step(state, action, kin)
        actions.append(action)
    return actions


def _quintic(offset: float, t_f: float):
    """Minimum-jerk profile y(t) with zero end slopes/accelerations."""
    def value(t):
        s = t / t_f
        return offset * (10 * s ** 3 - 15 * s ** 4 + 6 * s ** 5)

    def rate(t):
        s = t / t_f
        return offset * (30 * s ** 2 - 60 * s ** 3 + 30 * s ** 4) / t_f

    return value, rate


def gen_polynomial(offsets, target_speeds, initial_speeds, cfg: LibraryConfig) -> list[LibraryEntry]:
    """Quintic lateral curves; infeasible speed combinations are skipped."""
    entries = []
    skipped = 0
    t_f = cfg.horizon * cfg.kin.dt
    for offset in offsets:
        for v_t in target_speeds:
            for v0 in initial_speeds:
                if abs(v_t - v0) / t_f > 2.0 * cfg.kin.max_accel:
                    skipped += 1
                    continue
                _, rate = _quintic(offset, t_f)
                speed = lambda t, v0=v0, v_t=v_t: v0 + (v_t - v0) * t / t_f
                actions = _profile_to_actions(rate, speed, v0, cfg)
                traj = make_trajectory(VehicleState(0.0, 0.0, 0.0, float(v0)), actions, cfg.kin)
                entries.append(LibraryEntry(traj, "quintic",
                                            {"offset": offset, "v_target": v_t, "v0": v0}))
    return entries, skipped


def _two_piece_spline(y_mid: float, y_end: float, t_f: float):
    """Clamped cubic spline through (0,0), (t_f/2, y_mid), (t_f, y_end).

    End slopes are zero; the interior slope is chosen for curvature
    continuity at the midpoint.
    """
    h = t_f / 2.0
    m1 = (6 * y_mid / h ** 2 + 6 * (y_end - y_mid) / h ** 2) / (4 / h + 4 / h)

    def hermite(t01, y0, y1, s0, s1):
        t2, t3 = t01 * t01, t01 * t01 * t01
        return (y0 * (2 * t3 - 3 * t2 + 1) + h * s0 * (t3 - 2 * t2 + t01)
                + y1 * (-2 * t3 + 3 * t2) + h * s1 * (t3 - t2))

    def hermite_rate(t01, y0, y1, s0, s1):
        t2 = t01 * t01
        return (y0 * (6 * t2 - 6 * t01) + h * s0 * (3 * t2 - 4 * t01 + 1)
                + y1 * (-6 * t2 + 6 * t01) + h * s1 * (3 * t2 - 2 * t01)) / h

    def value(t):
        if t <= h:
            return hermite(t / h, 0.0, y_mid, 0.0, m1)
        return hermite((t - h) / h, y_mid, y_end, m1, 0.0)

    def rate(t):
        if t <= h:
            return hermite_rate(t / h, 0.0, y_mid, 0.0, m1)
        return hermite_rate((t - h) / h, y_mid, y_end, m1, 0.0)

    return value, rate


def gen_spline(count: int, cfg: LibraryConfig, rng) -> list[LibraryEntry]:
    """Random waypoint splines: lateral curve through a sampled midpoint
    and endpoint, linear speed ramp with a bounded speed change."""
    entries = []
    t_f = cfg.horizon * cfg.kin.dt
    max_dv = 1.9 * cfg.kin.max_accel * t_f
    for _ in range(count):
        v0 = rng.uniform(0.0, cfg.spline_speed_max)
        v_end = clamp(v0 + rng.uniform(-max_dv, max_dv), 0.0, cfg.spline_speed_max + 2.0)
        y_mid = rng.uniform(-cfg.spline_mid_offset, cfg.spline_mid_offset)
        y_end = rng.uniform(-cfg.spline_end_offset, cfg.spline_end_offset)
        _, rate = _two_piece_spline(y_mid, y_end, t_f)
        speed = lambda t, v0=v0, v_end=v_end: v0 + (v_end - v0) * t / t_f
        actions = _profile_to_actions(rate, speed, v0, cfg)
        traj = make_trajectory(VehicleState(0.0, 0.0, 0.0, float(v0)), actions, cfg.kin)
        entries.append(LibraryEntry(traj, "spline",
                                    {"v0": v0, "v_end": v_end, "y_mid": y_mid, "y_end": y_end}))
    return entries


def build_library(cfg: LibraryConfig) -> TrajectoryLibrary:
    """Union of all enabled families, deterministic under cfg.seed."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    entries: list[LibraryEntry] = []
    skipped = 0
    if "constant" in cfg.families:
        pairs = [(t, s) for t in cfg.const_throttles for s in cfg.const_steers]
        entries.extend(gen_constant_control(pairs, cfg.const_speeds, cfg))
    if "quintic" in cfg.families:
        quintic, q_skipped = gen_polynomial(cfg.quintic_offsets, cfg.quintic_target_speeds,
                                            cfg.quintic_initial_speeds, cfg)
        entries.extend(quintic)
        skipped += q_skipped
    if "spline" in cfg.families:
        entries.extend(gen_spline(cfg.spline_count, cfg, rng))
    if not entries:
        raise ValueError("library configuration produced no trajectories")
    return TrajectoryLibrary(entries, cfg.horizon, skipped)


def _state_list(s: VehicleState):
    return [s.x, s.y, s.theta, s.v]


def save_library(lib: TrajectoryLibrary, path):
    with open(path, "w") as f:
        for e in lib.entries:
            row = {
                "family": e.family,
                "params": e.params,
                "initial": _state_list(e.trajectory.initial),
                "actions": [[a.throttle, a.steer] for a in e.trajectory.actions],
                "states": [_state_list(s) for s in e.trajectory.states],
            }
            f.write(json.dumps(row, sort_keys=True) + "\n")


def load_library(path) -> TrajectoryLibrary:
    entries = []
    horizon = None
    with open(path) as f:
        for line in f:
            row = json.loads(line)
            initial = VehicleState(*row["initial"])
            actions = tuple(Action(t, s) for t, s in row["actions"])
            states = tuple(VehicleState(*s) for s in row["states"])
            entries.append(LibraryEntry(Trajectory(initial, actions, states),
                                        row["family"], row["params"]))
            horizon = len(actions)
    if not entries:
        raise ValueError(f"{path}: empty trajectory library")
    return TrajectoryLibrary(entries, horizon)
