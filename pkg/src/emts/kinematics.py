"""Deterministic kinematic bicycle model used by the simulator and every
trajectory generator."""

from __future__ import annotations

import math
from dataclasses import dataclass

_TWO_PI = 2.0 * math.pi


def wrap_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    w = theta % _TWO_PI
    if w > math.pi:
        w -= _TWO_PI
    return w


def clamp(value: float, lo: float, hi: float) -> float:
    return lo if value < lo else hi if value > hi else value


@dataclass(frozen=True)
class Action:
    """Normalized throttle/steer pair; both components clamp to [-1, 1]."""

    throttle: float
    steer: float

    def __post_init__(self):
        if not (math.isfinite(self.throttle) and math.isfinite(self.steer)):
            raise ValueError(f"non-finite action components: {self.throttle}, {self.steer}")
        object.__setattr__(self, "throttle", clamp(float(self.throttle), -1.0, 1.0))
        object.__setattr__(self, "steer", clamp(float(self.steer), -1.0, 1.0))


@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    theta: float  # heading [rad], kept in (-pi, pi]
    v: float      # speed [m/s], >= 0 (no reverse)


@dataclass(frozen=True)
class KinematicsConfig:
    dt: float = 0.1              # s
    wheelbase: float = 2.5       # m
    max_accel: float = 4.0       # m/s^2
    max_steer_angle: float = 0.5  # rad
    v_max: float = 20.0          # m/s

    def __post_init__(self):
        if min(self.dt, self.wheelbase, self.max_accel, self.max_steer_angle, self.v_max) <= 0:
            raise ValueError("kinematics parameters must be strictly positive")
        if self.max_steer_angle >= math.pi / 2:
            raise ValueError("max_steer_angle must be below pi/2")


def step(state: VehicleState, action: Action, cfg: KinematicsConfig) -> VehicleState:
    """One forward-Euler update.

    Position and heading advance with the pre-update speed; speed then
    integrates the commanded acceleration and clamps to [0, v_max].
    """
    if not (math.isfinite(state.x) and math.isfinite(state.y)
            and math.isfinite(state.theta) and math.isfinite(state.v)):
        raise ValueError(f"non-finite vehicle state: {state}")
    accel = action.throttle * cfg.max_accel
    delta = action.steer * cfg.max_steer_angle
    x = state.x + state.v * math.cos(state.theta) * cfg.dt
    y = state.y + state.v * math.sin(state.theta) * cfg.dt
    theta = wrap_angle(state.theta + (state.v / cfg.wheelbase) * math.tan(delta) * cfg.dt)
    v = clamp(state.v + accel * cfg.dt, 0.0, cfg.v_max)
    return VehicleState(x, y, theta, v)


def rollout(initial: VehicleState, actions, cfg: KinematicsConfig) -> list[VehicleState]:
    """Fold `step` over an action sequence; element i is the state reached
    after applying actions[0..i]."""
    states = []
    current = initial
    for action in actions:
        current = step(current, action, cfg)
        states.append(current)
    return states
