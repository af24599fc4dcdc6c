"""Flat 2-D driving scenarios: corridor, highway, intersection, roundabout.

The ego vehicle is a free body stepped by the bicycle model; traffic
vehicles ride fixed lane polylines with a gap-keeping longitudinal law and
never change lanes. Observations are fixed-size normalized feature
vectors, rewards decompose into driving/speed/jerk/termination parts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .kinematics import Action, KinematicsConfig, VehicleState, step, wrap_angle

LANE_WIDTH = 3.5
N_NEIGHBORS = 6
NEIGHBOR_RANGE = 60.0
VEHICLE_LEN = 4.5
DISC_RADIUS = 1.1
DISC_OFFSET = 1.15

# observation layout
OBS_DIM = 4 + 4 * N_NEIGHBORS + 3
IDX_SPEED = 0
IDX_LAT = 1
IDX_HEAD = 2
IDX_PROGRESS = 3
IDX_NEIGHBORS = 4
IDX_NAV = 4 + 4 * N_NEIGHBORS

SCENARIOS = ("corridor", "highway", "intersection", "roundabout")
CAUSES = ("none", "success", "collision", "offroad", "timeout")
NAV_INDEX = {"straight": 0, "left": 1, "right": 2, "uturn": 1}


def ego_speed_from_obs(obs, v_max=20.0) -> float:
    return float(obs[IDX_SPEED]) * v_max


@dataclass
class RewardWeights:
    driving: float = 1.0
    speed: float = 0.1
    jerk: float = 0.05
    termination: float = 10.0


@dataclass
class ScenarioConfig:
    scenario: str = "corridor"
    density: float = 0.2
    step_cap: int = 300
    seed: int = 0
    task: str = "straight"  # intersection/roundabout route choice
    route_length: float | None = None  # corridor/highway override
    # ego start randomization (lateral m, heading rad, speed m/s amplitudes);
    # used when collecting demonstrations so corrections get covered
    ego_noise: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    kin: KinematicsConfig = field(default_factory=KinematicsConfig)
    reward: RewardWeights = field(default_factory=RewardWeights)

    def validate(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if not 0.0 <= self.density <= 1.0:
            raise ValueError("traffic density must lie in [0, 1]")
        if self.step_cap < 1:
            raise ValueError("step_cap must be >= 1")
        if self.task not in NAV_INDEX:
            raise ValueError(f"unknown task {self.task!r}")


def default_scenario_config(name: str) -> ScenarioConfig:
    density = {"corridor": 0.2, "highway": 0.3, "intersection": 0.45, "roundabout": 0.3}[name]
    cap = {"corridor": 300, "highway": 300, "intersection": 250, "roundabout": 300}[name]
    return ScenarioConfig(scenario=name, density=density, step_cap=cap)


@dataclass
class StepOutcome:
    obs: np.ndarray
    reward: float
    components: dict
    done: bool
    cause: str
    state: VehicleState = None
    action: Action = None


class Polyline:
    """Piecewise-linear path with arc-length lookup and point projection."""

    def __init__(self, pts, closed=False):
        pts = np.asarray(pts, dtype=float)
        keep = np.concatenate([[True], np.hypot(*np.diff(pts, axis=0).T) > 1e-9])
        pts = pts[keep]
        if closed:
            pts = np.vstack([pts, pts[:1]])
        self.pts = pts
        self.closed = closed
        d = np.diff(pts, axis=0)
        self.seg_len = np.hypot(d[:, 0], d[:, 1])
        self.seg_dir = d / self.seg_len[:, None]
        self.cum = np.concatenate([[0.0], np.cumsum(self.seg_len)])
        self.length = float(self.cum[-1])

    def point_at(self, s: float) -> np.ndarray:
        if self.closed:
            s = s % self.length
        s = min(max(s, 0.0), self.length)
        i = min(int(np.searchsorted(self.cum, s, side="right")) - 1, len(self.seg_len) - 1)
        return self.pts[i] + self.seg_dir[i] * (s - self.cum[i])

    def heading_at(self, s: float) -> float:
        if self.closed:
            s = s % self.length
        s = min(max(s, 0.0), self.length)
        i = min(int(np.searchsorted(self.cum, s, side="right")) - 1, len(self.seg_len) - 1)
        return math.atan2(self.seg_dir[i, 1], self.seg_dir[i, 0])

    def project(self, x: float, y: float):
        """Nearest point on the path; returns (s, signed lateral offset)."""
        p = np.array([x, y])
        rel = p[None, :] - self.pts[:-1]
        t = np.clip((rel * self.seg_dir).sum(axis=1), 0.0, self.seg_len)
        closest = self.pts[:-1] + self.seg_dir * t[:, None]
        d2 = ((p[None, :] - closest) ** 2).sum(axis=1)
        i = int(np.argmin(d2))
        offset = p - closest[i]
        lateral = self.seg_dir[i, 0] * offset[1] - self.seg_dir[i, 1] * offset[0]
        return float(self.cum[i] + t[i]), float(lateral)


def _arc(cx, cy, r, a0, a1, spacing=0.5):
    n = max(3, int(abs(a1 - a0) * r / spacing))
    angles = np.linspace(a0, a1, n)
    return np.stack([cx + r * np.cos(angles), cy + r * np.sin(angles)], axis=1)


def _line(p0, p1, spacing=2.0):
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    n = max(2, int(np.hypot(*(p1 - p0)) / spacing))
    return np.linspace(p0, p1, n)


def rounded_path(waypoints, radius, spacing=0.5):
    """Polyline through waypoints with every interior corner replaced by a
    tangent fillet arc (shrunk when the legs are too short)."""
    waypoints = [np.asarray(w, dtype=float) for w in waypoints]
    pts = [waypoints[0]]
    for i in range(1, len(waypoints) - 1):
        a, b, c = waypoints[i - 1], waypoints[i], waypoints[i + 1]
        u = (b - a) / np.hypot(*(b - a))
        v = (c - b) / np.hypot(*(c - b))
        cross = u[0] * v[1] - u[1] * v[0]
        turn = math.atan2(cross, float(u @ v))
        if abs(turn) < 1e-9:
            pts.append(b)
            continue
        t = min(radius * math.tan(abs(turn) / 2.0),
                np.hypot(*(b - a)) / 2.0, np.hypot(*(c - b)) / 2.0)
        r_eff = t / math.tan(abs(turn) / 2.0)
        p1 = b - u * t
        side = 1.0 if cross > 0 else -1.0
        normal = side * np.array([-u[1], u[0]])
        center = p1 + normal * r_eff
        a0 = math.atan2(*(p1 - center)[::-1])
        pts.extend(_line(pts[-1], p1)[1:])
        pts.extend(_arc(center[0], center[1], r_eff, a0, a0 + turn, spacing)[1:])
    pts.extend(_line(pts[-1], waypoints[-1])[1:])
    return np.array(pts)


@dataclass
class Scene:
    route: Polyline
    traffic_lanes: list
    spawn_slots: list            # (lane index, arc position)
    ego_start: VehicleState
    nav: str
    offroad_limit: float
    parallel_ys: np.ndarray | None
    traffic_speed: tuple
    traffic_v_cap: float = 15.0


def _corridor_scene(cfg: ScenarioConfig, length: float, speed_range) -> Scene:
    ys = np.array([0.0, LANE_WIDTH, 2 * LANE_WIDTH])
    lanes = [Polyline([(0.0, y), (length, y)]) for y in ys]
    slots = [(lane, x) for lane in range(3) for x in np.arange(30.0, length - 18.0, 25.0)]
    return Scene(
        route=Polyline([(0.0, LANE_WIDTH), (length, LANE_WIDTH)]),
        traffic_lanes=lanes,
        spawn_slots=slots,
        ego_start=VehicleState(0.0, LANE_WIDTH, 0.0, 0.0),
        nav="straight",
        offroad_limit=1.5 * LANE_WIDTH,
        parallel_ys=ys,
        traffic_speed=speed_range,
    )


def _intersection_scene(cfg: ScenarioConfig) -> Scene:
    if cfg.task == "straight":
        pts = _line((0.0, -50.0), (0.0, 50.0))
    elif cfg.task == "right":
        pts = rounded_path([(0.0, -50.0), (0.0, -1.75), (50.0, -1.75)], 6.0)
    elif cfg.task == "left":
        pts = rounded_path([(0.0, -50.0), (0.0, 1.75), (-50.0, 1.75)], 8.0)
    else:  # uturn: loop around the junction back to the southbound side
        pts = rounded_path([(0.0, -50.0), (0.0, 5.0), (-11.0, 5.0), (-11.0, -50.0)], 5.0)
    east = Polyline([(-60.0, -1.75), (60.0, -1.75)])
    west = Polyline([(60.0, 1.75), (-60.0, 1.75)])
    slots = [(lane, s) for lane in (0, 1) for s in np.arange(10.0, 105.0, 15.0)]
    return Scene(
        route=Polyline(pts),
        traffic_lanes=[east, west],
        spawn_slots=slots,
        ego_start=VehicleState(0.0, -50.0, math.pi / 2, 3.0),
        nav=cfg.task,
        offroad_limit=3.0,
        parallel_ys=None,
        traffic_speed=(4.0, 7.0),
    )


def _roundabout_scene(cfg: ScenarioConfig) -> Scene:
    r = 12.0
    r_in, r_out = 8.0, 6.0
    # entry: straight up x=0, then a right arc externally tangent to the ring
    a_center = np.array([r_in, -math.sqrt((r + r_in) ** 2 - r_in ** 2)])
    tangency_in = a_center * (r / (r + r_in))
    theta_in = math.atan2(tangency_in[1], tangency_in[0])
    phi0 = math.pi
    phi1 = math.atan2(*(tangency_in - a_center)[::-1])
    exits = {"right": 0.0, "straight": math.pi / 2, "left": math.pi, "uturn": math.pi}
    psi = exits[cfg.task]
    theta_out = psi - math.pi / 6.0
    while theta_out <= theta_in:
        theta_out += 2 * math.pi
    q = r * np.array([math.cos(theta_out), math.sin(theta_out)])
    b_center = q * ((r + r_out) / r)
    sweep = math.pi / 3.0  # right turn from ring heading to the exit heading
    e0 = theta_out + math.pi
    pts = np.vstack([
        _line((0.0, -45.0), (0.0, a_center[1])),
        _arc(a_center[0], a_center[1], r_in, phi0, phi1)[1:],
        _arc(0.0, 0.0, r, theta_in, theta_out)[1:],
        _arc(b_center[0], b_center[1], r_out, e0, e0 - sweep)[1:],
    ])
    exit_dir = np.array([math.cos(psi), math.sin(psi)])
    pts = np.vstack([pts, _line(pts[-1], pts[-1] + exit_dir * 30.0)[1:]])
    ring = Polyline(_arc(0.0, 0.0, r, 0.0, 2 * math.pi)[:-1], closed=True)
    slots = [(0, ring.length * k / 8.0) for k in range(8)]
    return Scene(
        route=Polyline(pts),
        traffic_lanes=[ring],
        spawn_slots=slots,
        ego_start=VehicleState(0.0, -45.0, math.pi / 2, 3.0),
        nav=cfg.task,
        offroad_limit=3.0,
        parallel_ys=None,
        traffic_speed=(3.5, 5.5),
        traffic_v_cap=7.0,
    )


def build_scene(cfg: ScenarioConfig) -> Scene:
    cfg.validate()
    if cfg.scenario == "corridor":
        return _corridor_scene(cfg, cfg.route_length or 150.0, (3.0, 6.0))
    if cfg.scenario == "highway":
        return _corridor_scene(cfg, cfg.route_length or 250.0, (3.0, 5.5))
    if cfg.scenario == "intersection":
        return _intersection_scene(cfg)
    return _roundabout_scene(cfg)


class TrafficVehicle:
    __slots__ = ("lane", "s", "v", "v_des")

    def __init__(self, lane, s, v):
        self.lane = lane
        self.s = s
        self.v = v
        self.v_des = v


def _discs(x, y, theta):
    c, s = math.cos(theta), math.sin(theta)
    return ((x + DISC_OFFSET * c, y + DISC_OFFSET * s),
            (x - DISC_OFFSET * c, y - DISC_OFFSET * s))


def discs_overlap(x1, y1, t1, x2, y2, t2) -> bool:
    limit = (2 * DISC_RADIUS) ** 2
    for ax, ay in _discs(x1, y1, t1):
        for bx, by in _discs(x2, y2, t2):
            if (ax - bx) ** 2 + (ay - by) ** 2 < limit:
                return True
    return False


class DrivingEnv:
    """One episode owner; reset(seed) then step(action) until done."""

    def __init__(self, cfg: ScenarioConfig):
        cfg.validate()
        self.cfg = cfg
        self.scene = build_scene(cfg)
        self.done = True
        self.cause = "none"

    # -- lifecycle ---------------------------------------------------------

    def reset(self, seed=None) -> np.ndarray:
        rng = np.random.default_rng(self.cfg.seed if seed is None else seed)
        self.ego = self.scene.ego_start
        lat_amp, head_amp, speed_amp = self.cfg.ego_noise
        if lat_amp or head_amp or speed_amp:
            start = self.scene.ego_start
            lat = rng.uniform(-lat_amp, lat_amp)
            self.ego = VehicleState(
                start.x - lat * math.sin(start.theta),
                start.y + lat * math.cos(start.theta),
                wrap_angle(start.theta + rng.uniform(-head_amp, head_amp)),
                min(max(start.v + rng.uniform(0.0, speed_amp), 0.0), self.cfg.kin.v_max))
        self.traffic: list[TrafficVehicle] = []
        for lane, s in self.scene.spawn_slots:
            if rng.random() < self.cfg.density:
                lo, hi = self.scene.traffic_speed
                self.traffic.append(TrafficVehicle(lane, float(s), float(rng.uniform(lo, hi))))
        self.step_count = 0
        self.done = False
        self.cause = "none"
        self.prev_action = (0.0, 0.0)
        self.progress, _ = self.scene.route.project(self.ego.x, self.ego.y)
        return self._observe()

    # -- traffic -----------------------------------------------------------

    def _traffic_positions(self):
        out = []
        for veh in self.traffic:
            lane = self.scene.traffic_lanes[veh.lane]
            p = lane.point_at(veh.s)
            out.append((p[0], p[1], lane.heading_at(veh.s), veh.v))
        return out

    def _lead_gap(self, veh):
        """Distance to the nearest blocker ahead in the same lane (traffic
        or the ego when it occupies that lane)."""
        lane = self.scene.traffic_lanes[veh.lane]
        best = None
        best_v = 0.0
        for other in self.traffic:
            if other is veh or other.lane != veh.lane:
                continue
            gap = other.s - veh.s
            if lane.closed:
                gap %= lane.length
            if 0.0 < gap and (best is None or gap < best):
                best, best_v = gap, other.v
        s_e, lat_e = lane.project(self.ego.x, self.ego.y)
        if abs(lat_e) < 1.9:
            gap = s_e - veh.s
            if lane.closed:
                gap %= lane.length
            if 0.0 < gap < 40.0 and (best is None or gap < best):
                best, best_v = gap, self.ego.v
        return best, best_v

    def _advance_traffic(self, dt):
        kept = []
        for veh in self.traffic:
            gap, v_lead = self._lead_gap(veh)
            accel = 0.8 * (veh.v_des - veh.v)
            if gap is not None:
                desired = 4.0 + 1.0 * veh.v
                accel = min(accel, 0.6 * (gap - VEHICLE_LEN - desired) + 0.8 * (v_lead - veh.v))
            veh.v = min(max(veh.v + max(-4.0, min(accel, 1.5)) * dt, 0.0),
                        self.scene.traffic_v_cap)
            veh.s += veh.v * dt
            lane = self.scene.traffic_lanes[veh.lane]
            if lane.closed:
                veh.s %= lane.length
                kept.append(veh)
            elif veh.s < lane.length - 2.0:
                kept.append(veh)
        self.traffic = kept

    # -- stepping ----------------------------------------------------------

    def step(self, action: Action) -> StepOutcome:
        if self.done:
            raise RuntimeError("step() called on a terminated environment")
        kin = self.cfg.kin
        prev_progress = self.progress
        self.ego = step(self.ego, action, kin)
        self._advance_traffic(kin.dt)
        self.step_count += 1

        s_now, lateral = self.scene.route.project(self.ego.x, self.ego.y)
        self.progress = s_now

        r_driving = s_now - prev_progress
        r_speed = self.ego.v / kin.v_max
        dt_thr = action.throttle - self.prev_action[0]
        dt_str = action.steer - self.prev_action[1]
        r_jerk = -(dt_thr ** 2 + dt_str ** 2)
        self.prev_action = (action.throttle, action.steer)

        cause = "none"
        if s_now >= self.scene.route.length - 0.5:
            cause = "success"
        elif self._collided():
            cause = "collision"
        elif abs(lateral) > self.scene.offroad_limit:
            cause = "offroad"
        elif self.step_count >= self.cfg.step_cap:
            cause = "timeout"

        r_term = {"success": 1.0, "collision": -1.0, "offroad": -1.0,
                  "timeout": -0.5, "none": 0.0}[cause]
        self.done = cause != "none"
        self.cause = cause

        w = self.cfg.reward
        components = {"driving": r_driving, "speed": r_speed,
                      "jerk": r_jerk, "termination": r_term}
        reward = (w.driving * r_driving + w.speed * r_speed
                  + w.jerk * r_jerk + w.termination * r_term)
        return StepOutcome(self._observe(), reward, components, self.done, cause,
                           state=self.ego, action=action)

    def _collided(self) -> bool:
        e = self.ego
        for x, y, theta, _ in self._traffic_positions():
            if abs(x - e.x) > 8.0 or abs(y - e.y) > 8.0:
                continue
            if discs_overlap(e.x, e.y, e.theta, x, y, theta):
                return True
        return False

    def completion_ratio(self) -> float:
        if self.cause == "success":
            return 1.0
        return min(max(self.progress / self.scene.route.length, 0.0), 1.0)

    @property
    def ego_speed(self) -> float:
        return self.ego.v

    # -- observation -------------------------------------------------------

    def _ego_lane_frame(self):
        """(route lateral, heading error, nearest-lane id).

        Lateral is measured from the route centerline; in half-lane units
        the parallel lane centers land on even integers, so the feature
        carries both the current lane and the in-lane offset.
        """
        s, lat = self.scene.route.project(self.ego.x, self.ego.y)
        head_err = wrap_angle(self.ego.theta - self.scene.route.heading_at(s))
        if self.scene.parallel_ys is not None:
            idx = int(np.argmin(np.abs(self.scene.parallel_ys - self.ego.y)))
        else:
            idx = -1
        return lat, head_err, idx

    def _observe(self) -> np.ndarray:
        kin = self.cfg.kin
        obs = np.zeros(OBS_DIM)
        lat, head_err, ego_lane = self._ego_lane_frame()
        obs[IDX_SPEED] = self.ego.v / kin.v_max
        obs[IDX_LAT] = lat / (LANE_WIDTH / 2.0)
        obs[IDX_HEAD] = head_err / (math.pi / 2.0)
        obs[IDX_PROGRESS] = self.progress / self.scene.route.length

        cos_t, sin_t = math.cos(self.ego.theta), math.sin(self.ego.theta)
        rows = []
        for i, (x, y, theta, v) in enumerate(self._traffic_positions()):
            dx, dy = x - self.ego.x, y - self.ego.y
            dist = math.hypot(dx, dy)
            if dist > NEIGHBOR_RANGE:
                continue
            fwd = cos_t * dx + sin_t * dy
            left = -sin_t * dx + cos_t * dy
            if self.scene.parallel_ys is not None:
                lane_idx = int(np.argmin(np.abs(self.scene.parallel_ys - y)))
                same = 1.0 if lane_idx == ego_lane else 0.0
            else:
                _, n_lat = self.scene.route.project(x, y)
                same = 1.0 if abs(n_lat) < LANE_WIDTH / 2.0 else 0.0
            rows.append((dist, fwd / 50.0, left / 10.0, (v - self.ego.v) / kin.v_max, same))
        rows.sort(key=lambda r: r[0])
        for slot, row in enumerate(rows[:N_NEIGHBORS]):
            base = IDX_NEIGHBORS + 4 * slot
            obs[base:base + 4] = row[1:]

        obs[IDX_NAV + NAV_INDEX[self.scene.nav]] = 1.0
        return obs
