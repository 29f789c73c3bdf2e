"""Deterministic quasi-static tabletop: push to the edge, transit, grasp, lift.

World frame: metres, +y points away from the table's front edge at
``table_edge_y``; pushing toward the edge is motion in -y. One episode is 320
steps split into fixed stages (push 144, transit 48, grasp 84, lift 44).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import IntEnum

import numpy as np

from . import _geom
from .shapes import ObjectShape, contains

PUSH_STEPS, TRANSIT_STEPS, GRASP_STEPS, LIFT_STEPS = 144, 48, 84, 44
EPISODE_STEPS = PUSH_STEPS + TRANSIT_STEPS + GRASP_STEPS + LIFT_STEPS
GRIPPER_CLOSE_STEPS = 4
ORACLE_FEATURES = 9
POSE_DIM = 7


class Stage(IntEnum):
    PUSH = 0
    TRANSIT = 1
    GRASP = 2
    LIFT = 3


STAGE_STARTS = (0, PUSH_STEPS, PUSH_STEPS + TRANSIT_STEPS, PUSH_STEPS + TRANSIT_STEPS + GRASP_STEPS)


def stage_of(t: int) -> Stage:
    if not 0 <= t < EPISODE_STEPS:
        raise ValueError(f"step index {t} outside [0, {EPISODE_STEPS})")
    if t < STAGE_STARTS[1]:
        return Stage.PUSH
    if t < STAGE_STARTS[2]:
        return Stage.TRANSIT
    if t < STAGE_STARTS[3]:
        return Stage.GRASP
    return Stage.LIFT


class EpisodeDone(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    table_edge_y: float = 0.83
    good_zone: tuple[float, float] = (0.85, 0.9)
    danger_y: float = 0.84
    fallen_z: float = 0.7
    lifted_z: float = 0.83
    table_height: float = 0.78
    object_rest_z: float = 0.81
    gripper_radius: float = 0.02
    action_scale: float = 0.01
    rotation_gain: float = 0.3
    bevel_slip: float = 0.35
    spawn_x: tuple[float, float] = (0.3, 0.7)
    spawn_y: tuple[float, float] = (1.0, 1.3)
    overhang_min: float = 0.03
    grasp_margin: float = 0.01
    com_grasp_tolerance: float = 0.6
    # artifact-defined layout
    table_x: tuple[float, float] = (-0.2, 1.2)
    table_far_y: float = 1.83
    view_x: tuple[float, float] = (0.0, 1.0)
    view_y: tuple[float, float] = (0.63, 1.63)
    start_gap: float = 0.05
    grasp_start_x: float | None = None  # None: transit keeps the gripper's x
    push_z: float = 0.81
    lift_height: float = 0.08
    fall_drop_per_step: float = 0.03
    fall_slide_per_step: float = 0.02
    max_object_radius: float = 0.45
    r_c_gain: float = 2.5
    r_zone: float = 1.0
    r_danger: float = -1.0
    r_fall: float = -1.0
    r_grasp: float = 5.0

    def __post_init__(self):
        if not self.danger_y > self.table_edge_y:
            raise ValueError("danger_y must lie above the table edge")
        if not self.good_zone[0] > self.danger_y:
            raise ValueError("good zone must lie above danger_y")

    @property
    def grasp_start(self) -> tuple[float, float, float]:
        x = 0.5 if self.grasp_start_x is None else self.grasp_start_x
        return (x, self.table_edge_y - 0.05, self.table_height)

    @property
    def slice_y(self) -> float:
        return self.table_edge_y - self.overhang_min / 2.0


@dataclass(slots=True)
class ObjectState:
    x: float
    y: float
    z: float
    theta: float
    fallen: bool = False
    lifted: bool = False
    tipping: int = 0  # steps spent falling after the COM crossed the edge


@dataclass(slots=True)
class GripperState:
    x: float
    y: float
    z: float
    quat: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 1.0)  # (qx, qy, qz, qw)
    fingers_closed: bool = False

    @property
    def pose(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, *self.quat])


@dataclass(slots=True)
class StageClock:
    t: int = 0

    @property
    def stage(self) -> Stage:
        return stage_of(min(self.t, EPISODE_STEPS - 1))


@dataclass(slots=True)
class RewardBreakdown:
    r_p: float
    r_g: float
    r_c: float
    total: float
    danger_flag_consumed: bool = False


@dataclass(slots=True)
class EnvState:
    obj: ObjectState
    gripper: GripperState
    clock: StageClock = field(default_factory=StageClock)
    danger_fired: bool = False
    zone_reached: bool = False
    grasp_z0: float = 0.0
    transit_from: tuple[float, float, float] = (0.0, 0.0, 0.0)
    done: bool = False

    def copy(self) -> "EnvState":
        return replace(self, obj=replace(self.obj), gripper=replace(self.gripper),
                       clock=replace(self.clock))


# ---------------------------------------------------------------------------
# mechanics


def _local(shape: ObjectShape) -> np.ndarray:
    v = getattr(shape, "_contig", None)
    if v is None:
        v = np.ascontiguousarray(shape.vertices, dtype=np.float64)
        object.__setattr__(shape, "_contig", v)
    return v


def world_polygon(obj: ObjectState, shape: ObjectShape) -> np.ndarray:
    return _geom.world_vertices(_local(shape), float(shape.com_offset[0]), float(shape.com_offset[1]),
                                obj.x, obj.y, obj.theta)


def centroid_world(obj: ObjectState, shape: ObjectShape) -> np.ndarray:
    c, s = math.cos(obj.theta), math.sin(obj.theta)
    ox, oy = -shape.com_offset
    return np.array([obj.x + c * ox - s * oy, obj.y + s * ox + c * oy])


def apply_push(displacement, state: EnvState, shape: ObjectShape, config: EnvConfig = EnvConfig()) -> EnvState:
    """Move the gripper by ``displacement`` and resolve contact with the object.

    Returns a new state; the input is not modified.
    """
    dx, dy = float(displacement[0]), float(displacement[1])
    limit = config.action_scale * math.sqrt(2.0) + 1e-12
    if math.hypot(dx, dy) > limit:
        raise ValueError(f"push displacement {math.hypot(dx, dy):.4g} exceeds {limit:.4g}")
    new = state.copy()
    _push_inplace(new, shape, config, dx, dy)
    return new


def _push_inplace(state: EnvState, shape: ObjectShape, config: EnvConfig, dx: float, dy: float) -> float:
    g = state.gripper
    o = state.obj
    gx = min(max(g.x + dx, config.table_x[0]), config.table_x[1])
    gy = min(max(g.y + dy, config.view_y[0]), config.table_far_y)
    if o.fallen or o.tipping or o.lifted:
        g.x, g.y = gx, gy
        return 0.0
    slip = config.bevel_slip if shape.beveled else 0.0
    ox, oy, th, gx, gy, depth, *_ = _geom.push(
        _local(shape), float(shape.com_offset[0]), float(shape.com_offset[1]),
        o.x, o.y, o.theta, gx, gy, config.gripper_radius, slip, config.rotation_gain)
    o.x, o.y, o.theta = ox, oy, th
    g.x, g.y = gx, gy
    return depth


def compute_overhang(obj: ObjectState, shape: ObjectShape, config: EnvConfig = EnvConfig()):
    """(overhang depth, (x_lo, x_hi) or None) at the grasp line."""
    over, found, lo, hi = _geom.overhang_and_slice(
        _local(shape), float(shape.com_offset[0]), float(shape.com_offset[1]),
        obj.x, obj.y, obj.theta, config.table_edge_y, config.slice_y)
    return over, ((lo, hi) if found else None)


def check_tip(obj: ObjectState, shape: ObjectShape, config: EnvConfig = EnvConfig()) -> bool:
    """True when the centre of mass has passed the table edge."""
    return obj.y < config.table_edge_y


def check_grasp(state: EnvState, shape: ObjectShape, config: EnvConfig = EnvConfig()) -> bool:
    obj = state.obj
    if obj.fallen or obj.tipping:
        return False
    over, interval = compute_overhang(obj, shape, config)
    if over < config.overhang_min or interval is None:
        return False
    lo, hi = interval
    gx = state.gripper.x
    if not (lo + config.grasp_margin <= gx <= hi - config.grasp_margin):
        return False
    return abs(gx - obj.x) <= config.com_grasp_tolerance * (hi - lo) / 2.0


def compute_reward(before: EnvState, after: EnvState, clock: StageClock,
                   config: EnvConfig = EnvConfig()) -> RewardBreakdown:
    """Reward for the step that advanced ``before`` into ``after``.

    ``clock.t`` is the index of that step (0..319).
    """
    t = clock.t
    stage = stage_of(t)
    o = after.obj
    r_c = 0.0
    if stage in (Stage.PUSH, Stage.GRASP):
        r_c = -config.r_c_gain * abs(o.x - after.gripper.x)
    r_p = 0.0
    danger = before.danger_fired
    if o.fallen and not before.obj.fallen:
        r_p = config.r_fall
    elif not danger and not o.fallen and o.y < config.danger_y:
        r_p = config.r_danger
        danger = True
    elif (t == PUSH_STEPS - 1 and not o.tipping and not o.fallen
          and config.good_zone[0] < o.y < config.good_zone[1]):
        r_p = config.r_zone
    r_g = 0.0
    if t == EPISODE_STEPS - 1 and o.z > config.lifted_z:
        r_g = config.r_grasp
    return RewardBreakdown(r_p, r_g, r_c, r_p + r_g + r_c, danger)


# ---------------------------------------------------------------------------
# rendering


FLOOR_RGB = (0.15, 0.15, 0.15)
TABLE_RGB = (0.55, 0.40, 0.25)
GRIPPER_RGB = (0.03, 0.03, 0.03)


def _pixel_centers(size: int, config: EnvConfig):
    x0, x1 = config.view_x
    y0, y1 = config.view_y
    xs = x0 + (np.arange(size) + 0.5) * (x1 - x0) / size
    ys = y1 - (np.arange(size) + 0.5) * (y1 - y0) / size  # row 0 is the far side
    return np.meshgrid(xs, ys)


_GRID_CACHE: dict = {}


def render(state: EnvState, shape: ObjectShape, image_size: int = 32, channels: int = 1,
           config: EnvConfig = EnvConfig()) -> np.ndarray:
    """Top-down orthographic raster, (image_size, image_size, channels) in [0, 1]."""
    key = (image_size, config.view_x, config.view_y)
    grid = _GRID_CACHE.get(key)
    if grid is None:
        grid = _GRID_CACHE[key] = _pixel_centers(image_size, config)
    px, py = grid
    table = (py >= config.table_edge_y) & (px >= config.table_x[0]) & (px <= config.table_x[1])
    w = world_polygon(state.obj, shape)
    obj_mask = contains(w, px.ravel(), py.ravel()).reshape(px.shape)
    g = state.gripper
    grip_mask = (px - g.x) ** 2 + (py - g.y) ** 2 <= config.gripper_radius ** 2
    if channels == 1:
        def lum(c):
            return (0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2],)
        floor, tab, grip, col = lum(FLOOR_RGB), lum(TABLE_RGB), lum(GRIPPER_RGB), (shape.intensity,)
    elif channels == 3:
        floor, tab, grip, col = FLOOR_RGB, TABLE_RGB, GRIPPER_RGB, tuple(shape.color)
    else:
        raise ValueError("channels must be 1 or 3")
    img = np.empty(px.shape + (channels,))
    img[...] = floor
    img[table] = tab
    img[obj_mask] = col
    img[grip_mask] = grip
    return img


# ---------------------------------------------------------------------------
# observation


def oracle_features(state: EnvState, shape: ObjectShape, config: EnvConfig = EnvConfig()) -> np.ndarray:
    o = state.obj
    over, interval = compute_overhang(o, shape, config)
    if interval is None:
        lo = hi = o.x
        valid = 0.0
    else:
        lo, hi = interval
        valid = 1.0
    return np.array([o.x, o.y, o.z, math.sin(o.theta), math.cos(o.theta), over, lo, hi, valid])


def observe(state: EnvState, shape: ObjectShape, encoder=None, config: EnvConfig = EnvConfig()) -> np.ndarray:
    """Policy state: [latent mean or oracle features, 7-d gripper pose]."""
    g = state.gripper
    pose = [g.x, g.y, g.z, *g.quat]
    if encoder is None:
        head = oracle_features(state, shape, config)
    else:
        img = render(state, shape, encoder.config.image_size, encoder.config.channels, config)
        head = encoder.encode(img).mu
    return np.concatenate([head, pose])


# ---------------------------------------------------------------------------
# environment


class TabletopEnv:
    """Single episode runner around ``EnvState``.

    ``encoder`` switches observations from oracle features to latent means.
    """

    def __init__(self, config: EnvConfig = EnvConfig(), encoder=None):
        self.config = config
        self.encoder = encoder
        self.state: EnvState | None = None
        self.shape: ObjectShape | None = None

    @property
    def obs_dim(self) -> int:
        head = ORACLE_FEATURES if self.encoder is None else self.encoder.config.latent_dim
        return head + POSE_DIM

    def reset(self, seed, shape: ObjectShape) -> np.ndarray:
        cfg = self.config
        if shape.radius > cfg.max_object_radius:
            raise ValueError(f"shape {shape.name} footprint radius {shape.radius:.3f} m "
                             f"exceeds the spawn limit {cfg.max_object_radius} m")
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        # redraw until the whole footprint rests on the table
        for _ in range(1000):
            x = float(rng.uniform(*cfg.spawn_x))
            y = float(rng.uniform(*cfg.spawn_y))
            theta = _geom.wrap_angle(float(rng.uniform(-math.pi, math.pi)))
            obj = ObjectState(x, y, cfg.object_rest_z, theta)
            w = world_polygon(obj, shape)
            if (w[:, 1].min() >= cfg.table_edge_y and w[:, 1].max() <= cfg.table_far_y
                    and w[:, 0].min() >= cfg.table_x[0] and w[:, 0].max() <= cfg.table_x[1]):
                break
        else:
            raise ValueError(f"shape {shape.name} does not fit on the table from the spawn region")
        found, _, back = _geom.slice_at_x(w, x)
        if not found:
            back = float(w[:, 1].max())
        clear = cfg.gripper_radius + cfg.start_gap
        gy = back + clear
        # parts of the outline beside the COM line may still be closer than the gap
        for _ in range(100):
            *_, dist, _ = _geom.closest_boundary(w, x, gy)
            if dist >= clear - 1e-9 and not _geom.point_in_polygon(w, x, gy):
                break
            gy += clear - dist + 1e-6
        gripper = GripperState(x, gy, cfg.push_z)
        self.state = EnvState(obj, gripper)
        self.shape = shape
        return self.observe()

    def observe(self) -> np.ndarray:
        return observe(self.state, self.shape, self.encoder, self.config)

    def render(self, image_size: int = 32, channels: int = 1) -> np.ndarray:
        return render(self.state, self.shape, image_size, channels, self.config)

    def step(self, action):
        """Advance one step. Returns (observation, RewardBreakdown, done, info)."""
        s = self.state
        if s is None:
            raise RuntimeError("reset() must be called before step()")
        if s.done:
            raise EpisodeDone("step() called on a finished episode; call reset()")
        cfg = self.config
        a0 = min(max(float(action[0]), -1.0), 1.0)
        a1 = min(max(float(action[1]), -1.0), 1.0)
        a2 = min(max(float(action[2]), -1.0), 1.0)
        t = s.clock.t
        stage = stage_of(t)
        before_fallen = s.obj.fallen
        before_danger = s.danger_fired
        o, g = s.obj, s.gripper

        if o.tipping and not o.fallen:
            self._advance_fall()
        if stage is Stage.PUSH:
            _push_inplace(s, self.shape, cfg, a0 * cfg.action_scale, a1 * cfg.action_scale)
            if not o.tipping and not o.fallen and check_tip(o, self.shape, cfg):
                self._advance_fall()
        elif stage is Stage.TRANSIT:
            k = t - STAGE_STARTS[1] + 1
            if k == 1:
                s.transit_from = (g.x, g.y, g.z)
            fx, fy, fz = s.transit_from
            tx, ty, tz = cfg.grasp_start
            if cfg.grasp_start_x is None:
                tx = fx
            f = k / TRANSIT_STEPS
            g.x, g.y, g.z = fx + f * (tx - fx), fy + f * (ty - fy), fz + f * (tz - fz)
        elif stage is Stage.GRASP:
            g.x = min(max(g.x + a2 * cfg.action_scale, cfg.table_x[0]), cfg.table_x[1])
        else:
            k = t - STAGE_STARTS[3]
            if k < GRIPPER_CLOSE_STEPS:
                if k == GRIPPER_CLOSE_STEPS - 1:
                    g.fingers_closed = True
                    s.grasp_z0 = g.z
                    o.lifted = check_grasp(s, self.shape, cfg)
            else:
                rise_steps = LIFT_STEPS - GRIPPER_CLOSE_STEPS
                g.z = s.grasp_z0 + cfg.lift_height * (k - GRIPPER_CLOSE_STEPS + 1) / rise_steps
                if o.lifted:
                    o.z = cfg.object_rest_z + (g.z - s.grasp_z0)

        reward = self._reward(t, before_fallen, before_danger)
        s.danger_fired = reward.danger_flag_consumed
        if reward.r_p == cfg.r_zone:
            s.zone_reached = True
        s.clock.t = t + 1
        s.done = s.clock.t >= EPISODE_STEPS or o.fallen
        over, interval = compute_overhang(o, self.shape, cfg)
        info = {
            "o_x": o.x, "o_y": o.y, "o_z": o.z, "overhang": over, "stage": int(stage),
            "t": t, "zone": s.zone_reached, "danger": s.danger_fired, "fallen": o.fallen,
            "lifted": o.lifted, "success": s.done and o.z > cfg.lifted_z,
        }
        return self.observe(), reward, s.done, info

    def _advance_fall(self) -> None:
        o = self.state.obj
        cfg = self.config
        o.tipping += 1
        o.z = cfg.object_rest_z - cfg.fall_drop_per_step * o.tipping
        o.y -= cfg.fall_slide_per_step
        if o.z < cfg.fallen_z:
            o.fallen = True

    def _reward(self, t: int, before_fallen: bool, before_danger: bool) -> RewardBreakdown:
        s = self.state
        before = _RewardView(before_fallen, before_danger)
        return compute_reward(before, s, StageClock(t), self.config)


@dataclass(slots=True)
class _RewardView:
    """The two pre-step facts ``compute_reward`` reads from ``before``."""

    fallen: bool
    danger_fired: bool

    @property
    def obj(self):
        return self


# ---------------------------------------------------------------------------
# hand-written controller with privileged state


def scripted_action(env: TabletopEnv, target_y: float = 0.87, floor_y: float = 0.845) -> np.ndarray:
    """Two-component action (dx, dy) that solves the task from privileged state.

    Push: drive toward the edge along the COM line, stopping at ``target_y``
    once the overhang admits a grasp at the COM (otherwise keep going, never
    below ``floor_y``). Grasp: move the gripper to the COM x.
    """
    s = env.state
    cfg = env.config
    o, g = s.obj, s.gripper
    stage = s.clock.stage
    dx = min(max((o.x - g.x) / cfg.action_scale, -1.0), 1.0)
    if stage is Stage.PUSH:
        ready = o.y <= target_y and _grasp_feasible(o, env.shape, cfg)
        if ready or o.y <= floor_y:
            # hold still: sliding along a slanted face would still push the object
            return np.zeros(2)
        # slow down so one step never carries the object past floor_y
        dy = -min(1.0, max((o.y - floor_y) / cfg.action_scale, 0.05))
        dx = min(max(dx, dy), -dy)
        return np.array([dx, dy])
    if stage is Stage.GRASP:
        return np.array([dx, 0.0])
    return np.zeros(2)


def _grasp_feasible(o: ObjectState, shape: ObjectShape, cfg: EnvConfig, slack: float = 0.005) -> bool:
    over, interval = compute_overhang(o, shape, cfg)
    if over < cfg.overhang_min + slack or interval is None:
        return False
    lo, hi = interval
    return lo + cfg.grasp_margin + slack <= o.x <= hi - cfg.grasp_margin - slack


def tie_action(action2) -> np.ndarray:
    """Expand a 2-component policy output to the environment's [dp_x, dp_y, dg_x]."""
    return np.array([action2[0], action2[1], action2[0]], dtype=float)
