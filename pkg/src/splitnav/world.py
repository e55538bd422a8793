"""Synthetic box world: ray-cast RGB-D camera, drone dynamics, curriculum.

Geometry is axis-aligned boxes inside a rectangular arena, optionally with a
ground plane.  The camera is a pinhole model; depth is the Euclidean
distance to the first hit, clipped at ``depth_clip`` metres and normalised
to [0, 1], where exactly 1.0 means sky (no hit within the clip range).
RGB shading is flat Lambertian from a fixed directional light plus an
ambient term; there is no distance shading, so image brightness carries no
depth shortcut.  All stochastic generation draws from caller-provided
generators, never from global state.
"""
from __future__ import annotations

import functools
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import ConfigurationError

log = logging.getLogger(__name__)

GOAL_RADIUS_M = 2.0
DRONE_RADIUS_M = 0.5
MIN_EPISODE_STEPS = 16


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


@dataclass(frozen=True)
class Box:
    min_corner: tuple[float, float, float]
    max_corner: tuple[float, float, float]
    albedo: tuple[float, float, float]

    def __post_init__(self):
        if any(lo >= hi for lo, hi in zip(self.min_corner, self.max_corner)):
            raise ConfigurationError(f"degenerate box {self.min_corner}..{self.max_corner}")


@dataclass(frozen=True)
class WorldConfig:
    arena_min: tuple[float, float, float] = (-40.0, -40.0, 0.0)
    arena_max: tuple[float, float, float] = (40.0, 40.0, 12.0)
    depth_clip: float = 100.0
    ground_height: float | None = None
    sky_color: tuple[float, float, float] = (0.55, 0.75, 0.95)
    ground_albedo: tuple[float, float, float] = (0.35, 0.33, 0.30)
    light_dir: tuple[float, float, float] = (0.3, -0.5, 0.8)
    ambient: float = 0.2

    def __post_init__(self):
        if any(lo >= hi for lo, hi in zip(self.arena_min, self.arena_max)):
            raise ConfigurationError("arena bounds are inverted")
        if self.depth_clip <= 0:
            raise ConfigurationError("depth clip must be positive")
        norm = math.sqrt(sum(c * c for c in self.light_dir))
        if norm == 0:
            raise ConfigurationError("light direction cannot be zero")
        object.__setattr__(self, "light_dir", tuple(c / norm for c in self.light_dir))


@dataclass
class World:
    config: WorldConfig
    boxes: list[Box] = field(default_factory=list)


@dataclass(frozen=True)
class CameraSpec:
    height: int = 36
    width: int = 64
    fov_x_deg: float = 90.0

    def __post_init__(self):
        if self.height < 1 or self.width < 1 or not 0 < self.fov_x_deg < 180:
            raise ConfigurationError(f"bad camera spec {self}")


@dataclass
class DroneState:
    position: np.ndarray  # (3,) float64, metres
    yaw: float            # radians, 0 along +x, CCW

    def copy(self) -> "DroneState":
        return DroneState(self.position.copy(), self.yaw)


# ---------------------------------------------------------------------------
# ray casting


@functools.lru_cache(maxsize=8)
def _camera_rays(height: int, width: int, fov_x_deg: float) -> np.ndarray:
    """Unit ray directions in the camera frame (+x fwd, +y left, +z up)."""
    tan_x = math.tan(math.radians(fov_x_deg) / 2.0)
    tan_z = tan_x * height / width  # square pixels
    cols = (np.arange(width) + 0.5) / width * 2.0 - 1.0
    rows = (np.arange(height) + 0.5) / height * 2.0 - 1.0
    y = -cols[None, :] * tan_x * np.ones((height, 1))
    z = -rows[:, None] * tan_z * np.ones((1, width))
    x = np.ones((height, width))
    d = np.stack([x, y, z], axis=-1)
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    d.setflags(write=False)
    return d


def _raycast(world: World, position: np.ndarray, yaw: float,
             cam: CameraSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cast one ray per pixel; return (distance, albedo, n_dot_light).

    Distance is +inf where nothing is hit.  Albedo and the clamped
    normal-light dot product are only meaningful where distance is finite.
    """
    base = _camera_rays(cam.height, cam.width, cam.fov_x_deg)
    c, s = math.cos(yaw), math.sin(yaw)
    dirs = np.empty_like(base)
    dirs[..., 0] = c * base[..., 0] - s * base[..., 1]
    dirs[..., 1] = s * base[..., 0] + c * base[..., 1]
    dirs[..., 2] = base[..., 2]

    safe = np.where(np.abs(dirs) < 1e-12, 1e-12, dirs)
    inv = 1.0 / safe

    h, w = cam.height, cam.width
    t_best = np.full((h, w), np.inf)
    albedo = np.zeros((h, w, 3))
    ndl = np.zeros((h, w))
    light = np.asarray(world.config.light_dir)

    for box in world.boxes:
        bmin = np.asarray(box.min_corner)
        bmax = np.asarray(box.max_corner)
        t1 = (bmin - position) * inv
        t2 = (bmax - position) * inv
        t_near_ax = np.minimum(t1, t2)
        t_far_ax = np.maximum(t1, t2)
        t_near = t_near_ax.max(axis=-1)
        t_far = t_far_ax.min(axis=-1)
        hit = (t_near <= t_far) & (t_near > 1e-9) & (t_near < t_best)
        if not hit.any():
            continue
        axis = np.argmax(t_near_ax, axis=-1)
        dir_axis = np.take_along_axis(dirs, axis[..., None], axis=-1)[..., 0]
        n_sign = -np.sign(dir_axis)
        box_ndl = np.maximum(0.0, n_sign * light[axis])
        t_best = np.where(hit, t_near, t_best)
        albedo[hit] = box.albedo
        ndl = np.where(hit, box_ndl, ndl)

    g = world.config.ground_height
    if g is not None:
        dz = dirs[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            t_g = (g - position[2]) / dz
        hit = np.isfinite(t_g) & (t_g > 1e-9) & (t_g < t_best)
        if hit.any():
            t_best = np.where(hit, t_g, t_best)
            albedo[hit] = world.config.ground_albedo
            ndl = np.where(hit, max(0.0, light[2]), ndl)

    return t_best, albedo, ndl


def render_frame(world: World, position: np.ndarray, yaw: float,
                 cam: CameraSpec) -> tuple[np.ndarray, np.ndarray]:
    """Render pixel-aligned (rgb [3,H,W], depth [H,W]) float32 in [0, 1]."""
    t, albedo, ndl = _raycast(world, np.asarray(position, dtype=np.float64), yaw, cam)
    clip = world.config.depth_clip
    sky = ~np.isfinite(t) | (t >= clip)
    depth = np.where(sky, clip, t) / clip
    amb = world.config.ambient
    shade = albedo * (amb + (1.0 - amb) * ndl[..., None])
    rgb = np.where(sky[..., None], np.asarray(world.config.sky_color), shade)
    return (rgb.transpose(2, 0, 1).astype(np.float32),
            depth.astype(np.float32))


def render_rgb(world: World, position: np.ndarray, yaw: float, cam: CameraSpec) -> np.ndarray:
    return render_frame(world, position, yaw, cam)[0]


def render_depth(world: World, position: np.ndarray, yaw: float, cam: CameraSpec) -> np.ndarray:
    return render_frame(world, position, yaw, cam)[1]


# ---------------------------------------------------------------------------
# dynamics


@dataclass(frozen=True)
class ActionLimits:
    max_translation: float = 2.0   # metres per step, per body axis
    max_yaw: float = math.pi / 8   # radians per step


@dataclass(frozen=True)
class StepFlags:
    collision: bool = False
    goal: bool = False
    clamped: bool = False


def _segment_hits_box(p0: np.ndarray, p1: np.ndarray, bmin: np.ndarray, bmax: np.ndarray) -> bool:
    d = p1 - p0
    t0, t1 = 0.0, 1.0
    for axis in range(3):
        if abs(d[axis]) < 1e-12:
            if p0[axis] < bmin[axis] or p0[axis] > bmax[axis]:
                return False
        else:
            ta = (bmin[axis] - p0[axis]) / d[axis]
            tb = (bmax[axis] - p0[axis]) / d[axis]
            if ta > tb:
                ta, tb = tb, ta
            t0, t1 = max(t0, ta), min(t1, tb)
            if t0 > t1:
                return False
    return True


def swept_collision(world: World, p0: np.ndarray, p1: np.ndarray, radius: float) -> bool:
    """Does a sphere of ``radius`` moving p0 -> p1 touch any obstacle?"""
    r = np.array([radius, radius, radius])
    for box in world.boxes:
        if _segment_hits_box(p0, p1, np.asarray(box.min_corner) - r,
                             np.asarray(box.max_corner) + r):
            return True
    g = world.config.ground_height
    if g is not None and min(p0[2], p1[2]) - radius <= g:
        return True
    return False


def step(world: World, state: DroneState, action: np.ndarray, target: np.ndarray,
         limits: ActionLimits = ActionLimits(), radius: float = DRONE_RADIUS_M,
         goal_radius: float = GOAL_RADIUS_M) -> tuple[DroneState, StepFlags, float]:
    """Apply one body-frame action (fwd, left, up, yaw) in [-1, 1]^4.

    Returns the new state, termination flags, and progress toward the
    target in metres (positive = closer).  Out-of-range actions are clamped
    and flagged.  The drone is confined to the arena; collision with any
    obstacle or the ground ends the episode.
    """
    action = np.asarray(action, dtype=np.float64)
    if action.shape != (4,):
        raise ConfigurationError(f"action must have shape (4,), got {action.shape}")
    clamped = bool((action < -1.0).any() or (action > 1.0).any())
    if clamped:
        log.debug("action clamped: %s", action)
        action = np.clip(action, -1.0, 1.0)

    new_yaw = wrap_angle(state.yaw + action[3] * limits.max_yaw)
    c, s = math.cos(state.yaw), math.sin(state.yaw)
    fwd, left, up = action[:3] * limits.max_translation
    delta = np.array([c * fwd - s * left, s * fwd + c * left, up])

    cfg = world.config
    lo = np.asarray(cfg.arena_min) + radius
    hi = np.asarray(cfg.arena_max) - radius
    p0 = state.position
    p1 = np.clip(p0 + delta, lo, hi)

    collision = swept_collision(world, p0, p1, radius)
    target = np.asarray(target, dtype=np.float64)
    goal = (not collision) and bool(np.linalg.norm(p1 - target) <= goal_radius)
    progress = float(np.linalg.norm(p0 - target) - np.linalg.norm(p1 - target))
    return (DroneState(p1, new_yaw),
            StepFlags(collision=collision, goal=goal, clamped=clamped),
            progress)


def state_vector(state: DroneState, target: np.ndarray, pos_scale: float = 20.0) -> np.ndarray:
    """Normalised navigation state: target offset (3) + relative bearing (1).

    ``pos_scale`` should sit near the longest expected leg so the offsets
    land roughly in [-1, 1]; the default matches the arena episode ranges.
    """
    delta = (np.asarray(target, dtype=np.float64) - state.position) / pos_scale
    bearing = math.atan2(target[1] - state.position[1], target[0] - state.position[0])
    rel = wrap_angle(bearing - state.yaw) / math.pi
    return np.array([delta[0], delta[1], delta[2], rel], dtype=np.float32)


# ---------------------------------------------------------------------------
# rewards


@dataclass(frozen=True)
class RewardParams:
    collision_penalty: float = 10.0   # alpha1
    goal_bonus: float = 10.0          # alpha2
    progress_gain: float = 1.0        # alpha3
    step_penalty: float = 0.1         # alpha4
    transmission_penalty: float = 0.05  # alpha5, used by the gate reward


def navigation_reward(flags: StepFlags, progress_m: float, params: RewardParams) -> float:
    """Collision and goal are terminal cases; otherwise shaped progress."""
    if flags.collision:
        return -params.collision_penalty
    if flags.goal:
        return params.goal_bonus
    return params.progress_gain * math.tanh(progress_m) - params.step_penalty


# ---------------------------------------------------------------------------
# curriculum and episodes


@dataclass(frozen=True)
class CurriculumLevel:
    dist_range: tuple[float, float]
    obstacle_range: tuple[int, int]
    promote_threshold: float = 0.8
    window: int = 20


@dataclass(frozen=True)
class CurriculumSchedule:
    levels: tuple[CurriculumLevel, ...]

    def __post_init__(self):
        if not self.levels:
            raise ConfigurationError("curriculum needs at least one level")
        for prev, cur in zip(self.levels, self.levels[1:]):
            harder = (cur.dist_range[1] > prev.dist_range[1]
                      or cur.obstacle_range[1] > prev.obstacle_range[1])
            easier = (cur.dist_range[1] < prev.dist_range[1]
                      or cur.obstacle_range[1] < prev.obstacle_range[1])
            if not harder or easier:
                raise ConfigurationError("curriculum levels must strictly increase difficulty")


def default_curriculum() -> CurriculumSchedule:
    return CurriculumSchedule((
        CurriculumLevel((6.0, 14.0), (0, 0), promote_threshold=0.85, window=20),
        CurriculumLevel((10.0, 22.0), (4, 8), promote_threshold=0.7, window=20),
        CurriculumLevel((14.0, 30.0), (10, 16), promote_threshold=1.1, window=20),
    ))


class CurriculumTracker:
    """Tracks recent successes and decides when to advance a level."""

    def __init__(self, schedule: CurriculumSchedule, start_level: int = 0):
        self.schedule = schedule
        self.level = start_level
        self._recent: list[bool] = []

    @property
    def current(self) -> CurriculumLevel:
        return self.schedule.levels[self.level]

    def record(self, success: bool) -> bool:
        """Record an episode outcome; return True if the level advanced."""
        if self.level >= len(self.schedule.levels) - 1:
            return False
        lvl = self.current
        self._recent.append(success)
        if len(self._recent) > lvl.window:
            self._recent.pop(0)
        if (len(self._recent) == lvl.window
                and sum(self._recent) / lvl.window >= lvl.promote_threshold):
            self.level += 1
            self._recent.clear()
            return True
        return False


@dataclass(frozen=True)
class EpisodeSpec:
    start: tuple[float, float, float]
    start_yaw: float
    target: tuple[float, float, float]
    goal_radius: float
    max_steps: int
    level: int

    @property
    def initial_distance(self) -> float:
        return float(np.linalg.norm(np.asarray(self.target) - np.asarray(self.start)))


def _point_clear(p: np.ndarray, boxes: Sequence[Box], clearance: float) -> bool:
    for box in boxes:
        lo = np.asarray(box.min_corner) - clearance
        hi = np.asarray(box.max_corner) + clearance
        if bool(((p >= lo) & (p <= hi)).all()):
            return False
    return True


def _random_albedo(rng: np.random.Generator) -> tuple[float, float, float]:
    return tuple(rng.uniform(0.2, 0.9, size=3))


def _pillar(rng: np.random.Generator, cfg: WorldConfig, cx: float, cy: float) -> Box:
    hx = rng.uniform(1.5, 3.0)
    hy = rng.uniform(1.5, 3.0)
    return Box((cx - hx, cy - hy, cfg.arena_min[2]),
               (cx + hx, cy + hy, cfg.arena_max[2]),
               _random_albedo(rng))


def sample_episode(cfg: WorldConfig, schedule: CurriculumSchedule, level: int,
                   rng: np.random.Generator, *, steps_per_meter: float = 2.0,
                   goal_radius: float = GOAL_RADIUS_M,
                   flight_band: tuple[float, float] = (3.0, 9.0),
                   yaw_noise: float = 0.4) -> tuple[World, EpisodeSpec]:
    """Sample a world and an episode for a curriculum level.

    Start and target keep a clearance margin from every obstacle; failed
    placements retry with fresh draws, so the result is deterministic in
    the generator state.
    """
    if not 0 <= level < len(schedule.levels):
        raise ConfigurationError(f"curriculum level {level} out of range")
    lvl = schedule.levels[level]
    amin, amax = np.asarray(cfg.arena_min), np.asarray(cfg.arena_max)
    margin = 2.0
    clearance = 2.0 * DRONE_RADIUS_M + 1.0

    for _ in range(200):
        n = int(rng.integers(lvl.obstacle_range[0], lvl.obstacle_range[1] + 1))
        boxes = [_pillar(rng, cfg,
                         rng.uniform(amin[0] + margin, amax[0] - margin),
                         rng.uniform(amin[1] + margin, amax[1] - margin))
                 for _ in range(n)]
        world = World(cfg, boxes)

        placed = False
        for _ in range(50):
            start = np.array([rng.uniform(amin[0] + margin, amax[0] - margin),
                              rng.uniform(amin[1] + margin, amax[1] - margin),
                              rng.uniform(*flight_band)])
            if not _point_clear(start, boxes, clearance):
                continue
            dist = rng.uniform(*lvl.dist_range)
            theta = rng.uniform(-math.pi, math.pi)
            target = start + np.array([dist * math.cos(theta), dist * math.sin(theta),
                                       rng.uniform(-2.0, 2.0)])
            target = np.clip(target,
                             np.append(amin[:2] + margin, flight_band[0]),
                             np.append(amax[:2] - margin, flight_band[1]))
            actual = float(np.linalg.norm(target - start))
            if actual < 0.8 * lvl.dist_range[0] or actual > lvl.dist_range[1]:
                continue
            if not _point_clear(target, boxes, clearance + goal_radius):
                continue
            placed = True
            break
        if not placed:
            continue

        bearing = math.atan2(target[1] - start[1], target[0] - start[0])
        yaw = wrap_angle(bearing + rng.uniform(-yaw_noise, yaw_noise))
        max_steps = max(MIN_EPISODE_STEPS, math.ceil(steps_per_meter * actual))
        return world, EpisodeSpec(tuple(start), yaw, tuple(target),
                                  goal_radius, max_steps, level)
    raise ConfigurationError("could not place an episode; arena too crowded")


# ---------------------------------------------------------------------------
# depth-dataset scenes


@dataclass(frozen=True)
class SceneParams:
    """Controls for random single-frame scenes used to train the depth nets."""
    obstacle_range: tuple[int, int] = (8, 14)
    distance_range: tuple[float, float] = (6.0, 52.0)
    cone_half_angle: float = 1.0  # radians around the camera heading
    floating_fraction: float = 0.5
    camera_xy: float = 15.0
    camera_z: tuple[float, float] = (3.0, 9.0)


def sample_scene(cfg: WorldConfig, params: SceneParams,
                 rng: np.random.Generator) -> tuple[World, DroneState]:
    """A camera pose plus obstacles scattered inside its viewing cone.

    Obstacle centres stay within ``distance_range`` of the camera, which
    bounds every non-sky depth sample well below the clip distance.
    """
    pos = np.array([rng.uniform(-params.camera_xy, params.camera_xy),
                    rng.uniform(-params.camera_xy, params.camera_xy),
                    rng.uniform(*params.camera_z)])
    yaw = rng.uniform(-math.pi, math.pi)
    n = int(rng.integers(params.obstacle_range[0], params.obstacle_range[1] + 1))
    boxes = []
    for _ in range(n):
        ang = yaw + rng.uniform(-params.cone_half_angle, params.cone_half_angle)
        dist = rng.uniform(*params.distance_range)
        cx = pos[0] + dist * math.cos(ang)
        cy = pos[1] + dist * math.sin(ang)
        if rng.uniform() < params.floating_fraction:
            hx, hy, hz = rng.uniform(1.5, 3.0, size=3)
            cz = pos[2] + rng.uniform(-8.0, 8.0)
            boxes.append(Box((cx - hx, cy - hy, cz - hz), (cx + hx, cy + hy, cz + hz),
                             _random_albedo(rng)))
        else:
            boxes.append(_pillar(rng, cfg, cx, cy))
    return World(cfg, boxes), DroneState(pos, yaw)
