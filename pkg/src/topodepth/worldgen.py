"""Synthetic paired RGB/depth data from a raycast box-world.

Scenes are a closed axis-aligned room plus axis-aligned box obstacles.
Every primary ray is intersected analytically (slab method), so depth is
exact and every test has a closed-form oracle.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import fileio, rng, topomap
from .errors import DegenerateLoop, InvalidScene, PoseInsideObstacle

log = logging.getLogger(__name__)

# face order for room colors: x_min, x_max, y_min, y_max, floor, ceiling
ROOM_FACES = ("x_min", "x_max", "y_min", "y_max", "floor", "ceiling")


@dataclass(frozen=True)
class Box:
    lo: np.ndarray
    hi: np.ndarray
    color: np.ndarray = field(default_factory=lambda: np.full(3, 0.5))

    def contains(self, p, margin: float = 0.0) -> bool:
        p = np.asarray(p, dtype=float)
        return bool(np.all(p > self.lo - margin) and np.all(p < self.hi + margin))


@dataclass(frozen=True)
class Scene:
    room: Box
    obstacles: tuple[Box, ...]
    light_direction: np.ndarray
    wall_colors: np.ndarray  # (6, 3), see ROOM_FACES
    config: dict = field(default_factory=dict, compare=False)

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.room.hi - self.room.lo))

    def digest(self) -> str:
        blob = json.dumps(self.config, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True)
class CameraIntrinsics:
    width: int = 32
    height: int = 32
    horizontal_fov: float = math.radians(90.0)

    def __post_init__(self):
        if self.width < 8 or self.height < 8:
            raise ValueError(f"raster must be at least 8x8, got {self.width}x{self.height}")
        if not 0.0 < self.horizontal_fov < math.pi:
            raise ValueError(f"horizontal_fov must lie in (0, pi), got {self.horizontal_fov}")


@dataclass(frozen=True)
class Pose:
    position: tuple[float, float, float]
    yaw: float

    @property
    def xy(self) -> np.ndarray:
        return np.array(self.position[:2], dtype=float)


@dataclass
class RgbImage:
    pixels: np.ndarray  # (H, W, 3) float64 in [0, 1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class DepthMap:
    depths: np.ndarray  # (H, W) float64 meters, NaN marks a hole

    @property
    def height(self) -> int:
        return self.depths.shape[0]

    @property
    def width(self) -> int:
        return self.depths.shape[1]

    @property
    def holes(self) -> np.ndarray:
        return np.isnan(self.depths)


@dataclass(frozen=True)
class TrajectoryParams:
    waypoints: tuple[tuple[float, float], ...]
    frame_spacing: float = 0.25
    lateral_offset_step: float = 0.5
    num_laps: int = 1
    noise_std: float = 0.0
    rng_seed: int = 0
    offset_variants: int = 3
    camera_height: float = 1.0

    def __post_init__(self):
        if self.frame_spacing <= 0:
            raise ValueError("frame_spacing must be positive")
        if self.num_laps < 1:
            raise ValueError("num_laps must be >= 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if self.offset_variants < 1:
            raise ValueError("offset_variants must be >= 1")


def _box(spec: dict, default_color=(0.5, 0.5, 0.5)) -> Box:
    lo = np.asarray(spec["min"], dtype=float)
    hi = np.asarray(spec["max"], dtype=float)
    color = np.asarray(spec.get("color", default_color), dtype=float)
    if lo.shape != (3,) or hi.shape != (3,) or color.shape != (3,):
        raise InvalidScene(f"box needs 3-vectors for min/max/color: {spec}")
    if not np.all(hi > lo):
        raise InvalidScene(f"box has non-positive extent: {spec}")
    if not np.all((color >= 0) & (color <= 1)):
        raise InvalidScene(f"color components must lie in [0, 1]: {color.tolist()}")
    return Box(lo, hi, color)


def build_scene(config: dict) -> Scene:
    """Validate a scene description.

    ``config`` keys: ``room`` ({min, max}), ``obstacles`` (list of {min, max,
    color}), ``light_direction`` (3 floats, must be unit length) and optional
    ``wall_colors`` (mapping of face name to color).
    """
    try:
        room = _box(config["room"])
        obstacles = tuple(_box(o) for o in config.get("obstacles", []))
        light = np.asarray(config["light_direction"], dtype=float)
    except KeyError as exc:
        raise InvalidScene(f"scene config missing key {exc}") from None
    if light.shape != (3,) or abs(np.linalg.norm(light) - 1.0) > 1e-9:
        raise InvalidScene(f"light_direction must be a unit 3-vector, got {light.tolist()}")
    for i, ob in enumerate(obstacles):
        if not (np.all(ob.lo > room.lo) and np.all(ob.hi < room.hi)):
            raise InvalidScene(f"obstacle {i} is not strictly inside the room")
    walls = config.get("wall_colors", {})
    unknown = set(walls) - set(ROOM_FACES)
    if unknown:
        raise InvalidScene(f"unknown wall faces: {sorted(unknown)}")
    wall_colors = np.array([walls.get(f, (0.6, 0.6, 0.6)) for f in ROOM_FACES], dtype=float)
    if not np.all((wall_colors >= 0) & (wall_colors <= 1)):
        raise InvalidScene("wall color components must lie in [0, 1]")
    return Scene(room, obstacles, light, wall_colors, dict(config))


def living_room_config() -> dict:
    """Default 7.5 x 6 x 3 m room furnished asymmetrically around a square loop."""
    light = np.array([0.35, 0.55, -0.75])
    light = light / np.linalg.norm(light)
    return {
        "room": {"min": [0.0, 0.0, 0.0], "max": [7.5, 6.0, 3.0]},
        "light_direction": light.tolist(),
        "wall_colors": {
            "x_min": [0.85, 0.80, 0.70],
            "x_max": [0.55, 0.70, 0.85],
            "y_min": [0.80, 0.60, 0.55],
            "y_max": [0.60, 0.80, 0.60],
            "floor": [0.45, 0.35, 0.25],
            "ceiling": [0.95, 0.95, 0.95],
        },
        "obstacles": [
            # sofa along the south wall
            {"min": [1.2, 0.15, 0.01], "max": [3.4, 0.8, 0.9], "color": [0.2, 0.3, 0.7]},
            # bookshelf in the north-east corner
            {"min": [6.8, 4.2, 0.01], "max": [7.4, 5.9, 2.2], "color": [0.6, 0.4, 0.2]},
            # cabinet on the west wall
            {"min": [0.1, 3.3, 0.01], "max": [0.6, 4.6, 1.4], "color": [0.9, 0.9, 0.3]},
            # coffee table in the middle of the loop
            {"min": [2.6, 2.7, 0.01], "max": [3.5, 3.3, 0.5], "color": [0.7, 0.2, 0.2]},
            # tall lamp inside the loop
            {"min": [2.9, 3.5, 0.01], "max": [3.1, 3.7, 1.8], "color": [0.95, 0.85, 0.4]},
            # armchair near the east wall
            {"min": [6.7, 1.0, 0.01], "max": [7.4, 1.9, 0.8], "color": [0.3, 0.6, 0.3]},
            # television on the north wall
            {"min": [1.8, 5.75, 0.8], "max": [3.2, 5.9, 1.6], "color": [0.1, 0.1, 0.1]},
        ],
    }


def living_room_loop() -> tuple[tuple[float, float], ...]:
    """3 m square reference loop in the default room (12 m perimeter)."""
    return ((1.5, 1.5), (4.5, 1.5), (4.5, 4.5), (1.5, 4.5))


def ray_directions(yaw: float, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Unit world-frame ray directions through each pixel centre, shape (H, W, 3)."""
    w, h = intrinsics.width, intrinsics.height
    tx = math.tan(intrinsics.horizontal_fov / 2.0)
    ty = tx * h / w
    u = ((np.arange(w) + 0.5) / w * 2.0 - 1.0) * tx
    v = (1.0 - (np.arange(h) + 0.5) / h * 2.0) * ty
    forward = np.array([math.cos(yaw), math.sin(yaw), 0.0])
    right = np.array([math.sin(yaw), -math.cos(yaw), 0.0])
    up = np.array([0.0, 0.0, 1.0])
    d = forward + u[None, :, None] * right + v[:, None, None] * up
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def _room_exit(origin, dirs, room: Box):
    """Distance to the room wall along each ray and the index of the face hit."""
    with np.errstate(divide="ignore", invalid="ignore"):
        bound = np.where(dirs > 0, room.hi, room.lo)
        t = (bound - origin) / dirs
    t = np.where(dirs == 0, np.inf, t)
    axis = np.argmin(t, axis=-1)
    dist = np.take_along_axis(t, axis[..., None], axis=-1)[..., 0]
    positive = np.take_along_axis(dirs, axis[..., None], axis=-1)[..., 0] > 0
    face = 2 * axis + positive.astype(int)
    return dist, face, axis, positive


def _box_entry(origin, dirs, box: Box):
    """Slab test. Returns entry distance (inf on miss) and entry axis."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (box.lo - origin) / dirs
        t2 = (box.hi - origin) / dirs
    parallel = dirs == 0
    inside_slab = (origin > box.lo) & (origin < box.hi)
    tmin = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), np.minimum(t1, t2))
    tmax = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), np.maximum(t1, t2))
    axis = np.argmax(tmin, axis=-1)
    near = np.max(tmin, axis=-1)
    far = np.min(tmax, axis=-1)
    hit = (near <= far) & (near > 0)
    return np.where(hit, near, np.inf), axis


def render_frame(scene: Scene, pose: Pose, intrinsics: CameraIntrinsics) -> tuple[RgbImage, DepthMap]:
    origin = np.asarray(pose.position, dtype=float)
    if not scene.room.contains(origin):
        raise PoseInsideObstacle(f"camera at {origin.tolist()} is outside the room")
    for i, ob in enumerate(scene.obstacles):
        if ob.contains(origin):
            raise PoseInsideObstacle(f"camera at {origin.tolist()} is inside obstacle {i}")

    dirs = ray_directions(pose.yaw, intrinsics)
    depth, face, axis, positive = _room_exit(origin, dirs, scene.room)
    color = scene.wall_colors[face]
    # inward wall normal points against the ray along the hit axis
    sign = np.where(positive, -1.0, 1.0)

    for ob in scene.obstacles:
        t, ob_axis = _box_entry(origin, dirs, ob)
        closer = t < depth
        if not np.any(closer):
            continue
        depth = np.where(closer, t, depth)
        ob_sign = -np.sign(np.take_along_axis(dirs, ob_axis[..., None], axis=-1)[..., 0])
        axis = np.where(closer, ob_axis, axis)
        sign = np.where(closer, ob_sign, sign)
        color = np.where(closer[..., None], ob.color, color)

    normal = np.zeros(dirs.shape)
    np.put_along_axis(normal, axis[..., None], sign[..., None], axis=-1)
    lambert = np.maximum(0.1, -(normal @ scene.light_direction))
    rgb = np.clip(color * lambert[..., None], 0.0, 1.0)
    return RgbImage(rgb), DepthMap(depth)


def _loop_geometry(waypoints):
    pts = np.asarray(waypoints, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
        raise DegenerateLoop("need at least two 2D waypoints")
    seg = np.roll(pts, -1, axis=0) - pts
    lengths = np.linalg.norm(seg, axis=1)
    total = float(lengths.sum())
    if total <= 0:
        raise DegenerateLoop("waypoint loop has zero length")
    return pts, seg, lengths, total


def point_on_loop(waypoints, s: float):
    """Position and unit tangent at arc length ``s`` (wrapped) on a closed polyline."""
    pts, seg, lengths, total = _loop_geometry(waypoints)
    s = s % total
    starts = np.concatenate([[0.0], np.cumsum(lengths)[:-1]])
    k = int(np.searchsorted(starts, s, side="right") - 1)
    while lengths[k] == 0:
        k = (k + 1) % len(pts)
    tangent = seg[k] / lengths[k]
    return pts[k] + tangent * (s - starts[k]), tangent


def lap_offset(lap: int, variants: int) -> int:
    """Signed offset multiplier for lap ``lap``: 0, +1, -1, +2, -2, ... cycling every ``variants`` laps."""
    k = lap % variants
    return (k + 1) // 2 * (1 if k % 2 else -1)


def generate_trajectory(params: TrajectoryParams) -> list[Pose]:
    """Laps around the waypoint loop, each displaced sideways by a lap offset plus per-frame noise."""
    _, _, _, total = _loop_geometry(params.waypoints)
    n = int(math.floor(total / params.frame_spacing + 1e-9))
    noise = rng.stream(params.rng_seed, "trajectory-noise")
    poses = []
    for lap in range(params.num_laps):
        offset = lap_offset(lap, params.offset_variants) * params.lateral_offset_step
        jitter = noise.normal(0.0, params.noise_std, size=n) if params.noise_std > 0 else np.zeros(n)
        for i in range(n):
            p, t = point_on_loop(params.waypoints, i * params.frame_spacing)
            left = np.array([-t[1], t[0]])
            q = p + left * (offset + jitter[i])
            poses.append(Pose((float(q[0]), float(q[1]), params.camera_height), math.atan2(t[1], t[0])))
    return poses


def reference_trajectory(params: TrajectoryParams) -> list[Pose]:
    """One undisplaced, noise-free lap: the route the topological map is built from."""
    ref = TrajectoryParams(
        waypoints=params.waypoints,
        frame_spacing=params.frame_spacing,
        lateral_offset_step=0.0,
        num_laps=1,
        noise_std=0.0,
        rng_seed=params.rng_seed,
        camera_height=params.camera_height,
    )
    return generate_trajectory(ref)


def frame_arc_lengths(params: TrajectoryParams) -> list[float]:
    _, _, _, total = _loop_geometry(params.waypoints)
    n = int(math.floor(total / params.frame_spacing + 1e-9))
    return [i * params.frame_spacing for i in range(n)] * params.num_laps


def punch_holes(depth: DepthMap, rate: float, rng_seed: int) -> DepthMap:
    """Knock out pixels independently with probability ``rate`` (stereo-style holes)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"hole rate must lie in [0, 1), got {rate}")
    out = depth.depths.copy()
    if rate > 0:
        mask = rng.stream(rng_seed, "hole-punch").random(out.shape) < rate
        out[mask] = np.nan
    return DepthMap(out)


def generate_dataset(
    scene: Scene,
    params: TrajectoryParams,
    intrinsics: CameraIntrinsics,
    topo: topomap.TopoMap,
    out_dir,
    hole_rate: float = 0.0,
) -> fileio.DatasetManifest:
    """Render every trajectory pose, label it with its nearest node and write files plus a manifest."""
    out_dir = Path(out_dir)
    (out_dir / "rgb").mkdir(parents=True, exist_ok=True)
    (out_dir / "depth").mkdir(parents=True, exist_ok=True)
    poses = generate_trajectory(params)
    arcs = frame_arc_lengths(params)
    records = []
    skipped = 0
    for frame_id, (pose, arc) in enumerate(zip(poses, arcs)):
        try:
            rgb, depth = render_frame(scene, pose, intrinsics)
        except PoseInsideObstacle as exc:
            skipped += 1
            log.debug("skipping frame %d: %s", frame_id, exc)
            continue
        if hole_rate > 0:
            depth = punch_holes(depth, hole_rate, params.rng_seed * 1_000_003 + frame_id)
        rgb_rel = f"rgb/{frame_id:06d}.ppm"
        dep_rel = f"depth/{frame_id:06d}.dep"
        fileio.write_ppm(out_dir / rgb_rel, rgb)
        fileio.write_depth(out_dir / dep_rel, depth)
        records.append(
            fileio.FrameRecord(
                frame_id=frame_id,
                rgb_path=rgb_rel,
                depth_path=dep_rel,
                pos_x=pose.position[0],
                pos_y=pose.position[1],
                pos_z=pose.position[2],
                yaw=pose.yaw,
                arc_length_m=arc,
                node_id=topomap.assign_node(topo, pose.xy),
            )
        )
    if skipped:
        log.warning("skipped %d poses inside obstacles or outside the room", skipped)
    manifest = fileio.DatasetManifest(
        scene_hash=scene.digest(),
        intrinsics={
            "width": intrinsics.width,
            "height": intrinsics.height,
            "horizontal_fov": intrinsics.horizontal_fov,
        },
        max_depth=scene.diagonal,
        num_nodes=len(topo.nodes),
        frames=records,
        root=out_dir,
    )
    fileio.write_manifest(out_dir / "manifest.jsonl", manifest)
    return manifest


def poses_from_arrays(xy: Sequence[Sequence[float]], z: float = 0.0) -> list[Pose]:
    return [Pose((float(p[0]), float(p[1]), z), 0.0) for p in xy]
