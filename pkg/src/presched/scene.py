"""Synthetic scene: user mobility, box obstacles, and a pinhole RGB-d camera.

The camera stands in for the real RGB-d sensor plus object detector: it
projects users/obstacles into pixel coordinates, applies occlusion, pixel
noise, and detector misses.  All geometry is exact (axis-aligned boxes,
analytic segment/box intersection), so the camera's occlusion decision and
the RF blockage flag coincide when camera and base station are co-located.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

Vec3 = np.ndarray  # shape (3,), float64


def vec3(x: float, y: float, z: float) -> Vec3:
    return np.array([x, y, z], dtype=float)


@dataclass
class UserState:
    uid: int
    position: Vec3
    velocity: Vec3  # m/s, horizontal (z component stays 0)
    height: float
    speed: float


@dataclass
class Obstacle:
    oid: int
    center: Vec3
    width: float   # extent along x
    depth: float   # extent along y
    height: float  # extent along z

    @property
    def min_corner(self) -> Vec3:
        return self.center - 0.5 * np.array([self.width, self.depth, self.height])

    @property
    def max_corner(self) -> Vec3:
        return self.center + 0.5 * np.array([self.width, self.depth, self.height])


@dataclass
class CameraModel:
    """Pinhole camera parametrized by boresight azimuth/elevation.

    Azimuth is measured from the +y axis toward +x, elevation from the
    horizontal plane upward.  Pixel x grows with azimuth, pixel y grows
    downward (image convention).
    """

    position: Vec3
    boresight_az: float
    boresight_el: float
    f_px: float
    cx: float
    cy: float
    width_px: int
    height_px: int


@dataclass
class Detection:
    kind: str          # "user" or "obstacle"
    obj_id: int
    pixel: np.ndarray  # (x_img, y_img)
    bbox_wh: np.ndarray
    depth: float
    visible: bool


@dataclass
class SceneState:
    slot: int
    users: list[UserState]
    obstacles: list[Obstacle]
    camera: CameraModel
    bounds: np.ndarray  # [[xmin, xmax], [ymin, ymax]]


# ---------------------------------------------------------------------------
# construction helpers


def random_users(
    k: int,
    bounds: np.ndarray,
    h_range: tuple[float, float],
    v_max: float,
    rng: np.random.Generator,
) -> list[UserState]:
    """Draw ``k`` users uniformly in the area, heights and speeds uniform."""
    users = []
    for uid in range(k):
        x = rng.uniform(bounds[0, 0], bounds[0, 1])
        y = rng.uniform(bounds[1, 0], bounds[1, 1])
        h = rng.uniform(*h_range)
        speed = rng.uniform(0.0, v_max)
        az = rng.uniform(0.0, 2.0 * math.pi)
        vel = speed * np.array([math.sin(az), math.cos(az), 0.0])
        users.append(UserState(uid, vec3(x, y, h), vel, h, speed))
    return users


def generate_obstacles(
    bounds: np.ndarray,
    density: float,
    rng: np.random.Generator,
    keepout: Vec3 | None = None,
    keepout_radius: float = 1.5,
    height_range: tuple[float, float] = (1.6, 2.5),
    max_attempts: int = 4000,
) -> list[Obstacle]:
    """Place ground-standing boxes until their XY footprint covers ``density``
    of the area.  Footprints do not overlap each other or the keepout disc
    (the BS mount point).

    The population mixes wall/board-like slabs (long and thin, either axis)
    with squarish pillars and cabinets, so projected bounding boxes stay
    close to the true silhouettes.
    """
    area = (bounds[0, 1] - bounds[0, 0]) * (bounds[1, 1] - bounds[1, 0])
    target = density * area
    placed: list[Obstacle] = []
    covered = 0.0
    attempts = 0
    while covered < target and attempts < max_attempts:
        attempts += 1
        shape = rng.uniform()
        if shape < 0.6:  # wall or board segment
            long_side = rng.uniform(2.0, 5.0)
            thin_side = rng.uniform(0.2, 0.5)
            w, d = (long_side, thin_side) if rng.uniform() < 0.5 else (thin_side, long_side)
        else:            # pillar or cabinet
            w = rng.uniform(0.5, 1.4)
            d = rng.uniform(0.5, 1.4)
        h = rng.uniform(*height_range)
        cx = rng.uniform(bounds[0, 0] + w / 2, bounds[0, 1] - w / 2)
        cy = rng.uniform(bounds[1, 0] + d / 2, bounds[1, 1] - d / 2)
        if keepout is not None:
            if math.hypot(cx - keepout[0], cy - keepout[1]) < keepout_radius + max(w, d) / 2:
                continue
        ok = True
        for other in placed:
            if (abs(cx - other.center[0]) < (w + other.width) / 2
                    and abs(cy - other.center[1]) < (d + other.depth) / 2):
                ok = False
                break
        if not ok:
            continue
        placed.append(Obstacle(len(placed), vec3(cx, cy, h / 2), w, d, h))
        covered += w * d
    return placed


# ---------------------------------------------------------------------------
# mobility


def _inward_azimuth_interval(at_xmin: bool, at_xmax: bool, at_ymin: bool, at_ymax: bool) -> tuple[float, float]:
    """Azimuth interval (center, half-width) whose directions point inward.

    Azimuth 0 is +y, pi/2 is +x.  A single edge leaves a half-plane (width
    pi); a corner leaves a quarter-plane (width pi/2).
    """
    # normals of violated edges, pointing inward
    normals = []
    if at_xmin:
        normals.append((1.0, 0.0))
    if at_xmax:
        normals.append((-1.0, 0.0))
    if at_ymin:
        normals.append((0.0, 1.0))
    if at_ymax:
        normals.append((0.0, -1.0))
    nx = sum(n[0] for n in normals)
    ny = sum(n[1] for n in normals)
    center = math.atan2(nx, ny)
    half_width = math.pi / 2 if len(normals) == 1 else math.pi / 4
    return center, half_width


def step_mobility(state: SceneState, tau_s: float, rng: np.random.Generator) -> SceneState:
    """Advance users by one slot; users hitting the area edge are clamped to
    the boundary and get a fresh direction drawn uniformly in the inward
    half-plane (quarter-plane at corners), same speed."""
    if tau_s <= 0:
        raise ValueError("tau_s must be positive")
    (xmin, xmax), (ymin, ymax) = state.bounds
    new_users = []
    for u in state.users:
        pos = u.position + u.velocity * tau_s
        vel = u.velocity
        at_xmin, at_xmax = pos[0] <= xmin, pos[0] >= xmax
        at_ymin, at_ymax = pos[1] <= ymin, pos[1] >= ymax
        if at_xmin or at_xmax or at_ymin or at_ymax:
            pos = pos.copy()
            pos[0] = min(max(pos[0], xmin), xmax)
            pos[1] = min(max(pos[1], ymin), ymax)
            center, half = _inward_azimuth_interval(at_xmin, at_xmax, at_ymin, at_ymax)
            az = center + rng.uniform(-half, half)
            vel = u.speed * np.array([math.sin(az), math.cos(az), 0.0])
        new_users.append(UserState(u.uid, pos, vel, u.height, u.speed))
    return replace(state, slot=state.slot + 1, users=new_users)


# ---------------------------------------------------------------------------
# camera model


def direction_to_angles(origin: Vec3, target: Vec3) -> tuple[float, float]:
    """Absolute azimuth/elevation of the ray origin -> target."""
    d = target - origin
    az = math.atan2(d[0], d[1])
    el = math.atan2(d[2], math.hypot(d[0], d[1]))
    return az, el


def angles_to_direction(az: float, el: float) -> Vec3:
    return np.array([math.cos(el) * math.sin(az), math.cos(el) * math.cos(az), math.sin(el)])


def pixel_to_angle(camera: CameraModel, pixel) -> tuple[float, float]:
    """Invert the pinhole mapping: pixel -> absolute (azimuth, elevation)."""
    x_img, y_img = float(pixel[0]), float(pixel[1])
    az = camera.boresight_az + math.atan((x_img - camera.cx) / camera.f_px)
    el = camera.boresight_el + math.atan((camera.cy - y_img) / camera.f_px)
    return az, el


def angle_to_pixel(camera: CameraModel, az: float, el: float) -> np.ndarray:
    x = camera.cx + camera.f_px * math.tan(az - camera.boresight_az)
    y = camera.cy - camera.f_px * math.tan(el - camera.boresight_el)
    return np.array([x, y])


def project_point(camera: CameraModel, point: Vec3) -> tuple[np.ndarray, float, bool]:
    """Project a 3D point; returns (pixel, depth, in_frustum).

    A point is in the frustum when both angle offsets are inside (-pi/2,
    pi/2) and the pixel lands inside the image rectangle.
    """
    az, el = direction_to_angles(camera.position, point)
    d_az = az - camera.boresight_az
    d_el = el - camera.boresight_el
    depth = float(np.linalg.norm(point - camera.position))
    if abs(d_az) >= math.pi / 2 or abs(d_el) >= math.pi / 2:
        return np.array([math.nan, math.nan]), depth, False
    pixel = angle_to_pixel(camera, az, el)
    inside = (0.0 <= pixel[0] < camera.width_px) and (0.0 <= pixel[1] < camera.height_px)
    return pixel, depth, inside


def reconstruct_point(camera: CameraModel, pixel, depth: float) -> Vec3:
    """Inverse of project_point for noiseless pixel+depth."""
    az, el = pixel_to_angle(camera, pixel)
    return camera.position + depth * angles_to_direction(az, el)


# ---------------------------------------------------------------------------
# occlusion


def segment_intersects_box(p0: Vec3, p1: Vec3, obstacle: Obstacle) -> bool:
    """Exact slab test for the segment p0 -> p1 against an axis-aligned box."""
    lo = obstacle.min_corner
    hi = obstacle.max_corner
    d = p1 - p0
    t0, t1 = 0.0, 1.0
    for ax in range(3):
        if abs(d[ax]) < 1e-15:
            if p0[ax] < lo[ax] or p0[ax] > hi[ax]:
                return False
        else:
            ta = (lo[ax] - p0[ax]) / d[ax]
            tb = (hi[ax] - p0[ax]) / d[ax]
            if ta > tb:
                ta, tb = tb, ta
            t0 = max(t0, ta)
            t1 = min(t1, tb)
            if t0 > t1:
                return False
    return True


def los_visible(bs_position: Vec3, user_position: Vec3, obstacles: list[Obstacle]) -> int:
    """Ground-truth LoS flag: 1 iff no obstacle box cuts the BS-user segment."""
    for obstacle in obstacles:
        if segment_intersects_box(bs_position, user_position, obstacle):
            return 0
    return 1


# ---------------------------------------------------------------------------
# synthetic detector


def project_and_detect(
    state: SceneState,
    p_miss: float,
    sigma_px: float,
    rng: np.random.Generator,
    sigma_depth: float = 0.0,
) -> list[Detection]:
    """Synthetic single-stage object detector.

    Users inside the frustum are either occluded (reported with
    visible=False and their noiseless projection, mirroring that they are
    absent from the image) or detected with Gaussian pixel/depth noise;
    detections are independently dropped with probability ``p_miss``.
    Obstacles in the frustum always produce their projected bounding box and
    center depth.  Objects outside the frustum produce nothing.
    """
    if not 0.0 <= p_miss < 1.0:
        raise ValueError("p_miss must be in [0, 1)")
    cam = state.camera
    detections: list[Detection] = []
    for u in state.users:
        pixel, depth, inside = project_point(cam, u.position)
        if not inside:
            continue
        occluded = any(
            segment_intersects_box(cam.position, u.position, o) for o in state.obstacles
        )
        if occluded:
            detections.append(Detection("user", u.uid, pixel, np.zeros(2), depth, False))
            continue
        if rng.uniform() < p_miss:
            continue
        noisy_pixel = pixel + rng.normal(0.0, sigma_px, size=2) if sigma_px > 0 else pixel
        noisy_depth = depth + rng.normal(0.0, sigma_depth) if sigma_depth > 0 else depth
        detections.append(Detection("user", u.uid, noisy_pixel, np.zeros(2), noisy_depth, True))
    for o in state.obstacles:
        detections.extend(_project_obstacle(cam, o))
    return detections


def _project_box_extent(cam: CameraModel, lo: Vec3, hi: Vec3, oid: int) -> Detection | None:
    corners = [
        vec3(x, y, z)
        for x in (lo[0], hi[0])
        for y in (lo[1], hi[1])
        for z in (lo[2], hi[2])
    ]
    pixels = []
    for c in corners:
        pixel, _, _ = project_point(cam, c)
        if not np.isfinite(pixel).all():
            return None  # a corner behind the camera: treat as out of frustum
        pixels.append(pixel)
    pixels = np.array(pixels)
    mins, maxs = pixels.min(axis=0), pixels.max(axis=0)
    # emit only when the (unclipped) bbox touches the image rectangle
    if maxs[0] < 0 or mins[0] >= cam.width_px or maxs[1] < 0 or mins[1] >= cam.height_px:
        return None
    center = (mins + maxs) / 2.0
    wh = maxs - mins
    # a depth sensor sees the nearest surface of the box, not its center
    nearest = np.minimum(np.maximum(cam.position, lo), hi)
    depth = float(np.linalg.norm(nearest - cam.position))
    return Detection("obstacle", oid, center, wh, depth, True)


def _project_obstacle(
    cam: CameraModel, obstacle: Obstacle, max_segment: float = 1.2
) -> list[Detection]:
    """Project one obstacle as the detector would box it.

    Long obstacles (walls, boards) are reported panel by panel: the box is
    split along its longest horizontal axis so each bounding box hugs the
    slanted silhouette instead of spanning the whole diagonal.
    """
    lo, hi = obstacle.min_corner, obstacle.max_corner
    extents = hi - lo
    axis = 0 if extents[0] >= extents[1] else 1
    n_seg = max(1, int(math.ceil(extents[axis] / max_segment)))
    cuts = np.linspace(lo[axis], hi[axis], n_seg + 1)
    detections = []
    for i in range(n_seg):
        seg_lo, seg_hi = lo.copy(), hi.copy()
        seg_lo[axis], seg_hi[axis] = cuts[i], cuts[i + 1]
        det = _project_box_extent(cam, seg_lo, seg_hi, obstacle.oid * 1000 + i)
        if det is not None:
            detections.append(det)
    return detections


# ---------------------------------------------------------------------------
# export


def scene_to_record(state: SceneState) -> dict:
    """JSON-serializable snapshot for replay."""
    return {
        "slot": state.slot,
        "users": [
            {
                "id": u.uid,
                "position": [float(v) for v in u.position],
                "velocity": [float(v) for v in u.velocity],
                "speed": u.speed,
            }
            for u in state.users
        ],
        "obstacles": [
            {
                "id": o.oid,
                "center": [float(v) for v in o.center],
                "size": [o.width, o.depth, o.height],
            }
            for o in state.obstacles
        ],
    }


def write_scene_jsonl(states: list[SceneState], path: str) -> None:
    with open(path, "w") as fh:
        for s in states:
            fh.write(json.dumps(scene_to_record(s), sort_keys=True) + "\n")
