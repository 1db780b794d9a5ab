"""
    Exact ray casting against a scenario, and the lidar and camera ring
    built on top of it. Every return carries the oracle terrain class and
    surface slope, standing in for a segmentation network.
    Usage:
    ```
    from tandem.sim import sensors
    scan = sensors.simulate_lidar(scene, pose, SensorParams())
    views = sensors.render_camera_ring(scene, pose, SensorParams())
    ```
"""
import math
import typing

import numpy as np

from ..config import SensorParams
from ..geometry import CameraIntrinsics, RigidTransform, RobotState
from ..mapping.semantic import CameraView, LabelImage, TerrainClass

SIDE_SLOPE = math.pi / 2
# camera yaw offsets in the sensor frame: front, left, back, right
RING_YAWS = (0.0, math.pi / 2, math.pi, -math.pi / 2)


class RayHits(typing.NamedTuple):
    distance: np.ndarray
    classes: np.ndarray
    slopes: np.ndarray


class LidarScan(typing.NamedTuple):
    origin: np.ndarray
    points: np.ndarray
    classes: np.ndarray
    slopes: np.ndarray

    def __len__(self):
        return len(self.points)


def terrain_slope(scene) -> np.ndarray:
    """Surface slope of every column top from the heightfield gradient"""
    if min(scene.heightmap.shape) < 2:
        return np.zeros(scene.heightmap.shape)
    gx, gy = np.gradient(scene.heightmap, scene.resolution)
    return np.arctan(np.hypot(gx, gy))


def _cast_heightfield(scene, origins, dirs, max_range, slopes_map):
    n = len(dirs)
    res = scene.resolution
    best = np.full(n, np.inf)
    classes = np.zeros(n, dtype=np.uint8)
    slopes = np.zeros(n)
    local = (origins[:, :2] - np.asarray(scene.origin)) / res
    cell = np.floor(local).astype(np.int64)
    step = np.where(dirs[:, :2] > 0, 1, -1)
    with np.errstate(divide='ignore', invalid='ignore'):
        boundary = np.where(dirs[:, :2] > 0, cell + 1, cell)
        t_max = np.where(dirs[:, :2] != 0, (boundary - local) * res / dirs[:, :2], np.inf)
        t_delta = np.where(dirs[:, :2] != 0, res / np.abs(dirs[:, :2]), np.inf)
    t_entry = np.zeros(n)
    active = np.ones(n, dtype=bool)
    width, height = scene.heightmap.shape
    while np.any(active):
        idx = np.flatnonzero(active)
        c = cell[idx]
        inside = (c[:, 0] >= 0) & (c[:, 0] < width) & (c[:, 1] >= 0) & (c[:, 1] < height)
        column = np.full(len(idx), -np.inf)
        column[inside] = scene.heightmap[c[inside, 0], c[inside, 1]]
        t0 = t_entry[idx]
        t1 = np.minimum(np.minimum(t_max[idx, 0], t_max[idx, 1]), max_range)
        dz = dirs[idx, 2]
        z0 = origins[idx, 2] + dz * t0
        z1 = origins[idx, 2] + dz * t1
        side = z0 <= column
        top = ~side & (z1 <= column) & (dz < 0)
        hit = side | top
        if np.any(hit):
            rows = idx[hit]
            with np.errstate(divide='ignore', invalid='ignore'):
                t_top = (column[hit] - origins[rows, 2]) / dz[hit]
            best[rows] = np.where(side[hit], t0[hit], t_top)
            ci = c[hit]
            classes[rows] = scene.labels[ci[:, 0], ci[:, 1]]
            slopes[rows] = np.where(side[hit], SIDE_SLOPE, slopes_map[ci[:, 0], ci[:, 1]])
            active[rows] = False
        moving = idx[~hit]
        axis = np.argmin(t_max[moving], axis=1)
        t_entry[moving] = t_max[moving, axis]
        cell[moving, axis] += step[moving, axis]
        t_max[moving, axis] += t_delta[moving, axis]
        active[moving[t_entry[moving] > max_range]] = False
    return best, classes, slopes


def _cast_boxes(scene, origins, dirs):
    n = len(dirs)
    best = np.full(n, np.inf)
    classes = np.zeros(n, dtype=np.uint8)
    slopes = np.zeros(n)
    if not scene.boxes:
        return best, classes, slopes
    lo = np.array([b.lo for b in scene.boxes])
    hi = np.array([b.hi for b in scene.boxes])
    labels = np.array([b.label for b in scene.boxes], dtype=np.uint8)
    safe = np.where(np.abs(dirs) < 1e-12, np.copysign(1e-12, dirs + 0.0), dirs)
    t1 = (lo[None, :, :] - origins[:, None, :]) / safe[:, None, :]
    t2 = (hi[None, :, :] - origins[:, None, :]) / safe[:, None, :]
    near = np.minimum(t1, t2)
    t_near = near.max(axis=2)
    t_far = np.maximum(t1, t2).min(axis=2)
    hit = (t_near <= t_far) & (t_far >= 0)
    t = np.where(hit, np.maximum(t_near, 0.0), np.inf)
    first = np.argmin(t, axis=1)
    rows = np.arange(n)
    best = t[rows, first]
    classes = labels[first]
    face_axis = np.argmax(near[rows, first], axis=1)
    slopes = np.where(face_axis == 2, 0.0, SIDE_SLOPE)
    return best, classes, slopes


def cast_rays(scene, origins, dirs, max_range) -> RayHits:
    """First intersection with terrain columns, boxes or the ceiling;
    distance is inf for rays with nothing within max_range"""
    dirs = np.asarray(dirs, float).reshape(-1, 3)
    origins = np.broadcast_to(np.asarray(origins, float), dirs.shape).copy()
    candidates = [
        _cast_heightfield(scene, origins, dirs, max_range, terrain_slope(scene)),
        _cast_boxes(scene, origins, dirs),
    ]
    if scene.ceiling is not None:
        with np.errstate(divide='ignore', invalid='ignore'):
            t = np.where(dirs[:, 2] > 0, (scene.ceiling - origins[:, 2]) / dirs[:, 2], np.inf)
        candidates.append((t, np.full(len(dirs), TerrainClass.UNTRAVERSABLE, dtype=np.uint8), np.zeros(len(dirs))))
    distance = np.full(len(dirs), np.inf)
    classes = np.zeros(len(dirs), dtype=np.uint8)
    slopes = np.zeros(len(dirs))
    for t, cls, slope in candidates:
        closer = t < distance
        distance[closer], classes[closer], slopes[closer] = t[closer], cls[closer], slope[closer]
    distance[distance > max_range] = np.inf
    return RayHits(distance, classes, slopes)


def sensor_origin(pose: RobotState, params: SensorParams) -> np.ndarray:
    return pose.as_array() + np.array([0.0, 0.0, params.mount_height])


def sensor_to_world(pose: RobotState, params: SensorParams) -> RigidTransform:
    return RigidTransform.from_yaw(pose.psi, sensor_origin(pose, params))


def lidar_directions(psi, params: SensorParams) -> np.ndarray:
    azimuth = psi + np.arange(params.lidar_rays) * 2 * math.pi / params.lidar_rays
    elevation = np.linspace(-params.lidar_vfov / 2, params.lidar_vfov / 2, params.lidar_channels)
    az, el = np.meshgrid(azimuth, elevation, indexing='ij')
    return np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1).reshape(-1, 3)


def simulate_lidar(scene, pose: RobotState, params: SensorParams = None) -> LidarScan:
    """World-frame returns of the spinning lidar mounted above the pose"""
    params = params or SensorParams()
    origin = sensor_origin(pose, params)
    dirs = lidar_directions(pose.psi, params)
    hits = cast_rays(scene, origin, dirs, params.lidar_range)
    valid = np.isfinite(hits.distance)
    points = origin + dirs[valid] * hits.distance[valid, None]
    return LidarScan(origin, points, hits.classes[valid], hits.slopes[valid])


def ring_intrinsics(params: SensorParams) -> CameraIntrinsics:
    """90 degree square pinhole camera"""
    size = params.camera_pixels
    focal = size / 2.0
    center = (size - 1) / 2.0
    return CameraIntrinsics(focal, focal, center, center, size, size)


def camera_extrinsics(yaw) -> RigidTransform:
    """Sensor frame (x forward, z up) to an optical frame looking along yaw"""
    c, s = math.cos(yaw), math.sin(yaw)
    rotation = np.array([[s, -c, 0.0], [0.0, 0.0, -1.0], [c, s, 0.0]])
    return RigidTransform(rotation, np.zeros(3))


def render_camera_ring(scene, pose: RobotState, params: SensorParams = None) -> typing.List[CameraView]:
    """Oracle label and slope images of the four ring cameras"""
    params = params or SensorParams()
    intr = ring_intrinsics(params)
    to_world = sensor_to_world(pose, params)
    rows, cols = np.meshgrid(np.arange(intr.height), np.arange(intr.width), indexing='ij')
    optical = np.stack([(cols - intr.cx) / intr.fx, (rows - intr.cy) / intr.fy, np.ones(cols.shape)], axis=-1)
    optical = optical.reshape(-1, 3)
    optical /= np.linalg.norm(optical, axis=1, keepdims=True)
    views = []
    for yaw in RING_YAWS:
        extrinsics = camera_extrinsics(yaw)
        world_dirs = optical @ extrinsics.rotation @ to_world.rotation.T
        hits = cast_rays(scene, to_world.translation, world_dirs, params.lidar_range)
        classes = np.where(np.isfinite(hits.distance), hits.classes, TerrainClass.UNTRAVERSABLE)
        views.append(CameraView(
            LabelImage(classes.reshape(intr.height, intr.width).astype(np.uint8)),
            hits.slopes.reshape(intr.height, intr.width),
            extrinsics, intr,
        ))
    return views
