"""
    Geometric primitives shared by the mapping, planning and protocol layers:
    poses, points, bounding boxes, footprint polygons, rigid transforms and
    pinhole projection.
    Usage:
    ```
    from tandem.geometry import RobotState, BoundingBox, footprint_polygon
    state = RobotState(3.0, 4.0, 0.0, math.pi / 2)
    poly = footprint_polygon(state, BoundingBox(state, 1.0, 0.7, 0.8))
    poly.geometry.area
    ```
"""
import dataclasses
import math
import typing

import numpy as np
import shapely
import shapely.geometry


def normalize_angle(angle: float) -> float:
    """Wrap an angle into (-pi, pi]"""
    return angle - 2.0 * math.pi * math.ceil((angle - math.pi) / (2.0 * math.pi))


def _check_finite(*values):
    if not all(math.isfinite(v) for v in values):
        raise ValueError(f"Coordinates must be finite, got {values}")


@dataclasses.dataclass(frozen=True)
class RobotState:
    x: float
    y: float
    z: float
    psi: float = 0.0

    def __post_init__(self):
        _check_finite(self.x, self.y, self.z, self.psi)
        object.__setattr__(self, 'psi', normalize_angle(float(self.psi)))

    @property
    def position(self):
        return Point3(self.x, self.y, self.z)

    def as_array(self):
        return np.array([self.x, self.y, self.z], dtype=float)


@dataclasses.dataclass(frozen=True)
class Point3:
    x: float
    y: float
    z: float

    def __post_init__(self):
        _check_finite(self.x, self.y, self.z)

    def as_array(self):
        return np.array([self.x, self.y, self.z], dtype=float)

    @classmethod
    def from_array(cls, values):
        return cls(float(values[0]), float(values[1]), float(values[2]))


@dataclasses.dataclass(frozen=True)
class LabeledPoint:
    position: Point3
    traversability: float

    def __post_init__(self):
        if not 0.0 <= self.traversability <= 1.0:
            raise ValueError(f"Traversability must lie in [0, 1], got {self.traversability}")


class LabeledCloud(typing.NamedTuple):
    """Array form of a labelled point cloud, (N, 3) points and (N,) scores"""
    points: np.ndarray
    traversability: np.ndarray

    def __len__(self):
        return len(self.points)

    def to_points(self):
        return [
            LabeledPoint(Point3.from_array(p), float(t))
            for p, t in zip(self.points, self.traversability)
        ]

    @classmethod
    def from_points(cls, labeled_points):
        points = np.array([lp.position.as_array() for lp in labeled_points], dtype=float).reshape(-1, 3)
        trav = np.array([lp.traversability for lp in labeled_points], dtype=float)
        return cls(points, trav)


@dataclasses.dataclass(frozen=True)
class BoundingBox:
    center: RobotState
    length: float
    width: float
    height: float

    def __post_init__(self):
        if min(self.length, self.width, self.height) <= 0:
            raise ValueError(
                f"Box dimensions must be positive, got {self.length}x{self.width}x{self.height}"
            )


@dataclasses.dataclass(frozen=True)
class FootprintPolygon:
    """Planar quadrilateral, counter-clockwise, world frame"""
    vertices: typing.Tuple[typing.Tuple[float, float], ...]

    def __post_init__(self):
        if len(self.vertices) != 4:
            raise ValueError(f"Footprint needs exactly 4 vertices, got {len(self.vertices)}")
        ring = self.geometry
        if ring.area <= 0 or not ring.exterior.is_ccw:
            raise ValueError("Footprint must be a non-degenerate counter-clockwise polygon")
        if abs(ring.convex_hull.area - ring.area) > 1e-9 * max(ring.area, 1.0):
            raise ValueError("Footprint must be convex")

    @property
    def geometry(self):
        return shapely.geometry.Polygon(self.vertices)

    @property
    def area(self):
        return self.geometry.area

    @property
    def bounds(self):
        return self.geometry.bounds

    def contains_xy(self, xs, ys):
        """Vectorized point-in-polygon, boundary counted as inside"""
        return shapely.intersects_xy(self.geometry, np.asarray(xs, float), np.asarray(ys, float))


def yaw_matrix(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclasses.dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rotation = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        translation = np.asarray(self.translation, dtype=float).reshape(3)
        if not np.allclose(rotation @ rotation.T, np.eye(3), atol=1e-6):
            raise ValueError("Rotation is not orthonormal")
        if abs(np.linalg.det(rotation) - 1.0) > 1e-6:
            raise ValueError("Rotation must have determinant +1")
        if not np.all(np.isfinite(translation)):
            raise ValueError("Translation must be finite")
        object.__setattr__(self, 'rotation', rotation)
        object.__setattr__(self, 'translation', translation)

    def __eq__(self, other):
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return (np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation))

    def __repr__(self):
        return f"{self.__class__.__name__}(t={self.translation.tolist()}, yaw={self.yaw:.6f})"

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)):
        return cls(yaw_matrix(yaw), np.asarray(translation, dtype=float))

    @classmethod
    def from_state(cls, state: RobotState):
        """Body frame of a pose expressed in the world frame"""
        return cls.from_yaw(state.psi, state.as_array())

    @property
    def yaw(self):
        return math.atan2(self.rotation[1, 0], self.rotation[0, 0])

    def inverse(self):
        rotation_t = self.rotation.T
        return RigidTransform(rotation_t, -rotation_t @ self.translation)

    def __matmul__(self, other):
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def as_matrix(self):
        matrix = np.eye(4)
        matrix[:3, :3] = self.rotation
        matrix[:3, 3] = self.translation
        return matrix

    def apply(self, points) -> np.ndarray:
        """Transform an (N, 3) array of points"""
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        return points @ self.rotation.T + self.translation

    def apply_state(self, state: RobotState) -> RobotState:
        x, y, z = self.apply(state.as_array())[0]
        return RobotState(x, y, z, state.psi + self.yaw)


@dataclasses.dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"Focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"Principal point ({self.cx}, {self.cy}) outside a {self.width}x{self.height} image"
            )

    @property
    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


def footprint_polygon(state: RobotState, box: BoundingBox) -> FootprintPolygon:
    """Rotate the box half extents by the heading and offset them by the pose,
    starting from (s1, s2) = (+1, +1) and going counter-clockwise"""
    half_l, half_w = box.length / 2.0, box.width / 2.0
    c, s = math.cos(state.psi), math.sin(state.psi)
    vertices = []
    for s1, s2 in ((1, 1), (-1, 1), (-1, -1), (1, -1)):
        dx, dy = s1 * half_l, s2 * half_w
        vertices.append((state.x + c * dx - s * dy, state.y + s * dx + c * dy))
    return FootprintPolygon(tuple(vertices))


def transform_point(p: Point3, tf: RigidTransform) -> Point3:
    return Point3.from_array(tf.apply(p.as_array())[0])


def project_points(points, extrinsics: RigidTransform, intr: CameraIntrinsics):
    """Vectorized pinhole projection.

    Returns continuous pixel coordinates (N, 2) and a mask of points in front
    of the camera whose rounded pixel index lies inside the image.
    """
    camera_points = extrinsics.apply(points)
    depth = camera_points[:, 2]
    in_front = depth > 0
    safe_depth = np.where(in_front, depth, 1.0)
    homogeneous = camera_points @ intr.matrix.T
    uv = homogeneous[:, :2] / safe_depth[:, None]
    cols, rows = pixel_index(uv)
    valid = in_front & (cols >= 0) & (cols < intr.width) & (rows >= 0) & (rows < intr.height)
    return uv, valid


def pixel_index(uv):
    """Round continuous pixel coordinates half-up to integer (col, row)"""
    uv = np.asarray(uv, dtype=float).reshape(-1, 2)
    index = np.floor(uv + 0.5).astype(np.int64)
    return index[:, 0], index[:, 1]


def project_point_to_image(p: Point3, extrinsics: RigidTransform, intr: CameraIntrinsics):
    uv, valid = project_points(p.as_array(), extrinsics, intr)
    if not valid[0]:
        return None
    return float(uv[0, 0]), float(uv[0, 1])
