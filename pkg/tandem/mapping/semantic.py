"""
    Semantic traversability: terrain classes fused with slope through the
    traversability decay function, and projection of per-pixel scores onto
    lidar points to produce a labelled cloud in the world frame.
    Usage:
    ```
    from tandem.mapping import semantic
    semantic.traversability_decay(0.6, 0.3)
    view = semantic.CameraView(labels, slopes, extrinsics, intrinsics)
    labelled = semantic.label_point_cloud(points, view, to_world)
    ```
"""
import enum
import math
import pathlib
import struct
import typing

import numpy as np

from .. import display
from ..config import ConfigurationError, SemanticParams
from ..geometry import CameraIntrinsics, LabeledCloud, RigidTransform, pixel_index, project_points

SLOPE_MAGIC = b'SLPF'
SLOPE_HEADER = struct.Struct('<4sII4x')


class TerrainClass(enum.IntEnum):
    UNTRAVERSABLE = 0
    UNDESIRABLE = 1
    ROUGH = 2
    OPTIMAL = 3


def alpha_table(params: SemanticParams = None) -> np.ndarray:
    """Alpha per TerrainClass value"""
    return np.array((params or SemanticParams()).alphas(), dtype=float)


class LabelImage(typing.NamedTuple):
    """Per-pixel TerrainClass indices, shape (height, width)"""
    classes: np.ndarray

    @property
    def width(self):
        return self.classes.shape[1]

    @property
    def height(self):
        return self.classes.shape[0]


class CameraView(typing.NamedTuple):
    labels: LabelImage
    slopes: np.ndarray
    extrinsics: RigidTransform
    intrinsics: CameraIntrinsics


def traversability_decay(alpha, theta):
    """alpha * exp(-theta / alpha) with theta clamped to [0, pi/2]; exactly 0
    for alpha = 0"""
    alpha_arr = np.asarray(alpha, dtype=float)
    theta_arr = np.clip(np.asarray(theta, dtype=float), 0.0, math.pi / 2)
    safe_alpha = np.where(alpha_arr > 0, alpha_arr, 1.0)
    score = np.where(alpha_arr > 0, alpha_arr * np.exp(-theta_arr / safe_alpha), 0.0)
    if score.ndim == 0:
        return float(score)
    return score


def _check_view(view: CameraView):
    intr = view.intrinsics
    if view.labels.classes.shape != (intr.height, intr.width):
        raise ConfigurationError(
            f"Label image is {view.labels.width}x{view.labels.height}, "
            f"camera is {intr.width}x{intr.height}"
        )
    if np.shape(view.slopes) != view.labels.classes.shape:
        raise ConfigurationError(
            f"Slope image shape {np.shape(view.slopes)} does not match labels {view.labels.classes.shape}"
        )


def _score_points(points, view: CameraView, alphas):
    """Scores and visibility mask of sensor-frame points in one camera"""
    _check_view(view)
    uv, valid = project_points(points, view.extrinsics, view.intrinsics)
    cols, rows = pixel_index(uv[valid])
    classes = view.labels.classes[rows, cols].astype(np.int64)
    if np.any(classes >= len(alphas)):
        raise ConfigurationError(f"Label image holds class indices above {len(alphas) - 1}")
    scores = np.zeros(len(points))
    scores[valid] = traversability_decay(alphas[classes], np.asarray(view.slopes)[rows, cols])
    return scores, valid


def label_point_cloud(cloud, view: CameraView, to_world: RigidTransform,
                      params: SemanticParams = None) -> LabeledCloud:
    """Score the sensor-frame points visible in the camera and move them to
    the world frame; points outside the image or behind the camera are
    dropped"""
    return label_with_cameras(cloud, [view], to_world, params)


def label_with_cameras(cloud, views, to_world: RigidTransform,
                       params: SemanticParams = None) -> LabeledCloud:
    """Label each point with the first camera of the ring that sees it"""
    points = np.asarray(cloud, dtype=float).reshape(-1, 3)
    alphas = alpha_table(params)
    scores = np.zeros(len(points))
    seen = np.zeros(len(points), dtype=bool)
    for view in views:
        view_scores, visible = _score_points(points, view, alphas)
        fresh = visible & ~seen
        scores[fresh] = view_scores[fresh]
        seen |= fresh
    return LabeledCloud(to_world.apply(points[seen]), scores[seen])


def read_label_image(path) -> LabelImage:
    try:
        classes = display.read_pgm(path)
    except (OSError, ValueError) as _e:
        raise ConfigurationError(f"Can't read label image {path}: {_e}") from _e
    if classes.size and classes.max() > max(TerrainClass):
        raise ConfigurationError(f"Label image {path} holds values above {int(max(TerrainClass))}")
    return LabelImage(classes.astype(np.uint8))


def write_label_image(labels: LabelImage, path):
    display.write_pgm(labels.classes.astype(np.uint8), path)


def write_slope_image(slopes, path):
    slopes = np.asarray(slopes, dtype='<f4')
    height, width = slopes.shape
    with open(path, 'wb') as fh:
        fh.write(SLOPE_HEADER.pack(SLOPE_MAGIC, width, height))
        fh.write(slopes.tobytes())


def read_slope_image(path) -> np.ndarray:
    data = pathlib.Path(path).read_bytes()
    if len(data) < SLOPE_HEADER.size:
        raise ConfigurationError(f"Slope image {path} is shorter than its header")
    magic, width, height = SLOPE_HEADER.unpack_from(data)
    if magic != SLOPE_MAGIC:
        raise ConfigurationError(f"Slope image {path} has bad magic {magic!r}")
    expected = SLOPE_HEADER.size + 4 * width * height
    if len(data) != expected:
        raise ConfigurationError(f"Slope image {path} has {len(data)} bytes, expected {expected}")
    return np.frombuffer(data, dtype='<f4', offset=SLOPE_HEADER.size).reshape(height, width).astype(float)
