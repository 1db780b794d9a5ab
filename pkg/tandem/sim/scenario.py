"""
    Synthetic environments: a flat-topped column heightfield with a terrain
    class per cell, optional solid boxes and a ceiling plane.

    Walls, debris and stairs are all heightfield columns. The canned suite
    covers an open room, a straight corridor, a T-junction, a corridor
    blocked by a debris field and a corridor ending in stairs.
    Usage:
    ```
    from tandem.sim import scenario
    scene = scenario.canned('clutter', seed=3)
    scenario.save_scenario(scene, 'out/clutter')
    scene = scenario.load_scenario('out/clutter/scenario.json')
    ```
"""
import dataclasses
import json
import math
import pathlib
import typing

import numpy as np

from ..config import ConfigurationError
from ..geometry import RigidTransform, RobotState
from ..mapping import semantic
from ..mapping.semantic import TerrainClass

KINDS = ('open', 'corridor', 'junction', 'clutter', 'stairs')
MANIFEST_VERSION = 1


@dataclasses.dataclass(frozen=True)
class SolidBox:
    lo: typing.Tuple[float, float, float]
    hi: typing.Tuple[float, float, float]
    label: TerrainClass = TerrainClass.UNTRAVERSABLE

    def __post_init__(self):
        if any(h <= l for l, h in zip(self.lo, self.hi)):
            raise ConfigurationError(f"Box corners {self.lo} / {self.hi} are not ordered")


@dataclasses.dataclass(eq=False)
class Scenario:
    name: str
    heightmap: np.ndarray
    labels: np.ndarray
    resolution: float
    start: RobotState
    origin: typing.Tuple[float, float] = (0.0, 0.0)
    boxes: typing.List[SolidBox] = dataclasses.field(default_factory=list)
    ceiling: typing.Optional[float] = None
    dock_offset: typing.Tuple[float, float, float] = (0.0, 0.0, 0.4)
    static_transform: RigidTransform = dataclasses.field(default_factory=RigidTransform.identity)
    seed: int = 0
    expected_deploy: bool = False
    # obstacle front for the beyond-the-barrier count, None when nothing blocks
    barrier_x: typing.Optional[float] = None

    def __post_init__(self):
        self.heightmap = np.asarray(self.heightmap, dtype=float)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.heightmap.shape != self.labels.shape:
            raise ConfigurationError(
                f"Label grid {self.labels.shape} does not match heightmap {self.heightmap.shape}"
            )
        if self.labels.size and self.labels.max() > max(TerrainClass):
            raise ConfigurationError("Label grid holds unknown terrain classes")
        if not self.start_is_free():
            raise ConfigurationError(f"Start pose {self.start} of {self.name} is not collision free")

    def __repr__(self):
        return f'{self.__class__.__name__}:{self.name}[{self.width}x{self.height}@{self.resolution}]'

    @property
    def width(self):
        return self.heightmap.shape[0]

    @property
    def height(self):
        return self.heightmap.shape[1]

    @property
    def bounds(self):
        x0, y0 = self.origin
        return x0, y0, x0 + self.width * self.resolution, y0 + self.height * self.resolution

    def cell_of(self, x, y):
        i = np.floor((np.asarray(x, float) - self.origin[0]) / self.resolution).astype(np.int64)
        j = np.floor((np.asarray(y, float) - self.origin[1]) / self.resolution).astype(np.int64)
        return i, j

    def terrain_height(self, x, y):
        """Column height under (x, y), NaN outside the heightfield"""
        i, j = self.cell_of(x, y)
        inside = (i >= 0) & (i < self.width) & (j >= 0) & (j < self.height)
        out = np.full(np.shape(i), np.nan)
        out[inside] = self.heightmap[i[inside], j[inside]]
        return out

    def ground_pose(self, x, y, psi=0.0, z_off=0.3):
        return RobotState(x, y, float(self.terrain_height(x, y)) + z_off, psi)

    def start_is_free(self):
        x0, y0, x1, y1 = self.bounds
        if not (x0 <= self.start.x < x1 and y0 <= self.start.y < y1):
            return False
        support = float(self.terrain_height(self.start.x, self.start.y))
        if not (self.start.z > support):
            return False
        p = self.start.as_array()
        return not any(np.all(p >= b.lo) and np.all(p <= b.hi) for b in self.boxes)

    def aerial_start(self, ground_pose: RobotState) -> RobotState:
        """Aerial pose in its own frame when leaving the ground agent's dock"""
        docked = RobotState(*(ground_pose.as_array() + np.asarray(self.dock_offset)), ground_pose.psi)
        return self.static_transform.inverse().apply_state(docked)

    def free_voxel_count(self, voxel_size, top=3.0):
        """Voxel centers above the terrain, below the ceiling (or top) and
        outside every box; the denominator of coverage fractions"""
        x0, y0, x1, y1 = self.bounds
        ceiling = self.ceiling if self.ceiling is not None else top
        xs = (np.arange(math.floor(x0 / voxel_size), math.ceil(x1 / voxel_size)) + 0.5) * voxel_size
        ys = (np.arange(math.floor(y0 / voxel_size), math.ceil(y1 / voxel_size)) + 0.5) * voxel_size
        zs = (np.arange(0, math.ceil(ceiling / voxel_size)) + 0.5) * voxel_size
        gx, gy = np.meshgrid(xs, ys, indexing='ij')
        support = self.terrain_height(gx, gy)
        free = (zs[None, None, :] > support[..., None]) & (zs[None, None, :] < ceiling)
        for box in self.boxes:
            inside = ((gx >= box.lo[0]) & (gx <= box.hi[0]) & (gy >= box.lo[1]) & (gy <= box.hi[1]))
            free &= ~(inside[..., None] & (zs >= box.lo[2]) & (zs <= box.hi[2]))
        return int(np.count_nonzero(free))


class _Layout:
    """Heightfield filled with walls, carved open with rectangles"""

    def __init__(self, size_x, size_y, resolution=0.05, wall_height=2.0):
        self.resolution = resolution
        shape = (int(round(size_x / resolution)), int(round(size_y / resolution)))
        self.heights = np.full(shape, wall_height)
        self.labels = np.full(shape, TerrainClass.UNTRAVERSABLE, dtype=np.uint8)

    def _cells(self, x0, y0, x1, y1):
        xs = (np.arange(self.heights.shape[0]) + 0.5) * self.resolution
        ys = (np.arange(self.heights.shape[1]) + 0.5) * self.resolution
        return np.ix_((xs >= x0) & (xs < x1), (ys >= y0) & (ys < y1))

    def carve(self, x0, y0, x1, y1, height=0.0, label=TerrainClass.OPTIMAL):
        cells = self._cells(x0, y0, x1, y1)
        self.heights[cells] = height
        self.labels[cells] = label

    def build(self, name, start_xy, **kwargs):
        heights = self.heights.astype(np.float32).astype(float)
        x, y = start_xy
        i, j = int(x / self.resolution), int(y / self.resolution)
        start = RobotState(x, y, float(heights[i, j]) + 0.3, 0.0)
        return Scenario(name, heights, self.labels.copy(), self.resolution, start, **kwargs)


def open_room(seed=0):
    layout = _Layout(7.0, 7.0)
    layout.carve(0.2, 0.2, 6.8, 6.8)
    return layout.build('open', (3.5, 3.5), ceiling=2.0, seed=seed)


def straight_corridor(seed=0):
    layout = _Layout(16.0, 3.0)
    layout.carve(0.2, 0.3, 15.8, 2.7)
    return layout.build('corridor', (1.0, 1.5), ceiling=2.2, seed=seed)


def t_junction(seed=0):
    layout = _Layout(12.0, 12.0)
    layout.carve(0.2, 4.8, 9.0, 7.2)
    layout.carve(8.0, 0.2, 10.4, 11.8)
    return layout.build('junction', (1.0, 6.0), ceiling=2.2, seed=seed)


def clutter_block(seed=0):
    """Corridor crossed by a field of 0.28-0.32 m debris blocks, turning
    out of sight beyond it"""
    rng = np.random.default_rng(seed)
    layout = _Layout(13.0, 8.0)
    layout.carve(0.2, 0.3, 12.0, 2.7)
    layout.carve(9.6, 2.7, 12.0, 7.8)
    block = 0.4
    for x in np.arange(5.0, 6.6 - 1e-9, block):
        for y in np.arange(0.3, 2.7 - 1e-9, block):
            layout.carve(x, y, x + block, y + block, height=float(rng.uniform(0.28, 0.32)),
                         label=TerrainClass.UNDESIRABLE)
    tf = RigidTransform.from_yaw(0.1, (0.5, -0.3, 0.0))
    return layout.build('clutter', (1.0, 1.5), ceiling=2.2, seed=seed, expected_deploy=True,
                        barrier_x=6.6, static_transform=tf)


def stairs(seed=0):
    """Corridor ending in five 0.3 m steps up to a landing, open volume above"""
    layout = _Layout(16.0, 3.0, wall_height=4.0)
    layout.carve(0.2, 0.3, 15.8, 2.7)
    rise, tread, x = 0.3, 0.3, 6.0
    for step in range(1, 6):
        layout.carve(x, 0.3, x + tread, 2.7, height=rise * step, label=TerrainClass.UNDESIRABLE)
        x += tread
    layout.carve(x, 0.3, 15.8, 2.7, height=rise * 5)
    return layout.build('stairs', (1.0, 1.5), ceiling=4.0, seed=seed, expected_deploy=True, barrier_x=x)


builders = {
    'open': open_room,
    'corridor': straight_corridor,
    'junction': t_junction,
    'clutter': clutter_block,
    'stairs': stairs,
}


def canned(kind, seed=0) -> Scenario:
    if kind not in builders:
        raise ConfigurationError(f"Unknown scenario kind {kind}, expected one of {KINDS}")
    return builders[kind](seed)


def save_scenario(scene: Scenario, out_dir) -> pathlib.Path:
    """JSON manifest next to a float64 .npy heightmap and a label PGM"""
    out_dir = pathlib.Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    np.save(out_dir / 'heightmap.npy', np.asarray(scene.heightmap, dtype=float))
    semantic.write_label_image(semantic.LabelImage(scene.labels), out_dir / 'labels.pgm')
    tf = scene.static_transform
    manifest = {
        'version': MANIFEST_VERSION,
        'name': scene.name,
        'resolution': scene.resolution,
        'origin': list(scene.origin),
        'heightmap': 'heightmap.npy',
        'labels': 'labels.pgm',
        'boxes': [{'lo': list(b.lo), 'hi': list(b.hi), 'label': int(b.label)} for b in scene.boxes],
        'ceiling': scene.ceiling,
        'start': {'x': scene.start.x, 'y': scene.start.y, 'z': scene.start.z, 'psi': scene.start.psi},
        'dock_offset': list(scene.dock_offset),
        'static_transform': {'yaw': tf.yaw, 'translation': tf.translation.tolist()},
        'seed': scene.seed,
        'expected_deploy': scene.expected_deploy,
        'barrier_x': scene.barrier_x,
    }
    path = out_dir / 'scenario.json'
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + '\n')
    return path


def _read_heightmap(path) -> np.ndarray:
    try:
        heights = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as _e:
        raise ConfigurationError(f"Can't read heightmap {path}: {_e}") from _e
    if heights.ndim != 2 or not np.issubdtype(heights.dtype, np.floating):
        raise ConfigurationError(f"Heightmap {path} must be a 2D float grid, got {heights.dtype} {heights.shape}")
    return heights.astype(float)


def load_scenario(path) -> Scenario:
    path = pathlib.Path(path)
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as _e:
        raise ConfigurationError(f"Can't read scenario manifest {path}: {_e}") from _e
    if manifest.get('version') != MANIFEST_VERSION:
        raise ConfigurationError(f"Unsupported scenario manifest version {manifest.get('version')}")
    try:
        heightmap = _read_heightmap(path.parent / manifest['heightmap'])
        labels = semantic.read_label_image(path.parent / manifest['labels']).classes
        tf = manifest['static_transform']
        return Scenario(
            name=manifest['name'],
            heightmap=heightmap,
            labels=labels,
            resolution=float(manifest['resolution']),
            start=RobotState(**manifest['start']),
            origin=tuple(manifest['origin']),
            boxes=[SolidBox(tuple(b['lo']), tuple(b['hi']), TerrainClass(b['label'])) for b in manifest['boxes']],
            ceiling=manifest['ceiling'],
            dock_offset=tuple(manifest['dock_offset']),
            static_transform=RigidTransform.from_yaw(tf['yaw'], tf['translation']),
            seed=int(manifest['seed']),
            expected_deploy=bool(manifest['expected_deploy']),
            barrier_x=manifest['barrier_x'],
        )
    except (KeyError, TypeError) as _e:
        raise ConfigurationError(f"Scenario manifest {path} is missing or mistypes {_e}") from _e
