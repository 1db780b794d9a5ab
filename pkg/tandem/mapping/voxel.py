"""
    Sparse block-hashed volumetric map.

    Voxels carry a truncated signed distance with its weight plus a semantic
    traversability score with its own weight. Blocks of B^3 voxels are
    allocated on first write and found through a dict keyed by block index,
    so lookups stay constant time however many blocks exist.
    Usage:
    ```
    from tandem.mapping import voxel
    vmap = voxel.VoxelMap(VoxelParams())
    voxel.integrate_labeled_cloud(vmap, labelled, sensor_origin)
    voxel.voxel_state(vmap, Point3(1.0, 0.0, 0.2))
    hit = voxel.raycast(vmap, origin, direction, 5.0)
    counts = voxel.frustum_census(vmap, voxel.SensorFrustum(pose, hfov, vfov, 3.0))
    voxel.volumetric_gain(counts, GainParams())
    ```
"""
import contextlib
import contextvars
import dataclasses
import enum
import logging
import math
import pathlib
import struct
import typing

import numpy as np

from ..config import GainParams, VoxelParams
from ..geometry import FootprintPolygon, LabeledCloud, Point3, RobotState

# record layout of a voxel
DISTANCE, WEIGHT, TRAV, TRAV_WEIGHT = range(4)

SNAPSHOT_MAGIC = b'TVOX'
SNAPSHOT_VERSION = 1
SNAPSHOT_HEADER = struct.Struct('<4sIdIQ')
BLOCK_INDEX = struct.Struct('<3i')

_PACK_OFFSET = 1 << 20
_PACK_BITS = 21

_current_agent = contextvars.ContextVar('tandem_agent', default=None)


@contextlib.contextmanager
def agent_context(name):
    """Mark the code inside as running on behalf of an agent, so map reads by
    a different agent are counted"""
    token = _current_agent.set(name)
    try:
        yield
    finally:
        _current_agent.reset(token)


class VoxelState(enum.IntEnum):
    UNKNOWN = 0
    FREE = 1
    OCCUPIED = 2


@dataclasses.dataclass(frozen=True)
class Voxel:
    tsdf_distance: float
    tsdf_weight: float
    trav: float
    trav_weight: float
    state: VoxelState


@dataclasses.dataclass
class VoxelBlock:
    index: typing.Tuple[int, int, int]
    data: np.ndarray


@dataclasses.dataclass(frozen=True)
class SensorFrustum:
    apex: RobotState
    hfov: float
    vfov: float
    max_range: float

    def __post_init__(self):
        if not (0 < self.hfov < 2 * math.pi and 0 < self.vfov < 2 * math.pi):
            raise ValueError(f"Frustum FOVs must lie in (0, 2pi), got {self.hfov}, {self.vfov}")
        if self.max_range <= 0:
            raise ValueError(f"Frustum range must be positive, got {self.max_range}")


class CensusCounts(typing.NamedTuple):
    n_unknown: int
    n_free: int
    n_occupied: int

    @property
    def total(self):
        return self.n_unknown + self.n_free + self.n_occupied


class RaycastHit(typing.NamedTuple):
    index: typing.Tuple[int, int, int]
    position: Point3
    state: VoxelState
    trav: typing.Optional[float]
    distance: float


def pack_indices(indices) -> np.ndarray:
    """Pack (N, 3) voxel indices into sortable int64 keys"""
    shifted = np.asarray(indices, dtype=np.int64) + _PACK_OFFSET
    return (shifted[:, 0] << (2 * _PACK_BITS)) | (shifted[:, 1] << _PACK_BITS) | shifted[:, 2]


def unpack_indices(keys) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64)
    mask = (1 << _PACK_BITS) - 1
    return np.stack([
        (keys >> (2 * _PACK_BITS)) & mask, (keys >> _PACK_BITS) & mask, keys & mask
    ], axis=1) - _PACK_OFFSET


class VoxelMap:

    def __init__(self, params: VoxelParams = None, owner=None):
        self.params = params or VoxelParams()
        self.voxel_size = self.params.voxel_size
        self.block_size = self.params.block_size
        self.truncation = self.params.truncation
        self.occupancy_threshold = self.params.occupancy_threshold
        self.blocks = {}
        self.owner = owner
        self.foreign_reads = 0

    def __repr__(self):
        return f'{self.__class__.__name__}:{len(self.blocks)} blocks@{self.voxel_size}'

    def _note_read(self):
        current = _current_agent.get()
        if current is not None and self.owner is not None and current != self.owner:
            self.foreign_reads += 1

    def voxel_index(self, points) -> np.ndarray:
        """Floor convention: a point on a boundary belongs to the larger index"""
        return np.floor(np.asarray(points, dtype=float).reshape(-1, 3) / self.voxel_size).astype(np.int64)

    def voxel_center(self, indices) -> np.ndarray:
        return (np.asarray(indices, dtype=float).reshape(-1, 3) + 0.5) * self.voxel_size

    def _new_block(self, key):
        size = self.block_size
        block = VoxelBlock(key, np.zeros((size, size, size, 4)))
        self.blocks[key] = block
        return block

    def _grouped(self, indices):
        """Yield (block key, row selection, local indices) per touched block"""
        indices = np.asarray(indices, dtype=np.int64).reshape(-1, 3)
        if len(indices) == 0:
            return
        keys = indices // self.block_size
        local = indices - keys * self.block_size
        packed = pack_indices(keys)
        order = np.argsort(packed, kind='stable')
        sorted_keys = packed[order]
        bounds = np.flatnonzero(np.diff(sorted_keys)) + 1
        for rows in np.split(order, bounds):
            key = tuple(int(v) for v in keys[rows[0]])
            yield key, rows, local[rows]

    def gather(self, indices) -> np.ndarray:
        """(N, 4) records; untouched voxels read as zeros, nothing is allocated"""
        self._note_read()
        indices = np.asarray(indices, dtype=np.int64).reshape(-1, 3)
        out = np.zeros((len(indices), 4))
        for key, rows, local in self._grouped(indices):
            block = self.blocks.get(key)
            if block is not None:
                out[rows] = block.data[local[:, 0], local[:, 1], local[:, 2]]
        return out

    def scatter(self, indices, records):
        """Write (N, 4) records, allocating blocks as needed"""
        records = np.asarray(records, dtype=float).reshape(-1, 4)
        for key, rows, local in self._grouped(indices):
            block = self.blocks.get(key) or self._new_block(key)
            block.data[local[:, 0], local[:, 1], local[:, 2]] = records[rows]

    def states_of(self, records) -> np.ndarray:
        records = np.asarray(records)
        states = np.full(records.shape[:-1], VoxelState.FREE, dtype=np.int8)
        states[np.abs(records[..., DISTANCE]) < self.occupancy_threshold] = VoxelState.OCCUPIED
        states[records[..., WEIGHT] <= 0] = VoxelState.UNKNOWN
        return states

    def states(self, indices) -> np.ndarray:
        return self.states_of(self.gather(indices))

    def get_voxel(self, index) -> Voxel:
        record = self.gather(np.asarray(index).reshape(1, 3))[0]
        state = VoxelState(int(self.states_of(record[None])[0]))
        return Voxel(float(record[DISTANCE]), float(record[WEIGHT]),
                     float(record[TRAV]), float(record[TRAV_WEIGHT]), state)

    def set_voxel(self, index, distance, weight=1.0, trav=0.0, trav_weight=0.0):
        self.scatter(np.asarray(index).reshape(1, 3), [[distance, weight, trav, trav_weight]])

    def lookup(self, key):
        """Single voxel record by packed-free tuple index, without numpy grouping"""
        self._note_read()
        size = self.block_size
        bkey = (key[0] // size, key[1] // size, key[2] // size)
        block = self.blocks.get(bkey)
        if block is None:
            return None
        return block.data[key[0] - bkey[0] * size, key[1] - bkey[1] * size, key[2] - bkey[2] * size]

    def dense_states(self, lo, hi) -> np.ndarray:
        """States of the index box [lo, hi) as a dense int8 array"""
        self._note_read()
        lo = np.asarray(lo, dtype=np.int64)
        hi = np.asarray(hi, dtype=np.int64)
        shape = tuple(int(v) for v in np.maximum(hi - lo, 0))
        dense = np.zeros(shape, dtype=np.int8)
        if 0 in shape:
            return dense
        size = self.block_size
        key_lo = lo // size
        key_hi = (hi - 1) // size
        for key, block in self.blocks.items():
            if any(key[a] < key_lo[a] or key[a] > key_hi[a] for a in range(3)):
                continue
            start = np.array(key, dtype=np.int64) * size
            src_lo = np.maximum(lo - start, 0)
            src_hi = np.minimum(hi - start, size)
            dst_lo = start + src_lo - lo
            dst_hi = start + src_hi - lo
            dense[dst_lo[0]:dst_hi[0], dst_lo[1]:dst_hi[1], dst_lo[2]:dst_hi[2]] = self.states_of(
                block.data[src_lo[0]:src_hi[0], src_lo[1]:src_hi[1], src_lo[2]:src_hi[2]]
            )
        return dense

    def mark_free_box(self, center, half_extents):
        """Mark still-unknown voxels inside an axis-aligned box as free"""
        center = np.asarray(center, dtype=float)
        half = np.asarray(half_extents, dtype=float)
        lo = self.voxel_index(center - half)[0]
        hi = self.voxel_index(center + half)[0]
        axes = [np.arange(lo[a], hi[a] + 1) for a in range(3)]
        indices = np.stack(np.meshgrid(*axes, indexing='ij'), axis=-1).reshape(-1, 3)
        records = self.gather(indices)
        unknown = records[:, WEIGHT] <= 0
        records[unknown, DISTANCE] = self.truncation
        records[unknown, WEIGHT] = 1.0
        self.scatter(indices[unknown], records[unknown])

    def allocated_indices(self):
        """(N, 3) indices and (N, 4) records of every voxel in allocated blocks"""
        if not self.blocks:
            return np.zeros((0, 3), dtype=np.int64), np.zeros((0, 4))
        size = self.block_size
        local = np.stack(np.meshgrid(*[np.arange(size)] * 3, indexing='ij'), axis=-1).reshape(-1, 3)
        indices, records = [], []
        for key in sorted(self.blocks):
            indices.append(local + np.array(key, dtype=np.int64) * size)
            records.append(self.blocks[key].data.reshape(-1, 4))
        return np.concatenate(indices), np.concatenate(records)

    def free_indices(self) -> np.ndarray:
        indices, records = self.allocated_indices()
        return indices[self.states_of(records) == VoxelState.FREE]

    def count_states(self) -> CensusCounts:
        indices, records = self.allocated_indices()
        states = self.states_of(records)
        return CensusCounts(int(np.sum(states == VoxelState.UNKNOWN)),
                            int(np.sum(states == VoxelState.FREE)),
                            int(np.sum(states == VoxelState.OCCUPIED)))


def integrate_labeled_cloud(vmap: VoxelMap, cloud, sensor_origin) -> VoxelMap:
    """Projective TSDF update along every ray plus traversability fusion
    into the endpoint voxel when it is occupied after the update"""
    if not isinstance(cloud, LabeledCloud):
        cloud = LabeledCloud.from_points(list(cloud))
    points = np.asarray(cloud.points, dtype=float).reshape(-1, 3)
    if len(points) == 0:
        return vmap
    origin = sensor_origin.as_array() if isinstance(sensor_origin, Point3) else np.asarray(sensor_origin, float)
    trunc = vmap.truncation
    offsets = points - origin
    lengths = np.linalg.norm(offsets, axis=1)
    keep = lengths > 1e-9
    points, offsets, lengths = points[keep], offsets[keep], lengths[keep]
    trav = np.asarray(cloud.traversability, dtype=float)[keep]
    if len(points) == 0:
        return vmap
    directions = offsets / lengths[:, None]

    step = vmap.voxel_size / 2.0
    n_samples = np.ceil((lengths + trunc) / step).astype(np.int64) + 1
    ray = np.repeat(np.arange(len(points)), n_samples)
    starts = np.cumsum(n_samples) - n_samples
    t = (np.arange(len(ray)) - np.repeat(starts, n_samples)) * step
    t = np.minimum(t, lengths[ray] + trunc)
    indices = vmap.voxel_index(origin + directions[ray] * t[:, None])

    changed = np.ones(len(ray), dtype=bool)
    changed[1:] = np.any(indices[1:] != indices[:-1], axis=1) | (ray[1:] != ray[:-1])
    indices, ray = indices[changed], ray[changed]
    centers = vmap.voxel_center(indices)
    sdf = lengths[ray] - np.einsum('ij,ij->i', centers - origin, directions[ray])
    band = sdf >= -trunc
    indices, sdf = indices[band], np.minimum(sdf[band], trunc)

    keys, inverse = np.unique(pack_indices(indices), return_inverse=True)
    inverse = inverse.reshape(-1)
    sdf_sum = np.bincount(inverse, weights=sdf)
    observations = np.bincount(inverse).astype(float)
    touched = unpack_indices(keys)
    records = vmap.gather(touched)
    weight = records[:, WEIGHT]
    records[:, DISTANCE] = (records[:, DISTANCE] * weight + sdf_sum) / (weight + observations)
    records[:, WEIGHT] = weight + observations
    vmap.scatter(touched, records)

    end_keys, end_inverse = np.unique(pack_indices(vmap.voxel_index(points)), return_inverse=True)
    end_inverse = end_inverse.reshape(-1)
    trav_sum = np.bincount(end_inverse, weights=trav)
    trav_count = np.bincount(end_inverse).astype(float)
    endpoints = unpack_indices(end_keys)
    records = vmap.gather(endpoints)
    occupied = vmap.states_of(records) == VoxelState.OCCUPIED
    tw = records[occupied, TRAV_WEIGHT]
    records[occupied, TRAV] = (records[occupied, TRAV] * tw + trav_sum[occupied]) / (tw + trav_count[occupied])
    records[occupied, TRAV_WEIGHT] = tw + trav_count[occupied]
    vmap.scatter(endpoints[occupied], records[occupied])
    logging.debug(f'Integrated {len(points)} rays touching {len(touched)} voxels')
    return vmap


def voxel_state(vmap: VoxelMap, p: Point3) -> VoxelState:
    record = vmap.lookup(tuple(int(v) for v in vmap.voxel_index(p.as_array())[0]))
    if record is None:
        return VoxelState.UNKNOWN
    return VoxelState(int(vmap.states_of(record[None])[0]))


def _traversal_start(origin, directions, size):
    """Grid traversal state for rays leaving origin along unit directions:
    start voxel, ray length to the next boundary per axis, ray length
    between boundaries per axis and the index step per axis"""
    start = np.asarray(origin, dtype=float).reshape(3) / size
    directions = np.atleast_2d(np.asarray(directions, dtype=float))
    current = np.repeat(np.floor(start).astype(np.int64)[None, :], len(directions), axis=0)
    steps = np.sign(directions).astype(np.int64)
    moving = directions != 0
    safe = np.where(moving, directions, 1.0)
    boundary = np.where(directions > 0, current + 1 - start, current - start)
    t_max = np.where(moving, boundary / safe * size, math.inf)
    t_delta = np.where(moving, size / np.abs(safe), math.inf)
    return current, t_max, t_delta, steps


def raycast(vmap: VoxelMap, origin: Point3, direction, max_range: float):
    """First voxel along the ray that is occupied or unknown, None when every
    voxel up to max_range is free. Exact grid traversal in voxel order."""
    direction = np.asarray(direction, dtype=float).reshape(3)
    norm = np.linalg.norm(direction)
    if abs(norm - 1.0) > 1e-6:
        raise ValueError(f"Ray direction must be a unit vector, got norm {norm}")
    size = vmap.voxel_size
    current, t_max, t_delta, steps = (a[0] for a in _traversal_start(origin.as_array(), direction / norm, size))

    t_entry = 0.0
    while t_entry <= max_range:
        key = tuple(int(v) for v in current)
        record = vmap.lookup(key)
        if record is None or record[WEIGHT] <= 0:
            state = VoxelState.UNKNOWN
        elif abs(record[DISTANCE]) < vmap.occupancy_threshold:
            state = VoxelState.OCCUPIED
        else:
            state = VoxelState.FREE
        if state != VoxelState.FREE:
            trav = float(record[TRAV]) if state == VoxelState.OCCUPIED else None
            center = Point3(*((np.array(key) + 0.5) * size))
            return RaycastHit(key, center, state, trav, t_entry)
        axis = int(np.argmin(t_max))
        t_entry = float(t_max[axis])
        current[axis] += steps[axis]
        t_max[axis] += t_delta[axis]
    return None


def avg_semantic_traversability(vmap: VoxelMap, poly: FootprintPolygon, z_center: float, z_halfspan: float):
    """Mean trav of labelled occupied voxels whose center lies over the
    polygon within the z band; None if there are none"""
    if z_halfspan <= 0:
        raise ValueError(f"z half span must be positive, got {z_halfspan}")
    size = vmap.voxel_size
    minx, miny, maxx, maxy = poly.bounds
    i_range = np.arange(math.floor(minx / size), math.floor(maxx / size) + 1)
    j_range = np.arange(math.floor(miny / size), math.floor(maxy / size) + 1)
    k_lo = math.ceil((z_center - z_halfspan) / size - 0.5)
    k_hi = math.floor((z_center + z_halfspan) / size - 0.5)
    if k_lo > k_hi:
        return None
    ii, jj = np.meshgrid(i_range, j_range, indexing='ij')
    ii, jj = ii.ravel(), jj.ravel()
    inside = poly.contains_xy((ii + 0.5) * size, (jj + 0.5) * size)
    ii, jj = ii[inside], jj[inside]
    if len(ii) == 0:
        return None
    k_range = np.arange(k_lo, k_hi + 1)
    indices = np.stack([
        np.repeat(ii, len(k_range)), np.repeat(jj, len(k_range)), np.tile(k_range, len(ii))
    ], axis=1)
    records = vmap.gather(indices)
    labelled = (vmap.states_of(records) == VoxelState.OCCUPIED) & (records[:, TRAV_WEIGHT] > 0)
    if not np.any(labelled):
        return None
    return float(records[labelled, TRAV].mean())


def frustum_voxels(vmap: VoxelMap, frustum: SensorFrustum, stride: int = 1) -> np.ndarray:
    """Indices of voxel centers inside the yaw-aligned frustum volume"""
    size = vmap.voxel_size
    apex = frustum.apex.as_array()
    reach = frustum.max_range
    lo = np.floor((apex - reach) / size).astype(np.int64)
    hi = np.floor((apex + reach) / size).astype(np.int64)
    axes = [np.arange(-(-lo[a] // stride) * stride, hi[a] + 1, stride) for a in range(3)]
    indices = np.stack(np.meshgrid(*axes, indexing='ij'), axis=-1).reshape(-1, 3)
    rel = vmap.voxel_center(indices) - apex
    dist = np.linalg.norm(rel, axis=1)
    azimuth = np.arctan2(rel[:, 1], rel[:, 0]) - frustum.apex.psi
    azimuth = (azimuth + np.pi) % (2 * np.pi) - np.pi
    elevation = np.arctan2(rel[:, 2], np.hypot(rel[:, 0], rel[:, 1]))
    inside = ((dist > 0) & (dist <= reach)
              & (np.abs(azimuth) <= frustum.hfov / 2) & (np.abs(elevation) <= frustum.vfov / 2))
    return indices[inside]


def visible_mask(vmap: VoxelMap, apex, targets) -> np.ndarray:
    """True where the segment from apex to the target voxel center crosses no
    occupied voxel before the target; walks the same grid traversal as
    raycast for every target at once"""
    apex = np.asarray(apex, dtype=float).reshape(3)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1, 3)
    if len(targets) == 0:
        return np.zeros(0, dtype=bool)
    apex_index = vmap.voxel_index(apex)[0]
    lo = np.minimum(targets.min(axis=0), apex_index)
    hi = np.maximum(targets.max(axis=0), apex_index) + 1
    dense = vmap.dense_states(lo, hi)
    rel = vmap.voxel_center(targets) - apex
    dist = np.linalg.norm(rel, axis=1)
    unit = rel / np.where(dist > 0, dist, 1.0)[:, None]
    current, t_max, t_delta, steps = _traversal_start(apex, unit, vmap.voxel_size)

    visible = np.ones(len(targets), dtype=bool)
    active = np.flatnonzero(~np.all(current == targets, axis=1))
    while len(active):
        local = np.clip(current[active] - lo, 0, np.array(dense.shape) - 1)
        blocked = dense[local[:, 0], local[:, 1], local[:, 2]] == VoxelState.OCCUPIED
        visible[active[blocked]] = False
        active = active[~blocked]
        axis = np.argmin(t_max[active], axis=1)
        t_entry = t_max[active, axis]
        current[active, axis] += steps[active, axis]
        t_max[active, axis] += t_delta[active, axis]
        # past the center without entering the target voxel only through round-off
        reached = np.all(current[active] == targets[active], axis=1) | (t_entry > dist[active])
        active = active[~reached]
    return visible


def frustum_census(vmap: VoxelMap, frustum: SensorFrustum, stride: int = 1) -> CensusCounts:
    """Count visible unknown, free and occupied voxels inside the frustum"""
    if frustum.max_range < vmap.voxel_size:
        return CensusCounts(0, 0, 0)
    indices = frustum_voxels(vmap, frustum, stride)
    if len(indices) == 0:
        return CensusCounts(0, 0, 0)
    visible = visible_mask(vmap, frustum.apex.as_array(), indices)
    states = vmap.states(indices[visible])
    return CensusCounts(int(np.sum(states == VoxelState.UNKNOWN)),
                        int(np.sum(states == VoxelState.FREE)),
                        int(np.sum(states == VoxelState.OCCUPIED)))


def volumetric_gain(counts, params: GainParams = None) -> float:
    """log((w_u e^u + w_f e^f) / (w_o e^o)) on counts normalized by their total"""
    params = params or GainParams()
    counts = CensusCounts(*counts)
    if counts.total == 0:
        return 0.0
    u, f, o = (c / counts.total for c in counts)
    return math.log((params.w_u * math.exp(u) + params.w_f * math.exp(f)) / (params.w_o * math.exp(o)))


def snapshot_size(vmap: VoxelMap) -> int:
    return SNAPSHOT_HEADER.size + len(vmap.blocks) * (BLOCK_INDEX.size + 16 * vmap.block_size ** 3)


def save_snapshot(vmap: VoxelMap, path):
    """Binary snapshot, blocks in ascending index order, voxel records
    (distance, weight, trav, trav_weight) as little-endian f32"""
    path = pathlib.Path(path)
    with path.open('wb') as fh:
        fh.write(SNAPSHOT_HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, vmap.voxel_size,
                                      vmap.block_size, len(vmap.blocks)))
        for key in sorted(vmap.blocks):
            fh.write(BLOCK_INDEX.pack(*key))
            fh.write(vmap.blocks[key].data.astype('<f4').tobytes())
    return path


def load_snapshot(path, truncation=None) -> VoxelMap:
    data = pathlib.Path(path).read_bytes()
    if len(data) < SNAPSHOT_HEADER.size:
        raise ValueError(f"Snapshot {path} is shorter than its header")
    magic, version, voxel_size, block_size, count = SNAPSHOT_HEADER.unpack_from(data)
    if magic != SNAPSHOT_MAGIC:
        raise ValueError(f"Snapshot {path} has bad magic {magic!r}")
    if version != SNAPSHOT_VERSION:
        raise ValueError(f"Unsupported snapshot version {version}")
    params = VoxelParams(voxel_size=voxel_size, block_size=block_size,
                         truncation=truncation or max(VoxelParams().truncation, voxel_size))
    vmap = VoxelMap(params)
    record_bytes = 16 * block_size ** 3
    offset = SNAPSHOT_HEADER.size
    for _ in range(count):
        if offset + BLOCK_INDEX.size + record_bytes > len(data):
            raise ValueError(f"Snapshot {path} is truncated")
        key = BLOCK_INDEX.unpack_from(data, offset)
        offset += BLOCK_INDEX.size
        block = np.frombuffer(data, dtype='<f4', count=4 * block_size ** 3, offset=offset)
        vmap.blocks[key] = VoxelBlock(key, block.reshape(block_size, block_size, block_size, 4).astype(float))
        offset += record_bytes
    return vmap
