"""
    Three-level navigation graph: a dense local roadmap sampled in the map,
    a pathways graph made of the Dijkstra paths to every frontier, and a
    sparse candidate graph keeping one path per frontier cluster.
    Usage:
    ```
    from tandem.planning import hierarchy
    local = hierarchy.sample_local_graph(vmap, grid, root, GraphParams(), seed=7)
    hierarchy.mark_frontiers(local, vmap, FrustumParams(), GainParams())
    levels = hierarchy.build_hierarchy(local, GraphParams())
    levels.candidates
    ```
"""
import dataclasses
import enum
import heapq
import logging
import math
import typing

import networkx as nx
import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from ..config import FrustumParams, GainParams, GraphParams
from ..geometry import Point3, RobotState
from ..mapping import voxel
from ..mapping.voxel import VoxelState
from .graph import ExplorationGraph, GraphNode, Path

GROUND = 'ground'
AERIAL = 'aerial'


class SamplingStarved(RuntimeError):
    """Fewer collision-free nodes than the configured minimum"""


class CollisionChecker:
    """Collision queries against a dense snapshot of the map over a region.

    Ground mode (a terrain grid is given) follows the terrain: a sample sits
    on the grid elevation, is blocked over unknown terrain, by a support jump
    above the climb limit, or by occupied voxels in the body column between
    the climb limit and the body height within r_safe. Aerial mode checks a
    clearance sphere of r_safe in 3D.
    """

    def __init__(self, vmap: voxel.VoxelMap, lo_point, hi_point, r_safe, grid=None,
                 climb_limit=0.45, body_height=0.8):
        self.vmap = vmap
        self.voxel_size = vmap.voxel_size
        self.r_safe = r_safe
        self.grid = grid
        self.climb_limit = climb_limit
        self.body_height = body_height
        margin = r_safe + 2 * self.voxel_size + (body_height if grid is not None else 0.0)
        self.lo = vmap.voxel_index(np.asarray(lo_point, float) - margin)[0]
        self.hi = vmap.voxel_index(np.asarray(hi_point, float) + margin)[0] + 1
        self.dense = vmap.dense_states(self.lo, self.hi)
        occupied = self.dense == VoxelState.OCCUPIED
        occupied_index = np.argwhere(occupied) + self.lo
        self.tree = cKDTree(vmap.voxel_center(occupied_index)) if len(occupied_index) else None
        if grid is not None:
            self.occupied_below = np.concatenate([
                np.zeros(occupied.shape[:2] + (1,), dtype=np.int32),
                np.cumsum(occupied, axis=2, dtype=np.int32),
            ], axis=2)
            reach = int(math.ceil(r_safe / self.voxel_size)) + 1
            di, dj = np.meshgrid(np.arange(-reach, reach + 1), np.arange(-reach, reach + 1), indexing='ij')
            self.column_offsets = np.stack([di.ravel(), dj.ravel()], axis=1)
        reach = int(math.ceil(r_safe / self.voxel_size)) + 1
        axes = np.arange(-reach, reach + 1)
        self.sphere_offsets = np.stack(np.meshgrid(axes, axes, axes, indexing='ij'), axis=-1).reshape(-1, 3)

    @property
    def is_ground(self):
        return self.grid is not None

    def states_at(self, points) -> np.ndarray:
        """Voxel states from the snapshot, UNKNOWN outside it"""
        local = self.vmap.voxel_index(points) - self.lo
        return self._dense_lookup(local)

    def _dense_lookup(self, local):
        shape = np.array(self.dense.shape)
        inside = np.all((local >= 0) & (local < shape), axis=-1)
        states = np.full(local.shape[:-1], VoxelState.UNKNOWN, dtype=np.int8)
        hit = local[inside]
        states[inside] = self.dense[hit[..., 0], hit[..., 1], hit[..., 2]]
        return states

    def occupied_near(self, points, radius=None) -> np.ndarray:
        radius = self.r_safe if radius is None else radius
        points = np.asarray(points, float).reshape(-1, 3)
        if self.tree is None or len(points) == 0:
            return np.zeros(len(points), dtype=bool)
        dist, _ = self.tree.query(points, k=1, distance_upper_bound=radius * (1 + 1e-9) + 1e-12)
        return dist <= radius

    def unknown_near(self, points, radius=None) -> np.ndarray:
        radius = self.r_safe if radius is None else radius
        points = np.asarray(points, float).reshape(-1, 3)
        base = self.vmap.voxel_index(points)
        cells = base[:, None, :] + self.sphere_offsets[None, :, :]
        dist = np.linalg.norm(self.vmap.voxel_center(cells.reshape(-1, 3)).reshape(cells.shape)
                              - points[:, None, :], axis=2)
        states = self._dense_lookup(cells - self.lo)
        return np.any((states == VoxelState.UNKNOWN) & (dist <= radius), axis=1)

    def support(self, xy) -> np.ndarray:
        xy = np.asarray(xy, float).reshape(-1, 2)
        return self.grid.elevation_at(xy[:, 0], xy[:, 1])

    def column_blocked(self, xy, support) -> np.ndarray:
        """Occupied voxels within r_safe horizontally between support + climb
        limit and support + body height"""
        xy = np.asarray(xy, float).reshape(-1, 2)
        size = self.voxel_size
        base = np.floor(xy / size).astype(np.int64)
        cols = base[:, None, :] + self.column_offsets[None, :, :]
        centers = (cols + 0.5) * size
        near = np.linalg.norm(centers - xy[:, None, :], axis=2) <= self.r_safe
        k_lo = np.ceil((support + self.climb_limit) / size - 0.5).astype(np.int64) - self.lo[2]
        k_hi = np.floor((support + self.body_height) / size - 0.5).astype(np.int64) - self.lo[2] + 1
        depth = self.occupied_below.shape[2] - 1
        k_lo, k_hi = np.clip(k_lo, 0, depth), np.clip(k_hi, 0, depth)
        local = cols - self.lo[:2]
        shape = np.array(self.occupied_below.shape[:2])
        inside = np.all((local >= 0) & (local < shape), axis=2)
        li = np.clip(local[..., 0], 0, shape[0] - 1)
        lj = np.clip(local[..., 1], 0, shape[1] - 1)
        counts = (self.occupied_below[li, lj, k_hi[:, None]] - self.occupied_below[li, lj, k_lo[:, None]])
        return np.any(near & inside & (counts > 0), axis=1)

    def node_free(self, positions) -> np.ndarray:
        positions = np.asarray(positions, float).reshape(-1, 3)
        if len(positions) == 0:
            return np.zeros(0, dtype=bool)
        if self.is_ground:
            support = self.support(positions[:, :2])
            known = ~np.isnan(support)
            free = known.copy()
            free[known] = ~self.column_blocked(positions[known, :2], support[known])
            free &= self.states_at(positions) != VoxelState.OCCUPIED
            return free
        free = self.states_at(positions) == VoxelState.FREE
        free[free] = ~self.occupied_near(positions[free])
        free[free] = ~self.unknown_near(positions[free])
        return free

    def edge_free(self, a, b, allow_unknown=False) -> bool:
        a, b = np.asarray(a, float), np.asarray(b, float)
        step = self.voxel_size / 2.0
        if self.is_ground:
            span = float(np.linalg.norm(b[:2] - a[:2]))
            count = max(int(math.ceil(span / step)), 1)
            xy = a[:2] + np.linspace(0.0, 1.0, count + 1)[:, None] * (b[:2] - a[:2])
            support = self.support(xy)
            if np.any(np.isnan(support)):
                return False
            if np.any(np.abs(np.diff(support)) > self.climb_limit):
                return False
            return not np.any(self.column_blocked(xy, support))
        length = float(np.linalg.norm(b - a))
        count = max(int(math.ceil(length / step)), 1)
        samples = a + np.linspace(0.0, 1.0, count + 1)[:, None] * (b - a)
        if np.any(self.occupied_near(samples)):
            return False
        if allow_unknown or length == 0.0:
            return True
        hit = voxel.raycast(self.vmap, Point3.from_array(a), (b - a) / length, length)
        return hit is None or hit.distance >= length


def edge_collision_free(vmap, a: Point3, b: Point3, r_safe, grid=None, climb_limit=0.45,
                        body_height=0.8, allow_unknown=False) -> bool:
    """Single edge query; pass the terrain grid for the ground predicate.
    allow_unknown is for the terminal segment of a shared candidate path"""
    pa, pb = a.as_array(), b.as_array()
    checker = CollisionChecker(vmap, np.minimum(pa, pb), np.maximum(pa, pb), r_safe, grid,
                               climb_limit, body_height)
    return checker.edge_free(pa, pb, allow_unknown)


def _sample_positions(rng, root: RobotState, params: GraphParams, grid):
    half = np.asarray(params.window) / 2.0
    center = root.as_array()
    positions = center + rng.uniform(-half, half, size=(params.n_samples, 3))
    if grid is not None:
        positions[:, 2] = grid.elevation_at(positions[:, 0], positions[:, 1]) + params.z_off
    return positions


def sample_local_graph(vmap, grid, root: RobotState, params: GraphParams, seed=0,
                       agent=GROUND, body_height=0.8) -> ExplorationGraph:
    """Rejection-sample N_s nodes in the window around root, connect each to
    its k nearest neighbours with collision-free edges and keep the root's
    component. Node 0 is the root; sampled headings point away from it."""
    terrain = grid if agent == GROUND else None
    rng = np.random.default_rng(seed)
    positions = _sample_positions(rng, root, params, terrain)
    positions = positions[~np.isnan(positions).any(axis=1)]

    half = np.asarray(params.window) / 2.0
    checker = CollisionChecker(vmap, root.as_array() - half, root.as_array() + half, params.r_safe,
                               terrain, params.climb_limit, body_height)
    survivors = positions[checker.node_free(positions)]
    logging.debug(f'{len(survivors)} of {params.n_samples} samples are collision free')

    graph = ExplorationGraph('local')
    graph.add_node(GraphNode(0, root))
    for index, p in enumerate(survivors, start=1):
        psi = math.atan2(p[1] - root.y, p[0] - root.x)
        graph.add_node(GraphNode(index, RobotState(float(p[0]), float(p[1]), float(p[2]), psi)))

    points = np.vstack([root.as_array()[None, :], survivors])
    if len(points) > 1:
        tree = cKDTree(points)
        _, neighbours = tree.query(points, k=min(params.k + 1, len(points)))
        pairs = {(min(i, int(j)), max(i, int(j))) for i, row in enumerate(neighbours) for j in row[1:]}
        for i, j in sorted(pairs):
            if checker.edge_free(points[i], points[j]):
                graph.add_edge(i, j)

    keep = graph.component_of(0)
    if len(keep) < len(graph):
        graph = graph.induced(keep, 'local')
    if len(graph) < params.min_nodes:
        raise SamplingStarved(
            f"Only {len(graph)} connected nodes around ({root.x:.2f}, {root.y:.2f}, {root.z:.2f}), "
            f"need {params.min_nodes}"
        )
    logging.info(f'Sampled {graph}')
    return graph


def sample_with_enlargement(vmap, grid, root, params: GraphParams, seed=0, agent=GROUND,
                            body_height=0.8) -> ExplorationGraph:
    """Retry a starved sampling with the window scaled by enlarge_factor"""
    current = params
    for attempt in range(params.max_enlargements + 1):
        try:
            return sample_local_graph(vmap, grid, root, current, seed + attempt, agent, body_height)
        except SamplingStarved as _e:
            if attempt == params.max_enlargements:
                raise
            window = tuple(w * params.enlarge_factor for w in current.window)
            logging.warning(f'{_e}; enlarging window to {window}')
            current = dataclasses.replace(current, window=window)


def node_gain(vmap, pose: RobotState, frustum: FrustumParams, gain: GainParams) -> float:
    cone = voxel.SensorFrustum(pose, frustum.hfov, frustum.vfov, frustum.max_range)
    return voxel.volumetric_gain(voxel.frustum_census(vmap, cone, frustum.census_stride), gain)


def mark_frontiers(graph: ExplorationGraph, vmap, frustum: FrustumParams, gain: GainParams,
                   phi_min=None) -> ExplorationGraph:
    """Evaluate the volumetric gain at every node, frontier when above phi_min"""
    phi_min = gain.phi_min if phi_min is None else phi_min
    for node in graph.sorted_nodes():
        node.gain = node_gain(vmap, node.pose, frustum, gain)
        node.is_frontier = node.gain > phi_min
    logging.info(f'{len(graph.frontiers())} frontiers among {len(graph)} {graph.level} nodes')
    return graph


def dijkstra(graph: ExplorationGraph, root):
    """Distances and predecessors from root; equal-distance ties go to the
    smaller predecessor id"""
    if root not in graph:
        raise ValueError(f"Root {root} is not in the {graph.level} graph")
    dist = {root: 0.0}
    pred = {root: None}
    done = set()
    heap = [(0.0, root)]
    while heap:
        d, u = heapq.heappop(heap)
        if u in done:
            continue
        done.add(u)
        for v in graph.neighbors(u):
            candidate = d + graph.edge_length(u, v)
            known = dist.get(v, math.inf)
            if candidate < known - 1e-12:
                dist[v], pred[v] = candidate, u
                heapq.heappush(heap, (candidate, v))
            elif abs(candidate - known) <= 1e-12 and v not in done and u < pred[v]:
                pred[v] = u
    return dist, pred


def shortest_paths(graph: ExplorationGraph, root=0) -> typing.Dict[int, Path]:
    """Path from root to every reachable frontier"""
    dist, pred = dijkstra(graph, root)
    paths = {}
    for node in graph.frontiers():
        if node.id == root:
            continue
        if node.id not in dist:
            logging.debug(f'Frontier {node.id} is unreachable from {root}')
            continue
        ids = [node.id]
        while pred[ids[-1]] is not None:
            ids.append(pred[ids[-1]])
        paths[node.id] = Path(tuple(reversed(ids)), dist[node.id])
    return paths


def _union_of(paths):
    return {node_id for path in paths for node_id in path.node_ids}


def build_pathways_graph(local: ExplorationGraph, paths) -> ExplorationGraph:
    """Nodes of all Dijkstra paths with every local edge among them"""
    paths = list(paths.values()) if isinstance(paths, dict) else list(paths)
    if not paths:
        raise ValueError("Pathways graph needs at least one path")
    return local.induced(_union_of(paths), 'pathways')


def dtw_distance(a, b) -> float:
    """Classic DTW over 3D positions, Euclidean local cost, match/insert/delete steps"""
    a = np.asarray(a, float).reshape(-1, 3)
    b = np.asarray(b, float).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("DTW needs two non-empty sequences")
    cost = cdist(a, b)
    table = np.full((len(a) + 1, len(b) + 1), np.inf)
    table[0, 0] = 0.0
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            table[i, j] = cost[i - 1, j - 1] + min(table[i - 1, j], table[i, j - 1], table[i - 1, j - 1])
    return float(table[-1, -1])


def cluster_frontiers(nodes, rho) -> typing.List[typing.List[int]]:
    """Single-linkage clusters of frontier ids, each sorted, ordered by smallest id"""
    nodes = sorted(nodes, key=lambda n: n.id)
    if not nodes:
        return []
    linkage = nx.Graph()
    linkage.add_nodes_from(n.id for n in nodes)
    tree = cKDTree(np.array([n.position for n in nodes]))
    for i, j in tree.query_pairs(rho):
        linkage.add_edge(nodes[i].id, nodes[j].id)
    return sorted(sorted(c) for c in nx.connected_components(linkage))


def _path_order(path: Path):
    return path.length, path.terminal


def select_candidate_paths(paths, clusters, dtw_min, graph: ExplorationGraph) -> typing.List[Path]:
    """Shortest path per cluster, then greedily drop paths within dtw_min of
    one already kept, in ascending length"""
    paths = dict(paths)
    per_cluster = []
    for cluster in clusters:
        members = [paths[i] for i in cluster if i in paths]
        if members:
            per_cluster.append(min(members, key=_path_order))
    kept = []
    for path in sorted(per_cluster, key=_path_order):
        positions = path.positions(graph)
        if all(dtw_distance(positions, other.positions(graph)) > dtw_min for other in kept):
            kept.append(path)
        else:
            logging.debug(f'Dropped candidate to {path.terminal}, too close to a kept path')
    return kept


def build_candidate_graph(pathways: ExplorationGraph, candidates) -> ExplorationGraph:
    return pathways.induced(_union_of(candidates), 'candidate')


class GraphHierarchy(typing.NamedTuple):
    local: ExplorationGraph
    pathways: ExplorationGraph
    candidate: ExplorationGraph
    candidates: typing.List[Path]


def build_hierarchy(local: ExplorationGraph, params: GraphParams, root=0) -> GraphHierarchy:
    """Sparsify a frontier-marked local graph down to the candidate graph.
    Dijkstra runs again on the pathways graph and candidate selection works
    on those paths."""
    seed_paths = shortest_paths(local, root)
    if not seed_paths:
        empty = ExplorationGraph('pathways')
        return GraphHierarchy(local, empty, ExplorationGraph('candidate'), [])
    pathways = build_pathways_graph(local, seed_paths)
    paths = shortest_paths(pathways, root)
    clusters = cluster_frontiers([pathways.node(i) for i in paths], params.rho)
    candidates = select_candidate_paths(paths, clusters, params.dtw_min, pathways)
    candidate = build_candidate_graph(pathways, candidates)
    logging.info(f'Hierarchy {len(local)} > {len(pathways)} > {len(candidate)} nodes, '
                 f'{len(candidates)} candidate paths')
    return GraphHierarchy(local, pathways, candidate, candidates)


class FrontierStatus(enum.Enum):
    OPEN = 'open'
    CONSUMED = 'consumed'
    SHARED = 'shared'


@dataclasses.dataclass
class FrontierEntry:
    key: int
    pose: RobotState
    gain: float
    status: FrontierStatus = FrontierStatus.OPEN
    # last candidate path to it scored below C_deploy
    low_confidence: bool = False

    @property
    def position(self):
        return self.pose.as_array()


class FrontierRegistry:
    """Global frontiers in the world frame, kept across planning cycles"""

    def __init__(self, rho=2.0):
        self.rho = rho
        self.entries = {}
        self.trail = []
        self._next_key = 0

    def __len__(self):
        return len(self.entries)

    def __repr__(self):
        return f'{self.__class__.__name__}:{len(self.open_entries())} open of {len(self)}'

    def _near(self, position, statuses):
        return [
            e for e in self.entries.values()
            if e.status in statuses and np.linalg.norm(e.position - position) <= self.rho
        ]

    def add(self, pose: RobotState, gain: float):
        """New open entry unless a consumed frontier lies within rho; an open
        entry within rho is refreshed instead"""
        position = pose.as_array()
        if self._near(position, {FrontierStatus.CONSUMED}):
            return None
        nearby = self._near(position, {FrontierStatus.OPEN, FrontierStatus.SHARED})
        if nearby:
            closest = min(nearby, key=lambda e: (np.linalg.norm(e.position - position), e.key))
            if closest.status == FrontierStatus.OPEN:
                closest.pose, closest.gain = pose, gain
            return closest
        entry = FrontierEntry(self._next_key, pose, gain)
        self.entries[entry.key] = entry
        self._next_key += 1
        return entry

    def entries_with(self, status):
        return [self.entries[k] for k in sorted(self.entries) if self.entries[k].status == status]

    def open_entries(self):
        return self.entries_with(FrontierStatus.OPEN)

    def consume(self, key):
        self.entries[key].status = FrontierStatus.CONSUMED

    def mark_shared(self, position):
        """Flag the open entries within rho of a handed-over frontier"""
        for entry in self._near(np.asarray(position, float), {FrontierStatus.OPEN}):
            entry.status = FrontierStatus.SHARED

    def mark_confidence(self, position, low: bool):
        for entry in self._near(np.asarray(position, float), {FrontierStatus.OPEN}):
            entry.low_confidence = low

    def halted_entries(self):
        """Open entries the ground agent left behind for low confidence"""
        return [e for e in self.open_entries() if e.low_confidence]


def update_frontier_registry(reg: FrontierRegistry, graph: ExplorationGraph, robot_pose: RobotState,
                             vmap=None, frustum: FrustumParams = None, gain: GainParams = None):
    """Add the graph's frontiers and consume open ones that were visited or
    whose gain re-evaluates at or below phi_min"""
    reg.trail.append(robot_pose.as_array())
    for node in graph.frontiers():
        reg.add(node.pose, node.gain)
    trail = np.array(reg.trail)
    for entry in reg.open_entries():
        if np.min(np.linalg.norm(trail - entry.position, axis=1)) <= reg.rho:
            reg.consume(entry.key)
            continue
        if vmap is not None:
            gain = gain or GainParams()
            entry.gain = node_gain(vmap, entry.pose, frustum or FrustumParams(), gain)
            if entry.gain <= gain.phi_min:
                logging.debug(f'Frontier {entry.key} collapsed to gain {entry.gain:.3f}')
                reg.consume(entry.key)
    return reg
