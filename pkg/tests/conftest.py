import pathlib

import numpy as np
import pytest

from tandem.config import GeometricRiskParams, VoxelParams
from tandem.geometry import RobotState
from tandem.mapping import elevation
from tandem.mapping.voxel import VoxelMap
from tandem.planning.graph import ExplorationGraph, GraphNode

FIXTURES = pathlib.Path(__file__).parent / 'fixtures'


def read_hex_fixture(name) -> bytes:
    return bytes.fromhex(''.join((FIXTURES / name).read_text().split()))


def flat_grid(size=40, resolution=0.1, height=0.0, origin=(0.0, 0.0)):
    """Fully observed grid of constant elevation with features and trav_g"""
    grid = elevation.TraversabilityGrid.from_elevation(np.full((size, size), height), resolution, origin)
    elevation.compute_features(grid)
    elevation.risk_and_traversability(grid, GeometricRiskParams())
    return grid


def index_box(lo, hi):
    """(N, 3) voxel indices of the half-open box [lo, hi)"""
    axes = [np.arange(lo[a], hi[a]) for a in range(3)]
    return np.stack(np.meshgrid(*axes, indexing='ij'), axis=-1).reshape(-1, 3)


def mark_free(vmap: VoxelMap, lo, hi):
    indices = index_box(lo, hi)
    vmap.scatter(indices, np.tile([vmap.truncation, 1.0, 0.0, 0.0], (len(indices), 1)))
    return vmap


def mark_occupied(vmap: VoxelMap, lo, hi, trav=None):
    indices = index_box(lo, hi)
    record = [0.0, 1.0, 0.0, 0.0] if trav is None else [0.0, 1.0, trav, 1.0]
    vmap.scatter(indices, np.tile(record, (len(indices), 1)))
    return vmap


def free_room(lo=(-30, -30, -5), hi=(30, 30, 15), voxel_size=0.1):
    return mark_free(VoxelMap(VoxelParams(voxel_size=voxel_size)), lo, hi)


def graph_from(positions, edges, level='local', frontiers=()):
    """Graph with node i at positions[i] and Euclidean edge lengths unless given"""
    graph = ExplorationGraph(level)
    for i, p in enumerate(positions):
        graph.add_node(GraphNode(i, RobotState(*p), is_frontier=i in frontiers))
    for edge in edges:
        graph.add_edge(*edge)
    return graph


def random_connected_graph(rng, n_nodes, extra_edges=None, frontier_share=0.3):
    """Random geometric graph: a random spanning tree plus extra chords"""
    positions = rng.uniform(-5, 5, (n_nodes, 3))
    edges = {(int(rng.integers(0, i)), i) for i in range(1, n_nodes)}
    for _ in range(extra_edges if extra_edges is not None else n_nodes):
        a, b = sorted(int(v) for v in rng.choice(n_nodes, 2, replace=False))
        edges.add((a, b))
    frontiers = {i for i in range(1, n_nodes) if rng.random() < frontier_share}
    return graph_from(positions, sorted(edges), frontiers=frontiers)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
