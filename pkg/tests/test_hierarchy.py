import functools
import math

import networkx as nx
import numpy as np
import pytest

from conftest import flat_grid, free_room, graph_from, mark_occupied, random_connected_graph
from tandem.config import FrustumParams, GainParams, GraphParams, VoxelParams
from tandem.geometry import Point3, RobotState
from tandem.mapping.elevation import TraversabilityGrid
from tandem.mapping.voxel import VoxelMap
from tandem.planning import hierarchy
from tandem.planning.graph import Path
from tandem.planning.hierarchy import FrontierRegistry, FrontierStatus, SamplingStarved

SMALL = GraphParams(n_samples=50, k=5, window=(4.0, 4.0, 2.0), min_nodes=10)
ROOT = RobotState(0.05, 0.05, 0.55)
FRUSTUM = FrustumParams(max_range=2.0)


def _room():
    return free_room(lo=(-30, -30, -10), hi=(30, 30, 20))


def _crossing(graph, x_lo, x_hi):
    for a, b, _ in graph.sorted_edges():
        xa, xb = graph.node(a).pose.x, graph.node(b).pose.x
        if min(xa, xb) < x_lo and max(xa, xb) > x_hi:
            return True
    return False


class TestSampling:

    def test_open_space(self):
        graph = hierarchy.sample_local_graph(_room(), None, ROOT, SMALL, seed=3, agent=hierarchy.AERIAL)
        assert 0 in graph
        assert SMALL.min_nodes <= len(graph) <= SMALL.n_samples + 1
        assert graph.component_of(0) == set(graph.node_ids())

    def test_edges_join_nearest_neighbours(self):
        graph = hierarchy.sample_local_graph(_room(), None, ROOT, SMALL, seed=5, agent=hierarchy.AERIAL)
        ids = graph.node_ids()
        points = np.array([graph.node(i).position for i in ids])
        dist = np.linalg.norm(points[:, None, :] - points[None, :, :], axis=2)
        row = {node_id: r for r, node_id in enumerate(ids)}
        for a, b, length in graph.sorted_edges():
            assert length == pytest.approx(dist[row[a], row[b]])
            # rank 0 is the node itself
            radius_a = np.sort(dist[row[a]])[min(SMALL.k, len(ids) - 1)]
            radius_b = np.sort(dist[row[b]])[min(SMALL.k, len(ids) - 1)]
            assert dist[row[a], row[b]] <= max(radius_a, radius_b) + 1e-9

    def test_headings_point_away_from_root(self):
        graph = hierarchy.sample_local_graph(_room(), None, ROOT, SMALL, seed=5, agent=hierarchy.AERIAL)
        for node in graph.sorted_nodes()[1:]:
            expected = math.atan2(node.pose.y - ROOT.y, node.pose.x - ROOT.x)
            assert math.cos(node.pose.psi - expected) == pytest.approx(1.0)

    def test_boxed_in_root_starves(self):
        vmap = mark_occupied(VoxelMap(VoxelParams()), (-30, -30, -10), (30, 30, 20))
        with pytest.raises(SamplingStarved):
            hierarchy.sample_local_graph(vmap, None, ROOT, SMALL, agent=hierarchy.AERIAL)

    def test_enlargement_gives_up(self):
        vmap = mark_occupied(VoxelMap(VoxelParams()), (-30, -30, -10), (30, 30, 20))
        params = GraphParams(n_samples=20, k=5, window=(1.0, 1.0, 1.0), min_nodes=10, max_enlargements=1)
        with pytest.raises(SamplingStarved):
            hierarchy.sample_with_enlargement(vmap, None, ROOT, params, agent=hierarchy.AERIAL)

    def test_wall_splits_the_window(self):
        vmap = mark_occupied(_room(), (10, -30, -10), (12, 30, 20))
        graph = hierarchy.sample_local_graph(vmap, None, ROOT, SMALL, seed=7, agent=hierarchy.AERIAL)
        assert not _crossing(graph, 1.0, 1.2)
        assert all(node.pose.x < 1.0 for node in graph.sorted_nodes())

    def test_ground_nodes_follow_terrain(self):
        grid = flat_grid(size=80, height=0.2, origin=(-4.0, -4.0))
        params = GraphParams(n_samples=60, k=5, window=(4.0, 4.0, 2.0), min_nodes=10)
        graph = hierarchy.sample_local_graph(VoxelMap(VoxelParams()), grid, RobotState(0.0, 0.0, 0.5), params,
                                             seed=2)
        for node in graph.sorted_nodes()[1:]:
            assert node.pose.z == pytest.approx(0.2 + params.z_off)


class TestEdgeCollision:

    def test_zero_length_edge(self):
        p = Point3(0.05, 0.05, 0.55)
        assert hierarchy.edge_collision_free(_room(), p, p, 0.4)

    def test_through_wall(self):
        vmap = mark_occupied(_room(), (10, -30, -10), (12, 30, 20))
        assert not hierarchy.edge_collision_free(vmap, Point3(0.5, 0.0, 0.5), Point3(1.8, 0.0, 0.5), 0.4)

    def test_grazing_beyond_safety_radius(self):
        vmap = mark_occupied(_room(), (10, -30, -10), (12, 30, 20))
        assert hierarchy.edge_collision_free(vmap, Point3(0.45, -1.0, 0.5), Point3(0.45, 1.0, 0.5), 0.4)

    def test_grazing_inside_safety_radius(self):
        vmap = mark_occupied(_room(), (10, -30, -10), (12, 30, 20))
        assert not hierarchy.edge_collision_free(vmap, Point3(0.75, -1.0, 0.5), Point3(0.75, 1.0, 0.5), 0.4)

    def test_unknown_space_blocks_unless_allowed(self):
        vmap = free_room(lo=(-30, -30, -10), hi=(5, 30, 20))
        a, b = Point3(-1.0, 0.0, 0.5), Point3(2.0, 0.0, 0.5)
        assert not hierarchy.edge_collision_free(vmap, a, b, 0.2)
        assert hierarchy.edge_collision_free(vmap, a, b, 0.2, allow_unknown=True)


class TestGroundPredicate:
    vmap = VoxelMap(VoxelParams())

    def test_flat_terrain(self):
        grid = flat_grid(size=40)
        assert hierarchy.edge_collision_free(self.vmap, Point3(0.5, 0.5, 0.3), Point3(3.5, 0.5, 0.3), 0.4, grid)

    def test_step_above_climb_limit(self):
        heights = np.zeros((40, 40))
        heights[20:, :] = 0.6
        grid = TraversabilityGrid.from_elevation(heights, 0.1)
        assert not hierarchy.edge_collision_free(self.vmap, Point3(0.5, 1.0, 0.3), Point3(3.5, 1.0, 0.3), 0.4,
                                                 grid)

    def test_unknown_terrain(self):
        heights = np.zeros((40, 40))
        heights[20:, :] = np.nan
        grid = TraversabilityGrid.from_elevation(heights, 0.1)
        assert not hierarchy.edge_collision_free(self.vmap, Point3(0.5, 1.0, 0.3), Point3(3.5, 1.0, 0.3), 0.4,
                                                 grid)

    def test_obstacle_in_body_column(self):
        grid = flat_grid(size=40)
        vmap = mark_occupied(VoxelMap(VoxelParams()), (20, 0, 5), (22, 40, 7))
        assert not hierarchy.edge_collision_free(vmap, Point3(0.5, 2.0, 0.3), Point3(3.5, 2.0, 0.3), 0.4, grid)

    def test_low_clutter_is_climbable(self):
        grid = flat_grid(size=40)
        vmap = mark_occupied(VoxelMap(VoxelParams()), (20, 0, 0), (22, 40, 4))
        assert hierarchy.edge_collision_free(vmap, Point3(0.5, 2.0, 0.3), Point3(3.5, 2.0, 0.3), 0.4, grid)


class TestFrontiers:
    apex = (0.05, 0.05, 0.05)

    def test_known_free_room_has_no_frontier(self):
        vmap = free_room(lo=(-25, -25, -25), hi=(25, 25, 25))
        graph = hierarchy.mark_frontiers(graph_from([self.apex], []), vmap, FRUSTUM, GainParams())
        assert graph.node(0).gain == pytest.approx(math.log((1.0 + 0.1 * math.e) / 0.5))
        assert graph.frontiers() == []

    def test_unknown_space_is_frontier(self):
        graph = hierarchy.mark_frontiers(graph_from([self.apex], []), VoxelMap(VoxelParams()), FRUSTUM,
                                         GainParams())
        assert graph.node(0).gain == pytest.approx(math.log((math.e + 0.1) / 0.5))
        assert [n.id for n in graph.frontiers()] == [0]

    def test_infinite_threshold(self):
        graph = hierarchy.mark_frontiers(graph_from([self.apex], []), VoxelMap(VoxelParams()), FRUSTUM,
                                         GainParams(), phi_min=math.inf)
        assert graph.frontiers() == []


def _brute_force_distances(graph, root=0):
    best = {root: 0.0}
    for target in graph.node_ids():
        if target == root:
            continue
        for route in nx.all_simple_paths(graph.nx_graph, root, target):
            length = sum(graph.edge_length(a, b) for a, b in zip(route, route[1:]))
            best[target] = min(best.get(target, math.inf), length)
    return best


class TestDijkstra:

    def test_two_nodes(self):
        graph = graph_from([(0, 0, 0), (3, 0, 0)], [(0, 1)], frontiers={1})
        path = hierarchy.shortest_paths(graph)[1]
        assert path.node_ids == (0, 1)
        assert path.length == pytest.approx(3.0)

    def test_diamond_prefers_shorter_route(self):
        graph = graph_from([(0, 0, 0), (1, 0, 0), (1, 1, 0), (2, 0, 0)],
                           [(0, 1, 1.0), (1, 3, 1.0), (0, 2, 1.5), (2, 3, 1.5)], frontiers={3})
        path = hierarchy.shortest_paths(graph)[3]
        assert path.node_ids == (0, 1, 3)
        assert path.length == pytest.approx(2.0)

    def test_tie_goes_to_smaller_predecessor(self):
        graph = graph_from([(0, 0, 0), (1, 1, 0), (1, -1, 0), (2, 0, 0)],
                           [(0, 2, 1.0), (0, 1, 1.0), (2, 3, 1.0), (1, 3, 1.0)], frontiers={3})
        assert hierarchy.shortest_paths(graph)[3].node_ids == (0, 1, 3)

    def test_unreachable_frontier_omitted(self):
        graph = graph_from([(0, 0, 0), (1, 0, 0), (5, 5, 0)], [(0, 1)], frontiers={1, 2})
        assert sorted(hierarchy.shortest_paths(graph)) == [1]

    def test_missing_root(self):
        with pytest.raises(ValueError):
            hierarchy.dijkstra(graph_from([(0, 0, 0)], []), 4)

    def test_matches_brute_force(self, rng):
        for _ in range(40):
            graph = random_connected_graph(rng, int(rng.integers(3, 10)), extra_edges=4)
            dist, _ = hierarchy.dijkstra(graph, 0)
            expected = _brute_force_distances(graph)
            assert set(dist) == set(expected)
            for node_id, value in expected.items():
                assert dist[node_id] == pytest.approx(value, rel=1e-9)
            for path in hierarchy.shortest_paths(graph).values():
                edges = sum(graph.edge_length(a, b) for a, b in zip(path.node_ids, path.node_ids[1:]))
                assert path.length == pytest.approx(edges)


class TestPathways:

    def test_single_path(self):
        graph = graph_from([(0, 0, 0), (1, 0, 0), (2, 0, 0), (3, 0, 0), (0, 2, 0)],
                           [(0, 1), (1, 2), (2, 3), (0, 4)], frontiers={3})
        pathways = hierarchy.build_pathways_graph(graph, hierarchy.shortest_paths(graph))
        assert pathways.node_ids() == [0, 1, 2, 3]
        assert pathways.level == 'pathways'

    def test_shared_prefix(self):
        graph = graph_from([(0, 0, 0), (1, 0, 0), (2, 1, 0), (2, -1, 0)],
                           [(0, 1), (1, 2), (1, 3)], frontiers={2, 3})
        pathways = hierarchy.build_pathways_graph(graph, hierarchy.shortest_paths(graph))
        assert pathways.node_ids() == [0, 1, 2, 3]
        assert pathways.edge_count == 3

    def test_no_paths(self):
        with pytest.raises(ValueError):
            hierarchy.build_pathways_graph(graph_from([(0, 0, 0)], []), {})

    def test_containment(self, rng):
        params = GraphParams(rho=2.0, dtw_min=4.0)
        for _ in range(100):
            local = random_connected_graph(rng, int(rng.integers(2, 13)))
            levels = hierarchy.build_hierarchy(local, params)
            local_ids = set(local.node_ids())
            pathway_ids = set(levels.pathways.node_ids())
            candidate_ids = set(levels.candidate.node_ids())
            assert candidate_ids <= pathway_ids <= local_ids
            for a, b, _ in levels.candidate.sorted_edges():
                assert levels.pathways.has_edge(a, b)
            for path in levels.candidates:
                assert path.root == 0
                assert local.node(path.terminal).is_frontier


@functools.lru_cache(maxsize=None)
def _dtw_recursive(a, b):
    if not a and not b:
        return 0.0
    if not a or not b:
        return math.inf
    cost = math.dist(a[-1], b[-1])
    return cost + min(_dtw_recursive(a[:-1], b), _dtw_recursive(a, b[:-1]), _dtw_recursive(a[:-1], b[:-1]))


class TestDtw:

    def test_identical(self):
        seq = [(0, 0, 0), (1, 0, 0), (2, 1, 0)]
        assert hierarchy.dtw_distance(seq, seq) == 0.0

    def test_single_points(self):
        assert hierarchy.dtw_distance([(0, 0, 0)], [(1, 0, 0)]) == pytest.approx(1.0)

    def test_repeated_point_absorbed(self):
        assert hierarchy.dtw_distance([(0, 0, 0), (1, 0, 0)], [(0, 0, 0), (1, 0, 0), (1, 0, 0)]) == 0.0

    def test_empty_sequence(self):
        with pytest.raises(ValueError):
            hierarchy.dtw_distance([], [(0, 0, 0)])

    def test_matches_recursive_definition(self, rng):
        for _ in range(500):
            a = tuple(map(tuple, rng.uniform(-3, 3, (int(rng.integers(1, 6)), 3))))
            b = tuple(map(tuple, rng.uniform(-3, 3, (int(rng.integers(1, 6)), 3))))
            assert hierarchy.dtw_distance(a, b) == pytest.approx(_dtw_recursive(a, b), rel=1e-9)
            assert hierarchy.dtw_distance(a, b) == pytest.approx(hierarchy.dtw_distance(b, a), rel=1e-9)


class TestCandidates:

    def _star(self):
        positions = [(0, 0, 0), (3, 0, 0), (3, 0.1, 0), (0, 6, 0), (-7, 0, 0)]
        return graph_from(positions, [(0, 1), (1, 2), (0, 3), (0, 4)], frontiers={1, 2, 3, 4})

    def test_clusters_by_linkage(self):
        graph = self._star()
        assert hierarchy.cluster_frontiers(graph.frontiers(), 2.0) == [[1, 2], [3], [4]]

    def test_empty_clusters(self):
        assert hierarchy.cluster_frontiers([], 2.0) == []

    def test_one_path_per_cluster(self):
        graph = self._star()
        paths = hierarchy.shortest_paths(graph)
        clusters = hierarchy.cluster_frontiers(graph.frontiers(), 2.0)
        kept = hierarchy.select_candidate_paths(paths, clusters, 1.0, graph)
        assert [p.terminal for p in kept] == [1, 3, 4]

    def test_similar_paths_dropped(self):
        graph = self._star()
        paths = hierarchy.shortest_paths(graph)
        clusters = hierarchy.cluster_frontiers(graph.frontiers(), 2.0)
        kept = hierarchy.select_candidate_paths(paths, clusters, 1e9, graph)
        assert [p.terminal for p in kept] == [1]

    def test_candidate_graph(self):
        graph = self._star()
        kept = [Path((0, 1, 2), 3.1)]
        candidate = hierarchy.build_candidate_graph(graph, kept)
        assert candidate.node_ids() == [0, 1, 2]
        assert candidate.edge_count == 2
        assert len(hierarchy.build_candidate_graph(graph, [])) == 0

    def test_hierarchy_without_frontiers(self):
        graph = graph_from([(0, 0, 0), (1, 0, 0)], [(0, 1)])
        levels = hierarchy.build_hierarchy(graph, GraphParams())
        assert levels.candidates == []
        assert len(levels.pathways) == 0 and len(levels.candidate) == 0


class TestFrontierRegistry:

    def _graph(self, position, gain=1.7):
        graph = graph_from([(0, 0, 0), position], [(0, 1)], frontiers={1})
        graph.node(1).gain = gain
        return graph

    def test_far_frontier_stays_open(self):
        reg = hierarchy.update_frontier_registry(FrontierRegistry(2.0), self._graph((10, 0, 0)),
                                                 RobotState(0, 0, 0))
        assert [e.status for e in reg.entries.values()] == [FrontierStatus.OPEN]

    def test_reached_frontier_consumed(self):
        reg = FrontierRegistry(2.0)
        hierarchy.update_frontier_registry(reg, self._graph((10, 0, 0)), RobotState(0, 0, 0))
        hierarchy.update_frontier_registry(reg, graph_from([(10, 0, 0)], []), RobotState(9.5, 0, 0))
        assert reg.open_entries() == []
        assert len(reg.entries_with(FrontierStatus.CONSUMED)) == 1

    def test_collapsed_gain_consumed(self):
        reg = FrontierRegistry(2.0)
        hierarchy.update_frontier_registry(reg, self._graph((0.05, 0.05, 0.05)), RobotState(-5.0, 0, 0))
        vmap = free_room(lo=(-25, -25, -25), hi=(25, 25, 25))
        hierarchy.update_frontier_registry(reg, graph_from([(-5.0, 0, 0)], []), RobotState(-5.0, 0, 0),
                                           vmap, FRUSTUM, GainParams())
        assert reg.open_entries() == []

    def test_no_duplicates_near_consumed(self):
        reg = FrontierRegistry(2.0)
        entry = reg.add(RobotState(4, 0, 0), 1.5)
        reg.consume(entry.key)
        assert reg.add(RobotState(4.5, 0, 0), 1.6) is None
        assert len(reg) == 1

    def test_open_entry_refreshed(self):
        reg = FrontierRegistry(2.0)
        first = reg.add(RobotState(4, 0, 0), 1.5)
        second = reg.add(RobotState(4.2, 0, 0), 1.8)
        assert second.key == first.key
        assert second.gain == 1.8

    def test_mark_shared(self):
        reg = FrontierRegistry(2.0)
        reg.add(RobotState(4, 0, 0), 1.5)
        reg.add(RobotState(-4, 0, 0), 1.5)
        reg.mark_shared((4.5, 0, 0))
        assert [e.position[0] for e in reg.entries_with(FrontierStatus.SHARED)] == [4.0]
        assert [e.position[0] for e in reg.open_entries()] == [-4.0]
