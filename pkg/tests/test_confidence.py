import math

import pytest

from conftest import flat_grid, graph_from, mark_occupied
from tandem.config import BoxParams, ConfidenceParams, VoxelParams
from tandem.geometry import RigidTransform, RobotState
from tandem.mapping.voxel import VoxelMap
from tandem.planning import confidence
from tandem.planning.confidence import DecisionReason
from tandem.planning.graph import GraphNode, Path
from tandem.planning.hierarchy import FrontierRegistry
from tandem.protocol import message


def _scored(node_ids, value, length=1.0):
    return Path(node_ids, length, confidence=value)


class TestSigmoid:

    def test_zero(self):
        assert confidence.sigmoid(0.0) == 0.5

    def test_two(self):
        assert confidence.sigmoid(2.0) == pytest.approx(0.88080, abs=1e-5)

    def test_large_magnitudes_are_stable(self):
        assert confidence.sigmoid(-800.0) == 0.0
        assert confidence.sigmoid(800.0) == 1.0


class TestNodeConfidence:
    box = BoxParams()

    def _ground(self):
        grid = flat_grid(size=40)
        vmap = mark_occupied(VoxelMap(VoxelParams()), (0, 0, -1), (40, 40, 0), trav=1.0)
        return grid, vmap

    def test_all_weights_zero(self):
        params = ConfidenceParams(w_g=0.0, w_sem=0.0, w_v=0.0)
        node = GraphNode(0, RobotState(2.0, 2.0, 0.3), gain=1.7)
        assert confidence.node_confidence(node, None, None, self.box, params) == 0.5

    def test_fully_traversable_without_gain(self):
        grid, vmap = self._ground()
        params = ConfidenceParams(w_g=1.0, w_sem=1.0, w_v=1.0)
        node = GraphNode(0, RobotState(2.0, 2.0, 0.3), gain=0.0)
        assert confidence.node_confidence(node, grid, vmap, self.box, params) == pytest.approx(0.88080, abs=1e-5)

    def test_untraversable_terrain(self):
        grid = flat_grid(size=40)
        grid.layers['trav_g'][:] = 0.0
        vmap = mark_occupied(VoxelMap(VoxelParams()), (0, 0, -1), (40, 40, 0), trav=0.0)
        params = ConfidenceParams(w_g=1.0, w_sem=1.0, w_v=0.0)
        node = GraphNode(0, RobotState(2.0, 2.0, 0.3))
        assert confidence.node_confidence(node, grid, vmap, self.box, params) == pytest.approx(0.5)

    def test_unknown_terrain_uses_prior_and_flags(self):
        grid, vmap = self._ground()
        params = ConfidenceParams(w_v=0.0)
        node = GraphNode(0, RobotState(50.0, 50.0, 0.3))
        value = confidence.score_node(node, grid, vmap, self.box, params)
        assert value == pytest.approx(confidence.sigmoid(2 * confidence.UNKNOWN_PRIOR))
        assert node.unknown_terrain

    def test_gain_only(self):
        params = ConfidenceParams().gain_only()
        node = GraphNode(0, RobotState(50.0, 50.0, 2.0), gain=1.5)
        assert confidence.score_node(node, None, None, self.box, params) == pytest.approx(
            confidence.sigmoid(params.w_v * 1.5))
        assert not node.unknown_terrain

    def test_monotone_in_each_term(self, rng):
        params = ConfidenceParams()
        for _ in range(200):
            g, s, v = rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0, 2)
            base = confidence.confidence_from_terms(g, s, v, params)
            assert confidence.confidence_from_terms(g + 0.1, s, v, params) > base
            assert confidence.confidence_from_terms(g, s + 0.1, v, params) > base
            assert confidence.confidence_from_terms(g, s, v + 0.1, params) > base


class TestPathConfidence:

    def test_plain_mean(self):
        params = ConfidenceParams(c_crit=0.5)
        value = confidence.path_confidence(Path((0, 1), 1.0), {0: 0.8, 1: 0.6}, params)
        assert value == pytest.approx(0.7, abs=1e-12)

    def test_penalty_branch(self):
        params = ConfidenceParams(c_crit=0.5, lam=1.0)
        value = confidence.path_confidence(Path((0, 1), 1.0), {0: 0.8, 1: 0.4}, params)
        assert value == pytest.approx(math.exp(-1.0) * 0.6, abs=1e-12)
        assert value == pytest.approx(0.22073, abs=1e-5)

    def test_zero_lambda(self):
        params = ConfidenceParams(c_crit=0.5, lam=0.0)
        assert confidence.path_confidence(Path((0, 1), 1.0), {0: 0.8, 1: 0.4}, params) == pytest.approx(0.6)

    def test_threshold_is_inclusive(self):
        params = ConfidenceParams(c_crit=0.5)
        assert confidence.path_penalized(Path((0, 1), 1.0), {0: 0.9, 1: 0.5}, params)

    def test_flagged_node_penalizes(self):
        params = ConfidenceParams(c_crit=0.5)
        value = confidence.path_confidence(Path((0, 1), 1.0), {0: 0.9, 1: 0.9}, params, flagged={1})
        assert value == pytest.approx(0.9 * math.exp(-params.lam))

    def test_branch_oracle(self, rng):
        params = ConfidenceParams()
        for _ in range(300):
            values = rng.uniform(0, 1, int(rng.integers(1, 8)))
            conf = dict(enumerate(values))
            mean = sum(values) / len(values)
            expected = mean * math.exp(-params.lam) if min(values) <= params.c_crit else mean
            got = confidence.path_confidence(Path(tuple(conf), 1.0), conf, params)
            assert got == pytest.approx(expected, abs=1e-12)
            assert got <= mean + 1e-12

    def test_score_candidates_shares_node_scores(self):
        graph = graph_from([(2.0, 2.0, 0.3), (2.5, 2.0, 0.3), (50.0, 50.0, 0.3)], [(0, 1), (0, 2)],
                           frontiers={1, 2})
        grid = flat_grid(size=40)
        paths = [Path((0, 1), 0.5), Path((0, 2), 68.0)]
        confidence.score_candidates(graph, paths, grid, None, BoxParams(), ConfidenceParams())
        assert graph.node(0).confidence is not None
        assert not paths[0].penalized
        assert paths[1].penalized
        assert paths[1].confidence < paths[0].confidence


class TestSelection:
    params = ConfidenceParams(c_deploy=0.3)

    def test_drivable(self):
        decision = confidence.select_exploration_path([_scored((0, 1), 0.9)], self.params)
        assert not decision.deploy
        assert decision.reason == DecisionReason.DRIVABLE
        assert decision.target_id == 1

    def test_all_low_deploys_best(self):
        decision = confidence.select_exploration_path([_scored((0, 1), 0.1), _scored((0, 2), 0.15)], self.params)
        assert decision.deploy
        assert decision.reason == DecisionReason.ALL_PATHS_LOW_CONFIDENCE
        assert decision.target_id == 2

    def test_empty_registry_completes_mission(self):
        decision = confidence.select_exploration_path([], self.params, FrontierRegistry())
        assert not decision.deploy
        assert decision.mission_complete

    def test_open_frontiers_keep_mission_running(self):
        registry = FrontierRegistry()
        registry.add(RobotState(5.0, 0.0, 0.0), 1.5)
        decision = confidence.select_exploration_path([], self.params, registry)
        assert decision.reason == DecisionReason.NO_FRONTIERS
        assert not decision.deploy
        assert not decision.mission_complete

    def _halted_registry(self, value=0.1):
        registry = FrontierRegistry()
        registry.add(RobotState(5.0, 0.0, 0.3), 1.5)
        graph = graph_from([(0, 0, 0.3), (5.0, 0, 0.3)], [(0, 1)], level='candidate', frontiers={1})
        confidence.mark_registry_confidence(registry, graph, [_scored((0, 1), value, 5.0)], self.params)
        return registry

    def test_low_confidence_frontier_left_behind_is_handed_over(self):
        registry = self._halted_registry()
        decision = confidence.select_exploration_path([], self.params, registry, root_pose=RobotState(0, 0, 0.3))
        assert decision.deploy
        assert decision.reason == DecisionReason.NO_FRONTIERS
        assert not decision.mission_complete
        assert decision.target_path.node_ids == (0, 1)
        assert decision.target_path.length == pytest.approx(5.0)
        target = decision.graph.node(decision.target_id)
        assert target.is_frontier
        assert target.position == pytest.approx([5.0, 0.0, 0.3])

    def test_hand_over_graph_builds_a_valid_message(self):
        registry = self._halted_registry()
        decision = confidence.select_exploration_path([], self.params, registry, root_pose=RobotState(0, 0, 0.3))
        msg = message.build_unified_graph(decision.graph, decision.target_path, registry, RigidTransform.identity())
        assert len(msg.graph) == 2
        assert msg.target_id == 1
        assert registry.open_entries() == []

    def test_hand_over_without_root_targets_the_frontier_alone(self):
        decision = confidence.select_exploration_path([], self.params, self._halted_registry())
        assert decision.deploy
        assert decision.target_path.node_ids == (0,)

    def test_hand_over_extends_the_given_graph(self):
        graph = graph_from([(0, 0, 0.3), (1, 0, 0.3)], [(0, 1)], level='candidate')
        decision = confidence.select_exploration_path([], self.params, self._halted_registry(), graph)
        assert decision.target_path.node_ids == (0, 2)
        assert len(graph) == 2
        assert len(decision.graph) == 3

    def test_best_halted_frontier_wins_on_gain(self):
        registry = self._halted_registry()
        registry.add(RobotState(-5.0, 0.0, 0.3), 2.5)
        graph = graph_from([(0, 0, 0.3), (-5.0, 0, 0.3)], [(0, 1)], level='candidate', frontiers={1})
        confidence.mark_registry_confidence(registry, graph, [_scored((0, 1), 0.2, 5.0)], self.params)
        decision = confidence.select_exploration_path([], self.params, registry, root_pose=RobotState(0, 0, 0.3))
        assert decision.graph.node(decision.target_id).position == pytest.approx([-5.0, 0.0, 0.3])

    def test_confident_rescore_clears_the_flag(self):
        registry = self._halted_registry()
        graph = graph_from([(0, 0, 0.3), (5.0, 0, 0.3)], [(0, 1)], level='candidate', frontiers={1})
        confidence.mark_registry_confidence(registry, graph, [_scored((0, 1), 0.9, 5.0)], self.params)
        assert registry.halted_entries() == []
        assert not confidence.select_exploration_path([], self.params, registry).deploy

    def test_ties_prefer_shorter_then_smaller_id(self):
        paths = [_scored((0, 3), 0.8, 2.0), _scored((0, 2), 0.8, 1.0), _scored((0, 1), 0.8, 1.0)]
        assert confidence.select_exploration_path(paths, self.params).target_id == 1

    def test_missing_confidence(self):
        with pytest.raises(ValueError):
            confidence.select_exploration_path([Path((0, 1), 1.0)], self.params)

    def test_invariant_under_monotone_rescaling(self, rng):
        for _ in range(100):
            values = rng.uniform(0, 1, 5)
            paths = [_scored((0, i + 1), v, rng.uniform(1, 5)) for i, v in enumerate(values)]
            squashed = [_scored(p.node_ids, p.confidence ** 3, p.length) for p in paths]
            low = ConfidenceParams(c_deploy=1.0)
            assert (confidence.select_exploration_path(paths, low).target_id
                    == confidence.select_exploration_path(squashed, low).target_id)

    def test_decision_record(self):
        paths = [_scored((0, 2), 0.1, 3.0), _scored((0, 1), 0.15, 2.0)]
        decision = confidence.select_exploration_path(paths, self.params)
        record = confidence.decision_record(4, paths, decision)
        assert record['cycle'] == 4
        assert [c['terminal_id'] for c in record['candidates']] == [1, 2]
        assert record['decision'] == 'all_paths_low_confidence'
        assert record['target_id'] == 1
