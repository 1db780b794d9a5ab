"""
    Node and path confidence, and the choice between driving on and handing
    the best frontier to the aerial agent.
    Usage:
    ```
    from tandem.planning import confidence
    confidence.score_candidates(levels.candidate, levels.candidates, grid, vmap, BoxParams(), ConfidenceParams())
    decision = confidence.select_exploration_path(levels.candidates, ConfidenceParams())
    decision.deploy, decision.reason
    ```
"""
import enum
import logging
import math
import typing

from ..config import BoxParams, ConfidenceParams
from ..geometry import BoundingBox, RobotState, footprint_polygon
from ..mapping import elevation, voxel
from .graph import ExplorationGraph, GraphNode, Path

UNKNOWN_PRIOR = 0.5


class DecisionReason(enum.Enum):
    ALL_PATHS_LOW_CONFIDENCE = 'all_paths_low_confidence'
    NO_FRONTIERS = 'no_frontiers'
    DRIVABLE = 'drivable'


class DeploymentDecision(typing.NamedTuple):
    deploy: bool
    target_path: typing.Optional[Path]
    reason: DecisionReason
    # no candidates and no open frontier left anywhere
    mission_complete: bool = False
    # graph target_path indexes when it is not the candidate graph
    graph: typing.Optional[ExplorationGraph] = None

    @property
    def target_id(self):
        return None if self.target_path is None else self.target_path.terminal


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


class TerrainAverages(typing.NamedTuple):
    geometric: typing.Optional[float]
    semantic: typing.Optional[float]

    @property
    def unknown(self):
        return self.geometric is None and self.semantic is None


def terrain_averages(node: GraphNode, grid, vmap, box: BoxParams, params: ConfidenceParams,
                     z_off=0.3) -> TerrainAverages:
    """Mean geometric and semantic traversability under the footprint at the node pose"""
    poly = footprint_polygon(node.pose, BoundingBox(node.pose, box.length, box.width, box.height))
    geometric = elevation.avg_geometric_traversability(grid, poly) if grid is not None else None
    semantic = None
    if vmap is not None:
        semantic = voxel.avg_semantic_traversability(vmap, poly, node.pose.z - z_off, params.z_halfspan)
    return TerrainAverages(geometric, semantic)


def confidence_from_terms(trav_g, trav_sem, gain, params: ConfidenceParams) -> float:
    return sigmoid(params.w_g * trav_g + params.w_sem * trav_sem + params.w_v * gain)


def node_confidence(node: GraphNode, grid, vmap, box: BoxParams, params: ConfidenceParams,
                    z_off=0.3) -> float:
    """Sigmoid of the weighted traversability averages and the raw gain.
    Absent averages count as UNKNOWN_PRIOR."""
    if params.w_g == 0 and params.w_sem == 0:
        return confidence_from_terms(0.0, 0.0, node.gain, params)
    averages = terrain_averages(node, grid, vmap, box, params, z_off)
    trav_g = UNKNOWN_PRIOR if averages.geometric is None else averages.geometric
    trav_sem = UNKNOWN_PRIOR if averages.semantic is None else averages.semantic
    return confidence_from_terms(trav_g, trav_sem, node.gain, params)


def score_node(node: GraphNode, grid, vmap, box: BoxParams, params: ConfidenceParams, z_off=0.3):
    """Store confidence and the unknown-terrain flag on the node"""
    gain_only = params.w_g == 0 and params.w_sem == 0
    node.unknown_terrain = False if gain_only else terrain_averages(node, grid, vmap, box, params, z_off).unknown
    node.confidence = node_confidence(node, grid, vmap, box, params, z_off)
    return node.confidence


def path_confidence(path: Path, confidences, params: ConfidenceParams, flagged=frozenset()) -> float:
    """Mean node confidence, scaled by exp(-lambda) when a node is at or
    below C_crit or sits over unknown terrain"""
    values = [confidences[i] for i in path.node_ids]
    mean = sum(values) / len(values)
    if path_penalized(path, confidences, params, flagged):
        mean *= math.exp(-params.lam)
    return min(max(mean, 0.0), 1.0)


def path_penalized(path: Path, confidences, params: ConfidenceParams, flagged=frozenset()) -> bool:
    return any(confidences[i] <= params.c_crit or i in flagged for i in path.node_ids)


def score_candidates(graph: ExplorationGraph, candidates, grid, vmap, box: BoxParams,
                     params: ConfidenceParams, z_off=0.3):
    """Score every node on the candidate paths, then each path"""
    confidences, flagged = {}, set()
    for path in candidates:
        for node_id in path.node_ids:
            if node_id in confidences:
                continue
            node = graph.node(node_id)
            confidences[node_id] = score_node(node, grid, vmap, box, params, z_off)
            if node.unknown_terrain:
                flagged.add(node_id)
    for path in candidates:
        path.penalized = path_penalized(path, confidences, params, flagged)
        path.confidence = path_confidence(path, confidences, params, flagged)
    return candidates


def _preference(path: Path):
    return -path.confidence, path.length, path.terminal


def mark_registry_confidence(registry, graph: ExplorationGraph, candidates, params: ConfidenceParams):
    """Flag the registry frontiers at candidate terminals whose path scored
    below C_deploy, and clear the flag on the ones that scored above"""
    for path in candidates:
        if path.confidence is not None and path.terminal in graph:
            registry.mark_confidence(graph.node(path.terminal).position, path.confidence < params.c_deploy)
    return registry


def handoff_path(entry, graph: ExplorationGraph = None, root_pose: RobotState = None):
    """Copy of graph with the registry frontier appended and joined to the
    root, and the path from the root to it. The root is the smallest node
    id, or a node at root_pose when graph is empty."""
    handoff = graph.induced(graph.node_ids()) if graph is not None else ExplorationGraph('candidate')
    if len(handoff) == 0 and root_pose is not None:
        handoff.add_node(GraphNode(0, root_pose))
    ids = handoff.node_ids()
    target = GraphNode(ids[-1] + 1 if ids else 0, entry.pose, gain=entry.gain, is_frontier=True)
    handoff.add_node(target)
    if not ids:
        return Path((target.id,), 0.0), handoff
    handoff.add_edge(ids[0], target.id)
    return Path((ids[0], target.id), handoff.edge_length(ids[0], target.id)), handoff


def select_exploration_path(candidates, params: ConfidenceParams, registry=None,
                            graph: ExplorationGraph = None, root_pose: RobotState = None) -> DeploymentDecision:
    """Drive the best path when it clears C_deploy, otherwise hand its
    frontier to the aerial agent. Without candidates the ground phase ends,
    handing over the best frontier left behind for low confidence if any."""
    candidates = list(candidates)
    if graph is not None:
        candidates = [p for p in candidates if graph.node(p.terminal).is_frontier]
    if not candidates:
        halted = registry.halted_entries() if registry is not None else []
        if halted:
            entry = max(halted, key=lambda e: (e.gain, -e.key))
            path, handoff = handoff_path(entry, graph, root_pose)
            logging.info(f'No candidates left, deploying to low-confidence frontier {entry.key}')
            return DeploymentDecision(True, path, DecisionReason.NO_FRONTIERS, graph=handoff)
        remaining = len(registry.open_entries()) if registry is not None else 0
        return DeploymentDecision(False, None, DecisionReason.NO_FRONTIERS, mission_complete=remaining == 0)
    if any(p.confidence is None for p in candidates):
        raise ValueError("Every candidate needs a confidence before selection")
    best = min(candidates, key=_preference)
    if best.confidence >= params.c_deploy:
        return DeploymentDecision(False, best, DecisionReason.DRIVABLE)
    logging.info(f'Best path confidence {best.confidence:.3f} below {params.c_deploy}, deploying')
    return DeploymentDecision(True, best, DecisionReason.ALL_PATHS_LOW_CONFIDENCE)


def decision_record(cycle: int, candidates, decision: DeploymentDecision) -> dict:
    """One line of the JSON-lines decision log"""
    return {
        'cycle': cycle,
        'candidates': [
            {'terminal_id': p.terminal, 'length': p.length, 'pi_c': p.confidence, 'penalized': p.penalized}
            for p in sorted(candidates, key=lambda p: (p.length, p.terminal))
        ],
        'decision': decision.reason.value if not decision.mission_complete else 'mission_complete',
        'deploy': decision.deploy,
        'target_id': decision.target_id,
    }
