"""
    The unified graph handed from the ground agent to the aerial agent.

    A message holds the candidate graph, the path to the frontier the ground
    agent could not traverse, the still-open global frontiers and the static
    transform between the two agents' frames. It never holds map data.
    Usage:
    ```
    from tandem.protocol import message
    msg = message.build_unified_graph(levels.candidate, decision.target_path, registry, tf)
    message.apply_static_transform(msg, aerial_pose)
    ```
"""
import dataclasses
import typing
import zlib

import numpy as np

from ..geometry import RigidTransform, RobotState
from ..planning.graph import ExplorationGraph, GraphNode, Path
from ..planning.hierarchy import FrontierRegistry, FrontierStatus

PROTOCOL_VERSION = 1


class ContractViolation(ValueError):
    """A message or its inputs break the hand-over contract"""


@dataclasses.dataclass(frozen=True)
class ScanMetadata:
    """Summary of the ground scan shared at hand-over"""
    point_count: int = 0
    checksum: int = 0

    @classmethod
    def from_points(cls, points):
        data = np.ascontiguousarray(np.asarray(points, dtype='<f4').reshape(-1, 3))
        return cls(len(data), zlib.crc32(data.tobytes()))


@dataclasses.dataclass(eq=False)
class UnifiedGraphMessage:
    mission_id: str
    static_transform: RigidTransform
    graph: ExplorationGraph
    candidate_path: Path
    frontier_ids: typing.Tuple[int, ...]
    scan: ScanMetadata = ScanMetadata()
    version: int = PROTOCOL_VERSION

    def __post_init__(self):
        self.frontier_ids = tuple(sorted(int(i) for i in self.frontier_ids))

    def __eq__(self, other):
        if not isinstance(other, UnifiedGraphMessage):
            return NotImplemented
        return (self.version == other.version and self.mission_id == other.mission_id
                and self.static_transform == other.static_transform
                and self.graph.to_dict() == other.graph.to_dict()
                and self.candidate_path == other.candidate_path
                and self.frontier_ids == other.frontier_ids and self.scan == other.scan)

    def __repr__(self):
        return (f'{self.__class__.__name__}:{self.mission_id}[{len(self.graph)} nodes, '
                f'path to {self.candidate_path.terminal}, {len(self.frontier_ids)} frontiers]')

    @property
    def target_id(self):
        return self.candidate_path.terminal


def validate(msg: UnifiedGraphMessage):
    """Raise ContractViolation when the message breaks an invariant"""
    graph = msg.graph
    missing = [i for i in msg.candidate_path.node_ids if i not in graph]
    if missing:
        raise ContractViolation(f"Candidate path references missing nodes {missing}")
    ids = msg.candidate_path.node_ids
    for a, b in zip(ids, ids[1:]):
        if not graph.has_edge(a, b):
            raise ContractViolation(f"Candidate path steps over a missing edge ({a}, {b})")
    for node_id in msg.frontier_ids:
        if node_id not in graph or not graph.node(node_id).is_frontier:
            raise ContractViolation(f"Listed frontier {node_id} is not a frontier node")
    if not graph.node(msg.target_id).is_frontier:
        raise ContractViolation(f"Candidate path ends at {msg.target_id}, which is not a frontier")
    for a, b, length in graph.sorted_edges():
        actual = float(np.linalg.norm(graph.node(a).position - graph.node(b).position))
        if abs(actual - length) > 1e-9:
            raise ContractViolation(f"Edge ({a}, {b}) length {length} differs from {actual}")
    return msg


def build_unified_graph(candidate_graph: ExplorationGraph, target_path: Path, registry: FrontierRegistry,
                        tf: RigidTransform, mission_id='tandem', scan=ScanMetadata()) -> UnifiedGraphMessage:
    """Candidate graph plus open registry frontiers as isolated nodes, ids
    renumbered from 0. Registry frontiers within rho of a graph frontier
    are represented by that node. Every included entry becomes shared."""
    terminal = target_path.terminal
    if terminal not in candidate_graph or not candidate_graph.node(terminal).is_frontier:
        raise ContractViolation(f"Target path ends at {terminal}, which is not a frontier")

    renumber = {old: new for new, old in enumerate(candidate_graph.node_ids())}
    unified = ExplorationGraph('unified')
    for old, new in renumber.items():
        unified.add_node(dataclasses.replace(candidate_graph.node(old), id=new))
    for a, b, length in candidate_graph.sorted_edges():
        unified.add_edge(renumber[a], renumber[b], length)

    graph_frontiers = np.array([n.position for n in candidate_graph.frontiers()]).reshape(-1, 3)
    next_id = len(unified)
    registry = registry if registry is not None else FrontierRegistry()
    for entry in registry.entries_with(FrontierStatus.OPEN):
        if len(graph_frontiers) and np.min(np.linalg.norm(graph_frontiers - entry.position, axis=1)) <= registry.rho:
            entry.status = FrontierStatus.SHARED
            continue
        unified.add_node(GraphNode(next_id, entry.pose, gain=entry.gain, is_frontier=True))
        entry.status = FrontierStatus.SHARED
        next_id += 1

    path = Path(tuple(renumber[i] for i in target_path.node_ids), target_path.length,
                target_path.confidence, target_path.penalized)
    msg = UnifiedGraphMessage(mission_id, tf, unified, path, [n.id for n in unified.frontiers()], scan)
    return validate(msg)


def apply_static_transform(msg: UnifiedGraphMessage, pose_in_aerial_frame: RobotState) -> RobotState:
    """Aerial-frame pose expressed in the ground global frame"""
    return msg.static_transform.apply_state(pose_in_aerial_frame)


def to_aerial_frame(msg: UnifiedGraphMessage, pose_in_ground_frame: RobotState) -> RobotState:
    return msg.static_transform.inverse().apply_state(pose_in_ground_frame)
