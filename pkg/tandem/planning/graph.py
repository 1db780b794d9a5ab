"""
    Exploration graph types shared by every level of the hierarchy.

    A graph wraps a networkx.Graph whose nodes carry GraphNode records and
    whose edges carry their Euclidean length.
    Usage:
    ```
    from tandem.planning.graph import ExplorationGraph, GraphNode
    graph = ExplorationGraph('local')
    graph.add_node(GraphNode(0, RobotState(0, 0, 0.3)))
    graph.add_node(GraphNode(1, RobotState(1, 0, 0.3)))
    graph.add_edge(0, 1)
    graph.to_json()
    ```
"""
import dataclasses
import json
import math
import pathlib
import typing

import networkx as nx
import numpy as np

from ..geometry import RobotState

LEVELS = ('local', 'pathways', 'candidate', 'unified')


@dataclasses.dataclass
class GraphNode:
    id: int
    pose: RobotState
    gain: float = 0.0
    is_frontier: bool = False
    confidence: typing.Optional[float] = None
    # no terrain observed under the footprint; forces the path penalty
    unknown_terrain: bool = False

    @property
    def position(self):
        return self.pose.as_array()


@dataclasses.dataclass
class Path:
    node_ids: typing.Tuple[int, ...]
    length: float
    confidence: typing.Optional[float] = None
    penalized: bool = False

    def __post_init__(self):
        self.node_ids = tuple(int(i) for i in self.node_ids)
        if not self.node_ids:
            raise ValueError("A path needs at least one node")

    @property
    def root(self):
        return self.node_ids[0]

    @property
    def terminal(self):
        return self.node_ids[-1]

    def positions(self, graph) -> np.ndarray:
        return np.array([graph.node(i).position for i in self.node_ids])


class ExplorationGraph:

    def __init__(self, level='local'):
        if level not in LEVELS:
            raise ValueError(f"Unknown graph level {level}, expected one of {LEVELS}")
        self.level = level
        self.nx_graph = nx.Graph()

    def __repr__(self):
        return f'{self.__class__.__name__}:{self.level}[{len(self)} nodes, {self.edge_count} edges]'

    def __len__(self):
        return self.nx_graph.number_of_nodes()

    def __contains__(self, node_id):
        return node_id in self.nx_graph

    @property
    def edge_count(self):
        return self.nx_graph.number_of_edges()

    def add_node(self, node: GraphNode):
        if node.id in self.nx_graph:
            raise ValueError(f"Node {node.id} already in the {self.level} graph")
        self.nx_graph.add_node(node.id, node=node)
        return node

    def node(self, node_id) -> GraphNode:
        return self.nx_graph.nodes[node_id]['node']

    def add_edge(self, a, b, length=None):
        if a == b:
            raise ValueError(f"Self loop on node {a}")
        if a not in self.nx_graph or b not in self.nx_graph:
            raise ValueError(f"Edge ({a}, {b}) references a missing node")
        if length is None:
            length = float(np.linalg.norm(self.node(a).position - self.node(b).position))
        self.nx_graph.add_edge(a, b, length=length)

    def has_edge(self, a, b):
        return self.nx_graph.has_edge(a, b)

    def edge_length(self, a, b):
        return self.nx_graph.edges[a, b]['length']

    def neighbors(self, node_id):
        return sorted(self.nx_graph.neighbors(node_id))

    def node_ids(self):
        return sorted(self.nx_graph.nodes)

    def sorted_nodes(self):
        return [self.node(i) for i in self.node_ids()]

    def sorted_edges(self):
        edges = [(min(a, b), max(a, b), data['length']) for a, b, data in self.nx_graph.edges(data=True)]
        return sorted(edges)

    def frontiers(self):
        return [node for node in self.sorted_nodes() if node.is_frontier]

    def component_of(self, node_id):
        return nx.node_connected_component(self.nx_graph, node_id)

    def induced(self, node_ids, level=None, extra_edges=()):
        """Subgraph on node_ids holding every edge among them plus extra_edges;
        node records are copied"""
        keep = set(node_ids)
        sub = ExplorationGraph(level or self.level)
        for node_id in sorted(keep):
            sub.add_node(dataclasses.replace(self.node(node_id)))
        for a, b, length in self.sorted_edges():
            if a in keep and b in keep:
                sub.add_edge(a, b, length)
        for a, b in extra_edges:
            if not sub.has_edge(a, b):
                sub.add_edge(a, b, self.edge_length(a, b))
        return sub

    def path_length(self, node_ids):
        return sum(self.edge_length(a, b) for a, b in zip(node_ids, node_ids[1:]))

    def to_dict(self):
        return {
            'level': self.level,
            'nodes': [
                {
                    'id': node.id, 'x': node.pose.x, 'y': node.pose.y, 'z': node.pose.z,
                    'psi': node.pose.psi, 'gain': node.gain, 'frontier': node.is_frontier,
                    'confidence': node.confidence,
                }
                for node in self.sorted_nodes()
            ],
            'edges': [[a, b, length] for a, b, length in self.sorted_edges()],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def write_json(self, path):
        pathlib.Path(path).write_text(self.to_json() + '\n')

    @classmethod
    def from_dict(cls, data):
        graph = cls(data['level'])
        for item in data['nodes']:
            graph.add_node(GraphNode(
                int(item['id']), RobotState(item['x'], item['y'], item['z'], item['psi']),
                gain=item['gain'], is_frontier=item['frontier'], confidence=item['confidence'],
            ))
        for a, b, length in data['edges']:
            graph.add_edge(int(a), int(b), float(length))
        return graph


def euclidean(a: GraphNode, b: GraphNode) -> float:
    return math.dist(a.position, b.position)
