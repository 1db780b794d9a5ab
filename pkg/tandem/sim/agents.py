"""
    Ground and aerial agents and their planning cycles.

    One cycle senses, builds the graph hierarchy, scores candidates and
    either moves node by node along the chosen path (re-sensing at every
    node) or stops. The aerial agent only ever sees the unified graph
    message and its own scans; its map lives in its own frame.
    Usage:
    ```
    from tandem.sim import agents
    world = agents.World(scene, MissionConfig())
    ground = agents.GroundAgent.create(world)
    agents.step_ground_agent(world, ground)
    ```
"""
import dataclasses
import logging
import typing

import numpy as np

from ..config import MissionConfig
from ..geometry import LabeledCloud, RobotState
from ..mapping import elevation, semantic, voxel
from ..mapping.elevation import TraversabilityGrid
from ..mapping.voxel import VoxelMap
from ..planning import confidence, hierarchy
from ..planning.graph import ExplorationGraph
from ..planning.hierarchy import FrontierRegistry, FrontierStatus, SamplingStarved
from ..protocol import message as handover
from ..protocol.codec import ResultCode
from . import sensors
from .scenario import Scenario

GROUND = 'ground'
AERIAL = 'aerial'


class MissionFailure(RuntimeError):
    """The mission can't continue, for instance sampling starved after
    every window enlargement"""


class World(typing.NamedTuple):
    scenario: Scenario
    config: MissionConfig


@dataclasses.dataclass
class Agent:
    name: str
    pose: RobotState
    vmap: VoxelMap
    registry: FrontierRegistry
    cycle: int = 0
    tick: int = 0
    active: bool = True
    capped: bool = False
    ever_free: np.ndarray = dataclasses.field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    records: list = dataclasses.field(default_factory=list)
    decisions: list = dataclasses.field(default_factory=list)
    history: list = dataclasses.field(default_factory=list)
    last_scan: typing.Optional[sensors.LidarScan] = None

    @property
    def explored_free(self):
        return len(self.ever_free)

    def note_explored(self):
        keys = voxel.pack_indices(self.vmap.free_indices())
        self.ever_free = np.union1d(self.ever_free, keys)

    def record(self, path=None):
        self.records.append({
            'tick': self.tick,
            'agent': self.name,
            'cycle': self.cycle,
            'x': self.pose.x,
            'y': self.pose.y,
            'z': self.pose.z,
            'explored_free': self.explored_free,
            'path_terminal': None if path is None else path.terminal,
            'pi_c': None if path is None else path.confidence,
        })


@dataclasses.dataclass
class GroundAgent(Agent):
    grid: typing.Optional[TraversabilityGrid] = None
    decision: typing.Optional[confidence.DeploymentDecision] = None
    message: typing.Optional[handover.UnifiedGraphMessage] = None
    deployed_at: typing.Optional[int] = None

    @classmethod
    def create(cls, world: World):
        cfg = world.config
        start = world.scenario.start
        agent = cls(GROUND, start, VoxelMap(cfg.voxel, owner=GROUND), FrontierRegistry(cfg.ground_graph.rho),
                    grid=TraversabilityGrid.create(cfg.grid, (start.x, start.y)))
        sense_ground(world, agent)
        return agent


@dataclasses.dataclass
class AerialAgent(Agent):
    message: typing.Optional[handover.UnifiedGraphMessage] = None
    route: list = dataclasses.field(default_factory=list)
    shared_frontiers: list = dataclasses.field(default_factory=list)
    unreachable: list = dataclasses.field(default_factory=list)

    @classmethod
    def create(cls, world: World, ground_pose: RobotState):
        cfg = world.config
        pose = world.scenario.aerial_start(ground_pose)
        return cls(AERIAL, pose, VoxelMap(cfg.voxel, owner=AERIAL), FrontierRegistry(cfg.aerial_graph.rho))

    def accept(self, msg: handover.UnifiedGraphMessage, lift=0.4) -> ResultCode:
        """Action server handler: take the unified graph and plan the flight
        along the shared path, lifted above the ground poses"""
        graph = msg.graph
        if len(graph) == 0:
            raise ValueError('unified graph is empty')
        self.message = msg
        self.route = []
        for node_id in msg.candidate_path.node_ids[1:]:
            pose = graph.node(node_id).pose
            lifted = RobotState(pose.x, pose.y, pose.z + lift, pose.psi)
            self.route.append(handover.to_aerial_frame(msg, lifted))
        self.shared_frontiers = [
            graph.node(i) for i in msg.frontier_ids if i != msg.target_id
        ]
        logging.info(f'Aerial agent accepted {msg}')
        return ResultCode.EXPLORATION_STARTED

    def world_pose(self):
        return handover.apply_static_transform(self.message, self.pose)


def _clear_body(vmap: VoxelMap, center, half_extents):
    vmap.mark_free_box(np.asarray(center, float), np.asarray(half_extents, float))


def sense_ground(world: World, agent: GroundAgent):
    """Scan, label with the camera ring, fuse into the voxel map and the
    elevation grid"""
    cfg, scene = world.config, world.scenario
    pose = agent.pose
    with voxel.agent_context(GROUND):
        scan = sensors.simulate_lidar(scene, pose, cfg.sensor)
        to_world = sensors.sensor_to_world(pose, cfg.sensor)
        views = sensors.render_camera_ring(scene, pose, cfg.sensor)
        cloud = semantic.label_with_cameras(to_world.inverse().apply(scan.points), views, to_world, cfg.semantic)
        voxel.integrate_labeled_cloud(agent.vmap, cloud, scan.origin)
        support = pose.z - cfg.ground_graph.z_off
        box = cfg.box
        _clear_body(agent.vmap, (pose.x, pose.y, support + box.height / 2 + cfg.voxel.voxel_size),
                    (box.width / 2, box.width / 2, box.height / 2))
        elevation.integrate_scan(agent.grid, scan.points, pose)
        elevation.compute_features(agent.grid)
        elevation.risk_and_traversability(agent.grid, cfg.risk)
        agent.note_explored()
    agent.last_scan = scan
    agent.tick += 1


def sense_aerial(world: World, agent: AerialAgent):
    """Scan from the aerial pose and fuse into the aerial map, in the aerial frame"""
    cfg, scene = world.config, world.scenario
    tf = agent.message.static_transform
    with voxel.agent_context(AERIAL):
        scan = sensors.simulate_lidar(scene, agent.world_pose(), cfg.sensor)
        points = tf.inverse().apply(scan.points)
        origin = tf.inverse().apply(scan.origin)[0]
        voxel.integrate_labeled_cloud(agent.vmap, LabeledCloud(points, np.zeros(len(points))), origin)
        half = cfg.aerial_graph.r_safe / 2
        _clear_body(agent.vmap, agent.pose.as_array(), (half, half, half))
        agent.note_explored()
    agent.last_scan = scan
    agent.tick += 1


def suppress_consumed(graph: ExplorationGraph, registry: FrontierRegistry):
    """Unmark frontiers lying within rho of an already consumed one"""
    consumed = np.array([e.position for e in registry.entries_with(FrontierStatus.CONSUMED)]).reshape(-1, 3)
    if not len(consumed):
        return graph
    for node in graph.frontiers():
        if np.min(np.linalg.norm(consumed - node.position, axis=1)) <= registry.rho:
            node.is_frontier = False
    return graph


def _plan(world: World, agent: Agent, local: ExplorationGraph, grid, graph_params, conf_params):
    cfg = world.config
    hierarchy.mark_frontiers(local, agent.vmap, cfg.frustum, cfg.gain)
    suppress_consumed(local, agent.registry)
    levels = hierarchy.build_hierarchy(local, graph_params)
    confidence.score_candidates(levels.candidate, levels.candidates, grid, agent.vmap, cfg.box,
                                conf_params, graph_params.z_off)
    hierarchy.update_frontier_registry(agent.registry, local, agent.pose, agent.vmap, cfg.frustum, cfg.gain)
    agent.history.append((agent.cycle, levels))
    return levels


def step_ground_agent(world: World, agent: GroundAgent) -> GroundAgent:
    """One planning cycle, then drive the chosen path or halt"""
    if not agent.active:
        return agent
    cfg = world.config
    agent.cycle += 1
    with voxel.agent_context(GROUND):
        try:
            local = hierarchy.sample_with_enlargement(
                agent.vmap, agent.grid, agent.pose, cfg.ground_graph, seed=world.scenario.seed * 1000 + agent.cycle,
                agent=hierarchy.GROUND, body_height=cfg.box.height,
            )
        except SamplingStarved as _e:
            agent.active = False
            raise MissionFailure(f'Ground agent starved in cycle {agent.cycle}: {_e}') from _e
        levels = _plan(world, agent, local, agent.grid, cfg.ground_graph, cfg.confidence)
        confidence.mark_registry_confidence(agent.registry, levels.candidate, levels.candidates, cfg.confidence)
        decision = confidence.select_exploration_path(levels.candidates, cfg.confidence, agent.registry,
                                                      levels.candidate, agent.pose)
    agent.decision = decision
    agent.decisions.append(confidence.decision_record(agent.cycle, levels.candidates, decision))
    agent.record(decision.target_path)
    logging.info(f'Ground cycle {agent.cycle}: {decision.reason.value}, target {decision.target_id}')

    if decision.deploy:
        agent.active = False
        agent.deployed_at = agent.cycle
        shared = decision.graph if decision.graph is not None else levels.candidate
        agent.message = handover.build_unified_graph(
            shared, decision.target_path, agent.registry, world.scenario.static_transform,
            cfg.protocol.mission_id, handover.ScanMetadata.from_points(agent.last_scan.points),
        )
        return agent
    if decision.target_path is None:
        agent.active = False
        return agent
    for node_id in decision.target_path.node_ids[1:]:
        agent.pose = levels.candidate.node(node_id).pose
        sense_ground(world, agent)
        agent.record(decision.target_path)
    return agent


def prune_shared_frontiers(world: World, agent: AerialAgent):
    """Drop shared frontiers whose gain already collapsed in the aerial map"""
    cfg = world.config
    kept = []
    for node in agent.shared_frontiers:
        pose = handover.to_aerial_frame(agent.message, node.pose)
        gain = hierarchy.node_gain(agent.vmap, pose, cfg.frustum, cfg.gain)
        if gain > cfg.gain.phi_min:
            kept.append(node)
            agent.registry.add(pose, gain)
        else:
            logging.debug(f'Shared frontier {node.id} already observed, dropped')
    agent.shared_frontiers = kept


def _fly_route(world: World, agent: AerialAgent):
    cfg = world.config
    r_safe = min(cfg.aerial_graph.r_safe, cfg.ground_graph.r_safe)
    route, agent.route = agent.route, []
    for index, target in enumerate(route):
        terminal = index == len(route) - 1
        free = hierarchy.edge_collision_free(agent.vmap, agent.pose.position, target.position, r_safe,
                                             allow_unknown=terminal)
        if not free:
            logging.warning(f'Shared path blocked in the aerial map at hop {index}, exploring from here')
            agent.unreachable.append(agent.message.target_id)
            return
        agent.pose = target
        sense_aerial(world, agent)
        agent.record(agent.message.candidate_path)


def step_aerial_agent(world: World, agent: AerialAgent, msg: handover.UnifiedGraphMessage = None) -> AerialAgent:
    """Fly the shared path on the first call, then run gain-only cycles"""
    if msg is not None and agent.message is None:
        agent.accept(msg, world.config.aerial_lift)
    if not agent.active:
        return agent
    if agent.message is None or not agent.message.frontier_ids:
        agent.active = False
        return agent
    cfg = world.config
    agent.cycle += 1
    with voxel.agent_context(AERIAL):
        if agent.tick == 0:
            sense_aerial(world, agent)
            prune_shared_frontiers(world, agent)
            agent.record()
        if agent.route:
            _fly_route(world, agent)
            return agent
        try:
            local = hierarchy.sample_with_enlargement(
                agent.vmap, None, agent.pose, cfg.aerial_graph, seed=world.scenario.seed * 1000 + 500 + agent.cycle,
                agent=hierarchy.AERIAL,
            )
        except SamplingStarved as _e:
            logging.warning(f'Aerial agent stops: {_e}')
            agent.active = False
            return agent
        gain_only = dataclasses.replace(cfg.confidence.gain_only(), c_deploy=0.0)
        levels = _plan(world, agent, local, None, cfg.aerial_graph, gain_only)
        decision = confidence.select_exploration_path(levels.candidates, gain_only, agent.registry)
    agent.decisions.append(confidence.decision_record(agent.cycle, levels.candidates, decision))
    agent.record(decision.target_path)
    if decision.target_path is None:
        agent.active = False
        return agent
    for node_id in decision.target_path.node_ids[1:]:
        agent.pose = levels.candidate.node(node_id).pose
        sense_aerial(world, agent)
        agent.record(decision.target_path)
    return agent
