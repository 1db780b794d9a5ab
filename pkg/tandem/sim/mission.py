"""
    Full mission: ground exploration until it halts, the hand-over exchange,
    then aerial exploration. Everything is deterministic for a given
    scenario seed and config, so the artifacts of two runs are identical.
    Usage:
    ```
    from tandem.sim import mission, scenario
    metrics = mission.run_mission(scenario.canned('clutter'), MissionConfig(), out_dir='out/clutter')
    metrics.deployments
    ```
"""
import dataclasses
import json
import logging
import pathlib
import typing

import numpy as np
import pandas as pd

from .. import display
from ..config import MissionConfig
from ..mapping import voxel
from ..protocol import action, codec
from ..protocol.action import ActionState
from .agents import AerialAgent, GroundAgent, MissionFailure, World, step_aerial_agent, step_ground_agent
from .scenario import Scenario

__all__ = ['MissionFailure', 'MissionMetrics', 'run_mission', 'write_artifacts']

RECORD_COLUMNS = ['tick', 'agent', 'cycle', 'x', 'y', 'z', 'explored_free', 'path_terminal', 'pi_c']


@dataclasses.dataclass
class MissionMetrics:
    scenario: str
    records: typing.List[dict]
    decisions: typing.List[dict]
    deployments: typing.List[dict]
    explored: typing.Dict[str, int]
    coverage: typing.Dict[str, float]
    partial: typing.Dict[str, bool]
    failure: typing.Optional[str] = None
    message_bytes: int = 0
    snapshot_bytes: int = 0
    foreign_reads: int = 0
    exchange: typing.Dict[str, str] = dataclasses.field(default_factory=dict)

    def __repr__(self):
        return f'{self.__class__.__name__}:{self.scenario} deployments={len(self.deployments)}'

    @property
    def failed(self):
        return self.failure is not None

    def to_dataframe(self) -> pd.DataFrame:
        return pd.DataFrame(self.records, columns=RECORD_COLUMNS)

    def summary(self) -> dict:
        return {
            'scenario': self.scenario,
            'deployments': self.deployments,
            'explored': self.explored,
            'coverage': self.coverage,
            'partial': self.partial,
            'failure': self.failure,
            'message_bytes': self.message_bytes,
            'snapshot_bytes': self.snapshot_bytes,
            'foreign_reads': self.foreign_reads,
            'exchange': self.exchange,
        }


def _world_keys(aerial: AerialAgent, voxel_size):
    """Aerial explored voxels re-indexed in the ground frame"""
    if aerial is None or aerial.message is None or not len(aerial.ever_free):
        return np.zeros(0, dtype=np.int64), np.zeros((0, 3))
    centers = (voxel.unpack_indices(aerial.ever_free) + 0.5) * voxel_size
    world = aerial.message.static_transform.apply(centers)
    keys = voxel.pack_indices(np.floor(world / voxel_size).astype(np.int64))
    return np.unique(keys), world


def _explored(scene: Scenario, ground: GroundAgent, aerial: AerialAgent, voxel_size):
    aerial_keys, aerial_world = _world_keys(aerial, voxel_size)
    combined = np.union1d(ground.ever_free, aerial_keys)
    beyond = 0
    if scene.barrier_x is not None:
        beyond = int(np.count_nonzero(aerial_world[:, 0] > scene.barrier_x))
    return {
        'ground': ground.explored_free,
        'aerial': 0 if aerial is None else aerial.explored_free,
        'combined': int(len(combined)),
        'aerial_beyond_barrier': beyond,
    }


def _hand_over(world: World, ground: GroundAgent):
    config = world.config
    aerial = AerialAgent.create(world, ground.pose)

    def handler(msg):
        return aerial.accept(msg, config.aerial_lift)

    if config.two_thread:
        client, server = action.exchange_threaded(ground.message, handler, config.protocol.timeout)
    else:
        client, server = action.exchange_lockstep(ground.message, handler)
    logging.info(f'Hand-over exchange finished: client {client}, server {server}')
    return aerial, client, server


def run_mission(scene: Scenario, config: MissionConfig = None, out_dir=None) -> MissionMetrics:
    """Run the ground agent to a halt or the cycle cap, hand over when it
    deploys, then run the aerial agent. Artifacts go to out_dir when given."""
    config = config or MissionConfig()
    world = World(scene, config)
    ground = GroundAgent.create(world)
    failure = None
    try:
        while ground.active and ground.cycle < config.max_cycles:
            step_ground_agent(world, ground)
    except MissionFailure as _e:
        logging.error(f'{_e}')
        failure = str(_e)
    ground.capped = ground.active and ground.cycle >= config.max_cycles
    if ground.capped:
        logging.warning(f'Ground agent hit the cycle cap of {config.max_cycles}')

    aerial, exchange = None, {}
    deployments = []
    if ground.message is not None:
        deployments.append({'cycle': ground.deployed_at, 'target_id': ground.message.target_id})
        aerial, client, server = _hand_over(world, ground)
        exchange = {'client': client.state.value, 'server': server.state.value}
        if client.state == ActionState.DONE and server.state == ActionState.DONE:
            while aerial.active and aerial.cycle < config.aerial_max_cycles:
                step_aerial_agent(world, aerial)
            aerial.capped = aerial.active
        else:
            aerial.active = False
            logging.warning(f'Hand-over did not complete: {client.reason or server.reason}')

    voxel_size = config.voxel.voxel_size
    free_total = max(scene.free_voxel_count(voxel_size), 1)
    explored = _explored(scene, ground, aerial, voxel_size)
    agents = [ground] + ([aerial] if aerial is not None else [])
    records = sorted((r for a in agents for r in a.records), key=lambda r: (r['agent'] != 'ground', r['tick']))
    decisions = [dict(d, agent=a.name) for a in agents for d in a.decisions]
    metrics = MissionMetrics(
        scenario=scene.name,
        records=records,
        decisions=decisions,
        deployments=deployments,
        explored=explored,
        coverage={k: explored[k] / free_total for k in ('ground', 'aerial', 'combined')},
        partial={'ground': ground.capped, 'aerial': aerial is not None and aerial.capped},
        failure=failure,
        message_bytes=len(codec.encode(ground.message)) if ground.message is not None else 0,
        snapshot_bytes=voxel.snapshot_size(ground.vmap),
        foreign_reads=ground.vmap.foreign_reads + (aerial.vmap.foreign_reads if aerial else 0),
        exchange=exchange,
    )
    logging.info(f'Mission finished: {metrics}')
    if out_dir is not None:
        write_artifacts(metrics, world, ground, aerial, out_dir)
    return metrics


def _write_json(data, path):
    pathlib.Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + '\n')


def write_artifacts(metrics: MissionMetrics, world: World, ground: GroundAgent, aerial: AerialAgent, out_dir):
    out = pathlib.Path(out_dir)
    for sub in ('graphs', 'maps'):
        (out / sub).mkdir(parents=True, exist_ok=True)
    world.config.dump(out / 'config.json')
    metrics.to_dataframe().to_csv(out / 'metrics.csv', index=False, na_rep='')
    with (out / 'decisions.jsonl').open('w') as fh:
        for record in metrics.decisions:
            fh.write(json.dumps(record, sort_keys=True) + '\n')
    _write_json(metrics.summary(), out / 'summary.json')

    for agent in [ground] + ([aerial] if aerial is not None else []):
        for cycle, levels in agent.history:
            stem = out / 'graphs' / f'{agent.name}_{cycle:03d}'
            for graph in (levels.local, levels.candidate):
                graph.write_json(f'{stem}_{graph.level}.json')
                display.write_graph_dot(graph, f'{stem}_{graph.level}.dot')
        voxel.save_snapshot(agent.vmap, out / 'maps' / f'{agent.name}.tvox')
    display.write_grid_pgm(ground.grid, out / 'maps' / 'ground_trav_g.pgm')
    display.write_grid_csv(ground.grid, out / 'maps' / 'ground_grid.csv')
    if ground.message is not None:
        (out / 'handover.bin').write_bytes(codec.encode(ground.message))
    logging.info(f'Mission artifacts written to {out}')
    return out
