"""
    Command line: scenario generation, mission runs, exports, the lookup
    benchmark and the wire-format checker.
    Usage:
    ```
    python -m tandem gen-scenario --kind clutter --seed 3 --out out/scene
    python -m tandem run --scenario out/scene/scenario.json --out out/run
    python -m tandem run --emit-default-config --out out/run
    python -m tandem export --map out/run/maps/ground.tvox --format csv --out out/export
    python -m tandem bench --map-sizes 1000,100000
    python -m tandem validate --message out/run/handover.bin
    ```
    Exit codes: 0 success, 2 validation error, 3 mission failure, 64 usage.
"""
import argparse
import binascii
import json
import logging
import pathlib
import sys

import numpy as np
import pandas as pd

from . import bench, display
from .config import MissionConfig
from .mapping import voxel
from .planning.graph import ExplorationGraph
from .protocol import codec, message
from .sim import mission, scenario

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_MISSION_FAILED = 3
EXIT_USAGE = 64


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser():
    parser = _Parser(prog='tandem', description='Ground-aerial exploration hand-over simulator')
    commands = parser.add_subparsers(dest='command', parser_class=_Parser)
    commands.required = True

    gen = commands.add_parser('gen-scenario', help='write a canned scenario')
    gen.add_argument('--kind', choices=scenario.KINDS, required=True)
    gen.add_argument('--seed', type=int, default=0)
    gen.add_argument('--out', required=True)

    run = commands.add_parser('run', help='run a full mission')
    run.add_argument('--scenario')
    run.add_argument('--config')
    run.add_argument('--out', required=True)
    run.add_argument('--emit-default-config', action='store_true',
                     help='write the default config template to --out and stop')

    export = commands.add_parser('export', help='convert a map snapshot or graph')
    export.add_argument('--map', required=True)
    export.add_argument('--format', choices=('pgm', 'csv', 'dot', 'json'), required=True)
    export.add_argument('--out', required=True)

    bench_cmd = commands.add_parser('bench', help='hash lookup flatness report')
    bench_cmd.add_argument('--map-sizes', default='1000,100000')
    bench_cmd.add_argument('--lookups', type=int, default=1_000_000)
    bench_cmd.add_argument('--out')

    validate = commands.add_parser('validate', help='check a wire frame')
    validate.add_argument('--message', required=True)
    return parser


def _gen_scenario(args):
    scene = scenario.canned(args.kind, args.seed)
    path = scenario.save_scenario(scene, args.out)
    print(path)
    return EXIT_OK


def _run(args):
    out = pathlib.Path(args.out)
    if args.emit_default_config:
        out.mkdir(parents=True, exist_ok=True)
        MissionConfig().dump(out / 'default_config.json')
        print(out / 'default_config.json')
        return EXIT_OK
    if not args.scenario:
        raise UsageError('run needs --scenario unless --emit-default-config is given')
    scene = scenario.load_scenario(args.scenario)
    config = MissionConfig.load(args.config) if args.config else MissionConfig()
    metrics = mission.run_mission(scene, config, out_dir=out)
    print(json.dumps(metrics.summary(), indent=2, sort_keys=True))
    return EXIT_MISSION_FAILED if metrics.failed else EXIT_OK


def _snapshot_table(vmap: voxel.VoxelMap) -> pd.DataFrame:
    indices, records = vmap.allocated_indices()
    states = vmap.states_of(records)
    touched = states != voxel.VoxelState.UNKNOWN
    frame = pd.DataFrame(indices[touched], columns=['i', 'j', 'k'])
    for column, values in zip(('distance', 'weight', 'trav', 'trav_weight'), records[touched].T):
        frame[column] = values
    frame['state'] = [voxel.VoxelState(s).name.lower() for s in states[touched]]
    return frame


def _occupancy_image(vmap: voxel.VoxelMap) -> np.ndarray:
    """Top-down image, brightness = occupied voxels in the column"""
    indices, records = vmap.allocated_indices()
    occupied = indices[vmap.states_of(records) == voxel.VoxelState.OCCUPIED]
    if not len(occupied):
        return np.zeros((1, 1), dtype=np.uint8)
    lo = occupied[:, :2].min(axis=0)
    shape = occupied[:, :2].max(axis=0) - lo + 1
    counts = np.zeros(shape, dtype=np.int64)
    np.add.at(counts, (occupied[:, 0] - lo[0], occupied[:, 1] - lo[1]), 1)
    return display.grid_layer_image(counts / counts.max())


def _export(args):
    source = pathlib.Path(args.map)
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    target = out / f'{source.stem}.{args.format}'
    if source.suffix == '.tvox':
        vmap = voxel.load_snapshot(source)
        if args.format == 'csv':
            _snapshot_table(vmap).to_csv(target, index=False)
        elif args.format == 'pgm':
            display.write_pgm(_occupancy_image(vmap), target)
        elif args.format == 'json':
            counts = vmap.count_states()
            target.write_text(json.dumps({
                'blocks': len(vmap.blocks), 'voxel_size': vmap.voxel_size, 'block_size': vmap.block_size,
                'unknown': counts.n_unknown, 'free': counts.n_free, 'occupied': counts.n_occupied,
            }, indent=2, sort_keys=True) + '\n')
        else:
            raise ValueError(f"A voxel snapshot can't be exported as {args.format}")
    elif source.suffix == '.json':
        graph = ExplorationGraph.from_dict(json.loads(source.read_text()))
        if args.format == 'dot':
            display.write_graph_dot(graph, target)
        elif args.format == 'json':
            graph.write_json(target)
        else:
            raise ValueError(f"A graph can't be exported as {args.format}")
    else:
        raise ValueError(f"Don't know how to export {source.name}")
    print(target)
    return EXIT_OK


def _bench(args):
    try:
        sizes = [int(s) for s in args.map_sizes.split(',') if s.strip()]
    except ValueError as _e:
        raise UsageError(f'--map-sizes must be a comma separated list of integers: {_e}') from _e
    report = bench.lookup_benchmark(sizes, args.lookups)
    print(report.to_string(index=False))
    print(f'flat: {bench.is_flat(report)}')
    if args.out:
        out = pathlib.Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        report.to_csv(out / 'bench.csv', index=False)
    return EXIT_OK


def read_frame(path) -> bytes:
    """Raw frame bytes, or a hex dump of them (whitespace ignored)"""
    data = pathlib.Path(path).read_bytes()
    text = b''.join(data.split())
    try:
        return binascii.unhexlify(text)
    except (binascii.Error, ValueError):
        return data


def _validate(args):
    packet = codec.decode_packet(read_frame(args.message))
    if packet.message is not None:
        message.validate(packet.message)
    print(f'{packet.kind.name} for mission {packet.mission_id!r}: valid')
    return EXIT_OK


commands = {
    'gen-scenario': _gen_scenario,
    'run': _run,
    'export': _export,
    'bench': _bench,
    'validate': _validate,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return commands[args.command](args)
    except UsageError as _e:
        logging.error(f'{_e}')
        return EXIT_USAGE
    except mission.MissionFailure as _e:
        logging.error(f'Mission failed: {_e}')
        return EXIT_MISSION_FAILED
    except (ValueError, OSError) as _e:
        logging.error(f'{type(_e).__name__}: {_e}')
        return EXIT_INVALID
