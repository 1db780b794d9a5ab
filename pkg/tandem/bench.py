"""
    Voxel hash lookup benchmark: mean time per single-voxel lookup as the
    number of allocated blocks grows. A hashed block index keeps it flat.
    Usage:
    ```
    from tandem import bench
    report = bench.lookup_benchmark([1000, 100000], lookups=1_000_000)
    print(report.to_string(index=False))
    bench.is_flat(report)
    ```
"""
import logging
import time
import typing

import numpy as np
import pandas as pd

from .config import VoxelParams
from .mapping.voxel import VoxelMap

FLATNESS_RATIO = 2.0


def allocate_blocks(n_blocks: int, block_size=2, seed=0) -> VoxelMap:
    """Map with n_blocks distinct blocks spread through a cube, one touched voxel each"""
    vmap = VoxelMap(VoxelParams(voxel_size=0.1, block_size=block_size, truncation=0.3))
    rng = np.random.default_rng(seed)
    side = int(np.ceil(n_blocks ** (1 / 3))) * 4
    keys = set()
    while len(keys) < n_blocks:
        draw = rng.integers(-side, side, size=(n_blocks, 3))
        keys.update(map(tuple, draw.tolist()))
    chosen = np.array(sorted(keys)[:n_blocks], dtype=np.int64)
    vmap.scatter(chosen * block_size, np.tile([0.05, 1.0, 0.0, 0.0], (len(chosen), 1)))
    return vmap


def time_lookups(vmap: VoxelMap, lookups: int, seed=0) -> float:
    """Mean seconds per lookup of random voxels inside allocated blocks"""
    rng = np.random.default_rng(seed)
    blocks = np.array(sorted(vmap.blocks), dtype=np.int64)
    picks = blocks[rng.integers(0, len(blocks), size=lookups)] * vmap.block_size
    picks += rng.integers(0, vmap.block_size, size=(lookups, 3))
    keys = list(map(tuple, picks.tolist()))
    lookup = vmap.lookup
    start = time.perf_counter()
    for key in keys:
        lookup(key)
    return (time.perf_counter() - start) / lookups


def lookup_benchmark(map_sizes: typing.Sequence[int], lookups=1_000_000, block_size=2, seed=0) -> pd.DataFrame:
    rows = []
    for n_blocks in map_sizes:
        vmap = allocate_blocks(n_blocks, block_size, seed)
        mean = time_lookups(vmap, lookups, seed)
        logging.info(f'{n_blocks} blocks: {mean * 1e9:.1f} ns per lookup')
        rows.append({'blocks': n_blocks, 'lookups': lookups, 'mean_ns': mean * 1e9})
    report = pd.DataFrame(rows)
    report['ratio'] = report['mean_ns'] / report['mean_ns'].iloc[0]
    return report


def is_flat(report: pd.DataFrame, ratio=FLATNESS_RATIO) -> bool:
    return bool(report['ratio'].max() <= ratio)
