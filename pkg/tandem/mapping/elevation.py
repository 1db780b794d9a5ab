"""
    Robot-centric 2.5D elevation grid with per-cell slope, roughness and step
    features, the terrain risk factor and geometric traversability.
    Usage:
    ```
    from tandem.mapping import elevation
    grid = elevation.TraversabilityGrid.create(GridParams(), center=(0.0, 0.0))
    elevation.integrate_scan(grid, cloud, robot)
    elevation.compute_features(grid)
    elevation.risk_and_traversability(grid, GeometricRiskParams())
    elevation.avg_geometric_traversability(grid, polygon)
    ```
    Cells are indexed (i, j) with i along world x and j along world y; the
    center of cell (i, j) is origin + ((i + 0.5) * res, (j + 0.5) * res).
"""
import logging
import math

import numpy as np
import pandas as pd

from ..config import GridParams, GeometricRiskParams
from ..geometry import FootprintPolygon, RobotState

ELEVATION_PERCENTILE = 0.9
FEATURE_COLUMNS = ['elevation', 'slope', 'roughness', 'step', 'risk', 'trav_g']


class TraversabilityGrid:
    """Square window of cells that follows the robot.

    Absent values are stored as NaN in every layer.
    """

    def __init__(self, params: GridParams, origin_index=(0, 0), size=None):
        self.params = params
        self.resolution = params.resolution
        n_cells = size if size is not None else int(round(params.window / params.resolution))
        self.width = self.height = n_cells
        self.origin_index = (int(origin_index[0]), int(origin_index[1]))
        self.layers = {
            name: np.full((self.width, self.height), np.nan) for name in FEATURE_COLUMNS
        }

    @classmethod
    def create(cls, params: GridParams, center=(0.0, 0.0)):
        grid = cls(params)
        grid.origin_index = grid._origin_index_for(center[0], center[1])
        return grid

    @classmethod
    def from_elevation(cls, elevation, resolution, origin=(0.0, 0.0)):
        """Grid with given elevations, origin snapped to the resolution"""
        elevation = np.asarray(elevation, dtype=float)
        if elevation.shape[0] != elevation.shape[1]:
            raise ValueError(f"Elevation grid must be square, got shape {elevation.shape}")
        params = GridParams(resolution=resolution, window=elevation.shape[0] * resolution)
        origin_index = (int(round(origin[0] / resolution)), int(round(origin[1] / resolution)))
        grid = cls(params, origin_index, size=elevation.shape[0])
        grid.layers['elevation'][:] = elevation
        return grid

    def __repr__(self):
        return f'{self.__class__.__name__}:{self.width}x{self.height}@{self.origin}'

    @property
    def origin(self):
        return (self.origin_index[0] * self.resolution, self.origin_index[1] * self.resolution)

    def __getattr__(self, name):
        layers = self.__dict__.get('layers')
        if layers is not None and name in layers:
            return layers[name]
        raise AttributeError(name)

    def _origin_index_for(self, x, y):
        half = self.width * self.resolution / 2.0
        return (int(math.floor((x - half) / self.resolution)),
                int(math.floor((y - half) / self.resolution)))

    def recenter(self, x, y):
        """Shift the window so it is centered on (x, y), dropping cells that
        leave it"""
        new_index = self._origin_index_for(x, y)
        di = new_index[0] - self.origin_index[0]
        dj = new_index[1] - self.origin_index[1]
        if di == 0 and dj == 0:
            return
        for name, layer in self.layers.items():
            shifted = np.full_like(layer, np.nan)
            src_i = slice(max(di, 0), min(self.width, self.width + di))
            dst_i = slice(max(-di, 0), min(self.width, self.width - di))
            src_j = slice(max(dj, 0), min(self.height, self.height + dj))
            dst_j = slice(max(-dj, 0), min(self.height, self.height - dj))
            if src_i.start < src_i.stop and src_j.start < src_j.stop:
                shifted[dst_i, dst_j] = layer[src_i, src_j]
            self.layers[name] = shifted
        self.origin_index = new_index

    def cell_centers(self):
        """(W, H) arrays of world x and y of every cell center"""
        x0, y0 = self.origin
        xs = x0 + (np.arange(self.width) + 0.5) * self.resolution
        ys = y0 + (np.arange(self.height) + 0.5) * self.resolution
        return np.meshgrid(xs, ys, indexing='ij')

    def world_to_cell(self, x, y):
        i = np.floor(np.asarray(x, dtype=float) / self.resolution).astype(np.int64) - self.origin_index[0]
        j = np.floor(np.asarray(y, dtype=float) / self.resolution).astype(np.int64) - self.origin_index[1]
        return i, j

    def contains_cell(self, i, j):
        return (i >= 0) & (i < self.width) & (j >= 0) & (j < self.height)

    def _sample(self, layer, x, y):
        i, j = self.world_to_cell(x, y)
        values = np.full(np.shape(i), np.nan)
        inside = self.contains_cell(i, j)
        values[inside] = self.layers[layer][i[inside], j[inside]]
        return values

    def elevation_at(self, x, y):
        """Vectorized elevation lookup, NaN where unobserved or outside"""
        return self._sample('elevation', x, y)

    def trav_at(self, x, y):
        return self._sample('trav_g', x, y)

    @property
    def observed(self):
        return ~np.isnan(self.layers['elevation'])

    def to_dataframe(self) -> pd.DataFrame:
        xs, ys = self.cell_centers()
        ii, jj = np.meshgrid(np.arange(self.width), np.arange(self.height), indexing='ij')
        data = {'i': ii.ravel(), 'j': jj.ravel(), 'x': xs.ravel(), 'y': ys.ravel()}
        for name in FEATURE_COLUMNS:
            data[name] = self.layers[name].ravel()
        return pd.DataFrame(data)


def integrate_scan(grid: TraversabilityGrid, cloud, robot: RobotState) -> TraversabilityGrid:
    """Write the 90th percentile z of every hit cell, after recentering the
    window on the robot. Points above max_point_height over the robot are
    ignored."""
    points = np.asarray(cloud, dtype=float).reshape(-1, 3)
    if len(points) == 0:
        return grid
    grid.recenter(robot.x, robot.y)
    points = points[points[:, 2] <= robot.z + grid.params.max_point_height]
    i, j = grid.world_to_cell(points[:, 0], points[:, 1])
    inside = grid.contains_cell(i, j)
    if not np.any(inside):
        return grid
    cells = i[inside] * grid.height + j[inside]
    z = points[inside, 2]
    order = np.lexsort((z, cells))
    cells, z = cells[order], z[order]
    unique_cells, starts, counts = np.unique(cells, return_index=True, return_counts=True)
    position = (counts - 1) * ELEVATION_PERCENTILE
    lower = np.floor(position).astype(np.int64)
    upper = np.minimum(lower + 1, counts - 1)
    fraction = position - lower
    low_z, high_z = z[starts + lower], z[starts + upper]
    values = low_z + fraction * (high_z - low_z)
    elevation = grid.layers['elevation']
    elevation.flat[unique_cells] = values
    logging.debug(f'Integrated {len(z)} points into {len(unique_cells)} cells')
    return grid


def _window_stack(layer):
    """Stack the 3x3 neighbourhood of every cell: (9, W, H) values and the
    matching offsets (di, dj)"""
    padded = np.pad(layer, 1, constant_values=np.nan)
    width, height = layer.shape
    offsets = [(di, dj) for di in (-1, 0, 1) for dj in (-1, 0, 1)]
    stack = np.stack([
        padded[1 + di:1 + di + width, 1 + dj:1 + dj + height] for di, dj in offsets
    ])
    return stack, np.array(offsets, dtype=float)


def compute_features(grid: TraversabilityGrid) -> TraversabilityGrid:
    """Plane fit over each 3x3 window: slope from the normal, roughness as
    the residual standard deviation, step as the largest neighbour gap.
    Cells with fewer than 3 observed neighbours get no features."""
    elevation = grid.layers['elevation']
    stack, offsets = _window_stack(elevation)
    valid = ~np.isnan(stack)
    center = elevation
    neighbours = valid.sum(axis=0) - valid[4]
    usable = (~np.isnan(center)) & (neighbours >= 3)

    slope = np.full(elevation.shape, np.nan)
    roughness = np.full(elevation.shape, np.nan)
    step = np.full(elevation.shape, np.nan)
    if np.any(usable):
        z = np.where(valid, stack, 0.0)[:, usable]
        w = valid[:, usable].astype(float)
        dx = offsets[:, 0:1] * grid.resolution
        dy = offsets[:, 1:2] * grid.resolution
        sx, sy, n = (w * dx).sum(0), (w * dy).sum(0), w.sum(0)
        sxx, syy, sxy = (w * dx * dx).sum(0), (w * dy * dy).sum(0), (w * dx * dy).sum(0)
        normal = np.stack([
            np.stack([sxx, sxy, sx], axis=-1),
            np.stack([sxy, syy, sy], axis=-1),
            np.stack([sx, sy, n], axis=-1),
        ], axis=-2)
        rhs = np.stack([(w * dx * z).sum(0), (w * dy * z).sum(0), (w * z).sum(0)], axis=-1)
        coeffs = np.einsum('nij,nj->ni', np.linalg.pinv(normal), rhs)
        a, b, c = coeffs[:, 0], coeffs[:, 1], coeffs[:, 2]
        slope[usable] = np.arctan(np.hypot(a, b))
        residual = z - (a * dx + b * dy + c)
        roughness[usable] = np.sqrt((w * residual ** 2).sum(0) / n)
        gaps = np.where(valid[:, usable], np.abs(z - z[4]), 0.0)
        step[usable] = gaps.max(axis=0)

    grid.layers['slope'] = slope
    grid.layers['roughness'] = roughness
    grid.layers['step'] = step
    return grid


def risk_factor(slope, roughness, step, params: GeometricRiskParams):
    risk = (params.w_s * np.asarray(slope) / params.s_crit
            + params.w_r * np.asarray(roughness) / params.r_crit
            + params.w_h * np.asarray(step) / params.h_crit)
    return np.clip(risk, 0.0, 1.0)


def geometric_traversability(slope, roughness, step, params: GeometricRiskParams):
    """1 - risk, zeroed wherever a feature reaches its critical value"""
    slope, roughness, step = np.asarray(slope), np.asarray(roughness), np.asarray(step)
    trav = 1.0 - risk_factor(slope, roughness, step, params)
    with np.errstate(invalid='ignore'):
        blocked = (slope >= params.s_crit) | (roughness >= params.r_crit) | (step >= params.h_crit)
    return np.where(blocked, 0.0, trav)


def risk_and_traversability(grid: TraversabilityGrid, params: GeometricRiskParams) -> TraversabilityGrid:
    slope, roughness, step = grid.layers['slope'], grid.layers['roughness'], grid.layers['step']
    has_features = ~(np.isnan(slope) | np.isnan(roughness) | np.isnan(step))
    risk = np.full(slope.shape, np.nan)
    trav = np.full(slope.shape, np.nan)
    risk[has_features] = risk_factor(slope[has_features], roughness[has_features],
                                     step[has_features], params)
    trav[has_features] = geometric_traversability(slope[has_features], roughness[has_features],
                                                  step[has_features], params)
    grid.layers['risk'] = risk
    grid.layers['trav_g'] = trav
    return grid


def cells_in_polygon(grid: TraversabilityGrid, poly: FootprintPolygon):
    """All (i, j) whose cell center lies inside or on the polygon"""
    minx, miny, maxx, maxy = poly.bounds
    x0, y0 = grid.origin
    res = grid.resolution
    i_lo = max(int(math.floor((minx - x0) / res - 0.5)), 0)
    i_hi = min(int(math.ceil((maxx - x0) / res - 0.5)), grid.width - 1)
    j_lo = max(int(math.floor((miny - y0) / res - 0.5)), 0)
    j_hi = min(int(math.ceil((maxy - y0) / res - 0.5)), grid.height - 1)
    if i_lo > i_hi or j_lo > j_hi:
        return []
    ii, jj = np.meshgrid(np.arange(i_lo, i_hi + 1), np.arange(j_lo, j_hi + 1), indexing='ij')
    ii, jj = ii.ravel(), jj.ravel()
    inside = poly.contains_xy(x0 + (ii + 0.5) * res, y0 + (jj + 0.5) * res)
    return list(zip(ii[inside].tolist(), jj[inside].tolist()))


def avg_geometric_traversability(grid: TraversabilityGrid, poly: FootprintPolygon):
    """Mean trav_g over observed cells under the polygon, None if there are none"""
    cells = cells_in_polygon(grid, poly)
    if not cells:
        return None
    ii, jj = np.array(cells).T
    values = grid.layers['trav_g'][ii, jj]
    values = values[~np.isnan(values)]
    if len(values) == 0:
        return None
    return float(values.mean())
