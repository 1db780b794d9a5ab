"""
    Parameter sets for mapping, planning, protocol and mission runs.
    Every default is an operational value for the simulated platforms and
    can be overridden from a YAML or JSON file.
    Usage:
    ```
    from tandem.config import MissionConfig
    config = MissionConfig.load('mission.yaml')
    config.ground_graph.n_samples
    # write the self-describing template
    MissionConfig().dump('default_config.json')
    ```
"""
import dataclasses
import json
import math
import pathlib
import typing

import yaml


class ConfigurationError(ValueError):
    """Raised when parameters or input files are inconsistent"""


def _require(condition, message):
    if not condition:
        raise ConfigurationError(message)


@dataclasses.dataclass
class GridParams:
    """Robot-centric elevation grid"""
    resolution: float = 0.05
    window: float = 10.0
    max_point_height: float = 1.0

    def __post_init__(self):
        _require(self.resolution > 0, f"Grid resolution must be positive, got {self.resolution}")
        _require(self.window > self.resolution, f"Grid window {self.window} smaller than one cell")


@dataclasses.dataclass
class GeometricRiskParams:
    """Weights and hard limits of the terrain risk factor"""
    w_s: float = 0.4
    w_r: float = 0.3
    w_h: float = 0.3
    s_crit: float = 0.45
    r_crit: float = 0.10
    h_crit: float = 0.25

    def __post_init__(self):
        weights = (self.w_s, self.w_r, self.w_h)
        _require(all(w >= 0 for w in weights), f"Risk weights must be non-negative, got {weights}")
        _require(abs(sum(weights) - 1.0) <= 1e-9, f"Risk weights must sum to 1, got {sum(weights)}")
        crits = (self.s_crit, self.r_crit, self.h_crit)
        _require(all(c > 0 for c in crits), f"Critical values must be positive, got {crits}")


@dataclasses.dataclass
class SemanticParams:
    """Alpha value of each terrain class, in class order"""
    alpha_untraversable: float = 0.0
    alpha_undesirable: float = 0.25
    alpha_rough: float = 0.6
    alpha_optimal: float = 1.0

    def __post_init__(self):
        table = self.alphas()
        _require(table[0] == 0.0, "Untraversable terrain must have alpha 0")
        _require(all(a < b for a, b in zip(table, table[1:])),
                 f"Alpha must increase strictly across classes, got {table}")
        _require(table[-1] <= 1.0, f"Alpha of optimal terrain exceeds 1: {table[-1]}")

    def alphas(self):
        return (self.alpha_untraversable, self.alpha_undesirable,
                self.alpha_rough, self.alpha_optimal)


@dataclasses.dataclass
class VoxelParams:
    voxel_size: float = 0.1
    block_size: int = 16
    truncation: float = 0.3
    # defaults to voxel_size when unset
    occupancy_threshold: typing.Optional[float] = None

    def __post_init__(self):
        _require(self.voxel_size > 0, f"Voxel size must be positive, got {self.voxel_size}")
        _require(self.block_size >= 1, f"Block size must be at least 1, got {self.block_size}")
        _require(self.truncation >= self.voxel_size,
                 f"Truncation {self.truncation} must not be below voxel size {self.voxel_size}")
        if self.occupancy_threshold is None:
            self.occupancy_threshold = self.voxel_size


@dataclasses.dataclass
class GainParams:
    """Volumetric gain weights and the frontier threshold"""
    w_u: float = 1.0
    w_f: float = 0.1
    w_o: float = 0.5
    phi_min: float = 1.3

    def __post_init__(self):
        _require(self.w_u >= 0 and self.w_f >= 0, "Gain weights must be non-negative")
        _require(self.w_o > 0, f"Occupied weight must be positive, got {self.w_o}")


@dataclasses.dataclass
class FrustumParams:
    hfov: float = 1.5 * math.pi
    vfov: float = math.pi / 3
    max_range: float = 3.0
    census_stride: int = 1

    def __post_init__(self):
        _require(0 < self.hfov < 2 * math.pi, f"Horizontal FOV out of range: {self.hfov}")
        _require(0 < self.vfov < 2 * math.pi, f"Vertical FOV out of range: {self.vfov}")
        _require(self.max_range > 0, f"Frustum range must be positive, got {self.max_range}")
        _require(self.census_stride >= 1, "Census stride must be at least 1")


@dataclasses.dataclass
class BoxParams:
    """Ground robot bounding box"""
    length: float = 1.0
    width: float = 0.7
    height: float = 0.8

    def __post_init__(self):
        _require(min(self.length, self.width, self.height) > 0, "Box dimensions must be positive")


@dataclasses.dataclass
class GraphParams:
    n_samples: int = 300
    k: int = 7
    window: typing.Tuple[float, float, float] = (20.0, 20.0, 6.0)
    r_safe: float = 0.4
    z_off: float = 0.3
    rho: float = 2.0
    dtw_min: float = 4.0
    min_nodes: int = 10
    climb_limit: float = 0.45
    max_enlargements: int = 2
    enlarge_factor: float = 1.5

    def __post_init__(self):
        self.window = tuple(float(v) for v in self.window)
        _require(len(self.window) == 3 and min(self.window) > 0, f"Invalid window {self.window}")
        _require(self.n_samples >= 1 and self.k >= 1, "Sample and neighbour counts must be positive")
        _require(self.r_safe > 0, f"Safety radius must be positive, got {self.r_safe}")


@dataclasses.dataclass
class ConfidenceParams:
    w_g: float = 1.0
    w_sem: float = 1.0
    w_v: float = 0.3
    c_crit: float = 0.75
    lam: float = 1.0
    c_deploy: float = 0.45
    z_halfspan: float = 0.25

    def __post_init__(self):
        _require(min(self.w_g, self.w_sem, self.w_v) >= 0, "Confidence weights must be non-negative")
        _require(0 < self.c_crit < 1, f"C_crit must lie in (0, 1), got {self.c_crit}")
        _require(self.lam >= 0, f"Penalty lambda must be non-negative, got {self.lam}")
        _require(0 <= self.c_deploy <= 1, f"C_deploy must lie in [0, 1], got {self.c_deploy}")
        _require(self.z_halfspan > 0, "Semantic z half span must be positive")

    def gain_only(self):
        """Aerial scoring: traversability terms switched off"""
        return dataclasses.replace(self, w_g=0.0, w_sem=0.0)


@dataclasses.dataclass
class SensorParams:
    lidar_rays: int = 240
    lidar_channels: int = 48
    lidar_vfov: float = math.pi / 2
    lidar_range: float = 8.0
    mount_height: float = 0.2
    camera_pixels: int = 48

    def __post_init__(self):
        _require(self.lidar_rays > 0 and self.lidar_channels > 0, "Lidar pattern must be non-empty")
        _require(self.lidar_range > 0, "Lidar range must be positive")
        _require(self.camera_pixels >= 2, "Camera needs at least 2 pixels per side")


@dataclasses.dataclass
class ProtocolParams:
    timeout: float = 5.0
    mission_id: str = 'tandem'


@dataclasses.dataclass
class MissionConfig:
    grid: GridParams = dataclasses.field(default_factory=GridParams)
    risk: GeometricRiskParams = dataclasses.field(default_factory=GeometricRiskParams)
    semantic: SemanticParams = dataclasses.field(default_factory=SemanticParams)
    voxel: VoxelParams = dataclasses.field(default_factory=VoxelParams)
    gain: GainParams = dataclasses.field(default_factory=GainParams)
    frustum: FrustumParams = dataclasses.field(default_factory=FrustumParams)
    box: BoxParams = dataclasses.field(default_factory=BoxParams)
    ground_graph: GraphParams = dataclasses.field(default_factory=GraphParams)
    aerial_graph: GraphParams = dataclasses.field(default_factory=lambda: GraphParams(r_safe=0.5))
    confidence: ConfidenceParams = dataclasses.field(default_factory=ConfidenceParams)
    sensor: SensorParams = dataclasses.field(default_factory=SensorParams)
    protocol: ProtocolParams = dataclasses.field(default_factory=ProtocolParams)
    max_cycles: int = 40
    aerial_max_cycles: int = 20
    aerial_lift: float = 0.4
    two_thread: bool = False

    def to_dict(self):
        return dataclasses.asdict(self)

    def dump(self, path):
        pathlib.Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + '\n')

    @classmethod
    def from_dict(cls, data):
        return _from_dict(cls, data or {})

    @classmethod
    def load(cls, path):
        """Load a YAML or JSON config file; missing keys keep their defaults"""
        try:
            data = yaml.safe_load(pathlib.Path(path).read_text())
        except yaml.YAMLError as _e:
            raise ConfigurationError(f"Can't parse config file {path}: {_e}") from _e
        if data is not None and not isinstance(data, dict):
            raise ConfigurationError(f"Config file {path} must hold a mapping")
        return cls.from_dict(data)


def _from_dict(cls, data):
    if not isinstance(data, dict):
        raise ConfigurationError(f"Expected a mapping for {cls.__name__}, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigurationError(f"Unknown keys for {cls.__name__}: {', '.join(sorted(unknown))}")
    kwargs = {}
    for name, value in data.items():
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            kwargs[name] = _from_dict(hint, value)
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as _e:
        raise ConfigurationError(f"Invalid values for {cls.__name__}: {_e}") from _e
