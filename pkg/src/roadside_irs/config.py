"""Scenario and experiment configuration, loaded from YAML."""

import dataclasses
import math
import typing
from dataclasses import dataclass, field

import numpy as np
import yaml

from .errors import ConfigError
from .geometry import UpaGeometry

SPEED_OF_LIGHT = 3e8

SCHEMES = ("proposed", "upper_bound", "cascaded_first_block", "cascaded_offline_g", "no_irs")


def _vec3(value):
    return tuple(float(v) for v in value)


@dataclass(frozen=True)
class ScenarioConfig:
    """One simulated pass of a user by the serving roadside IRS.

    Coordinates are in metres with the serving panel centred at the origin
    in the x-y plane, the road running along x and the user lane at
    ``(lane_y, lane_z)``. Powers are in dBm and normalized by the user
    transmit power internally.
    """

    carrier_frequency: float = 5.9e9
    bandwidth: float = 1e6
    vehicle_speed: float = 50.0
    block_duration: typing.Optional[float] = None
    n_b: int = 16
    m_x: int = 20
    m_y: int = 10
    spacing_ratio: float = 0.5
    d_irs: float = 4.0
    tau: int = 10
    n0: int = 30
    transmit_power_dbm: float = 12.0
    noise_power_dbm: float = -70.0
    controller_noise_dbm: float = -70.0
    gap_db: float = 9.0
    beta0_db: float = -30.0
    exp_irs_bs: float = 2.1
    exp_user_bs: float = 2.5
    exp_los: float = 2.0
    exp_user_controller: float = 2.5
    l_paths: int = 3
    min_path_separation: float = 1.0
    offline_repetitions: int = 1024
    bs_position: tuple = (0.0, 20.0, 60.0)
    lane_y: float = -1.0
    lane_z: float = 2.0
    opposite_roadside_z: float = 10.0
    c1_position: tuple = (0.0, -1.0, 0.5)
    feedback_delay_blocks: int = 0
    perfect_offline: bool = False
    upper_bound_overhead: bool = True
    irs_enabled: bool = True
    second_panel: bool = False
    hybrid_reestimation: bool = False
    ao_restarts: int = 8
    ao_max_iterations: int = 500
    upper_bound_sweeps: int = 20
    search_grid: int = 64
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "bs_position", _vec3(self.bs_position))
        object.__setattr__(self, "c1_position", _vec3(self.c1_position))
        problems = self.problems()
        if problems:
            name, msg = problems[0]
            raise ConfigError(f"{name}: {msg}")

    def problems(self):
        out = []
        for name in ("carrier_frequency", "bandwidth", "vehicle_speed", "d_irs", "spacing_ratio", "lane_z", "opposite_roadside_z"):
            if not getattr(self, name) > 0:
                out.append((name, "must be positive"))
        if self.block_duration is not None and not self.block_duration > 0:
            out.append(("block_duration", "must be positive"))
        for name in ("n_b", "m_x", "m_y", "l_paths", "ao_max_iterations", "offline_repetitions"):
            if getattr(self, name) < 1:
                out.append((name, "must be >= 1"))
        for name in ("ao_restarts", "upper_bound_sweeps", "feedback_delay_blocks"):
            if getattr(self, name) < 0:
                out.append((name, "must be >= 0"))
        if self.search_grid < 2:
            out.append(("search_grid", "must be >= 2"))
        if self.n0 < 3:
            out.append(("n0", "at least 3 pre-service blocks are needed for the trajectory fit"))
        if self.tau < 4:
            out.append(("tau", "at least 4 pilot symbols are needed per block"))
        if not out and self.tau > self.symbols_per_block:
            out.append(("tau", f"exceeds the {self.symbols_per_block} symbols of a block"))
        if len(self.bs_position) != 3 or len(self.c1_position) != 3:
            out.append(("positions", "must have three coordinates"))
        return out

    @property
    def wavelength(self):
        return SPEED_OF_LIGHT / self.carrier_frequency

    @property
    def max_doppler(self):
        return self.vehicle_speed * self.carrier_frequency / SPEED_OF_LIGHT

    @property
    def block_time(self):
        """Block duration in seconds (derived from the Doppler spread unless set)."""
        if self.block_duration is not None:
            return self.block_duration
        return 1.0 / (10.0 * self.max_doppler)

    @property
    def symbols_per_block(self):
        return int(math.floor(self.block_time * self.bandwidth + 1e-9))

    @property
    def step(self):
        """Distance travelled per block."""
        return self.vehicle_speed * self.block_time

    @property
    def n_blocks(self):
        return int(math.ceil(self.d_irs / self.step - 1e-9))

    @property
    def geom(self):
        return UpaGeometry(self.m_x, self.m_y, self.spacing_ratio)

    @property
    def m(self):
        return self.m_x * self.m_y

    @property
    def noise_normalized(self):
        return 10.0 ** ((self.noise_power_dbm - self.transmit_power_dbm) / 10.0)

    @property
    def controller_noise_normalized(self):
        return 10.0 ** ((self.controller_noise_dbm - self.transmit_power_dbm) / 10.0)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        out = {}
        for f in dataclasses.fields(self):
            val = getattr(self, f.name)
            out[f.name] = list(val) if isinstance(val, tuple) else val
        return out


SWEEPABLE = {
    "M": int,
    "tau": int,
    "d_irs": float,
    "vehicle_speed": float,
    "feedback_delay_blocks": int,
    "n0": int,
    "n_b": int,
    "transmit_power_dbm": float,
    "l_paths": int,
}


def apply_sweep(base, param, value):
    """Scenario for one sweep point; ``M`` selects a square panel."""
    if param == "M":
        side = math.isqrt(int(value))
        if side * side != int(value) or side < 1:
            raise ConfigError(f"M={value} is not a perfect square")
        return base.replace(m_x=side, m_y=side)
    return base.replace(**{param: value})


@dataclass(frozen=True)
class ExperimentSpec:
    base: ScenarioConfig = field(default_factory=ScenarioConfig)
    sweep_param: typing.Optional[str] = None
    sweep_values: tuple = ()
    schemes: tuple = SCHEMES
    n_runs: int = 20
    output: str = "results.csv"

    def points(self):
        """``(sweep_value, ScenarioConfig)`` pairs; a single point when there is no sweep."""
        if self.sweep_param is None:
            return [(None, self.base)]
        return [(v, apply_sweep(self.base, self.sweep_param, v)) for v in self.sweep_values]

    def to_dict(self):
        out = {"scenario": self.base.to_dict()}
        if self.sweep_param is not None:
            out["sweep"] = {"param": self.sweep_param, "values": list(self.sweep_values)}
        out["schemes"] = list(self.schemes)
        out["n_runs"] = self.n_runs
        out["output"] = self.output
        return out

    def to_yaml(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


# YAML loading -------------------------------------------------------------

_construct = yaml.SafeLoader("").construct_object


def _line(node):
    return node.start_mark.line + 1


def _convert(node, kind, name, path):
    if kind is tuple:
        if not isinstance(node, yaml.SequenceNode) or len(node.value) != 3:
            raise ConfigError(f"{name}: expected a list of three numbers", path, _line(node))
        return tuple(_convert(v, float, name, path) for v in node.value)
    if not isinstance(node, yaml.ScalarNode):
        raise ConfigError(f"{name}: expected a scalar", path, _line(node))
    value = _construct(node)
    optional = False
    if typing.get_origin(kind) is typing.Union:
        optional = True
        kind = [a for a in typing.get_args(kind) if a is not type(None)][0]
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{name}: value required", path, _line(node))
    if kind is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{name}: expected true/false, got {node.value!r}", path, _line(node))
    if kind is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
        raise ConfigError(f"{name}: expected an integer, got {node.value!r}", path, _line(node))
    if kind is float:
        if isinstance(value, bool):
            raise ConfigError(f"{name}: expected a number, got {node.value!r}", path, _line(node))
        try:
            out = float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{name}: expected a number, got {node.value!r}", path, _line(node)) from None
        if not np.isfinite(out):
            raise ConfigError(f"{name}: must be finite", path, _line(node))
        return out
    if kind is str:
        return str(value)
    raise ConfigError(f"{name}: unsupported type", path, _line(node))


def _mapping(node, what, path):
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError(f"{what}: expected a mapping", path, _line(node))
    seen = {}
    for k, v in node.value:
        key = _construct(k)
        if key in seen:
            raise ConfigError(f"{what}: duplicate key {key!r}", path, _line(k))
        seen[key] = (k, v)
    return seen


_SCENARIO_TYPES = typing.get_type_hints(ScenarioConfig)


def _scenario(node, path):
    kwargs = {}
    lines = {}
    for key, (knode, vnode) in _mapping(node, "scenario", path).items():
        if key not in _SCENARIO_TYPES:
            raise ConfigError(f"unknown key 'scenario.{key}'", path, _line(knode))
        kwargs[key] = _convert(vnode, _SCENARIO_TYPES[key], f"scenario.{key}", path)
        lines[key] = _line(vnode)
    try:
        return ScenarioConfig(**kwargs)
    except ConfigError as exc:
        name = str(exc).split(":")[0]
        raise ConfigError(f"scenario.{exc}", path, lines.get(name, _line(node))) from None


def _sweep(node, path):
    entries = _mapping(node, "sweep", path)
    for key, (knode, _) in entries.items():
        if key not in ("param", "values"):
            raise ConfigError(f"unknown key 'sweep.{key}'", path, _line(knode))
    if "param" not in entries or "values" not in entries:
        raise ConfigError("sweep: needs 'param' and 'values'", path, _line(node))
    param = _convert(entries["param"][1], str, "sweep.param", path)
    if param not in SWEEPABLE:
        raise ConfigError(f"sweep.param: {param!r} is not a sweepable field ({', '.join(SWEEPABLE)})", path, _line(entries["param"][1]))
    kind = SWEEPABLE[param]
    vnode = entries["values"][1]
    if isinstance(vnode, yaml.SequenceNode):
        values = tuple(_convert(v, kind, "sweep.values", path) for v in vnode.value)
    elif isinstance(vnode, yaml.MappingNode):
        rng = _mapping(vnode, "sweep.values", path)
        for key, (knode, _) in rng.items():
            if key not in ("start", "stop", "step"):
                raise ConfigError(f"unknown key 'sweep.values.{key}'", path, _line(knode))
        if set(rng) != {"start", "stop", "step"}:
            raise ConfigError("sweep.values: range needs start, stop and step", path, _line(vnode))
        start, stop, step = (_convert(rng[k][1], kind, f"sweep.values.{k}", path) for k in ("start", "stop", "step"))
        if step <= 0:
            raise ConfigError("sweep.values.step: must be positive", path, _line(rng["step"][1]))
        count = int(math.floor((stop - start) / step + 1e-9)) + 1
        values = tuple(kind(start + i * step) for i in range(max(count, 0)))
    else:
        raise ConfigError("sweep.values: expected a list or a start/stop/step range", path, _line(vnode))
    if not values:
        raise ConfigError("sweep.values: must not be empty", path, _line(vnode))
    return param, values, _line(vnode)


def parse_experiment_text(text, path=None):
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"malformed YAML: {getattr(exc, 'problem', exc)}", path, None if mark is None else mark.line + 1) from None
    if root is None:
        return ExperimentSpec()
    top = _mapping(root, "document", path)
    kwargs = {}
    for key, (knode, _) in top.items():
        if key not in ("scenario", "sweep", "schemes", "n_runs", "output"):
            raise ConfigError(f"unknown key {key!r}", path, _line(knode))
    base = _scenario(top["scenario"][1], path) if "scenario" in top else ScenarioConfig()
    kwargs["base"] = base
    if "sweep" in top:
        param, values, line = _sweep(top["sweep"][1], path)
        for v in values:
            try:
                apply_sweep(base, param, v)
            except ConfigError as exc:
                raise ConfigError(f"sweep value {v!r}: {exc}", path, line) from None
        kwargs["sweep_param"], kwargs["sweep_values"] = param, values
    if "schemes" in top:
        node = top["schemes"][1]
        if not isinstance(node, yaml.SequenceNode) or not node.value:
            raise ConfigError("schemes: expected a non-empty list", path, _line(node))
        names = tuple(_convert(v, str, "schemes", path) for v in node.value)
        for v, name in zip(node.value, names):
            if name not in SCHEMES:
                raise ConfigError(f"schemes: unknown scheme {name!r} (choose from {', '.join(SCHEMES)})", path, _line(v))
        kwargs["schemes"] = names
    if "n_runs" in top:
        node = top["n_runs"][1]
        kwargs["n_runs"] = _convert(node, int, "n_runs", path)
        if kwargs["n_runs"] < 1:
            raise ConfigError("n_runs: must be >= 1", path, _line(node))
    if "output" in top:
        kwargs["output"] = _convert(top["output"][1], str, "output", path)
    return ExperimentSpec(**kwargs)


def parse_experiment(path):
    """Load and validate an experiment file; missing keys take their defaults."""
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read file: {exc.strerror}", path) from None
    return parse_experiment_text(text, path)
