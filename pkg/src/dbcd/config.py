"""Experiment configuration: dataclasses, JSON parsing and dotted overrides."""

import copy
import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from dbcd.baselines import SgdConfig
from dbcd.model import COUPLINGS, INIT_SCHEMES, LOSSES, REDUCTIONS, BcdHyper
from dbcd.network import AGGREGATION_MODES, AggregationConfig

MODES = ("csgd", "dsgd", "cbcd", "ibcd", "dbcd")
SHARE_MODES = ("previous", "current")

GRID = {
    "neighbors": (0, 5, 10, 50),
    "layers": (4, 8, 16, 32, 64),
    "hidden_dim": (32, 64, 128, 256),
    "mu": (0.01, 0.1, 0.5, 0.9),
    "gamma": (0.1, 0.5, 1.0, 5.0, 10.0),
    "alpha": (0.1, 0.5, 1.0, 5.0, 10.0),
}


class ConfigError(ValueError):
    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path


class SchemaError(ConfigError):
    pass


class ValueOutOfRange(ConfigError):
    pass


@dataclass
class DataConfig:
    source: str = "blobs"
    devices: int = 10
    per_device: int = 200
    dims: int = 10
    classes: int = 4
    heterogeneity: float = 0.5
    separation: float = 5.0
    noise: float = 1.0
    n_groups: int = 3
    group_spread: float = 0.1
    idx_images: str = ""
    idx_labels: str = ""
    idx_limit: int = 0
    profiles_csv: str = ""
    sparsity_r: float = 100.0


@dataclass
class GraphConfig:
    max_degree: int = 50
    cost_low: float = 0.1
    cost_high: float = 1.0
    edge_prob: float = 1.0
    cost_csv: str = ""


@dataclass
class BudgetConfig:
    exchanges_per_hour: int = 0
    hours: int = 10


@dataclass
class ExperimentConfig:
    mode: str = "dbcd"
    layers: int = 4
    hidden_dim: int = 128
    neighbors: int = 50
    gamma: float = 1.0
    alpha: float = 1.0
    mu: float = 0.01
    lambda_w: float = 0.0
    lambda_v: float = 0.0
    loss: str = "cross_entropy"
    loss_reduction: str = "sum"
    coupling: str = "printed"
    vout_max_iter: int = 50
    vout_tol: float = 1e-8
    init: str = "identity"
    shared_init: bool = True
    aggregation: str = "similarity"
    similarity_floor: float = 0.0
    share: str = "previous"
    mask_shares: bool = False
    staleness: int = 0
    rounds: int = 50
    patience: int = 10
    plateau_tol: float = 1e-4
    learning_rate: float = 0.05
    batch_size: int = 128
    seed_data: int = 0
    seed_init: int = 0
    seed_graph: int = 0
    threads: int = 1
    strict_grid: bool = False
    wall_clock: bool = False
    data: DataConfig = field(default_factory=DataConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    budget: BudgetConfig = field(default_factory=BudgetConfig)

    def bcd_hyper(self):
        return BcdHyper(
            gamma=self.gamma, alpha=self.alpha, mu=self.mu,
            lambda_w=self.lambda_w, lambda_v=self.lambda_v, loss=self.loss,
            vout_max_iter=self.vout_max_iter, vout_tol=self.vout_tol,
            coupling=self.coupling, loss_reduction=self.loss_reduction,
        )

    def aggregation_config(self):
        return AggregationConfig(self.mu, self.aggregation, self.similarity_floor)

    def sgd_config(self, shuffle_seed=0):
        return SgdConfig(self.learning_rate, self.batch_size, shuffle_seed)

    def to_dict(self):
        return dataclasses.asdict(self)

    def replace(self, **overrides):
        """Copy with dotted-key overrides, e.g. ``replace(**{"data.devices": 5})``."""
        raw = self.to_dict()
        for key, value in overrides.items():
            _set_dotted(raw, key, value)
        return parse_config(raw)


_CHOICES = {
    "/mode": MODES,
    "/loss": LOSSES,
    "/loss_reduction": REDUCTIONS,
    "/coupling": COUPLINGS,
    "/init": INIT_SCHEMES,
    "/aggregation": AGGREGATION_MODES,
    "/share": SHARE_MODES,
    "/data/source": ("blobs", "idx"),
}

# (path, lower, upper, lower_inclusive)
_RANGES = [
    ("/layers", 1, None, True), ("/hidden_dim", 1, None, True), ("/neighbors", 0, None, True),
    ("/gamma", 0, None, False), ("/alpha", 0, None, False), ("/mu", 0, 1, True),
    ("/lambda_w", 0, None, True), ("/lambda_v", 0, None, True),
    ("/vout_max_iter", 1, None, True), ("/vout_tol", 0, None, False),
    ("/similarity_floor", 0, None, True), ("/staleness", 0, None, True),
    ("/rounds", 1, None, True), ("/patience", 0, None, True), ("/plateau_tol", 0, None, True),
    ("/learning_rate", 0, None, True), ("/batch_size", 1, None, True), ("/threads", 1, None, True),
    ("/data/devices", 1, None, True), ("/data/per_device", 1, None, True),
    ("/data/dims", 1, None, True), ("/data/classes", 2, None, True),
    ("/data/heterogeneity", 0, 1, True), ("/data/separation", 0, None, True),
    ("/data/noise", 0, None, True), ("/data/n_groups", 1, None, True),
    ("/data/group_spread", 0, None, True), ("/data/idx_limit", 0, None, True),
    ("/data/sparsity_r", 0, 100, False),
    ("/graph/max_degree", 1, None, True), ("/graph/cost_low", 0, None, False),
    ("/graph/cost_high", 0, None, False), ("/graph/edge_prob", 0, 1, True),
    ("/budget/exchanges_per_hour", 0, None, True), ("/budget/hours", 1, 10, True),
]


def _coerce(path, value, ftype):
    if ftype is bool:
        if not isinstance(value, bool):
            raise SchemaError(path, f"expected a boolean, got {value!r}")
        return value
    if ftype is int:
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise SchemaError(path, f"expected an integer, got {value!r}")
        return value
    if ftype is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise SchemaError(path, f"expected a number, got {value!r}")
        return float(value)
    if ftype is str:
        if not isinstance(value, str):
            raise SchemaError(path, f"expected a string, got {value!r}")
        return value
    raise TypeError(ftype)


def _build(cls, raw, prefix):
    if not isinstance(raw, dict):
        raise SchemaError(prefix or "/", "expected an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    hints = typing.get_type_hints(cls)
    for key in raw:
        if key not in known:
            raise SchemaError(f"{prefix}/{key}", "unknown key")
    kwargs = {}
    for name, f in known.items():
        if name not in raw:
            continue
        path = f"{prefix}/{name}"
        ftype = hints[name]
        if dataclasses.is_dataclass(ftype):
            kwargs[name] = _build(ftype, raw[name], path)
        else:
            kwargs[name] = _coerce(path, raw[name], ftype)
    return cls(**kwargs)


def _lookup(cfg, path):
    obj = cfg
    for part in path.strip("/").split("/"):
        obj = getattr(obj, part)
    return obj


def validate(cfg):
    for path, choices in _CHOICES.items():
        if _lookup(cfg, path) not in choices:
            raise ValueOutOfRange(path, f"must be one of {list(choices)}, got {_lookup(cfg, path)!r}")
    for path, lo, hi, lo_incl in _RANGES:
        v = _lookup(cfg, path)
        if lo is not None and (v < lo or (v == lo and not lo_incl)):
            raise ValueOutOfRange(path, f"{v} is below the allowed range")
        if hi is not None and v > hi:
            raise ValueOutOfRange(path, f"{v} is above the allowed range")
    if cfg.graph.cost_low > cfg.graph.cost_high:
        raise ValueOutOfRange("/graph/cost_low", "must not exceed cost_high")
    if cfg.data.source == "idx" and not (cfg.data.idx_images and cfg.data.idx_labels):
        raise ValueOutOfRange("/data/idx_images", "idx source needs idx_images and idx_labels")
    if cfg.strict_grid:
        for key, allowed in GRID.items():
            v = getattr(cfg, key)
            if not any(abs(v - a) <= 1e-12 for a in allowed):
                raise ValueOutOfRange(f"/{key}", f"{v} is not on the search grid {list(allowed)}")
    return cfg


def parse_value(text):
    """Override values are JSON when they parse as JSON, plain strings otherwise."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _set_dotted(raw, key, value):
    parts = key.split(".")
    node = raw
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise SchemaError("/" + "/".join(parts), "cannot descend into a scalar")
    node[parts[-1]] = value


def parse_config(source=None, overrides=()):
    """Build a validated ``ExperimentConfig``.

    ``source`` is a path to a JSON file, an already-decoded dict, or None for
    defaults. ``overrides`` holds ``"dotted.key=value"`` strings or
    ``(key, value)`` pairs applied on top.
    """
    if source is None:
        raw = {}
    elif isinstance(source, dict):
        raw = copy.deepcopy(source)
    else:
        try:
            raw = json.loads(Path(source).read_text())
        except json.JSONDecodeError as exc:
            raise SchemaError("/", f"invalid JSON: {exc}") from None
    for item in overrides:
        if isinstance(item, str):
            if "=" not in item:
                raise SchemaError("/", f"override {item!r} is not key=value")
            key, text = item.split("=", 1)
            value = parse_value(text)
        else:
            key, value = item
        _set_dotted(raw, key.strip(), value)
    return validate(_build(ExperimentConfig, raw, ""))


def dump_config(cfg, path):
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
