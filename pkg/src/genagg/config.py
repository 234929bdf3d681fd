"""Run configuration: TOML files with [data], [model], [aggregator], [optim], [train].

A loaded config is normalized (every default filled in) and can be written
back with :meth:`RunConfig.to_toml`; the ``[recorded]`` section lists fixed
numerical conventions so every run directory is self-describing.
"""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import tensor as T
from .aggregators import AggregatorSpec
from .errors import ConfigError
from .graph import MULTICLASS, MULTILABEL, Graph, NodeLabels, generate_synthetic, init_node_features_from_edges, load_graph
from .layers import MSG_EPS, LayerConfig, NetworkConfig
from .training import ADAM_BETA1, ADAM_BETA2, ADAM_EPS, SPLIT_FRACTIONS

RECORDED = {
    "norm_eps": T.NORM_EPS,
    "batch_norm_momentum": T.BN_MOMENTUM,
    "l2_guard": T.L2_GUARD,
    "mlp_hidden_layers": 1,
    "weight_init": "uniform(+-1/sqrt(fan_in))",
    "dropout_placement": "after ReLU (res_pre: before GraphConv)",
    "head_placement": "directly after last block",
    "param_init": 1.0,
    "partition_redraw": "every epoch",
    "layer_numbering": "1-based",
}


@dataclass
class DataConfig:
    source: str = "synthetic"
    generator: str = "community"
    params: dict = field(default_factory=dict)
    edges: str = ""
    node_features: str = ""
    edge_features: str = ""
    labels: str = ""
    label_kind: str = MULTILABEL
    directed: bool = False
    init_node_features: bool = False


@dataclass
class ModelConfig:
    kind: str = "ResGEN"
    depth: int = 3
    width: int = 64
    norm: str = "layer"
    msgnorm: bool = False
    learn_msg_scale: bool = True
    dropout: float = 0.0
    epsilon_msg: float = MSG_EPS


@dataclass
class OptimConfig:
    lr: float = 0.01
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS


@dataclass
class TrainConfig:
    epochs: int = 100
    partitions: int = 1
    eval_partitions: int = 1
    split: list = field(default_factory=lambda: list(SPLIT_FRACTIONS))


@dataclass
class AggregatorConfig:
    family: str = "softmax"
    param: float = 1.0
    learn_param: bool | None = None
    degree_exponent: float = 0.0
    learn_degree_exponent: bool = False
    canonical: bool = False


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/out"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    aggregator: AggregatorConfig = field(default_factory=AggregatorConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def aggregator_spec(self) -> AggregatorSpec:
        a = self.aggregator
        return AggregatorSpec(
            a.family, float(a.param), bool(a.learn_param),
            float(a.degree_exponent), a.learn_degree_exponent, a.canonical,
        )

    def network_config(self, in_dim: int, out_dim: int, edge_dim: int, task: str) -> NetworkConfig:
        m = self.model
        layer = LayerConfig(
            width=m.width, aggregator=self.aggregator_spec(), norm=m.norm,
            msgnorm=m.msgnorm, learn_msg_scale=m.learn_msg_scale,
            dropout=m.dropout, epsilon_msg=m.epsilon_msg,
        )
        return NetworkConfig(m.kind, m.depth, layer, in_dim, edge_dim, out_dim, task)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["recorded"] = dict(RECORDED)
        return d

    def to_toml(self) -> str:
        header = "# normalized run configuration (all defaults explicit)\n"
        return header + tomli_w.dumps(self.to_dict())

    def save(self, path) -> None:
        Path(path).write_text(self.to_toml(), encoding="utf-8")


_SECTIONS = {
    "data": DataConfig,
    "model": ModelConfig,
    "aggregator": AggregatorConfig,
    "optim": OptimConfig,
    "train": TrainConfig,
}


def _coerce(section: str, cls, raw: dict):
    if not isinstance(raw, dict):
        raise ConfigError(f"[{section}] must be a table")
    known = {f.name: f for f in fields(cls)}
    defaults = cls()
    out = {}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"unknown field {section}.{key}")
        ref = getattr(defaults, key)
        where = f"{section}.{key}"
        if isinstance(ref, bool) or (ref is None and key.startswith("learn")):
            if not isinstance(value, bool):
                raise ConfigError(f"{where} must be true or false, got {value!r}")
        elif isinstance(ref, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{where} must be an integer, got {value!r}")
        elif isinstance(ref, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{where} must be a number, got {value!r}")
            value = float(value)
        elif isinstance(ref, str):
            if not isinstance(value, str):
                raise ConfigError(f"{where} must be a string, got {value!r}")
        elif isinstance(ref, (list, dict)) and not isinstance(value, type(ref)):
            raise ConfigError(f"{where} must be a {type(ref).__name__}")
        out[key] = value
    return cls(**out)


def config_from_dict(raw: dict) -> RunConfig:
    raw = dict(raw)
    kwargs = {}
    for key in ("seed", "out"):
        if key in raw:
            kwargs[key] = raw.pop(key)
    if "seed" in kwargs and (isinstance(kwargs["seed"], bool) or not isinstance(kwargs["seed"], int)):
        raise ConfigError(f"seed must be an integer, got {kwargs['seed']!r}")
    if "out" in kwargs and not isinstance(kwargs["out"], str):
        raise ConfigError("out must be a string")
    recorded = raw.pop("recorded", None)
    if recorded is not None:
        for k, v in recorded.items():
            if k not in RECORDED or RECORDED[k] != v:
                raise ConfigError(f"recorded.{k} is fixed at {RECORDED.get(k)!r}; got {v!r}")
    for section, cls in _SECTIONS.items():
        kwargs[section] = _coerce(section, cls, raw.pop(section, {}))
    if raw:
        raise ConfigError(f"unknown field {sorted(raw)[0]}")
    cfg = RunConfig(**kwargs)
    return normalize(cfg)


def normalize(cfg: RunConfig) -> RunConfig:
    """Fill model-dependent defaults and validate cross-field constraints."""
    agg = cfg.aggregator
    if agg.learn_param is None:
        cfg = replace(cfg, aggregator=replace(agg, learn_param=cfg.model.kind == "DyResGEN"))
    d = cfg.data
    if d.source not in ("synthetic", "files"):
        raise ConfigError(f"data.source must be 'synthetic' or 'files', got {d.source!r}")
    if d.source == "files" and not d.edges:
        raise ConfigError("data.edges is required when data.source = 'files'")
    if d.label_kind not in (MULTILABEL, MULTICLASS):
        raise ConfigError(f"data.label_kind must be {MULTILABEL!r} or {MULTICLASS!r}")
    t = cfg.train
    if t.epochs < 0:
        raise ConfigError("train.epochs must be >= 0")
    if t.partitions < 1 or t.eval_partitions < 1:
        raise ConfigError("train.partitions and train.eval_partitions must be >= 1")
    if len(t.split) != 3 or any(not isinstance(x, (int, float)) or x < 0 for x in t.split) or abs(sum(t.split) - 1) > 1e-9:
        raise ConfigError("train.split must be three non-negative fractions summing to 1")
    if cfg.optim.lr <= 0:
        raise ConfigError("optim.lr must be positive")
    # surface model/aggregator errors at load time
    cfg.network_config(1, 1, 0, MULTILABEL if d.label_kind == MULTILABEL else MULTICLASS)
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    cfg = config_from_dict(raw)
    return _resolve_paths(cfg, path.parent)


def _resolve_paths(cfg: RunConfig, base: Path) -> RunConfig:
    d = cfg.data
    upd = {}
    for key in ("edges", "node_features", "edge_features", "labels"):
        val = getattr(d, key)
        if val and not Path(val).is_absolute():
            upd[key] = str((base / val).resolve())
    return replace(cfg, data=replace(d, **upd)) if upd else cfg


def build_dataset(cfg: RunConfig) -> tuple[Graph, NodeLabels]:
    d = cfg.data
    if d.source == "synthetic":
        params = dict(d.params)
        seed = params.pop("seed", cfg.seed)
        g, labels = generate_synthetic(d.generator, params, seed)
    else:
        for key in ("edges", "node_features", "edge_features", "labels"):
            val = getattr(d, key)
            if val and not Path(val).exists():
                raise ConfigError(f"data.{key}: file not found: {val}")
        if not d.labels:
            raise ConfigError("data.labels is required for training")
        g, labels = load_graph(
            d.edges, d.node_features or None, d.edge_features or None, d.labels,
            directed=d.directed, label_kind=d.label_kind,
        )
    if d.init_node_features:
        g = init_node_features_from_edges(g)
    if g.node_features is None:
        raise ConfigError("dataset has no node features; set data.init_node_features = true")
    return g, labels


def dims_for(g: Graph, labels: NodeLabels) -> dict:
    return {
        "in_dim": int(g.node_features.shape[1]),
        "out_dim": int(labels.num_targets),
        "edge_dim": 0 if g.edge_features is None else int(g.edge_features.shape[1]),
        "task": labels.kind,
    }


def split_fractions(cfg: RunConfig) -> tuple[float, float, float]:
    return tuple(float(x) for x in np.asarray(cfg.train.split))
