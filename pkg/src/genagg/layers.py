"""Message construction, MsgNorm vertex update, residual blocks and networks."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .aggregators import GENERALIZED, Aggregator, AggregatorSpec, SegmentedMessages
from .errors import CheckpointError, ConfigError, ShapeError, ValidationError
from .graph import MULTICLASS, MULTILABEL, Graph
from .tensor import BatchNormState, Scalar, Tensor

MSG_EPS = 1e-7
ORDERINGS = ("plain", "res_post", "res_pre")
NORMS = ("layer", "batch", "none")
MODEL_ORDERING = {
    "PlainGCN": "plain",
    "ResGCN": "res_post",
    "ResGCN+": "res_pre",
    "ResGEN": "res_pre",
    "DyResGEN": "res_pre",
}
CHECKPOINT_FORMAT = "genagg-checkpoint"
CHECKPOINT_VERSION = 1


def construct_messages(g: Graph, h: Tensor, e: Tensor | None = None, eps: float = MSG_EPS) -> SegmentedMessages:
    """Per-edge messages ``ReLU(h_u + e_vu) + eps`` in CSR order.

    ``e`` must already be one row per CSR edge at the width of ``h``.
    """
    hu = T.gather_rows(h, g.csr_targets)
    if e is not None:
        if e.shape != hu.shape:
            raise ShapeError(f"edge features {e.shape} do not match gathered node features {hu.shape}")
        hu = hu + e
    return SegmentedMessages(T.add(T.relu(hu), eps), g.csr_offsets)


def msg_norm(h: Tensor, m: Tensor, s) -> Tensor:
    """``h + s * ||h|| * m / ||m||`` row-wise.

    ``s`` is a scalar or one factor per row; an all-zero message row leaves
    ``h`` unchanged.
    """
    scale = T.l2_norm(h, axis=1)
    scale = T.mul(scale, s if isinstance(s, Tensor) else Tensor(s))
    return h + T.scale_rows(T.normalize_rows(m), scale)


@dataclass(frozen=True)
class LayerConfig:
    width: int = 64
    aggregator: AggregatorSpec = field(default_factory=AggregatorSpec)
    ordering: str = "res_pre"
    norm: str = "layer"
    msgnorm: bool = False
    learn_msg_scale: bool = True
    dropout: float = 0.0
    epsilon_msg: float = MSG_EPS

    def __post_init__(self):
        if self.width < 1:
            raise ConfigError(f"width must be >= 1, got {self.width}")
        if self.ordering not in ORDERINGS:
            raise ConfigError(f"ordering must be one of {ORDERINGS}, got {self.ordering!r}")
        if self.norm not in NORMS:
            raise ConfigError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.epsilon_msg < 0:
            raise ConfigError("epsilon_msg must be non-negative")


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, name: str):
        self.weight = Tensor(_uniform(rng, fan_in, (fan_in, fan_out)), requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(_uniform(rng, fan_in, (fan_out,)), requires_grad=True, name=f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


class GenLayer:
    """One message-passing block.

    GraphConv is message construction, aggregation, then the vertex update
    ``MLP(h + m)`` (or its MsgNorm variant), where the MLP has one hidden
    ReLU layer of the block width.
    """

    def __init__(self, config: LayerConfig, rng: np.random.Generator, name: str = "layer"):
        d = config.width
        self.config = config
        self.name = name
        self.mlp_in = Linear(d, d, rng, f"{name}.mlp.0")
        self.mlp_out = Linear(d, d, rng, f"{name}.mlp.1")
        self.aggregator = Aggregator(config.aggregator)
        if self.aggregator.param is not None:
            self.aggregator.param.name = f"{name}.{config.aggregator.param_name}"
        self.aggregator.degree_exponent.name = f"{name}.y"
        self.msg_scale = None
        if config.msgnorm:
            self.msg_scale = Scalar(1.0, requires_grad=config.learn_msg_scale, name=f"{name}.s")
        self.gamma = self.shift = None
        self.bn_state = None
        if config.norm != "none":
            self.gamma = Tensor(np.ones(d), requires_grad=True, name=f"{name}.norm.gamma")
            self.shift = Tensor(np.zeros(d), requires_grad=True, name=f"{name}.norm.shift")
        if config.norm == "batch":
            self.bn_state = BatchNormState.fresh(d)

    def parameters(self) -> list[Tensor]:
        params = self.mlp_in.parameters() + self.mlp_out.parameters()
        if self.gamma is not None:
            params += [self.gamma, self.shift]
        params += [p for p in self.scalars().values() if p.requires_grad]
        return params

    def scalars(self) -> dict[str, Scalar]:
        """Aggregation and MsgNorm scalars keyed ``beta``/``p``/``y``/``s``."""
        out = {}
        if self.aggregator.param is not None:
            out[self.config.aggregator.param_name] = self.aggregator.param
        if self.aggregator.uses_degree_scaling:
            out["y"] = self.aggregator.degree_exponent
        if self.msg_scale is not None:
            out["s"] = self.msg_scale
        return out

    def learnable_scalars(self) -> dict[str, Scalar]:
        return {k: v for k, v in self.scalars().items() if v.requires_grad}

    def graph_conv(self, g: Graph, h: Tensor, e: Tensor | None) -> Tensor:
        msgs = construct_messages(g, h, e, self.config.epsilon_msg)
        m = self.aggregator(msgs)
        if self.msg_scale is not None:
            z = msg_norm(h, m, self.msg_scale)
        else:
            z = h + m
        return self.mlp_out(T.relu(self.mlp_in(z)))

    def normalize(self, h: Tensor, training: bool) -> Tensor:
        if self.config.norm == "layer":
            return T.layer_norm(h, self.gamma, self.shift)
        if self.config.norm == "batch":
            return T.batch_norm(h, self.bn_state, training, self.gamma, self.shift)
        return h

    def forward(self, g: Graph, h: Tensor, e: Tensor | None, training: bool = False, rng=None) -> Tensor:
        if h.shape[1] != self.config.width:
            raise ShapeError(f"{self.name}: input width {h.shape[1]} != layer width {self.config.width}")
        rate = self.config.dropout if training else 0.0
        order = self.config.ordering
        if order == "res_pre":
            z = T.relu(self.normalize(h, training))
            z = T.dropout(z, rate, rng) if rate else z
            return h + self.graph_conv(g, z, e)
        z = T.relu(self.normalize(self.graph_conv(g, h, e), training))
        z = T.dropout(z, rate, rng) if rate else z
        return z if order == "plain" else h + z

    __call__ = forward


@dataclass(frozen=True)
class NetworkConfig:
    kind: str = "ResGEN"
    depth: int = 3
    layer: LayerConfig = field(default_factory=LayerConfig)
    in_dim: int = 8
    edge_dim: int = 0
    out_dim: int = 1
    task: str = MULTILABEL

    def __post_init__(self):
        if self.kind not in MODEL_ORDERING:
            raise ConfigError(f"model kind must be one of {tuple(MODEL_ORDERING)}, got {self.kind!r}")
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.in_dim < 1 or self.out_dim < 1 or self.edge_dim < 0:
            raise ConfigError("in_dim and out_dim must be >= 1, edge_dim >= 0")
        if self.task not in (MULTILABEL, MULTICLASS):
            raise ConfigError(f"task must be {MULTILABEL!r} or {MULTICLASS!r}, got {self.task!r}")
        agg = self.layer.aggregator
        if self.kind in ("ResGEN", "DyResGEN") and agg.family not in GENERALIZED:
            raise ConfigError(f"{self.kind} needs a softmax or powermean aggregator, got {agg.family!r}")
        if self.kind == "ResGEN" and agg.learn_param:
            raise ConfigError("ResGEN keeps the aggregation parameter fixed; use DyResGEN to learn it")
        if self.kind == "DyResGEN" and not agg.learn_param:
            raise ConfigError("DyResGEN learns the aggregation parameter; set learn_param = true")
        ordering = MODEL_ORDERING[self.kind]
        if self.layer.ordering != ordering:
            object.__setattr__(self, "layer", replace(self.layer, ordering=ordering))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        layer = dict(d["layer"])
        layer["aggregator"] = AggregatorSpec(**layer["aggregator"])
        return cls(**{**d, "layer": LayerConfig(**layer)})


class Network:
    """Input projection, ``depth`` GEN blocks and a linear task head."""

    def __init__(self, config: NetworkConfig, seed=0):
        self.config = config
        self.seed = seed
        ss = np.random.SeedSequence(seed)
        init_seq, drop_seq = ss.spawn(2)
        rng = np.random.default_rng(init_seq)
        d = config.layer.width
        self.input = Linear(config.in_dim, d, rng, "input")
        self.edge_input = Linear(config.edge_dim, d, rng, "edge_input") if config.edge_dim else None
        self.layers = [GenLayer(config.layer, rng, f"layer{i + 1}") for i in range(config.depth)]
        self.head = Linear(d, config.out_dim, rng, "head")
        self.dropout_rng = np.random.default_rng(drop_seq)

    def parameters(self) -> list[Tensor]:
        params = self.input.parameters()
        if self.edge_input is not None:
            params += self.edge_input.parameters()
        for layer in self.layers:
            params += layer.parameters()
        return params + self.head.parameters()

    def named_parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.parameters()}

    def learnable_scalars(self) -> dict[str, Scalar]:
        """Learnable per-layer scalars keyed ``layerL.{beta|p|s|y}``."""
        out = {}
        for layer in self.layers:
            for k, v in layer.learnable_scalars().items():
                out[f"{layer.name}.{k}"] = v
        return out

    def buffers(self) -> dict[str, BatchNormState]:
        return {layer.name: layer.bn_state for layer in self.layers if layer.bn_state is not None}

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def __call__(self, g: Graph, training: bool = False, rng=None) -> Tensor:
        return network_forward(self, g, training, rng)


def build_network(cfg: NetworkConfig, seed=0) -> Network:
    return Network(cfg, seed)


def network_forward(net: Network, g: Graph, training: bool = False, rng=None) -> Tensor:
    """Node logits ``[num_nodes x out_dim]``.

    Dropout (training only) draws from ``rng`` or the network's own seeded
    generator.
    """
    cfg = net.config
    if g.node_features is None:
        raise ValidationError("graph has no node features; initialize them from edges first")
    if g.node_features.shape[1] != cfg.in_dim:
        raise ShapeError(f"node features have width {g.node_features.shape[1]}, network expects {cfg.in_dim}")
    if rng is None:
        rng = net.dropout_rng
    h = net.input(Tensor(g.node_features))
    e = None
    if net.edge_input is not None:
        if g.edge_features is None:
            raise ValidationError("network expects edge features but the graph has none")
        if g.edge_features.shape[1] != cfg.edge_dim:
            raise ShapeError(f"edge features have width {g.edge_features.shape[1]}, network expects {cfg.edge_dim}")
        e = T.gather_rows(net.edge_input(Tensor(g.edge_features)), g.edge_feature_index)
    for layer in net.layers:
        h = layer(g, h, e, training, rng)
    return net.head(h)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(net: Network, path) -> None:
    """JSON container of config, parameters and running norm statistics."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "seed": net.seed if isinstance(net.seed, int) else None,
        "config": net.config.to_dict(),
        "parameters": {
            name: {"shape": list(p.shape), "data": p.data.reshape(-1).tolist()}
            for name, p in net.named_parameters().items()
        },
        "fixed_scalars": {
            f"{layer.name}.{k}": v.value
            for layer in net.layers
            for k, v in layer.scalars().items()
            if not v.requires_grad
        },
        "buffers": {
            name: {
                "running_mean": s.running_mean.tolist(),
                "running_var": s.running_var.tolist(),
                "momentum": s.momentum,
            }
            for name, s in net.buffers().items()
        },
    }
    Path(path).write_text(json.dumps(payload, indent=1) + "\n", encoding="utf-8")


def load_checkpoint(path) -> Network:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from None
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('version')!r}")
    try:
        cfg = NetworkConfig.from_dict(payload["config"])
        net = Network(cfg, payload.get("seed") or 0)
        params = net.named_parameters()
        stored = payload["parameters"]
        if set(stored) != set(params):
            missing = sorted(set(params) ^ set(stored))
            raise CheckpointError(f"checkpoint parameter set mismatch: {missing[:5]}")
        for name, p in params.items():
            rec = stored[name]
            data = np.array(rec["data"], dtype=np.float64).reshape(rec["shape"])
            if data.shape != p.shape:
                raise CheckpointError(f"{name}: stored shape {data.shape} != expected {p.shape}")
            p.data = data
            p.zero_grad()
        for layer in net.layers:
            for k, v in layer.scalars().items():
                key = f"{layer.name}.{k}"
                if not v.requires_grad and key in payload.get("fixed_scalars", {}):
                    v.value = payload["fixed_scalars"][key]
        for name, state in net.buffers().items():
            rec = payload["buffers"][name]
            state.running_mean = np.array(rec["running_mean"], dtype=np.float64)
            state.running_var = np.array(rec["running_var"], dtype=np.float64)
            state.momentum = float(rec["momentum"])
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"corrupted checkpoint {path}: {exc}") from None
    return net
