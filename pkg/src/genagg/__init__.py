"""Graph message passing with generalized mean-max aggregation.

Submodules: ``tensor`` (autodiff core), ``graph`` (CSR store and loaders),
``aggregators``, ``layers`` (blocks, networks, checkpoints), ``training``,
``config``, ``checks`` and ``cli``.
"""

from .aggregators import Aggregator, AggregatorSpec, aggregate
from .errors import GenAggError
from .graph import Graph, NodeLabels, generate_synthetic, load_graph, random_partition
from .layers import GenLayer, LayerConfig, Network, NetworkConfig, build_network, network_forward
from .tensor import Scalar, Tensor, backward, no_grad
from .training import evaluate, train

__version__ = "0.1.0"

__all__ = [
    "Aggregator", "AggregatorSpec", "aggregate", "GenAggError", "Graph", "NodeLabels",
    "generate_synthetic", "load_graph", "random_partition", "GenLayer", "LayerConfig",
    "Network", "NetworkConfig", "build_network", "network_forward", "Scalar", "Tensor",
    "backward", "no_grad", "evaluate", "train",
]
