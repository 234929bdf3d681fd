"""Executable property suites behind ``genagg check``.

Each suite returns :class:`CheckResult` rows (worst-case deviation vs
tolerance) computed with fixed seeds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .aggregators import (
    AggregatorSpec,
    SegmentedMessages,
    agg_max,
    agg_mean,
    agg_powermean,
    agg_softmax,
    agg_sum,
    apply_degree_scaling,
    permutation_invariance_probe,
    softmax_weights,
)
from .graph import Graph, init_node_features_from_edges, random_graph
from .layers import LayerConfig, NetworkConfig, build_network, msg_norm, network_forward
from .tensor import BatchNormState, Tensor, finite_difference_check, parameter_gradient_check
from .training import accuracy, bce_with_logits, roc_auc, softmax_cross_entropy

SUITES = ("grad", "invariance", "limits", "oracle")
GRAD_TOL = 1e-4


@dataclass(frozen=True)
class CheckResult:
    suite: str
    name: str
    deviation: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.deviation) and self.deviation <= self.tolerance)


def random_segments(rng, num_segments, max_size, dim, low=0.1, high=3.0, min_size=1):
    sizes = rng.integers(min_size, max_size + 1, size=num_segments)
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    x = rng.uniform(low, high, size=(offsets[-1], dim))
    return x, offsets


def _msgs(x, offsets):
    return SegmentedMessages(x if isinstance(x, Tensor) else Tensor(x), offsets)


# ---------------------------------------------------------------------------
# grad


def small_network(family: str, seed: int, learn_y: bool = True, depth: int = 7, width: int = 4):
    rng = np.random.default_rng(seed)
    g = random_graph(10, 0.35, rng)
    g = g.with_node_features(rng.standard_normal((g.num_nodes, 3)))
    agg = AggregatorSpec(family, 1.0, True, 0.0, learn_y)
    cfg = NetworkConfig("DyResGEN", depth, LayerConfig(width, agg, msgnorm=True), in_dim=3, out_dim=2)
    net = build_network(cfg, seed)
    # move scalars off their shared init so every scalar gradient is exercised
    for k, s in net.learnable_scalars().items():
        s.value = s.value + rng.uniform(-0.3, 0.3)
    labels = (rng.random((g.num_nodes, 2)) < 0.5).astype(float)
    return net, g, labels


def network_gradient_error(family: str, seed: int, **kw) -> float:
    net, g, labels = small_network(family, seed, **kw)

    def loss_fn():
        return bce_with_logits(network_forward(net, g, training=True), labels)

    errs = parameter_gradient_check(loss_fn, net.parameters())
    return max(errs.values())


def op_gradient_errors(seed: int = 0) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    out = {}
    a = rng.standard_normal((3, 3))
    b = Tensor(rng.standard_normal((3, 3)))
    out["matmul"] = finite_difference_check(lambda t: T.sum(T.matmul(t, b)), a)
    c = Tensor(rng.standard_normal((3, 3)))
    out["mul"] = finite_difference_check(lambda t: T.sum(T.mul(T.mul(t, c), t)), a)
    xr = rng.standard_normal((4, 5))
    xr[np.abs(xr) < 1e-3] = 0.5
    out["relu"] = finite_difference_check(lambda t: T.sum(T.mul(T.relu(t), c.data.sum() + t)), xr)
    out["l2_norm"] = finite_difference_check(lambda t: T.sum(T.l2_norm(t, axis=1)), rng.standard_normal((1, 8)))
    w = Tensor(rng.standard_normal((4, 6)))
    gam, sh = Tensor(rng.standard_normal(6)), Tensor(rng.standard_normal(6))
    out["layer_norm"] = finite_difference_check(
        lambda t: T.sum(T.mul(T.layer_norm(t, gam, sh), w)), rng.standard_normal((4, 6))
    )
    out["batch_norm"] = finite_difference_check(
        lambda t: T.sum(T.mul(T.batch_norm(t, BatchNormState.fresh(6), True, gam, sh), w)),
        rng.standard_normal((4, 6)),
    )
    x, off = random_segments(rng, 6, 5, 3)
    wx = Tensor(rng.standard_normal((6, 3)))
    for beta in (-2.0, 0.5, 10.0):
        out[f"softmax_msgs[beta={beta}]"] = finite_difference_check(
            lambda t: T.sum(T.mul(agg_softmax(_msgs(t, off), beta), wx)), x
        )
        out[f"softmax_beta[beta={beta}]"] = finite_difference_check(
            lambda t: T.sum(T.mul(agg_softmax(_msgs(x, off), t), wx)), np.array(beta)
        )
    for p in (-1.0, 2.0, 5.0):
        out[f"powermean_msgs[p={p}]"] = finite_difference_check(
            lambda t: T.sum(T.mul(agg_powermean(_msgs(t, off), p), wx)), x
        )
        out[f"powermean_p[p={p}]"] = finite_difference_check(
            lambda t: T.sum(T.mul(agg_powermean(_msgs(x, off), t), wx)), np.array(p)
        )
    out["mean"] = finite_difference_check(lambda t: T.sum(T.mul(agg_mean(_msgs(t, off)), wx)), x)
    out["sum"] = finite_difference_check(lambda t: T.sum(T.mul(agg_sum(_msgs(t, off)), wx)), x)
    deg = np.diff(off)
    base = Tensor(rng.standard_normal((6, 3)))
    out["degree_scaling_y"] = finite_difference_check(
        lambda t: T.sum(T.mul(apply_degree_scaling(base, deg, t), wx)), np.array(0.7)
    )
    out["degree_scaling_x"] = finite_difference_check(
        lambda t: T.sum(T.mul(apply_degree_scaling(t, deg, 0.7), wx)), base.data
    )
    h = Tensor(rng.standard_normal((5, 4)))
    m = Tensor(rng.uniform(0.1, 2.0, (5, 4)))
    wm = Tensor(rng.standard_normal((5, 4)))
    out["msg_norm_h"] = finite_difference_check(lambda t: T.sum(T.mul(msg_norm(t, m, 0.8), wm)), h.data)
    out["msg_norm_m"] = finite_difference_check(lambda t: T.sum(T.mul(msg_norm(h, t, 0.8), wm)), m.data)
    out["msg_norm_s"] = finite_difference_check(lambda t: T.sum(T.mul(msg_norm(h, m, t), wm)), np.array(0.8))
    yl = (rng.random((4, 3)) < 0.5).astype(float)
    out["bce_with_logits"] = finite_difference_check(lambda t: bce_with_logits(t, yl), rng.standard_normal((4, 3)))
    ids = rng.integers(0, 3, 4)
    out["softmax_cross_entropy"] = finite_difference_check(
        lambda t: softmax_cross_entropy(t, ids), rng.standard_normal((4, 3))
    )
    return out


def suite_grad(seeds=(0, 1)) -> list[CheckResult]:
    worst: dict[str, float] = {}
    for s in seeds:
        for k, v in op_gradient_errors(s).items():
            worst[k] = max(worst.get(k, 0.0), v)
    rows = [CheckResult("grad", k, v, GRAD_TOL) for k, v in worst.items()]
    for family in ("softmax", "powermean"):
        err = max(network_gradient_error(family, s) for s in seeds)
        rows.append(CheckResult("grad", f"DyResGEN-7[{family}, msgnorm, y]", err, GRAD_TOL))
    return rows


# ---------------------------------------------------------------------------
# invariance


def network_equivariance_deviation(seed: int, family: str = "softmax") -> float:
    rng = np.random.default_rng(seed)
    g = random_graph(25, 0.2, rng)
    g = g.with_node_features(rng.standard_normal((g.num_nodes, 3)))
    agg = AggregatorSpec(family, 2.0, True, canonical=True)
    cfg = NetworkConfig("DyResGEN", 3, LayerConfig(8, agg, msgnorm=True), in_dim=3, out_dim=2)
    net = build_network(cfg, seed)
    perm = rng.permutation(g.num_nodes)
    with T.no_grad():
        base = network_forward(net, g).data
        moved = network_forward(net, g.relabel(perm)).data
    return float(np.max(np.abs(moved[perm] - base)))


def suite_invariance(seeds=range(10)) -> list[CheckResult]:
    specs = [
        AggregatorSpec("sum"), AggregatorSpec("mean"), AggregatorSpec("max"),
        AggregatorSpec("softmax", 3.0), AggregatorSpec("softmax", 1e3),
        AggregatorSpec("powermean", 3.0), AggregatorSpec("powermean", -1.0),
        AggregatorSpec("mean", degree_exponent=0.5),
    ]
    rows = []
    for spec in specs:
        dev = max(permutation_invariance_probe(spec, s) for s in seeds)
        label = spec.family if spec.family not in ("softmax", "powermean") else f"{spec.family}[{spec.param:g}]"
        if spec.degree_exponent:
            label += f"*deg^{spec.degree_exponent:g}"
        rows.append(CheckResult("invariance", f"probe {label}", dev, 1e-12))
    for family in ("softmax", "powermean"):
        dev = max(network_equivariance_deviation(s, family) for s in seeds)
        rows.append(CheckResult("invariance", f"network equivariance [{family}]", dev, 1e-9))
    return rows


# ---------------------------------------------------------------------------
# limits


def limit_deviations(seed: int = 0, num_segments: int = 1000, max_size: int = 32, dim: int = 8) -> dict[str, float]:
    """Worst deviations of the limit laws over random U(0.001, 1) segments."""
    rng = np.random.default_rng(seed)
    x, off = random_segments(rng, num_segments, max_size, dim, low=1e-3, high=1.0)
    msgs = _msgs(x, off)
    with T.no_grad():
        mean = agg_mean(msgs).data
        mx = agg_max(msgs).data
        sm0 = agg_softmax(msgs, 0.0).data
        sm_big = agg_softmax(msgs, 1e3).data
        pm1 = agg_powermean(msgs, 1.0).data
        pm = {p: agg_powermean(msgs, p).data for p in (8.0, 16.0, 32.0, 64.0, 128.0)}
    # gap between the largest and second-largest value per (segment, column)
    gap = np.full(mx.shape, np.inf)
    for v in range(num_segments):
        seg = np.sort(x[off[v]:off[v + 1]], axis=0)
        if seg.shape[0] > 1:
            gap[v] = seg[-1] - seg[-2]
    wide = gap >= 0.1
    deg = np.diff(off)[:, None].astype(float)
    # max * (1/N)^(1/p) <= PowerMean_p <= max for any positive segment
    lower = mx * (1.0 / deg) ** (1.0 / 64.0)
    dists = [np.max(mx - pm[p]) for p in sorted(pm)]
    return {
        "softmax[beta=0] vs mean": float(np.max(np.abs(sm0 - mean))),
        "softmax[beta=1e3] vs max (gap>=0.1)": float(np.max(np.abs(sm_big - mx)[wide])),
        "powermean[p=1] vs mean": float(np.max(np.abs(pm1 - mean))),
        "powermean[p=64] vs max": float(np.max(np.abs(pm[64.0] - mx))),
        "powermean[p=64] outside [max*(1/N)^(1/p), max]": float(
            max(np.max(lower - pm[64.0]), np.max(pm[64.0] - mx), 0.0)
        ),
        "powermean distance to max increase over p=8..128": float(max(np.max(np.diff(dists)), 0.0)),
    }


LIMIT_TOLERANCES = {
    "softmax[beta=0] vs mean": 1e-12,
    "softmax[beta=1e3] vs max (gap>=0.1)": 1e-6,
    "powermean[p=1] vs mean": 1e-12,
    "powermean[p=64] vs max": 1e-2,
    "powermean[p=64] outside [max*(1/N)^(1/p), max]": 1e-12,
    "powermean distance to max increase over p=8..128": 0.0,
}


def duplicate_max_deviation(seed: int = 0, copies=(2, 3, 5), beta: float = 1e3) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for c in copies:
        for _ in range(20):
            rest = rng.uniform(0.0, 1.9, size=rng.integers(1, 10))
            vals = rng.permutation(np.concatenate([np.full(c, 2.0), rest]))
            w = softmax_weights(_msgs(vals.reshape(-1, 1), np.array([0, vals.size])), beta)
            w = w.ravel()[vals == 2.0]
            worst = max(worst, float(np.max(np.abs(w - 1.0 / c))))
    return worst


def suite_limits() -> list[CheckResult]:
    dev = limit_deviations()
    rows = [CheckResult("limits", k, v, LIMIT_TOLERANCES[k]) for k, v in dev.items()]
    rows.append(CheckResult("limits", "duplicate max weights 1/c [beta=1e3]", duplicate_max_deviation(), 1e-6))
    return rows


# ---------------------------------------------------------------------------
# oracle


def loop_aggregate(x: np.ndarray, offsets: np.ndarray, family: str, param: float = 1.0) -> np.ndarray:
    """Direct per-node evaluation of each aggregation formula."""
    n = offsets.shape[0] - 1
    out = np.zeros((n, x.shape[1]))
    for v in range(n):
        seg = x[offsets[v]:offsets[v + 1]]
        if seg.shape[0] == 0:
            continue
        for d in range(x.shape[1]):
            col = [float(t) for t in seg[:, d]]
            total = 0.0
            for t in col:
                total += t
            if family == "sum":
                out[v, d] = total
            elif family == "mean":
                out[v, d] = total / len(col)
            elif family == "max":
                out[v, d] = max(col)
            elif family == "softmax":
                ws = [np.exp(param * t) for t in col]
                out[v, d] = sum(w * t for w, t in zip(ws, col)) / sum(ws)
            elif family == "powermean":
                out[v, d] = (sum(t ** param for t in col) / len(col)) ** (1.0 / param)
    return out


def kernel_oracle_deviation(seeds=range(20)) -> float:
    worst = 0.0
    kernels = {
        ("sum", 1.0): lambda m: agg_sum(m),
        ("mean", 1.0): lambda m: agg_mean(m),
        ("max", 1.0): lambda m: agg_max(m),
        ("softmax", 0.5): lambda m: agg_softmax(m, 0.5),
        ("softmax", 2.0): lambda m: agg_softmax(m, 2.0),
        ("powermean", 2.0): lambda m: agg_powermean(m, 2.0),
        ("powermean", -1.0): lambda m: agg_powermean(m, -1.0),
    }
    for s in seeds:
        rng = np.random.default_rng(s)
        g = random_graph(int(rng.integers(2, 17)), 0.3, rng)
        x = rng.uniform(0.1, 2.0, (g.num_edges, 3))
        msgs = _msgs(x, g.csr_offsets)
        with T.no_grad():
            for (fam, prm), fn in kernels.items():
                ref = loop_aggregate(x, g.csr_offsets, fam, prm)
                worst = max(worst, float(np.max(np.abs(fn(msgs).data - ref), initial=0.0)))
    return worst


def pairwise_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mean over valid columns of P(score_pos > score_neg) + 0.5 P(tie), by counting pairs."""
    aucs = []
    for t in range(scores.shape[1]):
        pos = scores[labels[:, t] == 1, t]
        neg = scores[labels[:, t] == 0, t]
        if pos.size == 0 or neg.size == 0:
            continue
        greater = ties = 0
        for a in pos:
            for b in neg:
                greater += a > b
                ties += a == b
        aucs.append((greater + 0.5 * ties) / (pos.size * neg.size))
    return float(np.sum(aucs) / len(aucs))


def metric_oracle_deviation(seeds=range(20)) -> tuple[float, float]:
    auc_dev = acc_dev = 0.0
    for s in seeds:
        rng = np.random.default_rng(s)
        scores = np.round(rng.random((50, 3)), 1)  # coarse grid forces ties
        labels = (rng.random((50, 3)) < 0.4).astype(int)
        auc_dev = max(auc_dev, abs(roc_auc(scores, labels) - pairwise_auc(scores, labels)))
        logits = rng.integers(0, 3, (40, 4)).astype(float)
        ids = rng.integers(0, 4, 40)
        naive = 0
        for i in range(40):
            best = 0
            for j in range(1, 4):
                if logits[i, j] > logits[i, best]:
                    best = j
            naive += best == ids[i]
        acc_dev = max(acc_dev, abs(accuracy(logits, ids) - naive / 40))
    return auc_dev, acc_dev


def edge_init_oracle_deviation(seeds=range(10)) -> float:
    worst = 0.0
    for s in seeds:
        rng = np.random.default_rng(s)
        n = int(rng.integers(2, 30))
        iu, ju = np.triu_indices(n, 1)
        keep = rng.random(iu.size) < 0.2
        ef = rng.standard_normal((int(keep.sum()), 3))
        g = Graph.from_edges(n, iu[keep], ju[keep], edge_features=ef)
        dense = np.zeros((n, n, 3))
        dense[iu[keep], ju[keep]] = ef
        dense[ju[keep], iu[keep]] = ef
        ref = dense.sum(axis=1)
        worst = max(worst, float(np.max(np.abs(init_node_features_from_edges(g).node_features - ref))))
    return worst


def suite_oracle() -> list[CheckResult]:
    auc_dev, acc_dev = metric_oracle_deviation()
    return [
        CheckResult("oracle", "kernels vs per-node formula", kernel_oracle_deviation(), 1e-12),
        CheckResult("oracle", "roc_auc vs pairwise count", auc_dev, 0.0),
        CheckResult("oracle", "accuracy vs naive loop", acc_dev, 0.0),
        CheckResult("oracle", "edge-sum init vs dense", edge_init_oracle_deviation(), 1e-12),
    ]


def run_suite(name: str) -> list[CheckResult]:
    if name == "all":
        return [r for s in SUITES for r in run_suite(s)]
    fn = {"grad": suite_grad, "invariance": suite_invariance, "limits": suite_limits, "oracle": suite_oracle}
    if name not in fn:
        raise ValueError(f"unknown suite {name!r}; choose from {SUITES + ('all',)}")
    return fn[name]()
