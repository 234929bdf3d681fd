"""Permutation-invariant segment reductions over CSR neighborhoods.

Messages are an E x D tensor in CSR edge order, so the messages received by
node ``v`` are the contiguous rows ``offsets[v]:offsets[v+1]``.  All kernels
reduce each (segment, column) independently and return a zero row for an
empty segment.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError, ParameterError, ShapeError
from .graph import random_graph
from .tensor import Scalar, Tensor, make_op

FAMILIES = ("sum", "mean", "max", "softmax", "powermean")
GENERALIZED = ("softmax", "powermean")


@dataclass(frozen=True)
class SegmentedMessages:
    messages: Tensor
    offsets: np.ndarray

    def __post_init__(self):
        if self.messages.data.ndim != 2:
            raise ShapeError(f"messages must be E x D, got {self.messages.shape}")
        if self.messages.shape[0] != self.offsets[-1]:
            raise ShapeError(
                f"{self.messages.shape[0]} message rows but offsets end at {self.offsets[-1]}"
            )

    @property
    def num_segments(self) -> int:
        return self.offsets.shape[0] - 1

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.offsets)

    @property
    def segment_ids(self) -> np.ndarray:
        return np.repeat(np.arange(self.num_segments), self.degrees)


# ---------------------------------------------------------------------------
# raw numpy segment primitives


def _nonempty(offsets):
    deg = np.diff(offsets)
    nz = deg > 0
    return nz, offsets[:-1][nz]


def segment_sum(x: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Per-segment sums accumulated strictly left to right in stored order.

    ``np.add.reduceat`` may reassociate inside a segment, so the loop runs
    over in-segment positions instead, vectorized across segments.
    """
    out = np.zeros((offsets.shape[0] - 1,) + x.shape[1:])
    deg = np.diff(offsets)
    if out.shape[0] == 0 or x.shape[0] == 0:
        return out
    starts = offsets[:-1]
    rows = np.arange(out.shape[0])
    for k in range(int(deg.max())):
        rows = rows[deg[rows] > k]
        out[rows] += x[starts[rows] + k]
    return out


def segment_max(x: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    out = np.zeros((offsets.shape[0] - 1,) + x.shape[1:])
    nz, starts = _nonempty(offsets)
    if starts.size:
        out[nz] = np.maximum.reduceat(x, starts, axis=0)
    return out


def _first_argmax(x: np.ndarray, offsets: np.ndarray, seg: np.ndarray, seg_max: np.ndarray) -> np.ndarray:
    """Row index of the first maximal entry per (segment, column)."""
    rows = np.arange(x.shape[0])[:, None] * np.ones((1, x.shape[1]), dtype=np.int64)
    cand = np.where(x == seg_max[seg], rows, x.shape[0])
    out = np.full(seg_max.shape, -1, dtype=np.int64)
    nz, starts = _nonempty(offsets)
    if starts.size:
        out[nz] = np.minimum.reduceat(cand, starts, axis=0)
    return out


def _as_param(value) -> Tensor:
    return value if isinstance(value, Tensor) else Scalar(value)


# ---------------------------------------------------------------------------
# differentiable kernels


def agg_sum(msgs: SegmentedMessages) -> Tensor:
    x, off, seg = msgs.messages, msgs.offsets, msgs.segment_ids
    return make_op("agg_sum", segment_sum(x.data, off), (x,), lambda g: (g[seg],))


def agg_mean(msgs: SegmentedMessages) -> Tensor:
    x, off, seg = msgs.messages, msgs.offsets, msgs.segment_ids
    deg = msgs.degrees.astype(np.float64)
    safe = np.maximum(deg, 1.0)[:, None]
    out = segment_sum(x.data, off) / safe
    return make_op("agg_mean", out, (x,), lambda g: ((g / safe)[seg],))


def agg_max(msgs: SegmentedMessages) -> Tensor:
    """Per-column maximum; the gradient goes to the first maximal row only."""
    x, off, seg = msgs.messages, msgs.offsets, msgs.segment_ids
    out = segment_max(x.data, off)
    shape = x.shape

    def bw(g):
        arg = _first_argmax(x.data, off, seg, out)
        gx = np.zeros(shape)
        valid = arg >= 0
        cols = np.broadcast_to(np.arange(shape[1]), arg.shape)
        gx[arg[valid], cols[valid]] = g[valid]
        return (gx,)

    return make_op("agg_max", out, (x,), bw)


def _softmax_terms(xd, off, seg, b):
    bx = b * xd
    shift = segment_max(bx, off)
    e = np.exp(bx - shift[seg])
    z = segment_sum(e, off)
    return e, np.where(z > 0, z, 1.0)


def softmax_weights(msgs: SegmentedMessages, beta: float) -> np.ndarray:
    """E x D weights ``exp(beta m_vu) / sum_i exp(beta m_vi)`` used by :func:`agg_softmax`."""
    seg = msgs.segment_ids
    e, zsafe = _softmax_terms(msgs.messages.data, msgs.offsets, seg, float(beta))
    return e / zsafe[seg]


def agg_softmax(msgs: SegmentedMessages, beta) -> Tensor:
    """Softmax-weighted sum with inverse temperature ``beta``.

    Evaluated as ``sum(exp(b*m - shift) * m) / sum(exp(b*m - shift))`` with
    ``shift`` the per-segment max of ``b*m``, so ``beta = 0`` reproduces
    :func:`agg_mean` bit for bit and large ``|beta|`` never overflows.
    """
    x, off, seg = msgs.messages, msgs.offsets, msgs.segment_ids
    beta = _as_param(beta)
    b = float(beta.data)
    xd = x.data
    e, zsafe = _softmax_terms(xd, off, seg, b)
    out = segment_sum(e * xd, off) / zsafe
    w = e / zsafe[seg]

    def bw(g):
        ge = g[seg]
        dev = xd - out[seg]
        gx = ge * w * (1.0 + b * dev)
        gb = np.sum(ge * w * dev * xd)
        return gx, gb

    return make_op("agg_softmax", out, (x, beta), bw)


def agg_powermean(msgs: SegmentedMessages, p) -> Tensor:
    """Power mean ``(mean(m**p))**(1/p)`` evaluated in log space.

    All messages must be strictly positive and ``p`` non-zero.
    """
    x, off, seg = msgs.messages, msgs.offsets, msgs.segment_ids
    p = _as_param(p)
    pv = float(p.data)
    if pv == 0.0:
        raise ParameterError("power mean exponent p must be non-zero")
    xd = x.data
    bad = xd <= 0
    if np.any(bad):
        row, col = np.argwhere(bad)[0]
        raise DomainError(
            f"power mean needs positive messages; edge row {row}, dimension {col} is {xd[row, col]!r}"
        )
    logx = np.log(xd)
    pl = pv * logx
    shift = segment_max(pl, off)
    e = np.exp(pl - shift[seg])
    s = segment_sum(e, off)
    deg = msgs.degrees
    nonempty = (deg > 0)[:, None]
    ssafe = np.where(s > 0, s, 1.0)
    a = np.log(ssafe) + shift - np.log(np.maximum(deg, 1))[:, None]
    out = np.where(nonempty, np.exp(a / pv), 0.0)
    q = e / ssafe[seg]

    def bw(g):
        ge = g[seg]
        gx = ge * out[seg] * q / xd
        qlog = segment_sum(q * logx, off)
        dlog_dp = qlog / pv - a / (pv * pv)
        gp = np.sum(np.where(nonempty, g * out * dlog_dp, 0.0))
        return gx, gp

    return make_op("agg_powermean", out, (x, p), bw)


def apply_degree_scaling(agg_out: Tensor, degrees: np.ndarray, y) -> Tensor:
    """Scale row ``v`` by ``degree(v) ** y``; zero-degree rows pass through."""
    y = _as_param(y)
    yv = float(y.data)
    deg = np.asarray(degrees, dtype=np.float64)
    if deg.shape != (agg_out.shape[0],):
        raise ShapeError(f"{deg.shape[0]} degrees for {agg_out.shape[0]} rows")
    pos = deg > 0
    logd = np.where(pos, np.log(np.where(pos, deg, 1.0)), 0.0)
    factor = np.where(pos, np.power(np.where(pos, deg, 1.0), yv), 1.0)[:, None]
    od = agg_out.data

    def bw(g):
        return g * factor, np.sum(g * od * factor * logd[:, None])

    return make_op("degree_scaling", od * factor, (agg_out, y), bw)


def _permute_within_columns(x: Tensor, perm: np.ndarray) -> Tensor:
    xd = x.data

    def bw(g):
        gx = np.zeros_like(xd)
        np.put_along_axis(gx, perm, g, axis=0)
        return (gx,)

    return make_op("canonical_order", np.take_along_axis(xd, perm, axis=0), (x,), bw)


def canonical_order(msgs: SegmentedMessages) -> SegmentedMessages:
    """Sort each column's values ascending within every segment.

    Every kernel reduces columns independently, so this leaves the
    mathematical result unchanged while making the floating-point
    reduction order independent of how neighbors were listed.
    """
    xd = msgs.messages.data
    seg = msgs.segment_ids
    perm = np.empty(xd.shape, dtype=np.int64)
    for d in range(xd.shape[1]):
        perm[:, d] = np.lexsort((xd[:, d], seg))
    return SegmentedMessages(_permute_within_columns(msgs.messages, perm), msgs.offsets)


# ---------------------------------------------------------------------------
# spec + parameter holder


@dataclass(frozen=True)
class AggregatorSpec:
    """Declarative aggregator choice.

    ``param`` is the inverse temperature for ``softmax`` and the exponent for
    ``powermean``; it is ignored by the other families.  A non-zero (or
    learnable) ``degree_exponent`` multiplies the result by ``degree ** y``.
    """

    family: str = "softmax"
    param: float = 1.0
    learn_param: bool = False
    degree_exponent: float = 0.0
    learn_degree_exponent: bool = False
    canonical: bool = False

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"aggregator family must be one of {FAMILIES}, got {self.family!r}")
        if self.family == "powermean" and self.param == 0:
            raise ConfigError("powermean requires a non-zero p")
        if self.learn_param and self.family not in GENERALIZED:
            raise ConfigError(f"{self.family} has no learnable parameter")

    @property
    def param_name(self) -> str | None:
        return {"softmax": "beta", "powermean": "p"}.get(self.family)


class Aggregator:
    """Callable aggregator holding the (possibly learnable) scalars."""

    def __init__(self, spec: AggregatorSpec):
        self.spec = spec
        self.param = None
        if spec.family in GENERALIZED:
            self.param = Scalar(spec.param, requires_grad=spec.learn_param, name=spec.param_name)
        self.degree_exponent = Scalar(
            spec.degree_exponent, requires_grad=spec.learn_degree_exponent, name="y"
        )

    @property
    def uses_degree_scaling(self) -> bool:
        return self.spec.learn_degree_exponent or self.spec.degree_exponent != 0.0

    def learnable(self) -> dict[str, Scalar]:
        out = {}
        if self.param is not None and self.param.requires_grad:
            out[self.spec.param_name] = self.param
        if self.degree_exponent.requires_grad:
            out["y"] = self.degree_exponent
        return out

    def __call__(self, msgs: SegmentedMessages) -> Tensor:
        if self.spec.canonical:
            msgs = canonical_order(msgs)
        fam = self.spec.family
        if fam == "sum":
            out = agg_sum(msgs)
        elif fam == "mean":
            out = agg_mean(msgs)
        elif fam == "max":
            out = agg_max(msgs)
        elif fam == "softmax":
            out = agg_softmax(msgs, self.param)
        else:
            out = agg_powermean(msgs, self.param)
        if self.uses_degree_scaling:
            out = apply_degree_scaling(out, msgs.degrees, self.degree_exponent)
        return out


def aggregate(msgs: SegmentedMessages, spec: AggregatorSpec) -> Tensor:
    return Aggregator(spec)(msgs)


def permutation_invariance_probe(
    spec: AggregatorSpec,
    seed,
    num_nodes: int = 30,
    dim: int = 4,
    edge_prob: float = 0.2,
    canonical: bool = True,
) -> float:
    """Max |difference| between aggregating messages and a shuffled copy.

    Builds a seeded random graph with positive messages, permutes every
    neighbor list (messages travel with their edges) and aggregates both.
    With ``canonical`` the messages are put into canonical order first, so
    the result is exactly reproducible; without it the deviation reflects
    floating-point reassociation only.
    """
    rng = np.random.default_rng(seed)
    g = random_graph(num_nodes, edge_prob, rng)
    x = rng.uniform(0.05, 3.0, size=(g.num_edges, dim))
    off = g.csr_offsets
    perm = np.arange(g.num_edges)
    for v in range(g.num_nodes):
        lo, hi = off[v], off[v + 1]
        perm[lo:hi] = lo + rng.permutation(hi - lo)
    spec = AggregatorSpec(
        spec.family, spec.param, False, spec.degree_exponent, False, canonical
    )
    agg = Aggregator(spec)
    a = agg(SegmentedMessages(Tensor(x), off)).data
    b = agg(SegmentedMessages(Tensor(x[perm]), off)).data
    return float(np.max(np.abs(a - b), initial=0.0))
