"""Wall-clock timing of the aggregation kernels on synthetic CSR workloads."""

from __future__ import annotations

import time

import numpy as np

from . import tensor as T
from .aggregators import FAMILIES, Aggregator, AggregatorSpec, SegmentedMessages
from .graph import random_graph

DEFAULT_SIZES = (100, 1000)
AVG_DEGREE = 8


def bench_kernels(families=FAMILIES, sizes=DEFAULT_SIZES, dim: int = 16, repeats: int = 5, seed: int = 0):
    """Median forward+backward seconds per (family, num_nodes).

    Every family at a given size runs on the same graph and messages.
    """
    rows = []
    for n in sizes:
        rng = np.random.default_rng([seed, n])
        g = random_graph(n, min(1.0, AVG_DEGREE / max(n - 1, 1)), rng)
        x = rng.uniform(0.1, 2.0, (g.num_edges, dim))
        for fam in families:
            agg = Aggregator(AggregatorSpec(fam, 2.0 if fam in ("softmax", "powermean") else 1.0))
            times = []
            for _ in range(repeats):
                msgs = SegmentedMessages(T.Tensor(x, requires_grad=True), g.csr_offsets)
                t0 = time.perf_counter()
                T.backward(T.sum(agg(msgs)))
                times.append(time.perf_counter() - t0)
            rows.append({
                "family": fam,
                "num_nodes": n,
                "num_edges": g.num_edges,
                "dim": dim,
                "repeats": repeats,
                "median_seconds": float(np.median(times)),
            })
    return rows


def rows_to_csv(rows) -> str:
    cols = ["family", "num_nodes", "num_edges", "dim", "repeats", "median_seconds"]
    lines = [",".join(cols)]
    for r in rows:
        lines.append(",".join(f"{r[c]:.6e}" if c == "median_seconds" else str(r[c]) for c in cols))
    return "\n".join(lines) + "\n"
