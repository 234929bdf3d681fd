"""Command-line entry point: ``genagg {train,eval,check,sweep,bench}``.

Exit codes: 0 success, 1 property-check failure, 2 usage/config/data error,
3 numeric failure during a run.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from threadpoolctl import threadpool_limits

from .aggregators import FAMILIES
from .bench import DEFAULT_SIZES, bench_kernels, rows_to_csv
from .checks import SUITES, run_suite
from .config import RunConfig, build_dataset, dims_for, load_config
from .errors import GenAggError, NumericError
from .layers import build_network, load_checkpoint, save_checkpoint
from .training import AdamState, evaluate, node_split, train

log = logging.getLogger("genagg")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(GenAggError):
    pass


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "out", None):
        cfg = replace(cfg, out=args.out)
    if getattr(args, "depth_override", None) is not None:
        if args.depth_override < 1:
            raise UsageError("--depth-override must be >= 1")
        cfg = replace(cfg, model=replace(cfg.model, depth=args.depth_override))
    return cfg


def run_training(cfg: RunConfig, verbose: bool = False):
    """Build data and network from ``cfg`` and train; returns (net, run, data, split)."""
    g, labels = build_dataset(cfg)
    net_cfg = cfg.network_config(**dims_for(g, labels))
    net = build_network(net_cfg, cfg.seed)
    split = node_split(g.num_nodes, cfg.seed, tuple(cfg.train.split))

    def progress(epoch, rec):
        if verbose:
            log.info("epoch %d loss %.6f metric %.6f", epoch, rec["loss"], rec["metric"])

    run = train(
        net, g, labels,
        epochs=cfg.train.epochs,
        partitions=cfg.train.partitions,
        seed=cfg.seed,
        log=progress,
        lr=cfg.optim.lr,
        train_nodes=split["train"],
        eval_partitions=cfg.train.eval_partitions,
        config=cfg.to_dict(),
        optimizer=AdamState(cfg.optim.lr, cfg.optim.beta1, cfg.optim.beta2, cfg.optim.eps),
    )
    return net, run, (g, labels), split


def cmd_train(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    net, run, (g, labels), split = run_training(cfg, args.verbose)
    run.to_csv(out / "trace.csv")
    cfg.save(out / "config.toml")
    save_checkpoint(net, out / "checkpoint.json")
    summary = {"epochs": len(run.epochs), "seed": cfg.seed}
    for name in ("train", "valid", "test"):
        if split[name].size:
            try:
                summary[f"{name}_metric"] = evaluate(net, g, labels, split[name], cfg.train.eval_partitions, cfg.seed)
            except ValueError:
                summary[f"{name}_metric"] = None
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    final = run.metric[-1] if run.metric else summary.get("train_metric")
    print(f"final metric: {final:.6f}" if final is not None else "final metric: n/a")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    net = load_checkpoint(args.checkpoint)
    g, labels = build_dataset(cfg)
    dims = dims_for(g, labels)
    nc = net.config
    have = {"in_dim": nc.in_dim, "out_dim": nc.out_dim, "edge_dim": nc.edge_dim, "task": nc.task}
    if have != dims:
        raise UsageError(f"checkpoint expects {have} but dataset provides {dims}")
    split = node_split(g.num_nodes, cfg.seed, tuple(cfg.train.split))
    metric = evaluate(net, g, labels, split[args.split], cfg.train.eval_partitions, cfg.seed)
    print(f"{metric:.6f}")
    return EXIT_OK


def cmd_check(args) -> int:
    results = run_suite(args.suite)
    width = max(len(r.name) for r in results)
    print(f"{'suite':<11} {'property':<{width}} {'deviation':>12} {'tolerance':>10}  status")
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.suite:<11} {r.name:<{width}} {r.deviation:12.3e} {r.tolerance:10.1e}  {status}")
    failed = [r for r in results if not r.passed]
    if failed:
        for r in failed:
            print(f"FAILED {r.suite}: {r.name} deviation {r.deviation:.3e} > {r.tolerance:.1e}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    print(f"all {len(results)} properties passed")
    return EXIT_OK


def _parse_values(text: str) -> list[float]:
    items = [t.strip() for t in (text or "").split(",") if t.strip()]
    if not items:
        raise UsageError("--values needs at least one number")
    try:
        return [float(t) for t in items]
    except ValueError:
        raise UsageError(f"--values must be comma-separated numbers, got {text!r}") from None


def cmd_sweep(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    values = _parse_values(args.values)
    family = {"beta": "softmax", "p": "powermean"}[args.param]
    if cfg.aggregator.family != family:
        raise UsageError(f"--param {args.param} needs a {family} aggregator, config uses {cfg.aggregator.family}")
    kind = "ResGEN" if cfg.model.kind == "DyResGEN" else cfg.model.kind
    lines = [f"{args.param},metric"]
    for v in values:
        run_cfg = replace(
            cfg,
            model=replace(cfg.model, kind=kind),
            aggregator=replace(cfg.aggregator, param=v, learn_param=False),
        )
        _, run, _, _ = run_training(run_cfg, args.verbose)
        metric = run.metric[-1] if run.metric else float("nan")
        lines.append(f"{v!r},{metric!r}")
    text = "\n".join(lines) + "\n"
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"sweep_{args.param}.csv").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def _parse_list(text, conv, name):
    try:
        vals = [conv(t.strip()) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"--{name}: cannot parse {text!r}") from None
    if not vals:
        raise UsageError(f"--{name} needs at least one entry")
    return vals


def cmd_bench(args) -> int:
    families = _parse_list(args.families, str, "families")
    bad = [f for f in families if f not in FAMILIES]
    if bad:
        raise UsageError(f"unknown families {bad}; choose from {FAMILIES}")
    sizes = _parse_list(args.sizes, int, "sizes")
    rows = bench_kernels(families, sizes, dim=args.dim, repeats=args.repeats)
    text = rows_to_csv(rows)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="genagg", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="run configuration (TOML)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="override the output directory")
        p.add_argument("--depth-override", type=int, default=None, help="override model.depth")

    p = sub.add_parser("train", help="train a model and write trace, config snapshot and checkpoint")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the config's dataset")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "valid", "test"), default="train")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("check", help="run property suites")
    p.add_argument("--suite", choices=SUITES + ("all",), default="all")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("sweep", help="train one fixed-parameter model per value")
    common(p)
    p.add_argument("--param", choices=("beta", "p"), required=True)
    p.add_argument("--values", required=True, help="comma-separated values, e.g. 1e-3,1,1e3")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bench", help="time aggregation kernels")
    p.add_argument("--families", default=",".join(FAMILIES))
    p.add_argument("--sizes", default=",".join(str(s) for s in DEFAULT_SIZES))
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--out", default=None, help="also write the CSV here")
    p.set_defaults(func=cmd_bench)
    return ap


def _threads() -> int:
    raw = os.environ.get("GEN_AGG_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"GEN_AGG_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("GEN_AGG_THREADS must be >= 1")
    return n


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with threadpool_limits(limits=_threads()):
            return args.func(args)
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (GenAggError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
