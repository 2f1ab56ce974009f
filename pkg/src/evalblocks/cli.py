"""Command-line entry point.

    evalblocks run -c config.toml [--select k=v,...] [--workers N]
                   [--backend local|command-template] [--dry]
    evalblocks report -c config.toml --group-by dataset,embedder --metric auc
    evalblocks validate -c config.toml
    evalblocks clean -c config.toml --older-than 7d
    evalblocks generate --out DIR [--n-per-class N] [--shape 16,16,8] ...

Exit codes: 0 success, 2 configuration error, 3 data error, 4 execution
failure. EVALBLOCKS_CACHE overrides the configured cache directory.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import engine, results
from .cache import Cache
from .config import ExperimentConfig, expand_matrix, parse_config, select_targets
from .dataset import DatasetManifest, generate_synthetic_dataset, load_manifest
from .errors import CacheError, ConfigError, DataError, EvalBlocksError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_EXECUTION = 4


def _load_config(path: str) -> ExperimentConfig:
    cfg_path = Path(path)
    try:
        text = cfg_path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {cfg_path}: {e}")
    return parse_config(text, base_dir=cfg_path.parent)


def _load_manifests(cfg: ExperimentConfig, check_files: bool = True) -> dict[str, DatasetManifest]:
    return {d.name: load_manifest(d.manifest, check_files=check_files) for d in cfg.datasets}


def _cache_dir(cfg: ExperimentConfig) -> Path:
    override = os.environ.get("EVALBLOCKS_CACHE")
    return Path(override) if override else cfg.execution.cache_dir


def _parse_duration(text: str) -> float:
    units = {"s": 1.0, "m": 60.0, "h": 3600.0, "d": 86400.0}
    if text and text[-1] in units:
        return float(text[:-1]) * units[text[-1]]
    return float(text)


def cmd_run(args) -> int:
    cfg = _load_config(args.config)
    if args.workers is not None:
        cfg.execution.workers = args.workers
    if args.backend is not None:
        cfg.execution.backend = args.backend.replace("-", "_")
    manifests = _load_manifests(cfg)
    specs = select_targets(expand_matrix(cfg, manifests), args.select)
    if not specs:
        print("warning: selector matched no experiments; nothing to do")
        return EXIT_OK
    graph = engine.build_graph(specs, cfg, manifests)
    if args.dry:
        _print_plan(graph)
        return EXIT_OK
    cache = Cache(_cache_dir(cfg))
    store = results.ResultStore(cfg.execution.results_dir)
    report = engine.execute(
        graph,
        cfg,
        manifests,
        cache,
        workers=cfg.execution.workers,
        store=store,
        results_dir=cfg.execution.results_dir,
        backend=cfg.execution.backend,
        command_template=cfg.execution.command_template,
    )
    print(f"run complete: {report.summary()}")
    for r in report.per_node:
        if r.status == "failed":
            print(f"  FAILED {r.label}: {r.detail}")
    return EXIT_OK if report.failed == 0 else EXIT_EXECUTION


def _print_plan(graph: engine.BlockGraph) -> None:
    counts = graph.counts_by_kind()
    for kind in ("embed", "aggregate", "evaluate", "visualize"):
        if kind in counts:
            print(f"{kind}: {counts[kind]}")
    waves = engine.schedule(graph)
    print(f"waves: {[len(w) for w in waves]}")
    skipped = [n for n in graph.nodes.values() if n.skip_reason]
    for node in skipped:
        print(f"SKIP {node.label}: {node.skip_reason}")


def cmd_validate(args) -> int:
    cfg = _load_config(args.config)
    manifests = _load_manifests(cfg)
    specs = expand_matrix(cfg, manifests)
    graph = engine.build_graph(specs, cfg, manifests)
    _print_plan(graph)
    return EXIT_OK


def _axis_order(cfg: ExperimentConfig, manifests: dict[str, DatasetManifest]) -> dict:
    channels: list[str] = []
    for agg in cfg.aggregations:
        if agg.kind == "none":
            for ds in cfg.datasets:
                for m in manifests[ds.name].modalities:
                    if m not in channels:
                        channels.append(m)
        elif agg.id not in channels:
            channels.append(agg.id)
    return {
        "dataset": [d.name for d in cfg.datasets],
        "embedder": [e.id for e in cfg.embedders],
        "aggregation": channels,
        "evaluation": [v.id for v in cfg.evaluations],
    }


def cmd_report(args) -> int:
    cfg = _load_config(args.config)
    store = results.ResultStore(cfg.execution.results_dir)
    group_by = [axis.strip() for axis in args.group_by.split(",") if axis.strip()]
    try:
        manifests = _load_manifests(cfg, check_files=False)
        order = _axis_order(cfg, manifests)
    except EvalBlocksError:
        order = None  # records still report, just without config ordering
    table = results.report_table(store, group_by, axis_order=order)
    text = results.markdown_table(table)
    print(text, end="")

    reports_dir = Path(cfg.execution.results_dir) / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)
    (reports_dir / "report.md").write_text(text)
    metrics = [args.metric] if args.metric else ["accuracy", "auc"]
    for metric in metrics:
        if any(metric in row.metrics for row in table.rows):
            results.render_barchart(table, metric, reports_dir / f"{metric}.svg")
            print(f"chart: {reports_dir / f'{metric}.svg'}")
    return EXIT_OK


def cmd_clean(args) -> int:
    cfg = _load_config(args.config)
    cache = Cache(_cache_dir(cfg))
    removed = cache.clean(_parse_duration(args.older_than))
    print(f"removed {removed} cache entries")
    return EXIT_OK


def cmd_generate(args) -> int:
    if args.n_per_class < args.folds:
        raise ConfigError(
            f"--n-per-class ({args.n_per_class}) must be >= --folds ({args.folds})"
        )
    shape = tuple(int(d) for d in args.shape.split(","))
    modalities = [m.strip() for m in args.modalities.split(",")] if args.modalities else None
    manifest = generate_synthetic_dataset(
        args.out,
        n_per_class=args.n_per_class,
        patch_shape=shape,
        n_folds=args.folds,
        class_separation=args.separation,
        seed=args.seed,
        modalities=modalities,
        name=args.name,
    )
    print(f"wrote {len(manifest.patches)} patches")
    print(Path(args.out) / "manifest.json")
    return EXIT_OK


def cmd_exec_node(args) -> int:
    return engine.run_node_file(args.node_file)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evalblocks", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(
        dest="command", required=True, metavar="{run,report,validate,clean,generate}"
    )

    run = sub.add_parser("run", help="execute experiments from a config")
    run.add_argument("-c", "--config", required=True)
    run.add_argument("--select", help="selector: key=value[,key=value...], * matches any")
    run.add_argument("--workers", type=int)
    run.add_argument("--backend", choices=["local", "command-template", "command_template"])
    run.add_argument("--dry", action="store_true", help="print the plan without executing")
    run.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="emit metric tables and bar charts")
    rep.add_argument("-c", "--config", required=True)
    rep.add_argument("--group-by", default="dataset,embedder,aggregation,evaluation")
    rep.add_argument("--metric", help="metric for the bar chart (default: accuracy and auc)")
    rep.set_defaults(func=cmd_report)

    val = sub.add_parser("validate", help="parse config, load data, print the plan")
    val.add_argument("-c", "--config", required=True)
    val.set_defaults(func=cmd_validate)

    cln = sub.add_parser("clean", help="drop cache entries older than a cutoff")
    cln.add_argument("-c", "--config", required=True)
    cln.add_argument("--older-than", default="0", help="age like 30s, 10m, 12h, 7d (default 0)")
    cln.set_defaults(func=cmd_clean)

    gen = sub.add_parser("generate", help="write a synthetic dataset")
    gen.add_argument("--out", required=True)
    gen.add_argument("--n-per-class", type=int, default=25)
    gen.add_argument("--shape", default="16,16,8")
    gen.add_argument("--folds", type=int, default=5)
    gen.add_argument("--separation", type=float, default=2.0)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--modalities", help="comma-separated modality names (default CT)")
    gen.add_argument("--name", default="synthetic", help="dataset name in the manifest")
    gen.set_defaults(func=cmd_generate)

    # internal: command-template child entry; hidden from the public surface
    exe = sub.add_parser("exec-node", add_help=False)
    exe.add_argument("--node-file", required=True)
    exe.set_defaults(func=cmd_exec_node)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (CacheError, EvalBlocksError) as e:
        print(f"execution error: {e}", file=sys.stderr)
        return EXIT_EXECUTION
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
