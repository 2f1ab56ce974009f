"""Declarative experiment configuration: parsing, matrix expansion, selection.

The config is TOML with array-of-table axes and one execution table:

    [[dataset]]     name, manifest
    [[embedder]]    id, kind = synthetic2d|synthetic3d|external, ...
    [[aggregation]] id, kind = none|modality_mean
    [[evaluation]]  id, kind = knn|linear_probe|visualize, ...
    [execution]     workers, backend, cache_dir, results_dir, ...

One expanded matrix cell is an ExperimentSpec; the matrix is the cartesian
product of the axes with folds innermost, in declaration order.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .dataset import DatasetManifest, PreprocessSpec
from .errors import ConfigError

EMBEDDER_KINDS = ("synthetic2d", "synthetic3d", "external")
AGGREGATION_KINDS = ("none", "modality_mean")
EVALUATION_KINDS = ("knn", "linear_probe", "visualize")
BACKENDS = ("local", "command_template")

SELECTOR_KEYS = ("dataset", "embedder", "aggregation", "evaluation", "fold")

DEFAULT_KNN_K = [10, 20, 100, 200]


@dataclass(frozen=True)
class ExperimentSpec:
    """One expanded matrix cell."""

    dataset: str
    embedder: str
    aggregation: str
    evaluation: str
    fold: int

    def as_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "embedder": self.embedder,
            "aggregation": self.aggregation,
            "evaluation": self.evaluation,
            "fold": self.fold,
        }


@dataclass
class DatasetDecl:
    name: str
    manifest: Path


@dataclass
class EmbedderDecl:
    id: str
    kind: str
    preprocess: PreprocessSpec
    params: dict  # dim, seed, standardize, command, timeout_s, ...
    resources: dict = field(default_factory=dict)


@dataclass
class AggregationDecl:
    id: str
    kind: str
    params: dict
    resources: dict = field(default_factory=dict)


@dataclass
class EvaluationDecl:
    id: str
    kind: str
    params: dict
    resources: dict = field(default_factory=dict)


@dataclass
class ExecutionConfig:
    workers: int = 1
    backend: str = "local"
    cache_dir: Path = Path("cache")
    results_dir: Path = Path("results")
    command_template: str | None = None
    remote_timeout_s: float = 3600.0


@dataclass
class ExperimentConfig:
    datasets: list[DatasetDecl]
    embedders: list[EmbedderDecl]
    aggregations: list[AggregationDecl]
    evaluations: list[EvaluationDecl]
    execution: ExecutionConfig = field(default_factory=ExecutionConfig)

    def embedder(self, eid: str) -> EmbedderDecl:
        return _find_decl(self.embedders, eid, "embedder")

    def aggregation(self, aid: str) -> AggregationDecl:
        return _find_decl(self.aggregations, aid, "aggregation")

    def evaluation(self, vid: str) -> EvaluationDecl:
        return _find_decl(self.evaluations, vid, "evaluation")


def _find_decl(decls, wanted, category):
    for d in decls:
        if d.id == wanted:
            return d
    raise ConfigError(f"undeclared {category} {wanted!r}")


def _check_unique(ids: list[str], category: str) -> None:
    seen = set()
    for i in ids:
        if i in seen:
            raise ConfigError(f"duplicate {category} id {i!r}")
        seen.add(i)


def _pop_required(table: dict, key: str, where: str):
    if key not in table:
        raise ConfigError(f"{where}: missing required field {key!r}")
    return table.pop(key)


def parse_config(text: str, base_dir: str | Path = ".") -> ExperimentConfig:
    """Parse and validate a TOML config, applying defaults.

    Relative paths (manifests, cache_dir, results_dir) resolve against
    base_dir, normally the config file's directory.
    """
    base_dir = Path(base_dir)
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"TOML syntax error: {e}")

    known_top = {"dataset", "embedder", "aggregation", "evaluation", "execution"}
    for key in doc:
        if key not in known_top:
            raise ConfigError(f"unknown top-level table {key!r}")

    datasets = []
    for table in doc.get("dataset", []):
        name = _pop_required(table, "name", "[[dataset]]")
        manifest = base_dir / _pop_required(table, "manifest", f"dataset {name!r}")
        if table:
            raise ConfigError(f"dataset {name!r}: unknown fields {sorted(table)}")
        datasets.append(DatasetDecl(name=name, manifest=manifest))
    if not datasets:
        raise ConfigError("config declares no [[dataset]]")
    _check_unique([d.name for d in datasets], "dataset")

    embedders = []
    for table in doc.get("embedder", []):
        eid = _pop_required(table, "id", "[[embedder]]")
        kind = _pop_required(table, "kind", f"embedder {eid!r}")
        if kind not in EMBEDDER_KINDS:
            raise ConfigError(f"embedder {eid!r}: unknown kind {kind!r}")
        resources = dict(table.pop("resources", {}))
        pre = table.pop("preprocess", {})
        default_mode = "volume3d" if kind == "synthetic3d" else "central_slice"
        try:
            preprocess = PreprocessSpec(
                mode=pre.get("mode", default_mode),
                normalization=pre.get("normalization", "none"),
            )
        except Exception as e:
            raise ConfigError(f"embedder {eid!r}: {e}")
        params = dict(table)
        if kind in ("synthetic2d", "synthetic3d"):
            params.setdefault("dim", 32)
            params.setdefault("seed", 0)
            params.setdefault("standardize", True)
            if params["dim"] < 1:
                raise ConfigError(f"embedder {eid!r}: dim must be >= 1")
        else:
            command = params.get("command")
            if not isinstance(command, list) or not command:
                raise ConfigError(f"embedder {eid!r}: external kind requires a command list")
            joined = " ".join(command)
            if "{input}" not in joined or "{output}" not in joined:
                raise ConfigError(
                    f"embedder {eid!r}: command must contain {{input}} and {{output}}"
                )
            params.setdefault("timeout_s", 600.0)
        embedders.append(
            EmbedderDecl(
                id=eid, kind=kind, preprocess=preprocess, params=params, resources=resources
            )
        )
    if not embedders:
        raise ConfigError("config declares no [[embedder]]")
    _check_unique([e.id for e in embedders], "embedder")

    aggregations = []
    for table in doc.get("aggregation", []):
        aid = _pop_required(table, "id", "[[aggregation]]")
        kind = _pop_required(table, "kind", f"aggregation {aid!r}")
        if kind not in AGGREGATION_KINDS:
            raise ConfigError(f"aggregation {aid!r}: unknown kind {kind!r}")
        resources = dict(table.pop("resources", {}))
        aggregations.append(
            AggregationDecl(id=aid, kind=kind, params=dict(table), resources=resources)
        )
    if not aggregations:
        aggregations = [AggregationDecl(id="none", kind="none", params={})]
    _check_unique([a.id for a in aggregations], "aggregation")

    evaluations = []
    for table in doc.get("evaluation", []):
        vid = _pop_required(table, "id", "[[evaluation]]")
        kind = _pop_required(table, "kind", f"evaluation {vid!r}")
        if kind not in EVALUATION_KINDS:
            raise ConfigError(f"evaluation {vid!r}: unknown kind {kind!r}")
        resources = dict(table.pop("resources", {}))
        params = dict(table)
        if kind == "knn":
            params.setdefault("k", list(DEFAULT_KNN_K))
            ks = params["k"]
            if not isinstance(ks, list) or not ks or any(
                not isinstance(k, int) or k < 1 for k in ks
            ):
                raise ConfigError(f"evaluation {vid!r}: k must be a list of integers >= 1")
            params.setdefault("report_k", 20 if 20 in ks else ks[0])
            if params["report_k"] not in ks:
                raise ConfigError(f"evaluation {vid!r}: report_k must be one of k")
        elif kind == "linear_probe":
            params.setdefault("lr", 1e-5)
            params.setdefault("epochs", 100)
            params.setdefault("seed", 0)
            if params["lr"] <= 0 or params["epochs"] < 1:
                raise ConfigError(f"evaluation {vid!r}: lr must be > 0 and epochs >= 1")
        else:  # visualize
            params.setdefault("methods", ["pca", "lda", "tsne"])
            for m in params["methods"]:
                if m not in ("pca", "lda", "tsne"):
                    raise ConfigError(f"evaluation {vid!r}: unknown method {m!r}")
        evaluations.append(
            EvaluationDecl(id=vid, kind=kind, params=params, resources=resources)
        )
    _check_unique([v.id for v in evaluations], "evaluation")

    exe_table = doc.get("execution", {})
    execution = ExecutionConfig(
        workers=exe_table.get("workers", 1),
        backend=exe_table.get("backend", "local"),
        cache_dir=base_dir / exe_table.get("cache_dir", "cache"),
        results_dir=base_dir / exe_table.get("results_dir", "results"),
        command_template=exe_table.get("command_template"),
        remote_timeout_s=float(exe_table.get("remote_timeout_s", 3600.0)),
    )
    if not isinstance(execution.workers, int) or execution.workers < 1:
        raise ConfigError("execution.workers must be an integer >= 1")
    if execution.backend not in BACKENDS:
        raise ConfigError(f"unknown execution backend {execution.backend!r}")

    return ExperimentConfig(
        datasets=datasets,
        embedders=embedders,
        aggregations=aggregations,
        evaluations=evaluations,
        execution=execution,
    )


def expand_matrix(
    cfg: ExperimentConfig, manifests: dict[str, DatasetManifest]
) -> list[ExperimentSpec]:
    """Cartesian product of the config axes, folds innermost.

    Declaration order everywhere, so run logs and reports are stable.
    """
    specs = []
    for ds in cfg.datasets:
        if ds.name not in manifests:
            raise ConfigError(f"no manifest loaded for dataset {ds.name!r}")
        n_folds = manifests[ds.name].n_folds
        for emb in cfg.embedders:
            for agg in cfg.aggregations:
                for ev in cfg.evaluations:
                    for fold in range(n_folds):
                        specs.append(
                            ExperimentSpec(ds.name, emb.id, agg.id, ev.id, fold)
                        )
    return specs


def parse_selector(selector: str) -> list[tuple[str, str]]:
    """Parse ``key=value(,key=value)*`` into constraint pairs."""
    constraints = []
    for part in selector.split(","):
        part = part.strip()
        if not part:
            raise ConfigError(f"empty clause in selector {selector!r}")
        if "=" not in part:
            raise ConfigError(f"selector clause {part!r} is not key=value")
        key, _, value = part.partition("=")
        key, value = key.strip(), value.strip()
        if key not in SELECTOR_KEYS:
            raise ConfigError(
                f"unknown selector key {key!r}; valid keys: {', '.join(SELECTOR_KEYS)}"
            )
        if not value:
            raise ConfigError(f"selector clause {part!r} has an empty value")
        constraints.append((key, value))
    return constraints


def select_targets(specs: list[ExperimentSpec], selector: str | None) -> list[ExperimentSpec]:
    """Subset of the matrix matching every selector clause, order preserved."""
    if not selector:
        return list(specs)
    constraints = parse_selector(selector)

    def matches(spec: ExperimentSpec) -> bool:
        values = spec.as_dict()
        return all(v == "*" or str(values[k]) == v for k, v in constraints)

    return [s for s in specs if matches(s)]
