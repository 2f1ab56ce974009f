"""Block graph construction, wave scheduling, and cached execution.

Experiment specs expand into a deduplicated DAG: one embed node per
distinct (dataset, embedder), one aggregate node per distinct
(dataset, embedder, aggregation), and evaluate/visualize nodes per spec
and channel. Node identity is structural: a SHA over (kind, block
version, canonical params, parent identities), which doubles as the
cache key, so an upstream change re-keys exactly the downstream cone.

Embedding runs once per (dataset, embedder) over all patches; folds are
split at evaluation time. That is what makes embeddings reusable across
every experiment that shares them.
"""

from __future__ import annotations

import json
import logging
import shlex
import shutil
import subprocess
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensorio
from .blocks import aggregate as agg_blocks
from .blocks import evaluate as eval_blocks
from .blocks import viz as viz_blocks
from .blocks.embed import VectorSet, run_dataset_embedding
from .cache import Cache, cache_key, canonical_encode
from .config import EmbedderDecl, ExperimentConfig, ExperimentSpec
from .dataset import DatasetManifest, PreprocessSpec, fold_split, load_manifest
from .errors import BlockExecutionError, CacheError, ConfigError
from .results import ResultStore

log = logging.getLogger(__name__)

BLOCK_VERSIONS = {"embed": "1", "aggregate": "1", "evaluate": "1", "visualize": "1"}


@dataclass
class BlockNode:
    node_id: str  # structural identity; also the cache key
    kind: str  # embed | aggregate | evaluate | visualize
    params: dict
    inputs: list[str]  # parent node ids, in order
    source_digests: list[str]  # raw-data digests feeding this node directly
    outputs: list[str]  # declared artifact names
    label: str  # human-readable for logs and reports
    channel: str | None = None
    skip_reason: str | None = None
    specs: list[ExperimentSpec] = field(default_factory=list)
    resources: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "node_id": self.node_id,
            "kind": self.kind,
            "params": self.params,
            "inputs": self.inputs,
            "source_digests": self.source_digests,
            "outputs": self.outputs,
            "label": self.label,
            "channel": self.channel,
            "skip_reason": self.skip_reason,
            "specs": [s.as_dict() for s in self.specs],
            "resources": self.resources,
        }

    @staticmethod
    def from_json(doc: dict) -> "BlockNode":
        return BlockNode(
            node_id=doc["node_id"],
            kind=doc["kind"],
            params=doc["params"],
            inputs=list(doc["inputs"]),
            source_digests=list(doc["source_digests"]),
            outputs=list(doc["outputs"]),
            label=doc["label"],
            channel=doc.get("channel"),
            skip_reason=doc.get("skip_reason"),
            specs=[ExperimentSpec(**s) for s in doc.get("specs", [])],
            resources=doc.get("resources", {}),
        )


@dataclass
class BlockGraph:
    nodes: dict[str, BlockNode] = field(default_factory=dict)  # insertion-ordered

    def add(self, node: BlockNode) -> BlockNode:
        existing = self.nodes.get(node.node_id)
        if existing is None:
            self.nodes[node.node_id] = node
            return node
        existing.specs.extend(s for s in node.specs if s not in existing.specs)
        return existing

    def counts_by_kind(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for node in self.nodes.values():
            counts[node.kind] = counts.get(node.kind, 0) + 1
        return counts


def _node_identity(kind: str, params: dict, inputs: list[str], source_digests: list[str]) -> str:
    return cache_key(kind, BLOCK_VERSIONS[kind], params, list(source_digests) + list(inputs))


_file_digest_memo: dict[tuple[str, float, int], str] = {}


def _file_digest(path: Path) -> str:
    st = path.stat()
    key = (str(path), st.st_mtime, st.st_size)
    digest = _file_digest_memo.get(key)
    if digest is None:
        digest = tensorio.hash_artifact(path)
        _file_digest_memo[key] = digest
    return digest


def dataset_content_digest(manifest: DatasetManifest) -> str:
    """Identity of the patch bytes an embedder sees (labels excluded)."""
    entries = [
        [p.patch_id, m, _file_digest(manifest.patch_path(p, m))]
        for p in manifest.patches
        for m in manifest.modalities
    ]
    return tensorio.hash_bytes(
        canonical_encode(
            {
                "patch_shape": list(manifest.patch_shape),
                "modalities": manifest.modalities,
                "entries": entries,
            }
        )
    )


def dataset_labels_digest(manifest: DatasetManifest) -> str:
    """Identity of labels and fold assignments (patch bytes excluded)."""
    return tensorio.hash_bytes(
        canonical_encode(
            {
                "n_folds": manifest.n_folds,
                "entries": [[p.patch_id, p.label, p.fold] for p in manifest.patches],
            }
        )
    )


def aggregation_channels(kind: str, agg_id: str, manifest: DatasetManifest) -> list[str] | None:
    """Output channels of an aggregation, or None when it must be skipped.

    Identity keeps per-modality channels (each evaluated separately);
    modality_mean yields one channel named after the aggregation, and is
    skipped rather than failed on single-modality datasets so one matrix
    can span CT and MR datasets.
    """
    if kind == "none":
        return list(manifest.modalities)
    if len(manifest.modalities) < 2:
        return None
    return [agg_id]


def build_graph(
    specs: list[ExperimentSpec],
    cfg: ExperimentConfig,
    manifests: dict[str, DatasetManifest],
) -> BlockGraph:
    """Expand specs into the deduplicated block DAG."""
    graph = BlockGraph()
    for spec in specs:
        manifest = manifests[spec.dataset]
        if spec.fold >= manifest.n_folds:
            raise ConfigError(
                f"spec references fold {spec.fold} but {spec.dataset!r} has "
                f"{manifest.n_folds} folds"
            )
        embedder = cfg.embedder(spec.embedder)
        aggregation = cfg.aggregation(spec.aggregation)
        evaluation = cfg.evaluation(spec.evaluation)

        embed_params = {
            "dataset": spec.dataset,
            "embedder_kind": embedder.kind,
            "preprocess": {
                "mode": embedder.preprocess.mode,
                "normalization": embedder.preprocess.normalization,
            },
            **embedder.params,
        }
        embed_node = graph.add(
            BlockNode(
                node_id=_node_identity(
                    "embed", embed_params, [], [dataset_content_digest(manifest)]
                ),
                kind="embed",
                params=embed_params,
                inputs=[],
                source_digests=[dataset_content_digest(manifest)],
                outputs=[f"emb_{m}.evbt" for m in manifest.modalities]
                + [f"emb_{m}.index.json" for m in manifest.modalities],
                label=f"embed {spec.dataset}/{spec.embedder}",
                resources=embedder.resources,
            )
        )

        channels = aggregation_channels(aggregation.kind, aggregation.id, manifest)
        agg_params = {
            "aggregation_kind": aggregation.kind,
            # registered strategy version: bumping it re-keys all aggregations
            "aggregator_version": agg_blocks.get_aggregator(aggregation.kind)[0],
            "channels": channels if channels is not None else [aggregation.id],
            **aggregation.params,
        }
        agg_node = graph.add(
            BlockNode(
                node_id=_node_identity("aggregate", agg_params, [embed_node.node_id], []),
                kind="aggregate",
                params=agg_params,
                inputs=[embed_node.node_id],
                source_digests=[],
                outputs=[f"agg_{c}.evbt" for c in agg_params["channels"]]
                + [f"agg_{c}.index.json" for c in agg_params["channels"]],
                label=f"aggregate {spec.dataset}/{spec.embedder}/{spec.aggregation}",
                resources=aggregation.resources,
                skip_reason=(
                    None
                    if channels is not None
                    else f"{aggregation.kind} needs >= 2 modalities; "
                    f"{spec.dataset!r} has {len(manifest.modalities)}"
                ),
            )
        )

        kind = "visualize" if evaluation.kind == "visualize" else "evaluate"
        for channel in agg_params["channels"]:
            eval_params = {
                "evaluation_kind": evaluation.kind,
                "channel": channel,
                "fold": spec.fold,
                **evaluation.params,
            }
            if kind == "visualize":
                outputs = [f"{m}.svg" for m in evaluation.params["methods"]]
                outputs += [f"{m}.csv" for m in evaluation.params["methods"]]
                outputs += ["diagnostics.json"]
            else:
                outputs = ["metrics.json"]
            graph.add(
                BlockNode(
                    node_id=_node_identity(
                        kind, eval_params, [agg_node.node_id], [dataset_labels_digest(manifest)]
                    ),
                    kind=kind,
                    params=eval_params,
                    inputs=[agg_node.node_id],
                    source_digests=[dataset_labels_digest(manifest)],
                    outputs=outputs,
                    label=(
                        f"{kind} {spec.dataset}/{spec.embedder}/{channel}/"
                        f"{spec.evaluation}/fold{spec.fold}"
                    ),
                    channel=channel,
                    specs=[spec],
                    resources=evaluation.resources,
                )
            )
    return graph


def schedule(graph: BlockGraph) -> list[list[str]]:
    """Partition into waves: wave i holds nodes of longest-path depth i."""
    level: dict[str, int] = {}
    visiting: set[str] = set()

    def depth(nid: str) -> int:
        if nid not in level:
            assert nid not in visiting, "cycle detected (impossible by construction)"
            visiting.add(nid)
            node = graph.nodes[nid]
            level[nid] = 0 if not node.inputs else 1 + max(depth(p) for p in node.inputs)
            visiting.discard(nid)
        return level[nid]

    waves: list[list[str]] = []
    for nid in graph.nodes:  # insertion order keeps waves deterministic
        d = depth(nid)
        while len(waves) <= d:
            waves.append([])
        waves[d].append(nid)
    return waves


# ---------------------------------------------------------------------------
# block bodies


@dataclass
class ExecContext:
    manifests: dict[str, DatasetManifest]
    cache: Cache
    work_root: Path


def _load_vector_set(entry, prefix: str, channel: str, dataset: str, embedder: str) -> VectorSet:
    matrix = tensorio.read_tensor(entry.path(f"{prefix}_{channel}.evbt"))
    index = json.loads(entry.path(f"{prefix}_{channel}.index.json").read_text())
    return VectorSet(
        dataset=dataset,
        embedder=embedder,
        channel=channel,
        dim=int(index["dim"]),
        ids=list(index["ids"]),
        matrix=matrix,
    )


def _write_vector_set(vs: VectorSet, prefix: str, out_dir: Path) -> dict[str, Path]:
    tensor_path = out_dir / f"{prefix}_{vs.channel}.evbt"
    index_path = out_dir / f"{prefix}_{vs.channel}.index.json"
    tensorio.write_tensor(tensor_path, vs.matrix)
    index_path.write_text(json.dumps({"ids": vs.ids, "dim": vs.dim}, sort_keys=True))
    return {tensor_path.name: tensor_path, index_path.name: index_path}


def _run_embed(node: BlockNode, ctx: ExecContext, work: Path) -> dict[str, Path]:
    manifest = ctx.manifests[node.params["dataset"]]
    decl = EmbedderDecl(
        id="<node>",
        kind=node.params["embedder_kind"],
        preprocess=PreprocessSpec(**node.params["preprocess"]),
        params={
            k: v
            for k, v in node.params.items()
            if k not in ("dataset", "embedder_kind", "preprocess")
        },
    )
    outputs: dict[str, Path] = {}
    for modality, vs in run_dataset_embedding(manifest, decl, work / "plugin").items():
        outputs.update(_write_vector_set(vs, "emb", work))
    return outputs


def _run_aggregate(node: BlockNode, ctx: ExecContext, work: Path) -> dict[str, Path]:
    parent = ctx.cache.get(node.inputs[0])
    if parent is None:
        raise BlockExecutionError("aggregate input artifacts missing from cache")
    kind = node.params["aggregation_kind"]
    channels = node.params["channels"]
    if kind == "none":
        # identity: digest-equal pass-through of the embed artifacts
        outputs = {}
        for channel in channels:
            for suffix in (".evbt", ".index.json"):
                src = parent.path(f"emb_{channel}{suffix}")
                dst = work / f"agg_{channel}{suffix}"
                shutil.copyfile(src, dst)
                outputs[dst.name] = dst
        return outputs
    modalities = [
        name.removeprefix("emb_").removesuffix(".evbt")
        for name in parent.outputs
        if name.endswith(".evbt")
    ]
    sets = [_load_vector_set(parent, "emb", m, "", "") for m in modalities]
    _, fn = agg_blocks.get_aggregator(kind)
    outputs = {}
    for vs in fn(sets, channels[0]):
        outputs.update(_write_vector_set(vs, "agg", work))
    return outputs


def _fold_arrays(manifest: DatasetManifest, vs: VectorSet, fold: int):
    labels = manifest.labels()
    train_ids, test_ids = fold_split(manifest, fold)
    return (
        vs.rows_for(train_ids),
        np.array([labels[i] for i in train_ids]),
        vs.rows_for(test_ids),
        np.array([labels[i] for i in test_ids]),
    )


def _json_metric(value: float) -> float | None:
    return None if value is None or not np.isfinite(value) else float(value)


def _run_evaluate(node: BlockNode, ctx: ExecContext, work: Path) -> dict[str, Path]:
    parent = ctx.cache.get(node.inputs[0])
    if parent is None:
        raise BlockExecutionError("evaluate input artifacts missing from cache")
    spec = node.specs[0]
    manifest = ctx.manifests[spec.dataset]
    vs = _load_vector_set(parent, "agg", node.params["channel"], spec.dataset, spec.embedder)
    train_x, train_y, test_x, test_y = _fold_arrays(manifest, vs, node.params["fold"])

    metrics: dict[str, float | None] = {}
    if node.params["evaluation_kind"] == "knn":
        report_k = node.params["report_k"]
        for k in node.params["k"]:
            scores = eval_blocks.knn_scores(
                train_x, train_y, test_x, k=k, metric=node.params.get("metric", "euclidean")
            )
            acc = eval_blocks.accuracy(scores, test_y)
            area = eval_blocks.auc(scores, test_y)
            metrics[f"accuracy_k{k}"] = _json_metric(acc)
            metrics[f"auc_k{k}"] = _json_metric(area)
            if k == report_k:
                metrics["accuracy"] = _json_metric(acc)
                metrics["auc"] = _json_metric(area)
    else:  # linear_probe
        model = eval_blocks.train_linear_probe(
            train_x,
            train_y,
            lr=node.params["lr"],
            epochs=node.params["epochs"],
            seed=node.params.get("seed", 0),
        )
        scores = eval_blocks.probe_predict(model, test_x)[:, 1]
        metrics["accuracy"] = _json_metric(eval_blocks.accuracy(scores, test_y))
        metrics["auc"] = _json_metric(eval_blocks.auc(scores, test_y))
        metrics["final_train_loss"] = _json_metric(model.loss_trace[-1])

    doc = {
        "spec": {**spec.as_dict(), "channel": node.params["channel"]},
        "metrics": metrics,
        "params": {k: v for k, v in node.params.items() if k != "channel"},
    }
    out = work / "metrics.json"
    out.write_text(json.dumps(doc, indent=1, sort_keys=True))
    return {"metrics.json": out}


def _run_visualize(node: BlockNode, ctx: ExecContext, work: Path) -> dict[str, Path]:
    parent = ctx.cache.get(node.inputs[0])
    if parent is None:
        raise BlockExecutionError("visualize input artifacts missing from cache")
    spec = node.specs[0]
    manifest = ctx.manifests[spec.dataset]
    vs = _load_vector_set(parent, "agg", node.params["channel"], spec.dataset, spec.embedder)
    labels_map = manifest.labels()
    _, test_ids = fold_split(manifest, node.params["fold"])
    test_set = set(test_ids)
    labels = np.array([labels_map[i] for i in vs.ids])
    split = ["test" if pid in test_set else "train" for pid in vs.ids]

    outputs: dict[str, Path] = {}
    diagnostics: dict[str, dict] = {}
    for method in node.params["methods"]:
        if method == "pca":
            proj = viz_blocks.pca_project(vs.matrix, components=2, labels=labels)
        elif method == "lda":
            proj = viz_blocks.lda_project(vs.matrix, labels)
        else:
            proj = viz_blocks.tsne_embed(
                vs.matrix,
                perplexity=node.params.get("tsne_perplexity", 30.0),
                iters=node.params.get("tsne_iters", 1000),
                learning_rate=node.params.get("tsne_learning_rate", 200.0),
                seed=node.params.get("tsne_seed", 0),
                labels=labels,
            )
        proj.ids = list(vs.ids)
        proj.split = split
        svg_path = work / f"{method}.svg"
        viz_blocks.render_projection(proj, svg_path)
        outputs[f"{method}.svg"] = svg_path
        outputs[f"{method}.csv"] = work / f"{method}.csv"
        diagnostics[method] = proj.diagnostics
    diag_path = work / "diagnostics.json"
    diag_path.write_text(json.dumps(diagnostics, indent=1, sort_keys=True))
    outputs["diagnostics.json"] = diag_path
    return outputs


_BODIES = {
    "embed": _run_embed,
    "aggregate": _run_aggregate,
    "evaluate": _run_evaluate,
    "visualize": _run_visualize,
}


def execute_node_body(node: BlockNode, ctx: ExecContext) -> dict[str, Path]:
    """Run one block into a private work dir and return its output files."""
    work = Path(tempfile.mkdtemp(prefix=f"{node.kind}-", dir=ctx.work_root))
    return _BODIES[node.kind](node, ctx, work)


# ---------------------------------------------------------------------------
# executors

# Local blocks run in a process pool: bodies are CPU-bound Python/numpy,
# so threads would serialize on the GIL. Blocks share nothing but the
# cache, whose atomic publish is already multi-process safe. Each worker
# process builds its context once and pins BLAS to one thread, which also
# keeps artifacts bit-identical across worker counts.
_child_ctx: ExecContext | None = None


def _local_child_init(cache_dir: str, manifest_paths: dict[str, str], work_root: str) -> None:
    global _child_ctx
    threadpool_limits(limits=1)
    manifests = {
        name: load_manifest(path, check_files=False) for name, path in manifest_paths.items()
    }
    _child_ctx = ExecContext(
        manifests=manifests, cache=Cache(cache_dir), work_root=Path(work_root)
    )


def _local_child_run(node_doc: dict) -> NodeResult:
    node = BlockNode.from_json(node_doc)
    start = time.monotonic()
    try:
        outputs = execute_node_body(node, _child_ctx)
        _child_ctx.cache.put(node.node_id, node.kind, BLOCK_VERSIONS[node.kind], outputs)
        status, detail = "executed", ""
    except CacheError as e:
        status, detail = "cache_error", str(e)
    except Exception as e:  # noqa: BLE001 - block failures are recorded, not thrown
        status, detail = "failed", f"{type(e).__name__}: {e}"
    return NodeResult(
        node.node_id, node.kind, node.label, status, time.monotonic() - start, detail
    )


class CommandTemplateExecutor:
    """Launches each node as a self-contained re-invocation of this package
    rendered into a user command template: the seam for cluster schedulers.

    The template must contain {cmd}; {cpus}, {stdout}, {stderr} are
    optional. Completion is detected by polling a sentinel file the child
    writes, so submit commands may return before the work finishes.
    """

    def __init__(
        self,
        ctx: ExecContext,
        template: str,
        spool_dir: Path,
        manifest_paths: dict[str, Path],
        timeout_s: float = 3600.0,
    ):
        if "{cmd}" not in template:
            raise ConfigError("command template must contain the {cmd} placeholder")
        self.ctx = ctx
        self.template = template
        self.spool = Path(spool_dir)
        self.spool.mkdir(parents=True, exist_ok=True)
        self.manifest_paths = manifest_paths
        self.timeout_s = timeout_s

    def run(self, node: BlockNode) -> None:
        nid = node.node_id
        node_file = self.spool / f"{nid}.json"
        sentinel = self.spool / f"{nid}.done"
        sentinel.unlink(missing_ok=True)
        node_file.write_text(
            json.dumps(
                {
                    "node": node.to_json(),
                    "cache_dir": str(self.ctx.cache.root),
                    "manifests": {k: str(v) for k, v in self.manifest_paths.items()},
                    "sentinel": str(sentinel),
                },
                indent=1,
            )
        )
        cmd = (
            f"{shlex.quote(sys.executable)} -m evalblocks.cli exec-node "
            f"--node-file {shlex.quote(str(node_file))}"
        )
        rendered = (
            self.template.replace("{cmd}", cmd)
            .replace("{cpus}", str(node.resources.get("cpus", 1)))
            .replace("{stdout}", str(self.spool / f"{nid}.out"))
            .replace("{stderr}", str(self.spool / f"{nid}.err"))
        )
        proc = subprocess.Popen(
            rendered, shell=True, stdout=subprocess.DEVNULL, stderr=subprocess.PIPE
        )
        deadline = time.monotonic() + self.timeout_s
        submit_rc: int | None = None
        while time.monotonic() < deadline:
            if sentinel.exists():
                break
            if submit_rc is None:
                submit_rc = proc.poll()
                if submit_rc is not None and submit_rc != 0:
                    # a failing child writes its sentinel before exiting, so
                    # re-check once to report the node error, not the submit rc
                    if sentinel.exists():
                        break
                    stderr = proc.stderr.read().decode(errors="replace") if proc.stderr else ""
                    raise BlockExecutionError(
                        f"submit command exited {submit_rc}: {stderr.strip()[:500]}"
                    )
            time.sleep(0.05)
        else:
            proc.kill()
            raise BlockExecutionError(f"remote node timed out after {self.timeout_s}s")
        status = json.loads(sentinel.read_text())
        if status.get("status") != "ok":
            raise BlockExecutionError(f"remote node failed: {status.get('error', 'unknown')}")
        if self.ctx.cache.get(nid) is None:
            raise BlockExecutionError("remote node reported success but published no cache entry")


def run_node_file(node_file: str | Path) -> int:
    """Child-process entry for the command-template backend.

    Executes one serialized node against the shared cache, then publishes
    a status sentinel. The sentinel write is atomic so pollers never see
    a partial file.
    """
    doc = json.loads(Path(node_file).read_text())
    node = BlockNode.from_json(doc["node"])
    sentinel = Path(doc["sentinel"])
    try:
        cache = Cache(doc["cache_dir"])
        manifests = {name: load_manifest(path) for name, path in doc["manifests"].items()}
        with threadpool_limits(limits=1), tempfile.TemporaryDirectory(
            prefix="evalblocks-node-"
        ) as tmp:
            ctx = ExecContext(manifests=manifests, cache=cache, work_root=Path(tmp))
            outputs = execute_node_body(node, ctx)
            cache.put(node.node_id, node.kind, BLOCK_VERSIONS[node.kind], outputs)
        payload, code = {"status": "ok"}, 0
    except Exception as e:  # noqa: BLE001 - child must always write a sentinel
        payload, code = {"status": "failed", "error": f"{type(e).__name__}: {e}"}, 1
    tmp_path = sentinel.with_suffix(".tmp")
    tmp_path.write_text(json.dumps(payload))
    tmp_path.replace(sentinel)
    return code


# ---------------------------------------------------------------------------
# the engine loop


@dataclass
class NodeResult:
    node_id: str
    kind: str
    label: str
    status: str  # executed | cache_hit | skipped | failed
    duration: float = 0.0
    detail: str = ""


@dataclass
class RunReport:
    executed: int = 0
    cache_hits: int = 0
    skipped: int = 0
    failed: int = 0
    wall_time: float = 0.0
    per_node: list[NodeResult] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "executed": self.executed,
            "cache_hits": self.cache_hits,
            "skipped": self.skipped,
            "failed": self.failed,
            "total": len(self.per_node),
            "wall_time": self.wall_time,
            "per_node": [
                {
                    "node_id": r.node_id,
                    "kind": r.kind,
                    "label": r.label,
                    "status": r.status,
                    "duration": r.duration,
                    "detail": r.detail,
                }
                for r in self.per_node
            ],
        }

    def summary(self) -> str:
        return (
            f"executed={self.executed} cache_hits={self.cache_hits} "
            f"skipped={self.skipped} failed={self.failed} "
            f"wall_time={self.wall_time:.2f}s"
        )


def execute(
    graph: BlockGraph,
    cfg: ExperimentConfig,
    manifests: dict[str, DatasetManifest],
    cache: Cache,
    workers: int = 1,
    store: ResultStore | None = None,
    results_dir: Path | None = None,
    backend: str = "local",
    command_template: str | None = None,
) -> RunReport:
    """Execute the graph wave by wave through the cache.

    Every node is either served from cache or executed and published;
    descendants of failures and skips never run. Block failures are
    recorded per node, cache I/O failures abort the run. With fixed
    seeds the produced artifacts are byte-identical for any worker count.
    """
    if workers < 1:
        raise ConfigError("workers must be >= 1")
    t0 = time.monotonic()
    waves = schedule(graph)
    results: dict[str, NodeResult] = {}
    manifest_paths = {d.name: str(d.manifest) for d in cfg.datasets}

    # pin BLAS in the coordinator too: blocks are the unit of parallelism
    with threadpool_limits(limits=1), tempfile.TemporaryDirectory(
        prefix="evalblocks-run-"
    ) as tmp:
        ctx = ExecContext(manifests=manifests, cache=cache, work_root=Path(tmp))
        remote = None
        if backend != "local":
            if command_template is None:
                raise ConfigError("command_template backend requires a template")
            if results_dir is None:
                raise ConfigError("command_template backend requires a results_dir for its spool")
            remote = CommandTemplateExecutor(
                ctx,
                command_template,
                Path(results_dir) / "spool",
                {d.name: d.manifest for d in cfg.datasets},
                timeout_s=cfg.execution.remote_timeout_s,
            )
        pool = None  # created on first miss: a fully cached run forks nothing

        def bad(nid: str) -> bool:
            return results[nid].status in ("failed", "skipped")

        def submit(node: BlockNode):
            nonlocal pool
            if remote is not None:
                if pool is None:
                    pool = ThreadPoolExecutor(max_workers=workers)
                return pool.submit(_timed_run, remote, node)
            if pool is None:
                pool = ProcessPoolExecutor(
                    max_workers=workers,
                    initializer=_local_child_init,
                    initargs=(str(cache.root), manifest_paths, tmp),
                )
            return pool.submit(_local_child_run, node.to_json())

        entries: dict[str, object] = {}
        try:
            for wave in waves:
                to_run: list[BlockNode] = []
                for nid in wave:
                    node = graph.nodes[nid]
                    if node.skip_reason:
                        results[nid] = NodeResult(
                            nid, node.kind, node.label, "skipped", detail=node.skip_reason
                        )
                    elif any(bad(p) for p in node.inputs):
                        results[nid] = NodeResult(
                            nid, node.kind, node.label, "skipped", detail="upstream not available"
                        )
                    else:
                        entry = cache.get(nid)
                        if entry is not None:
                            entries[nid] = entry
                            results[nid] = NodeResult(nid, node.kind, node.label, "cache_hit")
                        else:
                            to_run.append(node)

                wave_results = {}
                for future, node in [(submit(node), node) for node in to_run]:
                    wave_results[node.node_id] = future.result()
                for node in to_run:  # record in wave order, not completion order
                    result = wave_results[node.node_id]
                    if result.status == "cache_error":
                        raise CacheError(result.detail)  # aborts the run
                    results[node.node_id] = result

                for nid in wave:
                    node = graph.nodes[nid]
                    if results[nid].status in ("executed", "cache_hit") and node.kind in (
                        "evaluate",
                        "visualize",
                    ):
                        entry = entries.get(nid) or cache.get(nid)
                        if entry is None:
                            raise CacheError(f"published entry vanished for {node.label}")
                        _collect_outputs(node, entry, store, results_dir)
        finally:
            if pool is not None:
                pool.shutdown(wait=True, cancel_futures=True)

    report = RunReport(per_node=[results[nid] for wave in waves for nid in wave])
    for r in report.per_node:
        if r.status == "executed":
            report.executed += 1
        elif r.status == "cache_hit":
            report.cache_hits += 1
        elif r.status == "skipped":
            report.skipped += 1
        else:
            report.failed += 1
    report.wall_time = time.monotonic() - t0

    if results_dir is not None:
        runs_dir = Path(results_dir) / "runs"
        runs_dir.mkdir(parents=True, exist_ok=True)
        stamp = time.strftime("%Y%m%dT%H%M%S") + f".{int((time.time() % 1) * 1e6):06d}"
        (runs_dir / f"{stamp}.json").write_text(json.dumps(report.to_json(), indent=1))
    return report


def _timed_run(executor, node: BlockNode) -> NodeResult:
    start = time.monotonic()
    try:
        executor.run(node)
        status, detail = "executed", ""
    except CacheError as e:
        status, detail = "cache_error", str(e)
    except Exception as e:  # noqa: BLE001 - block failures are recorded, not thrown
        status, detail = "failed", f"{type(e).__name__}: {e}"
        log.warning("node %s failed: %s", node.label, detail)
    return NodeResult(
        node.node_id, node.kind, node.label, status, time.monotonic() - start, detail
    )


def _collect_outputs(
    node: BlockNode, entry, store: ResultStore | None, results_dir: Path | None
) -> None:
    if node.kind == "evaluate" and store is not None:
        doc = json.loads(entry.path("metrics.json").read_text())
        for spec in node.specs:
            store.record_result(spec, node.channel or spec.aggregation, doc["metrics"], doc["params"])
    if node.kind == "visualize" and results_dir is not None:
        for spec in node.specs:
            dest_dir = (
                Path(results_dir)
                / "viz"
                / spec.dataset
                / spec.embedder
                / (node.channel or spec.aggregation)
                / str(spec.fold)
            )
            dest_dir.mkdir(parents=True, exist_ok=True)
            for name in entry.outputs:
                if not name.endswith((".svg", ".csv")):
                    continue
                src, dest = entry.path(name), dest_dir / name
                try:  # cached rerun: dest already copied after this entry was made
                    st = dest.stat()
                    if st.st_size == src.stat().st_size and st.st_mtime >= entry.created_at:
                        continue
                except OSError:
                    pass
                shutil.copyfile(src, dest)
