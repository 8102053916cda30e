"""Deterministic execution of flows against a configuration snapshot."""

import logging
from dataclasses import dataclass
from typing import Any, Callable, Mapping, Sequence

from . import canonical
from .errors import HashMismatch, ProcessorFailure, UnboundFragment, ValidationFailed
from .flow import (
    CheckResult,
    FlowGraph,
    Fragment,
    bind,
    flow_payload,
    stream_payload,
    validate,
)
from .metamodel import ConfigurationSnapshot, ExecutionRecord, MetaModel
from .processors import Processor, ProcessorRegistry, Tree, default_registry
from .seeding import derive_seed
from .store import ContributionId, ContributionKind, ContributionStore, Principal, make_uri

logger = logging.getLogger(__name__)

STREAMS_NAMESPACE = "streams"
RESULTS_NAMESPACE = "results"

# (node, processor, trees, params, seed) -> trees
NodeRunner = Callable[[str, Processor, list[Tree], Mapping[str, Any], int], list[Tree]]


def serial_runner(node: str, processor: Processor, trees: list[Tree],
                  params: Mapping[str, Any], seed: int) -> list[Tree]:
    return processor.process(trees, params, seed)


def output_hash(outputs: Mapping[str, Sequence[Fragment]]) -> str:
    """Combined digest of all sink outputs in canonical form."""
    return canonical.tree_digest({sink: [f.to_tree() for f in fragments]
                                  for sink, fragments in outputs.items()})


@dataclass
class ExecutionResult:
    outputs: dict[str, list[Fragment]]
    record: ExecutionRecord

    @property
    def output_hash(self) -> str:
        return self.record.output_hash


class FlowExecutor:
    """Evaluates flows node by node and persists inputs, results and the record."""

    def __init__(self, store: ContributionStore, registry: ProcessorRegistry | None = None,
                 metamodel: MetaModel | None = None):
        self.store = store
        self.registry = registry or default_registry()
        self.metamodel = metamodel or MetaModel(store)

    def check(self, graph: FlowGraph, inputs: Mapping[str, Sequence[Fragment]],
              config: ConfigurationSnapshot) -> FlowGraph:
        """Validate the graph against the snapshot; returns the bound graph."""
        if canonical.digest(flow_payload(graph)) != config.flow.content_hash:
            raise ValidationFailed([CheckResult("*", "flow_mismatch",
                                                f"graph does not match flow {config.flow.uri}")])
        bindings = config.processor_refs()
        findings = validate(graph, self.store, self.registry, bindings)
        bound = graph.with_bindings(bindings)
        for source in bound.sources:
            if source not in inputs:
                findings.append(CheckResult(source, "missing_input", "no input stream given"))
        for name in sorted(set(inputs) - set(bound.sources)):
            findings.append(CheckResult(name, "unknown_source", "input given for a node that is not a source"))
        if findings:
            raise ValidationFailed(findings)
        return bound

    def evaluate(self, graph: FlowGraph, inputs: Mapping[str, Sequence[Fragment]],
                 config: ConfigurationSnapshot, runner: NodeRunner | None = None,
                 ) -> tuple[dict[str, list[Fragment]], dict[str, dict[str, int]]]:
        """Run every node in topological order. Returns all node outputs and stats."""
        runner = runner or serial_runner
        produced: dict[str, list[Fragment]] = {}
        stats: dict[str, dict[str, int]] = {}

        sources = set(graph.sources)
        for node in graph.topological_order():
            if node in sources:
                fragments = list(inputs[node])
            else:
                fragments = [f for upstream in graph.predecessors(node) for f in produced[upstream]]
            for fragment in fragments:
                if fragment.config_id != config.id:
                    raise UnboundFragment(
                        f"fragment {fragment.seq} at node '{node}' is bound to "
                        f"{fragment.config_id[:12] or '(nothing)'}, not {config.id[:12]}"
                    )

            ref = graph.nodes[node]
            processor = self.registry.get(ref.name, ref.version)
            try:
                params = processor.resolve_params(config.node_params(node))
                trees = runner(node, processor, [dict(f.tree) for f in fragments], params,
                               derive_seed(config.seed, node))
                for tree in trees:
                    if not isinstance(tree, Mapping):
                        raise TypeError(f"processor returned {type(tree).__name__}, expected a map")
                    canonical.encode(tree)
            except ProcessorFailure:
                raise
            except Exception as e:
                raise ProcessorFailure(node, e) from e

            produced[node] = bind(trees, config.id)
            stats[node] = {"in": len(fragments), "out": len(trees)}
            logger.debug("node %s (%s): %d in, %d out", node, ref.key, len(fragments), len(trees))

        return produced, stats

    def execute(self, graph: FlowGraph, inputs: Mapping[str, Sequence[Fragment]],
                config: ConfigurationSnapshot, principal: Principal, *,
                origins: Mapping[str, ContributionId] | None = None,
                input_ids: Mapping[str, ContributionId] | None = None,
                runner: NodeRunner | None = None, workers: int = 1, reproduces: str = "",
                expected_output_hash: str | None = None) -> ExecutionResult:
        """Execute a flow, persist inputs and results, and write the record.

        origins: per source, the series the input stream was replayed from.
        input_ids: per source, an already stored stream to reference instead.
        """
        bound = self.check(graph, inputs, config)
        started = self.store.now()
        produced, stats = self.evaluate(bound, inputs, config, runner)

        outputs = {sink: produced[sink] for sink in bound.sinks}
        combined = output_hash(outputs)
        if expected_output_hash is not None and combined != expected_output_hash:
            raise HashMismatch(
                f"output hash {combined[:16]} differs from expected {expected_output_hash[:16]}"
            )

        with self.store.writer():
            stream_ids = self._persist_inputs(bound, inputs, principal, origins or {}, input_ids or {})
            result_ids = self._persist_outputs(bound, outputs, config, stream_ids, principal)
            record = self.metamodel.record(
                config,
                inputs=stream_ids,
                outputs=result_ids,
                output_hash=combined,
                node_stats=stats,
                principal=principal,
                started=started,
                ended=self.store.now(),
                workers=workers,
                reproduces=reproduces,
            )
        return ExecutionResult(outputs=outputs, record=record)

    def run(self, graph: FlowGraph, inputs: Mapping[str, Sequence[Fragment]],
            config: ConfigurationSnapshot, principal: Principal, *, workers: int | None = None,
            **kwargs) -> ExecutionResult:
        """Execute serially or across endpoints, depending on the worker count."""
        workers = config.workers if workers is None else workers
        if workers != 1:
            from .distribution import execute_distributed
            return execute_distributed(self, graph, inputs, config, workers, principal, **kwargs)
        return self.execute(graph, inputs, config, principal, workers=1, **kwargs)

    def _persist_inputs(self, graph: FlowGraph, inputs: Mapping[str, Sequence[Fragment]],
                        principal: Principal, origins: Mapping[str, ContributionId],
                        input_ids: Mapping[str, ContributionId]) -> list[ContributionId]:
        stream_ids = []
        for source in graph.sources:
            if source in input_ids:
                stream_ids.append(input_ids[source])
                continue
            payload = stream_payload(inputs[source])
            uri = make_uri(STREAMS_NAMESPACE, f"{source}-{canonical.digest(payload)[:16]}")
            if source in origins:
                cid = self.store.derive([origins[source]], payload, principal, uri,
                                        kind=ContributionKind.DATASET)
            else:
                cid = self.store.register(payload, ContributionKind.DATASET, principal, uri)
            stream_ids.append(cid)
        return stream_ids

    def _persist_outputs(self, graph: FlowGraph, outputs: Mapping[str, list[Fragment]],
                         config: ConfigurationSnapshot, stream_ids: Sequence[ContributionId],
                         principal: Principal) -> list[ContributionId]:
        parents = [config.flow]
        for node in sorted(config.bindings):
            if config.bindings[node] not in parents:
                parents.append(config.bindings[node])
        for cid in stream_ids:
            if cid not in parents:
                parents.append(cid)

        result_ids = []
        for sink in graph.sinks:
            key = canonical.tree_digest({
                "config": config.id,
                "inputs": [cid.ref for cid in stream_ids],
                "sink": sink,
            })
            payload = canonical.encode_bytes({
                "config": config.id,
                "fragments": [f.to_tree() for f in outputs[sink]],
                "sink": sink,
            })
            uri = make_uri(RESULTS_NAMESPACE, f"{sink}-{key[:16]}")
            result_ids.append(self.store.derive(parents, payload, principal, uri,
                                                kind=ContributionKind.RESULT))
        return result_ids


def run_flow(store: ContributionStore, graph: FlowGraph, inputs: Mapping[str, Sequence[Fragment]],
             config: ConfigurationSnapshot, principal: Principal, workers: int | None = None,
             registry: ProcessorRegistry | None = None, **kwargs) -> ExecutionResult:
    return FlowExecutor(store, registry).run(graph, inputs, config, principal, workers=workers, **kwargs)
