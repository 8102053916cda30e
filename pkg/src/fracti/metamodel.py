"""Configuration snapshots, execution records, diffing, lineage and reproduction."""

import logging
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Any, Mapping, Sequence

import networkx as nx

from . import canonical
from .errors import (
    IncompleteBindings,
    IntegrityFailure,
    MissingInput,
    NotFound,
    UnknownFlow,
)
from .flow import FlowGraph, FlowParser, ProcessorRef, flow_payload, fragments_from_payload
from .seeding import check_seed
from .store import (
    ContributionId,
    ContributionKind,
    ContributionStore,
    Principal,
    ProvenanceEvent,
)

if TYPE_CHECKING:
    from .processors import ProcessorRegistry

logger = logging.getLogger(__name__)

SNAPSHOTS = "snapshots"
EXECUTIONS = "executions"


@dataclass(frozen=True)
class ConfigurationSnapshot:
    """Immutable configuration of one flow; the id is the digest of everything else.

    `params` is flat: keys are `<node>.<parameter>`.
    """
    flow: ContributionId
    bindings: Mapping[str, ContributionId]
    params: Mapping[str, Any] = field(default_factory=dict)
    seed: int = 0
    workers: int = 1
    parent: str | None = None

    def to_tree(self) -> dict[str, Any]:
        return {
            "bindings": {node: cid.ref for node, cid in self.bindings.items()},
            "flow": self.flow.ref,
            "params": dict(self.params),
            "parent": self.parent or "",
            "seed": self.seed,
            "workers": self.workers,
        }

    @classmethod
    def from_tree(cls, tree: Mapping[str, Any]) -> "ConfigurationSnapshot":
        return cls(
            flow=ContributionId.from_ref(tree["flow"]),
            bindings={node: ContributionId.from_ref(ref) for node, ref in tree["bindings"].items()},
            params=dict(tree.get("params", {})),
            seed=int(tree["seed"]),
            workers=int(tree["workers"]),
            parent=tree.get("parent") or None,
        )

    @property
    def id(self) -> str:
        return canonical.tree_digest(self.to_tree())

    def node_params(self, node: str) -> dict[str, Any]:
        prefix = f"{node}."
        return {key[len(prefix):]: value for key, value in self.params.items() if key.startswith(prefix)}

    def processor_refs(self) -> dict[str, ProcessorRef]:
        return {node: ProcessorRef.from_uri(cid) for node, cid in self.bindings.items()}


@dataclass(frozen=True)
class ExecutionRecord:
    """Binding of one snapshot to concrete inputs and outputs.

    inputs follow the flow's sorted sources, outputs its sorted sinks.
    """
    id: str
    config_id: str
    inputs: tuple[ContributionId, ...]
    outputs: tuple[ContributionId, ...]
    output_hash: str
    node_stats: Mapping[str, Mapping[str, int]]
    principal: str
    started: int
    ended: int
    workers: int
    ordinal: int = 0
    reproduces: str = ""

    def to_tree(self, with_id: bool = True) -> dict[str, Any]:
        tree = {
            "config_id": self.config_id,
            "ended": self.ended,
            "inputs": [cid.ref for cid in self.inputs],
            "node_stats": {node: dict(stats) for node, stats in self.node_stats.items()},
            "ordinal": self.ordinal,
            "output_hash": self.output_hash,
            "outputs": [cid.ref for cid in self.outputs],
            "principal": self.principal,
            "reproduces": self.reproduces,
            "started": self.started,
            "workers": self.workers,
        }
        if with_id:
            tree["id"] = self.id
        return tree

    @classmethod
    def from_tree(cls, tree: Mapping[str, Any]) -> "ExecutionRecord":
        return cls(
            id=tree["id"],
            config_id=tree["config_id"],
            inputs=tuple(ContributionId.from_ref(ref) for ref in tree["inputs"]),
            outputs=tuple(ContributionId.from_ref(ref) for ref in tree["outputs"]),
            output_hash=tree["output_hash"],
            node_stats={node: dict(stats) for node, stats in tree["node_stats"].items()},
            principal=tree["principal"],
            started=int(tree["started"]),
            ended=int(tree["ended"]),
            workers=int(tree["workers"]),
            ordinal=int(tree.get("ordinal", 0)),
            reproduces=tree.get("reproduces", ""),
        )


@dataclass(frozen=True)
class Difference:
    field: str
    left: Any
    right: Any

    def __str__(self) -> str:
        return f"{self.field}: {_show(self.left)} -> {_show(self.right)}"


def _show(value: Any) -> str:
    if value is None:
        return "(absent)"
    if isinstance(value, ContributionId):
        return value.uri
    return str(value)


@dataclass
class LineageTree:
    root: ContributionId
    nodes: list[ContributionId] = field(default_factory=list)
    edges: list[tuple[ContributionId, ContributionId]] = field(default_factory=list)  # (child, parent)
    executions: list[str] = field(default_factory=list)
    snapshots: list[str] = field(default_factory=list)

    def to_networkx(self) -> nx.DiGraph:
        graph = nx.DiGraph()
        graph.add_nodes_from(self.nodes)
        graph.add_edges_from(self.edges)
        return graph

    def parents_of(self, cid: ContributionId) -> list[ContributionId]:
        return sorted(parent for child, parent in self.edges if child == cid)

    @property
    def leaves(self) -> list[ContributionId]:
        children = {child for child, _ in self.edges}
        return [cid for cid in self.nodes if cid not in children]


def register_flow(store: ContributionStore, graph: FlowGraph, principal: Principal, uri: str,
                  parents: Sequence[ContributionId] = ()) -> ContributionId:
    """Store a flow definition, optionally as a revision of earlier ones."""
    payload = flow_payload(graph)
    if parents:
        return store.derive(parents, payload, principal, uri, kind=ContributionKind.FLOW_DEFINITION)
    return store.register(payload, ContributionKind.FLOW_DEFINITION, principal, uri)


class MetaModel:
    """Meta-model objects kept beside the contributions of one store."""

    def __init__(self, store: ContributionStore):
        self.store = store

    # -- snapshots ---------------------------------------------------------

    def load_flow(self, flow_id: ContributionId, principal: Principal) -> FlowGraph:
        if not self.store.exists(flow_id) or self.store.kind_of(flow_id) != ContributionKind.FLOW_DEFINITION:
            raise UnknownFlow(f"no flow definition {flow_id.uri}")
        return FlowParser().parse(self.store.fetch(flow_id, principal).text)

    def snapshot(self, flow_id: ContributionId, bindings: Mapping[str, ContributionId],
                 params: Mapping[str, Any] | None = None, seed: int = 0, workers: int = 1,
                 parent: str | None = None, *, principal: Principal) -> ConfigurationSnapshot:
        """Create (or find) the snapshot for these settings."""
        graph = self.load_flow(flow_id, principal)
        missing = sorted(set(graph.nodes) - set(bindings))
        extra = sorted(set(bindings) - set(graph.nodes))
        if missing:
            raise IncompleteBindings(f"no processor bound for nodes: {', '.join(missing)}")
        if extra:
            raise IncompleteBindings(f"bindings name nodes not in the flow: {', '.join(extra)}")
        for key in params or {}:
            node = key.split(".", 1)[0]
            if "." not in key or node not in graph.nodes:
                raise IncompleteBindings(f"parameter {key!r} does not name a flow node")
        if parent is not None and not self.store.has_meta(SNAPSHOTS, parent):
            raise NotFound(f"no configuration snapshot {parent}")

        snapshot = ConfigurationSnapshot(
            flow=flow_id,
            bindings=dict(sorted(bindings.items())),
            params=dict(sorted((params or {}).items())),
            seed=check_seed(seed),
            workers=max(1, int(workers)),
            parent=parent,
        )
        self.store.write_meta(SNAPSHOTS, snapshot.id, canonical.encode(snapshot.to_tree()))
        logger.debug("snapshot %s for %s", snapshot.id[:12], flow_id.uri)
        return snapshot

    def load_snapshot(self, snapshot_id: str) -> ConfigurationSnapshot:
        snapshot = ConfigurationSnapshot.from_tree(canonical.decode(self.store.read_meta(SNAPSHOTS, snapshot_id)))
        if snapshot.id != snapshot_id:
            raise IntegrityFailure(f"snapshot {snapshot_id} does not match its content")
        return snapshot

    def snapshots(self) -> list[str]:
        return self.store.list_meta(SNAPSHOTS)

    def diff(self, a: str, b: str) -> list[Difference]:
        """Field-level differences between two snapshots."""
        left, right = self.load_snapshot(a), self.load_snapshot(b)
        differences = []
        # a revision that leaves the flow text unchanged is the same flow
        if left.flow.content_hash != right.flow.content_hash:
            differences.append(Difference("flow", left.flow, right.flow))
        for name, lhs, rhs in (("bindings", left.bindings, right.bindings),
                               ("params", left.params, right.params)):
            for key in sorted(set(lhs) | set(rhs)):
                if lhs.get(key) != rhs.get(key):
                    differences.append(Difference(f"{name}.{key}", lhs.get(key), rhs.get(key)))
        for name in ("seed", "workers"):
            if getattr(left, name) != getattr(right, name):
                differences.append(Difference(name, getattr(left, name), getattr(right, name)))
        return differences

    # -- execution records -------------------------------------------------

    def record(self, config: ConfigurationSnapshot, inputs: Sequence[ContributionId],
               outputs: Sequence[ContributionId], output_hash: str,
               node_stats: Mapping[str, Mapping[str, int]], principal: Principal,
               started: int, ended: int, workers: int, reproduces: str = "") -> ExecutionRecord:
        with self.store.writer():
            ordinal = len(self.store.list_meta(EXECUTIONS))
            draft = ExecutionRecord(
                id="",
                config_id=config.id,
                inputs=tuple(inputs),
                outputs=tuple(outputs),
                output_hash=output_hash,
                node_stats={node: dict(stats) for node, stats in sorted(node_stats.items())},
                principal=principal.id,
                started=started,
                ended=ended,
                workers=workers,
                ordinal=ordinal,
                reproduces=reproduces,
            )
            record_id = canonical.tree_digest(draft.to_tree(with_id=False))
            record = replace(draft, id=record_id)
            self.store.write_meta(EXECUTIONS, record_id, canonical.encode(record.to_tree()))
        logger.info("recorded execution %s (config %s, %d workers)", record_id[:12], config.id[:12], workers)
        return record

    def load_record(self, exec_id: str) -> ExecutionRecord:
        return ExecutionRecord.from_tree(canonical.decode(self.store.read_meta(EXECUTIONS, exec_id)))

    def resolve_record(self, prefix: str) -> ExecutionRecord:
        """Load a record by id or unique id prefix."""
        matches = [key for key in self.store.list_meta(EXECUTIONS) if key.startswith(prefix)]
        if len(matches) != 1 or not prefix:
            raise NotFound(f"no unique execution record for {prefix!r}")
        return self.load_record(matches[0])

    def records(self) -> list[ExecutionRecord]:
        records = [self.load_record(key) for key in self.store.list_meta(EXECUTIONS)]
        return sorted(records, key=lambda r: (r.ordinal, r.id))

    def recompute_output_hash(self, record: ExecutionRecord, principal: Principal) -> str:
        sinks = {}
        for cid in record.outputs:
            payload = canonical.decode(self.store.fetch(cid, principal).payload)
            sinks[payload["sink"]] = payload["fragments"]
        return canonical.tree_digest(sinks)

    # -- lineage -----------------------------------------------------------

    def lineage(self, output: ContributionId) -> LineageTree:
        """Everything an output was derived from, down to created leaves."""
        self.store.kind_of(output)
        producers: dict[str, list[ExecutionRecord]] = {}
        for record in self.records():
            for cid in record.outputs:
                producers.setdefault(cid.uri, []).append(record)

        tree = LineageTree(root=output)
        seen = {output}
        queue = [output]
        executions: set[str] = set()
        snapshots: set[str] = set()
        while queue:
            cid = queue.pop(0)
            for parent in self.store.parents(cid):
                tree.edges.append((cid, parent))
                if parent not in seen:
                    seen.add(parent)
                    queue.append(parent)
            for record in producers.get(cid.uri, []):
                executions.add(record.id)
                self._collect_snapshots(record.config_id, snapshots)

        tree.nodes = sorted(seen)
        tree.edges.sort()
        tree.executions = sorted(executions)
        tree.snapshots = sorted(snapshots)
        return tree

    def _collect_snapshots(self, snapshot_id: str, found: set[str]) -> None:
        while snapshot_id and snapshot_id not in found:
            found.add(snapshot_id)
            try:
                snapshot_id = self.load_snapshot(snapshot_id).parent or ""
            except NotFound:
                return

    # -- reproduction ------------------------------------------------------

    def verify_closure(self, record: ExecutionRecord) -> ConfigurationSnapshot:
        """Check that everything a record depends on exists and is intact."""
        try:
            snapshot = self.load_snapshot(record.config_id)
        except NotFound as e:
            raise MissingInput(f"configuration snapshot {record.config_id} is missing") from e

        for role, cids in (("flow", [snapshot.flow]),
                           ("processor", list(snapshot.bindings.values())),
                           ("input", list(record.inputs))):
            for cid in cids:
                if not self.store.exists(cid):
                    raise MissingInput(f"{role} {cid.uri} is missing")
                if not self.store.verify(cid):
                    raise IntegrityFailure(f"{role} {cid.uri} failed verification")
        for cid in record.outputs:
            if not self.store.exists(cid) or not self.store.verify(cid):
                raise IntegrityFailure(f"output {cid.uri} is missing or failed verification")
        return snapshot

    def reproduce(self, exec_id: str, principal: Principal, registry: "ProcessorRegistry | None" = None,
                  workers: int | None = None) -> ExecutionRecord:
        """Re-run a recorded execution and require the same output hash."""
        from .executor import FlowExecutor

        original = self.load_record(exec_id)
        snapshot = self.verify_closure(original)
        graph = self.load_flow(snapshot.flow, principal)

        inputs = {}
        input_ids = {}
        for source, cid in zip(graph.sources, original.inputs):
            inputs[source] = fragments_from_payload(self.store.fetch(cid, principal).payload, snapshot.id)
            input_ids[source] = cid

        executor = FlowExecutor(self.store, registry, self)
        result = executor.run(
            graph, inputs, snapshot, principal,
            workers=workers or original.workers,
            input_ids=input_ids,
            reproduces=original.id,
            expected_output_hash=original.output_hash,
        )
        for cid in result.record.outputs:
            self.store.record_event(ProvenanceEvent.EXECUTED_WITH, principal, cid,
                                    detail=f"{original.id}->{result.record.id}")
        logger.info("reproduced %s as %s", original.id[:12], result.record.id[:12])
        return result.record
