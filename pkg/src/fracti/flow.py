"""Flow DSL parser and the FlowGraph it produces."""

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any, Mapping, Sequence

import networkx as nx

from . import canonical
from .errors import (
    CycleDetected,
    EmptyGraph,
    FlowSyntaxError,
    NotFound,
    UnknownNodeInEdge,
)
from .store import ContributionId, ContributionKind, ContributionStore, make_uri

if TYPE_CHECKING:
    from .processors import ProcessorRegistry

logger = logging.getLogger(__name__)

PROCESSOR_NAMESPACE = "processors"


def processor_uri(name: str, version: int) -> str:
    return make_uri(PROCESSOR_NAMESPACE, name, version)


@dataclass(frozen=True)
class ProcessorRef:
    """A `name@version` processor reference, resolved against a store on demand."""
    name: str
    version: int
    contribution_id: ContributionId | None = None

    @property
    def key(self) -> str:
        return f"{self.name}@{self.version}"

    @property
    def uri(self) -> str:
        return processor_uri(self.name, self.version)

    def resolve(self, store: ContributionStore) -> "ProcessorRef":
        return ProcessorRef(self.name, self.version, store.resolve(self.uri))

    @classmethod
    def from_uri(cls, cid: ContributionId) -> "ProcessorRef":
        return cls(cid.name, cid.version, cid)

    def __str__(self) -> str:
        return self.key


@dataclass(frozen=True)
class Fragment:
    """A hierarchical piece of data bound to one configuration snapshot."""
    tree: Mapping[str, Any]
    seq: int
    config_id: str

    def __post_init__(self):
        if self.seq < 0:
            raise ValueError(f"fragment seq must be >= 0, got {self.seq}")

    def to_tree(self) -> dict[str, Any]:
        """Canonical form. The binding lives in the execution record, not here."""
        return {"seq": self.seq, "tree": dict(self.tree)}


def bind(trees: Sequence[Mapping[str, Any]], config_id: str) -> list[Fragment]:
    """Number trees 0..n-1 and bind them to a configuration."""
    return [Fragment(tree=tree, seq=seq, config_id=config_id) for seq, tree in enumerate(trees)]


def stream_payload(fragments: Sequence[Fragment]) -> bytes:
    return canonical.encode_bytes([fragment.to_tree() for fragment in fragments])


def fragments_from_payload(payload: bytes, config_id: str) -> list[Fragment]:
    rows = canonical.decode(payload)
    return [Fragment(tree=row["tree"], seq=row["seq"], config_id=config_id) for row in rows]


@dataclass
class FlowGraph:
    """A directed acyclic graph of named processor nodes."""
    nodes: dict[str, ProcessorRef] = field(default_factory=dict)
    edges: list[tuple[str, str]] = field(default_factory=list)

    def to_networkx(self) -> nx.DiGraph:
        graph = nx.DiGraph()
        graph.add_nodes_from(self.nodes)
        graph.add_edges_from(self.edges)
        return graph

    @property
    def sources(self) -> list[str]:
        targets = {target for _, target in self.edges}
        return sorted(name for name in self.nodes if name not in targets)

    @property
    def sinks(self) -> list[str]:
        origins = {origin for origin, _ in self.edges}
        return sorted(name for name in self.nodes if name not in origins)

    def predecessors(self, node: str) -> list[str]:
        """Upstream nodes in merge order (by name)."""
        return sorted(origin for origin, target in self.edges if target == node)

    def successors(self, node: str) -> list[str]:
        return sorted(target for origin, target in self.edges if origin == node)

    def in_degree(self, node: str) -> int:
        return sum(1 for _, target in self.edges if target == node)

    def topological_order(self) -> list[str]:
        """Evaluation order; ties between ready nodes go to the smaller name."""
        return list(nx.lexicographical_topological_sort(self.to_networkx()))

    def with_bindings(self, bindings: Mapping[str, ProcessorRef]) -> "FlowGraph":
        """Copy of the graph with some node processors substituted."""
        nodes = dict(self.nodes)
        for node, ref in bindings.items():
            if node in nodes:
                nodes[node] = ref
        return FlowGraph(nodes=nodes, edges=list(self.edges))

    def is_isomorphic(self, other: "FlowGraph") -> bool:
        return self.nodes == other.nodes and sorted(self.edges) == sorted(other.edges)


class FlowParser:
    """Parser for `.flow` files.

    One statement per line::

        node <name> = <processor>@<version>
        <a> -> <b>
        <a> | <b> | <c>

    Anything after `#` is a comment.
    """

    EXTENSIONS = {".flow"}

    IDENT = r"[A-Za-z_][A-Za-z0-9_\-]*"
    NODE_PATTERN = re.compile(
        rf"node\s+(?P<name>{IDENT})\s*=\s*(?P<proc>{IDENT})@(?P<version>[0-9]+)\s*$"
    )
    EDGE_PATTERN = re.compile(rf"(?P<origin>{IDENT})\s*->\s*(?P<target>{IDENT})\s*$")
    IDENT_PATTERN = re.compile(rf"{IDENT}\Z")

    @classmethod
    def is_flow_file(cls, path: Path) -> bool:
        return path.suffix.lower() in cls.EXTENSIONS

    def parse_file(self, path: Path) -> FlowGraph:
        with open(path, "r", encoding="utf-8") as f:
            return self.parse(f.read())

    def parse(self, text: str) -> FlowGraph:
        if not text or not text.strip():
            raise EmptyGraph("flow text is empty")

        graph = FlowGraph()
        edge_lines: dict[tuple[str, str], int] = {}

        for number, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].rstrip()
            if not line.strip():
                continue
            column = len(line) - len(line.lstrip()) + 1
            statement = line.strip()

            if self._is_declaration(statement):
                self._parse_node(graph, statement, number, column)
            elif "|" in statement:
                for edge in self._parse_pipeline(statement, number, column):
                    self._add_edge(graph, edge_lines, edge, number, column)
            elif "->" in statement:
                match = self.EDGE_PATTERN.match(statement)
                if not match:
                    raise FlowSyntaxError("malformed edge, expected '<from> -> <to>'",
                                          number, column)
                edge = (match.group("origin"), match.group("target"))
                self._add_edge(graph, edge_lines, edge, number, column)
            else:
                raise FlowSyntaxError(f"unrecognized statement {statement!r}", number, column)

        self._check(graph, edge_lines)
        logger.debug("parsed flow with %d nodes and %d edges", len(graph.nodes), len(graph.edges))
        return graph

    @staticmethod
    def _is_declaration(statement: str) -> bool:
        # `node` is also a legal node name, so edge lines may start with it
        if statement.split(None, 1)[0] != "node":
            return False
        return "=" in statement or not ("|" in statement or "->" in statement)

    def _parse_node(self, graph: FlowGraph, statement: str, number: int, column: int) -> None:
        match = self.NODE_PATTERN.match(statement)
        if not match:
            raise FlowSyntaxError(
                "malformed node declaration, expected 'node <name> = <processor>@<version>'",
                number, column,
            )
        name = match.group("name")
        if name in graph.nodes:
            raise FlowSyntaxError(f"duplicate node {name!r}", number, column + match.start("name"))
        version = int(match.group("version"))
        if version < 1:
            raise FlowSyntaxError("processor version must be >= 1",
                                  number, column + match.start("version"))
        graph.nodes[name] = ProcessorRef(match.group("proc"), version)

    def _parse_pipeline(self, statement: str, number: int, column: int) -> list[tuple[str, str]]:
        names = []
        offset = 0
        for part in statement.split("|"):
            name = part.strip()
            if not self.IDENT_PATTERN.match(name):
                position = column + offset + (len(part) - len(part.lstrip()))
                raise FlowSyntaxError(f"expected node name in pipeline, got {name!r}",
                                      number, position)
            names.append(name)
            offset += len(part) + 1
        return list(zip(names, names[1:]))

    def _add_edge(self, graph: FlowGraph, edge_lines: dict[tuple[str, str], int],
                  edge: tuple[str, str], number: int, column: int) -> None:
        if edge in edge_lines:
            raise FlowSyntaxError(f"duplicate edge {edge[0]} -> {edge[1]}", number, column)
        edge_lines[edge] = number
        graph.edges.append(edge)

    def _check(self, graph: FlowGraph, edge_lines: dict[tuple[str, str], int]) -> None:
        if not graph.nodes:
            raise EmptyGraph("flow declares no nodes")

        for origin, target in graph.edges:
            for name in (origin, target):
                if name not in graph.nodes:
                    raise UnknownNodeInEdge(
                        f"line {edge_lines[(origin, target)]}: edge names undeclared node {name!r}"
                    )

        nx_graph = graph.to_networkx()
        if not nx.is_directed_acyclic_graph(nx_graph):
            cycle = nx.find_cycle(nx_graph)
            path = " -> ".join([edge[0] for edge in cycle] + [cycle[0][0]])
            raise CycleDetected(f"flow contains a cycle: {path}")


def parse_flow(text: str) -> FlowGraph:
    return FlowParser().parse(text)


def format_flow(graph: FlowGraph) -> str:
    """Print a graph in the DSL. Parsing the result yields an isomorphic graph."""
    lines = [f"node {name} = {ref.key}" for name, ref in sorted(graph.nodes.items())]
    lines.extend(f"{origin} -> {target}" for origin, target in graph.edges)
    return "\n".join(lines) + "\n"


def flow_payload(graph: FlowGraph) -> bytes:
    return format_flow(graph).encode("utf-8")


# -- validation ------------------------------------------------------------

@dataclass(frozen=True)
class CheckResult:
    node: str
    code: str
    message: str

    def __str__(self) -> str:
        return f"{self.node}: {self.message}"


def validate(graph: FlowGraph, store: ContributionStore,
             registry: "ProcessorRegistry | None" = None,
             bindings: Mapping[str, ProcessorRef] | None = None) -> list[CheckResult]:
    """Check processor references and arities. An empty list means valid."""
    if registry is None:
        from .processors import default_registry
        registry = default_registry()

    effective = graph.with_bindings(bindings or {})
    findings = []
    for node in sorted(effective.nodes):
        ref = effective.nodes[node]
        try:
            cid = store.resolve(ref.uri)
        except NotFound:
            findings.append(CheckResult(node, "missing_processor",
                                        f"processor {ref.key} is not registered"))
            continue
        if ref.contribution_id is not None and ref.contribution_id != cid:
            findings.append(CheckResult(node, "missing_processor",
                                        f"processor {ref.key} is bound to a different content hash"))
            continue
        if store.kind_of(cid) != ContributionKind.PROCESSOR:
            findings.append(CheckResult(node, "not_a_processor",
                                        f"{ref.uri} is not a processor"))
            continue
        if ref.key not in registry:
            findings.append(CheckResult(node, "no_implementation",
                                        f"no implementation available for {ref.key}"))
            continue
        if registry.descriptor_hash(ref.name, ref.version) != cid.content_hash:
            findings.append(CheckResult(node, "implementation_mismatch",
                                        f"implementation of {ref.key} differs from its stored descriptor"))
            continue

        in_degree = effective.in_degree(node)
        impl = registry.implementation(ref.name, ref.version)
        if not impl.accepts(in_degree):
            findings.append(CheckResult(
                node, "arity_mismatch",
                f"{ref.key} accepts {impl.arity_label()} inputs but has {in_degree}",
            ))
    return findings
