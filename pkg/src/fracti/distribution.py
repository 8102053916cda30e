"""Flow execution partitioned across logical endpoints.

Stateless nodes scatter their merged input over W endpoints by position
mod W; endpoints exchange work and result messages through a transport
and the gather step restores position order. Stateful nodes run whole
on endpoint 0.
"""

import logging
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any, Callable, Mapping, Sequence

from .errors import InvalidWorkerCount
from .flow import FlowGraph, Fragment
from .processors import MapProcessor, Processor, Tree

if TYPE_CHECKING:
    from .executor import ExecutionResult, FlowExecutor
    from .metamodel import ConfigurationSnapshot
    from .store import Principal

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Endpoint:
    id: int


@dataclass(frozen=True)
class DistributionPlan:
    graph: FlowGraph
    workers: int
    pinned: frozenset[str] = frozenset()  # nodes forced onto endpoint 0

    @property
    def endpoints(self) -> list[Endpoint]:
        return [Endpoint(i) for i in range(self.workers)]

    def endpoint_for(self, node: str, seq: int) -> int:
        if node in self.pinned:
            return 0
        return seq % self.workers

    def assignment(self, node: str, count: int) -> list[int]:
        return [self.endpoint_for(node, seq) for seq in range(count)]

    def loads(self, node: str, count: int) -> list[int]:
        loads = [0] * self.workers
        for endpoint in self.assignment(node, count):
            loads[endpoint] += 1
        return loads


def plan(graph: FlowGraph, workers: int, pinned: Sequence[str] = ()) -> DistributionPlan:
    if isinstance(workers, bool) or not isinstance(workers, int) or workers < 1:
        raise InvalidWorkerCount(f"worker count must be an integer >= 1, got {workers!r}")
    return DistributionPlan(graph=graph, workers=workers, pinned=frozenset(pinned))


@dataclass(frozen=True)
class WorkMessage:
    node: str
    endpoint: int
    positions: tuple[int, ...]
    trees: tuple[Tree, ...]
    params: Mapping[str, Any]
    seed: int


@dataclass(frozen=True)
class ResultMessage:
    node: str
    endpoint: int
    positions: tuple[int, ...]
    trees: tuple[Tree, ...]


def handle(message: WorkMessage, processor: MapProcessor) -> ResultMessage:
    """Endpoint side: map each fragment in origin order."""
    trees = tuple(
        processor.map_one(tree, position, message.params, message.seed)
        for position, tree in zip(message.positions, message.trees)
    )
    return ResultMessage(message.node, message.endpoint, message.positions, trees)


class InProcessTransport:
    """Delivers work messages to in-process endpoints running on a thread pool."""

    def __init__(self, workers: int):
        self.workers = workers
        self._pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="fracti-endpoint")

    def send(self, message: WorkMessage,
             handler: Callable[[WorkMessage], ResultMessage]) -> Future:
        return self._pool.submit(handler, message)

    def close(self) -> None:
        self._pool.shutdown(wait=True)

    def __enter__(self) -> "InProcessTransport":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class DistributedRunner:
    """Node runner for the executor that scatters stateless nodes."""

    def __init__(self, distribution: DistributionPlan, transport: InProcessTransport):
        self.plan = distribution
        self.transport = transport

    def __call__(self, node: str, processor: Processor, trees: list[Tree],
                 params: Mapping[str, Any], seed: int) -> list[Tree]:
        if node in self.plan.pinned or not isinstance(processor, MapProcessor):
            return processor.process(trees, params, seed)

        buckets: dict[int, list[int]] = {}
        for position in range(len(trees)):
            buckets.setdefault(self.plan.endpoint_for(node, position), []).append(position)

        futures = []
        for endpoint, positions in sorted(buckets.items()):
            message = WorkMessage(
                node=node,
                endpoint=endpoint,
                positions=tuple(positions),
                trees=tuple(trees[p] for p in positions),
                params=params,
                seed=seed,
            )
            futures.append(self.transport.send(message, lambda m: handle(m, processor)))

        gathered: dict[int, Tree] = {}
        for future in futures:
            result = future.result()
            gathered.update(zip(result.positions, result.trees))
        if sorted(gathered) != list(range(len(trees))):
            raise RuntimeError(f"gather at node '{node}' lost or duplicated fragments")
        logger.debug("node %s scattered %d fragments over %d endpoints",
                     node, len(trees), len(buckets))
        return [gathered[position] for position in range(len(trees))]


def stateful_nodes(executor: "FlowExecutor", graph: FlowGraph,
                   config: "ConfigurationSnapshot") -> list[str]:
    bound = graph.with_bindings(config.processor_refs())
    return sorted(node for node, ref in bound.nodes.items()
                  if not executor.registry.implementation(ref.name, ref.version).stateless)


def execute_distributed(executor: "FlowExecutor", graph: FlowGraph,
                        inputs: Mapping[str, Sequence[Fragment]], config: "ConfigurationSnapshot",
                        workers: int, principal: "Principal", **kwargs) -> "ExecutionResult":
    """Execute across `workers` endpoints; outputs equal the serial execution."""
    executor.check(graph, inputs, config)
    distribution = plan(graph, workers, pinned=stateful_nodes(executor, graph, config))
    with InProcessTransport(workers) as transport:
        return executor.execute(graph, inputs, config, principal,
                                runner=DistributedRunner(distribution, transport),
                                workers=workers, **kwargs)
