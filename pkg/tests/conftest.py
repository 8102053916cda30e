"""Shared fixtures: a fresh store with a few principals."""

import itertools

import pytest

from fracti.store import ContributionStore


@pytest.fixture
def store(tmp_path):
    ticks = itertools.count(1_000)
    return ContributionStore.open(tmp_path / "store", clock=lambda: next(ticks))


@pytest.fixture
def alice(store):
    return store.add_principal("alice", "Alice")


@pytest.fixture
def bob(store):
    return store.add_principal("bob", "Bob")


@pytest.fixture
def auditor(store):
    return store.add_principal("auditor", "Auditor", auditor=True)


@pytest.fixture
def flow_setup(store):
    """Register a flow and its built-in processors; returns (graph, flow id, bindings)."""
    from fracti.flow import parse_flow
    from fracti.metamodel import register_flow
    from fracti.processors import default_registry, ensure_registered

    def setup(text, principal, uri="fracti://flows/test@1"):
        graph = parse_flow(text)
        ensure_registered(store, default_registry(), principal, [ref.key for ref in graph.nodes.values()])
        flow_id = register_flow(store, graph, principal, uri)
        bindings = {node: store.resolve(ref.uri) for node, ref in graph.nodes.items()}
        return graph, flow_id, bindings

    return setup
