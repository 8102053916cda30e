"""Tests for snapshots, execution records, lineage and reproduction."""

import pytest

from fracti import canonical
from fracti.errors import (
    AccessDenied,
    HashMismatch,
    IncompleteBindings,
    IntegrityFailure,
    InvalidParams,
    MissingInput,
    NotFound,
    UnknownFlow,
)
from fracti.executor import FlowExecutor
from fracti.flow import bind, parse_flow
from fracti.metamodel import EXECUTIONS, SNAPSHOTS, Difference, MetaModel, register_flow
from fracti.processors import ScaleProcessor, default_registry, ensure_registered
from fracti.store import ContributionKind, ContributionStore, ProvenanceEvent

PIPELINE = "node a = src@1\nnode b = scale@1\nnode c = sink@1\na | b | c\n"


class DriftingScale(ScaleProcessor):
    """Same descriptor as scale@1, different arithmetic."""

    def transform(self, tree, params, seed):
        out = super().transform(tree, params, seed)
        out["value"] += 1e-9
        return out


@pytest.fixture
def pipeline(store, alice, flow_setup):
    graph, flow_id, bindings = flow_setup(PIPELINE, alice)
    return graph, flow_id, bindings, MetaModel(store)


@pytest.fixture
def executed(store, alice, pipeline):
    """One recorded execution of the scale pipeline."""
    graph, flow_id, bindings, metamodel = pipeline
    config = metamodel.snapshot(flow_id, bindings, {"b.factor": 1.5}, seed=3, principal=alice)
    inputs = {"a": bind([{"value": float(i)} for i in range(6)], config.id)}
    result = FlowExecutor(store, metamodel=metamodel).run(graph, inputs, config, alice)
    return config, result.record


class TestSnapshot:
    """Tests for configuration snapshots."""

    def test_content_addressed(self, store, alice, pipeline):
        _, flow_id, bindings, metamodel = pipeline
        a = metamodel.snapshot(flow_id, bindings, {"b.factor": 2.0}, seed=1, principal=alice)
        b = metamodel.snapshot(flow_id, bindings, {"b.factor": 2.0}, seed=1, principal=alice)
        c = metamodel.snapshot(flow_id, bindings, {"b.factor": 2.0}, seed=2, principal=alice)
        assert a.id == b.id != c.id
        assert metamodel.snapshots() == sorted([a.id, c.id])
        assert metamodel.load_snapshot(a.id) == a
        assert a.id == canonical.tree_digest(a.to_tree())

    def test_node_params(self, store, alice, pipeline):
        _, flow_id, bindings, metamodel = pipeline
        snapshot = metamodel.snapshot(flow_id, bindings, {"b.factor": 2.0, "b.field": "x"}, principal=alice)
        assert snapshot.node_params("b") == {"factor": 2.0, "field": "x"}
        assert snapshot.node_params("a") == {}

    @pytest.mark.parametrize("change", ["missing", "extra", "param"])
    def test_incomplete_bindings(self, store, alice, pipeline, change):
        _, flow_id, bindings, metamodel = pipeline
        bindings = dict(bindings)
        params = {}
        if change == "missing":
            del bindings["c"]
        elif change == "extra":
            bindings["d"] = bindings["c"]
        else:
            params = {"z.factor": 1.0}
        with pytest.raises(IncompleteBindings):
            metamodel.snapshot(flow_id, bindings, params, principal=alice)

    def test_unknown_parent(self, store, alice, pipeline):
        _, flow_id, bindings, metamodel = pipeline
        with pytest.raises(NotFound):
            metamodel.snapshot(flow_id, bindings, parent="0" * 64, principal=alice)

    def test_invalid_seed(self, store, alice, pipeline):
        _, flow_id, bindings, metamodel = pipeline
        with pytest.raises(InvalidParams):
            metamodel.snapshot(flow_id, bindings, seed=-1, principal=alice)

    def test_unknown_flow(self, store, alice, pipeline):
        _, _, bindings, metamodel = pipeline
        with pytest.raises(UnknownFlow):
            metamodel.snapshot(bindings["a"], bindings, principal=alice)

    def test_tampered_snapshot(self, store, alice, pipeline):
        _, flow_id, bindings, metamodel = pipeline
        snapshot = metamodel.snapshot(flow_id, bindings, principal=alice)
        path = store.layout.meta_file(SNAPSHOTS, snapshot.id)
        tree = canonical.decode(path.read_text(encoding="utf-8"))
        tree["seed"] = 1
        path.write_text(canonical.encode(tree), encoding="utf-8")
        with pytest.raises(IntegrityFailure):
            metamodel.load_snapshot(snapshot.id)

    def test_diff(self, store, alice, pipeline):
        _, flow_id, bindings, metamodel = pipeline
        a = metamodel.snapshot(flow_id, bindings, {"b.factor": 2.0}, principal=alice)
        b = metamodel.snapshot(flow_id, bindings, {"b.factor": 3.0, "b.field": "x"}, seed=9,
                               parent=a.id, principal=alice)
        assert metamodel.diff(a.id, b.id) == [
            Difference("params.b.factor", 2.0, 3.0),
            Difference("params.b.field", None, "x"),
            Difference("seed", 0, 9),
        ]
        assert metamodel.diff(a.id, a.id) == []
        assert str(Difference("params.b.field", None, "x")) == "params.b.field: (absent) -> x"

    def test_diff_compares_flow_content(self, store, alice, pipeline):
        graph, flow_id, bindings, metamodel = pipeline
        same = register_flow(store, graph, alice, "fracti://flows/test@2", parents=[flow_id])
        other = register_flow(store, parse_flow(PIPELINE + "node d = sink@1\nb -> d\n"), alice,
                              "fracti://flows/test@3", parents=[same])
        base = metamodel.snapshot(flow_id, bindings, {"b.factor": 2.0}, principal=alice)
        revised = metamodel.snapshot(same, bindings, {"b.factor": 2.0}, parent=base.id, principal=alice)
        assert revised.id != base.id
        assert metamodel.diff(base.id, revised.id) == []

        grown = metamodel.snapshot(other, {**bindings, "d": bindings["c"]}, {"b.factor": 2.0}, principal=alice)
        assert [d.field for d in metamodel.diff(base.id, grown.id)] == ["flow", "bindings.d"]

    def test_flow_revision(self, store, alice):
        graph = parse_flow(PIPELINE)
        first = register_flow(store, graph, alice, "fracti://flows/p@1")
        second = register_flow(store, parse_flow(PIPELINE + "node d = sink@1\nb -> d\n"), alice,
                               "fracti://flows/p@2", parents=[first])
        assert store.kind_of(second) == ContributionKind.FLOW_DEFINITION
        assert store.parents(second) == (first,)


class TestRecords:
    """Tests for execution records."""

    def test_resolve_by_prefix(self, store, alice, executed):
        _, record = executed
        metamodel = MetaModel(store)
        assert metamodel.resolve_record(record.id[:10]) == record
        with pytest.raises(NotFound):
            metamodel.resolve_record("")
        with pytest.raises(NotFound):
            metamodel.resolve_record("zz")

    def test_recompute_output_hash(self, store, alice, executed):
        _, record = executed
        assert MetaModel(store).recompute_output_hash(record, alice) == record.output_hash

    def test_records_in_ordinal_order(self, store, alice, pipeline, executed):
        graph, flow_id, bindings, metamodel = pipeline
        config = metamodel.snapshot(flow_id, bindings, principal=alice)
        FlowExecutor(store, metamodel=metamodel).run(graph, {"a": bind([], config.id)}, config, alice)
        assert [r.ordinal for r in metamodel.records()] == [0, 1]
        assert store.list_meta(EXECUTIONS) == sorted(r.id for r in metamodel.records())


class TestLineage:
    """Tests for lineage queries."""

    def test_lineage_reaches_all_inputs(self, store, alice, pipeline, executed):
        _, flow_id, bindings, metamodel = pipeline
        config, record = executed
        (output,) = record.outputs
        tree = metamodel.lineage(output)
        assert tree.root == output
        assert set(tree.nodes) == {output, flow_id, *bindings.values(), *record.inputs}
        assert set(tree.leaves) == {flow_id, *bindings.values(), *record.inputs}
        assert tree.executions == [record.id]
        assert tree.snapshots == [config.id]
        assert tree.to_networkx().number_of_edges() == len(tree.edges)

    def test_lineage_follows_snapshot_parents(self, store, alice, pipeline):
        graph, flow_id, bindings, metamodel = pipeline
        base = metamodel.snapshot(flow_id, bindings, principal=alice)
        child = metamodel.snapshot(flow_id, bindings, {"b.factor": 4.0}, parent=base.id, principal=alice)
        result = FlowExecutor(store, metamodel=metamodel).run(
            graph, {"a": bind([{"value": 1.0}], child.id)}, child, alice)
        tree = metamodel.lineage(result.record.outputs[0])
        assert tree.snapshots == sorted([base.id, child.id])

    def test_lineage_of_created_contribution(self, store, alice, pipeline):
        _, flow_id, _, metamodel = pipeline
        tree = metamodel.lineage(flow_id)
        assert tree.nodes == [flow_id]
        assert tree.edges == []
        assert tree.executions == []


class TestReproduce:
    """Tests for reproducing recorded executions."""

    def test_same_hash_and_linked(self, store, alice, executed):
        _, record = executed
        metamodel = MetaModel(store)
        again = metamodel.reproduce(record.id, alice)
        assert again.output_hash == record.output_hash
        assert again.outputs == record.outputs
        assert again.reproduces == record.id
        events = [r.event for r in store.chain(record.outputs[0])]
        assert events == [ProvenanceEvent.DERIVED, ProvenanceEvent.EXECUTED_WITH]

    @pytest.mark.parametrize("workers", [2, 8])
    def test_other_worker_count(self, store, alice, executed, workers):
        _, record = executed
        again = MetaModel(store).reproduce(record.id, alice, workers=workers)
        assert again.output_hash == record.output_hash
        assert again.workers == workers

    def test_changed_implementation_detected(self, store, alice, executed):
        _, record = executed
        registry = default_registry()
        registry.add(DriftingScale, "scale", 1)
        records_before = len(MetaModel(store).records())
        with pytest.raises(HashMismatch):
            MetaModel(store).reproduce(record.id, alice, registry=registry)
        assert len(MetaModel(store).records()) == records_before

    def test_tampered_output(self, store, alice, executed):
        _, record = executed
        store.layout.object_path(record.outputs[0].content_hash).write_bytes(b"{}")
        with pytest.raises(IntegrityFailure):
            MetaModel(store).reproduce(record.id, alice)

    def test_tampered_input(self, store, alice, executed):
        _, record = executed
        store.layout.object_path(record.inputs[0].content_hash).write_bytes(b"{}")
        with pytest.raises(IntegrityFailure):
            MetaModel(store).reproduce(record.id, alice)

    def test_missing_snapshot(self, store, alice, executed):
        config, record = executed
        store.layout.meta_file(SNAPSHOTS, config.id).unlink()
        with pytest.raises(MissingInput):
            MetaModel(store).reproduce(record.id, alice)

    def test_other_principal_needs_grants(self, store, alice, bob, executed):
        _, record = executed
        with pytest.raises(AccessDenied):
            MetaModel(store).reproduce(record.id, bob)
        for cid in store.contributions(owner="alice"):
            store.grant(cid, alice, bob)
        again = MetaModel(store).reproduce(record.id, bob)
        assert again.output_hash == record.output_hash
        assert again.principal == "bob"

    def test_auditor_without_access_denied(self, store, alice, auditor, executed):
        _, record = executed
        with pytest.raises(AccessDenied):
            MetaModel(store).reproduce(record.id, auditor)

    def test_auditor_access(self, tmp_path):
        store = ContributionStore.open(tmp_path / "audited", default_auditor_access=True)
        owner = store.add_principal("alice", "Alice")
        auditor = store.add_principal("auditor", "Auditor", auditor=True)
        outsider = store.add_principal("carol", "Carol")
        graph = parse_flow(PIPELINE)
        ensure_registered(store, default_registry(), owner, [ref.key for ref in graph.nodes.values()])
        flow_id = register_flow(store, graph, owner, "fracti://flows/audited@1")
        bindings = {node: store.resolve(ref.uri) for node, ref in graph.nodes.items()}
        metamodel = MetaModel(store)
        config = metamodel.snapshot(flow_id, bindings, principal=owner)
        result = FlowExecutor(store, metamodel=metamodel).run(
            graph, {"a": bind([{"value": 2.0}], config.id)}, config, owner)

        assert metamodel.reproduce(result.record.id, auditor).output_hash == result.output_hash
        with pytest.raises(AccessDenied):
            metamodel.reproduce(result.record.id, outsider)
