"""Tests for flow execution."""

import pytest

from fracti import canonical
from fracti.errors import HashMismatch, ProcessorFailure, UnboundFragment, ValidationFailed
from fracti.executor import FlowExecutor, output_hash, run_flow
from fracti.flow import bind, parse_flow
from fracti.metamodel import MetaModel
from fracti.store import ContributionKind, ProvenanceEvent

PIPELINE = "node a = src@1\nnode b = scale@1\nnode c = sink@1\na | b | c\n"


def values(result, sink="c"):
    return [f.tree["value"] for f in result.outputs[sink]]


class TestExecute:
    """Tests for FlowExecutor.run on small flows."""

    def test_scale_pipeline(self, store, alice, flow_setup):
        graph, flow_id, bindings = flow_setup(PIPELINE, alice)
        config = MetaModel(store).snapshot(flow_id, bindings, {"b.factor": 2.0}, principal=alice)
        inputs = {"a": bind([{"value": 1.0}, {"value": 2.5}], config.id)}
        result = FlowExecutor(store).run(graph, inputs, config, alice)
        assert values(result) == [2.0, 5.0]
        assert [f.seq for f in result.outputs["c"]] == [0, 1]
        assert result.output_hash == output_hash(result.outputs)

    def test_record_persisted(self, store, alice, flow_setup):
        graph, flow_id, bindings = flow_setup(PIPELINE, alice)
        metamodel = MetaModel(store)
        config = metamodel.snapshot(flow_id, bindings, principal=alice)
        result = FlowExecutor(store, metamodel=metamodel).run(
            graph, {"a": bind([{"value": 1.0}], config.id)}, config, alice)
        record = metamodel.load_record(result.record.id)
        assert record == result.record
        assert record.config_id == config.id
        assert record.principal == "alice"
        assert record.node_stats == {"a": {"in": 1, "out": 1}, "b": {"in": 1, "out": 1},
                                     "c": {"in": 1, "out": 1}}
        assert record.workers == 1
        assert record.id == canonical.tree_digest(record.to_tree(with_id=False))

    def test_result_contributions(self, store, alice, flow_setup):
        graph, flow_id, bindings = flow_setup(PIPELINE, alice)
        config = MetaModel(store).snapshot(flow_id, bindings, principal=alice)
        result = FlowExecutor(store).run(graph, {"a": bind([{"value": 1.0}], config.id)}, config, alice)

        (stream,) = result.record.inputs
        (output,) = result.record.outputs
        assert stream.uri.startswith("fracti://streams/a-")
        assert output.uri.startswith("fracti://results/c-")
        assert store.kind_of(output) == ContributionKind.RESULT
        assert store.parents(output) == (flow_id, bindings["a"], bindings["b"], bindings["c"], stream)

        payload = canonical.decode(store.fetch(output, alice).payload)
        assert payload["config"] == config.id
        assert payload["sink"] == "c"
        assert payload["fragments"] == [{"seq": 0, "tree": {"value": 1.0}}]

    def test_deterministic_rerun(self, store, alice, flow_setup):
        graph, flow_id, bindings = flow_setup(PIPELINE, alice)
        config = MetaModel(store).snapshot(flow_id, bindings, {"b.factor": 3.0}, principal=alice)
        inputs = {"a": bind([{"value": float(i)} for i in range(10)], config.id)}
        first = run_flow(store, graph, inputs, config, alice)
        second = run_flow(store, graph, inputs, config, alice)
        assert first.output_hash == second.output_hash
        assert first.record.outputs == second.record.outputs
        assert second.record.ordinal == first.record.ordinal + 1

    def test_seeded_jitter(self, store, alice, flow_setup):
        text = "node a = src@1\nnode j = jitter@1\na -> j\n"
        graph, flow_id, bindings = flow_setup(text, alice)
        metamodel = MetaModel(store)
        trees = [{"value": 0.0}] * 5

        def run(seed):
            config = metamodel.snapshot(flow_id, bindings, seed=seed, principal=alice)
            return FlowExecutor(store).run(graph, {"a": bind(trees, config.id)}, config, alice)

        a, b, c = run(1), run(1), run(2)
        assert values(a, "j") == values(b, "j")
        assert values(a, "j") != values(c, "j")
        assert len(set(values(a, "j"))) == 5

    def test_concat_merges_by_name(self, store, alice, flow_setup):
        text = ("node z = src@1\nnode a = src@1\nnode m = concat@1\n"
                "z -> m\na -> m\n")
        graph, flow_id, bindings = flow_setup(text, alice)
        config = MetaModel(store).snapshot(flow_id, bindings, principal=alice)
        inputs = {
            "a": bind([{"value": 1.0}], config.id),
            "z": bind([{"value": 2.0}, {"value": 3.0}], config.id),
        }
        result = FlowExecutor(store).run(graph, inputs, config, alice)
        assert values(result, "m") == [1.0, 2.0, 3.0]
        assert len(result.record.inputs) == 2

    def test_formula_node(self, store, alice, flow_setup):
        text = "node a = src@1\nnode f = formula@1\na -> f\n"
        graph, flow_id, bindings = flow_setup(text, alice)
        params = {"f.definitions": "double := value * 2\ndelta := value - lag(value, 1)",
                  "f.outputs": ["double"]}
        config = MetaModel(store).snapshot(flow_id, bindings, params, principal=alice)
        inputs = {"a": bind([{"value": 1.0}, {"value": 4.0}], config.id)}
        result = FlowExecutor(store).run(graph, inputs, config, alice)
        assert [f.tree["double"] for f in result.outputs["f"]] == [2.0, 8.0]
        assert "delta" not in result.outputs["f"][0].tree


class TestChecks:
    """Tests for the checks before execution."""

    def test_unbound_fragment(self, store, alice, flow_setup):
        graph, flow_id, bindings = flow_setup(PIPELINE, alice)
        config = MetaModel(store).snapshot(flow_id, bindings, principal=alice)
        with pytest.raises(UnboundFragment):
            FlowExecutor(store).run(graph, {"a": bind([{"value": 1.0}], "other")}, config, alice)

    def test_missing_input(self, store, alice, flow_setup):
        graph, flow_id, bindings = flow_setup(PIPELINE, alice)
        config = MetaModel(store).snapshot(flow_id, bindings, principal=alice)
        with pytest.raises(ValidationFailed) as info:
            FlowExecutor(store).run(graph, {}, config, alice)
        assert [f.code for f in info.value.findings] == ["missing_input"]

    def test_unknown_source(self, store, alice, flow_setup):
        graph, flow_id, bindings = flow_setup(PIPELINE, alice)
        config = MetaModel(store).snapshot(flow_id, bindings, principal=alice)
        inputs = {"a": bind([], config.id), "b": bind([], config.id)}
        with pytest.raises(ValidationFailed) as info:
            FlowExecutor(store).run(graph, inputs, config, alice)
        assert [f.code for f in info.value.findings] == ["unknown_source"]

    def test_flow_mismatch(self, store, alice, flow_setup):
        graph, flow_id, bindings = flow_setup(PIPELINE, alice)
        config = MetaModel(store).snapshot(flow_id, bindings, principal=alice)
        other = parse_flow(PIPELINE + "node d = sink@1\nb -> d\n")
        with pytest.raises(ValidationFailed) as info:
            FlowExecutor(store).run(other, {"a": bind([], config.id)}, config, alice)
        assert info.value.findings[0].code == "flow_mismatch"

    def test_processor_failure_names_node(self, store, alice, flow_setup):
        graph, flow_id, bindings = flow_setup(PIPELINE, alice)
        config = MetaModel(store).snapshot(flow_id, bindings, principal=alice)
        with pytest.raises(ProcessorFailure) as info:
            FlowExecutor(store).run(graph, {"a": bind([{"value": "text"}], config.id)}, config, alice)
        assert info.value.node == "b"

    def test_unknown_param_fails(self, store, alice, flow_setup):
        graph, flow_id, bindings = flow_setup(PIPELINE, alice)
        config = MetaModel(store).snapshot(flow_id, bindings, {"b.nope": 1}, principal=alice)
        with pytest.raises(ProcessorFailure):
            FlowExecutor(store).run(graph, {"a": bind([{"value": 1.0}], config.id)}, config, alice)

    def test_hash_mismatch_persists_nothing(self, store, alice, flow_setup):
        graph, flow_id, bindings = flow_setup(PIPELINE, alice)
        metamodel = MetaModel(store)
        config = metamodel.snapshot(flow_id, bindings, principal=alice)
        records_before = len(store.records())
        with pytest.raises(HashMismatch):
            FlowExecutor(store).run(graph, {"a": bind([{"value": 1.0}], config.id)}, config, alice,
                                    expected_output_hash="0" * 64)
        assert len(store.records()) == records_before
        assert metamodel.records() == []

    def test_empty_input_runs(self, store, alice, flow_setup):
        graph, flow_id, bindings = flow_setup(PIPELINE, alice)
        config = MetaModel(store).snapshot(flow_id, bindings, principal=alice)
        result = FlowExecutor(store).run(graph, {"a": []}, config, alice)
        assert result.outputs == {"c": []}
        assert store.chain(result.record.outputs[0])[0].event == ProvenanceEvent.DERIVED
