"""Tests for partitioned execution across endpoints."""

import random

import pytest

from fracti.config import ShowcaseConfig
from fracti.distribution import DistributedRunner, InProcessTransport, WorkMessage, handle, plan
from fracti.errors import InvalidWorkerCount
from fracti.executor import FlowExecutor
from fracti.flow import bind, parse_flow
from fracti.metamodel import MetaModel, register_flow
from fracti.processors import JitterProcessor, ScaleProcessor
from fracti.showcase import RESEARCHER_A, Showcase, load_model_flow, load_surrogate_events
from fracti.trainers import SCENARIOS

WORKER_COUNTS = (1, 2, 4, 8)
UNARY = ("scale@1", "offset@1", "jitter@1", "identity@1")


def random_flow(rng):
    """Random DAG text plus params: one or two sources, then unary nodes and concats."""
    sources = [f"s{i}" for i in range(rng.randint(1, 2))]
    lines = [f"node {name} = src@1" for name in sources]
    names = list(sources)
    params = {}
    for i in range(rng.randint(1, 6)):
        name = f"n{i}"
        upstream = rng.sample(names, min(len(names), rng.choice((1, 1, 2))))
        if len(upstream) > 1:
            lines.append(f"node {name} = concat@1")
        else:
            key = rng.choice(UNARY)
            lines.append(f"node {name} = {key}")
            if key == "scale@1":
                params[f"{name}.factor"] = round(rng.uniform(-3, 3), 3)
            elif key == "offset@1":
                params[f"{name}.amount"] = round(rng.uniform(-10, 10), 3)
            elif key == "jitter@1":
                params[f"{name}.sigma"] = round(rng.uniform(0, 2), 3)
        lines.extend(f"{up} -> {name}" for up in upstream)
        names.append(name)
    return "\n".join(lines) + "\n", sources, params


class TestPlan:
    """Tests for the distribution plan."""

    @pytest.mark.parametrize("workers", [0, -1, 1.5, True, "2"])
    def test_invalid_worker_count(self, workers):
        with pytest.raises(InvalidWorkerCount):
            plan(parse_flow("node a = src@1\n"), workers)

    def test_position_mod_workers(self):
        distribution = plan(parse_flow("node a = src@1\n"), 4)
        assert distribution.assignment("a", 10) == [0, 1, 2, 3, 0, 1, 2, 3, 0, 1]
        assert [e.id for e in distribution.endpoints] == [0, 1, 2, 3]

    def test_loads_balanced(self):
        distribution = plan(parse_flow("node a = src@1\n"), 8)
        for count in (0, 7, 8, 100, 1001):
            loads = distribution.loads("a", count)
            assert sum(loads) == count
            assert max(loads) - min(loads) <= 1

    def test_pinned_nodes_stay_on_first_endpoint(self):
        distribution = plan(parse_flow("node a = src@1\n"), 4, pinned=["a"])
        assert distribution.loads("a", 9) == [9, 0, 0, 0]


class TestEndpoints:
    """Tests for message handling and the in-process transport."""

    def test_handle_keeps_positions(self):
        message = WorkMessage("n", 1, (1, 3), ({"value": 1.0}, {"value": 2.0}),
                              {"factor": 10.0, "field": "value"}, 0)
        result = handle(message, ScaleProcessor())
        assert result.positions == (1, 3)
        assert result.trees == ({"value": 10.0}, {"value": 20.0})

    def test_runner_matches_serial(self):
        trees = [{"value": float(i)} for i in range(13)]
        params = {"sigma": 1.0, "field": "value"}
        serial = JitterProcessor().process(trees, params, 99)
        for workers in (2, 3, 8):
            with InProcessTransport(workers) as transport:
                runner = DistributedRunner(plan(parse_flow("node j = src@1\n"), workers), transport)
                assert runner("j", JitterProcessor(), trees, params, 99) == serial


class TestEquivalence:
    """Outputs do not depend on the worker count."""

    def test_random_flows(self, store, alice, flow_setup):
        rng = random.Random(20240611)
        metamodel = MetaModel(store)
        for trial in range(50):
            text, sources, params = random_flow(rng)
            graph, flow_id, bindings = flow_setup(text, alice, uri=f"fracti://flows/random-{trial}@1")
            config = metamodel.snapshot(flow_id, bindings, params, seed=trial, principal=alice)
            inputs = {
                source: bind([{"value": rng.uniform(-100, 100)} for _ in range(rng.randint(0, 20))],
                             config.id)
                for source in sources
            }
            hashes = set()
            for workers in WORKER_COUNTS:
                result = FlowExecutor(store, metamodel=metamodel).run(
                    graph, inputs, config, alice, workers=workers)
                assert result.record.workers == workers
                hashes.add(result.output_hash)
            assert len(hashes) == 1, text

    def test_window_predictor_flow(self, store):
        showcase = Showcase(store, settings=ShowcaseConfig(max_iterations=50))
        showcase.ensure_principals()
        owner = showcase.principal(RESEARCHER_A)
        showcase.register_processors(owner, SCENARIOS)
        graph = load_model_flow()
        flow_id = register_flow(store, graph, owner, "fracti://models/window-predictor@1")
        events = load_surrogate_events()[:60]

        for scenario in ("standard", "linear_least_square"):
            config = showcase.metamodel.snapshot(flow_id, showcase.bindings(scenario), showcase.params(),
                                                 principal=owner)
            inputs = {"source": bind([event.to_tree() for event in events], config.id)}
            results = [FlowExecutor(store, showcase.registry).run(graph, inputs, config, owner, workers=w)
                       for w in WORKER_COUNTS]
            assert len({r.output_hash for r in results}) == 1
            (trained,) = results[0].outputs["trainer"]
            assert trained.tree["scenario"] == scenario
            assert trained.tree["samples"] == 55
