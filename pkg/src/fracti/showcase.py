"""The three collaborative use cases, runnable end to end.

A: one researcher compares six training scenarios on the surrogate index.
B: a second researcher adds the sbllm scenario as a new model revision and
   re-runs all seven.
C: a third researcher sweeps layers N, drift D and sigma over random
   walks, plus a baseline pass over the surrogate index.
"""

import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

from .config import ShowcaseConfig
from .errors import InvalidParams, NotFound, UnknownPrincipal
from .flow import FlowParser, processor_uri
from .metamodel import MetaModel, register_flow
from .processors import ProcessorRegistry, SeriesSourceProcessor, default_registry, register_processor
from .simulation import (
    Event,
    Experiment,
    ExperimentDefinition,
    ExperimentRunner,
    Mode,
    RandomWalkParams,
    RunDefinition,
    TimeSeries,
    load_experiment,
    load_series,
    read_series_csv,
    register_series,
    write_benchmark_csv,
)
from .store import ContributionId, ContributionKind, ContributionStore, Principal, make_uri
from .trainers import (
    EXTENDED_SCENARIOS,
    SCENARIOS,
    TRAINERS,
    NetworkProcessor,
    SlidingWindowProcessor,
)

logger = logging.getLogger(__name__)

RESEARCHER_A = "researcher-a"
RESEARCHER_B = "researcher-b"
RESEARCHER_C = "researcher-c"
AUDITOR = "auditor"

MODEL_NAME = "window-predictor"
SURROGATE_URI = make_uri("datasets", "surrogate-index")
EXPERIMENT_URIS = {
    "a": make_uri("experiments", "usecase-a"),
    "b": make_uri("experiments", "usecase-b"),
    "c": make_uri("experiments", "usecase-c"),
}

HYPOTHESES = {
    "a": ("The six training scenarios differ in learning time and fit on the index.",
          "All six training scenarios learn equally fast and fit equally well."),
    "b": ("sbllm learns faster than the six existing scenarios.",
          "sbllm is no faster than the existing scenarios."),
    "c": ("The fastest scenario depends on the number of layers N.",
          "The fastest scenario does not depend on N, D or sigma."),
}


@dataclass(frozen=True)
class SweepParams:
    n_set: tuple[int, ...]
    d_set: tuple[float, ...]
    sigma_set: tuple[float, ...]
    baseline: ContributionId | None = None

    def __post_init__(self):
        for name in ("n_set", "d_set", "sigma_set"):
            if not getattr(self, name):
                raise InvalidParams(f"{name} must not be empty")
        if any(n < 1 for n in self.n_set):
            raise InvalidParams("layer counts must be >= 1")
        if any(sigma < 0 for sigma in self.sigma_set):
            raise InvalidParams("sigma values must be >= 0")

    @property
    def run_count(self) -> int:
        return len(self.n_set) * len(self.d_set) * len(self.sigma_set) * len(EXTENDED_SCENARIOS) \
            + len(EXTENDED_SCENARIOS)

    @classmethod
    def from_settings(cls, settings: ShowcaseConfig) -> "SweepParams":
        return cls(tuple(settings.n_set), tuple(settings.d_set), tuple(settings.sigma_set))


@dataclass
class Showcase:
    """Shared context for the use cases on one store."""
    store: ContributionStore
    settings: ShowcaseConfig = field(default_factory=ShowcaseConfig)
    registry: ProcessorRegistry = field(default_factory=default_registry)
    results_dir: Path | None = None
    parallel_runs: int = 1

    def __post_init__(self):
        self.metamodel = MetaModel(self.store)

    # -- principals and assets ---------------------------------------------

    def principal(self, principal_id: str) -> Principal:
        try:
            return self.store.get_principal(principal_id)
        except UnknownPrincipal:
            return self.store.add_principal(principal_id, principal_id.replace("-", " ").title(),
                                            auditor=principal_id == AUDITOR)

    def ensure_principals(self) -> None:
        for principal_id in (RESEARCHER_A, RESEARCHER_B, RESEARCHER_C, AUDITOR):
            self.principal(principal_id)

    def publish(self, owner: Principal, *grantees: str) -> int:
        """Grant read access to everything `owner` owns."""
        granted = 0
        for cid in self.store.contributions(owner=owner.id):
            for grantee in grantees:
                before = self.store.policy_of(cid)
                if self.store.grant(cid, owner, self.store.get_principal(grantee)) != before:
                    granted += 1
        logger.info("%s published %d grants", owner.id, granted)
        return granted

    def register_processors(self, owner: Principal, scenarios: Sequence[str]) -> None:
        for impl in (SeriesSourceProcessor, SlidingWindowProcessor, NetworkProcessor):
            self._register_processor(impl, owner)
        for scenario in scenarios:
            self._register_processor(TRAINERS[scenario], owner)

    def _register_processor(self, impl, owner: Principal) -> ContributionId:
        try:
            return self.store.resolve(processor_uri(impl.name, impl.version))
        except NotFound:
            return register_processor(self.store, impl, owner, registry=self.registry)

    def hypotheses(self, case: str, owner: Principal) -> tuple[ContributionId, ContributionId]:
        h, h0 = HYPOTHESES[case]
        return (
            self.store.register(h.encode("utf-8"), ContributionKind.HYPOTHESIS, owner,
                                make_uri("hypotheses", f"usecase-{case}-h")),
            self.store.register(h0.encode("utf-8"), ContributionKind.HYPOTHESIS, owner,
                                make_uri("hypotheses", f"usecase-{case}-h0")),
        )

    def surrogate(self, owner: Principal) -> TimeSeries:
        try:
            return load_series(self.store, self.store.resolve(SURROGATE_URI), owner)
        except NotFound:
            return register_series(self.store, load_surrogate_events(), owner, SURROGATE_URI)

    def model(self, version: int) -> ContributionId:
        return self.store.resolve(make_uri("models", MODEL_NAME, version))

    def bindings(self, scenario: str) -> dict[str, ContributionId]:
        refs = {
            "network": NetworkProcessor,
            "source": SeriesSourceProcessor,
            "trainer": TRAINERS[scenario],
            "window": SlidingWindowProcessor,
        }
        return {node: self.store.resolve(processor_uri(impl.name, impl.version))
                for node, impl in refs.items()}

    def params(self, layers: int = 1) -> dict[str, object]:
        s = self.settings
        return {
            "network.inputs": s.window,
            "network.layers": layers,
            "trainer.learning_rate": s.learning_rate,
            "trainer.max_iterations": s.max_iterations,
            "trainer.tolerance": s.tolerance,
            "window.window": s.window,
        }

    def _existing(self, case: str, owner: Principal) -> Experiment | None:
        try:
            return load_experiment(self.store, self.store.resolve(EXPERIMENT_URIS[case]), owner)
        except NotFound:
            return None

    def _run(self, definition: ExperimentDefinition, owner: Principal) -> Experiment:
        experiment = ExperimentRunner(self.store, owner, self.registry, self.parallel_runs).run(definition)
        if self.results_dir is not None:
            self.results_dir.mkdir(parents=True, exist_ok=True)
            path = self.results_dir / f"{definition.name}.csv"
            with open(path, "w", encoding="utf-8", newline="") as f:
                write_benchmark_csv(experiment, f)
            logger.info("wrote %s", path)
        return experiment

    # -- use cases ---------------------------------------------------------

    def usecase_a(self) -> Experiment:
        self.ensure_principals()
        owner = self.principal(RESEARCHER_A)
        existing = self._existing("a", owner)
        if existing is not None:
            return existing

        self.register_processors(owner, SCENARIOS)
        surrogate = self.surrogate(owner)
        model = register_flow(self.store, load_model_flow(), owner, make_uri("models", MODEL_NAME, 1))
        h, h0 = self.hypotheses("a", owner)

        base = self.metamodel.snapshot(model, self.bindings(SCENARIOS[0]), self.params(),
                                       seed=self.settings.walk_seed, principal=owner)
        runs = tuple(
            RunDefinition(
                label=scenario,
                mode=Mode.historical(surrogate.id),
                bindings=self.bindings(scenario),
                params=self.params(),
                seed=self.settings.walk_seed,
                parent=None if scenario == SCENARIOS[0] else base.id,
            )
            for scenario in SCENARIOS
        )
        experiment = self._run(ExperimentDefinition(
            name="usecase-a", hypothesis=h, null_hypothesis=h0, model=model, runs=runs,
            uri=EXPERIMENT_URIS["a"]), owner)
        self.publish(owner, RESEARCHER_B, RESEARCHER_C, AUDITOR)
        return experiment

    def usecase_b(self, experiment_a: Experiment | None = None) -> Experiment:
        self.ensure_principals()
        owner = self.principal(RESEARCHER_B)
        existing = self._existing("b", owner)
        if existing is not None:
            return existing
        if experiment_a is None:
            experiment_a = self._existing("a", owner)
            if experiment_a is None:
                raise NotFound("use case A has not been run in this store")

        self.register_processors(owner, EXTENDED_SCENARIOS)
        model = register_flow(self.store, load_model_flow(), owner, make_uri("models", MODEL_NAME, 2),
                              parents=[experiment_a.model])
        h, h0 = self.hypotheses("b", owner)

        parents = {run.label: run.config_id for run in experiment_a.runs}
        base_parent = parents.get(SCENARIOS[0]) or None
        runs = tuple(
            RunDefinition(
                label=scenario,
                mode=Mode.historical(self.store.resolve(SURROGATE_URI)),
                bindings=self.bindings(scenario),
                params=self.params(),
                seed=self.settings.walk_seed,
                parent=parents.get(scenario) or base_parent,
            )
            for scenario in EXTENDED_SCENARIOS
        )
        experiment = self._run(ExperimentDefinition(
            name="usecase-b", hypothesis=h, null_hypothesis=h0, model=model, runs=runs,
            uri=EXPERIMENT_URIS["b"]), owner)
        self.publish(owner, RESEARCHER_C, AUDITOR)
        return experiment

    def usecase_c(self, sweep: SweepParams | None = None) -> Experiment:
        self.ensure_principals()
        owner = self.principal(RESEARCHER_C)
        existing = self._existing("c", owner)
        if existing is not None:
            return existing
        try:
            previous = self.model(2)
        except NotFound:
            raise NotFound("use case B has not been run in this store") from None

        sweep = sweep or SweepParams.from_settings(self.settings)
        baseline = sweep.baseline or self.store.resolve(SURROGATE_URI)
        model = register_flow(self.store, load_model_flow(), owner, make_uri("models", MODEL_NAME, 3),
                              parents=[previous])
        h, h0 = self.hypotheses("c", owner)
        s = self.settings

        runs = []
        for layers in sweep.n_set:
            for drift in sweep.d_set:
                for sigma in sweep.sigma_set:
                    walk = RandomWalkParams(drift=float(drift), sigma=float(sigma), steps=s.walk_steps,
                                            x0=s.walk_x0, seed=s.walk_seed)
                    for scenario in EXTENDED_SCENARIOS:
                        runs.append(RunDefinition(
                            label=f"N{layers}-D{drift}-s{sigma}-{scenario}",
                            mode=Mode.synthetic(walk),
                            bindings=self.bindings(scenario),
                            params=self.params(layers),
                            seed=s.walk_seed,
                            group=f"N={layers}",
                        ))
        for scenario in EXTENDED_SCENARIOS:
            runs.append(RunDefinition(
                label=f"baseline-{scenario}",
                mode=Mode.historical(baseline),
                bindings=self.bindings(scenario),
                params=self.params(sweep.n_set[0]),
                seed=s.walk_seed,
                group="baseline",
            ))

        experiment = self._run(ExperimentDefinition(
            name="usecase-c", hypothesis=h, null_hypothesis=h0, model=model, runs=tuple(runs),
            group_by="layers", uri=EXPERIMENT_URIS["c"]), owner)
        self.publish(owner, AUDITOR)
        return experiment


def load_model_flow():
    text = resources.files("fracti").joinpath("data", "window_predictor.flow").read_text(encoding="utf-8")
    return FlowParser().parse(text)


def load_surrogate_events() -> list[Event]:
    with resources.files("fracti").joinpath("data", "surrogate_index.csv").open("r", encoding="utf-8") as f:
        return read_series_csv(f)


def build_usecase_a(store: ContributionStore, **kwargs) -> Experiment:
    return Showcase(store, **kwargs).usecase_a()


def extend_usecase_b(store: ContributionStore, experiment_a: Experiment | None = None,
                     **kwargs) -> Experiment:
    return Showcase(store, **kwargs).usecase_b(experiment_a)


def sweep_usecase_c(store: ContributionStore, params: SweepParams | None = None, **kwargs) -> Experiment:
    return Showcase(store, **kwargs).usecase_c(params)


def run_showcase(store: ContributionStore, case: str, **kwargs) -> Experiment:
    """Run a use case and, first, any use case it builds on."""
    if case not in EXPERIMENT_URIS:
        raise InvalidParams(f"unknown use case {case!r}")
    sweep = kwargs.pop("sweep", None)
    if sweep is not None and case != "c":
        raise InvalidParams(f"use case {case} takes no sweep, only c does")
    showcase = Showcase(store, **kwargs)
    experiment = showcase.usecase_a()
    if case == "a":
        return experiment
    experiment = showcase.usecase_b(experiment)
    if case == "b":
        return experiment
    return showcase.usecase_c(sweep)

