"""Time series generation, replay, shocks and experiments."""

import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from numbers import Real
from pathlib import Path
from typing import TYPE_CHECKING, Any, Callable, Iterable, Iterator, Mapping, Sequence, TextIO

import numpy as np

from . import canonical
from .errors import (
    EmptySeries,
    EventOrderError,
    FractiError,
    InvalidExperiment,
    InvalidParams,
    InvalidShock,
    MalformedSeries,
    MissingMetric,
    NotFound,
)
from .flow import Fragment
from .metamodel import MetaModel
from .seeding import SEED_LIMIT, standard_normals
from .store import ContributionId, ContributionKind, ContributionStore, Principal, make_uri

if TYPE_CHECKING:
    from .processors import ProcessorRegistry

logger = logging.getLogger(__name__)

WALKS_NAMESPACE = "walks"
SERIES_NAMESPACE = "series"
EXPERIMENTS_NAMESPACE = "experiments"
CSV_HEADER = ["t_ms", "value"]


# -- series ------------------------------------------------------------------

@dataclass(frozen=True)
class Event:
    t: int  # logical milliseconds
    value: float

    def to_tree(self) -> dict[str, Any]:
        return {"t": self.t, "value": self.value}


def check_events(events: Sequence[Event]) -> None:
    if not events:
        raise EmptySeries("series has no events")
    for previous, current in zip(events, events[1:]):
        if current.t <= previous.t:
            raise EventOrderError(f"event times must strictly increase: {previous.t} then {current.t}")


@dataclass(frozen=True)
class TimeSeries:
    id: ContributionId | None
    events: tuple[Event, ...]

    def __post_init__(self):
        check_events(self.events)

    @property
    def times(self) -> np.ndarray:
        return np.array([event.t for event in self.events], dtype=np.int64)

    @property
    def values(self) -> np.ndarray:
        return np.array([event.value for event in self.events], dtype=np.float64)

    def __len__(self) -> int:
        return len(self.events)


def series_payload(events: Sequence[Event]) -> bytes:
    return canonical.encode_bytes({"events": [event.to_tree() for event in events]})


def events_from_payload(payload: bytes) -> tuple[Event, ...]:
    try:
        tree = canonical.decode(payload)
        return tuple(Event(int(row["t"]), float(row["value"])) for row in tree["events"])
    except (KeyError, TypeError, ValueError) as e:
        raise MalformedSeries(f"not a series payload: {e}") from e


def register_series(store: ContributionStore, events: Sequence[Event], principal: Principal,
                    uri: str, parents: Sequence[ContributionId] = ()) -> TimeSeries:
    events = tuple(events)
    check_events(events)
    payload = series_payload(events)
    if parents:
        cid = store.derive(parents, payload, principal, uri, kind=ContributionKind.DATASET)
    else:
        cid = store.register(payload, ContributionKind.DATASET, principal, uri)
    return TimeSeries(cid, events)


def load_series(store: ContributionStore, cid: ContributionId, principal: Principal) -> TimeSeries:
    return TimeSeries(cid, events_from_payload(store.fetch(cid, principal).payload))


def read_series_csv(source: TextIO | Path) -> list[Event]:
    """Read `t_ms,value` CSV; the header is mandatory."""
    if isinstance(source, (str, Path)):
        with open(source, "r", encoding="utf-8", newline="") as f:
            return read_series_csv(f)

    reader = csv.reader(source)
    header = next(reader, None)
    if header is None or [cell.strip() for cell in header] != CSV_HEADER:
        raise MalformedSeries(f"series CSV must start with the header {','.join(CSV_HEADER)}")
    events = []
    for number, row in enumerate(reader, start=2):
        if not row or not "".join(row).strip():
            continue
        try:
            events.append(Event(int(row[0]), float(row[1])))
        except (IndexError, ValueError) as e:
            raise MalformedSeries(f"line {number}: {e}") from e
    return events


def write_series_csv(series: TimeSeries, out: TextIO) -> None:
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for event in series.events:
        writer.writerow([event.t, repr(event.value)])


# -- random walks ------------------------------------------------------------

@dataclass(frozen=True)
class RandomWalkParams:
    """x[k+1] = x[k] + drift + sigma * z[k]; sigma is the per-step standard deviation."""
    drift: float
    sigma: float
    steps: int
    x0: float = 0.0
    seed: int = 0
    dt: int = 1
    t0: int = 0

    def __post_init__(self):
        if isinstance(self.steps, bool) or not isinstance(self.steps, int) or self.steps < 1:
            raise InvalidParams(f"steps must be an integer >= 1, got {self.steps!r}")
        if not isinstance(self.sigma, Real) or not self.sigma >= 0 or math.isinf(self.sigma):
            raise InvalidParams(f"sigma must be finite and >= 0, got {self.sigma!r}")
        if not isinstance(self.drift, Real) or not math.isfinite(self.drift):
            raise InvalidParams(f"drift must be finite, got {self.drift!r}")
        if not isinstance(self.x0, Real) or not math.isfinite(self.x0):
            raise InvalidParams(f"x0 must be finite, got {self.x0!r}")
        if isinstance(self.dt, bool) or not isinstance(self.dt, int) or self.dt < 1:
            raise InvalidParams(f"dt must be an integer >= 1, got {self.dt!r}")
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or not 0 <= self.seed < SEED_LIMIT:
            raise InvalidParams(f"seed must be a 64-bit unsigned integer, got {self.seed!r}")

    def to_tree(self) -> dict[str, Any]:
        return {
            "drift": float(self.drift),
            "dt": self.dt,
            "seed": self.seed,
            "sigma": float(self.sigma),
            "steps": self.steps,
            "t0": self.t0,
            "x0": float(self.x0),
        }

    @classmethod
    def from_tree(cls, tree: Mapping[str, Any]) -> "RandomWalkParams":
        try:
            return cls(
                drift=float(tree["drift"]),
                sigma=float(tree["sigma"]),
                steps=int(tree["steps"]),
                x0=float(tree.get("x0", 0.0)),
                seed=int(tree.get("seed", 0)),
                dt=int(tree.get("dt", 1)),
                t0=int(tree.get("t0", 0)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise InvalidParams(f"bad random walk parameters: {e}") from e

    @property
    def key(self) -> str:
        return canonical.tree_digest(self.to_tree())[:16]


def walk_values(params: RandomWalkParams) -> np.ndarray:
    steps = np.arange(params.steps, dtype=np.float64)
    drift_line = params.x0 + params.drift * steps
    increments = params.sigma * standard_normals(params.seed, params.steps - 1)
    noise = np.concatenate(([0.0], np.cumsum(increments)))
    return drift_line + noise


def generate_walk(params: RandomWalkParams, store: ContributionStore | None = None,
                  principal: Principal | None = None) -> TimeSeries:
    """Generate a seeded walk; with a store, persist it beside its parameter descriptor."""
    values = walk_values(params)
    events = tuple(Event(params.t0 + k * params.dt, float(value)) for k, value in enumerate(values))
    if store is None:
        return TimeSeries(None, events)
    if principal is None:
        raise InvalidParams("a principal is needed to register the walk")

    descriptor = store.register(
        canonical.encode_bytes(params.to_tree()), ContributionKind.MODEL, principal,
        make_uri(WALKS_NAMESPACE, f"params-{params.key}"),
    )
    series = register_series(store, events, principal,
                             make_uri(WALKS_NAMESPACE, f"walk-{params.key}"), parents=[descriptor])
    logger.info("generated walk %s (%d steps)", series.id.uri, params.steps)
    return series


# -- replay ------------------------------------------------------------------

def replay(series: TimeSeries, config_id: str, realtime: bool = False, speed: float = 1.0,
           sleep: Callable[[float], None] = time.sleep) -> Iterator[Fragment]:
    """Emit the events as fragments in time order, optionally paced by wall clock."""
    events = series.events
    check_events(events)
    if speed <= 0:
        raise InvalidParams(f"replay speed must be > 0, got {speed}")
    return _replay(events, config_id, realtime, speed, sleep)


def _replay(events: Sequence[Event], config_id: str, realtime: bool, speed: float,
            sleep: Callable[[float], None]) -> Iterator[Fragment]:
    previous = None
    for seq, event in enumerate(events):
        if realtime and previous is not None:
            sleep((event.t - previous) / 1000.0 / speed)
        previous = event.t
        yield Fragment(tree=event.to_tree(), seq=seq, config_id=config_id)


# -- shocks ------------------------------------------------------------------

class ShockKind(Enum):
    ADDITIVE_JUMP = "additive_jump"
    SCALE_WINDOW = "scale_window"


@dataclass(frozen=True)
class Shock:
    kind: ShockKind
    at: int
    magnitude: float
    window_end: int | None = None

    def __post_init__(self):
        if not isinstance(self.kind, ShockKind):
            raise InvalidShock(f"unknown shock kind {self.kind!r}")
        if not isinstance(self.magnitude, Real) or not math.isfinite(self.magnitude):
            raise InvalidShock(f"shock magnitude must be finite, got {self.magnitude!r}")
        if self.kind == ShockKind.SCALE_WINDOW:
            if self.window_end is None or self.window_end <= self.at:
                raise InvalidShock("scale_window needs window_end > at")
        elif self.window_end is not None:
            raise InvalidShock("additive_jump takes no window_end")

    def apply(self, events: Sequence[Event]) -> tuple[Event, ...]:
        shocked = []
        for event in events:
            value = event.value
            if self.kind == ShockKind.ADDITIVE_JUMP and event.t >= self.at:
                value = value + self.magnitude
            elif self.kind == ShockKind.SCALE_WINDOW and self.at <= event.t < self.window_end:
                value = value * self.magnitude
            shocked.append(Event(event.t, value))
        return tuple(shocked)

    def to_tree(self) -> dict[str, Any]:
        tree = {"at": self.at, "kind": self.kind.value, "magnitude": float(self.magnitude)}
        if self.window_end is not None:
            tree["window_end"] = self.window_end
        return tree

    @classmethod
    def from_tree(cls, tree: Mapping[str, Any]) -> "Shock":
        try:
            kind = ShockKind(tree["kind"])
            window_end = tree.get("window_end")
            return cls(kind, int(tree["at"]), float(tree["magnitude"]),
                       int(window_end) if window_end is not None else None)
        except (KeyError, TypeError, ValueError) as e:
            raise InvalidShock(f"bad shock definition: {e}") from e


def apply_shock(store: ContributionStore, series: TimeSeries, shock: Shock,
                principal: Principal) -> TimeSeries:
    """Store the shocked series as a contribution derived from the input series."""
    if series.id is None:
        raise InvalidShock("only stored series can be shocked")
    key = canonical.tree_digest({"series": series.id.ref, "shock": shock.to_tree()})[:16]
    return register_series(store, shock.apply(series.events), principal,
                            make_uri(SERIES_NAMESPACE, f"shock-{key}"), parents=[series.id])


# -- modes and benchmarks ----------------------------------------------------

class ModeName(Enum):
    HISTORICAL_REPLAY = "historical_replay"
    SYNTHETIC = "synthetic"


@dataclass(frozen=True)
class Mode:
    name: ModeName
    source: ContributionId | None = None
    walk: RandomWalkParams | None = None

    def __post_init__(self):
        if (self.source is None) == (self.walk is None):
            raise InvalidExperiment("a mode needs exactly one of a source series or walk parameters")
        if self.name == ModeName.HISTORICAL_REPLAY and self.source is None:
            raise InvalidExperiment("historical replay needs a source series")
        if self.name == ModeName.SYNTHETIC and self.walk is None:
            raise InvalidExperiment("synthetic mode needs walk parameters")

    @classmethod
    def historical(cls, source: ContributionId) -> "Mode":
        return cls(ModeName.HISTORICAL_REPLAY, source=source)

    @classmethod
    def synthetic(cls, walk: RandomWalkParams) -> "Mode":
        return cls(ModeName.SYNTHETIC, walk=walk)

    def to_tree(self) -> dict[str, Any]:
        if self.source is not None:
            return {"name": self.name.value, "source": self.source.uri}
        return {"name": self.name.value, "walk": self.walk.to_tree()}

    @classmethod
    def from_tree(cls, tree: Mapping[str, Any], store: ContributionStore) -> "Mode":
        name = ModeName(tree["name"])
        if "source" in tree:
            return cls(name, source=store.resolve(tree["source"]))
        return cls(name, walk=RandomWalkParams.from_tree(tree["walk"]))


class Metric(Enum):
    LEARNING_TIME_ITERATIONS = "learning_time_iterations"
    FIT_MSE = "fit_mse"


@dataclass(frozen=True)
class Benchmark:
    metric: Metric
    comparator: str = "lower_is_better"


@dataclass(frozen=True)
class RankedRow:
    rank: int
    result: ContributionId
    value: float


def metric_value(fragments: Iterable[Mapping[str, Any]], metric: Metric | str) -> float:
    """The metric from the last fragment tree that carries it."""
    metric = Metric(metric).value
    found = None
    for fragment in fragments:
        tree = fragment.get("tree", fragment)
        if metric in tree:
            found = tree[metric]
    if found is None or isinstance(found, bool) or not isinstance(found, Real):
        raise MissingMetric(f"no numeric {metric} in result")
    return float(found)


def evaluate_benchmark(store: ContributionStore, results: Sequence[ContributionId],
                       metric: Metric | str, principal: Principal) -> list[RankedRow]:
    """Rank results by a lower-is-better metric; ties go to the smaller uri."""
    rows = []
    for cid in results:
        payload = canonical.decode(store.fetch(cid, principal).payload)
        try:
            value = metric_value(payload.get("fragments", []), metric)
        except MissingMetric as e:
            raise MissingMetric(f"{cid.uri}: {e}") from e
        rows.append((value, cid.uri, cid))
    rows.sort(key=lambda row: (row[0], row[1]))
    return [RankedRow(rank, cid, value) for rank, (value, _, cid) in enumerate(rows, start=1)]


# -- experiments -------------------------------------------------------------

@dataclass(frozen=True)
class RunDefinition:
    label: str
    mode: Mode
    bindings: Mapping[str, ContributionId]
    shocks: tuple[Shock, ...] = ()
    params: Mapping[str, Any] = field(default_factory=dict)
    seed: int = 0
    workers: int = 1
    parent: str | None = None  # snapshot this configuration revises
    source: str | None = None  # flow source fed by the series
    group: str = ""

    @classmethod
    def from_tree(cls, tree: Mapping[str, Any], store: ContributionStore) -> "RunDefinition":
        try:
            return cls(
                label=str(tree["label"]),
                mode=Mode.from_tree(tree["mode"], store),
                bindings={node: store.resolve(uri) for node, uri in tree["bindings"].items()},
                shocks=tuple(Shock.from_tree(shock) for shock in tree.get("shocks", [])),
                params=dict(tree.get("params", {})),
                seed=int(tree.get("seed", 0)),
                workers=int(tree.get("workers", 1)),
                parent=tree.get("parent") or None,
                source=tree.get("source") or None,
                group=str(tree.get("group", "")),
            )
        except KeyError as e:
            raise InvalidExperiment(f"run definition lacks {e}") from e


@dataclass(frozen=True)
class ExperimentDefinition:
    name: str
    hypothesis: ContributionId
    null_hypothesis: ContributionId
    model: ContributionId
    runs: tuple[RunDefinition, ...]
    metrics: tuple[Metric, ...] = (Metric.LEARNING_TIME_ITERATIONS, Metric.FIT_MSE)
    group_by: str = ""
    conclusion: str = ""
    uri: str | None = None

    @classmethod
    def from_tree(cls, tree: Mapping[str, Any], store: ContributionStore) -> "ExperimentDefinition":
        try:
            return cls(
                name=str(tree["name"]),
                hypothesis=store.resolve(tree["hypothesis"]),
                null_hypothesis=store.resolve(tree["null_hypothesis"]),
                model=store.resolve(tree["model"]),
                runs=tuple(RunDefinition.from_tree(run, store) for run in tree.get("runs", [])),
                metrics=tuple(Metric(m) for m in tree.get("metrics", [m.value for m in Metric])),
                group_by=str(tree.get("group_by", "")),
                conclusion=str(tree.get("conclusion", "")),
                uri=tree.get("uri") or None,
            )
        except KeyError as e:
            raise InvalidExperiment(f"experiment definition lacks {e}") from e
        except NotFound as e:
            raise InvalidExperiment(f"experiment definition references a missing contribution: {e}") from e


def load_definition(path: Path, store: ContributionStore) -> ExperimentDefinition:
    return ExperimentDefinition.from_tree(canonical.decode(Path(path).read_text(encoding="utf-8")), store)


@dataclass
class RunOutcome:
    label: str
    group: str
    mode: dict[str, Any]
    shocks: list[dict[str, Any]]
    status: str = "ok"
    error: str = ""
    config_id: str = ""
    execution_id: str = ""
    series: ContributionId | None = None
    results: list[ContributionId] = field(default_factory=list)
    metrics: dict[str, float] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_tree(self) -> dict[str, Any]:
        return {
            "config_id": self.config_id,
            "error": self.error,
            "execution_id": self.execution_id,
            "group": self.group,
            "label": self.label,
            "metrics": dict(self.metrics),
            "mode": self.mode,
            "results": [cid.ref for cid in self.results],
            "series": self.series.ref if self.series else "",
            "shocks": self.shocks,
            "status": self.status,
        }

    @classmethod
    def from_tree(cls, tree: Mapping[str, Any]) -> "RunOutcome":
        return cls(
            label=tree["label"],
            group=tree.get("group", ""),
            mode=dict(tree["mode"]),
            shocks=list(tree.get("shocks", [])),
            status=tree["status"],
            error=tree.get("error", ""),
            config_id=tree.get("config_id", ""),
            execution_id=tree.get("execution_id", ""),
            series=ContributionId.from_ref(tree["series"]) if tree.get("series") else None,
            results=[ContributionId.from_ref(ref) for ref in tree.get("results", [])],
            metrics={key: float(value) for key, value in tree.get("metrics", {}).items()},
        )


@dataclass
class Experiment:
    """Persisted experiment: hypotheses, model, runs, benchmarks and conclusion."""
    id: ContributionId | None
    name: str
    hypothesis: ContributionId
    null_hypothesis: ContributionId
    model: ContributionId
    runs: list[RunOutcome]
    rankings: dict[str, list[str]]  # metric -> run labels, best first
    winners: dict[str, str]
    groups: dict[str, dict[str, str]]  # group -> metric -> winning label
    group_by: str = ""
    conclusion: str = ""

    def benchmark_rows(self) -> list[dict[str, Any]]:
        """One row per run, in definition order."""
        rows = []
        for run in self.runs:
            row = {"label": run.label, "group": run.group, "status": run.status}
            for metric, labels in self.rankings.items():
                row[metric] = run.metrics.get(metric)
                row[f"{metric}_rank"] = labels.index(run.label) + 1 if run.label in labels else None
            row["execution_id"] = run.execution_id
            row["error"] = run.error
            rows.append(row)
        return rows

    def to_tree(self) -> dict[str, Any]:
        return {
            "conclusion": self.conclusion,
            "group_by": self.group_by,
            "groups": self.groups,
            "hypothesis": self.hypothesis.ref,
            "model": self.model.ref,
            "name": self.name,
            "null_hypothesis": self.null_hypothesis.ref,
            "rankings": self.rankings,
            "runs": [run.to_tree() for run in self.runs],
            "winners": self.winners,
        }

    @classmethod
    def from_tree(cls, tree: Mapping[str, Any], cid: ContributionId | None = None) -> "Experiment":
        return cls(
            id=cid,
            name=tree["name"],
            hypothesis=ContributionId.from_ref(tree["hypothesis"]),
            null_hypothesis=ContributionId.from_ref(tree["null_hypothesis"]),
            model=ContributionId.from_ref(tree["model"]),
            runs=[RunOutcome.from_tree(run) for run in tree["runs"]],
            rankings={metric: list(labels) for metric, labels in tree.get("rankings", {}).items()},
            winners=dict(tree.get("winners", {})),
            groups={group: dict(w) for group, w in tree.get("groups", {}).items()},
            group_by=tree.get("group_by", ""),
            conclusion=tree.get("conclusion", ""),
        )


def load_experiment(store: ContributionStore, cid: ContributionId, principal: Principal) -> Experiment:
    return Experiment.from_tree(canonical.decode(store.fetch(cid, principal).payload), cid)


def write_benchmark_csv(experiment: Experiment, out: TextIO) -> None:
    rows = experiment.benchmark_rows()
    columns = list(rows[0]) if rows else ["label", "group", "status"]
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow(["" if row[column] is None else row[column] for column in columns])


class ExperimentRunner:
    """Runs experiment definitions and persists the outcome as a contribution."""

    def __init__(self, store: ContributionStore, principal: Principal,
                 registry: "ProcessorRegistry | None" = None, parallel_runs: int = 1,
                 realtime: bool = False, speed: float = 1.0):
        from .executor import FlowExecutor

        self.store = store
        self.principal = principal
        self.metamodel = MetaModel(store)
        self.executor = FlowExecutor(store, registry, self.metamodel)
        self.parallel_runs = max(1, parallel_runs)
        self.realtime = realtime
        self.speed = speed

    def run(self, definition: ExperimentDefinition) -> Experiment:
        if not definition.runs:
            raise InvalidExperiment(f"experiment {definition.name!r} has no runs")
        labels = [run.label for run in definition.runs]
        if len(set(labels)) != len(labels):
            raise InvalidExperiment("run labels must be unique")
        for role, cid in (("hypothesis", definition.hypothesis),
                          ("null hypothesis", definition.null_hypothesis),
                          ("model", definition.model)):
            if not self.store.exists(cid):
                raise InvalidExperiment(f"{role} {cid.uri} does not exist")

        graph = self.metamodel.load_flow(definition.model, self.principal)
        logger.info("running experiment %s with %d runs", definition.name, len(definition.runs))
        if self.parallel_runs > 1:
            with ThreadPoolExecutor(max_workers=self.parallel_runs) as pool:
                outcomes = list(pool.map(lambda run: self._run_one(definition, graph, run), definition.runs))
        else:
            outcomes = [self._run_one(definition, graph, run) for run in definition.runs]

        experiment = self._summarize(definition, outcomes)
        uri = definition.uri or make_uri(
            EXPERIMENTS_NAMESPACE, definition.name,
            self.store.next_version(EXPERIMENTS_NAMESPACE, definition.name),
        )
        experiment.id = self.store.derive(
            [definition.hypothesis, definition.null_hypothesis, definition.model],
            canonical.encode_bytes(experiment.to_tree()), self.principal, uri,
            kind=ContributionKind.EXPERIMENT,
        )
        logger.info("stored experiment %s", experiment.id.uri)
        return experiment

    def _run_one(self, definition: ExperimentDefinition, graph, run: RunDefinition) -> RunOutcome:
        outcome = RunOutcome(label=run.label, group=run.group, mode=run.mode.to_tree(),
                             shocks=[shock.to_tree() for shock in run.shocks])
        try:
            if run.mode.source is not None:
                series = load_series(self.store, run.mode.source, self.principal)
            else:
                series = generate_walk(run.mode.walk, self.store, self.principal)
            for shock in run.shocks:
                series = apply_shock(self.store, series, shock, self.principal)
            outcome.series = series.id

            source = run.source
            if source is None:
                if len(graph.sources) != 1:
                    raise InvalidExperiment("the model has several sources; name one per run")
                source = graph.sources[0]

            config = self.metamodel.snapshot(definition.model, run.bindings, run.params, run.seed,
                                             run.workers, run.parent, principal=self.principal)
            outcome.config_id = config.id
            fragments = list(replay(series, config.id, self.realtime, self.speed))
            result = self.executor.run(graph, {source: fragments}, config, self.principal,
                                       workers=run.workers, origins={source: series.id})
            outcome.execution_id = result.record.id
            outcome.results = list(result.record.outputs)
            trees = [f.tree for sink in sorted(result.outputs) for f in result.outputs[sink]]
            outcome.metrics = {metric.value: metric_value(trees, metric) for metric in definition.metrics}
        except FractiError as e:
            logger.warning("run %s of %s failed: %s", run.label, definition.name, e)
            outcome.status = "failed"
            outcome.error = str(e)
            outcome.execution_id = ""
        return outcome

    def _summarize(self, definition: ExperimentDefinition, outcomes: list[RunOutcome]) -> Experiment:
        ok = [outcome for outcome in outcomes if outcome.ok]
        rankings: dict[str, list[str]] = {}
        winners: dict[str, str] = {}
        for metric in definition.metrics:
            # same order evaluate_benchmark gives over the stored results
            ranked = sorted(ok, key=lambda o: (o.metrics[metric.value], o.results[0].uri, o.label))
            rankings[metric.value] = [o.label for o in ranked]
            if ranked:
                winners[metric.value] = ranked[0].label

        groups: dict[str, dict[str, str]] = {}
        if definition.group_by:
            for group in sorted({o.group for o in ok}):
                members = {o.label for o in ok if o.group == group}
                groups[group] = {metric: next(label for label in labels if label in members)
                                 for metric, labels in rankings.items() if labels}

        conclusion = definition.conclusion or self._conclusion(winners, groups, len(outcomes) - len(ok))
        return Experiment(
            id=None,
            name=definition.name,
            hypothesis=definition.hypothesis,
            null_hypothesis=definition.null_hypothesis,
            model=definition.model,
            runs=outcomes,
            rankings=rankings,
            winners=winners,
            groups=groups,
            group_by=definition.group_by,
            conclusion=conclusion,
        )

    @staticmethod
    def _conclusion(winners: Mapping[str, str], groups: Mapping[str, Mapping[str, str]],
                    failed: int) -> str:
        parts = [f"best {metric}: {label}" for metric, label in winners.items()]
        for group, group_winners in groups.items():
            parts.extend(f"{group} best {metric}: {label}" for metric, label in group_winners.items())
        if failed:
            parts.append(f"{failed} run(s) failed")
        return "; ".join(parts) or "no successful runs"


def run_experiment(definition: ExperimentDefinition, store: ContributionStore, principal: Principal,
                   registry: "ProcessorRegistry | None" = None, parallel_runs: int = 1) -> Experiment:
    return ExperimentRunner(store, principal, registry, parallel_runs).run(definition)
