"""Command line entry point for FRACTI."""

import argparse
import logging
import re
import sys
from pathlib import Path
from typing import Any

from . import canonical
from .archive import export_execution, import_archive
from .config import Config
from .display import Table, chain_table, render_lineage
from .errors import FractiError, IntegrityFailure, InvalidParams, NotFound, UnknownPrincipal
from .executor import FlowExecutor
from .flow import FlowGraph, FlowParser, flow_payload
from .layout import find_store_layout
from .metamodel import MetaModel, register_flow
from .processors import default_registry, ensure_registered
from .reactives import load_reactive_file
from .showcase import SweepParams, run_showcase
from .simulation import (
    Experiment,
    ExperimentRunner,
    TimeSeries,
    load_definition,
    load_experiment,
    load_series,
    read_series_csv,
    register_series,
    replay,
    series_payload,
    write_series_csv,
)
from .store import ContributionKind, ContributionStore, Principal, make_uri

logger = logging.getLogger(__name__)

FLOWS_NAMESPACE = "flows"
DATASETS_NAMESPACE = "datasets"
_UNSAFE_NAME = re.compile(r"[^A-Za-z0-9_.\-]+")


def _assignment(text: str) -> tuple[str, str]:
    name, sep, value = text.partition("=")
    if not sep or not name.strip() or not value.strip():
        raise argparse.ArgumentTypeError(f"expected NAME=VALUE, got {text!r}")
    return name.strip(), value.strip()


def _uri_name(text: str) -> str:
    return _UNSAFE_NAME.sub("-", text).strip("-") or "unnamed"


class FractiCli:
    """Runs one parsed command against a store."""

    def __init__(self, config: Config, store: ContributionStore, principal_id: str,
                 csv_path: Path | None = None):
        self.config = config
        self.store = store
        self.principal_id = principal_id
        self.csv_path = csv_path
        self.registry = default_registry()
        self.metamodel = MetaModel(store)

    @property
    def principal(self) -> Principal:
        return self.store.get_principal(self.principal_id)

    def dispatch(self, args: argparse.Namespace) -> int:
        handler = getattr(self, f"_cmd_{args.command}")
        return handler(args) or 0

    def emit(self, table: Table) -> None:
        if self.csv_path is not None:
            table.write_csv(self.csv_path)
            print(f"wrote {self.csv_path}")
        else:
            print(table.render())

    # -- contributions -----------------------------------------------------

    def _cmd_register(self, args: argparse.Namespace) -> int:
        payload = Path(args.file).read_bytes()
        auditor_access = True if args.auditor_access else None
        if args.parent:
            parents = [self.store.resolve(ref) for ref in args.parent]
            cid = self.store.derive(parents, payload, self.principal, args.uri,
                                    kind=args.kind, auditor_access=auditor_access)
        else:
            cid = self.store.register(payload, args.kind, self.principal, args.uri,
                                      auditor_access=auditor_access)
        print(cid.ref)
        return 0

    def _cmd_show(self, args: argparse.Namespace) -> int:
        contribution = self.store.fetch(self.store.resolve(args.uri), self.principal)
        policy = contribution.policy
        print(f"uri:      {contribution.id.uri}")
        print(f"hash:     {contribution.id.content_hash}")
        print(f"kind:     {contribution.kind.value} ({contribution.kind.macro_function.value})")
        print(f"owner:    {policy.owner}")
        print(f"readers:  {', '.join(sorted(policy.readers)) or '-'}")
        print(f"auditors: {'yes' if policy.auditor_access else 'no'}")
        parents = self.store.parents(contribution.id)
        if parents:
            print(f"parents:  {', '.join(parent.uri for parent in parents)}")
        try:
            text = contribution.payload.decode("utf-8")
        except UnicodeDecodeError:
            print(f"payload:  {len(contribution.payload)} bytes (binary)")
        else:
            print()
            print(text.rstrip("\n"))
        return 0

    def _cmd_chain(self, args: argparse.Namespace) -> int:
        cid = self.store.resolve(args.uri)
        self.store.fetch(cid, self.principal)
        self.emit(chain_table(self.store.chain(cid)))
        return 0

    def _cmd_grant(self, args: argparse.Namespace) -> int:
        cid = self.store.resolve(args.uri)
        policy = self.store.grant(cid, self.principal, self.store.get_principal(args.grantee))
        print(f"{cid.uri}: readers {', '.join(sorted(policy.readers))}")
        return 0

    def _cmd_principal(self, args: argparse.Namespace) -> int:
        if args.action == "add":
            principal = self.store.add_principal(args.id, args.name or "", args.auditor)
            print(f"added {principal.id}{' (auditor)' if principal.auditor else ''}")
            return 0
        table = Table(["id", "display_name", "auditor"])
        for principal in self.store.principals():
            table.add(principal.id, principal.display_name, principal.auditor)
        self.emit(table)
        return 0

    def _cmd_verify(self, args: argparse.Namespace) -> int:
        if args.all:
            findings = self.store.audit()
            for finding in findings:
                print(finding)
            if findings:
                raise IntegrityFailure(f"{len(findings)} audit finding(s)")
            print("ok")
            return 0
        if args.exec:
            record = self.metamodel.resolve_record(args.exec)
            self.metamodel.verify_closure(record)
            if self.metamodel.recompute_output_hash(record, self.principal) != record.output_hash:
                raise IntegrityFailure(f"outputs of {record.id[:12]} do not match the recorded hash")
            print("ok")
            return 0
        if not args.uri:
            raise InvalidParams("verify needs a contribution, --exec or --all")
        cid = self.store.resolve(args.uri)
        if not self.store.verify(cid):
            raise IntegrityFailure(f"{cid.uri}: payload does not match content hash")
        print("ok")
        return 0

    # -- series and reactives ----------------------------------------------

    def _cmd_series(self, args: argparse.Namespace) -> int:
        if args.action == "import":
            events = read_series_csv(Path(args.file))
            uri = args.uri or make_uri(DATASETS_NAMESPACE, _uri_name(Path(args.file).stem))
            series = register_series(self.store, events, self.principal, uri)
            print(f"{series.id.ref} ({len(series)} events)")
            return 0

        series = load_series(self.store, self.store.resolve(args.uri), self.principal)
        if args.output:
            with open(args.output, "w", encoding="utf-8", newline="") as f:
                write_series_csv(series, f)
            print(f"wrote {args.output}")
        else:
            write_series_csv(series, sys.stdout)
        return 0

    def _series(self, ref: str) -> TimeSeries:
        """A stored series by uri, or a CSV file imported on the fly."""
        if ref.startswith("fracti://"):
            return load_series(self.store, self.store.resolve(ref), self.principal)
        path = Path(ref)
        events = read_series_csv(path)
        payload_digest = canonical.digest(series_payload(events))
        uri = make_uri(DATASETS_NAMESPACE, f"{_uri_name(path.stem)}-{payload_digest[:16]}")
        return register_series(self.store, events, self.principal, uri)

    def _cmd_reactive(self, args: argparse.Namespace) -> int:
        graph = load_reactive_file(Path(args.file))
        feeds = {}
        for name, path in args.input or []:
            feeds[name] = [event.value for event in read_series_csv(Path(path))]
        watched = args.watch or graph.formulas

        table = Table(["tick", "name", "value"])
        length = max((len(values) for values in feeds.values()), default=0)
        for tick in range(length):
            for name, values in sorted(feeds.items()):
                if tick < len(values):
                    graph.set(name, tick, values[tick])
            for name in watched:
                table.add(tick, name, graph.value(name, tick))
        self.emit(table)
        logger.info("reactive evaluation: %d formula evaluations", graph.evaluations)
        return 0

    # -- flows -------------------------------------------------------------

    def _flow_contribution(self, graph: FlowGraph, name: str):
        name = _uri_name(name)
        latest = self.store.next_version(FLOWS_NAMESPACE, name) - 1
        if latest:
            cid = self.store.resolve(make_uri(FLOWS_NAMESPACE, name, latest))
            if cid.content_hash == canonical.digest(flow_payload(graph)):
                return cid
        return register_flow(self.store, graph, self.principal, make_uri(FLOWS_NAMESPACE, name, latest + 1))

    def _cmd_run(self, args: argparse.Namespace) -> int:
        graph = FlowParser().parse_file(Path(args.flow))
        settings: dict[str, Any] = {}
        if args.config:
            settings = canonical.decode(Path(args.config).read_text(encoding="utf-8"))
            if not isinstance(settings, dict):
                raise InvalidParams("run configuration must be a canonical map")

        principal = self.principal
        ensure_registered(self.store, self.registry, principal, [ref.key for ref in graph.nodes.values()])
        flow_id = self._flow_contribution(graph, Path(args.flow).stem)

        named = settings.get("bindings", {})
        bindings = {node: self.store.resolve(named.get(node) or ref.uri) for node, ref in graph.nodes.items()}
        seed = args.seed if args.seed is not None else int(settings.get("seed", self.config.run.seed))
        workers = args.workers or int(settings.get("workers", self.config.run.workers))
        config = self.metamodel.snapshot(flow_id, bindings, settings.get("params", {}), seed, workers,
                                         principal=principal)

        sources = dict(settings.get("inputs", {}))
        sources.update(dict(args.input or []))
        realtime = args.realtime or self.config.simulation.realtime
        inputs, origins = {}, {}
        for source, ref in sorted(sources.items()):
            series = self._series(str(ref))
            origins[source] = series.id
            inputs[source] = list(replay(series, config.id, realtime, self.config.simulation.speed))

        executor = FlowExecutor(self.store, self.registry, self.metamodel)
        result = executor.run(graph, inputs, config, principal, workers=workers, origins=origins)
        record = result.record
        print(f"execution   {record.id}")
        print(f"config      {config.id}")
        print(f"output_hash {record.output_hash}")
        table = Table(["node", "in", "out"])
        for node in graph.topological_order():
            stats = record.node_stats.get(node, {})
            table.add(node, stats.get("in"), stats.get("out"))
        self.emit(table)
        for cid in record.outputs:
            print(f"result      {cid.ref}")
        return 0

    def _cmd_reproduce(self, args: argparse.Namespace) -> int:
        original = self.metamodel.resolve_record(args.exec_id)
        record = self.metamodel.reproduce(original.id, self.principal, self.registry, args.workers)
        print(f"reproduced {original.id} as {record.id}")
        print(f"output_hash {record.output_hash} (match)")
        return 0

    def _snapshot_id(self, prefix: str) -> str:
        matches = [key for key in self.metamodel.snapshots() if key.startswith(prefix)]
        if len(matches) != 1 or not prefix:
            raise NotFound(f"no unique configuration snapshot for {prefix!r}")
        return matches[0]

    def _cmd_diff(self, args: argparse.Namespace) -> int:
        differences = self.metamodel.diff(self._snapshot_id(args.a), self._snapshot_id(args.b))
        if not differences:
            print("identical")
            return 0
        table = Table(["field", "left", "right"])
        for difference in differences:
            table.add(difference.field, difference.left, difference.right)
        self.emit(table)
        return 0

    def _cmd_lineage(self, args: argparse.Namespace) -> int:
        cid = self.store.resolve(args.uri)
        tree = self.metamodel.lineage(cid)
        if self.csv_path is not None:
            table = Table(["child", "parent"])
            for child, parent in tree.edges:
                table.add(child.uri, parent.uri)
            self.emit(table)
        else:
            print(render_lineage(tree, self.store))
        return 0

    # -- experiments -------------------------------------------------------

    def _show_experiment(self, experiment: Experiment) -> None:
        if experiment.id is not None:
            print(f"experiment {experiment.id.ref}")
        self.emit(Table.from_dicts(experiment.benchmark_rows()))
        for group, winners in experiment.groups.items():
            print(f"{group}: " + ", ".join(f"{metric} {label}" for metric, label in winners.items()))
        print(f"conclusion: {experiment.conclusion}")

    def _cmd_experiment(self, args: argparse.Namespace) -> int:
        if args.action == "show":
            self._show_experiment(load_experiment(self.store, self.store.resolve(args.target), self.principal))
            return 0
        definition = load_definition(Path(args.target), self.store)
        runner = ExperimentRunner(self.store, self.principal, self.registry,
                                  args.parallel or self.config.run.parallel_runs,
                                  self.config.simulation.realtime, self.config.simulation.speed)
        self._show_experiment(runner.run(definition))
        return 0

    def _cmd_showcase(self, args: argparse.Namespace) -> int:
        sweep = None
        if any(values is not None for values in (args.n, args.d, args.sigma)):
            s = self.config.showcase
            sweep = SweepParams(
                tuple(args.n if args.n is not None else s.n_set),
                tuple(args.d if args.d is not None else s.d_set),
                tuple(args.sigma if args.sigma is not None else s.sigma_set),
            )
        experiment = run_showcase(
            self.store, args.case,
            sweep=sweep,
            settings=self.config.showcase,
            registry=self.registry,
            results_dir=args.results or self.config.showcase.results_dir,
            parallel_runs=args.parallel or self.config.run.parallel_runs,
        )
        self._show_experiment(experiment)
        return 0

    # -- archives ----------------------------------------------------------

    def _cmd_export(self, args: argparse.Namespace) -> int:
        path = export_execution(self.store, args.exec_id, self.principal, Path(args.path))
        print(f"wrote {path}")
        return 0

    def _cmd_import(self, args: argparse.Namespace) -> int:
        summary = import_archive(self.store, Path(args.path))
        print(f"imported execution {summary.execution}: {summary.imported} new, "
              f"{summary.skipped} already present")
        return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fracti",
        description="FRACTI: provenance-tracked workflows for reproducible experiments",
    )
    parser.add_argument("--as", dest="principal", help="acting principal (default from settings)")
    parser.add_argument("--settings", type=Path, help="path to a config.toml file")
    parser.add_argument("--csv", type=Path, help="write the output table to this CSV file")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more log output (-vv for debug)")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("register", help="register a file as a contribution")
    p.add_argument("file", type=Path)
    p.add_argument("--kind", required=True, choices=[k.value for k in ContributionKind])
    p.add_argument("--uri", required=True)
    p.add_argument("--parent", action="append", help="parent uri (derive instead of register)")
    p.add_argument("--auditor-access", action="store_true", help="let auditors read it")

    p = commands.add_parser("show", help="show a contribution")
    p.add_argument("uri")

    p = commands.add_parser("chain", help="provenance chain of a contribution")
    p.add_argument("uri")

    p = commands.add_parser("grant", help="give another principal read access")
    p.add_argument("uri")
    p.add_argument("grantee")

    p = commands.add_parser("principal", help="manage principals")
    p.add_argument("action", choices=["add", "list"])
    p.add_argument("id", nargs="?")
    p.add_argument("--name")
    p.add_argument("--auditor", action="store_true")

    p = commands.add_parser("verify", help="check stored payloads against their hashes")
    p.add_argument("uri", nargs="?")
    p.add_argument("--all", action="store_true", help="audit the whole store")
    p.add_argument("--exec", help="verify an execution's closure and outputs")

    p = commands.add_parser("series", help="import or export a time series")
    p.add_argument("action", choices=["import", "export"])
    p.add_argument("file", nargs="?", help="CSV file to import")
    p.add_argument("--uri")
    p.add_argument("-o", "--output", type=Path)

    p = commands.add_parser("reactive", help="evaluate a .reactive formula set over series")
    p.add_argument("file", type=Path)
    p.add_argument("--input", action="append", type=_assignment, metavar="NAME=CSV")
    p.add_argument("--watch", action="append", metavar="NAME")

    p = commands.add_parser("run", help="execute a flow")
    p.add_argument("--flow", required=True, type=Path)
    p.add_argument("--config", type=Path, help="run configuration in canonical text")
    p.add_argument("--input", action="append", type=_assignment, metavar="SOURCE=SERIES")
    p.add_argument("--workers", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--realtime", action="store_true", help="pace replay by event time")

    p = commands.add_parser("reproduce", help="re-run a recorded execution")
    p.add_argument("exec_id")
    p.add_argument("--workers", type=int)

    p = commands.add_parser("diff", help="compare two configuration snapshots")
    p.add_argument("a")
    p.add_argument("b")

    p = commands.add_parser("lineage", help="lineage tree of a contribution")
    p.add_argument("uri")

    p = commands.add_parser("experiment", help="run or show an experiment")
    p.add_argument("action", choices=["run", "show"])
    p.add_argument("target", help="definition file (run) or experiment uri (show)")
    p.add_argument("--parallel", type=int)

    p = commands.add_parser("showcase", help="run use case a, b or c")
    p.add_argument("case", choices=["a", "b", "c"])
    p.add_argument("--results", type=Path, help="directory for benchmark CSVs")
    p.add_argument("--parallel", type=int)
    p.add_argument("--n", type=int, nargs="+", metavar="N", help="layer counts swept by use case c")
    p.add_argument("--d", type=float, nargs="+", metavar="D", help="walk drifts swept by use case c")
    p.add_argument("--sigma", type=float, nargs="+", metavar="SIGMA",
                   help="walk volatilities swept by use case c")

    p = commands.add_parser("export", help="export an execution's closure")
    p.add_argument("exec_id")
    p.add_argument("path", type=Path)

    p = commands.add_parser("import", help="import an exported archive")
    p.add_argument("path", type=Path)

    return parser


def setup_logging(config: Config, verbosity: int) -> None:
    level = config.log_level
    if verbosity == 1:
        level = min(level, logging.INFO)
    elif verbosity > 1:
        level = logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def load_config(settings: Path | None) -> Config:
    if settings is not None:
        return Config.load(settings)
    layout = find_store_layout(Config.load_default())
    if layout.config_path:
        return Config.load(layout.config_path)
    return Config.load_default()


def main(argv: list[str] | None = None) -> int:
    """Main entry point."""
    args = build_parser().parse_args(argv)

    try:
        config = load_config(args.settings)
        setup_logging(config, args.verbose)
        layout = find_store_layout(config)
        store = ContributionStore(layout, default_auditor_access=config.store.default_auditor_access)
        principal_id = args.principal or config.store.principal
        if not args.principal:
            try:
                store.get_principal(principal_id)
            except UnknownPrincipal:
                store.add_principal(principal_id)
        if args.command == "principal" and args.action == "add" and not args.id:
            raise InvalidParams("principal add needs an id")
        if args.command == "series" and args.action == "import" and not args.file:
            raise InvalidParams("series import needs a CSV file")
        if args.command == "series" and args.action == "export" and not args.uri:
            raise InvalidParams("series export needs --uri")
        return FractiCli(config, store, principal_id, args.csv).dispatch(args)
    except FractiError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("\nInterrupted by user", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
