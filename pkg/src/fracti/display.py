"""Plain-text rendering for the command line: tables, lineage trees and CSV."""

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

from .metamodel import LineageTree
from .store import ContributionId, ContributionStore, ProvenanceRecord

MAX_CELL_WIDTH = 60


def _cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class Table:
    """Rows under named columns, printable as text or writable as CSV."""
    columns: list[str]
    rows: list[list[Any]] = field(default_factory=list)

    def add(self, *values: Any) -> None:
        self.rows.append(list(values))

    @classmethod
    def from_dicts(cls, rows: Sequence[dict[str, Any]], columns: Sequence[str] | None = None) -> "Table":
        columns = list(columns or (rows[0] if rows else []))
        return cls(columns, [[row.get(column) for column in columns] for row in rows])

    def render(self) -> str:
        cells = [[_cell(v) for v in row] for row in self.rows]
        widths = [len(column) for column in self.columns]
        for row in cells:
            for i, text in enumerate(row):
                widths[i] = min(MAX_CELL_WIDTH, max(widths[i], len(text)))

        def line(values: Sequence[str]) -> str:
            parts = []
            for text, width in zip(values, widths):
                if len(text) > width:
                    text = text[:width - 1] + "…"
                parts.append(text.ljust(width))
            return "  ".join(parts).rstrip()

        out = [line(self.columns), line(["-" * w for w in widths])]
        out.extend(line(row) for row in cells)
        return "\n".join(out)

    def write_csv(self, path: Path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(self.columns)
            for row in self.rows:
                writer.writerow([_cell(v) for v in row])


def chain_table(records: Iterable[ProvenanceRecord]) -> Table:
    table = Table(["seq", "event", "principal", "subject", "parents", "detail"])
    for record in records:
        table.add(record.seq, record.event.value, record.principal, record.subject.uri,
                  " ".join(parent.uri for parent in record.parents), record.detail)
    return table


def render_lineage(tree: LineageTree, store: ContributionStore | None = None) -> str:
    """Draw the lineage as an indented tree, root first.

    A node reached again through another path is printed once more but
    not expanded (marked with `*`).
    """
    lines: list[str] = []
    expanded: set[ContributionId] = set()

    def label(cid: ContributionId) -> str:
        if store is None:
            return cid.uri
        return f"{cid.uri} [{store.kind_of(cid).value}]"

    def walk(cid: ContributionId, prefix: str, last: bool, depth: int) -> None:
        connector = "" if depth == 0 else ("└── " if last else "├── ")
        repeat = cid in expanded
        lines.append(f"{prefix}{connector}{label(cid)}{' *' if repeat else ''}")
        if repeat:
            return
        expanded.add(cid)
        parents = tree.parents_of(cid)
        child_prefix = prefix if depth == 0 else prefix + ("    " if last else "│   ")
        for i, parent in enumerate(parents):
            walk(parent, child_prefix, i == len(parents) - 1, depth + 1)

    walk(tree.root, "", True, 0)
    if tree.executions:
        lines.append("")
        lines.append("executions: " + ", ".join(e[:12] for e in tree.executions))
    if tree.snapshots:
        lines.append("snapshots:  " + ", ".join(s[:12] for s in tree.snapshots))
    return "\n".join(lines)
