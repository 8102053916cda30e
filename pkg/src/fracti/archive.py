"""Export and import of an execution's closure as a portable zip archive.

Layout of an archive::

    manifest                    canonical lines, one entry each
    objects/<content hash>      contribution payloads
    meta/<category>/<key>       snapshots and the execution record

Importing into another store verifies every digest and re-sequences the
provenance records locally, so the execution can be reproduced there.
"""

import logging
import os
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from . import canonical
from .errors import IntegrityFailure, MissingInput, NotFound, UnknownPrincipal
from .metamodel import EXECUTIONS, SNAPSHOTS, ConfigurationSnapshot, ExecutionRecord, MetaModel
from .store import (
    AccessPolicy,
    ContributionId,
    ContributionKind,
    ContributionStore,
    Principal,
    ProvenanceRecord,
)

logger = logging.getLogger(__name__)

ARCHIVE_FORMAT = 1
MANIFEST_NAME = "manifest"
_ZIP_FIXED_TIMESTAMP = (1980, 1, 1, 0, 0, 0)


@dataclass
class ArchiveContents:
    execution: str
    principals: list[Principal] = field(default_factory=list)
    contributions: list[dict[str, Any]] = field(default_factory=list)
    records: list[ProvenanceRecord] = field(default_factory=list)
    meta: list[tuple[str, str]] = field(default_factory=list)


@dataclass(frozen=True)
class ImportSummary:
    execution: str
    imported: int
    skipped: int
    meta: int


def closure(store: ContributionStore, record: ExecutionRecord) -> tuple[list[ContributionId], list[str]]:
    """Contributions and snapshot ids an execution depends on or produced."""
    metamodel = MetaModel(store)
    snapshots = []
    snapshot_id = record.config_id
    while snapshot_id and snapshot_id not in snapshots:
        snapshots.append(snapshot_id)
        try:
            snapshot_id = metamodel.load_snapshot(snapshot_id).parent or ""
        except NotFound:
            if snapshot_id == record.config_id:
                raise MissingInput(f"configuration snapshot {snapshot_id} is missing") from None
            snapshots.pop()
            break

    roots: list[ContributionId] = [*record.inputs, *record.outputs]
    for snapshot_id in snapshots:
        snapshot = metamodel.load_snapshot(snapshot_id)
        roots.append(snapshot.flow)
        roots.extend(snapshot.bindings.values())

    seen: set[ContributionId] = set()
    queue = list(roots)
    while queue:
        cid = queue.pop(0)
        if cid in seen:
            continue
        if not store.exists(cid):
            raise MissingInput(f"{cid.uri} is missing from the store")
        seen.add(cid)
        queue.extend(store.parents(cid))
    return _parents_first(store, seen), snapshots


def _parents_first(store: ContributionStore, cids: Iterable[ContributionId]) -> list[ContributionId]:
    ordered: list[ContributionId] = []
    placed: set[ContributionId] = set()

    def place(cid: ContributionId) -> None:
        if cid in placed:
            return
        placed.add(cid)
        for parent in store.parents(cid):
            place(parent)
        ordered.append(cid)

    for cid in sorted(cids, key=lambda c: c.uri):
        place(cid)
    return ordered


def export_execution(store: ContributionStore, exec_id: str, principal: Principal, path: Path) -> Path:
    """Write the closure of an execution to `path`. Needs read access to all of it."""
    metamodel = MetaModel(store)
    record = metamodel.resolve_record(exec_id)
    cids, snapshots = closure(store, record)

    entries: dict[str, bytes] = {}
    manifest: list[dict[str, Any]] = [
        {"entry": "archive", "execution": record.id, "format": ARCHIVE_FORMAT},
    ]
    owners: set[str] = set()
    for cid in cids:
        contribution = store.fetch(cid, principal)
        entries[f"objects/{cid.content_hash}"] = contribution.payload
        owners.add(contribution.policy.owner)
        owners.update(contribution.policy.readers)
        manifest.append({
            "entry": "contribution",
            "hash": cid.content_hash,
            "kind": contribution.kind.value,
            "policy": contribution.policy.to_tree(),
            "uri": cid.uri,
        })
        manifest.extend({"entry": "record", "record": r.to_tree()} for r in contribution.provenance)

    for principal_id in sorted(owners):
        manifest.append({"entry": "principal", "principal": store.get_principal(principal_id).to_tree()})

    for category, key in [*((SNAPSHOTS, s) for s in snapshots), (EXECUTIONS, record.id)]:
        text = store.read_meta(category, key)
        entries[f"meta/{category}/{key}"] = text.encode("utf-8")
        manifest.append({"category": category, "entry": "meta", "key": key})

    entries[MANIFEST_NAME] = "".join(canonical.encode(row) + "\n" for row in manifest).encode("utf-8")
    path = Path(path)
    _write_deterministic_zip(path, entries)
    logger.info("exported execution %s (%d contributions) to %s", record.id[:12], len(cids), path)
    return path


def _write_deterministic_zip(output_path: Path, entries: dict[str, bytes]) -> None:
    temp_path = output_path.with_name(f".{output_path.name}.tmp")
    try:
        with zipfile.ZipFile(temp_path, mode="w", compression=zipfile.ZIP_DEFLATED) as archive:
            for name in sorted(entries):
                info = zipfile.ZipInfo(name)
                info.date_time = _ZIP_FIXED_TIMESTAMP
                info.compress_type = zipfile.ZIP_DEFLATED
                info.external_attr = (0o100644 & 0xFFFF) << 16
                archive.writestr(info, entries[name])
        os.replace(temp_path, output_path)
    finally:
        if temp_path.exists():
            temp_path.unlink()


def read_archive(path: Path) -> tuple[ArchiveContents, dict[str, bytes]]:
    try:
        with zipfile.ZipFile(path) as archive:
            files = {name: archive.read(name) for name in archive.namelist()}
    except (OSError, zipfile.BadZipFile) as e:
        raise IntegrityFailure(f"cannot read archive {path}: {e}") from e
    if MANIFEST_NAME not in files:
        raise IntegrityFailure(f"archive {path} has no manifest")

    contents = None
    rows = [canonical.decode(line) for line in files[MANIFEST_NAME].decode("utf-8").splitlines() if line.strip()]
    for row in rows:
        entry = row.get("entry")
        if entry == "archive":
            if row.get("format") != ARCHIVE_FORMAT:
                raise IntegrityFailure(f"unsupported archive format {row.get('format')!r}")
            contents = ArchiveContents(execution=row["execution"])
    if contents is None:
        raise IntegrityFailure("manifest lacks the archive entry")

    for row in rows:
        entry = row.get("entry")
        if entry == "contribution":
            contents.contributions.append(row)
        elif entry == "record":
            contents.records.append(ProvenanceRecord.from_tree(row["record"]))
        elif entry == "principal":
            contents.principals.append(Principal.from_tree(row["principal"]))
        elif entry == "meta":
            contents.meta.append((row["category"], row["key"]))
    return contents, files


def import_archive(store: ContributionStore, path: Path) -> ImportSummary:
    """Adopt an exported closure. Every payload and meta object is checked first."""
    contents, files = read_archive(Path(path))

    payloads: dict[str, bytes] = {}
    for row in contents.contributions:
        payload = files.get(f"objects/{row['hash']}")
        if payload is None:
            raise IntegrityFailure(f"archive lacks the payload of {row['uri']}")
        if canonical.digest(payload) != row["hash"]:
            raise IntegrityFailure(f"payload of {row['uri']} does not match its hash")
        payloads[row["uri"]] = payload

    meta_texts: dict[tuple[str, str], str] = {}
    for category, key in contents.meta:
        data = files.get(f"meta/{category}/{key}")
        if data is None:
            raise IntegrityFailure(f"archive lacks {category} object {key}")
        text = data.decode("utf-8")
        _check_meta(category, key, text)
        meta_texts[(category, key)] = text
    if (EXECUTIONS, contents.execution) not in meta_texts:
        raise IntegrityFailure(f"archive lacks the execution record {contents.execution}")

    for principal in contents.principals:
        try:
            store.get_principal(principal.id)
        except UnknownPrincipal:
            store.add_principal(principal.id, principal.display_name, principal.auditor)

    by_subject: dict[str, list[ProvenanceRecord]] = {}
    for record in contents.records:
        by_subject.setdefault(record.subject.uri, []).append(record)

    imported = skipped = 0
    for row in contents.contributions:
        cid = ContributionId(row["uri"], row["hash"])
        added = store.import_contribution(
            cid,
            ContributionKind(row["kind"]),
            payloads[row["uri"]],
            AccessPolicy.from_tree(row["policy"]),
            by_subject.get(cid.uri, []),
        )
        if added:
            imported += 1
        else:
            skipped += 1

    for (category, key), text in meta_texts.items():
        store.write_meta(category, key, text)

    logger.info("imported execution %s: %d new, %d already present",
                contents.execution[:12], imported, skipped)
    return ImportSummary(contents.execution, imported, skipped, len(meta_texts))


def _check_meta(category: str, key: str, text: str) -> None:
    tree = canonical.decode(text)
    if category == SNAPSHOTS:
        actual = ConfigurationSnapshot.from_tree(tree).id
    elif category == EXECUTIONS:
        record = ExecutionRecord.from_tree(tree)
        actual = canonical.tree_digest(record.to_tree(with_id=False))
    else:
        raise IntegrityFailure(f"unexpected meta category {category!r}")
    if actual != key:
        raise IntegrityFailure(f"{category} object {key} does not match its content")
