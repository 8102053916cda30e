"""Content-addressed, access-controlled contribution store with provenance."""

import fcntl
import logging
import re
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterator, Sequence

from . import canonical
from .errors import (
    AccessDenied,
    DuplicatePrincipal,
    EmptyPayload,
    IntegrityFailure,
    MalformedUri,
    NotFound,
    StoreLocked,
    UnknownParent,
    UnknownPrincipal,
    UriConflict,
)
from .layout import StoreLayout, write_atomic

logger = logging.getLogger(__name__)

URI_SCHEME = "fracti://"
URI_PATTERN = re.compile(
    r"fracti://(?P<namespace>[A-Za-z0-9_.\-]+)/(?P<name>[A-Za-z0-9_.\-]+)@(?P<version>\d+)\Z"
)
HASH_PATTERN = re.compile(r"[0-9a-f]{64}\Z")


def parse_uri(uri: str) -> tuple[str, str, int]:
    """Split `fracti://<namespace>/<name>@<version>` into its parts."""
    match = URI_PATTERN.match(uri) if isinstance(uri, str) else None
    if not match:
        raise MalformedUri(f"malformed contribution uri: {uri!r}")
    version = int(match.group("version"))
    if version < 1:
        raise MalformedUri(f"version must be >= 1: {uri!r}")
    return match.group("namespace"), match.group("name"), version


def make_uri(namespace: str, name: str, version: int = 1) -> str:
    uri = f"{URI_SCHEME}{namespace}/{name}@{version}"
    parse_uri(uri)
    return uri


@dataclass(frozen=True, order=True)
class ContributionId:
    """Identification of a contribution: its URI plus its content hash."""
    uri: str
    content_hash: str

    @property
    def namespace(self) -> str:
        return parse_uri(self.uri)[0]

    @property
    def name(self) -> str:
        return parse_uri(self.uri)[1]

    @property
    def version(self) -> int:
        return parse_uri(self.uri)[2]

    @property
    def ref(self) -> str:
        """Self-contained textual reference `uri#hash`."""
        return f"{self.uri}#{self.content_hash}"

    @classmethod
    def from_ref(cls, ref: str) -> "ContributionId":
        uri, sep, content_hash = ref.partition("#")
        parse_uri(uri)
        if not sep or not HASH_PATTERN.match(content_hash):
            raise MalformedUri(f"malformed contribution reference: {ref!r}")
        return cls(uri=uri, content_hash=content_hash)

    def __str__(self) -> str:
        return self.uri


class MacroFunction(Enum):
    STORAGE = "storage"
    PROCESSING = "processing"
    VISUALIZATION = "visualization"


class ContributionKind(Enum):
    """Taxonomy of contributions."""
    DATASET = "dataset"
    PROCESSOR = "processor"
    MODEL = "model"
    HYPOTHESIS = "hypothesis"
    FLOW_DEFINITION = "flow_definition"
    RESULT = "result"
    EXPERIMENT = "experiment"

    @property
    def macro_function(self) -> MacroFunction:
        return MACRO_FUNCTIONS[self]


MACRO_FUNCTIONS = {
    ContributionKind.DATASET: MacroFunction.STORAGE,
    ContributionKind.RESULT: MacroFunction.STORAGE,
    ContributionKind.PROCESSOR: MacroFunction.PROCESSING,
    ContributionKind.MODEL: MacroFunction.PROCESSING,
    ContributionKind.FLOW_DEFINITION: MacroFunction.PROCESSING,
    ContributionKind.HYPOTHESIS: MacroFunction.STORAGE,
    ContributionKind.EXPERIMENT: MacroFunction.STORAGE,
}


@dataclass(frozen=True)
class Principal:
    """An actor in the store. Authentication is asserted, not verified."""
    id: str
    display_name: str = ""
    auditor: bool = False

    def to_tree(self) -> dict:
        return {"auditor": self.auditor, "display_name": self.display_name, "id": self.id}

    @classmethod
    def from_tree(cls, tree: dict) -> "Principal":
        return cls(id=tree["id"], display_name=tree.get("display_name", ""),
                   auditor=bool(tree.get("auditor", False)))


@dataclass(frozen=True)
class AccessPolicy:
    owner: str
    readers: frozenset[str] = frozenset()
    auditor_access: bool = False

    def can_read(self, principal: Principal) -> bool:
        if principal.id == self.owner or principal.id in self.readers:
            return True
        return self.auditor_access and principal.auditor

    def can_write(self, principal: Principal) -> bool:
        return principal.id == self.owner

    def to_tree(self) -> dict:
        return {
            "auditor_access": self.auditor_access,
            "owner": self.owner,
            "readers": sorted(self.readers),
        }

    @classmethod
    def from_tree(cls, tree: dict) -> "AccessPolicy":
        return cls(owner=tree["owner"], readers=frozenset(tree.get("readers", [])),
                   auditor_access=bool(tree.get("auditor_access", False)))


class ProvenanceEvent(Enum):
    CREATED = "created"
    DERIVED = "derived"
    TRANSFERRED = "transferred"
    EXECUTED_WITH = "executed_with"


@dataclass(frozen=True)
class ProvenanceRecord:
    """One event in the chronology of a contribution."""
    seq: int
    event: ProvenanceEvent
    timestamp: int  # informational; ordering is by seq
    principal: str
    subject: ContributionId
    parents: tuple[ContributionId, ...] = ()
    detail: str = ""

    def to_tree(self) -> dict:
        return {
            "detail": self.detail,
            "event": self.event.value,
            "parents": [parent.ref for parent in self.parents],
            "principal": self.principal,
            "seq": self.seq,
            "subject": self.subject.ref,
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_tree(cls, tree: dict) -> "ProvenanceRecord":
        return cls(
            seq=int(tree["seq"]),
            event=ProvenanceEvent(tree["event"]),
            timestamp=int(tree["timestamp"]),
            principal=tree["principal"],
            subject=ContributionId.from_ref(tree["subject"]),
            parents=tuple(ContributionId.from_ref(ref) for ref in tree.get("parents", [])),
            detail=tree.get("detail", ""),
        )


@dataclass(frozen=True)
class Contribution:
    id: ContributionId
    kind: ContributionKind
    payload: bytes
    policy: AccessPolicy
    provenance: tuple[ProvenanceRecord, ...] = field(default_factory=tuple)

    @property
    def text(self) -> str:
        return self.payload.decode("utf-8")


def _now_ms() -> int:
    return time.time_ns() // 1_000_000


class ContributionStore:
    """Store of contributions under one root directory.

    Mutations go through a single writer (a process-local lock plus an
    exclusive lock on the store's lock file). Reads need no lock and
    return immutable values.
    """

    def __init__(self, layout: StoreLayout, *, clock: Callable[[], int] | None = None,
                 default_auditor_access: bool = False):
        self.layout = layout
        self.default_auditor_access = default_auditor_access
        self._clock = clock or _now_ms
        self._lock = threading.RLock()
        self._lock_depth = 0
        self._lock_file = None

        self._principals: dict[str, Principal] = {}
        self._refs: dict[str, ContributionId] = {}
        self._kinds: dict[str, ContributionKind] = {}
        self._policies: dict[str, AccessPolicy] = {}
        self._records: list[ProvenanceRecord] = []
        self._by_subject: dict[str, list[ProvenanceRecord]] = {}

        if not layout.is_initialized:
            layout.init()
        self._load()

    @classmethod
    def open(cls, root: Path, **kwargs) -> "ContributionStore":
        return cls(StoreLayout(root), **kwargs)

    @property
    def root(self) -> Path:
        return self.layout.root_path

    def now(self) -> int:
        """Current store clock in milliseconds."""
        return self._clock()

    # -- loading -----------------------------------------------------------

    def _load(self) -> None:
        """Load the canonical-text tables into memory."""
        for row in canonical.read_table(self.layout.principals_path):
            principal = Principal.from_tree(row)
            self._principals[principal.id] = principal

        for row in canonical.read_table(self.layout.catalog_path):
            uri = row["uri"]
            namespace, name, version = parse_uri(uri)
            ref_file = self.layout.ref_path(namespace, name, version)
            content_hash = row["hash"]
            if ref_file.exists():
                content_hash = ref_file.read_text(encoding="utf-8").strip()
            self._refs[uri] = ContributionId(uri, content_hash)
            self._kinds[uri] = ContributionKind(row["kind"])

        for row in canonical.read_table(self.layout.policies_path):
            self._policies[row["subject"]] = AccessPolicy.from_tree(row["policy"])

        for row in canonical.read_table(self.layout.provenance_path):
            self._index_record(ProvenanceRecord.from_tree(row))

        logger.debug("loaded store %s: %d contributions, %d records",
                     self.root, len(self._refs), len(self._records))

    def _index_record(self, record: ProvenanceRecord) -> None:
        self._records.append(record)
        self._by_subject.setdefault(record.subject.uri, []).append(record)

    # -- single writer -----------------------------------------------------

    @contextmanager
    def writer(self) -> Iterator[None]:
        """Hold the store's single-writer lock for a group of mutations."""
        with self._lock:
            if self._lock_depth == 0:
                lock_file = open(self.layout.lock_path, "a+")
                try:
                    fcntl.flock(lock_file, fcntl.LOCK_EX | fcntl.LOCK_NB)
                except BlockingIOError as e:
                    lock_file.close()
                    raise StoreLocked(f"store {self.root} is locked by another process") from e
                self._lock_file = lock_file
            self._lock_depth += 1
            try:
                yield
            finally:
                self._lock_depth -= 1
                if self._lock_depth == 0:
                    fcntl.flock(self._lock_file, fcntl.LOCK_UN)
                    self._lock_file.close()
                    self._lock_file = None

    # -- principals --------------------------------------------------------

    def add_principal(self, principal_id: str, display_name: str = "",
                      auditor: bool = False) -> Principal:
        """Add a principal. Re-adding an identical principal is a no-op."""
        if not principal_id or not principal_id.strip():
            raise UnknownPrincipal("principal id must be non-empty")
        principal = Principal(principal_id, display_name or principal_id, auditor)
        with self.writer():
            existing = self._principals.get(principal_id)
            if existing is not None:
                if existing == principal:
                    return existing
                raise DuplicatePrincipal(f"principal {principal_id!r} already exists")
            canonical.append_row(self.layout.principals_path, principal.to_tree())
            self._principals[principal_id] = principal
        logger.info("added principal %s", principal_id)
        return principal

    def get_principal(self, principal_id: str) -> Principal:
        try:
            return self._principals[principal_id]
        except KeyError:
            raise UnknownPrincipal(f"unknown principal {principal_id!r}") from None

    def principals(self) -> list[Principal]:
        with self._lock:
            return sorted(self._principals.values(), key=lambda p: p.id)

    def _require_principal(self, principal: Principal) -> None:
        if self._principals.get(principal.id) != principal:
            raise UnknownPrincipal(f"unknown principal {principal.id!r}")

    # -- lookups -----------------------------------------------------------

    def resolve(self, uri: str) -> ContributionId:
        """Resolve a URI (or a `uri#hash` reference) to its ContributionId."""
        if "#" in uri:
            cid = ContributionId.from_ref(uri)
            self._require(cid)
            return cid
        parse_uri(uri)
        try:
            return self._refs[uri]
        except KeyError:
            raise NotFound(f"no contribution at {uri}") from None

    def exists(self, cid: ContributionId) -> bool:
        return self._refs.get(cid.uri) == cid

    def _require(self, cid: ContributionId) -> None:
        if not self.exists(cid):
            raise NotFound(f"no contribution {cid.ref}")

    def kind_of(self, cid: ContributionId) -> ContributionKind:
        self._require(cid)
        return self._kinds[cid.uri]

    def policy_of(self, cid: ContributionId) -> AccessPolicy:
        self._require(cid)
        return self._policies[cid.uri]

    def contributions(self, owner: str | None = None,
                      kind: ContributionKind | None = None) -> list[ContributionId]:
        result = []
        with self._lock:
            for uri in sorted(self._refs):
                if owner is not None and self._policies[uri].owner != owner:
                    continue
                if kind is not None and self._kinds[uri] != kind:
                    continue
                result.append(self._refs[uri])
        return result

    def next_version(self, namespace: str, name: str) -> int:
        prefix = f"{URI_SCHEME}{namespace}/{name}@"
        with self._lock:
            versions = [parse_uri(uri)[2] for uri in self._refs if uri.startswith(prefix)]
        return max(versions, default=0) + 1

    def records(self) -> list[ProvenanceRecord]:
        with self._lock:
            return list(self._records)

    def parents(self, cid: ContributionId) -> tuple[ContributionId, ...]:
        """Derivation parents of a contribution (empty for created ones)."""
        self._require(cid)
        with self._lock:
            history = list(self._by_subject.get(cid.uri, ()))
        for record in history:
            if record.event == ProvenanceEvent.DERIVED:
                return record.parents
        return ()

    # -- operations --------------------------------------------------------

    def register(self, payload: bytes, kind: ContributionKind | str, principal: Principal,
                 uri: str, *, auditor_access: bool | None = None) -> ContributionId:
        """Register a new contribution; idempotent for identical (uri, payload)."""
        kind = ContributionKind(kind)
        parse_uri(uri)
        if not payload:
            raise EmptyPayload(f"empty payload for {uri}")
        content_hash = canonical.digest(payload)

        with self.writer():
            self._require_principal(principal)
            existing = self._existing(uri, content_hash)
            if existing is not None:
                return existing

            cid = ContributionId(uri, content_hash)
            self._persist(cid, payload, kind, principal, auditor_access)
            self._append_record(ProvenanceEvent.CREATED, principal.id, cid, ())
        logger.info("registered %s (%s)", uri, kind.value)
        return cid

    def derive(self, parent_ids: Sequence[ContributionId], payload: bytes, principal: Principal,
               uri: str, *, kind: ContributionKind | str | None = None,
               auditor_access: bool | None = None) -> ContributionId:
        """Register a contribution derived from existing ones.

        The kind defaults to the kind of the first parent.
        """
        parent_ids = tuple(parent_ids)
        if not parent_ids:
            raise UnknownParent("a derived contribution needs at least one parent")
        parse_uri(uri)
        if not payload:
            raise EmptyPayload(f"empty payload for {uri}")
        content_hash = canonical.digest(payload)

        with self.writer():
            self._require_principal(principal)
            for parent in parent_ids:
                if not self.exists(parent):
                    raise UnknownParent(f"unknown parent {parent.ref}")
                if not self._policies[parent.uri].can_read(principal):
                    raise AccessDenied(f"{principal.id} cannot read parent {parent.uri}")

            existing = self._existing(uri, content_hash)
            if existing is not None:
                return existing

            resolved_kind = ContributionKind(kind) if kind else self._kinds[parent_ids[0].uri]
            cid = ContributionId(uri, content_hash)
            self._persist(cid, payload, resolved_kind, principal, auditor_access)
            self._append_record(ProvenanceEvent.DERIVED, principal.id, cid, parent_ids)
        logger.info("derived %s from %s", uri, ", ".join(p.uri for p in parent_ids))
        return cid

    def fetch(self, cid: ContributionId, principal: Principal) -> Contribution:
        self._require(cid)
        policy = self._policies[cid.uri]
        if not policy.can_read(principal):
            raise AccessDenied(f"{principal.id} cannot read {cid.uri}")
        return Contribution(
            id=cid,
            kind=self._kinds[cid.uri],
            payload=self._read_object(cid),
            policy=policy,
            provenance=tuple(self.chain(cid)),
        )

    def verify(self, cid: ContributionId) -> bool:
        """True iff the stored payload still hashes to the id's content hash."""
        self._require(cid)
        path = self.layout.object_path(cid.content_hash)
        try:
            data = path.read_bytes()
        except OSError:
            return False
        return canonical.digest(data) == cid.content_hash

    def chain(self, cid: ContributionId) -> list[ProvenanceRecord]:
        """Provenance records of this subject, root first."""
        self._require(cid)
        with self._lock:
            return sorted(self._by_subject.get(cid.uri, []), key=lambda r: r.seq)

    def grant(self, cid: ContributionId, owner: Principal, grantee: Principal) -> AccessPolicy:
        """Add `grantee` to the readers of a contribution owned by `owner`."""
        with self.writer():
            self._require(cid)
            self._require_principal(owner)
            self._require_principal(grantee)
            policy = self._policies[cid.uri]
            if not policy.can_write(owner):
                raise AccessDenied(f"{owner.id} does not own {cid.uri}")
            if grantee.id == policy.owner or grantee.id in policy.readers:
                return policy

            updated = AccessPolicy(policy.owner, policy.readers | {grantee.id}, policy.auditor_access)
            self._policies[cid.uri] = updated
            self._write_policies()
            self._append_record(ProvenanceEvent.TRANSFERRED, owner.id, cid, (),
                                detail=f"read granted to {grantee.id}")
        logger.info("granted %s read access to %s", grantee.id, cid.uri)
        return updated

    def record_event(self, event: ProvenanceEvent, principal: Principal, subject: ContributionId,
                     parents: Sequence[ContributionId] = (), detail: str = "") -> ProvenanceRecord:
        """Append a provenance record for an existing contribution."""
        with self.writer():
            self._require(subject)
            self._require_principal(principal)
            return self._append_record(event, principal.id, subject, tuple(parents), detail)

    # -- meta-model objects ------------------------------------------------

    def write_meta(self, category: str, key: str, text: str) -> None:
        with self.writer():
            path = self.layout.meta_file(category, key)
            if not path.exists():
                write_atomic(path, text.encode("utf-8"))

    def read_meta(self, category: str, key: str) -> str:
        path = self.layout.meta_file(category, key)
        try:
            return path.read_text(encoding="utf-8")
        except FileNotFoundError:
            raise NotFound(f"no {category} object {key}") from None

    def has_meta(self, category: str, key: str) -> bool:
        return self.layout.meta_file(category, key).exists()

    def list_meta(self, category: str) -> list[str]:
        directory = self.layout.meta_path / category
        if not directory.is_dir():
            return []
        return sorted(p.name for p in directory.iterdir() if not p.name.startswith("."))

    # -- import ------------------------------------------------------------

    def import_contribution(self, cid: ContributionId, kind: ContributionKind, payload: bytes,
                            policy: AccessPolicy, records: Sequence[ProvenanceRecord]) -> bool:
        """Adopt a contribution from another store, keeping its id.

        Records are re-sequenced locally. Returns False if the contribution
        was already present.
        """
        if canonical.digest(payload) != cid.content_hash:
            raise IntegrityFailure(f"payload of {cid.uri} does not match its hash")
        with self.writer():
            existing = self._existing(cid.uri, cid.content_hash)
            if existing is not None:
                return False
            for owner_id in (policy.owner, *policy.readers):
                self.get_principal(owner_id)
            self._write_object(cid, payload, kind)
            self._policies[cid.uri] = policy
            self._write_policies()
            for record in sorted(records, key=lambda r: r.seq):
                self._append_record(record.event, record.principal, cid, record.parents,
                                    record.detail, timestamp=record.timestamp)
        logger.info("imported %s", cid.uri)
        return True

    # -- audit -------------------------------------------------------------

    def audit(self) -> list[str]:
        """Check completeness and integrity of every stored contribution."""
        findings = []
        for expected_seq, record in enumerate(self.records()):
            if record.seq != expected_seq:
                findings.append(f"provenance sequence gap at {expected_seq} (found {record.seq})")
                break

        with self._lock:
            refs = sorted(self._refs.items())
        for uri, cid in refs:
            if uri not in self._kinds:
                findings.append(f"{uri}: missing classification")
            if uri not in self._policies:
                findings.append(f"{uri}: missing access policy")
            records = self._by_subject.get(uri, [])
            if not records:
                findings.append(f"{uri}: no provenance")
            elif records[0].event not in (ProvenanceEvent.CREATED, ProvenanceEvent.DERIVED):
                findings.append(f"{uri}: provenance does not start with creation")
            if not self.verify(cid):
                findings.append(f"{uri}: payload does not match content hash")
        return findings

    # -- internals ---------------------------------------------------------

    def _existing(self, uri: str, content_hash: str) -> ContributionId | None:
        existing = self._refs.get(uri)
        if existing is None:
            return None
        if existing.content_hash == content_hash:
            return existing
        raise UriConflict(f"{uri} is already bound to a different payload")

    def _persist(self, cid: ContributionId, payload: bytes, kind: ContributionKind,
                 principal: Principal, auditor_access: bool | None) -> None:
        if auditor_access is None:
            auditor_access = self.default_auditor_access
        self._write_object(cid, payload, kind)
        self._policies[cid.uri] = AccessPolicy(principal.id, frozenset(), auditor_access)
        self._write_policies()

    def _write_object(self, cid: ContributionId, payload: bytes, kind: ContributionKind) -> None:
        object_path = self.layout.object_path(cid.content_hash)
        if not object_path.exists():
            write_atomic(object_path, payload)
        namespace, name, version = parse_uri(cid.uri)
        write_atomic(self.layout.ref_path(namespace, name, version),
                     (cid.content_hash + "\n").encode("utf-8"))
        canonical.append_row(self.layout.catalog_path,
                             {"hash": cid.content_hash, "kind": kind.value, "uri": cid.uri})
        self._refs[cid.uri] = cid
        self._kinds[cid.uri] = kind

    def _write_policies(self) -> None:
        lines = [
            canonical.encode({"policy": policy.to_tree(), "subject": uri}) + "\n"
            for uri, policy in sorted(self._policies.items())
        ]
        write_atomic(self.layout.policies_path, "".join(lines).encode("utf-8"))

    def _append_record(self, event: ProvenanceEvent, principal_id: str, subject: ContributionId,
                       parents: tuple[ContributionId, ...], detail: str = "",
                       timestamp: int | None = None) -> ProvenanceRecord:
        record = ProvenanceRecord(
            seq=len(self._records),
            event=event,
            timestamp=self._clock() if timestamp is None else timestamp,
            principal=principal_id,
            subject=subject,
            parents=parents,
            detail=detail,
        )
        canonical.append_row(self.layout.provenance_path, record.to_tree())
        self._index_record(record)
        return record

    def _read_object(self, cid: ContributionId) -> bytes:
        try:
            return self.layout.object_path(cid.content_hash).read_bytes()
        except OSError as e:
            raise IntegrityFailure(f"payload of {cid.uri} is missing: {e}") from e
