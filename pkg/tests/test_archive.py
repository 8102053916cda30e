"""Tests for exporting and importing execution archives."""

import zipfile

import pytest

from fracti import canonical
from fracti.archive import MANIFEST_NAME, closure, export_execution, import_archive, read_archive
from fracti.errors import AccessDenied, IntegrityFailure
from fracti.executor import FlowExecutor
from fracti.flow import bind
from fracti.metamodel import MetaModel
from fracti.store import ContributionStore

PIPELINE = "node a = src@1\nnode b = jitter@1\nnode c = sink@1\na | b | c\n"


@pytest.fixture
def executed(store, alice, flow_setup):
    graph, flow_id, bindings = flow_setup(PIPELINE, alice)
    metamodel = MetaModel(store)
    base = metamodel.snapshot(flow_id, bindings, principal=alice)
    config = metamodel.snapshot(flow_id, bindings, {"b.sigma": 0.5}, seed=12, parent=base.id,
                                principal=alice)
    inputs = {"a": bind([{"value": float(i)} for i in range(8)], config.id)}
    return FlowExecutor(store, metamodel=metamodel).run(graph, inputs, config, alice).record


def rewrite(path, name, data):
    with zipfile.ZipFile(path) as archive:
        entries = {n: archive.read(n) for n in archive.namelist()}
    entries[name] = data
    with zipfile.ZipFile(path, "w") as archive:
        for n, content in entries.items():
            archive.writestr(n, content)


class TestClosure:
    """Tests for collecting what an execution depends on."""

    def test_parents_come_first(self, store, executed):
        cids, snapshots = closure(store, executed)
        positions = {cid: i for i, cid in enumerate(cids)}
        for cid in cids:
            for parent in store.parents(cid):
                assert positions[parent] < positions[cid]
        assert set(executed.outputs) <= set(cids)
        assert len(snapshots) == 2
        assert snapshots[0] == executed.config_id


class TestExport:
    """Tests for writing archives."""

    def test_deterministic(self, store, alice, executed, tmp_path):
        first = export_execution(store, executed.id, alice, tmp_path / "one.zip")
        second = export_execution(store, executed.id[:12], alice, tmp_path / "two.zip")
        assert first.read_bytes() == second.read_bytes()

    def test_manifest(self, store, alice, executed, tmp_path):
        path = export_execution(store, executed.id, alice, tmp_path / "run.zip")
        contents, files = read_archive(path)
        assert contents.execution == executed.id
        assert [p.id for p in contents.principals] == ["alice"]
        assert {(c, k) for c, k in contents.meta} >= {("executions", executed.id)}
        for row in contents.contributions:
            assert canonical.digest(files[f"objects/{row['hash']}"]) == row["hash"]

    def test_needs_read_access(self, store, bob, executed, tmp_path):
        with pytest.raises(AccessDenied):
            export_execution(store, executed.id, bob, tmp_path / "run.zip")


class TestImport:
    """Tests for adopting archives into other stores."""

    def test_reproduce_in_fresh_store(self, store, alice, executed, tmp_path):
        path = export_execution(store, executed.id, alice, tmp_path / "run.zip")
        other = ContributionStore.open(tmp_path / "other")
        summary = import_archive(other, path)

        assert summary.execution == executed.id
        assert summary.skipped == 0
        assert summary.meta == 3
        assert other.audit() == []
        assert [r.seq for r in other.records()] == list(range(len(other.records())))

        again = MetaModel(other).reproduce(executed.id, other.get_principal("alice"))
        assert again.output_hash == executed.output_hash
        assert again.outputs == executed.outputs

    def test_import_twice_skips(self, store, alice, executed, tmp_path):
        path = export_execution(store, executed.id, alice, tmp_path / "run.zip")
        other = ContributionStore.open(tmp_path / "other")
        first = import_archive(other, path)
        second = import_archive(other, path)
        assert second.imported == 0
        assert second.skipped == first.imported

    def test_import_into_origin_is_noop(self, store, alice, executed, tmp_path):
        path = export_execution(store, executed.id, alice, tmp_path / "run.zip")
        before = len(store.records())
        assert import_archive(store, path).imported == 0
        assert len(store.records()) == before

    def test_tampered_payload_rejected(self, store, alice, executed, tmp_path):
        path = export_execution(store, executed.id, alice, tmp_path / "run.zip")
        contents, _ = read_archive(path)
        rewrite(path, f"objects/{contents.contributions[0]['hash']}", b"forged")
        other = ContributionStore.open(tmp_path / "other")
        with pytest.raises(IntegrityFailure):
            import_archive(other, path)
        assert other.records() == []

    def test_tampered_record_rejected(self, store, alice, executed, tmp_path):
        path = export_execution(store, executed.id, alice, tmp_path / "run.zip")
        _, files = read_archive(path)
        name = f"meta/executions/{executed.id}"
        tree = canonical.decode(files[name])
        tree["output_hash"] = "0" * 64
        rewrite(path, name, canonical.encode(tree).encode("utf-8"))
        with pytest.raises(IntegrityFailure):
            import_archive(ContributionStore.open(tmp_path / "other"), path)

    def test_not_an_archive(self, tmp_path):
        path = tmp_path / "junk.zip"
        path.write_bytes(b"not a zip")
        with pytest.raises(IntegrityFailure):
            import_archive(ContributionStore.open(tmp_path / "other"), path)

    def test_missing_manifest(self, tmp_path):
        path = tmp_path / "empty.zip"
        with zipfile.ZipFile(path, "w") as archive:
            archive.writestr("objects/x", b"x")
        with pytest.raises(IntegrityFailure, match=MANIFEST_NAME):
            import_archive(ContributionStore.open(tmp_path / "other"), path)
