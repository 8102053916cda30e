"""On-disk layout of a FRACTI store root."""

import os
import tempfile
from pathlib import Path

from .config import Config, resolve_home

# Files and directories under the store root
CONFIG_FILENAME = "config.toml"
OBJECTS_DIRNAME = "objects"
REFS_DIRNAME = "refs"
META_DIRNAME = "meta"
PROVENANCE_FILENAME = "provenance.log"
PRINCIPALS_FILENAME = "principals"
POLICIES_FILENAME = "policies"
CATALOG_FILENAME = "catalog"
LOCK_FILENAME = "lock"


class StoreLayout:
    """Paths of one store root, scanned for what already exists."""

    def __init__(self, root_path: Path):
        self.root_path = Path(root_path)
        self.config_path: Path | None = None
        self._initialized = False

        self._scan()

    def _scan(self) -> None:
        """Scan the root path for a config file and the store tables."""
        try:
            config_file = self.root_path / CONFIG_FILENAME
            if config_file.exists():
                self.config_path = config_file

            self._initialized = (
                (self.root_path / OBJECTS_DIRNAME).is_dir()
                and self.provenance_path.exists()
            )
        except OSError:
            self._initialized = False

    @property
    def is_initialized(self) -> bool:
        return self._initialized

    @property
    def objects_path(self) -> Path:
        return self.root_path / OBJECTS_DIRNAME

    @property
    def refs_path(self) -> Path:
        return self.root_path / REFS_DIRNAME

    @property
    def meta_path(self) -> Path:
        return self.root_path / META_DIRNAME

    @property
    def provenance_path(self) -> Path:
        return self.root_path / PROVENANCE_FILENAME

    @property
    def principals_path(self) -> Path:
        return self.root_path / PRINCIPALS_FILENAME

    @property
    def policies_path(self) -> Path:
        return self.root_path / POLICIES_FILENAME

    @property
    def catalog_path(self) -> Path:
        return self.root_path / CATALOG_FILENAME

    @property
    def lock_path(self) -> Path:
        return self.root_path / LOCK_FILENAME

    def init(self) -> None:
        """Create the directory skeleton and empty tables."""
        for directory in (self.objects_path, self.refs_path, self.meta_path):
            directory.mkdir(parents=True, exist_ok=True)
        for table in (self.provenance_path, self.principals_path,
                      self.policies_path, self.catalog_path):
            table.touch(exist_ok=True)
        self._scan()

    def object_path(self, content_hash: str) -> Path:
        return self.objects_path / content_hash[:2] / content_hash

    def ref_path(self, namespace: str, name: str, version: int) -> Path:
        return self.refs_path / namespace / f"{name}@{version}"

    def meta_file(self, category: str, key: str) -> Path:
        return self.meta_path / category / key

    def __repr__(self) -> str:
        return f"StoreLayout(root={self.root_path}, config={self.config_path})"


def write_atomic(path: Path, data: bytes) -> None:
    """Write bytes to `path` through a temp file and rename."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp_name, path)
    except BaseException:
        Path(tmp_name).unlink(missing_ok=True)
        raise


def find_store_layout(config: Config | None = None, root: Path | None = None) -> StoreLayout:
    """Find the store root for this process, initializing it on first use."""
    layout = StoreLayout(root if root is not None else resolve_home(config))
    if not layout.is_initialized:
        layout.init()
    return layout
