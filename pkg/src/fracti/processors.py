"""Processor contract, registry and built-in processors.

A processor is an in-process plug-in keyed by `name@version`. The store
holds its canonical descriptor (not code); the registry maps the key to
the implementation that runs.
"""

import logging
from abc import ABC, abstractmethod
from numbers import Real
from typing import Any, ClassVar, Iterable, Mapping

from . import canonical
from .errors import InvalidParams, MalformedSeries, NotFound, UnknownProcessor
from .flow import processor_uri
from .seeding import derive_seed, standard_normals
from .store import ContributionId, ContributionKind, ContributionStore, Principal

logger = logging.getLogger(__name__)

Tree = dict[str, Any]

VARIADIC = "any"


class Processor(ABC):
    """Deterministic mapping (trees, params, seed) -> trees.

    arity: number of upstream edges; 0 marks a source, None accepts one or more.
    """
    name: ClassVar[str]
    version: ClassVar[int] = 1
    arity: ClassVar[int | None] = 1
    stateless: ClassVar[bool] = False
    parameters: ClassVar[dict[str, Any]] = {}

    @classmethod
    def key(cls) -> str:
        return f"{cls.name}@{cls.version}"

    @classmethod
    def accepts(cls, in_degree: int) -> bool:
        if cls.arity is None:
            return in_degree >= 1
        return in_degree == cls.arity

    @classmethod
    def arity_label(cls) -> str:
        return "one or more" if cls.arity is None else str(cls.arity)

    @classmethod
    def descriptor(cls, name: str | None = None, version: int | None = None) -> Tree:
        return {
            "arity": VARIADIC if cls.arity is None else cls.arity,
            "implementation": cls.key(),
            "name": name or cls.name,
            "parameters": dict(cls.parameters),
            "stateless": cls.stateless,
            "version": version or cls.version,
        }

    @classmethod
    def resolve_params(cls, overrides: Mapping[str, Any] | None) -> dict[str, Any]:
        params = dict(cls.parameters)
        for key, value in (overrides or {}).items():
            if key not in params:
                raise InvalidParams(f"{cls.key()} has no parameter {key!r}")
            params[key] = value
        return params

    @abstractmethod
    def process(self, trees: list[Tree], params: Mapping[str, Any], seed: int) -> list[Tree]:
        ...


class MapProcessor(Processor):
    """Stateless processor applied to each fragment on its own.

    The per-fragment seed depends on the fragment's position in the node
    input, so any partition of the input gives the same results.
    """
    stateless = True

    def process(self, trees: list[Tree], params: Mapping[str, Any], seed: int) -> list[Tree]:
        return [self.map_one(tree, position, params, seed) for position, tree in enumerate(trees)]

    def map_one(self, tree: Tree, position: int, params: Mapping[str, Any], seed: int) -> Tree:
        return self.transform(tree, params, derive_seed(seed, position))

    @abstractmethod
    def transform(self, tree: Tree, params: Mapping[str, Any], seed: int) -> Tree:
        ...


def _numeric_field(tree: Tree, name: str, key: str) -> float:
    value = tree.get(name)
    if isinstance(value, bool) or not isinstance(value, Real):
        raise InvalidParams(f"{key}: fragment field {name!r} is not a number")
    return float(value)


# -- built-ins ---------------------------------------------------------------

class SourceProcessor(MapProcessor):
    """Passes injected input fragments into the flow."""
    name = "src"
    arity = 0

    def transform(self, tree, params, seed):
        return dict(tree)


class SeriesSourceProcessor(MapProcessor):
    """Source over replayed series events; keeps `t` and `value`."""
    name = "series_source"
    arity = 0

    def transform(self, tree, params, seed):
        if "t" not in tree or "value" not in tree:
            raise MalformedSeries("series events need 't' and 'value'")
        return {"t": int(tree["t"]), "value": float(tree["value"])}


class IdentityProcessor(MapProcessor):
    name = "identity"

    def transform(self, tree, params, seed):
        return dict(tree)


class SinkProcessor(IdentityProcessor):
    name = "sink"


class ConcatProcessor(IdentityProcessor):
    """Merges any number of upstream streams in predecessor-name order."""
    name = "concat"
    arity = None


class ScaleProcessor(MapProcessor):
    name = "scale"
    parameters = {"factor": 1.0, "field": "value"}

    def transform(self, tree, params, seed):
        out = dict(tree)
        out[params["field"]] = _numeric_field(tree, params["field"], self.key()) * float(params["factor"])
        return out


class OffsetProcessor(MapProcessor):
    name = "offset"
    parameters = {"amount": 0.0, "field": "value"}

    def transform(self, tree, params, seed):
        out = dict(tree)
        out[params["field"]] = _numeric_field(tree, params["field"], self.key()) + float(params["amount"])
        return out


class JitterProcessor(MapProcessor):
    """Adds seeded gaussian noise to one numeric field."""
    name = "jitter"
    parameters = {"sigma": 1.0, "field": "value"}

    def transform(self, tree, params, seed):
        out = dict(tree)
        noise = float(params["sigma"]) * float(standard_normals(seed, 1)[0])
        out[params["field"]] = _numeric_field(tree, params["field"], self.key()) + noise
        return out


BUILTIN_PROCESSORS: tuple[type[Processor], ...] = (
    SourceProcessor,
    SeriesSourceProcessor,
    SinkProcessor,
    IdentityProcessor,
    ConcatProcessor,
    ScaleProcessor,
    OffsetProcessor,
    JitterProcessor,
)


class ProcessorRegistry:
    """Maps `name@version` to processor implementations."""

    def __init__(self, processors: Iterable[type[Processor]] = ()):
        self._impls: dict[str, tuple[type[Processor], str, int]] = {}
        for impl in processors:
            self.add(impl)

    def add(self, impl: type[Processor], name: str | None = None,
            version: int | None = None) -> str:
        name = name or impl.name
        version = version or impl.version
        key = f"{name}@{version}"
        existing = self._impls.get(key)
        if existing is not None and existing[0] is not impl:
            logger.warning("replacing implementation of %s", key)
        self._impls[key] = (impl, name, version)
        return key

    def __contains__(self, key: str) -> bool:
        return key in self._impls

    def keys(self) -> list[str]:
        return sorted(self._impls)

    def implementation(self, name: str, version: int) -> type[Processor]:
        try:
            return self._impls[f"{name}@{version}"][0]
        except KeyError:
            raise UnknownProcessor(f"no implementation for {name}@{version}") from None

    def get(self, name: str, version: int) -> Processor:
        return self.implementation(name, version)()

    def descriptor(self, name: str, version: int) -> Tree:
        return self.implementation(name, version).descriptor(name, version)

    def descriptor_hash(self, name: str, version: int) -> str:
        return canonical.tree_digest(self.descriptor(name, version))


def default_registry() -> ProcessorRegistry:
    """Registry with the built-ins, the formula processor and the showcase processors."""
    from .reactives import FormulaProcessor
    from .trainers import SHOWCASE_PROCESSORS

    return ProcessorRegistry((*BUILTIN_PROCESSORS, FormulaProcessor, *SHOWCASE_PROCESSORS))


def register_processor(store: ContributionStore, impl: type[Processor], principal: Principal,
                       name: str | None = None, version: int | None = None,
                       registry: ProcessorRegistry | None = None) -> ContributionId:
    """Store a processor descriptor so flows can reference `name@version`."""
    name = name or impl.name
    version = version or impl.version
    payload = canonical.encode_bytes(impl.descriptor(name, version))
    cid = store.register(payload, ContributionKind.PROCESSOR, principal, processor_uri(name, version))
    if registry is not None:
        registry.add(impl, name, version)
    return cid


def ensure_registered(store: ContributionStore, registry: ProcessorRegistry, principal: Principal,
                      keys: Iterable[str]) -> list[ContributionId]:
    """Register descriptors for known implementations that are not stored yet."""
    registered = []
    for key in sorted(set(keys)):
        if key not in registry:
            continue
        name, _, version = key.partition("@")
        try:
            store.resolve(processor_uri(name, int(version)))
            continue
        except NotFound:
            pass
        impl = registry.implementation(name, int(version))
        registered.append(register_processor(store, impl, principal, name, int(version)))
    return registered
