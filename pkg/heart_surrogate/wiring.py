"""
Scoped component registries for the command-line pipeline.

A `process` scope holds what lives for the whole invocation (resolved config, worker pool); a
`command` scope holds per-subcommand artifacts (run directory, dataset, model, problem). Lookups
that the command scope cannot satisfy fall through to the process scope.
"""
from __future__ import annotations

from contextlib import ExitStack, contextmanager
from dataclasses import dataclass, field
from typing import (
    Any,
    Callable,
    ContextManager,
    Generic,
    Hashable,
    Iterator,
    Mapping,
    Optional,
    Sequence,
    TypeVar,
    Union,
    cast,
    get_origin,
)

from heart_surrogate.errors import ComponentCycleError, ComponentNotFound

T = TypeVar('T')
T_cov = TypeVar('T_cov', covariant=True)
ScopeT = TypeVar('ScopeT', bound=Hashable)

SCOPES = ('process', 'command')

TypesMatcher = Callable[[type, type], bool]


def is_type_acceptable_in_place_of(type_acceptable: type, in_place_of: type) -> bool:
    # subscripted generics are compared by their origins
    type_acceptable = get_origin(type_acceptable) or type_acceptable
    in_place_of = get_origin(in_place_of) or in_place_of
    return issubclass(type_acceptable, in_place_of)


@dataclass(frozen=True)
class Component(Generic[T_cov]):
    name: str
    provides_type: type[T_cov]
    # argument name -> (component name, expected type)
    requires: Mapping[str, tuple[str, type[Any]]]
    factory: Callable[..., Any]
    is_context_manager: bool = False

    @classmethod
    def create(
        cls,
        name: str,
        provides_type: type[T],
        requires: Mapping[str, Union[type[Any], tuple[str, type[Any]]]],
        factory: Callable[..., Union[T, ContextManager[T]]],
        is_context_manager: bool = False,
    ) -> Component[T]:
        """A bare type in `requires` means the component is looked up by the argument name."""
        normalized = {
            arg: req if isinstance(req, tuple) else (arg, req) for arg, req in requires.items()
        }
        return Component(name, provides_type, normalized, factory, is_context_manager)

    @classmethod
    def value(cls, name: str, provides_type: type[T], value: T) -> Component[T]:
        return Component(name, provides_type, {}, lambda: value)


@dataclass(frozen=True)
class Registry:
    provides: Mapping[str, Component[Any]]
    types_matcher: TypesMatcher = is_type_acceptable_in_place_of

    @classmethod
    def of(cls, *components: Component[Any]) -> Registry:
        return cls({c.name: c for c in components})


@dataclass(frozen=True)
class ScopedRegistries(Generic[ScopeT]):
    scopes_order: Sequence[ScopeT]
    scopes: Mapping[ScopeT, Registry] = field(default_factory=dict)

    def scope_below(self, outer: Optional[ScopeT]) -> ScopeT:
        """The scope a resolver of `outer` opens next; the outermost one at the root."""
        order = list(self.scopes_order)
        if outer is None:
            return order[0]
        if outer not in order:
            raise ValueError(f'Unknown scope {outer!r}, expected one of {order}')
        if outer == order[-1]:
            raise ValueError(f'Scope {outer!r} is the innermost; no scope opens below it')
        return order[order.index(outer) + 1]


def validate_registry(registry: Registry, outer: Sequence[Registry] = ()) -> None:
    """
    Every requirement must be provided by this registry or an outer one with a matching type,
    and the requirement graph inside the registry must be acyclic.
    """
    for comp in registry.provides.values():
        for arg, (req_name, req_type) in comp.requires.items():
            provider = _find(req_name, (registry, *outer))
            if provider is None:
                raise ComponentNotFound(
                    f'Component `{comp.name}` requires `{req_name}: {req_type.__name__}` '
                    f'(argument `{arg}`), which is not provided'
                )
            source, dep = provider
            if not source.types_matcher(dep.provides_type, req_type):
                raise ComponentNotFound(
                    f'Component `{comp.name}` requires `{req_name}: {req_type.__name__}` but '
                    f'`{dep.name}` provides {dep.provides_type.__name__}'
                )

    done: set[str] = set()

    def visit(name: str, path: tuple[str, ...]) -> None:
        if name in path:
            raise ComponentCycleError(f'Cyclic requirements: {" -> ".join(path + (name,))}')
        if name in done or name not in registry.provides:
            return
        for req_name, _ in registry.provides[name].requires.values():
            visit(req_name, path + (name,))
        done.add(name)

    for name in registry.provides:
        visit(name, ())


def validate_scoped_registries(scoped: ScopedRegistries[Any]) -> None:
    missing = [s for s in scoped.scopes_order if s not in scoped.scopes]
    if missing:
        raise ComponentNotFound(f'No registry for scopes {missing}')
    outer: list[Registry] = []
    for scope in scoped.scopes_order:
        registry = scoped.scopes[scope]
        validate_registry(registry, tuple(reversed(outer)))
        outer.append(registry)


def _find(
    name: str, registries: Sequence[Registry]
) -> Optional[tuple[Registry, Component[Any]]]:
    for registry in registries:
        if name in registry.provides:
            return registry, registry.provides[name]
    return None


class Resolver:
    """Creates components on demand, memoized; context-managed ones are closed with `guard`."""

    def __init__(
        self,
        registry: Registry,
        resolve_unknown: Optional[Callable[[str, type[Any]], Any]] = None,
    ):
        self._registry = registry
        self._resolve_unknown = resolve_unknown
        self._resolved_cache: dict[str, Any] = {}
        self.guard = self.finalizers_stack = ExitStack()

    def resolve(self, look_name: str, look_type: type[T]) -> T:
        try:
            comp = self._lookup(look_name, look_type)
        except ComponentNotFound as exc:
            if self._resolve_unknown is None:
                raise
            try:
                return cast(T, self._resolve_unknown(look_name, look_type))
            except ComponentNotFound as outer_exc:
                raise outer_exc from exc

        if comp.name in self._resolved_cache:
            return cast(T, self._resolved_cache[comp.name])

        args = {
            arg: self.resolve(req_name, req_type)
            for arg, (req_name, req_type) in comp.requires.items()
        }
        created = comp.factory(**args)
        if comp.is_context_manager:
            created = self.finalizers_stack.enter_context(created)
        self._resolved_cache[comp.name] = created
        return cast(T, created)

    def _lookup(self, look_name: str, look_type: type[T]) -> Component[T]:
        if look_name not in self._registry.provides:
            raise ComponentNotFound(f'Component `{look_name}: {look_type.__name__}` not found')
        comp = self._registry.provides[look_name]
        if not self._registry.types_matcher(comp.provides_type, look_type):
            raise ComponentNotFound(
                f'Requested component `{look_name}: {look_type.__name__}` does not match '
                f'provided type {comp.provides_type.__name__}'
            )
        return comp


class ScopedResolver(Generic[ScopeT]):
    def __init__(
        self,
        scoped: ScopedRegistries[ScopeT],
        parent: Optional[ScopedResolver[ScopeT]] = None,
        scope: Optional[ScopeT] = None,
    ):
        new_scope = scoped.scope_below(None if parent is None else parent.scope)
        if scope is not None and new_scope != scope:
            raise ValueError(f'Could not enter scope "{scope}", only "{new_scope}" is possible')
        self._scope = new_scope
        self._scoped = scoped
        self._owned = Resolver(
            scoped.scopes[new_scope], resolve_unknown=None if parent is None else parent.resolve
        )

    @property
    def scope(self) -> ScopeT:
        return self._scope

    @property
    def guard(self) -> ExitStack:
        return self._owned.guard

    def resolve(self, look_name: str, look_type: type[T]) -> T:
        return self._owned.resolve(look_name, look_type)

    @contextmanager
    def next_scope(self, scope: Optional[ScopeT] = None) -> Iterator[ScopedResolver[ScopeT]]:
        child = ScopedResolver(self._scoped, parent=self, scope=scope)
        with child.guard:
            yield child


@contextmanager
def create_scoped_resolver(scoped: ScopedRegistries[ScopeT]) -> Iterator[ScopedResolver[ScopeT]]:
    validate_scoped_registries(scoped)
    resolver = ScopedResolver(scoped)
    with resolver.guard:
        yield resolver
