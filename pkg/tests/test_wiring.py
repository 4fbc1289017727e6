from contextlib import AbstractContextManager, contextmanager
from typing import Callable
from unittest.mock import MagicMock, Mock, call

from pytest import raises

from heart_surrogate.errors import ComponentCycleError, ComponentNotFound
from heart_surrogate.wiring import (
    SCOPES,
    Component,
    Registry,
    Resolver,
    ScopedRegistries,
    create_scoped_resolver,
    validate_registry,
    validate_scoped_registries,
)
from tests.helpers import A_INST, B_INST, A, B, C, DepOnA, SubA

create_component = Component.create


class TestResolver:
    def test_calls_registry_types_matcher(self):
        factory = Mock(Callable, name='factory')
        provided_type = Mock(type, name='provided-type')
        required_type = Mock(type, name='required-type')
        types_matcher = Mock(Callable, name='types-matcher')
        registry = Registry(
            {'a': create_component('a', provided_type, {}, factory)}, types_matcher=types_matcher
        )

        resolver = Resolver(registry)
        with resolver.guard:
            value = resolver.resolve('a', required_type)

        assert value is factory.return_value
        assert types_matcher.mock_calls == [call(provided_type, required_type)]

    def test_value_component(self):
        resolver = Resolver(Registry.of(Component.value('a', A, A_INST)))
        assert resolver.resolve('a', A) is A_INST

    def test_created_value_is_memoized(self):
        a_factory = Mock(Callable, name='a-factory')
        resolver = Resolver(Registry.of(create_component('a', A, {}, a_factory)))
        a1 = resolver.resolve('a', A)
        a2 = resolver.resolve('a', A)
        assert a_factory.mock_calls == [call()]
        assert a1 is a2 is a_factory.return_value

    def test_provides_with_requirements(self):
        a_factory = Mock(Callable, name='a-factory', return_value=A_INST)
        b_factory = Mock(Callable, name='b-factory', return_value=B_INST)
        c_factory = Mock(Callable, name='c-factory', wraps=C)
        registry = Registry.of(
            create_component('a', A, {}, a_factory),
            create_component('b', B, {}, b_factory),
            create_component('c', C, {'a': A, 'b': B}, c_factory),
        )

        c_provided = Resolver(registry).resolve('c', C)
        assert isinstance(c_provided, C)
        assert c_provided.a is A_INST
        assert c_provided.b is B_INST
        assert c_factory.mock_calls == [call(a=A_INST, b=B_INST)]

    def test_requirement_by_custom_argument_name(self):
        def c_factory(*, a_arg, b_arg):
            return C(a_arg, b_arg)

        c_factory_mock = Mock(Callable, wraps=c_factory, name='c-factory')
        registry = Registry.of(
            Component.value('a', A, A_INST),
            Component.value('b', B, B_INST),
            create_component('c', C, {'a_arg': ('a', A), 'b_arg': ('b', B)}, c_factory_mock),
        )

        c_inst = Resolver(registry).resolve('c', C)
        assert c_inst.a is A_INST
        assert c_factory_mock.mock_calls == [call(a_arg=A_INST, b_arg=B_INST)]

    def test_subclass_satisfies_requirement(self):
        sub = SubA()
        registry = Registry.of(
            Component.value('a', SubA, sub), create_component('dep', DepOnA, {'a': A}, DepOnA)
        )
        assert Resolver(registry).resolve('dep', DepOnA).a is sub

    def test_type_mismatch(self):
        resolver = Resolver(Registry.of(Component.value('a', A, A_INST)))
        with raises(ComponentNotFound):
            resolver.resolve('a', B)

    def test_unknown_component(self):
        with raises(ComponentNotFound):
            Resolver(Registry.of()).resolve('a', A)

    def test_context_manager_factory(self):
        a_cm = MagicMock(AbstractContextManager, name='a-cm')
        a_cm.__enter__.return_value = A_INST
        a_cm_factory = Mock(Callable, name='a-factory', return_value=a_cm)
        resolver = Resolver(
            Registry.of(create_component('a', A, {}, a_cm_factory, is_context_manager=True))
        )

        with resolver.guard:
            assert resolver.resolve('a', A) is A_INST
            # ExitStack calls `type(cm).__enter__(cm)`, so self shows up explicitly
            assert a_cm.mock_calls == [call.__enter__(a_cm)]

        assert a_cm.mock_calls == [call.__enter__(a_cm), call.__exit__(a_cm, None, None, None)]

    def test_context_manager_as_requirement(self):
        @contextmanager
        def a_cm():
            yield A_INST

        registry = Registry.of(
            create_component('a', A, {}, a_cm, is_context_manager=True),
            Component.value('b', B, B_INST),
            create_component('c', C, {'a': A, 'b': B}, C),
        )
        resolver = Resolver(registry)
        with resolver.guard:
            assert resolver.resolve('c', C).a is A_INST


class TestValidation:
    def test_missing_requirement(self):
        registry = Registry.of(create_component('dep', DepOnA, {'a': A}, DepOnA))
        with raises(ComponentNotFound, match='`a: A`'):
            validate_registry(registry)

    def test_requirement_from_outer_registry(self):
        outer = Registry.of(Component.value('a', A, A_INST))
        validate_registry(Registry.of(create_component('dep', DepOnA, {'a': A}, DepOnA)), [outer])

    def test_mismatched_type(self):
        registry = Registry.of(
            Component.value('a', B, B_INST), create_component('dep', DepOnA, {'a': A}, DepOnA)
        )
        with raises(ComponentNotFound, match='provides B'):
            validate_registry(registry)

    def test_cycle(self):
        registry = Registry.of(
            create_component('a', A, {'b': B}, A), create_component('b', B, {'a': A}, B)
        )
        with raises(ComponentCycleError, match='a -> b -> a'):
            validate_registry(registry)

    def test_every_scope_needs_a_registry(self):
        with raises(ComponentNotFound):
            validate_scoped_registries(ScopedRegistries(['process', 'command'], {}))


class TestScopedResolver:
    SCOPES_ORDER = ['process', 'command']

    def test_command_scope_reads_process_components(self):
        class Config:
            pass

        class Pool:
            pass

        class Model:
            pass

        config_factory = Mock(name='config-factory')
        pool_factory = Mock(name='pool-factory')
        model_factory = Mock(name='model-factory')

        scoped = ScopedRegistries(
            self.SCOPES_ORDER,
            {
                'process': Registry.of(
                    create_component('config', Config, {}, config_factory),
                    create_component('pool', Pool, {'config': Config}, pool_factory),
                ),
                'command': Registry.of(
                    create_component(
                        'model', Model, {'config': Config, 'pool': Pool}, model_factory
                    ),
                ),
            },
        )

        with create_scoped_resolver(scoped) as process:
            with process.next_scope() as command:
                assert command.scope == 'command'
                model = command.resolve('model', Model)
                pool = command.resolve('pool', Pool)

        assert model is model_factory.return_value
        assert pool is pool_factory.return_value
        assert model_factory.mock_calls == [
            call(config=config_factory.return_value, pool=pool_factory.return_value)
        ]
        assert pool_factory.mock_calls == [call(config=config_factory.return_value)]
        assert config_factory.mock_calls == [call()]

    def test_command_scope_closes_its_context_managers_first(self):
        events = []

        def managed(name):
            @contextmanager
            def factory():
                events.append(f'enter {name}')
                yield name
                events.append(f'exit {name}')

            return factory

        scoped = ScopedRegistries(
            self.SCOPES_ORDER,
            {
                'process': Registry.of(create_component('p', str, {}, managed('p'), True)),
                'command': Registry.of(create_component('c', str, {}, managed('c'), True)),
            },
        )

        with create_scoped_resolver(scoped) as process:
            process.resolve('p', str)
            with process.next_scope() as command:
                command.resolve('c', str)
            events.append('command done')

        assert events == ['enter p', 'enter c', 'exit c', 'command done', 'exit p']

    def test_no_scope_after_command(self):
        scoped = ScopedRegistries(
            self.SCOPES_ORDER, {'process': Registry.of(), 'command': Registry.of()}
        )
        with create_scoped_resolver(scoped) as process:
            with process.next_scope('command') as command:
                with raises(ValueError):
                    with command.next_scope():
                        pass

    def test_wrong_scope_requested(self):
        scoped = ScopedRegistries(
            self.SCOPES_ORDER, {'process': Registry.of(), 'command': Registry.of()}
        )
        with create_scoped_resolver(scoped) as process:
            with raises(ValueError):
                with process.next_scope('process'):
                    pass

    def test_invalid_registries_are_rejected_up_front(self):
        scoped = ScopedRegistries(
            self.SCOPES_ORDER,
            {
                'process': Registry.of(),
                'command': Registry.of(create_component('dep', DepOnA, {'a': A}, DepOnA)),
            },
        )
        with raises(ComponentNotFound):
            with create_scoped_resolver(scoped):
                pass


class TestScopeOrder:
    scoped = ScopedRegistries(SCOPES, {'process': Registry.of(), 'command': Registry.of()})

    def test_root_opens_the_outermost_scope(self):
        assert self.scoped.scope_below(None) == 'process'

    def test_command_opens_below_process(self):
        assert self.scoped.scope_below('process') == 'command'

    def test_unknown_scope(self):
        with raises(ValueError, match='Unknown scope'):
            self.scoped.scope_below('request')

    def test_nothing_below_command(self):
        with raises(ValueError, match='innermost'):
            self.scoped.scope_below('command')
