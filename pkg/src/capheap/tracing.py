"""Edge enumeration: how payloads expose their managed references.

A payload is *traceable* when the collector can enumerate every managed
reference it holds.  Three shapes qualify:

* leaves (``None``, ``str``, numbers, ``bytes``) which hold nothing;
* objects with a ``trace(visitor)`` method (the :class:`Traceable` protocol),
  including :class:`~capheap.heap.ObjectRef` and
  :class:`~capheap.brands.ManagedRef` themselves;
* compositions of the above: tuples, lists, sets, dicts and dataclass
  instances, traced field by field.

:func:`traceable` derives a ``trace`` method for a dataclass so the per-call
field lookup happens once per class instead of once per object.
"""

from __future__ import annotations

import dataclasses
from typing import Any, Callable, Protocol, runtime_checkable

__all__ = [
    "TraceVisitor",
    "Traceable",
    "check_traceable",
    "edges_of",
    "register_leaf",
    "trace",
    "traceable",
]


class TraceVisitor:
    """Receives the edges of one object during a trace call.

    ``owner`` is the compartment of the object being traced; the collector
    reads it when checking edges, payload code should ignore it.
    """

    __slots__ = ("_sink", "owner")

    def __init__(self, sink: Callable[[Any], None], owner: int | None = None):
        self._sink = sink
        self.owner = owner

    def visit(self, ref) -> None:
        self._sink(ref)


@runtime_checkable
class Traceable(Protocol):
    def trace(self, visitor: TraceVisitor) -> None: ...


_LEAF_TYPES: set[type] = {type(None), bool, int, float, complex, str, bytes}
_handlers: dict[type, Callable[[Any, TraceVisitor], None]] = {}


def register_leaf(cls: type) -> type:
    """Declare that instances of ``cls`` never hold managed references."""
    _LEAF_TYPES.add(cls)
    _handlers.pop(cls, None)
    return cls


def _trace_leaf(value, visitor):
    pass


def _trace_method(value, visitor):
    value.trace(visitor)


def _trace_iterable(value, visitor):
    for item in value:
        trace(item, visitor)


def _trace_dict(value, visitor):
    for key, item in value.items():
        trace(key, visitor)
        trace(item, visitor)


def _field_tracer(names: tuple[str, ...]):
    def trace_fields(value, visitor):
        for name in names:
            trace(getattr(value, name), visitor)

    return trace_fields


def _resolve(cls: type):
    if cls in _LEAF_TYPES:
        handler = _trace_leaf
    elif callable(getattr(cls, "trace", None)):
        handler = _trace_method
    elif issubclass(cls, dict):
        handler = _trace_dict
    elif issubclass(cls, (tuple, list, set, frozenset)):
        handler = _trace_iterable
    elif dataclasses.is_dataclass(cls):
        handler = _field_tracer(tuple(f.name for f in dataclasses.fields(cls)))
    else:
        raise TypeError(f"{cls.__qualname__} is not traceable")
    _handlers[cls] = handler
    return handler


def trace(value: Any, visitor: TraceVisitor) -> None:
    """Visit every managed reference held by ``value``."""
    cls = type(value)
    handler = _handlers.get(cls)
    if handler is None:
        handler = _resolve(cls)
    handler(value, visitor)


def check_traceable(value: Any) -> None:
    """Raise ``TypeError`` if ``value`` contains an untraceable component."""
    trace(value, TraceVisitor(lambda ref: None))


def edges_of(value: Any) -> list:
    """Return the targets visited by tracing ``value``, in visit order."""
    out: list = []
    trace(value, TraceVisitor(out.append))
    return out


def traceable(cls: type) -> type:
    """Derive ``trace`` for a dataclass from its fields."""
    if not dataclasses.is_dataclass(cls):
        raise TypeError("traceable() requires a dataclass")
    names = tuple(f.name for f in dataclasses.fields(cls))

    def trace_method(self, visitor: TraceVisitor) -> None:
        for name in names:
            trace(getattr(self, name), visitor)

    trace_method.__qualname__ = f"{cls.__qualname__}.trace"
    cls.trace = trace_method
    _handlers.pop(cls, None)
    return cls
