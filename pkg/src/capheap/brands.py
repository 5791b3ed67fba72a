"""Brands carried by managed references and the substitutions acting on them.

A :class:`ManagedRef` is branded with

* a *duration*: how long the target is guaranteed to stay alive;
* a *compartment*: a named :class:`CompartmentId` or the :data:`WILDCARD`;
* a *payload type*: a small type term describing the payload, so that the
  substitutions below can be checked structurally.

Durations are runtime tokens.  A duration is *alive* while the guarantee
holds; using a reference whose duration has ended raises
:class:`~capheap.errors.BorrowExpired`.  Contraction (on access) and
extension (on rooting) swap one duration for another, both in the reference
itself and, homomorphically, in every reference nested in its payload.
"""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass
from typing import Any, Callable, Mapping, Union

from capheap.heap import ObjectRef
from capheap.tracing import TraceVisitor

__all__ = [
    "HELD",
    "STATIC",
    "WILDCARD",
    "Base",
    "CompartmentBrand",
    "CompartmentId",
    "Duration",
    "Grant",
    "ManagedRef",
    "Managed",
    "Nominal",
    "Option",
    "Product",
    "Scope",
    "Seq",
    "TypeTerm",
    "UNIT",
    "contract_duration",
    "contract_value",
    "extend_duration",
    "forget_compartment",
    "hold_value",
    "iter_refs",
    "map_refs",
    "subst_compartment",
    "substitute",
    "type_of",
]


# -- durations ----------------------------------------------------------


class Duration:
    """An abstract lifetime token.  Identity is the only equality."""

    __slots__ = ("name",)

    def __init__(self, name: str):
        self.name = name

    @property
    def alive(self) -> bool:
        return True

    def __repr__(self) -> str:
        return f"'{self.name}"


class Scope(Duration):
    """A duration that lasts until :meth:`end` is called."""

    __slots__ = ("_ended",)

    def __init__(self, name: str):
        super().__init__(name)
        self._ended = False

    @property
    def alive(self) -> bool:
        return not self._ended

    def end(self) -> None:
        self._ended = True


class Grant(Duration):
    """A borrow of a context: ends at the next exclusive operation.

    ``clock`` returns the current exclusive-operation epoch; the grant is
    alive while the epoch is unchanged and ``within`` is alive.
    """

    __slots__ = ("_clock", "_epoch", "within")

    def __init__(self, name: str, clock: Callable[[], int], within: Duration):
        super().__init__(name)
        self._clock = clock
        self._epoch = clock()
        self.within = within

    @property
    def alive(self) -> bool:
        return self._clock() == self._epoch and self.within.alive


STATIC = Duration("static")
# Placeholder for references stored inside a payload: they live exactly as
# long as their owner, and are contracted to the reader's grant on access.
HELD = Duration("held")


# -- compartment brands -------------------------------------------------


@dataclass(frozen=True, slots=True)
class CompartmentId:
    id: int

    def __repr__(self) -> str:
        return f"C{self.id}"


class _Wildcard:
    __slots__ = ()

    def __repr__(self) -> str:
        return "SOMEWHERE"

    def __reduce__(self):
        return "WILDCARD"


WILDCARD = _Wildcard()
CompartmentBrand = Union[CompartmentId, _Wildcard]


# -- type terms ---------------------------------------------------------


@dataclass(frozen=True)
class Base:
    name: str

    def __repr__(self) -> str:
        return self.name


@dataclass(frozen=True)
class Managed:
    duration: Duration
    compartment: Any
    payload: "TypeTerm"

    def __repr__(self) -> str:
        return f"Managed<{self.duration!r}, {self.compartment!r}, {self.payload!r}>"


@dataclass(frozen=True)
class Option:
    item: "TypeTerm"


@dataclass(frozen=True)
class Seq:
    item: "TypeTerm"


@dataclass(frozen=True)
class Product:
    fields: tuple[tuple[str, "TypeTerm"], ...]
    name: str = ""


@dataclass(frozen=True)
class Nominal:
    """A named type applied to duration and compartment parameters.

    Recursive payloads (a cell holding cells) are described nominally:
    ``NativeCell<'a, C>`` is ``Nominal("NativeCell", ('a,), (C,))``.
    """

    name: str
    durations: tuple[Duration, ...] = ()
    compartments: tuple[Any, ...] = ()

    def __repr__(self) -> str:
        args = [repr(d) for d in self.durations] + [repr(c) for c in self.compartments]
        return f"{self.name}<{', '.join(args)}>" if args else self.name


TypeTerm = Union[Base, Managed, Option, Seq, Product, Nominal]

UNIT = Base("unit")


def substitute(
    term: TypeTerm,
    durations: Mapping[Duration, Duration] | None = None,
    compartments: Mapping[Any, Any] | None = None,
) -> TypeTerm:
    """Replace duration and compartment atoms throughout ``term``."""
    durations = durations or {}
    compartments = compartments or {}

    def d(x):
        return durations.get(x, x)

    def c(x):
        return compartments.get(x, x)

    def go(t):
        if isinstance(t, Base):
            return t
        if isinstance(t, Managed):
            return Managed(d(t.duration), c(t.compartment), go(t.payload))
        if isinstance(t, Option):
            return Option(go(t.item))
        if isinstance(t, Seq):
            return Seq(go(t.item))
        if isinstance(t, Product):
            return Product(tuple((name, go(f)) for name, f in t.fields), t.name)
        if isinstance(t, Nominal):
            return Nominal(
                t.name,
                tuple(d(x) for x in t.durations),
                tuple(c(x) for x in t.compartments),
            )
        raise TypeError(f"not a type term: {t!r}")

    return go(term)


def contract_duration(term: TypeTerm, alpha: Duration, beta: Duration) -> TypeTerm:
    """``T[alpha/beta]``: the caller guarantees alpha lies within beta."""
    return substitute(term, durations={beta: alpha})


def subst_compartment(term: TypeTerm, old: Any, new: Any) -> TypeTerm:
    """``T[new/old]`` on compartment atoms."""
    return substitute(term, compartments={old: new})


def type_of(value: Any, duration: Duration, compartment: Any) -> TypeTerm:
    """Infer a payload type term for ``value`` allocated at the given brands."""
    if value is None:
        return UNIT
    if isinstance(value, ManagedRef):
        return Managed(duration, value.compartment, value.payload_type)
    if isinstance(value, (str, bytes, bool, int, float, complex)):
        return Base(type(value).__name__)
    if isinstance(value, tuple):
        return Product(
            tuple((str(i), type_of(v, duration, compartment)) for i, v in enumerate(value))
        )
    if isinstance(value, list):
        item = type_of(value[0], duration, compartment) if value else Base("any")
        return Seq(item)
    brand = getattr(type(value), "__brand__", None)
    if brand is not None:
        return brand(duration, compartment)
    return Nominal(type(value).__qualname__, (duration,), (compartment,))


# -- managed references -------------------------------------------------


@dataclass(frozen=True, slots=True)
class ManagedRef:
    """A copyable handle to managed data.

    Holding a reference grants nothing by itself; reading or writing the
    target goes through a context (``ref.borrow(cx)``,
    ``ref.borrow_mut(cx)``).
    """

    target: ObjectRef
    duration: Duration
    compartment: Any
    payload_type: TypeTerm

    def trace(self, visitor: TraceVisitor) -> None:
        visitor.visit(self.target)

    def with_duration(self, duration: Duration) -> "ManagedRef":
        if duration is self.duration:
            return self
        return ManagedRef(
            self.target,
            duration,
            self.compartment,
            contract_duration(self.payload_type, duration, self.duration),
        )

    def forget_compartment(self) -> "ManagedRef":
        return forget_compartment(self)

    def in_root(self, root) -> "ManagedRef":
        return root.insert(self)

    def borrow(self, cx):
        return cx.read(self)

    def borrow_mut(self, cx):
        return cx.access_exclusive(self)

    def __repr__(self) -> str:
        return (
            f"ManagedRef(#{self.target.slot}.{self.target.generation}, "
            f"{self.duration!r}, {self.compartment!r}, {self.payload_type!r})"
        )


def extend_duration(ref: ManagedRef, beta: Duration) -> ManagedRef:
    """``p : Managed<alpha, C, T>`` becomes ``Managed<beta, C, T[beta/alpha]>``."""
    return ref.with_duration(beta)


def forget_compartment(ref: ManagedRef) -> ManagedRef:
    """Erase the compartment brand: ``Managed<SOMEWHERE, T[SOMEWHERE/C]>``."""
    if ref.compartment is WILDCARD:
        return ref
    return ManagedRef(
        ref.target,
        ref.duration,
        WILDCARD,
        subst_compartment(ref.payload_type, ref.compartment, WILDCARD),
    )


# -- value-level maps ---------------------------------------------------

_LEAVES = (type(None), str, bytes, bool, int, float, complex)


def map_refs(value: Any, fn: Callable[[ManagedRef], ManagedRef]) -> Any:
    """Rebuild ``value`` with ``fn`` applied to every nested ``ManagedRef``.

    Products (tuples, dataclasses), optionals and sequences are traversed;
    objects defining ``__map_refs__(fn)`` handle themselves; anything else
    is returned unchanged.
    """
    if isinstance(value, ManagedRef):
        return fn(value)
    if isinstance(value, _LEAVES):
        return value
    if isinstance(value, tuple):
        items = [map_refs(v, fn) for v in value]
        return type(value)(*items) if hasattr(value, "_fields") else type(value)(items)
    if isinstance(value, list):
        return [map_refs(v, fn) for v in value]
    if isinstance(value, dict):
        return {map_refs(k, fn): map_refs(v, fn) for k, v in value.items()}
    if isinstance(value, (set, frozenset)):
        return type(value)(map_refs(v, fn) for v in value)
    hook = getattr(value, "__map_refs__", None)
    if hook is not None:
        return hook(fn)
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        new = copy.copy(value)
        for f in dataclasses.fields(value):
            object.__setattr__(new, f.name, map_refs(getattr(value, f.name), fn))
        return new
    return value


def iter_refs(value: Any) -> list[ManagedRef]:
    """Collect the nested ``ManagedRef`` handles of ``value``."""
    found: list[ManagedRef] = []

    def grab(ref):
        found.append(ref)
        return ref

    map_refs(value, grab)
    return found


def contract_value(value: Any, alpha: Duration) -> Any:
    """Contract every nested reference to ``alpha`` (the ``T[alpha/beta]`` view)."""
    return map_refs(value, lambda ref: ref.with_duration(alpha))


def hold_value(value: Any) -> Any:
    """Rebrand nested references as owner-held, ready for storage."""
    return map_refs(value, lambda ref: ref.with_duration(HELD))
