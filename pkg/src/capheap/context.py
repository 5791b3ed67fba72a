"""The context capability that gates every heap operation.

Exactly one root :class:`Context` owns a heap.  Operations come in two
kinds:

* *shared* operations (``read``, ``access``, ``global_``) may run while
  other read views are open;
* *exclusive* operations (``manage``, ``access_exclusive``, collection,
  creating or entering compartments) demand that no view is open.  Each one
  starts a new epoch, which ends every :class:`~capheap.brands.Grant`
  handed out before it.  A reference obtained from a grant must be rooted
  to survive the next exclusive operation.

Entering or creating a compartment returns a nested context and suspends
the parent until the nested one ends.  The rules are checked at runtime,
mirroring what a static type discipline would reject at build time.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from typing import Any, Callable

from capheap import tracing
from capheap.brands import (
    WILDCARD,
    CompartmentId,
    Grant,
    ManagedRef,
    Scope,
    contract_value,
    hold_value,
    iter_refs,
    subst_compartment,
    type_of,
)
from capheap.errors import (
    AccessDenied,
    AllocDenied,
    AlreadyActive,
    AlreadyInitialized,
    BorrowExpired,
    BrandMismatch,
    CompartmentViolation,
    ContextEnded,
    ContextSuspended,
    NoCompartment,
    NotInitialized,
    UsageError,
    UseAfterFree,
    WildcardAccess,
    WrongThread,
)
from capheap.heap import CollectionStats, Heap, HeapStats, ObjectRef
from capheap.roots import RootCell, RootSet

__all__ = [
    "CompartmentRecord",
    "Context",
    "ContextState",
    "ReadView",
    "WriteView",
    "new_context",
]


@dataclass(frozen=True)
class ContextState:
    can_access: bool = True
    can_alloc: bool = True
    compartment: Any = None  # None, a CompartmentId, or WILDCARD
    initializing: tuple[CompartmentId, Any] | None = None

    def __post_init__(self):
        if self.initializing is not None and self.can_access:
            raise ValueError("an initializing state cannot grant access")


@dataclass
class CompartmentRecord:
    id: int
    duration: Scope
    live: bool = True
    global_ref: ObjectRef | None = None
    global_type: Any = None
    alias_of: int | None = None

    @property
    def actual(self) -> int:
        return self.id if self.alias_of is None else self.alias_of


@dataclass
class _Runtime:
    heap: Heap
    roots: RootSet
    check_durations: bool
    thread: int = field(default_factory=threading.get_ident)
    compartments: dict[int, CompartmentRecord] = field(default_factory=dict)
    ids: Any = field(default_factory=lambda: itertools.count(0))
    stack: list["Context"] = field(default_factory=list)
    epoch: int = 0
    readers: int = 0
    writer: bool = False

    def clock(self) -> int:
        return self.epoch

    def globals(self) -> list[ObjectRef]:
        return [
            rec.global_ref
            for rec in self.compartments.values()
            if rec.alias_of is None and rec.live and rec.global_ref is not None
        ]


def new_context(
    capacity: int = 1024,
    threshold: int = 64,
    zeal: bool = False,
    *,
    debug: bool = True,
    check_durations: bool = True,
) -> "Context":
    """Mint the root context and its heap.

    ``check_durations=False`` erases duration brands: stale references are
    then caught only by the heap's generation check.
    """
    heap = Heap(capacity=capacity, threshold=threshold, zeal=zeal, debug=debug)
    rt = _Runtime(heap, RootSet(), check_durations)
    cx = Context(rt, ContextState(), Scope("cx"))
    rt.roots.validate = cx._validate_rootable
    heap.root_provider = lambda: (rt.roots, rt.globals())
    rt.stack.append(cx)
    return cx


class Context:
    """A capability over one heap, in a particular :class:`ContextState`."""

    def __init__(self, runtime: _Runtime, state: ContextState, duration: Scope):
        self._rt = runtime
        self._state = state
        self._duration = duration
        self._successor: Context | None = None
        self._ended = False
        self._pin: RootCell | None = None
        self._entered: ManagedRef | None = None

    # -- introspection --------------------------------------------------

    @property
    def state(self) -> ContextState:
        return self._state

    @property
    def heap(self) -> Heap:
        return self._rt.heap

    @property
    def stats(self) -> HeapStats:
        return self._rt.heap.stats

    @property
    def roots(self) -> RootSet:
        return self._rt.roots

    @property
    def depth(self) -> int:
        return len(self._rt.stack)

    @property
    def duration(self) -> Scope:
        return self._duration

    @property
    def active(self) -> bool:
        return bool(self._rt.stack) and self._rt.stack[-1] is self

    def compartment_ids(self) -> list[CompartmentId]:
        return [CompartmentId(i) for i, rec in self._rt.compartments.items() if rec.alias_of is None]

    def resolve(self, brand: Any) -> int:
        """Map a compartment name (possibly a fresh alias) to its heap id."""
        if not isinstance(brand, CompartmentId):
            raise NoCompartment(f"{brand!r} is not a named compartment")
        return self._rt.compartments[brand.id].actual

    def __repr__(self) -> str:
        return f"Context({self._state})"

    # -- grant discipline ---------------------------------------------

    def _check_live(self) -> None:
        rt = self._rt
        if threading.get_ident() != rt.thread:
            raise WrongThread("contexts are confined to the thread that created them")
        if self._ended:
            raise ContextEnded("context has ended")
        if rt.stack[-1] is not self:
            raise ContextSuspended("a nested context is live")

    def _shared(self) -> None:
        self._check_live()
        if self._rt.writer:
            raise AlreadyActive("a write view is open")

    def _exclusive(self) -> None:
        self._check_live()
        rt = self._rt
        if rt.writer:
            raise AlreadyActive("a write view is open")
        if rt.readers:
            raise AlreadyActive(f"{rt.readers} read view(s) open")
        rt.epoch += 1

    def _grant(self) -> Grant:
        return Grant("grant", self._rt.clock, self._duration)

    def _check_ref(self, ref: ManagedRef, agree: bool = True) -> None:
        if not isinstance(ref, ManagedRef):
            raise TypeError(f"expected a ManagedRef, got {type(ref).__name__}")
        if self._rt.check_durations and not ref.duration.alive:
            raise BorrowExpired(f"{ref} outlived its duration")
        heap = self._rt.heap
        if not heap.is_valid(ref.target):
            raise UseAfterFree(f"{ref} points at a reclaimed object")
        if agree and isinstance(ref.compartment, CompartmentId):
            actual = heap.header(ref.target).compartment
            if self.resolve(ref.compartment) != actual:
                raise CompartmentViolation(
                    f"{ref} is branded {ref.compartment!r} but lives in C{actual}"
                )

    def _check_named(self, ref: ManagedRef) -> None:
        if isinstance(ref, ManagedRef) and ref.compartment is WILDCARD:
            raise WildcardAccess("enter the compartment of a wildcard reference first")
        self._check_ref(ref)

    def _check_payload(self, payload: Any) -> None:
        tracing.check_traceable(payload)
        for ref in iter_refs(payload):
            self._check_ref(ref)

    def _validate_rootable(self, ref: ManagedRef) -> None:
        self._check_ref(ref)

    def _require_access(self) -> None:
        if not self._state.can_access:
            raise AccessDenied("context state cannot access managed data")

    def _require_alloc(self) -> CompartmentId:
        if not self._state.can_alloc:
            raise AllocDenied("context state cannot allocate")
        compartment = self._state.compartment
        if not isinstance(compartment, CompartmentId):
            raise NoCompartment("no named current compartment")
        return compartment

    # -- allocation and access ----------------------------------------

    def manage(
        self,
        payload: Any,
        *,
        finalizer: Callable[[Any], None] | None = None,
        payload_type: Any = None,
    ) -> ManagedRef:
        """Allocate ``payload`` in the current compartment.

        May collect first, so every reference inside ``payload`` must be
        rooted (or otherwise outlive this call).
        """
        self._check_live()
        compartment = self._require_alloc()
        self._exclusive()
        self._check_payload(payload)
        target = self._rt.heap.allocate(
            self.resolve(compartment), hold_value(payload), finalizer=finalizer
        )
        grant = self._grant()
        if payload_type is None:
            payload_type = type_of(payload, grant, compartment)
        return ManagedRef(target, grant, compartment, payload_type)

    def access(self, ref: ManagedRef) -> "ReadView":
        """Open a read view of ``ref``; use as a context manager."""
        return ReadView(self, ref)

    def read(self, ref: ManagedRef) -> Any:
        """Read ``ref`` under a grant that lasts until the next exclusive op."""
        with self.access(ref) as value:
            return value

    def access_exclusive(self, ref: ManagedRef) -> "WriteView":
        """Open the single write view of ``ref``; use as a context manager."""
        return WriteView(self, ref)

    def replace(self, ref: ManagedRef, new: Any) -> Any:
        with self.access_exclusive(ref) as view:
            return view.replace(new)

    # -- collection ---------------------------------------------------

    def trigger_collection(self) -> CollectionStats:
        self._exclusive()
        rt = self._rt
        return rt.heap.collect(rt.roots, rt.globals())

    gc = trigger_collection

    def collect_compartment(self, compartment: CompartmentId) -> CollectionStats:
        """Collect one compartment only."""
        self._exclusive()
        rt = self._rt
        return rt.heap.collect(rt.roots, rt.globals(), scope=self.resolve(compartment))

    # -- rooting ------------------------------------------------------

    def new_root(self) -> RootCell:
        self._check_live()
        return self._rt.roots.new_root()

    # -- compartments -------------------------------------------------

    def _fresh(self, alias_of: int | None = None) -> CompartmentId:
        rt = self._rt
        cid = next(rt.ids)
        rt.compartments[cid] = CompartmentRecord(cid, Scope(f"C{cid}"), alias_of=alias_of)
        if alias_of is None:
            rt.heap.add_compartment(cid)
        return CompartmentId(cid)

    def _push(self, state: ContextState) -> "Context":
        child = Context(self._rt, state, Scope("cx"))
        self._rt.stack.append(child)
        return child

    def create_compartment(self, global_type: Any = None) -> "Context":
        """Create a fresh compartment and return an initializing context in it.

        The returned context may allocate but not access until
        :meth:`global_manage` installs the compartment's global.
        """
        self._check_live()
        self._require_access()
        if not self._state.can_alloc:
            raise AllocDenied("context state cannot allocate")
        self._exclusive()
        cid = self._fresh()
        return self._push(
            ContextState(
                can_access=False,
                can_alloc=True,
                compartment=cid,
                initializing=(cid, global_type),
            )
        )

    def global_manage(self, payload: Any, *, payload_type: Any = None) -> "Context":
        """Install the compartment global; return the initialized context.

        This context is consumed: the returned one takes its place.
        """
        self._check_live()
        init = self._state.initializing
        if init is None:
            compartment = self._state.compartment
            if isinstance(compartment, CompartmentId) and \
                    self._rt.compartments[self.resolve(compartment)].global_ref is not None:
                raise AlreadyInitialized(f"{compartment!r} already has a global")
            raise NotInitialized("context is not initializing a compartment")
        cid, expected = init
        if expected is not None and not isinstance(payload, expected):
            raise TypeError(f"global must be {expected.__qualname__}")
        record = self._rt.compartments[cid.id]
        if record.global_ref is not None:
            raise AlreadyInitialized(f"{cid!r} already has a global")
        self._exclusive()
        self._check_payload(payload)
        record.global_ref = self._rt.heap.allocate(cid.id, hold_value(payload), is_global=True)
        record.global_type = payload_type or type_of(payload, record.duration, cid)
        successor = Context(
            self._rt, ContextState(True, True, cid, None), self._duration
        )
        successor._pin = self._pin
        stack = self._rt.stack
        stack[stack.index(self)] = successor
        self._ended = True
        self._successor = successor
        return successor

    def global_(self) -> ManagedRef:
        """The current compartment's global object."""
        self._shared()
        compartment = self._state.compartment
        if not isinstance(compartment, CompartmentId):
            raise NoCompartment("no named current compartment")
        record = self._rt.compartments[compartment.id]
        target_record = self._rt.compartments[record.actual]
        if target_record.global_ref is None:
            raise NotInitialized(f"{compartment!r} has no global yet")
        payload_type = target_record.global_type
        if record.alias_of is None:
            duration = record.duration
        else:
            duration = self._duration
            payload_type = subst_compartment(payload_type, CompartmentId(record.actual), compartment)
        return ManagedRef(target_record.global_ref, duration, compartment, payload_type)

    def enter_known_compartment(self, ref: ManagedRef) -> "Context":
        """Return a nested context whose current compartment is ``ref``'s."""
        self._check_live()
        self._require_access()
        if not self._state.can_alloc:
            raise AllocDenied("context state cannot allocate")
        if ref.compartment is WILDCARD:
            raise WildcardAccess("use enter_unknown_compartment for wildcard references")
        self._exclusive()
        self._check_ref(ref)
        return self._push(ContextState(True, True, ref.compartment, None))

    def enter_unknown_compartment(self, ref: ManagedRef) -> "Context":
        """Enter a wildcard reference's compartment under a fresh name.

        The nested context pins the target while it lives; :meth:`entered`
        returns the reference rebranded with the fresh name.
        """
        self._check_live()
        self._require_access()
        if not self._state.can_alloc:
            raise AllocDenied("context state cannot allocate")
        if ref.compartment is not WILDCARD:
            raise BrandMismatch("enter_unknown_compartment expects a wildcard reference")
        self._exclusive()
        self._check_ref(ref)
        actual = self._rt.heap.header(ref.target).compartment
        fresh = self._fresh(alias_of=actual)
        child = self._push(ContextState(True, True, fresh, None))
        child._pin = self._rt.roots.new_root()
        pinned = child._pin.insert(ref)
        child._entered = ManagedRef(
            pinned.target,
            child._duration,
            fresh,
            subst_compartment(ref.payload_type, WILDCARD, fresh),
        )
        return child

    def entered(self) -> ManagedRef:
        self._check_live()
        if self._entered is None:
            raise UsageError("context was not produced by enter_unknown_compartment")
        return self._entered

    # -- lifetime -----------------------------------------------------

    def end(self) -> None:
        """End this nested context and resume its parent."""
        cx = self
        while cx._successor is not None:
            cx = cx._successor
        if cx._ended:
            return
        rt = self._rt
        if rt.stack[0] is cx:
            raise UsageError("the root context is ended by close()")
        if rt.stack[-1] is not cx:
            raise AlreadyActive("a context nested inside this one is still live")
        rt.stack.pop()
        cx._ended = True
        cx._duration.end()
        if cx._pin is not None:
            cx._pin.close()

    def __enter__(self) -> "Context":
        return self

    def __exit__(self, *exc) -> None:
        self.end()

    def close(self) -> int:
        """Tear the heap down, finalizing everything still live."""
        rt = self._rt
        if rt.stack[0] is not self:
            raise UsageError("only the root context can be closed")
        self._check_live()
        for cell in list(rt.roots.cells()):
            cell.clear()
        count = rt.heap.teardown()
        for record in rt.compartments.values():
            record.live = False
            record.duration.end()
            record.global_ref = None
        self._ended = True
        self._duration.end()
        rt.stack.clear()
        return count


class ReadView:
    """Shared view of a payload, nested references contracted to the grant."""

    def __init__(self, cx: Context, ref: ManagedRef):
        self._cx = cx
        self._ref = ref
        self._open = False

    def __enter__(self) -> Any:
        cx = self._cx
        cx._shared()
        cx._require_access()
        cx._check_named(self._ref)
        grant = cx._grant()
        value = contract_value(cx._rt.heap.read(self._ref.target), grant)
        cx._rt.readers += 1
        self._open = True
        return value

    def __exit__(self, *exc) -> None:
        if self._open:
            self._open = False
            self._cx._rt.readers -= 1


class WriteView:
    """The unique mutable view of one payload.

    Attribute and item reads return contracted values; writes store values
    rebranded as owner-held.  Valid only inside its ``with`` block.
    """

    __slots__ = ("_cx", "_ref", "_grant", "_open")

    def __init__(self, cx: Context, ref: ManagedRef):
        object.__setattr__(self, "_cx", cx)
        object.__setattr__(self, "_ref", ref)
        object.__setattr__(self, "_grant", None)
        object.__setattr__(self, "_open", False)

    def __enter__(self) -> "WriteView":
        cx = self._cx
        cx._check_live()
        cx._require_access()
        if self._ref.compartment is WILDCARD:
            raise WildcardAccess("enter the compartment of a wildcard reference first")
        cx._exclusive()
        cx._check_named(self._ref)
        object.__setattr__(self, "_grant", cx._grant())
        cx._rt.writer = True
        object.__setattr__(self, "_open", True)
        return self

    def __exit__(self, *exc) -> None:
        if self._open:
            object.__setattr__(self, "_open", False)
            self._cx._rt.writer = False

    def _payload(self) -> Any:
        if not self._open:
            raise ContextEnded("write view has ended")
        return self._cx._rt.heap.read(self._ref.target)

    def _store(self, value: Any) -> Any:
        self._cx._check_payload(value)
        return hold_value(value)

    def __getattr__(self, name: str) -> Any:
        return contract_value(getattr(self._payload(), name), self._grant)

    def __setattr__(self, name: str, value: Any) -> None:
        payload = self._payload()
        setattr(payload, name, self._store(value))

    def __getitem__(self, key: Any) -> Any:
        return contract_value(self._payload()[key], self._grant)

    def __setitem__(self, key: Any, value: Any) -> None:
        payload = self._payload()
        payload[key] = self._store(value)

    def get(self) -> Any:
        """Snapshot of the whole payload, contracted to this view's grant."""
        return contract_value(self._payload(), self._grant)

    def replace(self, new: Any) -> Any:
        """Install ``new`` as the payload and return the previous one."""
        self._payload()
        held = self._store(new)
        old = self._cx._rt.heap.write(self._ref.target, held)
        return contract_value(old, self._grant)
