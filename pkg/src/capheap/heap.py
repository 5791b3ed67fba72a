"""Non-moving slot arena with a mark-and-sweep collector.

Objects live in numbered slots that never move.  A reference is the pair
``(slot, generation)``; sweeping a slot bumps its generation and poisons the
payload, so a stale reference can never observe a reused slot.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable

from capheap import tracing
from capheap.errors import (
    AlreadyActive,
    CompartmentViolation,
    FinalizerReentrancy,
    OutOfMemory,
    UseAfterFree,
)

__all__ = [
    "POISON",
    "CollectionStats",
    "Heap",
    "HeapStats",
    "ObjectHeader",
    "ObjectRef",
]

Tracer = Callable[[Any, tracing.TraceVisitor], None]
Finalizer = Callable[[Any], None]


class _Poison:
    __slots__ = ()

    def __repr__(self) -> str:
        return "<poisoned>"


POISON = _Poison()
tracing.register_leaf(_Poison)


@dataclass(frozen=True, slots=True)
class ObjectRef:
    """Raw heap address: valid while ``generation`` matches the slot's."""

    slot: int
    generation: int

    def trace(self, visitor: tracing.TraceVisitor) -> None:
        visitor.visit(self)


@dataclass(slots=True)
class ObjectHeader:
    compartment: int
    generation: int
    tracer: Tracer
    finalizer: Finalizer | None = None
    is_global: bool = False
    marked: bool = False


@dataclass
class CollectionStats:
    """Outcome of one collection cycle."""

    live: int = 0
    freed: int = 0
    compartments_swept: int = 0
    finalizers_run: int = 0
    freed_refs: list[ObjectRef] = field(default_factory=list, repr=False, compare=False)


@dataclass
class HeapStats:
    """Running totals across every collection of a heap."""

    cycles: int = 0
    freed_total: int = 0
    finalizers_total: int = 0
    max_live: int = 0

    def record(self, stats: CollectionStats, live_now: int) -> None:
        self.cycles += 1
        self.freed_total += stats.freed
        self.finalizers_total += stats.finalizers_run
        self.max_live = max(self.max_live, live_now)


def _no_roots() -> tuple[Iterable[ObjectRef], Iterable[ObjectRef]]:
    return (), ()


class Heap:
    """Slot arena plus collector.

    ``root_provider`` is called whenever the heap collects on its own
    (zeal, threshold, or arena pressure) and must return ``(roots, globals)``.
    ``on_collect`` callbacks run after every cycle with its stats.
    """

    def __init__(
        self,
        capacity: int = 1 << 20,
        threshold: int = 64,
        zeal: bool = False,
        debug: bool = True,
    ):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        if threshold < 1:
            raise ValueError("threshold must be positive")
        self.capacity = capacity
        self.threshold = threshold
        self.zeal = zeal
        self.debug = debug
        self.root_provider: Callable[[], tuple[Iterable[ObjectRef], Iterable[ObjectRef]]] = _no_roots
        self.on_collect: list[Callable[[CollectionStats], None]] = []
        self.finalize_hook: Callable[[ObjectRef, Any], None] | None = None
        self.default_tracer: Tracer = tracing.trace
        self.stats = HeapStats()
        self.alloc_since_collect = 0
        self._headers: list[ObjectHeader | None] = []
        self._payloads: list[Any] = []
        self._generations: list[int] = []
        self._free: list[int] = []
        self._members: dict[int, set[int]] = {}
        self._live = 0
        self._collecting = False
        self._finalizing = False

    # -- compartments -------------------------------------------------

    def add_compartment(self, compartment: int) -> None:
        self._members.setdefault(compartment, set())

    @property
    def compartments(self) -> frozenset[int]:
        return frozenset(self._members)

    # -- allocation and access ----------------------------------------

    def _guard(self) -> None:
        if self._finalizing:
            raise FinalizerReentrancy("finalizers must not touch the heap")
        if self._collecting:
            raise AlreadyActive("heap is collecting")

    def _has_space(self) -> bool:
        return bool(self._free) or len(self._headers) < self.capacity

    def _auto_collect(self) -> None:
        roots, globals_ = self.root_provider()
        self.collect(roots, globals_)

    def allocate(
        self,
        compartment: int,
        payload: Any,
        tracer: Tracer | None = None,
        finalizer: Finalizer | None = None,
        is_global: bool = False,
    ) -> ObjectRef:
        self._guard()
        if compartment not in self._members:
            raise KeyError(f"compartment {compartment} is not registered")
        if tracer is None:
            tracer = self.default_tracer
        collected = False
        if self.zeal or self.alloc_since_collect >= self.threshold:
            self._auto_collect()
            collected = True
        if not self._has_space():
            if not collected:
                self._auto_collect()
            if not self._has_space():
                raise OutOfMemory(f"arena of {self.capacity} slots is full")
        if self.debug:
            # the payload's edges must have survived the collection above
            sink = []
            tracer(payload, tracing.TraceVisitor(sink.append))
            for edge in sink:
                if not self.is_valid(edge):
                    raise UseAfterFree(f"payload holds dangling reference {edge}")

        if self._free:
            slot = self._free.pop()
        else:
            slot = len(self._headers)
            self._headers.append(None)
            self._payloads.append(POISON)
            self._generations.append(0)
        generation = self._generations[slot] + 1
        self._generations[slot] = generation
        self._headers[slot] = ObjectHeader(compartment, generation, tracer, finalizer, is_global)
        self._payloads[slot] = payload
        self._members[compartment].add(slot)
        self._live += 1
        self.alloc_since_collect += 1
        return ObjectRef(slot, generation)

    def is_valid(self, ref: ObjectRef) -> bool:
        if not 0 <= ref.slot < len(self._headers):
            return False
        header = self._headers[ref.slot]
        return header is not None and header.generation == ref.generation

    def header(self, ref: ObjectRef) -> ObjectHeader:
        if not self.is_valid(ref):
            raise UseAfterFree(f"{ref} is not live")
        return self._headers[ref.slot]

    def read(self, ref: ObjectRef) -> Any:
        self._guard()
        if not self.is_valid(ref):
            raise UseAfterFree(f"{ref} is not live")
        return self._payloads[ref.slot]

    def write(self, ref: ObjectRef, payload: Any) -> Any:
        """Install ``payload`` in place of the current one and return the old."""
        self._guard()
        if not self.is_valid(ref):
            raise UseAfterFree(f"{ref} is not live")
        old = self._payloads[ref.slot]
        self._payloads[ref.slot] = payload
        return old

    def generation_of(self, slot: int) -> int:
        return self._generations[slot]

    def live_refs(self) -> set[ObjectRef]:
        return {
            ObjectRef(slot, h.generation)
            for slot, h in enumerate(self._headers)
            if h is not None
        }

    def live_in(self, compartment: int) -> set[ObjectRef]:
        headers = self._headers
        return {ObjectRef(s, headers[s].generation) for s in self._members.get(compartment, ())}

    def __len__(self) -> int:
        return self._live

    # -- collection ---------------------------------------------------

    def collect(
        self,
        roots: Iterable[ObjectRef] = (),
        globals_: Iterable[ObjectRef] = (),
        scope: int | None = None,
    ) -> CollectionStats:
        """Mark from ``roots`` and ``globals_`` and sweep what is unmarked.

        With ``scope`` set, only objects of that compartment are marked or
        swept; roots elsewhere are ignored.
        """
        self._guard()
        if scope is not None and scope not in self._members:
            raise KeyError(f"compartment {scope} is not registered")
        headers = self._headers
        payloads = self._payloads
        debug = self.debug
        marked: list[int] = []
        gray: list[int] = []
        edges: list[ObjectRef] = []
        visitor = tracing.TraceVisitor(edges.append)
        self._collecting = True
        try:
            for ref in itertools.chain(roots, globals_):
                if not self.is_valid(ref):
                    raise UseAfterFree(f"root {ref} is not live")
                header = headers[ref.slot]
                if scope is not None and header.compartment != scope:
                    continue
                if not header.marked:
                    header.marked = True
                    marked.append(ref.slot)
                    gray.append(ref.slot)

            n = len(headers)
            while gray:
                slot = gray.pop()
                header = headers[slot]
                owner = header.compartment
                visitor.owner = owner
                edges.clear()
                header.tracer(payloads[slot], visitor)
                for edge in edges:
                    target = headers[edge.slot] if edge.slot < n else None
                    if target is None or target.generation != edge.generation:
                        raise UseAfterFree(f"slot {slot} holds dangling edge {edge}")
                    if target.compartment != owner:
                        if debug:
                            raise CompartmentViolation(
                                f"slot {slot} in compartment {owner} points at "
                                f"slot {edge.slot} in compartment {target.compartment}"
                            )
                        if scope is not None:
                            continue
                    if not target.marked:
                        target.marked = True
                        marked.append(edge.slot)
                        gray.append(edge.slot)

            if scope is None:
                candidates: Iterable[int] = range(n)
                swept = len(self._members)
            else:
                candidates = sorted(self._members[scope])
                swept = 1
            stats = CollectionStats(compartments_swept=swept)
            garbage = []
            for slot in candidates:
                header = headers[slot]
                if header is None:
                    continue
                if header.marked:
                    stats.live += 1
                else:
                    garbage.append(slot)
        finally:
            for slot in marked:
                headers[slot].marked = False
            self._collecting = False

        failure = self._sweep(garbage, stats)
        self.alloc_since_collect = 0
        self.stats.record(stats, self._live)
        if failure is not None:
            raise failure
        for callback in list(self.on_collect):
            callback(stats)
        return stats

    def _sweep(self, garbage: list[int], stats: CollectionStats) -> BaseException | None:
        failure = None
        for slot in garbage:
            ref = ObjectRef(slot, self._headers[slot].generation)
            err = self._release(slot)
            failure = failure or err
            stats.freed += 1
            stats.finalizers_run += 1
            stats.freed_refs.append(ref)
        return failure

    def _release(self, slot: int) -> BaseException | None:
        header = self._headers[slot]
        payload = self._payloads[slot]
        ref = ObjectRef(slot, header.generation)
        failure = None
        self._finalizing = True
        try:
            if header.finalizer is not None:
                header.finalizer(payload)
            if self.finalize_hook is not None:
                self.finalize_hook(ref, payload)
        except Exception as exc:  # sweep must finish; report after
            failure = exc
        finally:
            self._finalizing = False
        self._headers[slot] = None
        self._payloads[slot] = POISON
        self._generations[slot] += 1
        self._members[header.compartment].discard(slot)
        self._free.append(slot)
        self._live -= 1
        return failure

    def teardown(self) -> int:
        """Finalize every remaining object in slot order; return the count."""
        self._guard()
        count = 0
        failure = None
        for slot, header in enumerate(self._headers):
            if header is not None:
                err = self._release(slot)
                failure = failure or err
                count += 1
        self.stats.finalizers_total += count
        if failure is not None:
            raise failure
        return count

    # -- debugging ----------------------------------------------------

    def dump(self) -> str:
        """Render ``slot,gen,compartment,marked,edges`` lines in slot order."""
        lines = ["slot,gen,compartment,marked,edges"]
        for slot, header in enumerate(self._headers):
            if header is None:
                continue
            sink: list[ObjectRef] = []
            header.tracer(self._payloads[slot], tracing.TraceVisitor(sink.append))
            edges = ";".join(str(e.slot) for e in sorted(sink, key=lambda e: e.slot))
            lines.append(
                f"{slot},{header.generation},{header.compartment},"
                f"{int(header.marked)},{edges}"
            )
        return "\n".join(lines) + "\n"
