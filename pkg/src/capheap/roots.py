"""Explicit stack rooting.

A :class:`RootCell` pins at most one reference.  Filled cells are linked
into their :class:`RootSet`, a doubly-linked registry with O(1) removal in
any order, which the collector iterates as its root set.

Typical use::

    with cx.new_root() as root:
        cell = cx.manage(NativeCell("a")).in_root(root)
        ...  # cell survives any collection until the block exits
"""

from __future__ import annotations

from typing import Callable, Iterator

from capheap.brands import ManagedRef, Scope, extend_duration
from capheap.errors import ContextEnded, RootOccupied
from capheap.heap import ObjectRef

__all__ = ["RootCell", "RootSet", "in_root", "new_root"]


class RootCell:
    __slots__ = ("_registry", "content", "prev", "next", "duration", "_ref", "_closed")

    def __init__(self, registry: "RootSet | None"):
        self._registry = registry
        self.content: ObjectRef | None = None
        self.prev: RootCell | None = None
        self.next: RootCell | None = None
        self.duration: Scope | None = None
        self._ref: ManagedRef | None = None
        self._closed = False

    @property
    def occupied(self) -> bool:
        return self.content is not None

    @property
    def ref(self) -> ManagedRef | None:
        """The rooted reference, branded with this root's duration."""
        return self._ref

    def insert(self, ref: ManagedRef) -> ManagedRef:
        """Pin ``ref``; return it rebranded to live as long as this root."""
        if self._closed:
            raise ContextEnded("root scope has ended")
        if self.content is not None:
            raise RootOccupied("root already holds a reference")
        registry = self._registry
        if registry.validate is not None:
            registry.validate(ref)
        self.duration = Scope("root")
        self.content = ref.target
        self._ref = extend_duration(ref, self.duration)
        registry._link(self)
        return self._ref

    def clear(self) -> None:
        """Unpin the content, ending the duration handed out by insert."""
        if self.content is None:
            return
        self._registry._unlink(self)
        self.content = None
        self._ref = None
        self.duration.end()

    def close(self) -> None:
        self.clear()
        self._closed = True

    def __enter__(self) -> "RootCell":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def __repr__(self) -> str:
        return f"RootCell({self.content})"


class RootSet:
    """Registry of filled root cells; iterating yields their targets."""

    def __init__(self, validate: Callable[[ManagedRef], None] | None = None):
        self.validate = validate
        self._head = RootCell(None)
        self._head.prev = self._head.next = self._head
        self._count = 0

    def new_root(self) -> RootCell:
        return RootCell(self)

    def _link(self, cell: RootCell) -> None:
        head = self._head
        last = head.prev
        cell.prev, cell.next = last, head
        last.next = cell
        head.prev = cell
        self._count += 1

    def _unlink(self, cell: RootCell) -> None:
        cell.prev.next = cell.next
        cell.next.prev = cell.prev
        cell.prev = cell.next = None
        self._count -= 1

    def cells(self) -> Iterator[RootCell]:
        head = self._head
        cell = head.next
        while cell is not head:
            nxt = cell.next
            yield cell
            cell = nxt

    def __iter__(self) -> Iterator[ObjectRef]:
        for cell in self.cells():
            yield cell.content

    def __len__(self) -> int:
        return self._count


def new_root(cx) -> RootCell:
    return cx.new_root()


def in_root(ref: ManagedRef, root: RootCell) -> ManagedRef:
    return root.insert(ref)
