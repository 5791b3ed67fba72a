"""A doubly-linked list whose cells are managed references.

Each cell is a :class:`NativeCell` payload reached through a ``ManagedRef``.
The operations follow the rooting discipline: any reference that must
survive an allocation or a write is rooted first.
"""

from __future__ import annotations

from dataclasses import dataclass

from capheap.brands import ManagedRef, Managed, Nominal
from capheap.context import Context
from capheap.errors import CompartmentViolation, CycleDetected
from capheap.roots import RootCell
from capheap.tracing import traceable

__all__ = [
    "NativeCell",
    "cell_type",
    "insert",
    "is_consistent",
    "new_list",
    "replace",
    "traverse",
    "unlink",
]


@traceable
@dataclass
class NativeCell:
    data: str
    prev: ManagedRef | None = None
    next: ManagedRef | None = None

    @staticmethod
    def __brand__(duration, compartment) -> Nominal:
        return Nominal("NativeCell", (duration,), (compartment,))


def cell_type(duration, compartment) -> Managed:
    """``Cell<'a, C>``: a managed reference to a ``NativeCell<'a, C>``."""
    return Managed(duration, compartment, NativeCell.__brand__(duration, compartment))


def new_list(cx: Context, data: str, root: RootCell) -> ManagedRef:
    """Allocate a single unlinked cell and pin it in ``root``."""
    return cx.manage(NativeCell(data)).in_root(root)


def _require_home(cell: ManagedRef, cx: Context) -> None:
    here = cx.state.compartment
    if cx.resolve(here) != cx.resolve(cell.compartment):
        raise CompartmentViolation(
            f"cell lives in {cell.compartment!r}, context is in {here!r}"
        )


def insert(cell: ManagedRef, data: str, cx: Context) -> None:
    """Splice a new cell holding ``data`` right after ``cell``.

    ``cell`` must be rooted by the caller and ``cx`` must be in its
    compartment.
    """
    _require_home(cell, cx)
    with cx.new_root() as root1, cx.new_root() as root2:
        old_next = cx.read(cell).next
        if old_next is not None:
            old_next = old_next.in_root(root1)
        new_next = cx.manage(NativeCell(data, prev=cell, next=old_next)).in_root(root2)
        with cx.access_exclusive(cell) as view:
            view.next = new_next
        if old_next is not None:
            with cx.access_exclusive(old_next) as view:
                view.prev = new_next


def replace(cell: ManagedRef, new_data: str, cx: Context) -> str:
    """Swap the cell's data for ``new_data`` and return the old data."""
    with cx.access_exclusive(cell) as view:
        old = view.data
        view.data = new_data
    return old


def unlink(cell: ManagedRef, cx: Context) -> None:
    """Detach everything after ``cell``; the tail becomes its own list."""
    with cx.new_root() as root:
        nxt = cx.read(cell).next
        if nxt is None:
            return
        nxt = nxt.in_root(root)
        with cx.access_exclusive(cell) as view:
            view.next = None
        with cx.access_exclusive(nxt) as view:
            view.prev = None


def traverse(cell: ManagedRef, cx: Context) -> list[str]:
    """Data of ``cell`` and every cell after it."""
    out: list[str] = []
    limit = len(cx.heap)
    cur = cell
    while cur is not None:
        if len(out) > limit:
            raise CycleDetected("next-chain longer than the heap")
        node = cx.read(cur)
        out.append(node.data)
        cur = node.next
    return out


def is_consistent(cx: Context, starts) -> bool:
    """Check ``a.next = b`` iff ``b.prev = a`` over every cell reachable from ``starts``."""
    seen = set()
    todo = list(starts)
    while todo:
        ref = todo.pop()
        if ref.target in seen:
            continue
        seen.add(ref.target)
        node = cx.read(ref)
        for neighbour, back_field in ((node.next, "prev"), (node.prev, "next")):
            if neighbour is None:
                continue
            back = getattr(cx.read(neighbour), back_field)
            if back is None or back.target != ref.target:
                return False
            todo.append(neighbour)
    return True
