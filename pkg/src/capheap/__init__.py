"""Managed heap gated by a context capability.

Allocation, access, mutation and collection of managed references all go
through a :class:`~capheap.context.Context`.  References are cheap copyable
handles; the context decides when they may be dereferenced, and rooting
decides what survives a collection.
"""

from capheap.brands import WILDCARD, CompartmentId, ManagedRef, forget_compartment
from capheap.context import Context, ContextState, new_context
from capheap.errors import *  # noqa: F403
from capheap.heap import CollectionStats, Heap, ObjectRef
from capheap.roots import RootCell, RootSet

__version__ = "0.1.0"
