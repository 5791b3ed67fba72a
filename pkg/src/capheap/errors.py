"""Exception hierarchy for the managed heap.

Errors split into two families.  ``DisciplineViolation`` subclasses fire when
a program breaks the safety discipline (stale references, cross-compartment
edges, re-entrant finalizers).  The demo corpus and the stress harness must
never trigger them; the negative corpus triggers each one on purpose.
``UsageError`` subclasses report a capability or state precondition that was
not met, the dynamic twin of a type error.
"""

from __future__ import annotations


class HeapError(Exception):
    """Base class for every error raised by capheap."""


class DisciplineViolation(HeapError):
    """A memory-safety rule was broken."""


class UseAfterFree(DisciplineViolation):
    """A reference was used after its target was reclaimed."""


class BorrowExpired(UseAfterFree):
    """A reference outlived the duration it is branded with.

    Raised before any heap read happens: the target may still be live, but
    nothing guarantees it, so the use counts as a use-after-free hazard.
    """


class CompartmentViolation(DisciplineViolation):
    """An edge or brand crosses a compartment boundary."""


class FinalizerReentrancy(DisciplineViolation):
    """A finalizer tried to touch the heap."""


class OutOfMemory(HeapError):
    """The arena is full even after a forced collection."""


class UsageError(HeapError):
    """An operation was invoked in a state that does not permit it."""


class NoCompartment(UsageError):
    """The context has no named current compartment."""


class WildcardAccess(UsageError):
    """A wildcard-branded reference was accessed without entering it."""


class AccessDenied(UsageError):
    """The context state lacks permission to access managed data."""


class AllocDenied(UsageError):
    """The context state lacks permission to allocate."""


class AlreadyActive(UsageError):
    """A conflicting view or nested context is outstanding."""


class ContextSuspended(AlreadyActive):
    """The context is suspended while a nested context is live."""


class ContextEnded(UsageError):
    """The context has ended or was consumed by a state transition."""


class WrongThread(UsageError):
    """The context was used from a thread other than its owner."""


class AlreadyInitialized(UsageError):
    """The compartment global has already been set."""


class NotInitialized(UsageError):
    """The compartment has no global yet, or the context is not initializing."""


class RootOccupied(UsageError):
    """The root cell already pins a reference."""


class BrandMismatch(UsageError):
    """A reference carries the wrong kind of brand for the operation."""


class CycleDetected(HeapError):
    """A list traversal did not terminate within the heap size."""


class ConfigMismatch(HeapError):
    """A replay was requested with a configuration different from the report."""
