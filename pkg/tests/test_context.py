from __future__ import annotations

import threading
from dataclasses import dataclass

import pytest
from hypothesis import settings
from hypothesis import strategies as st
from hypothesis.stateful import RuleBasedStateMachine, invariant, rule

from capheap import dll, new_context
from capheap.brands import WILDCARD, CompartmentId, forget_compartment
from capheap.context import ContextState
from capheap.dll import NativeCell
from capheap.errors import (
    AccessDenied,
    AlreadyActive,
    AlreadyInitialized,
    BorrowExpired,
    ContextEnded,
    ContextSuspended,
    NoCompartment,
    NotInitialized,
    UsageError,
    UseAfterFree,
    WrongThread,
)
from tests.conftest import init_compartment


@dataclass
class MyGlobal:
    name: object


# -- new_context ---------------------------------------------------------


def test_new_context_starts_empty():
    cx = new_context(1024, 64, False)
    assert cx.state == ContextState(True, True, None, None)
    assert len(cx.heap) == 0 and cx.compartment_ids() == []


def test_zeal_collects_on_every_allocation(zeal_cx):
    with init_compartment(zeal_cx) as inner:
        before = inner.stats.cycles
        for i in range(20):
            inner.manage(str(i))
        assert inner.stats.cycles - before == 20


def test_contexts_on_two_threads_are_independent():
    results = {}

    def worker(name):
        cx = new_context()
        with init_compartment(cx, name) as inner:
            for _ in range(10):
                inner.manage("x")
            results[name] = (len(cx.heap), inner.read(inner.global_()))

    threads = [threading.Thread(target=worker, args=(n,)) for n in ("t1", "t2")]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert results == {"t1": (11, "t1"), "t2": (11, "t2")}


def test_context_is_thread_confined(gcx):
    errors = []

    def worker():
        try:
            gcx.manage("x")
        except WrongThread as exc:
            errors.append(exc)

    t = threading.Thread(target=worker)
    t.start()
    t.join()
    assert len(errors) == 1


# -- manage / access -----------------------------------------------------


def test_manage_then_access(gcx):
    ref = gcx.manage("hello")
    with gcx.access(ref) as msg:
        assert msg == "hello"


def test_manage_without_compartment(cx):
    with pytest.raises(NoCompartment):
        cx.manage("hello")


def test_zeal_manage_reclaims_prior_unrooted(zeal_cx):
    runs = []
    with init_compartment(zeal_cx) as inner:
        inner.manage("old", finalizer=runs.append)
        inner.manage("new")
    assert runs == ["old"]


def test_access_unit_payload(gcx):
    assert gcx.read(gcx.manage(None)) is None


def test_nested_ref_is_contracted_to_the_grant(gcx):
    with gcx.new_root() as root:
        head = dll.new_list(gcx, "a", root)
        dll.insert(head, "b", gcx)
        nxt = gcx.read(head).next
        grant = nxt.duration
        assert grant.alive and grant is not head.duration
        gcx.manage("anything")
        assert not grant.alive
        with pytest.raises(BorrowExpired):
            gcx.read(nxt)


def test_access_outside_current_compartment_is_allowed(cx):
    with init_compartment(cx, "one") as c1:
        g1 = c1.global_()
    with init_compartment(cx, "two") as c2:
        assert c2.read(g1) == "one"


# -- access_exclusive ----------------------------------------------------


def test_replace_returns_old_payload(gcx):
    with gcx.new_root() as root:
        cell = gcx.manage(NativeCell("old")).in_root(root)
        with gcx.access_exclusive(cell) as view:
            old = view.replace(NativeCell("new"))
        assert old.data == "old"
        assert gcx.read(cell).data == "new"


def test_two_exclusive_views_rejected(gcx):
    g = gcx.global_()
    with gcx.access_exclusive(g):
        with pytest.raises(AlreadyActive):
            gcx.access_exclusive(g).__enter__()
        with pytest.raises(AlreadyActive):
            gcx.read(g)


def test_exclusive_view_blocked_by_reader(gcx):
    g = gcx.global_()
    with gcx.access(g):
        with gcx.access(g) as again:
            assert again == "global"
        with pytest.raises(AlreadyActive):
            gcx.access_exclusive(g).__enter__()
        with pytest.raises(AlreadyActive):
            gcx.gc()


def test_write_view_dead_after_block(gcx):
    with gcx.new_root() as root:
        cell = gcx.manage(NativeCell("x")).in_root(root)
        with gcx.access_exclusive(cell) as view:
            pass
        with pytest.raises(ContextEnded):
            view.data = "y"


def test_unlinked_node_freed_unless_rooted(gcx):
    with gcx.new_root() as root:
        head = dll.new_list(gcx, "a", root)
        dll.insert(head, "b", gcx)
        dll.insert(head, "c", gcx)
        with gcx.new_root() as keep:
            tail = gcx.read(head).next.in_root(keep)
            dll.unlink(head, gcx)
            gcx.gc()
            assert dll.traverse(tail, gcx) == ["c", "b"]
        stats = gcx.gc()
        assert stats.freed == 2
        assert dll.traverse(head, gcx) == ["a"]


# -- collection ---------------------------------------------------------


def test_collection_counts(gcx):
    assert gcx.gc().freed == 0
    gcx.manage("garbage")
    assert gcx.gc().freed == 1


def test_collect_single_compartment(cx):
    with init_compartment(cx) as c1:
        c1.manage("junk1")
        cid1 = c1.state.compartment
    with init_compartment(cx) as c2:
        c2.manage("junk2")
        stats = c2.collect_compartment(cid1)
        assert stats.freed == 1 and stats.compartments_swept == 1
        assert len(cx.heap) == 3


# -- compartments --------------------------------------------------------


def test_created_compartments_are_fresh(cx):
    seen = set()
    for _ in range(5):
        with init_compartment(cx) as inner:
            seen.add(inner.state.compartment)
    assert len(seen) == 5


def test_initializing_context_cannot_access(cx):
    g = init_compartment(cx)
    ref = g.global_()
    g.end()
    init = cx.create_compartment()
    assert init.state.initializing is not None and not init.state.can_access
    with pytest.raises(AccessDenied):
        init.read(ref)


def test_global_record_holds_managed_name(cx):
    init = cx.create_compartment()
    with init.new_root() as root:
        name = init.manage("Alice").in_root(root)
        ready = init.global_manage(MyGlobal(name))
    with ready:
        glob = ready.read(ready.global_())
        assert ready.read(glob.name) == "Alice"
        for _ in range(3):
            ready.gc()
        assert ready.read(ready.read(ready.global_()).name) == "Alice"


def test_global_manage_alice(cx):
    with cx.create_compartment().global_manage("Alice") as ready:
        assert ready.read(ready.global_()) == "Alice"


def test_global_manage_twice(gcx):
    with pytest.raises(AlreadyInitialized):
        gcx.global_manage("again")


def test_global_manage_outside_initialization(cx):
    with pytest.raises(NotInitialized):
        cx.global_manage("x")


def test_global_manage_consumes_the_initializing_context(cx):
    init = cx.create_compartment()
    ready = init.global_manage("g")
    with pytest.raises(ContextEnded):
        init.manage("x")
    init.end()  # ends the successor
    assert not ready.active and cx.active


def test_global_is_stable(gcx):
    assert gcx.global_() == gcx.global_()


def test_global_uninitialized_and_missing(cx):
    with pytest.raises(NoCompartment):
        cx.global_()
    init = cx.create_compartment()
    with pytest.raises(NotInitialized):
        init.global_()


def test_enter_known_allocates_in_that_compartment(cx):
    with init_compartment(cx) as c1:
        g1 = c1.global_()
    with cx.enter_known_compartment(g1) as inner:
        y = inner.manage("hello")
        assert cx.heap.header(y.target).compartment == g1.compartment.id
        assert inner.depth == 2
    assert cx.depth == 1 and cx.active


def test_enter_current_compartment(gcx):
    with gcx.enter_known_compartment(gcx.global_()) as inner:
        assert inner.state.compartment == gcx.state.compartment
    assert gcx.active


def test_enter_stale_ref(gcx):
    ref = gcx.manage("x")
    gcx.gc()
    with pytest.raises(UseAfterFree):
        gcx.enter_known_compartment(ref)


def test_enter_unknown_reads_hello(gcx):
    with gcx.new_root() as root:
        x = forget_compartment(gcx.manage("hello")).in_root(root)
        assert x.compartment is WILDCARD
        with gcx.enter_unknown_compartment(x) as inner:
            here = inner.entered()
            assert isinstance(here.compartment, CompartmentId)
            assert here.compartment not in gcx.compartment_ids()
            assert inner.read(here) == "hello"


def test_parent_suspended_while_child_lives(gcx):
    child = gcx.enter_known_compartment(gcx.global_())
    with pytest.raises(ContextSuspended):
        gcx.manage("x")
    with pytest.raises(AlreadyActive):
        gcx.end()
    child.end()
    gcx.manage("x")


def test_root_context_cannot_end(cx):
    with pytest.raises(UsageError):
        cx.end()


def test_close_finalizes_everything():
    runs = []
    cx = new_context()
    with init_compartment(cx) as inner:
        with inner.new_root() as root:
            inner.manage("kept", finalizer=runs.append).in_root(root)
            inner.manage("loose", finalizer=runs.append)
    assert cx.close() == 3
    assert sorted(runs) == ["kept", "loose"]
    with pytest.raises(ContextEnded):
        cx.gc()


# -- state machine against a shadow model -------------------------------


class ContextModel(RuleBasedStateMachine):
    """Drive random operations and compare accept/reject with a shadow model.

    Frames in the model are ``"root"``, ``"init"`` or ``"ready"``.
    """

    def __init__(self):
        super().__init__()
        self.cx = new_context(capacity=4096, threshold=16)
        self.live = [self.cx]
        self.kinds = ["root"]
        self.ended = []
        self.views = []

    def _expect(self, expected, fn):
        if expected is None:
            return fn()
        with pytest.raises(expected) as info:
            fn()
        assert type(info.value) is expected
        return None

    def _blocked(self, i):
        if i != len(self.live) - 1:
            return ContextSuspended
        return None

    @rule(i=st.integers(0, 8))
    def create(self, i):
        i %= len(self.live)
        kind = self.kinds[i]
        expected = self._blocked(i) or (AccessDenied if kind == "init" else None) \
            or (AlreadyActive if self.views else None)
        child = self._expect(expected, self.live[i].create_compartment)
        if child is not None:
            self.live.append(child)
            self.kinds.append("init")

    @rule(i=st.integers(0, 8))
    def global_manage(self, i):
        i %= len(self.live)
        kind = self.kinds[i]
        expected = self._blocked(i) or {
            "root": NotInitialized, "ready": AlreadyInitialized
        }.get(kind) or (AlreadyActive if self.views else None)
        old = self.live[i]
        new = self._expect(expected, lambda: old.global_manage("g"))
        if new is not None:
            self.live[i] = new
            self.kinds[i] = "ready"
            self.ended.append(old)

    @rule(i=st.integers(0, 8))
    def manage(self, i):
        i %= len(self.live)
        expected = self._blocked(i) or (NoCompartment if self.kinds[i] == "root" else None) \
            or (AlreadyActive if self.views else None)
        self._expect(expected, lambda: self.live[i].manage("x"))

    @rule(i=st.integers(0, 8))
    def gc(self, i):
        i %= len(self.live)
        expected = self._blocked(i) or (AlreadyActive if self.views else None)
        self._expect(expected, self.live[i].gc)

    @rule()
    def open_view(self):
        top = self.live[-1]
        if self.kinds[-1] != "ready":
            return
        view = top.access(top.global_())
        assert view.__enter__() == "g"
        self.views.append(view)

    @rule()
    def close_view(self):
        if self.views:
            self.views.pop().__exit__(None, None, None)

    @rule(i=st.integers(0, 8))
    def end(self, i):
        i %= len(self.live)
        expected = UsageError if i == 0 else self._blocked(i) and AlreadyActive
        self._expect(expected, self.live[i].end)
        if expected is None:
            self.ended.append(self.live.pop())
            self.kinds.pop()

    @rule(j=st.integers(0, 8))
    def use_ended(self, j):
        if self.ended:
            cx = self.ended[j % len(self.ended)]
            self._expect(ContextEnded, lambda: cx.manage("x"))

    @invariant()
    def stack_agrees(self):
        assert self.cx.depth == len(self.live)
        assert self.live[-1].active
        assert all(not cx.active for cx in self.live[:-1])


TestContextModel = ContextModel.TestCase
TestContextModel.settings = settings(max_examples=60, stateful_step_count=40, deadline=None)
