from __future__ import annotations

import copy
from collections import namedtuple
from dataclasses import dataclass

import pytest
from hypothesis import given
from hypothesis import strategies as st

from capheap.brands import (
    HELD,
    STATIC,
    WILDCARD,
    Base,
    CompartmentId,
    Duration,
    Grant,
    Managed,
    ManagedRef,
    Nominal,
    Option,
    Product,
    Scope,
    Seq,
    contract_duration,
    contract_value,
    extend_duration,
    forget_compartment,
    hold_value,
    iter_refs,
    map_refs,
    subst_compartment,
    substitute,
    type_of,
)
from capheap.dll import NativeCell, cell_type
from capheap.errors import BrandMismatch, CompartmentViolation, WildcardAccess
from capheap.heap import ObjectRef
from tests.conftest import init_compartment

A, B, G = Duration("a"), Duration("b"), Duration("g")
C0, C1 = CompartmentId(0), CompartmentId(1)


def terms(durations, compartments):
    atom = st.one_of(
        st.sampled_from([Base("int"), Base("str")]),
        st.builds(
            Nominal,
            st.just("N"),
            st.lists(st.sampled_from(durations), max_size=2).map(tuple),
            st.lists(st.sampled_from(compartments), max_size=2).map(tuple),
        ),
    )

    def extend(inner):
        return st.one_of(
            st.builds(Managed, st.sampled_from(durations), st.sampled_from(compartments), inner),
            st.builds(Option, inner),
            st.builds(Seq, inner),
            st.lists(st.tuples(st.sampled_from("xyz"), inner), max_size=3)
            .map(lambda fs: Product(tuple(fs), "P")),
        )

    return st.recursive(atom, extend, max_leaves=8)


TERMS = terms([A, B], [C0, C1, WILDCARD])


def atoms(term):
    """All duration and compartment atoms of ``term``."""
    if isinstance(term, Base):
        return set()
    if isinstance(term, Managed):
        return {term.duration, term.compartment} | atoms(term.payload)
    if isinstance(term, (Option, Seq)):
        return atoms(term.item)
    if isinstance(term, Product):
        return set().union(*(atoms(f) for _, f in term.fields))
    return set(term.durations) | set(term.compartments)


# -- term laws ----------------------------------------------------------


@given(TERMS)
def test_identity_substitution(term):
    assert substitute(term, {A: A}, {C0: C0}) == term
    assert contract_duration(term, A, A) == term


@given(TERMS)
def test_substitution_is_homomorphic(term):
    wrapped = Product((("f", term), ("g", Option(Seq(term)))), "W")
    out = contract_duration(wrapped, G, A)
    inner = contract_duration(term, G, A)
    assert out == Product((("f", inner), ("g", Option(Seq(inner)))), "W")


@given(TERMS)
def test_contraction_removes_old_duration(term):
    out = contract_duration(term, G, A)
    assert A not in atoms(out)
    # fresh G round-trips back to the original
    assert contract_duration(out, A, G) == term


@given(TERMS)
def test_compartment_substitution_round_trips_through_fresh_name(term):
    fresh = CompartmentId(99)
    there = subst_compartment(term, C0, fresh)
    assert C0 not in atoms(there)
    assert subst_compartment(there, fresh, C0) == term


@given(TERMS)
def test_forget_is_idempotent_on_terms(term):
    once = subst_compartment(term, C0, WILDCARD)
    assert subst_compartment(once, C0, WILDCARD) == once


def test_cell_type_contracts_both_positions():
    assert contract_duration(cell_type(A, C0), G, A) == cell_type(G, C0)
    assert subst_compartment(cell_type(A, C0), C0, WILDCARD) == cell_type(A, WILDCARD)


def test_substitute_rejects_non_terms():
    with pytest.raises(TypeError):
        substitute("nope")


# -- durations ----------------------------------------------------------


def test_scope_and_grant_liveness():
    scope = Scope("s")
    epoch = [0]
    grant = Grant("g", lambda: epoch[0], scope)
    assert scope.alive and grant.alive
    epoch[0] += 1
    assert not grant.alive
    fresh = Grant("g2", lambda: epoch[0], scope)
    scope.end()
    assert not fresh.alive and not scope.alive
    assert STATIC.alive and HELD.alive


# -- references ---------------------------------------------------------


def _ref(slot=0, duration=A, compartment=C0):
    return ManagedRef(ObjectRef(slot, 1), duration, compartment, NativeCell.__brand__(duration, compartment))


def test_refs_are_copyable_values():
    r = _ref()
    assert copy.copy(r) == r and copy.deepcopy(r).target == r.target
    s = r
    assert s is r and hash(s) == hash(r)


def test_extend_rebrands_duration_and_payload():
    r = _ref()
    out = extend_duration(r, B)
    assert out.duration is B and out.payload_type == NativeCell.__brand__(B, C0)
    assert out.target == r.target


def test_forget_compartment_is_idempotent():
    r = _ref()
    once = forget_compartment(r)
    assert once.compartment is WILDCARD
    assert once.payload_type == NativeCell.__brand__(A, WILDCARD)
    assert forget_compartment(once) is once
    assert r.forget_compartment() == once


def test_map_refs_rebuilds_containers():
    Pair = namedtuple("Pair", "x y")

    @dataclass(frozen=True)
    class Frozen:
        inner: object

    r = _ref()
    value = [Pair(r, 1), {"k": (r,)}, Frozen(r), {r}, NativeCell("d", prev=r)]
    held = hold_value(value)
    refs = iter_refs(held)
    assert len(refs) == 5 and all(x.duration is HELD for x in refs)
    assert isinstance(held[0], Pair) and isinstance(held[2], Frozen)
    # the original is untouched
    assert all(x.duration is A for x in iter_refs(value))
    back = contract_value(held, G)
    assert all(x.duration is G for x in iter_refs(back))


def test_type_of_uses_class_brand():
    assert type_of(NativeCell("x"), A, C0) == Nominal("NativeCell", (A,), (C0,))
    assert type_of("s", A, C0) == Base("str")
    assert type_of((1, None), A, C0) == Product((("0", Base("int")), ("1", Base("unit"))))


# -- compartments through contexts --------------------------------------


def test_heterogeneous_list_of_compartments(cx):
    # globals carry a compartment-long duration, so they outlive the nested contexts
    globals_ = []
    for i in range(3):
        with init_compartment(cx, NativeCell(f"g{i}")) as inner:
            globals_.append(forget_compartment(inner.global_()))
    # a plain list mixes what were distinct brands
    assert {g.compartment for g in globals_} == {WILDCARD}
    seen = []
    for g in globals_:
        with cx.enter_unknown_compartment(g) as inner:
            here = inner.entered()
            assert isinstance(here.compartment, CompartmentId)
            seen.append(inner.read(here).data)
    assert seen == ["g0", "g1", "g2"]


def test_wildcard_cannot_be_read_without_entering(gcx):
    g = forget_compartment(gcx.global_())
    with pytest.raises(WildcardAccess):
        gcx.read(g)
    with pytest.raises(WildcardAccess):
        gcx.enter_known_compartment(g)
    with pytest.raises(BrandMismatch):
        gcx.enter_unknown_compartment(gcx.global_())


def test_enter_unknown_uses_fresh_name_for_same_compartment(gcx):
    g = gcx.global_()
    with gcx.enter_unknown_compartment(forget_compartment(g)) as inner:
        here = inner.entered()
        assert here.compartment != g.compartment
        assert inner.resolve(here.compartment) == gcx.resolve(g.compartment)
        assert inner.read(here) == "global"
        assert inner.global_().target == g.target


def test_brand_header_disagreement_detected(cx):
    with init_compartment(cx, "one") as c1:
        g1 = c1.global_()
    with init_compartment(cx, "two") as c2:
        forged = ManagedRef(g1.target, c2.global_().duration, c2.state.compartment, g1.payload_type)
        with pytest.raises(CompartmentViolation):
            c2.read(forged)
