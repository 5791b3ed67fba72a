from __future__ import annotations

import pytest

from capheap import new_context


def init_compartment(cx, global_payload="global"):
    """Create a compartment and return the initialized nested context."""
    return cx.create_compartment().global_manage(global_payload)


@pytest.fixture
def cx():
    return new_context(capacity=1 << 16, threshold=64)


@pytest.fixture
def zeal_cx():
    return new_context(capacity=1 << 16, threshold=64, zeal=True)


@pytest.fixture
def gcx(cx):
    return init_compartment(cx)
