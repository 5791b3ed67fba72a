"""Randomized stress harness with a brute-force reachability oracle.

The harness drives random list operations through the public API while
mirroring every edge and root it creates in a :class:`ShadowGraph`.  After
every collection, including the ones triggered inside an allocation, the
heap's occupied set must equal the shadow graph's breadth-first reachable
set, exactly.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import random
import sys
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Any, Iterable

from capheap import dll
from capheap.brands import WILDCARD, ManagedRef
from capheap.context import Context, new_context
from capheap.errors import ConfigMismatch, DisciplineViolation
from capheap.heap import CollectionStats, ObjectRef
from capheap.roots import RootCell
from capheap.tracing import trace

__all__ = [
    "CATEGORIES",
    "ShadowGraph",
    "StressConfig",
    "StressHarness",
    "main",
    "replay",
    "run_stress",
]

CATEGORIES = ("mutation", "allocation", "rooting", "compartment", "collect")
DEFAULT_MIX = (40.0, 25.0, 15.0, 10.0, 10.0)
REPORT_KEYS = ("seed", "ops", "cycles", "freed_total", "max_live", "violations")


class ShadowGraph:
    """Independent mirror of heap edges, roots and globals."""

    def __init__(self):
        self.nodes: set[ObjectRef] = set()
        self.edges: dict[ObjectRef, Counter] = {}
        self.roots: Counter = Counter()
        self.globals: dict[int, ObjectRef] = {}

    def add_node(self, ref: ObjectRef) -> None:
        self.nodes.add(ref)
        self.edges.setdefault(ref, Counter())

    def set_edges(self, ref: ObjectRef, targets: Iterable[ObjectRef | None]) -> None:
        self.edges[ref] = Counter(t for t in targets if t is not None)

    def add_edge(self, src: ObjectRef, dst: ObjectRef) -> None:
        self.edges[src][dst] += 1

    def remove_edge(self, src: ObjectRef, dst: ObjectRef) -> None:
        counts = self.edges[src]
        counts[dst] -= 1
        if counts[dst] <= 0:
            del counts[dst]

    def add_root(self, ref: ObjectRef) -> None:
        self.roots[ref] += 1

    def remove_root(self, ref: ObjectRef) -> None:
        self.roots[ref] -= 1
        if self.roots[ref] <= 0:
            del self.roots[ref]

    def reachable(self) -> set[ObjectRef]:
        seen: set[ObjectRef] = set()
        queue = deque()
        for ref in list(self.roots) + list(self.globals.values()):
            if ref not in seen:
                seen.add(ref)
                queue.append(ref)
        while queue:
            ref = queue.popleft()
            for dst in self.edges.get(ref, ()):
                if dst not in seen:
                    seen.add(dst)
                    queue.append(dst)
        return seen

    def drop(self, refs: Iterable[ObjectRef]) -> None:
        for ref in refs:
            self.nodes.discard(ref)
            self.edges.pop(ref, None)


@dataclass(frozen=True)
class StressConfig:
    ops: int = 1000
    seed: int = 0
    zeal: bool = False
    compartments: int = 4
    threshold: int = 64
    mix: tuple[float, ...] = DEFAULT_MIX
    report_path: str | None = None
    max_roots: int = 12
    capacity: int = 1 << 20
    check_durations: bool = True
    inject: str | None = None

    def __post_init__(self):
        if self.ops < 0:
            raise ValueError("ops must be non-negative")
        if self.compartments < 1:
            raise ValueError("need at least one compartment")
        if self.threshold < 1:
            raise ValueError("threshold must be positive")
        if len(self.mix) != len(CATEGORIES) or any(w < 0 for w in self.mix) or sum(self.mix) <= 0:
            raise ValueError(f"mix needs {len(CATEGORIES)} non-negative weights with a positive sum")
        if self.inject not in (None, "skip-edge"):
            raise ValueError(f"unknown fault injection {self.inject!r}")

    def fingerprint(self) -> dict[str, Any]:
        """Everything that determines the trace, in a JSON-friendly form."""
        return {
            "ops": self.ops,
            "seed": self.seed,
            "zeal": self.zeal,
            "compartments": self.compartments,
            "threshold": self.threshold,
            "mix": [float(w) for w in self.mix],
            "max_roots": self.max_roots,
            "capacity": self.capacity,
            "check_durations": self.check_durations,
            "inject": self.inject,
        }


class _Divergence(Exception):
    pass


@dataclass
class _Mirror:
    data: str
    compartment: int
    prev: ObjectRef | None = None
    next: ObjectRef | None = None


def _skip_next_edge(payload, visitor) -> None:
    # deliberately broken tracer for harness self-tests
    if isinstance(payload, dll.NativeCell):
        if payload.prev is not None:
            visitor.visit(payload.prev.target)
        return
    trace(payload, visitor)


@dataclass
class StressHarness:
    config: StressConfig
    cx: Context = field(init=False)
    shadow: ShadowGraph = field(init=False, default_factory=ShadowGraph)
    mirror: dict[ObjectRef, _Mirror] = field(init=False, default_factory=dict)
    globals: list[ManagedRef] = field(init=False, default_factory=list)
    roots: list[RootCell] = field(init=False, default_factory=list)
    op_counts: Counter = field(init=False, default_factory=Counter)
    cycles_checked: int = 0
    max_live: int = 0
    failure: dict[str, Any] | None = None

    def __post_init__(self):
        cfg = self.config
        self.rng = random.Random(cfg.seed)
        self.digest = hashlib.sha256()
        self.cx = new_context(
            capacity=cfg.capacity,
            threshold=cfg.threshold,
            zeal=cfg.zeal,
            check_durations=cfg.check_durations,
        )
        self.heap = self.cx.heap
        self.heap.on_collect.append(self._check)
        self._scope: int | None = None
        self._op_index = -1
        self._op_name = "setup"

    # -- oracle -------------------------------------------------------

    def _check(self, stats: CollectionStats) -> None:
        self.cycles_checked += 1
        expected = self.shadow.reachable()
        if self._scope is None:
            live = self.heap.live_refs()
            in_scope = self.shadow.nodes
        else:
            live = self.heap.live_in(self._scope)
            in_scope = {n for n in self.shadow.nodes if self.mirror[n].compartment == self._scope}
            expected = expected & in_scope
        if live != expected:
            self.failure = {
                "cycle": self.heap.stats.cycles,
                "op_index": self._op_index,
                "op": self._op_name,
                "missing": sorted(r.slot for r in expected - live),
                "extra": sorted(r.slot for r in live - expected),
            }
            raise _Divergence(self.failure)
        dead = [n for n in in_scope if n not in expected]
        self.shadow.drop(dead)
        for n in dead:
            del self.mirror[n]

    # -- mirror bookkeeping ---------------------------------------------

    def _sync(self, node: ObjectRef) -> None:
        m = self.mirror[node]
        self.shadow.set_edges(node, (m.prev, m.next))

    def _add_cell(self, node: ObjectRef, data: str, compartment: int,
                  prev: ObjectRef | None = None, nxt: ObjectRef | None = None) -> None:
        self.mirror[node] = _Mirror(data, compartment, prev, nxt)
        self.shadow.add_node(node)
        self._sync(node)

    def _root(self, ref: ManagedRef, cx: Context | None = None) -> RootCell:
        cell = (cx or self.cx).new_root()
        ref.in_root(cell)
        self.shadow.add_root(ref.target)
        return cell

    def _unroot(self, cell: RootCell) -> None:
        target = cell.content
        cell.close()
        self.shadow.remove_root(target)

    # -- setup ----------------------------------------------------------

    def setup(self) -> None:
        cx = self.cx
        for k in range(self.config.compartments):
            with cx.create_compartment() as icx:
                gcx = icx.global_manage(dll.NativeCell(f"g{k}"))
                ref = gcx.global_()
                cid = cx.resolve(ref.compartment)
                self._add_cell(ref.target, f"g{k}", cid)
                self.shadow.globals[cid] = ref.target
                self.globals.append(ref)
        if self.config.inject == "skip-edge":
            self.heap.default_tracer = _skip_next_edge

    # -- helpers --------------------------------------------------------

    def _anchors(self) -> list[ManagedRef]:
        known = [c.ref for c in self.roots if c.ref.compartment is not WILDCARD]
        return self.globals + known

    def _walk(self) -> ManagedRef:
        """Reach a random cell from an anchor, checking data on the way."""
        cx = self.cx
        cur = self.rng.choice(self._anchors())
        for _ in range(self.rng.randrange(4)):
            node = cx.read(cur)
            self._expect_data(cur.target, node.data)
            step = node.next if self.rng.random() < 0.75 else node.prev
            if step is None:
                break
            cur = step
        self._expect_data(cur.target, cx.read(cur).data)
        return cur

    def _expect_data(self, node: ObjectRef, data: str) -> None:
        if self.mirror[node].data != data:
            raise _Divergence({"op_index": self._op_index, "op": self._op_name,
                               "slot": node.slot, "data": data})

    def _data(self) -> str:
        return f"d{self._op_index}"

    def _insert_after(self, cell: ManagedRef, cx: Context) -> None:
        node = cell.target
        before = self.mirror[node]
        old_next = before.next
        dll.insert(cell, self._data(), cx)
        new = cx.read(cell).next.target
        self._add_cell(new, self._data(), before.compartment, node, old_next)
        before.next = new
        self._sync(node)
        if old_next is not None:
            self.mirror[old_next].prev = new
            self._sync(old_next)

    # -- operations -----------------------------------------------------

    def op_insert(self) -> None:
        cx = self.cx
        target = self._walk()
        tmp = self._root(target)
        try:
            cell = tmp.ref
            with cx.enter_known_compartment(cell) as ecx:
                self._insert_after(cell, ecx)
        finally:
            self._unroot(tmp)

    def op_replace(self) -> None:
        target = self._walk()
        tmp = self._root(target)
        try:
            old = dll.replace(tmp.ref, self._data(), self.cx)
            self._expect_data(target.target, old)
            self.mirror[target.target].data = self._data()
        finally:
            self._unroot(tmp)

    def op_unlink(self) -> None:
        target = self._walk()
        node = target.target
        tmp = self._root(target)
        try:
            dll.unlink(tmp.ref, self.cx)
            nxt = self.mirror[node].next
            if nxt is not None:
                self.mirror[node].next = None
                self.mirror[nxt].prev = None
                self._sync(node)
                self._sync(nxt)
        finally:
            self._unroot(tmp)

    def op_allocate(self) -> None:
        home = self.rng.choice(self.globals)
        with self.cx.enter_known_compartment(home) as ecx:
            ref = ecx.manage(dll.NativeCell(self._data()))
            self._add_cell(ref.target, self._data(), ecx.resolve(home.compartment))
            if len(self.roots) < self.config.max_roots:
                self.roots.append(self._root(ref, ecx))

    def op_root(self) -> None:
        if len(self.roots) >= self.config.max_roots:
            self.op_unroot()
        self.roots.append(self._root(self._walk()))

    def op_unroot(self) -> None:
        if self.roots:
            self._unroot(self.roots.pop(self.rng.randrange(len(self.roots))))

    def op_forget(self) -> None:
        if not self.roots:
            return self.op_root()
        i = self.rng.randrange(len(self.roots))
        old = self.roots[i]
        wild = old.ref.forget_compartment()
        self.roots[i] = self._root(wild)
        self._unroot(old)

    def op_enter(self) -> None:
        if not self.roots:
            return self.op_allocate()
        cx = self.cx
        cell = self.rng.choice(self.roots).ref
        if cell.compartment is WILDCARD:
            with cx.enter_unknown_compartment(cell) as ecx:
                inside = ecx.entered()
                self._expect_data(inside.target, ecx.read(inside).data)
                self._insert_after(inside, ecx)
        else:
            with cx.enter_known_compartment(cell) as ecx:
                self._expect_data(cell.target, ecx.read(cell).data)
                self._insert_after(cell, ecx)

    def op_collect(self) -> None:
        if self.rng.random() < 0.8:
            self.cx.trigger_collection()
            return
        home = self.rng.choice(self.globals)
        self._scope = self.cx.resolve(home.compartment)
        try:
            self.cx.collect_compartment(home.compartment)
        finally:
            self._scope = None

    def _pick(self) -> str:
        category = self.rng.choices(CATEGORIES, weights=self.config.mix)[0]
        options = {
            "mutation": ("insert", "replace", "unlink"),
            "allocation": ("allocate",),
            "rooting": ("root", "unroot"),
            "compartment": ("forget", "enter"),
            "collect": ("collect",),
        }[category]
        return self.rng.choice(options)

    # -- driver ---------------------------------------------------------

    def run(self) -> dict[str, Any]:
        cfg = self.config
        violations = 0
        try:
            if cfg.ops:
                self.setup()
            for i in range(cfg.ops):
                self._op_index = i
                name = self._pick()
                self._op_name = name
                getattr(self, f"op_{name}")()
                self.op_counts[name] += 1
                self.max_live = max(self.max_live, len(self.heap))
                self.digest.update(f"{i}:{name}:{len(self.heap)};".encode())
        except _Divergence as exc:
            violations = 1
            self.failure = self.failure or exc.args[0]
        except DisciplineViolation as exc:
            violations = 1
            self.failure = {
                "cycle": self.heap.stats.cycles,
                "op_index": self._op_index,
                "op": self._op_name,
                "error": f"{type(exc).__name__}: {exc}",
            }
        stats = self.heap.stats
        report: dict[str, Any] = {
            "seed": cfg.seed,
            "ops": cfg.ops,
            "cycles": stats.cycles,
            "freed_total": stats.freed_total,
            "max_live": self.max_live,
            "violations": violations,
            "op_counts": {k: self.op_counts[k] for k in sorted(self.op_counts)},
            "trace_digest": self.digest.hexdigest(),
            "config": cfg.fingerprint(),
        }
        if self.failure is not None:
            report["failure"] = self.failure
        return report


def run_stress(config: StressConfig) -> dict[str, Any]:
    """Run one stress session and return its report; write it if asked."""
    report = StressHarness(config).run()
    if config.report_path:
        with open(config.report_path, "w", encoding="utf-8") as fh:
            fh.write(render(report))
    return report


def render(report: dict[str, Any]) -> str:
    return json.dumps(report, sort_keys=False) + "\n"


def replay(report: dict[str, Any], config: StressConfig) -> dict[str, Any]:
    """Re-run ``config`` and confirm it reproduces ``report``.

    Raises :class:`ConfigMismatch` when ``config`` is not the configuration
    the report was produced with.  The replayed report is returned; its
    ``failure`` entry, if any, names the first divergent cycle.
    """
    recorded = report.get("config")
    if recorded != config.fingerprint():
        raise ConfigMismatch(f"report was produced with {recorded}, not {config.fingerprint()}")
    fresh = run_stress(dataclasses.replace(config, report_path=None))
    if render(fresh) != render(report):
        raise ConfigMismatch("replay diverged from the recorded report")
    return fresh


def config_from_fingerprint(fp: dict[str, Any], **overrides) -> StressConfig:
    fields = dict(fp)
    fields["mix"] = tuple(fields["mix"])
    fields.update(overrides)
    return StressConfig(**fields)


# -- command line -------------------------------------------------------


def _mix(text: str) -> tuple[float, ...]:
    try:
        weights = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad mix {text!r}")
    if len(weights) != len(CATEGORIES) or any(w < 0 for w in weights) or sum(weights) <= 0:
        raise argparse.ArgumentTypeError(
            f"mix needs {len(CATEGORIES)} non-negative weights ({','.join(CATEGORIES)})"
        )
    return weights


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="capheap-stress",
        description="Randomized stress run checked against a reachability oracle.",
    )
    p.add_argument("--ops", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--zeal", action="store_true", help="collect before every allocation")
    p.add_argument("--compartments", type=int, default=4)
    p.add_argument("--threshold", type=int, default=64)
    p.add_argument("--report", metavar="PATH")
    p.add_argument("--mix", type=_mix, default=DEFAULT_MIX,
                   help="weights for " + ",".join(CATEGORIES))
    p.add_argument("--max-roots", type=int, default=12)
    p.add_argument("--erase-durations", action="store_true",
                   help="disable duration checks; rely on generations only")
    p.add_argument("--inject", choices=["skip-edge"],
                   help="run against a deliberately broken tracer")
    p.add_argument("--replay", metavar="REPORT",
                   help="re-run and compare against an earlier report")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.ops < 0 or args.compartments < 1 or args.threshold < 1 or args.max_roots < 1:
        parser.error("--ops must be >= 0; --compartments, --threshold, --max-roots >= 1")
    config = StressConfig(
        ops=args.ops,
        seed=args.seed,
        zeal=args.zeal,
        compartments=args.compartments,
        threshold=args.threshold,
        mix=args.mix,
        report_path=args.report,
        max_roots=args.max_roots,
        check_durations=not args.erase_durations,
        inject=args.inject,
    )
    if args.replay:
        with open(args.replay, encoding="utf-8") as fh:
            recorded = json.load(fh)
        try:
            report = replay(recorded, config)
        except ConfigMismatch as exc:
            print(f"replay failed: {exc}", file=sys.stderr)
            return 1
        if config.report_path:
            with open(config.report_path, "w", encoding="utf-8") as fh:
                fh.write(render(report))
    else:
        report = run_stress(config)
    sys.stdout.write(render(report))
    if report["violations"]:
        print(f"violation with seed {config.seed}: {report.get('failure')}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
