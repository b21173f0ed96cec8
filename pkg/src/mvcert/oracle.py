"""Offline serializability oracle and deterministic schedule drivers.

The oracle trusts nothing but the trace.  It rebuilds the dependency graph
of committed transactions from the logged accesses -- read and overwrite
dependencies directly, read anti-dependencies in a post-processing join of
readers against committed overwriters -- then finds strongly connected
components.  Any component of two or more transactions is a serialization
failure.  For attribution it recomputes the predecessor/successor watermarks
per node from the graph alone and flags the members whose exclusion window
is violated; every component is guaranteed to contain at least one, and the
oracle raises if that ever fails to hold.

Also here: the schedule script format, the single-threaded deterministic
replay driver, and the exhaustive interleaving enumerator used to check that
every cyclic history produced without enforcement contains a window
violation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .kernel import MAX_WORKERS, Scheme, TransactionAborted, UsageError
from .schedulers import CertifierMode, Engine
from .trace import MalformedTrace, TraceEvent, TraceLog

EDGE_WR = "w:r"
EDGE_WW = "w:w"
EDGE_RW = "r:w"


class AttributionFailure(AssertionError):
    """An SCC without a flagged member: the certifier's own guarantee broke."""


@dataclass
class GraphNode:
    tid: int
    cstamp: int
    order: int          # commit position; breaks duplicate-stamp ties
    pstamp: int = 0
    sstamp: int = 0


class DependencyGraph:
    """Committed transactions and their typed serial dependencies."""

    def __init__(self):
        self.nodes: dict[int, GraphNode] = {}
        self.edges: set[tuple[int, int, str]] = set()
        self.successors: dict[int, set[int]] = {}

    def add_node(self, tid, cstamp, order):
        self.nodes[tid] = GraphNode(tid, cstamp, order)
        self.successors.setdefault(tid, set())

    def add_edge(self, src, dst, kind):
        if src == dst:
            return  # the model has no self-edges
        if src in self.nodes and dst in self.nodes:
            self.edges.add((src, dst, kind))
            self.successors[src].add(dst)

    def edge_kinds(self, src, dst):
        return {kind for (s, d, kind) in self.edges if s == src and d == dst}

    def commit_order_key(self, tid):
        node = self.nodes[tid]
        return (node.cstamp, node.order)


def build_graph(events) -> DependencyGraph:
    """Dependency graph over the committed transactions of a trace.

    Версion identity is (key, creator tid); the initial version of each key
    has creator 0.  Aborted and unfinished transactions contribute nothing.
    """
    committed = {}
    order = {}
    seen = set()
    for index, event in enumerate(events):
        if event.tid in seen and event.kind == "begin":
            raise MalformedTrace(index, "tid %d began twice" % event.tid)
        seen.add(event.tid)
        if event.kind == "commit":
            committed[event.tid] = event.cstamp
            order[event.tid] = len(order)

    creations = {}  # (key, creator) -> event position, committed writes only
    for position, event in enumerate(events):
        if event.kind == "write" and event.tid in committed:
            creations.setdefault((event.key, event.tid), position)

    graph = DependencyGraph()
    for tid, cstamp in committed.items():
        graph.add_node(tid, cstamp, order[tid])

    readers = {}      # (key, creator) -> set of committed reader tids
    overwriter = {}   # (key, creator) -> committed overwriter tid
    for position, event in enumerate(events):
        if event.kind not in ("read", "write"):
            continue
        identity = (event.key, event.ver_creator)
        if event.ver_creator != 0:
            created_at = creations.get(identity)
            if created_at is None:
                if event.ver_creator in committed or event.ver_creator not in seen:
                    raise MalformedTrace(
                        position,
                        "reference to version %r never created" % (identity,))
                continue  # creator aborted; the whole access is moot
            if created_at > position and event.ver_creator != event.tid:
                raise MalformedTrace(
                    position,
                    "version %r referenced before creation" % (identity,))
        if event.tid not in committed:
            continue
        if event.kind == "read":
            readers.setdefault(identity, set()).add(event.tid)
            graph.add_edge(event.ver_creator, event.tid, EDGE_WR)
        else:
            previous = overwriter.setdefault(identity, event.tid)
            assert previous == event.tid, \
                "two committed overwrites of one version"
            graph.add_edge(event.ver_creator, event.tid, EDGE_WW)

    for identity, tids in readers.items():
        winner = overwriter.get(identity)
        if winner is None:
            continue
        for tid in tids:
            graph.add_edge(tid, winner, EDGE_RW)
    return graph


def strongly_connected_components(graph: DependencyGraph) -> list[list[int]]:
    """Tarjan, iterative so deep anti-dependency chains cannot blow the stack."""
    index_of, lowlink, on_stack = {}, {}, set()
    stack, components = [], []
    counter = 0
    for root in graph.nodes:
        if root in index_of:
            continue
        work = [(root, iter(graph.successors[root]))]
        index_of[root] = lowlink[root] = counter
        counter += 1
        stack.append(root)
        on_stack.add(root)
        while work:
            node, successors = work[-1]
            advanced = False
            for succ in successors:
                if succ not in index_of:
                    index_of[succ] = lowlink[succ] = counter
                    counter += 1
                    stack.append(succ)
                    on_stack.add(succ)
                    work.append((succ, iter(graph.successors[succ])))
                    advanced = True
                    break
                if succ in on_stack:
                    lowlink[node] = min(lowlink[node], index_of[succ])
            if advanced:
                continue
            work.pop()
            if work:
                parent = work[-1][0]
                lowlink[parent] = min(lowlink[parent], lowlink[node])
            if lowlink[node] == index_of[node]:
                component = []
                while True:
                    member = stack.pop()
                    on_stack.discard(member)
                    component.append(member)
                    if member == node:
                        break
                components.append(component)
    return components


def recompute_watermarks(graph: DependencyGraph) -> None:
    """Per-node watermark recomputation from the graph alone.

    pstamp(T) is the largest commit stamp among predecessors that committed
    before T; sstamp(T) the smallest sstamp among successors that committed
    before T, bounded by T's own stamp.  Processing nodes in commit order
    makes the recursion a single pass.
    """
    by_commit = sorted(graph.nodes, key=graph.commit_order_key)
    position = {tid: i for i, tid in enumerate(by_commit)}
    incoming: dict[int, list[int]] = {tid: [] for tid in graph.nodes}
    for src, dst, _kind in graph.edges:
        incoming[dst].append(src)
    for tid in by_commit:
        node = graph.nodes[tid]
        node.pstamp = max(
            (graph.nodes[src].cstamp for src in incoming[tid]
             if position[src] < position[tid]),
            default=0)
        node.sstamp = min(
            (graph.nodes[succ].sstamp for succ in graph.successors[tid]
             if position[succ] < position[tid]),
            default=node.cstamp)
        node.sstamp = min(node.sstamp, node.cstamp)


@dataclass
class ViolationReport:
    sccs: list[list[int]] = field(default_factory=list)
    flagged: list[list[int]] = field(default_factory=list)

    @property
    def clean(self) -> bool:
        return not self.sccs

    def render(self, graph: DependencyGraph | None = None) -> str:
        if self.clean:
            return "serializable sccs=0\n"
        lines = ["serializable=no sccs=%d" % len(self.sccs)]
        for members, flagged in zip(self.sccs, self.flagged):
            lines.append("scc size=%d members=%s flagged=%s" % (
                len(members),
                ",".join(str(t) for t in members),
                ",".join(str(t) for t in flagged)))
            if graph is not None:
                scc = set(members)
                for src, dst, kind in sorted(graph.edges):
                    if src in scc and dst in scc:
                        lines.append("edge %d %s %d" % (src, kind, dst))
        return "".join(line + "\n" for line in lines)


def find_violations(graph: DependencyGraph) -> ViolationReport:
    """SCCs of size >= 2 plus the members failing the recomputed window test.

    A member is flagged when its recomputed successor watermark does not
    clear its predecessor watermark.  Watermark equal to the own commit
    stamp means no back edge at all, which cannot violate anything; the
    strict form matters only for the duplicate stamps read-only commits
    may share, and a lenient retry keeps the guarantee check honest there.
    """
    recompute_watermarks(graph)
    report = ViolationReport()
    for component in strongly_connected_components(graph):
        if len(component) < 2:
            continue
        members = sorted(component, key=graph.commit_order_key)
        flagged = [tid for tid in members
                   if graph.nodes[tid].sstamp <= graph.nodes[tid].pstamp
                   and graph.nodes[tid].sstamp < graph.nodes[tid].cstamp]
        if not flagged:
            flagged = [tid for tid in members
                       if graph.nodes[tid].sstamp <= graph.nodes[tid].pstamp]
        if not flagged:
            raise AttributionFailure(
                "scc %s contains no exclusion-window violation" % members)
        report.sccs.append(members)
        report.flagged.append(flagged)
    return report


def check_trace(events) -> ViolationReport:
    return find_violations(build_graph(events))


# ---------------- schedule scripts and replay ----------------

OPS = ("read", "write", "commit", "abort")


@dataclass
class ScriptStep:
    label: str
    op: str
    key: int | None = None


def parse_script(text: str) -> list[ScriptStep]:
    """Parse the schedule DSL: one step per line, `label op [key]`.

    Keys may be arbitrary tokens; they map to record indexes in order of
    first appearance.  Comments start with '#'.
    """
    steps = []
    keys: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) not in (2, 3) or fields[1] not in OPS:
            raise UsageError("script line %d: cannot parse %r" % (lineno, raw))
        label, op = fields[0], fields[1]
        key = None
        if op in ("read", "write"):
            if len(fields) != 3:
                raise UsageError("script line %d: %s needs a key" % (lineno, op))
            key = keys.setdefault(fields[2], len(keys))
        steps.append(ScriptStep(label, op, key))
    return steps


@dataclass
class ReplayResult:
    outcomes: dict[str, tuple]   # label -> ("committed", cstamp) | ("aborted", reason)
    tids: dict[str, int]
    trace: list[TraceEvent]
    engine: Engine
    observed: dict[str, bool] = field(default_factory=dict)

    def outcome(self, label: str) -> str:
        return self.outcomes[label][0]


def replay_scripted(steps, scheme: Scheme = Scheme.SI,
                    certifier: CertifierMode = CertifierMode.SSN, *,
                    db_size: int | None = None, serial: bool = True,
                    observe: bool = False, on_aborted: str = "error",
                    read_mostly_threshold: int = 0) -> ReplayResult:
    """Execute script steps one at a time against a fresh engine.

    Fully deterministic: one OS thread, transaction slots assigned by order
    of first appearance.  A step addressed to a transaction that already
    aborted is a script error unless on_aborted="skip" (the enumerator's
    policy, where mid-history aborts simply end that program).
    """
    if isinstance(steps, str):
        steps = parse_script(steps)
    if db_size is None:
        db_size = max((s.key for s in steps if s.key is not None), default=0) + 1
    trace = TraceLog()
    engine = Engine(db_size, scheme, certifier, serial_commit=serial,
                    observe=observe, trace=trace,
                    read_mostly_threshold=read_mostly_threshold)
    contexts: dict[str, object] = {}
    outcomes: dict[str, tuple] = {}
    observed: dict[str, bool] = {}
    tids: dict[str, int] = {}

    for step in steps:
        ctx = contexts.get(step.label)
        if ctx is None:
            if step.label in outcomes:
                if on_aborted == "skip":
                    continue
                raise UsageError(
                    "script step for finished transaction %r" % step.label)
            slot = len(contexts) + len(outcomes)
            if slot >= MAX_WORKERS:
                raise UsageError("script declares more than %d transactions"
                                 % MAX_WORKERS)
            ctx = engine.begin(slot)
            contexts[step.label] = ctx
            tids[step.label] = ctx.tid
        try:
            if step.op == "read":
                engine.read(ctx, step.key)
            elif step.op == "write":
                engine.write(ctx, step.key)
            elif step.op == "commit":
                cstamp = engine.commit(ctx)
                outcomes[step.label] = ("committed", cstamp)
                observed[step.label] = ctx.observed_violation
                del contexts[step.label]
            else:
                engine.abort(ctx)
                outcomes[step.label] = ("aborted", "user")
                observed[step.label] = ctx.observed_violation
                del contexts[step.label]
        except TransactionAborted as aborted:
            outcomes[step.label] = ("aborted", aborted.reason)
            observed[step.label] = ctx.observed_violation
            del contexts[step.label]
    for label, ctx in contexts.items():
        engine.abort(ctx)
        outcomes[label] = ("aborted", "user")
        observed[label] = ctx.observed_violation
    return ReplayResult(outcomes, tids, trace.merged(), engine, observed)


# ---------------- exhaustive interleaving enumeration ----------------

ENUMERATION_GUARD = 10 ** 6


def interleaving_count(programs) -> int:
    lengths = [len(p) for p in programs]
    total = math.factorial(sum(lengths))
    for n in lengths:
        total //= math.factorial(n)
    return total


def interleavings(programs):
    """Yield every merge order as a tuple of program indexes, lexicographic."""
    lengths = [len(p) for p in programs]
    total = sum(lengths)
    prefix: list[int] = []
    taken = [0] * len(programs)

    def extend():
        if len(prefix) == total:
            yield tuple(prefix)
            return
        for i, program in enumerate(programs):
            if taken[i] < lengths[i]:
                taken[i] += 1
                prefix.append(i)
                yield from extend()
                prefix.pop()
                taken[i] -= 1

    yield from extend()


def steps_for_order(programs, labels, order) -> list[ScriptStep]:
    cursors = [0] * len(programs)
    steps = []
    for i in order:
        op, key = programs[i][cursors[i]]
        cursors[i] += 1
        steps.append(ScriptStep(labels[i], op, key))
    return steps


@dataclass
class HistoryResult:
    order: tuple
    outcomes: dict
    graph: DependencyGraph
    cyclic: bool
    offline_flagged: list
    engine_observed: bool


def enumerate_interleavings(programs, labels=None, *,
                            scheme: Scheme = Scheme.RC,
                            enforce: bool = False):
    """Replay every interleaving of the given programs.

    Programs are lists of (op, key) pairs ending in ("commit", None).  The
    default mode runs them under RC with exclusion checks recorded but not
    enforced, so cyclic histories can complete; enforce=True runs the real
    certifier instead (used for commit-order sweeps of small scenarios).

    Refuses to start when the interleaving count exceeds the guard.
    """
    count = interleaving_count(programs)
    if count > ENUMERATION_GUARD:
        raise UsageError(
            "%d interleavings exceed the enumeration guard of %d"
            % (count, ENUMERATION_GUARD))
    if labels is None:
        labels = ["T%d" % (i + 1) for i in range(len(programs))]
    for order in interleavings(programs):
        steps = steps_for_order(programs, labels, order)
        result = replay_scripted(
            steps, scheme, CertifierMode.SSN, serial=True,
            observe=not enforce, on_aborted="skip")
        graph = build_graph(result.trace)
        sccs = [c for c in strongly_connected_components(graph) if len(c) > 1]
        cyclic = bool(sccs)
        flagged = []
        if cyclic:
            flagged = [tid for scc in find_violations(graph).flagged for tid in scc]
        yield HistoryResult(
            order, result.outcomes, graph, cyclic, flagged,
            any(result.observed.values()))
