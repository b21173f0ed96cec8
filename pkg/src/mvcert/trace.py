"""Execution traces: one logged event per transactional action.

The trace is the only thing the offline checker consumes, so it has to be
complete (every read and write, including untracked ones) and self-contained
(versions are identified by their creator's transaction id plus the record
key, which never changes, unlike the creation stamp).

File format is line-delimited text with a fixed field order:

    begin <tid> <thread>
    read <tid> <thread> <key> <creator_tid> <version_cstamp>
    write <tid> <thread> <key> <prev_creator_tid> <prev_cstamp>
    commit <tid> <thread> <cstamp>
    abort <tid> <thread> <reason>

For writes the version columns describe the overwritten version; the new
version's identity is (key, tid) implicitly.  Multi-threaded runs log into
per-thread buffers; a global sequence number taken at emit time lets the
merge preserve real-time order, so any referenced version was created by an
earlier line.
"""

from __future__ import annotations

from typing import NamedTuple

from .kernel import MAX_WORKERS, AtomicCell

ABORT_REASONS = ("cc_conflict", "ssn_exclusion", "ssi_dangerous",
                 "safe_snapshot", "user")


class TraceEvent(NamedTuple):
    seq: int
    kind: str            # begin | read | write | commit | abort
    tid: int
    thread: int
    key: int | None = None
    ver_creator: int | None = None
    ver_cstamp: int | None = None
    cstamp: int | None = None
    reason: str | None = None


class MalformedTrace(ValueError):
    def __init__(self, index: int, message: str):
        super().__init__("event %d: %s" % (index, message))
        self.index = index


class TraceLog:
    """Per-thread append-only buffers with a shared emit sequence."""

    def __init__(self):
        self._buffers = [[] for _ in range(MAX_WORKERS)]
        self._seq = AtomicCell(0)

    def begin(self, tid, thread):
        self._emit(thread, TraceEvent(self._next(), "begin", tid, thread))

    def read(self, tid, thread, key, ver_creator, ver_cstamp):
        self._emit(thread, TraceEvent(self._next(), "read", tid, thread,
                                      key, ver_creator, ver_cstamp))

    def write(self, tid, thread, key, prev_creator, prev_cstamp):
        self._emit(thread, TraceEvent(self._next(), "write", tid, thread,
                                      key, prev_creator, prev_cstamp))

    def commit(self, tid, thread, cstamp):
        self._emit(thread, TraceEvent(self._next(), "commit", tid, thread,
                                      cstamp=cstamp))

    def abort(self, tid, thread, reason):
        self._emit(thread, TraceEvent(self._next(), "abort", tid, thread,
                                      reason=reason))

    def _next(self):
        return self._seq.fetch_add(1)

    def _emit(self, thread, event):
        self._buffers[thread].append(event)

    def merged(self) -> list[TraceEvent]:
        events = [event for buffer in self._buffers for event in buffer]
        events.sort(key=lambda event: event.seq)
        return events


def render_event(event: TraceEvent) -> str:
    if event.kind == "begin":
        return "begin %d %d" % (event.tid, event.thread)
    if event.kind == "read":
        return "read %d %d %d %d %d" % (event.tid, event.thread, event.key,
                                        event.ver_creator, event.ver_cstamp)
    if event.kind == "write":
        return "write %d %d %d %d %d" % (event.tid, event.thread, event.key,
                                         event.ver_creator, event.ver_cstamp)
    if event.kind == "commit":
        return "commit %d %d %d" % (event.tid, event.thread, event.cstamp)
    if event.kind == "abort":
        return "abort %d %d %s" % (event.tid, event.thread, event.reason)
    raise ValueError("unknown event kind %r" % (event.kind,))


def render_trace(events) -> str:
    return "".join(render_event(event) + "\n" for event in events)


def write_trace(events, path) -> None:
    with open(path, "w") as handle:
        handle.write(render_trace(events))


def parse_trace(lines) -> list[TraceEvent]:
    """Parse trace text lines; raises MalformedTrace with the line index."""
    events = []
    for index, raw in enumerate(lines):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        kind = fields[0]
        try:
            if kind == "begin" and len(fields) == 3:
                tid, thread = map(int, fields[1:])
                event = TraceEvent(index, kind, tid, thread)
            elif kind in ("read", "write") and len(fields) == 6:
                tid, thread, key, creator, cstamp = map(int, fields[1:])
                event = TraceEvent(index, kind, tid, thread, key, creator, cstamp)
            elif kind == "commit" and len(fields) == 4:
                tid, thread, cstamp = map(int, fields[1:])
                event = TraceEvent(index, kind, tid, thread, cstamp=cstamp)
            elif kind == "abort" and len(fields) == 4:
                tid, thread = int(fields[1]), int(fields[2])
                if fields[3] not in ABORT_REASONS:
                    raise MalformedTrace(index, "unknown abort reason %r" % fields[3])
                event = TraceEvent(index, kind, tid, thread, reason=fields[3])
            else:
                raise MalformedTrace(index, "unparseable line %r" % line)
        except MalformedTrace:
            raise
        except ValueError:
            raise MalformedTrace(index, "non-numeric field in %r" % line) from None
        events.append(event)
    return events


def read_trace(path) -> list[TraceEvent]:
    with open(path) as handle:
        return parse_trace(handle)
