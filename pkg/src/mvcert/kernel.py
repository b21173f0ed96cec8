"""Timestamps, stamp words, transaction contexts, and the worker-slot table.

Everything here is shared, mutable state touched by up to 64 worker threads.
The concurrency contract is deliberately narrow: every cross-thread word is an
AtomicCell offering plain load/store plus locked read-modify-write (fetch-add,
fetch-or, compare-and-swap), and all waiting is bounded spinning.  Under
CPython the GIL already makes single-attribute loads and stores atomic; the
per-cell lock only serializes the read-modify-write cycles.

Stamp words are 64-bit integers with a fixed layout:

    bit 63        lock flag (used only to seal a transaction's sstamp)
    bit 62        tag: 1 = transaction id, 0 = timestamp
    bits 0..61    value

Timestamp value 0 is reserved as "invalid"; the global clock never issues it.
The +infinity sentinel used for successor stamps is the largest representable
timestamp value, which preserves min() semantics without special cases.
"""

from __future__ import annotations

import threading
import time
from enum import Enum, IntEnum

VALUE_BITS = 62
VALUE_MASK = (1 << VALUE_BITS) - 1
TID_TAG = 1 << 62
LOCK_BIT = 1 << 63
INFINITY = VALUE_MASK  # timestamp-tagged "no successor yet" sentinel

MAX_WORKERS = 64
SLOT_MASK = MAX_WORKERS - 1

# Spin loops yield the processor each iteration; a loop this long means the
# protocol is wedged, so fail loudly instead of hanging the suite.
SPIN_LIMIT = 2_000_000


class UsageError(ValueError):
    """Caller violated an operation precondition (not a data race)."""


class IllegalTransition(RuntimeError):
    """A status edge outside the transaction lifecycle machine."""


class TransactionAborted(Exception):
    """Raised whenever a transaction cannot continue; carries the cause.

    reason is one of: cc_conflict, ssn_exclusion, ssi_dangerous,
    safe_snapshot, user.
    """

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


def ts_word(value: int) -> int:
    assert 0 <= value <= VALUE_MASK
    return value


def tid_word(tid: int) -> int:
    assert 0 < tid <= VALUE_MASK
    return TID_TAG | tid


def is_tid(word: int) -> bool:
    return bool(word & TID_TAG)


def is_locked(word: int) -> bool:
    return bool(word & LOCK_BIT)


def word_value(word: int) -> int:
    return word & VALUE_MASK


def decode(word: int) -> tuple[str, int, bool]:
    """(kind, value, locked) view of a stamp word, mostly for tests."""
    kind = "tid" if is_tid(word) else "ts"
    return kind, word_value(word), is_locked(word)


def encode(kind: str, value: int, locked: bool = False) -> int:
    word = tid_word(value) if kind == "tid" else ts_word(value)
    return word | LOCK_BIT if locked else word


class AtomicCell:
    """One shared machine word: plain load/store, locked read-modify-write."""

    __slots__ = ("_value", "_lock")

    def __init__(self, value=0):
        self._value = value
        self._lock = threading.Lock()

    def load(self):
        return self._value

    def store(self, value):
        self._value = value

    def compare_and_swap(self, expected, new) -> bool:
        with self._lock:
            if self._value == expected:
                self._value = new
                return True
            return False

    def fetch_add(self, delta: int) -> int:
        with self._lock:
            old = self._value
            self._value = old + delta
            return old

    def fetch_or(self, bits: int) -> int:
        with self._lock:
            old = self._value
            self._value = old | bits
            return old

    def fetch_and(self, bits: int) -> int:
        with self._lock:
            old = self._value
            self._value = old & bits
            return old

    def fold_min(self, value: int) -> int:
        """Lower the cell to value if smaller; returns the new content.

        Only the owning thread folds its own sstamp, and only before sealing,
        so a locked word must never show up here.
        """
        with self._lock:
            assert not is_locked(self._value)
            if value < self._value:
                self._value = value
            return self._value

    def fold_max(self, value: int) -> int:
        with self._lock:
            if value > self._value:
                self._value = value
            return self._value


def spin_until(cond, what: str) -> None:
    """Bounded busy-wait; raises if the condition never comes true."""
    spins = 0
    while not cond():
        time.sleep(0)
        spins += 1
        if spins > SPIN_LIMIT:
            raise RuntimeError("spin limit exceeded waiting for %s" % what)


class GlobalClock:
    """Strictly increasing timestamp source backed by one fetch-and-add."""

    __slots__ = ("_cell",)

    def __init__(self):
        self._cell = AtomicCell(0)

    def next(self) -> int:
        value = self._cell.fetch_add(1) + 1
        assert value < INFINITY, "timestamp counter exhausted"
        return value

    def current(self) -> int:
        """Most recently issued timestamp (0 before the first draw)."""
        return self._cell.load()


class Status(IntEnum):
    INFLIGHT = 0
    COMMITTING = 1
    COMMITTED = 2
    ABORTED = 3


_LEGAL_EDGES = {
    (Status.INFLIGHT, Status.COMMITTING),
    (Status.COMMITTING, Status.COMMITTED),
    (Status.COMMITTING, Status.ABORTED),
    (Status.INFLIGHT, Status.ABORTED),
}


class Scheme(Enum):
    SI = "si"
    RC = "rc"


class TableMode(Enum):
    """Declared table-granularity access modes for scan/update stamping."""

    R = "r"
    IR = "ir"
    IW = "iw"
    W = "w"


class TransactionContext:
    """Per-transaction state, owned by one worker thread.

    Peers may read status, cstamp and sstamp, and may compare-and-swap
    sstamp (the read-mostly handshake); everything else is private.
    """

    __slots__ = (
        "tid", "slot", "scheme", "read_only", "read_mostly", "snapshot_mode",
        "status", "cstamp", "pstamp", "sstamp", "begin_stamp", "start_stamp",
        "reads", "writes", "_read_set", "_write_set",
        "table_modes", "ssi", "tracked_reads", "untracked_reads",
        "observed_violation", "abort_reason",
    )

    def __init__(self, tid: int, slot: int, scheme: Scheme, *,
                 read_only: bool = False, read_mostly: bool = False,
                 begin_stamp: int = 0, start_stamp: int = 0):
        self.tid = tid
        self.slot = slot
        self.scheme = scheme
        self.read_only = read_only
        self.read_mostly = read_mostly
        self.snapshot_mode = False
        self.status = AtomicCell(Status.INFLIGHT)
        self.cstamp = AtomicCell(0)
        self.pstamp = 0
        self.sstamp = AtomicCell(INFINITY)
        self.begin_stamp = begin_stamp
        self.start_stamp = start_stamp
        self.reads = []
        self.writes = []
        self._read_set = set()
        self._write_set = set()
        self.table_modes = set()
        self.ssi = None
        self.tracked_reads = 0
        self.untracked_reads = 0
        self.observed_violation = False
        self.abort_reason = None

    def track_read(self, version) -> None:
        if version not in self._read_set:
            self._read_set.add(version)
            self.reads.append(version)
            self.tracked_reads += 1

    def track_write(self, version) -> None:
        if version not in self._write_set:
            self._write_set.add(version)
            self.writes.append(version)

    def has_written(self, version) -> bool:
        return version in self._write_set


def transition_status(ctx: TransactionContext, src: Status, dst: Status) -> None:
    """Atomically move ctx along a legal lifecycle edge."""
    if (src, dst) not in _LEGAL_EDGES:
        raise IllegalTransition("illegal status edge %s -> %s" % (src.name, dst.name))
    if not ctx.status.compare_and_swap(src, dst):
        raise IllegalTransition(
            "status of %d is %s, expected %s" % (ctx.tid, Status(ctx.status.load()).name, src.name))


class _Slot:
    __slots__ = ("current", "last_cstamp")

    def __init__(self):
        self.current = None
        self.last_cstamp = 0


class TransactionTable:
    """Thread-indexed registry of in-flight transactions.

    Slot i is written only by worker i; any thread may read any slot.  A
    transaction id encodes its slot in the low bits, so lookups by tid can
    detect that the slot has moved on to a newer transaction.
    """

    def __init__(self):
        self.slots = [_Slot() for _ in range(MAX_WORKERS)]
        self._tid_seq = AtomicCell(0)

    def allocate_tid(self, slot: int) -> int:
        seq = self._tid_seq.fetch_add(1) + 1
        return (seq << 6) | slot

    def publish(self, slot: int, ctx: TransactionContext) -> None:
        entry = self.slots[slot]
        if entry.current is not None:
            raise UsageError("worker slot %d already occupied" % slot)
        entry.current = ctx

    def clear(self, slot: int) -> None:
        self.slots[slot].current = None

    def get(self, tid: int) -> TransactionContext | None:
        """Context for tid, or None if that transaction has concluded."""
        ctx = self.slots[tid & SLOT_MASK].current
        if ctx is not None and ctx.tid == tid:
            return ctx
        return None

    def record_commit_stamp(self, slot: int, cstamp: int) -> None:
        entry = self.slots[slot]
        if cstamp > entry.last_cstamp:
            entry.last_cstamp = cstamp

    def last_cstamp(self, slot: int) -> int:
        return self.slots[slot].last_cstamp
