"""Multi-version record store: version chains, installs, readers, finalize.

Each record is a newest-first singly linked chain of versions.  A version's
cstamp holds the creator's transaction id until the creator's post-commit
turns it into a real timestamp, which is also the visibility switch: readers
skip tid-tagged versions that are not their own.  Chain appends serialize on
a single compare-and-swap of the head link, so writers never block readers
and vice versa.

Version stamps follow a strict lifecycle.  sstamp goes +inf -> overwriter
tid -> overwriter's successor watermark, never any other way; pstamp only
rises once the version is committed.  Aborts restore the overwritten
version's sstamp to +inf before unlinking the dead head, so no reader can
observe a dangling overwriter tid.
"""

from __future__ import annotations

from .kernel import (
    INFINITY, AtomicCell, Scheme, Status, TransactionContext,
    is_tid, spin_until, tid_word, ts_word, word_value,
)


class WriteConflict(Exception):
    """Install refused: uncommitted write-write overlap or temporal skew."""

    def __init__(self, kind: str):
        super().__init__(kind)
        self.kind = kind


class NotFound(LookupError):
    """Only the initial invalid version is visible and data was required."""


class VersionMeta:
    __slots__ = ("record", "creator_tid", "cstamp", "pstamp", "sstamp", "prev",
                 "readers", "payload", "ssi_mark")

    def __init__(self, record, creator_tid: int, cstamp_word: int, prev, payload):
        self.record = record
        self.creator_tid = creator_tid
        self.cstamp = AtomicCell(cstamp_word)
        self.pstamp = AtomicCell(0)
        self.sstamp = AtomicCell(INFINITY)
        self.prev = prev
        self.readers = AtomicCell(0)
        self.payload = payload
        self.ssi_mark = None  # (cstamp, out_rw, partner_commit) after an SSI commit

    def is_committed(self) -> bool:
        return not is_tid(self.cstamp.load())

    def committed_stamp(self) -> int:
        word = self.cstamp.load()
        assert not is_tid(word)
        return word_value(word)


class Record:
    __slots__ = ("key", "head")

    def __init__(self, key):
        # Every record starts with a committed "invalid" version: payload None,
        # creation stamp 0, creator 0 (nobody).
        self.key = key
        self.head = AtomicCell(None)
        self.head.store(VersionMeta(self, 0, ts_word(0), None, None))


class TableStamps:
    """Pseudo-version stamps for table-granularity scan/update modes."""

    __slots__ = ("pstamp", "sstamp")

    def __init__(self):
        self.pstamp = AtomicCell(0)
        self.sstamp = AtomicCell(INFINITY)


class Store:
    """A single flat table of db_size records.

    The optional transaction table enables visibility indirection: a version
    whose creation stamp still holds the creator's tid belongs to a
    transaction that may have survived pre-commit already, and snapshot
    readers must treat it by the creator's verdict rather than skipping it
    outright, or their reads drift behind the stamp order.
    """

    def __init__(self, size: int, table=None):
        if size < 1:
            raise ValueError("store needs at least one record")
        self.records = [Record(k) for k in range(size)]
        self.table_stamps = TableStamps()
        self.table = table

    def __len__(self):
        return len(self.records)

    def record(self, key: int) -> Record:
        return self.records[key]

    def visible_version(self, ctx: TransactionContext, record: Record, *,
                        require_data: bool = False) -> VersionMeta:
        """Version of record that ctx is allowed to read.

        SI returns the newest version with a committed stamp at or below the
        snapshot; RC returns the newest committed version.  Both skip versions
        created by in-flight transactions, and both return the transaction's
        own uncommitted head if it created one.

        Snapshot reads must not skip a version merely because its creator has
        not finished stamping it: the creator's stamp was drawn before the
        reader's snapshot, so skipping would hand the reader an already
        overwritten version and break the snapshot ordering.  A creator that
        survived pre-commit counts as committed, with its stamp inferred from
        its context instead of the version; post-commit stragglers delay
        nobody.  An SI reader does wait out a creator whose verdict is still
        pending, because only the verdict decides whether the version is part
        of the reader's snapshot; RC readers never wait.
        """
        version = record.head.load()
        while version is not None:
            word = version.cstamp.load()
            if is_tid(word):
                if word_value(word) == ctx.tid:
                    break  # read-own-writes
                creator = self.table.get(word_value(word)) if self.table else None
                if creator is None:
                    # Creator concluded: a committed creator finalized the
                    # stamp before vacating its slot, so a still-tagged stamp
                    # marks an unlinked orphan from an abort.
                    if is_tid(version.cstamp.load()):
                        version = version.prev
                    continue
                status = creator.status.load()
                if status == Status.COMMITTING and \
                        (ctx.scheme is Scheme.SI or ctx.snapshot_mode):
                    spin_until(
                        lambda: creator.status.load() != Status.COMMITTING,
                        "creator %d verdict" % creator.tid)
                    status = creator.status.load()
                if status != Status.COMMITTED:
                    version = version.prev
                    continue
                stamp = creator.cstamp.load()
            else:
                stamp = word_value(word)
            if ctx.scheme is Scheme.RC and not ctx.snapshot_mode:
                break
            if stamp <= ctx.begin_stamp:
                break
            version = version.prev
        assert version is not None, "chain lost its initial version"
        if require_data and version.payload is None:
            raise NotFound("record %r holds no visible data" % (record.key,))
        return version

    def creation_stamp(self, version: VersionMeta) -> int:
        """Commit stamp of a visible version, resolving pending post-commit.

        Only call on versions returned by visible_version for some reader
        other than the creator: the creator is committed, so either the
        version already carries the final stamp or the creator's context
        still holds it.
        """
        guard = 0
        while True:
            word = version.cstamp.load()
            if not is_tid(word):
                return word_value(word)
            creator = self.table.get(word_value(word)) if self.table else None
            if creator is not None and creator.status.load() == Status.COMMITTED:
                stamp = creator.cstamp.load()
                if stamp:
                    return stamp
            guard += 1
            assert guard < 1_000_000, "creation stamp failed to settle"

    def install_version(self, ctx: TransactionContext, record: Record,
                        payload) -> VersionMeta:
        """Append a new uncommitted version, or refuse with WriteConflict.

        Conflicts: the head is another transaction's uncommitted write, or
        (SI only) the head committed after the writer's snapshot.  A repeated
        overwrite by the same transaction replaces the payload in place.
        """
        head = record.head.load()
        head_word = head.cstamp.load()
        if is_tid(head_word):
            if word_value(head_word) == ctx.tid:
                head.payload = payload
                return head
            raise WriteConflict("uncommitted")
        if ctx.scheme is Scheme.SI and word_value(head_word) > ctx.begin_stamp:
            raise WriteConflict("skew")
        version = VersionMeta(record, ctx.tid, tid_word(ctx.tid), head, payload)
        if not record.head.compare_and_swap(head, version):
            # Another writer won the append race; treat like any other
            # write-write conflict rather than blocking.
            raise WriteConflict("uncommitted")
        swapped = head.sstamp.compare_and_swap(INFINITY, tid_word(ctx.tid))
        assert swapped, "overwritten head carried a foreign overwriter tid"
        return version

    def register_reader(self, version: VersionMeta, slot: int) -> None:
        version.readers.fetch_or(1 << slot)

    def clear_reader(self, version: VersionMeta, slot: int) -> None:
        version.readers.fetch_and(~(1 << slot))

    def finalize_commit(self, ctx: TransactionContext) -> None:
        """Post-commit stamp propagation for a committed transaction.

        Raises the access stamp of every tracked read, then finalizes each
        written version: the overwritten predecessor's sstamp becomes the
        committer's successor watermark (tid tag cleared), and the new version
        gets its creation and access stamps.  Reads the transaction itself
        overwrote are skipped; their stamps die with the overwrite.
        """
        cstamp = ctx.cstamp.load()
        own = tid_word(ctx.tid)
        for version in ctx.reads:
            if version.sstamp.load() == own:
                continue
            while True:
                pstamp = version.pstamp.load()
                if pstamp >= cstamp:
                    break
                if version.pstamp.compare_and_swap(pstamp, cstamp):
                    break
        pi = word_value(ctx.sstamp.load())
        for version in ctx.writes:
            if ctx.ssi is not None:
                version.prev.ssi_mark = (
                    cstamp, ctx.ssi.out_rw, ctx.ssi.partner_commit)
            version.prev.sstamp.store(ts_word(pi))
            version.pstamp.store(cstamp)
            version.cstamp.store(ts_word(cstamp))

    def rollback(self, ctx: TransactionContext) -> None:
        """Unlink every version an aborted transaction installed.

        The predecessor's sstamp is restored before the head is unlinked so
        a concurrent reader never sees an overwriter tid with no overwriter.
        """
        for version in reversed(ctx.writes):
            restored = version.prev.sstamp.compare_and_swap(
                tid_word(ctx.tid), INFINITY)
            assert restored, "aborting overwriter lost its sstamp claim"
            unlinked = version.record.head.compare_and_swap(version, version.prev)
            assert unlinked, "aborted head was overwritten concurrently"

    def dump_stamps(self):
        """Raw stamp words per record, oldest version first (for tests)."""
        dump = []
        for record in self.records:
            chain = []
            version = record.head.load()
            while version is not None:
                chain.append((version.creator_tid, version.cstamp.load(),
                              version.pstamp.load(), version.sstamp.load(),
                              version.payload))
                version = version.prev
            chain.reverse()
            dump.append(chain)
        return dump

    def check_chains(self) -> None:
        """Assert quiescent chain well-formedness (stress-test support)."""
        for record in self.records:
            version = record.head.load()
            last = None
            while version is not None:
                word = version.cstamp.load()
                assert not is_tid(word), \
                    "record %r retains an uncommitted head" % (record.key,)
                stamp = word_value(word)
                if last is not None:
                    assert stamp < last, \
                        "record %r chain stamps not strictly increasing" % (record.key,)
                last = stamp
                version = version.prev
