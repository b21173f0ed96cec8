"""Scheme dispatch and the two-flag dangerous-structure certifier."""

import pytest

from mvcert import (
    CertifierMode, ClientGroup, Engine, Scheme, TransactionAborted,
    UsageError, WorkloadConfig, check_trace, replay_scripted, run_bench,
)
from mvcert.kernel import Status
from mvcert.trace import TraceLog

SI, RC = Scheme.SI, Scheme.RC
SSI, SSN, NONE = CertifierMode.SSI, CertifierMode.SSN, CertifierMode.NONE

FIG_SCHEDULE = """
T1 read B
T3 read A
T2 write B
T2 commit
T3 read B
T1 write A
T1 commit
T3 commit
"""

WRITE_SKEW = """
T1 read X
T2 read Y
T1 write Y
T2 write X
T1 commit
T2 commit
"""


def outcomes(result):
    return {label: outcome[0] for label, outcome in result.outcomes.items()}


class TestSchemeDispatch:
    def test_rc_reads_newest_committed_without_side_effects(self):
        engine = Engine(2, RC, NONE)
        writer = engine.begin(0)
        engine.write(writer, 0, "new")
        engine.commit(writer)
        reader = engine.begin(0)
        assert engine.read(reader, 0) == "new"
        assert engine.commit(reader) > 0

    def test_si_write_over_post_snapshot_version_aborts(self):
        engine = Engine(2, SI, NONE)
        slow = engine.begin(0)
        engine.read(slow, 0)
        fast = engine.begin(1)
        engine.write(fast, 0, "winner")
        engine.commit(fast)
        with pytest.raises(TransactionAborted) as failure:
            engine.write(slow, 0, "loser")
        assert failure.value.reason == "cc_conflict"

    def test_write_over_own_version_keeps_one_chain_node(self):
        engine = Engine(2, RC, NONE)
        ctx = engine.begin(0)
        engine.write(ctx, 0, "a")
        engine.write(ctx, 0, "b")
        engine.commit(ctx)
        chain = engine.store.dump_stamps()[0]
        assert len(chain) == 2  # initial version plus one
        assert chain[-1][-1] == "b"

    def test_ssn_read_side_effects_applied_through_scheme_read(self):
        engine = Engine(2, SI, SSN)
        writer = engine.begin(0)
        engine.write(writer, 0)
        engine.commit(writer)
        reader = engine.begin(0)
        engine.read(reader, 0)
        assert reader.pstamp == writer.cstamp.load()

    def test_ssi_requires_si(self):
        with pytest.raises(UsageError):
            Engine(2, RC, SSI)

    def test_begin_on_busy_slot_is_a_usage_error(self):
        engine = Engine(2, RC, SSN)
        engine.begin(0)
        with pytest.raises(UsageError):
            engine.begin(0)


class TestSsiCertifier:
    def test_dangerous_structure_aborts_the_pivot(self):
        result = replay_scripted(FIG_SCHEDULE, SI, SSI)
        assert outcomes(result) == {
            "T1": "aborted", "T2": "committed", "T3": "committed"}
        assert result.outcomes["T1"][1] == "ssi_dangerous"

    def test_ssn_admits_what_ssi_rejects_on_the_same_schedule(self):
        admitted = replay_scripted(FIG_SCHEDULE, SI, SSN)
        rejected = replay_scripted(FIG_SCHEDULE, SI, SSI)
        ssn_aborts = sum(1 for o in admitted.outcomes.values() if o[0] == "aborted")
        ssi_aborts = sum(1 for o in rejected.outcomes.values() if o[0] == "aborted")
        assert ssn_aborts == 0 and ssi_aborts == 1

    def test_write_skew_rejected(self):
        result = replay_scripted(WRITE_SKEW, SI, SSI)
        assert outcomes(result) == {"T1": "committed", "T2": "aborted"}

    def test_outbound_only_commits(self):
        engine = Engine(2, SI, SSI)
        reader = engine.begin(0)
        engine.read(reader, 0)
        overwriter = engine.begin(1)
        engine.write(overwriter, 0)
        engine.commit(overwriter)
        engine.commit(reader)  # out_rw only: no structure
        assert reader.status.load() == Status.COMMITTED
        assert reader.ssi.out_rw

    def test_read_only_skips_the_commit_check(self):
        engine = Engine(2, SI, SSI)
        query = engine.begin(0, read_only=True)
        engine.read(query, 0)
        overwriter = engine.begin(1)
        engine.write(overwriter, 0)
        engine.commit(overwriter)
        query.ssi.in_rw.fetch_or(1)  # even with a (spurious) inbound flag
        engine.commit(query)
        assert query.status.load() == Status.COMMITTED

    def test_late_reader_of_committed_pivot_aborts_itself(self):
        # pivot commits while the structure's tail reader is still in flight
        engine = Engine(3, SI, SSI)
        seed = engine.begin(0)
        engine.write(seed, 0, "a0")
        engine.write(seed, 1, "b0")
        engine.write(seed, 2, "c0")
        engine.commit(seed)

        tail = engine.begin(0)          # will read what the pivot overwrote
        engine.read(tail, 2)            # pin its snapshot before the pivot
        first = engine.begin(1)
        pivot = engine.begin(2)
        engine.read(pivot, 0)
        engine.write(first, 0, "a1")
        engine.commit(first)            # pivot's outbound partner commits first
        engine.write(pivot, 1, "b1")    # pivot overwrites what tail will read
        engine.commit(pivot)
        with pytest.raises(TransactionAborted) as failure:
            engine.read(tail, 1)        # reads b0 under the committed pivot
        assert failure.value.reason == "ssi_dangerous"

    def test_ssi_runs_are_serializable_under_contention(self):
        config = WorkloadConfig(
            db_size=40, groups=[ClientGroup(6, 6, 10, 3)],
            txns_per_thread=400, seed=9, scheme=SI, certifier=SSI,
            retry=True, emit_trace=True)
        stats, events = run_bench(config)
        assert stats.committed == stats.offered
        assert check_trace(events).clean

    def test_ssi_aborts_at_least_ssn_on_the_schedule_family(self):
        for tail in ("T1 commit\nT3 commit\n", "T3 commit\nT1 commit\n"):
            base = FIG_SCHEDULE.rsplit("T1 commit", 1)[0]
            ssn = replay_scripted(base + tail, SI, SSN)
            ssi = replay_scripted(base + tail, SI, SSI)
            ssn_aborts = sum(1 for o in ssn.outcomes.values() if o[0] == "aborted")
            ssi_aborts = sum(1 for o in ssi.outcomes.values() if o[0] == "aborted")
            assert ssi_aborts >= ssn_aborts


class TestPlainSchemes:
    def test_pure_si_write_skew_commits_and_oracle_sees_one_cycle(self):
        result = replay_scripted(WRITE_SKEW, SI, NONE)
        assert outcomes(result) == {"T1": "committed", "T2": "committed"}
        report = check_trace(result.trace)
        assert len(report.sccs) == 1
        assert len(report.sccs[0]) == 2

    def test_user_abort_rolls_back(self):
        engine = Engine(2, SI, NONE, trace=TraceLog())
        ctx = engine.begin(0)
        engine.write(ctx, 0, "gone")
        engine.abort(ctx)
        assert ctx.status.load() == Status.ABORTED
        fresh = engine.begin(0)
        assert engine.read(fresh, 0) is None
        events = engine.trace.merged()
        assert [e.kind for e in events if e.tid == ctx.tid][-1] == "abort"
