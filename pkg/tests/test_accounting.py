import random

import pytest
from hypothesis import given, settings, strategies as st

from gridling.accounting import (
    DEFAULT_FORMAT,
    AccountingLog,
    AccountingRecord,
    apply_line,
    format_line,
    format_table,
    parse_format,
    query,
    replay,
)
from gridling.errors import InconsistentEvent, UnknownField
from oracles import naive_filter

ACCT_FORMAT = "jobid,jobname,state,exitcode,user,account"


def log_with_jobs():
    log = AccountingLog()
    log.record(0, "SUBMIT", 1, "test", "PENDING", None, "alice", "student")
    log.record(1, "START", 1, "test", "RUNNING", None, "alice", "student")
    log.record(5, "END", 1, "test", "COMPLETED", 0, "alice", "student")
    log.record(2, "SUBMIT", 2, "train", "PENDING", None, "bob", "faculty")
    log.record(3, "CANCEL", 2, "train", "CANCELLED", None, "bob", "faculty")
    log.record(4, "SUBMIT", 3, "eval", "PENDING", None, "alice", "student")
    return log


def test_submit_creates_pending_with_empty_exitcode():
    log = AccountingLog()
    rec = log.record(0, "SUBMIT", 1, "test", "PENDING", None, "alice", "normal")
    assert rec == AccountingRecord(1, "test", "PENDING", None, "alice", "normal", submit_time=0)
    assert log.lines == ["0|SUBMIT|1|test|PENDING||alice|normal"]


def test_end_after_start_sets_exitcode_and_end():
    log = log_with_jobs()
    rec = log.records[1]
    assert (rec.state, rec.exitcode, rec.submit_time, rec.start_time, rec.end_time) == ("COMPLETED", 0, 0, 1, 5)
    assert log.lines[2] == "5|END|1|test|COMPLETED|0|alice|student"


@pytest.mark.parametrize("line", [
    "0|START|9|x|RUNNING||u|a",               # unknown job
    "0|SUBMIT|1|test|PENDING||alice|student",  # duplicate submit
    "0|END|3|eval|COMPLETED|0|alice|student",  # END before START
    "0|START|1|test|RUNNING||alice|student",   # terminal record is immutable
    "0|START|3|eval|COMPLETED||alice|student",  # wrong resulting state
    "0|START|3|other|RUNNING||alice|student",  # identity mismatch
    "0|BOOT|3|eval|RUNNING||alice|student",
    "0|SUBMIT|x|eval|PENDING||alice|student",
    "0|SUBMIT|4|eval|PENDING||alice",
])
def test_inconsistent_events(line):
    log = log_with_jobs()
    before = dict(log.records)
    with pytest.raises(InconsistentEvent):
        apply_line(log.records, line)
    assert log.records == before


def test_unstorable_field():
    with pytest.raises(InconsistentEvent):
        format_line(0, "SUBMIT", 1, "a|b", "PENDING", None, "u", "q")


def test_six_column_format():
    header, rows = log_with_jobs().query(parse_format(ACCT_FORMAT))
    assert header == ["JobID", "JobName", "State", "ExitCode", "User", "Account"]
    assert rows[0] == ["1", "test", "COMPLETED", "0", "alice", "student"]
    assert rows[1] == ["2", "train", "CANCELLED", "", "bob", "faculty"]
    assert tuple(parse_format(ACCT_FORMAT)) == DEFAULT_FORMAT


def test_empty_log_gives_header_only():
    text = format_table(*AccountingLog().query())
    assert text.splitlines()[0].split() == ["JobID", "JobName", "State", "ExitCode", "User", "Account"]
    assert len(text.splitlines()) == 2


def test_unknown_field():
    with pytest.raises(UnknownField):
        AccountingLog().query(["jobid", "bogus"])
    with pytest.raises(UnknownField):
        AccountingLog().query([])


def test_filters_and_time_columns():
    log = log_with_jobs()
    header, rows = log.query(["jobid", "submit", "start", "end"], user="alice")
    assert rows == [["1", "0", "1", "5"], ["3", "4", "", ""]]
    _, rows = log.query(["jobid"], state="CANCELLED")
    assert rows == [["2"]]


def test_file_replay_and_restart(tmp_path):
    path = tmp_path / "acct.log"
    log = AccountingLog(str(path))
    for line in log_with_jobs().lines:
        log.record(*_split(line))
    assert path.read_text().splitlines() == log.lines
    reopened = AccountingLog(str(path))
    assert reopened.records == log.records and reopened.max_jobid() == 3
    reopened.record(6, "START", 3, "eval", "RUNNING", None, "alice", "student")
    assert replay(path.read_text().splitlines()) == reopened.records


def test_fractional_times_round_trip():
    log = AccountingLog()
    log.record(1712345678.25 / 60, "SUBMIT", 1, "j", "PENDING", None, "u", "q")
    assert replay(log.lines) == log.records


def _split(line):
    t, ev, jid, name, state, code, user, acct = line.split("|")
    return int(t), ev, int(jid), name, state, (int(code) if code else None), user, acct


# -- random consistent histories ---------------------------------------------------

def random_history(rng, n_jobs=8):
    log = AccountingLog()
    state = {}
    t = 0
    users = ["alice", "bob", "carol"]
    for _ in range(n_jobs * 4):
        t += rng.choice([0, 1, 0.5])
        live = [j for j, s in state.items() if s in ("PENDING", "RUNNING")]
        if (rng.random() < 0.3 or not live) and len(state) < n_jobs:
            j = len(state) + 1
            u = rng.choice(users)
            log.record(t, "SUBMIT", j, f"job{j}", "PENDING", None, u, "q" + u[0])
            state[j] = "PENDING"
        elif live:
            j = rng.choice(live)
            rec = log.records[j]
            args = (j, rec.jobname)
            if state[j] == "PENDING":
                ev, new, code = rng.choice([("START", "RUNNING", None), ("CANCEL", "CANCELLED", None)])
            else:
                ev, new, code = rng.choice([
                    ("END", "COMPLETED", 0), ("END", "FAILED", 3), ("END", "FAILED", None),
                    ("CANCEL", "CANCELLED", None), ("TIMEOUT", "TIMEOUT", None),
                ])
            log.record(t, ev, *args, new, code, rec.user, rec.account)
            state[j] = new
    return log


def test_random_histories_replay_and_filter():
    rng = random.Random(3)
    for _ in range(300):
        log = random_history(rng)
        assert replay(log.lines) == log.records
        for user in (None, "alice", "bob"):
            for state in (None, "PENDING", "COMPLETED", "FAILED"):
                _, rows = query(log.records, ["jobid", "user", "state"], user=user, state=state)
                expected = [[str(r.jobid), r.user, r.state] for r in naive_filter(log.records, user, state)]
                assert rows == expected
        for rec in log.records.values():
            if rec.state in ("COMPLETED", "FAILED", "CANCELLED", "TIMEOUT"):
                assert rec.end_time is not None


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from(["jobid", "jobname", "state", "exitcode", "user", "account", "submit", "start", "end"]),
                min_size=1, max_size=9))
def test_columns_follow_requested_order(fields):
    header, rows = log_with_jobs().query(fields)
    assert len(header) == len(fields)
    for row in rows:
        rec = log_with_jobs().records[int(row[fields.index("jobid")])] if "jobid" in fields else None
        assert len(row) == len(fields)
        if rec is not None:
            assert row[fields.index("jobid")] == str(rec.jobid)
