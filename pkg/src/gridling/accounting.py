"""Append-only job accounting log and sacct-style queries.

Each event is one line::

    time|event|jobid|jobname|state|exitcode|user|account

Empty optional fields are empty strings.  The in-memory table is always the
result of applying the log lines in order, so replaying a log file from
scratch rebuilds it exactly.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from gridling.errors import InconsistentEvent, UnknownField

EVENTS = ("SUBMIT", "START", "END", "CANCEL", "TIMEOUT")
QUERY_FIELDS = {
    "jobid": "JobID",
    "jobname": "JobName",
    "state": "State",
    "exitcode": "ExitCode",
    "user": "User",
    "account": "Account",
    "submit": "Submit",
    "start": "Start",
    "end": "End",
}
DEFAULT_FORMAT = ("jobid", "jobname", "state", "exitcode", "user", "account")

# event -> (required prior states, allowed resulting states)
_RULES = {
    "SUBMIT": ((None,), ("PENDING",)),
    "START": (("PENDING",), ("RUNNING",)),
    "END": (("RUNNING",), ("COMPLETED", "FAILED")),
    "CANCEL": (("PENDING", "RUNNING"), ("CANCELLED",)),
    "TIMEOUT": (("RUNNING",), ("TIMEOUT",)),
}


@dataclass(frozen=True)
class AccountingRecord:
    jobid: int
    jobname: str
    state: str
    exitcode: Optional[int]
    user: str
    account: str
    submit_time: Optional[float] = None
    start_time: Optional[float] = None
    end_time: Optional[float] = None

    def get(self, name: str):
        attr = {"submit": "submit_time", "start": "start_time", "end": "end_time"}.get(name, name)
        return getattr(self, attr)


def format_time(t) -> str:
    if t is None:
        return ""
    if isinstance(t, int) or float(t).is_integer():
        return str(int(t))
    return repr(float(t))


def parse_time(s: str):
    if s == "":
        return None
    try:
        return int(s)
    except ValueError:
        return float(s)


def format_line(time, event, jobid, jobname, state, exitcode, user, account) -> str:
    fields = [
        format_time(time),
        event,
        str(jobid),
        jobname,
        state,
        "" if exitcode is None else str(exitcode),
        user,
        account,
    ]
    for f in fields:
        if "|" in f or "\n" in f or "\r" in f:
            raise InconsistentEvent(f"field {f!r} cannot be stored in the log")
    return "|".join(fields)


def apply_line(records: Dict[int, AccountingRecord], line: str) -> AccountingRecord:
    """Apply one log line to ``records`` in place and return the updated record."""
    parts = line.rstrip("\n").split("|")
    if len(parts) != 8:
        raise InconsistentEvent(f"expected 8 fields, got {len(parts)}: {line!r}")
    time_s, event, jobid_s, jobname, state, exit_s, user, account = parts
    if event not in _RULES:
        raise InconsistentEvent(f"unknown event {event!r}")
    try:
        time = parse_time(time_s)
        jobid = int(jobid_s)
        exitcode = None if exit_s == "" else int(exit_s)
    except ValueError:
        raise InconsistentEvent(f"unparseable numeric field in {line!r}") from None
    before, after = _RULES[event]
    current = records.get(jobid)
    if (current.state if current else None) not in before:
        have = current.state if current else "no record"
        raise InconsistentEvent(f"{event} for job {jobid} in state {have}")
    if state not in after:
        raise InconsistentEvent(f"{event} cannot produce state {state}")
    if current is None:
        rec = AccountingRecord(jobid, jobname, state, exitcode, user, account, submit_time=time)
    else:
        if (jobname, user, account) != (current.jobname, current.user, current.account):
            raise InconsistentEvent(f"{event} for job {jobid} does not match its record")
        if event == "START":
            rec = replace(current, state=state, start_time=time)
        else:
            rec = replace(current, state=state, exitcode=exitcode, end_time=time)
    records[jobid] = rec
    return rec


def replay(lines: Iterable[str]) -> Dict[int, AccountingRecord]:
    records: Dict[int, AccountingRecord] = {}
    for line in lines:
        if line.strip():
            apply_line(records, line)
    return records


class AccountingLog:
    """In-memory accounting table backed by an optional append-only file."""

    def __init__(self, path: Optional[str] = None):
        self.path = path
        self.lines: List[str] = []
        self.records: Dict[int, AccountingRecord] = {}
        if path and os.path.exists(path):
            with open(path, encoding="utf-8") as fh:
                for line in fh:
                    line = line.rstrip("\n")
                    if line:
                        apply_line(self.records, line)
                        self.lines.append(line)

    def record(self, time, event, jobid, jobname, state, exitcode, user, account) -> AccountingRecord:
        line = format_line(time, event, jobid, jobname, state, exitcode, user, account)
        rec = apply_line(self.records, line)
        self.lines.append(line)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")
        return rec

    def record_job(self, event: str, job, time) -> AccountingRecord:
        """Record an event from a scheduler Job snapshot."""
        return self.record(
            time, event, job.id, job.request.job_name, job.state.value,
            job.exit_code, job.username, job.request.qos,
        )

    def max_jobid(self) -> int:
        return max(self.records, default=0)

    def query(
        self,
        format_fields: Sequence[str] = DEFAULT_FORMAT,
        user: Optional[str] = None,
        state: Optional[str] = None,
    ) -> Tuple[List[str], List[List[str]]]:
        return query(self.records, format_fields, user=user, state=state)


def parse_format(spec: str) -> List[str]:
    return [f.strip().lower() for f in spec.split(",") if f.strip()]


def query(
    records: Dict[int, AccountingRecord],
    format_fields: Sequence[str] = DEFAULT_FORMAT,
    user: Optional[str] = None,
    state: Optional[str] = None,
) -> Tuple[List[str], List[List[str]]]:
    fields = list(format_fields)
    for f in fields:
        if f not in QUERY_FIELDS:
            raise UnknownField(f"unknown field {f!r}; choose from {', '.join(QUERY_FIELDS)}")
    if not fields:
        raise UnknownField("no fields requested")
    header = [QUERY_FIELDS[f] for f in fields]
    rows = []
    for jobid in sorted(records):
        rec = records[jobid]
        if user is not None and rec.user != user:
            continue
        if state is not None and rec.state != state:
            continue
        row = []
        for f in fields:
            v = rec.get(f)
            if f in ("submit", "start", "end"):
                row.append(format_time(v))
            else:
                row.append("" if v is None else str(v))
        rows.append(row)
    return header, rows


def format_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    """Aligned plain-text columns with a dashed rule under the header."""
    widths = [max(len(r[i]) for r in [header, *rows]) for i in range(len(header))]
    out = [
        " ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip(),
        " ".join("-" * w for w in widths),
    ]
    for r in rows:
        out.append(" ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
    return "\n".join(out) + "\n"
