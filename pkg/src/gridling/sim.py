"""Deterministic discrete-event simulation and single-machine local execution.

The simulator runs the real controller, scheduler and agent protocol code at
virtual time (1 unit = 1 minute).  Agents exchange signed wire lines with the
controller through in-memory queues; only job execution is virtual, each job
"running" for the duration its submit event declares.

Scenario files are plain text::

    # comments (also after an event) and blank lines are ignored outside blocks
    qos student 1
    qos faculty 2
    node node0 gpus=1 mem=64000 cpus=8
    admins root
    roster
    username,qos,expires_on,max_submit,max_running,max_wall_min,quota_gb
    alice,student,2026-05-31,20,2,2880,200
    end
    at 0 submit alice duration=5 exit=0
    #!/bin/bash
    #SBATCH --gres=gpu:1
    #SBATCH --time=10
    python train.py
    end
    at 3 cancel 1 by=root
    at 4 reconcile 2026-06-01
    at 5 silence node0
    at 6 tick

A submit line may name a job file with ``file=<path>`` (relative to the
scenario file) instead of an inline block.
"""

from __future__ import annotations

import datetime as dt
import os
import shlex
import subprocess
import time as _time
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from gridling import accounting, cluster
from gridling.accounting import AccountingLog
from gridling.accounts import AccountStore
from gridling.control.agent import Agent, start_process, terminate
from gridling.control.controller import Controller
from gridling.errors import GridlingError, LaunchFailure, MalformedScenario
from gridling.jobspec import parse_job_file
from gridling.scheduler import CycleRecord, JobState, Scheduler

SIM_HEARTBEAT_INTERVAL = 10
SIM_SECRET = bytes(range(32))
ACTIONS = ("submit", "cancel", "reconcile", "silence", "tick")


@dataclass(frozen=True)
class NodeSpec:
    name: str
    gpus: int
    mem_mb: int = 64000
    cpus: int = 1


@dataclass(frozen=True)
class Event:
    time: int
    action: str
    user: Optional[str] = None
    job_text: Optional[str] = None
    duration: int = 0
    exit_code: int = 0
    job_id: Optional[int] = None
    date: Optional[dt.date] = None
    node: Optional[str] = None
    requester: str = "root"


def submit(time, user, job_text, duration, exit_code=0) -> Event:
    return Event(time, "submit", user=user, job_text=job_text, duration=duration, exit_code=exit_code)


def cancel(time, job_id, requester="root") -> Event:
    return Event(time, "cancel", job_id=job_id, requester=requester)


def reconcile(time, date) -> Event:
    return Event(time, "reconcile", date=date)


def silence(time, node) -> Event:
    return Event(time, "silence", node=node)


def tick(time) -> Event:
    return Event(time, "tick")


@dataclass
class Scenario:
    nodes: List[NodeSpec]
    qos_table: List[Tuple[str, int]] = field(default_factory=list)
    roster: str = ""
    events: List[Event] = field(default_factory=list)
    admins: Tuple[str, ...] = ("root",)
    max_time: int = 10_000_000

    def validate(self) -> None:
        names = [n.name for n in self.nodes]
        if len(set(names)) != len(names):
            raise MalformedScenario("duplicate node names")
        times = [e.time for e in self.events]
        if times != sorted(times):
            raise MalformedScenario("events must be sorted by time")
        for e in self.events:
            if e.action not in ACTIONS:
                raise MalformedScenario(f"unknown action {e.action!r}")
            if e.time < 0:
                raise MalformedScenario("event times must be non-negative")
            if e.action == "submit" and (e.duration < 0 or e.user is None or e.job_text is None):
                raise MalformedScenario(f"bad submit event at t={e.time}")
            if e.action == "cancel" and e.job_id is None:
                raise MalformedScenario(f"cancel at t={e.time} needs a job id")
            if e.action == "reconcile" and e.date is None:
                raise MalformedScenario(f"reconcile at t={e.time} needs a date")
            if e.action == "silence" and e.node not in names:
                raise MalformedScenario(f"silence at t={e.time} names unknown node {e.node!r}")


@dataclass
class Trace:
    transitions: List[Tuple[int, int, str]]
    log_lines: List[str]
    records: Dict[int, accounting.AccountingRecord]
    cycles: List[CycleRecord]
    rejections: List[Tuple[int, str, str]]
    node_events: List[Tuple[int, str, str]]
    status_log: List[Tuple[int, int, int, bool]]
    reconciles: List[Tuple[int, List[str], List[int]]]
    launches: List[Tuple[int, int, str]]
    final_nodes: List[tuple]
    end_time: int

    def log_text(self) -> str:
        return "".join(line + "\n" for line in self.log_lines)

    def transitions_text(self) -> str:
        return "".join(f"{t} {jobid} {state}\n" for t, jobid, state in self.transitions)

    def table(self, fields: Sequence[str] = accounting.DEFAULT_FORMAT, **filters) -> str:
        header, rows = accounting.query(self.records, fields, **filters)
        return accounting.format_table(header, rows)

    def job_states(self) -> Dict[int, str]:
        return {jobid: rec.state for jobid, rec in self.records.items()}


# -- scenario files -------------------------------------------------------------

def _kv(tokens, lineno) -> Dict[str, str]:
    out = {}
    for tok in tokens:
        k, sep, v = tok.partition("=")
        if not sep:
            raise MalformedScenario(f"line {lineno}: expected key=value, got {tok!r}")
        out[k] = v
    return out


def _int(value, lineno, what):
    try:
        return int(value)
    except (TypeError, ValueError):
        raise MalformedScenario(f"line {lineno}: {what} must be an integer, got {value!r}") from None


def parse_scenario(text: str, base_dir: str = ".") -> Scenario:
    lines = text.splitlines()
    nodes, qos, events, admins = [], [], [], None
    roster = ""
    i = 0

    def block(start):
        body = []
        j = start
        while j < len(lines) and lines[j].strip() != "end":
            body.append(lines[j].strip())
            j += 1
        if j == len(lines):
            raise MalformedScenario(f"line {start}: block not closed with 'end'")
        return "\n".join(body) + "\n", j + 1

    while i < len(lines):
        lineno = i + 1
        stripped = lines[i].strip()
        i += 1
        if not stripped or stripped.startswith("#"):
            continue
        tokens = shlex.split(stripped, comments=True)
        head = tokens[0]
        if head == "qos" and len(tokens) == 3:
            qos.append((tokens[1], _int(tokens[2], lineno, "weight")))
        elif head == "node" and len(tokens) >= 2:
            attrs = _kv(tokens[2:], lineno)
            if "mem" not in attrs:
                raise MalformedScenario(f"line {lineno}: node needs mem=")
            nodes.append(NodeSpec(
                tokens[1],
                _int(attrs.get("gpus", 0), lineno, "gpus"),
                _int(attrs["mem"], lineno, "mem"),
                _int(attrs.get("cpus", 1), lineno, "cpus"),
            ))
        elif head == "admins" and len(tokens) == 2:
            admins = tuple(a for a in tokens[1].split(",") if a)
        elif head == "roster" and len(tokens) == 1:
            roster, i = block(i)
        elif head == "at" and len(tokens) >= 3:
            t = _int(tokens[1], lineno, "time")
            action, args = tokens[2], tokens[3:]
            if action == "submit":
                if not args:
                    raise MalformedScenario(f"line {lineno}: submit needs a user")
                attrs = _kv(args[1:], lineno)
                if "file" in attrs:
                    with open(os.path.join(base_dir, attrs["file"]), encoding="utf-8") as fh:
                        job_text = fh.read()
                else:
                    job_text, i = block(i)
                events.append(submit(
                    t, args[0], job_text,
                    _int(attrs.get("duration", 0), lineno, "duration"),
                    _int(attrs.get("exit", 0), lineno, "exit"),
                ))
            elif action == "cancel" and args:
                attrs = _kv(args[1:], lineno)
                events.append(cancel(t, _int(args[0], lineno, "job id"), attrs.get("by", "root")))
            elif action == "reconcile" and len(args) == 1:
                try:
                    date = dt.date.fromisoformat(args[0])
                except ValueError:
                    raise MalformedScenario(f"line {lineno}: bad date {args[0]!r}") from None
                events.append(reconcile(t, date))
            elif action == "silence" and len(args) == 1:
                events.append(silence(t, args[0]))
            elif action == "tick" and not args:
                events.append(tick(t))
            else:
                raise MalformedScenario(f"line {lineno}: cannot parse event {stripped!r}")
        else:
            raise MalformedScenario(f"line {lineno}: cannot parse {stripped!r}")
    scenario = Scenario(nodes, qos, roster, events)
    if admins is not None:
        scenario.admins = admins
    scenario.validate()
    return scenario


def load_scenario(path: str) -> Scenario:
    with open(path, encoding="utf-8") as fh:
        return parse_scenario(fh.read(), os.path.dirname(os.path.abspath(path)))


# -- simulation -----------------------------------------------------------------

class _Harness:
    def __init__(self, scenario: Scenario):
        scenario.validate()
        self.scenario = scenario
        self.now = 0
        fleet = [cluster.Node(n.name, n.gpus, n.mem_mb, n.cpus) for n in scenario.nodes]
        accounts = AccountStore(scenario.qos_table)
        if scenario.roster.strip():
            try:
                _, errors = accounts.ingest_csv(scenario.roster)
            except GridlingError as exc:
                raise MalformedScenario(f"roster: {exc}") from None
            if errors:
                raise MalformedScenario("roster: " + "; ".join(map(str, errors)))
        self.sched = Scheduler(fleet, accounts, AccountingLog(), scenario.admins, record_cycles=True)
        self.ctrl = Controller(
            self.sched,
            SIM_SECRET,
            clock=lambda: self.now,
            wallclock=lambda: self.now * 60,
            heartbeat_interval=SIM_HEARTBEAT_INTERVAL * 60,
            today=lambda: dt.date(1970, 1, 1),
        )
        self.to_controller: deque = deque()
        self.to_agent: Dict[str, deque] = {n.name: deque() for n in fleet}
        self.agents: Dict[str, Agent] = {}
        self.silent: set = set()
        # job id -> (virtual end time, exit code, node)
        self.executing: Dict[int, Tuple[int, int, str]] = {}
        self.workload: Dict[int, Tuple[int, int]] = {}
        self.launches: List[Tuple[int, int, str]] = []
        self.rejections: List[Tuple[int, str, str]] = []
        self.reconciles = []
        for node in fleet:
            agent = Agent(
                node.name,
                SIM_SECRET,
                self.to_controller.append,
                wallclock=lambda: self.now * 60,
                launcher=self._launcher(node.name),
            )
            self.agents[node.name] = agent
            self.ctrl.connect(node.name, self.to_agent[node.name].append)

    def _launcher(self, node_name):
        def launch(job_id, argv, output, error, workdir, gpus):
            duration, code = self.workload[job_id]
            self.executing[job_id] = (self.now + duration, code, node_name)
            self.launches.append((self.now, job_id, node_name))
            return _VirtualJob(self, job_id)
        return launch

    def deliver(self) -> None:
        while self.to_controller or any(self.to_agent.values()):
            while self.to_controller:
                self.ctrl.handle_line(self.to_controller.popleft())
            for name, queue in self.to_agent.items():
                while queue:
                    line = queue.popleft()
                    if name not in self.silent:
                        self.agents[name].handle_line(line)

    def report_finished(self) -> bool:
        done = sorted(
            (job_id, code, node)
            for job_id, (end, code, node) in self.executing.items()
            if end <= self.now and node not in self.silent
        )
        for job_id, code, node in done:
            del self.executing[job_id]
            self.agents[node].job_exited(job_id, code)
        return bool(done)

    def apply(self, event: Event) -> None:
        try:
            if event.action == "submit":
                job_id = self.ctrl.submit_text(event.job_text, event.user)
                self.workload[job_id] = (event.duration, event.exit_code)
            elif event.action == "cancel":
                self.ctrl.cancel(event.job_id, event.requester)
            elif event.action == "reconcile":
                removed, cancelled = self.ctrl.reconcile(event.date)
                self.reconciles.append((self.now, removed, cancelled))
            elif event.action == "silence":
                self.silent.add(event.node)
        except GridlingError as exc:
            self.rejections.append((self.now, event.action, exc.code))

    def running_jobs(self):
        return [j for j in self.sched.jobs.values() if j.state is JobState.RUNNING]

    def next_time(self, pending_events) -> Optional[int]:
        candidates = []
        if pending_events:
            candidates.append(pending_events[0].time)
        running = self.running_jobs()
        for j in running:
            candidates.append(int(j.start_time + j.request.time_limit_min))
            if j.id in self.executing and j.node_name not in self.silent:
                candidates.append(self.executing[j.id][0])
        fading = [n for n in self.sched.fleet if n.name in self.silent and not n.down]
        if running or fading:
            candidates.append((self.now // SIM_HEARTBEAT_INTERVAL + 1) * SIM_HEARTBEAT_INTERVAL)
        later = [c for c in candidates if c > self.now]
        return min(later) if later else None

    def run(self) -> Trace:
        events = deque(self.scenario.events)
        previous = None
        while True:
            # heartbeats fire on interval boundaries; a jump over idle time
            # delivers the one most recently due
            if previous is None or self.now // SIM_HEARTBEAT_INTERVAL > previous // SIM_HEARTBEAT_INTERVAL:
                for name, agent in self.agents.items():
                    if name not in self.silent:
                        agent.heartbeat()
            previous = self.now
            self.report_finished()
            self.deliver()
            while events and events[0].time == self.now:
                self.apply(events.popleft())
                self.deliver()
            while True:
                self.ctrl.step(end_of_instant=True)
                self.deliver()
                if not self.report_finished():
                    break
                self.deliver()
            nxt = self.next_time(events)
            if nxt is None or nxt > self.scenario.max_time:
                break
            self.now = nxt
        return Trace(
            transitions=list(self.sched.transitions),
            log_lines=list(self.sched.ledger.lines),
            records=dict(self.sched.ledger.records),
            cycles=list(self.sched.cycles),
            rejections=self.rejections,
            node_events=list(self.ctrl.node_events),
            status_log=[(int(t // 60), j, c, a) for t, j, c, a in self.ctrl.status_log],
            reconciles=self.reconciles,
            launches=self.launches,
            final_nodes=cluster.node_summary(self.sched.fleet),
            end_time=self.now,
        )


class _VirtualJob:
    def __init__(self, harness: _Harness, job_id: int):
        self.harness = harness
        self.job_id = job_id

    def stop(self) -> None:
        self.harness.executing.pop(self.job_id, None)


def run_sim(scenario: Scenario) -> Trace:
    """Run a scenario to quiescence; identical scenarios give identical traces."""
    return _Harness(scenario).run()


# -- local execution --------------------------------------------------------------

@dataclass
class LocalResult:
    job_id: int
    state: str
    exit_code: Optional[int]
    output_path: str
    error_path: str
    record: accounting.AccountingRecord


def run_local(
    path: str,
    minute_seconds: float = 60.0,
    log_path: Optional[str] = None,
    user: Optional[str] = None,
    workdir: Optional[str] = None,
) -> LocalResult:
    """Run a job file directly on this machine with its wall-time limit enforced.

    ``minute_seconds`` is the length of one limit minute in real seconds; it
    exists so tests can exercise timeouts quickly.
    """
    with open(path, encoding="utf-8") as fh:
        req = parse_job_file(fh.read())
    ledger = AccountingLog(log_path)
    job_id = ledger.max_jobid() + 1
    user = user or os.environ.get("USER") or "local"
    workdir = workdir or os.getcwd()
    out, err = req.output_for(job_id), req.error_for(job_id)
    minutes = lambda: _time.time() / 60.0  # noqa: E731

    def rec(event, state, code=None):
        return ledger.record(minutes(), event, job_id, req.job_name, state, code, user, req.qos)

    rec("SUBMIT", "PENDING")
    rec("START", "RUNNING")
    try:
        proc = start_process(req.command, out, err, workdir)
    except LaunchFailure:
        rec("END", "FAILED", 213)
        raise
    try:
        code = proc.wait(timeout=req.time_limit_min * minute_seconds)
    except subprocess.TimeoutExpired:
        terminate(proc, grace=1.0)
        record = rec("TIMEOUT", "TIMEOUT")
        return LocalResult(job_id, "TIMEOUT", None, out, err, record)
    code = code if code >= 0 else 128 - code
    state = "COMPLETED" if code == 0 else "FAILED"
    record = rec("END", state, code)
    return LocalResult(job_id, state, code, out, err, record)
