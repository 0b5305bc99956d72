"""Job lifecycle and the QOS-priority scheduling cycle.

The scheduler owns the job table, the fleet, the account store and the
accounting log.  It is not thread-safe; a controller serialises all calls.
Time values are in minutes (virtual minutes in simulation).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from gridling import cluster
from gridling.accounting import AccountingLog
from gridling.accounts import AccountStore, check_submit
from gridling.errors import (
    AlreadyTerminal,
    NotRunning,
    PermissionDenied,
    SubmitRejected,
    UnknownJob,
    UnknownQos,
)
from gridling.jobspec import JobRequest

MULTI_NODE = "MultiNodeUnsupported"


class JobState(str, enum.Enum):
    PENDING = "PENDING"
    RUNNING = "RUNNING"
    COMPLETED = "COMPLETED"
    FAILED = "FAILED"
    CANCELLED = "CANCELLED"
    TIMEOUT = "TIMEOUT"

    def __str__(self):
        return self.value

    @property
    def terminal(self) -> bool:
        return self in TERMINAL


TERMINAL = frozenset({JobState.COMPLETED, JobState.FAILED, JobState.CANCELLED, JobState.TIMEOUT})
TRANSITIONS = {
    JobState.PENDING: frozenset({JobState.RUNNING, JobState.CANCELLED}),
    JobState.RUNNING: frozenset(
        {JobState.COMPLETED, JobState.FAILED, JobState.CANCELLED, JobState.TIMEOUT}
    ),
}


@dataclass
class Job:
    id: int
    request: JobRequest
    username: str
    submit_time: float
    state: JobState = JobState.PENDING
    start_time: Optional[float] = None
    end_time: Optional[float] = None
    exit_code: Optional[int] = None
    allocation: Optional[cluster.Allocation] = None
    node_name: Optional[str] = None
    workdir: Optional[str] = None

    @property
    def is_live(self) -> bool:
        return self.state in (JobState.PENDING, JobState.RUNNING)

    def move_to(self, new: JobState) -> None:
        if new not in TRANSITIONS.get(self.state, ()):
            raise AlreadyTerminal(f"job {self.id}: illegal transition {self.state} -> {new}")
        self.state = new


@dataclass(frozen=True)
class CycleRecord:
    """Everything a schedule cycle saw and decided; consumed by oracles."""

    now: float
    seq: int                          # len(transitions) when the cycle began
    pending: Tuple[tuple, ...]        # (job_id, username, gpus, mem_mb, priority key), scan order
    running: Dict[str, int]           # username -> running count before the cycle
    max_running: Dict[str, int]
    fleet: Tuple[tuple, ...]          # (name, down, gpus_total, busy indices, mem_free_mb)
    started: Tuple[tuple, ...]        # (job_id, node_name, gpu indices) in start order


def priority_key(job: Job, qos_table) -> tuple:
    """Sort key: higher QOS weight first, then earlier submission, then lower id."""
    try:
        weight = qos_table[job.request.qos]
    except KeyError:
        raise UnknownQos(f"job {job.id} requests unknown QOS {job.request.qos!r}") from None
    return (-weight, job.submit_time, job.id)


class Scheduler:
    def __init__(
        self,
        fleet: Sequence[cluster.Node],
        accounts: Optional[AccountStore] = None,
        ledger: Optional[AccountingLog] = None,
        admins: Iterable[str] = ("root",),
        record_cycles: bool = False,
    ):
        names = [n.name for n in fleet]
        if len(set(names)) != len(names):
            raise ValueError("node names must be unique")
        self.fleet = list(fleet)
        self.accounts = accounts if accounts is not None else AccountStore()
        self.ledger = ledger if ledger is not None else AccountingLog()
        self.admins = set(admins)
        self.jobs: Dict[int, Job] = {}
        self._next_id = self.ledger.max_jobid() + 1
        self.transitions: List[Tuple[float, int, str]] = []
        self.record_cycles = record_cycles
        self.cycles: List[CycleRecord] = []

    # -- helpers -----------------------------------------------------------

    def job(self, job_id: int) -> Job:
        try:
            return self.jobs[job_id]
        except KeyError:
            raise UnknownJob(f"no job with id {job_id}") from None

    def counts(self, username: str) -> Tuple[int, int]:
        live = running = 0
        for j in self.jobs.values():
            if j.username == username and j.is_live:
                live += 1
                running += j.state is JobState.RUNNING
        return live, running

    def live_jobs(self) -> List[Job]:
        return [j for j in self.jobs.values() if j.is_live]

    def _log(self, event: str, job: Job, now: float) -> None:
        self.ledger.record_job(event, job, now)
        self.transitions.append((now, job.id, job.state.value))

    def _finish(self, job: Job, state: JobState, now: float, event: str, exit_code=None) -> Job:
        job.move_to(state)
        if job.allocation is not None:
            cluster.release(job.allocation, self.fleet)
            job.allocation = None
        job.exit_code = exit_code
        job.end_time = now
        self._log(event, job, now)
        return job

    # -- operations --------------------------------------------------------

    def submit(self, req: JobRequest, username: str, now: float, workdir: Optional[str] = None) -> int:
        user = self.accounts.active_user(username)
        if req.nodes > 1:
            raise SubmitRejected(MULTI_NODE, f"{MULTI_NODE}: jobs may request one node only")
        live, running = self.counts(username)
        violation = check_submit(user, req, live, running, self.accounts.qos)
        if violation:
            raise SubmitRejected(violation, f"{violation}: submission by {username!r} refused")
        job = Job(self._next_id, req, username, now, workdir=workdir)
        self._next_id += 1
        self.jobs[job.id] = job
        self._log("SUBMIT", job, now)
        return job.id

    def pending_in_order(self) -> List[Job]:
        pending = [j for j in self.jobs.values() if j.state is JobState.PENDING]
        return sorted(pending, key=lambda j: priority_key(j, self.accounts.qos))

    def schedule_cycle(self, now: float) -> List[int]:
        """Start every pending job that fits, in priority order.

        A job that cannot start (user at max_running, or no node has room)
        does not block lower-priority jobs behind it.
        """
        order = self.pending_in_order()
        running = {}
        for j in self.jobs.values():
            if j.state is JobState.RUNNING:
                running[j.username] = running.get(j.username, 0) + 1
        record = self.record_cycles and bool(order)
        if record:
            seq = len(self.transitions)
            before_running = dict(running)
            before_fleet = tuple(
                (n.name, n.down, n.gpus_total, frozenset(n.gpu_busy), n.mem_free_mb)
                for n in self.fleet
            )
        started = []
        for job in order:
            user = self.accounts.users.get(job.username)
            if user is None or not user.active:
                continue
            if running.get(job.username, 0) >= user.max_running:
                continue
            alloc = cluster.allocate(job.request, self.fleet, job_id=job.id)
            if alloc is None:
                continue
            job.move_to(JobState.RUNNING)
            job.allocation = alloc
            job.node_name = alloc.node_name
            job.start_time = now
            running[job.username] = running.get(job.username, 0) + 1
            self._log("START", job, now)
            started.append(job)
        if record:
            self.cycles.append(
                CycleRecord(
                    now=now,
                    seq=seq,
                    pending=tuple(
                        (j.id, j.username, j.request.gpus, j.request.mem_mb,
                         priority_key(j, self.accounts.qos))
                        for j in order
                    ),
                    running=before_running,
                    max_running={
                        j.username: self.accounts.users[j.username].max_running
                        for j in order if j.username in self.accounts.users
                    },
                    fleet=before_fleet,
                    started=tuple(
                        (j.id, j.allocation.node_name, j.allocation.gpu_indices) for j in started
                    ),
                )
            )
        return [j.id for j in started]

    def complete(self, job_id: int, exit_code: int, now: float) -> Job:
        job = self.job(job_id)
        if job.state is not JobState.RUNNING:
            raise NotRunning(f"job {job_id} is {job.state}, not RUNNING")
        state = JobState.COMPLETED if exit_code == 0 else JobState.FAILED
        return self._finish(job, state, now, "END", exit_code)

    def cancel(self, job_id: int, requester: Optional[str], now: float) -> Job:
        """Cancel a job.  ``requester=None`` means an internal (system) request."""
        job = self.job(job_id)
        if requester is not None and requester != job.username and requester not in self.admins:
            raise PermissionDenied(f"{requester!r} may not cancel job {job_id}")
        if job.state.terminal:
            raise AlreadyTerminal(f"job {job_id} is already {job.state}")
        return self._finish(job, JobState.CANCELLED, now, "CANCEL")

    def timeout(self, job_id: int, now: float) -> Job:
        job = self.job(job_id)
        if job.state is not JobState.RUNNING:
            raise NotRunning(f"job {job_id} is {job.state}, not RUNNING")
        return self._finish(job, JobState.TIMEOUT, now, "TIMEOUT")

    def enforce_walltime(self, now: float, end_of_instant: bool = False) -> List[int]:
        """Time out running jobs that have exceeded their limit.

        Running exactly the limit is allowed.  With ``end_of_instant`` the
        instant ``now`` counts as already elapsed, so a job still running
        with exactly its limit used is over it; the simulator passes this once
        every completion due at ``now`` has been processed.
        """
        def over(j):
            used = now - j.start_time
            return used >= j.request.time_limit_min if end_of_instant else used > j.request.time_limit_min

        expired = [
            j for j in sorted(self.jobs.values(), key=lambda j: j.id)
            if j.state is JobState.RUNNING and over(j)
        ]
        for job in expired:
            self.timeout(job.id, now)
        return [j.id for j in expired]

    def fail_node(self, node_name: str, now: float) -> List[int]:
        """Mark a node DOWN and fail the jobs running on it."""
        node = cluster.find_node(self.fleet, node_name)
        node.down = True
        failed = sorted(
            j.id for j in self.jobs.values()
            if j.state is JobState.RUNNING and j.node_name == node_name
        )
        for job_id in failed:
            self._finish(self.jobs[job_id], JobState.FAILED, now, "END")
        return failed

    def node_up(self, node_name: str) -> None:
        cluster.find_node(self.fleet, node_name).down = False

    def reconcile(self, today, now: float) -> Tuple[List[str], List[int]]:
        removed, to_cancel = self.accounts.reconcile_expired(today, self.jobs.values())
        for job_id in to_cancel:
            self.cancel(job_id, None, now)
        return removed, to_cancel

    def remove_user(self, username: str, now: float) -> List[int]:
        """Remove one account immediately and cancel its live jobs."""
        self.accounts.remove_user(username)
        cancelled = sorted(j.id for j in self.jobs.values() if j.username == username and j.is_live)
        for job_id in cancelled:
            self.cancel(job_id, None, now)
        return cancelled


__all__ = [
    "CycleRecord",
    "Job",
    "JobState",
    "MULTI_NODE",
    "Scheduler",
    "TERMINAL",
    "TRANSITIONS",
    "priority_key",
]
