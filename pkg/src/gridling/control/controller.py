"""Transport-independent controller.

The controller wraps a :class:`~gridling.scheduler.Scheduler` and speaks the
wire protocol.  Transports (the TCP server, the simulator) feed it lines and
give it a ``send`` callable per connected node; every call is expected to be
serialised by the caller.

Two clocks are used: ``clock()`` returns scheduler time in minutes and
``wallclock()`` returns protocol time in seconds.
"""

from __future__ import annotations

import datetime as dt
import logging
import time as _time
from typing import Callable, Dict, List, Optional, Tuple

from gridling import accounting, cluster
from gridling.control import protocol
from gridling.control.protocol import pack, unpack
from gridling.errors import GridlingError, Malformed, PermissionDenied, ProtocolError
from gridling.jobspec import parse_job_file
from gridling.scheduler import JobState, Scheduler

log = logging.getLogger(__name__)

DEFAULT_HEARTBEAT_INTERVAL = 10.0
MISSED_HEARTBEATS = 3


class Controller:
    def __init__(
        self,
        scheduler: Scheduler,
        secret: bytes,
        clock: Callable[[], float] = lambda: _time.time() / 60.0,
        wallclock: Callable[[], float] = _time.time,
        heartbeat_interval: float = DEFAULT_HEARTBEAT_INTERVAL,
        skew_window: float = protocol.DEFAULT_SKEW_WINDOW,
        today: Callable[[], dt.date] = dt.date.today,
    ):
        self.scheduler = scheduler
        self.secret = secret
        self.clock = clock
        self.wallclock = wallclock
        self.heartbeat_interval = heartbeat_interval
        self.skew_window = skew_window
        self.today = today
        self.links: Dict[str, Callable[[str], None]] = {}
        self.last_heartbeat: Dict[str, float] = {}
        # (wall time, job id, exit code, applied) for every STATUS received
        self.status_log: List[Tuple[float, int, int, bool]] = []
        self.node_events: List[Tuple[float, str, str]] = []
        # a node is DOWN until its agent first reports in
        for node in scheduler.fleet:
            node.down = True

    # -- outgoing ----------------------------------------------------------

    def _line(self, kind: str, fields) -> str:
        return protocol.encode(kind, fields, self.wallclock(), self.secret)

    def _send(self, node_name: str, kind: str, fields) -> None:
        send = self.links.get(node_name)
        if send is None:
            log.warning("no link to node %s; dropping %s", node_name, kind)
            return
        send(self._line(kind, fields))

    def connect(self, node_name: str, send: Callable[[str], None]) -> None:
        cluster.find_node(self.scheduler.fleet, node_name)
        self.links[node_name] = send

    def disconnect(self, node_name: str, send=None) -> None:
        if send is None or self.links.get(node_name) is send:
            self.links.pop(node_name, None)

    def _launch(self, job_id: int) -> None:
        job = self.scheduler.job(job_id)
        fields = [
            ("jobid", job.id),
            ("argv", pack("\0".join(job.request.command))),
            ("output", pack(job.request.output_for(job.id))),
            ("error", pack(job.request.error_for(job.id))),
            ("gpus", ",".join(str(i) for i in sorted(job.allocation.gpu_indices))),
            ("limit", job.request.time_limit_min),
        ]
        if job.workdir:
            fields.append(("workdir", pack(job.workdir)))
        self._send(job.node_name, "LAUNCH", fields)

    def _stop(self, job) -> None:
        if job.node_name is not None:
            self._send(job.node_name, "STOP", [("jobid", job.id)])

    # -- incoming from agents -----------------------------------------------

    def authenticate(self, line: str) -> protocol.Message:
        return protocol.authenticate(line, self.secret, self.wallclock(), self.skew_window)

    def handle_agent_message(self, msg: protocol.Message) -> None:
        if msg.kind == "HEARTBEAT":
            node_name = msg["node"]
            node = cluster.find_node(self.scheduler.fleet, node_name)
            self.last_heartbeat[node_name] = self.wallclock()
            if node.down:
                self.scheduler.node_up(node_name)
                self.node_events.append((self.clock(), node_name, "UP"))
        elif msg.kind == "STATUS":
            job_id, code = int(msg["jobid"]), int(msg["exit"])
            job = self.scheduler.jobs.get(job_id)
            applied = job is not None and job.state is JobState.RUNNING
            if applied and msg.get("node") not in (None, job.node_name):
                applied = False
            if applied:
                self.scheduler.complete(job_id, code, self.clock())
            self.status_log.append((self.wallclock(), job_id, code, applied))
        elif msg.kind == "ACK":
            log.debug("ack %s", msg.as_dict())
        else:
            raise Malformed(f"agents may not send {msg.kind}")

    def handle_line(self, line: str) -> Optional[str]:
        """Process one inbound line; returns a reply line for client requests."""
        try:
            msg = self.authenticate(line)
        except ProtocolError as exc:
            log.warning("rejected line: %s", exc)
            return self._line("ERROR", [("code", exc.code), ("msg", pack(str(exc)))])
        if msg.kind == "REQUEST":
            return self.handle_request(msg)
        try:
            self.handle_agent_message(msg)
        except (GridlingError, ValueError) as exc:
            log.warning("bad agent message %s: %s", msg.kind, exc)
        return None

    # -- periodic work -------------------------------------------------------

    def check_heartbeats(self) -> List[int]:
        """Mark nodes DOWN after three missed heartbeat intervals; returns failed job ids."""
        now = self.wallclock()
        failed = []
        deadline = MISSED_HEARTBEATS * self.heartbeat_interval
        for node in self.scheduler.fleet:
            last = self.last_heartbeat.get(node.name)
            if node.down or last is None:
                continue
            if now - last >= deadline:
                lost = self.scheduler.fail_node(node.name, self.clock())
                # if the agent is alive but unheard, make sure its jobs do not
                # keep using GPUs the scheduler now considers free
                for job_id in lost:
                    self._stop(self.scheduler.job(job_id))
                failed += lost
                self.node_events.append((self.clock(), node.name, "DOWN"))
                log.warning("node %s missed %d heartbeats; marked DOWN", node.name, MISSED_HEARTBEATS)
        return failed

    def step(self, end_of_instant: bool = False) -> List[int]:
        """Heartbeat check, wall-time enforcement, then a scheduling cycle."""
        now = self.clock()
        self.check_heartbeats()
        sched = self.scheduler
        for job_id in sched.enforce_walltime(now, end_of_instant=end_of_instant):
            self._stop(sched.job(job_id))
        started = sched.schedule_cycle(now)
        for job_id in started:
            self._launch(job_id)
        return started

    # -- direct operations (used by client requests and the simulator) ---------

    def submit_text(self, text: str, username: str, workdir: Optional[str] = None) -> int:
        return self.scheduler.submit(parse_job_file(text), username, self.clock(), workdir=workdir)

    def cancel(self, job_id: int, requester: Optional[str]):
        was_running = self.scheduler.job(job_id).state is JobState.RUNNING
        job = self.scheduler.cancel(job_id, requester, self.clock())
        if was_running:
            self._stop(job)
        return job

    def reconcile(self, today: dt.date) -> Tuple[List[str], List[int]]:
        running = {j.id for j in self.scheduler.live_jobs() if j.state is JobState.RUNNING}
        removed, cancelled = self.scheduler.reconcile(today, self.clock())
        for job_id in cancelled:
            if job_id in running:
                self._stop(self.scheduler.job(job_id))
        return removed, cancelled

    # -- client requests --------------------------------------------------------

    def _require_admin(self, user: str) -> None:
        if user not in self.scheduler.admins:
            raise PermissionDenied(f"{user!r} is not an administrator")

    def handle_request(self, msg: protocol.Message) -> str:
        op = msg.get("op", "")
        user = msg.get("user", "")
        handler = getattr(self, f"_op_{op}", None)
        try:
            if handler is None:
                raise Malformed(f"unknown request op {op!r}")
            fields = handler(msg, user)
        except GridlingError as exc:
            return self._line("ERROR", [("code", exc.code), ("msg", pack(str(exc)))])
        except (ValueError, KeyError) as exc:
            return self._line("ERROR", [("code", "BadRequest"), ("msg", pack(str(exc)))])
        return self._line("ACK", fields)

    def _op_ping(self, msg, user):
        return [("pong", "1")]

    def _op_submit(self, msg, user):
        workdir = unpack(msg["workdir"]) if msg.get("workdir") else None
        job_id = self.submit_text(unpack(msg["job"]), user, workdir)
        return [("jobid", job_id)]

    def _op_status(self, msg, user):
        job = self.scheduler.job(int(msg["jobid"]))
        return [
            ("jobid", job.id),
            ("state", job.state.value),
            ("exit", "" if job.exit_code is None else job.exit_code),
            ("output", pack(job.request.output_for(job.id))),
            ("error", pack(job.request.error_for(job.id))),
        ]

    def _op_cancel(self, msg, user):
        job = self.cancel(int(msg["jobid"]), user)
        return [("jobid", job.id), ("state", job.state.value)]

    def _op_acct(self, msg, user):
        fields = accounting.parse_format(msg.get("format") or ",".join(accounting.DEFAULT_FORMAT))
        header, rows = self.scheduler.ledger.query(
            fields, user=msg.get("filter_user") or None, state=msg.get("state") or None
        )
        return [("data", pack(accounting.format_table(header, rows)))]

    def _op_info(self, msg, user):
        rows = cluster.node_summary(self.scheduler.fleet)
        return [("data", pack(cluster.format_node_summary(rows)))]

    def _op_user_ingest(self, msg, user):
        self._require_admin(user)
        created, errors = self.scheduler.accounts.ingest_csv(unpack(msg["csv"]))
        report = [f"created {len(created)} users"] + [str(e) for e in errors]
        return [("created", len(created)), ("errors", len(errors)), ("data", pack("\n".join(report) + "\n"))]

    def _op_user_list(self, msg, user):
        self._require_admin(user)
        accounts = self.scheduler.accounts
        lines = ["username,uid,qos,expires_on,max_submit,max_running,max_wall_min,quota_gb,active"]
        for u in sorted(accounts.users.values(), key=lambda u: u.uid):
            lines.append(
                f"{u.username},{u.uid},{u.qos},{u.expires_on.isoformat()},{u.max_submit},"
                f"{u.max_running},{u.max_wall_min},{u.quota_gb},{'yes' if u.active else 'no'}"
            )
        return [("data", pack("\n".join(lines) + "\n"))]

    def _op_user_reconcile(self, msg, user):
        self._require_admin(user)
        date = dt.date.fromisoformat(msg["date"]) if msg.get("date") else self.today()
        removed, cancelled = self.reconcile(date)
        report = [f"removed {name}" for name in removed] + [f"cancelled {j}" for j in cancelled]
        return [
            ("removed", ",".join(removed)),
            ("cancelled", ",".join(map(str, cancelled))),
            ("data", pack("".join(line + "\n" for line in report))),
        ]

    def _op_qos_define(self, msg, user):
        self._require_admin(user)
        level = self.scheduler.accounts.define_qos(msg["name"], int(msg["weight"]))
        return [("name", level.name), ("weight", level.weight)]
