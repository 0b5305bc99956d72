"""Node agent: runs the commands the controller launches on this node."""

from __future__ import annotations

import logging
import os
import subprocess
import threading
import time as _time
from typing import Callable, Dict, Optional, Sequence

from gridling.control import protocol
from gridling.control.protocol import LAUNCH_FAILED_EXIT, unpack
from gridling.errors import GridlingError, LaunchFailure, ProtocolError

log = logging.getLogger(__name__)

STOP_GRACE_SECONDS = 5.0


def start_process(
    argv: Sequence[str],
    output_path: str,
    error_path: str,
    workdir: Optional[str] = None,
    env: Optional[dict] = None,
) -> subprocess.Popen:
    """Start ``argv`` with stdout/stderr appended to the given files.

    Relative paths are resolved against ``workdir``.  Raises LaunchFailure if
    the files cannot be opened or the program cannot be executed.
    """
    base = workdir or os.getcwd()
    out_path = os.path.join(base, output_path)
    err_path = os.path.join(base, error_path)
    try:
        out = open(out_path, "ab")
        err = out if os.path.abspath(err_path) == os.path.abspath(out_path) else open(err_path, "ab")
    except OSError as exc:
        raise LaunchFailure(f"cannot open job output: {exc}") from None
    try:
        return subprocess.Popen(
            list(argv),
            stdout=out,
            stderr=err,
            stdin=subprocess.DEVNULL,
            cwd=base,
            env=env,
            start_new_session=True,
        )
    except (OSError, ValueError) as exc:
        raise LaunchFailure(f"cannot execute {argv[0] if argv else ''!r}: {exc}") from None
    finally:
        out.close()
        if err is not out:
            err.close()


def terminate(proc: subprocess.Popen, grace: float = STOP_GRACE_SECONDS) -> None:
    if proc.poll() is not None:
        return
    try:
        os.killpg(proc.pid, 15)
    except (ProcessLookupError, PermissionError):
        proc.terminate()
    try:
        proc.wait(grace)
    except subprocess.TimeoutExpired:
        try:
            os.killpg(proc.pid, 9)
        except (ProcessLookupError, PermissionError):
            proc.kill()
        proc.wait()


class Agent:
    """Protocol logic of a node agent, independent of transport.

    ``send`` transmits an encoded line to the controller.  Jobs are started
    through ``launcher(job_id, argv, output, error, workdir, gpus)`` which
    must return an object with ``stop()``; it reports completion by calling
    :meth:`job_exited`.  The default launcher runs real subprocesses.
    """

    def __init__(
        self,
        node: str,
        secret: bytes,
        send: Callable[[str], None],
        wallclock: Callable[[], float] = _time.time,
        skew_window: float = protocol.DEFAULT_SKEW_WINDOW,
        launcher=None,
    ):
        self.node = node
        self.secret = secret
        self.send = send
        self.wallclock = wallclock
        self.skew_window = skew_window
        self.launcher = launcher or self._launch_subprocess
        self.jobs: Dict[int, object] = {}
        self.stopped: set = set()
        self._lock = threading.Lock()

    def _emit(self, kind: str, fields) -> None:
        self.send(protocol.encode(kind, fields, self.wallclock(), self.secret))

    def heartbeat(self) -> None:
        self._emit("HEARTBEAT", [("node", self.node)])

    def job_exited(self, job_id: int, exit_code: int) -> None:
        with self._lock:
            self.jobs.pop(job_id, None)
            if job_id in self.stopped:
                self.stopped.discard(job_id)
                return
        self._emit("STATUS", [("jobid", job_id), ("exit", exit_code), ("node", self.node)])

    def handle_line(self, line: str) -> None:
        try:
            msg = protocol.authenticate(line, self.secret, self.wallclock(), self.skew_window)
        except ProtocolError as exc:
            log.warning("agent %s rejected line: %s", self.node, exc)
            return
        if msg.kind == "LAUNCH":
            self._on_launch(msg)
        elif msg.kind == "STOP":
            self._on_stop(int(msg["jobid"]))
        else:
            log.debug("agent %s ignoring %s", self.node, msg.kind)

    def _on_launch(self, msg: protocol.Message) -> None:
        job_id = int(msg["jobid"])
        argv = unpack(msg["argv"]).split("\0")
        workdir = unpack(msg["workdir"]) if msg.get("workdir") else None
        gpus = msg.get("gpus", "")
        try:
            handle = self.launcher(
                job_id, argv, unpack(msg["output"]), unpack(msg["error"]), workdir, gpus
            )
        except GridlingError as exc:
            log.warning("launch of job %d failed: %s", job_id, exc)
            self._emit("STATUS", [("jobid", job_id), ("exit", LAUNCH_FAILED_EXIT), ("node", self.node)])
            return
        with self._lock:
            if handle is not None and job_id not in self.stopped:
                self.jobs[job_id] = handle

    def _on_stop(self, job_id: int) -> None:
        with self._lock:
            handle = self.jobs.pop(job_id, None)
            if handle is not None:
                self.stopped.add(job_id)
        if handle is not None:
            handle.stop()
        self._emit("ACK", [("jobid", job_id), ("node", self.node), ("stopped", int(handle is not None))])

    # -- real subprocesses ------------------------------------------------------

    def _launch_subprocess(self, job_id, argv, output, error, workdir, gpus):
        env = dict(os.environ)
        env["CUDA_VISIBLE_DEVICES"] = gpus
        env["GRIDLING_JOB_ID"] = str(job_id)
        env["GRIDLING_NODE"] = self.node
        proc = start_process(argv, output, error, workdir, env)
        handle = _ProcessHandle(proc)
        threading.Thread(
            target=self._reap, args=(job_id, proc), name=f"job-{job_id}", daemon=True
        ).start()
        return handle

    def _reap(self, job_id: int, proc: subprocess.Popen) -> None:
        code = proc.wait()
        self.job_exited(job_id, code if code >= 0 else 128 - code)


class _ProcessHandle:
    def __init__(self, proc: subprocess.Popen):
        self.proc = proc

    def stop(self) -> None:
        threading.Thread(target=terminate, args=(self.proc,), daemon=True).start()
