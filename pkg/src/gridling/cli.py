"""``gridling`` command line: client commands, admin commands and daemons.

Exit status: 0 success, 1 user error (bad job file, limit violation, unknown
field, permission), 2 system error (controller unreachable, bad secret).
Job commands accept SLURM-style aliases: sbatch, srun, sacct, sinfo, scancel.
"""

from __future__ import annotations

import argparse
import datetime as dt
import io
import logging
import os
import shutil
import sys
import tempfile
import time
from contextlib import redirect_stderr, redirect_stdout
from dataclasses import dataclass
from typing import List, Optional, Sequence

from gridling import accounting, config as cfg, planner
from gridling.control import protocol
from gridling.control.protocol import pack, unpack
from gridling.errors import GridlingError, ProtocolError
from gridling.jobspec import JobRequest, parse_job_file, parse_mem, parse_time_limit, render_job_file

USER_ERROR = 1
SYSTEM_ERROR = 2
TERMINAL_STATES = ("COMPLETED", "FAILED", "CANCELLED", "TIMEOUT")


class CommandFailed(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status


@dataclass
class CliResult:
    exit_status: int
    stdout: str
    stderr: str


# -- client plumbing ---------------------------------------------------------------

class Client:
    def __init__(self, conf):
        from gridling.control import transport

        self._transport = transport
        self.address = conf["controller"]
        self.user = cfg.current_user(conf)
        self.skew_window = float(conf.get("skew_window", protocol.DEFAULT_SKEW_WINDOW))
        path = conf.get("secret_file")
        if not path:
            raise CommandFailed(SYSTEM_ERROR, "no secret_file configured")
        try:
            self.secret = protocol.load_secret(path)
        except (OSError, ValueError) as exc:
            raise CommandFailed(SYSTEM_ERROR, f"cannot load secret: {exc}") from None

    def call(self, op: str, **fields) -> protocol.Message:
        pairs = [("op", op), ("user", self.user)] + [(k, v) for k, v in fields.items() if v is not None]
        try:
            reply = self._transport.request(self.address, self.secret, pairs, skew_window=self.skew_window)
        except self._transport.ControllerUnreachable as exc:
            raise CommandFailed(SYSTEM_ERROR, str(exc)) from None
        except ProtocolError as exc:
            raise CommandFailed(SYSTEM_ERROR, f"controller reply rejected: {exc}") from None
        if reply.kind == "ERROR":
            code = reply.get("code", "Error")
            msg = unpack(reply.get("msg", "")) or code
            status = SYSTEM_ERROR if code in ("BadTag", "ClockSkew", "Malformed") else USER_ERROR
            raise CommandFailed(status, msg if msg.startswith(code) else f"{code}: {msg}")
        return reply


# -- client commands --------------------------------------------------------------

def cmd_submit(args, conf):
    try:
        with open(args.file, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise CommandFailed(USER_ERROR, f"cannot read {args.file}: {exc}") from None
    parse_job_file(text)  # report file errors locally, before contacting the controller
    reply = Client(conf).call("submit", job=pack(text), workdir=pack(os.getcwd()))
    print(f"Submitted batch job {reply['jobid']}")


def _drain(path: str, offset: int, stream) -> int:
    try:
        with open(path, "rb") as fh:
            fh.seek(offset)
            chunk = fh.read()
    except OSError:
        return offset
    if chunk:
        stream.write(chunk.decode("utf-8", errors="replace"))
        stream.flush()
    return offset + len(chunk)


def cmd_run(args, conf):
    command = list(args.command)
    if command and command[0] == "--":
        command = command[1:]
    if not command:
        raise CommandFailed(USER_ERROR, "run needs a command")
    client = Client(conf)
    tmp = tempfile.mkdtemp(prefix="gridling-run-")
    try:
        kwargs = dict(
            command=tuple(command),
            gpus=args.gpus,
            job_name=args.job_name or os.path.basename(command[0]) or "job",
            output_path=os.path.join(tmp, "run-%j.out"),
            error_path=os.path.join(tmp, "run-%j.err"),
            qos=args.qos,
        )
        if args.mem is not None:
            kwargs["mem_mb"] = parse_mem(args.mem)
        if args.time is not None:
            kwargs["time_limit_min"] = parse_time_limit(args.time)
        text = render_job_file(JobRequest(**kwargs))
        job_id = client.call("submit", job=pack(text), workdir=pack(os.getcwd()))["jobid"]
        out_off = err_off = 0
        while True:
            status = client.call("status", jobid=job_id)
            out_path, err_path = unpack(status["output"]), unpack(status["error"])
            out_off = _drain(out_path, out_off, sys.stdout)
            err_off = _drain(err_path, err_off, sys.stderr)
            if status["state"] in TERMINAL_STATES:
                break
            time.sleep(args.poll)
        state, exit_code = status["state"], status.get("exit", "")
        if state in ("COMPLETED", "FAILED") and exit_code != "":
            return int(exit_code)
        print(f"job {job_id} ended {state}", file=sys.stderr)
        return USER_ERROR
    finally:
        shutil.rmtree(tmp, ignore_errors=True)


def cmd_acct(args, conf):
    fields = accounting.parse_format(args.format)
    unknown = [f for f in fields if f not in accounting.QUERY_FIELDS]
    if unknown or not fields:
        raise CommandFailed(USER_ERROR, f"UnknownField: {','.join(unknown) or '(empty)'}")
    reply = Client(conf).call("acct", format=",".join(fields), filter_user=args.user, state=args.state)
    sys.stdout.write(unpack(reply["data"]))


def cmd_info(args, conf):
    sys.stdout.write(unpack(Client(conf).call("info")["data"]))


def cmd_cancel(args, conf):
    reply = Client(conf).call("cancel", jobid=args.jobid)
    print(f"job {reply['jobid']} {reply['state']}")


def cmd_user(args, conf):
    client = Client(conf)
    if args.user_cmd == "ingest":
        try:
            with open(args.csv, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise CommandFailed(USER_ERROR, f"cannot read {args.csv}: {exc}") from None
        reply = client.call("user_ingest", csv=pack(text))
        report = unpack(reply["data"])
        head, _, rest = report.partition("\n")
        print(head)
        if rest:
            sys.stderr.write(rest)
        return USER_ERROR if int(reply["errors"]) else 0
    if args.user_cmd == "list":
        sys.stdout.write(unpack(client.call("user_list")["data"]))
    elif args.user_cmd == "reconcile":
        reply = client.call("user_reconcile", date=args.date)
        sys.stdout.write(unpack(reply["data"]))
    elif args.user_cmd == "qos":
        reply = client.call("qos_define", name=args.name, weight=args.weight)
        print(f"qos {reply['name']} weight {reply['weight']}")
    return 0


# -- daemons and local tools ------------------------------------------------------

def build_controller(conf):
    from gridling import cluster
    from gridling.accounting import AccountingLog
    from gridling.accounts import AccountStore
    from gridling.control.controller import Controller
    from gridling.scheduler import Scheduler

    specs = cfg.node_specs(conf)
    if not specs:
        raise CommandFailed(USER_ERROR, "configuration defines no node.<name> entries")
    fleet = [cluster.Node(name, gpus, mem, cpus) for name, gpus, mem, cpus in specs]
    minute = float(conf.get("minute_seconds", 60))
    sched = Scheduler(
        fleet,
        AccountStore(cfg.qos_levels(conf)),
        AccountingLog(conf.get("accounting_log")),
        admins=cfg.admins(conf),
    )
    return Controller(
        sched,
        protocol.load_secret(conf["secret_file"]),
        clock=lambda: time.time() / minute,
        heartbeat_interval=float(conf.get("heartbeat_interval", 10)),
        skew_window=float(conf.get("skew_window", protocol.DEFAULT_SKEW_WINDOW)),
    )


def cmd_controller(args, conf):
    from gridling.control.transport import ControllerServer

    server = ControllerServer(build_controller(conf), args.address or conf["controller"], float(conf["tick"]))
    print(f"controller listening on {server.address}", flush=True)
    server.serve_forever()


def cmd_agent(args, conf):
    from gridling.control.agent import Agent
    from gridling.control.transport import AgentClient

    node = args.node or conf.get("node")
    if not node:
        raise CommandFailed(USER_ERROR, "agent needs a node name (--node or node= in config)")
    agent = Agent(node, protocol.load_secret(conf["secret_file"]), send=lambda line: None,
                  skew_window=float(conf.get("skew_window", protocol.DEFAULT_SKEW_WINDOW)))
    client = AgentClient(agent, conf["controller"], float(conf.get("heartbeat_interval", 10)))
    print(f"agent {node} connecting to {conf['controller']}", flush=True)
    try:
        client.run()
    except KeyboardInterrupt:
        client.stop()


def cmd_keygen(args, conf):
    protocol.write_secret(args.path)
    print(f"wrote {protocol.SECRET_BYTES}-byte secret to {args.path}")


def cmd_sim(args, conf):
    from gridling import sim

    trace = sim.run_sim(sim.load_scenario(args.scenario))
    if args.log:
        with open(args.log, "w", encoding="utf-8") as fh:
            fh.write(trace.log_text())
    print("# transitions")
    sys.stdout.write(trace.transitions_text())
    print("# accounting")
    sys.stdout.write(trace.table(accounting.parse_format(args.format)))
    for t, action, code in trace.rejections:
        print(f"t={t} {action} rejected: {code}", file=sys.stderr)


def cmd_local(args, conf):
    from gridling import sim

    result = sim.run_local(args.file, minute_seconds=args.minute_seconds, log_path=args.log)
    print(f"job {result.job_id} {result.state} exit={'' if result.exit_code is None else result.exit_code}")
    return result.exit_code if result.exit_code is not None else USER_ERROR


def cmd_plan(args, conf):
    builds = [planner.bundled(name) for name in args.bundled] + [planner.load_build(p) for p in args.files]
    if not builds:
        builds = [planner.bundled("commodity"), planner.bundled("server")]
    for b in builds:
        sys.stdout.write(planner.report(b))
    if len(builds) == 2:
        for basis in ("computed", "stated"):
            print(f"{basis} totals: {planner.compare(builds[0], builds[1], basis)}")


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gridling", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="flat key=value config file (default: $GRIDLING_CONFIG)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("submit", aliases=["sbatch"], help="queue a job file")
    s.add_argument("file")
    s.set_defaults(func=cmd_submit)

    s = sub.add_parser("run", aliases=["srun"], help="run a command through the queue and wait")
    s.add_argument("--gpus", type=int, default=0)
    s.add_argument("--mem")
    s.add_argument("--time")
    s.add_argument("--qos", default="normal")
    s.add_argument("--job-name")
    s.add_argument("--poll", type=float, default=0.2, help=argparse.SUPPRESS)
    s.add_argument("command", nargs=argparse.REMAINDER)
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("acct", aliases=["sacct"], help="accounting records")
    s.add_argument("--format", default=",".join(accounting.DEFAULT_FORMAT))
    s.add_argument("--user")
    s.add_argument("--state")
    s.set_defaults(func=cmd_acct)

    s = sub.add_parser("info", aliases=["sinfo"], help="node states")
    s.set_defaults(func=cmd_info)

    s = sub.add_parser("cancel", aliases=["scancel"], help="cancel a job")
    s.add_argument("jobid", type=int)
    s.set_defaults(func=cmd_cancel)

    s = sub.add_parser("user", help="account administration")
    us = s.add_subparsers(dest="user_cmd", required=True)
    u = us.add_parser("ingest", help="create accounts from a roster CSV")
    u.add_argument("csv")
    us.add_parser("list")
    u = us.add_parser("reconcile", help="remove expired accounts and cancel their jobs")
    u.add_argument("--date", help="YYYY-MM-DD (default: today on the controller)")
    u = us.add_parser("qos")
    qs = u.add_subparsers(dest="qos_cmd", required=True)
    q = qs.add_parser("define")
    q.add_argument("name")
    q.add_argument("weight", type=int)
    s.set_defaults(func=cmd_user)

    s = sub.add_parser("controller", help="run the controller daemon")
    s.add_argument("--address")
    s.set_defaults(func=cmd_controller)

    s = sub.add_parser("agent", help="run a node agent")
    s.add_argument("--node")
    s.set_defaults(func=cmd_agent)

    s = sub.add_parser("keygen", help="write a new shared secret")
    s.add_argument("path")
    s.set_defaults(func=cmd_keygen)

    s = sub.add_parser("sim", help="run a simulation scenario file")
    s.add_argument("scenario")
    s.add_argument("--log", help="write the accounting log here")
    s.add_argument("--format", default=",".join(accounting.DEFAULT_FORMAT) + ",submit,start,end")
    s.set_defaults(func=cmd_sim)

    s = sub.add_parser("local", help="run a job file directly on this machine")
    s.add_argument("file")
    s.add_argument("--log")
    s.add_argument("--minute-seconds", type=float, default=60.0, help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_local)

    s = sub.add_parser("plan", help="check and price hardware builds")
    s.add_argument("files", nargs="*")
    s.add_argument("--bundled", action="append", default=[], choices=["commodity", "server"])
    s.set_defaults(func=cmd_plan)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; here 2 means a system failure
        return 0 if exc.code in (0, None) else USER_ERROR
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    try:
        conf = cfg.load_config(args.config)
        status = args.func(args, conf)
    except CommandFailed as exc:
        print(f"gridling: {exc}", file=sys.stderr)
        return exc.status
    except GridlingError as exc:
        print(f"gridling: {exc}", file=sys.stderr)
        return USER_ERROR
    except (OSError, ValueError) as exc:
        print(f"gridling: {exc}", file=sys.stderr)
        return SYSTEM_ERROR
    return status or 0


def invoke(argv: Sequence[str]) -> CliResult:
    """Run the CLI in-process, capturing its output."""
    out, err = io.StringIO(), io.StringIO()
    with redirect_stdout(out), redirect_stderr(err):
        status = main(list(argv))
    return CliResult(status, out.getvalue(), err.getvalue())


if __name__ == "__main__":
    sys.exit(main())
