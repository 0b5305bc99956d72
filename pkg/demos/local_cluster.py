"""Bring up a controller and one agent on localhost, then drive them with the CLI.

Everything runs in this process (controller and agent on threads), talking
over real TCP with signed messages.  Jobs are real subprocesses.

    python demos/local_cluster.py
"""

import pathlib
import sys
import tempfile
import time

from gridling import cluster
from gridling.accounting import AccountingLog
from gridling.accounts import ROSTER_HEADER, AccountStore
from gridling.cli import invoke
from gridling.control import protocol
from gridling.control.agent import Agent
from gridling.control.controller import Controller
from gridling.control.transport import AgentClient, ControllerServer
from gridling.scheduler import Scheduler

JOB = f"""#!/bin/bash
#SBATCH --job-name=hello
#SBATCH --gres=gpu:1
#SBATCH --time=5
#SBATCH --qos=student
{sys.executable} -c "import os; print('hello from GPU', os.environ['CUDA_VISIBLE_DEVICES'])"
"""


def show(title, argv):
    res = invoke(argv)
    print(f"$ gridling {' '.join(argv[2:])}    # {title} (exit {res.exit_status})")
    print(res.stdout + res.stderr, end="")
    return res


def main():
    root = pathlib.Path(tempfile.mkdtemp(prefix="gridling-demo-"))
    secret = protocol.write_secret(str(root / "secret"))
    accounts = AccountStore([("student", 1), ("faculty", 2)])
    accounts.ingest_csv(f"{ROSTER_HEADER}\nana,student,2099-12-31,4,1,2880,200\n")
    sched = Scheduler([cluster.Node("ws0", 2, 64000, 8)], accounts, AccountingLog(str(root / "acct.log")), admins=("root",))
    server = ControllerServer(Controller(sched, secret, heartbeat_interval=1.0), "127.0.0.1:0", tick=0.1).start()
    agent = AgentClient(Agent("ws0", secret, send=lambda line: None), server.address, 1.0).start()
    conf = root / "gridling.conf"
    conf.write_text(f"controller = {server.address}\nsecret_file = secret\nuser = ana\n")
    (root / "hello.job").write_text(JOB)
    argv = ["--config", str(conf)]
    try:
        while sched.fleet[0].down:
            time.sleep(0.05)
        show("node table", argv + ["sinfo"])
        show("queue a job file", argv + ["sbatch", str(root / "hello.job")])
        while not sched.job(1).state.terminal:
            time.sleep(0.05)
        # batch output lands in the submitting directory
        print(f"slurm-1.out: {(pathlib.Path.cwd() / 'slurm-1.out').read_text()}", end="")
        (pathlib.Path.cwd() / "slurm-1.out").unlink()
        show("interactive run", argv + ["srun", "--gpus", "2", "--", sys.executable, "-c", "print('two GPUs')"])
        show("accounting", argv + ["sacct", "--format=jobid,jobname,state,exitcode,user,account"])
        show("admin only", argv + ["user", "list"])
    finally:
        agent.stop()
        server.stop()


if __name__ == "__main__":
    main()
