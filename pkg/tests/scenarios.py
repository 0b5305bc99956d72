"""Scenario builders shared by the sim tests and the acceptance suite."""

import itertools

from conftest import QOS, job_text, roster
from gridling import sim
from oracles import JobFacts

FLEETS = [(1,), (2,), (3,), (4,), (1, 1), (1, 2), (2, 1), (1, 3), (3, 1), (2, 2)]
KINDS = [(g, q) for g in (1, 2, 3) for q in ("student", "faculty")]
USER_OF = {"student": "stu", "faculty": "fac"}
MAX_RUNNING = {"stu": 1, "fac": 2}
DURATIONS = (3, 4, 5, 2)
ROSTER = roster("stu,student,2099-01-01,10,1,2880,10", "fac,faculty,2099-01-01,10,2,2880,10")


def scenario(gpus=(1,), events=(), roster_text=ROSTER, mem=64000):
    nodes = [sim.NodeSpec(f"node{i}", g, mem) for i, g in enumerate(gpus)]
    return sim.Scenario(nodes, list(QOS), roster_text, list(events))


def small_scenarios():
    """Every fleet of at most 2 nodes and 4 GPUs with 1 to 4 jobs.

    Job i is submitted at minute i // 2 and runs DURATIONS[i] minutes; each
    job picks a GPU count in 1..3 and a student or faculty account.
    """
    for fleet in FLEETS:
        for n in range(1, 5):
            for kinds in itertools.product(KINDS, repeat=n):
                events, facts = [], {}
                for i, (g, qos) in enumerate(kinds):
                    user = USER_OF[qos]
                    events.append(sim.submit(i // 2, user, job_text(gpus=g, qos=qos, time=60), DURATIONS[i]))
                    facts[i + 1] = JobFacts(user, dict(QOS)[qos], i // 2, g, 1024)
                yield scenario(fleet, events), facts
