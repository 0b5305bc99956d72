import datetime as dt
import random
import sys

import pytest

from conftest import job_text, roster
from gridling import sim
from gridling.accounting import replay
from gridling.errors import LaunchFailure, MalformedScenario
from gridling.scheduler import TRANSITIONS, JobState
from oracles import check_cycles
from scenarios import MAX_RUNNING, scenario, small_scenarios


def starts_and_ends(trace):
    out = {}
    for t, job_id, state in trace.transitions:
        out.setdefault(job_id, {})[state] = t
    return out


def test_short_job_completes_at_start_plus_duration():
    trace = sim.run_sim(scenario(events=[sim.submit(0, "fac", job_text(gpus=1, time=10, qos="faculty"), 5)]))
    times = starts_and_ends(trace)[1]
    assert times["RUNNING"] == 0 and times["COMPLETED"] == 5
    assert trace.records[1].exitcode == 0


def test_long_job_times_out_at_limit():
    trace = sim.run_sim(scenario(events=[sim.submit(2, "fac", job_text(gpus=1, time=10, qos="faculty"), 20)]))
    times = starts_and_ends(trace)[1]
    assert times == {"PENDING": 2, "RUNNING": 2, "TIMEOUT": 12}
    assert trace.records[1].exitcode is None


def test_second_job_starts_when_first_ends():
    events = [sim.submit(0, "fac", job_text(gpus=1, qos="faculty"), 7), sim.submit(1, "fac", job_text(gpus=1, qos="faculty"), 3)]
    times = starts_and_ends(sim.run_sim(scenario(events=events)))
    assert times[1]["COMPLETED"] == 7 and times[2]["RUNNING"] == 7 and times[2]["COMPLETED"] == 10


def test_faculty_overtakes_student():
    events = [
        sim.submit(0, "stu", job_text(gpus=1, qos="student"), 5),
        sim.submit(0, "stu", job_text(gpus=1, qos="student"), 5),
        sim.submit(1, "fac", job_text(gpus=1, qos="faculty"), 5),
    ]
    times = starts_and_ends(sim.run_sim(scenario(events=events)))
    # job 2 waits on the student's running limit, then on the faculty job
    assert times[1]["RUNNING"] == 0 and times[3]["RUNNING"] == 5 and times[2]["RUNNING"] == 10


def test_failure_injection_and_cancel():
    events = [
        sim.submit(0, "fac", job_text(gpus=1, qos="faculty"), 5, exit_code=3),
        sim.submit(0, "fac", job_text(gpus=1, qos="faculty"), 50),
        sim.cancel(8, 2, requester="stu"),
        sim.cancel(9, 2, requester="fac"),
    ]
    trace = sim.run_sim(scenario(events=events))
    assert (trace.records[1].state, trace.records[1].exitcode) == ("FAILED", 3)
    assert trace.records[2].state == "CANCELLED" and trace.records[2].end_time == 9
    assert trace.rejections == [(8, "cancel", "PermissionDenied")]


def test_silenced_node_goes_down_and_fails_job():
    events = [sim.submit(0, "fac", job_text(gpus=1, time=60, qos="faculty"), 100), sim.silence(1, "node0")]
    trace = sim.run_sim(scenario(gpus=(1, 1), events=events))
    assert trace.records[1].state == "FAILED" and trace.records[1].exitcode is None
    assert (30, "node0", "DOWN") in trace.node_events
    assert trace.final_nodes[0][1].value == "DOWN" and trace.final_nodes[1][1].value == "IDLE"


def test_reconcile_cancels_expired_users_jobs():
    text = roster("old,student,2026-05-31,10,1,2880,10", "fac,faculty,2099-01-01,10,2,2880,10")
    events = [
        sim.submit(0, "old", job_text(gpus=1, qos="student"), 50),
        sim.submit(0, "old", job_text(gpus=1, qos="student"), 50),
        sim.reconcile(5, dt.date(2026, 6, 1)),
        sim.reconcile(6, dt.date(2026, 6, 1)),
        sim.submit(7, "old", job_text(), 1),
    ]
    trace = sim.run_sim(scenario(gpus=(2,), events=events, roster_text=text))
    assert [trace.records[j].state for j in (1, 2)] == ["CANCELLED", "CANCELLED"]
    assert trace.reconciles == [(5, ["old"], [1, 2]), (6, [], [])]
    assert trace.rejections == [(7, "submit", "InactiveUser")]


def test_determinism():
    rng = random.Random(5)
    for _ in range(20):
        events = sorted(
            (sim.submit(rng.randint(0, 20), rng.choice(["stu", "fac"]), job_text(gpus=rng.randint(0, 3), time=rng.randint(1, 15),
                        qos=rng.choice(["student", "faculty", "normal"])), rng.randint(0, 20), rng.choice([0, 0, 1]))
             for _ in range(rng.randint(1, 10))),
            key=lambda e: e.time,
        )
        sc = scenario(gpus=(2, 1), events=events)
        a, b = sim.run_sim(sc), sim.run_sim(sc)
        assert a.transitions == b.transitions and a.log_lines == b.log_lines and a.cycles == b.cycles


def random_trace(rng):
    events = []
    for _ in range(rng.randint(1, 12)):
        limit = rng.randint(1, 20)
        # the limit rides along in the job name so tests can read it back
        events.append(sim.submit(rng.randint(0, 30), rng.choice(["stu", "fac"]),
                                 job_text(gpus=rng.randint(0, 2), time=limit, name=f"L{limit}",
                                          qos=rng.choice(["student", "faculty"])),
                                 rng.randint(0, 25), rng.choice([0, 0, 0, 2])))
    if rng.random() < 0.3:
        events.append(sim.cancel(rng.randint(0, 30), rng.randint(1, 5)))
    if rng.random() < 0.2:
        events.append(sim.silence(rng.randint(0, 30), "node1"))
    events.sort(key=lambda e: e.time)
    return sim.run_sim(scenario(gpus=(1, 2), events=events))


def test_trace_invariants_on_random_scenarios():
    rng = random.Random(11)
    for _ in range(150):
        trace = random_trace(rng)
        assert replay(trace.log_lines) == trace.records
        times = [t for t, _, _ in trace.transitions]
        assert times == sorted(times)
        seen = {}
        for _, job_id, state in trace.transitions:
            prev = seen.get(job_id)
            assert (prev is None and state == "PENDING") or JobState(state) in TRANSITIONS[JobState(prev)]
            seen[job_id] = state
        assert seen == trace.job_states()


def test_run_time_never_exceeds_limit():
    rng = random.Random(12)
    checked = 0
    for _ in range(150):
        trace = random_trace(rng)
        for rec in trace.records.values():
            if rec.start_time is None or rec.end_time is None:
                continue
            limit = int(rec.jobname[1:])
            ran = rec.end_time - rec.start_time
            assert ran <= limit
            if rec.state == "TIMEOUT":
                assert ran == limit
            checked += 1
    assert checked > 100


def test_cycles_agree_with_oracle_sample():
    rng = random.Random(13)
    population = list(small_scenarios())
    for sc, facts in rng.sample(population, 300):
        trace = sim.run_sim(sc)
        report = check_cycles(trace, facts, MAX_RUNNING, sc.nodes)
        assert report.failures == [] and report.cycles > 0


# -- scenario files ---------------------------------------------------------------

SCENARIO_TEXT = """\
# two nodes, one expired student
qos student 1
qos faculty 2
node node0 gpus=1 mem=64000 cpus=8
node node1 gpus=2 mem=64000
admins root,ops
roster
username,qos,expires_on,max_submit,max_running,max_wall_min,quota_gb
stu,student,2026-05-31,4,1,2880,10
fac,faculty,2099-01-01,4,2,2880,10
end
at 0 submit stu duration=5
#!/bin/bash
#SBATCH --gres=gpu:1
#SBATCH --time=10
python train.py
end
at 1 submit fac duration=30 exit=2 file=fac.job
at 3 cancel 1 by=stu
at 4 reconcile 2026-06-01
at 40 silence node1
at 45 tick
"""


def test_parse_and_run_scenario_file(tmp_path):
    (tmp_path / "fac.job").write_text(job_text(gpus=2, time=60, qos="faculty"))
    path = tmp_path / "s.scn"
    path.write_text(SCENARIO_TEXT)
    sc = sim.load_scenario(str(path))
    assert [n.name for n in sc.nodes] == ["node0", "node1"] and sc.nodes[0].cpus == 8
    assert sc.admins == ("root", "ops") and [e.action for e in sc.events] == ["submit", "submit", "cancel", "reconcile", "silence", "tick"]
    trace = sim.run_sim(sc)
    assert trace.records[1].state == "CANCELLED" and trace.records[1].end_time == 3
    assert (trace.records[2].state, trace.records[2].exitcode, trace.records[2].end_time) == ("FAILED", 2, 31)
    # node1 last heartbeat at 40, so it is declared DOWN three intervals later
    assert trace.end_time == 70 and (70, "node1", "DOWN") in trace.node_events
    assert trace.transitions_text().splitlines()[0] == "0 1 PENDING"
    assert trace.table().splitlines()[0].split() == ["JobID", "JobName", "State", "ExitCode", "User", "Account"]


@pytest.mark.parametrize("text", [
    "node n0 gpus=1\n",
    "node n0 gpus=x mem=1\n",
    "qos student\n",
    "at 0 submit alice\n#!/bin/bash\nrun\n",
    "at 0 reconcile yesterday\n",
    "at 0 launch n0\n",
    "node n0 mem=1\nat 0 silence n9\n",
    "node n0 mem=1\nat 5 tick\nat 1 tick\n",
    "at -1 tick\n",
    "roster\nusername,qos\nend\n",
    "frobnicate\n",
])
def test_malformed_scenarios(text):
    with pytest.raises(MalformedScenario):
        sc = sim.parse_scenario(text)
        sim.run_sim(sc)


def test_negative_duration_rejected():
    with pytest.raises(MalformedScenario):
        sim.run_sim(scenario(events=[sim.submit(0, "fac", job_text(), -1)]))


# -- local execution ----------------------------------------------------------------

def write_job(tmp_path, command, time=1):
    path = tmp_path / "job.job"
    path.write_text(job_text(time=time, command=command, name="local"))
    return str(path)


def test_local_ok(tmp_path):
    log = tmp_path / "acct.log"
    result = sim.run_local(write_job(tmp_path, "echo ok"), log_path=str(log), user="alice", workdir=str(tmp_path))
    assert (result.job_id, result.state, result.exit_code) == (1, "COMPLETED", 0)
    assert (tmp_path / "slurm-1.out").read_text() == "ok\n"
    assert replay(log.read_text().splitlines())[1] == result.record
    again = sim.run_local(write_job(tmp_path, "echo again"), log_path=str(log), workdir=str(tmp_path))
    assert again.job_id == 2


def test_local_exit_code(tmp_path):
    result = sim.run_local(write_job(tmp_path, f"{sys.executable} -c 'import sys; sys.exit(3)'"), workdir=str(tmp_path))
    assert (result.state, result.exit_code, result.record.exitcode) == ("FAILED", 3, 3)


def test_local_timeout(tmp_path):
    import time

    t0 = time.monotonic()
    result = sim.run_local(write_job(tmp_path, "sleep 30", time=1), minute_seconds=0.5, workdir=str(tmp_path))
    elapsed = time.monotonic() - t0
    assert result.state == "TIMEOUT" and result.exit_code is None
    assert 0.5 <= elapsed < 0.5 + 2.5  # one limit minute plus the stop grace


def test_local_missing_program(tmp_path):
    log = tmp_path / "acct.log"
    with pytest.raises(LaunchFailure):
        sim.run_local(write_job(tmp_path, "/nonexistent/prog"), log_path=str(log), workdir=str(tmp_path))
    assert replay(log.read_text().splitlines())[1].exitcode == 213


def test_demo_scenario():
    import pathlib

    path = pathlib.Path(__file__).parent.parent / "demos" / "lab.scn"
    trace = sim.run_sim(sim.load_scenario(str(path)))
    assert trace.job_states() == {1: "COMPLETED", 2: "COMPLETED", 3: "CANCELLED", 4: "TIMEOUT"}
    # prof's later faculty job starts before ana's earlier one
    assert trace.records[4].start_time < trace.records[3].start_time
    assert replay(trace.log_lines) == trace.records


def test_inline_comments_in_scenarios():
    sc = sim.parse_scenario("node n0 mem=100  # a tiny node\nat 4 silence n0   # goes quiet\n")
    assert sc.nodes[0].mem_mb == 100 and sc.events[0].node == "n0"
