"""Job files: parsing and rendering of ``#SBATCH``-style directive scripts.

A job file is a shebang line, any number of ``#SBATCH`` directive lines and
exactly one command line::

    #!/bin/bash
    #SBATCH -N 1      # nodes requested
    #SBATCH --job-name=test
    #SBATCH --time=2-00:00
    #SBATCH --gres=gpu:1
    srun /usr/bin/python train.py

Only the keys below are understood.  ``-N`` is the one short flag accepted.
"""

from __future__ import annotations

import math
import re
import shlex
from dataclasses import dataclass
from typing import Optional, Sequence

from gridling.errors import (
    BadValue,
    DuplicateDirective,
    JobFileError,
    MissingCommand,
    UnknownDirective,
)

DIRECTIVE_PREFIX = "#SBATCH"
DEFAULT_OUTPUT = "slurm-%j.out"

# directive key -> JobRequest attribute, in canonical render order
DIRECTIVE_KEYS = {
    "N": "nodes",
    "job-name": "job_name",
    "output": "output_path",
    "error": "error_path",
    "time": "time_limit_min",
    "mem": "mem_mb",
    "qos": "qos",
    "gres": "gpus",
}
KEY_ALIASES = {"nodes": "N"}

_DIGITS = "[0-9]"
_BARE_RE = re.compile(rf"{_DIGITS}+")
_HMS_RE = re.compile(rf"({_DIGITS}+):({_DIGITS}{{1,2}}):({_DIGITS}{{1,2}})")
_DHM_RE = re.compile(rf"({_DIGITS}+)-({_DIGITS}{{1,2}}):({_DIGITS}{{1,2}})")
_DHMS_RE = re.compile(
    rf"({_DIGITS}+)-({_DIGITS}{{1,2}}):({_DIGITS}{{1,2}}):({_DIGITS}{{1,2}})"
)
_GRES_RE = re.compile(rf"([A-Za-z_][A-Za-z0-9_]*):({_DIGITS}+)")
_MEM_RE = re.compile(rf"({_DIGITS}+)([MG]?)")


class MissingShebang(JobFileError):
    code = "MissingShebang"


class MultipleCommands(JobFileError):
    code = "MultipleCommands"


# characters str.splitlines() treats as line ends, plus NUL
_LINE_BREAKS = frozenset("\n\r\v\f\x1c\x1d\x1e\x85\u2028\u2029\0")


def _check_token(name: str, value: str, forbid: str = "") -> None:
    if not isinstance(value, str) or not value:
        raise BadValue(f"{name} must be a non-empty string")
    if any(c.isspace() for c in value):
        raise BadValue(f"{name} must not contain whitespace: {value!r}")
    for c in forbid:
        if c in value:
            raise BadValue(f"{name} must not contain {c!r}: {value!r}")


@dataclass(frozen=True)
class JobRequest:
    """A parsed job submission.

    String fields are single tokens (no whitespace) because the directive
    grammar has no quoting. ``command`` is stored as a tuple of argv tokens.
    """

    command: tuple = ()
    nodes: int = 1
    job_name: str = "job"
    output_path: str = DEFAULT_OUTPUT
    error_path: Optional[str] = None
    time_limit_min: int = 60
    mem_mb: int = 1024
    qos: str = "normal"
    gpus: int = 0

    def __post_init__(self):
        object.__setattr__(self, "command", tuple(self.command))
        if self.error_path is None:
            object.__setattr__(self, "error_path", self.output_path)
        for name, minimum in (("nodes", 1), ("time_limit_min", 1), ("mem_mb", 1), ("gpus", 0)):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
                raise BadValue(f"{name} must be an integer >= {minimum}, got {value!r}")
        _check_token("job_name", self.job_name, forbid="|")
        _check_token("qos", self.qos, forbid="|;=")
        _check_token("output_path", self.output_path)
        _check_token("error_path", self.error_path)
        if not self.command:
            raise MissingCommand("command has no tokens")
        for tok in self.command:
            if not isinstance(tok, str) or any(c in _LINE_BREAKS for c in tok):
                raise BadValue(f"illegal command token {tok!r}")

    def output_for(self, job_id: int) -> str:
        return self.output_path.replace("%j", str(job_id))

    def error_for(self, job_id: int) -> str:
        return self.error_path.replace("%j", str(job_id))


def parse_time_limit(s: str) -> int:
    """Convert a wall-time string to whole minutes.

    Accepted shapes: ``M``, ``HH:MM:SS``, ``D-HH:MM`` and ``D-HH:MM:SS``.
    Leftover seconds round up to a full minute.
    """
    if not isinstance(s, str):
        raise BadValue(f"time must be a string, got {s!r}")
    if m := _BARE_RE.fullmatch(s):
        minutes = int(s)
    elif m := _HMS_RE.fullmatch(s):
        h, mi, sec = map(int, m.groups())
        _check_clock(s, mi, sec)
        minutes = math.ceil((h * 3600 + mi * 60 + sec) / 60)
    elif m := _DHM_RE.fullmatch(s):
        d, h, mi = map(int, m.groups())
        _check_clock(s, mi, 0, hours=h)
        minutes = d * 1440 + h * 60 + mi
    elif m := _DHMS_RE.fullmatch(s):
        d, h, mi, sec = map(int, m.groups())
        _check_clock(s, mi, sec, hours=h)
        minutes = math.ceil((d * 86400 + h * 3600 + mi * 60 + sec) / 60)
    else:
        raise BadValue(f"unrecognised time limit {s!r}")
    if minutes < 1:
        raise BadValue(f"time limit must be at least one minute: {s!r}")
    return minutes


def _check_clock(s, minutes, seconds, hours=None):
    if minutes >= 60 or seconds >= 60 or (hours is not None and hours >= 24):
        raise BadValue(f"time field out of range in {s!r}")


def format_time_limit(minutes: int) -> str:
    days, rem = divmod(minutes, 1440)
    return f"{days}-{rem // 60:02d}:{rem % 60:02d}"


def parse_gres(s: str) -> int:
    m = _GRES_RE.fullmatch(s)
    if not m:
        raise BadValue(f"unrecognised gres {s!r}")
    if m.group(1) != "gpu":
        raise BadValue(f"unsupported generic resource {m.group(1)!r}; only gpu is modelled")
    return int(m.group(2))


def parse_mem(s: str) -> int:
    m = _MEM_RE.fullmatch(s)
    if not m:
        raise BadValue(f"unrecognised memory size {s!r}")
    mb = int(m.group(1)) * (1024 if m.group(2) == "G" else 1)
    if mb < 1:
        raise BadValue(f"memory must be positive: {s!r}")
    return mb


def _parse_int(key, s, minimum):
    if not re.fullmatch(rf"{_DIGITS}+", s):
        raise BadValue(f"--{key} expects an integer, got {s!r}")
    value = int(s)
    if value < minimum:
        raise BadValue(f"--{key} must be >= {minimum}")
    return value


_CONVERTERS = {
    "N": lambda v: _parse_int("nodes", v, 1),
    "job-name": str,
    "output": str,
    "error": str,
    "time": parse_time_limit,
    "mem": parse_mem,
    "qos": str,
    "gres": parse_gres,
}


def _split_directive(line: str, lineno: int):
    body = line[len(DIRECTIVE_PREFIX):].split()
    if not body:
        raise BadValue(f"line {lineno}: empty directive")
    head, rest = body[0], body[1:]
    if head == "-N":
        if not rest:
            raise BadValue(f"line {lineno}: -N needs a value")
        key, value, rest = "N", rest[0], rest[1:]
    elif head.startswith("--") and head[2:].partition("=")[0] != "N":
        key, sep, value = head[2:].partition("=")
        key = KEY_ALIASES.get(key, key)
        if key not in DIRECTIVE_KEYS:
            raise UnknownDirective(f"line {lineno}: unknown directive --{key}", key=key)
        if not sep:
            raise BadValue(f"line {lineno}: --{key} needs '=value'")
    else:
        name = head.split("=")[0]
        raise UnknownDirective(f"line {lineno}: unknown directive {name}", key=name)
    # anything after the value must be a shell comment
    if rest and not rest[0].startswith("#"):
        raise BadValue(f"line {lineno}: unexpected trailing text {' '.join(rest)!r}")
    return key, value


def parse_job_file(text: str) -> JobRequest:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("#!"):
        raise MissingShebang("job file must start with a '#!' line")
    values = {}
    command = None
    for lineno, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line:
            continue
        if line.startswith(DIRECTIVE_PREFIX) and (
            len(line) == len(DIRECTIVE_PREFIX) or line[len(DIRECTIVE_PREFIX)].isspace()
        ):
            key, raw_value = _split_directive(line, lineno)
            if key in values:
                raise DuplicateDirective(f"line {lineno}: directive {key!r} given twice", key=key)
            values[key] = _CONVERTERS[key](raw_value)
            continue
        if line.startswith("#"):
            continue
        if command is not None:
            raise MultipleCommands(f"line {lineno}: only one command line is supported")
        try:
            command = shlex.split(line)
        except ValueError as exc:
            raise BadValue(f"line {lineno}: {exc}") from None
    if not command:
        raise MissingCommand("job file has no command line")
    kwargs = {DIRECTIVE_KEYS[k]: v for k, v in values.items()}
    return JobRequest(command=tuple(command), **kwargs)


def render_job_file(r: JobRequest, shebang: str = "#!/bin/bash") -> str:
    out = [
        shebang,
        f"{DIRECTIVE_PREFIX} -N {r.nodes}",
        f"{DIRECTIVE_PREFIX} --job-name={r.job_name}",
        f"{DIRECTIVE_PREFIX} --output={r.output_path}",
        f"{DIRECTIVE_PREFIX} --error={r.error_path}",
        f"{DIRECTIVE_PREFIX} --time={format_time_limit(r.time_limit_min)}",
        f"{DIRECTIVE_PREFIX} --mem={r.mem_mb}",
        f"{DIRECTIVE_PREFIX} --qos={r.qos}",
        f"{DIRECTIVE_PREFIX} --gres=gpu:{r.gpus}",
        shlex.join(r.command),
    ]
    return "\n".join(out) + "\n"


def request_from_flags(
    command: Sequence[str],
    gpus: int = 0,
    mem: Optional[str] = None,
    time: Optional[str] = None,
    **extra,
) -> JobRequest:
    """Build a request the way an srun-style invocation would."""
    kwargs = dict(extra)
    kwargs["gpus"] = gpus
    if mem is not None:
        kwargs["mem_mb"] = parse_mem(str(mem))
    if time is not None:
        kwargs["time_limit_min"] = parse_time_limit(str(time))
    return JobRequest(command=tuple(command), **kwargs)
