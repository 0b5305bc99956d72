"""Flat ``key = value`` configuration files shared by controller, agents and clients.

Recognised keys::

    controller = 127.0.0.1:6817       # address the controller listens on / clients dial
    secret_file = /etc/gridling/secret
    admins = root,labadmin
    node = node0                      # agent only: which node this agent serves
    user = alice                      # client identity override
    accounting_log = /var/lib/gridling/acct.log
    heartbeat_interval = 10           # seconds
    skew_window = 300                 # seconds
    minute_seconds = 60               # real seconds per scheduler minute
    tick = 0.5                        # seconds between scheduler steps
    node.node0 = gpus=4,mem=128000,cpus=16
    qos.faculty = 2

Environment variables ``GRIDLING_CONTROLLER``, ``GRIDLING_SECRET_FILE`` and
``GRIDLING_USER`` override the matching keys.
"""

from __future__ import annotations

import getpass
import os
from typing import Dict, List, Optional, Tuple

ENV_OVERRIDES = {
    "GRIDLING_CONTROLLER": "controller",
    "GRIDLING_SECRET_FILE": "secret_file",
    "GRIDLING_USER": "user",
}
DEFAULTS = {
    "controller": "127.0.0.1:6817",
    "admins": "root",
    "heartbeat_interval": "10",
    "skew_window": "300",
    "minute_seconds": "60",
    "tick": "0.5",
}


def parse_config(text: str) -> Dict[str, str]:
    conf = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ValueError(f"config line {lineno}: expected key = value")
        conf[key.strip()] = value.strip()
    return conf


def load_config(path: Optional[str] = None, environ=None) -> Dict[str, str]:
    environ = os.environ if environ is None else environ
    conf = dict(DEFAULTS)
    path = path or environ.get("GRIDLING_CONFIG")
    if path:
        with open(path, encoding="utf-8") as fh:
            conf.update(parse_config(fh.read()))
        base = os.path.dirname(os.path.abspath(path))
        for key in ("secret_file", "accounting_log"):
            if key in conf and not os.path.isabs(conf[key]):
                conf[key] = os.path.join(base, conf[key])
    for env, key in ENV_OVERRIDES.items():
        if environ.get(env):
            conf[key] = environ[env]
    return conf


def node_specs(conf: Dict[str, str]) -> List[Tuple[str, int, int, int]]:
    """``(name, gpus, mem_mb, cpus)`` for every ``node.<name>`` key, in file order."""
    specs = []
    for key, value in conf.items():
        if not key.startswith("node."):
            continue
        attrs = dict(item.split("=", 1) for item in value.split(",") if "=" in item)
        specs.append(
            (key[5:], int(attrs.get("gpus", 0)), int(attrs["mem"]), int(attrs.get("cpus", 1)))
        )
    return specs


def qos_levels(conf: Dict[str, str]) -> List[Tuple[str, int]]:
    return [(k[4:], int(v)) for k, v in conf.items() if k.startswith("qos.")]


def admins(conf: Dict[str, str]) -> List[str]:
    return [a.strip() for a in conf.get("admins", "").split(",") if a.strip()]


def current_user(conf: Dict[str, str]) -> str:
    return conf.get("user") or getpass.getuser()
