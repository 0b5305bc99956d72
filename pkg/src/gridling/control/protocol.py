"""Authenticated line protocol between the controller, node agents and clients.

Wire format, one message per line::

    <kind>|<k=v>;<k=v>...|<timestamp>|<auth_tag>

``auth_tag`` is the hex HMAC-SHA256 of everything before the final ``|``,
keyed with a 32-byte secret shared by every host in the cluster.  Receivers
reject lines whose tag does not verify and lines whose timestamp is further
than ``skew_window`` seconds from their own clock.
"""

from __future__ import annotations

import base64
import hashlib
import hmac
import math
import os
import re
import secrets
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence, Tuple, Union

from gridling.errors import BadTag, ClockSkew, IllegalCharacter, Malformed

KINDS = ("LAUNCH", "STOP", "STATUS", "HEARTBEAT", "ACK", "ERROR", "REQUEST")
SECRET_BYTES = 32
DEFAULT_SKEW_WINDOW = 300.0
LAUNCH_FAILED_EXIT = 213

_TAG_RE = re.compile(r"[0-9a-f]{64}")
_INT_RE = re.compile(r"-?[0-9]+")
_FLOAT_RE = re.compile(r"-?[0-9]+(\.[0-9]+)?(e[+-]?[0-9]+)?")

Fields = Union[Mapping[str, str], Sequence[Tuple[str, str]]]


@dataclass(frozen=True)
class Message:
    kind: str
    fields: Tuple[Tuple[str, str], ...]
    timestamp: Union[int, float]
    auth_tag: str = ""

    def get(self, key: str, default: Optional[str] = None) -> Optional[str]:
        for k, v in self.fields:
            if k == key:
                return v
        return default

    def __getitem__(self, key: str) -> str:
        v = self.get(key)
        if v is None:
            raise Malformed(f"{self.kind} message lacks field {key!r}")
        return v

    def as_dict(self) -> dict:
        return dict(self.fields)


def _normalise_fields(fields: Fields) -> Tuple[Tuple[str, str], ...]:
    items = tuple(fields.items()) if isinstance(fields, Mapping) else tuple(fields)
    seen = set()
    out = []
    for k, v in items:
        k, v = str(k), str(v)
        if not k or any(c in k for c in "|;=\n\r"):
            raise IllegalCharacter(f"illegal field key {k!r}")
        if any(c in v for c in "|;\n\r"):
            raise IllegalCharacter(f"illegal character in value of {k!r}")
        if k in seen:
            raise IllegalCharacter(f"duplicate field key {k!r}")
        seen.add(k)
        out.append((k, v))
    return tuple(out)


def _format_timestamp(t) -> str:
    if isinstance(t, bool) or not isinstance(t, (int, float)):
        raise IllegalCharacter(f"timestamp must be a number, got {t!r}")
    if isinstance(t, float):
        if not math.isfinite(t):
            raise IllegalCharacter("timestamp must be finite")
        return repr(t)
    return str(t)


def _parse_timestamp(s: str):
    if _INT_RE.fullmatch(s):
        return int(s)
    if _FLOAT_RE.fullmatch(s):
        return float(s)
    raise Malformed(f"bad timestamp {s!r}")


def sign(body: str, secret: bytes) -> str:
    return hmac.new(secret, body.encode("utf-8"), hashlib.sha256).hexdigest()


def encode(kind: str, fields: Fields, timestamp, secret: bytes) -> str:
    if kind not in KINDS:
        raise IllegalCharacter(f"unknown message kind {kind!r}")
    pairs = _normalise_fields(fields)
    body = "|".join(
        (kind, ";".join(f"{k}={v}" for k, v in pairs), _format_timestamp(timestamp))
    )
    return f"{body}|{sign(body, secret)}"


def decode(line: str) -> Message:
    """Parse a wire line (without its framing newline) but not its tag or timestamp."""
    if "\n" in line or "\r" in line:
        raise Malformed("embedded line break")
    parts = line.split("|")
    if len(parts) != 4:
        raise Malformed(f"expected 4 '|'-separated parts, got {len(parts)}")
    kind, raw_fields, raw_ts, tag = parts
    if kind not in KINDS:
        raise Malformed(f"unknown kind {kind!r}")
    if not _TAG_RE.fullmatch(tag):
        raise Malformed("auth tag is not 64 lowercase hex digits")
    pairs = []
    if raw_fields:
        for item in raw_fields.split(";"):
            k, sep, v = item.partition("=")
            if not sep or not k:
                raise Malformed(f"bad field {item!r}")
            pairs.append((k, v))
    if len({k for k, _ in pairs}) != len(pairs):
        raise Malformed("duplicate field key")
    return Message(kind, tuple(pairs), _parse_timestamp(raw_ts), tag)


def authenticate(
    line: str,
    secret: bytes,
    receiver_now: float,
    skew_window: float = DEFAULT_SKEW_WINDOW,
) -> Message:
    body, sep, tag = line.rpartition("|")
    if not sep or not _TAG_RE.fullmatch(tag):
        raise Malformed("missing or malformed auth tag")
    if not hmac.compare_digest(sign(body, secret), tag):
        raise BadTag("auth tag does not match message")
    msg = decode(line)
    skew = abs(receiver_now - msg.timestamp)
    if skew > skew_window:
        raise ClockSkew(f"clock skew {skew:g}s exceeds window {skew_window:g}s")
    return msg


# -- secrets ----------------------------------------------------------------

def load_secret(path: str) -> bytes:
    """Read a shared secret: either 32 raw bytes or 64 hex characters."""
    with open(path, "rb") as fh:
        data = fh.read()
    text = data.strip()
    if len(text) == 2 * SECRET_BYTES:
        try:
            return bytes.fromhex(text.decode("ascii"))
        except (UnicodeDecodeError, ValueError):
            pass
    if len(data) == SECRET_BYTES:
        return data
    raise ValueError(f"secret in {path} must be {SECRET_BYTES} bytes or {2 * SECRET_BYTES} hex chars")


def write_secret(path: str) -> bytes:
    secret = secrets.token_bytes(SECRET_BYTES)
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    with os.fdopen(fd, "w") as fh:
        fh.write(secret.hex() + "\n")
    return secret


# -- payload helpers ----------------------------------------------------------

def pack(text: str) -> str:
    """Base64 a free-form string so it can travel as a field value."""
    return base64.urlsafe_b64encode(text.encode("utf-8")).decode("ascii")


def unpack(value: str) -> str:
    try:
        return base64.b64decode(value.encode("ascii"), altchars=b"-_", validate=True).decode("utf-8")
    except (ValueError, UnicodeError):
        raise Malformed("bad base64 payload") from None
