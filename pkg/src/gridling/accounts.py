"""User accounts, QOS levels, roster ingestion and expiry reconciliation.

Two tables are kept side by side: the identity table (every account ever
created, active or not) and the scheduler table (usernames allowed to run
jobs).  They model the separate OS and batch-system user lists and must
agree on the set of active usernames after every operation.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Tuple

from gridling.errors import (
    BadDate,
    BadValue,
    DuplicateUsername,
    GridlingError,
    InactiveUser,
    UnknownQos,
)

ROSTER_HEADER = "username,qos,expires_on,max_submit,max_running,max_wall_min,quota_gb"
ROSTER_COLUMNS = ROSTER_HEADER.split(",")

# violation names returned by check_submit
SUBMIT_LIMIT = "SubmitLimit"
WALL_LIMIT = "WallLimit"
UNKNOWN_QOS = "UnknownQos"

_NAME_FORBIDDEN = set("|;=,#%")


class BadHeader(GridlingError):
    code = "BadHeader"


@dataclass(frozen=True)
class QosLevel:
    name: str
    weight: int


@dataclass
class UserAccount:
    username: str
    uid: int
    qos: str
    expires_on: dt.date
    max_submit: int
    max_running: int
    max_wall_min: int
    quota_gb: int
    active: bool = True

    def to_row(self) -> str:
        return ",".join(
            str(v)
            for v in (
                self.username,
                self.qos,
                self.expires_on.isoformat(),
                self.max_submit,
                self.max_running,
                self.max_wall_min,
                self.quota_gb,
            )
        )


@dataclass(frozen=True)
class RowError:
    line: int
    username: str
    code: str
    message: str

    def __str__(self):
        return f"line {self.line}: {self.code}: {self.message}"


def valid_name(name: str) -> bool:
    return bool(name) and not any(c.isspace() or c in _NAME_FORBIDDEN for c in name)


def check_submit(user: UserAccount, req, submitted_live: int, running: int, qos_table) -> Optional[str]:
    """Return the name of the first violated submit rule, or None.

    ``qos_table`` maps QOS name to weight.  A user may request any QOS whose
    weight does not exceed the weight of their own QOS.  The running-job limit
    is not checked here; it holds jobs back at schedule time instead.
    """
    if not user.active:
        raise InactiveUser(f"account {user.username!r} is not active")
    if submitted_live >= user.max_submit:
        return SUBMIT_LIMIT
    if req.time_limit_min > user.max_wall_min:
        return WALL_LIMIT
    own = qos_table.get(user.qos)
    wanted = qos_table.get(req.qos)
    if own is None or wanted is None or wanted > own:
        return UNKNOWN_QOS
    return None


class AccountStore:
    def __init__(self, qos_levels: Iterable[Tuple[str, int]] = (), first_uid: int = 1001):
        self.qos: Dict[str, int] = {"normal": 0}
        for name, weight in qos_levels:
            self.define_qos(name, weight)
        self.users: Dict[str, UserAccount] = {}
        self.scheduler_users: Dict[str, str] = {}
        self._next_uid = first_uid

    # -- QOS ---------------------------------------------------------------

    def define_qos(self, name: str, weight: int) -> QosLevel:
        if not valid_name(name):
            raise BadValue(f"invalid QOS name {name!r}")
        if isinstance(weight, bool) or not isinstance(weight, int) or weight < 0:
            raise BadValue(f"QOS weight must be a non-negative integer, got {weight!r}")
        self.qos[name] = weight
        return QosLevel(name, weight)

    def qos_levels(self) -> List[QosLevel]:
        return [QosLevel(n, w) for n, w in sorted(self.qos.items(), key=lambda kv: (-kv[1], kv[0]))]

    def weight(self, qos_name: str) -> int:
        try:
            return self.qos[qos_name]
        except KeyError:
            raise UnknownQos(f"no QOS named {qos_name!r}") from None

    # -- users -------------------------------------------------------------

    def active_user(self, username: str) -> UserAccount:
        user = self.users.get(username)
        if user is None or not user.active:
            raise InactiveUser(f"no active account for {username!r}")
        return user

    def active_usernames(self) -> set:
        return {u.username for u in self.users.values() if u.active}

    def in_sync(self) -> bool:
        return self.active_usernames() == set(self.scheduler_users)

    def add_user(
        self,
        username: str,
        qos: str,
        expires_on: dt.date,
        max_submit: int,
        max_running: int,
        max_wall_min: int,
        quota_gb: int,
    ) -> UserAccount:
        """Create one account in both tables, or raise without touching either."""
        if not valid_name(username):
            raise BadValue(f"invalid username {username!r}")
        existing = self.users.get(username)
        if existing is not None and existing.active:
            raise DuplicateUsername(f"username {username!r} already exists")
        if qos not in self.qos:
            raise UnknownQos(f"no QOS named {qos!r}")
        for name, value in (
            ("max_submit", max_submit),
            ("max_running", max_running),
            ("max_wall_min", max_wall_min),
            ("quota_gb", quota_gb),
        ):
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise BadValue(f"{name} must be a positive integer, got {value!r}")
        if max_running > max_submit:
            raise BadValue("max_running may not exceed max_submit")
        user = UserAccount(
            username, self._next_uid, qos, expires_on,
            max_submit, max_running, max_wall_min, quota_gb,
        )
        self._next_uid += 1
        self.users[username] = user
        self.scheduler_users[username] = qos
        return user

    def remove_user(self, username: str) -> UserAccount:
        user = self.active_user(username)
        user.active = False
        del self.scheduler_users[username]
        return user

    def ingest_csv(self, text: str) -> Tuple[List[UserAccount], List[RowError]]:
        lines = text.splitlines()
        if not lines or lines[0].strip() != ROSTER_HEADER:
            raise BadHeader(f"roster header must be exactly {ROSTER_HEADER!r}")
        created, errors = [], []
        for lineno, raw in enumerate(lines[1:], start=2):
            if not raw.strip():
                continue
            cols = [c.strip() for c in raw.split(",")]
            username = cols[0] if cols else ""
            try:
                created.append(self._ingest_row(cols))
            except GridlingError as exc:
                errors.append(RowError(lineno, username, exc.code, exc.args[0] if exc.args else str(exc)))
        return created, errors

    def _ingest_row(self, cols: List[str]) -> UserAccount:
        if len(cols) != len(ROSTER_COLUMNS):
            raise BadValue(f"expected {len(ROSTER_COLUMNS)} columns, got {len(cols)}")
        username, qos, expires, *numbers = cols
        try:
            expires_on = dt.date.fromisoformat(expires)
        except ValueError:
            raise BadDate(f"bad date {expires!r}; expected YYYY-MM-DD") from None
        ints = []
        for name, value in zip(ROSTER_COLUMNS[3:], numbers):
            if not value.isascii() or not value.isdigit():
                raise BadValue(f"{name} must be a positive integer, got {value!r}")
            ints.append(int(value))
        return self.add_user(username, qos, expires_on, *ints)

    def reconcile_expired(self, today: dt.date, jobs: Iterable = ()) -> Tuple[List[str], List[int]]:
        """Deactivate accounts whose last valid day is before ``today``.

        Returns the removed usernames and the ids of their live jobs (PENDING
        or RUNNING) among ``jobs``, which the caller is expected to cancel.
        Live jobs of already-inactive users are reported too, so a
        reconcile always leaves no live job owned by an inactive account.
        """
        removed = sorted(
            u.username for u in self.users.values() if u.active and u.expires_on < today
        )
        for name in removed:
            self.remove_user(name)
        cancel = sorted(
            j.id
            for j in jobs
            if j.is_live and not self._is_active(j.username)
        )
        return removed, cancel

    def _is_active(self, username: str) -> bool:
        user = self.users.get(username)
        return user is not None and user.active
