import random
import string

import pytest
from hypothesis import given, settings, strategies as st

from gridling.control import protocol
from gridling.control.protocol import Message, authenticate, decode, encode, pack, unpack
from gridling.errors import BadTag, ClockSkew, IllegalCharacter, Malformed, ProtocolError

SECRET = bytes(range(32))
OTHER = bytes(range(1, 33))
NOW = 1_700_000_000


def test_heartbeat_without_fields():
    line = encode("HEARTBEAT", [], NOW, SECRET)
    kind, fields, ts, tag = line.split("|")
    assert (kind, fields, ts) == ("HEARTBEAT", "", str(NOW)) and len(tag) == 64
    assert authenticate(line, SECRET, NOW) == Message("HEARTBEAT", (), NOW, tag)


def test_launch_round_trip():
    fields = [("jobid", "7"), ("argv", pack("python\0train.py")), ("gpus", "0,1"), ("limit", "2880")]
    line = encode("LAUNCH", fields, NOW + 0.25, SECRET)
    msg = authenticate(line, SECRET, NOW)
    assert msg.kind == "LAUNCH" and msg.fields == tuple(fields) and msg.timestamp == NOW + 0.25
    assert unpack(msg["argv"]).split("\0") == ["python", "train.py"]
    assert msg.as_dict()["gpus"] == "0,1"
    with pytest.raises(Malformed):
        msg["missing"]


def test_tag_is_hmac_sha256_of_body():
    import hashlib
    import hmac

    line = encode("STATUS", {"jobid": 1, "exit": 0}, NOW, SECRET)
    body, _, tag = line.rpartition("|")
    assert tag == hmac.new(SECRET, body.encode(), hashlib.sha256).hexdigest()


@pytest.mark.parametrize("fields", [
    [("k", "a|b")], [("k", "a;b")], [("k", "a\nb")], [("k=", "v")], [("", "v")], [("a", "1"), ("a", "2")],
])
def test_illegal_characters(fields):
    with pytest.raises(IllegalCharacter):
        encode("ACK", fields, NOW, SECRET)


def test_illegal_kind_and_timestamp():
    with pytest.raises(IllegalCharacter):
        encode("HELLO", [], NOW, SECRET)
    with pytest.raises(IllegalCharacter):
        encode("ACK", [], float("nan"), SECRET)
    with pytest.raises(IllegalCharacter):
        encode("ACK", [], "now", SECRET)


def test_flipped_tag_character_is_bad_tag():
    line = encode("ACK", [("ok", "1")], NOW, SECRET)
    last = line[-1]
    flipped = line[:-1] + ("0" if last != "0" else "1")
    with pytest.raises(BadTag):
        authenticate(flipped, SECRET, NOW)


def test_wrong_secret_is_bad_tag():
    with pytest.raises(BadTag):
        authenticate(encode("ACK", [], NOW, SECRET), OTHER, NOW)


def test_skew_window_boundaries():
    line = encode("HEARTBEAT", [("node", "n0")], NOW - 301, SECRET)
    with pytest.raises(ClockSkew):
        authenticate(line, SECRET, NOW, 300)
    assert authenticate(encode("HEARTBEAT", [], NOW - 300, SECRET), SECRET, NOW, 300)
    assert authenticate(encode("HEARTBEAT", [], NOW + 300, SECRET), SECRET, NOW, 300)
    with pytest.raises(ClockSkew):
        authenticate(encode("HEARTBEAT", [], NOW + 300.5, SECRET), SECRET, NOW, 300)


def test_decode_rejects_garbage():
    for line in ("", "ACK", "ACK||1", "NOPE||1|" + "0" * 64, "ACK|x|1|" + "0" * 64, "ACK||soon|" + "0" * 64,
                 "ACK||1|" + "A" * 64):
        with pytest.raises(Malformed):
            decode(line)


def test_trailing_newline_is_not_accepted():
    line = encode("ACK", [], NOW, SECRET)
    with pytest.raises(Malformed):
        authenticate(line + "\n", SECRET, NOW)


def test_pack_unpack():
    text = "line one\nline|two;=é"
    assert unpack(pack(text)) == text
    assert not set(pack(text)) & set("|;\n\r")
    for bad in ("***", "ab+/", "é"):
        with pytest.raises(Malformed):
            unpack(bad)


def test_secret_files(tmp_path):
    path = tmp_path / "secret"
    secret = protocol.write_secret(str(path))
    assert len(secret) == 32 and protocol.load_secret(str(path)) == secret
    assert oct(path.stat().st_mode & 0o777) == "0o600"
    raw = tmp_path / "raw"
    raw.write_bytes(bytes(range(32)))
    assert protocol.load_secret(str(raw)) == bytes(range(32))
    short = tmp_path / "short"
    short.write_text("abcd")
    with pytest.raises(ValueError):
        protocol.load_secret(str(short))


# -- properties -------------------------------------------------------------------

values = st.text(st.characters(blacklist_characters="|;\n\r", blacklist_categories=("Cs",)), max_size=20)
keys = st.text(st.characters(blacklist_characters="|;=\n\r", blacklist_categories=("Cs",)), min_size=1, max_size=8)


@settings(max_examples=300, deadline=None)
@given(
    st.sampled_from(protocol.KINDS),
    st.dictionaries(keys, values, max_size=5),
    st.one_of(st.integers(0, 2**40), st.floats(0, 2**40, allow_nan=False)),
)
def test_encode_decode_round_trip(kind, fields, ts):
    line = encode(kind, fields, ts, SECRET)
    msg = authenticate(line, SECRET, ts)
    assert (msg.kind, msg.fields, msg.timestamp) == (kind, tuple(fields.items()), ts)


def mutate(line, rng):
    """One random single-character substitution, insertion or deletion."""
    alphabet = string.printable + "é |;="
    i = rng.randrange(len(line) + 1)
    op = rng.choice(("sub", "ins", "del")) if i < len(line) else "ins"
    if op == "sub":
        c = rng.choice([ch for ch in alphabet if ch != line[i]])
        return line[:i] + c + line[i + 1:]
    if op == "ins":
        return line[:i] + rng.choice(alphabet) + line[i:]
    return line[:i] + line[i + 1:]


def sample_lines(rng, n):
    lines = []
    for _ in range(n):
        kind = rng.choice(protocol.KINDS)
        fields = [(f"k{j}", "".join(rng.choice(string.ascii_letters + "0123456789=,") for _ in range(rng.randint(0, 6))))
                  for j in range(rng.randint(0, 4))]
        ts = rng.choice([NOW, NOW + rng.random()])
        lines.append(encode(kind, fields, ts, SECRET))
    return lines


def test_single_character_mutations_are_rejected():
    rng = random.Random(20)
    bases = sample_lines(rng, 50)
    outcomes = {}
    for n in range(2000):
        base = bases[n % len(bases)]
        bad = mutate(base, rng)
        assert bad != base
        with pytest.raises((BadTag, Malformed)) as info:
            authenticate(bad, SECRET, NOW)
        outcomes[type(info.value).__name__] = outcomes.get(type(info.value).__name__, 0) + 1
    assert set(outcomes) == {"BadTag", "Malformed"}


def test_errors_share_a_base():
    for cls in (BadTag, ClockSkew, Malformed, IllegalCharacter):
        assert issubclass(cls, ProtocolError)
