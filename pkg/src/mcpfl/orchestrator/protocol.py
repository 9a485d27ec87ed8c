"""Wire messages exchanged between the server and clients, and the round grammar.

Serialization is one compact JSON object per message with the fields in this
order::

    protocol_version, msg_type, round, sender, recipient, payload

Payload keys are sorted.  Vectors travel as base64 of their little-endian
8-byte words, so a float64 update and a uint64 field vector of the same length
serialize to the same number of bytes.  ``byte_size`` is the UTF-8 length of
that line (without the newline).

Per round, a transcript must read::

    round_invite+ (round_accept | round_decline)+ masked_update*
        [round_abort masked_update*] global_model+

and the session setup (round 0) is, per client,
``capability_advertise schema_offer (schema_ack | negotiation_reject)``.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..errors import ProtocolError

PROTOCOL_VERSION = "mcpfl/0.1"
SERVER = "server"

_PAYLOAD_KEYS = {
    "capability_advertise": {"schemas"},
    "schema_offer": {"schemas"},
    "schema_ack": {"agreed", "absent"},
    "negotiation_reject": {"reason"},
    "round_invite": {"model_dim"},
    "round_accept": set(),
    "round_decline": {"reason"},
    "masked_update": {"encoding", "frac_bits", "vector", "weight", "absent"},
    "round_abort": {"missing"},
    "global_model": {"vector"},
}
MSG_TYPES = tuple(_PAYLOAD_KEYS)


def pack_vector(values: np.ndarray) -> str:
    arr = np.asarray(values)
    if arr.dtype == np.float64:
        raw = arr.astype("<f8").tobytes()
    elif arr.dtype == np.uint64:
        raw = arr.astype("<u8").tobytes()
    else:
        raise ProtocolError(f"cannot pack vector of dtype {arr.dtype}")
    return base64.b64encode(raw).decode("ascii")


def unpack_vector(text: str, dtype=np.float64) -> np.ndarray:
    raw = base64.b64decode(text.encode("ascii"))
    return np.frombuffer(raw, dtype=np.dtype(dtype).newbyteorder("<")).astype(dtype)


@dataclass(frozen=True)
class WireMessage:
    msg_type: str
    round: int
    sender: str
    recipient: str
    payload: dict = field(default_factory=dict)
    protocol_version: str = PROTOCOL_VERSION

    def __post_init__(self):
        if self.msg_type not in _PAYLOAD_KEYS:
            raise ProtocolError(f"unknown msg_type {self.msg_type!r}")
        keys = set(self.payload)
        if keys != _PAYLOAD_KEYS[self.msg_type]:
            raise ProtocolError(
                f"{self.msg_type} payload has keys {sorted(keys)}, "
                f"expected {sorted(_PAYLOAD_KEYS[self.msg_type])}"
            )
        if self.msg_type == "masked_update":
            if self.payload["encoding"] not in ("field", "plain"):
                raise ProtocolError("masked_update encoding must be 'field' or 'plain'")
            if not self.payload["weight"] > 0:
                raise ProtocolError("masked_update weight must be positive")

    def to_json(self) -> str:
        body = {
            "protocol_version": self.protocol_version,
            "msg_type": self.msg_type,
            "round": self.round,
            "sender": self.sender,
            "recipient": self.recipient,
            "payload": {k: self.payload[k] for k in sorted(self.payload)},
        }
        return json.dumps(body, separators=(",", ":"))

    @property
    def byte_size(self) -> int:
        return len(self.to_json().encode("utf-8"))

    @classmethod
    def from_json(cls, line: str) -> "WireMessage":
        d = json.loads(line)
        if d.get("protocol_version") != PROTOCOL_VERSION:
            raise ProtocolError(f"unsupported protocol version {d.get('protocol_version')!r}")
        return cls(
            msg_type=d["msg_type"],
            round=int(d["round"]),
            sender=d["sender"],
            recipient=d["recipient"],
            payload=d["payload"],
        )


def client_name(k: int) -> str:
    return f"client-{k}"


def write_transcript(messages: Iterable[WireMessage], path: str | Path) -> None:
    with Path(path).open("w") as fh:
        for msg in messages:
            fh.write(msg.to_json() + "\n")


def read_transcript(path: str | Path) -> list[WireMessage]:
    with Path(path).open() as fh:
        return [WireMessage.from_json(line) for line in fh if line.strip()]


def _validate_setup(messages: Sequence[WireMessage]) -> None:
    pending: dict[str, str] = {}
    for msg in messages:
        if msg.msg_type == "capability_advertise":
            if msg.sender in pending:
                raise ProtocolError(f"{msg.sender} advertised twice")
            pending[msg.sender] = "advertised"
        elif msg.msg_type == "schema_offer":
            if pending.get(msg.recipient) != "advertised":
                raise ProtocolError(f"schema_offer to {msg.recipient} before its advertisement")
            pending[msg.recipient] = "offered"
        elif msg.msg_type == "schema_ack":
            if pending.get(msg.sender) != "offered":
                raise ProtocolError(f"schema_ack from {msg.sender} without an offer")
            pending[msg.sender] = "done"
        elif msg.msg_type == "negotiation_reject":
            if pending.get(msg.recipient) != "offered":
                raise ProtocolError(f"negotiation_reject to {msg.recipient} without an offer")
            pending[msg.recipient] = "done"
        else:
            raise ProtocolError(f"{msg.msg_type} not allowed during setup")
    unfinished = [c for c, s in pending.items() if s != "done"]
    if unfinished:
        raise ProtocolError(f"negotiation incomplete for {sorted(unfinished)}")


_PHASE = {
    "round_invite": 0,
    "round_accept": 1,
    "round_decline": 1,
    "masked_update": 2,
    "round_abort": 3,
    "global_model": 5,
}


def validate_round(messages: Sequence[WireMessage]) -> None:
    """Check one round's messages against the invite/respond/update/broadcast grammar."""
    if not messages:
        return
    rounds = {m.round for m in messages}
    if len(rounds) != 1:
        raise ProtocolError(f"messages from several rounds mixed: {sorted(rounds)}")
    if rounds == {0}:
        _validate_setup(messages)
        return

    phase = 0
    invited: set[str] = set()
    responded: dict[str, str] = {}
    updated: set[str] = set()
    retry_roster: set[str] | None = None
    got_global: set[str] = set()
    for msg in messages:
        t = msg.msg_type
        if t not in _PHASE:
            raise ProtocolError(f"{t} not allowed inside a round")
        want = _PHASE[t]
        if t == "masked_update" and retry_roster is not None:
            want = 4
        if want < phase:
            raise ProtocolError(f"{t} from {msg.sender} arrived out of order")
        if t == "round_invite":
            if msg.recipient in invited:
                raise ProtocolError(f"{msg.recipient} invited twice")
            invited.add(msg.recipient)
        elif t in ("round_accept", "round_decline"):
            if msg.sender not in invited or msg.sender in responded:
                raise ProtocolError(f"unexpected {t} from {msg.sender}")
            responded[msg.sender] = t
        elif t == "masked_update":
            if phase < 2 and set(responded) != invited:
                raise ProtocolError("updates started before every invitee responded")
            if responded.get(msg.sender) != "round_accept":
                raise ProtocolError(f"update from {msg.sender}, which did not accept")
            if retry_roster is None:
                if msg.sender in updated:
                    raise ProtocolError(f"duplicate update from {msg.sender}")
                updated.add(msg.sender)
            else:
                if msg.sender not in retry_roster:
                    raise ProtocolError(f"retry update from {msg.sender} outside the retry roster")
                retry_roster.discard(msg.sender)
        elif t == "round_abort":
            if retry_roster is not None:
                raise ProtocolError("more than one abort in a round")
            missing = {client_name(k) for k in msg.payload["missing"]}
            accepted = {c for c, r in responded.items() if r == "round_accept"}
            if not missing or not missing <= accepted or missing & updated:
                raise ProtocolError("abort must list accepted clients that sent nothing")
            retry_roster = accepted - missing
        elif t == "global_model":
            if set(responded) != invited:
                raise ProtocolError("global model sent before every invitee responded")
            if msg.recipient not in invited or msg.recipient in got_global:
                raise ProtocolError(f"unexpected global_model to {msg.recipient}")
            got_global.add(msg.recipient)
        phase = want
    if retry_roster:
        raise ProtocolError(f"retry roster never delivered: {sorted(retry_roster)}")
    if got_global != invited:
        raise ProtocolError("round did not end with the global model for every invitee")


def validate_transcript(messages: Sequence[WireMessage]) -> int:
    """Validate every round in a transcript; returns the number of rounds checked."""
    by_round: dict[int, list[WireMessage]] = {}
    last = -1
    for msg in messages:
        if msg.round < last:
            raise ProtocolError("transcript rounds are not monotone")
        last = msg.round
        by_round.setdefault(msg.round, []).append(msg)
    for msgs in by_round.values():
        validate_round(msgs)
    return len(by_round)
