"""In-process transport between actors with fault injection and transcript recording.

Every message travels as envelope bytes.  Links are modelled as
integrity-protected channels (TLS towards servers, the device-internal bus
towards the eUICC): a raw byte flipped on the wire is detected by the channel
and surfaces as :class:`ChannelError`.  Field-level faults act above the
channel, like a compromised intermediary, so the altered content reaches the
peer and must be caught by the protocol's own signatures.
"""

from __future__ import annotations

import base64
import dataclasses
import fnmatch
import json
import threading
from collections.abc import Callable
from dataclasses import dataclass
from typing import Any

from rsplab import envelope as env
from rsplab.pki import Clock


class TransportError(Exception):
    pass


class Unroutable(TransportError):
    pass


class Dropped(TransportError):
    pass


class ChannelError(TransportError):
    """The modelled secure channel rejected a corrupted record."""


class TranscriptIoError(OSError):
    pass


ACTIONS = ("drop", "tamperByte", "swapField", "delayLogical", "expireCert", "revoke")


@dataclass
class FaultRule:
    """A deterministic fault.

    The rule counts messages matching ``endpoint`` (a glob) in ``direction``;
    it fires on the ``occurrence``-th match (1-based) and on the following
    ``times - 1`` matches.
    """

    action: str
    endpoint: str = "*"
    occurrence: int = 1
    times: int = 1
    direction: str = "request"
    offset: int = 0
    field: str | None = None
    value: Any = None
    amount: int = 0
    serial: int | None = None
    rule_id: str = ""
    mask: int = 0x01

    def __post_init__(self):
        if self.action not in ACTIONS:
            raise ValueError(f"unknown fault action {self.action!r}")
        if self.direction not in ("request", "response"):
            raise ValueError(f"unknown direction {self.direction!r}")
        if self.occurrence < 1 or self.times < 1:
            raise ValueError("occurrence and times are 1-based counts")
        if self.action == "swapField" and not self.field:
            raise ValueError("swapField needs a field name")
        if self.action in ("expireCert", "revoke") and self.serial is None:
            raise ValueError(f"{self.action} needs a certificate serial")
        if not 0 < self.mask < 256:
            raise ValueError("mask must be a non-zero byte")

    @classmethod
    def from_json(cls, obj: dict, index: int = 0) -> FaultRule:
        names = {f.name: f.name for f in dataclasses.fields(cls)}
        names["ruleId"] = "rule_id"
        kwargs = {}
        for k, v in obj.items():
            if k not in names:
                raise ValueError(f"unknown fault key {k!r}")
            kwargs[names[k]] = v
        kwargs.setdefault("rule_id", f"fault-{index + 1}")
        return cls(**kwargs)

    def to_json(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if v != f.default:
                out["ruleId" if f.name == "rule_id" else f.name] = v
        out["action"] = self.action
        return out


@dataclass(frozen=True)
class TranscriptEntry:
    seq: int
    direction: str  # request | response | connection-open
    sender: str
    receiver: str
    endpoint: str
    envelope: bytes = b""
    decoded: dict | None = None
    fault_applied: str | None = None

    def to_json(self) -> dict:
        return {
            "seq": self.seq,
            "direction": self.direction,
            "sender": self.sender,
            "receiver": self.receiver,
            "endpoint": self.endpoint,
            "envelope": base64.b64encode(self.envelope).decode("ascii"),
            "decoded": self.decoded,
            "faultApplied": self.fault_applied,
        }

    @classmethod
    def from_json(cls, obj: dict) -> TranscriptEntry:
        return cls(
            seq=obj["seq"],
            direction=obj["direction"],
            sender=obj["sender"],
            receiver=obj["receiver"],
            endpoint=obj["endpoint"],
            envelope=base64.b64decode(obj["envelope"]),
            decoded=obj.get("decoded"),
            fault_applied=obj.get("faultApplied"),
        )


class Transport:
    """Routes envelopes by address; delivery to each actor is serialised by a per-actor lock."""

    def __init__(self, clock: Clock, hooks: dict[str, Callable[[int], None]] | None = None):
        self.clock = clock
        self.routes: dict[str, Any] = {}
        self.compact: dict[str, bool] = {}
        self.faults: list[FaultRule] = []
        self.transcript: list[TranscriptEntry] = []
        self.hooks = dict(hooks or {})
        self._lock = threading.RLock()
        self._actor_locks: dict[str, threading.RLock] = {}
        self._matches: dict[int, int] = {}
        self.fired: list[str] = []

    def register(self, address: str, actor, *, compact: bool = False):
        """``actor.handle(endpoint, fields) -> fields``; ``compact`` selects the TLV envelope."""
        with self._lock:
            self.routes[address] = actor
            self.compact[address] = compact
            self._actor_locks[address] = threading.RLock()

    def add_fault(self, rule: FaultRule):
        with self._lock:
            if not rule.rule_id:
                rule.rule_id = f"fault-{len(self.faults) + 1}"
            self.faults.append(rule)

    def _record(self, **kw) -> TranscriptEntry:
        with self._lock:
            entry = TranscriptEntry(seq=len(self.transcript) + 1, **kw)
            self.transcript.append(entry)
            return entry

    def connect(self, sender: str, address: str):
        """Marks the start of a fresh secure connection (new TLS key exchange)."""
        if address not in self.routes:
            raise Unroutable(address)
        self._record(direction="connection-open", sender=sender, receiver=address, endpoint="")

    # --- fault machinery ------------------------------------------------------------------

    def _matching_rules(self, endpoint: str, direction: str) -> list[FaultRule]:
        fired = []
        with self._lock:
            for i, rule in enumerate(self.faults):
                if rule.direction != direction or not fnmatch.fnmatchcase(endpoint, rule.endpoint):
                    continue
                n = self._matches.get(i, 0) + 1
                self._matches[i] = n
                if rule.occurrence <= n < rule.occurrence + rule.times:
                    fired.append(rule)
        return fired

    def _apply(self, rule: FaultRule, data: bytes, endpoint: str, response: bool, compact: bool):
        """Returns (bytes, corrupted_on_wire)."""
        self.fired.append(rule.rule_id)
        if rule.action == "delayLogical":
            self.clock.advance(rule.amount)
            return data, False
        if rule.action in ("expireCert", "revoke"):
            self.hooks[rule.action](rule.serial)
            return data, False
        if rule.action == "tamperByte" and rule.field is None:
            buf = bytearray(data)
            buf[rule.offset % len(buf)] ^= rule.mask
            return bytes(buf), True
        decoded = env.decode_envelope(data, endpoint)
        fields = dict(decoded.fields)
        schema = env.schema_for(endpoint, response)
        if rule.action == "swapField":
            if rule.value is None:
                fields.pop(rule.field, None)
            else:
                fields.update(env.from_json_fields(schema, {rule.field: rule.value}))
        else:
            fields[rule.field] = _tamper_value(fields.get(rule.field), rule)
        return env.encode(endpoint, fields, response=response, compact=compact, host=_host(data)), False

    def _pass(self, sender, receiver, endpoint, data, response, compact):
        """Runs faults over one message; returns the bytes that reach the other side."""
        direction = "response" if response else "request"
        rendered = _render(data, endpoint)
        self._record(
            direction=direction, sender=sender, receiver=receiver, endpoint=endpoint, envelope=data, decoded=rendered
        )
        for rule in self._matching_rules(endpoint, direction):
            if rule.action == "drop":
                self._record(
                    direction=direction,
                    sender=sender,
                    receiver=receiver,
                    endpoint=endpoint,
                    fault_applied=rule.rule_id,
                )
                raise Dropped(f"{direction} {endpoint} dropped by {rule.rule_id}")
            data, corrupted = self._apply(rule, data, endpoint, response, compact)
            self._record(
                direction=direction,
                sender=sender,
                receiver=receiver,
                endpoint=endpoint,
                envelope=data,
                decoded=_render(data, endpoint),
                fault_applied=rule.rule_id,
            )
            if corrupted:
                raise ChannelError(f"integrity check failed on {direction} {endpoint}")
        return data

    # --- delivery ---------------------------------------------------------------------------------

    def send(self, sender: str, address: str, endpoint: str, fields: dict) -> dict:
        """Deliver a request and return the decoded response fields (header included)."""
        actor = self.routes.get(address)
        if actor is None:
            raise Unroutable(address)
        compact = self.compact[address]
        wire = env.encode(endpoint, fields, compact=compact, host=address)
        wire = self._pass(sender, address, endpoint, wire, False, compact)
        with self._actor_locks[address]:
            try:
                request = env.decode_envelope(wire, endpoint)
                body = {"header": env.success(), **actor.handle(endpoint, request.fields)}
            except env.BadEnvelope as e:
                body = {"header": env.failure(124, f"invalidInputData: {e}")}
            except env.ServiceError as e:
                body = {"header": env.failure(e.reason_code, e.message)}
        reply = env.encode(endpoint, body, response=True, compact=compact)
        reply = self._pass(address, sender, endpoint, reply, True, compact)
        return env.decode_envelope(reply, endpoint).fields

    # --- transcripts ----------------------------------------------------------------------------------

    def write_transcript(self, path) -> None:
        write_transcript(self.transcript, path)


def _host(data: bytes) -> str:
    head = data.split(b"\r\n\r\n", 1)[0]
    for line in head.split(b"\r\n"):
        if line.lower().startswith(b"host: "):
            return line[6:].decode("utf-8", "replace")
    return ""


def _render(data: bytes, endpoint: str) -> dict | None:
    try:
        e = env.decode_envelope(data, endpoint)
    except env.BadEnvelope:
        return None
    return env.render_fields(endpoint, e.fields, e.response)


def _tamper_value(value, rule: FaultRule):
    if value is None:
        raise ValueError(f"cannot tamper absent field {rule.field!r}")
    if isinstance(value, int):
        return value ^ rule.mask
    if isinstance(value, str):
        raw = bytearray(value.encode("utf-8"))
        raw[rule.offset % len(raw)] ^= rule.mask
        return raw.decode("utf-8", "replace")
    if isinstance(value, list):
        return [_tamper_value(value[0], rule), *value[1:]] if value else value
    if isinstance(value, dict):
        raise ValueError("status headers cannot be byte-tampered")
    buf = bytearray(value)
    buf[rule.offset % len(buf)] ^= rule.mask
    return bytes(buf)


def write_transcript(entries, path) -> None:
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.writelines(json.dumps(e.to_json(), sort_keys=True, separators=(",", ":")) + "\n" for e in entries)
    except OSError as e:
        raise TranscriptIoError(e.errno, f"cannot write transcript: {e.strerror}", str(path)) from None


def read_transcript(path) -> list[TranscriptEntry]:
    try:
        with open(path, encoding="utf-8") as fh:
            return [TranscriptEntry.from_json(json.loads(line)) for line in fh if line.strip()]
    except OSError as e:
        raise TranscriptIoError(e.errno, f"cannot read transcript: {e.strerror}", str(path)) from None


def first_divergence(a: list[TranscriptEntry], b: list[TranscriptEntry]) -> int | None:
    for x, y in zip(a, b):
        if x != y:
            return x.seq
    if len(a) != len(b):
        return min(len(a), len(b)) + 1
    return None


def verify_transcript(path, golden_path) -> int | None:
    """None when both transcripts are identical, else the first differing seq."""
    return first_divergence(read_transcript(path), read_transcript(golden_path))
