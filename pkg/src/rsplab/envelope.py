"""HTTP-shaped envelopes carrying JSON bodies, plus a compact pure-TLV form.

Bodies are dictionaries whose values are ``bytes`` (base64 in JSON),
``str``, ``int``, lists of ``bytes`` or the status ``header`` object.  Which
kind a field has is fixed per endpoint in :data:`SCHEMAS`; unknown fields
are rejected.
"""

from __future__ import annotations

import base64
import binascii
import json
from dataclasses import dataclass, field

from rsplab import tlv

PROTOCOL = "gsma/rsp/v2.5.0"
USER_AGENT = "rsplab/0.1"

ES9 = "/gsma/rsp2/es9plus/"
INITIATE_AUTHENTICATION = ES9 + "initiateAuthentication"
AUTHENTICATE_CLIENT = ES9 + "authenticateClient"
GET_BOUND_PROFILE_PACKAGE = ES9 + "getBoundProfilePackage"
HANDLE_NOTIFICATION = ES9 + "handleNotification"
CANCEL_SESSION = ES9 + "cancelSession"

COMPACT_TAG = 0x7E

# field kinds: bin (bytes), bins (list of bytes), hex (bytes as uppercase hex),
# str, int, header (status object)
_HEADER = {"header": "header"}
_FAIL = {**_HEADER, "transactionId": "hex"}

SCHEMAS: dict[str, tuple[dict, dict]] = {
    # ES9+ (LPA or eIM <-> SM-DP+)
    INITIATE_AUTHENTICATION: (
        {"euiccChallenge": "bin", "euiccInfo1": "bin", "smdpAddress": "str", "lpaRspCapability": "bin"},
        {
            **_FAIL,
            "serverSigned1": "bin",
            "serverSignature1": "bin",
            "euiccCiPKIdToBeUsed": "bin",
            "serverCertificate": "bin",
            "otherCertsInChain": "bins",
            "crlList": "bins",
        },
    ),
    AUTHENTICATE_CLIENT: (
        {
            "transactionId": "hex",
            "euiccSigned1": "bin",
            "euiccSignature1": "bin",
            "euiccCertificate": "bin",
            "nextCertInChain": "bin",
            "otherCertsInChain": "bins",
        },
        {**_FAIL, "profileMetadata": "bin", "smdpSigned2": "bin", "smdpSignature2": "bin", "smdpCertificate": "bin"},
    ),
    GET_BOUND_PROFILE_PACKAGE: (
        {"transactionId": "hex", "prepareDownloadResponse": "bin"},
        {**_FAIL, "boundProfilePackage": "bin"},
    ),
    HANDLE_NOTIFICATION: ({"pendingNotification": "bin"}, dict(_HEADER)),
    CANCEL_SESSION: ({"transactionId": "hex", "cancelSessionResponse": "bin"}, dict(_FAIL)),
    # ES10b (LPA <-> eUICC)
    "/es10b/getEuiccInfo1": ({}, {**_HEADER, "euiccInfo1": "bin"}),
    "/es10b/getEuiccChallenge": ({}, {**_HEADER, "euiccChallenge": "bin"}),
    "/es10b/authenticateServer": (
        {"authenticateServerRequest": "bin"},
        {**_HEADER, "authenticateServerResponse": "bin"},
    ),
    "/es10b/prepareDownload": ({"prepareDownloadRequest": "bin"}, {**_HEADER, "prepareDownloadResponse": "bin"}),
    "/es10b/loadBoundProfilePackage": ({"segment": "bin"}, {**_HEADER, "loadBppResponse": "bin"}),
    "/es10b/cancelSession": ({"cancelSessionRequest": "bin"}, {**_HEADER, "cancelSessionResponse": "bin"}),
    "/es10b/getRat": ({}, {**_HEADER, "rat": "bin"}),
    "/es10b/getProfilesInfo": ({}, {**_HEADER, "profilesInfo": "bin"}),
    "/es10b/removeNotificationFromList": ({"seqNumber": "int"}, {**_HEADER, "result": "int"}),
    "/es10b/addEimConfiguration": ({"eimConfigurationData": "bin"}, {**_HEADER, "result": "int"}),
    "/es10b/eimOperation": ({"signedOperation": "bin"}, {**_HEADER, "result": "int"}),
    "/es10b/removeEimConfiguration": ({}, {**_HEADER, "result": "int"}),
    # ESipa (eIM <-> IPA)
    "/esipa/transferActivationCode": ({"activationCode": "str"}, {**_HEADER, "flowReport": "str"}),
    "/esipa/initiateAuthentication": (
        {"smdpAddress": "str"},
        {**_HEADER, "euiccInfo1": "bin", "euiccChallenge": "bin", "lpaRspCapability": "bin"},
    ),
    "/esipa/authenticateServer": (
        {
            "smdpAddress": "str",
            "matchingId": "str",
            "transactionId": "hex",
            "serverSigned1": "bin",
            "serverSignature1": "bin",
            "euiccCiPKIdToBeUsed": "bin",
            "serverCertificate": "bin",
            "otherCertsInChain": "bins",
            "crlList": "bins",
        },
        {**_HEADER, "authenticateServerResponse": "bin"},
    ),
    "/esipa/prepareDownload": (
        {
            "transactionId": "hex",
            "profileMetadata": "bin",
            "smdpSigned2": "bin",
            "smdpSignature2": "bin",
            "smdpCertificate": "bin",
        },
        {**_HEADER, "prepareDownloadResponse": "bin", "cancelSessionResponse": "bin"},
    ),
    "/esipa/loadBoundProfilePackage": (
        {"transactionId": "hex", "boundProfilePackage": "bin"},
        {**_HEADER, "profileInstallationResult": "bin", "cancelSessionResponse": "bin"},
    ),
    "/esipa/cancelSession": (
        {"transactionId": "hex", "reason": "int"},
        {**_HEADER, "cancelSessionResponse": "bin"},
    ),
    "/esipa/removeNotification": ({"seqNumber": "int"}, {**_HEADER, "result": "int"}),
    "/esipa/eimOperation": ({"signedOperation": "bin"}, {**_HEADER, "result": "int"}),
}


class BadEnvelope(ValueError):
    pass


class ServiceError(Exception):
    """Raised by an endpoint handler; rendered as a 'Failed' status header."""

    def __init__(self, reason_code: int | str, message: str | None = None):
        if message is None:
            message = getattr(reason_code, "name", str(reason_code))
        super().__init__(message)
        self.reason_code = int(reason_code) if isinstance(reason_code, int) else reason_code
        self.message = message


def success() -> dict:
    return {"functionExecutionStatus": {"status": "Executed-Success"}}


def failure(reason_code: int | str, message: str) -> dict:
    return {
        "functionExecutionStatus": {
            "status": "Failed",
            "statusCodeData": {"reasonCode": reason_code, "message": message},
        }
    }


def is_success(body: dict) -> bool:
    header = body.get("header")
    return header is not None and header["functionExecutionStatus"]["status"] == "Executed-Success"


def status_code(body: dict) -> tuple[int | str | None, str | None]:
    """(reasonCode, message) of a failed response; (None, None) on success."""
    status = body.get("header", {}).get("functionExecutionStatus", {})
    data = status.get("statusCodeData")
    if not data:
        return None, None
    return data.get("reasonCode"), data.get("message")


@dataclass
class Envelope:
    endpoint: str
    headers: dict[str, str]
    body: bytes
    response: bool = False
    fields: dict = field(default_factory=dict)
    compact: bool = False


def schema_for(endpoint: str, response: bool) -> dict:
    try:
        return SCHEMAS[endpoint][1 if response else 0]
    except KeyError:
        raise BadEnvelope(f"unknown endpoint {endpoint!r}") from None


# --- JSON <-> python field values ---------------------------------------------


def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def _unb64(text) -> bytes:
    if not isinstance(text, str):
        raise BadEnvelope("expected a base64 string")
    try:
        return base64.b64decode(text.encode("ascii"), validate=True)
    except (binascii.Error, UnicodeEncodeError) as e:
        raise BadEnvelope(f"invalid base64: {e}") from None


def _check_header(obj):
    try:
        status = obj["functionExecutionStatus"]["status"]
    except (TypeError, KeyError):
        raise BadEnvelope("malformed header") from None
    if status not in ("Executed-Success", "Failed"):
        raise BadEnvelope(f"unknown status {status!r}")
    return obj


def to_json_fields(schema: dict, fields: dict) -> dict:
    out = {}
    for name, value in fields.items():
        kind = schema.get(name)
        if kind is None:
            raise BadEnvelope(f"unknown field {name!r}")
        if kind == "bin":
            out[name] = _b64(value)
        elif kind == "bins":
            out[name] = [_b64(v) for v in value]
        elif kind == "hex":
            out[name] = value.hex().upper()
        else:
            out[name] = value
    return out


def from_json_fields(schema: dict, obj) -> dict:
    if not isinstance(obj, dict):
        raise BadEnvelope("body must be a JSON object")
    out = {}
    for name, value in obj.items():
        kind = schema.get(name)
        if kind is None:
            raise BadEnvelope(f"unknown field {name!r}")
        if kind == "bin":
            out[name] = _unb64(value)
        elif kind == "bins":
            if not isinstance(value, list):
                raise BadEnvelope(f"{name} must be a list")
            out[name] = [_unb64(v) for v in value]
        elif kind == "hex":
            try:
                out[name] = bytes.fromhex(value)
            except (TypeError, ValueError):
                raise BadEnvelope(f"{name} is not hex") from None
        elif kind == "str":
            if not isinstance(value, str):
                raise BadEnvelope(f"{name} must be a string")
            out[name] = value
        elif kind == "int":
            if not isinstance(value, int) or isinstance(value, bool):
                raise BadEnvelope(f"{name} must be an integer")
            out[name] = value
        else:
            out[name] = _check_header(value)
    return out


def render_fields(endpoint: str, fields: dict, response: bool) -> dict:
    """JSON-safe view of a field dict, used for transcripts."""
    return to_json_fields(schema_for(endpoint, response), fields)


# --- JSON envelope --------------------------------------------------------------


def encode_envelope(
    endpoint: str, headers: dict[str, str], body: dict, *, response: bool = False, host: str = ""
) -> bytes:
    """Render an HTTP-shaped envelope. ``body`` holds python field values."""
    if not any(k.lower() == "x-admin-protocol" for k in headers):
        raise BadEnvelope("X-Admin-Protocol header is required")
    payload = json.dumps(
        to_json_fields(schema_for(endpoint, response), body), separators=(",", ":")
    ).encode("utf-8")
    lines = ["HTTP/1.1 200 OK" if response else f"POST {endpoint} HTTP/1.1"]
    if not response:
        lines.append(f"Host: {host}")
        lines.append(f"User-Agent: {USER_AGENT}")
    for k, v in headers.items():
        lines.append(f"{k}: {v}")
    lines.append("Content-Type: application/json;charset=UTF-8")
    lines.append(f"Content-Length: {len(payload)}")
    return ("\r\n".join(lines) + "\r\n\r\n").encode("utf-8") + payload


def decode_envelope(data: bytes, endpoint: str | None = None) -> Envelope:
    """Parse either envelope form; ``endpoint`` is needed for responses.

    Raises BadEnvelope on a missing protocol header, bad JSON, bad base64 or
    fields that the endpoint does not define.
    """
    if data[:1] == bytes([COMPACT_TAG]):
        return decode_compact(data, endpoint)
    head, sep, payload = data.partition(b"\r\n\r\n")
    if not sep:
        raise BadEnvelope("no header/body separator")
    try:
        lines = head.decode("utf-8").split("\r\n")
    except UnicodeDecodeError:
        raise BadEnvelope("header is not UTF-8") from None
    start = lines[0]
    if start == "HTTP/1.1 200 OK":
        response = True
        if endpoint is None:
            raise BadEnvelope("response envelopes need the request endpoint")
    else:
        parts = start.split(" ")
        if len(parts) != 3 or parts[0] != "POST" or parts[2] != "HTTP/1.1":
            raise BadEnvelope(f"bad request line {start!r}")
        response = False
        endpoint = parts[1]
    headers = {}
    for line in lines[1:]:
        name, colon, value = line.partition(": ")
        if not colon:
            raise BadEnvelope(f"bad header line {line!r}")
        headers[name.lower()] = value
    if "x-admin-protocol" not in headers:
        raise BadEnvelope("missing X-Admin-Protocol header")
    if headers.get("content-length") != str(len(payload)):
        raise BadEnvelope("content length mismatch")
    try:
        obj = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise BadEnvelope(f"invalid JSON: {e}") from None
    fields = from_json_fields(schema_for(endpoint, response), obj)
    return Envelope(endpoint, headers, payload, response, fields)


# --- compact TLV envelope ---------------------------------------------------------


def _compact_value(kind: str, value) -> bytes:
    if kind in ("bin", "hex"):
        return tlv._tlv(0x04, value)
    if kind == "bins":
        return tlv._tlv(0x30, b"".join(tlv._tlv(0x04, v) for v in value))
    if kind == "str":
        return tlv._tlv(0x0C, value.encode("utf-8"))
    if kind == "int":
        return tlv._tlv(0x02, tlv._uint(value))
    return tlv._tlv(0x0C, json.dumps(value, separators=(",", ":")).encode("utf-8"))


def _compact_parse(kind: str, tag: int, content: bytes):
    want = {"bin": 0x04, "hex": 0x04, "bins": 0x30, "int": 0x02}.get(kind, 0x0C)
    if tag != want:
        raise BadEnvelope(f"compact value tag {tag:#x}, expected {want:#x}")
    if kind in ("bin", "hex"):
        return content
    if kind == "bins":
        items = []
        for t, c in tlv._iter_tlvs(content):
            if t != 0x04:
                raise BadEnvelope("compact list element must be octets")
            items.append(c)
        return items
    if kind == "int":
        return tlv._decode_uint(content)
    try:
        text = content.decode("utf-8")
    except UnicodeDecodeError:
        raise BadEnvelope("compact string is not UTF-8") from None
    if kind == "str":
        return text
    try:
        return _check_header(json.loads(text))
    except json.JSONDecodeError:
        raise BadEnvelope("compact header is not JSON") from None


def encode_compact(endpoint: str, headers: dict[str, str], body: dict, *, response: bool = False) -> bytes:
    protocol = next((v for k, v in headers.items() if k.lower() == "x-admin-protocol"), None)
    if protocol is None:
        raise BadEnvelope("X-Admin-Protocol header is required")
    schema = schema_for(endpoint, response)
    pairs = bytearray()
    for name, value in body.items():
        kind = schema.get(name)
        if kind is None:
            raise BadEnvelope(f"unknown field {name!r}")
        pairs += tlv._tlv(0x31, tlv._tlv(0x0C, name.encode()) + _compact_value(kind, value))
    content = (
        tlv._tlv(0x80, endpoint.encode())
        + tlv._tlv(0x81, b"\xff" if response else b"\x00")
        + tlv._tlv(0x82, protocol.encode())
        + tlv._tlv(0x83, bytes(pairs))
    )
    return tlv._tlv(COMPACT_TAG, content)


def decode_compact(data: bytes, endpoint: str | None = None) -> Envelope:
    try:
        tag, content, end = tlv._read(data, 0)
        if tag != COMPACT_TAG or end != len(data):
            raise BadEnvelope("not a compact envelope")
        parts = list(tlv._iter_tlvs(content))
        if [t for t, _ in parts] != [0x80, 0x81, 0x82, 0x83]:
            raise BadEnvelope("compact envelope needs endpoint, direction, protocol and body")
        ep = parts[0][1].decode("utf-8")
        if parts[1][1] not in (b"\x00", b"\xff"):
            raise BadEnvelope("bad direction flag")
        response = parts[1][1] == b"\xff"
        if endpoint is not None and ep != endpoint:
            raise BadEnvelope(f"endpoint {ep!r} where {endpoint!r} was expected")
        protocol = parts[2][1].decode("utf-8")
        if not protocol:
            raise BadEnvelope("missing X-Admin-Protocol")
        schema = schema_for(ep, response)
        fields = {}
        for t, pair in tlv._iter_tlvs(parts[3][1]):
            items = list(tlv._iter_tlvs(pair))
            if t != 0x31 or len(items) != 2 or items[0][0] != 0x0C:
                raise BadEnvelope("malformed compact field")
            name = items[0][1].decode("utf-8")
            kind = schema.get(name)
            if kind is None or name in fields:
                raise BadEnvelope(f"unknown or repeated field {name!r}")
            fields[name] = _compact_parse(kind, *items[1])
    except (tlv.TlvError, UnicodeDecodeError) as e:
        raise BadEnvelope(f"malformed compact envelope: {e}") from None
    return Envelope(ep, {"x-admin-protocol": protocol}, parts[3][1], response, fields, compact=True)


def encode(endpoint: str, body: dict, *, response: bool = False, compact: bool = False, host: str = "") -> bytes:
    headers = {"X-Admin-Protocol": PROTOCOL}
    if compact:
        return encode_compact(endpoint, headers, body, response=response)
    return encode_envelope(endpoint, headers, body, response=response, host=host)
