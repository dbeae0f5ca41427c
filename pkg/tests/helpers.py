"""Small builders shared by the actor-level tests."""

from __future__ import annotations

import copy

from rsplab import envelope as env
from rsplab import pki, tlv
from rsplab.harness import read_transcript
from rsplab.messages import (
    AuthenticateResponseOk,
    PrepareDownloadRequest,
    RspCapability,
    SmdpSigned2,
)
from rsplab.scenario import ScenarioSpec, World, run_scenario

ICCID = "89049032000000000001"
ICCID2 = "89049032000000000002"
ADDRESS = "smdp.example.com"
LPA_CAPS = RspCapability.crlStaplingV3Support | RspCapability.cancelForEmptySpnPnSupport

BASE = {
    "seed": 7,
    "flow": "download-ac",
    "orders": [{"matchingId": "MATCH-001", "iccid": ICCID}],
}


def spec(**overrides) -> ScenarioSpec:
    obj = copy.deepcopy(BASE)
    obj.update(overrides)
    return ScenarioSpec.from_json(obj)


def world(**overrides) -> World:
    return World(spec(**overrides))


def run(**overrides):
    return run_scenario(spec(**overrides))


# --- driving the actors directly, without the LPA flow ------------------------------------------


def server_init(w: World) -> dict:
    e = w.device.euicc
    challenge = e.get_euicc_challenge()
    return w.smdp.initiate_authentication(challenge, e.get_euicc_info1(), w.smdp.address, LPA_CAPS)


def auth_request(w: World, matching_id: str = "MATCH-001"):
    init = server_init(w)
    req = w.device.lpa.build_authenticate_server_request(w.smdp.address, matching_id, init)
    return req, init


def authenticate(w: World, matching_id: str = "MATCH-001"):
    """Run authenticateServer and authenticateClient; returns (txid, AuthenticateResponseOk, client reply)."""
    req, init = auth_request(w, matching_id)
    ok = w.device.euicc.authenticate_server(req)
    assert isinstance(ok, AuthenticateResponseOk), ok
    client = w.smdp.authenticate_client(
        init["transactionId"],
        ok.euicc_signed1,
        ok.euicc_signature1,
        ok.euicc_certificate,
        ok.next_cert_in_chain,
        ok.other_certs_in_chain,
    )
    return init["transactionId"], ok, client


def prepare_request(client: dict, hash_cc: bytes | None = None) -> PrepareDownloadRequest:
    return PrepareDownloadRequest(
        smdp_signed2=tlv.decode_tlv(client["smdpSigned2"], SmdpSigned2),
        smdp_signature2=client["smdpSignature2"],
        hash_cc=hash_cc,
        smdp_certificate=tlv.decode_tlv(client["smdpCertificate"], pki.Certificate),
    )


# --- transcript inspection ---------------------------------------------------------------------------


def entries(w: World, endpoint_suffix: str, direction: str = "response", faulted: bool | None = None):
    out = []
    for e in w.transport.transcript:
        if e.direction != direction or not e.endpoint.endswith(endpoint_suffix):
            continue
        if faulted is not None and (e.fault_applied is not None) != faulted:
            continue
        out.append(e)
    return out


def wire_fields(entry) -> dict:
    """Decode the envelope bytes of a transcript entry (what actually crossed the wire)."""
    return env.decode_envelope(entry.envelope, entry.endpoint).fields


def load_transcript(path):
    return read_transcript(path)
