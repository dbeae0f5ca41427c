import dataclasses
import random

import pytest
from helpers import ICCID, ICCID2, auth_request, authenticate, prepare_request, world

from rsplab import pki, tlv
from rsplab import secure_channel as sc
from rsplab.euicc import Euicc, eid_of, isdp_aid
from rsplab.messages import (
    AuthenticateErrorCode,
    AuthenticateResponseError,
    AuthenticateResponseOk,
    BoundProfilePackage,
    BppCommandId,
    CancelSessionError,
    CancelSessionReason,
    CancelSessionRequest,
    CancelSessionResponseError,
    CancelSessionResponseOk,
    DownloadErrorCode,
    EimOperation,
    EimOperationType,
    EimResult,
    ErrorReason,
    ErrorResult,
    LoadBppAck,
    PrepareDownloadResponseError,
    PrepareDownloadResponseOk,
    ProfileInstallationResult,
    ProfileState,
    RemoveNotificationResult,
    SuccessResult,
)


def bpp_for(w, matching_id="MATCH-001"):
    txid, _, client = authenticate(w, matching_id)
    pdr = w.device.euicc.prepare_download(prepare_request(client))
    assert isinstance(pdr, PrepareDownloadResponseOk)
    package = w.smdp.get_bound_profile_package(txid, pdr)
    return txid, tlv.decode_tlv(package, BoundProfilePackage)


def load_all(euicc, segments):
    out = None
    for seg in segments:
        out = euicc.load_bpp_segment(tlv.encode_tlv(seg))
        if isinstance(out, ProfileInstallationResult):
            return out
    return out


# --- information and challenges ------------------------------------------------------------------


def test_info1_single_root():
    w = world()
    e = w.device.euicc
    ci_id = w.pki.certs["ci"].subject_key_id
    info = e.get_euicc_info1()
    assert info.ci_pkid_list_for_verification == (ci_id,)
    assert info.ci_pkid_list_for_signing == (ci_id,)


def test_info1_two_verification_roots_one_signing():
    w = world()
    e = w.device.euicc
    k2 = pki.generate_keypair(b"\x02" * 32)
    ci2 = pki.issue_certificate(
        k2, None, serial=99, subject_name="ci2", role=pki.Role.ci, subject_public_key=k2.public_key,
        not_before=0, not_after=2**40,
    )  # fmt: skip
    e.store.add_root(ci2)
    info = e.get_euicc_info1()
    assert set(info.ci_pkid_list_for_verification) == {w.pki.certs["ci"].subject_key_id, ci2.subject_key_id}
    assert info.ci_pkid_list_for_signing == (w.pki.certs["ci"].subject_key_id,)


def test_empty_trust_store_gives_empty_verification_list_and_flow_stops_early():
    w = world()
    e = w.device.euicc
    e.store.roots.clear()
    assert e.get_euicc_info1().ci_pkid_list_for_verification == ()
    report = w.run()
    assert report.outcome == "error" and report.reason == "noAvailableRootId"
    assert not [t for t in w.transport.transcript if t.receiver == w.smdp.address]


def test_challenges_fresh_and_reproducible():
    a, b = world().device.euicc, world().device.euicc
    first = [a.get_euicc_challenge() for _ in range(5)]
    assert first == [b.get_euicc_challenge() for _ in range(5)]
    assert len(set(first)) == 5
    assert a.session.euicc_challenge == first[-1]


def test_thousand_sessions_thousand_distinct_challenges():
    e = world().device.euicc
    assert len({e.get_euicc_challenge() for _ in range(1000)}) == 1000


# --- authenticate_server ---------------------------------------------------------------------------


def test_authenticate_server_ok_signature_verifies():
    w = world()
    req, init = auth_request(w)
    ok = w.device.euicc.authenticate_server(req)
    assert isinstance(ok, AuthenticateResponseOk)
    cert = w.pki.certs["euicc:dev-1"]
    assert pki.verify(cert.subject_public_key, tlv.encode_tlv(ok.euicc_signed1), ok.euicc_signature1)
    assert ok.euicc_signed1.server_challenge == req.server_signed1.server_challenge
    assert ok.euicc_signed1.transaction_id == init["transactionId"]
    assert ok.euicc_signed1.ctx_params1 == req.ctx_params1


def _code(resp):
    assert isinstance(resp, AuthenticateResponseError), resp
    return resp.authenticate_error_code


def test_no_session_without_challenge():
    w = world()
    req, _ = auth_request(w)
    w.device.euicc.session = None
    assert _code(w.device.euicc.authenticate_server(req)) == AuthenticateErrorCode.noSession


def test_challenge_mismatch_when_replayed_into_new_challenge():
    w = world()
    req, _ = auth_request(w)
    w.device.euicc.get_euicc_challenge()
    assert _code(w.device.euicc.authenticate_server(req)) == AuthenticateErrorCode.euiccChallengeMismatch


def test_challenge_is_single_use():
    w = world()
    req, _ = auth_request(w)
    e = w.device.euicc
    assert isinstance(e.authenticate_server(req), AuthenticateResponseOk)
    assert _code(e.authenticate_server(req)) in (AuthenticateErrorCode.noSession, AuthenticateErrorCode.euiccChallengeMismatch)


def test_failed_attempt_also_consumes_challenge():
    w = world()
    req, _ = auth_request(w)
    e = w.device.euicc
    bad = dataclasses.replace(req, server_signature1=bytes(64))
    assert _code(e.authenticate_server(bad)) == AuthenticateErrorCode.invalidSignature
    assert _code(e.authenticate_server(req)) == AuthenticateErrorCode.noSession


def test_unknown_ci_to_be_used():
    w = world()
    req, _ = auth_request(w)
    req = dataclasses.replace(req, euicc_ci_pkid_to_be_used=b"\x11" * 20)
    assert _code(w.device.euicc.authenticate_server(req)) == AuthenticateErrorCode.ciPKUnknown


@pytest.mark.parametrize(
    "defects, expected",
    [
        (("cert", "sig", "challenge"), AuthenticateErrorCode.invalidCertificate),
        (("sig", "challenge", "ci"), AuthenticateErrorCode.invalidSignature),
        (("challenge", "ci", "crl"), AuthenticateErrorCode.euiccChallengeMismatch),
        (("ci", "crl"), AuthenticateErrorCode.ciPKUnknown),
        (("crl",), AuthenticateErrorCode.missingCrl),
    ],
)
def test_error_precedence_with_compound_defects(defects, expected):
    w = world()
    req, _ = auth_request(w)
    e = w.device.euicc
    if "cert" in defects:
        req = dataclasses.replace(req, server_certificate=w.pki.certs["dppb:smdp.example.com"])
    if "sig" in defects:
        req = dataclasses.replace(req, server_signature1=bytes(64))
    if "challenge" in defects:
        # re-sign nothing: a new challenge makes the stored one differ
        e.get_euicc_challenge()
    if "ci" in defects:
        req = dataclasses.replace(req, euicc_ci_pkid_to_be_used=b"\x22" * 20)
    if "crl" in defects:
        req = dataclasses.replace(req, crl_list=())
    assert _code(e.authenticate_server(req)) == expected


def test_stapled_crl_checks():
    w = world()
    req, _ = auth_request(w)
    assert req.crl_stapling_v3_used and req.crl_list
    crl = req.crl_list[0]
    forged = dataclasses.replace(crl, signature=bytes(64))
    assert _code(w.device.euicc.authenticate_server(dataclasses.replace(req, crl_list=(forged,)))) == (
        AuthenticateErrorCode.invalidCrlSignature
    )


def test_stapled_crl_out_of_window():
    w = world()
    req, _ = auth_request(w)
    w.clock.advance(40 * 86400)  # past the CRL's nextUpdate, certificates still valid
    assert _code(w.device.euicc.authenticate_server(req)) == AuthenticateErrorCode.invalidCertOrCrlTime


# --- prepare_download ----------------------------------------------------------------------------------


def test_prepare_download_no_cc():
    w = world()
    _, _, client = authenticate(w)
    resp = w.device.euicc.prepare_download(prepare_request(client))
    assert isinstance(resp, PrepareDownloadResponseOk)
    assert resp.euicc_signed2.hash_cc is None
    assert len(resp.euicc_signed2.euicc_otpk) == 32
    cert = w.pki.certs["euicc:dev-1"]
    assert pki.verify(cert.subject_public_key, tlv.encode_tlv(resp.euicc_signed2), resp.euicc_signature2)


def test_prepare_download_embeds_hash_cc():
    w = world()
    _, _, client = authenticate(w)
    resp = w.device.euicc.prepare_download(prepare_request(client, hash_cc=b"\x07" * 32))
    assert resp.euicc_signed2.hash_cc == b"\x07" * 32


def test_prepare_download_without_session():
    w = world()
    _, _, client = authenticate(w)
    w.device.euicc.session = None
    resp = w.device.euicc.prepare_download(prepare_request(client))
    assert resp.download_error_code == DownloadErrorCode.noSession


def test_prepare_download_txid_mismatch_echoes_session_txid():
    w = world()
    txid, _, client = authenticate(w)
    req = prepare_request(client)
    other = b"\xee" * 16
    signed2 = dataclasses.replace(req.smdp_signed2, transaction_id=other)
    sig = pki.sign(w.pki.keys["dppb:smdp.example.com"].private_key, tlv.encode_tlv(signed2))
    resp = w.device.euicc.prepare_download(dataclasses.replace(req, smdp_signed2=signed2, smdp_signature2=sig))
    assert isinstance(resp, PrepareDownloadResponseError)
    assert resp.download_error_code == DownloadErrorCode.invalidTransactionId
    assert resp.transaction_id == txid


@pytest.mark.parametrize(
    "mutate, code",
    [
        (lambda w, r: dataclasses.replace(r, smdp_certificate=w.pki.certs["dpauth:smdp.example.com"]), 1),
        (lambda w, r: dataclasses.replace(r, smdp_signature2=bytes(64)), 2),
    ],
    ids=["dpauth-as-dppb", "bad-signature"],
)
def test_prepare_download_rejections(mutate, code):
    w = world()
    _, _, client = authenticate(w)
    resp = w.device.euicc.prepare_download(mutate(w, prepare_request(client)))
    assert int(resp.download_error_code) == code


def test_same_entity_rule_requires_equal_oid():
    w = world()
    _, _, client = authenticate(w)
    req = prepare_request(client)
    ci_k, ci = w.pki.keys["ci"], w.pki.certs["ci"]
    dppb = req.smdp_certificate
    other = pki.issue_certificate(
        ci_k, ci, serial=77, subject_name="dppb-other", role=pki.Role.dppb,
        subject_public_key=dppb.subject_public_key, not_before=dppb.not_before, not_after=dppb.not_after,
        oid="1.2.3.4", has_crl_distribution_point=True,
    )  # fmt: skip
    resp = w.device.euicc.prepare_download(dataclasses.replace(req, smdp_certificate=other))
    assert resp.download_error_code == DownloadErrorCode.invalidCertificate


def test_stored_one_time_key_is_reused():
    w = world()
    _, _, client = authenticate(w)
    e = w.device.euicc
    first = e.prepare_download(prepare_request(client)).euicc_signed2.euicc_otpk
    assert first in e.stored_ot_keys
    # next session, with the SM-DP+ hinting at the stored key
    w.smdp.orders["MATCH-001"].bound_bpp = None
    _, _, client = authenticate(w)
    req = prepare_request(client)
    signed2 = dataclasses.replace(req.smdp_signed2, bpp_euicc_otpk=first)
    sig = pki.sign(w.pki.keys["dppb:smdp.example.com"].private_key, tlv.encode_tlv(signed2))
    again = e.prepare_download(dataclasses.replace(req, smdp_signed2=signed2, smdp_signature2=sig))
    assert again.euicc_signed2.euicc_otpk == first


def test_stored_one_time_keys_bounded():
    w = world()
    e = w.device.euicc
    for _ in range(6):
        w.smdp.orders["MATCH-001"].download_attempts = 0
        _, _, client = authenticate(w)
        e.prepare_download(prepare_request(client))
    assert len(e.stored_ot_keys) == 4


# --- BPP loading ---------------------------------------------------------------------------------------


def test_full_bpp_installs_disabled_profile():
    w = world()
    _, bpp = bpp_for(w)
    e = w.device.euicc
    acks = [e.load_bpp_segment(tlv.encode_tlv(s)) for s in bpp.segments()]
    assert all(isinstance(a, LoadBppAck) for a in acks[:-1])
    pir = acks[-1]
    assert isinstance(pir.data.final_result, SuccessResult)
    assert pir.data.final_result.isdp_aid == isdp_aid(bytes.fromhex(ICCID))
    assert len(pir.data.final_result.isdp_aid) == 16
    assert [p.state for p in e.profiles] == [ProfileState.disabled]
    assert pir.data.smdp_oid == w.pki.certs["dppb:smdp.example.com"].oid
    cert = w.pki.certs["euicc:dev-1"]
    assert pki.verify(cert.subject_public_key, tlv.encode_tlv(pir.data), pir.euicc_sign_pir)
    assert len(bpp.load_profile_elements) >= 2  # the default profile does not fit one segment


def test_out_of_order_segment():
    w = world()
    _, bpp = bpp_for(w)
    e = w.device.euicc
    e.load_bpp_segment(tlv.encode_tlv(bpp.initialise_secure_channel))
    pir = e.load_bpp_segment(tlv.encode_tlv(bpp.store_metadata))
    assert pir.data.final_result == ErrorResult(
        bpp_command_id=BppCommandId.storeMetadata, error_reason=ErrorReason.bspStructureError
    )


def test_mac_failure():
    w = world()
    _, bpp = bpp_for(w)
    e = w.device.euicc
    bad = dataclasses.replace(bpp.configure_isdp, mac=bytes(16))
    pir = load_all(e, [bpp.initialise_secure_channel, bad])
    assert pir.data.final_result.error_reason == ErrorReason.bspSecurityError


def test_duplicate_iccid():
    w = world(orders=[{"matchingId": "A", "iccid": ICCID}, {"matchingId": "B", "iccid": ICCID}])
    _, bpp = bpp_for(w, "A")
    assert load_all(w.device.euicc, bpp.segments()).succeeded
    _, bpp = bpp_for(w, "B")
    pir = load_all(w.device.euicc, bpp.segments())
    assert pir.data.final_result.error_reason == ErrorReason.installFailedDueToIccidAlreadyExistsOnEuicc


def test_ppr_violating_rat():
    w = world(orders=[{"matchingId": "MATCH-001", "iccid": ICCID, "pprs": 2}])
    _, bpp = bpp_for(w)
    pir = load_all(w.device.euicc, bpp.segments())
    assert pir.data.final_result.error_reason == ErrorReason.pprNotAllowed


def test_insufficient_memory():
    w = world(devices=[{"id": "dev-1", "freeMemory": 100}])
    _, bpp = bpp_for(w)
    pir = load_all(w.device.euicc, bpp.segments())
    assert pir.data.final_result.error_reason == ErrorReason.installFailedDueToInsufficientMemoryForProfile


def test_wrong_session_key_rejected_at_first_sealed_segment():
    w = world()
    _, bpp = bpp_for(w)
    e = w.device.euicc
    e.load_bpp_segment(tlv.encode_tlv(bpp.initialise_secure_channel))
    forged = sc.seal(b"\x00" * 32, BppCommandId.configureISDP, bpp.configure_isdp.payload)
    pir = e.load_bpp_segment(tlv.encode_tlv(forged))
    assert pir.data.final_result.error_reason == ErrorReason.bspSecurityError


def test_seq_numbers_strictly_increase_across_failures():
    w = world(orders=[{"matchingId": "A", "iccid": ICCID}, {"matchingId": "B", "iccid": ICCID}])
    seqs = []
    for mid in ("A", "B"):
        _, bpp = bpp_for(w, mid)
        seqs.append(load_all(w.device.euicc, bpp.segments()).data.notification_metadata.seq_number)
    assert seqs == [1, 2]
    assert w.device.euicc.next_seq_number == 3


def test_at_most_one_enabled_profile_after_installs():
    w = world(orders=[{"matchingId": "A", "iccid": ICCID}, {"matchingId": "B", "iccid": ICCID2}])
    for mid in ("A", "B"):
        _, bpp = bpp_for(w, mid)
        load_all(w.device.euicc, bpp.segments())
    states = [p.state for p in w.device.euicc.profiles]
    assert len(states) == 2 and states.count(ProfileState.enabled) <= 1


# --- cancel session and notifications --------------------------------------------------------------------


@pytest.mark.parametrize("reason", [CancelSessionReason.sessionAborted, CancelSessionReason.pprNotAllowed])
def test_cancel_session_signed_echo(reason):
    w = world()
    txid, _, _ = authenticate(w)
    e = w.device.euicc
    resp = e.cancel_session(CancelSessionRequest(transaction_id=txid, reason=reason))
    assert isinstance(resp, CancelSessionResponseOk)
    signed = resp.euicc_cancel_session_signed
    assert signed.reason == reason and signed.transaction_id == txid
    assert signed.smdp_oid == w.pki.certs["dpauth:smdp.example.com"].oid
    assert pki.verify(e.certificate.subject_public_key, tlv.encode_tlv(signed), resp.euicc_cancel_session_signature)
    assert e.session is None


def test_cancel_session_stale_txid():
    w = world()
    authenticate(w)
    resp = w.device.euicc.cancel_session(
        CancelSessionRequest(transaction_id=bytes(16), reason=CancelSessionReason.sessionAborted)
    )
    assert resp == CancelSessionResponseError(code=CancelSessionError.invalidTransactionId)


def test_remove_notification():
    w = world(orders=[{"matchingId": "A", "iccid": ICCID}, {"matchingId": "B", "iccid": ICCID2}])
    e = w.device.euicc
    for mid in ("A", "B"):
        _, bpp = bpp_for(w, mid)
        load_all(e, bpp.segments())
    assert list(e.notifications) == [1, 2]
    assert e.remove_notification(1) is RemoveNotificationResult.ok
    assert list(e.notifications) == [2]
    assert e.notifications[2].data.notification_metadata.seq_number == 2
    assert e.remove_notification(1) is RemoveNotificationResult.unknownSeqNumber


# --- eIM configuration ------------------------------------------------------------------------------------


def test_eim_configuration_rules():
    w = world()
    e = w.device.euicc
    data = w.eim.configuration_data()
    assert e.eim_add_config(data) is EimResult.ok
    assert e.eim_config == data
    assert e.eim_add_config(data) is EimResult.alreadyAssociated
    op = EimOperation(operation=EimOperationType.updateEim, counter=1, configuration=data)
    rogue = pki.generate_keypair(b"\x09" * 32)
    forged = w.eim.sign_eim_operation(op)
    forged = dataclasses.replace(forged, signature=pki.sign(rogue.private_key, tlv.encode_tlv(op)))
    assert e.eim_process_signed_op(forged) is EimResult.badSignature
    assert e.eim_process_signed_op(w.eim.sign_eim_operation(op)) is EimResult.ok
    assert e.eim_process_signed_op(w.eim.sign_eim_operation(op)) is EimResult.counterReplay
    tampered = dataclasses.replace(w.eim.sign_eim_operation(op), operation=dataclasses.replace(op, counter=5))
    assert e.eim_process_signed_op(tampered) is EimResult.badSignature
    assert e.eim_remove_config() is EimResult.ok
    assert e.eim_config is None
    assert e.eim_add_config(data) is EimResult.ok


def test_eid_derivation():
    w = world()
    e = w.device.euicc
    assert e.eid == eid_of(e.keys.public_key)
    assert len(e.eid) == 32 and e.eid == e.eid.upper()


def test_standalone_construction_defaults_signing_root():
    w = world()
    e = Euicc(
        w.pki.keys["euicc:dev-1"],
        [w.pki.certs["euicc:dev-1"], w.pki.certs["eum"]],
        w.new_store(),
        rng=random.Random(1),
    )
    assert e.signing_root_ids == [w.pki.certs["ci"].subject_key_id]
