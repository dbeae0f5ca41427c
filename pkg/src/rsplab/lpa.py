"""Local Profile Assistant: drives mutual authentication and profile download.

The LPA talks to the SM-DP+ over ES9+ and to its eUICC over ES10b, both
through the harness transport.  Each protocol step is a separate method so
the IoT profile assistant in :mod:`rsplab.eim` can reuse them when an eIM
drives the SM-DP+ side of the exchange.
"""

from __future__ import annotations

import base64
import enum
import logging
from collections.abc import Callable
from dataclasses import dataclass, field

from rsplab import envelope as env
from rsplab import pki, tlv
from rsplab.harness import Transport, TransportError
from rsplab.messages import (
    ActivationCode,
    AuthenticateResponseError,
    AuthenticateServerRequest,
    AuthenticateServerResponse,
    BadActivationCode,
    BoundProfilePackage,
    BppCommandId,
    CancelSessionReason,
    CancelSessionRequest,
    CtxParams1,
    DeviceCapability,
    DeviceInfo,
    EuiccInfo1,
    InitialiseSecureChannel,
    LoadBppResponse,
    OperationType,
    Ppr,
    PrepareDownloadRequest,
    PrepareDownloadResponse,
    PrepareDownloadResponseError,
    ProfileInfo,
    ProfileInstallationResult,
    ProfileMetadata,
    ProfilesInfo,
    RspCapability,
    RulesAuthorisationTable,
    ServerSigned1,
    SmdpSigned2,
    compute_hash_cc,
    parse_activation_code,
)

log = logging.getLogger(__name__)

ES10B = "/es10b/"


class Consent(enum.Enum):
    accept = "accept"
    reject = "reject"
    postpone = "postpone"


def always_accept(metadata: ProfileMetadata) -> Consent:
    return Consent.accept


@dataclass
class LpaConfig:
    allowed_root_id: bytes | None = None
    default_smdp_address: str | None = None
    consent_hook: Callable[[ProfileMetadata], Consent] = always_accept
    time_check: bool = True
    confirmation_code: str | None = None
    # what to do when the BPP carries different (non-PPR) metadata: "cancel" or "ask"
    on_metadata_change: str = "cancel"
    # whether the SM-DP+ understands the emptyProfileOrSpName cancel reason
    server_supports_empty_name_cancel: bool = True
    device_info: DeviceInfo = field(
        default_factory=lambda: DeviceInfo(
            tac="35290611",
            device_capabilities=DeviceCapability.eutran | DeviceCapability.lprSupport,
            lpa_rsp_capability=RspCapability.crlStaplingV3Support | RspCapability.cancelForEmptySpnPnSupport,
        )
    )

    def __post_init__(self):
        if self.on_metadata_change not in ("cancel", "ask"):
            raise ValueError("on_metadata_change must be 'cancel' or 'ask'")


@dataclass
class FlowReport:
    """Outcome of one flow: installed, authenticated, completed, cancelled or error."""

    outcome: str
    reason: str | None = None
    code: int | str | None = None
    stage: str | None = None
    transaction_id: bytes | None = None
    transcript_ref: str = ""
    cancel_response: bytes | None = None
    iccid: bytes | None = None
    detail: str | None = None

    def to_json(self) -> dict:
        out = {"outcome": self.outcome}
        for key, value in (
            ("reason", self.reason),
            ("code", self.code),
            ("stage", self.stage),
            ("transactionId", self.transaction_id.hex().upper() if self.transaction_id else None),
            ("transcriptRef", self.transcript_ref or None),
            (
                "cancelSessionResponse",
                base64.b64encode(self.cancel_response).decode() if self.cancel_response else None,
            ),
            ("iccid", self.iccid.hex().upper() if self.iccid else None),
            ("detail", self.detail),
        ):
            if value is not None:
                out[key] = value
        return out

    @classmethod
    def from_json(cls, obj: dict) -> FlowReport:
        def unhex(v):
            return bytes.fromhex(v) if v else None

        cancel = obj.get("cancelSessionResponse")
        return cls(
            outcome=obj["outcome"],
            reason=obj.get("reason"),
            code=obj.get("code"),
            stage=obj.get("stage"),
            transaction_id=unhex(obj.get("transactionId")),
            transcript_ref=obj.get("transcriptRef", ""),
            cancel_response=base64.b64decode(cancel) if cancel else None,
            iccid=unhex(obj.get("iccid")),
            detail=obj.get("detail"),
        )

    @property
    def installed(self) -> bool:
        return self.outcome == "installed"


class FlowAbort(Exception):
    def __init__(self, report: FlowReport):
        super().__init__(report.reason)
        self.report = report


def _error(stage: str, reason: str, code=None, txid=None, detail=None) -> FlowAbort:
    return FlowAbort(FlowReport("error", reason=reason, code=code, stage=stage, transaction_id=txid, detail=detail))


@dataclass(frozen=True)
class PeerCapabilities:
    euicc: RspCapability
    lpa: RspCapability
    server_empty_name_cancel: bool = True
    lpr_supported: bool = True

    @property
    def empty_name_cancel(self) -> bool:
        flag = RspCapability.cancelForEmptySpnPnSupport
        return bool(self.euicc & flag and self.lpa & flag and self.server_empty_name_cancel)


def check_profile_rules(
    metadata: ProfileMetadata,
    rat: RulesAuthorisationTable,
    installed: tuple[ProfileInfo, ...] | list[ProfileInfo],
    peers: PeerCapabilities,
) -> CancelSessionReason | None:
    """Profile metadata checks done before asking for consent; the first violation wins."""
    if metadata.pprs and not rat.allows(metadata.pprs):
        return CancelSessionReason.pprNotAllowed
    # every installed profile counts as operational here
    if metadata.pprs & Ppr.ppr1 and installed:
        return CancelSessionReason.pprNotAllowed
    if metadata.lpr_config_present and not peers.lpr_supported:
        return CancelSessionReason.lprNotSupported
    if not metadata.profile_name or not metadata.service_provider_name:
        if peers.empty_name_cancel:
            return CancelSessionReason.emptyProfileOrSpName
        return CancelSessionReason.undefinedReason
    return None


@dataclass
class AuthSession:
    smdp_address: str
    transaction_id: bytes
    euicc_info1: EuiccInfo1
    server_certificate: pki.Certificate
    client_ok: dict


class Lpa:
    def __init__(
        self,
        name: str,
        euicc_address: str,
        transport: Transport,
        config: LpaConfig | None = None,
    ):
        self.name = name
        self.euicc_address = euicc_address
        self.transport = transport
        self.config = config or LpaConfig()
        self.consent_calls = 0
        self.event_log: list[str] = []

    @property
    def now(self) -> int:
        return self.transport.clock.now

    # --- transport helpers ---------------------------------------------------------------

    def es10b(self, function: str, fields: dict | None = None, *, stage: str) -> dict:
        try:
            reply = self.transport.send(self.name, self.euicc_address, ES10B + function, fields or {})
        except TransportError as e:
            raise _error(stage, type(e).__name__, detail=str(e)) from None
        if not env.is_success(reply):
            code, message = env.status_code(reply)
            raise _error(stage, message or "eUICCError", code)
        return reply

    def es9(self, address: str, endpoint: str, fields: dict, *, stage: str) -> dict:
        """Returns the reply, including failed ones; transport failures abort the flow."""
        try:
            return self.transport.send(self.name, address, endpoint, fields)
        except TransportError as e:
            raise _error(stage, type(e).__name__, txid=fields.get("transactionId"), detail=str(e)) from None

    # --- mutual authentication steps ----------------------------------------------------------

    def read_euicc_info(self) -> EuiccInfo1:
        """Fetch EUICCInfo1 and apply the allowed-root restriction."""
        reply = self.es10b("getEuiccInfo1", stage="getEuiccInfo")
        info = self.decode_or_abort(reply["euiccInfo1"], EuiccInfo1, "getEuiccInfo")
        allowed = self.config.allowed_root_id
        if allowed is not None:
            info = EuiccInfo1(
                ci_pkid_list_for_verification=tuple(i for i in info.ci_pkid_list_for_verification if i == allowed),
                ci_pkid_list_for_signing=tuple(i for i in info.ci_pkid_list_for_signing if i == allowed),
                euicc_rsp_capability=info.euicc_rsp_capability,
            )
        if not info.ci_pkid_list_for_verification or not info.ci_pkid_list_for_signing:
            raise _error("initiateAuth", "noAvailableRootId")
        return info

    def euicc_challenge(self) -> bytes:
        return self.es10b("getEuiccChallenge", stage="initiateAuth")["euiccChallenge"]

    def lpa_capability_bytes(self) -> bytes:
        return int(self.config.device_info.lpa_rsp_capability).to_bytes(1, "big")

    def build_authenticate_server_request(
        self,
        smdp_address: str,
        matching_id: str,
        init: dict,
        *,
        oid: str | None = None,
        operation_type: OperationType = OperationType.profileDownload,
    ) -> AuthenticateServerRequest:
        """LPA-side checks on the InitiateAuthentication response, then the ES10b request."""
        stage = "authenticateServer"
        txid = init.get("transactionId")
        try:
            signed1 = tlv.decode_tlv(init["serverSigned1"], ServerSigned1)
            cert = tlv.decode_tlv(init["serverCertificate"], pki.Certificate)
            others = tuple(tlv.decode_tlv(c, pki.Certificate) for c in init.get("otherCertsInChain", []))
            crls = tuple(tlv.decode_tlv(c, pki.Crl) for c in init.get("crlList", []))
            to_be_used = init["euiccCiPKIdToBeUsed"]
            signature = init["serverSignature1"]
        except (KeyError, tlv.TlvError) as e:
            raise _error(stage, "invalidInitiateAuthenticationResponse", txid=txid, detail=str(e)) from None
        if signed1.transaction_id != txid:
            raise _error(stage, "transactionIdMismatch", txid=txid)
        if oid is not None and cert.oid != oid:
            raise _error(stage, "oidMismatch", txid=txid)
        if signed1.server_address != smdp_address:
            raise _error(stage, "serverAddressMismatch", txid=txid)
        allowed = self.config.allowed_root_id
        if allowed is not None and to_be_used != allowed:
            raise _error(stage, "rootNotAllowed", txid=txid)
        if self.config.time_check:
            now = self.now
            if any(not c.not_before <= now <= c.not_after for c in (cert, *others)):
                raise _error(stage, "certificateTimeInvalid", txid=txid)
            if any(not c.this_update <= now <= c.next_update for c in crls):
                raise _error(stage, "crlTimeInvalid", txid=txid)
        ctx = CtxParams1(
            matching_id=matching_id, device_info=self.config.device_info, operation_type=operation_type
        )
        return AuthenticateServerRequest(
            server_signed1=signed1,
            server_signature1=signature,
            euicc_ci_pkid_to_be_used=to_be_used,
            server_certificate=cert,
            ctx_params1=ctx,
            other_certs_in_chain=others,
            crl_list=crls,
            crl_stapling_v3_used="crlList" in init,
        )

    def authenticate_server(self, req: AuthenticateServerRequest) -> bytes:
        reply = self.es10b(
            "authenticateServer", {"authenticateServerRequest": tlv.encode_tlv(req)}, stage="authenticateServer"
        )
        return reply["authenticateServerResponse"]

    def cancel_on_euicc(self, transaction_id: bytes, reason: CancelSessionReason, *, stage: str) -> bytes:
        req = CancelSessionRequest(transaction_id=transaction_id, reason=reason)
        reply = self.es10b("cancelSession", {"cancelSessionRequest": tlv.encode_tlv(req)}, stage=stage)
        return reply["cancelSessionResponse"]

    def run_common_mutual_auth(
        self,
        smdp_address: str,
        matching_id: str = "",
        *,
        oid: str | None = None,
        operation_type: OperationType = OperationType.profileDownload,
    ) -> AuthSession:
        info1 = self.read_euicc_info()
        challenge = self.euicc_challenge()
        try:
            self.transport.connect(self.name, smdp_address)
        except TransportError as e:
            raise _error("initiateAuth", type(e).__name__, detail=str(e)) from None
        init = self.es9(
            smdp_address,
            env.INITIATE_AUTHENTICATION,
            {
                "euiccChallenge": challenge,
                "euiccInfo1": tlv.encode_tlv(info1),
                "smdpAddress": smdp_address,
                "lpaRspCapability": self.lpa_capability_bytes(),
            },
            stage="initiateAuth",
        )
        if not env.is_success(init):
            code, message = env.status_code(init)
            raise _error("initiateAuth", message or "serverError", code)
        txid = init.get("transactionId")
        req = self.build_authenticate_server_request(
            smdp_address, matching_id, init, oid=oid, operation_type=operation_type
        )
        response = self.decode_or_abort(self.authenticate_server(req), AuthenticateServerResponse, "authenticateServer", txid)
        if isinstance(response, AuthenticateResponseError):
            code = response.authenticate_error_code
            raise _error("authenticateServer", code.name, int(code), txid)
        client = self.es9(
            smdp_address,
            env.AUTHENTICATE_CLIENT,
            {
                "transactionId": txid,
                "euiccSigned1": tlv.encode_tlv(response.euicc_signed1),
                "euiccSignature1": response.euicc_signature1,
                "euiccCertificate": tlv.encode_tlv(response.euicc_certificate),
                "nextCertInChain": tlv.encode_tlv(response.next_cert_in_chain),
                "otherCertsInChain": [tlv.encode_tlv(c) for c in response.other_certs_in_chain],
            },
            stage="authenticateClient",
        )
        if not env.is_success(client):
            code, message = env.status_code(client)
            cancel = self.cancel_on_euicc(txid, CancelSessionReason.sessionAborted, stage="authenticateClient")
            raise FlowAbort(
                FlowReport(
                    "cancelled",
                    reason=CancelSessionReason.sessionAborted.name,
                    code=code,
                    stage="authenticateClient",
                    transaction_id=txid,
                    cancel_response=cancel,
                    detail=message,
                )
            )
        if client.get("transactionId") != txid:
            raise _error("authenticateClient", "transactionIdMismatch", txid=txid)
        return AuthSession(smdp_address, txid, info1, req.server_certificate, client)

    @staticmethod
    def decode_or_abort(data: bytes, expected, stage: str, txid=None):
        try:
            return tlv.decode_tlv(data, expected)
        except tlv.TlvError as e:
            raise _error(stage, "malformedResponse", txid=txid, detail=str(e)) from None

    # --- download steps ---------------------------------------------------------------------------

    def peer_capabilities(self, info1: EuiccInfo1) -> PeerCapabilities:
        dev = self.config.device_info
        return PeerCapabilities(
            euicc=info1.euicc_rsp_capability,
            lpa=dev.lpa_rsp_capability,
            server_empty_name_cancel=self.config.server_supports_empty_name_cancel,
            lpr_supported=bool(dev.device_capabilities & DeviceCapability.lprSupport),
        )

    def ask_consent(self, metadata: ProfileMetadata) -> Consent:
        self.consent_calls += 1
        return Consent(self.config.consent_hook(metadata))

    def profile_decision(self, metadata: ProfileMetadata, info1: EuiccInfo1) -> CancelSessionReason | None:
        """Metadata rules, then End User consent; returns a cancel reason or None to proceed."""
        rat = self.es10b("getRat", stage="profileCheck")["rat"]
        rat = self.decode_or_abort(rat, RulesAuthorisationTable, "profileCheck")
        profiles = self.es10b("getProfilesInfo", stage="profileCheck")["profilesInfo"]
        profiles = self.decode_or_abort(profiles, ProfilesInfo, "profileCheck")
        reason = check_profile_rules(metadata, rat, profiles.profiles, self.peer_capabilities(info1))
        if reason is not None:
            return reason
        consent = self.ask_consent(metadata)
        if consent is Consent.reject:
            return CancelSessionReason.endUserRejection
        if consent is Consent.postpone:
            return CancelSessionReason.postponed
        return None

    def prepare_download(self, txid: bytes, signed2: SmdpSigned2, ok: dict) -> bytes:
        hash_cc = None
        if signed2.cc_required_flag and self.config.confirmation_code:
            hash_cc = compute_hash_cc(self.config.confirmation_code, txid)
        req = PrepareDownloadRequest(
            smdp_signed2=signed2,
            smdp_signature2=ok["smdpSignature2"],
            hash_cc=hash_cc,
            smdp_certificate=self.decode_or_abort(ok["smdpCertificate"], pki.Certificate, "prepareDownload", txid),
        )
        reply = self.es10b("prepareDownload", {"prepareDownloadRequest": tlv.encode_tlv(req)}, stage="prepareDownload")
        return reply["prepareDownloadResponse"]

    def check_bpp(self, bpp_bytes: bytes, metadata: ProfileMetadata, txid: bytes):
        """The BPP must carry the metadata shown to the End User.

        Returns (package, cancel_reason_or_None).
        """
        bpp = self.decode_or_abort(bpp_bytes, BoundProfilePackage, "bppCheck", txid)
        try:
            carried = tlv.decode_tlv(bpp.store_metadata.payload, ProfileMetadata)
        except tlv.TlvError:
            return bpp, CancelSessionReason.metadataMismatch
        if carried == metadata:
            return bpp, None
        if carried.pprs != metadata.pprs or self.config.on_metadata_change == "cancel":
            return bpp, CancelSessionReason.metadataMismatch
        consent = self.ask_consent(carried)
        if consent is Consent.reject:
            return bpp, CancelSessionReason.endUserRejection
        if consent is Consent.postpone:
            return bpp, CancelSessionReason.postponed
        return bpp, None

    def load_bpp(self, bpp: BoundProfilePackage, txid: bytes) -> ProfileInstallationResult:
        for segment in bpp.segments():
            reply = self.es10b("loadBoundProfilePackage", {"segment": tlv.encode_tlv(segment)}, stage="loadBpp")
            response = self.decode_or_abort(reply["loadBppResponse"], LoadBppResponse, "loadBpp", txid)
            if isinstance(response, ProfileInstallationResult):
                return response
            sent = (BppCommandId.initialiseSecureChannel, 0) if isinstance(segment, InitialiseSecureChannel) else (
                segment.command_id,
                segment.index,
            )
            if (response.command_id, response.index) != sent:
                raise _error("loadBpp", "unexpectedAck", txid=txid)
        raise _error("loadBpp", "noInstallationResult", txid=txid)

    def common_cancel(self, auth: AuthSession, reason: CancelSessionReason, stage: str) -> FlowReport:
        """Cancel on the eUICC, then let the SM-DP+ close its side with the signed result."""
        txid = auth.transaction_id
        response = self.cancel_on_euicc(txid, reason, stage=stage)
        report = FlowReport(
            "cancelled", reason=reason.name, code=int(reason), stage=stage, transaction_id=txid, cancel_response=response
        )
        reply = self.es9(
            auth.smdp_address,
            env.CANCEL_SESSION,
            {"transactionId": txid, "cancelSessionResponse": response},
            stage=stage,
        )
        if not env.is_success(reply):
            report.detail = f"server cancel failed: {env.status_code(reply)[1]}"
        return report

    def send_notification(self, address: str, pir: ProfileInstallationResult, txid: bytes) -> None:
        """Deliver the result, then drop it from the eUICC list once acknowledged."""
        reply = self.es9(
            address, env.HANDLE_NOTIFICATION, {"pendingNotification": tlv.encode_tlv(pir)}, stage="handleNotification"
        )
        if not env.is_success(reply):
            code, message = env.status_code(reply)
            raise _error("handleNotification", message or "serverError", code, txid)
        seq = pir.data.notification_metadata.seq_number
        result = self.es10b("removeNotificationFromList", {"seqNumber": seq}, stage="removeNotification")
        if result["result"] != 0:
            raise _error("removeNotification", "unknownSeqNumber", result["result"], txid)

    # --- flows ----------------------------------------------------------------------------------------

    def resolve_source(self, source) -> tuple[str, str, str | None]:
        """(smdpAddress, matchingId, oid) from an activation code, 'default', or an explicit pair."""
        if isinstance(source, str) and source != "default":
            source = parse_activation_code(source)
        if isinstance(source, ActivationCode):
            return source.smdp_address, source.matching_id, source.oid
        if source == "default":
            if not self.config.default_smdp_address:
                raise _error("activationCode", "noDefaultSmdpAddress")
            return self.config.default_smdp_address, "", None
        address, matching_id = source
        return address, matching_id, None

    def run_authentication(self, smdp_address: str, matching_id: str = "") -> FlowReport:
        try:
            auth = self.run_common_mutual_auth(smdp_address, matching_id)
        except FlowAbort as abort:
            return abort.report
        return FlowReport("authenticated", transaction_id=auth.transaction_id)

    def run_profile_download(self, source) -> FlowReport:
        try:
            address, matching_id, oid = self.resolve_source(source)
        except BadActivationCode as e:
            return FlowReport("error", reason="BadActivationCode", stage="activationCode", detail=str(e))
        except FlowAbort as abort:
            return abort.report
        try:
            return self._download(address, matching_id, oid)
        except FlowAbort as abort:
            return abort.report

    def _download(self, address: str, matching_id: str, oid: str | None) -> FlowReport:
        auth = self.run_common_mutual_auth(address, matching_id, oid=oid)
        txid = auth.transaction_id
        ok = auth.client_ok
        metadata = self.decode_or_abort(ok["profileMetadata"], ProfileMetadata, "profileCheck", txid)
        signed2 = self.decode_or_abort(ok["smdpSigned2"], SmdpSigned2, "profileCheck", txid)
        if signed2.transaction_id != txid:
            raise _error("profileCheck", "transactionIdMismatch", txid=txid)
        if signed2.rpm_pending:
            self.event_log.append("rpmPending")
            log.info("rpmPending set; follow-up RPM session not executed")

        reason = self.profile_decision(metadata, auth.euicc_info1)
        if reason is not None:
            stage = "consent" if reason in (CancelSessionReason.endUserRejection, CancelSessionReason.postponed) else "profileCheck"
            return self.common_cancel(auth, reason, stage)

        prepared = self.prepare_download(txid, signed2, ok)
        response = self.decode_or_abort(prepared, PrepareDownloadResponse, "prepareDownload", txid)
        reply = self.es9(
            address,
            env.GET_BOUND_PROFILE_PACKAGE,
            {"transactionId": txid, "prepareDownloadResponse": prepared},
            stage="getBpp",
        )
        if isinstance(response, PrepareDownloadResponseError):
            code = response.download_error_code
            raise _error("prepareDownload", code.name, int(code), txid)
        if not env.is_success(reply):
            code, message = env.status_code(reply)
            raise _error("getBpp", message or "serverError", code, txid)
        if reply.get("transactionId") != txid:
            raise _error("getBpp", "transactionIdMismatch", txid=txid)

        bpp, reason = self.check_bpp(reply["boundProfilePackage"], metadata, txid)
        if reason is not None:
            return self.common_cancel(auth, reason, "bppCheck")

        pir = self.load_bpp(bpp, txid)
        self.send_notification(address, pir, txid)
        if pir.succeeded:
            return FlowReport("installed", stage="removeNotification", transaction_id=txid, iccid=metadata.iccid)
        err = pir.data.final_result
        return FlowReport(
            "error",
            reason=err.error_reason.name,
            code=int(err.error_reason),
            stage="loadBpp",
            transaction_id=txid,
            detail=f"bppCommandId={int(err.bpp_command_id)}",
        )
