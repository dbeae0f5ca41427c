"""SM-DP+: authentication sessions, profile orders, BPP preparation and operator notifications."""

from __future__ import annotations

import enum
import hashlib
import hmac
import logging
import random
from collections.abc import Callable
from dataclasses import dataclass

from rsplab import envelope as env
from rsplab import pki, tlv
from rsplab import secure_channel as sc
from rsplab.envelope import ServiceError
from rsplab.euicc import eid_of
from rsplab.messages import (
    MAX_SEGMENT_PAYLOAD,
    AuthenticateClientError,
    BoundProfilePackage,
    BppCommandId,
    CancelSessionReason,
    CancelSessionResponse,
    CancelSessionResponseOk,
    CtxParams1,
    DeviceInfo,
    EuiccInfo1,
    EuiccInfo2,
    EuiccSigned1,
    GetBoundProfilePackageError,
    InitialiseSecureChannel,
    InitialiseSecureChannelSigned,
    PrepareDownloadResponse,
    PrepareDownloadResponseOk,
    ProfileInstallationResult,
    ProfileMetadata,
    RspCapability,
    ServerSigned1,
    SmdpSigned2,
    compute_hash_cc,
)

log = logging.getLogger(__name__)

DEFAULT_MAX_ATTEMPTS = 3
CC_RETRY_LIMIT = 3


class OrderState(enum.Enum):
    released = "released"
    downloaded = "downloaded"
    installed = "installed"
    error = "error"


TRANSITIONS = {
    OrderState.released: {OrderState.downloaded, OrderState.error},
    OrderState.downloaded: {OrderState.downloaded, OrderState.installed, OrderState.error},
    OrderState.installed: set(),
    OrderState.error: set(),
}


class IllegalTransition(RuntimeError):
    pass


class Stage(enum.IntEnum):
    initiated = 0
    client_authenticated = 1
    bpp_issued = 2
    closed = 3


# cancel reasons after which the order stays available for another attempt
RETRYABLE_CANCEL_REASONS = frozenset(
    {
        CancelSessionReason.postponed,
        CancelSessionReason.timeout,
        CancelSessionReason.sessionAborted,
        CancelSessionReason.loadBppExecutionError,
    }
)


@dataclass
class BoundBpp:
    eid: str
    euicc_otpk: bytes
    binding_txid: bytes
    package: bytes


@dataclass
class ProfileOrder:
    matching_id: str
    iccid: bytes
    metadata: ProfileMetadata
    eid: str | None = None
    state: OrderState = OrderState.released
    download_attempts: int = 0
    max_attempts: int = DEFAULT_MAX_ATTEMPTS
    cc_required: bool = False
    confirmation_code: str | None = None
    cc_failures: int = 0
    bound_bpp: BoundBpp | None = None
    expires_at: int | None = None
    terminated: bool = False
    profile_size: int = 3000
    via_smds: bool = False
    # identifiers of the ES2+.ConfirmOrder call that released this order
    confirm_requester_id: str = "operator-1"
    confirm_call_id: str = ""

    def __post_init__(self):
        if self.cc_required and not self.confirmation_code:
            raise ValueError("an order requiring a confirmation code needs one")
        if not self.confirm_call_id:
            self.confirm_call_id = f"confirm-{self.matching_id or self.iccid.hex()}"

    def transition(self, new: OrderState):
        if new not in TRANSITIONS[self.state]:
            raise IllegalTransition(f"{self.state.value} -> {new.value}")
        self.state = new


@dataclass(frozen=True)
class Es2Notification:
    notification_event: str
    notification_event_status: str
    notification_receiver_identifier: str
    notification_identifier: str
    detail: str | None = None


@dataclass
class SmdpSession:
    transaction_id: bytes
    server_challenge: bytes
    euicc_challenge: bytes
    euicc_info1: EuiccInfo1
    lpa_capability: RspCapability
    ci_pkid_to_be_used: bytes
    stage: Stage = Stage.initiated
    euicc_cert: pki.Certificate | None = None
    eid: str | None = None
    order: ProfileOrder | None = None

    def advance(self, stage: Stage):
        if stage < self.stage:
            raise IllegalTransition(f"session stage {self.stage.name} -> {stage.name}")
        self.stage = stage


def profile_elements(iccid: bytes, size: int) -> bytes:
    """Opaque, deterministic stand-in for the profile's elements."""
    out = bytearray()
    counter = 0
    while len(out) < size:
        out += hashlib.sha256(iccid + counter.to_bytes(4, "big")).digest()
        counter += 1
    return bytes(out[:size])


Eligibility = Callable[[DeviceInfo, EuiccInfo2], bool]


def accept_all(device_info: DeviceInfo, info2: EuiccInfo2) -> bool:
    return True


class SmdpPlus:
    def __init__(
        self,
        address: str,
        *,
        dpauth_keys: pki.KeyPair,
        dpauth_cert: pki.Certificate,
        dppb_keys: pki.KeyPair,
        dppb_cert: pki.Certificate,
        store: pki.TrustStore,
        rng: random.Random,
        chain: list[pki.Certificate] = (),
        eligibility: Eligibility = accept_all,
    ):
        self.address = address
        self.dpauth_keys = dpauth_keys
        self.dpauth_cert = dpauth_cert
        self.dppb_keys = dppb_keys
        self.dppb_cert = dppb_cert
        self.chain = list(chain)
        self.store = store
        self.rng = rng
        self.eligibility = eligibility
        self.orders: dict[str, ProfileOrder] = {}
        self.sessions: dict[bytes, SmdpSession] = {}
        self.operator_log: list[Es2Notification] = []
        self.ds_event_log: list[str] = []
        self.event_log: list[str] = []

    @property
    def oid(self) -> str | None:
        return self.dppb_cert.oid

    def add_order(self, order: ProfileOrder) -> ProfileOrder:
        key = order.matching_id or f"eid:{order.eid}:{order.iccid.hex()}"
        if key in self.orders:
            raise ValueError(f"duplicate order {key!r}")
        self.orders[key] = order
        return order

    def _find_order(self, matching_id: str, eid: str) -> ProfileOrder | None:
        if matching_id:
            return self.orders.get(matching_id)
        # default SM-DP+ flow: the order is looked up by EID
        for order in self.orders.values():
            if not order.matching_id and order.eid == eid and order.state in (
                OrderState.released,
                OrderState.downloaded,
            ):
                return order
        return None

    def _root_id(self) -> bytes:
        return (self.chain[-1] if self.chain else self.dpauth_cert).authority_key_id

    def _notify_operator(self, order: ProfileOrder, event: str, status: str, detail: str | None = None):
        self.operator_log.append(
            Es2Notification(event, status, order.confirm_requester_id, order.confirm_call_id, detail)
        )

    # --- ES9+.InitiateAuthentication -------------------------------------------------------

    def initiate_authentication(
        self, euicc_challenge: bytes, euicc_info1: EuiccInfo1, smdp_address: str, lpa_capability: RspCapability
    ) -> dict:
        if smdp_address != self.address:
            raise ServiceError("invalidSmdpAddress")
        if self._root_id() not in euicc_info1.ci_pkid_list_for_verification:
            if lpa_capability & RspCapability.euiccCiUpdateSupport:
                self.event_log.append("noCommonRoot:euiccCiUpdateSupport")
                log.info("no common root; eUICC CI update requested but not supported here")
            else:
                self.event_log.append("noCommonRoot")
            raise ServiceError("noCommonRoot")
        to_be_used = next(
            (i for i in euicc_info1.ci_pkid_list_for_signing if i in self.store.roots), None
        )
        if to_be_used is None:
            self.event_log.append("noCommonSigningRoot")
            raise ServiceError("noCommonRoot", "no usable signing root")
        txid = self.rng.randbytes(16)
        challenge = self.rng.randbytes(16)
        signed1 = ServerSigned1(
            transaction_id=txid, euicc_challenge=euicc_challenge, server_address=self.address, server_challenge=challenge
        )
        self.sessions[txid] = SmdpSession(
            transaction_id=txid,
            server_challenge=challenge,
            euicc_challenge=euicc_challenge,
            euicc_info1=euicc_info1,
            lpa_capability=lpa_capability,
            ci_pkid_to_be_used=to_be_used,
        )
        body = {
            "transactionId": txid,
            "serverSigned1": tlv.encode_tlv(signed1),
            "serverSignature1": pki.sign(self.dpauth_keys.private_key, tlv.encode_tlv(signed1)),
            "euiccCiPKIdToBeUsed": to_be_used,
            "serverCertificate": tlv.encode_tlv(self.dpauth_cert),
            "otherCertsInChain": [tlv.encode_tlv(c) for c in self.chain],
        }
        both = euicc_info1.euicc_rsp_capability & lpa_capability
        if both & RspCapability.crlStaplingV3Support:
            body["crlList"] = [tlv.encode_tlv(c) for c in self._staple()]
        return body

    def _staple(self) -> list[pki.Crl]:
        crls = []
        for cert in [self.dpauth_cert, *self.chain]:
            if cert.has_crl_distribution_point:
                crl = self.store.crls.get(cert.authority_key_id)
                if crl is not None and crl not in crls:
                    crls.append(crl)
        return crls

    # --- ES9+.AuthenticateClient --------------------------------------------------------------

    def authenticate_client(
        self,
        transaction_id: bytes,
        euicc_signed1: EuiccSigned1,
        euicc_signature1: bytes,
        euicc_certificate: pki.Certificate,
        next_cert: pki.Certificate,
        other_certs=(),
    ) -> dict:
        E = AuthenticateClientError
        s = self.sessions.get(transaction_id)
        if s is None or s.stage != Stage.initiated:
            raise ServiceError(E.invalidTransactionId)

        def fail(code):
            s.advance(Stage.closed)
            return ServiceError(code)

        # the presented chain must link: nextCertInChain is the leaf's issuer
        if next_cert.subject_key_id != euicc_certificate.authority_key_id:
            raise fail(E.eumCertificateInvalid)
        chain = [next_cert, *other_certs]
        path, complete = pki.build_path(euicc_certificate, chain, self.store)
        if complete and path[-1].subject_key_id != s.ci_pkid_to_be_used:
            raise fail(E.ciPKUnknown)
        result = pki.validate_chain(euicc_certificate, chain, self.store)
        if not result.ok:
            leaf = result.failed is None or result.failed.subject_key_id == euicc_certificate.subject_key_id
            expired = result.status is pki.ChainStatus.expired
            if leaf:
                raise fail(E.euiccCertificateExpired if expired else E.euiccCertificateInvalid)
            raise fail(E.eumCertificateExpired if expired else E.eumCertificateInvalid)
        if euicc_certificate.role != pki.Role.euicc or next_cert.role != pki.Role.eum:
            raise fail(E.euiccCertificateInvalid)
        if not pki.verify(
            euicc_certificate.subject_public_key, tlv.encode_tlv(euicc_signed1), euicc_signature1
        ):
            raise fail(E.euiccSignatureInvalid)
        if euicc_signed1.transaction_id != transaction_id:
            raise fail(E.invalidTransactionId)
        if euicc_signed1.server_challenge != s.server_challenge:
            raise fail(E.euiccSignatureInvalid)
        info2 = euicc_signed1.euicc_info2
        if info2.euicc_rsp_capability != s.euicc_info1.euicc_rsp_capability:
            raise fail(E.euiccRspCapabilityHasChanged)
        ctx: CtxParams1 = euicc_signed1.ctx_params1
        if ctx.device_info.lpa_rsp_capability != s.lpa_capability:
            raise fail(E.lpaRspCapabilityHasChanged)

        eid = eid_of(euicc_certificate.subject_public_key)
        s.euicc_cert = euicc_certificate
        s.eid = eid
        order = self._find_order(ctx.matching_id, eid)
        if order is None:
            raise fail(E.matchingIdRefused)
        if order.eid is not None and order.eid != eid:
            raise fail(E.eidMismatch)
        if order.terminated or order.state not in (OrderState.released, OrderState.downloaded):
            raise fail(E.matchingIdRefused)

        order.download_attempts += 1
        if order.download_attempts > order.max_attempts:
            order.terminated = True
            order.transition(OrderState.error)
            self._notify_operator(order, "BPP download", "Failed", "maximum number of download attempts exceeded")
            raise fail(E.undefinedError)
        if not self.eligibility(ctx.device_info, info2):
            order.transition(OrderState.error)
            raise fail(E.noEligibleProfile)

        s.order = order
        s.advance(Stage.client_authenticated)
        hint = None
        if order.bound_bpp is not None and order.bound_bpp.eid == eid:
            hint = order.bound_bpp.euicc_otpk
        signed2 = SmdpSigned2(transaction_id=transaction_id, cc_required_flag=order.cc_required, bpp_euicc_otpk=hint)
        return {
            "transactionId": transaction_id,
            "profileMetadata": tlv.encode_tlv(order.metadata),
            "smdpSigned2": tlv.encode_tlv(signed2),
            "smdpSignature2": pki.sign(self.dppb_keys.private_key, tlv.encode_tlv(signed2)),
            "smdpCertificate": tlv.encode_tlv(self.dppb_cert),
        }

    # --- ES9+.GetBoundProfilePackage --------------------------------------------------------------

    def get_bound_profile_package(self, transaction_id: bytes, response: PrepareDownloadResponseOk) -> bytes:
        E = GetBoundProfilePackageError
        s = self.sessions.get(transaction_id)
        if s is None or s.stage != Stage.client_authenticated:
            raise ServiceError(E.invalidTransactionId)
        order = s.order
        if order.expires_at is not None and self.store.now > order.expires_at:
            s.advance(Stage.closed)
            order.transition(OrderState.error)
            raise ServiceError(E.downloadOrderExpired)
        if not isinstance(response, PrepareDownloadResponseOk):
            raise ServiceError(E.undefinedError, "eUICC reported a download error")
        signed2 = response.euicc_signed2
        if not pki.verify(s.euicc_cert.subject_public_key, tlv.encode_tlv(signed2), response.euicc_signature2):
            raise ServiceError(E.euiccSignatureInvalid)
        if signed2.transaction_id != transaction_id:
            raise ServiceError(E.invalidTransactionId)
        if order.cc_required:
            if signed2.hash_cc is None:
                raise ServiceError(E.confirmationCodeMissing)
            expected = compute_hash_cc(order.confirmation_code, transaction_id)
            if not hmac.compare_digest(expected, signed2.hash_cc):
                order.cc_failures += 1
                if order.cc_failures >= CC_RETRY_LIMIT:
                    s.advance(Stage.closed)
                    order.terminated = True
                    order.transition(OrderState.error)
                    raise ServiceError(E.confirmationCodeRetriesExceeded)
                raise ServiceError(E.confirmationCodeRefused)

        otpk = signed2.euicc_otpk
        bound = order.bound_bpp
        if bound is not None and bound.eid == s.eid and bound.euicc_otpk == otpk:
            self.event_log.append("bpp:reuse")
            package = bound.package
        else:
            self.event_log.append("bpp:rebind" if bound is not None and bound.eid == s.eid else "bpp:create")
            package = self._bind(order, otpk, transaction_id)
            order.bound_bpp = BoundBpp(s.eid, otpk, transaction_id, package)
        order.transition(OrderState.downloaded)
        s.advance(Stage.bpp_issued)
        return package

    def _bind(self, order: ProfileOrder, euicc_otpk: bytes, transaction_id: bytes) -> bytes:
        own = sc.one_time_key(self.rng.randbytes(32))
        key = sc.session_key(own, euicc_otpk, transaction_id)
        signed = InitialiseSecureChannelSigned(
            transaction_id=transaction_id, smdp_otpk=own.public_key, euicc_otpk=euicc_otpk
        )
        isc = InitialiseSecureChannel(
            transaction_id=transaction_id,
            smdp_otpk=own.public_key,
            signature=pki.sign(self.dppb_keys.private_key, tlv.encode_tlv(signed)),
        )
        data = profile_elements(order.iccid, order.profile_size)
        chunks = [data[i : i + MAX_SEGMENT_PAYLOAD] for i in range(0, len(data), MAX_SEGMENT_PAYLOAD)] or [b""]
        bpp = BoundProfilePackage(
            initialise_secure_channel=isc,
            configure_isdp=sc.seal(key, BppCommandId.configureISDP, order.iccid),
            store_metadata=sc.seal(key, BppCommandId.storeMetadata, tlv.encode_tlv(order.metadata)),
            load_profile_elements=tuple(
                sc.seal(key, BppCommandId.loadProfileElements, c, i, len(chunks)) for i, c in enumerate(chunks)
            ),
        )
        return tlv.encode_tlv(bpp)

    # --- ES9+.HandleNotification ---------------------------------------------------------------------

    def handle_notification(self, pir: ProfileInstallationResult) -> None:
        data = pir.data
        s = self.sessions.get(data.transaction_id)
        if s is None or s.order is None or s.euicc_cert is None:
            # unknown transaction: processing ends here, the transport still acknowledges
            self.event_log.append("notification:unknownTransaction")
            return
        if not pki.verify(s.euicc_cert.subject_public_key, tlv.encode_tlv(data), pir.euicc_sign_pir):
            self.event_log.append("notification:badSignature")
            raise ServiceError("invalidSignature", "installation result signature does not verify")
        order = s.order
        s.advance(Stage.closed)
        if order.state is not OrderState.downloaded:
            self.event_log.append("notification:duplicate")
            return
        if pir.succeeded:
            order.transition(OrderState.installed)
            self._notify_operator(order, "BPP installation", "Executed-Success")
        else:
            err = data.final_result
            order.transition(OrderState.error)
            self._notify_operator(
                order,
                "BPP installation",
                "Failed",
                f"{err.bpp_command_id.name}:{err.error_reason.name}",
            )
        if order.via_smds:
            self.delete_ds_event(order.matching_id)

    def delete_ds_event(self, matching_id: str) -> None:
        self.ds_event_log.append(matching_id)

    # --- ES9+.CancelSession ------------------------------------------------------------------------------

    def cancel_session(self, transaction_id: bytes, response) -> None:
        s = self.sessions.get(transaction_id)
        if s is None or s.stage == Stage.closed or s.euicc_cert is None:
            raise ServiceError("invalidTransactionId")
        if not isinstance(response, CancelSessionResponseOk):
            raise ServiceError("cancelSessionError", "eUICC refused to cancel")
        signed = response.euicc_cancel_session_signed
        if not pki.verify(
            s.euicc_cert.subject_public_key, tlv.encode_tlv(signed), response.euicc_cancel_session_signature
        ):
            raise ServiceError("invalidSignature")
        if signed.transaction_id != transaction_id or signed.smdp_oid != (self.dpauth_cert.oid or ""):
            raise ServiceError("invalidInputData", "cancel response not bound to this session")
        s.advance(Stage.closed)
        order = s.order
        self.event_log.append(f"cancel:{signed.reason.name}")
        if order is not None and signed.reason not in RETRYABLE_CANCEL_REASONS:
            if order.state in (OrderState.released, OrderState.downloaded):
                order.transition(OrderState.error)

    # --- ES9+ dispatch -------------------------------------------------------------------------------------

    def handle(self, endpoint: str, f: dict) -> dict:
        dec = tlv.decode_tlv
        try:
            if endpoint == env.INITIATE_AUTHENTICATION:
                return self.initiate_authentication(
                    f["euiccChallenge"],
                    dec(f["euiccInfo1"], EuiccInfo1),
                    f["smdpAddress"],
                    RspCapability(int.from_bytes(f.get("lpaRspCapability", b""), "big")),
                )
            if endpoint == env.AUTHENTICATE_CLIENT:
                return self.authenticate_client(
                    f["transactionId"],
                    dec(f["euiccSigned1"], EuiccSigned1),
                    f["euiccSignature1"],
                    dec(f["euiccCertificate"], pki.Certificate),
                    dec(f["nextCertInChain"], pki.Certificate),
                    [dec(c, pki.Certificate) for c in f.get("otherCertsInChain", [])],
                )
            if endpoint == env.GET_BOUND_PROFILE_PACKAGE:
                bpp = self.get_bound_profile_package(
                    f["transactionId"], dec(f["prepareDownloadResponse"], PrepareDownloadResponse)
                )
                return {"transactionId": f["transactionId"], "boundProfilePackage": bpp}
            if endpoint == env.HANDLE_NOTIFICATION:
                self.handle_notification(dec(f["pendingNotification"], ProfileInstallationResult))
                return {}
            if endpoint == env.CANCEL_SESSION:
                self.cancel_session(f["transactionId"], dec(f["cancelSessionResponse"], CancelSessionResponse))
                return {"transactionId": f["transactionId"]}
        except KeyError as e:
            raise ServiceError(AuthenticateClientError.missingInputData, f"missing {e.args[0]}") from None
        except (tlv.TlvError, ValueError) as e:
            raise ServiceError(AuthenticateClientError.invalidInputData, str(e)) from None
        raise ServiceError("unknownFunction", endpoint)
