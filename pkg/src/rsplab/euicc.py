"""Software eUICC: challenges, server authentication, download preparation and BPP installation."""

from __future__ import annotations

import enum
import hashlib
import random
from collections import OrderedDict
from dataclasses import dataclass, field

from rsplab import pki, tlv
from rsplab import secure_channel as sc
from rsplab.envelope import ServiceError
from rsplab.messages import (
    AuthenticateErrorCode,
    AuthenticateResponseError,
    AuthenticateResponseOk,
    AuthenticateServerRequest,
    BppCommandId,
    CancelSessionError,
    CancelSessionRequest,
    CancelSessionResponseError,
    CancelSessionResponseOk,
    DownloadErrorCode,
    EimConfigurationData,
    EimOperationType,
    EimResult,
    ErrorReason,
    ErrorResult,
    EuiccCancelSessionSigned,
    EuiccInfo1,
    EuiccInfo2,
    EuiccSigned1,
    EuiccSigned2,
    InitialiseSecureChannel,
    InitialiseSecureChannelSigned,
    LoadBppAck,
    NotificationMetadata,
    PrepareDownloadRequest,
    PrepareDownloadResponseError,
    PrepareDownloadResponseOk,
    ProfileInfo,
    ProfileInstallationResult,
    ProfileInstallationResultData,
    ProfileMetadata,
    ProfilesInfo,
    ProfileState,
    RemoveNotificationResult,
    RspCapability,
    RulesAuthorisationTable,
    SealedSegment,
    SignedEimOperation,
    SuccessResult,
)

ISDP_RID = bytes.fromhex("A000000559")
MAX_STORED_OT_KEYS = 4
SERVER_ROLES = (pki.Role.dpauth, pki.Role.dsauth)


def eid_of(public_key: bytes) -> str:
    """EID as 32 uppercase hex digits derived from the eUICC signing key."""
    return hashlib.sha256(public_key).digest()[:16].hex().upper()


def isdp_aid(iccid: bytes) -> bytes:
    return ISDP_RID + hashlib.sha256(iccid).digest()[:11]


class BppCursor(enum.Enum):
    awaiting_init = "awaitingInit"
    awaiting_isdp = "awaitingIsdp"
    awaiting_metadata = "awaitingMetadata"
    awaiting_elements = "awaitingElements"
    done = "done"


_EXPECTED = {
    BppCursor.awaiting_init: BppCommandId.initialiseSecureChannel,
    BppCursor.awaiting_isdp: BppCommandId.configureISDP,
    BppCursor.awaiting_metadata: BppCommandId.storeMetadata,
    BppCursor.awaiting_elements: BppCommandId.loadProfileElements,
}


@dataclass
class Session:
    euicc_challenge: bytes
    transaction_id: bytes | None = None
    server_cert: pki.Certificate | None = None
    server_address: str | None = None
    crl_stapling_used: bool = False
    dppb_cert: pki.Certificate | None = None
    ot_key: sc.OneTimeKey | None = None
    binding_txid: bytes | None = None
    session_key: bytes | None = None
    bpp_cursor: BppCursor | None = None
    metadata: ProfileMetadata | None = None
    elements: list[bytes] = field(default_factory=list)


@dataclass
class InstalledProfile:
    iccid: bytes
    metadata: ProfileMetadata
    state: ProfileState = ProfileState.disabled
    isdp_aid: bytes = b""
    size: int = 0


@dataclass
class _StoredOtKey:
    key: sc.OneTimeKey
    binding_txid: bytes


class Euicc:
    """Single-threaded eUICC actor. Public methods map one-to-one onto ES10b functions."""

    def __init__(
        self,
        keys: pki.KeyPair,
        cert_chain: list[pki.Certificate],
        store: pki.TrustStore,
        *,
        rng: random.Random,
        rat: RulesAuthorisationTable = RulesAuthorisationTable(),
        capabilities: RspCapability = RspCapability.crlStaplingV3Support
        | RspCapability.cancelForEmptySpnPnSupport,
        free_memory: int = 1 << 20,
        signing_root_ids: list[bytes] | None = None,
    ):
        self.keys = keys
        self.cert_chain = list(cert_chain)
        self.store = store
        self.rng = rng
        self.rat = rat
        self.capabilities = capabilities
        self.free_memory = free_memory
        self.profiles: list[InstalledProfile] = []
        self.notifications: OrderedDict[int, ProfileInstallationResult] = OrderedDict()
        self.next_seq_number = 1
        self.eim_config: EimConfigurationData | None = None
        self.eim_counter = 0
        self.session: Session | None = None
        self._ot_keys: OrderedDict[bytes, _StoredOtKey] = OrderedDict()
        if signing_root_ids is None:
            signing_root_ids = [self._own_root_id()]
        self.signing_root_ids = list(signing_root_ids)

    # --- identity -----------------------------------------------------------------

    @property
    def certificate(self) -> pki.Certificate:
        return self.cert_chain[0]

    @property
    def eid(self) -> str:
        return eid_of(self.keys.public_key)

    def _own_root_id(self) -> bytes:
        return self.cert_chain[-1].authority_key_id

    def _sign(self, value) -> bytes:
        return pki.sign(self.keys.private_key, tlv.encode_tlv(value))

    # --- information ----------------------------------------------------------------

    def get_euicc_info1(self) -> EuiccInfo1:
        return self.get_euicc_info2().info1()

    def get_euicc_info2(self) -> EuiccInfo2:
        return EuiccInfo2(
            ci_pkid_list_for_verification=tuple(self.store.root_ids),
            ci_pkid_list_for_signing=tuple(self.signing_root_ids),
            euicc_rsp_capability=self.capabilities,
            free_non_volatile_memory=self.free_memory,
            installed_profile_count=len(self.profiles),
        )

    def get_rat(self) -> RulesAuthorisationTable:
        return self.rat

    def get_profiles_info(self) -> ProfilesInfo:
        return ProfilesInfo(
            profiles=tuple(
                ProfileInfo(iccid=p.iccid, profile_name=p.metadata.profile_name, state=p.state)
                for p in self.profiles
            )
        )

    def get_euicc_challenge(self) -> bytes:
        challenge = self.rng.randbytes(16)
        self.session = Session(euicc_challenge=challenge)
        return challenge

    # --- server authentication --------------------------------------------------------

    def authenticate_server(self, req: AuthenticateServerRequest):
        s = self.session
        txid = req.server_signed1.transaction_id

        def fail(code):
            return AuthenticateResponseError(transaction_id=txid, authenticate_error_code=code)

        if s is None or s.transaction_id is not None or s.euicc_challenge is None:
            return fail(AuthenticateErrorCode.noSession)
        # the challenge is single-use whatever the outcome
        challenge = s.euicc_challenge
        s.euicc_challenge = None

        cert = req.server_certificate
        result = pki.validate_chain(cert, req.other_certs_in_chain, self.store)
        if result.status is pki.ChainStatus.revoked:
            return fail(AuthenticateErrorCode.revokedCert)
        if result.status is pki.ChainStatus.expired:
            return fail(AuthenticateErrorCode.invalidCertOrCrlTime)
        if not result.ok or cert.role not in SERVER_ROLES:
            return fail(AuthenticateErrorCode.invalidCertificate)
        signed = tlv.encode_tlv(req.server_signed1)
        if not pki.verify(cert.subject_public_key, signed, req.server_signature1):
            return fail(AuthenticateErrorCode.invalidSignature)
        if req.server_signed1.euicc_challenge != challenge:
            return fail(AuthenticateErrorCode.euiccChallengeMismatch)
        to_be_used = req.euicc_ci_pkid_to_be_used
        if to_be_used and to_be_used not in self.signing_root_ids:
            return fail(AuthenticateErrorCode.ciPKUnknown)
        if req.crl_stapling_v3_used:
            code = self._check_stapled_crls(result.path, req.crl_list)
            if code is not None:
                return fail(code)

        s.transaction_id = txid
        s.server_cert = cert
        s.server_address = req.server_signed1.server_address
        s.crl_stapling_used = req.crl_stapling_v3_used
        signed1 = EuiccSigned1(
            transaction_id=txid,
            server_address=req.server_signed1.server_address,
            server_challenge=req.server_signed1.server_challenge,
            euicc_info2=self.get_euicc_info2(),
            ctx_params1=req.ctx_params1,
        )
        return AuthenticateResponseOk(
            euicc_signed1=signed1,
            euicc_signature1=self._sign(signed1),
            euicc_certificate=self.cert_chain[0],
            next_cert_in_chain=self.cert_chain[1],
            other_certs_in_chain=tuple(self.cert_chain[2:]),
        )

    def _check_stapled_crls(self, path, crls) -> AuthenticateErrorCode | None:
        by_issuer = {c.issuer_key_id: c for c in crls}
        now = self.store.now
        for i, cert in enumerate(path):
            if cert.self_signed or not cert.has_crl_distribution_point:
                continue
            crl = by_issuer.get(cert.authority_key_id)
            if crl is None:
                return AuthenticateErrorCode.missingCrl
            issuer = path[i + 1] if i + 1 < len(path) else None
            if issuer is None or not pki.crl_signature_ok(crl, issuer.subject_public_key):
                return AuthenticateErrorCode.invalidCrlSignature
            if cert.serial in crl.revoked_serials:
                return AuthenticateErrorCode.revokedCert
            if not crl.this_update <= now <= crl.next_update:
                return AuthenticateErrorCode.invalidCertOrCrlTime
        return None

    # --- download preparation -----------------------------------------------------------

    def prepare_download(self, req: PrepareDownloadRequest):
        s = self.session
        if s is None or s.transaction_id is None:
            return PrepareDownloadResponseError(
                transaction_id=req.smdp_signed2.transaction_id, download_error_code=DownloadErrorCode.noSession
            )

        def fail(code):
            return PrepareDownloadResponseError(transaction_id=s.transaction_id, download_error_code=code)

        dppb = req.smdp_certificate
        auth = s.server_cert
        if (
            dppb.role != pki.Role.dppb
            or not pki.validate_chain(dppb, (), self.store).ok
            or dppb.oid != auth.oid
            or dppb.authority_key_id != auth.authority_key_id
        ):
            return fail(DownloadErrorCode.invalidCertificate)
        if not pki.verify(dppb.subject_public_key, tlv.encode_tlv(req.smdp_signed2), req.smdp_signature2):
            return fail(DownloadErrorCode.invalidSignature)
        if req.smdp_signed2.transaction_id != s.transaction_id:
            return fail(DownloadErrorCode.invalidTransactionId)

        hint = req.smdp_signed2.bpp_euicc_otpk
        stored = self._ot_keys.get(hint) if hint else None
        if stored is not None:
            self._ot_keys.move_to_end(hint)
        else:
            stored = _StoredOtKey(sc.one_time_key(self.rng.randbytes(32)), s.transaction_id)
            self._ot_keys[stored.key.public_key] = stored
            while len(self._ot_keys) > MAX_STORED_OT_KEYS:
                self._ot_keys.popitem(last=False)
        s.dppb_cert = dppb
        s.ot_key = stored.key
        s.binding_txid = stored.binding_txid
        s.bpp_cursor = BppCursor.awaiting_init
        s.metadata = None
        s.elements = []
        signed2 = EuiccSigned2(transaction_id=s.transaction_id, euicc_otpk=stored.key.public_key, hash_cc=req.hash_cc)
        return PrepareDownloadResponseOk(euicc_signed2=signed2, euicc_signature2=self._sign(signed2))

    @property
    def stored_ot_keys(self) -> list[bytes]:
        return list(self._ot_keys)

    # --- bound profile package loading -----------------------------------------------------

    def load_bpp_segment(self, segment: bytes):
        """Process one ES8+ command. Returns LoadBppAck or a signed ProfileInstallationResult."""
        s = self.session
        if s is None or s.bpp_cursor in (None, BppCursor.done):
            raise ServiceError("noSession", "no download in progress")
        expected = _EXPECTED[s.bpp_cursor]
        try:
            seg = tlv.decode_tlv(segment, (InitialiseSecureChannel, SealedSegment))
        except tlv.TlvError:
            return self._fail(expected, ErrorReason.bspStructureError)
        command = (
            BppCommandId.initialiseSecureChannel
            if isinstance(seg, InitialiseSecureChannel)
            else seg.command_id
        )
        if command != expected:
            return self._fail(command, ErrorReason.bspStructureError)

        if s.bpp_cursor is BppCursor.awaiting_init:
            return self._initialise(seg)
        if not sc.mac_ok(s.session_key, seg):
            return self._fail(command, ErrorReason.bspSecurityError)
        if s.bpp_cursor is BppCursor.awaiting_isdp:
            s.bpp_cursor = BppCursor.awaiting_metadata
            return LoadBppAck(command_id=command)
        if s.bpp_cursor is BppCursor.awaiting_metadata:
            return self._store_metadata(seg)
        return self._load_element(seg)

    def _initialise(self, isc: InitialiseSecureChannel):
        s = self.session
        signed = InitialiseSecureChannelSigned(
            transaction_id=isc.transaction_id, smdp_otpk=isc.smdp_otpk, euicc_otpk=s.ot_key.public_key
        )
        if not pki.verify(s.dppb_cert.subject_public_key, tlv.encode_tlv(signed), isc.signature):
            return self._fail(BppCommandId.initialiseSecureChannel, ErrorReason.invalidSignature)
        if isc.transaction_id != s.binding_txid:
            return self._fail(BppCommandId.initialiseSecureChannel, ErrorReason.invalidTransactionId)
        s.session_key = sc.session_key(s.ot_key, isc.smdp_otpk, isc.transaction_id)
        s.bpp_cursor = BppCursor.awaiting_isdp
        return LoadBppAck(command_id=BppCommandId.initialiseSecureChannel)

    def _store_metadata(self, seg: SealedSegment):
        s = self.session
        try:
            metadata = tlv.decode_tlv(seg.payload, ProfileMetadata)
        except tlv.TlvError:
            return self._fail(BppCommandId.storeMetadata, ErrorReason.unknownTlvInMetadata)
        s.metadata = metadata
        if any(p.iccid == metadata.iccid for p in self.profiles):
            return self._fail(BppCommandId.storeMetadata, ErrorReason.installFailedDueToIccidAlreadyExistsOnEuicc)
        if metadata.pprs and not self.rat.allows(metadata.pprs):
            return self._fail(BppCommandId.storeMetadata, ErrorReason.pprNotAllowed)
        s.bpp_cursor = BppCursor.awaiting_elements
        return LoadBppAck(command_id=BppCommandId.storeMetadata)

    def _load_element(self, seg: SealedSegment):
        s = self.session
        if seg.index != len(s.elements) or seg.total < 1 or seg.index >= seg.total:
            return self._fail(BppCommandId.loadProfileElements, ErrorReason.bspStructureError)
        s.elements.append(seg.payload)
        if len(s.elements) < seg.total:
            return LoadBppAck(command_id=BppCommandId.loadProfileElements, index=seg.index)
        size = sum(map(len, s.elements))
        if size > self.free_memory:
            return self._fail(
                BppCommandId.loadProfileElements, ErrorReason.installFailedDueToInsufficientMemoryForProfile
            )
        md = s.metadata
        aid = isdp_aid(md.iccid)
        self.profiles.append(InstalledProfile(iccid=md.iccid, metadata=md, isdp_aid=aid, size=size))
        self.free_memory -= size
        # a consumed one-time key is never offered again
        self._ot_keys.pop(s.ot_key.public_key, None)
        return self._result(SuccessResult(isdp_aid=aid, ppi_response=b""))

    def _fail(self, command: BppCommandId, reason: ErrorReason) -> ProfileInstallationResult:
        return self._result(ErrorResult(bpp_command_id=command, error_reason=reason))

    def _result(self, final) -> ProfileInstallationResult:
        s = self.session
        seq = self.next_seq_number
        self.next_seq_number += 1
        data = ProfileInstallationResultData(
            transaction_id=s.transaction_id,
            notification_metadata=NotificationMetadata(
                seq_number=seq, iccid=s.metadata.iccid if s.metadata else None
            ),
            smdp_oid=s.dppb_cert.oid or "",
            final_result=final,
        )
        pir = ProfileInstallationResult(data=data, euicc_sign_pir=self._sign(data))
        self.notifications[seq] = pir
        s.bpp_cursor = BppCursor.done
        return pir

    # --- cancel and notifications ---------------------------------------------------------------

    def cancel_session(self, req: CancelSessionRequest):
        s = self.session
        if s is None or s.transaction_id is None or s.transaction_id != req.transaction_id:
            return CancelSessionResponseError(code=CancelSessionError.invalidTransactionId)
        signed = EuiccCancelSessionSigned(
            transaction_id=req.transaction_id, smdp_oid=s.server_cert.oid or "", reason=req.reason
        )
        self.session = None
        return CancelSessionResponseOk(euicc_cancel_session_signed=signed, euicc_cancel_session_signature=self._sign(signed))

    def remove_notification(self, seq_number: int) -> RemoveNotificationResult:
        if self.notifications.pop(seq_number, None) is None:
            return RemoveNotificationResult.unknownSeqNumber
        return RemoveNotificationResult.ok

    # --- eIM configuration -------------------------------------------------------------------------

    def eim_add_config(self, data: EimConfigurationData) -> EimResult:
        if self.eim_config is not None:
            return EimResult.alreadyAssociated
        self.eim_config = data
        self.eim_counter = 0
        return EimResult.ok

    def eim_process_signed_op(self, signed: SignedEimOperation) -> EimResult:
        if self.eim_config is None:
            return EimResult.notAssociated
        op = signed.operation
        if not pki.verify(self.eim_config.eim_public_key, tlv.encode_tlv(op), signed.signature):
            return EimResult.badSignature
        if op.counter <= self.eim_counter:
            return EimResult.counterReplay
        if op.operation == EimOperationType.addEim:
            return EimResult.alreadyAssociated
        self.eim_counter = op.counter
        if op.operation == EimOperationType.deleteEim:
            self.eim_config = None
            self.eim_counter = 0
        else:
            if op.configuration is None:
                return EimResult.badSignature
            self.eim_config = op.configuration
        return EimResult.ok

    def eim_remove_config(self) -> EimResult:
        self.eim_config = None
        self.eim_counter = 0
        return EimResult.ok

    # --- ES10b dispatch ---------------------------------------------------------------------------------

    def handle(self, endpoint: str, fields: dict) -> dict:
        name = endpoint.rsplit("/", 1)[-1]
        enc = tlv.encode_tlv
        try:
            if name == "getEuiccInfo1":
                return {"euiccInfo1": enc(self.get_euicc_info1())}
            if name == "getEuiccChallenge":
                return {"euiccChallenge": self.get_euicc_challenge()}
            if name == "authenticateServer":
                req = tlv.decode_tlv(fields["authenticateServerRequest"], AuthenticateServerRequest)
                return {"authenticateServerResponse": enc(self.authenticate_server(req))}
            if name == "prepareDownload":
                req = tlv.decode_tlv(fields["prepareDownloadRequest"], PrepareDownloadRequest)
                return {"prepareDownloadResponse": enc(self.prepare_download(req))}
            if name == "loadBoundProfilePackage":
                return {"loadBppResponse": enc(self.load_bpp_segment(fields["segment"]))}
            if name == "cancelSession":
                req = tlv.decode_tlv(fields["cancelSessionRequest"], CancelSessionRequest)
                return {"cancelSessionResponse": enc(self.cancel_session(req))}
            if name == "getRat":
                return {"rat": enc(self.get_rat())}
            if name == "getProfilesInfo":
                return {"profilesInfo": enc(self.get_profiles_info())}
            if name == "removeNotificationFromList":
                return {"result": int(self.remove_notification(fields["seqNumber"]))}
            if name == "addEimConfiguration":
                data = tlv.decode_tlv(fields["eimConfigurationData"], EimConfigurationData)
                return {"result": int(self.eim_add_config(data))}
            if name == "eimOperation":
                op = tlv.decode_tlv(fields["signedOperation"], SignedEimOperation)
                return {"result": int(self.eim_process_signed_op(op))}
            if name == "removeEimConfiguration":
                return {"result": int(self.eim_remove_config())}
        except KeyError as e:
            raise ServiceError(125, f"missingInputData: {e.args[0]}") from None
        except tlv.TlvError as e:
            raise ServiceError(124, f"invalidInputData: {e}") from None
        raise ServiceError("unknownFunction", endpoint)

