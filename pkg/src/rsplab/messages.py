"""Protocol message types, result-code enumerations and activation codes.

Enumeration values are the numbers printed in the ASN.1 definitions of
SGP.22; the member names keep the ASN.1 spelling so they can be matched
against traces by eye.
"""

from __future__ import annotations

import enum
import hashlib
import re
from dataclasses import dataclass

from rsplab import tlv
from rsplab.pki import Certificate, Crl

# --- enumerations -------------------------------------------------------------


class AuthenticateErrorCode(enum.IntEnum):
    invalidCertificate = 1
    invalidSignature = 2
    unsupportedCurve = 3
    noSession = 4
    invalidOid = 5
    euiccChallengeMismatch = 6
    ciPKUnknown = 7
    transactionIdError = 8
    missingCrl = 9
    invalidCrlSignature = 10
    revokedCert = 11
    invalidCertOrCrlTime = 12
    invalidCertOrCrlConfiguration = 13
    invalidIccid = 14
    undefinedError = 127


class CancelSessionReason(enum.IntEnum):
    endUserRejection = 0
    postponed = 1
    timeout = 2
    pprNotAllowed = 3
    metadataMismatch = 4
    loadBppExecutionError = 5
    sessionAborted = 16
    enterpriseProfilesNotSupported = 17
    enterpriseRulesNotAllowed = 18
    enterpriseProfileNotAllowed = 19
    enterpriseOidMismatch = 20
    enterpriseRulesError = 21
    enterpriseProfilesOnly = 22
    lprNotSupported = 23
    lprNetworkDataNotAllowed = 24
    emptyProfileOrSpName = 25
    rpmDisabled = 27
    invalidRpmPackage = 28
    loadRpmPackageError = 29
    undefinedReason = 127


class CancelSessionError(enum.IntEnum):
    invalidTransactionId = 5
    undefinedError = 127


class AuthenticateClientError(enum.IntEnum):
    eumCertificateInvalid = 1
    eumCertificateExpired = 2
    euiccCertificateInvalid = 3
    euiccCertificateExpired = 4
    euiccSignatureInvalid = 5
    matchingIdRefused = 6
    eidMismatch = 7
    noEligibleProfile = 8
    ciPKUnknown = 9
    invalidTransactionId = 10
    insufficientMemory = 11
    ciPKMismatch = 12
    euiccRspCapabilityHasChanged = 13
    lpaRspCapabilityHasChanged = 14
    deviceChangeNotSupported = 15
    deviceChangeNotAllowed = 16
    iccidUnkwon = 17
    invalidInputData = 124
    missingInputData = 125
    functionProviderBusy = 126
    undefinedError = 127


class DownloadErrorCode(enum.IntEnum):
    invalidCertificate = 1
    invalidSignature = 2
    noSession = 4
    invalidTransactionId = 5
    undefinedError = 127


class GetBoundProfilePackageError(enum.IntEnum):
    euiccSignatureInvalid = 1
    confirmationCodeMissing = 2
    confirmationCodeRefused = 3
    confirmationCodeRetriesExceeded = 4
    bppRebindingRefused = 5
    downloadOrderExpired = 6
    invalidTransactionId = 95
    invalidInputData = 124
    missingInputData = 125
    functionProviderBusy = 126
    undefinedError = 127


class BppCommandId(enum.IntEnum):
    initialiseSecureChannel = 0
    configureISDP = 1
    storeMetadata = 2
    storeMetadata2 = 3
    replaceSessionKeys = 4
    loadProfileElements = 5


class ErrorReason(enum.IntEnum):
    incorrectInputValues = 1
    invalidSignature = 2
    invalidTransactionId = 3
    unsupportedCrtValues = 4
    unsupportedRemoteOperationType = 5
    unsupportedProfileClass = 6
    bspStructureError = 7
    bspSecurityError = 8
    installFailedDueToIccidAlreadyExistsOnEuicc = 9
    installFailedDueToInsufficientMemoryForProfile = 10
    installFailedDueToInterruption = 11
    installFailedDueToPEProcessingError = 12
    installFailedDueToDataMismatch = 13
    testProfileInstallFailedDueToInvalidNaaKey = 14
    pprNotAllowed = 15
    enterpriseProfilesNotSupported = 17
    enterpriseRulesNotAllowed = 18
    enterpriseProfileNotAllowed = 19
    enterpriseOidMismatch = 20
    enterpriseRulesError = 21
    enterpriseProfilesOnly = 22
    lprNotSupported = 23
    unknownTlvInMetadata = 26
    installFailedDueToUnknownError = 127


class RspCapability(enum.IntFlag):
    """Capability bits shared by euiccRspCapability and lpaRspCapability."""

    crlStaplingV3Support = 1
    euiccCiUpdateSupport = 2
    cancelForEmptySpnPnSupport = 4


class DeviceCapability(enum.IntFlag):
    eutran = 1
    nr = 2
    lprSupport = 4


class Ppr(enum.IntFlag):
    ppr1 = 1
    ppr2 = 2


class OperationType(enum.IntEnum):
    profileDownload = 0
    rpm = 1


class ProfileState(enum.IntEnum):
    disabled = 0
    enabled = 1


class EimOperationType(enum.IntEnum):
    addEim = 0
    updateEim = 1
    deleteEim = 2


class EimResult(enum.IntEnum):
    ok = 0
    alreadyAssociated = 1
    badSignature = 2
    notAssociated = 3
    counterReplay = 4


class RemoveNotificationResult(enum.IntEnum):
    ok = 0
    unknownSeqNumber = 1


# --- authentication -----------------------------------------------------------


@tlv.message(0x30)
class EuiccInfo1:
    ci_pkid_list_for_verification: tuple[bytes, ...] = tlv.field(size=20, default=())
    ci_pkid_list_for_signing: tuple[bytes, ...] = tlv.field(size=20, default=())
    euicc_rsp_capability: RspCapability = RspCapability(0)


@tlv.message(0x31)
class EuiccInfo2:
    ci_pkid_list_for_verification: tuple[bytes, ...] = tlv.field(size=20, default=())
    ci_pkid_list_for_signing: tuple[bytes, ...] = tlv.field(size=20, default=())
    euicc_rsp_capability: RspCapability = RspCapability(0)
    svn: bytes = tlv.field(size=3, default=b"\x02\x05\x00")
    free_non_volatile_memory: int = 0
    installed_profile_count: int = 0

    def info1(self) -> EuiccInfo1:
        return EuiccInfo1(
            ci_pkid_list_for_verification=self.ci_pkid_list_for_verification,
            ci_pkid_list_for_signing=self.ci_pkid_list_for_signing,
            euicc_rsp_capability=self.euicc_rsp_capability,
        )


@tlv.message(0x32)
class DeviceInfo:
    tac: str = "35290611"
    device_capabilities: DeviceCapability = DeviceCapability.eutran
    lpa_rsp_capability: RspCapability = RspCapability(0)


@tlv.message(0x33)
class CtxParams1:
    matching_id: str = ""
    device_info: DeviceInfo
    operation_type: OperationType = OperationType.profileDownload


@tlv.message(0x34)
class ServerSigned1:
    transaction_id: bytes = tlv.field(size=16)
    euicc_challenge: bytes = tlv.field(size=16)
    server_address: str
    server_challenge: bytes = tlv.field(size=16)


@tlv.message(0x35)
class EuiccSigned1:
    transaction_id: bytes = tlv.field(size=16)
    server_address: str
    server_challenge: bytes = tlv.field(size=16)
    euicc_info2: EuiccInfo2
    ctx_params1: CtxParams1


@tlv.message(0x36)
class AuthenticateServerRequest:
    server_signed1: ServerSigned1
    server_signature1: bytes = tlv.field(size=64)
    euicc_ci_pkid_to_be_used: bytes | None = tlv.field(size=(0, 20), default=None)
    server_certificate: Certificate
    ctx_params1: CtxParams1
    other_certs_in_chain: tuple[Certificate, ...] = ()
    crl_list: tuple[Crl, ...] = ()
    crl_stapling_v3_used: bool = False


@tlv.message(0x37)
class AuthenticateResponseOk:
    euicc_signed1: EuiccSigned1
    euicc_signature1: bytes = tlv.field(size=64)
    euicc_certificate: Certificate
    next_cert_in_chain: Certificate
    other_certs_in_chain: tuple[Certificate, ...] = ()


@tlv.message(0x38)
class AuthenticateResponseError:
    transaction_id: bytes | None = tlv.field(size=16, default=None)
    authenticate_error_code: AuthenticateErrorCode


AuthenticateServerResponse = (AuthenticateResponseOk, AuthenticateResponseError)


# --- download -----------------------------------------------------------------


@tlv.message(0x39)
class SmdpSigned2:
    transaction_id: bytes = tlv.field(size=16)
    cc_required_flag: bool
    bpp_euicc_otpk: bytes | None = tlv.field(size=32, default=None)
    rpm_pending: bool = False


@tlv.message(0x3A)
class PrepareDownloadRequest:
    smdp_signed2: SmdpSigned2
    smdp_signature2: bytes = tlv.field(size=64)
    hash_cc: bytes | None = tlv.field(size=32, default=None)
    smdp_certificate: Certificate


@tlv.message(0x3B)
class EuiccSigned2:
    transaction_id: bytes = tlv.field(size=16)
    euicc_otpk: bytes = tlv.field(size=32)
    hash_cc: bytes | None = tlv.field(size=32, default=None)


@tlv.message(0x3C)
class PrepareDownloadResponseOk:
    euicc_signed2: EuiccSigned2
    euicc_signature2: bytes = tlv.field(size=64)


@tlv.message(0x3D)
class PrepareDownloadResponseError:
    transaction_id: bytes = tlv.field(size=16)
    download_error_code: DownloadErrorCode


PrepareDownloadResponse = (PrepareDownloadResponseOk, PrepareDownloadResponseError)


@tlv.message(0x3E)
class ProfileMetadata:
    iccid: bytes = tlv.field(size=10)
    profile_name: str = ""
    service_provider_name: str = ""
    pprs: Ppr = Ppr(0)
    lpr_config_present: bool = False


@tlv.message(0x3F)
class RulesAuthorisationTable:
    """Permitted PPR sets; a profile's PPRs are allowed when every bit is covered."""

    rules: tuple[Ppr, ...] = ()

    def allows(self, pprs: Ppr) -> bool:
        covered = Ppr(0)
        for r in self.rules:
            covered |= r
        return not (pprs & ~covered)


@tlv.message(0x40)
class InitialiseSecureChannel:
    transaction_id: bytes = tlv.field(size=16)
    smdp_otpk: bytes = tlv.field(size=32)
    signature: bytes = tlv.field(size=64)


@tlv.message(0x41)
class InitialiseSecureChannelSigned:
    """What the SM-DP+ actually signs: the channel parameters bound to the eUICC key."""

    transaction_id: bytes = tlv.field(size=16)
    smdp_otpk: bytes = tlv.field(size=32)
    euicc_otpk: bytes = tlv.field(size=32)


MAX_SEGMENT_PAYLOAD = 1024


@tlv.message(0x42)
class SealedSegment:
    command_id: BppCommandId
    index: int = 0
    total: int = 1
    payload: bytes = tlv.field(max_size=MAX_SEGMENT_PAYLOAD)
    mac: bytes = tlv.field(size=16)

    def mac_input(self) -> bytes:
        return tlv.encode_signed_part(self, "mac")


@tlv.message(0x43)
class BoundProfilePackage:
    initialise_secure_channel: InitialiseSecureChannel
    configure_isdp: SealedSegment
    store_metadata: SealedSegment
    load_profile_elements: tuple[SealedSegment, ...]

    def segments(self) -> list:
        return [
            self.initialise_secure_channel,
            self.configure_isdp,
            self.store_metadata,
            *self.load_profile_elements,
        ]


BppSegment = (InitialiseSecureChannel, SealedSegment)


@tlv.message(0x44)
class LoadBppAck:
    command_id: BppCommandId
    index: int = 0


@tlv.message(0x45)
class NotificationMetadata:
    seq_number: int
    iccid: bytes | None = tlv.field(size=10, default=None)


@tlv.message(0x46)
class SuccessResult:
    isdp_aid: bytes = tlv.field(size=(5, 16))
    ppi_response: bytes = b""


@tlv.message(0x47)
class ErrorResult:
    bpp_command_id: BppCommandId
    error_reason: ErrorReason
    ppi_response: bytes | None = None


@tlv.message(0x48)
class ProfileInstallationResultData:
    transaction_id: bytes = tlv.field(size=16)
    notification_metadata: NotificationMetadata
    smdp_oid: str
    final_result: SuccessResult | ErrorResult


@tlv.message(0x49)
class ProfileInstallationResult:
    data: ProfileInstallationResultData
    euicc_sign_pir: bytes = tlv.field(size=64)

    @property
    def succeeded(self) -> bool:
        return isinstance(self.data.final_result, SuccessResult)


LoadBppResponse = (LoadBppAck, ProfileInstallationResult)


# --- cancel session -------------------------------------------------------------


@tlv.message(0x4A)
class CancelSessionRequest:
    transaction_id: bytes = tlv.field(size=16)
    reason: CancelSessionReason


@tlv.message(0x4B)
class EuiccCancelSessionSigned:
    transaction_id: bytes = tlv.field(size=16)
    smdp_oid: str
    reason: CancelSessionReason


@tlv.message(0x4C)
class CancelSessionResponseOk:
    euicc_cancel_session_signed: EuiccCancelSessionSigned
    euicc_cancel_session_signature: bytes = tlv.field(size=64)


@tlv.message(0x4D)
class CancelSessionResponseError:
    code: CancelSessionError


CancelSessionResponse = (CancelSessionResponseOk, CancelSessionResponseError)


# --- eIM configuration and profile inventory -------------------------------------


@tlv.message(0x4E)
class EimConfigurationData:
    eim_id: str
    eim_public_key: bytes = tlv.field(size=32)
    eim_address: str


@tlv.message(0x4F)
class EimOperation:
    operation: EimOperationType
    counter: int = 0
    configuration: EimConfigurationData | None = None


@tlv.message(0x50)
class SignedEimOperation:
    operation: EimOperation
    signature: bytes = tlv.field(size=64)


@tlv.message(0x51)
class ProfileInfo:
    iccid: bytes = tlv.field(size=10)
    profile_name: str = ""
    state: ProfileState = ProfileState.disabled


@tlv.message(0x52)
class ProfilesInfo:
    profiles: tuple[ProfileInfo, ...] = ()


# --- activation code and confirmation code ------------------------------------------


class BadActivationCode(ValueError):
    pass


class EmptyCode(ValueError):
    pass


_VERSION = re.compile(r"0|[1-9][0-9]*")


@dataclass(frozen=True)
class ActivationCode:
    smdp_address: str
    matching_id: str
    oid: str | None = None
    version: int = 1

    def render(self) -> str:
        parts = [f"LPA:{self.version}", self.smdp_address, self.matching_id]
        if self.oid is not None:
            parts.append(self.oid)
        return "$".join(parts)

    def __str__(self):
        return self.render()


def parse_activation_code(text: str) -> ActivationCode:
    """Parse ``LPA:<version>$<smdpAddress>$<matchingId>[$<oid>]``."""
    if not text.startswith("LPA:"):
        raise BadActivationCode("missing 'LPA:' prefix")
    parts = text[4:].split("$")
    if len(parts) not in (3, 4):
        raise BadActivationCode(f"expected 3 or 4 '$'-separated fields, got {len(parts)}")
    version, address, matching_id = parts[:3]
    if not _VERSION.fullmatch(version):
        raise BadActivationCode(f"bad version {version!r}")
    if not address:
        raise BadActivationCode("empty SM-DP+ address")
    if not matching_id:
        raise BadActivationCode("empty matching id")
    oid = parts[3] if len(parts) == 4 else None
    if oid == "":
        raise BadActivationCode("empty oid field")
    return ActivationCode(smdp_address=address, matching_id=matching_id, oid=oid, version=int(version))


def compute_hash_cc(confirmation_code: str, transaction_id: bytes) -> bytes:
    """SHA-256(SHA-256(code) || transactionId)."""
    if not confirmation_code:
        raise EmptyCode("confirmation code must not be empty")
    inner = hashlib.sha256(confirmation_code.encode("utf-8")).digest()
    return hashlib.sha256(inner + transaction_id).digest()
