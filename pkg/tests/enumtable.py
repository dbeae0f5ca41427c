"""Enumerated wire values, transcribed by hand from the ASN.1 blocks of the source protocol description."""

from rsplab.messages import (
    AuthenticateClientError,
    AuthenticateErrorCode,
    BppCommandId,
    CancelSessionError,
    CancelSessionReason,
    DownloadErrorCode,
    ErrorReason,
    GetBoundProfilePackageError,
)

ENUM_TABLE = {
    AuthenticateErrorCode: [
        ("invalidCertificate", 1), ("invalidSignature", 2), ("unsupportedCurve", 3), ("noSession", 4),
        ("invalidOid", 5), ("euiccChallengeMismatch", 6), ("ciPKUnknown", 7), ("transactionIdError", 8),
        ("missingCrl", 9), ("invalidCrlSignature", 10), ("revokedCert", 11), ("invalidCertOrCrlTime", 12),
        ("invalidCertOrCrlConfiguration", 13), ("invalidIccid", 14), ("undefinedError", 127),
    ],
    CancelSessionReason: [
        ("endUserRejection", 0), ("postponed", 1), ("timeout", 2), ("pprNotAllowed", 3),
        ("metadataMismatch", 4), ("loadBppExecutionError", 5), ("sessionAborted", 16),
        ("enterpriseProfilesNotSupported", 17), ("enterpriseRulesNotAllowed", 18),
        ("enterpriseProfileNotAllowed", 19), ("enterpriseOidMismatch", 20), ("enterpriseRulesError", 21),
        ("enterpriseProfilesOnly", 22), ("lprNotSupported", 23), ("lprNetworkDataNotAllowed", 24),
        ("emptyProfileOrSpName", 25), ("rpmDisabled", 27), ("invalidRpmPackage", 28),
        ("loadRpmPackageError", 29), ("undefinedReason", 127),
    ],
    CancelSessionError: [("invalidTransactionId", 5), ("undefinedError", 127)],
    AuthenticateClientError: [
        ("eumCertificateInvalid", 1), ("eumCertificateExpired", 2), ("euiccCertificateInvalid", 3),
        ("euiccCertificateExpired", 4), ("euiccSignatureInvalid", 5), ("matchingIdRefused", 6),
        ("eidMismatch", 7), ("noEligibleProfile", 8), ("ciPKUnknown", 9), ("invalidTransactionId", 10),
        ("insufficientMemory", 11), ("ciPKMismatch", 12), ("euiccRspCapabilityHasChanged", 13),
        ("lpaRspCapabilityHasChanged", 14), ("deviceChangeNotSupported", 15), ("deviceChangeNotAllowed", 16),
        ("iccidUnkwon", 17), ("invalidInputData", 124), ("missingInputData", 125),
        ("functionProviderBusy", 126), ("undefinedError", 127),
    ],
    DownloadErrorCode: [
        ("invalidCertificate", 1), ("invalidSignature", 2), ("noSession", 4), ("invalidTransactionId", 5),
        ("undefinedError", 127),
    ],
    GetBoundProfilePackageError: [
        ("euiccSignatureInvalid", 1), ("confirmationCodeMissing", 2), ("confirmationCodeRefused", 3),
        ("confirmationCodeRetriesExceeded", 4), ("bppRebindingRefused", 5), ("downloadOrderExpired", 6),
        ("invalidTransactionId", 95), ("invalidInputData", 124), ("missingInputData", 125),
        ("functionProviderBusy", 126), ("undefinedError", 127),
    ],
    BppCommandId: [
        ("initialiseSecureChannel", 0), ("configureISDP", 1), ("storeMetadata", 2), ("storeMetadata2", 3),
        ("replaceSessionKeys", 4), ("loadProfileElements", 5),
    ],
    ErrorReason: [
        ("incorrectInputValues", 1), ("invalidSignature", 2), ("invalidTransactionId", 3),
        ("unsupportedCrtValues", 4), ("unsupportedRemoteOperationType", 5), ("unsupportedProfileClass", 6),
        ("bspStructureError", 7), ("bspSecurityError", 8), ("installFailedDueToIccidAlreadyExistsOnEuicc", 9),
        ("installFailedDueToInsufficientMemoryForProfile", 10), ("installFailedDueToInterruption", 11),
        ("installFailedDueToPEProcessingError", 12), ("installFailedDueToDataMismatch", 13),
        ("testProfileInstallFailedDueToInvalidNaaKey", 14), ("pprNotAllowed", 15),
        ("enterpriseProfilesNotSupported", 17), ("enterpriseRulesNotAllowed", 18),
        ("enterpriseProfileNotAllowed", 19), ("enterpriseOidMismatch", 20), ("enterpriseRulesError", 21),
        ("enterpriseProfilesOnly", 22), ("lprNotSupported", 23), ("unknownTlvInMetadata", 26),
        ("installFailedDueToUnknownError", 127),
    ],
}  # fmt: skip
