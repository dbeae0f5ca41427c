"""eSIM IoT remote Manager and the IoT Profile Assistant it talks to over ESipa.

The eIM never holds any secret of the eUICC or the SM-DP+.  In assisted
download it owns the ES9+ exchange and forwards the signed payloads to the
device unchanged; only the envelope around them is rebuilt, in whichever
form (JSON or compact TLV) the device was registered with.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass

from rsplab import envelope as env
from rsplab import pki, tlv
from rsplab.harness import Transport, TransportError
from rsplab.lpa import FlowAbort, FlowReport, Lpa, _error
from rsplab.messages import (
    ActivationCode,
    AuthenticateResponseError,
    AuthenticateServerResponse,
    BadActivationCode,
    CancelSessionReason,
    CancelSessionResponse,
    CancelSessionResponseOk,
    EimConfigurationData,
    EimOperation,
    EimOperationType,
    EimResult,
    EuiccInfo1,
    PrepareDownloadResponse,
    PrepareDownloadResponseError,
    ProfileInstallationResult,
    ProfileMetadata,
    SignedEimOperation,
    SmdpSigned2,
    parse_activation_code,
)

ESIPA = "/esipa/"

# fields of the ES9+ InitiateAuthentication response relayed to the IPA
_INIT_RELAY = (
    "transactionId",
    "serverSigned1",
    "serverSignature1",
    "euiccCiPKIdToBeUsed",
    "serverCertificate",
    "otherCertsInChain",
    "crlList",
)


class TransportMode(enum.Enum):
    json_envelope = "jsonEnvelope"
    compact_tlv = "compactTlv"


@dataclass(frozen=True)
class IpaEndpoint:
    device_id: str
    address: str
    transport_mode: TransportMode = TransportMode.json_envelope


def _service_error(abort: FlowAbort) -> env.ServiceError:
    r = abort.report
    return env.ServiceError(r.code if r.code is not None else r.reason, f"{r.stage}:{r.reason}")


class Ipa:
    """ESipa endpoint on an IoT device, built from the LPA step methods.

    IoT devices have no user interface, so the consent hook of the wrapped
    LPA should accept.
    """

    def __init__(self, lpa: Lpa):
        self.lpa = lpa
        self._info1: EuiccInfo1 | None = None
        self._metadata: dict[bytes, ProfileMetadata] = {}

    def handle(self, endpoint: str, f: dict) -> dict:
        name = endpoint.rsplit("/", 1)[-1]
        lpa = self.lpa
        try:
            if name == "transferActivationCode":
                report = lpa.run_profile_download(f["activationCode"])
                return {"flowReport": json.dumps(report.to_json(), sort_keys=True, separators=(",", ":"))}
            if name == "initiateAuthentication":
                self._info1 = lpa.read_euicc_info()
                return {
                    "euiccInfo1": tlv.encode_tlv(self._info1),
                    "euiccChallenge": lpa.euicc_challenge(),
                    "lpaRspCapability": lpa.lpa_capability_bytes(),
                }
            if name == "authenticateServer":
                init = {k: f[k] for k in _INIT_RELAY if k in f}
                # matchingId comes from the activation code the eIM parsed
                req = lpa.build_authenticate_server_request(f["smdpAddress"], f["matchingId"], init)
                return {"authenticateServerResponse": lpa.authenticate_server(req)}
            if name == "prepareDownload":
                txid = f["transactionId"]
                metadata = tlv.decode_tlv(f["profileMetadata"], ProfileMetadata)
                signed2 = tlv.decode_tlv(f["smdpSigned2"], SmdpSigned2)
                if signed2.transaction_id != txid:
                    raise env.ServiceError("transactionIdMismatch")
                if self._info1 is None:
                    raise env.ServiceError("noSession")
                reason = lpa.profile_decision(metadata, self._info1)
                if reason is not None:
                    return {"cancelSessionResponse": lpa.cancel_on_euicc(txid, reason, stage="profileCheck")}
                self._metadata[txid] = metadata
                return {"prepareDownloadResponse": lpa.prepare_download(txid, signed2, f)}
            if name == "loadBoundProfilePackage":
                txid = f["transactionId"]
                metadata = self._metadata.pop(txid, None)
                if metadata is None:
                    raise env.ServiceError("noSession")
                bpp, reason = lpa.check_bpp(f["boundProfilePackage"], metadata, txid)
                if reason is not None:
                    return {"cancelSessionResponse": lpa.cancel_on_euicc(txid, reason, stage="bppCheck")}
                pir = lpa.load_bpp(bpp, txid)
                return {"profileInstallationResult": tlv.encode_tlv(pir)}
            if name == "cancelSession":
                reason = CancelSessionReason(f["reason"])
                return {"cancelSessionResponse": lpa.cancel_on_euicc(f["transactionId"], reason, stage="cancel")}
            if name == "removeNotification":
                reply = lpa.es10b("removeNotificationFromList", {"seqNumber": f["seqNumber"]}, stage="removeNotification")
                return {"result": reply["result"]}
            if name == "eimOperation":
                reply = lpa.es10b("eimOperation", {"signedOperation": f["signedOperation"]}, stage="eimOperation")
                return {"result": reply["result"]}
        except FlowAbort as abort:
            raise _service_error(abort) from None
        except KeyError as e:
            raise env.ServiceError(125, f"missingInputData: {e.args[0]}") from None
        except (tlv.TlvError, ValueError) as e:
            raise env.ServiceError(124, f"invalidInputData: {e}") from None
        raise env.ServiceError("unknownFunction", endpoint)


class Eim:
    def __init__(self, eim_id: str, keys: pki.KeyPair, address: str, transport: Transport):
        self.eim_id = eim_id
        self.keys = keys
        self.address = address
        self.transport = transport
        self.devices: dict[str, IpaEndpoint] = {}
        self.counter = 0

    @property
    def name(self) -> str:
        return f"eim:{self.address}"

    def register_device(self, endpoint: IpaEndpoint) -> None:
        self.devices[endpoint.device_id] = endpoint

    # --- eIM configuration ----------------------------------------------------------------

    def configuration_data(self) -> EimConfigurationData:
        return EimConfigurationData(eim_id=self.eim_id, eim_public_key=self.keys.public_key, eim_address=self.address)

    def sign_eim_operation(self, op: EimOperation) -> SignedEimOperation:
        return SignedEimOperation(operation=op, signature=pki.sign(self.keys.private_key, tlv.encode_tlv(op)))

    def next_operation(
        self, kind: EimOperationType, configuration: EimConfigurationData | None = None
    ) -> SignedEimOperation:
        self.counter += 1
        return self.sign_eim_operation(EimOperation(operation=kind, counter=self.counter, configuration=configuration))

    def send_operation(self, device_id: str, signed: SignedEimOperation) -> EimResult | FlowReport:
        dev = self.devices.get(device_id)
        if dev is None:
            return FlowReport("error", reason="deviceUnreachable", stage="eimOperation")
        try:
            reply = self._ipa(dev, "eimOperation", {"signedOperation": tlv.encode_tlv(signed)}, stage="eimOperation")
        except FlowAbort as abort:
            return abort.report
        return EimResult(reply["result"])

    # --- helpers ------------------------------------------------------------------------------

    def _ipa(self, dev: IpaEndpoint, function: str, fields: dict, *, stage: str) -> dict:
        try:
            reply = self.transport.send(self.name, dev.address, ESIPA + function, fields)
        except TransportError as e:
            raise _error(stage, type(e).__name__, txid=fields.get("transactionId"), detail=str(e)) from None
        if not env.is_success(reply):
            code, message = env.status_code(reply)
            raise _error(stage, message or "deviceError", code, fields.get("transactionId"))
        return reply

    def _smdp(self, address: str, endpoint: str, fields: dict, *, stage: str) -> dict:
        try:
            return self.transport.send(self.name, address, endpoint, fields)
        except TransportError as e:
            raise _error(stage, type(e).__name__, txid=fields.get("transactionId"), detail=str(e)) from None

    # --- downloads --------------------------------------------------------------------------------

    def push_activation_code(self, device_id: str, ac: ActivationCode | str) -> FlowReport:
        """Hand the code to the device; its IPA then runs an ordinary direct download."""
        dev = self.devices.get(device_id)
        if dev is None:
            return FlowReport("error", reason="deviceUnreachable", stage="activationCode")
        try:
            reply = self._ipa(dev, "transferActivationCode", {"activationCode": str(ac)}, stage="activationCode")
        except FlowAbort as abort:
            return abort.report
        try:
            return FlowReport.from_json(json.loads(reply["flowReport"]))
        except (ValueError, KeyError) as e:
            return FlowReport("error", reason="malformedFlowReport", stage="activationCode", detail=str(e))

    def assisted_download(self, device_id: str, ac: ActivationCode | str) -> FlowReport:
        dev = self.devices.get(device_id)
        if dev is None:
            return FlowReport("error", reason="deviceUnreachable", stage="initiateAuth")
        try:
            if isinstance(ac, str):
                ac = parse_activation_code(ac)
        except BadActivationCode as e:
            return FlowReport("error", reason="BadActivationCode", stage="activationCode", detail=str(e))
        try:
            return self._assisted(dev, ac)
        except FlowAbort as abort:
            return abort.report

    def _cancelled(self, address: str, txid: bytes, cancel: bytes, stage: str) -> FlowReport:
        response = Lpa.decode_or_abort(cancel, CancelSessionResponse, stage, txid)
        reason = None
        if isinstance(response, CancelSessionResponseOk):
            reason = response.euicc_cancel_session_signed.reason
        report = FlowReport(
            "cancelled",
            reason=reason.name if reason is not None else "cancelSessionError",
            code=int(reason) if reason is not None else None,
            stage=stage,
            transaction_id=txid,
            cancel_response=cancel,
        )
        reply = self._smdp(
            address, env.CANCEL_SESSION, {"transactionId": txid, "cancelSessionResponse": cancel}, stage=stage
        )
        if not env.is_success(reply):
            report.detail = f"server cancel failed: {env.status_code(reply)[1]}"
        return report

    def _assisted(self, dev: IpaEndpoint, ac: ActivationCode) -> FlowReport:
        address = ac.smdp_address
        first = self._ipa(dev, "initiateAuthentication", {"smdpAddress": address}, stage="initiateAuth")
        try:
            self.transport.connect(self.name, address)
        except TransportError as e:
            raise _error("initiateAuth", type(e).__name__, detail=str(e)) from None
        init = self._smdp(
            address,
            env.INITIATE_AUTHENTICATION,
            {
                "euiccChallenge": first["euiccChallenge"],
                "euiccInfo1": first["euiccInfo1"],
                "smdpAddress": address,
                "lpaRspCapability": first["lpaRspCapability"],
            },
            stage="initiateAuth",
        )
        if not env.is_success(init):
            code, message = env.status_code(init)
            raise _error("initiateAuth", message or "serverError", code)
        txid = init["transactionId"]

        relay = {k: init[k] for k in _INIT_RELAY if k in init}
        auth = self._ipa(
            dev,
            "authenticateServer",
            {"smdpAddress": address, "matchingId": ac.matching_id, **relay},
            stage="authenticateServer",
        )
        response = Lpa.decode_or_abort(
            auth["authenticateServerResponse"], AuthenticateServerResponse, "authenticateServer", txid
        )
        if isinstance(response, AuthenticateResponseError):
            code = response.authenticate_error_code
            raise _error("authenticateServer", code.name, int(code), txid)
        client = self._smdp(
            address,
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
            cancel = self._ipa(
                dev,
                "cancelSession",
                {"transactionId": txid, "reason": int(CancelSessionReason.sessionAborted)},
                stage="authenticateClient",
            )["cancelSessionResponse"]
            return FlowReport(
                "cancelled",
                reason=CancelSessionReason.sessionAborted.name,
                code=code,
                stage="authenticateClient",
                transaction_id=txid,
                cancel_response=cancel,
                detail=message,
            )

        prepared = self._ipa(
            dev,
            "prepareDownload",
            {
                "transactionId": txid,
                "profileMetadata": client["profileMetadata"],
                "smdpSigned2": client["smdpSigned2"],
                "smdpSignature2": client["smdpSignature2"],
                "smdpCertificate": client["smdpCertificate"],
            },
            stage="prepareDownload",
        )
        if "cancelSessionResponse" in prepared:
            return self._cancelled(address, txid, prepared["cancelSessionResponse"], "profileCheck")
        pdr = prepared["prepareDownloadResponse"]
        decoded = Lpa.decode_or_abort(pdr, PrepareDownloadResponse, "prepareDownload", txid)
        bpp_reply = self._smdp(
            address, env.GET_BOUND_PROFILE_PACKAGE, {"transactionId": txid, "prepareDownloadResponse": pdr}, stage="getBpp"
        )
        if isinstance(decoded, PrepareDownloadResponseError):
            code = decoded.download_error_code
            raise _error("prepareDownload", code.name, int(code), txid)
        if not env.is_success(bpp_reply):
            code, message = env.status_code(bpp_reply)
            raise _error("getBpp", message or "serverError", code, txid)

        loaded = self._ipa(
            dev,
            "loadBoundProfilePackage",
            {"transactionId": txid, "boundProfilePackage": bpp_reply["boundProfilePackage"]},
            stage="loadBpp",
        )
        if "cancelSessionResponse" in loaded:
            return self._cancelled(address, txid, loaded["cancelSessionResponse"], "bppCheck")
        pir_bytes = loaded["profileInstallationResult"]
        pir = Lpa.decode_or_abort(pir_bytes, ProfileInstallationResult, "loadBpp", txid)
        note = self._smdp(address, env.HANDLE_NOTIFICATION, {"pendingNotification": pir_bytes}, stage="handleNotification")
        if not env.is_success(note):
            code, message = env.status_code(note)
            raise _error("handleNotification", message or "serverError", code, txid)
        removed = self._ipa(
            dev,
            "removeNotification",
            {"seqNumber": pir.data.notification_metadata.seq_number},
            stage="removeNotification",
        )
        if removed["result"] != 0:
            raise _error("removeNotification", "unknownSeqNumber", removed["result"], txid)
        if pir.succeeded:
            return FlowReport(
                "installed", stage="removeNotification", transaction_id=txid, iccid=pir.data.notification_metadata.iccid
            )
        err = pir.data.final_result
        return FlowReport(
            "error",
            reason=err.error_reason.name,
            code=int(err.error_reason),
            stage="loadBpp",
            transaction_id=txid,
            detail=f"bppCommandId={int(err.bpp_command_id)}",
        )
