"""Try a handful of network attacks against a download and show where each one is caught."""

import base64

from rsplab import tlv
from rsplab.harness import FaultRule
from rsplab.scenario import ScenarioSpec, World

ES9 = "/gsma/rsp2/es9plus/"
BASE = {"seed": 7, "flow": "download-ac", "orders": [{"matchingId": "MATCH-001", "iccid": "89049032000000000001"}]}


def attempt(title, faults=(), prepare=None):
    world = World(ScenarioSpec.from_json({**BASE, "faults": list(faults)}))
    if prepare:
        prepare(world)
    report = world.run()
    where = f"{report.stage}: {report.reason} ({report.code})" if report.reason else report.stage
    print(f"{title:<52} {report.outcome:<10} {where}")
    return world


def present_dppb_as_dpauth(world):
    cert = world.pki.certs["dppb:smdp.example.com"]
    world.transport.add_fault(
        FaultRule("swapField", ES9 + "initiateAuthentication", direction="response", field="serverCertificate",
                  value=base64.b64encode(tlv.encode_tlv(cert)).decode())
    )  # fmt: skip


def main():
    attempt("no attack")
    attempt("flip a byte of serverSignature1",
            [{"action": "tamperByte", "endpoint": ES9 + "initiateAuthentication", "direction": "response",
              "field": "serverSignature1"}])  # fmt: skip
    attempt("present the binding cert for authentication", prepare=present_dppb_as_dpauth)
    attempt("flip a raw byte on the LPA-to-server link",
            [{"action": "tamperByte", "endpoint": ES9 + "authenticateClient", "offset": 40}])
    attempt("revoke the EUM while the client authenticates",
            [{"action": "revoke", "endpoint": ES9 + "authenticateClient", "serial": 2}])
    attempt("replace the transaction id",
            [{"action": "swapField", "endpoint": ES9 + "authenticateClient", "field": "transactionId",
              "value": "AB" * 16}])  # fmt: skip
    attempt("corrupt the MAC of a profile segment",
            [{"action": "tamperByte", "endpoint": "/es10b/loadBoundProfilePackage", "occurrence": 2,
              "field": "segment", "offset": -1}])  # fmt: skip
    w = attempt("lose the first segment", [{"action": "drop", "endpoint": "/es10b/loadBoundProfilePackage"}])
    again = w.run()
    order = w.smdp.orders["MATCH-001"]
    print(f"{'  ...and try again':<52} {again.outcome:<10} attempts={order.download_attempts}, "
          f"server reused the bound package: {w.smdp.event_log[-1] == 'bpp:reuse'}")


if __name__ == "__main__":
    main()
