"""IoT devices: the eIM pushes a code, assists a download, and manages its own association."""

import json

from rsplab.scenario import ScenarioSpec, World

ORDER = [{"matchingId": "MATCH-001", "iccid": "89049032000000000001"}]


def world(flow, **extra):
    return World(ScenarioSpec.from_json({"seed": 3, "flow": flow, "orders": ORDER, **extra}))


def main():
    pushed = world("iot-push")
    print("push:", pushed.run().to_json()["outcome"])

    for mode in ("jsonEnvelope", "compactTlv"):
        w = world("iot-assisted", devices=[{"id": "dev-1", "transportMode": mode}])
        report = w.run()
        esipa = [e for e in w.transport.transcript if e.endpoint.startswith("/esipa/")]
        size = sum(len(e.envelope) for e in esipa)
        print(f"assisted over {mode:<13} {report.outcome}, {len(esipa)} ESipa messages, {size} bytes")

    w = world("eim-config")
    steps = ["addViaEim", "addViaIpa", "addViaIpa", "updateEim", "deleteEim", "addViaIpa", "removeViaIpa"]
    print("eIM configuration:")
    for op in steps:
        print(f"  {op:<13} -> {w.eim_op({'op': op})}")
    forged = w.eim_op({"op": "addViaIpa"}), w.eim_op({"op": "updateEim", "wrongKey": True})
    print("  forged update ->", forged[1])
    print("final eIM config:", json.dumps(w.device.euicc.eim_config and w.device.euicc.eim_config.eim_address))


if __name__ == "__main__":
    main()
