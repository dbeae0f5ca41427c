"""Walk through one consumer download and print each message that crossed the transport."""

from rsplab.scenario import ScenarioSpec, run_scenario

SPEC = {
    "seed": 7,
    "flow": "download-ac",
    "orders": [{"matchingId": "MATCH-001", "iccid": "89049032000000000001", "profileName": "Demo"}],
}


def main():
    report, world = run_scenario(ScenarioSpec.from_json(SPEC))
    for e in world.transport.transcript:
        if e.direction == "connection-open":
            print(f"{e.seq:>3}  -- new TLS connection {e.sender} -> {e.receiver}")
            continue
        arrow = "->" if e.direction == "request" else "<-"
        peer = e.receiver if e.direction == "request" else e.sender
        print(f"{e.seq:>3}  {arrow} {peer:<22} {e.endpoint}  ({len(e.envelope)} bytes)")
    print()
    print("report:", report.to_json())
    order = world.smdp.orders["MATCH-001"]
    print("order state:", order.state.value, "after", order.download_attempts, "attempt(s)")
    for p in world.device.euicc.profiles:
        print("installed profile:", p.iccid.hex().upper(), "state:", p.state.name)
    for n in world.smdp.operator_log:
        print("operator notified:", n.notification_event, n.notification_event_status)


if __name__ == "__main__":
    main()
