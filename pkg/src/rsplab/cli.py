"""Command-line entry point. Results go to stdout as JSON; logs go to stderr."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import tempfile
from pathlib import Path

from rsplab import harness
from rsplab.scenario import (
    ScenarioError,
    build_pki,
    expectation_met,
    load_scenario,
    resolve_seed,
    run_scenario,
    write_fixture,
)

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("rsplab")


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


def cmd_pki_init(args) -> int:
    material = build_pki(args.seed, [f"dev-{i + 1}" for i in range(args.devices)], args.smdp, [args.eim])
    try:
        data = write_fixture(material, args.out)
    except OSError as e:
        log.error("cannot write fixture: %s", e)
        return EXIT_CONFIG
    _emit(
        {
            "fixture": str(args.out),
            "sha256": hashlib.sha256(data).hexdigest(),
            "keyIds": {name: cert.subject_key_id.hex().upper() for name, cert in material.certs.items()},
        }
    )
    return EXIT_OK


def cmd_run(args) -> int:
    try:
        spec = load_scenario(args.scenario)
        spec.seed = resolve_seed(args.seed, spec.seed)
        spec.validate()
    except (OSError, ScenarioError) as e:
        log.error("scenario error: %s", e)
        _emit({"error": str(e)})
        return EXIT_CONFIG
    report, world = run_scenario(spec)
    transcript = args.transcript
    if transcript:
        report.transcript_ref = str(transcript)
    out = {"report": report.to_json(), "seed": spec.seed}
    try:
        if transcript:
            world.transport.write_transcript(transcript)
        if args.golden:
            if transcript:
                path = transcript
            else:
                tmp = tempfile.NamedTemporaryFile(suffix=".jsonl", delete=False)
                tmp.close()
                path = tmp.name
                world.transport.write_transcript(path)
            seq = harness.verify_transcript(path, args.golden)
            out["golden"] = {"equal": seq is None, "firstDivergence": seq}
    except harness.TranscriptIoError as e:
        log.error("%s", e)
        _emit({**out, "error": str(e)})
        return EXIT_CONFIG
    _emit(out)
    ok = expectation_met(report, spec.expect)
    if "golden" in out and not out["golden"]["equal"]:
        ok = False
    log.info("outcome=%s expected=%s", report.outcome, spec.expect or {"outcome": "installed"})
    return EXIT_OK if ok else EXIT_FAIL


def cmd_transcript_verify(args) -> int:
    for p in (args.path, args.golden):
        if not Path(p).is_file():
            log.error("missing transcript %s", p)
            _emit({"error": f"missing file {p}"})
            return EXIT_CONFIG
    try:
        seq = harness.verify_transcript(args.path, args.golden)
    except (harness.TranscriptIoError, ValueError, KeyError) as e:
        log.error("cannot read transcripts: %s", e)
        _emit({"error": str(e)})
        return EXIT_CONFIG
    _emit({"equal": seq is None, "firstDivergence": seq})
    return EXIT_OK if seq is None else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rsplab", description="Remote SIM provisioning lab")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p_pki = sub.add_parser("pki", help="fixture PKI")
    pki_sub = p_pki.add_subparsers(dest="pki_command", required=True)
    p_init = pki_sub.add_parser("init", help="write a deterministic PKI fixture")
    p_init.add_argument("--seed", type=int, required=True)
    p_init.add_argument("--out", type=Path, required=True)
    p_init.add_argument("--devices", type=int, default=1)
    p_init.add_argument("--smdp", action="append", default=None, help="SM-DP+ address (repeatable)")
    p_init.add_argument("--eim", default="eim.example.com")
    p_init.set_defaults(func=cmd_pki_init)

    p_run = sub.add_parser("run", help="run a scenario file")
    p_run.add_argument("--scenario", type=Path, required=True)
    p_run.add_argument("--seed", type=int, default=None, help="overrides RSPLAB_SEED and the file")
    p_run.add_argument("--transcript", type=Path, default=None)
    p_run.add_argument("--golden", type=Path, default=None)
    p_run.set_defaults(func=cmd_run)

    p_tr = sub.add_parser("transcript", help="transcript tools")
    tr_sub = p_tr.add_subparsers(dest="transcript_command", required=True)
    p_verify = tr_sub.add_parser("verify", help="compare a transcript with a golden file")
    p_verify.add_argument("path", type=Path)
    p_verify.add_argument("--golden", type=Path, required=True)
    p_verify.set_defaults(func=cmd_transcript_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr, level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s"
    )
    if getattr(args, "smdp", "unset") is None:
        args.smdp = ["smdp.example.com"]
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
