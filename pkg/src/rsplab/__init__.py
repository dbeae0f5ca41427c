"""Desk-scale eSIM Remote SIM Provisioning: eUICC, SM-DP+, LPA and eIM over a fault-injecting transport."""

from rsplab.messages import ActivationCode, compute_hash_cc, parse_activation_code
from rsplab.scenario import ScenarioSpec, World, build_pki, load_scenario, run_scenario
from rsplab.tlv import decode_tlv, encode_tlv

__version__ = "0.1.0"

__all__ = [
    "ActivationCode",
    "ScenarioSpec",
    "World",
    "build_pki",
    "compute_hash_cc",
    "decode_tlv",
    "encode_tlv",
    "load_scenario",
    "parse_activation_code",
    "run_scenario",
]
