"""Scenario files, fixture PKI construction and the wiring of a complete test world."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import random
from dataclasses import dataclass, field
from pathlib import Path

from rsplab import pki, tlv
from rsplab.eim import Eim, Ipa, IpaEndpoint, TransportMode
from rsplab.euicc import Euicc
from rsplab.harness import FaultRule, Transport
from rsplab.lpa import Consent, FlowReport, Lpa, LpaConfig
from rsplab.messages import (
    DeviceCapability,
    DeviceInfo,
    EimConfigurationData,
    EimOperationType,
    EimResult,
    Ppr,
    ProfileMetadata,
    RspCapability,
    RulesAuthorisationTable,
)
from rsplab.smdp import ProfileOrder, SmdpPlus

EPOCH = 1767225600  # 2026-01-01T00:00:00Z
DAY = 86400
YEAR = 365 * DAY
START_TIME = EPOCH + 3600
CRL_LIFETIME = 30 * DAY

VALIDITY = {
    pki.Role.ci: 30 * YEAR,
    pki.Role.eum: 15 * YEAR,
    pki.Role.euicc: 10 * YEAR,
    pki.Role.dpauth: 2 * YEAR,
    pki.Role.dppb: 2 * YEAR,
    pki.Role.eim: 2 * YEAR,
}

FLOWS = ("auth", "download-ac", "download-default", "iot-push", "iot-assisted", "eim-config")
EIM_OPS = ("addViaIpa", "addViaEim", "updateEim", "deleteEim", "removeViaIpa")


class ScenarioError(ValueError):
    pass


# --- PKI ----------------------------------------------------------------------------------


def key_seed(pki_seed: int, name: str) -> bytes:
    return hashlib.sha256(f"{pki_seed}:{name}".encode()).digest()


def smdp_oid(address: str) -> str:
    """A stable private-arc OID per SM-DP+ address."""
    n = int.from_bytes(hashlib.sha256(address.encode()).digest()[:3], "big")
    return f"1.3.6.1.4.1.31746.{n}"


@dataclass
class PkiMaterial:
    keys: dict[str, pki.KeyPair]
    certs: dict[str, pki.Certificate]
    crls: dict[str, pki.Crl]  # keyed by issuer name

    def name_of(self, key_id: bytes) -> str:
        for name, cert in self.certs.items():
            if cert.subject_key_id == key_id:
                return name
        raise KeyError(key_id.hex())

    def by_serial(self, serial: int) -> tuple[str, pki.Certificate]:
        for name, cert in self.certs.items():
            if cert.serial == serial:
                return name, cert
        raise KeyError(f"no certificate with serial {serial}")

    def reissue_crl(self, issuer: str, this_update: int, add=(), remove=()) -> pki.Crl:
        old = self.crls.get(issuer)
        revoked = (set(old.revoked_serials) if old else set()) | set(add)
        revoked -= set(remove)
        this_update = max(this_update, old.this_update + 1 if old else this_update)
        crl = pki.issue_crl(
            self.keys[issuer], this_update=this_update, next_update=this_update + CRL_LIFETIME, revoked=revoked
        )
        self.crls[issuer] = crl
        return crl

    def to_fixture(self) -> pki.PkiFixture:
        return pki.PkiFixture(
            keypairs=tuple(
                pki.NamedKeyPair(name=n, public_key=k.public_key, private_key=k.private_key)
                for n, k in self.keys.items()
            ),
            certificates=tuple(self.certs.values()),
            crls=tuple(self.crls.values()),
        )

    @classmethod
    def from_fixture(cls, fixture: pki.PkiFixture) -> PkiMaterial:
        keys = {k.name: pki.KeyPair(k.public_key, k.private_key) for k in fixture.keypairs}
        by_pk = {k.public_key: n for n, k in keys.items()}
        certs = {}
        for cert in fixture.certificates:
            name = by_pk.get(cert.subject_public_key)
            if name is None:
                raise ScenarioError(f"certificate {cert.subject_name!r} has no key pair in the fixture")
            certs[name] = cert
        crls = {}
        for crl in fixture.crls:
            issuer = next((n for n, c in certs.items() if c.subject_key_id == crl.issuer_key_id), None)
            if issuer is None:
                raise ScenarioError("CRL issuer missing from the fixture")
            crls[issuer] = crl
        return cls(keys, certs, crls)


def build_pki(
    pki_seed: int,
    devices=("dev-1",),
    smdp_addresses=("smdp.example.com",),
    eim_addresses=("eim.example.com",),
) -> PkiMaterial:
    """CI root, one EUM, an eUICC per device and DPauth/DPpb pairs per SM-DP+."""
    keys: dict[str, pki.KeyPair] = {}
    certs: dict[str, pki.Certificate] = {}
    serial = iter(range(1, 1 << 20))

    def issue(name, issuer, role, oid=None, crl_dp=False):
        keys[name] = pki.generate_keypair(key_seed(pki_seed, name))
        issuer_cert = certs.get(issuer) if issuer else None
        certs[name] = pki.issue_certificate(
            keys[issuer or name],
            issuer_cert,
            serial=next(serial),
            subject_name=name,
            role=role,
            subject_public_key=keys[name].public_key,
            not_before=EPOCH - DAY,
            not_after=EPOCH - DAY + VALIDITY[role],
            oid=oid,
            has_crl_distribution_point=crl_dp,
        )

    issue("ci", None, pki.Role.ci)
    issue("eum", "ci", pki.Role.eum)
    for address in smdp_addresses:
        oid = smdp_oid(address)
        issue(f"dpauth:{address}", "ci", pki.Role.dpauth, oid, crl_dp=True)
        issue(f"dppb:{address}", "ci", pki.Role.dppb, oid, crl_dp=True)
    for address in eim_addresses:
        issue(f"eim:{address}", "ci", pki.Role.eim)
    for dev in devices:
        issue(f"euicc:{dev}", "eum", pki.Role.euicc)
    material = PkiMaterial(keys, certs, {})
    material.reissue_crl("ci", EPOCH)
    material.reissue_crl("eum", EPOCH)
    return material


def write_fixture(material: PkiMaterial, path) -> bytes:
    data = tlv.encode_tlv(material.to_fixture())
    Path(path).write_bytes(data)
    return data


def read_fixture(path) -> PkiMaterial:
    return PkiMaterial.from_fixture(tlv.decode_tlv(Path(path).read_bytes(), pki.PkiFixture))


# --- scenario files --------------------------------------------------------------------------


def _iccid(text: str) -> bytes:
    try:
        raw = bytes.fromhex(text)
    except ValueError:
        raise ScenarioError(f"iccid {text!r} is not 20 hex/BCD digits") from None
    if len(raw) != 10:
        raise ScenarioError(f"iccid {text!r} is not 20 hex/BCD digits")
    return raw


@dataclass
class OrderSpec:
    matching_id: str
    iccid: str
    profile_name: str = "Test Profile"
    service_provider_name: str = "Example Operator"
    pprs: int = 0
    lpr_config_present: bool = False
    cc_required: bool = False
    confirmation_code: str | None = None
    eid: str | None = None
    max_attempts: int = 3
    via_smds: bool = False
    expires_at: int | None = None
    profile_size: int = 3000
    smdp: str | None = None


@dataclass
class DeviceSpec:
    id: str
    transport_mode: str = "jsonEnvelope"
    rat_rules: list[int] | None = None
    free_memory: int = 1 << 20


@dataclass
class ScenarioSpec:
    seed: int = 1
    flow: str = "download-ac"
    pki_seed: int | None = None
    pki_fixture: str | None = None
    smdp_addresses: list[str] = field(default_factory=lambda: ["smdp.example.com"])
    eim_address: str = "eim.example.com"
    devices: list[DeviceSpec] = field(default_factory=lambda: [DeviceSpec("dev-1")])
    orders: list[OrderSpec] = field(default_factory=list)
    rat_rules: list[int] = field(default_factory=list)
    lpa: dict = field(default_factory=dict)
    activation_code: str | None = None
    device: str = "dev-1"
    faults: list[FaultRule] = field(default_factory=list)
    eim_ops: list[dict] = field(default_factory=list)
    expect: dict | None = None
    base_dir: Path | None = None

    @classmethod
    def from_json(cls, obj: dict, base_dir: Path | None = None) -> ScenarioSpec:
        if not isinstance(obj, dict):
            raise ScenarioError("scenario must be a JSON object")
        known = {
            "seed", "flow", "pkiSeed", "pkiFixture", "actors", "devices", "orders", "ratRules",
            "lpa", "activationCode", "device", "faults", "eimOps", "expect", "description",
        }  # fmt: skip
        unknown = set(obj) - known
        if unknown:
            raise ScenarioError(f"unknown scenario keys: {sorted(unknown)}")
        try:
            actors = obj.get("actors", {})
            spec = cls(
                seed=int(obj.get("seed", 1)),
                flow=obj.get("flow", "download-ac"),
                pki_seed=obj.get("pkiSeed"),
                pki_fixture=obj.get("pkiFixture"),
                smdp_addresses=list(actors.get("smdpAddresses", ["smdp.example.com"])),
                eim_address=actors.get("eimAddress", "eim.example.com"),
                devices=[_device_spec(d) for d in obj.get("devices", [{"id": "dev-1"}])],
                orders=[_order_spec(o) for o in obj.get("orders", [])],
                rat_rules=[int(r) for r in obj.get("ratRules", [])],
                lpa=dict(obj.get("lpa", {})),
                activation_code=obj.get("activationCode"),
                device=obj.get("device", "dev-1"),
                faults=[FaultRule.from_json(f, i) for i, f in enumerate(obj.get("faults", []))],
                eim_ops=list(obj.get("eimOps", [])),
                expect=obj.get("expect"),
                base_dir=base_dir,
            )
        except (TypeError, ValueError, AttributeError) as e:
            raise ScenarioError(str(e)) from None
        spec.validate()
        return spec

    def validate(self):
        if self.flow not in FLOWS:
            raise ScenarioError(f"unknown flow {self.flow!r}; expected one of {FLOWS}")
        if not 0 <= self.seed < 1 << 64:
            raise ScenarioError("seed must be an unsigned 64-bit integer")
        if self.device not in {d.id for d in self.devices}:
            raise ScenarioError(f"device {self.device!r} is not declared")
        for op in self.eim_ops:
            if op.get("op") not in EIM_OPS:
                raise ScenarioError(f"unknown eIM operation {op.get('op')!r}")
        for o in self.orders:
            _iccid(o.iccid)


def _device_spec(obj) -> DeviceSpec:
    if isinstance(obj, str):
        return DeviceSpec(obj)
    names = {"id": "id", "transportMode": "transport_mode", "ratRules": "rat_rules", "freeMemory": "free_memory"}
    unknown = set(obj) - set(names)
    if unknown:
        raise ScenarioError(f"unknown device keys: {sorted(unknown)}")
    spec = DeviceSpec(**{names[k]: v for k, v in obj.items()})
    TransportMode(spec.transport_mode)
    return spec


_ORDER_KEYS = {
    "matchingId": "matching_id",
    "iccid": "iccid",
    "profileName": "profile_name",
    "serviceProviderName": "service_provider_name",
    "pprs": "pprs",
    "lprConfigPresent": "lpr_config_present",
    "ccRequired": "cc_required",
    "confirmationCode": "confirmation_code",
    "eid": "eid",
    "maxAttempts": "max_attempts",
    "viaSmds": "via_smds",
    "expiresAt": "expires_at",
    "profileSize": "profile_size",
    "smdp": "smdp",
}


def _order_spec(obj: dict) -> OrderSpec:
    unknown = set(obj) - set(_ORDER_KEYS)
    if unknown:
        raise ScenarioError(f"unknown order keys: {sorted(unknown)}")
    return OrderSpec(**{_ORDER_KEYS[k]: v for k, v in obj.items()})


def load_scenario(path) -> ScenarioSpec:
    path = Path(path)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ScenarioError(f"{path}: invalid JSON: {e}") from None
    return ScenarioSpec.from_json(obj, base_dir=path.parent)


def resolve_seed(flag: int | None, file_seed: int) -> int:
    """Command-line flag beats RSPLAB_SEED, which beats the scenario file."""
    if flag is not None:
        return flag
    env_seed = os.environ.get("RSPLAB_SEED")
    if env_seed:
        try:
            return int(env_seed, 0)
        except ValueError:
            raise ScenarioError(f"RSPLAB_SEED={env_seed!r} is not an integer") from None
    return file_seed


# --- world ------------------------------------------------------------------------------------


@dataclass
class Device:
    device_id: str
    euicc: Euicc
    lpa: Lpa
    ipa: Ipa
    mode: TransportMode


class World:
    """All actors of one scenario, wired to a single transport and logical clock."""

    def __init__(self, spec: ScenarioSpec, material: PkiMaterial | None = None):
        self.spec = spec
        seed = spec.seed
        pki_seed = spec.pki_seed if spec.pki_seed is not None else seed
        self.clock = pki.Clock(START_TIME)
        if material is None and spec.pki_fixture:
            fixture = Path(spec.pki_fixture)
            if spec.base_dir is not None and not fixture.is_absolute():
                fixture = spec.base_dir / fixture
            material = read_fixture(fixture)
        self.pki = material or build_pki(
            pki_seed, [d.id for d in spec.devices], spec.smdp_addresses, [spec.eim_address]
        )
        self.stores: list[pki.TrustStore] = []
        self.transport = Transport(self.clock, {"revoke": self.revoke, "expireCert": self.expire_cert})
        for rule in spec.faults:
            self.transport.add_fault(dataclasses.replace(rule))

        def rng(name):
            return random.Random(f"{seed}:{name}")

        self.smdps: dict[str, SmdpPlus] = {}
        for address in spec.smdp_addresses:
            smdp = SmdpPlus(
                address,
                dpauth_keys=self.pki.keys[f"dpauth:{address}"],
                dpauth_cert=self.pki.certs[f"dpauth:{address}"],
                dppb_keys=self.pki.keys[f"dppb:{address}"],
                dppb_cert=self.pki.certs[f"dppb:{address}"],
                store=self.new_store(),
                rng=rng(f"smdp:{address}"),
            )
            self.smdps[address] = smdp
            self.transport.register(address, smdp)

        self.devices: dict[str, Device] = {}
        for d in spec.devices:
            rules = d.rat_rules if d.rat_rules is not None else spec.rat_rules
            euicc = Euicc(
                self.pki.keys[f"euicc:{d.id}"],
                [self.pki.certs[f"euicc:{d.id}"], self.pki.certs["eum"]],
                self.new_store(),
                rng=rng(f"euicc:{d.id}"),
                rat=RulesAuthorisationTable(rules=tuple(Ppr(r) for r in rules)),
                free_memory=d.free_memory,
            )
            euicc_address = f"euicc:{d.id}"
            self.transport.register(euicc_address, euicc)
            lpa = Lpa(f"lpa:{d.id}", euicc_address, self.transport, self.lpa_config())
            iot_lpa = Lpa(f"ipa:{d.id}", euicc_address, self.transport, self.lpa_config(iot=True))
            ipa = Ipa(iot_lpa)
            mode = TransportMode(d.transport_mode)
            self.transport.register(f"ipa:{d.id}", ipa, compact=mode is TransportMode.compact_tlv)
            self.devices[d.id] = Device(d.id, euicc, lpa, ipa, mode)

        self.eim = Eim(
            f"eim-{spec.eim_address}", self.pki.keys[f"eim:{spec.eim_address}"], spec.eim_address, self.transport
        )
        for dev in self.devices.values():
            self.eim.register_device(IpaEndpoint(dev.device_id, f"ipa:{dev.device_id}", dev.mode))

        for o in spec.orders:
            self.add_order(o)

    # --- construction helpers ----------------------------------------------------------------

    def new_store(self) -> pki.TrustStore:
        store = pki.TrustStore(
            self.clock,
            roots=[self.pki.certs["ci"]],
            certs=[self.pki.certs["eum"]],
            crls=self.pki.crls.values(),
        )
        self.stores.append(store)
        return store

    def lpa_config(self, *, iot: bool = False) -> LpaConfig:
        cfg = self.spec.lpa
        consent = Consent.accept if iot else Consent(cfg.get("consent", "accept"))
        root = cfg.get("allowedRootId")
        return LpaConfig(
            allowed_root_id=bytes.fromhex(root) if root else None,
            default_smdp_address=cfg.get("defaultSmdpAddress", self.spec.smdp_addresses[0]),
            consent_hook=lambda metadata: consent,
            time_check=cfg.get("timeCheck", True),
            confirmation_code=cfg.get("confirmationCode"),
            on_metadata_change=cfg.get("onMetadataChange", "cancel"),
            server_supports_empty_name_cancel=cfg.get("serverSupportsEmptyNameCancel", True),
            device_info=DeviceInfo(
                tac=cfg.get("tac", "35290611"),
                device_capabilities=DeviceCapability(cfg.get("deviceCapabilities", 0b101)),
                lpa_rsp_capability=RspCapability(cfg.get("lpaRspCapability", 0b101)),
            ),
        )

    def resolve_eid(self, ref: str | None) -> str | None:
        if ref is None:
            return None
        if ref in self.devices:
            return self.devices[ref].euicc.eid
        return ref.upper()

    def add_order(self, o: OrderSpec) -> ProfileOrder:
        iccid = _iccid(o.iccid)
        smdp = self.smdps[o.smdp or self.spec.smdp_addresses[0]]
        metadata = ProfileMetadata(
            iccid=iccid,
            profile_name=o.profile_name,
            service_provider_name=o.service_provider_name,
            pprs=Ppr(o.pprs),
            lpr_config_present=o.lpr_config_present,
        )
        return smdp.add_order(
            ProfileOrder(
                matching_id=o.matching_id,
                iccid=iccid,
                metadata=metadata,
                eid=self.resolve_eid(o.eid),
                max_attempts=o.max_attempts,
                cc_required=o.cc_required,
                confirmation_code=o.confirmation_code,
                via_smds=o.via_smds,
                expires_at=o.expires_at,
                profile_size=o.profile_size,
            )
        )

    # --- fault hooks ------------------------------------------------------------------------------

    def revoke(self, serial: int) -> None:
        _, cert = self.pki.by_serial(serial)
        issuer = self.pki.name_of(cert.authority_key_id)
        crl = self.pki.reissue_crl(issuer, self.clock.now, add=[serial])
        for store in self.stores:
            store.add_crl(crl)

    def expire_cert(self, serial: int) -> None:
        _, cert = self.pki.by_serial(serial)
        if self.clock.now <= cert.not_after:
            self.clock.now = cert.not_after + 1

    # --- accessors --------------------------------------------------------------------------------------

    @property
    def smdp(self) -> SmdpPlus:
        return self.smdps[self.spec.smdp_addresses[0]]

    @property
    def device(self) -> Device:
        return self.devices[self.spec.device]

    def activation_code(self) -> str:
        if self.spec.activation_code:
            return self.spec.activation_code
        if not self.spec.orders:
            raise ScenarioError("no activation code and no orders to derive one from")
        o = self.spec.orders[0]
        return f"LPA:1${o.smdp or self.spec.smdp_addresses[0]}${o.matching_id}"

    # --- flows ----------------------------------------------------------------------------------------

    def run(self) -> FlowReport:
        flow = self.spec.flow
        dev = self.device
        if flow == "auth":
            address = self.spec.smdp_addresses[0]
            matching_id = self.spec.orders[0].matching_id if self.spec.orders else ""
            return dev.lpa.run_authentication(address, matching_id)
        if flow == "download-ac":
            return dev.lpa.run_profile_download(self.activation_code())
        if flow == "download-default":
            return dev.lpa.run_profile_download("default")
        if flow == "iot-push":
            return self.eim.push_activation_code(dev.device_id, self.activation_code())
        if flow == "iot-assisted":
            return self.eim.assisted_download(dev.device_id, self.activation_code())
        return self.run_eim_config()

    def run_eim_config(self) -> FlowReport:
        ops = self.spec.eim_ops or [
            {"op": "addViaIpa"},
            {"op": "addViaIpa"},
            {"op": "updateEim", "wrongKey": True},
            {"op": "removeViaIpa"},
        ]
        results = [self.eim_op(op) for op in ops]
        return FlowReport("completed", stage="eimConfiguration", detail=json.dumps(results))

    def eim_op(self, op: dict) -> str:
        """Run one eIM configuration step and return the eUICC's result name."""
        kind = op["op"]
        dev = self.device
        if kind == "addViaIpa":
            data = self.eim.configuration_data()
            reply = dev.ipa.lpa.es10b(
                "addEimConfiguration", {"eimConfigurationData": tlv.encode_tlv(data)}, stage="eimConfiguration"
            )
            return EimResult(reply["result"]).name
        if kind == "removeViaIpa":
            reply = dev.ipa.lpa.es10b("removeEimConfiguration", {}, stage="eimConfiguration")
            return EimResult(reply["result"]).name
        op_type = {
            "addViaEim": EimOperationType.addEim,
            "updateEim": EimOperationType.updateEim,
            "deleteEim": EimOperationType.deleteEim,
        }[kind]
        config = None
        if op_type is not EimOperationType.deleteEim:
            config = EimConfigurationData(
                eim_id=op.get("eimId", self.eim.eim_id),
                eim_public_key=self.eim.keys.public_key,
                eim_address=op.get("eimAddress", self.eim.address),
            )
        signed = self.eim.next_operation(op_type, config)
        if op.get("wrongKey"):
            rogue = pki.generate_keypair(key_seed(self.spec.seed, "rogue-eim"))
            signed = dataclasses.replace(
                signed, signature=pki.sign(rogue.private_key, tlv.encode_tlv(signed.operation))
            )
        result = self.eim.send_operation(dev.device_id, signed)
        return result.name if isinstance(result, EimResult) else f"error:{result.reason}"


def expectation_met(report: FlowReport, expect: dict | None) -> bool:
    if not expect:
        return report.outcome == "installed"
    got = report.to_json()
    return all(got.get(k) == v for k, v in expect.items())


def run_scenario(spec: ScenarioSpec, material: PkiMaterial | None = None) -> tuple[FlowReport, World]:
    world = World(spec, material)
    return world.run(), world
