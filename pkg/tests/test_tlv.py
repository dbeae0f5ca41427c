import random
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from valuegen import message_types, random_message

from rsplab import tlv
from rsplab.messages import (
    BppCommandId,
    ErrorReason,
    ErrorResult,
    NotificationMetadata,
    ProfileInstallationResult,
    ProfileInstallationResultData,
    ProfileMetadata,
    SmdpSigned2,
)


def _pir(final):
    return ProfileInstallationResult(
        data=ProfileInstallationResultData(
            transaction_id=bytes(16),
            notification_metadata=NotificationMetadata(seq_number=1, iccid=bytes(10)),
            smdp_oid="1.2.3",
            final_result=final,
        ),
        euicc_sign_pir=bytes(64),
    )


def test_optional_absent_fields_are_omitted_and_stay_absent():
    v = SmdpSigned2(transaction_id=bytes(16), cc_required_flag=False)
    data = tlv.encode_tlv(v)
    # the absent bpp_euicc_otpk (0x82) leaves no trace; rpm_pending False is still emitted
    assert data == bytes.fromhex("3918" + "8010" + "00" * 16 + "810100" + "830100")
    back = tlv.decode_tlv(data, SmdpSigned2)
    assert back.bpp_euicc_otpk is None
    assert back == v


def test_error_result_reason_byte():
    v = _pir(ErrorResult(bpp_command_id=BppCommandId.loadProfileElements, error_reason=ErrorReason(10)))
    data = tlv.encode_tlv(v)
    assert tlv.decode_tlv(data, ProfileInstallationResult) == v
    inner = tlv.encode_tlv(v.data.final_result)
    # ErrorResult: type tag, length, [0x80 01 05] [0x81 01 0A]
    assert inner == bytes([0x47, 0x06, 0x80, 0x01, 0x05, 0x81, 0x01, 0x0A])


def test_fixed_encoding_of_small_message():
    md = ProfileMetadata(iccid=bytes.fromhex("89000000000000000001"), profile_name="A")
    assert tlv.encode_tlv(md).hex() == (
        "3e"  # ProfileMetadata
        "17"
        "800a89000000000000000001"  # iccid
        "810141"  # profile_name "A"
        "8200"  # empty service provider name
        "830100"  # no PPRs
        "840100"  # lpr_config_present false
    )


@pytest.mark.parametrize(
    "data, error",
    [
        (b"", tlv.MalformedTlv),
        (bytes([0x3E, 0x05, 0x80]), tlv.MalformedTlv),  # truncated
        (bytes([0x44, 0x03, 0x80, 0x01, 0x00, 0x00]), tlv.MalformedTlv),  # trailing byte
        (bytes([0x44, 0x81, 0x03, 0x80, 0x01, 0x00]), tlv.MalformedTlv),  # non-minimal length
        (bytes([0x44, 0x04, 0x80, 0x02, 0x00, 0x05]), tlv.MalformedTlv),  # non-minimal integer
        (bytes([0x44, 0x03, 0x81, 0x01, 0x00]), tlv.MalformedTlv),  # mandatory tag missing
        (bytes([0x44, 0x06, 0x80, 0x01, 0x05, 0x85, 0x01, 0x00]), tlv.MalformedTlv),  # unknown tag
        (bytes([0x44, 0x03, 0x80, 0x01, 0x09]), tlv.MalformedTlv),  # undefined enum value
        (bytes([0x3E, 0x00]), tlv.MalformedTlv),  # wrong type for the expected class
    ],
)
def test_malformed_inputs_rejected(data, error):
    from rsplab.messages import LoadBppAck

    with pytest.raises(error):
        tlv.decode_tlv(data, LoadBppAck)


def test_boolean_must_be_canonical():
    good = tlv.encode_tlv(SmdpSigned2(transaction_id=bytes(16), cc_required_flag=True))
    bad = good.replace(b"\x81\x01\xff", b"\x81\x01\x01")
    with pytest.raises(tlv.MalformedTlv):
        tlv.decode_tlv(bad, SmdpSigned2)


def test_length_overflow():
    with pytest.raises(tlv.LengthOverflow):
        tlv.decode_tlv(bytes(tlv.MAX_INPUT + 1), ProfileMetadata)
    with pytest.raises(tlv.LengthOverflow):
        tlv._length(tlv.MAX_INPUT + 1)


def test_long_form_lengths_roundtrip():
    from rsplab.messages import SealedSegment

    seg = SealedSegment(command_id=BppCommandId.loadProfileElements, payload=bytes(range(256)) * 4, mac=bytes(16))
    data = tlv.encode_tlv(seg)
    assert data[1] == 0x82
    assert tlv.decode_tlv(data, SealedSegment) == seg


def test_size_constraints_enforced_both_ways():
    with pytest.raises(ValueError):
        tlv.encode_tlv(SmdpSigned2(transaction_id=bytes(15), cc_required_flag=False))
    good = tlv.encode_tlv(SmdpSigned2(transaction_id=bytes(16), cc_required_flag=False))
    short = bytes([good[0], good[1] - 1, 0x80, 0x0F]) + good[4:19] + good[20:]
    with pytest.raises(tlv.MalformedTlv):
        tlv.decode_tlv(short, SmdpSigned2)


def test_registry_tags_unique_and_in_range():
    reg = tlv.registry()
    assert len(set(reg)) == len(reg)
    assert all(0 < t < 0x80 for t in reg)


@pytest.mark.parametrize("cls", message_types(), ids=lambda c: c.__name__)
def test_roundtrip_sample(cls):
    rng = random.Random(f"sample:{cls.__name__}")
    for _ in range(200):
        v = random_message(cls, rng)
        assert tlv.decode_tlv(tlv.encode_tlv(v), cls) == v


@settings(max_examples=200, deadline=None)
@given(st.sampled_from(message_types()), st.integers(0, 2**32), st.data())
def test_single_byte_corruption_never_crashes(cls, seed, data):
    """Any corrupted encoding either decodes to some value or raises TlvError."""
    v = random_message(cls, random.Random(seed))
    enc = bytearray(tlv.encode_tlv(v))
    i = data.draw(st.integers(0, len(enc) - 1))
    enc[i] ^= data.draw(st.integers(1, 255))
    try:
        out = tlv.decode_tlv(bytes(enc), cls)
    except tlv.TlvError:
        return
    # whatever decodes must re-encode to the same bytes (canonical form)
    assert tlv.encode_tlv(out) == bytes(enc)


@settings(max_examples=300, deadline=None)
@given(st.binary(max_size=64))
def test_arbitrary_bytes_never_crash(data):
    for cls in (ProfileMetadata, SmdpSigned2, ProfileInstallationResult):
        try:
            v = tlv.decode_tlv(data, cls)
        except tlv.TlvError:
            continue
        assert tlv.encode_tlv(v) == data


def test_signed_part_is_prefix_of_full_encoding_content():
    v = SmdpSigned2(transaction_id=bytes(16), cc_required_flag=True, bpp_euicc_otpk=bytes(32))
    part = tlv.encode_signed_part(v, "bpp_euicc_otpk")
    full = tlv.encode_tlv(v)
    assert full[2:].startswith(part[2:])


# --- frozen vectors ---------------------------------------------------------------------------------

VECTORS = Path(__file__).resolve().parent.parent / "golden" / "vectors"


@pytest.mark.parametrize("cls", message_types(), ids=lambda c: c.__name__)
def test_frozen_vector(cls):
    frozen = bytes.fromhex((VECTORS / f"{cls.__name__}.hex").read_text().strip())
    value = tlv.decode_tlv(frozen, cls)
    assert tlv.encode_tlv(value) == frozen
    regenerated = random_message(cls, random.Random(f"vector:{cls.__name__}"))
    assert regenerated == value


def test_every_type_has_a_vector():
    assert {p.stem for p in VECTORS.glob("*.hex")} == {c.__name__ for c in message_types()}
