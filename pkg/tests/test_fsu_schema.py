import dataclasses

import numpy as np
import pytest
import yaml

from conftest import GOLDEN_PACKETS, PacketFactory
from src.capture_ingest import DecodedPacket, LinkType, RawPacket
from src.errors import BadSpec, MalformedHeader, ShapeMismatch
from src.fsu_schema import (
    CLAMP_COUNTS,
    DEFAULT_SCHEMA_PATH,
    FsuDescriptor,
    FsuSchema,
    LocatorExtractor,
    NormRule,
    Predictability,
    Source,
    filter_to_generalizable,
    load_schema,
    normalize,
    normalize_columns,
    parse_packet,
)

GENERALIZABLE_NAMES = [
    "frame.time_delta", "frame.len", "direction", "ip.hdr_len", "ip.dsfield", "ip.len", "ip.flags.df",
    "ip.flags.mf", "ip.frag_offset", "ip.ttl", "ip.proto", "tcp.hdr_len", "tcp.flags.fin", "tcp.flags.syn",
    "tcp.flags.rst", "tcp.flags.psh", "tcp.flags.ack", "tcp.flags.urg", "tcp.flags.ece", "tcp.flags.cwr",
    "tcp.window_size", "tcp.urgent_pointer", "tcp.payload_len", "tcp.opt.mss_present", "tcp.opt.mss",
    "tcp.opt.wscale_present", "tcp.opt.wscale", "tcp.opt.sack_perm", "tcp.opt.ts_present", "tcp.opt.count",
    "udp.length", "udp.payload_len", "port.src_wellknown", "port.dst_wellknown", "port.src_registered",
    "port.dst_registered", "is_tcp", "is_udp", "frame.time_relative", "pkt.hdr_bytes_total", "pkt.is_pure_ack",
]


def test_default_catalog_partition(schema):
    assert len(schema.descriptors) == 53
    assert schema.N == 41
    assert [d.name for d in schema.columns()] == GENERALIZABLE_NAMES
    assert sorted(schema.members("random")) == sorted([
        "ip.id", "ip.checksum", "tcp.seq_raw", "tcp.ack_raw", "tcp.checksum", "udp.checksum",
        "tcp.opt.tsval", "tcp.opt.tsecr",
    ])
    assert schema.members(Predictability.NON_GENERALIZABLE) == [
        "ip.src", "ip.dst", "tcp.srcport_raw", "tcp.dstport_raw",
    ]
    assert len(schema.columns({"generalizable", "random"})) == 49


def test_schema_hash_is_stable_and_sensitive(schema):
    assert len(schema.schema_hash) == 32
    assert load_schema(DEFAULT_SCHEMA_PATH).schema_hash == schema.schema_hash
    shorter = FsuSchema(schema.descriptors[:-1])
    assert shorter.schema_hash != schema.schema_hash
    renormed = list(schema.descriptors)
    renormed[9] = dataclasses.replace(renormed[9], norm=NormRule("affine_bounded", lo=0, hi=128))
    assert FsuSchema(tuple(renormed)).schema_hash != schema.schema_hash


def test_schema_rejects_duplicates(schema):
    with pytest.raises(BadSpec):
        FsuSchema(schema.descriptors + schema.descriptors[:1])


def test_descriptor_needs_exactly_one_extraction():
    rule = NormRule("binary")
    with pytest.raises(BadSpec):
        FsuDescriptor("x", Source.IP_HEADER, Predictability.GENERALIZABLE, rule)
    with pytest.raises(BadSpec):
        FsuDescriptor("x", Source.IP_HEADER, Predictability.GENERALIZABLE, rule, locator=(8, 0, 8), derived="is_tcp")
    with pytest.raises(BadSpec):
        FsuDescriptor("x", Source.FRAME_METADATA, Predictability.GENERALIZABLE, rule, derived="no_such_rule")


@pytest.mark.parametrize("locator", [(19, 0, 16), (0, 8, 4), (2, 0, 0), (-1, 0, 8)])
def test_locator_outside_header_minimum_is_rejected(locator):
    with pytest.raises(BadSpec):
        LocatorExtractor(Source.IP_HEADER, *locator)


def test_norm_rule_validation():
    with pytest.raises(BadSpec):
        NormRule("sigmoid")
    with pytest.raises(BadSpec):
        NormRule("affine_bounded", lo=5, hi=5)
    with pytest.raises(BadSpec):
        NormRule("log1p_scaled", scale=0, cap=10)


def test_load_schema_rejects_malformed_files(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump({"version": 1, "fields": []}))
    with pytest.raises(BadSpec):
        load_schema(path)
    path.write_text(yaml.safe_dump({"descriptors": [{"name": "x", "source": "ip_header"}]}))
    with pytest.raises(BadSpec):
        load_schema(path)


def test_custom_schema_roundtrip(tmp_path, schema):
    document = schema.to_dict()
    document["descriptors"] = document["descriptors"][:5]
    path = tmp_path / "small.yaml"
    path.write_text(yaml.safe_dump(document))
    small = load_schema(path)
    assert small.names == schema.names[:5]
    assert small.schema_hash == FsuSchema(schema.descriptors[:5]).schema_hash


def test_normalize_rules():
    assert normalize(64, NormRule("affine_bounded", lo=0, hi=255)) == pytest.approx(64 / 255)
    assert normalize(60.0, NormRule("log1p_scaled", scale=0.001, cap=60.0)) == pytest.approx(1.0)
    assert normalize(0.0, NormRule("log1p_scaled", scale=64.0, cap=65535.0)) == 0.0
    assert normalize(1, NormRule("binary")) == 1.0
    assert normalize(0.25, NormRule("identity")) == 0.25
    out = normalize(np.array([0, 20, 60]), NormRule("affine_bounded", lo=20, hi=60))
    np.testing.assert_allclose(out, [0.0, 0.0, 1.0])


def test_normalize_clamps_and_counts():
    CLAMP_COUNTS.reset()
    rule = NormRule("affine_bounded", lo=0, hi=10)
    assert normalize(-5, rule, "x") == 0.0
    assert normalize(50, rule, "x") == 1.0
    assert normalize(2, NormRule("binary"), "flag") == 1.0
    assert normalize(np.array([3.0, 4.0]), rule, "x").tolist() == [0.3, 0.4]
    assert CLAMP_COUNTS.snapshot() == {"x": 2, "flag": 1}
    CLAMP_COUNTS.reset()
    assert CLAMP_COUNTS.snapshot() == {}


@pytest.mark.parametrize("name, packet, expected", GOLDEN_PACKETS, ids=[c[0] for c in GOLDEN_PACKETS])
def test_golden_packet_fields(schema, name, packet, expected):
    values, present = parse_packet(packet, True, None, schema)
    assert values.shape == present.shape == (53,)
    for field_name, value in expected.items():
        assert values[schema.names.index(field_name)] == value, field_name
    assert values[schema.names.index("direction")] == 1
    assert values[schema.names.index("frame.time_delta")] == 0.0


def test_golden_corpus_is_large_enough():
    assert len(GOLDEN_PACKETS) >= 20


def test_presence_flags(schema):
    udp = PacketFactory.udp_frame("10.0.0.3", "10.0.0.4", 40000, 5004, bytes(10))
    values, present = parse_packet(udp, False, None, schema)
    assert not present[schema.names.index("tcp.window_size")]
    assert not present[schema.names.index("tcp.opt.mss")]
    assert present[schema.names.index("udp.length")]
    assert present[schema.names.index("is_tcp")]
    assert values[schema.names.index("direction")] == 0
    assert values[schema.names.index("ip.hdr_len")] == 20


def test_timing_fields(schema):
    pkt = PacketFactory.tcp_frame("10.0.0.1", "10.0.0.2", 50000, 443, timestamp_ns=3_500_000_000)
    values, _ = parse_packet(pkt, True, 3_000_000_000, schema, first_timestamp_ns=1_000_000_000)
    assert values[schema.names.index("frame.time_delta")] == pytest.approx(0.5)
    assert values[schema.names.index("frame.time_relative")] == pytest.approx(2.5)


def test_locator_beyond_capture_is_malformed(schema):
    data = bytes(14) + PacketFactory.ipv4("10.0.0.1", "10.0.0.2", 6, b"")[:20] + bytes(10)
    raw = RawPacket(0, LinkType.ETHERNET, data, len(data), len(data))
    decoded = DecodedPacket(raw, 14, 34, 6, 1, 2, 1, 2)
    with pytest.raises(MalformedHeader):
        parse_packet(decoded, True, None, schema)


def test_filter_and_normalize_columns(schema):
    rows = np.stack([parse_packet(p, True, None, schema)[0] for _, p, _ in GOLDEN_PACKETS])
    projected = filter_to_generalizable(rows, schema)
    assert projected.shape == (len(GOLDEN_PACKETS), 41)
    normalized = normalize_columns(rows, schema)
    assert normalized.shape == (len(GOLDEN_PACKETS), 41)
    assert normalized.min() >= 0.0 and normalized.max() <= 1.0
    with pytest.raises(ShapeMismatch):
        filter_to_generalizable(rows[:, :40], schema)
