import ipaddress
import struct

import numpy as np
import pytest

from src.capture_ingest import LinkType, RawPacket, write_capture
from src.fsu_schema import default_schema
from src.model_building import FlowSemModel, Hyper
from src.synth_corpus import load_synth_spec, synth_corpus

TH_FIN, TH_SYN, TH_RST, TH_PUSH, TH_ACK, TH_URG, TH_ECE, TH_CWR = 0x01, 0x02, 0x04, 0x08, 0x10, 0x20, 0x40, 0x80

SYN_OPTIONS = (
    struct.pack("!BBH", 2, 4, 1460)            # MSS
    + struct.pack("!BB", 4, 2)                 # SACK permitted
    + struct.pack("!BBII", 8, 10, 0x01020304, 0)  # timestamps
    + struct.pack("!B", 1)                     # NOP
    + struct.pack("!BBB", 3, 3, 7)             # window scale
)


class PacketFactory:
    """Hand-assembled frames; checksums are fixed markers, never computed."""

    @staticmethod
    def ipv4(src, dst, proto, payload, ttl=64, ip_id=0x1234, df=True, mf=False, frag_offset=0, dsfield=0,
             options=b"", ihl=None):
        ihl = 5 + len(options) // 4 if ihl is None else ihl
        flags = (0x4000 if df else 0) | (0x2000 if mf else 0) | frag_offset
        header = struct.pack(
            "!BBHHHBBHII", (4 << 4) | ihl, dsfield, 20 + len(options) + len(payload), ip_id, flags, ttl, proto,
            0xBEEF, int(ipaddress.IPv4Address(src)), int(ipaddress.IPv4Address(dst)),
        )
        return header + options + payload

    @staticmethod
    def tcp(sport, dport, flags=TH_ACK, seq=1000, ack=0, window=64240, options=b"", payload=b"", urgent=0,
            data_offset=None):
        data_offset = (20 + len(options)) // 4 if data_offset is None else data_offset
        header = struct.pack("!HHIIBBHHH", sport, dport, seq, ack, data_offset << 4, flags, window, 0xCAFE, urgent)
        return header + options + payload

    @staticmethod
    def udp(sport, dport, payload=b""):
        return struct.pack("!HHHH", sport, dport, 8 + len(payload), 0x1111) + payload

    @staticmethod
    def ether(ip, ether_type=0x0800, vlan=None):
        macs = bytes.fromhex("020000000002") + bytes.fromhex("020000000001")
        tag = struct.pack("!HH", 0x8100, vlan) if vlan is not None else b""
        return macs + tag + struct.pack("!H", ether_type) + ip

    @staticmethod
    def sll(ip, protocol=0x0800):
        return struct.pack("!HHH8sH", 0, 1, 6, b"\x02\x00\x00\x00\x00\x01\x00\x00", protocol) + ip

    @staticmethod
    def raw(data, timestamp_ns=1_000_000_000, link_type=LinkType.ETHERNET, original_length=None):
        return RawPacket(timestamp_ns, link_type, data, len(data), len(data) if original_length is None else original_length)

    @classmethod
    def tcp_frame(cls, src, dst, sport, dport, timestamp_ns=1_000_000_000, **tcp_args):
        ip = cls.ipv4(src, dst, 6, cls.tcp(sport, dport, **tcp_args))
        return cls.raw(cls.ether(ip), timestamp_ns)

    @classmethod
    def udp_frame(cls, src, dst, sport, dport, payload=b"", timestamp_ns=1_000_000_000):
        return cls.raw(cls.ether(cls.ipv4(src, dst, 17, cls.udp(sport, dport, payload))), timestamp_ns)

    @staticmethod
    def pcapng(packets, link_type=LinkType.ETHERNET, tsresol=9, extra_block=True):
        """SHB, one IDB with if_tsresol, optionally an unknown block, then one EPB per packet."""

        def block(block_type, body):
            total = 12 + len(body)
            return struct.pack("<II", block_type, total) + body + struct.pack("<I", total)

        out = block(0x0A0D0D0A, struct.pack("<IHHq", 0x1A2B3C4D, 1, 0, -1))
        idb_options = struct.pack("<HHB3x", 9, 1, tsresol) + struct.pack("<HH", 0, 0)
        out += block(0x00000001, struct.pack("<HHI", int(link_type), 0, 262144) + idb_options)
        if extra_block:
            out += block(0x00000004, struct.pack("<HH", 0, 0))
        for pkt in packets:
            ticks = pkt.timestamp_ns // 10 ** (9 - tsresol)
            padded = pkt.data + bytes(-len(pkt.data) % 4)
            body = struct.pack("<IIIII", 0, ticks >> 32, ticks & 0xFFFFFFFF, pkt.capture_length,
                               pkt.original_length) + padded
            out += block(0x00000006, body)
        return out


def _golden():
    pf = PacketFactory
    A, B, C, D = "10.0.0.1", "10.0.0.2", "10.0.0.3", "10.0.0.4"

    def eth_tcp(sport=50000, dport=443, src=A, dst=B, ip_args=None, **tcp_args):
        ip = pf.ipv4(src, dst, 6, pf.tcp(sport, dport, **tcp_args), **(ip_args or {}))
        return pf.raw(pf.ether(ip))

    cases = [
        ("tcp_syn_options", eth_tcp(flags=TH_SYN, options=SYN_OPTIONS), {
            "frame.len": 74, "ip.hdr_len": 20, "ip.len": 60, "ip.ttl": 64, "ip.proto": 6, "ip.flags.df": 1,
            "tcp.hdr_len": 40, "tcp.flags.syn": 1, "tcp.flags.ack": 0, "tcp.window_size": 64240,
            "tcp.opt.mss_present": 1, "tcp.opt.mss": 1460, "tcp.opt.wscale_present": 1, "tcp.opt.wscale": 7,
            "tcp.opt.sack_perm": 1, "tcp.opt.ts_present": 1, "tcp.opt.count": 4, "tcp.opt.tsval": 0x01020304,
            "tcp.opt.tsecr": 0, "port.src_wellknown": 0, "port.src_registered": 0, "port.dst_wellknown": 1,
            "is_tcp": 1, "is_udp": 0, "pkt.hdr_bytes_total": 60, "pkt.is_pure_ack": 0, "ip.id": 0x1234,
            "ip.checksum": 0xBEEF, "tcp.checksum": 0xCAFE, "tcp.seq_raw": 1000, "ip.src": 0x0A000001,
            "ip.dst": 0x0A000002, "tcp.srcport_raw": 50000, "tcp.dstport_raw": 443,
        }),
        ("tcp_synack_options", eth_tcp(443, 50000, B, A, flags=TH_SYN | TH_ACK, ack=1001, options=SYN_OPTIONS), {
            "tcp.flags.syn": 1, "tcp.flags.ack": 1, "tcp.ack_raw": 1001, "port.src_wellknown": 1,
            "port.dst_wellknown": 0, "pkt.is_pure_ack": 0,
        }),
        ("tcp_pure_ack", eth_tcp(flags=TH_ACK, ack=5), {
            "pkt.is_pure_ack": 1, "tcp.hdr_len": 20, "pkt.hdr_bytes_total": 40, "tcp.opt.count": 0,
            "tcp.opt.mss_present": 0, "tcp.opt.mss": 0, "tcp.payload_len": 0,
        }),
        ("tcp_psh_ack_payload", eth_tcp(flags=TH_PUSH | TH_ACK, payload=bytes(100)), {
            "tcp.flags.psh": 1, "tcp.payload_len": 100, "ip.len": 140, "frame.len": 154, "pkt.is_pure_ack": 0,
        }),
        ("tcp_fin_ack", eth_tcp(flags=TH_FIN | TH_ACK), {"tcp.flags.fin": 1, "pkt.is_pure_ack": 0}),
        ("tcp_rst", eth_tcp(flags=TH_RST), {"tcp.flags.rst": 1, "tcp.flags.ack": 0, "pkt.is_pure_ack": 0}),
        ("tcp_urgent", eth_tcp(flags=TH_URG | TH_ACK, urgent=7, payload=bytes(10)), {
            "tcp.flags.urg": 1, "tcp.urgent_pointer": 7, "tcp.payload_len": 10, "pkt.is_pure_ack": 0,
        }),
        ("tcp_ece_cwr", eth_tcp(flags=TH_CWR | TH_ECE | TH_ACK), {
            "tcp.flags.cwr": 1, "tcp.flags.ece": 1, "tcp.flags.ack": 1, "pkt.is_pure_ack": 1,
        }),
        ("tcp_window_zero", eth_tcp(window=0), {"tcp.window_size": 0}),
        ("tcp_mss_only", eth_tcp(flags=TH_SYN, options=struct.pack("!BBH", 2, 4, 1400)), {
            "tcp.opt.mss": 1400, "tcp.opt.count": 1, "tcp.opt.wscale_present": 0, "tcp.hdr_len": 24,
        }),
        ("tcp_eol_padding", eth_tcp(flags=TH_SYN, options=struct.pack("!BBH", 2, 4, 536) + bytes(4)), {
            "tcp.opt.mss": 536, "tcp.opt.count": 1, "tcp.hdr_len": 28, "pkt.hdr_bytes_total": 48,
        }),
        ("tcp_timestamps_only", eth_tcp(options=b"\x01\x01" + struct.pack("!BBII", 8, 10, 5, 9)), {
            "tcp.opt.ts_present": 1, "tcp.opt.tsval": 5, "tcp.opt.tsecr": 9, "tcp.opt.count": 1,
            "tcp.opt.mss_present": 0,
        }),
        ("ip_dsfield_ttl1", eth_tcp(ip_args={"dsfield": 0xB8, "ttl": 1}), {"ip.dsfield": 0xB8, "ip.ttl": 1}),
        ("ip_no_df", eth_tcp(ip_args={"df": False}), {"ip.flags.df": 0, "ip.flags.mf": 0}),
        ("ip_first_fragment", eth_tcp(ip_args={"mf": True}), {"ip.flags.mf": 1, "ip.frag_offset": 0}),
        ("ip_options", eth_tcp(ip_args={"options": b"\x01\x01\x01\x01"}), {
            "ip.hdr_len": 24, "pkt.hdr_bytes_total": 44, "tcp.flags.ack": 1,
        }),
        ("udp_rtp", pf.udp_frame(C, D, 40000, 5004, bytes(172)), {
            "udp.length": 180, "udp.payload_len": 172, "is_udp": 1, "is_tcp": 0, "tcp.hdr_len": 0,
            "tcp.payload_len": 0, "pkt.hdr_bytes_total": 28, "port.src_registered": 1, "port.dst_registered": 1,
            "udp.checksum": 0x1111, "pkt.is_pure_ack": 0, "ip.proto": 17,
        }),
        ("udp_empty_mdns", pf.udp_frame(C, D, 5353, 5353), {"udp.length": 8, "udp.payload_len": 0}),
        ("udp_ntp", pf.udp_frame(C, D, 123, 123, bytes(48)), {
            "port.src_wellknown": 1, "port.dst_wellknown": 1, "udp.payload_len": 48,
        }),
        ("vlan_tcp", pf.raw(pf.ether(pf.ipv4(A, B, 6, pf.tcp(50000, 443)), vlan=100)), {
            "ip.ttl": 64, "tcp.flags.ack": 1, "frame.len": 58, "tcp.srcport_raw": 50000,
        }),
        ("sll_tcp", pf.raw(pf.sll(pf.ipv4(A, B, 6, pf.tcp(50000, 80, flags=TH_SYN), ttl=128)),
                           link_type=LinkType.LINUX_COOKED), {
            "tcp.flags.syn": 1, "ip.ttl": 128, "port.dst_wellknown": 1,
        }),
        ("raw_ipv4_udp", pf.raw(pf.ipv4(C, D, 17, pf.udp(40000, 40001, bytes(20))), link_type=LinkType.RAW_IPV4), {
            "udp.length": 28, "frame.len": 48, "is_udp": 1,
        }),
        ("snaplen_truncated_payload", pf.raw(pf.ether(pf.ipv4(A, B, 6, pf.tcp(50000, 443, flags=TH_PUSH | TH_ACK))),
                                            original_length=1514), {
            "frame.len": 1514, "tcp.payload_len": 0,
        }),
    ]
    return cases


GOLDEN_PACKETS = _golden()


@pytest.fixture
def pf():
    return PacketFactory


@pytest.fixture(scope="session")
def schema():
    return default_schema()


@pytest.fixture
def two_flow_packets():
    """A TCP handshake and a UDP exchange, interleaved in time."""
    pf = PacketFactory
    base = 1_700_000_000_000_000_000
    return [
        pf.tcp_frame("10.0.0.1", "10.0.0.2", 50000, 443, base, flags=TH_SYN, options=SYN_OPTIONS),
        pf.udp_frame("10.0.0.3", "10.0.0.4", 40000, 5004, bytes(32), base + 500_000),
        pf.tcp_frame("10.0.0.2", "10.0.0.1", 443, 50000, base + 1_000_000, flags=TH_SYN | TH_ACK, ack=1001,
                     options=SYN_OPTIONS),
        pf.udp_frame("10.0.0.4", "10.0.0.3", 5004, 40000, bytes(64), base + 1_500_000),
        pf.tcp_frame("10.0.0.1", "10.0.0.2", 50000, 443, base + 2_000_000, flags=TH_ACK, ack=1),
        pf.udp_frame("10.0.0.3", "10.0.0.4", 40000, 5004, bytes(16), base + 2_500_000),
    ]


@pytest.fixture
def golden_pcap(tmp_path, two_flow_packets):
    path = tmp_path / "golden.pcap"
    write_capture(path, two_flow_packets)
    return path


@pytest.fixture
def tiny_hyper():
    return Hyper(d=8, L=1, h=2, T=4, N=3, C=2)


@pytest.fixture
def tiny_model(tiny_hyper):
    return FlowSemModel.init(7, tiny_hyper)


@pytest.fixture
def tiny_batch(tiny_hyper):
    rng = np.random.default_rng(0)
    x = rng.random((2, tiny_hyper.T, tiny_hyper.N))
    valid = np.array([[True, True, True, False], [True, True, False, False]])
    return x, valid


@pytest.fixture(scope="session")
def two_class_dataset():
    """Labeled planted corpus, all 53 columns, T=10."""
    return synth_corpus(load_synth_spec("two_class"), 80, seed=7, T=10, admit={"generalizable", "random",
                                                                                "non_generalizable"})


@pytest.fixture(scope="session")
def two_class_generalizable():
    return synth_corpus(load_synth_spec("two_class"), 80, seed=7, T=10)
