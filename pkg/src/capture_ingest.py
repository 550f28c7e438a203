import hashlib
import ipaddress
import logging
import os
import struct
from abc import ABC, abstractmethod
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import IntEnum
from typing import BinaryIO, Iterable, Iterator, Optional

import dpkt

from src.errors import (
    AnonymizationCollision,
    ConfigError,
    MalformedHeader,
    TruncatedRecord,
    UnsupportedLinkType,
    UnsupportedMagic,
)

# Setup logging configuration
logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(levelname)s - %(message)s")

PCAP_MAGIC_MICRO = 0xA1B2C3D4
PCAP_MAGIC_NANO = 0xA1B23C4D
PCAPNG_SHB_TYPE = 0x0A0D0D0A
PCAPNG_BYTE_ORDER_MAGIC = 0x1A2B3C4D
PCAPNG_IDB_TYPE = 0x00000001
PCAPNG_EPB_TYPE = 0x00000006
PCAPNG_MIN_SHB_LEN = 28
PCAPNG_EPB_FIXED_LEN = 20

SLL_HEADER_LEN = 16
ETH_HEADER_LEN = 14
VLAN_TAG_LEN = 4

DEFAULT_DROP_UDP_PORTS = {53: "dns", 67: "dhcp", 68: "dhcp"}


class LinkType(IntEnum):
    ETHERNET = 1
    RAW_IPV4 = 101
    LINUX_COOKED = 113


@dataclass(frozen=True)
class RawPacket:
    """One captured frame, before any protocol decoding."""

    timestamp_ns: int
    link_type: LinkType
    data: bytes
    capture_length: int
    original_length: int

    def __post_init__(self):
        if self.capture_length != len(self.data):
            raise MalformedHeader(
                f"capture_length {self.capture_length} != {len(self.data)} bytes present"
            )
        if self.capture_length > self.original_length:
            raise MalformedHeader(
                f"capture_length {self.capture_length} exceeds original_length {self.original_length}"
            )


@dataclass(frozen=True)
class DecodedPacket:
    """Offsets and endpoints of a packet that passed the protocol filter."""

    raw: RawPacket
    ip_offset: int
    transport_offset: int
    protocol: int
    src_ip: int
    dst_ip: int
    src_port: int
    dst_port: int


@dataclass(frozen=True)
class FilterDecision:
    keep: bool
    reason: Optional[str] = None
    packet: Optional[DecodedPacket] = None


@dataclass(frozen=True, order=True)
class FlowKey:
    ip_a: ipaddress.IPv4Address
    port_a: int
    ip_b: ipaddress.IPv4Address
    port_b: int
    protocol: int

    @classmethod
    def canonical(cls, src_ip, src_port, dst_ip, dst_port, protocol) -> "FlowKey":
        a = (ipaddress.IPv4Address(src_ip), src_port)
        b = (ipaddress.IPv4Address(dst_ip), dst_port)
        if b < a:
            a, b = b, a
        return cls(ip_a=a[0], port_a=a[1], ip_b=b[0], port_b=b[1], protocol=protocol)


@dataclass
class Flow:
    key: FlowKey
    packets: list = field(default_factory=list)
    directions: list = field(default_factory=list)
    initiator: Optional[tuple] = None
    flow_id: int = 0


@dataclass
class IngestReport:
    files: int = 0
    packets_read: int = 0
    packets_kept: int = 0
    dropped: Counter = field(default_factory=Counter)
    flows: int = 0

    def merge(self, other: "IngestReport") -> "IngestReport":
        return IngestReport(
            files=self.files + other.files,
            packets_read=self.packets_read + other.packets_read,
            packets_kept=self.packets_kept + other.packets_kept,
            dropped=self.dropped + other.dropped,
            flows=self.flows + other.flows,
        )

    def to_dict(self) -> dict:
        return {
            "files": self.files,
            "packets_read": self.packets_read,
            "kept": self.packets_kept,
            "dropped": dict(sorted(self.dropped.items())),
            "flows": self.flows,
        }


def _link_type(value: int) -> LinkType:
    try:
        return LinkType(value & 0xFFFF)
    except ValueError:
        raise UnsupportedLinkType(f"Unsupported link type: {value}") from None


def _read_exact(fp: BinaryIO, size: int, what: str) -> Optional[bytes]:
    """Read exactly `size` bytes; None on clean EOF, TruncatedRecord on a partial read."""
    data = fp.read(size)
    if not data:
        return None
    if len(data) != size:
        raise TruncatedRecord(f"{what}: expected {size} bytes, found {len(data)}")
    return data


# Abstract Base Class for Capture Readers
# ---------------------------------------
# A reader turns one capture file into a stream of RawPacket in file order.
class CaptureReader(ABC):
    @abstractmethod
    def read(self, fp: BinaryIO, limit: Optional[int] = None) -> Iterator[RawPacket]:
        """
        Yields the packets of an opened capture file.

        Parameters:
        fp (BinaryIO): The capture file, positioned at offset 0.
        limit (int): Stop after this many packets when given.

        Returns:
        Iterator[RawPacket]: Packets in file order.
        """
        pass


# Concrete Reader for classic pcap (both byte orders, micro- and nanosecond)
class PcapReader(CaptureReader):
    def read(self, fp: BinaryIO, limit: Optional[int] = None) -> Iterator[RawPacket]:
        header = _read_exact(fp, 24, "pcap global header")
        if header is None:
            raise UnsupportedMagic("Empty capture file")
        magic_le = struct.unpack("<I", header[:4])[0]
        if magic_le in (PCAP_MAGIC_MICRO, PCAP_MAGIC_NANO):
            endian = "<"
        else:
            endian = ">"
        magic = struct.unpack(endian + "I", header[:4])[0]
        if magic not in (PCAP_MAGIC_MICRO, PCAP_MAGIC_NANO):
            raise UnsupportedMagic(f"Not a pcap file (magic 0x{magic_le:08x})")
        frac_to_ns = 1 if magic == PCAP_MAGIC_NANO else 1000
        _, _, _, _, _, network = struct.unpack(endian + "HHiIII", header[4:])
        link_type = _link_type(network)
        record = struct.Struct(endian + "IIII")

        count = 0
        while limit is None or count < limit:
            raw_header = _read_exact(fp, record.size, "pcap record header")
            if raw_header is None:
                return
            ts_sec, ts_frac, incl_len, orig_len = record.unpack(raw_header)
            data = fp.read(incl_len)
            if len(data) != incl_len:
                raise TruncatedRecord(
                    f"Record claims {incl_len} bytes but only {len(data)} remain"
                )
            yield RawPacket(
                timestamp_ns=ts_sec * 1_000_000_000 + ts_frac * frac_to_ns,
                link_type=link_type,
                data=data,
                capture_length=incl_len,
                original_length=orig_len,
            )
            count += 1


# Concrete Reader for pcapng (SHB, IDB, EPB; every other block is skipped)
class PcapngReader(CaptureReader):
    def read(self, fp: BinaryIO, limit: Optional[int] = None) -> Iterator[RawPacket]:
        endian = "<"
        interfaces = []
        count = 0
        while limit is None or count < limit:
            head = _read_exact(fp, 8, "pcapng block header")
            if head is None:
                return
            block_type = struct.unpack(endian + "I", head[:4])[0]
            if block_type == PCAPNG_SHB_TYPE:
                bom = _read_exact(fp, 4, "pcapng byte-order magic")
                if bom is None:
                    raise TruncatedRecord("Section header ends before its byte-order magic")
                endian = "<" if struct.unpack("<I", bom)[0] == PCAPNG_BYTE_ORDER_MAGIC else ">"
                if struct.unpack(endian + "I", bom)[0] != PCAPNG_BYTE_ORDER_MAGIC:
                    raise UnsupportedMagic("Bad pcapng byte-order magic")
                total_len = struct.unpack(endian + "I", head[4:])[0]
                if total_len < PCAPNG_MIN_SHB_LEN or total_len % 4:
                    raise TruncatedRecord(f"Invalid pcapng section header length {total_len}")
                self._read_body(fp, total_len - 12)
                interfaces = []
                continue

            total_len = struct.unpack(endian + "I", head[4:])[0]
            if total_len < 12 or total_len % 4:
                raise TruncatedRecord(f"Invalid pcapng block length {total_len}")
            body = self._read_body(fp, total_len - 8)
            if block_type == PCAPNG_IDB_TYPE:
                interfaces.append(self._parse_interface(body, endian))
            elif block_type == PCAPNG_EPB_TYPE:
                if len(body) < PCAPNG_EPB_FIXED_LEN + 4:
                    raise TruncatedRecord(f"Enhanced packet block body of {len(body)} bytes is too short")
                iface, ts_high, ts_low, cap_len, orig_len = struct.unpack(
                    endian + "IIIII", body[:20]
                )
                if iface >= len(interfaces):
                    raise MalformedHeader(f"Packet references unknown interface {iface}")
                if 20 + cap_len > len(body) - 4:
                    raise TruncatedRecord(f"Enhanced packet claims {cap_len} bytes past its block")
                link_type, to_ns = interfaces[iface]
                yield RawPacket(
                    timestamp_ns=to_ns((ts_high << 32) | ts_low),
                    link_type=link_type,
                    data=bytes(body[20 : 20 + cap_len]),
                    capture_length=cap_len,
                    original_length=orig_len,
                )
                count += 1

    @staticmethod
    def _read_body(fp: BinaryIO, size: int) -> bytes:
        body = fp.read(size)
        if len(body) != size:
            raise TruncatedRecord(f"pcapng block claims {size} more bytes, {len(body)} remain")
        return body

    @staticmethod
    def _parse_interface(body: bytes, endian: str):
        if len(body) < 12:
            raise TruncatedRecord(f"Interface description block body of {len(body)} bytes is too short")
        link_type = _link_type(struct.unpack(endian + "H", body[:2])[0])
        resolution = 6
        offset = 8
        # options region ends 4 bytes before the block end (trailing length)
        while offset + 4 <= len(body) - 4:
            code, length = struct.unpack(endian + "HH", body[offset : offset + 4])
            if code == 0:
                break
            if offset + 4 + length > len(body) - 4:
                raise MalformedHeader(f"Interface option {code} runs past its block")
            if code == 9 and length >= 1:
                resolution = body[offset + 4]
            offset += 4 + ((length + 3) // 4) * 4

        if resolution & 0x80:
            power = resolution & 0x7F

            def to_ns(ticks: int) -> int:
                return (ticks * 1_000_000_000) >> power

        elif resolution <= 9:
            factor = 10 ** (9 - resolution)

            def to_ns(ticks: int) -> int:
                return ticks * factor

        else:
            divisor = 10 ** (resolution - 9)

            def to_ns(ticks: int) -> int:
                return ticks // divisor

        return link_type, to_ns


# Factory that picks a CaptureReader from the file's magic number
class CaptureReaderFactory:
    @staticmethod
    def get_reader(magic: bytes) -> CaptureReader:
        """Returns the appropriate CaptureReader for the first four bytes of a file."""
        if len(magic) < 4:
            raise UnsupportedMagic("File too short to hold a capture magic number")
        value = struct.unpack("<I", magic[:4])[0]
        swapped = struct.unpack(">I", magic[:4])[0]
        if value in (PCAP_MAGIC_MICRO, PCAP_MAGIC_NANO) or swapped in (
            PCAP_MAGIC_MICRO,
            PCAP_MAGIC_NANO,
        ):
            return PcapReader()
        if value == PCAPNG_SHB_TYPE:
            return PcapngReader()
        raise UnsupportedMagic(f"Unknown capture magic 0x{value:08x}")


def read_capture(path: str, limit: Optional[int] = None) -> Iterator[RawPacket]:
    """Stream the packets of a pcap or pcapng file in file order."""
    with open(path, "rb") as fp:
        reader = CaptureReaderFactory.get_reader(fp.read(4))
        fp.seek(0)
        yield from reader.read(fp, limit)


def write_capture(
    path: str,
    packets: Iterable[RawPacket],
    link_type: LinkType = LinkType.ETHERNET,
    nanosecond: bool = True,
    big_endian: bool = False,
) -> int:
    """Write packets as a classic pcap file. Returns the number of records written."""
    endian = ">" if big_endian else "<"
    magic = PCAP_MAGIC_NANO if nanosecond else PCAP_MAGIC_MICRO
    written = 0
    with open(path, "wb") as fp:
        fp.write(struct.pack(endian + "IHHiIII", magic, 2, 4, 0, 0, 262144, int(link_type)))
        for pkt in packets:
            seconds, remainder = divmod(pkt.timestamp_ns, 1_000_000_000)
            frac = remainder if nanosecond else remainder // 1000
            fp.write(
                struct.pack(endian + "IIII", seconds, frac, pkt.capture_length, pkt.original_length)
            )
            fp.write(pkt.data)
            written += 1
    logging.info(f"Wrote {written} packets to {path}.")
    return written


def _network_offset(pkt: RawPacket):
    """Returns (offset of the IPv4 header, drop reason)."""
    data = pkt.data
    if pkt.link_type == LinkType.ETHERNET:
        if len(data) < ETH_HEADER_LEN:
            return None, "truncated_link"
        offset = 12
        ether_type = struct.unpack_from("!H", data, offset)[0]
        while ether_type == dpkt.ethernet.ETH_TYPE_8021Q:
            offset += VLAN_TAG_LEN
            if len(data) < offset + 2:
                return None, "truncated_link"
            ether_type = struct.unpack_from("!H", data, offset)[0]
        offset += 2
    elif pkt.link_type == LinkType.LINUX_COOKED:
        if len(data) < SLL_HEADER_LEN:
            return None, "truncated_link"
        ether_type = struct.unpack_from("!H", data, 14)[0]
        offset = SLL_HEADER_LEN
    else:
        if not data:
            return None, "truncated_link"
        version = data[0] >> 4
        ether_type = dpkt.ethernet.ETH_TYPE_IP if version == 4 else (
            dpkt.ethernet.ETH_TYPE_IP6 if version == 6 else 0
        )
        offset = 0

    if ether_type == dpkt.ethernet.ETH_TYPE_IP:
        return offset, None
    if ether_type == dpkt.ethernet.ETH_TYPE_ARP:
        return None, "arp"
    if ether_type == dpkt.ethernet.ETH_TYPE_IP6:
        return None, "ipv6"
    return None, "non_ipv4"


class ProtocolFilter:
    """Keeps IPv4 TCP/UDP packets and drops extraneous protocols with a counted reason."""

    def __init__(self, drop_udp_ports: Optional[dict] = None):
        self.drop_udp_ports = dict(
            DEFAULT_DROP_UDP_PORTS if drop_udp_ports is None else drop_udp_ports
        )

    def decide(self, pkt: RawPacket) -> FilterDecision:
        ip_offset, reason = _network_offset(pkt)
        if ip_offset is None:
            return FilterDecision(False, reason)
        data = pkt.data
        if len(data) < ip_offset + 20:
            return FilterDecision(False, "truncated_ip")
        if data[ip_offset] >> 4 != 4:
            return FilterDecision(False, "non_ipv4")
        ihl = data[ip_offset] & 0x0F
        if ihl < 5:
            return FilterDecision(False, "malformed_ip")
        if len(data) < ip_offset + ihl * 4:
            return FilterDecision(False, "truncated_ip")
        protocol = data[ip_offset + 9]
        if protocol not in (dpkt.ip.IP_PROTO_TCP, dpkt.ip.IP_PROTO_UDP):
            return FilterDecision(False, "non_tcp_udp")
        frag_offset = struct.unpack_from("!H", data, ip_offset + 6)[0] & 0x1FFF
        if frag_offset:
            return FilterDecision(False, "ip_fragment")

        transport_offset = ip_offset + ihl * 4
        if protocol == dpkt.ip.IP_PROTO_TCP:
            if len(data) < transport_offset + 20:
                return FilterDecision(False, "truncated_transport")
            data_offset = data[transport_offset + 12] >> 4
            if data_offset < 5 or len(data) < transport_offset + data_offset * 4:
                return FilterDecision(False, "malformed_tcp")
        elif len(data) < transport_offset + 8:
            return FilterDecision(False, "truncated_transport")

        src_port, dst_port = struct.unpack_from("!HH", data, transport_offset)
        if protocol == dpkt.ip.IP_PROTO_UDP:
            for port in (src_port, dst_port):
                if port in self.drop_udp_ports:
                    return FilterDecision(False, self.drop_udp_ports[port])

        src_ip, dst_ip = struct.unpack_from("!II", data, ip_offset + 12)
        decoded = DecodedPacket(
            raw=pkt,
            ip_offset=ip_offset,
            transport_offset=transport_offset,
            protocol=protocol,
            src_ip=src_ip,
            dst_ip=dst_ip,
            src_port=src_port,
            dst_port=dst_port,
        )
        return FilterDecision(True, None, decoded)


_DEFAULT_FILTER = ProtocolFilter()


def filter_protocol(pkt: RawPacket) -> FilterDecision:
    """Keep/drop decision for one packet under the default drop list."""
    return _DEFAULT_FILTER.decide(pkt)


def decode_packet(pkt: RawPacket) -> DecodedPacket:
    """Decode a packet known to pass the filter; MalformedHeader otherwise."""
    decision = ProtocolFilter(drop_udp_ports={}).decide(pkt)
    if not decision.keep:
        raise MalformedHeader(f"Packet cannot be decoded: {decision.reason}")
    return decision.packet


class IpAnonymizer:
    """Keyed permutation of the IPv4 address space (4-round Feistel over 16-bit halves)."""

    ROUNDS = 4

    def __init__(self, salt: int):
        self.salt = salt
        self._key = (salt & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "big")
        self._forward = {}
        self._reverse = {}

    def _round(self, half: int, round_index: int) -> int:
        digest = hashlib.blake2b(
            half.to_bytes(2, "big") + bytes([round_index]), key=self._key, digest_size=2
        ).digest()
        return int.from_bytes(digest, "big")

    def permute(self, addr: int) -> int:
        left, right = addr >> 16, addr & 0xFFFF
        for r in range(self.ROUNDS):
            left, right = right, left ^ self._round(right, r)
        return (left << 16) | right

    def anonymize(self, addr) -> ipaddress.IPv4Address:
        addr = int(ipaddress.IPv4Address(addr))
        token = self._forward.get(addr)
        if token is None:
            token = self.permute(addr)
            previous = self._reverse.setdefault(token, addr)
            if previous != addr:
                raise AnonymizationCollision(
                    f"Addresses {ipaddress.IPv4Address(previous)} and "
                    f"{ipaddress.IPv4Address(addr)} map to one token"
                )
            self._forward[addr] = token
        return ipaddress.IPv4Address(token)

    def anonymize_packet(self, decoded: DecodedPacket) -> DecodedPacket:
        """Rewrite source and destination address bytes of a decoded packet."""
        src = int(self.anonymize(decoded.src_ip))
        dst = int(self.anonymize(decoded.dst_ip))
        data = bytearray(decoded.raw.data)
        struct.pack_into("!II", data, decoded.ip_offset + 12, src, dst)
        raw = RawPacket(
            timestamp_ns=decoded.raw.timestamp_ns,
            link_type=decoded.raw.link_type,
            data=bytes(data),
            capture_length=decoded.raw.capture_length,
            original_length=decoded.raw.original_length,
        )
        return DecodedPacket(
            raw=raw,
            ip_offset=decoded.ip_offset,
            transport_offset=decoded.transport_offset,
            protocol=decoded.protocol,
            src_ip=src,
            dst_ip=dst,
            src_port=decoded.src_port,
            dst_port=decoded.dst_port,
        )


def anonymize_ip(addr, salt: int) -> ipaddress.IPv4Address:
    """Deterministic keyed token for one IPv4 address."""
    return IpAnonymizer(salt).anonymize(addr)


def assemble_flows(packets: Iterable) -> list:
    """
    Groups packets into bidirectional 5-tuple flows.

    Parameters:
    packets (Iterable): RawPacket or DecodedPacket items that pass the protocol filter.

    Returns:
    list: Flows ordered by their first packet, packets sorted by (timestamp, file order).
    """
    grouped = {}
    for index, item in enumerate(packets):
        decoded = item if isinstance(item, DecodedPacket) else decode_packet(item)
        key = FlowKey.canonical(
            decoded.src_ip, decoded.src_port, decoded.dst_ip, decoded.dst_port, decoded.protocol
        )
        grouped.setdefault(key, []).append((decoded.raw.timestamp_ns, index, decoded))

    flows = []
    for key, members in grouped.items():
        members.sort(key=lambda m: (m[0], m[1]))
        first = members[0][2]
        initiator = (ipaddress.IPv4Address(first.src_ip), first.src_port)
        flow = Flow(key=key, initiator=initiator)
        for _, _, decoded in members:
            flow.packets.append(decoded.raw)
            flow.directions.append(
                (ipaddress.IPv4Address(decoded.src_ip), decoded.src_port) == initiator
            )
        flows.append((members[0][0], members[0][1], flow))

    flows.sort(key=lambda f: (f[0], f[1]))
    return [flow for _, _, flow in flows]


# Context Class for Capture Ingestion
# -----------------------------------
# Reads a capture, filters extraneous protocols, anonymizes addresses and
# assembles flows, counting every dropped packet by reason.
class CaptureIngestor:
    def __init__(self, salt: int, packet_filter: Optional[ProtocolFilter] = None):
        self.salt = salt
        self._filter = packet_filter or ProtocolFilter()

    def set_filter(self, packet_filter: ProtocolFilter):
        logging.info("Switching protocol filter.")
        self._filter = packet_filter

    def ingest(self, path: str, limit: Optional[int] = None):
        logging.info(f"Ingesting capture {path}.")
        anonymizer = IpAnonymizer(self.salt)
        report = IngestReport(files=1)
        kept = []
        for pkt in read_capture(path, limit):
            report.packets_read += 1
            decision = self._filter.decide(pkt)
            if not decision.keep:
                report.dropped[decision.reason] += 1
                continue
            kept.append(anonymizer.anonymize_packet(decision.packet))
        report.packets_kept = len(kept)
        flows = assemble_flows(kept)
        report.flows = len(flows)
        if report.dropped:
            logging.info(f"Dropped packets by reason: {dict(report.dropped)}")
        logging.info(f"Ingestion of {path} completed: {report.packets_kept} packets, {report.flows} flows.")
        return flows, report


def _ingest_one(args):
    path, salt, drop_udp_ports, limit = args
    return CaptureIngestor(salt, ProtocolFilter(drop_udp_ports)).ingest(path, limit)


def ingest_captures(
    paths: list,
    salt: int,
    drop_udp_ports: Optional[dict] = None,
    workers: int = 1,
    limit: Optional[int] = None,
):
    """Ingest several captures, in parallel when workers > 1, merged in the given order."""
    if not paths:
        raise ConfigError("no inputs")
    jobs = [(os.fspath(p), salt, drop_udp_ports, limit) for p in paths]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_ingest_one, jobs))
    else:
        results = [_ingest_one(job) for job in jobs]

    flows = []
    report = IngestReport()
    for file_flows, file_report in results:
        flows.extend(file_flows)
        report = report.merge(file_report)
    for flow_id, flow in enumerate(flows):
        flow.flow_id = flow_id
    return flows, report
