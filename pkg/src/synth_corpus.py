import ipaddress
import logging
import struct
from pathlib import Path
from typing import List, Literal, Optional

import dpkt
import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from src.capture_ingest import Flow, FlowKey, LinkType, RawPacket, write_capture
from src.errors import BadSpec
from src.flow_dataset import DEFAULT_T, DatasetFile, tables_from_flows
from src.fsu_schema import GENERALIZABLE_ONLY, FsuSchema, default_schema

# Setup logging configuration
logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(levelname)s - %(message)s")

BUNDLED_SPECS = Path(__file__).parent / "synth_specs"

CLIENT_NET = 0x0A000000  # 10.0.0.0/8
SERVER_NET = 0xC0000200  # 192.0.2.0/24
EPHEMERAL_PORT_BASE = 49152
FLOW_SPACING_NS = 1_000_000
BASE_TIME_NS = 1_700_000_000 * 1_000_000_000
CLIENT_MAC = bytes.fromhex("020000000001")
SERVER_MAC = bytes.fromhex("020000000002")


class Distribution(BaseModel):
    """Scalar distribution; *_ms fields are milliseconds, plain fields are counts of bytes."""

    model_config = ConfigDict(extra="forbid")

    dist: Literal["exponential", "uniform", "constant"]
    mean_ms: Optional[float] = None
    low_ms: Optional[float] = None
    high_ms: Optional[float] = None
    value_ms: Optional[float] = None
    mean: Optional[float] = None
    low: Optional[float] = None
    high: Optional[float] = None
    value: Optional[float] = None

    def draw(self, rng: np.random.Generator, unit: str = "") -> float:
        suffix = "_ms" if unit == "ms" else ""
        params = {k: getattr(self, k + suffix) for k in ("mean", "low", "high", "value")}
        if self.dist == "exponential":
            if params["mean"] is None:
                raise BadSpec("exponential distribution needs a mean")
            return float(rng.exponential(params["mean"]))
        if self.dist == "uniform":
            if params["low"] is None or params["high"] is None or params["low"] > params["high"]:
                raise BadSpec("uniform distribution needs low <= high")
            return float(rng.uniform(params["low"], params["high"]))
        if params["value"] is None:
            raise BadSpec("constant distribution needs a value")
        return float(params["value"])


class ClassPattern(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    weight: float = 1.0
    transport: Literal["tcp", "udp"] = "tcp"
    handshake: bool = True
    ttl: List[int] = Field(default_factory=lambda: [64])
    ip_dsfield: int = 0
    window: List[int] = Field(default_factory=lambda: [64240])
    packets: List[int] = Field(default_factory=lambda: [10, 20])
    inter_arrival: Distribution
    payload: Distribution
    direction: Literal["alternate", "client_heavy"] = "alternate"
    df: bool = True
    syn_options: bool = True
    server_port: int = 443

    @field_validator("packets")
    @classmethod
    def _packet_range(cls, v):
        if len(v) != 2 or not 1 <= v[0] <= v[1]:
            raise ValueError("packets must be [min, max] with 1 <= min <= max")
        return v

    @field_validator("ttl", "window")
    @classmethod
    def _non_empty(cls, v):
        if not v:
            raise ValueError("choice list must not be empty")
        return v


class SynthSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = "custom"
    classes: List[ClassPattern]

    @field_validator("classes")
    @classmethod
    def _at_least_two(cls, v):
        if len(v) < 2:
            raise ValueError("a synthetic corpus needs at least two classes")
        if any(c.weight <= 0 for c in v):
            raise ValueError("class weights must be positive")
        return v

    @property
    def class_names(self) -> list:
        return [c.name for c in self.classes]


def load_synth_spec(name_or_path) -> SynthSpec:
    """Loads a class-pattern spec from a YAML path or a bundled spec name."""
    path = Path(name_or_path)
    if not path.exists():
        path = BUNDLED_SPECS / f"{name_or_path}.yaml"
    if not path.exists():
        raise BadSpec(f"No synthetic spec named '{name_or_path}'")
    with open(path, "r") as f:
        document = yaml.safe_load(f)
    try:
        return SynthSpec.model_validate(document)
    except ValidationError as e:
        raise BadSpec(f"Invalid synthetic spec {path}: {e}") from e


def class_counts(spec: SynthSpec, n_flows: int) -> list:
    """Largest-remainder allocation of n_flows over the class weights."""
    weights = np.array([c.weight for c in spec.classes], dtype=np.float64)
    exact = n_flows * weights / weights.sum()
    counts = np.floor(exact).astype(int)
    order = np.argsort(-(exact - counts), kind="stable")
    counts[order[: n_flows - counts.sum()]] += 1
    return counts.tolist()


class PacketSynthesizer:
    """Builds real Ethernet/IPv4/TCP|UDP frames with valid checksums."""

    def ip_header(self, src: int, dst: int, proto: int, payload_len: int, ttl: int, dsfield: int, ip_id: int, df: bool) -> bytes:
        total = 20 + payload_len
        flags = 0x4000 if df else 0
        header = struct.pack("!BBHHHBBHII", 0x45, dsfield, total, ip_id, flags, ttl, proto, 0, src, dst)
        checksum = dpkt.in_cksum(header)
        return header[:10] + struct.pack("!H", checksum) + header[12:]

    def tcp_segment(self, src: int, dst: int, sport: int, dport: int, seq: int, ack: int, flags: int,
                    window: int, options: bytes, payload_len: int) -> bytes:
        offset = (20 + len(options)) // 4
        header = struct.pack("!HHIIBBHHH", sport, dport, seq, ack, offset << 4, flags, window, 0, 0)
        segment = header + options + bytes(payload_len)
        pseudo = struct.pack("!IIBBH", src, dst, 0, dpkt.ip.IP_PROTO_TCP, len(segment))
        checksum = dpkt.in_cksum(pseudo + segment)
        return segment[:16] + struct.pack("!H", checksum) + segment[18:]

    def udp_datagram(self, src: int, dst: int, sport: int, dport: int, payload_len: int) -> bytes:
        length = 8 + payload_len
        datagram = struct.pack("!HHHH", sport, dport, length, 0) + bytes(payload_len)
        pseudo = struct.pack("!IIBBH", src, dst, 0, dpkt.ip.IP_PROTO_UDP, length)
        checksum = dpkt.in_cksum(pseudo + datagram) or 0xFFFF
        return datagram[:6] + struct.pack("!H", checksum) + datagram[8:]

    @staticmethod
    def syn_options(rng: np.random.Generator) -> bytes:
        tsval = int(rng.integers(0, 2**32))
        return (
            struct.pack("!BBH", dpkt.tcp.TCP_OPT_MSS, 4, 1460)
            + struct.pack("!BB", dpkt.tcp.TCP_OPT_SACKOK, 2)
            + struct.pack("!BBII", dpkt.tcp.TCP_OPT_TIMESTAMP, 10, tsval, 0)
            + struct.pack("!B", dpkt.tcp.TCP_OPT_NOP)
            + struct.pack("!BBB", dpkt.tcp.TCP_OPT_WSCALE, 3, 7)
        )

    def frame(self, from_client: bool, ip_packet: bytes) -> bytes:
        dst, src = (SERVER_MAC, CLIENT_MAC) if from_client else (CLIENT_MAC, SERVER_MAC)
        return dst + src + struct.pack("!H", dpkt.ethernet.ETH_TYPE_IP) + ip_packet


def _packet_plan(pattern: ClassPattern, n: int, rng: np.random.Generator) -> list:
    """Per packet: (from_client, tcp flags, carries SYN options, carries payload). The client speaks first."""
    is_tcp = pattern.transport == "tcp"
    plan = []
    if is_tcp and pattern.handshake:
        plan += [
            (True, dpkt.tcp.TH_SYN, pattern.syn_options, False),
            (False, dpkt.tcp.TH_SYN | dpkt.tcp.TH_ACK, pattern.syn_options, False),
            (True, dpkt.tcp.TH_ACK, False, False),
        ][:n]
    flags = dpkt.tcp.TH_ACK if is_tcp else 0
    for i in range(n - len(plan)):
        if not plan or pattern.direction == "alternate":
            from_client = i % 2 == 0
        else:
            from_client = bool(rng.random() < 0.8)
        plan.append((from_client, flags, False, True))
    return plan


def synth_flow(pattern: ClassPattern, flow_index: int, seed: int, synthesizer: Optional[PacketSynthesizer] = None) -> Flow:
    """Materializes one flow of a class pattern as Ethernet frames."""
    synthesizer = synthesizer or PacketSynthesizer()
    rng = np.random.default_rng([seed, flow_index])
    client = CLIENT_NET + 1 + flow_index
    server = SERVER_NET + 1 + flow_index % 254
    client_port = EPHEMERAL_PORT_BASE + flow_index % (65536 - EPHEMERAL_PORT_BASE)
    n = int(rng.integers(pattern.packets[0], pattern.packets[1] + 1))
    ttl = int(rng.choice(pattern.ttl))
    window = int(rng.choice(pattern.window))
    is_tcp = pattern.transport == "tcp"
    plan = _packet_plan(pattern, n, rng)

    timestamp = BASE_TIME_NS + flow_index * FLOW_SPACING_NS
    packets, directions = [], []
    for i, (from_client, flags, with_options, carries_payload) in enumerate(plan):
        if i > 0:
            timestamp += max(0, int(round(pattern.inter_arrival.draw(rng, "ms") * 1e6)))
        payload_len = int(round(pattern.payload.draw(rng))) if carries_payload else 0
        payload_len = max(0, min(payload_len, 1460))
        src, dst = (client, server) if from_client else (server, client)
        sport, dport = (client_port, pattern.server_port) if from_client else (pattern.server_port, client_port)
        ip_id = int(rng.integers(0, 2**16))
        if is_tcp:
            if carries_payload and payload_len:
                flags |= dpkt.tcp.TH_PUSH
            options = synthesizer.syn_options(rng) if with_options else b""
            transport = synthesizer.tcp_segment(
                src, dst, sport, dport,
                seq=int(rng.integers(0, 2**32)), ack=int(rng.integers(0, 2**32)) if flags & dpkt.tcp.TH_ACK else 0,
                flags=flags, window=window, options=options, payload_len=payload_len,
            )
            proto = dpkt.ip.IP_PROTO_TCP
        else:
            transport = synthesizer.udp_datagram(src, dst, sport, dport, payload_len)
            proto = dpkt.ip.IP_PROTO_UDP
        ip = synthesizer.ip_header(src, dst, proto, len(transport), ttl, pattern.ip_dsfield, ip_id, pattern.df)
        data = synthesizer.frame(from_client, ip + transport)
        packets.append(RawPacket(timestamp, LinkType.ETHERNET, data, len(data), len(data)))
        directions.append(from_client)

    key = FlowKey.canonical(client, client_port, server, pattern.server_port, proto)
    initiator = (ipaddress.IPv4Address(client), client_port)
    return Flow(key=key, packets=packets, directions=directions, initiator=initiator, flow_id=flow_index)


def synth_flows(spec: SynthSpec, n_flows: int, seed: int) -> tuple:
    """
    Draws a labeled set of flows.

    Returns:
    tuple: (flows ordered by first packet with sequential flow ids, labels)
    """
    counts = class_counts(spec, n_flows)
    labels = np.repeat(np.arange(len(spec.classes)), counts)
    labels = labels[np.random.default_rng(seed).permutation(n_flows)]
    synthesizer = PacketSynthesizer()
    flows = [synth_flow(spec.classes[c], i, seed, synthesizer) for i, c in enumerate(labels)]
    logging.info(f"Synthesized {n_flows} flows over classes {dict(zip(spec.class_names, counts))}.")
    return flows, labels.tolist()


def write_flows_pcap(flows: list, path) -> int:
    """Writes every packet of the flows into one nanosecond pcap, ordered by timestamp."""
    ordered = sorted(
        ((pkt.timestamp_ns, f, i, pkt) for f, flow in enumerate(flows) for i, pkt in enumerate(flow.packets)),
        key=lambda item: item[:3],
    )
    return write_capture(path, (item[3] for item in ordered), LinkType.ETHERNET, nanosecond=True)


def synth_corpus(
    spec: SynthSpec,
    n_flows: int,
    seed: int,
    T: int = DEFAULT_T,
    schema: Optional[FsuSchema] = None,
    admit=GENERALIZABLE_ONLY,
    pcap_path=None,
) -> DatasetFile:
    """
    Builds a labeled dataset from a class-pattern spec.

    Parameters:
    spec (SynthSpec): Class patterns.
    n_flows (int): Number of flows to draw.
    seed (int): Seed of every random draw.
    T (int): Rows per table.
    schema (FsuSchema): Catalog used for the tables.
    admit: Predictability classes admitted as columns.
    pcap_path: When given, the same packets are also written as a pcap file.

    Returns:
    DatasetFile: One table per flow, labels indexing spec.class_names.
    """
    schema = schema or default_schema()
    flows, labels = synth_flows(spec, n_flows, seed)
    if pcap_path is not None:
        write_flows_pcap(flows, pcap_path)
    return tables_from_flows(flows, schema, T, admit, labels, spec.class_names)
