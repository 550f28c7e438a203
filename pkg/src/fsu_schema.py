import hashlib
import json
import logging
import math
import struct
import threading
from abc import ABC, abstractmethod
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Optional

import dpkt
import numpy as np
import yaml

from src.capture_ingest import DecodedPacket, RawPacket, decode_packet
from src.errors import BadSpec, MalformedHeader, ShapeMismatch

# Setup logging configuration
logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(levelname)s - %(message)s")

DEFAULT_SCHEMA_PATH = Path(__file__).parent / "schemas" / "default_fsu_schema.yaml"

# Minimum header lengths a locator must fit into
HEADER_MIN_LENGTH = {"ip_header": 20, "tcp_header": 20, "udp_header": 8}

WELL_KNOWN_PORT_LIMIT = 1024
REGISTERED_PORT_LIMIT = 49152


class Source(str, Enum):
    FRAME_METADATA = "frame_metadata"
    IP_HEADER = "ip_header"
    TCP_HEADER = "tcp_header"
    UDP_HEADER = "udp_header"


class Predictability(str, Enum):
    GENERALIZABLE = "generalizable"
    RANDOM = "random"
    NON_GENERALIZABLE = "non_generalizable"


GENERALIZABLE_ONLY = frozenset({Predictability.GENERALIZABLE})


class ClampCounter:
    """Thread-safe per-descriptor count of out-of-domain values that were clamped."""

    def __init__(self):
        self._lock = threading.Lock()
        self._counts = Counter()

    def add(self, name: str, n: int = 1):
        if n:
            with self._lock:
                self._counts[name] += n

    def snapshot(self) -> dict:
        with self._lock:
            return dict(self._counts)

    def reset(self):
        with self._lock:
            self._counts.clear()


CLAMP_COUNTS = ClampCounter()


@dataclass(frozen=True)
class NormRule:
    kind: str
    lo: float = 0.0
    hi: float = 1.0
    scale: float = 1.0
    cap: float = 1.0

    def __post_init__(self):
        if self.kind not in ("affine_bounded", "log1p_scaled", "binary", "identity"):
            raise BadSpec(f"Unknown normalization kind '{self.kind}'")
        if self.kind == "affine_bounded" and not self.lo < self.hi:
            raise BadSpec(f"affine_bounded requires lo < hi, got ({self.lo}, {self.hi})")
        if self.kind == "log1p_scaled" and (self.scale <= 0 or self.cap <= 0):
            raise BadSpec("log1p_scaled requires positive scale and cap")

    @property
    def domain(self) -> tuple:
        if self.kind == "affine_bounded":
            return self.lo, self.hi
        if self.kind == "log1p_scaled":
            return 0.0, self.cap
        return 0.0, 1.0

    def to_dict(self) -> dict:
        if self.kind == "affine_bounded":
            return {"kind": self.kind, "lo": self.lo, "hi": self.hi}
        if self.kind == "log1p_scaled":
            return {"kind": self.kind, "scale": self.scale, "cap": self.cap}
        return {"kind": self.kind}


def normalize(raw, rule: NormRule, name: Optional[str] = None):
    """
    Maps raw values into [0, 1] under a normalization rule.

    Parameters:
    raw (float | np.ndarray): Raw value(s); out-of-domain values are clamped and counted.
    rule (NormRule): The rule to apply.
    name (str): Descriptor name the clamp counter files clamps under.

    Returns:
    float | np.ndarray: Normalized value(s), same shape as the input.
    """
    values = np.asarray(raw, dtype=np.float64)
    if rule.kind == "binary":
        clamped = np.count_nonzero((values != 0) & (values != 1))
        out = (values != 0).astype(np.float64)
    else:
        lo, hi = rule.domain
        clamped = np.count_nonzero((values < lo) | (values > hi))
        v = np.clip(values, lo, hi)
        if rule.kind == "affine_bounded":
            out = (v - lo) / (hi - lo)
        elif rule.kind == "log1p_scaled":
            out = np.log1p(v / rule.scale) / math.log1p(rule.cap / rule.scale)
        else:
            out = v
    if clamped:
        CLAMP_COUNTS.add(name or rule.kind, int(clamped))
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class PacketContext:
    """Everything an extractor may read about one packet."""

    packet: DecodedPacket
    direction: bool
    prev_timestamp_ns: Optional[int]
    first_timestamp_ns: Optional[int]
    _options: Optional[dict] = field(default=None, repr=False)

    @property
    def data(self) -> bytes:
        return self.packet.raw.data

    @property
    def is_tcp(self) -> bool:
        return self.packet.protocol == dpkt.ip.IP_PROTO_TCP

    @property
    def is_udp(self) -> bool:
        return self.packet.protocol == dpkt.ip.IP_PROTO_UDP

    def header_offset(self, source: Source) -> Optional[int]:
        if source == Source.IP_HEADER:
            return self.packet.ip_offset
        if source == Source.TCP_HEADER:
            return self.packet.transport_offset if self.is_tcp else None
        if source == Source.UDP_HEADER:
            return self.packet.transport_offset if self.is_udp else None
        return 0

    @property
    def ip_header_len(self) -> int:
        return (self.data[self.packet.ip_offset] & 0x0F) * 4

    @property
    def ip_total_len(self) -> int:
        return struct.unpack_from("!H", self.data, self.packet.ip_offset + 2)[0]

    @property
    def tcp_header_len(self) -> int:
        return (self.data[self.packet.transport_offset + 12] >> 4) * 4

    @property
    def tcp_flags(self) -> int:
        return self.data[self.packet.transport_offset + 13]

    @property
    def options(self) -> dict:
        """TCP options by kind (first occurrence), plus the count of non-padding options."""
        if self._options is None:
            start = self.packet.transport_offset + 20
            raw = bytes(self.data[start : self.packet.transport_offset + self.tcp_header_len])
            by_kind = {}
            count = 0
            for opt in dpkt.tcp.parse_opts(raw):
                if opt is None:
                    break
                kind, value = opt
                if kind == dpkt.tcp.TCP_OPT_EOL:
                    break
                if kind == dpkt.tcp.TCP_OPT_NOP:
                    continue
                count += 1
                by_kind.setdefault(kind, value)
            self._options = {"by_kind": by_kind, "count": count}
        return self._options


# Abstract Base Class for Field Extraction
# ----------------------------------------
# An extractor yields (raw value, present) for one descriptor of one packet.
class FieldExtractor(ABC):
    @abstractmethod
    def extract(self, ctx: PacketContext) -> tuple:
        pass


# Concrete Extractor for fixed bit ranges inside a header
class LocatorExtractor(FieldExtractor):
    def __init__(self, source: Source, byte_offset: int, bit_offset: int, bit_width: int, multiplier: int = 1):
        if bit_width <= 0 or not 0 <= bit_offset < 8:
            raise BadSpec(f"Invalid locator ({byte_offset}, {bit_offset}, {bit_width})")
        limit = HEADER_MIN_LENGTH.get(source.value)
        if limit is None:
            raise BadSpec(f"Locators are not defined for source '{source.value}'")
        self.n_bytes = (bit_offset + bit_width + 7) // 8
        if byte_offset < 0 or byte_offset + self.n_bytes > limit:
            raise BadSpec(
                f"Locator ({byte_offset}, {bit_offset}, {bit_width}) exceeds the {limit}-byte {source.value}"
            )
        self.source = source
        self.byte_offset = byte_offset
        self.shift = self.n_bytes * 8 - bit_offset - bit_width
        self.mask = (1 << bit_width) - 1
        self.multiplier = multiplier

    def extract(self, ctx: PacketContext) -> tuple:
        base = ctx.header_offset(self.source)
        if base is None:
            return None, False
        start = base + self.byte_offset
        chunk = ctx.data[start : start + self.n_bytes]
        if len(chunk) != self.n_bytes:
            raise MalformedHeader(f"{self.source.value} field at byte {self.byte_offset} beyond capture length")
        value = (int.from_bytes(chunk, "big") >> self.shift) & self.mask
        return value * self.multiplier, True


class TimeDelta(FieldExtractor):
    def extract(self, ctx):
        if ctx.prev_timestamp_ns is None:
            return 0.0, True
        return (ctx.packet.raw.timestamp_ns - ctx.prev_timestamp_ns) / 1e9, True


class TimeRelative(FieldExtractor):
    def extract(self, ctx):
        if ctx.first_timestamp_ns is None:
            return 0.0, True
        return (ctx.packet.raw.timestamp_ns - ctx.first_timestamp_ns) / 1e9, True


class FrameLen(FieldExtractor):
    def extract(self, ctx):
        return ctx.packet.raw.original_length, True


class Direction(FieldExtractor):
    def extract(self, ctx):
        return int(ctx.direction), True


class TcpPayloadLen(FieldExtractor):
    def extract(self, ctx):
        if not ctx.is_tcp:
            return None, False
        return max(0, ctx.ip_total_len - ctx.ip_header_len - ctx.tcp_header_len), True


class UdpPayloadLen(FieldExtractor):
    def extract(self, ctx):
        if not ctx.is_udp:
            return None, False
        length = struct.unpack_from("!H", ctx.data, ctx.packet.transport_offset + 4)[0]
        return max(0, length - 8), True


class TcpOption(FieldExtractor):
    """Presence or value of one TCP option kind."""

    def __init__(self, kind: int, fmt: Optional[str] = None, index: int = 0, presence: bool = False):
        self.kind = kind
        self.fmt = fmt
        self.index = index
        self.presence = presence

    def extract(self, ctx):
        if not ctx.is_tcp:
            return None, False
        value = ctx.options["by_kind"].get(self.kind)
        if self.presence:
            return int(value is not None), True
        if value is None or self.fmt is None or len(value) != struct.calcsize(self.fmt):
            return None, False
        return struct.unpack(self.fmt, value)[self.index], True


class TcpOptionCount(FieldExtractor):
    def extract(self, ctx):
        if not ctx.is_tcp:
            return None, False
        return ctx.options["count"], True


class PortClass(FieldExtractor):
    def __init__(self, side: str = "src", range: str = "wellknown"):
        if side not in ("src", "dst") or range not in ("wellknown", "registered"):
            raise BadSpec(f"Invalid port_class params side={side} range={range}")
        self.side = side
        self.range = range

    def extract(self, ctx):
        port = ctx.packet.src_port if self.side == "src" else ctx.packet.dst_port
        if self.range == "wellknown":
            return int(port < WELL_KNOWN_PORT_LIMIT), True
        return int(WELL_KNOWN_PORT_LIMIT <= port < REGISTERED_PORT_LIMIT), True


class IsTcp(FieldExtractor):
    def extract(self, ctx):
        return int(ctx.is_tcp), True


class IsUdp(FieldExtractor):
    def extract(self, ctx):
        return int(ctx.is_udp), True


class HdrBytesTotal(FieldExtractor):
    def extract(self, ctx):
        transport = ctx.tcp_header_len if ctx.is_tcp else 8
        return ctx.ip_header_len + transport, True


class IsPureAck(FieldExtractor):
    def extract(self, ctx):
        if not ctx.is_tcp:
            return 0, True
        flags = ctx.tcp_flags
        payload = ctx.ip_total_len - ctx.ip_header_len - ctx.tcp_header_len
        # ACK alone (PSH/URG/ECE/CWR tolerated), no SYN/FIN/RST, no payload
        pure = bool(flags & dpkt.tcp.TH_ACK) and not flags & (
            dpkt.tcp.TH_SYN | dpkt.tcp.TH_FIN | dpkt.tcp.TH_RST
        )
        return int(pure and payload <= 0), True


DERIVED_RULES = {
    "time_delta": lambda **_: TimeDelta(),
    "time_relative": lambda **_: TimeRelative(),
    "frame_len": lambda **_: FrameLen(),
    "direction": lambda **_: Direction(),
    "tcp_payload_len": lambda **_: TcpPayloadLen(),
    "udp_payload_len": lambda **_: UdpPayloadLen(),
    "mss_present": lambda **_: TcpOption(dpkt.tcp.TCP_OPT_MSS, presence=True),
    "mss": lambda **_: TcpOption(dpkt.tcp.TCP_OPT_MSS, "!H"),
    "wscale_present": lambda **_: TcpOption(dpkt.tcp.TCP_OPT_WSCALE, presence=True),
    "wscale": lambda **_: TcpOption(dpkt.tcp.TCP_OPT_WSCALE, "!B"),
    "sack_perm": lambda **_: TcpOption(dpkt.tcp.TCP_OPT_SACKOK, presence=True),
    "ts_present": lambda **_: TcpOption(dpkt.tcp.TCP_OPT_TIMESTAMP, presence=True),
    "tsval": lambda **_: TcpOption(dpkt.tcp.TCP_OPT_TIMESTAMP, "!II", 0),
    "tsecr": lambda **_: TcpOption(dpkt.tcp.TCP_OPT_TIMESTAMP, "!II", 1),
    "opt_count": lambda **_: TcpOptionCount(),
    "port_class": lambda **params: PortClass(**params),
    "is_tcp": lambda **_: IsTcp(),
    "is_udp": lambda **_: IsUdp(),
    "hdr_bytes_total": lambda **_: HdrBytesTotal(),
    "is_pure_ack": lambda **_: IsPureAck(),
}


@dataclass(frozen=True)
class FsuDescriptor:
    name: str
    source: Source
    predictability: Predictability
    norm: NormRule
    default_value: float = 0.0
    locator: Optional[tuple] = None
    derived: Optional[str] = None
    params: tuple = ()

    def __post_init__(self):
        if (self.locator is None) == (self.derived is None):
            raise BadSpec(f"Descriptor '{self.name}' needs exactly one of locator or derived")
        object.__setattr__(self, "extractor", self._build_extractor())

    def _build_extractor(self) -> FieldExtractor:
        if self.locator is not None:
            return LocatorExtractor(self.source, *self.locator)
        if self.derived not in DERIVED_RULES:
            raise BadSpec(f"Descriptor '{self.name}' uses unknown derived rule '{self.derived}'")
        return DERIVED_RULES[self.derived](**dict(self.params))

    def to_dict(self) -> dict:
        out = {
            "name": self.name,
            "source": self.source.value,
            "predictability": self.predictability.value,
            "norm": self.norm.to_dict(),
            "default": self.default_value,
        }
        if self.locator is not None:
            out["locator"] = list(self.locator)
        else:
            out["derived"] = self.derived
            if self.params:
                out["params"] = dict(self.params)
        return out


@dataclass(frozen=True)
class FsuSchema:
    descriptors: tuple
    version: int = 1

    def __post_init__(self):
        names = [d.name for d in self.descriptors]
        duplicates = sorted({n for n in names if names.count(n) > 1})
        if duplicates:
            raise BadSpec(f"Duplicate descriptor names: {duplicates}")

    @property
    def names(self) -> list:
        return [d.name for d in self.descriptors]

    @property
    def N(self) -> int:
        return sum(d.predictability == Predictability.GENERALIZABLE for d in self.descriptors)

    def indices(self, admit: Iterable = GENERALIZABLE_ONLY) -> list:
        admit = {Predictability(a) for a in admit}
        return [i for i, d in enumerate(self.descriptors) if d.predictability in admit]

    def columns(self, admit: Iterable = GENERALIZABLE_ONLY) -> list:
        """Model-facing descriptors for an admitted predictability set, in catalog order."""
        return [self.descriptors[i] for i in self.indices(admit)]

    def members(self, predictability) -> list:
        return [d.name for d in self.descriptors if d.predictability == Predictability(predictability)]

    def descriptor(self, name: str) -> FsuDescriptor:
        for d in self.descriptors:
            if d.name == name:
                return d
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"version": self.version, "descriptors": [d.to_dict() for d in self.descriptors]}

    @property
    def schema_hash(self) -> bytes:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).digest()


def _descriptor_from_dict(entry: dict) -> FsuDescriptor:
    try:
        norm = dict(entry["norm"])
        locator = entry.get("locator")
        return FsuDescriptor(
            name=entry["name"],
            source=Source(entry["source"]),
            predictability=Predictability(entry["predictability"]),
            norm=NormRule(
                kind=norm.pop("kind"), **{k: float(v) for k, v in norm.items()}
            ),
            default_value=float(entry.get("default", 0)),
            locator=tuple(locator) if locator is not None else None,
            derived=entry.get("derived"),
            params=tuple(sorted((entry.get("params") or {}).items())),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise BadSpec(f"Invalid descriptor {entry.get('name', '?')}: {e}") from e


def load_schema(path) -> FsuSchema:
    """Loads an FSU catalog from a YAML schema file."""
    logging.info(f"Loading FSU schema from {path}.")
    with open(path, "r") as f:
        document = yaml.safe_load(f)
    if not isinstance(document, dict) or "descriptors" not in document:
        raise BadSpec(f"{path} is not an FSU schema document")
    schema = FsuSchema(
        descriptors=tuple(_descriptor_from_dict(e) for e in document["descriptors"]),
        version=int(document.get("version", 1)),
    )
    logging.info(f"Schema loaded: {len(schema.descriptors)} descriptors, N={schema.N}.")
    return schema


@lru_cache(maxsize=1)
def default_schema() -> FsuSchema:
    return load_schema(DEFAULT_SCHEMA_PATH)


def parse_packet(
    pkt,
    direction: bool,
    prev_timestamp_ns: Optional[int],
    schema: FsuSchema,
    first_timestamp_ns: Optional[int] = None,
) -> tuple:
    """
    Extracts every descriptor of one packet.

    Parameters:
    pkt (RawPacket | DecodedPacket): A packet that passed the protocol filter.
    direction (bool): True when sent by the flow initiator.
    prev_timestamp_ns (int): Timestamp of the previous packet in the flow, None for the first.
    schema (FsuSchema): The catalog.
    first_timestamp_ns (int): Timestamp of the flow's first packet.

    Returns:
    tuple: (raw values as float64 array over all descriptors, presence flags as bool array)
    """
    decoded = pkt if isinstance(pkt, DecodedPacket) else decode_packet(pkt)
    ctx = PacketContext(decoded, direction, prev_timestamp_ns, first_timestamp_ns)
    n = len(schema.descriptors)
    values = np.empty(n, dtype=np.float64)
    present = np.zeros(n, dtype=bool)
    for i, descriptor in enumerate(schema.descriptors):
        value, ok = descriptor.extractor.extract(ctx)
        values[i] = value if ok else descriptor.default_value
        present[i] = ok
    return values, present


def filter_to_generalizable(raw: np.ndarray, schema: FsuSchema, admit: Iterable = GENERALIZABLE_ONLY) -> np.ndarray:
    """Projects a full raw vector onto the admitted (default: generalizable) columns."""
    raw = np.asarray(raw)
    if raw.shape[-1] != len(schema.descriptors):
        raise ShapeMismatch(f"Raw vector has {raw.shape[-1]} values, schema has {len(schema.descriptors)}")
    return raw[..., schema.indices(admit)]


def normalize_columns(raw: np.ndarray, schema: FsuSchema, admit: Iterable = GENERALIZABLE_ONLY) -> np.ndarray:
    """Projects and normalizes raw vectors into the model view, column by column."""
    projected = filter_to_generalizable(raw, schema, admit)
    out = np.empty(projected.shape, dtype=np.float64)
    for j, descriptor in enumerate(schema.columns(admit)):
        out[..., j] = normalize(projected[..., j], descriptor.norm, descriptor.name)
    return out
