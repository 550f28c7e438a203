import logging
import struct
import zlib
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd

from src.capture_ingest import Flow
from src.errors import BadMagic, Corrupt, EmptyFlow, ShapeMismatch
from src.fsu_schema import GENERALIZABLE_ONLY, FsuSchema, default_schema, normalize_columns, parse_packet

# Setup logging configuration
logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(levelname)s - %(message)s")

MAGIC = b"FSUTAB01"
FORMAT_VERSION = 1
DEFAULT_T = 10
UNLABELED = -1


@dataclass
class FlowTable:
    """One flow as a T x N table of normalized FSU values."""

    values: np.ndarray
    valid: np.ndarray
    label: Optional[int]
    flow_id: int
    schema_hash: bytes

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def N(self) -> int:
        return self.values.shape[1]


def record_dtype(T: int, N: int) -> np.dtype:
    """Packed little-endian layout of one persisted record."""
    return np.dtype(
        [
            ("flow_id", "<u8"),
            ("label", "<i4"),
            ("valid", "u1", ((T + 7) // 8,)),
            ("values", "<f4", (T, N)),
            ("crc", "<u4"),
        ]
    )


@dataclass
class DatasetFile:
    """
    A homogeneous collection of flow tables held as stacked arrays.

    values [R, T, N] float32, valid [R, T] bool, labels [R] int (-1 = unlabeled),
    flow_ids [R] uint64.
    """

    T: int
    N: int
    schema_hash: bytes
    values: np.ndarray
    valid: np.ndarray
    labels: np.ndarray
    flow_ids: np.ndarray
    class_names: list = field(default_factory=list)
    column_names: list = field(default_factory=list)
    version: int = FORMAT_VERSION

    def __len__(self) -> int:
        return int(self.values.shape[0])

    @property
    def labeled(self) -> bool:
        return len(self) > 0 and bool(np.all(self.labels >= 0))

    @property
    def tables(self) -> list:
        return [
            FlowTable(
                values=self.values[i],
                valid=self.valid[i],
                label=None if self.labels[i] < 0 else int(self.labels[i]),
                flow_id=int(self.flow_ids[i]),
                schema_hash=self.schema_hash,
            )
            for i in range(len(self))
        ]

    def subset(self, indices) -> "DatasetFile":
        indices = np.asarray(indices, dtype=np.int64)
        return DatasetFile(
            T=self.T,
            N=self.N,
            schema_hash=self.schema_hash,
            values=self.values[indices],
            valid=self.valid[indices],
            labels=self.labels[indices],
            flow_ids=self.flow_ids[indices],
            class_names=list(self.class_names),
            column_names=list(self.column_names),
            version=self.version,
        )

    def equals(self, other: "DatasetFile") -> bool:
        return (
            (self.T, self.N, self.schema_hash, self.class_names, self.column_names)
            == (other.T, other.N, other.schema_hash, other.class_names, other.column_names)
            and np.array_equal(self.values, other.values)
            and np.array_equal(self.valid, other.valid)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.flow_ids, other.flow_ids)
        )

    @classmethod
    def from_tables(
        cls,
        tables: Sequence[FlowTable],
        class_names: Iterable = (),
        column_names: Optional[Iterable] = None,
    ) -> "DatasetFile":
        if not tables:
            raise ShapeMismatch("Cannot build a dataset from zero tables")
        first = tables[0]
        for table in tables:
            if table.values.shape != first.values.shape:
                raise ShapeMismatch(
                    f"Table {table.flow_id} has shape {table.values.shape}, expected {first.values.shape}"
                )
            if table.valid.shape != (first.T,):
                raise ShapeMismatch(f"Table {table.flow_id} has a validity mask of shape {table.valid.shape}")
            if table.schema_hash != first.schema_hash:
                raise ShapeMismatch(f"Table {table.flow_id} was built with a different schema")
        column_names = list(column_names) if column_names is not None else [f"col{j}" for j in range(first.N)]
        if len(column_names) != first.N:
            raise ShapeMismatch(f"{len(column_names)} column names for N={first.N}")
        return cls(
            T=first.T,
            N=first.N,
            schema_hash=first.schema_hash,
            values=np.stack([t.values for t in tables]).astype(np.float32),
            valid=np.stack([t.valid for t in tables]).astype(bool),
            labels=np.array([UNLABELED if t.label is None else t.label for t in tables], dtype=np.int64),
            flow_ids=np.array([t.flow_id for t in tables], dtype=np.uint64),
            class_names=list(class_names),
            column_names=column_names,
        )


def sample_flow(
    flow: Flow,
    T: int = DEFAULT_T,
    schema: Optional[FsuSchema] = None,
    admit=GENERALIZABLE_ONLY,
    label: Optional[int] = None,
) -> FlowTable:
    """
    Parses and normalizes the first T packets of a flow into a padded table.

    Parameters:
    flow (Flow): An assembled flow.
    T (int): Number of packet rows.
    schema (FsuSchema): The catalog; the bundled default when None.
    admit: Predictability classes admitted as columns.
    label (int): Class index, None for unlabeled flows.

    Returns:
    FlowTable: values in [0, 1]; padding rows are zero with valid=False.
    """
    if not flow.packets:
        raise EmptyFlow(f"Flow {flow.flow_id} has no packets")
    schema = schema or default_schema()
    columns = schema.indices(admit)
    n_rows = min(len(flow.packets), T)

    raw = np.empty((n_rows, len(schema.descriptors)), dtype=np.float64)
    first_ts = flow.packets[0].timestamp_ns
    prev_ts = None
    for t in range(n_rows):
        pkt = flow.packets[t]
        raw[t], _ = parse_packet(pkt, flow.directions[t], prev_ts, schema, first_ts)
        prev_ts = pkt.timestamp_ns

    values = np.zeros((T, len(columns)), dtype=np.float32)
    values[:n_rows] = normalize_columns(raw, schema, admit)
    valid = np.zeros(T, dtype=bool)
    valid[:n_rows] = True
    return FlowTable(values=values, valid=valid, label=label, flow_id=flow.flow_id, schema_hash=schema.schema_hash)


def _pack_names(names) -> bytes:
    parts = [struct.pack("<I", len(names))]
    for name in names:
        encoded = str(name).encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)) + encoded)
    return b"".join(parts)


def _unpack_names(buf: memoryview, offset: int):
    try:
        (count,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        names = []
        for _ in range(count):
            (length,) = struct.unpack_from("<I", buf, offset)
            offset += 4
            if offset + length > len(buf):
                raise Corrupt("Name table runs past end of file")
            names.append(bytes(buf[offset : offset + length]).decode("utf-8"))
            offset += length
    except struct.error as e:
        raise Corrupt(f"Truncated header: {e}") from e
    except UnicodeDecodeError as e:
        raise Corrupt(f"Name table is not UTF-8: {e}") from e
    return names, offset


def write_dataset(dataset, path, class_names: Iterable = (), column_names: Optional[Iterable] = None) -> None:
    """Persists a DatasetFile (or a list of FlowTable) in the FSUTAB01 binary format."""
    if not isinstance(dataset, DatasetFile):
        dataset = DatasetFile.from_tables(list(dataset), class_names, column_names)
    if dataset.values.shape[1:] != (dataset.T, dataset.N):
        raise ShapeMismatch(f"Values of shape {dataset.values.shape} under header T={dataset.T}, N={dataset.N}")
    if len(dataset.schema_hash) != 32:
        raise ShapeMismatch("Schema hash must be a 32-byte SHA-256 digest")

    dtype = record_dtype(dataset.T, dataset.N)
    records = np.zeros(len(dataset), dtype=dtype)
    records["flow_id"] = dataset.flow_ids
    records["label"] = dataset.labels
    records["valid"] = np.packbits(dataset.valid, axis=1, bitorder="little")
    records["values"] = dataset.values
    payload = records.view(np.uint8).reshape(len(dataset), dtype.itemsize)
    for i in range(len(dataset)):
        records["crc"][i] = zlib.crc32(payload[i, :-4].tobytes())

    header = (
        MAGIC
        + struct.pack("<IIII", FORMAT_VERSION, dataset.T, dataset.N, len(dataset))
        + dataset.schema_hash
        + _pack_names(dataset.class_names)
        + _pack_names(dataset.column_names)
    )
    with open(path, "wb") as f:
        f.write(header)
        f.write(records.tobytes())
    logging.info(f"Wrote {len(dataset)} flow tables (T={dataset.T}, N={dataset.N}) to {path}.")


def read_dataset(path) -> DatasetFile:
    """Reads and verifies a FSUTAB01 file; BadMagic or Corrupt on any inconsistency."""
    with open(path, "rb") as f:
        blob = f.read()
    buf = memoryview(blob)
    if bytes(buf[:8]) != MAGIC:
        raise BadMagic(f"{path} is not a flow-table dataset")
    if len(buf) < 8 + 16 + 32:
        raise Corrupt(f"{path}: truncated header")
    version, T, N, count = struct.unpack_from("<IIII", buf, 8)
    if version != FORMAT_VERSION:
        raise BadMagic(f"{path}: unsupported format version {version}")
    schema_hash = bytes(buf[24:56])
    class_names, offset = _unpack_names(buf, 56)
    column_names, offset = _unpack_names(buf, offset)
    if len(column_names) != N:
        raise Corrupt(f"{path}: {len(column_names)} column names for N={N}")

    dtype = record_dtype(T, N)
    expected = count * dtype.itemsize
    remaining = len(buf) - offset
    if remaining < expected:
        raise Corrupt(f"{path}: truncated, {remaining} record bytes for {count} records")
    if remaining > expected:
        raise Corrupt(f"{path}: {remaining - expected} trailing bytes after {count} records")

    records = np.frombuffer(blob, dtype=dtype, count=count, offset=offset)
    raw = np.frombuffer(blob, dtype=np.uint8, count=expected, offset=offset).reshape(count, dtype.itemsize)
    for i in range(count):
        if zlib.crc32(raw[i, :-4].tobytes()) != int(records["crc"][i]):
            raise Corrupt(f"{path}: checksum mismatch in record {i}")

    valid = np.unpackbits(records["valid"], axis=1, count=T, bitorder="little").astype(bool)
    values = records["values"].astype(np.float32)
    labels = records["label"].astype(np.int64)
    if not np.all(np.isfinite(values)) or values.min(initial=0.0) < 0.0 or values.max(initial=0.0) > 1.0:
        raise Corrupt(f"{path}: values outside [0, 1]")
    if count and (valid.sum(axis=1) == 0).any():
        raise Corrupt(f"{path}: record without any valid row")
    if np.any(valid[:, 1:] & ~valid[:, :-1]):
        raise Corrupt(f"{path}: validity mask is not a prefix")
    if class_names and np.any(labels >= len(class_names)):
        raise Corrupt(f"{path}: label outside the class-name table")

    logging.info(f"Read {count} flow tables from {path}.")
    return DatasetFile(
        T=T,
        N=N,
        schema_hash=schema_hash,
        values=values,
        valid=valid,
        labels=labels,
        flow_ids=records["flow_id"].astype(np.uint64),
        class_names=class_names,
        column_names=column_names,
        version=version,
    )


def select_columns(dataset: DatasetFile, names: Sequence[str]) -> DatasetFile:
    """Returns a dataset restricted to the named columns, in the given order."""
    missing = [n for n in names if n not in dataset.column_names]
    if missing:
        raise ShapeMismatch(f"Columns not in dataset: {missing}")
    idx = [dataset.column_names.index(n) for n in names]
    return DatasetFile(
        T=dataset.T,
        N=len(idx),
        schema_hash=dataset.schema_hash,
        values=np.ascontiguousarray(dataset.values[:, :, idx]),
        valid=dataset.valid,
        labels=dataset.labels,
        flow_ids=dataset.flow_ids,
        class_names=list(dataset.class_names),
        column_names=list(names),
        version=dataset.version,
    )


def zero_columns(dataset: DatasetFile, names: Iterable[str]) -> DatasetFile:
    """Returns a copy with the named columns (those present) set to zero."""
    idx = [dataset.column_names.index(n) for n in names if n in dataset.column_names]
    values = dataset.values.copy()
    if idx:
        logging.info(f"Zeroing columns {[dataset.column_names[i] for i in idx]}.")
        values[:, :, idx] = 0.0
    return DatasetFile(
        T=dataset.T,
        N=dataset.N,
        schema_hash=dataset.schema_hash,
        values=values,
        valid=dataset.valid,
        labels=dataset.labels,
        flow_ids=dataset.flow_ids,
        class_names=list(dataset.class_names),
        column_names=list(dataset.column_names),
        version=dataset.version,
    )


def tables_from_flows(
    flows: Sequence[Flow],
    schema: FsuSchema,
    T: int = DEFAULT_T,
    admit=GENERALIZABLE_ONLY,
    labels: Optional[Sequence[Optional[int]]] = None,
    class_names: Iterable = (),
) -> DatasetFile:
    """Samples every flow into a DatasetFile whose columns follow the admitted view."""
    tables = [
        sample_flow(flow, T, schema, admit, None if labels is None else labels[i])
        for i, flow in enumerate(flows)
    ]
    names = [d.name for d in schema.columns(admit)]
    return DatasetFile.from_tables(tables, class_names, names)


def flow_means(dataset: DatasetFile) -> pd.DataFrame:
    """Per-flow mean of every column over the valid packets, one row per flow."""
    weight = dataset.valid.astype(np.float64)[:, :, None]
    means = (dataset.values * weight).sum(axis=1) / weight.sum(axis=1)
    return pd.DataFrame(means, columns=dataset.column_names, index=dataset.flow_ids.astype(np.int64))
