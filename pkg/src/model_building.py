import hashlib
import json
import logging
import struct
import zlib
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from src import autodiff as ad
from src.autodiff import Tensor, make_rng
from src.errors import BadHyper, BadMagic, Corrupt, NonFiniteDetected, SchemaMismatch, ShapeMismatch

# Setup logging configuration
logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(levelname)s - %(message)s")

CHECKPOINT_MAGIC = b"FSMAE001"
INIT_STD = 0.02
ATTENTION_PARAMS = ("Wq", "bq", "Wk", "bk", "Wv", "bv", "Wo", "bo")
# Fixed statistics stored next to the weights; never trained, not counted as parameters.
BUFFERS = ("embed.value_mean", "embed.value_scale", "head.z_mean", "head.z_scale")
# Columns (or representation dimensions) with a smaller spread are left unscaled.
INPUT_SCALE_FLOOR = 1e-3
Z_SCALE_FLOOR = 1e-6


@dataclass(frozen=True)
class Hyper:
    d: int = 64
    L: int = 4
    h: int = 4
    T: int = 10
    N: int = 41
    C: int = 2
    shared_embed: bool = False

    def validate(self) -> "Hyper":
        for name in ("d", "L", "h", "T", "N", "C"):
            if getattr(self, name) < 1:
                raise BadHyper(f"{name} must be positive, got {getattr(self, name)}")
        if self.d % self.h:
            raise BadHyper(f"d={self.d} is not divisible by h={self.h}")
        return self


def trunc_normal(rng: np.random.Generator, shape: tuple, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) redrawn wherever a sample falls outside +-2 std."""
    values = rng.normal(0.0, std, size=shape)
    outside = np.abs(values) > 2 * std
    while outside.any():
        values[outside] = rng.normal(0.0, std, size=int(outside.sum()))
        outside = np.abs(values) > 2 * std
    return values


def parameter_shapes(hyper: Hyper) -> dict:
    """Name -> (shape, initializer) for every parameter and fixed statistic of the network."""
    d, N, T, C = hyper.d, hyper.N, hyper.T, hyper.C
    k = 1 if hyper.shared_embed else N
    shapes = {
        "embed.value_w": ((k, d), "normal"),
        "embed.value_b": ((k, d), "zeros"),
        "embed.fsu_pos": ((N, d), "normal"),
        "embed.time_pos": ((T, d), "normal"),
        "embed.mask_token": ((d,), "normal"),
        "decoder.w": ((N, d), "normal"),
        "decoder.b": ((N,), "zeros"),
        "head.w1": ((d, d), "normal"),
        "head.b1": ((d,), "zeros"),
        "head.w2": ((d, C), "normal"),
        "head.b2": ((C,), "zeros"),
        "head.z_mean": ((d,), "zeros"),
        "head.z_scale": ((d,), "ones"),
    }
    if not hyper.shared_embed:
        shapes["embed.value_mean"] = ((N,), "zeros")
        shapes["embed.value_scale"] = ((N,), "ones")
    for layer in range(hyper.L):
        prefix = f"blocks.{layer}"
        for attn in ("time_attn", "fsu_attn"):
            for p in ATTENTION_PARAMS:
                shape = (d, d) if p.startswith("W") else (d,)
                shapes[f"{prefix}.{attn}.{p}"] = (shape, "normal" if p.startswith("W") else "zeros")
        for ffn in ("ffn1", "ffn2"):
            shapes[f"{prefix}.{ffn}.w1"] = ((d, 4 * d), "normal")
            shapes[f"{prefix}.{ffn}.b1"] = ((4 * d,), "zeros")
            shapes[f"{prefix}.{ffn}.w2"] = ((4 * d, d), "normal")
            shapes[f"{prefix}.{ffn}.b2"] = ((d,), "zeros")
        for ln in ("ln1", "ln2", "ln3", "ln4"):
            shapes[f"{prefix}.{ln}.g"] = ((d,), "ones")
            shapes[f"{prefix}.{ln}.b"] = ((d,), "zeros")
    return shapes


def parameter_audit(hyper: Hyper, n_fsu: Optional[int] = None, n_classes: Optional[int] = None) -> dict:
    """Closed-form parameter count by component."""
    d, T = hyper.d, hyper.T
    N = hyper.N if n_fsu is None else n_fsu
    C = hyper.C if n_classes is None else n_classes
    value = 2 * d if hyper.shared_embed else 2 * N * d
    audit = {
        "embedder": value + N * d + T * d + d,
        "blocks": hyper.L * (2 * (4 * d * d + 4 * d) + 2 * (8 * d * d + 5 * d) + 4 * 2 * d),
        "decoder": N * d + N,
        "head": d * d + d + d * C + C,
    }
    audit["total"] = sum(audit.values())
    return audit


# Abstract Base Class for Value Embedding Strategy
# ------------------------------------------------
# Maps raw FSU values x[B, T, N] to value embeddings [B, T, N, d].
class EmbeddingStrategy(ABC):
    @abstractmethod
    def value_embed(self, x: Tensor, params: dict) -> Tensor:
        pass


# Concrete Strategy: one (W_k, b_k) pair per FSU, applied to the column standardized
# with statistics fitted on the pretraining data
class FsuSpecificEmbedding(EmbeddingStrategy):
    def value_embed(self, x: Tensor, params: dict) -> Tensor:
        u = ad.mul(ad.sub(x, params["embed.value_mean"]), params["embed.value_scale"])
        scaled = ad.mul(ad.reshape(u, u.shape + (1,)), params["embed.value_w"])
        return ad.add(scaled, params["embed.value_b"])


# Concrete Strategy: a single (W, b) shared by every FSU, so equal values embed equally
class SharedValueEmbedding(EmbeddingStrategy):
    def value_embed(self, x: Tensor, params: dict) -> Tensor:
        d = params["embed.value_w"].shape[-1]
        w = ad.reshape(params["embed.value_w"], (d,))
        b = ad.reshape(params["embed.value_b"], (d,))
        return ad.add(ad.mul(ad.reshape(x, x.shape + (1,)), w), b)


class FlowSemModel:
    """Dual-axis transformer over T x N flow tables with a reconstruction decoder and a classification head."""

    def __init__(self, hyper: Hyper, params: dict):
        self.hyper = hyper.validate()
        self.params = params
        self._embedding = SharedValueEmbedding() if hyper.shared_embed else FsuSpecificEmbedding()

    @classmethod
    def init(cls, seed: int, hyper: Hyper) -> "FlowSemModel":
        hyper.validate()
        rng = make_rng(seed)
        params = {}
        for name, (shape, kind) in sorted(parameter_shapes(hyper).items()):
            if kind == "normal":
                data = trunc_normal(rng, shape)
            elif kind == "ones":
                data = np.ones(shape)
            else:
                data = np.zeros(shape)
            params[name] = Tensor(data, requires_grad=name not in BUFFERS, name=name)
        model = cls(hyper, params)
        logging.info(f"Initialized model with {model.parameter_count()} parameters (seed {seed}).")
        return model

    def set_embedding(self, strategy: EmbeddingStrategy):
        logging.info("Switching embedding strategy.")
        self._embedding = strategy

    # ---- parameter groups --------------------------------------------------
    def trainable_params(self) -> dict:
        return {n: t for n, t in self.params.items() if n not in BUFFERS}

    def encoder_params(self) -> dict:
        return {n: t for n, t in self.trainable_params().items() if not n.startswith("head.")}

    def head_params(self) -> dict:
        return {n: t for n, t in self.trainable_params().items() if n.startswith("head.")}

    def encoder_state(self) -> dict:
        """Everything outside the head, fixed statistics included."""
        return {n: t for n, t in self.params.items() if not n.startswith("head.")}

    def reset_head(self, n_classes: int, seed: int):
        """Fresh classification head for n_classes, drawn from its own seeded stream."""
        self.hyper = Hyper(**{**asdict(self.hyper), "C": n_classes}).validate()
        rng = make_rng(seed, 1)
        d = self.hyper.d
        self.params["head.w1"] = Tensor(trunc_normal(rng, (d, d)), True, "head.w1")
        self.params["head.b1"] = Tensor(np.zeros(d), True, "head.b1")
        self.params["head.w2"] = Tensor(trunc_normal(rng, (d, n_classes)), True, "head.w2")
        self.params["head.b2"] = Tensor(np.zeros(n_classes), True, "head.b2")
        self.params["head.z_mean"] = Tensor(np.zeros(d), False, "head.z_mean")
        self.params["head.z_scale"] = Tensor(np.ones(d), False, "head.z_scale")

    def freeze_encoder(self, frozen: bool = True):
        for tensor in self.encoder_params().values():
            tensor.requires_grad = not frozen

    # ---- fixed statistics ----------------------------------------------------
    def fit_input_scaling(self, values: np.ndarray, valid: np.ndarray):
        """
        Per-FSU mean and inverse standard deviation over the valid cells of values[R, T, N].

        Shared embeddings apply one function to every column and carry no per-column statistics.
        """
        if self.hyper.shared_embed:
            return
        cells = np.asarray(values, dtype=np.float64)[np.asarray(valid, dtype=bool)]
        if cells.shape[-1] != self.hyper.N or len(cells) == 0:
            raise ShapeMismatch(f"Cannot fit input scaling from {cells.shape} cells for N={self.hyper.N}")
        std = cells.std(axis=0)
        self.params["embed.value_mean"].data = cells.mean(axis=0).astype(ad.default_dtype())
        self.params["embed.value_scale"].data = np.where(
            std > INPUT_SCALE_FLOOR, 1.0 / np.maximum(std, INPUT_SCALE_FLOOR), 1.0
        ).astype(ad.default_dtype())

    def fit_head_scaling(self, Z: np.ndarray):
        """Standardizes pooled representations z[R, d] per dimension before the head."""
        Z = np.asarray(Z, dtype=np.float64)
        if Z.ndim != 2 or Z.shape[1] != self.hyper.d or len(Z) == 0:
            raise ShapeMismatch(f"Cannot fit head scaling from representations of shape {Z.shape}")
        std = Z.std(axis=0)
        self.params["head.z_mean"].data = Z.mean(axis=0).astype(ad.default_dtype())
        self.params["head.z_scale"].data = np.where(
            std > Z_SCALE_FLOOR, 1.0 / np.maximum(std, Z_SCALE_FLOOR), 1.0
        ).astype(ad.default_dtype())

    # ---- forward -------------------------------------------------------------
    def value_embeddings(self, values) -> Tensor:
        """E_k(x) for x[..., N], without positional terms."""
        x = values if isinstance(values, Tensor) else Tensor(values)
        if x.ndim < 1 or x.shape[-1] != self.hyper.N:
            raise ShapeMismatch(f"Input of shape {x.shape}, model expects {self.hyper.N} FSU columns")
        return self._embedding.value_embed(x, self.params)

    def embed(self, x, valid: np.ndarray, input_mask: np.ndarray) -> Tensor:
        """e[t, i] = E_i(x[t, i]) + p_i + q_t, with the mask token in place of E_i(x) where input_mask holds."""
        if x.ndim != 3 or x.shape[1:] != (self.hyper.T, self.hyper.N):
            raise ShapeMismatch(f"Input of shape {x.shape}, model expects [B, {self.hyper.T}, {self.hyper.N}]")
        if input_mask.shape != x.shape or valid.shape != x.shape[:2]:
            raise ShapeMismatch(f"Masks {input_mask.shape}/{valid.shape} do not match input {x.shape}")
        value = self.value_embeddings(x)
        hide = input_mask.astype(value.data.dtype)[..., None]
        blended = ad.add(ad.mul(value, Tensor(1.0 - hide)), ad.mul(Tensor(hide), self.params["embed.mask_token"]))
        T, d = self.hyper.T, self.hyper.d
        positioned = ad.add(blended, self.params["embed.fsu_pos"])
        return ad.add(positioned, ad.reshape(self.params["embed.time_pos"], (T, 1, d)))

    def _ffn(self, x: Tensor, prefix: str) -> Tensor:
        hidden = ad.gelu(ad.linear(x, self.params[f"{prefix}.w1"], self.params[f"{prefix}.b1"]))
        return ad.linear(hidden, self.params[f"{prefix}.w2"], self.params[f"{prefix}.b2"])

    def _ln(self, x: Tensor, prefix: str) -> Tensor:
        return ad.layer_norm(x, self.params[f"{prefix}.g"], self.params[f"{prefix}.b"])

    def _attn(self, prefix: str) -> dict:
        return {p: self.params[f"{prefix}.{p}"] for p in ATTENTION_PARAMS}

    def time_attention(self, x: Tensor, valid: np.ndarray, prefix: str) -> Tensor:
        """Attention across packets, separately for every FSU column; padded packets are never keys."""
        B, T, N, d = x.shape
        columns = ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (B * N, T, d))
        key_ok = np.repeat(valid, N, axis=0)
        mask = np.where(key_ok, 0.0, -np.inf).astype(x.data.dtype)[:, None, None, :]
        mask = np.broadcast_to(mask, (B * N, 1, T, T))
        out = ad.multihead_attention(columns, columns, columns, self.hyper.h, self._attn(prefix), mask)
        return ad.transpose(ad.reshape(out, (B, N, T, d)), (0, 2, 1, 3))

    def fsu_attention(self, x: Tensor, prefix: str) -> Tensor:
        """Attention across FSUs, separately for every packet row."""
        B, T, N, d = x.shape
        rows = ad.reshape(x, (B * T, N, d))
        out = ad.multihead_attention(rows, rows, rows, self.hyper.h, self._attn(prefix))
        return ad.reshape(out, (B, T, N, d))

    def block(self, H: Tensor, valid: np.ndarray, layer: int) -> Tensor:
        p = f"blocks.{layer}"
        H = ad.add(self.time_attention(self._ln(H, f"{p}.ln1"), valid, f"{p}.time_attn"), H)
        H = ad.add(self._ffn(self._ln(H, f"{p}.ln2"), f"{p}.ffn1"), H)
        H = ad.add(self.fsu_attention(self._ln(H, f"{p}.ln3"), f"{p}.fsu_attn"), H)
        return ad.add(self._ffn(self._ln(H, f"{p}.ln4"), f"{p}.ffn2"), H)

    def encode(self, E: Tensor, valid: np.ndarray) -> Tensor:
        H = E
        for layer in range(self.hyper.L):
            H = self.block(H, valid, layer)
        if not np.all(np.isfinite(H.data)):
            raise NonFiniteDetected("Encoder output contains NaN or Inf")
        return H

    def reconstruct(self, H: Tensor) -> Tensor:
        """Per-FSU linear read-out X_hat[B, T, N]."""
        return ad.add(ad.sum(ad.mul(H, self.params["decoder.w"]), axis=-1), self.params["decoder.b"])

    def pool(self, H: Tensor, valid: np.ndarray) -> Tensor:
        return ad.mean_pool(H, valid)

    def head(self, z: Tensor) -> Tensor:
        z = ad.mul(ad.sub(z, self.params["head.z_mean"]), self.params["head.z_scale"])
        hidden = ad.gelu(ad.linear(z, self.params["head.w1"], self.params["head.b1"]))
        return ad.linear(hidden, self.params["head.w2"], self.params["head.b2"])

    def classify(self, H: Tensor, valid: np.ndarray) -> Tensor:
        return self.head(self.pool(H, valid))

    def represent(self, x: np.ndarray, valid: np.ndarray) -> Tensor:
        """Pooled flow representation z with nothing masked."""
        E = self.embed(x, valid, np.zeros(x.shape, dtype=bool))
        return self.pool(self.encode(E, valid), valid)

    # ---- bookkeeping ---------------------------------------------------------
    def parameter_count(self) -> int:
        return int(sum(t.data.size for t in self.trainable_params().values()))

    def encoder_digest(self) -> str:
        return encoder_digest(self)


def encoder_digest(model: FlowSemModel) -> str:
    """SHA-256 over every non-head parameter and statistic, in name order."""
    digest = hashlib.sha256()
    for name in sorted(model.encoder_state()):
        digest.update(name.encode("utf-8"))
        digest.update(np.ascontiguousarray(model.params[name].data, dtype="<f4").tobytes())
    return digest.hexdigest()


def save_checkpoint(model: FlowSemModel, path, schema_hash: bytes, seed: int, columns: list,
                    flags: Optional[dict] = None) -> None:
    """Writes header (hyper, schema hash, seed, columns, ablation flags) and a CRC'd parameter table."""
    header = {
        "hyper": asdict(model.hyper),
        "schema_hash": schema_hash.hex(),
        "seed": seed,
        "columns": list(columns),
        "flags": dict(flags or {}),
    }
    encoded = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(encoded)))
        f.write(encoded)
        f.write(struct.pack("<I", len(model.params)))
        for name in sorted(model.params):
            data = np.ascontiguousarray(model.params[name].data, dtype="<f4")
            record = (
                struct.pack("<H", len(name.encode("utf-8")))
                + name.encode("utf-8")
                + struct.pack("<B", data.ndim)
                + struct.pack(f"<{data.ndim}I", *data.shape)
                + data.tobytes()
            )
            f.write(record)
            f.write(struct.pack("<I", zlib.crc32(record)))
    logging.info(f"Checkpoint saved to {path}.")


def load_checkpoint(path, expected_schema_hash: Optional[bytes] = None, force: bool = False) -> tuple:
    """
    Reads a checkpoint.

    Returns:
    tuple: (FlowSemModel, header dict)
    """
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise BadMagic(f"{path} is not a model checkpoint")
    try:
        (header_len,) = struct.unpack_from("<I", blob, 8)
        header = json.loads(blob[12 : 12 + header_len].decode("utf-8"))
        offset = 12 + header_len
        (count,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        params = {}
        for _ in range(count):
            start = offset
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (ndim,) = struct.unpack_from("<B", blob, offset)
            offset += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, offset)
            offset += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64)) * 4
            if offset + size + 4 > len(blob):
                raise Corrupt(f"{path}: parameter {name} runs past end of file")
            data = np.frombuffer(blob, dtype="<f4", count=size // 4, offset=offset).reshape(shape)
            offset += size
            (crc,) = struct.unpack_from("<I", blob, offset)
            if zlib.crc32(blob[start:offset]) != crc:
                raise Corrupt(f"{path}: checksum mismatch in parameter {name}")
            offset += 4
            params[name] = Tensor(data.astype(np.float32), requires_grad=name not in BUFFERS, name=name)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise Corrupt(f"{path}: truncated or malformed checkpoint: {e}") from e
    if offset != len(blob):
        raise Corrupt(f"{path}: {len(blob) - offset} trailing bytes")

    if expected_schema_hash is not None and header["schema_hash"] != expected_schema_hash.hex():
        if not force:
            raise SchemaMismatch(f"{path} was trained on schema {header['schema_hash'][:12]}...")
        logging.warning("Loading checkpoint despite schema hash mismatch (forced).")

    hyper = Hyper(**header["hyper"])
    expected = parameter_shapes(hyper)
    if set(expected) != set(params) or any(params[n].shape != expected[n][0] for n in expected):
        raise Corrupt(f"{path}: parameter table does not match its hyperparameters")
    logging.info(f"Checkpoint loaded from {path}.")
    return FlowSemModel(hyper, params), header
