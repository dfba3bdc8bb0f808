"""Quantization, entropy coding, and the `.hinr` container.

All rate arithmetic lives here. The container stores, little-endian: a fixed
header (dims, positional-encoding and decoder hyper-parameters, bit-width),
then one record per tensor: quantization min/scale, a 256-entry canonical
code-length table, the exact payload bit length, and the byte-padded payload.
Rate-counted records are the embeddings and the decoder tensors; an optional
encoder side-channel rides along without contributing to the reported rate.
"""

from __future__ import annotations

import heapq
import struct
from dataclasses import dataclass

import numpy as np
import torch

from .codec_core import (
    ENCODER_FROZEN_PE,
    ENCODER_LEARNED,
    ENCODER_NONE,
    ENCODER_RAW_LAMBDA,
    DecoderConfig,
    HinerModel,
    PosEncodingConfig,
)
from .errors import (
    BadMagicError,
    ConfigError,
    CorruptStreamError,
    DataError,
    DimensionMismatchError,
    TruncatedPayloadError,
    VersionMismatchError,
)
from .hsi_io import HsiCube

MAGIC = b"HINR"
VERSION = 1
FLAG_ENCODER_PRESENT = 0x01
FLAG_ENCODER_FROZEN = 0x02
FLOAT_BITWIDTH = 32  # raw-float container mode (checkpoints); no quantization
TABLE_SIZE = 256


@dataclass(frozen=True)
class QuantSpec:
    """Per-tensor linear quantizer: code = round((v - min) / scale)."""

    bitwidth: int
    min: float
    scale: float

    def __post_init__(self):
        if not (2 <= self.bitwidth <= 16):
            raise ConfigError("quantization bitwidth must be in 2..16")
        if self.scale < 0:
            raise ConfigError("scale must be >= 0")


@dataclass
class QuantizedTensor:
    name: str
    shape: tuple[int, ...]
    spec: QuantSpec
    codes: np.ndarray

    def __post_init__(self):
        if self.codes.size != int(np.prod(self.shape)):
            raise DataError("code count does not match shape")
        if self.codes.size and (self.codes.min() < 0 or self.codes.max() > 2**self.spec.bitwidth - 1):
            raise DataError("quantized codes out of range")


@dataclass
class HuffmanTable:
    """Canonical code lengths per symbol; absent symbols have length 0."""

    lengths: np.ndarray

    def __post_init__(self):
        lengths = np.asarray(self.lengths, dtype=np.int64)
        present = lengths[lengths > 0]
        if present.size:
            max_len = int(present.max())
            if sum(1 << (max_len - int(l)) for l in present) > (1 << max_len):
                raise DataError("code lengths violate the Kraft inequality")
        self.lengths = lengths


def quantize_tensor(values: np.ndarray, bitwidth: int, name: str = "") -> QuantizedTensor:
    """Uniform per-tensor quantization with ties rounding half away from zero.

    A constant tensor encodes scale 0 and all-zero codes. min/scale are kept
    at float32 precision to match the container fields exactly.
    """
    values = np.asarray(values)
    if not np.all(np.isfinite(values)):
        raise DataError("cannot quantize non-finite values")
    v = values.astype(np.float64).ravel()
    levels = 2**bitwidth - 1
    vmin = float(np.float32(v.min())) if v.size else 0.0
    vmax = float(v.max()) if v.size else 0.0
    scale = float(np.float32((vmax - vmin) / levels))
    spec = QuantSpec(bitwidth=bitwidth, min=vmin, scale=scale)
    if scale == 0.0:
        codes = np.zeros(v.size, dtype=np.int64)
    else:
        codes = np.clip(np.floor((v - vmin) / scale + 0.5), 0, levels).astype(np.int64)
    return QuantizedTensor(name=name, shape=tuple(values.shape), spec=spec, codes=codes)


def dequantize_tensor(q: QuantizedTensor) -> np.ndarray:
    """Inverse map min + code * scale; error is bounded by scale/2 elementwise."""
    vals = q.spec.min + q.codes.astype(np.float64) * q.spec.scale
    return vals.reshape(q.shape)


# ---------------------------------------------------------------------------
# Canonical Huffman coding
# ---------------------------------------------------------------------------

def _huffman_lengths(freqs: np.ndarray) -> np.ndarray:
    lengths = np.zeros(freqs.size, dtype=np.int64)
    heap = []
    tie = 0
    for sym, f in enumerate(freqs):
        if f > 0:
            heap.append((int(f), tie, [sym]))
            tie += 1
    heapq.heapify(heap)
    if not heap:
        return lengths
    if len(heap) == 1:
        lengths[heap[0][2][0]] = 1  # one-symbol convention: 1 bit per symbol
        return lengths
    while len(heap) > 1:
        f1, _, s1 = heapq.heappop(heap)
        f2, _, s2 = heapq.heappop(heap)
        for s in s1:
            lengths[s] += 1
        for s in s2:
            lengths[s] += 1
        heapq.heappush(heap, (f1 + f2, tie, s1 + s2))
        tie += 1
    return lengths


def _canonical_codes(lengths: np.ndarray) -> np.ndarray:
    codes = np.zeros(lengths.size, dtype=np.int64)
    items = sorted((int(l), s) for s, l in enumerate(lengths) if l > 0)
    code = 0
    prev_len = 0
    for length, sym in items:
        code <<= length - prev_len
        codes[sym] = code
        code += 1
        prev_len = length
    return codes


def huffman_encode(codes: np.ndarray, alphabet_size: int) -> tuple[HuffmanTable, bytes, int]:
    """Canonical Huffman over the empirical histogram.

    Returns (table, payload bytes, exact payload bit length). Empty input
    yields an empty table and payload.
    """
    codes = np.asarray(codes, dtype=np.int64).ravel()
    if codes.size and (codes.min() < 0 or codes.max() >= alphabet_size):
        raise DataError("symbol outside alphabet")
    freqs = np.bincount(codes, minlength=alphabet_size)
    lengths = _huffman_lengths(freqs)
    table = HuffmanTable(lengths=lengths)
    if codes.size == 0:
        return table, b"", 0
    values = _canonical_codes(lengths)
    sym_lengths = lengths[codes]
    sym_values = values[codes]
    total_bits = int(sym_lengths.sum())
    ends = np.cumsum(sym_lengths)
    starts = ends - sym_lengths
    bits = np.zeros(total_bits, dtype=np.uint8)
    for j in range(int(sym_lengths.max())):
        mask = sym_lengths > j
        shift = sym_lengths[mask] - 1 - j
        bits[starts[mask] + j] = (sym_values[mask] >> shift) & 1
    return table, np.packbits(bits).tobytes(), total_bits


def huffman_decode(table: HuffmanTable, payload: bytes, count: int, bit_length: int | None = None) -> np.ndarray:
    """Exact inverse of huffman_encode; malformed streams raise CorruptStreamError."""
    if count == 0:
        if bit_length not in (None, 0):
            raise CorruptStreamError("payload bits left over after decoding")
        return np.zeros(0, dtype=np.int64)
    lengths = table.lengths
    if not np.any(lengths > 0):
        raise CorruptStreamError("empty Huffman table with nonzero symbol count")
    values = _canonical_codes(lengths)
    by_length: dict[int, dict[int, int]] = {}
    for sym, l in enumerate(lengths):
        if l > 0:
            by_length.setdefault(int(l), {})[int(values[sym])] = sym
    max_len = max(by_length)

    n_bits = len(payload) * 8 if bit_length is None else bit_length
    if bit_length is not None and len(payload) < (bit_length + 7) // 8:
        raise CorruptStreamError("payload shorter than declared bit length")
    bit_arr = np.unpackbits(np.frombuffer(payload, dtype=np.uint8))[:n_bits].tolist()
    out = np.empty(count, dtype=np.int64)
    acc = 0
    acc_len = 0
    decoded = 0
    for bit in bit_arr:
        acc = (acc << 1) | bit
        acc_len += 1
        if acc_len > max_len:
            raise CorruptStreamError("no Huffman code matches the stream prefix")
        sym = by_length.get(acc_len, {}).get(acc)
        if sym is not None:
            out[decoded] = sym
            decoded += 1
            acc = 0
            acc_len = 0
            if decoded == count:
                break
    else:
        raise CorruptStreamError(f"stream ended after {decoded} of {count} symbols")
    if bit_length is not None:
        consumed = int(np.sum(lengths[out]))
        if consumed != bit_length:
            raise CorruptStreamError("payload bits left over after decoding")
    return out


# ---------------------------------------------------------------------------
# Container
# ---------------------------------------------------------------------------

class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedPayloadError(
                f"stream truncated: need {n} bytes at offset {self.pos}, have {len(self.data) - self.pos}"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))


def _tensor_record(name: str, values: np.ndarray, bitwidth: int) -> tuple[bytes, int]:
    """Serialize one tensor record; returns (bytes, payload byte count)."""
    out = bytearray()
    name_b = name.encode("utf-8")
    out += struct.pack("<B", len(name_b)) + name_b
    out += struct.pack("<B", values.ndim)
    out += struct.pack(f"<{values.ndim}I", *values.shape)
    if bitwidth == FLOAT_BITWIDTH:
        payload = np.ascontiguousarray(values, dtype="<f4").tobytes()
        bits = 8 * len(payload)
        out += struct.pack("<ff", 0.0, 0.0)
        out += bytes(TABLE_SIZE)
        out += struct.pack("<Q", bits)
        out += payload
        return bytes(out), len(payload)
    q = quantize_tensor(values, bitwidth, name=name)
    table, payload, bits = huffman_encode(q.codes, 2**bitwidth)
    out += struct.pack("<ff", q.spec.min, q.spec.scale)
    lengths = np.zeros(TABLE_SIZE, dtype=np.uint8)
    lengths[: table.lengths.size] = table.lengths
    out += lengths.tobytes()
    out += struct.pack("<Q", bits)
    out += payload
    return bytes(out), len(payload)


def serialize(
    model: HinerModel,
    embeddings: np.ndarray,
    bitwidth: int = 8,
    include_encoder: bool = False,
) -> bytes:
    """Pack the model and all per-band embeddings into `.hinr` bytes.

    ``embeddings`` has shape (C, h0, w0, c0). Rate-counted records are the
    embeddings and decoder tensors; encoder records (when included) follow at
    the end as a side-channel. Deterministic: same inputs, same bytes.
    """
    if bitwidth != FLOAT_BITWIDTH and not (2 <= bitwidth <= 8):
        raise ConfigError("container bitwidth must be 2..8 (quantized) or 32 (float)")
    if model.decoder_cfg.kernel_size != 3:
        raise ConfigError("container format fixes the decoder kernel at 3x3")
    embeddings = np.asarray(embeddings, dtype=np.float32)
    if embeddings.ndim != 4 or embeddings.shape[1:] != model.embed_shape:
        raise DimensionMismatchError(
            f"embeddings shape {embeddings.shape} does not match (C, {model.embed_shape})"
        )
    if include_encoder and model.encoder_kind == ENCODER_NONE:
        raise ConfigError("model has no encoder to include")

    cfg = model.decoder_cfg
    bands = embeddings.shape[0]
    flags = 0
    records: list[tuple[str, np.ndarray]] = [("embeddings", embeddings)]
    records += model.decoder_named_tensors()
    if include_encoder:
        flags |= FLAG_ENCODER_PRESENT
        if model.encoder_kind == ENCODER_FROZEN_PE:
            flags |= FLAG_ENCODER_FROZEN
        records += model.encoder_named_tensors()

    out = bytearray()
    out += MAGIC
    out += struct.pack("<BB", VERSION, flags)
    out += struct.pack("<III", cfg.target_hw[0], cfg.target_hw[1], bands)
    out += struct.pack("<f", model.pe_cfg.base_b)
    out += struct.pack("<H", model.pe_cfg.levels_l)
    out += struct.pack("<B", len(cfg.strides))
    out += struct.pack(f"<{len(cfg.strides)}B", *cfg.strides)
    out += struct.pack("<HHH", *model.embed_shape)
    out += struct.pack("<B", len(cfg.channel_widths))
    out += struct.pack(f"<{len(cfg.channel_widths)}H", *cfg.channel_widths)
    out += struct.pack("<B", bitwidth)
    out += struct.pack("<H", len(records))
    for name, values in records:
        rec, _ = _tensor_record(name, values, bitwidth)
        out += rec
    return bytes(out)


def deserialize(data: bytes) -> tuple[HinerModel, np.ndarray]:
    """Rebuild the model (dequantized weights) and embeddings from `.hinr` bytes."""
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise BadMagicError("not a .hinr stream (bad magic)")
    version, flags = r.unpack("BB")
    if version != VERSION:
        raise VersionMismatchError(f"unsupported container version {version}")
    height, width, bands = r.unpack("III")
    (base_b,) = r.unpack("f")
    (levels_l,) = r.unpack("H")
    (n_strides,) = r.unpack("B")
    strides = r.unpack(f"{n_strides}B")
    embed_shape = r.unpack("HHH")
    (n_widths,) = r.unpack("B")
    widths = r.unpack(f"{n_widths}H")
    (bitwidth,) = r.unpack("B")
    (n_records,) = r.unpack("H")

    tensors: dict[str, np.ndarray] = {}
    order: list[str] = []
    for _ in range(n_records):
        (name_len,) = r.unpack("B")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("B")
        shape = r.unpack(f"{rank}I")
        vmin, vscale = r.unpack("ff")
        lengths = np.frombuffer(r.take(TABLE_SIZE), dtype=np.uint8)
        (bits,) = r.unpack("Q")
        payload = r.take((bits + 7) // 8)
        count = int(np.prod(shape)) if rank else 1
        if bitwidth == FLOAT_BITWIDTH:
            if bits != 32 * count:
                raise CorruptStreamError(f"float record {name} has wrong bit length")
            values = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)
        else:
            try:
                table = HuffmanTable(lengths=lengths[: 2**bitwidth].astype(np.int64))
                codes = huffman_decode(table, payload, count, bit_length=bits)
            except DataError as exc:
                raise CorruptStreamError(f"record {name}: {exc}") from exc
            q = QuantizedTensor(name=name, shape=shape,
                                spec=QuantSpec(bitwidth=bitwidth, min=vmin, scale=vscale),
                                codes=codes)
            values = dequantize_tensor(q).astype(np.float32)
        tensors[name] = values
        order.append(name)

    if "embeddings" not in tensors:
        raise CorruptStreamError("stream carries no embeddings record")
    embeddings = tensors["embeddings"]
    if embeddings.shape != (bands,) + tuple(embed_shape):
        raise CorruptStreamError("embeddings record shape disagrees with header")

    if flags & FLAG_ENCODER_PRESENT:
        if flags & FLAG_ENCODER_FROZEN:
            kind = ENCODER_FROZEN_PE
        elif "enc.weight" in tensors and tensors["enc.weight"].shape[1] == 1:
            kind = ENCODER_RAW_LAMBDA
        else:
            kind = ENCODER_LEARNED
        if "enc.weight" not in tensors:
            raise CorruptStreamError("encoder flagged present but missing from stream")
    else:
        kind = ENCODER_NONE

    cfg = DecoderConfig(strides=tuple(strides), channel_widths=tuple(widths),
                        kernel_size=3, target_hw=(height, width))
    pe = PosEncodingConfig(base_b=float(base_b), levels_l=int(levels_l))
    model = HinerModel(pe, tuple(embed_shape), cfg, encoder_kind=kind, seed=0)
    try:
        model.load_named_tensors(tensors)
    except (KeyError, RuntimeError) as exc:
        raise CorruptStreamError(f"tensor records do not fit the declared model: {exc}") from exc
    return model, embeddings


def stream_summary(data: bytes) -> dict:
    """Rate accounting for a serialized stream.

    ``payload_bytes`` counts ceil(bits/8) over rate-counted records only
    (embeddings + decoder); ``file_bytes`` is the whole container.
    """
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise BadMagicError("not a .hinr stream (bad magic)")
    version, flags = r.unpack("BB")
    if version != VERSION:
        raise VersionMismatchError(f"unsupported container version {version}")
    height, width, bands = r.unpack("III")
    r.unpack("f")
    r.unpack("H")
    (n_strides,) = r.unpack("B")
    r.unpack(f"{n_strides}B")
    r.unpack("HHH")
    (n_widths,) = r.unpack("B")
    r.unpack(f"{n_widths}H")
    (bitwidth,) = r.unpack("B")
    (n_records,) = r.unpack("H")
    payload_bytes = 0
    side_channel_bytes = 0
    records = []
    for _ in range(n_records):
        (name_len,) = r.unpack("B")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("B")
        r.unpack(f"{rank}I")
        r.unpack("ff")
        r.take(TABLE_SIZE)
        (bits,) = r.unpack("Q")
        nbytes = (bits + 7) // 8
        r.take(nbytes)
        records.append({"name": name, "bits": bits, "bytes": nbytes})
        if name.startswith("enc."):
            side_channel_bytes += nbytes
        else:
            payload_bytes += nbytes
    return {
        "dims": (height, width, bands),
        "bitwidth": bitwidth,
        "encoder_present": bool(flags & FLAG_ENCODER_PRESENT),
        "payload_bytes": payload_bytes,
        "side_channel_bytes": side_channel_bytes,
        "file_bytes": len(data),
        "records": records,
    }


def reconstruct_from_bitstream(data: bytes, dims: tuple[int, int, int] | None = None) -> HsiCube:
    """Decode every stored band embedding and clamp the result into [0, 1]."""
    model, embeddings = deserialize(data)
    cfg = model.decoder_cfg
    bands = embeddings.shape[0]
    if dims is not None and tuple(dims) != (cfg.target_hw[0], cfg.target_hw[1], bands):
        raise DimensionMismatchError(
            f"requested dims {tuple(dims)} != stream dims {(cfg.target_hw[0], cfg.target_hw[1], bands)}"
        )
    with torch.no_grad():
        emb = torch.from_numpy(embeddings).permute(0, 3, 1, 2)
        out = model.decode(emb).clamp(0.0, 1.0)
    return HsiCube.from_data(out[:, 0].numpy(), source_bitdepth=32)


@dataclass
class RdPoint:
    """One operating point on the rate-distortion curve."""

    bpppb: float
    mean_psnr: float
    compression_ratio: float
    label: str = ""


def bpppb(payload_bytes: int, dims: tuple[int, int, int]) -> float:
    """Bits per pixel per band: 8 * bytes / (H * W * C)."""
    h, w, c = dims
    if min(h, w, c) < 1:
        raise DataError("dims must be positive")
    return 8.0 * payload_bytes / (h * w * c)


def cr(source_bitdepth: int, bpppb_value: float) -> float:
    """Compression ratio: raw bits per sample over compressed bits per sample."""
    if bpppb_value <= 0:
        raise DataError("bpppb must be > 0 to form a compression ratio")
    return source_bitdepth / bpppb_value
