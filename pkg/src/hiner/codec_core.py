"""Wavelength-conditioned model: positional encoding, tiny encoder, conv decoder.

A model maps a normalized wavelength to one spectral band: the wavelength is
lifted by a sinusoidal positional encoding, a small learnable layer turns it
into a low-resolution embedding, and a stack of conv + sub-pixel upsampling
blocks decodes the embedding into the full-resolution band.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DataError, DimensionMismatchError

ENCODER_LEARNED = "learned"       # PE -> affine -> GELU
ENCODER_FROZEN_PE = "frozen_pe"   # PE -> fixed random linear map, not trained
ENCODER_RAW_LAMBDA = "learned_raw"  # raw wavelength -> affine -> GELU (no PE)
ENCODER_NONE = "none"             # decode-only model (embeddings supplied externally)


@dataclass(frozen=True)
class PosEncodingConfig:
    """Sinusoidal lift of a scalar wavelength into 2*levels dimensions."""

    base_b: float = 1.25
    levels_l: int = 80

    def __post_init__(self):
        if self.base_b <= 1.0:
            raise ConfigError("positional encoding base must be > 1")
        if self.levels_l < 1:
            raise ConfigError("positional encoding needs at least one level")

    @property
    def dim(self) -> int:
        return 2 * self.levels_l


@dataclass(frozen=True)
class DecoderConfig:
    """Upsampling decoder hyper-parameters.

    ``channel_widths`` lists the input width followed by the width after each
    block; ``target_hw`` is the final center-crop size.
    """

    strides: tuple[int, ...]
    channel_widths: tuple[int, ...]
    kernel_size: int
    target_hw: tuple[int, int]

    def __post_init__(self):
        if len(self.channel_widths) != len(self.strides) + 1:
            raise ConfigError("need one channel width per block plus the input width")
        if any(s < 1 for s in self.strides) or any(w < 1 for w in self.channel_widths):
            raise ConfigError("strides and widths must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError("kernel size must be a positive odd integer")

    @property
    def upsample_factor(self) -> int:
        return int(np.prod(self.strides))


def pos_encode(lam, cfg: PosEncodingConfig) -> np.ndarray:
    """Interleaved sin/cos features: out[2k] = sin(b^k pi lam), out[2k+1] = cos(b^k pi lam).

    Accepts a scalar (returns shape (2l,)) or a 1-D array (returns (n, 2l)).
    Wavelengths must lie strictly inside (0, 1).
    """
    lam_arr = np.atleast_1d(np.asarray(lam, dtype=np.float64))
    if np.any(lam_arr <= 0.0) or np.any(lam_arr >= 1.0):
        raise DataError("wavelength outside the open interval (0, 1)")
    freqs = cfg.base_b ** np.arange(cfg.levels_l, dtype=np.float64) * np.pi
    phase = lam_arr[:, None] * freqs[None, :]
    out = np.empty((lam_arr.size, cfg.dim), dtype=np.float64)
    out[:, 0::2] = np.sin(phase)
    out[:, 1::2] = np.cos(phase)
    return out[0] if np.isscalar(lam) or np.asarray(lam).ndim == 0 else out


def center_crop_offsets(pre: tuple[int, int], target: tuple[int, int]) -> tuple[int, int]:
    """Crop offsets per axis: floor((pre - target) / 2)."""
    if pre[0] < target[0] or pre[1] < target[1]:
        raise ConfigError(f"pre-crop size {pre} smaller than target {target}")
    return (pre[0] - target[0]) // 2, (pre[1] - target[1]) // 2


class HinerModel(nn.Module):
    """Encoder + decoder pair for one hyperspectral cube.

    The decoder applies, per block, a same-padded conv, a sub-pixel
    (depth-to-space) rearrangement, and a GELU, then a 1x1 head conv and a
    center crop to the target size. The head output is unclamped.
    """

    def __init__(
        self,
        pe_cfg: PosEncodingConfig,
        embed_shape: tuple[int, int, int],
        decoder_cfg: DecoderConfig,
        encoder_kind: str = ENCODER_LEARNED,
        seed: int = 0,
    ):
        super().__init__()
        h0, w0, c0 = embed_shape
        if decoder_cfg.channel_widths[0] != c0:
            raise ConfigError("first channel width must equal the embedding channel count")
        up = decoder_cfg.upsample_factor
        if h0 * up < decoder_cfg.target_hw[0] or w0 * up < decoder_cfg.target_hw[1]:
            raise ConfigError("upsampled embedding cannot cover the target size")
        self.pe_cfg = pe_cfg
        self.embed_shape = tuple(embed_shape)
        self.decoder_cfg = decoder_cfg
        self.encoder_kind = encoder_kind
        self.seed = seed
        self.act = nn.GELU()

        n_embed = h0 * w0 * c0
        gen = torch.Generator().manual_seed(seed)

        self.encoder = None
        if encoder_kind == ENCODER_LEARNED:
            self.encoder = nn.Linear(pe_cfg.dim, n_embed)
            self._init_affine(self.encoder, gen)
        elif encoder_kind == ENCODER_RAW_LAMBDA:
            self.encoder = nn.Linear(1, n_embed)
            self._init_affine(self.encoder, gen)
        elif encoder_kind == ENCODER_FROZEN_PE:
            fm = torch.empty(n_embed, pe_cfg.dim)
            fm.normal_(0.0, 1.0 / math.sqrt(pe_cfg.dim), generator=gen)
            self.register_buffer("frozen_map", fm)
        elif encoder_kind == ENCODER_NONE:
            pass
        else:
            raise ConfigError(f"unknown encoder kind: {encoder_kind!r}")
        if encoder_kind != ENCODER_FROZEN_PE:
            self.frozen_map = None

        widths, strides, k = decoder_cfg.channel_widths, decoder_cfg.strides, decoder_cfg.kernel_size
        self.blocks = nn.ModuleList(
            nn.Conv2d(widths[i], widths[i + 1] * strides[i] ** 2, k, padding=k // 2)
            for i in range(len(strides))
        )
        self.head = nn.Conv2d(widths[-1], 1, 1)
        for conv in [*self.blocks, self.head]:
            self._init_affine(conv, gen)

    @staticmethod
    def _init_affine(mod: nn.Module, gen: torch.Generator) -> None:
        # fan-in-scaled uniform on weight and bias
        w = mod.weight
        fan_in = w.shape[1] * (w.shape[2] * w.shape[3] if w.dim() == 4 else 1)
        bound = 1.0 / math.sqrt(fan_in)
        with torch.no_grad():
            w.uniform_(-bound, bound, generator=gen)
            mod.bias.uniform_(-bound, bound, generator=gen)

    # -- feature / embedding / decode stages (torch, batched) ---------------

    def input_features(self, lams: np.ndarray) -> torch.Tensor:
        """Encoder input for a vector of wavelengths: PE features or raw lambda."""
        lams = np.atleast_1d(np.asarray(lams, dtype=np.float64))
        if self.encoder_kind == ENCODER_RAW_LAMBDA:
            if np.any(lams <= 0.0) or np.any(lams >= 1.0):
                raise DataError("wavelength outside the open interval (0, 1)")
            feats = lams[:, None]
        else:
            feats = pos_encode(lams, self.pe_cfg)
        return torch.from_numpy(np.ascontiguousarray(feats)).float()

    def embed(self, feats: torch.Tensor) -> torch.Tensor:
        """(B, in_dim) features -> (B, c0, h0, w0) embedding tensor."""
        if self.encoder_kind == ENCODER_NONE:
            raise ConfigError("model carries no encoder; decode from stored embeddings")
        if self.encoder_kind == ENCODER_FROZEN_PE:
            flat = feats @ self.frozen_map.t()
        else:
            flat = self.act(self.encoder(feats))
        h0, w0, c0 = self.embed_shape
        return flat.reshape(-1, h0, w0, c0).permute(0, 3, 1, 2)

    def decode(self, emb: torch.Tensor) -> torch.Tensor:
        """(B, c0, h0, w0) embedding -> (B, 1, H, W) band, center-cropped."""
        x = emb
        for conv, s in zip(self.blocks, self.decoder_cfg.strides):
            x = self.act(F.pixel_shuffle(conv(x), s))
        x = self.head(x)
        th, tw = self.decoder_cfg.target_hw
        oh, ow = center_crop_offsets((x.shape[-2], x.shape[-1]), (th, tw))
        return x[..., oh : oh + th, ow : ow + tw]

    def forward(self, lams: np.ndarray) -> torch.Tensor:
        return self.decode(self.embed(self.input_features(lams)))

    # -- serialization support ----------------------------------------------

    def decoder_named_tensors(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, conv in enumerate(self.blocks):
            out.append((f"dec{i}.weight", conv.weight.detach().numpy()))
            out.append((f"dec{i}.bias", conv.bias.detach().numpy()))
        out.append(("head.weight", self.head.weight.detach().numpy()))
        out.append(("head.bias", self.head.bias.detach().numpy()))
        return out

    def encoder_named_tensors(self) -> list[tuple[str, np.ndarray]]:
        if self.encoder_kind == ENCODER_FROZEN_PE:
            return [("enc.weight", self.frozen_map.detach().numpy())]
        if self.encoder is None:
            return []
        return [
            ("enc.weight", self.encoder.weight.detach().numpy()),
            ("enc.bias", self.encoder.bias.detach().numpy()),
        ]

    def load_named_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        with torch.no_grad():
            for i, conv in enumerate(self.blocks):
                conv.weight.copy_(torch.from_numpy(tensors[f"dec{i}.weight"]))
                conv.bias.copy_(torch.from_numpy(tensors[f"dec{i}.bias"]))
            self.head.weight.copy_(torch.from_numpy(tensors["head.weight"]))
            self.head.bias.copy_(torch.from_numpy(tensors["head.bias"]))
            if self.encoder_kind == ENCODER_FROZEN_PE:
                self.frozen_map.copy_(torch.from_numpy(tensors["enc.weight"]))
            elif self.encoder is not None:
                self.encoder.weight.copy_(torch.from_numpy(tensors["enc.weight"]))
                self.encoder.bias.copy_(torch.from_numpy(tensors["enc.bias"]))


# ---------------------------------------------------------------------------
# Contract-level wrappers (numpy in / numpy out, single wavelength)
# ---------------------------------------------------------------------------

def encode_wavelength(lam: float, model: HinerModel) -> np.ndarray:
    """Embedding for one wavelength, shape (h0, w0, c0)."""
    with torch.no_grad():
        emb = model.embed(model.input_features(lam))
    return emb[0].permute(1, 2, 0).numpy()


def decode_band(embedding: np.ndarray, model: HinerModel) -> np.ndarray:
    """Decode one (h0, w0, c0) embedding down to an (H, W) band."""
    embedding = np.asarray(embedding, dtype=np.float32)
    if embedding.shape != model.embed_shape:
        raise DimensionMismatchError(
            f"embedding shape {embedding.shape} != model embed shape {model.embed_shape}"
        )
    with torch.no_grad():
        emb = torch.from_numpy(embedding).permute(2, 0, 1).unsqueeze(0)
        band = model.decode(emb)
    return band[0, 0].numpy()


def forward(lam: float, model: HinerModel) -> np.ndarray:
    """Reconstruct the band for one wavelength (encode then decode)."""
    return decode_band(encode_wavelength(lam, model), model)


def reconstruct_cube(model: HinerModel, lambdas: np.ndarray, clamp: bool = False) -> np.ndarray:
    """Reconstruct all bands for a wavelength vector, shape (C, H, W)."""
    with torch.no_grad():
        bands = model.forward(np.asarray(lambdas, dtype=np.float64))
        if clamp:
            bands = bands.clamp(0.0, 1.0)
    return bands[:, 0].numpy()


# ---------------------------------------------------------------------------
# Sizing
# ---------------------------------------------------------------------------

def decoder_param_count(widths: tuple[int, ...], strides: tuple[int, ...], kernel_size: int) -> int:
    total = 0
    for i, s in enumerate(strides):
        cout = widths[i + 1] * s * s
        total += widths[i] * cout * kernel_size * kernel_size + cout
    total += widths[-1] + 1  # 1x1 head to a single channel
    return total


def size_bytes(model: HinerModel, bitwidth: int, include_embeddings: bool = False, bands: int = 0) -> int:
    """Exact payload byte count of the decoder (plus, optionally, per-band embeddings).

    Header and entropy-coding table overhead belong to the bitstream layer and
    are not counted here.
    """
    if bitwidth not in (8, 16, 32):
        raise ConfigError("bitwidth must be one of 8, 16, 32")
    cfg = model.decoder_cfg
    n = decoder_param_count(cfg.channel_widths, cfg.strides, cfg.kernel_size)
    total = (n * bitwidth + 7) // 8
    if include_embeddings:
        h0, w0, c0 = model.embed_shape
        total += (bands * h0 * w0 * c0 * bitwidth + 7) // 8
    return total


def _widths_for_scale(c0: int, n_blocks: int, scale: float, min_width: int) -> tuple[int, ...]:
    # geometric decay (ratio 1/2) from the embedding width, globally scaled
    widths = [c0]
    for k in range(1, n_blocks + 1):
        base = c0 * 0.5 ** k
        widths.append(max(min_width, int(round(base * scale))))
    return tuple(widths)


def init_model(
    dims: tuple[int, int, int],
    embed_shape: tuple[int, int, int],
    strides: tuple[int, ...],
    pe_cfg: PosEncodingConfig,
    target_total_bytes: int,
    seed: int = 0,
    kernel_size: int = 3,
    min_width: int = 8,
    encoder_kind: str = ENCODER_LEARNED,
) -> HinerModel:
    """Build a model whose 8-bit payload (decoder + all-band embeddings) hits a byte budget.

    Channel widths follow a geometric decay from the embedding width and are
    globally scaled so the total lands within 5% of ``target_total_bytes``.
    Raises when the budget is unreachable, naming the closest achievable size.
    """
    height, width, bands = dims
    h0, w0, c0 = embed_shape
    up = int(np.prod(strides))
    if h0 * up < height or w0 * up < width:
        raise ConfigError(
            f"strides {strides} on embed {embed_shape} reach {h0 * up}x{w0 * up}, "
            f"below target {height}x{width}"
        )
    embed_bytes = bands * h0 * w0 * c0  # 8-bit embeddings

    def total(scale: float) -> tuple[int, tuple[int, ...]]:
        widths = _widths_for_scale(c0, len(strides), scale, min_width)
        return decoder_param_count(widths, strides, kernel_size) + embed_bytes, widths

    lo, hi = 1e-6, 1.0
    while total(hi)[0] < target_total_bytes and max(total(hi)[1]) < 60000:
        hi *= 2.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if total(mid)[0] < target_total_bytes:
            lo = mid
        else:
            hi = mid
    best_size, best_widths = min(
        (total(lo), total(hi)), key=lambda t: abs(t[0] - target_total_bytes)
    )
    if abs(best_size - target_total_bytes) > 0.05 * target_total_bytes:
        raise ConfigError(
            f"cannot size decoder to {target_total_bytes} bytes "
            f"(closest achievable: {best_size} bytes with widths {best_widths})"
        )
    cfg = DecoderConfig(
        strides=tuple(int(s) for s in strides),
        channel_widths=best_widths,
        kernel_size=kernel_size,
        target_hw=(height, width),
    )
    return HinerModel(pe_cfg, embed_shape, cfg, encoder_kind=encoder_kind, seed=seed)
