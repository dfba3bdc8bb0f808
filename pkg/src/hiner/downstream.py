"""Classification on compressed cubes.

Pieces: a band-reweighting adapter with 1x1-conv cross-band mixing that turns
a perception-oriented reconstruction into a classification-oriented one, a
wavelength-jitter augmentation that exploits the continuous wavelength-to-band
mapping of a trained codec model, a small pluggable patch classifier, and the
usual accuracy metrics (overall/average accuracy, kappa).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from . import bitstream as bs
from . import codec_core
from .codec_core import ENCODER_NONE, HinerModel
from .errors import ConfigError, DataError, DimensionMismatchError
from .hsi_io import HsiCube, LabelMap, WavelengthGrid, wavelength_grid
from .training import LossConfig, hiner_loss

ISI_CLAMP_MARGIN = 1e-4


@dataclass(frozen=True)
class IsiConfig:
    """Uniform wavelength jitter: half-width eta in normalized-wavelength units,
    applied with probability enable_prob per drawn sample."""

    eta: float = 0.1
    enable_prob: float = 0.5

    def __post_init__(self):
        if self.eta < 0:
            raise ConfigError("eta must be >= 0")
        if not (0.0 <= self.enable_prob <= 1.0):
            raise ConfigError("enable_prob must lie in [0, 1]")


@dataclass(frozen=True)
class ClassifierTrainConfig:
    beta: float = 2.5
    lr: float = 5e-4
    weight_decay: float = 5e-3
    epochs: int = 300
    patch_size: int = 7
    seed: int = 0

    def __post_init__(self):
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if self.lr <= 0 or self.epochs < 1:
            raise ConfigError("lr must be > 0 and epochs >= 1")
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ConfigError("patch_size must be a positive odd integer")


@dataclass
class ConfusionMatrix:
    counts: np.ndarray

    def __post_init__(self):
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise DataError("confusion matrix must be square")
        if np.any(self.counts < 0):
            raise DataError("confusion counts must be >= 0")

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class ClassifierReport:
    loss_trace: list[float] = field(default_factory=list)
    ce_trace: list[float] = field(default_factory=list)
    recon_trace: list[float] = field(default_factory=list)
    wall_time_s: float = 0.0


class AswParams(nn.Module):
    """Band reweighting plus 1x1-conv cross-band mixing, residual around the mix.

    The weight vector comes from a small MLP over the per-band spatial mean;
    the mixing path is two 1x1 convolutions (C -> M -> C). Initialization is
    an exact identity (final MLP layer outputs 1, mixing output conv zeroed),
    so an untrained adapter passes cubes through unchanged.
    """

    def __init__(self, bands: int, hidden: int | None = None, seed: int = 0):
        super().__init__()
        if hidden is None:
            hidden = max(bands // 2, 4)
        self.bands = bands
        self.hidden = hidden
        self.fc1 = nn.Linear(bands, bands)
        self.fc2 = nn.Linear(bands, bands)
        self.conv_a = nn.Conv2d(bands, hidden, 1)
        self.conv_b = nn.Conv2d(hidden, bands, 1)
        self.act = nn.GELU()

        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for mod in (self.fc1, self.conv_a):
                w = mod.weight
                fan_in = w.shape[1] * (w.shape[2] * w.shape[3] if w.dim() == 4 else 1)
                bound = 1.0 / math.sqrt(fan_in)
                w.uniform_(-bound, bound, generator=gen)
                mod.bias.uniform_(-bound, bound, generator=gen)
            self.fc2.weight.zero_()
            self.fc2.bias.fill_(1.0)  # band weights start at exactly 1
            self.conv_b.weight.zero_()
            self.conv_b.bias.zero_()

    @classmethod
    def identity(cls, bands: int) -> "AswParams":
        return cls(bands, seed=0)

    def band_weights(self, cube: torch.Tensor) -> torch.Tensor:
        d = band_descriptor(cube)
        return self.fc2(self.act(self.fc1(d)))

    def forward(self, cube: torch.Tensor) -> torch.Tensor:
        if cube.ndim != 3 or cube.shape[0] != self.bands:
            raise DimensionMismatchError(
                f"expected ({self.bands}, H, W) cube, got {tuple(cube.shape)}"
            )
        w = self.band_weights(cube)
        p = cube * w[:, None, None]
        mix = self.conv_b(self.act(self.conv_a(p.unsqueeze(0))))[0]
        return p + mix


def band_descriptor(cube: torch.Tensor) -> torch.Tensor:
    """Per-band spatial mean, the adapter's input descriptor (linear in each band)."""
    return cube.mean(dim=(1, 2))


def asw_forward(recon, params: AswParams):
    """Apply the adapter; numpy in gives numpy out, tensors stay tensors."""
    if isinstance(recon, torch.Tensor):
        return params(recon)
    arr = np.asarray(recon, dtype=np.float32)
    with torch.no_grad():
        out = params(torch.from_numpy(arr))
    return out.numpy()


def isi_sample(model: HinerModel, grid: WavelengthGrid, cfg: IsiConfig, seed: int) -> np.ndarray:
    """Decode a cube from a (possibly jittered) wavelength grid, clamped to [0, 1].

    With probability 1 - enable_prob, or when eta is 0, the grid is used as-is,
    which reproduces the plain model reconstruction bit-exactly. Otherwise each
    wavelength gets independent U(-eta, eta) jitter, clamped to stay a margin
    inside (0, 1).
    """
    if model.encoder_kind == ENCODER_NONE:
        raise ConfigError("wavelength jitter needs a model with an encoder")
    rng = np.random.default_rng(seed)
    jitter_on = rng.random() < cfg.enable_prob
    lams = grid.lambdas
    if jitter_on and cfg.eta > 0:
        lams = np.clip(lams + rng.uniform(-cfg.eta, cfg.eta, size=lams.size),
                       ISI_CLAMP_MARGIN, 1.0 - ISI_CLAMP_MARGIN)
    return codec_core.reconstruct_cube(model, lams, clamp=True)


class SpectralPatchClassifier(nn.Module):
    """Small reference classifier: grouped-band spectral tokens, two
    attention mixing layers, a per-pixel class head.

    Each token embeds one group of 3 adjacent bands over the full spatial
    patch. Any module mapping a (C, k, k) patch to class logits can stand in.
    """

    GROUP = 3

    def __init__(self, bands: int, class_count: int, patch_size: int,
                 d_model: int = 64, n_heads: int = 4, seed: int = 0):
        super().__init__()
        self.bands = bands
        self.class_count = class_count
        self.patch_size = patch_size
        self.n_tokens = (bands + self.GROUP - 1) // self.GROUP
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.embed = nn.Linear(self.GROUP * patch_size * patch_size, d_model)
            self.pos = nn.Parameter(torch.randn(1, self.n_tokens, d_model) * 0.02)
            self.attn1 = nn.MultiheadAttention(d_model, n_heads, batch_first=True)
            self.attn2 = nn.MultiheadAttention(d_model, n_heads, batch_first=True)
            self.ffn1 = nn.Sequential(nn.Linear(d_model, 2 * d_model), nn.GELU(),
                                      nn.Linear(2 * d_model, d_model))
            self.ffn2 = nn.Sequential(nn.Linear(d_model, 2 * d_model), nn.GELU(),
                                      nn.Linear(2 * d_model, d_model))
            self.norms = nn.ModuleList(nn.LayerNorm(d_model) for _ in range(4))
            self.head = nn.Sequential(nn.LayerNorm(d_model), nn.Linear(d_model, class_count))

    def _tokens(self, patches: torch.Tensor) -> torch.Tensor:
        b, c, k, _ = patches.shape
        pad = self.n_tokens * self.GROUP - c
        if pad:
            patches = torch.cat([patches, patches[:, -1:].expand(b, pad, k, k)], dim=1)
        x = patches.reshape(b, self.n_tokens, self.GROUP * k * k)
        return self.embed(x) + self.pos

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        """(B, C, k, k) patches -> (B, class_count) logits."""
        if patches.shape[1] != self.bands or patches.shape[2] != self.patch_size:
            raise DimensionMismatchError(
                f"expected (B, {self.bands}, {self.patch_size}, {self.patch_size}) patches, "
                f"got {tuple(patches.shape)}"
            )
        x = self._tokens(patches)
        a, _ = self.attn1(x, x, x, need_weights=False)
        x = self.norms[0](x + a)
        x = self.norms[1](x + self.ffn1(x))
        a, _ = self.attn2(x, x, x, need_weights=False)
        x = self.norms[2](x + a)
        x = self.norms[3](x + self.ffn2(x))
        return self.head(x.mean(dim=1))


def classifier_forward(patch, classifier: SpectralPatchClassifier):
    """Logits for a single (C, k, k) patch."""
    if isinstance(patch, torch.Tensor):
        return classifier(patch.unsqueeze(0))[0]
    arr = np.asarray(patch, dtype=np.float32)
    with torch.no_grad():
        out = classifier(torch.from_numpy(arr).unsqueeze(0))[0]
    return out.numpy()


def extract_patches(cube: torch.Tensor, coords: np.ndarray, patch_size: int) -> torch.Tensor:
    """Edge-padded (C, k, k) patches centered at (row, col) coordinate pairs."""
    r = patch_size // 2
    padded = torch.nn.functional.pad(cube.unsqueeze(0), (r, r, r, r), mode="replicate")[0]
    out = torch.stack([padded[:, i : i + patch_size, j : j + patch_size] for i, j in coords])
    return out


def _resolve_source(source, isi_enabled: bool):
    """Decoded cube plus (model, grid) when the source can drive the jitter path."""
    if isinstance(source, HsiCube):
        if isi_enabled:
            raise ConfigError("wavelength jitter needs a compressed stream with an encoder")
        return source.data, None, None
    if isinstance(source, (bytes, bytearray)):
        cube = bs.reconstruct_from_bitstream(bytes(source))
        model = None
        grid = wavelength_grid(cube.bands)
        if isi_enabled:
            model, _ = bs.deserialize(bytes(source))
            if model.encoder_kind == ENCODER_NONE:
                raise ConfigError("stream carries no encoder side-channel; cannot jitter wavelengths")
        return cube.data, model, grid
    raise ConfigError(f"unsupported classification source: {type(source)!r}")


def train_classifier(
    source,
    labels: LabelMap,
    asw: AswParams | None,
    isi: IsiConfig | None,
    cfg: ClassifierTrainConfig,
) -> tuple[SpectralPatchClassifier, AswParams | None, ClassifierReport]:
    """Joint training of the classifier (and adapter, when given) on a decoded cube.

    The objective is cross-entropy over labeled train pixels plus beta times
    the band-wise reconstruction loss between the decoded cube and the adapter
    output; ground truth never enters. With jitter enabled, each epoch decodes
    a fresh augmented cube through the stream's encoder side-channel.
    """
    decoded, model, grid = _resolve_source(source, isi is not None)
    bands, height, width = decoded.shape
    if labels.labels.shape != (height, width):
        raise DimensionMismatchError("label grid does not match cube size")

    torch.set_num_threads(1)
    t0 = time.perf_counter()
    base_cube = torch.from_numpy(decoded)
    coords = np.argwhere(labels.train_mask)
    if coords.size == 0:
        raise DataError("no training pixels in label map")
    targets = torch.from_numpy(labels.labels[labels.train_mask].astype(np.int64) - 1)

    classifier = SpectralPatchClassifier(bands, labels.class_count, cfg.patch_size, seed=cfg.seed)
    params = list(classifier.parameters())
    if asw is not None:
        params += list(asw.parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    ce = nn.CrossEntropyLoss()
    loss_cfg = LossConfig()

    gate_rng = np.random.default_rng(cfg.seed)
    report = ClassifierReport()
    for epoch in range(cfg.epochs):
        lr = cfg.lr * 0.5 * (1.0 + math.cos(math.pi * epoch / cfg.epochs))
        for group in opt.param_groups:
            group["lr"] = lr
        if isi is not None and isi.eta > 0 and gate_rng.random() < isi.enable_prob:
            # jittered epochs go through the encoder path; gate-off epochs keep
            # the stored-embedding decode the classifier is evaluated on
            jitter_cfg = IsiConfig(eta=isi.eta, enable_prob=1.0)
            cube_np = isi_sample(model, grid, jitter_cfg, seed=cfg.seed * 100003 + epoch)
            cube = torch.from_numpy(cube_np)
        else:
            cube = base_cube
        adapted = asw(cube) if asw is not None else cube
        patches = extract_patches(adapted, coords, cfg.patch_size)
        logits = classifier(patches)
        ce_loss = ce(logits, targets)
        if asw is not None and cfg.beta > 0:
            recon_loss = torch.stack(
                [hiner_loss(adapted[i], cube[i], loss_cfg) for i in range(bands)]
            ).mean()
        else:
            recon_loss = torch.zeros(())
        loss = ce_loss + cfg.beta * recon_loss
        opt.zero_grad()
        loss.backward()
        opt.step()
        report.loss_trace.append(float(loss.detach()))
        report.ce_trace.append(float(ce_loss.detach()))
        report.recon_trace.append(float(recon_loss.detach()))
    report.wall_time_s = time.perf_counter() - t0
    return classifier, asw, report


def predict_map(
    classifier: SpectralPatchClassifier,
    asw: AswParams | None,
    cube: np.ndarray,
    patch_size: int,
    chunk: int = 512,
) -> np.ndarray:
    """Class-id map (H, W) over every pixel, ids 1..class_count."""
    tens = torch.from_numpy(np.asarray(cube, dtype=np.float32))
    with torch.no_grad():
        adapted = asw(tens) if asw is not None else tens
        _, height, width = adapted.shape
        coords = np.array([(i, j) for i in range(height) for j in range(width)])
        preds = np.empty(len(coords), dtype=np.int32)
        for lo in range(0, len(coords), chunk):
            batch = extract_patches(adapted, coords[lo : lo + chunk], patch_size)
            preds[lo : lo + chunk] = classifier(batch).argmax(dim=1).numpy() + 1
    return preds.reshape(height, width)


def evaluate_classification(pred: np.ndarray, truth: LabelMap):
    """Confusion matrix over test pixels plus overall/average accuracy and kappa."""
    if pred.shape != truth.labels.shape:
        raise DimensionMismatchError("prediction map does not match label grid")
    mask = truth.test_mask
    if not mask.any():
        raise DataError("empty test mask")
    k = truth.class_count
    t = truth.labels[mask].astype(np.int64)
    p = np.asarray(pred)[mask].astype(np.int64)
    if t.min() < 1 or t.max() > k:
        raise DataError("test pixels carry labels outside 1..class_count")
    if p.min() < 1 or p.max() > k:
        raise DataError("predictions outside 1..class_count")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (t - 1, p - 1), 1)
    cm = ConfusionMatrix(counts=counts)

    total = cm.total
    oa = float(np.trace(counts)) / total
    row = counts.sum(axis=1)
    col = counts.sum(axis=0)
    present = row > 0
    recalls = np.diag(counts)[present] / row[present]
    aa = float(recalls.mean())
    pe = float(np.dot(row, col)) / (total * total)
    if pe >= 1.0:
        kappa = 1.0 if oa == 1.0 else 0.0
    else:
        kappa = (oa - pe) / (1.0 - pe)
    return cm, oa, aa, float(kappa)
