"""Loss functions, the per-band training loop, and reconstruction quality metrics."""

from __future__ import annotations

import copy
import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from . import codec_core
from .codec_core import ENCODER_FROZEN_PE, ENCODER_RAW_LAMBDA, HinerModel
from .errors import ConfigError, DataError, DegenerateInputError, DivergenceError
from .hsi_io import HsiCube, WavelengthGrid, shuffle_bands, wavelength_grid

PSNR_CAP_DB = 100.0  # reported for bands with exactly zero MSE

ABLATIONS = ("default", "band_shuffle", "no_encoder", "l1_only", "no_pe")


@dataclass(frozen=True)
class LossConfig:
    """Weights for the combined pixel + angle reconstruction loss."""

    gamma: float = 0.01
    eps_angle: float = 1e-7

    def __post_init__(self):
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        if not (0.0 < self.eps_angle < 1e-3):
            raise ConfigError("eps_angle must lie in (0, 1e-3)")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    lr_init: float = 1e-3
    schedule: str = "cosine"  # or "constant"
    batch_bands: int = 1
    seed: int = 0
    ablation: str = "default"

    def __post_init__(self):
        if self.epochs < 1 or self.lr_init <= 0:
            raise ConfigError("epochs must be >= 1 and lr_init > 0")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown lr schedule: {self.schedule!r}")
        if self.batch_bands != 1:
            raise ConfigError("training visits one band per step")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation: {self.ablation!r}")


@dataclass
class TrainReport:
    epoch_psnr: list[float] = field(default_factory=list)
    final_band_psnr: np.ndarray | None = None
    loss_trace: list[float] = field(default_factory=list)
    lr_trace: list[float] = field(default_factory=list)
    wall_time_s: float = 0.0
    band_permutation: np.ndarray | None = None  # set for the band_shuffle ablation


def _check_same_shape(recon, target):
    if tuple(recon.shape) != tuple(target.shape):
        raise DataError(f"shape mismatch: {tuple(recon.shape)} vs {tuple(target.shape)}")


def l1_loss(recon, target):
    """Mean absolute difference over all pixels of one band.

    The mean (rather than sum) reduction makes the value resolution
    independent; the angle term below is size independent either way.
    """
    _check_same_shape(recon, target)
    if isinstance(recon, torch.Tensor):
        return (recon - target).abs().mean()
    return float(np.mean(np.abs(np.asarray(recon, dtype=np.float64) - np.asarray(target, dtype=np.float64))))


def cam_loss(recon, target, cfg: LossConfig = LossConfig()):
    """Angle in degrees between the flattened band vectors.

    The cosine is clamped to [-1 + eps, 1 - eps] before the arccos so the
    gradient stays finite when the vectors are (anti-)parallel.
    """
    _check_same_shape(recon, target)
    if isinstance(recon, torch.Tensor):
        r, t = recon.reshape(-1), target.reshape(-1)
        nr, nt = torch.linalg.vector_norm(r), torch.linalg.vector_norm(t)
        if float(nr.detach()) == 0.0 or float(nt.detach()) == 0.0:
            raise DegenerateInputError("zero-norm band in angle loss")
        cos = torch.clamp((r @ t) / (nr * nt), -1.0 + cfg.eps_angle, 1.0 - cfg.eps_angle)
        return torch.arccos(cos) * (180.0 / math.pi)
    r = np.asarray(recon, dtype=np.float64).ravel()
    t = np.asarray(target, dtype=np.float64).ravel()
    nr, nt = np.linalg.norm(r), np.linalg.norm(t)
    if nr == 0.0 or nt == 0.0:
        raise DegenerateInputError("zero-norm band in angle loss")
    cos = np.clip(np.dot(r, t) / (nr * nt), -1.0 + cfg.eps_angle, 1.0 - cfg.eps_angle)
    return float(np.degrees(np.arccos(cos)))


def hiner_loss(recon, target, cfg: LossConfig = LossConfig()):
    """Combined objective for one band: mean L1 plus gamma times the angle (degrees)."""
    l1 = l1_loss(recon, target)
    if cfg.gamma == 0.0:
        return l1
    return l1 + cfg.gamma * cam_loss(recon, target, cfg)


def evaluate_psnr(source, cube: HsiCube, grid: WavelengthGrid | None = None):
    """Mean and per-band PSNR of a reconstruction against ``cube``.

    ``source`` may be a model (evaluated over ``grid``, clamped to [0, 1]),
    an HsiCube, or a raw (C, H, W) array. Each band uses its own original
    maximum as the peak; a zero-MSE band reports the 100 dB cap.
    """
    if isinstance(source, HinerModel):
        if grid is None:
            grid = wavelength_grid(cube.bands)
        recon = codec_core.reconstruct_cube(source, grid.lambdas, clamp=True)
    elif isinstance(source, HsiCube):
        recon = source.data
    else:
        recon = np.asarray(source)
    _check_same_shape(recon, cube.data)
    recon = recon.astype(np.float64)
    target = cube.data.astype(np.float64)
    per_band = np.empty(cube.bands, dtype=np.float64)
    for i in range(cube.bands):
        mse = np.mean((recon[i] - target[i]) ** 2)
        if mse == 0.0:
            per_band[i] = PSNR_CAP_DB
        else:
            per_band[i] = 10.0 * np.log10(cube.band_max[i] ** 2 / mse)
    return float(per_band.mean()), per_band


def _cosine_lr(lr_init: float, step: int, total_steps: int) -> float:
    return lr_init * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def train_hiner(
    cube: HsiCube,
    grid: WavelengthGrid,
    model: HinerModel,
    loss_cfg: LossConfig = LossConfig(),
    train_cfg: TrainConfig = TrainConfig(),
    log_path: str | None = None,
) -> tuple[HinerModel, TrainReport]:
    """Fit the model to the cube, one band per optimizer step.

    Bands are visited in a fresh seeded order each epoch; the learning rate
    follows a cosine decay to ~0. A non-finite loss aborts with a diagnostic
    carrying the last end-of-epoch state. The `band_shuffle` ablation permutes
    the cube once up front (the grid stays fixed); `no_encoder`/`no_pe`
    rebuild the model with the frozen-PE / raw-wavelength encoder.
    """
    if len(grid) != cube.bands:
        raise ConfigError("grid length does not match cube bands")
    if model.decoder_cfg.target_hw != (cube.height, cube.width):
        raise ConfigError("model target size does not match cube")

    report = TrainReport()
    if train_cfg.ablation == "band_shuffle":
        cube, perm = shuffle_bands(cube, grid, train_cfg.seed)
        report.band_permutation = perm
    elif train_cfg.ablation == "no_encoder" and model.encoder_kind != ENCODER_FROZEN_PE:
        model = HinerModel(model.pe_cfg, model.embed_shape, model.decoder_cfg,
                           encoder_kind=ENCODER_FROZEN_PE, seed=model.seed)
    elif train_cfg.ablation == "no_pe" and model.encoder_kind != ENCODER_RAW_LAMBDA:
        model = HinerModel(model.pe_cfg, model.embed_shape, model.decoder_cfg,
                           encoder_kind=ENCODER_RAW_LAMBDA, seed=model.seed)
    effective_loss = LossConfig(gamma=0.0, eps_angle=loss_cfg.eps_angle) \
        if train_cfg.ablation == "l1_only" else loss_cfg

    torch.set_num_threads(1)  # deterministic reductions; faster for desk-scale tensors
    t_start = time.perf_counter()
    n_bands = cube.bands
    total_steps = train_cfg.epochs * n_bands
    feats = model.input_features(grid.lambdas)
    targets = torch.from_numpy(cube.data).unsqueeze(1)  # (C, 1, H, W)
    peaks = torch.from_numpy(cube.band_max).double()

    opt = torch.optim.Adam(model.parameters(), lr=train_cfg.lr_init)
    order_rng = np.random.default_rng(train_cfg.seed)
    last_good = copy.deepcopy(model.state_dict())
    step = 0
    for epoch in range(train_cfg.epochs):
        order = order_rng.permutation(n_bands)
        epoch_loss = 0.0
        band_mse = torch.zeros(n_bands, dtype=torch.float64)
        lr = train_cfg.lr_init
        for i in order:
            if train_cfg.schedule == "cosine":
                lr = _cosine_lr(train_cfg.lr_init, step, total_steps)
                for group in opt.param_groups:
                    group["lr"] = lr
            recon = model.decode(model.embed(feats[i : i + 1]))
            loss = hiner_loss(recon[0, 0], targets[i, 0], effective_loss)
            loss_val = float(loss.detach())
            if not math.isfinite(loss_val):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, step {step}",
                    epoch=epoch, step=step, last_good_state=last_good,
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += loss_val
            with torch.no_grad():
                band_mse[i] = ((recon[0, 0] - targets[i, 0]).double() ** 2).mean()
            step += 1
        band_psnr = torch.where(
            band_mse > 0,
            10.0 * torch.log10(peaks**2 / band_mse),
            torch.full_like(band_mse, PSNR_CAP_DB),
        )
        report.loss_trace.append(epoch_loss / n_bands)
        report.epoch_psnr.append(float(band_psnr.mean()))
        report.lr_trace.append(lr)
        last_good = copy.deepcopy(model.state_dict())

    mean_db, per_band = evaluate_psnr(model, cube, grid)
    report.final_band_psnr = per_band
    report.wall_time_s = time.perf_counter() - t_start
    if log_path is not None:
        with open(log_path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "loss", "mean_psnr", "lr"])
            for e, (lo, ps, lr) in enumerate(
                zip(report.loss_trace, report.epoch_psnr, report.lr_trace)
            ):
                writer.writerow([e, f"{lo:.8f}", f"{ps:.4f}", f"{lr:.8f}"])
    return model, report
