"""Hyperspectral cube ingest, normalization, synthesis, and band permutation.

Cubes are stored band-major as float32 arrays of shape (C, H, W). Two file
formats are supported:

* ENVI-style raw: ``<name>.raw`` + ``<name>.hdr`` (BSQ interleave, 16-bit
  unsigned little-endian only).
* Portable container: ``<name>.hsrb`` (raw little-endian float32, band-major)
  + ``<name>.json`` sidecar with dimensions, bit depth, and wavelengths.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DataError,
    DegenerateInputError,
    DimensionMismatchError,
    MalformedHeaderError,
    TruncatedPayloadError,
)

ENVI_DTYPE_U16 = 12  # ENVI "data type" code for unsigned 16-bit


@dataclass
class HsiCube:
    """A hyperspectral cube plus the metadata the codec and metrics need.

    ``data`` has shape (bands, height, width). ``band_max`` holds the true
    per-band maximum of ``data`` and is used as the PSNR peak.
    """

    data: np.ndarray
    height: int
    width: int
    bands: int
    source_bitdepth: int
    band_max: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 3:
            raise DataError(f"cube data must be 3-D, got shape {self.data.shape}")
        c, h, w = self.data.shape
        if (c, h, w) != (self.bands, self.height, self.width):
            raise DimensionMismatchError(
                f"declared dims (C={self.bands}, H={self.height}, W={self.width}) "
                f"do not match data shape {self.data.shape}"
            )
        if min(c, h, w) < 1:
            raise DataError("cube dimensions must all be >= 1")
        if not np.all(np.isfinite(self.data)):
            raise DataError("cube contains non-finite values")

    @classmethod
    def from_data(cls, data: np.ndarray, source_bitdepth: int = 32) -> "HsiCube":
        data = np.ascontiguousarray(data, dtype=np.float32)
        c, h, w = data.shape
        return cls(
            data=data,
            height=h,
            width=w,
            bands=c,
            source_bitdepth=source_bitdepth,
            band_max=data.reshape(c, -1).max(axis=1).astype(np.float64),
        )


@dataclass
class WavelengthGrid:
    """Normalized wavelengths, strictly increasing inside the open unit interval."""

    lambdas: np.ndarray

    def __post_init__(self):
        lam = np.asarray(self.lambdas, dtype=np.float64)
        if lam.ndim != 1 or lam.size < 1:
            raise DataError("wavelength grid must be a non-empty 1-D vector")
        if not (np.all(lam > 0.0) and np.all(lam < 1.0)):
            raise DataError("wavelengths must lie strictly inside (0, 1)")
        if lam.size > 1 and not np.all(np.diff(lam) > 0):
            raise DataError("wavelengths must be strictly increasing")
        self.lambdas = lam

    def __len__(self) -> int:
        return int(self.lambdas.size)


@dataclass
class LabelMap:
    """Per-pixel class ids (0 = unlabeled) with disjoint train/test masks."""

    labels: np.ndarray
    class_count: int
    train_mask: np.ndarray
    test_mask: np.ndarray

    def __post_init__(self):
        if self.labels.ndim != 2:
            raise DataError("labels must be an H x W array")
        if self.train_mask.shape != self.labels.shape or self.test_mask.shape != self.labels.shape:
            raise DimensionMismatchError("masks must match label grid shape")
        if np.any(self.train_mask & self.test_mask):
            raise DataError("train and test masks overlap")
        labeled = self.labels[self.labels > 0]
        if labeled.size and (labeled.max() > self.class_count):
            raise DataError("label id exceeds class_count")


@dataclass
class SyntheticSpec:
    """Recipe for a seed-deterministic synthetic cube and label map."""

    height: int = 36
    width: int = 36
    bands: int = 20
    class_count: int = 4
    seed: int = 0
    noise_sigma: float = 0.0
    signature_smoothness: float = 1.0

    def __post_init__(self):
        if min(self.height, self.width, self.bands) < 1:
            raise DataError("synthetic dims must be >= 1")
        if self.class_count < 2:
            raise DataError("need at least 2 classes")
        if self.noise_sigma < 0:
            raise DataError("noise_sigma must be >= 0")
        if self.signature_smoothness <= 0:
            raise DataError("signature_smoothness must be > 0")


def wavelength_grid(bands: int) -> WavelengthGrid:
    """Symmetric grid lambda_i = (i+1)/(bands+1), strictly inside (0, 1)."""
    if bands < 1:
        raise DataError("bands must be >= 1")
    lam = (np.arange(bands, dtype=np.float64) + 1.0) / (bands + 1.0)
    return WavelengthGrid(lam)


def normalize(cube: HsiCube) -> HsiCube:
    """Divide by the single global maximum so the cube peaks at exactly 1.0.

    Per-band amplitude ratios are preserved; ``band_max`` is recomputed.
    """
    global_max = float(cube.data.max())
    if global_max <= 0.0:
        raise DegenerateInputError("cannot normalize an all-zero cube")
    data = (cube.data / np.float32(global_max)).astype(np.float32)
    return HsiCube.from_data(data, source_bitdepth=cube.source_bitdepth)


def shuffle_bands(cube: HsiCube, grid: WavelengthGrid, seed: int) -> tuple[HsiCube, np.ndarray]:
    """Permute bands with a seed-deterministic permutation, leaving the grid fixed.

    This deliberately breaks the monotone wavelength-to-band association:
    wavelength i afterwards indexes band ``perm[i]`` of the original cube.
    Returns the shuffled cube and the permutation for auditability.
    """
    if len(grid) != cube.bands:
        raise DimensionMismatchError("grid length does not match cube bands")
    perm = np.random.default_rng(seed).permutation(cube.bands)
    shuffled = HsiCube.from_data(cube.data[perm], source_bitdepth=cube.source_bitdepth)
    return shuffled, perm


def invert_permutation(perm: np.ndarray) -> np.ndarray:
    return np.argsort(perm)


def synth_cube(spec: SyntheticSpec) -> tuple[HsiCube, LabelMap]:
    """Generate a smooth-spectra synthetic cube with a Voronoi class layout.

    Each class gets a bandlimited spectral signature (a sum of three
    low-frequency sinusoids of the normalized wavelength); pixels take their
    class signature plus clipped Gaussian noise. Labeled pixels are split
    ~5%/95% into train/test per class. Everything is seed-deterministic.
    """
    rng = np.random.default_rng(spec.seed)
    grid = wavelength_grid(spec.bands)
    lam = grid.lambdas

    # Smooth per-class signatures: two shared sinusoids common to every class
    # plus two smaller class-specific ones, so classes stay spectrally close.
    # signature_smoothness divides all sinusoid frequencies.
    n_cls = spec.class_count
    base_f = rng.uniform(0.5, 2.5, size=2) / spec.signature_smoothness
    base_a = rng.uniform(0.09, 0.18, size=2)
    base_p = rng.uniform(0.0, 2.0 * np.pi, size=2)
    base = np.sum(base_a[:, None] * np.sin(2.0 * np.pi * base_f[:, None] * lam[None, :] + base_p[:, None]), axis=0)
    freqs = rng.uniform(1.0, 3.0, size=(n_cls, 2)) / spec.signature_smoothness
    amps = rng.uniform(0.03, 0.06, size=(n_cls, 2))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(n_cls, 2))
    deltas = np.sum(
        amps[:, :, None] * np.sin(2.0 * np.pi * freqs[:, :, None] * lam[None, None, :] + phases[:, :, None]),
        axis=1,
    )  # (n_cls, C)
    sigs = 0.5 + base[None, :] + deltas
    lo, hi = sigs.min(), sigs.max()
    span = hi - lo if hi > lo else 1.0
    sigs = 0.1 + 0.85 * (sigs - lo) / span

    # Voronoi-style layout: 3 sites per class, pixels take the nearest site's class.
    n_sites = 3 * n_cls
    sites = rng.uniform(0.0, 1.0, size=(n_sites, 2))
    site_class = np.arange(n_sites) % n_cls
    ys = (np.arange(spec.height, dtype=np.float64) + 0.5) / spec.height
    xs = (np.arange(spec.width, dtype=np.float64) + 0.5) / spec.width
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    d2 = (yy[:, :, None] - sites[None, None, :, 0]) ** 2 + (xx[:, :, None] - sites[None, None, :, 1]) ** 2
    labels = site_class[np.argmin(d2, axis=2)] + 1  # ids 1..n_cls

    data = sigs[labels - 1].transpose(2, 0, 1)  # (C, H, W)
    if spec.noise_sigma > 0:
        data = data + spec.noise_sigma * rng.standard_normal(size=data.shape)
    data = np.clip(data, 0.0, 1.0).astype(np.float32)

    train_mask = np.zeros((spec.height, spec.width), dtype=bool)
    test_mask = np.zeros((spec.height, spec.width), dtype=bool)
    flat_labels = labels.ravel()
    for c in range(1, n_cls + 1):
        idx = np.flatnonzero(flat_labels == c)
        idx = rng.permutation(idx)
        n_train = max(1, int(round(0.05 * idx.size)))
        train_mask.ravel()[idx[:n_train]] = True
        test_mask.ravel()[idx[n_train:]] = True

    cube = HsiCube.from_data(data, source_bitdepth=16)
    label_map = LabelMap(labels=labels.astype(np.int32), class_count=n_cls,
                         train_mask=train_mask, test_mask=test_mask)
    return cube, label_map


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def _base_path(path: str, suffixes: tuple[str, ...]) -> str:
    for s in suffixes:
        if path.endswith(s):
            return path[: -len(s)]
    return path


def _parse_envi_header(text: str) -> dict:
    fields = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.upper() == "ENVI" or line.startswith(";"):
            continue
        if "=" not in line:
            continue
        key, val = line.split("=", 1)
        fields[key.strip().lower()] = val.strip()
    return fields


def load_cube(path: str, format: str) -> HsiCube:
    """Read a cube from disk without mutating any value.

    ``format`` is ``"envi_raw"`` (path names the .raw or .hdr) or
    ``"portable_container"`` (path names the .hsrb or .json sidecar).
    """
    if format == "envi_raw":
        return _load_envi(path)
    if format == "portable_container":
        return _load_portable(path)
    raise DataError(f"unknown cube format: {format!r}")


def _load_envi(path: str) -> HsiCube:
    base = _base_path(path, (".raw", ".hdr"))
    raw_path, hdr_path = base + ".raw", base + ".hdr"
    if not os.path.exists(hdr_path):
        raise DataError(f"missing ENVI header: {hdr_path}")
    if not os.path.exists(raw_path):
        raise DataError(f"missing ENVI payload: {raw_path}")
    with open(hdr_path, "r", encoding="utf-8") as f:
        fields = _parse_envi_header(f.read())
    try:
        samples = int(fields["samples"])
        lines = int(fields["lines"])
        bands = int(fields["bands"])
        dtype_code = int(fields["data type"])
        interleave = fields["interleave"].lower()
        byte_order = int(fields.get("byte order", "0"))
    except (KeyError, ValueError) as exc:
        raise MalformedHeaderError(f"unparseable ENVI header {hdr_path}: {exc}") from exc
    if interleave != "bsq":
        raise MalformedHeaderError(f"only BSQ interleave is supported, got {interleave!r}")
    if dtype_code != ENVI_DTYPE_U16:
        raise MalformedHeaderError(f"only data type {ENVI_DTYPE_U16} (u16) is supported, got {dtype_code}")
    if byte_order != 0:
        raise MalformedHeaderError("only little-endian (byte order = 0) is supported")
    if min(samples, lines, bands) < 1:
        raise MalformedHeaderError("header dimensions must be positive")

    expected = samples * lines * bands
    payload = np.fromfile(raw_path, dtype="<u2")
    if payload.size < expected:
        raise TruncatedPayloadError(
            f"{raw_path}: payload has {payload.size} values, header promises {expected}"
        )
    if payload.size > expected:
        raise DimensionMismatchError(
            f"{raw_path}: payload has {payload.size} values, header promises {expected}"
        )
    data = payload.astype(np.float32).reshape(bands, lines, samples)
    return HsiCube.from_data(data, source_bitdepth=16)


def _load_portable(path: str) -> HsiCube:
    base = _base_path(path, (".hsrb", ".json"))
    bin_path, sidecar_path = base + ".hsrb", base + ".json"
    if not os.path.exists(sidecar_path):
        raise DataError(f"missing sidecar: {sidecar_path}")
    if not os.path.exists(bin_path):
        raise DataError(f"missing payload: {bin_path}")
    try:
        with open(sidecar_path, "r", encoding="utf-8") as f:
            meta = json.load(f)
        height, width, bands = int(meta["height"]), int(meta["width"]), int(meta["bands"])
        bitdepth = int(meta.get("source_bitdepth", 32))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise MalformedHeaderError(f"unparseable sidecar {sidecar_path}: {exc}") from exc
    if min(height, width, bands) < 1:
        raise MalformedHeaderError("sidecar dimensions must be positive")

    expected = height * width * bands
    payload = np.fromfile(bin_path, dtype="<f4")
    if payload.size < expected:
        raise TruncatedPayloadError(
            f"{bin_path}: payload has {payload.size} values, sidecar promises {expected}"
        )
    if payload.size > expected:
        raise DimensionMismatchError(
            f"{bin_path}: payload has {payload.size} values, sidecar promises {expected}"
        )
    data = payload.reshape(bands, height, width)
    return HsiCube.from_data(data, source_bitdepth=bitdepth)


def save_cube(cube: HsiCube, path: str, format: str, grid: WavelengthGrid | None = None) -> None:
    """Write a cube in one of the two supported formats.

    ENVI output requires integer-valued data in [0, 65535]; the portable
    container stores float32 exactly, so load/save round-trips bit-exactly.
    """
    if format == "envi_raw":
        base = _base_path(path, (".raw", ".hdr"))
        data = cube.data
        if data.min() < 0 or data.max() > 65535 or not np.array_equal(data, np.floor(data)):
            raise DataError("ENVI writer needs integer-valued data in [0, 65535]")
        with open(base + ".hdr", "w", encoding="utf-8") as f:
            f.write(
                "ENVI\n"
                f"samples = {cube.width}\n"
                f"lines = {cube.height}\n"
                f"bands = {cube.bands}\n"
                "header offset = 0\n"
                f"data type = {ENVI_DTYPE_U16}\n"
                "interleave = bsq\n"
                "byte order = 0\n"
            )
        data.astype("<u2").tofile(base + ".raw")
    elif format == "portable_container":
        base = _base_path(path, (".hsrb", ".json"))
        meta = {
            "height": cube.height,
            "width": cube.width,
            "bands": cube.bands,
            "source_bitdepth": cube.source_bitdepth,
        }
        if grid is not None:
            meta["wavelengths"] = [float(x) for x in grid.lambdas]
        with open(base + ".json", "w", encoding="utf-8") as f:
            json.dump(meta, f, indent=1)
        cube.data.astype("<f4").tofile(base + ".hsrb")
    else:
        raise DataError(f"unknown cube format: {format!r}")


def save_labels(label_map: LabelMap, path: str) -> None:
    """Write labels as raw int32 LE plus a JSON mask descriptor."""
    base = _base_path(path, (".lbl", ".json"))
    h, w = label_map.labels.shape
    label_map.labels.astype("<i4").tofile(base + ".lbl")
    desc = {
        "height": h,
        "width": w,
        "class_count": label_map.class_count,
        "train_indices": np.flatnonzero(label_map.train_mask).tolist(),
        "test_indices": np.flatnonzero(label_map.test_mask).tolist(),
    }
    with open(base + ".json", "w", encoding="utf-8") as f:
        json.dump(desc, f)


def load_labels(path: str) -> LabelMap:
    base = _base_path(path, (".lbl", ".json"))
    lbl_path, desc_path = base + ".lbl", base + ".json"
    if not os.path.exists(lbl_path) or not os.path.exists(desc_path):
        raise DataError(f"missing label files at {base}.lbl/.json")
    try:
        with open(desc_path, "r", encoding="utf-8") as f:
            desc = json.load(f)
        h, w = int(desc["height"]), int(desc["width"])
        class_count = int(desc["class_count"])
        train_idx = np.asarray(desc["train_indices"], dtype=np.int64)
        test_idx = np.asarray(desc["test_indices"], dtype=np.int64)
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise MalformedHeaderError(f"unparseable label descriptor {desc_path}: {exc}") from exc
    labels = np.fromfile(lbl_path, dtype="<i4")
    if labels.size != h * w:
        raise TruncatedPayloadError(f"{lbl_path}: expected {h * w} labels, found {labels.size}")
    labels = labels.reshape(h, w)
    train_mask = np.zeros(h * w, dtype=bool)
    test_mask = np.zeros(h * w, dtype=bool)
    train_mask[train_idx] = True
    test_mask[test_idx] = True
    return LabelMap(labels=labels, class_count=class_count,
                    train_mask=train_mask.reshape(h, w), test_mask=test_mask.reshape(h, w))
