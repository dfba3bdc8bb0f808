"""Operator surface: subcommands wiring the full pipeline with reproducible configs.

Configs are plain-text ``key = value`` files (JSON-typed values, ``#``
comments) and every key can be overridden on the command line with
``--set key=value``. Each report embeds the resolved config. Exit codes:
0 success, 2 config error, 3 data error, 4 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time

import numpy as np
import torch

from . import bitstream as bs
from . import codec_core, downstream, hsi_io, training
from .errors import ConfigError, DataError, DivergenceError, HinerError

ENCODE_DEFAULTS = {
    "seed": 0,
    "budget_mb": 0.2,
    "embed": [3, 3, 16],
    "strides": [3, 2, 2],
    "pe_b": 1.25,
    "pe_l": 80,
    "gamma": 0.01,
    "eps_angle": 1e-7,
    "epochs": 100,
    "lr": 1e-3,
    "schedule": "cosine",
    "bitwidth": 8,
    "ablation": "default",
    "min_width": 8,
    "include_encoder": True,
    "normalize": True,
}

ABLATE_DEFAULTS = dict(
    ENCODE_DEFAULTS,
    variants=["default", "band_shuffle", "no_encoder", "l1_only", "no_pe"],
    embed_sizes=[],
)

CLASSIFY_DEFAULTS = {
    "seed": 0,
    "beta": 2.5,
    "cls_lr": 5e-4,
    "weight_decay": 5e-3,
    "cls_epochs": 300,
    "patch_size": 7,
    "eta": 0.1,
    "enable_prob": 0.5,
    "variants": ["plain", "asw", "asw_isi"],
}


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines; values are JSON literals or bare strings."""
    cfg = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if '"' not in line and "#" in line:
            line = line.split("#", 1)[0].strip()
        if "=" not in line:
            raise ConfigError(f"config line {lineno} is not `key = value`: {raw!r}")
        key, val = line.split("=", 1)
        cfg[key.strip()] = _parse_value(val.strip())
    return cfg


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(defaults: dict, config_path: str | None, overrides: list[str], seed: int | None) -> dict:
    cfg = dict(defaults)
    if config_path:
        try:
            with open(config_path, "r", encoding="utf-8") as f:
                file_cfg = parse_config_text(f.read())
        except OSError as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc}") from exc
        unknown = set(file_cfg) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(file_cfg)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        if key not in defaults:
            raise ConfigError(f"unknown config key: {key!r}")
        cfg[key] = _parse_value(val)
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def _sniff_format(path: str) -> str:
    if path.endswith((".raw", ".hdr")):
        return "envi_raw"
    return "portable_container"


def _emit(report: dict, out_path: str | None) -> None:
    text = json.dumps(report, indent=1)
    if out_path:
        with open(out_path, "w", encoding="utf-8") as f:
            f.write(text + "\n")
    print(text)


def _budget_bytes(cfg: dict) -> int:
    return int(round(float(cfg["budget_mb"]) * 2**20))


def _encoder_kind(ablation: str) -> str:
    if ablation == "no_encoder":
        return codec_core.ENCODER_FROZEN_PE
    if ablation == "no_pe":
        return codec_core.ENCODER_RAW_LAMBDA
    return codec_core.ENCODER_LEARNED


def _train_once(cube: hsi_io.HsiCube, cfg: dict):
    """Shared encode pipeline: init, train, serialize; returns the pieces reports need."""
    grid = hsi_io.wavelength_grid(cube.bands)
    pe = codec_core.PosEncodingConfig(base_b=float(cfg["pe_b"]), levels_l=int(cfg["pe_l"]))
    model = codec_core.init_model(
        dims=(cube.height, cube.width, cube.bands),
        embed_shape=tuple(int(x) for x in cfg["embed"]),
        strides=tuple(int(s) for s in cfg["strides"]),
        pe_cfg=pe,
        target_total_bytes=_budget_bytes(cfg),
        seed=int(cfg["seed"]),
        min_width=int(cfg["min_width"]),
        encoder_kind=_encoder_kind(cfg["ablation"]),
    )
    loss_cfg = training.LossConfig(gamma=float(cfg["gamma"]), eps_angle=float(cfg["eps_angle"]))
    train_cfg = training.TrainConfig(
        epochs=int(cfg["epochs"]),
        lr_init=float(cfg["lr"]),
        schedule=str(cfg["schedule"]),
        seed=int(cfg["seed"]),
        ablation=str(cfg["ablation"]),
    )
    model, report = training.train_hiner(cube, grid, model, loss_cfg, train_cfg)

    # the training target is the shuffled cube for the band_shuffle ablation
    target = cube
    if report.band_permutation is not None:
        target, _ = hsi_io.shuffle_bands(cube, grid, train_cfg.seed)

    with torch.no_grad():
        emb = model.embed(model.input_features(grid.lambdas))
    embeddings = emb.permute(0, 2, 3, 1).numpy()
    include_encoder = bool(cfg["include_encoder"]) and model.encoder_kind != codec_core.ENCODER_NONE
    stream = bs.serialize(model, embeddings, bitwidth=int(cfg["bitwidth"]), include_encoder=include_encoder)
    return model, report, target, grid, stream


def _rate_fields(stream: bytes, cube: hsi_io.HsiCube) -> dict:
    summary = bs.stream_summary(stream)
    dims = (cube.height, cube.width, cube.bands)
    bpppb_payload = bs.bpppb(summary["payload_bytes"], dims)
    return {
        "payload_bytes": summary["payload_bytes"],
        "file_bytes": summary["file_bytes"],
        "bpppb": bpppb_payload,
        "bpppb_file": bs.bpppb(summary["file_bytes"], dims),
        "cr": bs.cr(cube.source_bitdepth, bpppb_payload) if bpppb_payload > 0 else None,
    }


def cmd_synth(args) -> int:
    spec = hsi_io.SyntheticSpec(
        height=args.height, width=args.width, bands=args.bands,
        class_count=args.classes, seed=args.seed if args.seed is not None else 0,
        noise_sigma=args.noise_sigma, signature_smoothness=args.smoothness,
    )
    cube, labels = hsi_io.synth_cube(spec)
    grid = hsi_io.wavelength_grid(cube.bands)
    hsi_io.save_cube(cube, args.out, "portable_container", grid=grid)
    hsi_io.save_labels(labels, args.out + "_labels")
    _emit({
        "command": "synth",
        "cube": args.out + ".hsrb",
        "labels": args.out + "_labels.lbl",
        "dims": [cube.height, cube.width, cube.bands],
        "class_count": labels.class_count,
        "config": vars(args) | {"subcommand": None, "func": None},
    }, args.report)
    return 0


def cmd_convert(args) -> int:
    cube = hsi_io.load_cube(args.input, args.in_format or _sniff_format(args.input))
    hsi_io.save_cube(cube, args.out, args.out_format)
    _emit({"command": "convert", "out": args.out,
           "dims": [cube.height, cube.width, cube.bands]}, args.report)
    return 0


def cmd_encode(args) -> int:
    cfg = resolve_config(ENCODE_DEFAULTS, args.config, args.set, args.seed)
    t0 = time.perf_counter()
    cube = hsi_io.load_cube(args.cube, _sniff_format(args.cube))
    if cfg["normalize"]:
        cube = hsi_io.normalize(cube)
    model, report, target, grid, stream = _train_once(cube, cfg)
    with open(args.out, "wb") as f:
        f.write(stream)
    decoded = bs.reconstruct_from_bitstream(stream)
    psnr_q, per_band_q = training.evaluate_psnr(decoded.data, target)
    psnr_f = float(np.mean(report.final_band_psnr))
    out = {
        "command": "encode",
        "stream": args.out,
        "dims": [cube.height, cube.width, cube.bands],
        **_rate_fields(stream, cube),
        "psnr_float": psnr_f,
        "psnr_quantized": psnr_q,
        "per_band_psnr_float": [float(x) for x in report.final_band_psnr],
        "per_band_psnr_quantized": [float(x) for x in per_band_q],
        "wall_time_s": time.perf_counter() - t0,
        "config": cfg,
    }
    if report.band_permutation is not None:
        out["band_permutation"] = [int(x) for x in report.band_permutation]
    _emit(out, args.report)
    return 0


def cmd_decode(args) -> int:
    try:
        with open(args.input, "rb") as f:
            stream = f.read()
    except OSError as exc:
        raise DataError(f"cannot read stream {args.input}: {exc}") from exc
    cube = bs.reconstruct_from_bitstream(stream)
    hsi_io.save_cube(cube, args.out, "portable_container")
    out = {
        "command": "decode",
        "out": args.out + ".hsrb",
        "dims": [cube.height, cube.width, cube.bands],
    }
    if args.reference:
        ref = hsi_io.load_cube(args.reference, _sniff_format(args.reference))
        if args.normalize_reference:
            ref = hsi_io.normalize(ref)
        mean_db, per_band = training.evaluate_psnr(cube.data, ref)
        out["psnr"] = mean_db
        out["per_band_psnr"] = [float(x) for x in per_band]
    _emit(out, args.report)
    return 0


def cmd_eval(args) -> int:
    recon = hsi_io.load_cube(args.recon, _sniff_format(args.recon))
    ref = hsi_io.load_cube(args.reference, _sniff_format(args.reference))
    mean_db, per_band = training.evaluate_psnr(recon.data, ref)
    _emit({
        "command": "eval",
        "psnr": mean_db,
        "per_band_psnr": [float(x) for x in per_band],
    }, args.report)
    return 0


def cmd_ablate(args) -> int:
    cfg = resolve_config(ABLATE_DEFAULTS, args.config, args.set, args.seed)
    variants = list(cfg["variants"])
    if not variants and not cfg["embed_sizes"]:
        raise ConfigError("ablation needs at least one variant or embedding size")
    cube = hsi_io.load_cube(args.cube, _sniff_format(args.cube))
    if cfg["normalize"]:
        cube = hsi_io.normalize(cube)

    rows = []
    failures = {}

    def run(name: str, run_cfg: dict):
        try:
            _, report, target, _, stream = _train_once(cube, run_cfg)
            decoded = bs.reconstruct_from_bitstream(stream)
            psnr_q, _ = training.evaluate_psnr(decoded.data, target)
            rate = bs.bpppb(bs.stream_summary(stream)["payload_bytes"],
                            (cube.height, cube.width, cube.bands))
            rows.append({
                "variant": name,
                "bpppb": f"{rate:.6f}",
                "psnr_float": f"{float(np.mean(report.final_band_psnr)):.4f}",
                "psnr_q8": f"{psnr_q:.4f}",
            })
        except HinerError as exc:
            failures[name] = f"{type(exc).__name__}: {exc}"
            rows.append({"variant": name, "bpppb": "nan", "psnr_float": "nan", "psnr_q8": "nan"})

    for variant in variants:
        run(variant, dict(cfg, ablation=variant))
    for size in cfg["embed_sizes"]:
        h0, w0, c0 = (int(x) for x in size)
        run(f"embed_{h0}x{w0}x{c0}", dict(cfg, ablation="default", embed=[h0, w0, c0]))

    with open(args.out, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=["variant", "bpppb", "psnr_float", "psnr_q8"])
        writer.writeheader()
        writer.writerows(rows)
    _emit({"command": "ablate", "out": args.out, "rows": rows,
           "failures": failures, "config": cfg}, args.report)
    return 0


def cmd_classify(args) -> int:
    cfg = resolve_config(CLASSIFY_DEFAULTS, args.config, args.set, args.seed)
    try:
        with open(args.stream, "rb") as f:
            stream = f.read()
    except OSError as exc:
        raise DataError(f"cannot read stream {args.stream}: {exc}") from exc
    labels = hsi_io.load_labels(args.labels)
    decoded = bs.reconstruct_from_bitstream(stream)

    cls_cfg = downstream.ClassifierTrainConfig(
        beta=float(cfg["beta"]), lr=float(cfg["cls_lr"]),
        weight_decay=float(cfg["weight_decay"]), epochs=int(cfg["cls_epochs"]),
        patch_size=int(cfg["patch_size"]), seed=int(cfg["seed"]),
    )
    isi_cfg = downstream.IsiConfig(eta=float(cfg["eta"]), enable_prob=float(cfg["enable_prob"]))

    results = {}
    for variant in cfg["variants"]:
        if variant == "plain":
            asw, isi = None, None
        elif variant == "asw":
            asw, isi = downstream.AswParams(decoded.bands, seed=int(cfg["seed"])), None
        elif variant == "asw_isi":
            asw, isi = downstream.AswParams(decoded.bands, seed=int(cfg["seed"])), isi_cfg
        else:
            raise ConfigError(f"unknown classification variant: {variant!r}")
        classifier, asw, _ = downstream.train_classifier(stream, labels, asw, isi, cls_cfg)
        pred = downstream.predict_map(classifier, asw, decoded.data, cls_cfg.patch_size)
        cm, oa, aa, kappa = downstream.evaluate_classification(pred, labels)
        row = cm.counts.sum(axis=1)
        per_class = [float(cm.counts[i, i] / row[i]) if row[i] else None
                     for i in range(labels.class_count)]
        results[variant] = {
            "oa": oa, "aa": aa, "kappa": kappa,
            "per_class_accuracy": per_class,
            "confusion": cm.counts.tolist(),
        }
        if args.out:
            ckpt = {"classifier": classifier.state_dict()}
            if asw is not None:
                ckpt["asw"] = asw.state_dict()
            torch.save(ckpt, f"{args.out}_{variant}.pt")
    _emit({"command": "classify", "results": results, "config": cfg}, args.report)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hiner",
                                     description="Wavelength-conditioned neural codec for hyperspectral images")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cube + labels")
    p.add_argument("--out", required=True, help="output base path")
    p.add_argument("--height", type=int, default=36)
    p.add_argument("--width", type=int, default=36)
    p.add_argument("--bands", type=int, default=20)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-sigma", type=float, default=0.0)
    p.add_argument("--smoothness", type=float, default=1.0)
    p.add_argument("--report")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("convert", help="convert between cube file formats")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--in-format", choices=["envi_raw", "portable_container"])
    p.add_argument("--out", required=True)
    p.add_argument("--out-format", choices=["envi_raw", "portable_container"], required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("encode", help="train, quantize, and serialize a cube")
    p.add_argument("--cube", required=True)
    p.add_argument("--out", required=True, help="output .hinr path")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--report")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="decode a stream back into a cube file")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True, help="output cube base path")
    p.add_argument("--reference", help="reference cube for PSNR")
    p.add_argument("--normalize-reference", action="store_true")
    p.add_argument("--report")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="PSNR between two cube files")
    p.add_argument("--recon", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run codec ablation variants, emit CSV")
    p.add_argument("--cube", required=True)
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--report")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("classify", help="train classifiers on a compressed cube")
    p.add_argument("--stream", required=True, help=".hinr input")
    p.add_argument("--labels", required=True, help="label file base path")
    p.add_argument("--out", help="checkpoint base path")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--report")
    p.set_defaults(func=cmd_classify)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(json.dumps({"error": {"type": type(exc).__name__, "message": str(exc)}}))
        return 2
    except DivergenceError as exc:
        print(json.dumps({"error": {"type": type(exc).__name__, "message": str(exc)}}))
        return 4
    except DataError as exc:
        print(json.dumps({"error": {"type": type(exc).__name__, "message": str(exc)}}))
        return 3
    except HinerError as exc:
        print(json.dumps({"error": {"type": type(exc).__name__, "message": str(exc)}}))
        return 3


if __name__ == "__main__":
    sys.exit(main())
