"""Command-line entry point: ``hsmae <command> [flags]``.

Exit codes: 0 success, 2 usage or validation error, 1 runtime error.
Settings resolve as flags > ``--config`` JSON file > built-in preset.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import fields, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .alignment import BandMatchSet, assemble_input, match_bands, sensor_table, simulate_msi
from .checkpoint import load_checkpoint
from .datacube import Cube, SynthSpec, compute_stats, gen_synthetic, linear_band_table, load_cube, save_cube
from .metrics import evaluate
from .model import PRESETS, ModelConfig, ModelState, init_model
from .patching import RANDOM_STRATEGIES, GridDims, mask_from_band_match, sample_mask
from .training import TrainConfig, finetune, mask_seed, pretrain

log = logging.getLogger("hsmae")

SYNTH_DEFAULTS = {"endmembers": 3, "noise": 0.0, "sharpness": 1.0, "max_freq": 1.0}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # noqa: D401 - argparse hook
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _ratio(text: str) -> float:
    r = float(text)
    if not 0.0 <= r < 1.0:
        raise argparse.ArgumentTypeError(f"ratio must lie in [0, 1), got {r}")
    return r


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {v}")
    return v


def _pixels(text: str) -> list[tuple[int, int]]:
    out = []
    for part in filter(None, text.split(";")):
        i, j = part.split(",")
        out.append((int(i), int(j)))
    return out


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hsmae", description="Masked-autoencoder hyperspectral reconstruction.")
    p.add_argument("--precision", choices=("f32", "f64"), default=None)
    p.add_argument("--config", type=Path, default=None, help="JSON config file")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--version", action="version", version=f"hsmae {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-synthetic", help="write synthetic HSC cubes")
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--count", type=_positive_int, required=True)
    g.add_argument("--h", type=_positive_int, required=True)
    g.add_argument("--w", type=_positive_int, required=True)
    g.add_argument("--c", type=_positive_int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--endmembers", type=_positive_int, default=None)
    g.add_argument("--noise", type=float, default=None)
    g.add_argument("--hsi-sensor", default=None, help="band table name or JSON path (default: linear 420-2450 nm)")
    g.add_argument("--msi-sensor", default=None, help="also write box-response MSI cubes for this sensor")

    mb = sub.add_parser("match-bands", help="match MSI bands to HSI bands by interval overlap")
    mb.add_argument("--msi", required=True)
    mb.add_argument("--hsi", required=True)
    mb.add_argument("--out", type=Path, required=True)
    mb.add_argument("--threshold", type=float, default=0.6)
    mb.add_argument("--denominator", choices=("hsi", "msi", "union"), default="hsi")

    pt = sub.add_parser("pretrain", help="masked pretraining on HSI cubes")
    pt.add_argument("--dataset", type=Path, required=True)
    pt.add_argument("--out", type=Path, required=True)
    pt.add_argument("--preset", choices=sorted(PRESETS), default=None)
    pt.add_argument("--mask", choices=RANDOM_STRATEGIES, default=None)
    pt.add_argument("--ratio", type=_ratio, default=None)
    pt.add_argument("--resume", type=Path, default=None, help="checkpoint to continue from")
    _train_flags(pt)

    ft = sub.add_parser("finetune", help="fine-tune on MSI/HSI pairs with fixed band-match masks")
    ft.add_argument("--checkpoint", type=Path, required=True)
    ft.add_argument("--dataset", type=Path, required=True)
    ft.add_argument("--matches", type=Path, required=True)
    ft.add_argument("--out", type=Path, required=True)
    ft.add_argument("--frozen", action="store_true", help="keep encoder weights fixed")
    _train_flags(ft)

    rc = sub.add_parser("reconstruct", help="reconstruct an HSI cube from an MSI cube")
    rc.add_argument("--checkpoint", type=Path, required=True)
    rc.add_argument("--input", type=Path, required=True)
    rc.add_argument("--matches", type=Path, required=True)
    rc.add_argument("--out", type=Path, required=True)
    rc.add_argument("--truth", type=Path, default=None)
    rc.add_argument("--pixels", type=_pixels, default=None, help="'i,j;i,j' pixels for the spectra CSV")
    rc.add_argument("--rgb-nm", default="650,550,450", help="false-colour wavelengths (nm)")

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    ev.add_argument("--checkpoint", type=Path, required=True)
    ev.add_argument("--dataset", type=Path, required=True)
    ev.add_argument("--matches", type=Path, default=None, help="fixed-band plan; random masks when absent")
    ev.add_argument("--out", type=Path, required=True)
    ev.add_argument("--mask", choices=RANDOM_STRATEGIES, default="spectral")
    ev.add_argument("--ratio", type=_ratio, default=0.75)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--dynamic-range", type=float, default=1.0)

    rp = sub.add_parser("replay", help="re-run the command recorded in a run manifest")
    rp.add_argument("manifest", type=Path)
    return p


def _train_flags(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--steps", type=_positive_int, default=None)
    sp.add_argument("--batch-size", type=_positive_int, default=None)
    sp.add_argument("--lr", type=float, default=None)
    sp.add_argument("--weight-decay", type=float, default=None)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--init-seed", type=int, default=None)
    sp.add_argument("--ckpt-every", type=int, default=None)


# -- configuration ---------------------------------------------------------------


def _load_config(path: Path | None) -> dict[str, Any]:
    if path is None:
        return {}
    try:
        cfg = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    unknown = set(cfg) - {"preset", "model", "train", "synthetic", "precision"}
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    return cfg


def _pick(flag: Any, file_value: Any, default: Any) -> Any:
    if flag is not None:
        return flag
    if file_value is not None:
        return file_value
    return default


def resolve_model_config(args: argparse.Namespace, cfg: dict[str, Any]) -> ModelConfig:
    preset = _pick(getattr(args, "preset", None), cfg.get("preset"), "desk")
    if preset not in PRESETS:
        raise UsageError(f"unknown preset {preset!r}")
    overrides = cfg.get("model", {})
    names = {f.name for f in fields(ModelConfig)}
    bad = set(overrides) - names
    if bad:
        raise UsageError(f"unknown model config keys: {sorted(bad)}")
    return replace(PRESETS[preset], **overrides)


def resolve_train_config(args: argparse.Namespace, cfg: dict[str, Any], mode: str) -> TrainConfig:
    file_train = dict(cfg.get("train", {}))
    bad = set(file_train) - {f.name for f in fields(TrainConfig)}
    if bad:
        raise UsageError(f"unknown train config keys: {sorted(bad)}")
    base = TrainConfig()
    flag_map = {
        "strategy": getattr(args, "mask", None),
        "ratio": getattr(args, "ratio", None),
        "steps": args.steps,
        "batch_size": args.batch_size,
        "lr": args.lr,
        "weight_decay": args.weight_decay,
        "seed": args.seed,
        "ckpt_every": args.ckpt_every,
        "precision": args.precision or cfg.get("precision"),
    }
    values = {f.name: _pick(flag_map.get(f.name), file_train.get(f.name), getattr(base, f.name)) for f in fields(TrainConfig)}
    values["mode"] = mode
    values["freeze_encoder"] = bool(getattr(args, "frozen", False))
    try:
        return TrainConfig(**values)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


# -- dataset helpers ---------------------------------------------------------------


def _cube_paths(directory: Path, sub: str = "hsi") -> list[Path]:
    if not directory.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {directory}")
    base = directory / sub if (directory / sub).is_dir() else directory
    paths = sorted(base.glob("*.hsc"))
    if not paths:
        raise FileNotFoundError(f"no .hsc cubes under {base}")
    return paths


def _pairs(directory: Path) -> tuple[list[str], list[tuple[Cube, Cube]]]:
    hsi_paths = _cube_paths(directory, "hsi")
    msi_dir = directory / "msi"
    if not msi_dir.is_dir():
        raise FileNotFoundError(f"paired dataset needs an msi/ directory under {directory}")
    pairs = []
    for hp in hsi_paths:
        mp = msi_dir / hp.name
        if not mp.is_file():
            raise FileNotFoundError(f"missing MSI partner for {hp.name}")
        pairs.append((load_cube(mp), load_cube(hp)))
    return [p.stem for p in hsi_paths], pairs


def _write_manifest(path: Path, command: str, argv: Sequence[str], config: dict[str, Any], inputs, outputs, t0: float) -> None:
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "tool_version": __version__,
        "wall_clock_s": round(time.perf_counter() - t0, 3),
    }
    path.write_text(json.dumps(manifest, indent=1, default=str) + "\n", encoding="utf-8")


# -- commands ----------------------------------------------------------------------


def cmd_gen_synthetic(args, cfg, argv, t0) -> None:
    syn = {**SYNTH_DEFAULTS, **cfg.get("synthetic", {})}
    endmembers = _pick(args.endmembers, None, syn["endmembers"])
    noise = _pick(args.noise, None, syn["noise"])
    if args.hsi_sensor:
        table = sensor_table(args.hsi_sensor)
        if len(table) != args.c:
            raise UsageError(f"sensor {args.hsi_sensor} has {len(table)} bands but --c is {args.c}")
    else:
        table = linear_band_table(args.c, sensor_name="synthetic")
    msi_table = sensor_table(args.msi_sensor) if args.msi_sensor else None
    hsi_dir = args.out / "hsi"
    hsi_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for k in range(args.count):
        spec = SynthSpec(
            args.h, args.w, args.c, n_endmembers=endmembers, seed=args.seed * 100003 + k, noise=noise,
            sharpness=syn["sharpness"], max_freq=syn["max_freq"], band_table=table,
        )
        cube = gen_synthetic(spec)
        path = hsi_dir / f"sample_{k:04d}.hsc"
        save_cube(cube, path)
        outputs.append(path)
        if msi_table is not None:
            (args.out / "msi").mkdir(exist_ok=True)
            mpath = args.out / "msi" / path.name
            save_cube(simulate_msi(cube, msi_table), mpath)
            outputs.append(mpath)
    config = {"count": args.count, "H": args.h, "W": args.w, "C": args.c, "seed": args.seed,
              "endmembers": endmembers, "noise": noise, "synthetic": syn,
              "hsi_sensor": table.sensor_name, "msi_sensor": msi_table.sensor_name if msi_table else None}
    _write_manifest(args.out / "manifest.json", "gen-synthetic", argv, config, [], outputs, t0)
    print(f"wrote {args.count} cubes to {hsi_dir}")


def cmd_match_bands(args, cfg, argv, t0) -> None:
    if not 0.0 <= args.threshold < 1.0:
        raise UsageError("threshold must lie in [0, 1)")
    ms = match_bands(sensor_table(args.msi), sensor_table(args.hsi), args.threshold, args.denominator)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    ms.save(args.out)
    config = {"msi": args.msi, "hsi": args.hsi, "threshold": args.threshold, "denominator": args.denominator}
    _write_manifest(args.out.with_suffix(".manifest.json"), "match-bands", argv, config, [], [args.out], t0)
    print(f"{len(ms.matches)} HSI bands matched; written to {args.out}")


def cmd_pretrain(args, cfg, argv, t0) -> None:
    tc = resolve_train_config(args, cfg, "pretrain")
    paths = _cube_paths(args.dataset)
    cubes = [load_cube(p) for p in paths]
    resume = load_checkpoint(args.resume) if args.resume else None
    if resume is not None:
        if not isinstance(resume.model, ModelState):
            raise ValueError("cannot resume from an identity checkpoint")
        mc = resume.model.config
        model = resume.model
    else:
        mc = resolve_model_config(args, cfg)
        init_seed = args.init_seed if args.init_seed is not None else tc.seed
        model = init_model(mc, init_seed, tc.dtype)
    res = pretrain(tc, cubes, model, out_dir=args.out, resume=resume)
    config = {"model": mc.to_dict(), "train": tc.to_dict(), "init_seed": model.seed}
    _write_manifest(args.out / "manifest.json", "pretrain", argv, config, paths, [args.out / "model.smae", args.out / "metrics.csv"], t0)
    last = res.history[-1][1] if res.history else None
    print(f"pretrained {res.step} steps" + (f"; last total loss {last.total:.4g}" if last else ""))


def cmd_finetune(args, cfg, argv, t0) -> None:
    tc = resolve_train_config(args, cfg, "finetune")
    if not args.matches.is_file():
        raise FileNotFoundError(f"matches file not found: {args.matches}")
    ck = load_checkpoint(args.checkpoint)
    if not isinstance(ck.model, ModelState):
        raise ValueError("cannot fine-tune an identity checkpoint")
    matches = BandMatchSet.load(args.matches)
    ids, pairs = _pairs(args.dataset)
    stats = ck.stats or compute_stats([h for _, h in pairs])
    res = finetune(tc, ck.model, pairs, matches, stats, out_dir=args.out, lineage=ck.lineage)
    config = {"model": ck.model.config.to_dict(), "train": tc.to_dict(), "base_checkpoint": str(args.checkpoint)}
    _write_manifest(args.out / "manifest.json", "finetune", argv, config, [args.checkpoint, args.matches, args.dataset], [args.out / "model.smae"], t0)
    print(f"fine-tuned {res.step} steps (frozen encoder: {tc.freeze_encoder})")


def _model_group(model: Any, default: int) -> tuple[int, int]:
    if isinstance(model, ModelState):
        return model.config.patch, model.config.group
    return default, default


def false_color(cube: np.ndarray, bands: Sequence[int]) -> np.ndarray:
    """8-bit (H, W, 3) image from three bands, each min-max stretched."""
    rgb = cube[:, :, list(bands)].astype(np.float64)
    lo = rgb.min(axis=(0, 1), keepdims=True)
    hi = rgb.max(axis=(0, 1), keepdims=True)
    scaled = (rgb - lo) / np.where(hi > lo, hi - lo, 1.0)
    return np.round(scaled * 255).astype(np.uint8)


def cmd_reconstruct(args, cfg, argv, t0) -> None:
    from PIL import Image

    ck = load_checkpoint(args.checkpoint)
    matches = BandMatchSet.load(args.matches)
    msi = load_cube(args.input)
    truth = load_cube(args.truth) if args.truth else None
    p, s = _model_group(ck.model, 1)
    H, W = msi.H, msi.W
    C = len(matches.hsi_table)
    dims = GridDims.for_shape(H, W, C, p, s)
    plan = mask_from_band_match(matches, dims)
    x = assemble_input(msi, matches, s)
    stats = ck.stats or (compute_stats([truth]) if truth is not None else None)
    if stats is None:
        raise ValueError("checkpoint carries no normalization stats; pass --truth")
    recon_n = ck.model.reconstruct((x - stats.mean) / stats.std, plan)
    recon = np.asarray(recon_n, dtype=np.float64) * stats.std + stats.mean
    out = args.out
    out.parent.mkdir(parents=True, exist_ok=True)
    save_cube(Cube(recon.astype(np.float32), matches.hsi_table), out)
    plan_path = out.with_suffix(".plan.json")
    plan_path.write_text(plan.to_json() + "\n", encoding="utf-8")

    pixels = args.pixels or [(H // 2, W // 2)]
    pm = plan.pixel_mask()
    wl = matches.hsi_table.centers
    lines = ["i,j,band,wavelength_nm,true,reconstructed,masked"]
    for i, j in pixels:
        if not (0 <= i < H and 0 <= j < W):
            raise UsageError(f"pixel ({i},{j}) outside {H}x{W}")
        for b in range(C):
            t = repr(float(truth.data[i, j, b])) if truth is not None else ""
            lines.append(f"{i},{j},{b},{float(wl[b])!r},{t},{float(recon[i, j, b])!r},{int(pm[i, j, b])}")
    spectra_path = out.with_suffix(".spectra.csv")
    spectra_path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    rgb_nm = [float(v) for v in args.rgb_nm.split(",")]
    bands = [matches.hsi_table.nearest(v) for v in rgb_nm]
    png_path = out.with_suffix(".png")
    Image.fromarray(false_color(recon, bands), mode="RGB").save(png_path, format="PNG")
    outputs = [out, plan_path, spectra_path, png_path]
    _write_manifest(out.with_suffix(".manifest.json"), "reconstruct", argv, {"rgb_bands": bands, "pixels": pixels},
                    [args.checkpoint, args.input, args.matches], outputs, t0)
    print(f"reconstruction written to {out}")


def cmd_eval(args, cfg, argv, t0) -> None:
    if args.dynamic_range <= 0:
        raise UsageError("--dynamic-range must be > 0")
    ck = load_checkpoint(args.checkpoint)
    p, s = _model_group(ck.model, 1)
    if args.matches is not None:
        matches = BandMatchSet.load(args.matches)
        ids, pairs = _pairs(args.dataset)
        inputs = [assemble_input(msi, matches, s) for msi, _ in pairs]
        targets = [h.data.astype(np.float64) for _, h in pairs]
        dims = GridDims.for_shape(*pairs[0][1].shape, p, s)
        plans = [mask_from_band_match(matches, dims)] * len(pairs)
    else:
        paths = _cube_paths(args.dataset)
        ids = [q.stem for q in paths]
        targets = [load_cube(q).data.astype(np.float64) for q in paths]
        inputs = targets
        dims = GridDims.for_shape(*targets[0].shape, p, s)
        plans = [sample_mask(args.mask, dims, args.ratio, mask_seed(args.seed, 0, k)) for k in range(len(targets))]
    stats = ck.stats or compute_stats([Cube(t.astype(np.float32), linear_band_table(t.shape[2])) for t in targets])
    report, _, csv_text = evaluate(ck.model, list(zip(inputs, targets, plans)), stats, args.dynamic_range, ids)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "report.json").write_text(report.to_json(), encoding="utf-8")
    (args.out / "samples.csv").write_text(csv_text, encoding="utf-8")
    _write_manifest(args.out / "manifest.json", "eval", argv, {"dynamic_range": args.dynamic_range},
                    [args.checkpoint, args.dataset], [args.out / "report.json", args.out / "samples.csv"], t0)
    print(
        f"total={report.total_mse:.4g} masked={report.masked_mse:.4g} "
        f"unmasked={report.unmasked_mse:.4g} ssim={report.ssim:.4f}"
    )


def cmd_replay(args, cfg, argv, t0) -> int:
    manifest = json.loads(args.manifest.read_text(encoding="utf-8"))
    return main(manifest["argv"])


COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic,
    "match-bands": cmd_match_bands,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "reconstruct": cmd_reconstruct,
    "eval": cmd_eval,
    "replay": cmd_replay,
}


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    t0 = time.perf_counter()
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        cfg = _load_config(args.config)
        rc = COMMANDS[args.command](args, cfg, argv, t0)
        return int(rc or 0)
    except UsageError as exc:
        print(f"hsmae: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except (OSError, ValueError, FloatingPointError, KeyError) as exc:
        print(f"hsmae: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
