"""Command-line entry point: ``gsvr simulate | reconstruct | evaluate | export-slices``.

Exit codes: 0 success, 1 usage, 2 I/O, 3 validation, 4 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import formats
from .config import ConfigError, dump_config, load_config_dict, merge, preset_dict, from_dict
from .gaussians import field_index, rasterize_to_grid
from .volume import GridSpec

log = logging.getLogger("gsvr")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_VALIDATION, EXIT_DIVERGED = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p, preset_help):
    p.add_argument("--config", type=Path, help="YAML/JSON config file, or a run.jsonl to replay")
    p.add_argument("--preset", help=preset_help)
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", type=Path, default=Path("."))
    p.add_argument("--threads", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="gsvr", description="Gaussian-field slice-to-volume reconstruction")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("simulate", help="phantom -> case bundle")
    _common(p, "acquisition protocol: desk (default) or full")
    p.add_argument("--phantom", choices=("gaussian-mixture", "nested-ellipsoids", "checker-smooth"))
    p.add_argument("--motion", choices=("none", "mild", "moderate", "severe"))
    p.add_argument("--motion-model", choices=("independent", "random-walk"))
    p.add_argument("--noise", type=float, help="Gaussian noise sigma added to the slices")

    p = sub.add_parser("reconstruct", help="case -> GGAU + transforms + run log")
    p.add_argument("input", type=Path, help="case manifest.json or a .gstk stack file")
    _common(p, "reconstruction preset: desk or full")
    p.add_argument("--checkpoint-dir", type=Path)

    p = sub.add_parser("evaluate", help="reconstruction vs truth -> metrics report")
    p.add_argument("case", type=Path, help="case manifest.json")
    p.add_argument("recon", type=Path, help="directory written by 'reconstruct'")
    p.add_argument("--out-dir", type=Path, default=None)
    p.add_argument("--no-register", action="store_true", help="skip rigid volume registration")
    p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("export-slices", help="axial/coronal/sagittal cross-sections as PGM")
    p.add_argument("input", type=Path, help=".gvol volume or .ggau field")
    p.add_argument("--out-dir", type=Path, default=Path("."))
    p.add_argument("--like", type=Path, help=".gvol whose grid is used to rasterise a field")
    p.add_argument("--spacing", type=float, default=1.0, help="voxel size for fields without --like")
    p.add_argument("--index", type=int, nargs=3, metavar=("I", "J", "K"),
                   help="voxel indices of the cut planes (default: centre)")
    p.add_argument("--window", type=float, nargs=2, metavar=("LO", "HI"),
                   help="intensity window mapped to 0..255 (default: min..max)")
    return ap


# -- simulate --------------------------------------------------------------------

def cmd_simulate(args) -> int:
    from .phantom import PROTOCOLS, make_benchmark_case, protocol_from

    name = args.preset or "desk"
    if name not in PROTOCOLS:
        raise ConfigError("preset", f"unknown protocol {name!r}; expected one of {sorted(PROTOCOLS)}")
    changes = {}
    if args.config is not None:
        changes.update(load_config_dict(args.config))
    for key, val in (("phantom_kind", args.phantom), ("motion", args.motion),
                     ("motion_model", args.motion_model), ("noise_sigma", args.noise)):
        if val is not None:
            changes[key] = val
    try:
        proto = protocol_from(name, **changes)
    except (TypeError, ValueError) as exc:
        raise ConfigError("protocol", str(exc)) from None
    seed = 0 if args.seed is None else args.seed
    stacks, truth = make_benchmark_case(None, proto, seed)
    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    files = {"stacks": "stacks.gstk", "truth_volume": "truth.gvol",
             "truth_transforms": "truth_transforms.json"}
    formats.write_stacks(out / files["stacks"], stacks)
    formats.write_volume(out / files["truth_volume"], truth.volume)
    formats.write_transforms(out / files["truth_transforms"], truth.transforms)
    if truth.gaussians is not None:
        files["truth_gaussians"] = "truth.ggau"
        formats.write_gaussians(out / files["truth_gaussians"], truth.gaussians)
    case_id = f"{name}-{proto.phantom_kind}-{proto.motion}-seed{seed}"
    formats.write_manifest(out / "manifest.json", case_id, truth.seeds, proto.to_dict(), files)
    log.info("wrote case %s to %s", case_id, out)
    return EXIT_OK


# -- reconstruct -----------------------------------------------------------------

def _recon_config(args):
    data = {}
    if args.preset:
        data = merge(data, preset_dict(args.preset))
    if args.config is not None:
        data = merge(data, load_config_dict(args.config))
    if args.seed is not None:
        data["seed"] = args.seed
    if args.threads is not None:
        data["threads"] = args.threads
    return from_dict(data)


def cmd_reconstruct(args) -> int:
    from .reconstruct import reconstruct

    src = args.input
    if not src.exists():
        raise FileNotFoundError(str(src))
    if src.suffix == ".json":
        manifest = formats.read_manifest(src)
        stacks = formats.read_stacks(manifest["paths"]["stacks"])
    else:
        stacks = formats.read_stacks(src)
    cfg = _recon_config(args)
    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(cfg))

    def progress(rec):
        if rec["iteration"] % 50 == 0:
            log.info("iter %d (%s) loss %.6f", rec["iteration"], rec["stage"], rec["total"])

    res = reconstruct(stacks, cfg, log_path=out / "run.jsonl", checkpoint_dir=args.checkpoint_dir,
                      progress=progress)
    formats.write_gaussians(out / "recon.ggau", res.gaussians)
    formats.write_transforms(out / "transforms.json", res.transforms)
    grid = res.grid
    vol = rasterize_to_grid(res.gaussians, field_index(res.gaussians, grid.points()), grid, cfg.threads)
    formats.write_volume(out / "recon.gvol", vol)
    log.info("final loss %.6f; outputs in %s", res.final_loss(), out)
    return EXIT_OK


# -- evaluate --------------------------------------------------------------------

def cmd_evaluate(args) -> int:
    from .metrics import evaluate_reconstruction

    manifest = formats.read_manifest(args.case)
    paths = manifest["paths"]
    if "truth_volume" not in paths:
        raise formats.ValidationError("files.truth_volume", "the case has no ground-truth volume",
                                      args.case)
    truth_vol = formats.read_volume(paths["truth_volume"])
    stacks = formats.read_stacks(paths["stacks"])
    truth_t = formats.read_transforms(paths["truth_transforms"]) if "truth_transforms" in paths else None
    rdir = args.recon
    for name in ("recon.ggau", "transforms.json"):
        if not (rdir / name).exists():
            raise FileNotFoundError(str(rdir / name))
    gset = formats.read_gaussians(rdir / "recon.ggau")
    est = formats.read_transforms(rdir / "transforms.json")
    geoms = [[st.geometry(k) for k in range(st.n_slices)] for st in stacks.stacks]
    if truth_t is not None and [len(r) for r in truth_t] != [len(r) for r in est]:
        raise formats.ValidationError("transforms", "estimate and truth list different slices", rdir)
    res = evaluate_reconstruction(gset, est, truth_vol, truth_t, geoms, not args.no_register,
                                  args.threads)
    report = {manifest["case_id"]: res}
    out = args.out_dir or rdir
    out.mkdir(parents=True, exist_ok=True)
    formats.write_report(out / "metrics.json", report)
    v = res["volume"]
    print(f"{manifest['case_id']}: PSNR {v['psnr_registered']:.2f} dB  SSIM {v['ssim_registered']:.4f}  "
          f"NRMSE {v['nrmse_registered']:.4f} (registered)")
    return EXIT_OK


# -- export-slices ---------------------------------------------------------------

def write_pgm(path, image, lo=None, hi=None) -> None:
    img = np.asarray(image, dtype=np.float64)
    lo = float(img.min()) if lo is None else lo
    hi = float(img.max()) if hi is None else hi
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    px = np.clip(np.round((img - lo) * scale), 0, 255).astype(np.uint8)
    rows, cols = px.shape
    Path(path).write_bytes(f"P5\n{cols} {rows}\n255\n".encode("ascii") + px.tobytes())


def cmd_export(args) -> int:
    src = args.input
    if not src.exists():
        raise FileNotFoundError(str(src))
    if src.suffix == ".ggau":
        gset = formats.read_gaussians(src)
        if args.like is not None:
            grid = formats.read_volume(args.like).grid
        else:
            if gset.count == 0:
                raise formats.ValidationError("count", "cannot infer a grid from an empty field", src)
            r = gset.support_radii()[:, None]
            lo = (gset.centers - r).min(axis=0)
            hi = (gset.centers + r).max(axis=0)
            dims = np.maximum(1, np.ceil((hi - lo) / args.spacing).astype(int) + 1)
            grid = GridSpec(tuple(lo), (args.spacing,) * 3, tuple(int(d) for d in dims))
        vol = rasterize_to_grid(gset, field_index(gset, grid.points()), grid)
    else:
        vol = formats.read_volume(src)
    data = np.asarray(vol.data, dtype=np.float64)
    idx = args.index or [d // 2 for d in data.shape]
    for k, (i, n) in enumerate(zip(idx, data.shape)):
        if not 0 <= i < n:
            raise formats.ValidationError(f"index[{k}]", f"{i} outside 0..{n - 1}")
    lo, hi = args.window if args.window else (float(data.min()), float(data.max()))
    # array axes are (x, y, z); images are shown with the second axis vertical
    cuts = {"axial": data[:, :, idx[2]].T, "coronal": data[:, idx[1], :].T,
            "sagittal": data[idx[0], :, :].T}
    args.out_dir.mkdir(parents=True, exist_ok=True)
    for name, img in cuts.items():
        write_pgm(args.out_dir / f"{src.stem}_{name}.pgm", img[::-1], lo, hi)
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "reconstruct": cmd_reconstruct, "evaluate": cmd_evaluate,
            "export-slices": cmd_export}


def main(argv=None) -> int:
    from .reconstruct import DivergenceError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "threads", None) is not None and args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, formats.ValidationError) as exc:
        print(f"error: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except formats.FormatError as exc:
        print(f"error: cannot read {exc}", file=sys.stderr)
        return EXIT_IO
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename or exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except json.JSONDecodeError as exc:
        print(f"error: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
