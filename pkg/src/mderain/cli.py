"""Command-line entry point: ``mderain <command> ...``.

Exit codes: 0 success, 2 bad configuration or arguments, 3 unreadable or
inconsistent data, 4 non-finite values (or a failed gradient check).
"""

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from mderain import data
from mderain.lightfield import LayoutError, mpi_to_sai, sai_to_mpi
from mderain.nn import CheckpointError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("mderain")


def _range(text):
    try:
        lo, hi = (float(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO,HI, got {text!r}")
    return lo, hi


def cmd_gen(args):
    rain = dict(data.REAL_STYLE_RAIN) if args.real_style else {}
    for name in ("angle", "length", "width", "intensity"):
        value = getattr(args, f"rain_{name}")
        if value is not None:
            rain[name] = value
    if args.rain_count is not None:
        rain["count"] = args.rain_count
    if args.chromatic:
        rain["achromatic"] = False
    try:
        ids = data.generate_dataset(
            args.out,
            args.count,
            args.seed,
            angular=args.angular,
            size=args.size,
            rain_kwargs=rain,
            labeled=not (args.unlabeled or args.real_style),
            bit_depth=args.bit_depth,
        )
    except ValueError as exc:
        raise _ConfigFailure(str(exc)) from exc
    print(f"wrote {len(ids)} scenes to {args.out}")


def _read_lf(path, angular=None):
    """A view directory, or a single MPI image when ``angular`` is given."""
    path = Path(path)
    if not path.exists():
        raise data.DataError(f"{path} does not exist")
    if path.is_dir():
        return data.load_lf_dir(path)
    if angular is None:
        raise _ConfigFailure(f"{path} is a file; pass --angular to read it as an MPI image")
    return mpi_to_sai(data.read_image(path), angular)


def cmd_convert(args):
    lf = _read_lf(args.input, args.angular)
    if args.to == "sai":
        data.save_lf_dir(lf, args.out, args.bit_depth)
    elif args.to == "mpi":
        data.write_image(args.out, sai_to_mpi(lf), args.bit_depth)
    else:
        data.export_epi_png(lf, args.out, args.axis, args.fixed_angular, args.fixed_spatial)
    print(f"wrote {args.out}")


def cmd_train(args):
    from mderain.train import Trainer, load_config

    cfg = load_config(args.config)
    if args.out:
        cfg.out = args.out
    Trainer(cfg, resume=args.resume).train()
    print(f"training finished; checkpoints in {cfg.out}")


def cmd_derain(args):
    from mderain.inference import derain_lf
    from mderain.train import load_model

    model, _, _ = load_model(args.model)
    lf = _read_lf(args.input, args.angular)
    if lf.shape[0] != model.cfg.angular:
        raise data.DataError(f"input has {lf.shape[0]}x{lf.shape[1]} views, model expects A={model.cfg.angular}")
    out = derain_lf(model, lf, overlap=args.overlap)
    if not np.all(np.isfinite(out)):
        raise _NumericFailure("non-finite values in the de-rained output")
    data.save_lf_dir(out, args.out, args.bit_depth)
    print(f"wrote {args.out}")


def cmd_eval(args):
    from mderain.metrics import evaluate

    pred = _read_lf(args.pred)
    gt = _read_lf(args.gt)
    if pred.shape != gt.shape:
        raise data.DataError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    report = evaluate(pred, gt)
    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(json.dumps(report, indent=2))
    with open(report_path.with_suffix(".csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["u", "v", "psnr"])
        for u, row in enumerate(report["per_view_psnr"]):
            for v, value in enumerate(row):
                writer.writerow([u, v, f"{value:.6f}"])
    if args.epi_dir:
        epi_dir = Path(args.epi_dir)
        epi_dir.mkdir(parents=True, exist_ok=True)
        for name, lf in (("pred", pred), ("gt", gt)):
            for axis in ("horizontal", "vertical"):
                data.export_epi_png(lf, epi_dir / f"{name}_{axis}.png", axis)
    print(f"PSNR {report['psnr']:.3f} dB  SSIM {report['ssim']:.4f}  view std {report['per_view_std']:.3f} dB")


def cmd_residue(args):
    from mderain.residue import residue_views

    if not 0.0 <= args.mu <= 1.0 or args.radius < 0 or args.eps <= 0:
        raise _ConfigFailure("need 0 <= mu <= 1, radius >= 0 and eps > 0")
    lf = _read_lf(args.input, args.angular)
    out = Path(args.out)
    products = ("residue", "colored", "filtered", "combined")
    stacks = {name: np.empty_like(lf) for name in products}
    for u in range(lf.shape[0]):
        for v in range(lf.shape[1]):
            res, colored, filtered, combined = residue_views(lf[u, v], args.mu, args.radius, args.eps)
            stacks["residue"][u, v] = res[..., None]
            stacks["colored"][u, v] = colored
            stacks["filtered"][u, v] = filtered
            stacks["combined"][u, v] = combined
    for name in products:
        data.save_lf_dir(stacks[name], out / name, args.bit_depth)
    print(f"wrote residue products to {out}")


def cmd_gradcheck(args):
    from mderain.verify import GROUPS, run_suite

    groups = args.group or list(GROUPS)
    results = run_suite(tol=args.tol, groups=groups, log=print)
    failed = [name for name, r in results.items() if not r.passed]
    if failed:
        raise _NumericFailure(f"gradient check failed for: {', '.join(failed)}")
    print(f"all {len(results)} gradient checks passed")


class _ConfigFailure(Exception):
    pass


class _NumericFailure(Exception):
    pass


def build_parser():
    p = argparse.ArgumentParser(prog="mderain", description="Light-field rain removal toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate synthetic rainy light fields")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=16)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--angular", type=int, default=3)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--bit-depth", type=int, choices=(8, 16), default=16)
    g.add_argument("--rain-count", type=int)
    g.add_argument("--rain-angle", type=_range, help="LO,HI degrees from vertical")
    g.add_argument("--rain-length", type=_range)
    g.add_argument("--rain-width", type=_range)
    g.add_argument("--rain-intensity", type=_range)
    g.add_argument("--chromatic", action="store_true", help="tint streaks instead of pure white")
    g.add_argument("--unlabeled", action="store_true", help="write rainy views only")
    g.add_argument("--real-style", action="store_true", help="shifted rain distribution, unlabeled")
    g.set_defaults(func=cmd_gen)

    c = sub.add_parser("convert", help="convert between view grids, MPI images and EPIs")
    c.add_argument("--input", required=True)
    c.add_argument("--to", choices=("sai", "mpi", "epi"), required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--angular", type=int, help="angular resolution when the input is an MPI image")
    c.add_argument("--axis", choices=("horizontal", "vertical"), default="horizontal")
    c.add_argument("--fixed-angular", type=int)
    c.add_argument("--fixed-spatial", type=int)
    c.add_argument("--bit-depth", type=int, choices=(8, 16), default=8)
    c.set_defaults(func=cmd_convert)

    t = sub.add_parser("train", help="train from a TOML config")
    t.add_argument("--config", required=True)
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--out", help="override the output directory")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("derain", help="de-rain a light field with a trained model")
    d.add_argument("--model", required=True)
    d.add_argument("--input", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--angular", type=int)
    d.add_argument("--overlap", type=int, default=16)
    d.add_argument("--bit-depth", type=int, choices=(8, 16), default=16)
    d.set_defaults(func=cmd_derain)

    e = sub.add_parser("eval", help="PSNR/SSIM report of a prediction against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--report", required=True, help="JSON path; per-view CSV is written beside it")
    e.add_argument("--epi-dir", help="also export horizontal and vertical EPIs here")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("residue", help="residue and colored-residue images of every view")
    r.add_argument("--input", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--angular", type=int)
    r.add_argument("--mu", type=float, default=0.5)
    r.add_argument("--radius", type=int, default=4)
    r.add_argument("--eps", type=float, default=0.01)
    r.add_argument("--bit-depth", type=int, choices=(8, 16), default=16)
    r.set_defaults(func=cmd_residue)

    k = sub.add_parser("gradcheck", help="finite-difference check of every differentiable piece")
    k.add_argument("--tol", type=float, default=1e-4)
    k.add_argument("--group", action="append", choices=("primitives", "blocks", "model", "losses"))
    k.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    from mderain.train import ConfigError, NumericError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (ConfigError, _ConfigFailure) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (data.DataError, LayoutError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, _NumericFailure, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
