"""Command-line surface tying the pipeline together.

Subcommands: fit (calibrate a model to a segmented volume), generate (realize
voxel microstructures), descriptors (full descriptor report), scale-fit
(anisotropy factor from chord lengths), validate (model-vs-data descriptor
comparison). Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from . import anisotropy as an
from . import calibration as cal
from . import descriptors as de
from . import io as mio
from . import model as mo
from .autodiff import AutodiffError
from .random_fields import RandomFieldError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_DATA_ERRORS = (mio.DataFormatError, de.DescriptorError, mo.ModelError,
                RandomFieldError, an.ScaleFitError, FileNotFoundError,
                PermissionError, IsADirectoryError, NotADirectoryError)
_NUMERIC_ERRORS = (cal.CalibrationError, AutodiffError, FloatingPointError)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="microtwin",
        description="Excursion-set digital twins for multiphase microstructures.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="calibrate a model to segmented image data")
    p.add_argument("--algo", required=True, choices=("tpcf", "gan", "combined"))
    p.add_argument("--data", required=True, help="segmented volume file")
    p.add_argument("--config", required=True, help="run configuration (JSON)")
    p.add_argument("--out", required=True, help="output checkpoint directory")
    p.add_argument("--axis", default="z", choices=("x", "y", "z"),
                   help="slice axis for training sections")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("generate", help="realize a voxel microstructure")
    p.add_argument("--params", required=True, help="model parameter file")
    p.add_argument("--anisotropic", action="store_true",
                   help="apply the z-direction scale factor")
    p.add_argument("--scale", type=float, default=None,
                   help="anisotropy factor override")
    p.add_argument("--scale-file", default=None,
                   help="scale-fit file providing the anisotropy factor")
    p.add_argument("--size", nargs=3, type=int, required=True,
                   metavar=("NX", "NY", "NZ"))
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--voxel-size", type=float, default=1.0,
                   help="voxel edge length in micrometers")
    p.add_argument("--out", required=True, help="output volume file")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("descriptors", help="compute structural descriptors")
    p.add_argument("--volume", required=True)
    p.add_argument("--axis", default="z", choices=("x", "y", "z"))
    p.add_argument("--h-max", type=int, default=100,
                   help="largest two-point distance (clipped to the window)")
    p.add_argument("--out", required=True, help="output CSV directory")
    p.set_defaults(func=cmd_descriptors)

    p = sub.add_parser("scale-fit", help="fit the z-direction scale factor")
    p.add_argument("--volume", required=True)
    p.add_argument("--out", required=True, help="output scale-fit file")
    p.add_argument("--attach-params", default=None,
                   help="also embed the factor into this parameter file")
    p.set_defaults(func=cmd_scale_fit)

    p = sub.add_parser("validate", help="compare model realizations to data")
    p.add_argument("--params", required=True)
    p.add_argument("--data", required=True, help="segmented volume file")
    p.add_argument("--n", type=int, default=10, help="number of realizations")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output CSV file")
    p.set_defaults(func=cmd_validate)

    return parser


def cmd_fit(args) -> int:
    config, _ = mio.load_run_config(args.config)
    config = dataclasses.replace(config, checkpoint_dir=args.out)
    slices = mio.load_slices(args.data, axis=args.axis)

    if args.algo in ("tpcf", "combined"):
        max_lag = min(config.h_max, min(slices[0].extents) - 1)
        if max_lag < config.h_max:
            raise mio.DataFormatError(
                f"h_max {config.h_max} exceeds the data window; use <= {max_lag}")
        data_tpcf = de.tpcf_data_average(slices, max_lag=config.h_max,
                                         bandwidth=config.bandwidth)
    if args.algo == "tpcf":
        result = cal.train_tppf(data_tpcf, config)
    elif args.algo == "gan":
        result = cal.train_gan(slices, config)
    else:
        result = cal.train_combined(slices, data_tpcf, config)

    os.makedirs(args.out, exist_ok=True)
    cal.save_checkpoint(args.out, result.raw, result.adam, result.log, config,
                        next_epoch=config.n_epoch + 1, disc=result.disc,
                        disc_adam=result.disc_adam)
    mio.save_run_config(config, os.path.join(args.out, "run_config.json"),
                        extras={"algo": args.algo, "data": args.data})
    print(os.path.join(args.out, "params.json"))
    return EXIT_OK


def _resolve_scale(args, s_hat_from_params) -> float:
    if args.scale is not None:
        return args.scale
    if args.scale_file is not None:
        return an.load_scale_fit(args.scale_file).s_hat
    if s_hat_from_params is not None:
        return s_hat_from_params
    raise mio.DataFormatError(
        "anisotropic generation needs --scale, --scale-file or a parameter "
        "file with an embedded s_hat")


def cmd_generate(args) -> int:
    theta, s_hat = mio.load_model_file(args.params)
    extents = tuple(args.size)
    if args.anisotropic:
        img = mo.realize_anisotropic(theta, _resolve_scale(args, s_hat),
                                     extents, args.seed)
    else:
        img = mo.realize_hard(theta, extents, args.seed)
    img.voxel_size = args.voxel_size
    mio.save_volume(img, args.out)
    print(args.out)
    return EXIT_OK


def cmd_descriptors(args) -> int:
    vol = mio.load_volume(args.volume)
    os.makedirs(args.out, exist_ok=True)
    axis = {"x": 0, "y": 1, "z": 2}[args.axis]

    summary = de.compute_summary(vol, axis=min(axis, vol.labels.ndim - 1))
    mio.export_summary_csv(summary, os.path.join(args.out, "summary.csv"))

    slices = mio.load_slices(args.volume, axis=args.axis) \
        if vol.labels.ndim == 3 else [vol]
    max_lag = min(args.h_max, min(slices[0].extents) - 1)
    tpcf = de.tpcf_data_average(slices, max_lag=max_lag)
    mio.export_tpcf_csv(tpcf, os.path.join(args.out, "tpcf.csv"))

    dists = []
    for phase in (1, 2, 3):
        for direction in ["x", "y", "z"][:vol.labels.ndim]:
            try:
                dists.append(de.chord_lengths(vol, phase, direction))
            except de.DescriptorError:
                pass
    mio.export_chord_cdf_csv(dists, os.path.join(args.out, "chords.csv"))
    print(args.out)
    return EXIT_OK


def cmd_scale_fit(args) -> int:
    vol = mio.load_volume(args.volume)
    if vol.labels.ndim != 3:
        raise mio.DataFormatError("scale-fit needs a 3-d volume")
    phi_xy = []
    phi_z = []
    for phase in (1, 2, 3):
        cx = de.chord_lengths(vol, phase, "x")
        cy = de.chord_lengths(vol, phase, "y")
        t_max = max(cx.max_voxels, cy.max_voxels)
        grid = np.linspace(0.0, t_max, 512)
        phi_xy.append(an.TabulatedCdf(grid, 0.5 * (cx.cdf(grid) + cy.cdf(grid))))
        phi_z.append(de.chord_lengths(vol, phase, "z"))
    fit = an.fit_scale_factor(phi_xy, phi_z)
    an.save_scale_fit(fit, args.out)
    if args.attach_params:
        theta, _ = mio.load_model_file(args.attach_params)
        mio.save_model_file(theta, args.attach_params, s_hat=fit.s_hat)
    print(f"{fit.s_hat!r}")
    return EXIT_OK


def cmd_validate(args) -> int:
    theta, s_hat = mio.load_model_file(args.params)
    data = mio.load_volume(args.data)
    axis = data.labels.ndim - 1
    data_summary = de.compute_summary(data, axis=axis)

    summaries = []
    for k in range(args.n):
        if s_hat is not None and data.labels.ndim == 3:
            img = mo.realize_anisotropic(theta, s_hat, data.extents,
                                         mo.derive_seed(args.seed, k))
        else:
            img = mo.realize_hard(theta, data.extents, mo.derive_seed(args.seed, k))
        img.voxel_size = data.voxel_size
        summaries.append(de.compute_summary(img, axis=axis))

    def collect(getter):
        rows = {}
        for phase in (1, 2, 3):
            vals = np.array([getter(s, phase) for s in summaries], dtype=np.float64)
            vals = vals[np.isfinite(vals)]
            rows[phase] = ((float(vals.mean()), float(vals.std(ddof=1)) if vals.size > 1 else 0.0)
                           if vals.size else (float("nan"), float("nan")))
        return rows

    tables = [
        ("volume_fraction", lambda s, p: s.volume_fractions[p]),
        ("mean_chord", lambda s, p: s.mean_chord[p]),
        ("specific_surface", lambda s, p: s.specific_surface[p]),
        ("tortuosity", lambda s, p: s.tortuosity.get(p, float("nan"))),
        ("constrictivity", lambda s, p: s.constrictivity.get(p, float("nan"))),
    ]
    with open(args.out, "w") as fh:
        fh.write("descriptor,phase,data,model_mean,model_std\n")
        for name, getter in tables:
            data_rows = collect(getter)
            for phase in (1, 2, 3):
                dval = float(getter(data_summary, phase))
                mean, std = data_rows[phase]
                if not np.isfinite(dval) and not np.isfinite(mean):
                    continue
                fh.write(f"{name},{phase},{dval!r},{mean!r},{std!r}\n")
    print(args.out)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _NUMERIC_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except _DATA_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
