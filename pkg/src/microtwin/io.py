"""File formats: segmented volumes, run configs, CSV tables, PNG slices.

The segmented volume format is a short text header followed by one unsigned
byte per voxel with values in {1, 2, 3}, x varying fastest. Every format here
round-trips exactly (write then read gives an equal in-memory value).
"""

from __future__ import annotations

import dataclasses
import json

import numpy as np
from PIL import Image

from .calibration import TrainConfig
from .model import ModelParams, PhaseImage, params_from_dict, params_to_dict

MAGIC = "MICROTWIN-SEGVOL"
VOLUME_FORMAT_VERSION = 1

# phase 1 (solid electrolyte) gray, phase 2 (active material) red,
# phase 3 (pores) black
PHASE_COLORS = {1: (128, 128, 128), 2: (255, 0, 0), 3: (0, 0, 0)}

_AXES = {"x": 0, "y": 1, "z": 2}


class DataFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# segmented volume files
# ---------------------------------------------------------------------------

def save_volume(img: PhaseImage, path) -> None:
    dims = img.labels.ndim
    if dims not in (2, 3):
        raise DataFormatError(f"only 2-d and 3-d volumes supported, got {dims}-d")
    extents = " ".join(str(n) for n in img.extents)
    header = (f"{MAGIC} {VOLUME_FORMAT_VERSION}\n"
              f"dims {dims}\n"
              f"extent {extents}\n"
              f"voxel_size_um {img.voxel_size!r}\n"
              f"phases 1=SE 2=AM 3=pore\n"
              f"order x-fastest\n"
              f"data\n")
    # x fastest: write the transposed (z, y, x) array in C order
    payload = np.ascontiguousarray(img.labels.T).tobytes()
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(payload)


def load_volume(path) -> PhaseImage:
    with open(path, "rb") as fh:
        blob = fh.read()
    marker = b"data\n"
    cut = blob.find(marker)
    if cut < 0:
        raise DataFormatError("missing data marker; not a segmented volume file")
    header_text = blob[:cut].decode("ascii", errors="replace")
    payload = blob[cut + len(marker):]

    fields = {}
    lines = header_text.strip().split("\n")
    first = lines[0].split()
    if len(first) != 2 or first[0] != MAGIC:
        raise DataFormatError(f"bad magic {lines[0]!r}")
    if int(first[1]) != VOLUME_FORMAT_VERSION:
        raise DataFormatError(f"unsupported volume format version {first[1]}")
    for line in lines[1:]:
        key, _, rest = line.partition(" ")
        fields[key] = rest
    try:
        dims = int(fields["dims"])
        extents = tuple(int(v) for v in fields["extent"].split())
        voxel_size = float(fields["voxel_size_um"])
    except (KeyError, ValueError) as exc:
        raise DataFormatError(f"malformed header field: {exc}") from exc
    if dims not in (2, 3) or len(extents) != dims:
        raise DataFormatError(f"inconsistent dims {dims} / extent {extents}")

    expected = int(np.prod(extents))
    if len(payload) != expected:
        raise DataFormatError(
            f"payload size mismatch: expected {expected} bytes, got {len(payload)}")
    raw = np.frombuffer(payload, dtype=np.uint8)
    bad = np.flatnonzero((raw < 1) | (raw > 3))
    if bad.size:
        offset = cut + len(marker) + int(bad[0])
        raise DataFormatError(
            f"illegal phase byte {raw[bad[0]]} at file offset {offset}")
    labels = raw.reshape(tuple(reversed(extents))).T
    return PhaseImage(labels=labels.copy(), voxel_size=voxel_size)


def load_slices(path, axis: str = "z") -> list[PhaseImage]:
    """2-d sections perpendicular to the given axis, in index order."""
    vol = load_volume(path)
    if vol.labels.ndim == 2:
        if axis != "z":
            raise DataFormatError("2-d volumes only slice along z")
        return [vol]
    ax = _AXES.get(axis)
    if ax is None:
        raise DataFormatError(f"unknown axis {axis!r}")
    moved = np.moveaxis(vol.labels, ax, -1)
    return [PhaseImage(labels=moved[..., k].copy(), voxel_size=vol.voxel_size)
            for k in range(moved.shape[-1])]


def save_slice_png(img: PhaseImage, z: int | None, path) -> None:
    """Palette PNG of one slice; phases map to gray / red / black."""
    labels = img.labels
    if labels.ndim == 3:
        if z is None:
            raise DataFormatError("z index required for 3-d images")
        labels = labels[:, :, int(z)]
    # rows are y (top to bottom), columns x
    pic = Image.fromarray(labels.T.astype(np.uint8), mode="P")
    palette = [0] * 768
    for phase, rgb in PHASE_COLORS.items():
        palette[3 * phase:3 * phase + 3] = rgb
    pic.putpalette(palette)
    pic.save(path, format="PNG")


# ---------------------------------------------------------------------------
# model parameter files with optional anisotropy factor
# ---------------------------------------------------------------------------

def save_model_file(theta: ModelParams, path, s_hat: float | None = None) -> None:
    doc = params_to_dict(theta)
    if s_hat is not None:
        doc["s_hat"] = float(s_hat)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_model_file(path) -> tuple[ModelParams, float | None]:
    with open(path) as fh:
        doc = json.load(fh)
    s_hat = doc.get("s_hat")
    return params_from_dict(doc), (float(s_hat) if s_hat is not None else None)


# ---------------------------------------------------------------------------
# run configuration files
# ---------------------------------------------------------------------------

def save_run_config(config: TrainConfig, path, extras: dict | None = None) -> None:
    doc = {"format": "microtwin-config", "train": dataclasses.asdict(config)}
    if extras:
        doc["extras"] = extras
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_run_config(path) -> tuple[TrainConfig, dict]:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != "microtwin-config":
        raise DataFormatError("not a run configuration file")
    fields = dict(doc["train"])
    fields["window"] = tuple(fields["window"])
    fields["disc_blocks"] = tuple(tuple(b) for b in fields["disc_blocks"])
    return TrainConfig(**fields), doc.get("extras", {})


# ---------------------------------------------------------------------------
# CSV tables
# ---------------------------------------------------------------------------

def export_kernel_csv(kernel_coefficients: np.ndarray, path) -> None:
    """Rows (h, value) for every grid point, sorted by distance."""
    arr = np.asarray(kernel_coefficients)
    halfwidth = arr.shape[0] // 2
    grids = np.meshgrid(*([np.arange(-halfwidth, halfwidth + 1)] * arr.ndim),
                        indexing="ij")
    h = np.sqrt(sum(g.astype(float) ** 2 for g in grids)).reshape(-1)
    v = arr.reshape(-1)
    order = np.argsort(h, kind="stable")
    with open(path, "w") as fh:
        fh.write("h,value\n")
        for i in order:
            fh.write(f"{h[i]!r},{v[i]!r}\n")


export_covariance_csv = export_kernel_csv


def export_tpcf_csv(tpcf, path) -> None:
    with open(path, "w") as fh:
        fh.write("pair,h,value\n")
        for (i, j) in tpcf.pairs:
            for h, v in zip(tpcf.h_grid, tpcf.values[(i, j)]):
                fh.write(f"C{i}{j},{float(h)!r},{float(v)!r}\n")


def export_chord_cdf_csv(distributions, path) -> None:
    """One row per observed length per (phase, direction): CDF support points
    in physical units."""
    with open(path, "w") as fh:
        fh.write("phase,direction,length,cdf\n")
        for dist in distributions:
            xs = np.unique(dist.lengths)
            cdf = dist.cdf(xs)
            for x, c in zip(xs, cdf):
                fh.write(f"{dist.phase},{dist.direction},"
                         f"{float(x * dist.voxel_size)!r},{float(c)!r}\n")


def export_summary_csv(summary, path) -> None:
    with open(path, "w") as fh:
        fh.write("phase,volume_fraction,mean_chord,specific_surface,"
                 "tortuosity,constrictivity\n")
        for phase in (1, 2, 3):
            tau = summary.tortuosity.get(phase)
            beta = summary.constrictivity.get(phase)
            cells = [str(phase),
                     repr(summary.volume_fractions[phase]),
                     repr(summary.mean_chord[phase]),
                     repr(summary.specific_surface[phase]),
                     "" if tau is None else repr(tau),
                     "" if beta is None else repr(beta)]
            fh.write(",".join(cells) + "\n")
