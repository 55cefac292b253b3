"""Fitting the z-direction scale factor from directional chord lengths.

An isotropic model calibrated on x-y sections is stretched or compressed
along z by the factor that best aligns the z-direction chord length
distribution with the in-plane one. The objective integrates the pointwise
CDF gap sum over all phases; it is minimized by a coarse grid search followed
by golden-section refinement.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


class ScaleFitError(ValueError):
    pass


@dataclass
class TabulatedCdf:
    """Distribution function given by knots with linear interpolation;
    0 below the first knot, 1 beyond the last."""

    t: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if np.any(np.diff(self.values) < -1e-12):
            raise ScaleFitError("CDF values must be non-decreasing")

    @property
    def max_voxels(self) -> float:
        return float(self.t[-1])

    def cdf(self, t) -> np.ndarray:
        return np.interp(np.asarray(t, dtype=np.float64), self.t, self.values,
                         left=0.0, right=1.0)


@dataclass
class ScaleFit:
    s_hat: float
    objective: float
    trace: list = field(default_factory=list)

    def __post_init__(self):
        if self.s_hat <= 0:
            raise ScaleFitError(f"scale factor must be positive, got {self.s_hat}")


def _objective(phi_xy, phi_z, t_grid: np.ndarray, s: float) -> float:
    gap = np.zeros_like(t_grid)
    for pxy, pz in zip(phi_xy, phi_z):
        gap += np.abs(pxy.cdf(t_grid) - pz.cdf(t_grid * s))
    return float(np.trapezoid(gap, t_grid))


def fit_scale_factor(phi_xy, phi_z, s_lo: float = 0.5, s_hi: float = 2.0,
                     grid_step: float = 0.005, t_step: float = 0.1,
                     refine_tol: float = 1e-4) -> ScaleFit:
    """Minimize the integrated per-phase CDF gap between in-plane chords and
    scaled z-chords over s in [s_lo, s_hi].

    Inputs are three per-phase CDF objects each (``cdf(t)`` plus a
    ``max_voxels`` support bound); the integral is truncated where every CDF
    has reached 1 and the integrand vanishes. Coarse grid search with step
    ``grid_step`` brackets the optimum, golden-section search narrows it to
    ``refine_tol``.
    """
    phi_xy = list(phi_xy)
    phi_z = list(phi_z)
    if len(phi_xy) != 3 or len(phi_z) != 3:
        raise ScaleFitError("expected one CDF per phase for both directions")
    t_max = max(p.max_voxels for p in phi_xy + phi_z)
    if not np.isfinite(t_max) or t_max <= 0:
        raise ScaleFitError("empty chord distribution")
    t_grid = np.arange(0.0, t_max + t_step, t_step)

    s_grid = np.arange(s_lo, s_hi + grid_step / 2, grid_step)
    trace = [(float(s), _objective(phi_xy, phi_z, t_grid, s)) for s in s_grid]
    best_idx = int(np.argmin([obj for _, obj in trace]))
    best_s, best_obj = trace[best_idx]

    a = max(s_lo, best_s - grid_step)
    b = min(s_hi, best_s + grid_step)
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc = _objective(phi_xy, phi_z, t_grid, c)
    fd = _objective(phi_xy, phi_z, t_grid, d)
    while b - a > refine_tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = _objective(phi_xy, phi_z, t_grid, c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = _objective(phi_xy, phi_z, t_grid, d)
    s_ref = (a + b) / 2
    obj_ref = _objective(phi_xy, phi_z, t_grid, s_ref)
    if obj_ref <= best_obj:
        best_s, best_obj = s_ref, obj_ref
    return ScaleFit(s_hat=float(best_s), objective=float(best_obj), trace=trace)


def save_scale_fit(fit: ScaleFit, path) -> None:
    with open(path, "w") as fh:
        json.dump({"format": "microtwin-scalefit", "s_hat": fit.s_hat,
                   "objective": fit.objective}, fh, indent=1)
        fh.write("\n")


def load_scale_fit(path) -> ScaleFit:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != "microtwin-scalefit":
        raise ScaleFitError("not a scale-fit document")
    return ScaleFit(s_hat=float(doc["s_hat"]), objective=float(doc["objective"]))
