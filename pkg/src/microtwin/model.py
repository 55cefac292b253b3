"""Three-phase excursion-set microstructure model.

A realization draws five independent isotropic GRFs (X, Y and the triple
feeding a correlated chi-square pair), thresholds X' + sigma_x X against
lambda_x for phase 1 and, on its complement, Y' + sigma_y Y against lambda_y
for phase 2; phase 3 is the rest. The soft variant replaces the hard threshold
with sigmoid(nu * r), which keeps the whole map differentiable in every model
parameter while converging to the hard model as nu grows.

Hard and soft realizations of the same (theta, extents, seed) share the exact
same underlying fields, so thresholding soft channels at 0.5 reproduces the
hard phases wherever the threshold argument is nonzero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from . import random_fields as rf
from .random_fields import (KernelGrid, ParametricCovariance, RadialKernelSpec,
                            derive_seed)

HIGH = "high"
LOW = "low"
FIELD_NAMES = ("x", "y", "xt", "yt", "zt")
SE, AM, PORE = 1, 2, 3

PARAMS_FORMAT_VERSION = 1

# noise sub-stream ids within one realization seed
_STREAM_X = 0
_STREAM_Y = 1
_STREAM_PAIR_BASE = 2  # copy i uses 2 + 3i (xt), 3 + 3i (yt), 4 + 3i (zt)


class ModelError(ValueError):
    pass


@dataclass
class PhaseImage:
    """Hard three-phase image; labels[t] in {1, 2, 3}, axes ordered (x, y[, z])."""

    labels: np.ndarray
    voxel_size: float = 1.0

    def __post_init__(self):
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        bad = (self.labels < 1) | (self.labels > 3)
        if bad.any():
            raise ModelError("phase labels must be in {1, 2, 3}")

    @property
    def extents(self) -> tuple[int, ...]:
        return self.labels.shape

    def indicator(self, phase: int) -> np.ndarray:
        return self.labels == phase

    def one_hot(self) -> np.ndarray:
        """Float channels-last encoding, shape extents + (3,)."""
        out = np.zeros(self.labels.shape + (3,))
        for p in (1, 2, 3):
            out[..., p - 1] = self.labels == p
        return out


@dataclass
class PhaseField:
    """Soft three-phase field; channels-last reals in (0, 1) summing to 1."""

    channels: np.ndarray
    nu: float

    @property
    def extents(self) -> tuple[int, ...]:
        return self.channels.shape[:-1]

    def threshold(self) -> PhaseImage:
        """Phase 1 where channel 1 > 0.5, else phase 2 where channel 2 ratio
        wins, mirroring the hard model's sequential thresholds."""
        c1 = self.channels[..., 0]
        c2 = self.channels[..., 1]
        # undo the (1 - c1) factor before comparing channel 2 to its threshold
        with np.errstate(divide="ignore", invalid="ignore"):
            r2 = np.where(c1 < 1.0, c2 / (1.0 - c1), 1.0)
        labels = np.full(c1.shape, PORE, dtype=np.uint8)
        labels[r2 > 0.5] = AM
        labels[c1 > 0.5] = SE
        return PhaseImage(labels=labels)


@dataclass
class ModelParams:
    """Full parameter vector of the three-phase excursion-set model.

    ``field_specs`` maps the five field names (x, y, xt, yt, zt) to either
    RadialKernelSpec (high-parametric) or ParametricCovariance (low-parametric)
    entries. ``kernel_halfwidth`` fixes the tabulation grid of low-parametric
    kernels and defaults to the high-parametric support radius.
    """

    kind: str
    field_specs: dict
    gamma: float
    sigma_x: float
    sigma_y: float
    lambda_x: float
    lambda_y: float
    n_dof: int = 2
    sign: int = 1
    kernel_halfwidth: int = 100

    def __post_init__(self):
        if self.kind not in (HIGH, LOW):
            raise ModelError(f"unknown model kind {self.kind!r}")
        missing = [n for n in FIELD_NAMES if n not in self.field_specs]
        if missing:
            raise ModelError(f"missing field specs: {missing}")
        want = RadialKernelSpec if self.kind == HIGH else ParametricCovariance
        for name in FIELD_NAMES:
            if not isinstance(self.field_specs[name], want):
                raise ModelError(f"field {name!r} must be a {want.__name__} for kind {self.kind!r}")
        if not (0.0 <= self.gamma <= 1.0):
            raise ModelError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.sigma_x <= 0 or self.sigma_y <= 0:
            raise ModelError("sigma_x and sigma_y must be positive")
        if self.n_dof < 1:
            raise ModelError("n_dof must be >= 1")
        if self.sign not in (-1, 1):
            raise ModelError("sign must be +1 or -1")

    @property
    def halfwidth(self) -> int:
        if self.kind == HIGH:
            return self.field_specs["x"].support_radius
        return self.kernel_halfwidth


def param_count(kind: str, L: int = 100) -> int:
    """Effective parameter count: 5 per-kernel profiles (one degree of freedom
    absorbed by normalization) plus gamma, sigma_x, sigma_y, lambda_x, lambda_y."""
    if kind == HIGH:
        return 5 * L + 5
    if kind == LOW:
        return 5 * 13 + 5
    raise ModelError(f"unknown model kind {kind!r}")


# ---------------------------------------------------------------------------
# parameter tensors and the realization graph
# ---------------------------------------------------------------------------

@dataclass
class ThetaTensors:
    """Natural-space model parameters as tensors, ready for the graph.

    ``alphas`` holds per-field kernel parameters (radial profile or the 13
    covariance parameters). Wrap plain floats for simulation; pass tensors
    with requires_grad for calibration.
    """

    kind: str
    alphas: dict
    gamma: Tensor
    sigma_x: Tensor
    sigma_y: Tensor
    lambda_x: Tensor
    lambda_y: Tensor
    n_dof: int
    sign: int
    halfwidth: int


def theta_tensors(theta: ModelParams) -> ThetaTensors:
    if theta.kind == HIGH:
        alphas = {n: Tensor(theta.field_specs[n].alpha) for n in FIELD_NAMES}
    else:
        alphas = {n: Tensor(theta.field_specs[n].values) for n in FIELD_NAMES}
    return ThetaTensors(
        kind=theta.kind, alphas=alphas,
        gamma=Tensor(theta.gamma),
        sigma_x=Tensor(theta.sigma_x), sigma_y=Tensor(theta.sigma_y),
        lambda_x=Tensor(theta.lambda_x), lambda_y=Tensor(theta.lambda_y),
        n_dof=theta.n_dof, sign=theta.sign, halfwidth=theta.halfwidth)


def build_kernel_tensors(tt: ThetaTensors, d: int) -> dict:
    """The five normalized kernels as tensors (shared across a batch)."""
    if tt.kind == HIGH:
        return {n: rf.radial_kernel_tensor(tt.alphas[n], d) for n in FIELD_NAMES}
    return {n: rf.lowparam_kernel_tensor(tt.alphas[n], tt.halfwidth, d,
                                         warn_negative=False)
            for n in FIELD_NAMES}


def _grf_tensor(kernel: Tensor, extents, seed: int) -> Tensor:
    d = len(extents)
    w = (kernel.shape[0] - 1) // 2
    noise = rf.sample_white_noise(rf.noise_extents_for(extents, w), seed)
    full = ad.conv_circular(ad.constant(noise.values), kernel)
    return ad.crop(full, (w,) * d, extents)


def threshold_arguments(kernels: dict, tt: ThetaTensors, extents, seed: int
                        ) -> tuple[Tensor, Tensor]:
    """The two threshold arguments X' + sigma_x X - lambda_x and
    Y' + sigma_y Y - lambda_y as tensors on the requested window."""
    extents = tuple(int(n) for n in extents)
    x = _grf_tensor(kernels["x"], extents, derive_seed(seed, _STREAM_X))
    y = _grf_tensor(kernels["y"], extents, derive_seed(seed, _STREAM_Y))

    sqrt_one_minus = ad.sqrt_nonneg(ad.sub(ad.constant(1.0), tt.gamma))
    sqrt_gamma = ad.sqrt_nonneg(tt.gamma)
    xp = None
    yp = None
    for i in range(tt.n_dof):
        base = _STREAM_PAIR_BASE + 3 * i
        xt = _grf_tensor(kernels["xt"], extents, derive_seed(seed, base))
        yt = _grf_tensor(kernels["yt"], extents, derive_seed(seed, base + 1))
        zt = _grf_tensor(kernels["zt"], extents, derive_seed(seed, base + 2))
        xc = ad.add(ad.mul(sqrt_one_minus, xt), ad.mul(sqrt_gamma, zt))
        yc_z = ad.mul(sqrt_gamma, zt)
        if tt.sign < 0:
            yc_z = ad.neg(yc_z)
        yc = ad.add(ad.mul(sqrt_one_minus, yt), yc_z)
        xsq = ad.square(xc)
        ysq = ad.square(yc)
        xp = xsq if xp is None else ad.add(xp, xsq)
        yp = ysq if yp is None else ad.add(yp, ysq)

    a1 = ad.sub(ad.add(xp, ad.mul(tt.sigma_x, x)), tt.lambda_x)
    a2 = ad.sub(ad.add(yp, ad.mul(tt.sigma_y, y)), tt.lambda_y)
    return a1, a2


def soft_channels(kernels: dict, tt: ThetaTensors, extents, seed: int,
                  nu: float) -> tuple[Tensor, Tensor, Tensor]:
    """Differentiable relaxation: sigmoid(nu * r) in place of the hard step."""
    a1, a2 = threshold_arguments(kernels, tt, extents, seed)
    t1 = ad.sigmoid(ad.mul(ad.constant(float(nu)), a1))
    t2 = ad.mul(ad.sigmoid(ad.mul(ad.constant(float(nu)), a2)),
                ad.sub(ad.constant(1.0), t1))
    t3 = ad.sub(ad.sub(ad.constant(1.0), t1), t2)
    return t1, t2, t3


def realize_hard(theta: ModelParams, extents, seed: int) -> PhaseImage:
    """Hard realization: phase 1 where X' + sigma_x X >= lambda_x, phase 2
    where (not phase 1) and Y' + sigma_y Y >= lambda_y, phase 3 elsewhere."""
    tt = theta_tensors(theta)
    kernels = build_kernel_tensors(tt, len(tuple(extents)))
    a1, a2 = threshold_arguments(kernels, tt, extents, seed)
    phase1 = a1.data >= 0.0
    phase2 = ~phase1 & (a2.data >= 0.0)
    labels = np.full(phase1.shape, PORE, dtype=np.uint8)
    labels[phase2] = AM
    labels[phase1] = SE
    return PhaseImage(labels=labels)


def realize_soft(theta: ModelParams, extents, seed: int, nu: float = 10.0) -> PhaseField:
    if nu <= 0:
        raise ModelError(f"nu must be positive, got {nu}")
    tt = theta_tensors(theta)
    kernels = build_kernel_tensors(tt, len(tuple(extents)))
    t1, t2, t3 = soft_channels(kernels, tt, extents, seed, nu)
    return PhaseField(channels=np.stack([t1.data, t2.data, t3.data], axis=-1), nu=nu)


def anisotropic_z_map(nz: int, s_hat: float) -> np.ndarray:
    """Output layer z reads isotropic layer round(z * s_hat), half away from zero."""
    return rf.nearest_int(np.arange(nz) * float(s_hat))


def realize_anisotropic(theta: ModelParams, s_hat: float, extents, seed: int) -> PhaseImage:
    """Scale the isotropic model along z by s_hat (s_hat < 1 stretches)."""
    if s_hat <= 0:
        raise ModelError(f"s_hat must be positive, got {s_hat}")
    extents = tuple(int(n) for n in extents)
    if len(extents) != 3:
        raise ModelError("anisotropic realization needs 3-d extents")
    zmap = anisotropic_z_map(extents[2], s_hat)
    src_extents = (extents[0], extents[1], int(zmap.max()) + 1)
    iso = realize_hard(theta, src_extents, seed)
    return PhaseImage(labels=iso.labels[:, :, zmap], voxel_size=iso.voxel_size)


# ---------------------------------------------------------------------------
# parameter file (JSON, versioned)
# ---------------------------------------------------------------------------

def params_to_dict(theta: ModelParams) -> dict:
    if theta.kind == HIGH:
        specs = {n: list(theta.field_specs[n].alpha) for n in FIELD_NAMES}
    else:
        specs = {n: list(theta.field_specs[n].values) for n in FIELD_NAMES}
    return {
        "format": "microtwin-params",
        "version": PARAMS_FORMAT_VERSION,
        "kind": theta.kind,
        "field_specs": specs,
        "gamma": theta.gamma,
        "sigma_x": theta.sigma_x,
        "sigma_y": theta.sigma_y,
        "lambda_x": theta.lambda_x,
        "lambda_y": theta.lambda_y,
        "n_dof": theta.n_dof,
        "sign": theta.sign,
        "kernel_halfwidth": theta.kernel_halfwidth,
    }


def params_from_dict(doc: dict) -> ModelParams:
    if doc.get("format") != "microtwin-params":
        raise ModelError("not a model parameter document")
    if doc.get("version") != PARAMS_FORMAT_VERSION:
        raise ModelError(f"unsupported parameter file version {doc.get('version')}")
    kind = doc["kind"]
    if kind == HIGH:
        specs = {n: RadialKernelSpec(np.array(doc["field_specs"][n]))
                 for n in FIELD_NAMES}
    else:
        specs = {n: ParametricCovariance(np.array(doc["field_specs"][n]))
                 for n in FIELD_NAMES}
    return ModelParams(
        kind=kind, field_specs=specs,
        gamma=float(doc["gamma"]),
        sigma_x=float(doc["sigma_x"]), sigma_y=float(doc["sigma_y"]),
        lambda_x=float(doc["lambda_x"]), lambda_y=float(doc["lambda_y"]),
        n_dof=int(doc["n_dof"]), sign=int(doc["sign"]),
        kernel_halfwidth=int(doc["kernel_halfwidth"]))


def save_params(theta: ModelParams, path) -> None:
    with open(path, "w") as fh:
        json.dump(params_to_dict(theta), fh, indent=1)
        fh.write("\n")


def load_params(path) -> ModelParams:
    with open(path) as fh:
        return params_from_dict(json.load(fh))
