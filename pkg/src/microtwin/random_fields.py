"""Stationary isotropic Gaussian random fields on the integer lattice.

Fields are simulated as moving averages of white noise with a compactly
supported kernel. Kernels come in two parameterizations: a tabulated radial
profile (one coefficient per integer distance) and a 13-parameter covariance
family whose kernel is recovered spectrally. Correlated field pairs and
chi-square fields are built pointwise from independent fields.

All randomness is counter-based (Philox) so that a seed reproduces the same
field bit-for-bit on any platform.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

SPECTRUM_TOL = 1e-12


class RandomFieldError(ValueError):
    pass


def derive_seed(seed: int, *path: int) -> int:
    """Derive a 64-bit sub-seed from a master seed and an integer path.

    Distinct paths give statistically independent streams; the derivation is
    platform-independent.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(p) for p in path))
    return int(ss.generate_state(1, np.uint64)[0])


def rng_from_seed(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=int(seed)))


def nearest_int(x: np.ndarray) -> np.ndarray:
    """Nearest integer with halves rounded away from zero (x >= 0 here)."""
    return np.floor(np.asarray(x) + 0.5).astype(np.int64)


def _offsets(halfwidth: int) -> np.ndarray:
    return np.arange(-halfwidth, halfwidth + 1)


def radial_distances(halfwidth: int, d: int) -> np.ndarray:
    """|t| on the centered grid {-halfwidth..halfwidth}^d."""
    grids = np.meshgrid(*([_offsets(halfwidth)] * d), indexing="ij")
    return np.sqrt(sum(g.astype(np.float64) ** 2 for g in grids))


def radial_distances_wrap(size: int, d: int) -> np.ndarray:
    """|t| on a periodic grid of the given size, wrap (FFT) layout."""
    ax = np.minimum(np.arange(size), size - np.arange(size)).astype(np.float64)
    grids = np.meshgrid(*([ax] * d), indexing="ij")
    return np.sqrt(sum(g ** 2 for g in grids))


def centered_to_wrap(arr: np.ndarray) -> np.ndarray:
    return ad._embed_kernel_np(arr, arr.shape)


def wrap_to_centered(arr: np.ndarray) -> np.ndarray:
    return ad._extract_kernel_np(arr, arr.shape)


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass
class RadialKernelSpec:
    """Tabulated radial kernel profile: coefficient alpha[r] at integer
    distance r, zero beyond the support radius L = len(alpha) - 1."""

    alpha: np.ndarray

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        if self.alpha.ndim != 1 or self.alpha.size == 0:
            raise RandomFieldError("alpha must be a non-empty vector")
        if not np.any(self.alpha != 0.0):
            raise RandomFieldError("all-zero radial profile cannot be normalized")

    @property
    def support_radius(self) -> int:
        return self.alpha.size - 1


@dataclass
class ParametricCovariance:
    """13-parameter isotropic covariance family.

    values[0:3] are convex weights in [0, 1]; values[3:13] are positive rates,
    frequencies and exponents. The heavy-tail term uses the exponent
    -values[9] so the family stays bounded (see eval_parametric_covariance).
    """

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (13,):
            raise RandomFieldError("expected 13 covariance parameters")
        if np.any(self.values[:3] < 0.0) or np.any(self.values[:3] > 1.0):
            raise RandomFieldError("weights alpha_1..alpha_3 must lie in [0, 1]")
        if np.any(self.values[3:] <= 0.0):
            raise RandomFieldError("parameters alpha_4..alpha_13 must be positive")


@dataclass
class KernelGrid:
    """Discretized kernel on the centered grid {-halfwidth..halfwidth}^d,
    normalized so that sum(k^2) = 1."""

    d: int
    halfwidth: int
    coefficients: np.ndarray

    def __post_init__(self):
        expected = (2 * self.halfwidth + 1,) * self.d
        if self.coefficients.shape != expected:
            raise RandomFieldError(
                f"coefficient grid {self.coefficients.shape} does not match halfwidth "
                f"{self.halfwidth} in {self.d}-d")

    @property
    def norm_sq(self) -> float:
        return float(np.sum(self.coefficients ** 2))


@dataclass
class NoiseField:
    """I.i.d. standard normal field, reproducible from (seed, extents)."""

    extents: tuple[int, ...]
    values: np.ndarray
    seed: int


# ---------------------------------------------------------------------------
# kernel construction (differentiable cores + plain wrappers)
# ---------------------------------------------------------------------------

def normalize_kernel_tensor(k: Tensor) -> Tensor:
    norm = ad.sqrt_nonneg(ad.sum_all(ad.square(k)))
    return ad.div(k, norm)


def radial_kernel_tensor(alpha: Tensor, d: int) -> Tensor:
    """Normalized kernel grid from a radial profile tensor of length L + 1.

    The coefficient at grid point t is alpha[round(|t|)] for round(|t|) <= L
    and zero outside; the grid is then scaled to unit square-sum.
    """
    L = alpha.shape[0] - 1
    radii = nearest_int(radial_distances(L, d))
    inside = radii <= L
    idx = np.where(inside, radii, 0)
    raw = ad.take(alpha, idx.reshape(-1), out_shape=idx.shape)
    masked = ad.mul(raw, ad.constant(inside.astype(np.float64)))
    return normalize_kernel_tensor(masked)


def build_radial_kernel(spec: RadialKernelSpec, d: int) -> KernelGrid:
    k = radial_kernel_tensor(Tensor(spec.alpha), d)
    return KernelGrid(d=d, halfwidth=spec.support_radius, coefficients=k.data)


def _scalar(alpha: Tensor, i: int) -> Tensor:
    return ad.take(alpha, np.array([i]), out_shape=())


def parametric_covariance_tensor(alpha: Tensor, h: np.ndarray) -> Tensor:
    """The 13-parameter covariance evaluated at constant distances ``h``.

    Mixture (as published, with the bounded heavy-tail exponent):
        a1 * sinc(a4 h) e^{-a5 h^a11}
        + (1-a1) * [ a2 (a3 e^{-a6 h^a12} + (1-a2) sinc(a7 h) e^{-a8 h^a13})
                     + (1-a3) (1 + (a9 h)^2)^{-a10} ]
    Every component equals 1 at h = 0.
    """
    h = np.asarray(h, dtype=np.float64)
    a = [_scalar(alpha, i) for i in range(13)]
    a1, a2, a3, a4, a5, a6, a7, a8, a9, a10, a11, a12, a13 = a
    one = ad.constant(1.0)

    card1 = ad.sinc(ad.mul(a4, ad.constant(h)))
    damp1 = ad.exp(ad.neg(ad.mul(a5, ad.pow_const_base(h, a11))))
    damp2 = ad.exp(ad.neg(ad.mul(a6, ad.pow_const_base(h, a12))))
    card2 = ad.sinc(ad.mul(a7, ad.constant(h)))
    damp3 = ad.exp(ad.neg(ad.mul(a8, ad.pow_const_base(h, a13))))
    cauchy_base = ad.add(one, ad.square(ad.mul(a9, ad.constant(h))))
    cauchy = ad.exp(ad.neg(ad.mul(a10, ad.log(cauchy_base))))

    inner = ad.add(
        ad.mul(a2, ad.add(ad.mul(a3, damp2),
                          ad.mul(ad.sub(one, a2), ad.mul(card2, damp3)))),
        ad.mul(ad.sub(one, a3), cauchy))
    return ad.add(ad.mul(a1, ad.mul(card1, damp1)),
                  ad.mul(ad.sub(one, a1), inner))


def eval_parametric_covariance(pc: ParametricCovariance, h) -> np.ndarray:
    """Plain-array evaluation of the covariance family at distances h >= 0."""
    out = parametric_covariance_tensor(Tensor(pc.values), np.asarray(h, dtype=np.float64))
    return out.data


def lowparam_kernel_tensor(alpha: Tensor, halfwidth: int, d: int,
                           warn_negative: bool = True) -> Tensor:
    """Normalized kernel grid for the 13-parameter covariance family.

    Tabulates the covariance on the periodic (2*halfwidth+1)^d grid, takes the
    real part of the spectral square root and renormalizes. Differentiable in
    all 13 parameters; negative spectral mass (the tabulated covariance need
    not be exactly positive semidefinite) is clipped to zero.
    """
    size = 2 * halfwidth + 1
    h_wrap = radial_distances_wrap(size, d)
    rho = parametric_covariance_tensor(alpha, h_wrap.reshape(-1))
    rho = ad.reshape(rho, h_wrap.shape)
    spectrum = ad.dft_sym(rho)
    if warn_negative:
        smin = float(spectrum.data.min())
        if smin < -SPECTRUM_TOL * max(1.0, float(np.abs(spectrum.data).max())):
            warnings.warn(
                f"covariance spectrum has negative entries (min {smin:.3e}); "
                "imaginary kernel part discarded", RuntimeWarning, stacklevel=2)
    k_wrap = ad.idft_sym(ad.sqrt_nonneg(ad.clamp_min(spectrum, 0.0)))
    perm = _wrap_to_centered_indices(size, d)
    k_centered = ad.take(k_wrap, perm.reshape(-1), out_shape=perm.shape)
    return normalize_kernel_tensor(k_centered)


def _wrap_to_centered_indices(size: int, d: int) -> np.ndarray:
    flat = np.arange(size ** d).reshape((size,) * d)
    return wrap_to_centered(flat)


def build_lowparam_kernel(pc: ParametricCovariance, halfwidth: int, d: int) -> KernelGrid:
    if halfwidth < 1:
        raise RandomFieldError("halfwidth must be >= 1")
    k = lowparam_kernel_tensor(Tensor(pc.values), halfwidth, d)
    return KernelGrid(d=d, halfwidth=halfwidth, coefficients=k.data)


# ---------------------------------------------------------------------------
# kernel <-> covariance
# ---------------------------------------------------------------------------

def covariance_of_kernel(k: KernelGrid) -> np.ndarray:
    """Autocorrelation rho(t) = (k * k_mirrored)(t) on the centered grid.

    The result has halfwidth 2 * k.halfwidth (the exact linear support);
    rho(0) = 1 for normalized kernels and rho(t) = rho(-t).
    """
    size = 4 * k.halfwidth + 1
    emb = ad._embed_kernel_np(k.coefficients, (size,) * k.d)
    spec = np.fft.rfftn(emb)
    rho_wrap = np.fft.irfftn(spec * np.conj(spec), s=emb.shape,
                             axes=range(emb.ndim))
    return wrap_to_centered(rho_wrap)


def kernel_from_covariance(rho: np.ndarray, out_halfwidth: int | None = None) -> KernelGrid:
    """Recover a kernel whose autocorrelation approximates ``rho``.

    Takes the inverse FFT of the elementwise complex square root of the FFT of
    rho, discards the imaginary part, optionally truncates the support and
    renormalizes to unit square-sum. Warns when the spectrum has negative
    entries (rho not positive semidefinite on the grid), in which case the
    approximation degrades.
    """
    rho = np.asarray(rho, dtype=np.float64)
    sizes = set(rho.shape)
    if len(sizes) != 1 or (rho.shape[0] % 2) == 0:
        raise RandomFieldError(f"covariance grid must be cubic with odd extent, got {rho.shape}")
    halfwidth = rho.shape[0] // 2
    center = rho[(halfwidth,) * rho.ndim]
    if center <= 0.0:
        raise RandomFieldError(f"rho(0) must be positive, got {center}")

    spectrum = np.fft.fftn(centered_to_wrap(rho))
    if float(spectrum.real.min()) < -SPECTRUM_TOL * max(1.0, float(np.abs(spectrum).max())):
        warnings.warn(
            f"covariance spectrum has negative entries (min {spectrum.real.min():.3e}); "
            "imaginary kernel part discarded", RuntimeWarning, stacklevel=2)
    k_wrap = np.fft.ifftn(np.sqrt(spectrum.astype(np.complex128))).real
    coeff = wrap_to_centered(k_wrap)

    if out_halfwidth is not None:
        if out_halfwidth > halfwidth:
            raise RandomFieldError("cannot grow support during truncation")
        lo = halfwidth - out_halfwidth
        hi = halfwidth + out_halfwidth + 1
        coeff = coeff[(slice(lo, hi),) * rho.ndim]
        halfwidth = out_halfwidth

    norm = np.sqrt(np.sum(coeff ** 2))
    if norm == 0.0:
        raise RandomFieldError("recovered kernel vanished")
    return KernelGrid(d=rho.ndim, halfwidth=halfwidth, coefficients=coeff / norm)


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------

def sample_white_noise(extents, seed: int) -> NoiseField:
    extents = tuple(int(n) for n in extents)
    if any(n < 1 for n in extents):
        raise RandomFieldError(f"extents must be positive, got {extents}")
    gen = rng_from_seed(seed)
    return NoiseField(extents=extents, values=gen.standard_normal(extents), seed=int(seed))


def simulate_grf(kernel: KernelGrid, noise: NoiseField) -> np.ndarray:
    """Moving average of white noise; returns the wrap-free interior.

    The noise must cover the output window extended by the kernel halfwidth on
    every side; the periodic convolution is exact (non-wrapped) on the
    retained interior, so the output is a genuinely stationary field.
    """
    w = kernel.halfwidth
    if noise.values.ndim != kernel.d:
        raise RandomFieldError(
            f"noise is {noise.values.ndim}-d but kernel is {kernel.d}-d")
    out_extents = tuple(n - 2 * w for n in noise.extents)
    if any(n < 1 for n in out_extents):
        raise RandomFieldError(
            f"window {noise.extents} too small for kernel support {2 * w + 1}")
    full = ad.conv_circular_np(noise.values, kernel.coefficients)
    sl = tuple(slice(w, w + n) for n in out_extents)
    return full[sl]


def noise_extents_for(extents, halfwidth: int) -> tuple[int, ...]:
    return tuple(int(n) + 2 * halfwidth for n in extents)


def simulate_correlated_pair(xt: np.ndarray, yt: np.ndarray, zt: np.ndarray,
                             gamma: float, sign: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Mix three independent normalized fields into a correlated pair.

    Xc = sqrt(1-gamma) Xt + sqrt(gamma) Zt, Yc likewise with the signed Zt
    term; the lag-0 cross-covariance is sign * gamma.
    """
    if not (0.0 <= gamma <= 1.0):
        raise RandomFieldError(f"gamma must lie in [0, 1], got {gamma}")
    if sign not in (-1, 1):
        raise RandomFieldError(f"sign must be +1 or -1, got {sign}")
    a = np.sqrt(1.0 - gamma)
    b = np.sqrt(gamma)
    return a * xt + b * zt, a * yt + sign * b * zt


def simulate_chi2_pair(pairs) -> tuple[np.ndarray, np.ndarray]:
    """Pointwise sums of squares over correlated pair copies.

    For n pairs the marginals are chi-square with n degrees of freedom
    (mean n, variance 2n).
    """
    pairs = list(pairs)
    if not pairs:
        raise RandomFieldError("need at least one pair")
    xp = np.zeros_like(pairs[0][0])
    yp = np.zeros_like(pairs[0][1])
    for xc, yc in pairs:
        xp += xc * xc
        yp += yc * yc
    return xp, yp
