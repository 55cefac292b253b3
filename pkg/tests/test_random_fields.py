"""Kernel construction, covariance algebra and field simulation laws."""

import itertools
import warnings

import numpy as np
import pytest

import microtwin.autodiff as ad
import microtwin.random_fields as rf
from microtwin.autodiff import Tensor

from _factories import central_difference, relative_error


def enumerate_radial_kernel(alpha, L, d):
    """Independent oracle: enumerate grid points, round distances half away
    from zero, look up the profile, normalize."""
    grid = {}
    for t in itertools.product(range(-L, L + 1), repeat=d):
        r = int(np.floor(np.hypot(*t) + 0.5)) if d == 2 else \
            int(np.floor(np.sqrt(sum(v * v for v in t)) + 0.5))
        grid[t] = alpha[r] if r <= L else 0.0
    norm = np.sqrt(sum(v * v for v in grid.values()))
    return {t: v / norm for t, v in grid.items()}


def test_radial_kernel_impulse():
    k = rf.build_radial_kernel(rf.RadialKernelSpec(np.array([1.0])), d=2)
    assert k.coefficients.shape == (1, 1)
    assert k.coefficients[0, 0] == pytest.approx(1.0)


def test_radial_kernel_1d():
    k = rf.build_radial_kernel(rf.RadialKernelSpec(np.array([1.0, 1.0])), d=1)
    assert np.allclose(k.coefficients, 1.0 / np.sqrt(3.0))


def test_radial_kernel_2d_enumeration_oracle():
    # diagonal neighbors at distance sqrt(2) round to 1 and carry alpha_1,
    # so the normalizer for alpha=(2,1), L=1 is sqrt(4 + 8*1) = sqrt(12)
    alpha = np.array([2.0, 1.0])
    oracle = enumerate_radial_kernel(alpha, 1, 2)
    k = rf.build_radial_kernel(rf.RadialKernelSpec(alpha), d=2)
    for (tx, ty), value in oracle.items():
        assert k.coefficients[tx + 1, ty + 1] == pytest.approx(value, abs=1e-12)
    assert k.coefficients[1, 1] == pytest.approx(2.0 / np.sqrt(12.0))


def test_radial_kernel_rejects_zero_profile():
    with pytest.raises(rf.RandomFieldError):
        rf.RadialKernelSpec(np.zeros(3))


def test_kernel_normalization_invariant():
    rng = np.random.default_rng(0)
    for _ in range(10):
        alpha = rng.standard_normal(rng.integers(1, 6))
        if not np.any(alpha):
            continue
        for d in (1, 2, 3):
            k = rf.build_radial_kernel(rf.RadialKernelSpec(alpha), d=d)
            assert abs(k.norm_sq - 1.0) <= 1e-10


def test_radial_symmetry_under_grid_symmetries():
    k = rf.build_radial_kernel(
        rf.RadialKernelSpec(np.array([1.0, 0.7, 0.2])), d=2).coefficients
    assert np.allclose(k, k[::-1, :])
    assert np.allclose(k, k[:, ::-1])
    assert np.allclose(k, k.T)


def test_covariance_of_impulse():
    k = rf.build_radial_kernel(rf.RadialKernelSpec(np.array([1.0])), d=2)
    rho = rf.covariance_of_kernel(k)
    assert rho.shape == (1, 1)
    assert rho[0, 0] == pytest.approx(1.0)


def test_covariance_of_flat_1d_kernel():
    k = rf.build_radial_kernel(rf.RadialKernelSpec(np.array([1.0, 1.0])), d=1)
    rho = rf.covariance_of_kernel(k)
    assert np.allclose(rho, [1 / 3, 2 / 3, 1.0, 2 / 3, 1 / 3], atol=1e-12)


def test_covariance_matches_naive_double_sum():
    rng = np.random.default_rng(1)
    coeff = rng.standard_normal((7, 7, 7))
    coeff /= np.sqrt((coeff ** 2).sum())
    k = rf.KernelGrid(d=3, halfwidth=3, coefficients=coeff)
    rho = rf.covariance_of_kernel(k)
    w = 3
    for t in [(0, 0, 0), (1, -2, 0), (3, 3, 3), (-2, 1, 2), (6, 0, 0)]:
        acc = 0.0
        for s in itertools.product(range(-w, w + 1), repeat=3):
            u = tuple(si + ti for si, ti in zip(s, t))
            if all(-w <= ui <= w for ui in u):
                acc += coeff[s[0] + w, s[1] + w, s[2] + w] * \
                    coeff[u[0] + w, u[1] + w, u[2] + w]
        assert rho[t[0] + 2 * w, t[1] + 2 * w, t[2] + 2 * w] == \
            pytest.approx(acc, abs=1e-12)


def test_covariance_symmetry():
    k = rf.build_radial_kernel(rf.RadialKernelSpec(np.array([1.0, 0.4])), d=2)
    rho = rf.covariance_of_kernel(k)
    assert np.allclose(rho, rho[::-1, ::-1], atol=1e-14)


def test_kernel_from_covariance_impulse():
    rho = np.zeros((5, 5))
    rho[2, 2] = 1.0
    k = rf.kernel_from_covariance(rho)
    expected = np.zeros((5, 5))
    expected[2, 2] = 1.0
    assert np.allclose(k.coefficients, expected, atol=1e-12)


def test_kernel_covariance_round_trip():
    # an autocorrelation-type kernel has a nonnegative spectrum, for which
    # the spectral square root recovers the covariance exactly
    g = rf.build_radial_kernel(
        rf.RadialKernelSpec(np.exp(-0.5 * np.arange(3) ** 2)), d=2)
    base = rf.covariance_of_kernel(g)
    coeff = base / np.sqrt((base ** 2).sum())
    k0 = rf.KernelGrid(d=2, halfwidth=base.shape[0] // 2, coefficients=coeff)

    rho0 = rf.covariance_of_kernel(k0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        k1 = rf.kernel_from_covariance(rho0)
    rho1 = rf.covariance_of_kernel(k1)
    off = rho1.shape[0] // 2 - rho0.shape[0] // 2
    sub = rho1[off:off + rho0.shape[0], off:off + rho0.shape[1]]
    assert np.abs(sub - rho0).max() <= 1e-6
    outside = rho1.copy()
    outside[off:off + rho0.shape[0], off:off + rho0.shape[1]] = 0.0
    assert np.abs(outside).max() <= 1e-6


def test_kernel_from_covariance_truncation_renormalizes():
    g = rf.build_radial_kernel(
        rf.RadialKernelSpec(np.exp(-0.3 * np.arange(4) ** 2)), d=1)
    rho = rf.covariance_of_kernel(g)
    k = rf.kernel_from_covariance(rho, out_halfwidth=2)
    assert k.halfwidth == 2
    assert abs(k.norm_sq - 1.0) <= 1e-10


def test_kernel_from_covariance_negative_spectrum_warns():
    rho = np.array([0.9, -0.2, 1.0, -0.2, 0.9])  # spectrum not nonnegative
    with pytest.warns(RuntimeWarning, match="negative"):
        rf.kernel_from_covariance(rho)


def test_kernel_from_covariance_rejects_nonpositive_center():
    rho = np.zeros((3, 3))
    with pytest.raises(rf.RandomFieldError):
        rf.kernel_from_covariance(rho)


def test_parametric_covariance_validation():
    good = np.full(13, 0.5)
    rf.ParametricCovariance(good.copy())
    bad = good.copy()
    bad[0] = 1.5
    with pytest.raises(rf.RandomFieldError):
        rf.ParametricCovariance(bad)
    bad = good.copy()
    bad[5] = 0.0
    with pytest.raises(rf.RandomFieldError):
        rf.ParametricCovariance(bad)


def test_parametric_covariance_is_one_at_origin_when_weights_consistent():
    values = np.array([0.3, 0.5, 0.5, 1.0, 0.2, 0.3, 1.1, 0.4, 0.5, 1.2,
                       1.5, 1.3, 1.1])
    pc = rf.ParametricCovariance(values)
    assert rf.eval_parametric_covariance(pc, 0.0) == pytest.approx(1.0)


def test_parametric_covariance_cardinal_sine_zero():
    values = np.array([1.0, 0.5, 0.5, np.pi, 1e-9, 0.3, 1.1, 0.4, 0.5, 1.2,
                       1.5, 1.3, 1.1])
    pc = rf.ParametricCovariance(values)
    assert abs(rf.eval_parametric_covariance(pc, 1.0)) < 1e-6


def test_parametric_covariance_against_mpmath_oracle():
    import mpmath

    values = np.array([0.45, 0.4, 0.6, 0.8, 0.35, 0.25, 1.1, 0.3, 0.5, 1.3,
                       1.4, 1.2, 1.1])
    pc = rf.ParametricCovariance(values)
    a = [mpmath.mpf(float(v)) for v in values]

    def oracle(h):
        h = mpmath.mpf(h)
        if h == 0:
            card1 = card2 = mpmath.mpf(1)
            e5 = e6 = e8 = mpmath.mpf(1)
        else:
            card1 = mpmath.sin(a[3] * h) / (a[3] * h)
            card2 = mpmath.sin(a[6] * h) / (a[6] * h)
            e5 = mpmath.e ** (-a[4] * h ** a[10])
            e6 = mpmath.e ** (-a[5] * h ** a[11])
            e8 = mpmath.e ** (-a[7] * h ** a[12])
        cauchy = (1 + (a[8] * h) ** 2) ** (-a[9])
        inner = a[1] * (a[2] * e6 + (1 - a[1]) * card2 * e8) + (1 - a[2]) * cauchy
        return a[0] * card1 * e5 + (1 - a[0]) * inner

    hs = np.arange(0.0, 101.0)
    ours = rf.eval_parametric_covariance(pc, hs)
    for h, v in zip(hs, ours):
        assert abs(v - float(oracle(h))) < 1e-12


def test_lowparam_kernel_near_impulse_limit():
    # very fast decay concentrates the covariance, hence the kernel, at 0
    values = np.array([0.5, 0.5, 0.5, 1.0, 50.0, 50.0, 1.0, 50.0, 50.0, 50.0,
                       2.0, 2.0, 2.0])
    k = rf.build_lowparam_kernel(rf.ParametricCovariance(values), halfwidth=4, d=2)
    center = k.coefficients[4, 4]
    assert center > 0.99
    assert abs(k.norm_sq - 1.0) <= 1e-10


def test_lowparam_kernel_normalization_gradient_vanishes():
    alpha = Tensor(np.full(13, 0.8), requires_grad=True)
    k = rf.lowparam_kernel_tensor(alpha, halfwidth=4, d=2, warn_negative=False)
    ad.backward(ad.sum_all(ad.square(k)))
    assert np.abs(alpha.grad).max() <= 1e-12


def test_lowparam_kernel_center_gradient_matches_fd():
    from _factories import LP_REFERENCE
    values = LP_REFERENCE.copy()
    alpha = Tensor(values, requires_grad=True)
    hw = 6
    k = rf.lowparam_kernel_tensor(alpha, hw, 2)
    center_idx = (2 * hw + 1) * hw + hw
    ad.backward(ad.take(k, np.array([center_idx]), out_shape=()))

    def center_value():
        kg = rf.build_lowparam_kernel(rf.ParametricCovariance(values), hw, 2)
        return kg.coefficients[hw, hw]

    fd = central_difference(center_value, values, (4,), 1e-6)
    assert relative_error(alpha.grad[4], fd) <= 1e-3


def test_white_noise_determinism_and_moments():
    n1 = rf.sample_white_noise((1000, 1000), seed=42)
    n2 = rf.sample_white_noise((1000, 1000), seed=42)
    assert np.array_equal(n1.values, n2.values)
    # 1e6 samples: 3 sigma of the mean is ~0.003, of the variance ~0.0042
    assert abs(n1.values.mean()) < 0.01
    assert abs(n1.values.var() - 1.0) < 0.01


def test_white_noise_streams_uncorrelated():
    a = rf.sample_white_noise((100000,), seed=1).values
    b = rf.sample_white_noise((100000,), seed=2).values
    r = np.corrcoef(a, b)[0, 1]
    assert abs(r) < 0.01


def test_white_noise_rejects_bad_extents():
    with pytest.raises(rf.RandomFieldError):
        rf.sample_white_noise((0, 4), seed=1)


def test_simulate_grf_impulse_returns_noise():
    k = rf.build_radial_kernel(rf.RadialKernelSpec(np.array([1.0])), d=2)
    noise = rf.sample_white_noise((12, 12), seed=9)
    out = rf.simulate_grf(k, noise)
    # FFT round trip leaves float-epsilon residue on the identity
    assert np.abs(out - noise.values).max() <= 1e-12


def test_simulate_grf_window_too_small():
    k = rf.build_radial_kernel(rf.RadialKernelSpec(np.ones(4)), d=2)
    noise = rf.sample_white_noise((6, 6), seed=0)
    with pytest.raises(rf.RandomFieldError):
        rf.simulate_grf(k, noise)


def test_simulate_grf_marginal_variance():
    k = rf.build_radial_kernel(
        rf.RadialKernelSpec(np.exp(-0.25 * np.arange(5) ** 2)), d=2)
    samples = []
    for s in range(60):
        noise = rf.sample_white_noise(rf.noise_extents_for((64, 64), k.halfwidth),
                                      rf.derive_seed(123, s))
        samples.append(rf.simulate_grf(k, noise))
    var = np.var(np.stack(samples))
    assert abs(var - 1.0) < 0.05


def test_simulate_grf_stationarity_across_subwindows():
    k = rf.build_radial_kernel(
        rf.RadialKernelSpec(np.exp(-0.4 * np.arange(4) ** 2)), d=2)
    acc = np.zeros((2,))
    for s in range(80):
        noise = rf.sample_white_noise(rf.noise_extents_for((64, 64), k.halfwidth),
                                      rf.derive_seed(77, s))
        fld = rf.simulate_grf(k, noise)
        acc += [fld[:32, :32].var(), fld[32:, 32:].var()]
    acc /= 80
    assert abs(acc[0] - acc[1]) < 0.05


def test_correlated_pair_identities():
    rng = np.random.default_rng(5)
    xt, yt, zt = (rng.standard_normal((16, 16)) for _ in range(3))
    xc, yc = rf.simulate_correlated_pair(xt, yt, zt, gamma=0.0)
    assert np.array_equal(xc, xt) and np.array_equal(yc, yt)
    xc, yc = rf.simulate_correlated_pair(xt, yt, zt, gamma=1.0)
    assert np.allclose(xc, zt) and np.allclose(yc, zt)
    xc, yc = rf.simulate_correlated_pair(xt, yt, zt, gamma=1.0, sign=-1)
    assert np.allclose(yc, -zt)
    with pytest.raises(rf.RandomFieldError):
        rf.simulate_correlated_pair(xt, yt, zt, gamma=1.2)


def test_correlated_pair_cross_covariance_and_variance():
    k = rf.build_radial_kernel(
        rf.RadialKernelSpec(np.exp(-0.4 * np.arange(3) ** 2)), d=2)

    def grf(seed):
        noise = rf.sample_white_noise(rf.noise_extents_for((64, 64), k.halfwidth), seed)
        return rf.simulate_grf(k, noise)

    cross = []
    var_x = []
    for s in range(60):
        xt, yt, zt = (grf(rf.derive_seed(11, s, j)) for j in range(3))
        xc, yc = rf.simulate_correlated_pair(xt, yt, zt, gamma=0.5)
        cross.append(np.mean(xc * yc))
        var_x.append(xc.var())
    assert abs(np.mean(cross) - 0.5) < 0.05
    assert abs(np.mean(var_x) - 1.0) < 0.05


def test_chi2_pair_laws():
    rng = np.random.default_rng(8)
    same = rng.standard_normal((32, 32))
    xp, yp = rf.simulate_chi2_pair([(same, same)])
    assert np.array_equal(xp, yp)

    k = rf.build_radial_kernel(
        rf.RadialKernelSpec(np.exp(-0.5 * np.arange(3) ** 2)), d=2)

    def grf(seed):
        noise = rf.sample_white_noise(rf.noise_extents_for((64, 64), k.halfwidth), seed)
        return rf.simulate_grf(k, noise)

    means = []
    variances = []
    corr0 = []
    for s in range(60):
        pairs = []
        for i in range(2):
            xt, yt, zt = (grf(rf.derive_seed(31, s, i, j)) for j in range(3))
            pairs.append(rf.simulate_correlated_pair(xt, yt, zt, gamma=0.0))
        xp, yp = rf.simulate_chi2_pair(pairs)
        means.append(xp.mean())
        variances.append(xp.var())
        corr0.append(np.corrcoef(xp.ravel(), yp.ravel())[0, 1])
    assert abs(np.mean(means) - 2.0) < 0.05
    assert abs(np.mean(variances) - 4.0) < 0.2
    assert abs(np.mean(corr0)) < 0.02
