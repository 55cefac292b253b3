"""Shared builders and numerical helpers for the test suite."""

import numpy as np

import microtwin.model as mo
import microtwin.random_fields as rf


def hp_theta(L=4, gamma=0.3, sigma_x=1.0, sigma_y=0.8, lambda_x=2.2,
             lambda_y=1.8, decay=0.4, sign=1):
    alpha = np.exp(-decay * np.arange(L + 1) ** 2)
    specs = {n: rf.RadialKernelSpec(alpha.copy()) for n in mo.FIELD_NAMES}
    return mo.ModelParams(kind=mo.HIGH, field_specs=specs, gamma=gamma,
                          sigma_x=sigma_x, sigma_y=sigma_y,
                          lambda_x=lambda_x, lambda_y=lambda_y, sign=sign)


LP_REFERENCE = np.array([0.45, 0.4, 0.6, 0.8, 0.35, 0.25, 1.1, 0.3, 0.5,
                         1.3, 1.4, 1.2, 1.1])


def lp_theta(halfwidth=8, gamma=0.3, sigma_x=1.0, sigma_y=0.9, lambda_x=2.6,
             lambda_y=2.0):
    specs = {n: rf.ParametricCovariance(LP_REFERENCE.copy())
             for n in mo.FIELD_NAMES}
    return mo.ModelParams(kind=mo.LOW, field_specs=specs, gamma=gamma,
                          sigma_x=sigma_x, sigma_y=sigma_y, lambda_x=lambda_x,
                          lambda_y=lambda_y, kernel_halfwidth=halfwidth)


def central_difference(fn, array, index, step):
    old = array[index]
    array[index] = old + step
    up = fn()
    array[index] = old - step
    down = fn()
    array[index] = old
    return (up - down) / (2.0 * step)


def relative_error(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)
