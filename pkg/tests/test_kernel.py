"""Smoothing-kernel contract: values, support, normalization, derivatives."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sphax.sph import kernel_dwdh, kernel_eval


def test_support_boundary():
    w, dw = kernel_eval(1.0, 1.0)
    assert w == 0.0 and dw == 0.0
    w, dw = kernel_eval(2.5, 2.0)
    assert w == 0.0 and dw == 0.0


def test_centre_value():
    h = 0.37
    w, dw = kernel_eval(0.0, h)
    assert w == pytest.approx(8.0 / (math.pi * h**3), rel=1e-14)
    assert dw == 0.0


def test_rejects_bad_h():
    with pytest.raises(ValueError):
        kernel_eval(0.1, 0.0)
    with pytest.raises(ValueError):
        kernel_dwdh(0.1, -1.0)


@pytest.mark.parametrize("h", [1e-2, 1e-1, 1.0, 1e1])
def test_normalization_quadrature(h):
    # Radial quadrature of W over the support sphere.
    r = np.linspace(0.0, h, 20001)
    w, _ = kernel_eval(r, h)
    integral = np.trapezoid(w * 4.0 * math.pi * r**2, r)
    assert integral == pytest.approx(1.0, abs=1e-6)


def test_normalization_monte_carlo(rng):
    # Volume-uniform samples of the support sphere.
    h = 0.8
    n = 4_000_000
    r = h * np.cbrt(rng.uniform(0.0, 1.0, n))
    w, _ = kernel_eval(r, h)
    volume = 4.0 / 3.0 * math.pi * h**3
    integral = w.mean() * volume
    assert integral == pytest.approx(1.0, abs=1e-3)


def test_gradient_matches_finite_differences():
    h = 1.7
    eps = 1e-7 * h
    r = np.linspace(0.05 * h, 0.95 * h, 997)
    _, dw = kernel_eval(r, h)
    wp, _ = kernel_eval(r + eps, h)
    wm, _ = kernel_eval(r - eps, h)
    fd = (wp - wm) / (2.0 * eps)
    assert np.max(np.abs(fd - dw) / np.abs(dw)) < 1e-6


def test_dwdh_matches_finite_differences():
    h = 0.9
    eps = 1e-7 * h
    r = np.linspace(0.0, 0.95 * h, 499)
    dwdh = kernel_dwdh(r, h)
    wp, _ = kernel_eval(r, h + eps)
    wm, _ = kernel_eval(r, h - eps)
    fd = (wp - wm) / (2.0 * eps)
    scale = np.maximum(np.abs(dwdh), 1e-3 / h**4)
    assert np.max(np.abs(fd - dwdh) / scale) < 1e-5


@settings(max_examples=200, deadline=None)
@given(q=st.floats(0.0, 2.0), h=st.floats(1e-3, 1e3))
def test_kernel_properties(q, h):
    r = q * h
    w, dw = kernel_eval(r, h)
    assert w >= 0.0
    if r >= h:
        assert w == 0.0 and dw == 0.0
    else:
        assert dw <= 0.0  # monotone decreasing
    # continuity probe
    w2, _ = kernel_eval(min(r + 1e-9 * h, 2 * h), h)
    assert abs(w2 - w) < 1e-6 * (8.0 / (math.pi * h**3)) + 1e-12
