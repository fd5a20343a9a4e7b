import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import erf

from dsffs.metrics import (
    AnnulusROI,
    BoxROI,
    EdgeNotFound,
    ROIError,
    mtf_task,
    noise_variance,
    nps,
    rmse,
    streak_energy,
)

PX = 0.2  # mm


def edge_image(angle_deg=5.0, sigma_b=0.5, contrast=1000.0, noise=0.0, n=200, seed=0, offset=0.0):
    """Gaussian-blurred straight edge through the image center, point sampled."""
    c = (np.arange(n) - (n - 1) / 2) * PX
    yy, xx = np.meshgrid(c, c, indexing="ij")
    a = math.radians(angle_deg)
    d = xx * math.cos(a) + yy * math.sin(a)
    if sigma_b > 0:
        img = contrast * 0.5 * (1 + erf(d / (sigma_b * math.sqrt(2))))
    else:
        img = contrast * (d > 0)
    img = img + offset
    if noise:
        img = img + noise * np.random.default_rng(seed).standard_normal(img.shape)
    return img


@pytest.mark.parametrize("angle", [5.0, 30.0, 80.0])
def test_gaussian_edge_mtf(angle):
    sigma_b = 0.5
    curve = mtf_task(edge_image(angle, sigma_b, noise=20.0), PX)
    sel = curve.frequency <= 1.0
    ref = np.exp(-2 * math.pi**2 * sigma_b**2 * curve.frequency[sel] ** 2)
    assert np.max(np.abs(curve.mtf[sel] - ref)) <= 0.02
    assert curve.mtf[0] == 1.0
    assert np.all(np.diff(curve.frequency) > 0)
    assert np.all(np.isfinite(curve.mtf)) and np.all(curve.mtf >= 0)


def test_step_edge_mtf_near_one():
    curve = mtf_task(edge_image(5.0, sigma_b=0.0), PX)
    fs = 1.0 / PX
    sel = curve.frequency <= 0.2 * fs
    assert np.all(curve.mtf[sel] >= 0.99)


def test_f10_matches_gaussian():
    sigma_b = 0.5
    curve = mtf_task(edge_image(10.0, sigma_b), PX)
    ref = math.sqrt(math.log(10) / (2 * math.pi**2 * sigma_b**2))
    assert curve.f10 == pytest.approx(ref, abs=0.01)


def test_mtf_offset_and_polarity_invariance():
    img = edge_image(20.0, 0.4, noise=5.0)
    base = mtf_task(img, PX)
    shifted = mtf_task(img + 300.0, PX)
    flipped = mtf_task(-img, PX)
    np.testing.assert_allclose(shifted.mtf, base.mtf, atol=1e-6)
    np.testing.assert_allclose(flipped.mtf, base.mtf, atol=1e-6)


def test_mtf_averages_stack():
    stack = np.stack([edge_image(15.0, 0.5, noise=20.0, seed=s) for s in range(4)])
    curve = mtf_task(stack, PX)
    assert curve.noise < 20.0


def test_mtf_circle_edge():
    n = 200
    c = (np.arange(n) - (n - 1) / 2) * PX
    yy, xx = np.meshgrid(c, c, indexing="ij")
    d = 12.0 - np.hypot(xx, yy)
    img = 1000 * 0.5 * (1 + erf(d / (0.5 * math.sqrt(2))))
    curve = mtf_task(img, PX, circle_center=((n - 1) / 2, (n - 1) / 2))
    sel = curve.frequency <= 1.0
    ref = np.exp(-2 * math.pi**2 * 0.25 * curve.frequency[sel] ** 2)
    assert np.max(np.abs(curve.mtf[sel] - ref)) <= 0.03


def test_mtf_rejects_flat_roi():
    img = np.random.default_rng(0).normal(0, 10, (100, 100))
    with pytest.raises(EdgeNotFound):
        mtf_task(img, PX)
    with pytest.raises(ROIError):
        mtf_task(edge_image(), PX, roi=BoxROI(0, 10, 190, 210))


# -- NPS ------------------------------------------------------------------------------


def test_nps_white_noise_integral():
    rng = np.random.default_rng(0)
    img = rng.normal(0, 20.0, (8, 128, 128))
    curve = nps(img, 0.5)
    assert curve.integral == pytest.approx(400.0, rel=0.05)
    flat = curve.power[1:]
    assert np.std(flat) / np.mean(flat) < 0.1
    assert curve.n_rois >= 16
    assert curve.axial_frequency[0] == 0.0


def test_nps_scaling_and_zero():
    rng = np.random.default_rng(1)
    img = rng.normal(0, 5.0, (2, 96, 96))
    a = nps(img, 0.5)
    b = nps(2 * img, 0.5)
    np.testing.assert_allclose(b.power, 4 * a.power, rtol=1e-12)
    zero = nps(np.zeros((2, 96, 96)), 0.5)
    assert not np.any(zero.power)


def test_nps_removes_planar_trend():
    rr, cc = np.mgrid[:96, :96]
    ramp = 3.0 * rr - 2.0 * cc + 50.0
    assert np.max(nps(ramp[None], 0.5).power) < 1e-18


def test_nps_too_few_rois():
    with pytest.raises(ROIError):
        nps(np.zeros((40, 40)), 0.5)
    with pytest.raises(ROIError):
        nps(np.zeros((16, 16)), 0.5)


# -- scalar metrics ---------------------------------------------------------------------


def test_constant_image_scalars():
    img = np.full((64, 64), 12.0)
    assert noise_variance(img, BoxROI(10, 30, 10, 30)) == 0.0
    assert streak_energy(img, AnnulusROI(31.5, 31.5, 10, 25)) == 0.0
    assert rmse(img, img) == 0.0


def test_radial_streak_energy_closed_form():
    n = 256
    rr, cc = np.mgrid[:n, :n]
    th = np.arctan2(rr - 127.5, cc - 127.5)
    img = 50.0 * np.cos(12 * th)
    assert streak_energy(img, AnnulusROI(127.5, 127.5, 60, 120)) == pytest.approx(1250.0, rel=0.02)


def test_streak_energy_ignores_rings():
    n = 128
    rr, cc = np.mgrid[:n, :n]
    rad = np.hypot(rr - 63.5, cc - 63.5)
    img = 100.0 * (rad > 40)
    assert streak_energy(img, AnnulusROI(63.5, 63.5, 20, 35)) == 0.0


def test_roi_errors():
    img = np.zeros((32, 32))
    with pytest.raises(ROIError):
        noise_variance(img, BoxROI(5, 5, 0, 10))
    with pytest.raises(ROIError):
        noise_variance(img, BoxROI(20, 40, 0, 10))
    with pytest.raises(ROIError):
        streak_energy(img, AnnulusROI(16, 16, 10, 20))
    with pytest.raises(ROIError):
        streak_energy(img, AnnulusROI(16, 16, 8, 8))
    with pytest.raises(ValueError):
        rmse(img, np.zeros((4, 4)))
    with pytest.raises(ROIError):
        rmse(img, img, mask=np.zeros_like(img, dtype=bool))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), s=st.floats(0.1, 100.0))
def test_noise_variance_scales_quadratically(seed, s):
    img = np.random.default_rng(seed).standard_normal((20, 20))
    roi = BoxROI(2, 18, 3, 17)
    assert noise_variance(s * img, roi) == pytest.approx(s * s * noise_variance(img, roi), rel=1e-9)
