"""Image-quality metrics: task MTF from an edge, NPS, noise, RMSE, streaks.

Images are indexed ``[row, col]`` with row ~ y and col ~ x; pixel sizes
are in mm and spatial frequencies in mm^-1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ROIError(ValueError):
    """ROI is empty or does not fit the image."""


class EdgeNotFound(ValueError):
    pass


@dataclass(frozen=True)
class BoxROI:
    """Half-open pixel box ``[r0, r1) x [c0, c1)``."""

    r0: int
    r1: int
    c0: int
    c1: int

    def check(self, shape) -> None:
        if self.r1 <= self.r0 or self.c1 <= self.c0:
            raise ROIError(f"empty ROI {self}")
        if self.r0 < 0 or self.c0 < 0 or self.r1 > shape[-2] or self.c1 > shape[-1]:
            raise ROIError(f"ROI {self} outside image of shape {tuple(shape[-2:])}")

    def crop(self, image):
        self.check(np.shape(image))
        return np.asarray(image)[..., self.r0 : self.r1, self.c0 : self.c1]


@dataclass(frozen=True)
class AnnulusROI:
    """Ring between ``r_in`` and ``r_out`` (pixels) around ``(row, col)``."""

    row: float
    col: float
    r_in: float
    r_out: float

    def mask(self, shape) -> np.ndarray:
        if not 0 <= self.r_in < self.r_out:
            raise ROIError(f"empty annulus {self}")
        rows, cols = shape[-2:]
        if (
            self.row - self.r_out < -0.5
            or self.col - self.r_out < -0.5
            or self.row + self.r_out > rows - 0.5
            or self.col + self.r_out > cols - 0.5
        ):
            raise ROIError(f"annulus {self} outside image of shape {(rows, cols)}")
        rr, cc = np.mgrid[:rows, :cols]
        rad = np.hypot(rr - self.row, cc - self.col)
        m = (rad >= self.r_in) & (rad < self.r_out)
        if not m.any():
            raise ROIError(f"annulus {self} selects no pixels")
        return m


@dataclass
class MTFCurve:
    frequency: np.ndarray
    mtf: np.ndarray
    f10: float
    esf_distance: np.ndarray
    esf: np.ndarray
    contrast: float
    noise: float


@dataclass
class NPSCurve:
    """Noise power spectrum, normalized so that the 2-D integral equals the ROI variance.

    ``power`` is in (image unit)^2 mm^2. ``axial_cut`` is the 2-D spectrum
    along the column-frequency axis (zero row frequency).
    """

    frequency: np.ndarray
    power: np.ndarray
    nps2d: np.ndarray
    fx: np.ndarray
    fy: np.ndarray
    axial_frequency: np.ndarray
    axial_cut: np.ndarray
    roi_size: int
    n_rois: int

    @property
    def integral(self) -> float:
        dfx = self.fx[1] - self.fx[0]
        dfy = self.fy[1] - self.fy[0]
        return float(self.nps2d.sum() * dfx * dfy)


def _average_stack(images) -> np.ndarray:
    a = np.asarray(images, dtype=float)
    if a.ndim == 3:
        a = a.mean(axis=0)
    if a.ndim != 2:
        raise ValueError("expected a 2-D image or a stack of them")
    return a


def _edge_frame(img: np.ndarray, circle_center=None):
    """Signed distance (pixels) of every pixel to the edge, positive on the bright side."""
    gr, gc = np.gradient(img)
    mag = np.hypot(gr, gc)
    if not np.any(mag > 0):
        raise EdgeNotFound("image has no gradient")
    rows, cols = np.mgrid[: img.shape[0], : img.shape[1]].astype(float)
    if circle_center is not None:
        r0, c0 = circle_center
        rad = np.hypot(rows - r0, cols - c0)
        wts = mag**2
        radius = float((wts * rad).sum() / wts.sum())
        dist = rad - radius
        inside_brighter = img[dist < 0].mean() > img[dist > 0].mean() if np.any(dist > 0) else True
        return -dist if inside_brighter else dist
    # straight edge: locate it in every line across it, then fit a line
    transpose = np.abs(gr).sum() > np.abs(gc).sum()
    work = img.T if transpose else img
    deriv = np.abs(np.diff(work, axis=1))
    peak = deriv.max(axis=1)
    lines = np.nonzero(peak >= 0.5 * peak.max())[0]
    if lines.size < 2:
        raise EdgeNotFound("edge spans fewer than two pixel lines")
    pos = np.empty(lines.size)
    for k, r in enumerate(lines):
        c = int(np.argmax(deriv[r]))
        lo, hi = max(c - 5, 0), min(c + 6, deriv.shape[1])
        w = deriv[r, lo:hi]
        pos[k] = float((w * (np.arange(lo, hi) + 0.5)).sum() / w.sum())
    b, a = np.polyfit(lines.astype(float), pos, 1)
    wr, wc = (cols, rows) if transpose else (rows, cols)
    dist = (wc - a - b * wr) / np.hypot(1.0, b)
    if img[dist > 0].mean() < img[dist < 0].mean():
        dist = -dist
    return dist


def mtf_task(
    images,
    pixel_size: float,
    roi: BoxROI | None = None,
    bin_width: float = 0.1,
    circle_center=None,
    half_window: float | None = None,
    min_cnr: float = 5.0,
) -> MTFCurve:
    """Task MTF from an oversampled edge-spread function.

    ``images`` (2-D or a stack averaged to 2-D) must hold a single
    high-contrast edge inside ``roi``: a straight edge by default, or a
    circular one around ``circle_center`` (row, col in ROI pixels).
    Distances are binned at ``bin_width`` pixels; the LSF is Hann-windowed
    over ``half_window`` pixels (default 40, less in small ROIs) on each side
    of the edge before the Fourier transform.
    """
    img = _average_stack(images)
    if roi is not None:
        img = roi.crop(img)
    img = img.astype(float)
    dist = _edge_frame(img, circle_center)
    if half_window is None:
        # a longer LSF tail only adds noise to the high-frequency MTF
        half_window = min(0.45 * min(img.shape), 40.0)
    sel = np.abs(dist) <= half_window
    d, v = dist[sel], img[sel]

    far = np.abs(d) > 0.6 * half_window
    hi, lo = v[far & (d > 0)], v[far & (d < 0)]
    if hi.size < 2 or lo.size < 2:
        raise EdgeNotFound("ROI too small to measure edge contrast")
    contrast = float(hi.mean() - lo.mean())
    noise = float(np.sqrt(0.5 * (hi.var(ddof=1) + lo.var(ddof=1))))
    if not abs(contrast) >= min_cnr * noise or contrast == 0.0:
        raise EdgeNotFound(f"edge contrast {contrast:.3g} below {min_cnr}x noise {noise:.3g}")

    n_bins = int(np.ceil(half_window / bin_width))
    centers = np.arange(-n_bins, n_bins + 1) * bin_width
    # rint is odd-symmetric, so flipping the edge polarity mirrors the bins exactly
    idx = np.rint(d / bin_width).astype(int) + n_bins
    ok = (idx >= 0) & (idx < centers.size)
    sums = np.bincount(idx[ok], weights=v[ok], minlength=centers.size)
    counts = np.bincount(idx[ok], minlength=centers.size)
    filled = counts > 0
    if filled.sum() < 4:
        raise EdgeNotFound("too few samples along the edge normal")
    esf = np.interp(centers, centers[filled], sums[filled] / counts[filled])

    lsf = np.gradient(esf, bin_width)
    lsf *= np.hanning(lsf.size)
    n_fft = max(4096, 1 << int(np.ceil(np.log2(lsf.size))))
    spec = np.abs(np.fft.rfft(lsf, n_fft))
    if spec[0] == 0.0:
        raise EdgeNotFound("line-spread function integrates to zero")
    mtf = spec / spec[0]
    freq = np.fft.rfftfreq(n_fft, d=bin_width * pixel_size)
    return MTFCurve(freq, mtf, _crossing(freq, mtf, 0.1), centers * pixel_size, esf, abs(contrast), noise)


def _crossing(freq, values, level) -> float:
    below = np.nonzero(values < level)[0]
    if below.size == 0 or below[0] == 0:
        return float("nan")
    i = below[0]
    f0, f1, v0, v1 = freq[i - 1], freq[i], values[i - 1], values[i]
    return float(f0 + (v0 - level) * (f1 - f0) / (v0 - v1))


def _detrend_plane(roi: np.ndarray) -> np.ndarray:
    n_r, n_c = roi.shape
    rr, cc = np.mgrid[:n_r, :n_c]
    design = np.column_stack([np.ones(roi.size), rr.ravel(), cc.ravel()])
    coef, *_ = np.linalg.lstsq(design, roi.ravel(), rcond=None)
    return roi - (design @ coef).reshape(roi.shape)


def nps(
    images,
    pixel_size: float,
    roi_size: int = 32,
    stride: int | None = None,
    region: BoxROI | None = None,
    min_rois: int = 16,
) -> NPSCurve:
    """Ensemble NPS over overlapping square ROIs of noise-only images.

    Each ROI is detrended by its least-squares plane. The normalization
    ``dx*dy/(Nx*Ny) |FFT|^2`` makes the 2-D integral equal the ROI variance.
    """
    stack = np.asarray(images, dtype=float)
    if stack.ndim == 2:
        stack = stack[None]
    if region is not None:
        stack = region.crop(stack)
    stride = stride or max(1, roi_size // 2)
    _, n_r, n_c = stack.shape
    if roi_size > min(n_r, n_c):
        raise ROIError(f"ROI size {roi_size} exceeds image {n_r}x{n_c}")
    starts_r = range(0, n_r - roi_size + 1, stride)
    starts_c = range(0, n_c - roi_size + 1, stride)
    n_rois = stack.shape[0] * len(starts_r) * len(starts_c)
    if n_rois < min_rois:
        raise ROIError(f"only {n_rois} ROIs, need at least {min_rois}")
    acc = np.zeros((roi_size, roi_size))
    for sl in stack:
        for r in starts_r:
            for c in starts_c:
                patch = _detrend_plane(sl[r : r + roi_size, c : c + roi_size])
                acc += np.abs(np.fft.fft2(patch)) ** 2
    nps2d = np.fft.fftshift(acc / n_rois) * pixel_size**2 / (roi_size * roi_size)
    f = np.fft.fftshift(np.fft.fftfreq(roi_size, d=pixel_size))
    fr = np.hypot(*np.meshgrid(f, f, indexing="ij"))
    df = 1.0 / (roi_size * pixel_size)
    n_bins = roi_size // 2 + 1
    ring = np.rint(fr / df).astype(int)
    sel = ring < n_bins
    counts = np.bincount(ring[sel], minlength=n_bins)
    power = np.bincount(ring[sel], weights=nps2d[sel], minlength=n_bins) / np.maximum(counts, 1)
    zero = roi_size // 2
    axial_f = f[zero:]
    axial = nps2d[zero, zero:]
    return NPSCurve(np.arange(n_bins) * df, power, nps2d, f, f, axial_f, axial, roi_size, n_rois)


def noise_variance(image, roi: BoxROI) -> float:
    vals = roi.crop(_average_stack(image) if np.ndim(image) == 3 else np.asarray(image, dtype=float))
    if vals.size < 2:
        raise ROIError("noise variance needs at least two pixels")
    return float(np.var(vals, ddof=1))


def rmse(a, b, mask=None) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    d = a - b
    if mask is not None:
        d = d[np.asarray(mask, dtype=bool)]
        if d.size == 0:
            raise ROIError("empty mask")
    return float(np.sqrt(np.mean(d * d)))


def streak_energy(image, annulus: AnnulusROI, n_radial_bins: int | None = None) -> float:
    """Variance over an annulus after subtracting the mean radial profile.

    Rotationally symmetric structure (rings of the object itself) cancels;
    what remains is angular variation such as streaks.
    """
    img = np.asarray(image, dtype=float)
    if img.ndim != 2:
        raise ValueError("streak energy needs a 2-D image")
    m = annulus.mask(img.shape)
    rr, cc = np.nonzero(m)
    rad = np.hypot(rr - annulus.row, cc - annulus.col)
    vals = img[m]
    n_bins = n_radial_bins or max(1, int(np.ceil(annulus.r_out - annulus.r_in)))
    b = np.minimum(((rad - annulus.r_in) / (annulus.r_out - annulus.r_in) * n_bins).astype(int), n_bins - 1)
    counts = np.bincount(b, minlength=n_bins)
    means = np.bincount(b, weights=vals, minlength=n_bins) / np.maximum(counts, 1)
    resid = vals - means[b]
    return float(np.mean(resid * resid))
