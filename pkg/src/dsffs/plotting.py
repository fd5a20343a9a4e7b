"""Figures written to files (Agg backend, no display needed)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# without the Software tag the PNG bytes depend only on the plotted data
_PNG_META = {"Software": None}


def _save(fig, path) -> None:
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def plot_convergence(history: list[dict], path, mu_water: float = 0.02) -> None:
    it = [h["iteration"] for h in history]
    dis = [h["max_disagreement"] * 1000.0 / mu_water for h in history]
    cost = [h["cost"] for h in history]
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 3.5))
    a1.semilogy(it, np.maximum(dis, 1e-12), marker=".")
    a1.set_xlabel("outer iteration")
    a1.set_ylabel("max agent disagreement (HU)")
    a2.plot(it, cost, marker=".")
    a2.set_xlabel("outer iteration")
    a2.set_ylabel("cost")
    fig.tight_layout()
    _save(fig, path)


def plot_mtf(freq, mtf, f10, path, f_max: float | None = None) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    sel = freq <= (f_max if f_max is not None else freq[-1])
    ax.plot(freq[sel], mtf[sel])
    ax.axhline(0.1, color="0.6", lw=0.8, ls="--")
    if np.isfinite(f10):
        ax.axvline(f10, color="0.6", lw=0.8, ls=":")
    ax.set_xlabel("spatial frequency (mm$^{-1}$)")
    ax.set_ylabel("MTF")
    ax.set_ylim(0, 1.05)
    fig.tight_layout()
    _save(fig, path)


def plot_nps(freq, power, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(freq, power)
    ax.set_xlabel("radial frequency (mm$^{-1}$)")
    ax.set_ylabel("NPS (HU$^2$ mm$^2$)")
    fig.tight_layout()
    _save(fig, path)


def plot_coverage(report, path) -> None:
    fig, ax = plt.subplots(figsize=(7, 2.2))
    colors = ["tab:blue", "tab:orange"]
    for p, ivs in enumerate(report.per_pair):
        for lo, hi in ivs:
            ax.plot([lo, hi], [p, p], color=colors[p % 2], lw=6, solid_capstyle="butt")
    for lo, hi in report.gaps:
        ax.axvspan(lo, hi, color="tab:red", alpha=0.25, lw=0)
    ax.set_yticks(range(len(report.per_pair)))
    ax.set_yticklabels([f"pair {p + 1}" for p in range(len(report.per_pair))])
    ax.set_ylim(-0.7, len(report.per_pair) - 0.3)
    ax.set_xlabel("z (mm)")
    fig.tight_layout()
    _save(fig, path)


def plot_slice(image, path, window: float, level: float, pixel_size: float = 1.0) -> None:
    img = np.asarray(image, dtype=float)
    h, w = img.shape
    fig, ax = plt.subplots(figsize=(4.5, 4.5 * h / w))
    ext = (-w * pixel_size / 2, w * pixel_size / 2, h * pixel_size / 2, -h * pixel_size / 2)
    ax.imshow(img, cmap="gray", vmin=level - window / 2, vmax=level + window / 2, extent=ext)
    ax.set_xlabel("x (mm)")
    ax.set_ylabel("y (mm)")
    fig.tight_layout()
    _save(fig, path)
