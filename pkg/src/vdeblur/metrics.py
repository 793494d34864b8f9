"""Image quality metrics: PSNR and windowed SSIM.

Both operate on RGB frames in [0,1]. SSIM follows the standard recipe:
luma conversion, 11x11 Gaussian window with sigma 1.5, stability constants
from K1=0.01 and K2=0.03 at unit dynamic range, mean over valid windows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

__all__ = ["psnr", "ssim", "MetricReport"]

_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)
_C1 = 1e-4   # (0.01 * 1.0)^2
_C2 = 9e-4   # (0.03 * 1.0)^2


def _as_array(x) -> np.ndarray:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    return arr.astype(np.float64)


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB with MAX=1; +inf for identical inputs."""
    arr_a, arr_b = _as_array(a), _as_array(b)
    if arr_a.shape != arr_b.shape:
        raise ValueError(f"shape mismatch: {arr_a.shape} vs {arr_b.shape}")
    mse = float(np.mean((arr_a - arr_b) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = size // 2
    xs = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(xs ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b) -> float:
    """Structural similarity on luma, mean over all valid 11x11 windows."""
    arr_a, arr_b = _as_array(a), _as_array(b)
    if arr_a.shape != arr_b.shape:
        raise ValueError(f"shape mismatch: {arr_a.shape} vs {arr_b.shape}")
    if arr_a.ndim == 3:
        ya = np.tensordot(_LUMA, arr_a, axes=(0, 0))
        yb = np.tensordot(_LUMA, arr_b, axes=(0, 0))
    else:
        ya, yb = arr_a, arr_b
    h, w = ya.shape
    if h < 11 or w < 11:
        raise ValueError(f"image {h}x{w} smaller than the 11x11 SSIM window")

    kern = _gaussian_window()
    win_a = np.lib.stride_tricks.sliding_window_view(ya, (11, 11))
    win_b = np.lib.stride_tricks.sliding_window_view(yb, (11, 11))

    def wmean(win):
        return np.tensordot(win, kern, axes=([2, 3], [0, 1]))

    mu_a = wmean(win_a)
    mu_b = wmean(win_b)
    e_aa = wmean(win_a * win_a)
    e_bb = wmean(win_b * win_b)
    e_ab = wmean(win_a * win_b)
    var_a = e_aa - mu_a * mu_a
    var_b = e_bb - mu_b * mu_b
    cov = e_ab - mu_a * mu_b

    num = (2.0 * mu_a * mu_b + _C1) * (2.0 * cov + _C2)
    den = (mu_a * mu_a + mu_b * mu_b + _C1) * (var_a + var_b + _C2)
    return float(np.mean(num / den))


@dataclass
class MetricReport:
    """Per-frame PSNR/SSIM rows plus their arithmetic means."""

    per_frame: list
    mean_psnr: float
    mean_ssim: float

    @classmethod
    def from_pairs(cls, frame_ids, preds, gts) -> "MetricReport":
        if not (len(frame_ids) == len(preds) == len(gts)):
            raise ValueError("frame id / prediction / ground-truth counts differ")
        rows = [(fid, psnr(p, g), ssim(p, g)) for fid, p, g in zip(frame_ids, preds, gts)]
        mean_p = float(np.mean([r[1] for r in rows]))
        mean_s = float(np.mean([r[2] for r in rows]))
        return cls(per_frame=rows, mean_psnr=mean_p, mean_ssim=mean_s)

    def to_csv(self) -> str:
        lines = ["frame_id,psnr_db,ssim"]
        for fid, p, s in self.per_frame:
            lines.append(f"{fid},{p!r},{s!r}")
        lines.append(f"mean,{self.mean_psnr!r},{self.mean_ssim!r}")
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_csv())
