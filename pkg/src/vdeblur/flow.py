"""Classical optical flow and frame warping.

Motion between neighboring frames is estimated with coarse-to-fine
Lucas-Kanade on luma images and applied through a differentiable bilinear
warp. The flow solver is plain numpy/scipy; only the warp participates in
the autodiff tape, and only through the image argument (the flow is a
constant input to the network).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from .tensor import Tensor

__all__ = [
    "FlowField",
    "estimate_flow",
    "warp",
    "align_sequence",
    "read_flo",
    "write_flo",
]

_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)


@dataclass
class FlowField:
    """Dense per-pixel displacement: u_x horizontal (columns), u_y vertical (rows)."""

    u_x: np.ndarray
    u_y: np.ndarray

    def __post_init__(self):
        self.u_x = np.asarray(self.u_x, dtype=np.float32)
        self.u_y = np.asarray(self.u_y, dtype=np.float32)
        if self.u_x.shape != self.u_y.shape or self.u_x.ndim != 2:
            raise ValueError("flow components must be two equal-shape 2D arrays")
        if not (np.isfinite(self.u_x).all() and np.isfinite(self.u_y).all()):
            raise ValueError("flow contains non-finite values")

    @property
    def shape(self) -> tuple[int, int]:
        return self.u_x.shape

    @classmethod
    def zero(cls, h: int, w: int) -> "FlowField":
        return cls(np.zeros((h, w), np.float32), np.zeros((h, w), np.float32))


def _to_luma(frame) -> np.ndarray:
    arr = frame.data if isinstance(frame, Tensor) else np.asarray(frame)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected a (3,H,W) frame, got {arr.shape}")
    return np.tensordot(_LUMA, arr.astype(np.float64), axes=(0, 0))


def _downsample2(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    img = img[: h // 2 * 2, : w // 2 * 2]
    return img.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def _upsample2(field: np.ndarray, th: int, tw: int) -> np.ndarray:
    up = np.repeat(np.repeat(field, 2, axis=0), 2, axis=1)
    if up.shape[0] < th:
        up = np.pad(up, ((0, th - up.shape[0]), (0, 0)), mode="edge")
    if up.shape[1] < tw:
        up = np.pad(up, ((0, 0), (0, tw - up.shape[1])), mode="edge")
    return up[:th, :tw]


def _sample_bilinear(img: np.ndarray, sr: np.ndarray, sc: np.ndarray) -> np.ndarray:
    """Sample a 2D image at float coords (sr, sc), clamped to the border."""
    h, w = img.shape
    sr = np.clip(sr, 0.0, h - 1.0)
    sc = np.clip(sc, 0.0, w - 1.0)
    r0 = np.floor(sr).astype(np.intp)
    c0 = np.floor(sc).astype(np.intp)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    wr = sr - r0
    wc = sc - c0
    return ((1 - wr) * (1 - wc) * img[r0, c0] + (1 - wr) * wc * img[r0, c1]
            + wr * (1 - wc) * img[r1, c0] + wr * wc * img[r1, c1])


def estimate_flow(ref, nbr, levels: int = 3, iters: int = 5,
                  window: int = 7) -> FlowField:
    """Coarse-to-fine Lucas-Kanade flow from the reference toward a neighbor.

    Solves for the field u such that nbr(x + u_x, y + u_y) matches ref(x, y),
    so ``warp(nbr, flow)`` approximates ``ref``. Constant or identical images
    produce the exact zero field.
    """
    ref_l = _to_luma(ref)
    nbr_l = _to_luma(nbr)
    if ref_l.shape != nbr_l.shape:
        raise ValueError("frames must share spatial dims")
    h, w = ref_l.shape
    if min(h, w) < 2 ** levels:
        raise ValueError(f"image {h}x{w} too small for {levels} pyramid levels")
    if window % 2 == 0:
        raise ValueError("window must be odd")

    pyr_ref = [ref_l]
    pyr_nbr = [nbr_l]
    for _ in range(levels - 1):
        pyr_ref.append(_downsample2(pyr_ref[-1]))
        pyr_nbr.append(_downsample2(pyr_nbr[-1]))

    u = np.zeros_like(pyr_ref[-1])
    v = np.zeros_like(pyr_ref[-1])
    for lvl in range(levels - 1, -1, -1):
        r_img, n_img = pyr_ref[lvl], pyr_nbr[lvl]
        lh, lw = r_img.shape
        if u.shape != (lh, lw):
            u = _upsample2(u * 2.0, lh, lw)
            v = _upsample2(v * 2.0, lh, lw)
        rows, cols = np.mgrid[0:lh, 0:lw].astype(np.float64)
        for _ in range(iters):
            warped = _sample_bilinear(n_img, rows + v, cols + u)
            ix = np.gradient(warped, axis=1)
            iy = np.gradient(warped, axis=0)
            it = warped - r_img
            sxx = uniform_filter(ix * ix, window, mode="nearest")
            sxy = uniform_filter(ix * iy, window, mode="nearest")
            syy = uniform_filter(iy * iy, window, mode="nearest")
            sxt = uniform_filter(ix * it, window, mode="nearest")
            syt = uniform_filter(iy * it, window, mode="nearest")
            det = sxx * syy - sxy * sxy
            ok = det > 1e-12
            safe = np.where(ok, det, 1.0)
            du = np.where(ok, (-syy * sxt + sxy * syt) / safe, 0.0)
            dv = np.where(ok, (sxy * sxt - sxx * syt) / safe, 0.0)
            u = u + np.clip(du, -window, window)
            v = v + np.clip(dv, -window, window)
    return FlowField(u.astype(np.float32), v.astype(np.float32))


def warp(image: Tensor, flow: FlowField) -> Tensor:
    """Bilinear backward warp: output(x,y) samples image at (x+u_x, y+u_y).

    Sample coordinates are clamped to the border. Differentiable with respect
    to the image; the flow is treated as a constant. Zero flow reproduces the
    input bit for bit.
    """
    if not isinstance(image, Tensor):
        image = Tensor(image)
    c, h, w = image.data.shape
    if flow.shape != (h, w):
        raise ValueError(f"flow dims {flow.shape} do not match image {(h, w)}")

    dtype = image.data.dtype
    rows, cols = np.mgrid[0:h, 0:w]
    sr = np.clip(rows + flow.u_y.astype(dtype), 0, h - 1)
    sc = np.clip(cols + flow.u_x.astype(dtype), 0, w - 1)
    r0 = np.floor(sr).astype(np.intp)
    c0 = np.floor(sc).astype(np.intp)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    wr = (sr - r0).astype(dtype)
    wc = (sc - c0).astype(dtype)

    w00 = (1 - wr) * (1 - wc)
    w01 = (1 - wr) * wc
    w10 = wr * (1 - wc)
    w11 = wr * wc
    img = image.data
    data = (w00 * img[:, r0, c0] + w01 * img[:, r0, c1]
            + w10 * img[:, r1, c0] + w11 * img[:, r1, c1])

    corners = ((r0, c0, w00), (r0, c1, w01), (r1, c0, w10), (r1, c1, w11))

    def backward(g):
        dimg = np.zeros((c, h * w), dtype=g.dtype)
        ch_idx = np.arange(c)[:, None]
        for ri, ci, wt in corners:
            flat = (ri * w + ci).reshape(-1)[None, :]
            np.add.at(dimg, (ch_idx, flat), (g * wt).reshape(c, -1))
        from .tensor import _accumulate
        _accumulate(image, dimg.reshape(c, h, w))

    return Tensor._make(data.astype(dtype, copy=False), (image,), backward)


def align_sequence(frames, mode: str = "classical", flow_files=None,
                   levels: int = 3, iters: int = 5, window: int = 7):
    """Warp the two neighbors of a frame triple toward the middle frame.

    mode "off" returns the inputs untouched, "classical" estimates flow with
    the built-in solver, "file" reads precomputed flow from ``flow_files``
    (a pair of paths, previous then next).
    """
    if len(frames) != 3:
        raise ValueError("align_sequence expects exactly three frames")
    frames = [f if isinstance(f, Tensor) else Tensor(f) for f in frames]
    if mode == "off":
        return list(frames)
    prev_f, ref, next_f = frames
    if mode == "classical":
        flow_prev = estimate_flow(ref, prev_f, levels, iters, window)
        flow_next = estimate_flow(ref, next_f, levels, iters, window)
    elif mode == "file":
        if not flow_files or len(flow_files) != 2:
            raise ValueError("file mode needs two flow file paths (prev, next)")
        flow_prev = read_flo(flow_files[0])
        flow_next = read_flo(flow_files[1])
    else:
        raise ValueError(f"unknown align mode: {mode!r}")
    return [warp(prev_f, flow_prev), ref, warp(next_f, flow_next)]


_FLO_TAG = 202021.25


def write_flo(path, flow: FlowField) -> None:
    """Middlebury flow format: f32 tag, i32 width, i32 height, interleaved
    (u_x, u_y) f32 pairs in row-major order, all little-endian."""
    h, w = flow.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<fii", _FLO_TAG, w, h))
        inter = np.stack([flow.u_x, flow.u_y], axis=-1).astype("<f4")
        fh.write(inter.tobytes())


def read_flo(path) -> FlowField:
    with open(path, "rb") as fh:
        head = fh.read(12)
        if len(head) < 12:
            raise ValueError(f"{path}: truncated flow file")
        tag, w, h = struct.unpack("<fii", head)
        if abs(tag - _FLO_TAG) > 1e-3:
            raise ValueError(f"{path}: bad flow file tag {tag}")
        data = np.frombuffer(fh.read(8 * h * w), dtype="<f4")
        if data.size != 2 * h * w:
            raise ValueError(f"{path}: truncated flow payload")
    pairs = data.reshape(h, w, 2)
    return FlowField(pairs[..., 0].copy(), pairs[..., 1].copy())
