"""Blur synthesis and the procedural toy dataset.

Blurry frames are made the way high-frame-rate capture rigs make them: a
long run of sharp frames is averaged into one blurry frame, and the sharp
frame at the window center becomes its ground truth. The timeline is then
subsampled so consecutive blurry frames are separated by a random stride.

The toy generator renders small clips of rigid shapes drifting over a
textured background, enough structure for flow, matching, and deblurring
to have signal at desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .tensor import Tensor

__all__ = [
    "VideoClip",
    "synthesize_blur",
    "subsample_centers",
    "make_toy_dataset",
    "render_toy_clip",
    "make_blur_sharp",
    "write_dataset",
    "load_dataset",
    "load_frames",
    "save_frame",
]


@dataclass
class VideoClip:
    """An ordered run of frames with a source frame rate and an id."""

    frames: list = field(default_factory=list)
    fps_source: float = 1000.0
    id: str = ""

    def __post_init__(self):
        self.frames = [f if isinstance(f, Tensor) else Tensor(np.asarray(f, np.float32))
                       for f in self.frames]
        dims = {f.data.shape for f in self.frames}
        if len(dims) > 1:
            raise ValueError(f"clip {self.id!r} has inconsistent frame dims: {dims}")

    def __len__(self) -> int:
        return len(self.frames)


def synthesize_blur(sharp_window, window: int) -> Tensor:
    """Pixelwise mean of an odd-length run of sharp frames."""
    if window % 2 == 0:
        raise ValueError("blur window must be odd")
    if len(sharp_window) != window:
        raise ValueError(f"expected {window} frames, got {len(sharp_window)}")
    stack = np.stack([f.data if isinstance(f, Tensor) else np.asarray(f)
                      for f in sharp_window])
    return Tensor(stack.mean(axis=0, dtype=np.float64).astype(stack.dtype))


def subsample_centers(n_frames: int, n_range=(38, 44), rng=None) -> list:
    """Partition the timeline into random-length windows; emit each window's
    middle frame index as (center, window_start). The final partial window
    is dropped."""
    lo, hi = n_range
    if lo < 1 or hi < lo:
        raise ValueError(f"bad subsample range {n_range}")
    if rng is None:
        rng = np.random.default_rng(0)
    out = []
    start = 0
    while True:
        n = int(rng.integers(lo, hi + 1))
        if start + n > n_frames:
            break
        out.append((start + n // 2, start))
        start += n
    return out


# ---------------------------------------------------------------------------
# toy scene rendering


def _upsample_bilinear(grid: np.ndarray, h: int, w: int) -> np.ndarray:
    gh, gw = grid.shape
    ys = np.linspace(0, gh - 1, h)
    xs = np.linspace(0, gw - 1, w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, gh - 1)
    x1 = np.minimum(x0 + 1, gw - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    return ((1 - fy) * (1 - fx) * grid[np.ix_(y0, x0)] + (1 - fy) * fx * grid[np.ix_(y0, x1)]
            + fy * (1 - fx) * grid[np.ix_(y1, x0)] + fy * fx * grid[np.ix_(y1, x1)])


def _render_background(h: int, w: int, rng) -> np.ndarray:
    bg = np.empty((3, h, w), np.float64)
    coarse_n = max(h // 8, 2)
    fine_n = max(h // 2, 4)
    for ch in range(3):
        coarse = rng.uniform(0.15, 0.85, size=(coarse_n, coarse_n))
        fine = rng.uniform(-0.08, 0.08, size=(fine_n, fine_n))
        bg[ch] = _upsample_bilinear(coarse, h, w) + _upsample_bilinear(fine, h, w)
    return np.clip(bg, 0.0, 1.0)


def _wrapped_delta(coords: np.ndarray, center: float, span: int) -> np.ndarray:
    return (coords - center + span / 2.0) % span - span / 2.0


def _scroll_bilinear(img: np.ndarray, dy: float, dx: float) -> np.ndarray:
    """Shift a (3,H,W) image by a fractional offset with toroidal wraparound."""
    iy, fy = int(np.floor(dy)), dy - np.floor(dy)
    ix, fx = int(np.floor(dx)), dx - np.floor(dx)
    a = np.roll(img, (-iy, -ix), axis=(1, 2))
    b = np.roll(img, (-iy, -ix - 1), axis=(1, 2))
    c = np.roll(img, (-iy - 1, -ix), axis=(1, 2))
    d = np.roll(img, (-iy - 1, -ix - 1), axis=(1, 2))
    return (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * c + fx * d)


def render_toy_clip(h: int, w: int, n_frames: int, rng, clip_id: str,
                    motion_scale: float = 1.0) -> VideoClip:
    """One clip: panning textured background plus 2 to 4 rigid shapes drifting
    at constant velocity, both with toroidal wraparound, anti-aliased
    compositing. The pan keeps every pixel in motion (as in handheld footage)
    so temporal averaging blurs the whole frame, not just the shapes.
    ``motion_scale`` multiplies every velocity; 0 renders a static scene."""
    bg = _render_background(h, w, rng)
    pan_speed = float(rng.uniform(0.5, 1.5)) * motion_scale
    pan_angle = float(rng.uniform(0.0, 2.0 * np.pi))
    pan = pan_speed * np.array([np.sin(pan_angle), np.cos(pan_angle)])
    n_shapes = int(rng.integers(2, 5))
    shapes = []
    for _ in range(n_shapes):
        kind = "disk" if rng.random() < 0.5 else "square"
        radius = float(rng.uniform(4.0, min(h, w) / 6.0))
        color = rng.uniform(0.0, 1.0, size=3)
        pos = np.array([rng.uniform(0, h), rng.uniform(0, w)])
        speed = float(rng.uniform(0.5, 4.0)) * motion_scale
        angle = float(rng.uniform(0.0, 2.0 * np.pi))
        vel = speed * np.array([np.sin(angle), np.cos(angle)])
        shapes.append((kind, radius, color, pos, vel))

    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    frames = []
    for t in range(n_frames):
        if pan_speed:
            img = _scroll_bilinear(bg, pan[0] * t % h, pan[1] * t % w)
        else:
            img = bg.copy()
        for kind, radius, color, pos, vel in shapes:
            cy, cx = pos + vel * t
            dy = _wrapped_delta(rows, cy % h, h)
            dx = _wrapped_delta(cols, cx % w, w)
            if kind == "disk":
                dist = np.sqrt(dy * dy + dx * dx)
            else:
                dist = np.maximum(np.abs(dy), np.abs(dx))
            alpha = np.clip(radius + 0.5 - dist, 0.0, 1.0)
            img = img * (1.0 - alpha) + color[:, None, None] * alpha
        frames.append(img.astype(np.float32))
    return VideoClip(frames=frames, fps_source=1000.0, id=clip_id)


def make_toy_dataset(n_clips: int, frames_per_clip: int, h: int, w: int,
                     seed: int, motion_scale: float = 1.0) -> list:
    """Deterministic list of procedurally rendered clips."""
    clips = []
    for i in range(n_clips):
        rng = np.random.default_rng([seed, i])
        clips.append(render_toy_clip(h, w, frames_per_clip, rng, clip_id=f"clip{i:03d}",
                                     motion_scale=motion_scale))
    return clips


def make_blur_sharp(clip: VideoClip, window: int, n_range, rng):
    """Blurry/sharp frame pairs for one clip.

    Centers come from the temporal subsampler; a center whose blur window
    would cross the clip boundary is skipped.
    """
    half = window // 2
    blur, sharp = [], []
    for center, _ in subsample_centers(len(clip), n_range, rng):
        if center - half < 0 or center + half >= len(clip):
            continue
        blur.append(synthesize_blur(clip.frames[center - half:center + half + 1], window))
        sharp.append(clip.frames[center])
    return blur, sharp


# ---------------------------------------------------------------------------
# frame and dataset I/O


def save_frame(path, frame) -> None:
    """Write one frame as an 8-bit RGB PNG."""
    arr = frame.data if isinstance(frame, Tensor) else np.asarray(frame)
    u8 = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(u8.transpose(1, 2, 0), mode="RGB").save(path)


def _load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


_IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


def load_frames(directory) -> VideoClip:
    """Read a directory of numbered images; lexicographic order is temporal order."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"{directory}: not a directory")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES)
    if not files:
        raise ValueError(f"{directory}: no frames found")
    frames = [_load_image(p) for p in files]
    return VideoClip(frames=frames, id=directory.name)


def write_dataset(root, clips, window: int, n_range, seed: int) -> None:
    """Synthesize blur for every clip and write the on-disk layout:
    <root>/<clip_id>/blur/%05d.png, <root>/<clip_id>/sharp/%05d.png, and a
    manifest of "id,count" lines."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = []
    for i, clip in enumerate(clips):
        rng = np.random.default_rng([seed, i, 1])
        blur, sharp = make_blur_sharp(clip, window, n_range, rng)
        blur_dir = root / clip.id / "blur"
        sharp_dir = root / clip.id / "sharp"
        blur_dir.mkdir(parents=True, exist_ok=True)
        sharp_dir.mkdir(parents=True, exist_ok=True)
        for j, (b, s) in enumerate(zip(blur, sharp)):
            save_frame(blur_dir / f"{j:05d}.png", b)
            save_frame(sharp_dir / f"{j:05d}.png", s)
        manifest.append(f"{clip.id},{len(blur)}")
    (root / "manifest.txt").write_text("\n".join(manifest) + "\n")


def load_dataset(root) -> list:
    """Read a written dataset back as (clip_id, blur_clip, sharp_clip) triples."""
    root = Path(root)
    manifest = root / "manifest.txt"
    if not manifest.is_file():
        raise FileNotFoundError(f"{manifest}: missing manifest")
    out = []
    for line in manifest.read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        clip_id, count_s = line.split(",")
        blur = load_frames(root / clip_id / "blur")
        sharp = load_frames(root / clip_id / "sharp")
        if len(blur) != int(count_s) or len(sharp) != int(count_s):
            raise ValueError(f"{clip_id}: manifest count {count_s} does not match frames")
        out.append((clip_id, blur, sharp))
    return out
