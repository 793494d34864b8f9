"""Progressive adversarial training.

A window of 2*stages+1 blurry frames is restored in stages: stage 1 runs
the deblurring step on every sliding triple, later stages run it on the
previous stage's outputs, all with one shared parameter set. Supervision is
mean absolute error on every stage output, optionally combined with the
temporal-discriminator game. Everything is seeded and single-threaded, so
two runs with the same config produce bit-identical trajectories.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import (
    DeblurConfig,
    _d_fake_term,
    _d_real_term,
    clamp01,
    deblur_step,
    discriminate,
    encode_with_skips,
    fuse_features,
    init_disc_params,
    init_gen_params,
    reconstruct,
    total_loss,
)
from .tensor import ParamStore, Tensor, add, load_checkpoint, log, no_grad, save_checkpoint
from .metrics import psnr

__all__ = [
    "TrainConfig",
    "StageOutputs",
    "progressive_forward",
    "train_step",
    "train_loop",
    "augment_window",
    "crop_window",
    "schedule_lr",
    "Adam",
    "build_windows",
    "evaluate_restoration",
    "save_training_checkpoint",
    "load_training_checkpoint",
    "METRICS_HEADER",
]

METRICS_HEADER = "step,epoch,l1,loss_G,loss_D,lr,wall_ms"


@dataclass
class TrainConfig:
    """Optimization settings plus the pipeline knobs they train."""

    lr: float = 1e-4
    lr_halve_every: int = 200
    alpha: float = 0.1
    stages: int = 2
    patch: int = 64
    batch: int = 1
    epochs: int = 10
    seed: int = 0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    pyramid_L: int = 2
    channels: int = 16
    align: str = "off"
    use_volumes: bool = None
    max_steps: int = None
    clip_grad_norm: float = None

    def __post_init__(self):
        if self.use_volumes is None:
            self.use_volumes = self.pyramid_L > 0
        if self.align == "file":
            raise ValueError("training does not support align=file (no per-window flow files)")
        if self.alpha > 0 and self.stages < 2:
            raise ValueError("adversarial training needs stages >= 2 (triplet construction)")
        mcfg = self.model_config()
        if self.patch % mcfg.min_divisor:
            raise ValueError(f"patch {self.patch} must be divisible by {mcfg.min_divisor}")
        if self.batch < 1 or self.epochs < 0:
            raise ValueError("batch must be >= 1 and epochs >= 0")

    def model_config(self) -> DeblurConfig:
        return DeblurConfig(pyramid_L=self.pyramid_L, channels=self.channels,
                            align_mode=self.align, use_volumes=self.use_volumes,
                            stages=self.stages)

    def to_dict(self) -> dict:
        return {
            "lr": self.lr, "lr_halve_every": self.lr_halve_every, "alpha": self.alpha,
            "stages": self.stages, "patch": self.patch, "batch": self.batch,
            "epochs": self.epochs, "seed": self.seed, "beta1": self.betas[0],
            "beta2": self.betas[1], "eps": self.eps, "pyramid_L": self.pyramid_L,
            "channels": self.channels, "align": self.align,
            "use_volumes": self.use_volumes,
        }


@dataclass
class StageOutputs:
    """Restored frames per stage; stage t's outputs sit at window centers
    t .. 2*stages-t, so the last stage holds exactly one frame."""

    per_stage: list = field(default_factory=list)

    @property
    def final(self) -> Tensor:
        last = self.per_stage[-1]
        return last[len(last) // 2]

    def centers(self, stage: int) -> range:
        n_window = 2 * len(self.per_stage) + 1
        return range(stage, n_window - stage)


def schedule_lr(lr0: float, epoch: int, halve_every: int) -> float:
    """lr0 halved once per ``halve_every`` completed epochs, exactly."""
    return lr0 * 0.5 ** (epoch // halve_every)


def progressive_forward(frames, cfg: DeblurConfig, params: ParamStore,
                        clamp: bool = False) -> StageOutputs:
    """Run all restoration stages over a 2*stages+1 frame window."""
    n_expected = 2 * cfg.stages + 1
    if len(frames) != n_expected:
        raise ValueError(f"stages={cfg.stages} needs {n_expected} frames, got {len(frames)}")
    current = [f if isinstance(f, Tensor) else Tensor(f) for f in frames]
    per_stage = []
    for _ in range(cfg.stages):
        if cfg.align_mode == "off":
            outs = _stage_shared_encodings(current, cfg, params, clamp)
        else:
            outs = [deblur_step(current[j - 1:j + 2], cfg, params, clamp=clamp)
                    for j in range(1, len(current) - 1)]
        per_stage.append(outs)
        current = outs
    return StageOutputs(per_stage=per_stage)


def _stage_shared_encodings(current, cfg: DeblurConfig, params: ParamStore,
                            clamp: bool) -> list:
    """One stage of sliding-triple restoration with each frame encoded once.

    With alignment off the triple fed to each restoration is the raw frames,
    so interior frames appear in up to three triples with identical encoder
    input. Encoding per frame instead of per triple saves the repeat passes
    and produces the same outputs, since the encoder has no cross-frame
    state.
    """
    _, h, w = current[0].data.shape
    d = cfg.min_divisor
    if h % d or w % d:
        raise ValueError(f"frame dims ({h},{w}) must be divisible by {d}")
    encoded = [encode_with_skips(f, params) for f in current]
    outs = []
    for j in range(1, len(current) - 1):
        f_ref, skip_full, skip_half = encoded[j]
        fused = fuse_features(encoded[j - 1][0], f_ref, encoded[j + 1][0],
                              cfg, params)
        outs.append(reconstruct(fused, current[j], params,
                                skips=(skip_full, skip_half), clamp=clamp))
    return outs


def _supervision_pairs(outs: StageOutputs, sharp_window, stages: int):
    restored, targets = [], []
    for t, stage_outs in enumerate(outs.per_stage, start=1):
        for j, r in enumerate(stage_outs):
            restored.append(r)
            targets.append(sharp_window[t + j])
    return restored, targets


def _adv_restored(outs: StageOutputs, stages: int):
    """Triplet fed to the discriminator: the deepest available restoration of
    frames i-1, i, i+1 (the two neighbors come from the next-to-last stage)."""
    prev_stage = outs.per_stage[stages - 2]
    last_stage = outs.per_stage[stages - 1]
    return [prev_stage[0], last_stage[0], prev_stage[2]]


# ---------------------------------------------------------------------------
# augmentation


def augment_window(arrays, rng):
    """One random flip and one random rotation, identical for every array."""
    flip = int(rng.integers(0, 3))
    rot = int(rng.integers(0, 4))
    out = []
    for a in arrays:
        if rot % 2 and a.shape[1] != a.shape[2]:
            raise ValueError("90/270 degree rotation needs square patches")
        b = a
        if flip == 1:
            b = b[:, :, ::-1]
        elif flip == 2:
            b = b[:, ::-1, :]
        if rot:
            b = np.rot90(b, k=rot, axes=(1, 2))
        out.append(np.ascontiguousarray(b))
    return out


def crop_window(arrays, patch: int, rng):
    """One random patch-sized crop, identical for every array."""
    _, h, w = arrays[0].shape
    if patch > h or patch > w:
        raise ValueError(f"patch {patch} exceeds frame dims ({h},{w})")
    r0 = int(rng.integers(0, h - patch + 1))
    c0 = int(rng.integers(0, w - patch + 1))
    return [np.ascontiguousarray(a[:, r0:r0 + patch, c0:c0 + patch]) for a in arrays]


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with bias correction; state keyed by parameter name."""

    def __init__(self, store: ParamStore, betas=(0.9, 0.999), eps: float = 1e-8):
        self.store = store
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(t.data) for name, t in store.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in store.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for name, p in self.store.items():
            g = p.grad if p.grad is not None else 0.0
            self.m[name] = self.b1 * self.m[name] + (1.0 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1.0 - self.b2) * (g * g)
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def clip_global_norm(store: ParamStore, max_norm: float) -> None:
    total = 0.0
    for _, p in store.items():
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = np.sqrt(total)
    if norm > max_norm:
        scale = np.float32(max_norm / norm)
        for _, p in store.items():
            if p.grad is not None:
                p.grad = p.grad * scale


# ---------------------------------------------------------------------------
# stepping


def train_step(batch, cfg: TrainConfig, gen_params: ParamStore,
               disc_params: ParamStore, opt_g: Adam, opt_d: Adam,
               lr: float) -> dict:
    """One discriminator update (when alpha > 0) then one generator update.

    ``batch`` is a list of (blurry window, sharp window) pairs of numpy
    arrays. Raises FloatingPointError if any loss goes non-finite.
    """
    mcfg = cfg.model_config()
    s = cfg.stages
    loss_d_val = 0.0

    if cfg.alpha > 0:
        disc_params.zero_grad()
        terms = []
        for blur_w, sharp_w in batch:
            with no_grad():
                outs = progressive_forward([Tensor(b) for b in blur_w], mcfg, gen_params)
                r_seq = _adv_restored(outs, s)
            s_seq = [Tensor(sharp_w[i]) for i in (s - 1, s, s + 1)]
            d_s = discriminate(s_seq, disc_params)
            d_r = discriminate(r_seq, disc_params)
            terms.append(add(_d_real_term(d_s), _d_fake_term(d_r)))
        loss_d = terms[0]
        for t in terms[1:]:
            loss_d = add(loss_d, t)
        loss_d = loss_d * (1.0 / len(terms))
        loss_d_val = float(loss_d.data)
        if not np.isfinite(loss_d_val):
            raise FloatingPointError(f"non-finite discriminator loss: {loss_d_val}")
        loss_d.backward()
        opt_d.step(lr)

    gen_params.zero_grad()
    disc_params.zero_grad()
    l1_terms, g_terms = [], []
    for blur_w, sharp_w in batch:
        outs = progressive_forward([Tensor(b) for b in blur_w], mcfg, gen_params)
        restored, targets = _supervision_pairs(outs, sharp_w, s)
        l1_terms.append(total_loss(restored, targets, None, 0.0))
        if cfg.alpha > 0:
            r_seq = _adv_restored(outs, s)
            g_terms.append(-log(discriminate(r_seq, disc_params), eps=1e-8))

    l1 = l1_terms[0]
    for t in l1_terms[1:]:
        l1 = add(l1, t)
    l1 = l1 * (1.0 / len(l1_terms))
    l1_val = float(l1.data)

    loss_g_val = 0.0
    total = l1
    if g_terms:
        g = g_terms[0]
        for t in g_terms[1:]:
            g = add(g, t)
        g = g * (1.0 / len(g_terms))
        loss_g_val = float(g.data)
        total = add(l1, g * float(cfg.alpha))

    total_val = float(total.data)
    if not np.isfinite(total_val):
        raise FloatingPointError(
            f"non-finite training loss: total={total_val} l1={l1_val} loss_G={loss_g_val}")
    total.backward()
    if cfg.clip_grad_norm:
        clip_global_norm(gen_params, cfg.clip_grad_norm)
    opt_g.step(lr)

    return {"l1": l1_val, "loss_G": loss_g_val, "loss_D": loss_d_val, "lr": lr}


# ---------------------------------------------------------------------------
# data plumbing for the loop


def build_windows(dataset, stages: int):
    """All (clip index, center index) pairs with a full window around them."""
    s = stages
    windows = []
    for ci, (_, blur_clip, _) in enumerate(dataset):
        n = len(blur_clip)
        for center in range(s, n - s):
            windows.append((ci, center))
    return windows


def _materialize(dataset, window, stages: int):
    ci, center = window
    _, blur_clip, sharp_clip = dataset[ci]
    idx = range(center - stages, center + stages + 1)
    blur = [blur_clip.frames[i].data for i in idx]
    sharp = [sharp_clip.frames[i].data for i in idx]
    return blur, sharp


def save_training_checkpoint(path, gen_params: ParamStore, disc_params: ParamStore,
                             cfg: TrainConfig) -> None:
    """One checkpoint file holding generator (gen.*) and discriminator
    (disc.*) entries, plus a key=value sidecar at <path>.cfg."""
    merged = ParamStore()
    for name, t in gen_params.items():
        merged.add(f"gen.{name}", t.data)
    for name, t in disc_params.items():
        merged.add(name, t.data)  # disc names already carry the disc. prefix
    save_checkpoint(path, merged)
    lines = [f"{k}={v}" for k, v in sorted(cfg.to_dict().items())]
    Path(str(path) + ".cfg").write_text("\n".join(lines) + "\n")


def load_training_checkpoint(path):
    """Returns (gen_params, disc_params, sidecar dict)."""
    merged = load_checkpoint(path)
    gen, disc = ParamStore(), ParamStore()
    for name, t in merged.items():
        if name.startswith("gen."):
            gen.add(name[4:], t.data)
        elif name.startswith("disc."):
            disc.add(name, t.data)
        else:
            raise ValueError(f"checkpoint entry {name!r} has no gen./disc. prefix")
    sidecar = Path(str(path) + ".cfg")
    cfg = {}
    if sidecar.is_file():
        for line in sidecar.read_text().splitlines():
            if "=" in line:
                k, v = line.split("=", 1)
                cfg[k.strip()] = v.strip()
    return gen, disc, cfg


def train_loop(dataset, cfg: TrainConfig, ckpt_path=None, metrics_path=None):
    """Full training run over a loaded dataset.

    Windows are shuffled per epoch and visited without replacement. The
    checkpoint is rewritten at every epoch end and at the final step; the
    metrics CSV gets one row per step.
    """
    gen = init_gen_params(cfg.model_config(), np.random.default_rng([cfg.seed, 1]))
    disc = init_disc_params(np.random.default_rng([cfg.seed, 2]))
    loop_rng = np.random.default_rng([cfg.seed, 3])
    opt_g = Adam(gen, cfg.betas, cfg.eps)
    opt_d = Adam(disc, cfg.betas, cfg.eps)

    windows = build_windows(dataset, cfg.stages)
    if not windows:
        raise ValueError("dataset has no usable training windows (clips too short?)")

    fh = open(metrics_path, "w") if metrics_path else None
    if fh:
        fh.write(METRICS_HEADER + "\n")
    step = 0
    stop = False
    try:
        for epoch in range(cfg.epochs):
            lr = schedule_lr(cfg.lr, epoch, cfg.lr_halve_every)
            order = loop_rng.permutation(len(windows))
            for lo in range(0, len(order), cfg.batch):
                t0 = time.perf_counter()
                batch = []
                for wi in order[lo:lo + cfg.batch]:
                    blur, sharp = _materialize(dataset, windows[wi], cfg.stages)
                    arrays = augment_window(blur + sharp, loop_rng)
                    arrays = crop_window(arrays, cfg.patch, loop_rng)
                    n = len(blur)
                    batch.append((arrays[:n], arrays[n:]))
                m = train_step(batch, cfg, gen, disc, opt_g, opt_d, lr)
                step += 1
                if fh:
                    wall_ms = (time.perf_counter() - t0) * 1000.0
                    fh.write(f"{step},{epoch},{m['l1']!r},{m['loss_G']!r},"
                             f"{m['loss_D']!r},{m['lr']!r},{wall_ms!r}\n")
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    stop = True
                    break
            if ckpt_path:
                save_training_checkpoint(ckpt_path, gen, disc, cfg)
            if stop:
                break
        if ckpt_path:
            save_training_checkpoint(ckpt_path, gen, disc, cfg)
    finally:
        if fh:
            fh.close()
    return gen, disc


def evaluate_restoration(dataset, mcfg: DeblurConfig, gen_params: ParamStore):
    """Mean PSNR of restored and of raw blurry frames against the sharps,
    over every eligible window of every clip."""
    s = mcfg.stages
    psnr_restored, psnr_blurry = [], []
    with no_grad():
        for _, blur_clip, sharp_clip in dataset:
            n = len(blur_clip)
            for center in range(s, n - s):
                frames = [blur_clip.frames[i] for i in range(center - s, center + s + 1)]
                outs = progressive_forward(frames, mcfg, gen_params, clamp=True)
                restored = clamp01(outs.final)
                target = sharp_clip.frames[center]
                psnr_restored.append(psnr(restored, target))
                psnr_blurry.append(psnr(blur_clip.frames[center], target))
    return float(np.mean(psnr_restored)), float(np.mean(psnr_blurry))
