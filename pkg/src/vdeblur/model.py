"""Trainable networks and losses.

Three networks share one pipeline: a three-scale residual encoder, a
mirror-image reconstruction decoder that emits a residual on top of the
middle input frame, and a 3D-convolutional discriminator that judges
temporal triplets. The encoder downsamples twice, so features live at a
quarter of the input resolution with ``channels`` channels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .aggregate import SOURCES, aggregate_pair, fuse_three, phi_param_names
from .flow import align_sequence
from .tensor import (
    ParamStore,
    Tensor,
    absolute,
    add,
    concat,
    conv2d,
    conv3d,
    conv_transpose2d,
    global_mean_pool,
    leaky_relu,
    log,
    matmul_batched,
    mean_all,
    reshape,
    sigmoid,
    transpose,
)

__all__ = [
    "EncoderConfig",
    "DeblurConfig",
    "init_gen_params",
    "init_disc_params",
    "encode",
    "encode_with_skips",
    "reconstruct",
    "deblur_step",
    "discriminate",
    "adv_loss",
    "total_loss",
    "clamp01",
    "DISC_WIDTHS",
]

ALIGN_MODES = ("off", "classical", "file")
DISC_WIDTHS = (16, 32, 64, 64)
_ADV_EPS = 1e-8
_SLOPE = 0.1


@dataclass
class EncoderConfig:
    """Encoder layout; the stage structure is fixed by design."""

    base_channels: int
    downsample_stages: int = 2
    resblocks_per_scale: int = 5

    def __post_init__(self):
        if self.base_channels % 4:
            raise ValueError("base_channels must be divisible by 4")
        if self.downsample_stages != 2 or self.resblocks_per_scale != 5:
            raise ValueError("encoder stage structure is fixed (2 downsamples, 5 blocks per scale)")


@dataclass
class DeblurConfig:
    """Pipeline-level knobs: pyramid depth, feature width, alignment, staging."""

    pyramid_L: int = 2
    channels: int = 16
    align_mode: str = "off"
    use_volumes: bool = True
    stages: int = 2
    encoder: EncoderConfig = field(default=None)

    def __post_init__(self):
        if not 0 <= self.pyramid_L <= 4:
            raise ValueError("pyramid_L must be in [0, 4]")
        if not 1 <= self.stages <= 3:
            raise ValueError("stages must be in [1, 3]")
        if self.align_mode not in ALIGN_MODES:
            raise ValueError(f"align_mode must be one of {ALIGN_MODES}")
        if self.use_volumes and self.pyramid_L == 0:
            raise ValueError("use_volumes requires pyramid_L >= 1")
        if self.encoder is None:
            self.encoder = EncoderConfig(self.channels)
        if self.encoder.base_channels != self.channels:
            raise ValueError("encoder base_channels must equal channels")

    @property
    def fused_channels(self) -> int:
        if self.use_volumes:
            return 3 * self.pyramid_L * self.channels
        return 3 * self.channels

    @property
    def min_divisor(self) -> int:
        return 4 * (1 << self.pyramid_L) if self.use_volumes else 4


# ---------------------------------------------------------------------------
# parameter initialization


def _he_conv(rng, c_out: int, c_in: int, *kdims: int) -> np.ndarray:
    fan_in = c_in * int(np.prod(kdims))
    std = np.sqrt(2.0 / fan_in)
    return rng.normal(0.0, std, size=(c_out, c_in) + kdims).astype(np.float32)


def _add_conv(store: ParamStore, rng, name: str, c_out: int, c_in: int, *kdims: int,
              zero: bool = False) -> None:
    if zero:
        store.add(f"{name}.weight", np.zeros((c_out, c_in) + kdims, np.float32))
    else:
        store.add(f"{name}.weight", _he_conv(rng, c_out, c_in, *kdims))
    store.add(f"{name}.bias", np.zeros(c_out, np.float32))


def _add_resblock(store: ParamStore, rng, name: str, ch: int) -> None:
    # The second conv starts at zero so every block is the identity at init,
    # keeping the 15-block norm-free ladder bounded. With both convs at He
    # scale the variance roughly doubles per block and training diverges;
    # with a small nonzero second conv the first thousand updates stall.
    _add_conv(store, rng, f"{name}.c1", ch, ch, 3, 3)
    _add_conv(store, rng, f"{name}.c2", ch, ch, 3, 3, zero=True)


def init_gen_params(cfg: DeblurConfig, rng) -> ParamStore:
    """Encoder, refinement and decoder parameters.

    Conv weights use fan-in scaled normal draws; the final residual conv is
    zero so the untrained pipeline is the identity map.
    """
    c = cfg.channels
    c4, c2 = c // 4, c // 2
    store = ParamStore()

    _add_conv(store, rng, "enc.head", c4, 3, 3, 3)
    for j in range(5):
        _add_resblock(store, rng, f"enc.s0.rb{j}", c4)
    _add_conv(store, rng, "enc.down1", c2, c4, 3, 3)
    for j in range(5):
        _add_resblock(store, rng, f"enc.s1.rb{j}", c2)
    _add_conv(store, rng, "enc.down2", c, c2, 3, 3)
    for j in range(5):
        _add_resblock(store, rng, f"enc.s2.rb{j}", c)

    if cfg.use_volumes:
        for source in SOURCES:
            for k in range(1, cfg.pyramid_L + 1):
                w_name, b_name = phi_param_names(k, source)
                store.add(w_name, _he_conv(rng, c, c, 1, 1))
                store.add(b_name, np.zeros(c, np.float32))

    _add_conv(store, rng, "dec.reduce", c, cfg.fused_channels, 1, 1)
    for j in range(5):
        _add_resblock(store, rng, f"dec.s2.rb{j}", c)
    # transposed-conv weights are (C_in, C_out, k, k)
    store.add("dec.up1.weight", _he_conv(rng, c, c2, 2, 2))
    store.add("dec.up1.bias", np.zeros(c2, np.float32))
    for j in range(2):
        _add_resblock(store, rng, f"dec.s1.rb{j}", c2)
    store.add("dec.up0.weight", _he_conv(rng, c2, c4, 2, 2))
    store.add("dec.up0.bias", np.zeros(c4, np.float32))
    for j in range(2):
        _add_resblock(store, rng, f"dec.s0.rb{j}", c4)
    _add_conv(store, rng, "dec.out", 3, c4, 3, 3, zero=True)
    return store


def init_disc_params(rng, widths=DISC_WIDTHS) -> ParamStore:
    """Discriminator parameters; the classifier head starts at zero so the
    untrained output is exactly 0.5."""
    store = ParamStore()
    c_in = 3
    for i, c_out in enumerate(widths, start=1):
        store.add(f"disc.c{i}.weight", _he_conv(rng, c_out, c_in, 3, 3, 3))
        store.add(f"disc.c{i}.bias", np.zeros(c_out, np.float32))
        c_in = c_out
    store.add("disc.fc.weight", np.zeros((c_in, 1), np.float32))
    store.add("disc.fc.bias", np.zeros(1, np.float32))
    return store


# ---------------------------------------------------------------------------
# networks


def _conv_block(x: Tensor, params: ParamStore, name: str, stride: int = 1,
                padding: int = 1) -> Tensor:
    return conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"],
                  stride=stride, padding=padding)


def _resblock(x: Tensor, params: ParamStore, name: str) -> Tensor:
    h = leaky_relu(_conv_block(x, params, f"{name}.c1"), _SLOPE)
    return add(x, _conv_block(h, params, f"{name}.c2"))


def encode_with_skips(frame: Tensor, params: ParamStore):
    """Encoder forward pass, also returning the full- and half-resolution
    activations used as decoder skip connections."""
    if frame.data.ndim != 3 or frame.data.shape[0] != 3:
        raise ValueError(f"expected a (3,H,W) frame, got {frame.data.shape}")
    _, h, w = frame.data.shape
    if h % 4 or w % 4:
        raise ValueError(f"frame dims ({h},{w}) must be divisible by 4")

    x = reshape(frame, (1,) + frame.data.shape)
    x = leaky_relu(_conv_block(x, params, "enc.head"), _SLOPE)
    for j in range(5):
        x = _resblock(x, params, f"enc.s0.rb{j}")
    skip_full = x
    x = leaky_relu(_conv_block(x, params, "enc.down1", stride=2), _SLOPE)
    for j in range(5):
        x = _resblock(x, params, f"enc.s1.rb{j}")
    skip_half = x
    x = leaky_relu(_conv_block(x, params, "enc.down2", stride=2), _SLOPE)
    for j in range(5):
        x = _resblock(x, params, f"enc.s2.rb{j}")
    feat = reshape(x, x.data.shape[1:])
    return feat, skip_full, skip_half


def encode(frame: Tensor, params: ParamStore) -> Tensor:
    """Quarter-resolution feature map of a frame."""
    feat, _, _ = encode_with_skips(frame, params)
    return feat


def clamp01(t: Tensor) -> Tensor:
    """Clip to [0,1]. Evaluation-time only; this cuts the tape."""
    return Tensor(np.clip(t.data, 0.0, 1.0))


def reconstruct(fused: Tensor, ref_frame: Tensor, params: ParamStore,
                skips=None, clamp: bool = False) -> Tensor:
    """Decode fused features into a restored frame.

    The decoder reduces channels, refines at quarter resolution, upsamples
    twice with skip additions from the reference frame's encoder
    activations, and emits a residual added to the reference frame. With the
    residual conv at zero this is the identity map.
    """
    if skips is None:
        _, skip_full, skip_half = encode_with_skips(ref_frame, params)
    else:
        skip_full, skip_half = skips

    x = reshape(fused, (1,) + fused.data.shape)
    x = leaky_relu(conv2d(x, params["dec.reduce.weight"], params["dec.reduce.bias"],
                          stride=1, padding=0), _SLOPE)
    for j in range(5):
        x = _resblock(x, params, f"dec.s2.rb{j}")
    x = leaky_relu(conv_transpose2d(x, params["dec.up1.weight"], params["dec.up1.bias"],
                                    stride=2), _SLOPE)
    for j in range(2):
        x = _resblock(x, params, f"dec.s1.rb{j}")
    x = add(x, skip_half)
    x = leaky_relu(conv_transpose2d(x, params["dec.up0.weight"], params["dec.up0.bias"],
                                    stride=2), _SLOPE)
    for j in range(2):
        x = _resblock(x, params, f"dec.s0.rb{j}")
    x = add(x, skip_full)
    residual = _conv_block(x, params, "dec.out")
    out = add(reshape(residual, residual.data.shape[1:]), ref_frame)
    return clamp01(out) if clamp else out


def fuse_features(f_prev: Tensor, f_ref: Tensor, f_next: Tensor,
                  cfg: DeblurConfig, params: ParamStore) -> Tensor:
    """Combine the three encoded frames into the decoder's input map: the
    aggregated pyramids of all three sources when volumes are enabled, a
    plain channel concatenation otherwise."""
    if cfg.use_volumes:
        rho_prev = aggregate_pair(f_ref, f_prev, cfg.pyramid_L, params, "prev")
        rho_self = aggregate_pair(f_ref, f_ref, cfg.pyramid_L, params, "self")
        rho_next = aggregate_pair(f_ref, f_next, cfg.pyramid_L, params, "next")
        return fuse_three(rho_prev, rho_self, rho_next)
    return concat([f_prev, f_ref, f_next], axis=0)


def deblur_step(frames, cfg: DeblurConfig, params: ParamStore,
                clamp: bool = False, flow_files=None) -> Tensor:
    """Restore the middle frame of a consecutive triple."""
    if len(frames) != 3:
        raise ValueError("deblur_step expects exactly three frames")
    frames = [f if isinstance(f, Tensor) else Tensor(f) for f in frames]
    _, h, w = frames[1].data.shape
    d = cfg.min_divisor
    if h % d or w % d:
        raise ValueError(f"frame dims ({h},{w}) must be divisible by {d}")

    aligned = align_sequence(frames, cfg.align_mode, flow_files=flow_files)
    f_ref, skip_full, skip_half = encode_with_skips(aligned[1], params)
    f_prev = encode(aligned[0], params)
    f_next = encode(aligned[2], params)
    fused = fuse_features(f_prev, f_ref, f_next, cfg, params)
    return reconstruct(fused, frames[1], params, skips=(skip_full, skip_half),
                       clamp=clamp)


def _stack_frames(seq) -> Tensor:
    frames = [f if isinstance(f, Tensor) else Tensor(f) for f in seq]
    return concat([reshape(f, (1,) + f.data.shape) for f in frames], axis=0)


def discriminate(seq, params: ParamStore) -> Tensor:
    """Probability in (0,1) that a frame triplet is a real sharp sequence.

    ``seq`` is three frames (or a (3,3,H,W) tensor, time first). Four strided
    3D convolutions shrink space while preserving time, then a pooled linear
    head scores the clip.
    """
    x = seq if isinstance(seq, Tensor) else _stack_frames(seq)
    if x.data.ndim != 4 or x.data.shape[0] != 3 or x.data.shape[1] != 3:
        raise ValueError(f"expected a (3,3,H,W) triplet, got {x.data.shape}")
    # (T,C,H,W) -> (1,C,T,H,W)
    x = reshape(x, (1,) + x.data.shape)
    x = transpose(x, (0, 2, 1, 3, 4))
    n_layers = len(DISC_WIDTHS)
    for i in range(1, n_layers + 1):
        x = conv3d(x, params[f"disc.c{i}.weight"], params[f"disc.c{i}.bias"],
                   stride=(1, 2, 2), padding=(1, 1, 1))
        x = leaky_relu(x, _SLOPE)
    pooled = global_mean_pool(x)  # (1, widths[-1])
    logit = add(matmul_batched(pooled, params["disc.fc.weight"]), params["disc.fc.bias"])
    return reshape(sigmoid(logit), ())


def _d_real_term(d_sharp: Tensor) -> Tensor:
    return -log(d_sharp, eps=_ADV_EPS)


def _d_fake_term(d_restored: Tensor) -> Tensor:
    return -log(1.0 - d_restored, eps=_ADV_EPS)


def adv_loss(restored_seq, sharp_seq, d_params: ParamStore):
    """Discriminator and generator adversarial losses for one sequence pair.

    loss_D = -(log D(sharp) + log(1 - D(restored))) with the restored
    sequence detached; loss_G = -log D(restored) in the non-saturating form,
    with gradients flowing through the restored frames. Logs carry a small
    epsilon guard.
    """
    r_live = restored_seq if isinstance(restored_seq, Tensor) else _stack_frames(restored_seq)
    r_det = r_live.detach()
    d_s = discriminate(sharp_seq if isinstance(sharp_seq, Tensor) else _stack_frames(sharp_seq),
                       d_params)
    d_r_det = discriminate(r_det, d_params)
    d_r_live = discriminate(r_live, d_params)
    loss_d = add(_d_real_term(d_s), _d_fake_term(d_r_det))
    loss_g = -log(d_r_live, eps=_ADV_EPS)
    return loss_d, loss_g


def total_loss(restored_stages, sharps, adv_g, alpha: float) -> Tensor:
    """Mean absolute error over all supervised stage outputs, equally
    weighted, plus ``alpha`` times the generator adversarial term."""
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    if len(restored_stages) != len(sharps):
        raise ValueError("restored/sharp count mismatch")
    terms = []
    for r, s in zip(restored_stages, sharps):
        s_t = s if isinstance(s, Tensor) else Tensor(s)
        terms.append(mean_all(absolute(r - s_t)))
    l1 = terms[0]
    for t in terms[1:]:
        l1 = add(l1, t)
    l1 = l1 * (1.0 / len(terms))
    if alpha == 0 or adv_g is None:
        return l1
    adv_t = adv_g if isinstance(adv_g, Tensor) else Tensor(np.asarray(adv_g, np.float32))
    return add(l1, adv_t * float(alpha))
