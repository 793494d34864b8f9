"""Multi-frame video deblurring with all-range correlation volume pyramids.

Library layout:
  tensor    - reverse-mode autodiff core, parameter store, checkpoints
  flow      - Lucas-Kanade flow, differentiable warping, flow file I/O
  corrvol   - correlation volumes, pooled pyramid, normalization
  aggregate - correlation-weighted feature aggregation and fusion
  model     - encoder, reconstruction decoder, discriminator, losses
  train     - progressive adversarial training loop
  data      - blur synthesis and the procedural toy dataset
  metrics   - PSNR and SSIM
  cli       - synth / train / deblur / eval / bench commands
"""

__version__ = "0.1.0"

from .tensor import ParamStore, Tensor, grad_check, load_checkpoint, no_grad, save_checkpoint
from .flow import FlowField, align_sequence, estimate_flow, warp
from .corrvol import CorrelationPyramid, CorrelationVolume, build_correlation_volume, build_pyramid, normalize_volume
from .aggregate import AggregatedFeature, aggregate_level, aggregate_pair, fuse_three, refine_neighbor
from .model import DeblurConfig, EncoderConfig, adv_loss, deblur_step, discriminate, encode, reconstruct, total_loss
from .train import StageOutputs, TrainConfig, progressive_forward, train_loop, train_step
from .data import VideoClip, make_toy_dataset, subsample_centers, synthesize_blur
from .metrics import MetricReport, psnr, ssim

__all__ = [
    "Tensor", "ParamStore", "no_grad", "grad_check", "save_checkpoint", "load_checkpoint",
    "FlowField", "estimate_flow", "warp", "align_sequence",
    "CorrelationVolume", "CorrelationPyramid", "build_correlation_volume",
    "build_pyramid", "normalize_volume",
    "AggregatedFeature", "refine_neighbor", "aggregate_level", "aggregate_pair", "fuse_three",
    "EncoderConfig", "DeblurConfig", "encode", "reconstruct", "deblur_step",
    "discriminate", "adv_loss", "total_loss",
    "TrainConfig", "StageOutputs", "progressive_forward", "train_step", "train_loop",
    "VideoClip", "synthesize_blur", "subsample_centers", "make_toy_dataset",
    "psnr", "ssim", "MetricReport",
]
