"""Dual-encoder segmentation network: causal/bias encoders and two 1x1 heads."""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ContractError

CAUSAL = "causal"
BIAS = "bias"

_ACTIVATIONS = {"relu": nn.ReLU, "tanh": nn.Tanh, "gelu": nn.GELU}


@dataclass
class ArchConfig:
    in_channels: int = 3
    feature_dim: int = 16
    widths: tuple = (16, 32)  # hidden stages; a final stage of width feature_dim is appended
    output_stride: int = 4
    num_classes: int = 4
    nonlinearity: str = "relu"
    norm: str = "none"  # "none" | "group"
    seed: int = 0

    def validate(self):
        s = self.output_stride
        if self.feature_dim < 2:
            raise ContractError("feature_dim must be >= 2")
        if s < 1 or s & (s - 1):
            raise ContractError("output_stride must be a power of two")
        if not self.widths:
            raise ContractError("widths must be non-empty")
        if int(math.log2(s)) > len(self.widths) + 1:
            raise ContractError("not enough stages for the requested output stride")
        if self.nonlinearity not in _ACTIVATIONS:
            raise ContractError(f"unknown nonlinearity {self.nonlinearity!r}")
        if self.norm not in ("none", "group"):
            raise ContractError(f"unknown norm {self.norm!r}")
        if self.num_classes < 2:
            raise ContractError("num_classes must be >= 2")

    def stage_widths(self):
        return list(self.widths) + [self.feature_dim]

    def stage_strides(self):
        n = len(self.stage_widths())
        down = int(math.log2(self.output_stride))
        return [1] * (n - down) + [2] * down

    def digest_fields(self):
        d = asdict(self)
        d.pop("seed")
        d["widths"] = list(d["widths"])
        return d


class Encoder(nn.Module):
    """3x3 conv stack; ReLU-style activation between stages, linear last stage."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        layers = []
        c_in = arch.in_channels
        widths, strides = arch.stage_widths(), arch.stage_strides()
        for i, (w, s) in enumerate(zip(widths, strides)):
            layers.append(nn.Conv2d(c_in, w, 3, stride=s, padding=1))
            if i < len(widths) - 1:
                if arch.norm == "group":
                    layers.append(nn.GroupNorm(min(4, w), w))
                layers.append(_ACTIVATIONS[arch.nonlinearity]())
            c_in = w
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class CPCANet(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        arch.validate()
        self.arch = arch
        self.enc_c = Encoder(arch)
        self.enc_b = Encoder(arch)
        self.head_c = nn.Conv2d(2 * arch.feature_dim, arch.num_classes, 1)
        self.head_b = nn.Conv2d(2 * arch.feature_dim, arch.num_classes, 1)

    def head(self, which):
        if which == CAUSAL:
            return self.head_c
        if which == BIAS:
            return self.head_b
        raise ContractError(f"unknown head {which!r}")

    def encoder_params(self, which):
        return (self.enc_c if which == CAUSAL else self.enc_b).parameters()


def init_params(arch: ArchConfig, dtype=torch.float32) -> CPCANet:
    """Build a network with seeded fan-in scaled normal weights and zero biases.

    Convolutions followed by an activation use std sqrt(2 / fan_in); the last
    encoder stage and the heads use std sqrt(1 / fan_in).
    """
    net = CPCANet(arch).to(dtype)
    gen = torch.Generator().manual_seed(arch.seed)
    with torch.no_grad():
        for enc in (net.enc_c, net.enc_b):
            convs = [m for m in enc.net if isinstance(m, nn.Conv2d)]
            for i, conv in enumerate(convs):
                gain = 2.0 if i < len(convs) - 1 else 1.0
                _fan_in_normal(conv, gain, gen)
        for head in (net.head_c, net.head_b):
            _fan_in_normal(head, 1.0, gen)
    return net


def _fan_in_normal(conv: nn.Conv2d, gain: float, gen):
    w = conv.weight
    fan_in = w.shape[1] * w.shape[2] * w.shape[3]
    w.copy_(torch.randn(w.shape, generator=gen, dtype=torch.float64).to(w.dtype)
            * math.sqrt(gain / fan_in))
    conv.bias.zero_()


def _check_images(net: CPCANet, images):
    a = net.arch
    if images.ndim != 4 or images.shape[1] != a.in_channels:
        raise ContractError(f"expected images [B, {a.in_channels}, H, W], got {tuple(images.shape)}")
    h, w = images.shape[2:]
    if h % a.output_stride or w % a.output_stride:
        raise ContractError(f"image size {h}x{w} not divisible by output stride {a.output_stride}")


def encode_causal(net: CPCANet, images):
    _check_images(net, images)
    return net.enc_c(images)


def encode_bias(net: CPCANet, images):
    _check_images(net, images)
    return net.enc_b(images)


def classify(head: str, net: CPCANet, f):
    d = net.arch.feature_dim
    if f.ndim != 4 or f.shape[1] != 2 * d:
        raise ContractError(f"classifier expects {2 * d} channels, got {tuple(f.shape)}")
    return net.head(head)(f)


def upsample_logits(logits, H: int, W: int):
    """Bilinear upsampling with half-pixel centres (align_corners=False)."""
    h, w = logits.shape[-2:]
    if H % h or W % w or H // h != W // w:
        raise ContractError(f"cannot upsample {h}x{w} to {H}x{W} by an integer factor")
    if (H, W) == (h, w):
        return logits
    return F.interpolate(logits, size=(H, W), mode="bilinear", align_corners=False)


def concat_features(c, b):
    return torch.cat([c, b], dim=1)


def predict_logits(net: CPCANet, images, mode: str = "concat", perm=None):
    """Full-resolution logits of the causal head.

    mode "concat" feeds [C; B], "causal" zeroes the bias channels. ``perm``
    (an index sequence over the batch) swaps bias maps before classification.
    """
    c = encode_causal(net, images)
    if mode == "causal":
        b = torch.zeros_like(c)
    elif mode == "concat":
        b = encode_bias(net, images)
        if perm is not None:
            b = b[torch.as_tensor(perm, dtype=torch.long)]
    else:
        raise ContractError(f"unknown inference mode {mode!r}")
    logits = classify(CAUSAL, net, concat_features(c, b))
    return upsample_logits(logits, images.shape[2], images.shape[3])
