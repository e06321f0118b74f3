"""Generator, segmenter and domain discriminator.

G and S share a small 3-D U-Net body; G emits one linear intensity channel
(optionally added to its input), S a per-voxel softmax over C classes. D is a
strided convolutional classifier over K real domains plus one "generated"
class.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .exceptions import ShapeError, ValidationError


@dataclass
class UNetConfig:
    channels: tuple = (8, 16)
    kernel_size: int = 3
    instance_norm: bool = False
    identity_skip: bool = True

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if not self.channels or min(self.channels) < 1:
            raise ValidationError("U-Net needs at least one positive channel count")
        if self.kernel_size % 2 != 1:
            raise ValidationError("kernel size must be odd")

    @property
    def depth(self):
        """Number of stride-2 downsampling stages."""
        return len(self.channels) - 1


@dataclass
class DiscriminatorConfig:
    channels: tuple = (8, 16, 32)
    negative_slope: float = 0.2
    instance_norm: bool = False

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if not self.channels or min(self.channels) < 1:
            raise ValidationError("discriminator needs at least one positive channel count")


def _conv_block(cin, cout, k, norm):
    layers = [nn.Conv3d(cin, cout, k, padding=k // 2)]
    if norm:
        layers.append(nn.InstanceNorm3d(cout, affine=True))
    layers.append(nn.ReLU())
    layers.append(nn.Conv3d(cout, cout, k, padding=k // 2))
    if norm:
        layers.append(nn.InstanceNorm3d(cout, affine=True))
    layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class UNet3D(nn.Module):
    """Plain 3-D U-Net: conv blocks, stride-2 conv downsampling, transposed-conv
    upsampling with skip concatenation and a final 1x1x1 projection."""

    def __init__(self, in_channels, out_channels, config=None):
        super().__init__()
        self.config = config or UNetConfig()
        ch, k, norm = self.config.channels, self.config.kernel_size, self.config.instance_norm
        self.encoders = nn.ModuleList([_conv_block(in_channels, ch[0], k, norm)])
        self.downs = nn.ModuleList()
        for a, b in zip(ch[:-1], ch[1:]):
            self.downs.append(nn.Sequential(nn.Conv3d(a, b, k, stride=2, padding=k // 2), nn.ReLU()))
            self.encoders.append(_conv_block(b, b, k, norm))
        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for a, b in zip(reversed(ch[:-1]), reversed(ch[1:])):
            self.ups.append(nn.ConvTranspose3d(b, a, 2, stride=2))
            self.decoders.append(_conv_block(2 * a, a, k, norm))
        self.head = nn.Conv3d(ch[0], out_channels, 1)

    def check_input(self, x):
        if x.ndim != 5:
            raise ShapeError(f"expected input of shape (N, C, X, Y, Z), got {tuple(x.shape)}")
        div = 2 ** self.config.depth
        if any(s % div for s in x.shape[2:]):
            raise ShapeError(f"spatial size {tuple(x.shape[2:])} is not divisible by 2**depth = {div}")

    def forward(self, x):
        self.check_input(x)
        skips = []
        h = self.encoders[0](x)
        for down, enc in zip(self.downs, self.encoders[1:]):
            skips.append(h)
            h = enc(down(h))
        for up, dec in zip(self.ups, self.decoders):
            h = dec(torch.cat([up(h), skips.pop()], dim=1))
        return self.head(h)


class Generator(nn.Module):
    """Intensity normalizer ``x -> G(x)``; same shape in and out, one channel."""

    def __init__(self, config=None):
        super().__init__()
        self.config = config or UNetConfig()
        self.unet = UNet3D(1, 1, self.config)

    def forward(self, x):
        if x.ndim != 5 or x.shape[1] != 1:
            raise ShapeError(f"generator expects (N, 1, X, Y, Z), got {tuple(x.shape)}")
        out = self.unet(x)
        return x + out if self.config.identity_skip else out


class Segmenter(nn.Module):
    """Fully convolutional segmenter returning per-voxel class probabilities."""

    def __init__(self, n_classes=4, config=None):
        super().__init__()
        self.n_classes = n_classes
        self.config = config or UNetConfig(identity_skip=False)
        self.unet = UNet3D(1, n_classes, self.config)

    def logits(self, x):
        if x.ndim != 5 or x.shape[1] != 1:
            raise ShapeError(f"segmenter expects (N, 1, X, Y, Z), got {tuple(x.shape)}")
        return self.unet(x)

    def forward(self, x):
        return torch.softmax(self.logits(x), dim=1)


class Discriminator(nn.Module):
    """(K+1)-way patch classifier; index ``K`` (0-based) is the generated class."""

    def __init__(self, n_domains=2, input_size=16, config=None):
        super().__init__()
        self.n_domains = n_domains
        self.input_size = input_size
        self.config = config or DiscriminatorConfig()
        layers, cin = [], 1
        for cout in self.config.channels:
            layers.append(nn.Conv3d(cin, cout, 3, stride=2, padding=1))
            if self.config.instance_norm:
                layers.append(nn.InstanceNorm3d(cout, affine=True))
            layers.append(nn.LeakyReLU(self.config.negative_slope))
            cin = cout
        self.features = nn.Sequential(*layers)
        self.classifier = nn.Linear(cin, n_domains + 1)

    def logits(self, x):
        expected = (1,) + (self.input_size,) * 3
        if x.ndim != 5 or tuple(x.shape[1:]) != expected:
            raise ShapeError(f"discriminator expects (N, {', '.join(map(str, expected))}), got {tuple(x.shape)}")
        h = self.features(x).mean(dim=(2, 3, 4))
        return self.classifier(h)

    def forward(self, x):
        return torch.softmax(self.logits(x), dim=1)


def fan_in(module):
    w = module.weight
    if isinstance(module, nn.Linear):
        return w.shape[1]
    receptive = math.prod(w.shape[2:])
    if isinstance(module, nn.ConvTranspose3d):
        # each output voxel sees in_channels * (kernel / stride) taps
        return w.shape[0] * receptive // math.prod(module.stride)
    return w.shape[1] * receptive


def init_params(module, seed=0):
    """Kaiming-normal weights (variance ``2 / fan_in``), zero biases, unit norm scales.

    Deterministic for a given seed and architecture.
    """
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv3d, nn.ConvTranspose3d, nn.Linear)):
                std = math.sqrt(2.0 / fan_in(m))
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen, dtype=m.weight.dtype) * std)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.InstanceNorm3d) and m.affine:
                m.weight.fill_(1.0)
                m.bias.zero_()
    return module


def build_generator(config=None, seed=0):
    return init_params(Generator(config), seed)


def build_segmenter(n_classes=4, config=None, seed=0):
    return init_params(Segmenter(n_classes, config), seed)


def build_discriminator(n_domains=2, input_size=16, config=None, seed=0):
    return init_params(Discriminator(n_domains, input_size, config), seed)


def param_hash(module):
    """SHA-256 over all parameter bytes in registration order."""
    h = hashlib.sha256()
    for name, p in module.named_parameters():
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def is_kernel(name, param):
    """Convolution/linear weights; biases and norm affine terms are excluded."""
    return name.endswith("weight") and param.ndim > 1


def state_arrays(module, prefix):
    return {f"{prefix}/{k}": v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_state_arrays(module, arrays, prefix):
    state = {k[len(prefix) + 1:]: torch.from_numpy(np.array(v)) for k, v in arrays.items()
             if k.startswith(prefix + "/")}
    module.load_state_dict(state)
    return module


def config_dict(config):
    return asdict(config)


def as_tensor(x, dtype=torch.float32):
    """Patch array ``(n, P, P, P)`` or ``(n, 1, P, P, P)`` -> ``(n, 1, P, P, P)`` tensor."""
    t = torch.as_tensor(np.asarray(x), dtype=dtype)
    if t.ndim == 4:
        t = t.unsqueeze(1)
    return t


def check_finite(t, what="tensor"):
    if not torch.isfinite(t).all():
        raise ValidationError(f"{what} contains non-finite values")
    return t
