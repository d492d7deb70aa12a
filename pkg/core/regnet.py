"""
UNet-style registration network g(moving, fixed) -> displacement field.

Encoder: stride-2 convolutions (kernel 3 per axis) with LeakyReLU, one per
level. Decoder: convolution, nearest-neighbour upsampling and concatenation
with the matching encoder level (the raw 2-channel input at full
resolution), then extra full-resolution convolutions and a final
convolution emitting one displacement channel per spatial axis.
"""

from typing import List, Sequence

import torch
import torch.nn as nn

from core.configs import RegNetConfig
from core.volume import Volume, as_batch
from core.warp import DisplacementField

CONV_LAYERS = {2: nn.Conv2d, 3: nn.Conv3d}
FLOW_INIT_STD = 1e-5


class UNetBackbone(nn.Module):
    """Shared encoder/decoder; returns full-resolution features."""

    def __init__(
        self,
        ndim: int,
        in_channels: int,
        enc_filters: Sequence[int],
        dec_filters: Sequence[int],
        levels: int,
        leaky_slope: float,
    ):
        super().__init__()
        if ndim not in CONV_LAYERS:
            raise ValueError(f"only 2D and 3D networks are supported, got ndim={ndim}")
        conv = CONV_LAYERS[ndim]
        self.ndim = ndim
        self.levels = levels
        self.act = nn.LeakyReLU(leaky_slope)
        self.upsample = nn.Upsample(scale_factor=2, mode="nearest")

        self.encoder = nn.ModuleList()
        prev = in_channels
        skip_channels: List[int] = [in_channels]
        for nf in enc_filters:
            self.encoder.append(conv(prev, nf, kernel_size=3, stride=2, padding=1))
            prev = nf
            skip_channels.append(nf)

        # decoder stage i runs at 1/2^(levels-i) resolution, then upsamples
        self.decoder = nn.ModuleList()
        for i in range(levels):
            nf = dec_filters[i]
            self.decoder.append(conv(prev, nf, kernel_size=3, padding=1))
            prev = nf + skip_channels[levels - 1 - i]

        self.extras = nn.ModuleList()
        for nf in dec_filters[levels:]:
            self.extras.append(conv(prev, nf, kernel_size=3, padding=1))
            prev = nf
        self.out_channels = prev

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skips = [x]
        for layer in self.encoder:
            x = self.act(layer(x))
            skips.append(x)
        skips.pop()  # deepest level feeds the decoder directly
        for layer in self.decoder:
            x = self.act(layer(x))
            x = self.upsample(x)
            x = torch.cat([x, skips.pop()], dim=1)
        for layer in self.extras:
            x = self.act(layer(x))
        return x


class RegNet(nn.Module):
    def __init__(self, cfg: RegNetConfig):
        super().__init__()
        self.cfg = cfg
        ndim = len(cfg.inshape)
        self.unet = UNetBackbone(
            ndim, 2, cfg.enc_filters, cfg.dec_filters, cfg.levels, cfg.leaky_slope,
        )
        self.flow = CONV_LAYERS[ndim](self.unet.out_channels, ndim, kernel_size=3, padding=1)
        # start near the identity warp
        nn.init.normal_(self.flow.weight, mean=0.0, std=FLOW_INIT_STD)
        nn.init.zeros_(self.flow.bias)

    def forward(self, moving: torch.Tensor, fixed: torch.Tensor) -> torch.Tensor:
        expected = tuple(self.cfg.inshape)
        for name, t in (("moving", moving), ("fixed", fixed)):
            if tuple(t.shape[2:]) != expected or t.shape[1] != 1:
                raise ValueError(
                    f"{name} input shape {tuple(t.shape[1:])} does not match the network's (1, *{expected})"
                )
        x = torch.cat([moving, fixed], dim=1)
        return self.flow(self.unet(x))


def build_regnet(cfg: RegNetConfig, seed: int = 0) -> RegNet:
    """Deterministic construction; the global torch RNG is left untouched."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return RegNet(cfg)


def reg_forward(params: RegNet, moving: Volume, fixed: Volume) -> DisplacementField:
    if moving.shape != fixed.shape:
        raise ValueError(f"shape mismatch: moving {moving.shape} vs fixed {fixed.shape}")
    dtype = next(params.parameters()).dtype
    with torch.no_grad():
        flow = params(as_batch(moving, dtype=dtype), as_batch(fixed, dtype=dtype))
    return DisplacementField(flow[0].numpy())


def internal_resolutions(cfg: RegNetConfig) -> List[tuple]:
    """Spatial shapes after each encoder level."""
    return [tuple(n // 2 ** (i + 1) for n in cfg.inshape) for i in range(cfg.levels)]


def parameter_shapes(net: nn.Module) -> dict:
    return {name: tuple(p.shape) for name, p in net.named_parameters()}
