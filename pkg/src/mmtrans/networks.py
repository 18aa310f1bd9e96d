"""Network architectures.

All widths accept a uniform multiplier so the same topologies run at desk
scale (e.g. 0.25) or full scale (1.0). Registration heads are
zero-initialized so an untrained network realizes the identity transform.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


def scaled(base: int, width_mult: float) -> int:
    return max(1, int(round(base * width_mult)))


def init_gan_weights(module: nn.Module) -> None:
    """CycleGAN-style init: conv weights ~ N(0, 0.02)."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, 0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class CoarseRegNet(nn.Module):
    """Affine parameter regressor.

    Five 3x3 convs (first stride 2, 2x2 max-pool after convs 2 and 4, each
    followed by batch norm and leaky ReLU) then two fully connected layers.
    Output: 4 numbers decoded as (rotation, log isotropic scale, tx, ty).
    The final layer is zero-initialized, so the untrained net predicts the
    identity transform.
    """

    def __init__(self, image_size: int, width_mult: float = 1.0):
        super().__init__()
        if image_size % 8 != 0:
            raise ValueError(f"image_size must be divisible by 8, got {image_size}")
        f = [scaled(c, width_mult) for c in (32, 64, 64, 64, 64)]
        fc_hidden = scaled(32, width_mult)

        def block(cin, cout, stride=1):
            return [
                nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
                nn.BatchNorm2d(cout),
                nn.LeakyReLU(0.2, inplace=True),
            ]

        layers = block(2, f[0], stride=2)
        layers += block(f[0], f[1]) + [nn.MaxPool2d(2, 2)]
        layers += block(f[1], f[2])
        layers += block(f[2], f[3]) + [nn.MaxPool2d(2, 2)]
        layers += block(f[3], f[4])
        self.features = nn.Sequential(*layers)
        flat = f[4] * (image_size // 8) ** 2
        self.fc1 = nn.Linear(flat, fc_hidden)
        self.act = nn.LeakyReLU(0.2, inplace=True)
        self.fc2 = nn.Linear(fc_hidden, 4)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.features(x)
        h = torch.flatten(h, 1)
        return self.fc2(self.act(self.fc1(h)))


class FineRegNet(nn.Module):
    """U-shaped dense displacement regressor.

    Seven stride-2 encoder convs (filters 32,64,64,64,64,64,64), seven
    decoder convs with skip concatenation (filters 64,...,64,32), then a
    zero-initialized 3x3 conv to a 2-channel field in pixels.
    """

    DOWN = (32, 64, 64, 64, 64, 64, 64)
    UP = (64, 64, 64, 64, 64, 64, 32)

    def __init__(self, width_mult: float = 1.0, in_channels: int = 2):
        super().__init__()
        down_f = [scaled(c, width_mult) for c in self.DOWN]
        up_f = [scaled(c, width_mult) for c in self.UP]
        self.downs = nn.ModuleList()
        prev = in_channels
        for f in down_f:
            self.downs.append(nn.Conv2d(prev, f, 3, stride=2, padding=1))
            prev = f
        self.ups = nn.ModuleList()
        # skips, deepest first: encoder outputs 5..0 then the raw input
        skip_ch = list(reversed(down_f[:-1])) + [in_channels]
        for f, sc in zip(up_f, skip_ch):
            self.ups.append(nn.Conv2d(prev + sc, f, 3, padding=1))
            prev = f
        self.act = nn.LeakyReLU(0.2, inplace=True)
        self.head = nn.Conv2d(prev, 2, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feats = [x]
        h = x
        for down in self.downs:
            h = self.act(down(h))
            feats.append(h)
        for i, up in enumerate(self.ups):
            skip = feats[-(i + 2)]
            h = F.interpolate(h, size=skip.shape[2:], mode="nearest")
            h = self.act(up(torch.cat([h, skip], dim=1)))
        return self.head(h)


class ResnetBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            nn.InstanceNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            nn.InstanceNorm2d(channels),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.block(x)


class ResnetGenerator(nn.Module):
    """CycleGAN-style generator: 7x7 stem, two stride-2 downs, 9 residual
    blocks, two upsampling convs, 7x7 head. ``final='tanh'`` squashes onto
    [-1, 1]; the misalignment detector reuses the same trunk with a
    2-channel input."""

    def __init__(self, in_channels: int = 1, out_channels: int = 1,
                 width_mult: float = 1.0, n_blocks: int = 9, final: str | None = "tanh"):
        super().__init__()
        base = scaled(64, width_mult)
        layers: list[nn.Module] = [
            nn.ReflectionPad2d(3),
            nn.Conv2d(in_channels, base, 7),
            nn.InstanceNorm2d(base),
            nn.ReLU(inplace=True),
        ]
        ch = base
        for _ in range(2):
            layers += [
                nn.Conv2d(ch, ch * 2, 3, stride=2, padding=1),
                nn.InstanceNorm2d(ch * 2),
                nn.ReLU(inplace=True),
            ]
            ch *= 2
        layers += [ResnetBlock(ch) for _ in range(n_blocks)]
        for _ in range(2):
            layers += [
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(ch, ch // 2, 3, padding=1),
                nn.InstanceNorm2d(ch // 2),
                nn.ReLU(inplace=True),
            ]
            ch //= 2
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(ch, out_channels, 7)]
        if final == "tanh":
            layers.append(nn.Tanh())
        elif final is not None:
            raise ValueError(f"unknown final activation {final!r}")
        self.model = nn.Sequential(*layers)
        init_gan_weights(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.model(x)


class PatchDiscriminator(nn.Module):
    """70x70 PatchGAN: C64-C128-C256-C512 then a 1-channel logit map."""

    def __init__(self, in_channels: int = 1, width_mult: float = 1.0):
        super().__init__()
        base = scaled(64, width_mult)
        layers: list[nn.Module] = [
            nn.Conv2d(in_channels, base, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
        ]
        ch = base
        for mult, stride in ((2, 2), (4, 2), (8, 1)):
            layers += [
                nn.Conv2d(ch, base * mult, 4, stride=stride, padding=1),
                nn.InstanceNorm2d(base * mult),
                nn.LeakyReLU(0.2, inplace=True),
            ]
            ch = base * mult
        layers.append(nn.Conv2d(ch, 1, 4, stride=1, padding=1))
        self.model = nn.Sequential(*layers)
        init_gan_weights(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.model(x)


def detector_net(width_mult: float = 1.0) -> ResnetGenerator:
    """Misalignment error detector: the generator trunk with a 2-channel
    stacked-pair input and a 1-channel tanh output (squashed to [0, 1] at
    the call site)."""
    return ResnetGenerator(in_channels=2, out_channels=1, width_mult=width_mult, final="tanh")
