"""
Neural networks used by BridgePure.

Denoisers map (x_t, x_end, time feature) to an image of the same shape as x_t;
classifiers are the models retrained by the evaluation harness.
"""
import logging
import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from errors import ConfigurationError

logger = logging.getLogger(__name__)


class SinusoidalTimeEmbedding(nn.Module):
    """Sine/cosine features of a (B,) time feature."""

    def __init__(self, dim):
        super().__init__()
        self.dim = dim

    def forward(self, t):
        half = self.dim // 2
        freqs = torch.exp(
            torch.arange(half, device=t.device, dtype=torch.float32) * -(math.log(10000.0) / max(half - 1, 1))
        )
        args = t.float()[:, None] * freqs[None, :]
        emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
        if self.dim % 2 == 1:
            emb = F.pad(emb, (0, 1))
        return emb


def _groups(channels, preferred=8):
    g = min(preferred, channels)
    while channels % g:
        g -= 1
    return g


class ResidualBlock(nn.Module):
    """GroupNorm/SiLU residual block, time-conditioned through scale and shift."""

    def __init__(self, in_ch, out_ch, emb_dim, dropout=0.0):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb = nn.Sequential(nn.SiLU(), nn.Linear(emb_dim, out_ch * 2))
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.dropout = nn.Dropout(dropout)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.emb(emb).chunk(2, dim=1)
        h = self.norm2(h) * (1 + scale[:, :, None, None]) + shift[:, :, None, None]
        h = self.conv2(self.dropout(F.silu(h)))
        return h + self.skip(x)


class BridgeUNet(nn.Module):
    """
    Small U-shaped denoiser. x_end is concatenated with x_t on the channel
    axis; the time feature enters every residual block.
    """

    def __init__(self, channels=3, base_channels=32, channel_mults=(1, 2, 2),
                 num_res_blocks=1, emb_dim=64, dropout=0.0):
        super().__init__()
        self.channels = channels
        self.time_emb = nn.Sequential(
            SinusoidalTimeEmbedding(emb_dim),
            nn.Linear(emb_dim, emb_dim * 4),
            nn.SiLU(),
            nn.Linear(emb_dim * 4, emb_dim * 4),
        )
        emb_out = emb_dim * 4
        self.in_conv = nn.Conv2d(2 * channels, base_channels, 3, padding=1)

        self.downs = nn.ModuleList()
        skip_channels = [base_channels]
        ch = base_channels
        for i, mult in enumerate(channel_mults):
            out_ch = base_channels * mult
            for _ in range(num_res_blocks):
                self.downs.append(ResidualBlock(ch, out_ch, emb_out, dropout))
                ch = out_ch
                skip_channels.append(ch)
            if i != len(channel_mults) - 1:
                self.downs.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
                skip_channels.append(ch)

        self.mid1 = ResidualBlock(ch, ch, emb_out, dropout)
        self.mid2 = ResidualBlock(ch, ch, emb_out, dropout)

        self.ups = nn.ModuleList()
        for i, mult in reversed(list(enumerate(channel_mults))):
            out_ch = base_channels * mult
            for _ in range(num_res_blocks + 1):
                self.ups.append(ResidualBlock(ch + skip_channels.pop(), out_ch, emb_out, dropout))
                ch = out_ch
            if i != 0:
                self.ups.append(nn.Upsample(scale_factor=2, mode='nearest'))

        self.out_norm = nn.GroupNorm(_groups(ch), ch)
        self.out_conv = nn.Conv2d(ch, channels, 3, padding=1)
        self.downsamplings = len(channel_mults) - 1

    def forward(self, x_t, x_end, t_feature):
        if x_t.shape != x_end.shape:
            raise ConfigurationError(f"x_t {tuple(x_t.shape)} and x_end {tuple(x_end.shape)} differ")
        size = x_t.shape[-1]
        if size % (2 ** self.downsamplings):
            raise ConfigurationError(f"image size {size} is not divisible by {2 ** self.downsamplings}")
        emb = self.time_emb(t_feature)
        h = self.in_conv(torch.cat([x_t, x_end], dim=1))
        skips = [h]
        for layer in self.downs:
            h = layer(h, emb) if isinstance(layer, ResidualBlock) else layer(h)
            skips.append(h)
        h = self.mid2(self.mid1(h, emb), emb)
        for layer in self.ups:
            if isinstance(layer, ResidualBlock):
                h = layer(torch.cat([h, skips.pop()], dim=1), emb)
            else:
                h = layer(h)
        return self.out_conv(F.silu(self.out_norm(h)))


class BridgeMLP(nn.Module):
    """Two hidden-layer perceptron over flat (B, D) inputs."""

    def __init__(self, dim=1, hidden=64, emb_dim=16):
        super().__init__()
        self.dim = dim
        self.time_emb = SinusoidalTimeEmbedding(emb_dim)
        self.net = nn.Sequential(
            nn.Linear(2 * dim + emb_dim, hidden),
            nn.SiLU(),
            nn.Linear(hidden, hidden),
            nn.SiLU(),
            nn.Linear(hidden, dim),
        )

    def forward(self, x_t, x_end, t_feature):
        shape = x_t.shape
        flat_t = x_t.reshape(shape[0], -1)
        flat_end = x_end.reshape(shape[0], -1)
        if flat_t.shape[1] != self.dim or flat_end.shape != flat_t.shape:
            raise ConfigurationError(f"BridgeMLP expects {self.dim} features per sample, got {tuple(shape)}")
        emb = self.time_emb(t_feature).to(flat_t.dtype)
        out = self.net(torch.cat([flat_t, flat_end, emb], dim=1))
        return out.reshape(shape)


# --- Classifiers ----------------------------------------------------------

class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, in_planes, planes, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_planes, planes, 1, stride=stride, bias=False),
                nn.BatchNorm2d(planes),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class CompactResNet(nn.Module):
    """CIFAR-style residual network with configurable width and depth."""

    def __init__(self, channels=3, num_classes=10, widths=(32, 64, 128), blocks_per_stage=2):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, widths[0], 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(widths[0])
        layers = []
        in_planes = widths[0]
        for i, width in enumerate(widths):
            for j in range(blocks_per_stage):
                stride = 2 if (i > 0 and j == 0) else 1
                layers.append(BasicBlock(in_planes, width, stride))
                in_planes = width
        self.layers = nn.Sequential(*layers)
        self.linear = nn.Linear(in_planes, num_classes)

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.layers(out)
        out = F.adaptive_avg_pool2d(out, 1).flatten(1)
        return self.linear(out)


DENOISERS = {
    'unet': BridgeUNet,
    'mlp': BridgeMLP,
}


def build_denoiser(name, **kwargs):
    if name not in DENOISERS:
        raise ConfigurationError(f"unknown denoiser '{name}' (choose from {sorted(DENOISERS)})")
    net = DENOISERS[name](**kwargs)
    logger.debug(f"Built {name} denoiser with {count_parameters(net):,} parameters")
    return net


def build_classifier(name, channels, num_classes):
    if name == 'resnet':
        return CompactResNet(channels=channels, num_classes=num_classes)
    if name == 'resnet-small':
        return CompactResNet(channels=channels, num_classes=num_classes, widths=(16, 32, 64), blocks_per_stage=1)
    raise ConfigurationError(f"unknown torch classifier '{name}'")


def count_parameters(module):
    return sum(p.numel() for p in module.parameters())
