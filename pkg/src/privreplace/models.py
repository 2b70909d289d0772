"""Filter, generator and classifier networks, plus privatization mechanisms."""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Callable, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.models.resnet import BasicBlock, ResNet

from .core import IMAGE_NOISE, SyntheticPrior, sample_synthetic_attribute

EMBED_DIM = 128
LOGIT_FLOOR = 1e-3


def _mlp(sizes: Sequence[int]) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(nn.Linear(a, b))
        if i < len(sizes) - 2:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


def reset_module(module: nn.Module) -> None:
    """Re-draw parameters from the global torch RNG, honoring custom initializers."""
    if hasattr(module, "reset_parameters"):
        module.reset_parameters()
        return
    for child in module.children():
        reset_module(child)


class _ResidualMLP(nn.Module):
    # residual maps start near the identity: output layer scaled by out_scale
    def reset_parameters(self):
        for child in self.net.children():
            reset_module(child)
        if self.residual:
            last = self.net[-1]
            with torch.no_grad():
                last.weight.mul_(self.out_scale)
                last.bias.zero_()


class MLPFilter(_ResidualMLP):
    """x' = x + net([x, z]) for vector data (x' = net([x, z]) when not residual)."""

    def __init__(self, dim=2, z_dim=2, hidden=(128, 128, 128), residual=True, out_scale=0.01):
        super().__init__()
        self.arch = dict(family="mlp_filter", dim=dim, z_dim=z_dim, hidden=list(hidden),
                         residual=residual, out_scale=out_scale)
        self.z_dim = z_dim
        self.residual = residual
        self.out_scale = out_scale
        self.net = _mlp([dim + z_dim, *hidden, dim])
        self.reset_parameters()

    def forward(self, x, z):
        out = self.net(torch.cat([x, z], dim=1))
        return x + out if self.residual else out


class MLPGenerator(_ResidualMLP):
    def __init__(self, dim=2, z_dim=2, hidden=(128, 128, 128), embed_dim=8, residual=True, out_scale=0.01):
        super().__init__()
        self.arch = dict(
            family="mlp_generator", dim=dim, z_dim=z_dim, hidden=list(hidden),
            embed_dim=embed_dim, residual=residual, out_scale=out_scale,
        )
        self.z_dim = z_dim
        self.residual = residual
        self.out_scale = out_scale
        self.embed = nn.Embedding(2, embed_dim)
        self.net = _mlp([dim + embed_dim + z_dim, *hidden, dim])
        self.reset_parameters()

    def reset_parameters(self):
        self.embed.reset_parameters()
        super().reset_parameters()

    def forward(self, x, s, z):
        out = self.net(torch.cat([x, self.embed(s.long()), z], dim=1))
        return x + out if self.residual else out


class MLPClassifier(nn.Module):
    """Logits over ``n_classes``; use :func:`probabilities` for the probability head."""

    def __init__(self, dim=2, n_classes=2, hidden=(128, 128, 128)):
        super().__init__()
        self.arch = dict(family="mlp_classifier", dim=dim, n_classes=n_classes, hidden=list(hidden))
        self.n_classes = n_classes
        self.net = _mlp([dim, *hidden, n_classes])

    def forward(self, x):
        return self.net(x)


@dataclass
class Nets:
    filter: Optional[nn.Module] = None
    generator: Optional[nn.Module] = None
    filter_adversary: Optional[nn.Module] = None
    generator_discriminator: Optional[nn.Module] = None

    def items(self):
        for f in fields(self):
            m = getattr(self, f.name)
            if m is not None:
                yield f.name, m


def build_mlp_family(hidden_sizes=(128, 128, 128), z_dims=(16, 16), dim=2, residual=True) -> Nets:
    return Nets(
        MLPFilter(dim, z_dims[0], hidden_sizes, residual),
        MLPGenerator(dim, z_dims[1], hidden_sizes, residual=residual),
        MLPClassifier(dim, 2, hidden_sizes),
        MLPClassifier(dim, 3, hidden_sizes),
    )


# -- image family ------------------------------------------------------------

class ConvBlock(nn.Sequential):
    """(conv3x3 -> batchnorm -> relu) twice."""

    def __init__(self, cin, cout):
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=1, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
        )


class UNet(nn.Module):
    """UNet with noise (and optionally an embedded class label) joined at the bottleneck.

    Called as ``f(x, z)`` when unconditional and ``g(x, s, z)`` when conditional.
    With ``residual`` the head predicts a logit-space correction to the input,
    scaled down at init so the network starts close to the identity.
    """

    def __init__(self, in_channels=3, image_size=64, conditional=False, base_channels=64,
                 depth=None, z_dim=IMAGE_NOISE.z1_dim, residual=True, out_scale=0.01):
        super().__init__()
        if residual and in_channels != 3:
            raise ValueError("residual output needs a 3-channel input")
        if depth is None:
            depth = 3 if image_size <= 32 else 4
        if image_size % (2 ** depth):
            raise ValueError(f"image size {image_size} not divisible by 2^{depth}")
        self.arch = dict(
            family="unet", in_channels=in_channels, image_size=image_size, conditional=conditional,
            base_channels=base_channels, depth=depth, z_dim=z_dim, residual=residual, out_scale=out_scale,
        )
        self.residual = residual
        self.out_scale = out_scale
        self.conditional = conditional
        self.z_dim = z_dim
        chans = [base_channels * 2 ** i for i in range(depth)]
        self.down = nn.ModuleList()
        cin = in_channels
        for c in chans:
            self.down.append(ConvBlock(cin, c))
            cin = c
        self.bottleneck = ConvBlock(chans[-1], chans[-1])
        self.bottom = image_size // 2 ** depth
        area = self.bottom * self.bottom
        self.noise_proj = nn.Linear(z_dim, chans[-1] * area)
        joined = 2 * chans[-1]
        if conditional:
            self.embed = nn.Embedding(2, EMBED_DIM)
            self.label_proj = nn.Linear(EMBED_DIM, area)
            joined += 1
        self.up = nn.ModuleList()
        cin = joined
        for c in reversed(chans):
            self.up.append(ConvBlock(cin + c, c))
            cin = c
        self.head = nn.Conv2d(chans[0], 3, 1)
        self.reset_parameters()

    def reset_parameters(self):
        for child in self.children():
            reset_module(child)
        if self.residual:
            with torch.no_grad():
                self.head.weight.mul_(self.out_scale)
                self.head.bias.zero_()

    def forward(self, x, *args):
        if self.conditional:
            s, z = args
        else:
            (z,) = args
        skips = []
        h = x
        for block in self.down:
            h = block(h)
            skips.append(h)
            h = F.max_pool2d(h, 2)
        h = self.bottleneck(h)
        n = x.shape[0]
        parts = [h, self.noise_proj(z).view(n, -1, self.bottom, self.bottom)]
        if self.conditional:
            parts.append(self.label_proj(self.embed(s.long())).view(n, 1, self.bottom, self.bottom))
        h = torch.cat(parts, dim=1)
        for block, skip in zip(self.up, reversed(skips)):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = block(torch.cat([h, skip], dim=1))
        out = self.head(h)
        if self.residual:
            # correction in logit space keeps outputs in (0, 1) and starts near x
            out = out + torch.logit(x.clamp(LOGIT_FLOOR, 1 - LOGIT_FLOOR))
        return torch.sigmoid(out)


def build_unet(in_channels=3, image_size=64, conditional=False, base_channels=64, z_dim=IMAGE_NOISE.z1_dim,
               residual=True) -> UNet:
    if image_size not in (32, 64, 128):
        raise ValueError(f"image_size must be 32, 64 or 128, got {image_size}")
    return UNet(in_channels, image_size, conditional, base_channels, z_dim=z_dim, residual=residual)


class ResNetClassifier(nn.Module):
    """ResNet-18 (two blocks per stage) or ResNet-10 (one block per stage)."""

    def __init__(self, depth=18, n_classes=2, image_size=64):
        super().__init__()
        blocks = {18: [2, 2, 2, 2], 10: [1, 1, 1, 1]}
        if depth not in blocks:
            raise ValueError(f"depth must be 10 or 18, got {depth}")
        self.arch = dict(family="resnet", depth=depth, n_classes=n_classes, image_size=image_size)
        self.n_classes = n_classes
        self.net = ResNet(BasicBlock, blocks[depth], num_classes=n_classes)

    def forward(self, x):
        return self.net(x)


def build_resnet(depth=18, n_classes=2, image_size=64) -> ResNetClassifier:
    return ResNetClassifier(depth, n_classes, image_size)


def build_image_family(image_size=64, base_channels=64, z_dim=IMAGE_NOISE.z1_dim) -> Nets:
    return Nets(
        build_unet(3, image_size, False, base_channels, z_dim),
        build_unet(3, image_size, True, base_channels, z_dim),
        build_resnet(18, 2, image_size),
        build_resnet(10, 3, image_size),
    )


_FAMILIES = {
    "mlp_filter": MLPFilter,
    "mlp_generator": MLPGenerator,
    "mlp_classifier": MLPClassifier,
    "unet": UNet,
    "resnet": ResNetClassifier,
}


def build_from_arch(arch: dict) -> nn.Module:
    arch = dict(arch)
    family = arch.pop("family")
    if family not in _FAMILIES:
        raise ValueError(f"unknown model family {family!r}")
    if "hidden" in arch:
        arch["hidden"] = tuple(arch["hidden"])
    return _FAMILIES[family](**arch)


def probabilities(model: nn.Module, x: torch.Tensor) -> torch.Tensor:
    return torch.softmax(model(x), dim=-1)


# -- mechanisms ----------------------------------------------------------------

MECHANISM_KINDS = ("identity", "filter", "generator", "ours", "function")


class Mechanism:
    """A censoring map h(x), stochastic unless it is the identity.

    ``kind`` selects the composition: the filter alone (baselines), the
    generator alone (ablation), generator after filter (ours), the identity,
    or an arbitrary deterministic ``fn`` (reference mechanisms in tests).
    """

    def __init__(self, kind: str, filter=None, generator=None, prior: SyntheticPrior = SyntheticPrior(),
                 fn: Optional[Callable] = None):
        if kind not in MECHANISM_KINDS:
            raise ValueError(f"unknown mechanism kind {kind!r}")
        if kind in ("filter", "ours") and filter is None:
            raise ValueError(f"{kind} mechanism needs a filter")
        if kind in ("generator", "ours") and generator is None:
            raise ValueError(f"{kind} mechanism needs a generator")
        if kind == "function" and fn is None:
            raise ValueError("function mechanism needs fn")
        self.kind = kind
        self.filter = filter
        self.generator = generator
        self.prior = prior
        self.fn = fn

    @classmethod
    def for_mode(cls, mode: str, nets: Nets, prior: SyntheticPrior = SyntheticPrior()) -> "Mechanism":
        if mode.startswith("baseline"):
            return cls("filter", filter=nets.filter)
        if mode == "generator_only":
            return cls("generator", generator=nets.generator, prior=prior)
        return cls("ours", filter=nets.filter, generator=nets.generator, prior=prior)

    @classmethod
    def identity(cls) -> "Mechanism":
        return cls("identity")

    @property
    def synthesizes(self) -> bool:
        return self.kind in ("generator", "ours")

    @torch.no_grad()
    def censor(self, x: torch.Tensor, rng: torch.Generator):
        """Return (h(x), s') with fresh noise and s' per call; s' is None for non-generating kinds."""
        if self.kind == "identity":
            return x.clone(), None
        if self.kind == "function":
            return self.fn(x), None
        n = x.shape[0]
        out = x
        if self.filter is not None and self.kind in ("filter", "ours"):
            self.filter.eval()
            z1 = torch.randn(n, self.filter.z_dim, generator=rng, dtype=x.dtype)
            out = self.filter(out, z1)
        s_synth = None
        if self.generator is not None and self.kind in ("generator", "ours"):
            self.generator.eval()
            z2 = torch.randn(n, self.generator.z_dim, generator=rng, dtype=x.dtype)
            s_synth = sample_synthetic_attribute(self.prior, rng, n)
            out = self.generator(out, s_synth, z2)
        return out, s_synth

    def __call__(self, x, rng):
        return forward_mechanism(self, x, rng)


def forward_mechanism(mech: Mechanism, x: torch.Tensor, rng: torch.Generator) -> torch.Tensor:
    out, _ = mech.censor(x, rng)
    if out.shape != x.shape:
        raise ValueError(f"mechanism changed shape {tuple(x.shape)} -> {tuple(out.shape)}")
    return out


def censor_all(mech: Mechanism, x: torch.Tensor, rng: torch.Generator, batch_size: int = 512):
    """Censor a whole tensor in chunks; returns (outputs, s' or None)."""
    outs, synth = [], []
    for i in range(0, len(x), batch_size):
        o, s = mech.censor(x[i:i + batch_size], rng)
        outs.append(o)
        if s is not None:
            synth.append(s)
    if not outs:
        return x.clone(), (torch.zeros(0, dtype=torch.long) if mech.synthesizes else None)
    return torch.cat(outs), (torch.cat(synth) if synth else None)
