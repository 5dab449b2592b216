"""Generator and discriminator builders: FQGA, CycleGAN baselines and hybrids.

Every convolution is preceded by a :class:`PlannedPad` that asks
:func:`sctforge.padding.plan_layer_padding` for a constant pad at run time,
so stride-1 layers keep their input size and stride-2 layers halve it
(rounding up) whatever the incoming height and width.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Any, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from torch import nn

from .errors import ContractError, ParameterError
from .padding import plan_layer_padding

BLUR_KERNEL = np.array(
    [[1 / 16, 1 / 8, 1 / 16],
     [1 / 8, 1 / 4, 1 / 8],
     [1 / 16, 1 / 8, 1 / 16]]
)

KINDS = ("fqga_gen", "fqga_disc", "cyclegan_gen", "cyclegan_disc")

# per-kind defaults; see ArchConfig for the meaning of each entry
DEFAULT_CHANNELS = {
    # c7, c5, down(4x4 s2, 4x4 s1, 3x3 s1, 3x3 s2), up(256, 128)
    "fqga_gen": (64, 128, 128, 128, 256, 256, 256, 128),
    # A/B pair filters, then the 25x25 high-level conv
    "fqga_disc": (32, 64, 128, 256, 512),
    # stem, down1, down2 (= residual width), up1, up2
    "cyclegan_gen": (64, 128, 256, 128, 64),
    "cyclegan_disc": (64, 128, 256, 512),
}
DEFAULT_KERNELS = {
    "fqga_gen": (7, 5, 4, 4, 3, 3, 4, 4, 7),
    "fqga_disc": (2, 3, 4, 5, 3, 5, 7, 9, 25),  # A1..A4, B1..B4, high-level
    "cyclegan_gen": (7, 3, 3, 3, 3, 7),  # stem, down1, down2, up1, up2, out
    "cyclegan_disc": (4, 4, 4, 4, 4),
}


@dataclass
class ArchConfig:
    """Declarative architecture description.

    ``channel_plan`` and ``kernel_plan`` default per ``kind`` (see
    ``DEFAULT_CHANNELS`` / ``DEFAULT_KERNELS``). ``norm`` defaults to instance
    norm for generators and the CycleGAN discriminator, batch norm for the
    FQGA discriminator.
    """

    kind: str
    fqga_layers: int = 1
    resblocks: int = 9
    channel_plan: tuple[int, ...] | None = None
    kernel_plan: tuple[int, ...] | None = None
    norm: str | None = None
    leaky_slope: float = 0.2
    dropout_rate: float = 0.3
    in_channels: int = 1
    out_channels: int = 1
    patch_size: int = 10

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ParameterError(f"unknown architecture kind {self.kind!r}")
        if self.channel_plan is None:
            self.channel_plan = DEFAULT_CHANNELS[self.kind]
        if self.kernel_plan is None:
            self.kernel_plan = DEFAULT_KERNELS[self.kind]
        self.channel_plan = tuple(int(c) for c in self.channel_plan)
        self.kernel_plan = tuple(int(k) for k in self.kernel_plan)
        if self.norm is None:
            self.norm = "batch" if self.kind == "fqga_disc" else "instance"
        if self.norm not in ("instance", "batch"):
            raise ParameterError(f"unknown norm {self.norm!r}")
        if len(self.channel_plan) != len(DEFAULT_CHANNELS[self.kind]):
            raise ParameterError(f"{self.kind} needs {len(DEFAULT_CHANNELS[self.kind])} channel entries")
        if len(self.kernel_plan) != len(DEFAULT_KERNELS[self.kind]):
            raise ParameterError(f"{self.kind} needs {len(DEFAULT_KERNELS[self.kind])} kernel entries")
        if min(self.channel_plan) <= 0 or min(self.kernel_plan) <= 0:
            raise ParameterError("channel and kernel plans must be strictly positive")
        if self.kind == "fqga_gen" and self.fqga_layers not in (1, 2, 3):
            raise ParameterError("fqga_layers must be 1, 2 or 3")
        if self.kind == "cyclegan_gen" and self.resblocks < 0:
            raise ParameterError("resblocks must be non-negative")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ParameterError("dropout_rate must lie in [0, 1)")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["channel_plan"] = list(self.channel_plan)
        d["kernel_plan"] = list(self.kernel_plan)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ArchConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ParameterError(f"unknown ArchConfig keys: {sorted(extra)}")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def cyclegan_m_config(resblocks: int = 9) -> ArchConfig:
    """CycleGAN generator re-planned with the FQGA generator's kernels and filters."""
    return ArchConfig("cyclegan_gen", resblocks=resblocks,
                      channel_plan=(64, 128, 256, 256, 128), kernel_plan=(7, 4, 3, 4, 4, 7))


# --------------------------------------------------------------------------- blur


def gaussian_blur(image: np.ndarray, mode: str = "reflect") -> np.ndarray:
    """Convolve a 2D grid with the fixed 3x3 blur kernel, keeping its size.

    ``mode="reflect"`` mirrors about the edge sample (the border pixel is not
    repeated); ``mode="constant"`` pads with zeros.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or min(image.shape) < 1:
        raise ParameterError("gaussian_blur expects a non-empty 2D grid")
    nd_mode = {"reflect": "mirror", "constant": "constant"}[mode]
    return ndimage.correlate(image, BLUR_KERNEL, mode=nd_mode, cval=0.0)


class GaussianBlur(nn.Module):
    """Fixed, non-trainable blur applied per channel with reflect padding."""

    def __init__(self) -> None:
        super().__init__()
        self.register_buffer("kernel", torch.tensor(BLUR_KERNEL, dtype=torch.float32)[None, None])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        c = x.shape[1]
        x = F.pad(x, (1, 1, 1, 1), mode="reflect")
        return F.conv2d(x, self.kernel.to(x.dtype).expand(c, 1, 3, 3), groups=c)


# --------------------------------------------------------------------------- building blocks


class PlannedPad(nn.Module):
    """Constant pad chosen from the live input size (dynamic per-layer padding)."""

    def __init__(self, kernel: int, stride: int, value: float = 0.0) -> None:
        super().__init__()
        self.kernel, self.stride, self.value = kernel, stride, value

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        spec = plan_layer_padding(self.kernel, self.stride, x.shape[-2:], self.value)
        if spec.total == (0, 0):
            return x
        return F.pad(x, spec.torch_pad(), mode="constant", value=self.value)

    def extra_repr(self) -> str:
        return f"kernel={self.kernel}, stride={self.stride}"


def _norm(kind: str, channels: int) -> nn.Module:
    if kind == "instance":
        return nn.InstanceNorm2d(channels, affine=True)
    return nn.BatchNorm2d(channels)


def conv_block(cin: int, cout: int, kernel: int, stride: int, norm: str | None, slope: float | None,
               dropout: float = 0.0) -> nn.Sequential:
    layers: list[nn.Module] = [PlannedPad(kernel, stride), nn.Conv2d(cin, cout, kernel, stride)]
    if norm:
        layers.append(_norm(norm, cout))
    if slope is not None:
        layers.append(nn.LeakyReLU(slope))
    if dropout > 0:
        layers.append(nn.Dropout(dropout))
    return nn.Sequential(*layers)


def _transpose_padding(kernel: int) -> tuple[int, int]:
    """(padding, output_padding) making a stride-2 transposed conv exactly double the size."""
    pad = math.ceil((kernel - 2) / 2)
    return pad, 2 * pad + 2 - kernel


def up_block(cin: int, cout: int, kernel: int, norm: str, slope: float) -> nn.Sequential:
    pad, out_pad = _transpose_padding(kernel)
    return nn.Sequential(
        nn.ConvTranspose2d(cin, cout, kernel, stride=2, padding=pad, output_padding=out_pad),
        _norm(norm, cout),
        nn.LeakyReLU(slope),
    )


class ResidualBlock(nn.Module):
    """Two 3x3 convs with a skip connection; one of these is an "FQGA layer"."""

    def __init__(self, channels: int, norm: str = "instance", slope: float | None = 0.2,
                 final_activation: bool = True) -> None:
        super().__init__()
        self.body = nn.Sequential(
            conv_block(channels, channels, 3, 1, norm, slope),
            conv_block(channels, channels, 3, 1, norm, slope if final_activation else None),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.body(x)


def init_weights(model: nn.Module, std: float = 0.02) -> nn.Module:
    """Normal(0, std) conv weights, zero biases, unit/zero norm affine parameters."""
    for m in model.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.InstanceNorm2d, nn.BatchNorm2d)) and m.affine:
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
    return model


# --------------------------------------------------------------------------- FQGA


class FQGAGenerator(nn.Module):
    min_size = 16
    size_factor = 4

    def __init__(self, cfg: ArchConfig) -> None:
        super().__init__()
        self.arch = cfg
        c, k, n, s = cfg.channel_plan, cfg.kernel_plan, cfg.norm, cfg.leaky_slope
        self.stem = nn.Sequential(
            conv_block(cfg.in_channels, c[0], k[0], 1, n, s),
            conv_block(c[0], c[1], k[1], 1, n, s),
        )
        self.down = nn.Sequential(
            conv_block(c[1], c[2], k[2], 2, n, s),
            conv_block(c[2], c[3], k[3], 1, n, s),
            conv_block(c[3], c[4], k[4], 1, n, s),
            conv_block(c[4], c[5], k[5], 2, n, s),
        )
        self.bottleneck = nn.Sequential(*[ResidualBlock(c[5], n, s) for _ in range(cfg.fqga_layers)])
        self.up = nn.Sequential(up_block(c[5], c[6], k[6], n, s), up_block(c[6], c[7], k[7], n, s))
        self.head = nn.Sequential(PlannedPad(k[8], 1), nn.Conv2d(c[7], cfg.out_channels, k[8]), nn.Tanh())

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.up(self.bottleneck(self.down(self.stem(x)))))


class PairStack(nn.Module):
    """Four (A, B) pairs: A is a stride-2 conv with dropout, B a size-keeping conv; A + B feeds on."""

    def __init__(self, cin: int, filters: Sequence[int], a_kernels: Sequence[int], b_kernels: Sequence[int],
                 norm: str, slope: float, dropout: float) -> None:
        super().__init__()
        self.a = nn.ModuleList()
        self.b = nn.ModuleList()
        for f, ka, kb in zip(filters, a_kernels, b_kernels):
            self.a.append(conv_block(cin, f, ka, 2, norm, slope, dropout))
            self.b.append(conv_block(f, f, kb, 1, norm, slope))
            cin = f

    def forward(self, x: torch.Tensor, trace: list | None = None) -> torch.Tensor:
        for a, b in zip(self.a, self.b):
            y = a(x)
            x = y + b(y)
            if trace is not None:
                trace.append(tuple(x.shape[-2:]))
        return x


class FQGADiscriminator(nn.Module):
    """Two parallel branches summed into a fixed-size patch map.

    Branch 1 stacks the blurred input on the input; branch 2 runs a wide
    25x25 "high-level" conv and stacks its features on the input. Both go
    through their own :class:`PairStack`; the sum is pooled to a
    ``patch_size`` square and projected to one channel.
    """

    min_size = 16

    def __init__(self, cfg: ArchConfig) -> None:
        super().__init__()
        self.arch = cfg
        f = cfg.channel_plan[:4]
        high = cfg.channel_plan[4]
        ka, kb, kh = cfg.kernel_plan[:4], cfg.kernel_plan[4:8], cfg.kernel_plan[8]
        n, s, p = cfg.norm, cfg.leaky_slope, cfg.dropout_rate
        self.blur = GaussianBlur()
        self.branch1 = PairStack(2 * cfg.in_channels, f, ka, kb, n, s, p)
        self.high_level = conv_block(cfg.in_channels, high, kh, 1, n, s)
        self.branch2 = PairStack(high + cfg.in_channels, f, ka, kb, n, s, p)
        self.pool = nn.AdaptiveAvgPool2d(cfg.patch_size)
        self.head = nn.Conv2d(f[-1], 1, 1)

    def forward(self, x: torch.Tensor, trace: dict | None = None) -> torch.Tensor:
        if min(x.shape[-2:]) < self.min_size:
            raise ParameterError(f"discriminator input {tuple(x.shape[-2:])} smaller than {self.min_size}x{self.min_size}")
        t1 = t2 = None
        if trace is not None:
            t1, t2 = trace.setdefault("branch1", []), trace.setdefault("branch2", [])
        b1 = self.branch1(torch.cat([self.blur(x), x], dim=1), t1)
        b2 = self.branch2(torch.cat([self.high_level(x), x], dim=1), t2)
        return self.head(self.pool(b1 + b2))


# --------------------------------------------------------------------------- CycleGAN


class CycleGANGenerator(nn.Module):
    min_size = 16
    size_factor = 4

    def __init__(self, cfg: ArchConfig) -> None:
        super().__init__()
        self.arch = cfg
        c, k, n, s = cfg.channel_plan, cfg.kernel_plan, cfg.norm, cfg.leaky_slope
        self.stem = conv_block(cfg.in_channels, c[0], k[0], 1, n, s)
        self.down = nn.Sequential(conv_block(c[0], c[1], k[1], 2, n, s), conv_block(c[1], c[2], k[2], 2, n, s))
        self.bottleneck = nn.Sequential(*[ResidualBlock(c[2], n, s, final_activation=False)
                                          for _ in range(cfg.resblocks)])
        self.up = nn.Sequential(up_block(c[2], c[3], k[3], n, s), up_block(c[3], c[4], k[4], n, s))
        self.head = nn.Sequential(PlannedPad(k[5], 1), nn.Conv2d(c[4], cfg.out_channels, k[5]), nn.Tanh())

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.up(self.bottleneck(self.down(self.stem(x)))))


class CycleGANDiscriminator(nn.Module):
    """Patch discriminator: four stride-2 convs then a 1-channel conv."""

    min_size = 16

    def __init__(self, cfg: ArchConfig) -> None:
        super().__init__()
        self.arch = cfg
        c, k, n, s = cfg.channel_plan, cfg.kernel_plan, cfg.norm, cfg.leaky_slope
        layers = [conv_block(cfg.in_channels, c[0], k[0], 2, None, s)]
        for cin, cout, kk in zip(c[:-1], c[1:], k[1:4]):
            layers.append(conv_block(cin, cout, kk, 2, n, s))
        layers += [PlannedPad(k[4], 1), nn.Conv2d(c[-1], 1, k[4])]
        self.model = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if min(x.shape[-2:]) < self.min_size:
            raise ParameterError(f"discriminator input {tuple(x.shape[-2:])} smaller than {self.min_size}x{self.min_size}")
        return self.model(x)


# --------------------------------------------------------------------------- builders


def _checked(cfg: ArchConfig | dict, kinds: tuple[str, ...]) -> ArchConfig:
    if isinstance(cfg, dict):
        cfg = ArchConfig.from_dict(cfg)
    if cfg.kind not in kinds:
        raise ParameterError(f"expected kind in {kinds}, got {cfg.kind!r}")
    return cfg


def build_fqga_generator(cfg: ArchConfig | dict | None = None) -> FQGAGenerator:
    cfg = _checked(cfg or ArchConfig("fqga_gen"), ("fqga_gen",))
    return init_weights(FQGAGenerator(cfg))


def build_fqga_discriminator(cfg: ArchConfig | dict | None = None) -> FQGADiscriminator:
    cfg = _checked(cfg or ArchConfig("fqga_disc"), ("fqga_disc",))
    return init_weights(FQGADiscriminator(cfg))


def build_cyclegan_models(cfg: ArchConfig | dict | None = None, disc_cfg: ArchConfig | dict | None = None
                          ) -> tuple[CycleGANGenerator, CycleGANDiscriminator]:
    """Build a CycleGAN generator/discriminator pair.

    ``cfg`` may describe either member; the other takes its defaults unless
    given explicitly through ``disc_cfg``.
    """
    cfg = _checked(cfg or ArchConfig("cyclegan_gen"), ("cyclegan_gen", "cyclegan_disc"))
    if cfg.kind == "cyclegan_disc":
        gen_cfg, disc = ArchConfig("cyclegan_gen"), cfg
    else:
        gen_cfg, disc = cfg, _checked(disc_cfg or ArchConfig("cyclegan_disc"), ("cyclegan_disc",))
    return init_weights(CycleGANGenerator(gen_cfg)), init_weights(CycleGANDiscriminator(disc))


def build_model(cfg: ArchConfig | dict) -> nn.Module:
    """Build any single network from its config."""
    cfg = _checked(cfg, KINDS)
    if cfg.kind == "fqga_gen":
        return build_fqga_generator(cfg)
    if cfg.kind == "fqga_disc":
        return build_fqga_discriminator(cfg)
    if cfg.kind == "cyclegan_gen":
        return init_weights(CycleGANGenerator(cfg))
    return init_weights(CycleGANDiscriminator(cfg))


def variant(name: str) -> tuple[ArchConfig, ArchConfig]:
    """Generator/discriminator configs for a named model variant.

    ``fqga-single|double|triple``, ``cyclegan``, ``cyclegan-1res``,
    ``cyclegan-m``, ``cyclegan-disc`` (CycleGAN generator + FQGA
    discriminator) and ``cyclegan-gen`` (FQGA generator + CycleGAN
    discriminator).
    """
    table = {
        "fqga-single": (ArchConfig("fqga_gen", fqga_layers=1), ArchConfig("fqga_disc")),
        "fqga-double": (ArchConfig("fqga_gen", fqga_layers=2), ArchConfig("fqga_disc")),
        "fqga-triple": (ArchConfig("fqga_gen", fqga_layers=3), ArchConfig("fqga_disc")),
        "cyclegan": (ArchConfig("cyclegan_gen"), ArchConfig("cyclegan_disc")),
        "cyclegan-1res": (ArchConfig("cyclegan_gen", resblocks=1), ArchConfig("cyclegan_disc")),
        "cyclegan-m": (cyclegan_m_config(), ArchConfig("cyclegan_disc")),
        "cyclegan-disc": (ArchConfig("cyclegan_gen"), ArchConfig("fqga_disc")),
        "cyclegan-gen": (ArchConfig("fqga_gen"), ArchConfig("cyclegan_disc")),
    }
    try:
        return table[name]
    except KeyError:
        raise ParameterError(f"unknown variant {name!r}; choose from {sorted(table)}") from None


# --------------------------------------------------------------------------- counting & inference


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def parameter_table(model: nn.Module) -> list[tuple[str, str, int]]:
    """(module path, layer type, trainable scalars) for every leaf that owns parameters."""
    rows = []
    for name, module in model.named_modules():
        own = [p for p in module.parameters(recurse=False) if p.requires_grad]
        if own:
            rows.append((name, type(module).__name__, sum(p.numel() for p in own)))
    return rows


def generate_sct(model: nn.Module, cbct_slice: np.ndarray | torch.Tensor) -> np.ndarray:
    """Run a generator on one padded CBCT slice (H, W) and return the sCT slice."""
    x = torch.as_tensor(np.asarray(cbct_slice, dtype=np.float32))
    if x.ndim != 2:
        raise ContractError("generate_sct expects a single 2D slice")
    h, w = x.shape
    factor = getattr(model, "size_factor", 4)
    if h % factor or w % factor:
        raise ContractError(f"slice {(h, w)} is not padded to a multiple of {factor}")
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            y = model(x[None, None])
    finally:
        model.train(was_training)
    return y[0, 0].numpy()


class IdentityGenerator(nn.Module):
    """sCT := CBCT; the no-learning baseline."""

    size_factor = 1

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x
