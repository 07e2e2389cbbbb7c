"""U-Net builders for the 2D slice segmenter and the 3D refinement network.

Both are plain encoder/decoder U-Nets: 3x3(x3) convolutions, instance
normalization, leaky ReLU. The 2D net downsamples with max pooling and
upsamples bilinearly; the 3D net uses strided convolutions and transposed
convolutions but never resamples the slice axis, so it accepts stacks of any
depth. In training mode the forward pass also returns deep-supervision
outputs from the highest-resolution decoder levels.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn

from .errors import ConfigError


@dataclass
class NetworkSpec2D:
    in_channels: int = 1
    out_channels: int = 5
    levels: int = 5
    base_width: int = 32
    max_width: int = 512
    negative_slope: float = 0.01
    deep_supervision_levels: Optional[tuple[int, ...]] = None  # None: three finest

    def __post_init__(self):
        if self.levels < 2:
            raise ConfigError("need at least 2 resolution levels")
        if self.deep_supervision_levels is not None:
            bad = [l for l in self.deep_supervision_levels if not 0 <= l < self.levels - 1]
            if bad:
                raise ConfigError(f"deep supervision levels {bad} out of range for "
                                  f"{self.levels}-level network")

    @property
    def ds_levels(self) -> tuple[int, ...]:
        if self.deep_supervision_levels is not None:
            return tuple(self.deep_supervision_levels)
        return tuple(range(min(3, self.levels - 1)))

    def width(self, level: int) -> int:
        return min(self.base_width * (2 ** level), self.max_width)

    @classmethod
    def emidec(cls) -> "NetworkSpec2D":
        return cls(out_channels=5, levels=5)

    @classmethod
    def myops(cls) -> "NetworkSpec2D":
        return cls(out_channels=4, levels=6)


@dataclass
class NetworkSpec3D:
    in_channels: int = 3       # image + scar + MVO channels
    out_channels: int = 5
    levels: int = 4            # in-plane resolution levels; z is never resampled
    base_width: int = 32
    max_width: int = 320
    negative_slope: float = 0.01
    deep_supervision_levels: Optional[tuple[int, ...]] = None

    def __post_init__(self):
        if self.levels < 2:
            raise ConfigError("need at least 2 resolution levels")
        if self.deep_supervision_levels is not None:
            bad = [l for l in self.deep_supervision_levels if not 0 <= l < self.levels - 1]
            if bad:
                raise ConfigError(f"deep supervision levels {bad} out of range for "
                                  f"{self.levels}-level network")

    @property
    def ds_levels(self) -> tuple[int, ...]:
        if self.deep_supervision_levels is not None:
            return tuple(self.deep_supervision_levels)
        return tuple(range(min(3, self.levels - 1)))

    def width(self, level: int) -> int:
        return min(self.base_width * (2 ** level), self.max_width)

    @classmethod
    def emidec(cls) -> "NetworkSpec3D":
        return cls(in_channels=3, out_channels=5)

    @classmethod
    def myops(cls) -> "NetworkSpec3D":
        return cls(in_channels=2, out_channels=4)


def _block2d(cin: int, cout: int, slope: float) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=True),
        nn.InstanceNorm2d(cout, affine=True),
        nn.LeakyReLU(slope, inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, bias=True),
        nn.InstanceNorm2d(cout, affine=True),
        nn.LeakyReLU(slope, inplace=True),
    )


class UNet2d(nn.Module):
    """Slice segmenter: max-pool down, bilinear up, skip connections."""

    def __init__(self, spec: NetworkSpec2D):
        super().__init__()
        self.spec = spec
        w = [spec.width(l) for l in range(spec.levels)]
        self.encoders = nn.ModuleList()
        cin = spec.in_channels
        for l in range(spec.levels):
            self.encoders.append(_block2d(cin, w[l], spec.negative_slope))
            cin = w[l]
        self.pool = nn.MaxPool2d(2)
        self.up = nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False)
        self.decoders = nn.ModuleList()
        for l in range(spec.levels - 2, -1, -1):
            self.decoders.append(_block2d(w[l + 1] + w[l], w[l], spec.negative_slope))
        self.head = nn.Conv2d(w[0], spec.out_channels, 1)
        self.ds_heads = nn.ModuleDict({
            str(l): nn.Conv2d(w[l], spec.out_channels, 1)
            for l in spec.ds_levels if l != 0
        })

    def forward(self, x: torch.Tensor):
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ValueError(f"expected (B, {self.spec.in_channels}, Y, X), "
                             f"got {tuple(x.shape)}")
        factor = 2 ** (self.spec.levels - 1)
        if x.shape[-2] % factor or x.shape[-1] % factor:
            raise ValueError(f"in-plane extent {tuple(x.shape[-2:])} not divisible "
                             f"by {factor} for a {self.spec.levels}-level network")

        skips = []
        for l, enc in enumerate(self.encoders):
            x = enc(self.pool(x) if l > 0 else x)
            skips.append(x)

        decoder_feats = {}
        for dec, l in zip(self.decoders, range(self.spec.levels - 2, -1, -1)):
            x = dec(torch.cat([self.up(x), skips[l]], dim=1))
            decoder_feats[l] = x

        main = self.head(x)
        if self.training and self.ds_heads:
            aux = [self.ds_heads[str(l)](decoder_feats[l])
                   for l in self.spec.ds_levels if l != 0]
            return main, aux
        return main


def _norm_act3d(c: int, slope: float) -> list[nn.Module]:
    return [nn.InstanceNorm3d(c, affine=True), nn.LeakyReLU(slope, inplace=True)]


def _block3d(cin: int, cout: int, slope: float, down: bool = False) -> nn.Sequential:
    # stride only in-plane; the slice axis keeps its resolution everywhere
    stride = (1, 2, 2) if down else (1, 1, 1)
    layers = [nn.Conv3d(cin, cout, 3, stride=stride, padding=1, bias=True)]
    layers += _norm_act3d(cout, slope)
    layers += [nn.Conv3d(cout, cout, 3, padding=1, bias=True)]
    layers += _norm_act3d(cout, slope)
    return nn.Sequential(*layers)


class UNet3d(nn.Module):
    """Volume refiner: strided-conv down, transposed-conv up, z untouched."""

    def __init__(self, spec: NetworkSpec3D):
        super().__init__()
        self.spec = spec
        w = [spec.width(l) for l in range(spec.levels)]
        self.encoders = nn.ModuleList()
        cin = spec.in_channels
        for l in range(spec.levels):
            self.encoders.append(_block3d(cin, w[l], spec.negative_slope, down=l > 0))
            cin = w[l]
        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for l in range(spec.levels - 2, -1, -1):
            self.ups.append(nn.ConvTranspose3d(w[l + 1], w[l + 1], kernel_size=(1, 2, 2),
                                               stride=(1, 2, 2)))
            self.decoders.append(_block3d(w[l + 1] + w[l], w[l], spec.negative_slope))
        self.head = nn.Conv3d(w[0], spec.out_channels, 1)
        self.ds_heads = nn.ModuleDict({
            str(l): nn.Conv3d(w[l], spec.out_channels, 1)
            for l in spec.ds_levels if l != 0
        })

    def forward(self, x: torch.Tensor):
        if x.ndim != 5 or x.shape[1] != self.spec.in_channels:
            raise ValueError(f"expected (B, {self.spec.in_channels}, D, Y, X), "
                             f"got {tuple(x.shape)}")
        factor = 2 ** (self.spec.levels - 1)
        if x.shape[-2] % factor or x.shape[-1] % factor:
            raise ValueError(f"in-plane extent {tuple(x.shape[-2:])} not divisible "
                             f"by {factor} for a {self.spec.levels}-level network")

        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)

        decoder_feats = {}
        for up, dec, l in zip(self.ups, self.decoders,
                              range(self.spec.levels - 2, -1, -1)):
            x = dec(torch.cat([up(x), skips[l]], dim=1))
            decoder_feats[l] = x

        main = self.head(x)
        if self.training and self.ds_heads:
            aux = [self.ds_heads[str(l)](decoder_feats[l])
                   for l in self.spec.ds_levels if l != 0]
            return main, aux
        return main


def build_network(spec, seed: Optional[int] = None) -> nn.Module:
    """Instantiate a network from its spec; a fixed seed gives identical weights."""
    if seed is not None:
        torch.manual_seed(seed)
    if isinstance(spec, NetworkSpec2D):
        return UNet2d(spec)
    if isinstance(spec, NetworkSpec3D):
        return UNet3d(spec)
    raise ConfigError(f"unknown network spec type {type(spec).__name__}")


def max_levels(extent: int) -> int:
    """Largest level count whose downsampling chain still divides `extent`."""
    levels = 1
    while extent % 2 == 0 and extent > 2:
        extent //= 2
        levels += 1
    return levels


def _spec_to_json(spec) -> str:
    d = asdict(spec)
    d["kind"] = "2d" if isinstance(spec, NetworkSpec2D) else "3d"
    return json.dumps(d, sort_keys=True)


def spec_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind")
    if d.get("deep_supervision_levels") is not None:
        d["deep_supervision_levels"] = tuple(d["deep_supervision_levels"])
    cls = NetworkSpec2D if kind == "2d" else NetworkSpec3D
    return cls(**d)


def save_checkpoint(path: str | Path, net: nn.Module, spec) -> None:
    torch.save({"spec": _spec_to_json(spec), "state_dict": net.state_dict()}, str(path))


def load_checkpoint(path: str | Path, expected_spec=None) -> tuple[nn.Module, object]:
    """Rebuild a network from a checkpoint.

    When `expected_spec` is given it must match the spec stored in the file.
    """
    payload = torch.load(str(path), map_location="cpu", weights_only=False)
    spec = spec_from_dict(json.loads(payload["spec"]))
    if expected_spec is not None and _spec_to_json(expected_spec) != payload["spec"]:
        raise ConfigError(f"checkpoint {path} was produced by a different network spec")
    net = build_network(spec)
    net.load_state_dict(payload["state_dict"])
    net.eval()
    return net, spec
