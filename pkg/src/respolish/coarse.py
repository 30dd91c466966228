"""Coarse painter: strided-conv encoder, fully-connected bottleneck, deconv decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
from torch import nn

from .data import ImageTensor, Space
from .nets import SpecError, batch_norm, init_weights, run, to_nhwc


@dataclass(frozen=True)
class CpnSpec:
    input_size: int = 128
    patch_size: int = 64
    encoder_depths: tuple[int, ...] = (64, 128, 256, 512, 512)
    bottleneck_dim: int = 2048
    decoder_depths: tuple[int, ...] = (512, 256, 128, 64)
    lrelu_slope: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "encoder_depths", tuple(self.encoder_depths))
        object.__setattr__(self, "decoder_depths", tuple(self.decoder_depths))

    @property
    def encoded_size(self) -> int:
        return self.input_size >> len(self.encoder_depths)

    @property
    def seed_size(self) -> int:
        """Spatial side of the bottleneck once reshaped for the decoder."""
        return self.patch_size >> (len(self.decoder_depths) + 1)

    @property
    def seed_channels(self) -> int:
        return self.bottleneck_dim // self.seed_size**2

    def validate(self) -> "CpnSpec":
        problems = []
        if not self.encoder_depths:
            problems.append("encoder_depths must not be empty")
        if any(d < 1 for d in self.encoder_depths + self.decoder_depths):
            problems.append("all depths must be >= 1")
        if self.bottleneck_dim < 1:
            problems.append("bottleneck_dim must be >= 1")
        if self.input_size % (1 << len(self.encoder_depths)):
            problems.append(
                f"input_size {self.input_size} is not divisible by 2^{len(self.encoder_depths)}"
            )
        n_up = len(self.decoder_depths) + 1
        if self.patch_size % (1 << n_up) or self.seed_size < 1:
            problems.append(
                f"patch_size {self.patch_size} is not divisible by 2^{n_up} (one doubling per "
                "decoder layer plus the output layer)"
            )
        elif self.bottleneck_dim % self.seed_size**2:
            problems.append(
                f"bottleneck_dim {self.bottleneck_dim} is not divisible by "
                f"{self.seed_size}x{self.seed_size} decoder seed"
            )
        if problems:
            raise SpecError("invalid CpnSpec: " + "; ".join(problems))
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_depths"] = list(self.encoder_depths)
        d["decoder_depths"] = list(self.decoder_depths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CpnSpec":
        return cls(**d)


class CoarsePainter(nn.Module):
    """Maps a masked (N, 3, S, S) image to the (N, 3, P, P) center patch in [-1, 1].

    Encoder: 4x4 stride-2 convs, each followed by BN (skipped on the first
    layer) and leaky ReLU, then one fully-connected layer into the
    bottleneck. Decoder: the bottleneck is reshaped to a small square and grown
    by 4x4 stride-2 transposed convs with BN and ELU; a final transposed conv
    with tanh produces the patch.
    """

    def __init__(self, spec: CpnSpec):
        super().__init__()
        self.spec = spec.validate()
        layers = []
        c_in = 3
        for i, depth in enumerate(spec.encoder_depths):
            layers.append(nn.Conv2d(c_in, depth, 4, stride=2, padding=1))
            if i > 0:
                layers.append(batch_norm(depth))
            layers.append(nn.LeakyReLU(spec.lrelu_slope))
            c_in = depth
        self.encoder = nn.Sequential(*layers)
        self.bottleneck = nn.Linear(c_in * spec.encoded_size**2, spec.bottleneck_dim)

        layers = []
        c_in = spec.seed_channels
        for depth in spec.decoder_depths:
            layers += [
                nn.ConvTranspose2d(c_in, depth, 4, stride=2, padding=1),
                batch_norm(depth),
                nn.ELU(),
            ]
            c_in = depth
        layers += [nn.ConvTranspose2d(c_in, 3, 4, stride=2, padding=1), nn.Tanh()]
        self.decoder = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z = self.bottleneck(self.encoder(x).flatten(1))
        s = self.spec.seed_size
        return self.decoder(z.view(-1, self.spec.seed_channels, s, s))


def build_cpn(spec: CpnSpec, init_seed: int) -> CoarsePainter:
    net = CoarsePainter(spec)
    init_weights(net, init_seed)
    return net


def cpn_forward(net: CoarsePainter, masked: ImageTensor, mode: str = "eval") -> ImageTensor:
    out = run(net, masked, net.spec.input_size, mode, "coarse painter")
    return ImageTensor(to_nhwc(out).astype(masked.data.dtype, copy=False), Space.MODEL)

