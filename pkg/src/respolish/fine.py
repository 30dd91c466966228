"""Fine painter: a stride-free conv stack that predicts a residual for the coarse patch."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .data import ImageTensor, Space
from .nets import SpecError, batch_norm, init_weights, run, to_nhwc

ACTIVATIONS = {"relu": nn.ReLU, "lrelu": lambda: nn.LeakyReLU(0.2), "elu": nn.ELU}


@dataclass(frozen=True)
class FpnSpec:
    patch_size: int = 64
    num_layers: int = 6
    width: int = 64
    kernel: int = 3
    use_batch_norm: bool = True
    activation: str = "relu"

    def validate(self) -> "FpnSpec":
        problems = []
        if self.num_layers < 2:
            problems.append("num_layers must be >= 2")
        if self.kernel < 1 or self.kernel % 2 == 0:
            problems.append(f"kernel must be odd, got {self.kernel}")
        if self.width < 1:
            problems.append("width must be >= 1")
        if self.patch_size < 1:
            problems.append("patch_size must be >= 1")
        if self.activation not in ACTIVATIONS:
            problems.append(f"activation must be one of {sorted(ACTIVATIONS)}")
        if problems:
            raise SpecError("invalid FpnSpec: " + "; ".join(problems))
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FpnSpec":
        return cls(**d)


class FinePainter(nn.Module):
    """Residual predictor. ``forward`` returns ``(residual, polished)``.

    The last conv starts at zero, so a fresh network returns a zero residual
    and the polished patch equals its input.
    """

    def __init__(self, spec: FpnSpec):
        super().__init__()
        self.spec = spec.validate()
        pad = spec.kernel // 2
        layers = []
        c_in = 3
        for _ in range(spec.num_layers - 1):
            layers.append(nn.Conv2d(c_in, spec.width, spec.kernel, padding=pad))
            if spec.use_batch_norm:
                layers.append(batch_norm(spec.width))
            layers.append(ACTIVATIONS[spec.activation]())
            c_in = spec.width
        self.body = nn.Sequential(*layers)
        self.head = nn.Conv2d(c_in, 3, spec.kernel, padding=pad)

    def residual(self, coarse: torch.Tensor) -> torch.Tensor:
        return self.head(self.body(coarse))

    def forward(self, coarse: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        r = self.residual(coarse)
        return r, torch.clamp(coarse + r, -1.0, 1.0)


def build_fpn(spec: FpnSpec, init_seed: int) -> FinePainter:
    net = FinePainter(spec)
    init_weights(net, init_seed)
    with torch.no_grad():
        net.head.weight.zero_()
        net.head.bias.zero_()
    return net


def fpn_forward(net: FinePainter, coarse: ImageTensor, mode: str = "eval"):
    """Polish a model-space patch batch; returns ``(r, y)``.

    ``r`` is a raw NHWC array (it is a difference, not an image); ``y`` is the
    clamped polished ImageTensor.
    """
    if coarse.size != (net.spec.patch_size, net.spec.patch_size):
        raise SpecError(f"fine painter expects {net.spec.patch_size}px patches, got {coarse.size}")
    r, _ = run(net, coarse, net.spec.patch_size, mode, "fine painter")
    # compose in the caller's precision so a zero residual is an exact identity
    r = to_nhwc(r).astype(coarse.data.dtype)
    return r, ImageTensor(np.clip(coarse.data + r, -1.0, 1.0), Space.MODEL)


def probe_shapes(net: FinePainter, x: torch.Tensor) -> list[tuple[int, ...]]:
    """Output shape of every layer for input ``x``."""
    shapes = []
    for layer in list(net.body) + [net.head]:
        x = layer(x)
        shapes.append(tuple(x.shape))
    return shapes

