"""Patch discriminator used while training the coarse painter."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .data import ImageTensor
from .nets import SpecError, batch_norm, init_weights, run


@dataclass(frozen=True)
class DiscSpec:
    patch_size: int = 64
    depths: tuple[int, ...] = (64, 128, 256, 512)
    lrelu_slope: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(self.depths))

    @property
    def final_size(self) -> int:
        return self.patch_size >> len(self.depths)

    def validate(self) -> "DiscSpec":
        problems = []
        if not self.depths or any(d < 1 for d in self.depths):
            problems.append("depths must be a non-empty list of positive counts")
        elif self.patch_size % (1 << len(self.depths)) or self.final_size < 1:
            problems.append(f"patch_size {self.patch_size} is not divisible by 2^{len(self.depths)}")
        if problems:
            raise SpecError("invalid DiscSpec: " + "; ".join(problems))
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["depths"] = list(self.depths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DiscSpec":
        return cls(**d)


class Discriminator(nn.Module):
    """Strided 4x4 conv stack, then a linear layer to one logit per patch.

    ``forward`` returns probabilities; training code uses :meth:`logits`
    directly to keep the log terms stable.
    """

    def __init__(self, spec: DiscSpec):
        super().__init__()
        self.spec = spec.validate()
        layers = []
        c_in = 3
        for i, depth in enumerate(spec.depths):
            layers.append(nn.Conv2d(c_in, depth, 4, stride=2, padding=1))
            if i > 0:
                layers.append(batch_norm(depth))
            layers.append(nn.LeakyReLU(spec.lrelu_slope))
            c_in = depth
        self.features = nn.Sequential(*layers)
        self.classifier = nn.Linear(c_in * spec.final_size**2, 1)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.features(x).flatten(1)).squeeze(1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # saturated sigmoids would otherwise hit exactly 0 or 1
        eps = torch.finfo(x.dtype).eps
        return torch.sigmoid(self.logits(x)).clamp(eps, 1 - eps)


def build_discriminator(spec: DiscSpec, init_seed: int) -> Discriminator:
    net = Discriminator(spec)
    init_weights(net, init_seed)
    return net


def disc_forward(net: Discriminator, patches: ImageTensor, mode: str = "eval") -> np.ndarray:
    prob = run(net, patches, net.spec.patch_size, mode, "discriminator")
    return prob.detach().cpu().numpy()
