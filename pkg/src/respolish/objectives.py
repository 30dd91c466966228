"""Training objectives for both painters and the discriminator.

Distance losses use the normalized Euclidean form: per sample, the L2 norm
of the whole difference divided by W*H*C, averaged over the batch. Passing
``elementwise=True`` switches to the per-entry reading (mean absolute error).
"""

from __future__ import annotations

import hashlib
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .nets import regularized_weights

# ImageNet statistics expected by the VGG16 weights
_VGG_MEAN = (0.485, 0.456, 0.406)
_VGG_STD = (0.229, 0.224, 0.225)


class LossError(ValueError):
    pass


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise LossError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def euclidean_loss(pred: torch.Tensor, target: torch.Tensor, elementwise: bool = False):
    _same_shape(pred, target, "euclidean_loss")
    diff = (pred - target).flatten(1)
    if elementwise:
        return diff.abs().mean(dim=1).mean()
    # scale by the largest entry so tiny or huge differences neither underflow nor overflow
    scale = diff.detach().abs().amax(dim=1, keepdim=True).clamp_min(torch.finfo(diff.dtype).tiny)
    norm = scale.squeeze(1) * torch.linalg.vector_norm(diff / scale, dim=1)
    return (norm / diff.shape[1]).mean()


def fpn_loss(polished: torch.Tensor, target: torch.Tensor, elementwise: bool = False):
    """Distance between the polished patch (coarse + residual) and the ground truth."""
    return euclidean_loss(polished, target, elementwise)


def adversarial_losses(d_real, d_fake):
    """``(gen_loss, disc_loss)`` from discriminator probabilities.

    The generator term is the non-saturating ``-log D(fake)``.
    """
    d_real = torch.as_tensor(d_real)
    d_fake = torch.as_tensor(d_fake)
    for name, p in (("d_real", d_real), ("d_fake", d_fake)):
        if not bool(((p > 0) & (p < 1)).all()):
            raise LossError(f"{name} has probabilities outside (0, 1)")
    disc = -torch.log(d_real).mean() - torch.log1p(-d_fake).mean()
    gen = -torch.log(d_fake).mean()
    return gen, disc


def discriminator_loss_from_logits(real_logits: torch.Tensor, fake_logits: torch.Tensor):
    # -log(sigmoid(t)) = softplus(-t); -log(1 - sigmoid(t)) = softplus(t)
    return F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean()


def generator_loss_from_logits(fake_logits: torch.Tensor):
    return F.softplus(-fake_logits).mean()


def l2_penalty(net: nn.Module) -> torch.Tensor:
    return sum(w.pow(2).sum() for w in regularized_weights(net))


@dataclass(frozen=True)
class LossWeights:
    ed: float = 0.5
    adv: float = 0.001
    feat: float = 0.0001
    weight_decay: float = 1e-5

    def as_tuple(self) -> tuple[float, float, float, float]:
        return self.ed, self.adv, self.feat, self.weight_decay


@dataclass
class LossBreakdown:
    """Components of the coarse painter objective and their weighted total.

    Fields may hold tensors (so ``total.backward()`` works) or plain floats.
    """

    ed: object
    adv: object
    feat: object
    reg: object
    weights: LossWeights = field(default_factory=LossWeights)
    total: object = None

    def __post_init__(self):
        if self.total is None:
            w = self.weights
            self.total = w.ed * self.ed + w.adv * self.adv + w.feat * self.feat + (
                w.weight_decay * self.reg
            )

    def as_floats(self) -> dict[str, float]:
        return {k: _scalar(getattr(self, k)) for k in ("ed", "adv", "feat", "reg", "total")}

    def recomposition_error(self) -> float:
        d = self.as_floats()
        w = self.weights
        expect = w.ed * d["ed"] + w.adv * d["adv"] + w.feat * d["feat"] + w.weight_decay * d["reg"]
        return abs(expect - d["total"])


def _scalar(v) -> float:
    return v.item() if isinstance(v, torch.Tensor) else float(v)


def joint_cpn_loss(ed, adv, feat, reg, weights: LossWeights = LossWeights()) -> LossBreakdown:
    for name, value in (("ed", ed), ("adv", adv), ("feat", feat), ("reg", reg)):
        if not math.isfinite(_scalar(value)):
            raise LossError(f"non-finite {name} loss component: {_scalar(value)}")
    return LossBreakdown(ed, adv, feat, reg, weights)


# --------------------------------------------------------------------------- features


class FeatureExtractor(nn.Module):
    """Frozen feature map used by the feature loss.

    ``kind`` is ``fixed_random_cnn`` (seeded, desk-scale) or
    ``pretrained_vgg16_relu_2_1``. Inputs are model-space (N, 3, H, W) tensors.
    """

    def __init__(self, kind: str, net: nn.Sequential, preprocess=None, input_size=None):
        super().__init__()
        self.kind = kind
        self.net = net
        self.preprocess = preprocess
        self.input_size = input_size
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # always frozen
        return super().train(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.input_size is not None and tuple(x.shape[-2:]) != (self.input_size,) * 2:
            raise LossError(
                f"{self.kind} extractor expects {self.input_size}px input, got {tuple(x.shape[-2:])}"
            )
        if self.preprocess is not None:
            x = self.preprocess(x)
        return self.net(x)

    def output_shape(self, size: int) -> tuple[int, int, int]:
        """(height, width, channels) of the feature map for a ``size`` square input."""
        with torch.no_grad():
            p = next(self.parameters())
            out = self.net(torch.zeros(1, 3, size, size, dtype=p.dtype))
        return out.shape[2], out.shape[3], out.shape[1]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, v in self.state_dict().items():
            h.update(name.encode())
            h.update(v.detach().cpu().numpy().tobytes())
        return h.hexdigest()


def _vgg_block_layers(c1: int, c2: int) -> nn.Sequential:
    # conv1_1, relu, conv1_2, relu, pool, conv2_1, relu2_1
    return nn.Sequential(
        nn.Conv2d(3, c1, 3, padding=1),
        nn.ReLU(),
        nn.Conv2d(c1, c1, 3, padding=1),
        nn.ReLU(),
        nn.MaxPool2d(2, 2),
        nn.Conv2d(c1, c2, 3, padding=1),
        nn.ReLU(),
    )


def fixed_random_cnn(seed: int = 0, widths: tuple[int, int] = (8, 16), input_size=None):
    """Small VGG-shaped extractor with He-normal weights drawn from ``seed``."""
    net = _vgg_block_layers(*widths)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in net:
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * math.sqrt(2 / fan_in))
                m.bias.copy_(torch.randn(m.bias.shape, generator=gen) * 0.01)
    return FeatureExtractor("fixed_random_cnn", net, input_size=input_size)


def _vgg_preprocess(x: torch.Tensor) -> torch.Tensor:
    mean = x.new_tensor(_VGG_MEAN).view(1, 3, 1, 1)
    std = x.new_tensor(_VGG_STD).view(1, 3, 1, 1)
    return ((x + 1) / 2 - mean) / std


def vgg16_relu2_1(weights=None, input_size=None) -> FeatureExtractor:
    """VGG16 truncated after ``relu2_1`` (64 -> 64 -> pool -> 128 channels).

    ``weights`` is a path to a torch state dict using torchvision's
    ``vgg16().features`` key names (``features.0.weight``, ``0.weight`` or
    the same names inside one of this package's checkpoint archives); only
    the first three convs are read. Model-space input is mapped to [0, 1]
    and standardized with the ImageNet mean and std. Without weights the
    layers stay randomly initialized, which is only useful for shape checks.
    """
    net = _vgg_block_layers(64, 128)
    if weights is not None:
        path = Path(weights)
        if path.suffix == ".ckpt":
            from .checkpoint import load_archive

            _, arrays = load_archive(path)
            state = {k: torch.from_numpy(np.array(v)) for k, v in arrays.items()}
        else:
            state = torch.load(path, map_location="cpu", weights_only=True)
        wanted = OrderedDict()
        for key in net.state_dict():
            for candidate in (key, f"features.{key}"):
                if candidate in state:
                    wanted[key] = state[candidate]
                    break
            else:
                raise LossError(f"VGG16 weights file {path} lacks {key!r}")
        net.load_state_dict(wanted)
    return FeatureExtractor(
        "pretrained_vgg16_relu_2_1", net, preprocess=_vgg_preprocess, input_size=input_size
    )


def feature_loss(extractor: FeatureExtractor, inpainted, source, elementwise: bool = False):
    """Feature-space distance between whole inpainted images and their sources."""
    _same_shape(inpainted, source, "feature_loss")
    return euclidean_loss(extractor(inpainted), extractor(source), elementwise)
