"""Pieces shared by the three networks: init, parameter sets, layout conversion."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np
import torch
from torch import nn

from .data import DataError, ImageTensor, Space

# torch's momentum is the weight of the new batch; 0.1 here keeps 0.9 of the old stats.
BN_MOMENTUM = 0.1
BN_EPS = 1e-5


class SpecError(ValueError):
    """A network spec violates one of its structural constraints."""


def batch_norm(channels: int) -> nn.BatchNorm2d:
    return nn.BatchNorm2d(channels, eps=BN_EPS, momentum=BN_MOMENTUM)


def init_weights(module: nn.Module, seed: int) -> None:
    """DCGAN-style init: N(0, 0.02) weights, N(1, 0.02) BN scales, zero biases."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * 0.02)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.weight.copy_(1.0 + torch.randn(m.weight.shape, generator=gen) * 0.02)
                m.bias.zero_()


def parameter_set(module: nn.Module) -> "OrderedDict[str, torch.Tensor]":
    """Named learnable arrays and BN running statistics, in definition order.

    The BN ``num_batches_tracked`` counters are left out: they are unused with a
    fixed momentum.
    """
    return OrderedDict(
        (k, v) for k, v in module.state_dict().items() if not k.endswith("num_batches_tracked")
    )


def load_parameter_set(module: nn.Module, params) -> None:
    own = parameter_set(module)
    if list(own) != list(params):
        missing = set(own) - set(params)
        extra = set(params) - set(own)
        raise SpecError(f"parameter names differ: missing {sorted(missing)}, extra {sorted(extra)}")
    with torch.no_grad():
        for name, value in params.items():
            value = torch.as_tensor(np.asarray(value))
            if tuple(value.shape) != tuple(own[name].shape):
                raise SpecError(
                    f"{name}: shape {tuple(value.shape)} != expected {tuple(own[name].shape)}"
                )
            own[name].copy_(value.to(own[name].dtype))


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def regularized_weights(module: nn.Module) -> list[torch.Tensor]:
    """Weights of conv / transposed-conv / linear layers (no biases, no BN)."""
    return [
        m.weight
        for m in module.modules()
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear))
    ]


def to_nchw(img: ImageTensor, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(img.data.transpose(0, 3, 1, 2))).to(dtype)


def to_nhwc(x: torch.Tensor) -> np.ndarray:
    return x.detach().permute(0, 2, 3, 1).cpu().numpy()


def check_input(x: torch.Tensor, size: int, what: str) -> None:
    if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != size or x.shape[3] != size:
        raise DataError(f"{what} expects (N, 3, {size}, {size}) input, got {tuple(x.shape)}")


def run(net: nn.Module, img: ImageTensor, size: int, mode: str, what: str) -> torch.Tensor:
    """Forward a model-space ImageTensor through ``net`` in train or eval mode."""
    img.require(Space.MODEL)
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    dtype = next(net.parameters()).dtype
    x = to_nchw(img, dtype)
    check_input(x, size, what)
    net.train(mode == "train")
    with torch.set_grad_enabled(mode == "train"):
        return net(x)
