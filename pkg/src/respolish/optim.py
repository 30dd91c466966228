"""Adam with explicit, checkpointable state."""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field

import torch
from torch import nn


class NumericError(ArithmeticError):
    """A loss or gradient became non-finite."""


@dataclass
class OptimizerState:
    lr: float
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: "OrderedDict[str, torch.Tensor]" = field(default_factory=OrderedDict)
    v: "OrderedDict[str, torch.Tensor]" = field(default_factory=OrderedDict)

    @classmethod
    def zeros_like(cls, params, lr: float, beta1=0.5, beta2=0.999, eps=1e-8) -> "OptimizerState":
        m = OrderedDict((k, torch.zeros_like(p)) for k, p in params.items())
        v = OrderedDict((k, torch.zeros_like(p)) for k, p in params.items())
        return cls(lr, beta1, beta2, eps, 0, m, v)

    def hyperparameters(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}


def adam_step(params, grads, state: OptimizerState):
    """One bias-corrected Adam update, applied to ``params`` in place.

    ``params`` and ``grads`` are name -> tensor mappings matching the state's
    moment arrays. Returns ``(params, state)``.
    """
    if list(params) != list(state.m) or list(grads) != list(state.m):
        raise ValueError("params, grads and optimizer state name different parameters")
    for name, g in grads.items():
        if g.shape != params[name].shape or g.shape != state.m[name].shape:
            raise ValueError(f"{name}: shape mismatch between parameter, gradient and moments")
        if not bool(torch.isfinite(g).all()):
            raise NumericError(f"non-finite gradient for {name}")

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            m = state.m[name].mul_(b1).add_(g, alpha=1 - b1)
            v = state.v[name].mul_(b2).addcmul_(g, g, value=1 - b2)
            denom = (v / c2).sqrt_().add_(state.eps)
            p.addcdiv_(m, denom, value=-state.lr / c1)
    return params, state


class Adam:
    """Binds an :class:`OptimizerState` to a module's trainable parameters."""

    def __init__(self, module: nn.Module, lr: float, beta1=0.5, beta2=0.999, eps=1e-8):
        self.params = OrderedDict(
            (k, p) for k, p in module.named_parameters() if p.requires_grad
        )
        self.state = OptimizerState.zeros_like(self.params, lr, beta1, beta2, eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        grads = OrderedDict(
            (k, p.grad if p.grad is not None else torch.zeros_like(p))
            for k, p in self.params.items()
        )
        adam_step(self.params, grads, self.state)

    def state_arrays(self, prefix: str) -> "OrderedDict[str, torch.Tensor]":
        out = OrderedDict()
        for k in self.params:
            out[f"{prefix}.m.{k}"] = self.state.m[k]
            out[f"{prefix}.v.{k}"] = self.state.v[k]
        return out

    def load_state_arrays(self, prefix: str, arrays, step: int) -> None:
        with torch.no_grad():
            for k in self.params:
                self.state.m[k].copy_(torch.as_tensor(arrays[f"{prefix}.m.{k}"]))
                self.state.v[k].copy_(torch.as_tensor(arrays[f"{prefix}.v.{k}"]))
        self.state.step = step


def check_finite(value: float, what: str) -> None:
    if not math.isfinite(value):
        raise NumericError(f"non-finite {what}: {value}")
