"""Gradient extraction and a functional Adam over named parameter maps."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .nets import NumericsError

ParamSet = dict[str, Tensor]


def gradients(loss: Tensor, params: ParamSet) -> ParamSet:
    """Gradient of a scalar loss for every named parameter.

    Parameters unreachable from the loss (e.g. everything behind a
    stop-gradient) get exact zeros. A non-finite gradient raises, naming the
    first offending parameter.
    """
    if loss.ndim != 0:
        raise NumericsError(f"loss must be scalar, got shape {tuple(loss.shape)}")
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    out: ParamSet = {}
    for (name, p), g in zip(params.items(), grads):
        if g is None:
            g = torch.zeros_like(p)
        elif not torch.isfinite(g).all():
            raise NumericsError(f"non-finite gradient for parameter {name!r}")
        out[name] = g
    return out


@dataclass
class AdamState:
    """First/second moment maps mirroring a ParamSet, plus hyperparameters."""

    m: ParamSet
    v: ParamSet
    step: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params: ParamSet, lr: float, **kw) -> "AdamState":
        m = {k: torch.zeros_like(p) for k, p in params.items()}
        v = {k: torch.zeros_like(p) for k, p in params.items()}
        return cls(m=m, v=v, step=0, lr=lr, **kw)


def adam_step(
    params: ParamSet, grads: ParamSet, state: AdamState
) -> tuple[ParamSet, AdamState]:
    """One bias-corrected Adam update; pure, returns fresh params and state."""
    if params.keys() != grads.keys():
        missing = set(params) ^ set(grads)
        raise NumericsError(f"param/grad key mismatch: {sorted(missing)[:3]}")
    step = state.step + 1
    c1 = 1.0 - state.beta1**step
    c2 = 1.0 - state.beta2**step
    new_params: ParamSet = {}
    new_m: ParamSet = {}
    new_v: ParamSet = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise NumericsError(
                f"gradient shape {tuple(g.shape)} != param shape {tuple(p.shape)}"
                f" for {name!r}"
            )
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        update = state.lr * (m / c1) / (torch.sqrt(v / c2) + state.eps)
        new_params[name] = p.detach() - update
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(
        m=new_m, v=new_v, step=step,
        lr=state.lr, beta1=state.beta1, beta2=state.beta2, eps=state.eps,
    )


def apply_update(module: torch.nn.Module, new_params: ParamSet) -> None:
    """Copy updated values into a module's parameters in place."""
    with torch.no_grad():
        for name, p in module.named_parameters():
            p.copy_(new_params[name])


def module_params(module: torch.nn.Module) -> ParamSet:
    return dict(module.named_parameters())


def grad_norm(grads: ParamSet) -> float:
    total = sum(float(g.pow(2).sum()) for g in grads.values())
    return total**0.5
