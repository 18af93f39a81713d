"""Conditionally modulated MLP with explicit-rng dropout.

Conditioning enters only through per-hidden-layer feature-wise modulation
(scale and shift produced by a linear map of each conditioning vector), so a
network whose modulation weights are all zero computes exactly the same
function as the bare trunk. That exactness is what the student warm start
relies on.
"""

from __future__ import annotations

import math
from typing import Sequence

import torch
from torch import Tensor, nn


class NumericsError(RuntimeError):
    """Shape mismatch or non-finite value inside the network engine."""


def dropout(x: Tensor, p: float, rng: torch.Generator | None) -> Tensor:
    """Inverted dropout: scales at train time so eval mode is a pure pass-through.

    Active only when an rng is supplied and p > 0; otherwise the identity.
    """
    if rng is None or p <= 0.0:
        return x
    keep = (torch.rand(x.shape, generator=rng, dtype=x.dtype) >= p).to(x.dtype)
    return x * keep / (1.0 - p)


class TimeEmbedding(nn.Module):
    """Sinusoidal features of the log noise level, log(t + shift) / 4.

    ``log_shift=0`` reproduces the EDM noise conditioning for t > 0; a positive
    shift keeps the embedding finite at t = 0 (used for the student's stop
    time, which is queried at exactly 0).
    """

    def __init__(self, width: int, log_shift: float = 0.0):
        super().__init__()
        if width < 2 or width % 2 != 0:
            raise NumericsError(f"embedding width must be even and >= 2, got {width}")
        self.width = width
        self.log_shift = log_shift
        freqs = torch.pow(2.0, torch.arange(width // 2, dtype=torch.float64))
        self.register_buffer("freqs", freqs, persistent=False)

    def forward(self, t: Tensor) -> Tensor:
        if (t < 0).any() or (self.log_shift == 0.0 and (t <= 0).any()):
            raise NumericsError("time embedding requires positive noise levels")
        u = torch.log(t.to(self.freqs.dtype) + self.log_shift) / 4.0
        arg = u[..., None] * self.freqs
        return torch.cat([torch.sin(arg), torch.cos(arg)], dim=-1).to(t.dtype)


def _init_linear(lin: nn.Linear, rng: torch.Generator) -> None:
    nn.init.kaiming_uniform_(lin.weight, a=math.sqrt(5), generator=rng)
    bound = 1.0 / math.sqrt(lin.in_features) if lin.in_features > 0 else 0.0
    nn.init.uniform_(lin.bias, -bound, bound, generator=rng)


class CondMlp(nn.Module):
    """MLP trunk with additive per-layer modulation from one or more sources.

    Each hidden activation h becomes h * (1 + scale) + shift before the
    nonlinearity, where (scale, shift) is the sum over conditioning sources of
    a per-source linear map. Source order is fixed; zeroing one source's
    weights removes its influence exactly.
    """

    def __init__(
        self,
        in_dim: int,
        hidden: Sequence[int],
        out_dim: int,
        cond_dims: Sequence[int],
        p: float = 0.0,
        *,
        rng: torch.Generator,
    ):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise NumericsError(f"dropout rate must be in [0, 1), got {p}")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.cond_dims = tuple(int(c) for c in cond_dims)
        self.p = p
        widths = [in_dim, *hidden]
        self.layers = nn.ModuleList(
            nn.Linear(widths[i], widths[i + 1]) for i in range(len(hidden))
        )
        self.head = nn.Linear(widths[-1], out_dim)
        self.films = nn.ModuleList(
            nn.ModuleList(nn.Linear(c, 2 * w) for c in self.cond_dims) for w in hidden
        )
        for lin in [*self.layers, self.head]:
            _init_linear(lin, rng)
        for per_layer in self.films:
            for lin in per_layer:
                _init_linear(lin, rng)

    def zero_cond_source(self, source: int) -> None:
        """Zero every modulation weight of one conditioning source in place."""
        with torch.no_grad():
            for per_layer in self.films:
                per_layer[source].weight.zero_()
                per_layer[source].bias.zero_()

    def forward(
        self,
        x: Tensor,
        conds: Sequence[Tensor],
        rng: torch.Generator | None = None,
    ) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise NumericsError(
                f"input x has dim {x.shape[-1]}, architecture expects {self.in_dim}"
            )
        if len(conds) != len(self.cond_dims):
            raise NumericsError(
                f"got {len(conds)} conditioning sources, expected {len(self.cond_dims)}"
            )
        for j, (c, want) in enumerate(zip(conds, self.cond_dims)):
            if c.shape[-1] != want:
                raise NumericsError(
                    f"conditioning source {j} has dim {c.shape[-1]}, expected {want}"
                )
        h = x
        for lin, per_layer in zip(self.layers, self.films):
            h = lin(h)
            mod = None
            for film, c in zip(per_layer, conds):
                mod = film(c) if mod is None else mod + film(c)
            scale, shift = mod.chunk(2, dim=-1)
            h = h * (1.0 + scale) + shift
            h = torch.nn.functional.silu(h)
            h = dropout(h, self.p, rng)
        return self.head(h)
