"""Warped time discretization shared by the teacher and the student.

The mesh stretches a power-law warp between ``t_min`` and ``t_max`` so that
points concentrate near the low-noise end; ``sigma_data`` carries the data
scale used by the denoiser preconditioning.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ConfigError(ValueError):
    """Invalid schedule or run configuration."""


# times(0) must stay strictly positive; a requested t_min of 0 is clamped here.
T_MIN_FLOOR = 1e-6


@dataclass(frozen=True)
class NoiseSchedule:
    """Discretized time mesh t_0 < ... < t_{n-1} = t_max with warp exponent rho."""

    t_min: float = 0.002
    t_max: float = 80.0
    rho: float = 7.0
    n: int = 40
    sigma_data: float = 0.5

    def __post_init__(self) -> None:
        object.__setattr__(self, "t_min", max(float(self.t_min), T_MIN_FLOOR))
        if self.n < 2:
            raise ConfigError(f"mesh size n must be >= 2, got {self.n}")
        if not self.t_min < self.t_max:
            raise ConfigError(
                f"t_min must be < t_max, got t_min={self.t_min} t_max={self.t_max}"
            )
        if self.rho <= 0:
            raise ConfigError(f"warp exponent rho must be > 0, got {self.rho}")
        if self.sigma_data <= 0:
            raise ConfigError(f"sigma_data must be > 0, got {self.sigma_data}")

    def times(self) -> np.ndarray:
        """Mesh times, strictly increasing, float64, recomputed deterministically."""
        i = np.arange(self.n, dtype=np.float64)
        lo = self.t_min ** (1.0 / self.rho)
        hi = self.t_max ** (1.0 / self.rho)
        out = (lo + i / (self.n - 1) * (hi - lo)) ** self.rho
        out[0] = self.t_min  # endpoints exact, not round-tripped through the warp
        out[-1] = self.t_max
        return out

    def time(self, idx: int) -> float:
        return float(self.times()[idx])

    def with_sigma_data(self, sigma_data: float) -> "NoiseSchedule":
        return NoiseSchedule(self.t_min, self.t_max, self.rho, self.n, sigma_data)
