"""Inference procedures: single-step generation, k-step chaining at preset
times, and exact NFE / wall-clock accounting.

NFE is counted by a wrapper around the raw network evaluation, never inferred
from timing; the same meter also accumulates network-only wall-clock so the
overhead split in reports is measured, not estimated.
"""

from __future__ import annotations

import contextlib
import statistics
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .schedule import ConfigError, NoiseSchedule
from .student import StudentModel
from .teacher import TeacherModel, solve


class NfeMeter:
    """Counts raw network evaluations and their wall-clock."""

    def __init__(self) -> None:
        self.nfe = 0
        self.net_s = 0.0

    @contextlib.contextmanager
    def tick(self):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.net_s += time.perf_counter() - t0
            self.nfe += 1


@contextlib.contextmanager
def metered(model, meter: NfeMeter):
    """Temporarily attach an evaluation meter to a model."""
    prev = model.meter
    model.meter = meter
    try:
        yield meter
    finally:
        model.meter = prev


@dataclass(frozen=True)
class SamplerConfig:
    sigma_init: float = 1.0
    k: int = 1
    mode: str = "discretized"

    def __post_init__(self) -> None:
        if self.sigma_init <= 0:
            raise ConfigError(f"sigma_init must be > 0, got {self.sigma_init}")
        if self.k < 1:
            raise ConfigError(f"chain step count k must be >= 1, got {self.k}")
        if self.mode not in ("discretized", "continuous"):
            raise ConfigError(f"unknown chaining mode {self.mode!r}")


@dataclass
class InferenceReport:
    """One generated action sequence with its exact evaluation cost."""

    actions: np.ndarray  # (H, A)
    nfe: int
    net_ms: float
    total_ms: float

    CSV_HEADER = "task,seed,k,mode,sigma_init,nfe,net_ms,total_ms,success"

    def csv_row(
        self, task: str, seed: int, cfg: SamplerConfig, success: bool | None
    ) -> str:
        flag = "" if success is None else int(success)
        return (
            f"{task},{seed},{cfg.k},{cfg.mode},{cfg.sigma_init:g},"
            f"{self.nfe},{self.net_ms:.4f},{self.total_ms:.4f},{flag}"
        )


def chain_times(schedule: NoiseSchedule, k: int, mode: str) -> list[float]:
    """The k-1 mesh times (descending) visited after the initial full denoise.

    Discretized mode subdivides the warped mesh at indices floor(j*n/k);
    continuous mode subdivides [t_min, t_max] evenly and snaps each value to
    the nearest mesh time so the student only sees trained time embeddings.
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if k > schedule.n:
        raise ConfigError(f"k={k} exceeds mesh size {schedule.n}")
    if k == 1:
        return []
    times = schedule.times()
    if mode == "discretized":
        idx = [(j * schedule.n) // k for j in range(k - 1, 0, -1)]
    elif mode == "continuous":
        span = schedule.t_max - schedule.t_min
        vals = [schedule.t_min + j * span / k for j in range(k - 1, 0, -1)]
        idx = [int(np.abs(times - v).argmin()) for v in vals]
        for i in range(1, len(idx)):  # resolve snap collisions, keep strictly decreasing
            if idx[i] >= idx[i - 1]:
                idx[i] = idx[i - 1] - 1
        if idx and idx[-1] < 0:
            raise ConfigError(f"cannot place {k - 1} distinct chain times on the mesh")
    else:
        raise ConfigError(f"unknown chaining mode {mode!r}")
    return [float(times[i]) for i in idx]


def _obs_tensor(student: StudentModel, obs: np.ndarray | torch.Tensor) -> torch.Tensor:
    o = torch.as_tensor(obs, dtype=torch.float32)
    if o.shape[-1] != student.obs_dim:
        raise ConfigError(
            f"observation has dim {o.shape[-1]}, student expects {student.obs_dim}"
        )
    return o


def _shape_actions(x: torch.Tensor, shape: tuple[int, int] | None) -> np.ndarray:
    a = x.detach().numpy()
    return a.reshape(shape) if shape is not None else a.reshape(1, -1)


def single_step(
    student: StudentModel,
    obs: np.ndarray | torch.Tensor,
    cfg: SamplerConfig,
    gen: torch.Generator,
    *,
    action_shape: tuple[int, int] | None = None,
) -> InferenceReport:
    """z ~ N(0, sigma_init^2), one jump from t_max straight to 0; NFE = 1."""
    o = _obs_tensor(student, obs)
    meter = NfeMeter()
    t0 = time.perf_counter()
    with metered(student, meter), torch.no_grad():
        z = cfg.sigma_init * torch.randn(student.action_dim, generator=gen)
        x = student.jump(z, student.schedule.t_max, 0.0, o)
    total = time.perf_counter() - t0
    return InferenceReport(
        actions=_shape_actions(x, action_shape),
        nfe=meter.nfe,
        net_ms=meter.net_s * 1e3,
        total_ms=total * 1e3,
    )


def multi_step(
    student: StudentModel,
    obs: np.ndarray | torch.Tensor,
    cfg: SamplerConfig,
    gen: torch.Generator,
    *,
    action_shape: tuple[int, int] | None = None,
) -> InferenceReport:
    """Full denoise, then re-noise/denoise refinements at the preset chain
    times with a fresh draw per re-noising; NFE = k exactly."""
    o = _obs_tensor(student, obs)
    taus = chain_times(student.schedule, cfg.k, cfg.mode)
    meter = NfeMeter()
    t0 = time.perf_counter()
    with metered(student, meter), torch.no_grad():
        z = cfg.sigma_init * torch.randn(student.action_dim, generator=gen)
        x = student.jump(z, student.schedule.t_max, 0.0, o)
        for tau in taus:
            x = x + tau * torch.randn(student.action_dim, generator=gen)
            x = student.jump(x, tau, 0.0, o)
    total = time.perf_counter() - t0
    return InferenceReport(
        actions=_shape_actions(x, action_shape),
        nfe=meter.nfe,
        net_ms=meter.net_s * 1e3,
        total_ms=total * 1e3,
    )


def sample_student_batch(
    student: StudentModel,
    n: int,
    obs_row: np.ndarray | torch.Tensor,
    cfg: SamplerConfig,
    gen: torch.Generator,
) -> torch.Tensor:
    """n k-step generations at a fixed observation, batched (for metrics)."""
    o = _obs_tensor(student, obs_row).expand(n, -1)
    taus = chain_times(student.schedule, cfg.k, cfg.mode)
    with torch.no_grad():
        z = cfg.sigma_init * torch.randn(n, student.action_dim, generator=gen)
        x = student.jump(z, student.schedule.t_max, 0.0, o)
        for tau in taus:
            x = x + tau * torch.randn(n, student.action_dim, generator=gen)
            x = student.jump(x, tau, 0.0, o)
    return x


def sample_teacher_batch(
    teacher: TeacherModel,
    n: int,
    obs_row: np.ndarray | torch.Tensor,
    gen: torch.Generator,
) -> torch.Tensor:
    """n full-mesh solver generations from x_T ~ N(0, t_max^2 I), batched."""
    o = torch.as_tensor(obs_row, dtype=torch.float32).expand(n, -1)
    sched = teacher.schedule
    with torch.no_grad():
        x_T = sched.t_max * torch.randn(n, teacher.action_dim, generator=gen)
        x, _ = solve(teacher, x_T, o, range(sched.n - 1, -1, -1))
    return x


@dataclass
class LatencyStats:
    nfe: int
    runs: int
    median_net_ms: float
    p10_net_ms: float
    p90_net_ms: float
    median_total_ms: float
    p90_total_ms: float

    CSV_HEADER = "policy,nfe,runs,median_net_ms,p10_net_ms,p90_net_ms,median_total_ms,p90_total_ms"

    def csv_row(self, label: str) -> str:
        return (
            f"{label},{self.nfe},{self.runs},{self.median_net_ms:.4f},"
            f"{self.p10_net_ms:.4f},{self.p90_net_ms:.4f},"
            f"{self.median_total_ms:.4f},{self.p90_total_ms:.4f}"
        )


def _quantile(xs: Sequence[float], q: float) -> float:
    return float(np.quantile(np.asarray(xs), q))


def bench(
    infer: Callable[[np.ndarray], InferenceReport],
    obs_batch: np.ndarray,
    repetitions: int,
    warmup: int = 5,
) -> LatencyStats:
    """Median/percentile wall-clock per inference, network time separated out.

    The same measurement path serves teacher solves and student chaining; the
    first ``warmup`` runs are excluded.
    """
    if repetitions < 1:
        raise ConfigError("bench needs at least one repetition")
    rows = [np.asarray(obs_batch[i % len(obs_batch)]) for i in range(warmup + repetitions)]
    reports = [infer(r) for r in rows][warmup:]
    nfes = {r.nfe for r in reports}
    if len(nfes) != 1:
        raise ConfigError(f"NFE varied across benchmark runs: {sorted(nfes)}")
    net = [r.net_ms for r in reports]
    tot = [r.total_ms for r in reports]
    return LatencyStats(
        nfe=reports[0].nfe,
        runs=len(reports),
        median_net_ms=statistics.median(net),
        p10_net_ms=_quantile(net, 0.10),
        p90_net_ms=_quantile(net, 0.90),
        median_total_ms=statistics.median(tot),
        p90_total_ms=_quantile(tot, 0.90),
    )
