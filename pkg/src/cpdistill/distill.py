"""Consistency distillation: triple sampling, the two-branch consistency loss
with its stop-gradient topology, the combined objective, and the training loop.

Per step, one (t, u, s) index triple is drawn and a batch is noised to x_t.
The u-branch position comes from the teacher (or, for the teacher-free
variant, from re-noising with the same draw), fully detached. Only the t -> s
student jump is gradient-tracked; both landings are carried to time 0 by a
frozen copy of the student that is refreshed from the live weights every step.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import Tensor

from .nets import NumericsError
from .optim import AdamState, adam_step, apply_update, grad_norm, gradients, module_params
from .schedule import ConfigError, NoiseSchedule
from .student import StudentModel, warm_start
from .teacher import TeacherModel, huber_c, noise_sample, pseudo_huber, solve


class Variant(enum.Enum):
    CD = "cd"
    CTM = "ctm"
    CTM_LOCAL = "ctm-local"
    CT = "ct"


@dataclass(frozen=True)
class DistillConfig:
    alpha: float = 1.0
    beta: float = 1.0
    variant: Variant = Variant.CTM_LOCAL
    max_span: int = 10
    dropout_s0: bool = True

    def __post_init__(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("loss weights alpha, beta must be >= 0")
        if self.alpha == 0 and self.beta == 0:
            raise ConfigError("alpha and beta cannot both be zero")
        if self.max_span < 1:
            raise ConfigError(f"max teacher jump span must be >= 1, got {self.max_span}")


@dataclass(frozen=True)
class Triple:
    """Mesh indices 0 <= s < u < t <= N-1."""

    t: int
    u: int
    s: int

    def __post_init__(self) -> None:
        if not 0 <= self.s < self.u < self.t:
            raise ConfigError(f"triple ordering violated: t={self.t} u={self.u} s={self.s}")


def _randint(lo: int, hi: int, gen: torch.Generator) -> int:
    """Uniform integer in [lo, hi)."""
    return int(torch.randint(lo, hi, (1,), generator=gen))


def sample_triple(n: int, cfg: DistillConfig, gen: torch.Generator) -> Triple:
    """Draw a training triple; t is uniform over mesh indices {2..n-1}."""
    if n < 3:
        raise ConfigError(f"triple sampling needs a mesh with n >= 3, got {n}")
    t = _randint(2, n, gen)
    if cfg.variant is Variant.CD:
        return Triple(t=t, u=t - 1, s=0)
    if cfg.variant is Variant.CTM:
        s = _randint(0, t - 1, gen)
        lo = max(t - cfg.max_span, s + 1)
        return Triple(t=t, u=_randint(lo, t, gen), s=s)
    # CTM-local and the teacher-free variant share adjacent start times.
    u = t - 1
    return Triple(t=t, u=u, s=_randint(0, u, gen))


def teacher_jump(
    teacher: TeacherModel, x_t: Tensor, t_idx: int, u_idx: int, obs: Tensor
) -> tuple[Tensor, int]:
    """t_idx - u_idx solver steps over consecutive mesh indices, detached."""
    if u_idx >= t_idx:
        raise NumericsError(f"teacher jump requires u < t, got t={t_idx} u={u_idx}")
    with torch.no_grad():
        x_u, nfe = solve(teacher, x_t, obs, range(t_idx, u_idx - 1, -1))
    return x_u.detach(), nfe


def ct_jump(x0: Tensor, u_time: float, eps: Tensor) -> Tensor:
    """Teacher-free x_u: re-noise the clean batch with the same draw, detached."""
    return noise_sample(x0, u_time, eps).detach()


def ctm_loss(
    student: StudentModel,
    student_sg: StudentModel,
    teacher: TeacherModel | None,
    triple: Triple,
    x0: Tensor,
    eps: Tensor,
    obs: Tensor,
    cfg: DistillConfig,
    rng: torch.Generator | None = None,
) -> tuple[Tensor, dict]:
    """Consistency term between the t- and u-branch landings, compared at time 0.

    Only the t -> s jump is gradient-tracked; the u-branch and both s -> 0
    passes run on the frozen student copy, so parameters receive gradient
    exclusively through the tracked jump. Dropout stays on the s -> 0 passes
    iff ``cfg.dropout_s0``.
    """
    times = student.schedule.times()
    t_time, u_time, s_time = times[triple.t], times[triple.u], times[triple.s]
    x_t = noise_sample(x0, t_time, eps)
    if cfg.variant is Variant.CT:
        x_u = ct_jump(x0, u_time, eps)
        nfe = 0
    else:
        if teacher is None:
            raise ConfigError(f"variant {cfg.variant.value} requires a teacher")
        x_u, nfe = teacher_jump(teacher, x_t, triple.t, triple.u, obs)
    x_s_t = student.jump(x_t, t_time, s_time, obs, rng)
    with torch.no_grad():
        x_s_u = student_sg.jump(x_u, u_time, s_time, obs, rng)
    s0_rng = rng if cfg.dropout_s0 else None
    out_t = student_sg.jump(x_s_t, s_time, 0.0, obs, s0_rng)
    with torch.no_grad():
        out_u = student_sg.jump(x_s_u, s_time, 0.0, obs, s0_rng)
    c = huber_c(x0.shape[-1])
    loss = pseudo_huber(out_t, out_u, c).mean()
    if not torch.isfinite(loss):
        raise NumericsError("non-finite consistency loss")
    with torch.no_grad():
        dist_at_s = pseudo_huber(x_s_t, x_s_u, c).mean()
    info = {
        "teacher_nfe": nfe,
        "dist_at_s": float(dist_at_s),
        "dist_at_0": float(loss.detach()),
    }
    return loss, info


def student_dsm_loss(
    student: StudentModel,
    x_t: Tensor,
    t_time: float,
    x0: Tensor,
    obs: Tensor,
    rng: torch.Generator | None = None,
) -> Tensor:
    """Student-as-denoiser term: g(x_t, t, 0; o) predicts the clean actions."""
    pred = student.jump(x_t, t_time, 0.0, obs, rng)
    loss = pseudo_huber(x0, pred, huber_c(x0.shape[-1])).mean()
    if not torch.isfinite(loss):
        raise NumericsError("non-finite student DSM loss")
    return loss


def combined_loss(
    student: StudentModel,
    student_sg: StudentModel,
    teacher: TeacherModel | None,
    triple: Triple,
    x0: Tensor,
    eps: Tensor,
    obs: Tensor,
    cfg: DistillConfig,
    rng: torch.Generator | None = None,
) -> tuple[Tensor, dict]:
    """alpha * consistency + beta * student DSM on the same noised batch."""
    info: dict = {"teacher_nfe": 0}
    zero = torch.zeros((), dtype=x0.dtype)
    ctm = zero
    if cfg.alpha > 0:
        ctm, info = ctm_loss(student, student_sg, teacher, triple, x0, eps, obs, cfg, rng)
    dsm = zero
    if cfg.beta > 0:
        times = student.schedule.times()
        x_t = noise_sample(x0, times[triple.t], eps)
        dsm = student_dsm_loss(student, x_t, times[triple.t], x0, obs, rng)
    total = cfg.alpha * ctm + cfg.beta * dsm
    info.update(
        loss_ctm=float(ctm.detach()),
        loss_dsm=float(dsm.detach()),
        loss_total=float(total.detach()),
    )
    return total, info


def distill(
    teacher: TeacherModel | None,
    x0_pool: Tensor,
    obs_pool: Tensor,
    cfg: DistillConfig,
    *,
    schedule: NoiseSchedule | None = None,
    hidden: Sequence[int] = (128, 128, 128),
    emb_width: int = 32,
    s_emb_width: int = 16,
    dropout_p: float = 0.2,
    lr: float = 5e-4,
    batch_size: int = 256,
    steps: int = 3000,
    seed: int = 0,
) -> tuple[StudentModel, list[dict]]:
    """Distillation loop; the frozen stop-gradient copy is refreshed from the
    live weights every step. Deterministic per seed on one thread.

    With a teacher, the student is warm started from it (architecture args are
    ignored); the teacher-free variant trains a fresh student and requires
    ``schedule``.
    """
    gen = torch.Generator().manual_seed(seed)
    if teacher is not None:
        student = warm_start(teacher, s_emb_width=s_emb_width, seed=seed)
        student_sg = warm_start(teacher, s_emb_width=s_emb_width, seed=seed)
    else:
        if cfg.variant is not Variant.CT:
            raise ConfigError(f"variant {cfg.variant.value} requires a teacher")
        if schedule is None:
            raise ConfigError("teacher-free distillation needs an explicit schedule")
        student = StudentModel(
            schedule, obs_pool.shape[1], x0_pool.shape[1], hidden=hidden,
            emb_width=emb_width, s_emb_width=s_emb_width, p=dropout_p, rng=gen,
        )
        student_sg = StudentModel(
            schedule, obs_pool.shape[1], x0_pool.shape[1], hidden=hidden,
            emb_width=emb_width, s_emb_width=s_emb_width, p=dropout_p, rng=gen,
        )
    student_sg.requires_grad_(False)
    params = module_params(student)
    state = AdamState.init(params, lr=lr)
    metrics: list[dict] = []
    n = x0_pool.shape[0]
    t_start = time.perf_counter()
    for step in range(1, steps + 1):
        rows = torch.randint(0, n, (batch_size,), generator=gen)
        eps = torch.randn(batch_size, x0_pool.shape[1], generator=gen, dtype=x0_pool.dtype)
        triple = sample_triple(student.schedule.n, cfg, gen)
        student_sg.load_state_dict(student.state_dict())
        try:
            total, info = combined_loss(
                student, student_sg, teacher, triple, x0_pool[rows], eps,
                obs_pool[rows], cfg, gen,
            )
            grads = gradients(total, params)
        except NumericsError as e:
            raise NumericsError(f"distillation diverged at step {step}: {e}") from e
        new_params, state = adam_step(params, grads, state)
        apply_update(student, new_params)
        metrics.append(
            {
                "step": step,
                **{k: info[k] for k in ("loss_ctm", "loss_dsm", "loss_total", "teacher_nfe")},
                "grad_norm": grad_norm(grads),
                "wall_s": time.perf_counter() - t_start,
            }
        )
    return student, metrics
