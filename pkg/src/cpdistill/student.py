"""Two-time consistency student g(x_t, t, s; o).

The jump is parameterized as (s/t) x + (1 - s/t) G(x, t, s; o) with G the
preconditioned raw network in clean-action space, so g(x, t, t; o) = x holds
for every parameter setting. The stop time s conditions a separate modulation
branch that warm start zero-initializes, making a fresh student's g(x, t, 0; o)
agree with the teacher's denoiser exactly.
"""

from __future__ import annotations

from typing import Sequence

import torch
from torch import Tensor, nn

from .nets import CondMlp, NumericsError, TimeEmbedding
from .schedule import NoiseSchedule
from .teacher import TeacherModel, _as_time, precond_coeffs

# Keeps the stop-time log-embedding finite at s = 0 (see TimeEmbedding).
S_EMB_LOG_SHIFT = 1e-4


class StudentModel(nn.Module):
    def __init__(
        self,
        schedule: NoiseSchedule,
        obs_dim: int,
        action_dim: int,
        hidden: Sequence[int] = (128, 128, 128),
        emb_width: int = 32,
        s_emb_width: int = 16,
        p: float = 0.2,
        *,
        rng: torch.Generator,
    ):
        super().__init__()
        self.schedule = schedule
        self.obs_dim = obs_dim
        self.action_dim = action_dim
        self.emb_width = emb_width
        self.s_emb_width = s_emb_width
        self.time_emb = TimeEmbedding(emb_width)
        self.stop_emb = TimeEmbedding(s_emb_width, log_shift=S_EMB_LOG_SHIFT)
        self.net = CondMlp(
            action_dim,
            hidden,
            action_dim,
            cond_dims=[emb_width + obs_dim, s_emb_width],
            p=p,
            rng=rng,
        )
        self.meter = None  # optional NfeMeter attached by the sampler

    def _embed(self, t: Tensor, s: Tensor, x: Tensor, obs: Tensor):
        emb_t = self.time_emb(t if t.ndim else t[None])
        emb_s = self.stop_emb(s if s.ndim else s[None])
        if t.ndim == 0 and x.ndim > 1:
            emb_t = emb_t.expand(x.shape[0], -1)
        if s.ndim == 0 and x.ndim > 1:
            emb_s = emb_s.expand(x.shape[0], -1)
        if x.ndim == 1:
            emb_t, emb_s = emb_t.reshape(-1), emb_s.reshape(-1)
        return torch.cat([emb_t, obs], dim=-1), emb_s

    def raw_denoise(
        self, x: Tensor, t, s, obs: Tensor, rng: torch.Generator | None = None
    ) -> Tensor:
        """G(x, t, s; o): preconditioned clean-action estimate, s-conditioned."""
        t = _as_time(t, x)
        s = _as_time(s, x)
        if (t <= 0).any():
            raise NumericsError("student jump requires t > 0")
        c_skip, c_out, c_in = precond_coeffs(t, self.schedule.sigma_data)
        if x.ndim > 1:
            c_skip, c_out, c_in = c_skip[:, None], c_out[:, None], c_in[:, None]
        cond_t, emb_s = self._embed(t, s, x, obs)
        if self.meter is not None:
            with self.meter.tick():
                raw = self.net(c_in * x, [cond_t, emb_s], rng)
        else:
            raw = self.net(c_in * x, [cond_t, emb_s], rng)
        return c_skip * x + c_out * raw

    def jump(
        self, x: Tensor, t, s, obs: Tensor, rng: torch.Generator | None = None
    ) -> Tensor:
        """g(x, t, s; o): move a position at time t to the earlier time s."""
        t = _as_time(t, x)
        s = _as_time(s, x)
        if (s > t).any():
            raise NumericsError("student jump requires s <= t")
        if (s < 0).any():
            raise NumericsError("student jump requires s >= 0")
        g = self.raw_denoise(x, t, s, obs, rng)
        ratio = s / t
        if x.ndim > 1 and ratio.ndim:
            ratio = ratio[:, None]
        return ratio * x + (1.0 - ratio) * g


def copy_teacher_weights(student: StudentModel, teacher: TeacherModel) -> None:
    """Copy shared parameters bitwise and zero the stop-time branch.

    Raises on the first tensor whose shape does not line up between the two
    architectures.
    """
    t_params = dict(teacher.net.named_parameters())
    s_params = dict(student.net.named_parameters())
    with torch.no_grad():
        for name, src in t_params.items():
            if name not in s_params:
                raise NumericsError(f"student architecture lacks tensor net.{name}")
            dst = s_params[name]
            if tuple(dst.shape) != tuple(src.shape):
                raise NumericsError(
                    f"incompatible tensor net.{name}: teacher {tuple(src.shape)}"
                    f" vs student {tuple(dst.shape)}"
                )
            dst.copy_(src)
    student.net.zero_cond_source(1)


def warm_start(
    teacher: TeacherModel, s_emb_width: int = 16, seed: int = 0
) -> StudentModel:
    """Build a student matching the teacher and initialize it from it.

    Immediately afterwards g(x, t, 0; o) equals the teacher denoiser bitwise
    (the zeroed stop-time branch contributes exactly nothing).
    """
    hidden = [lin.out_features for lin in teacher.net.layers]
    student = StudentModel(
        teacher.schedule,
        teacher.obs_dim,
        teacher.action_dim,
        hidden=hidden,
        emb_width=teacher.emb_width,
        s_emb_width=s_emb_width,
        p=teacher.net.p,
        rng=torch.Generator().manual_seed(seed),
    )
    copy_teacher_weights(student, teacher)
    return student
