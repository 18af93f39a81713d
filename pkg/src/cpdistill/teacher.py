"""EDM-style teacher: preconditioned denoiser, PFODE derivative, Heun solver,
and the denoising score-matching objective."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import Tensor, nn

from .nets import CondMlp, NumericsError, TimeEmbedding
from .optim import AdamState, adam_step, apply_update, grad_norm, gradients, module_params
from .schedule import NoiseSchedule


def _as_time(t, like: Tensor) -> Tensor:
    """Broadcast a scalar or (B,) time onto the batch of ``like``."""
    t = torch.as_tensor(t, dtype=like.dtype)
    if t.ndim == 0:
        t = t.expand(like.shape[0]) if like.ndim > 1 else t
    return t


def precond_coeffs(t: Tensor, sigma_data: float) -> tuple[Tensor, Tensor, Tensor]:
    """EDM preconditioning c_skip, c_out, c_in at noise level t."""
    s2 = sigma_data * sigma_data
    denom = t * t + s2
    c_skip = s2 / denom
    c_out = t * sigma_data / torch.sqrt(denom)
    c_in = 1.0 / torch.sqrt(denom)
    return c_skip, c_out, c_in


class TeacherModel(nn.Module):
    """Denoiser D(x_t, t; o) = c_skip(t) x_t + c_out(t) F(c_in(t) x_t, t, o).

    As t -> 0, c_skip -> 1 and c_out -> 0, so D approaches the identity in x
    regardless of the raw network F.
    """

    def __init__(
        self,
        schedule: NoiseSchedule,
        obs_dim: int,
        action_dim: int,
        hidden: Sequence[int] = (128, 128, 128),
        emb_width: int = 32,
        p: float = 0.2,
        *,
        rng: torch.Generator,
    ):
        super().__init__()
        self.schedule = schedule
        self.obs_dim = obs_dim
        self.action_dim = action_dim
        self.emb_width = emb_width
        self.time_emb = TimeEmbedding(emb_width)
        self.net = CondMlp(
            action_dim, hidden, action_dim, cond_dims=[emb_width + obs_dim], p=p, rng=rng
        )
        self.meter = None  # optional NfeMeter attached by the sampler

    def denoise(
        self, x: Tensor, t, obs: Tensor, rng: torch.Generator | None = None
    ) -> Tensor:
        t = _as_time(t, x)
        if (t <= 0).any():
            raise NumericsError("denoise requires t > 0 (derivative undefined at 0)")
        c_skip, c_out, c_in = precond_coeffs(t, self.schedule.sigma_data)
        if x.ndim > 1:
            c_skip, c_out, c_in = c_skip[:, None], c_out[:, None], c_in[:, None]
        emb = self.time_emb(t if t.ndim else t[None])
        if t.ndim == 0:
            emb = emb[0] if x.ndim == 1 else emb.expand(x.shape[0], -1)
        cond = torch.cat([emb, obs], dim=-1)
        if self.meter is not None:
            with self.meter.tick():
                raw = self.net(c_in * x, [cond], rng)
        else:
            raw = self.net(c_in * x, [cond], rng)
        return c_skip * x + c_out * raw


def pfode_derivative(model: TeacherModel, x: Tensor, t, obs: Tensor) -> Tensor:
    """dx/dt = (x - D(x, t; o)) / t; integrating T -> 0 moves x toward data."""
    t = _as_time(t, x)
    if (t <= 0).any():
        raise NumericsError("PFODE derivative requires t > 0")
    tt = t[:, None] if x.ndim > 1 else t
    return (x - model.denoise(x, t, obs)) / tt


def heun_step(
    model: TeacherModel, x: Tensor, t_cur, t_next, obs: Tensor, *, euler: bool = False
) -> Tensor:
    """One predictor-corrector step from t_cur down to t_next.

    Two denoiser evaluations, or one when ``euler`` is set (the fallback used
    for the final segment into the lowest mesh time).
    """
    h = float(t_next) - float(t_cur)
    d1 = pfode_derivative(model, x, t_cur, obs)
    x_pred = x + h * d1
    if euler:
        x_next = x_pred
    else:
        d2 = pfode_derivative(model, x_pred, t_next, obs)
        x_next = x + h * 0.5 * (d1 + d2)
    if not torch.isfinite(x_next).all():
        raise NumericsError(f"non-finite state after step {t_cur} -> {t_next}")
    return x_next


def solve(
    model: TeacherModel,
    x_start: Tensor,
    obs: Tensor,
    step_indices: Sequence[int],
    *,
    euler_final: bool = True,
) -> tuple[Tensor, int]:
    """Integrate along the mesh over strictly decreasing indices.

    Returns the state at the lowest index time and the exact number of
    network evaluations: 2 per segment, minus 1 when the final segment into
    mesh index 0 falls back to Euler.
    """
    idx = list(step_indices)
    if len(idx) < 2:
        raise NumericsError("solve needs at least two mesh indices")
    if any(b >= a for a, b in zip(idx, idx[1:])):
        raise NumericsError(f"step indices must strictly decrease, got {idx}")
    times = model.schedule.times()
    x = x_start
    nfe = 0
    for a, b in zip(idx, idx[1:]):
        last = b == idx[-1]
        use_euler = euler_final and last and b == 0
        x = heun_step(model, x, times[a], times[b], obs, euler=use_euler)
        nfe += 1 if use_euler else 2
    return x, nfe


def noise_sample(x0: Tensor, t, eps: Tensor) -> Tensor:
    """Forward noising x_t = x0 + t * eps."""
    t = _as_time(t, x0)
    if (t < 0).any():
        raise NumericsError("noise level must be >= 0")
    tt = t[:, None] if x0.ndim > 1 else t
    return x0 + tt * eps


def huber_c(dim: int) -> float:
    """Pseudo-huber transition constant, 0.00054 * sqrt(D) for D-dim data."""
    if dim < 1:
        raise NumericsError(f"data dimension must be >= 1, got {dim}")
    return 0.00054 * dim**0.5


def pseudo_huber(a: Tensor, b: Tensor, c: float) -> Tensor:
    """sqrt(||a - b||^2 + c^2) - c, rowwise over the last axis."""
    sq = (a - b).pow(2).sum(dim=-1)
    return torch.sqrt(sq + c * c) - c


@dataclass
class PfodeBatch:
    """Training batch on the forward process: x_t = x0 + t * eps rowwise."""

    x0: Tensor
    t: Tensor
    eps: Tensor
    obs: Tensor

    @property
    def x_t(self) -> Tensor:
        return noise_sample(self.x0, self.t, self.eps)


def sample_pfode_batch(
    x0_pool: Tensor,
    obs_pool: Tensor,
    schedule: NoiseSchedule,
    batch_size: int,
    gen: torch.Generator,
) -> PfodeBatch:
    """Draw rows, per-row mesh times uniform over indices 1..N-1, and noise."""
    n = x0_pool.shape[0]
    rows = torch.randint(0, n, (batch_size,), generator=gen)
    idx = torch.randint(1, schedule.n, (batch_size,), generator=gen)
    times = torch.as_tensor(schedule.times(), dtype=x0_pool.dtype)[idx]
    eps = torch.randn(batch_size, x0_pool.shape[1], generator=gen, dtype=x0_pool.dtype)
    return PfodeBatch(x0=x0_pool[rows], t=times, eps=eps, obs=obs_pool[rows])


def dsm_loss(model: TeacherModel, batch: PfodeBatch, rng: torch.Generator | None = None) -> Tensor:
    """Mean pseudo-huber between the clean actions and the denoiser output."""
    pred = model.denoise(batch.x_t, batch.t, batch.obs, rng)
    loss = pseudo_huber(batch.x0, pred, huber_c(batch.x0.shape[-1])).mean()
    if not torch.isfinite(loss):
        raise NumericsError("non-finite DSM loss")
    return loss


def train_teacher(
    x0_pool: Tensor,
    obs_pool: Tensor,
    schedule: NoiseSchedule,
    *,
    hidden: Sequence[int] = (128, 128, 128),
    emb_width: int = 32,
    dropout_p: float = 0.2,
    lr: float = 1e-3,
    batch_size: int = 256,
    steps: int = 3000,
    seed: int = 0,
    snapshot_fracs: Sequence[float] = (),
) -> tuple[TeacherModel, list[dict], dict[float, dict]]:
    """DSM training loop; deterministic per seed on one thread.

    Returns the trained model, per-step metric rows, and cloned state dicts
    snapshotted at each requested fraction of the step budget.
    """
    gen = torch.Generator().manual_seed(seed)
    model = TeacherModel(
        schedule, obs_pool.shape[1], x0_pool.shape[1],
        hidden=hidden, emb_width=emb_width, p=dropout_p, rng=gen,
    )
    params = module_params(model)
    state = AdamState.init(params, lr=lr)
    metrics: list[dict] = []
    snapshots: dict[float, dict] = {}
    marks = {max(1, round(f * steps)): f for f in snapshot_fracs}
    t_start = time.perf_counter()
    for step in range(1, steps + 1):
        batch = sample_pfode_batch(x0_pool, obs_pool, schedule, batch_size, gen)
        loss = dsm_loss(model, batch, gen)
        grads = gradients(loss, params)
        new_params, state = adam_step(params, grads, state)
        apply_update(model, new_params)
        metrics.append(
            {
                "step": step,
                "loss_dsm": float(loss.detach()),
                "grad_norm": grad_norm(grads),
                "wall_s": time.perf_counter() - t_start,
            }
        )
        if step in marks:
            snapshots[marks[step]] = {
                k: v.detach().clone() for k, v in model.state_dict().items()
            }
    return model, metrics, snapshots
