"""Receding-horizon closed-loop evaluation.

Policies map a normalized two-frame observation to a normalized H x A action
sequence plus an InferenceReport; the rollout owns normalization, executes the
first E actions of each prediction, and replans until success or the episode
cap. All stochasticity is derived from the episode seed, so a
(seed, config, checkpoint) triple fully determines the outcome.
"""

from __future__ import annotations

import copy
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import NormStats, stack_obs
from .envs import scripted_expert
from .sampler import InferenceReport, NfeMeter, SamplerConfig, metered, multi_step
from .schedule import ConfigError
from .student import StudentModel
from .teacher import TeacherModel, solve


@dataclass
class EpisodeResult:
    success: bool
    steps: int
    reports: list[InferenceReport]
    info: dict = field(default_factory=dict)


class StudentPolicy:
    """k-step chained student inference in normalized action space."""

    def __init__(self, student: StudentModel, cfg: SamplerConfig, horizon: int, action_dim: int):
        if student.action_dim != horizon * action_dim:
            raise ConfigError(
                f"student outputs dim {student.action_dim}, task expects"
                f" {horizon}x{action_dim}"
            )
        self.student = student
        self.cfg = cfg
        self.shape = (horizon, action_dim)

    def predict(self, obs_norm: np.ndarray, gen: torch.Generator):
        report = multi_step(
            self.student, obs_norm.astype(np.float32), self.cfg, gen,
            action_shape=self.shape,
        )
        return report.actions, report


class TeacherPolicy:
    """Full-mesh Heun solve from x_T ~ N(0, t_max^2 I)."""

    def __init__(self, teacher: TeacherModel, horizon: int, action_dim: int):
        if teacher.action_dim != horizon * action_dim:
            raise ConfigError(
                f"teacher outputs dim {teacher.action_dim}, task expects"
                f" {horizon}x{action_dim}"
            )
        self.teacher = teacher
        self.shape = (horizon, action_dim)

    def predict(self, obs_norm: np.ndarray, gen: torch.Generator):
        sched = self.teacher.schedule
        obs = torch.as_tensor(obs_norm, dtype=torch.float32)
        meter = NfeMeter()
        t0 = time.perf_counter()
        with metered(self.teacher, meter), torch.no_grad():
            x_T = sched.t_max * torch.randn(self.teacher.action_dim, generator=gen)
            x, _ = solve(self.teacher, x_T[None], obs[None], range(sched.n - 1, -1, -1))
        total = time.perf_counter() - t0
        report = InferenceReport(
            actions=x[0].numpy().reshape(self.shape),
            nfe=meter.nfe,
            net_ms=meter.net_s * 1e3,
            total_ms=total * 1e3,
        )
        return report.actions, report


class ExpertPolicy:
    """Scripted expert behind the policy interface (oracle reference)."""

    def __init__(self, env, obs_stats: NormStats, act_stats: NormStats, horizon: int):
        self.env = env
        self.obs_stats = obs_stats
        self.act_stats = act_stats
        self.horizon = horizon
        self.shape = (horizon, env.spec.action_dim)

    def predict(self, obs_norm: np.ndarray, gen: torch.Generator):
        raw = self.obs_stats.denormalize(obs_norm)
        state = raw[self.env.spec.state_dim :]  # current frame of the 2-stack
        np_rng = np.random.default_rng(int(torch.randint(2**31, (1,), generator=gen)))
        actions = scripted_expert(self.env, state, np_rng, self.horizon)
        norm = np.clip(self.act_stats.normalize(actions), -1.0, 1.0)
        report = InferenceReport(actions=norm, nfe=0, net_ms=0.0, total_ms=0.0)
        return norm, report


def rollout(
    env,
    policy,
    obs_stats: NormStats,
    act_stats: NormStats,
    exec_horizon: int,
    seed: int,
) -> EpisodeResult:
    """Predict H actions, execute the first E, replan; stop on success or cap."""
    horizon = policy.shape[0]
    if exec_horizon > horizon or exec_horizon < 1:
        raise ConfigError(
            f"exec horizon must be in 1..{horizon}, got {exec_horizon}"
        )
    env_rng = np.random.default_rng([seed, 0])
    gen = torch.Generator().manual_seed(seed)
    state = env.reset(env_rng)
    prev = state
    steps = 0
    reports: list[InferenceReport] = []
    max_abs_x = 0.0
    mode_sign = 0
    done = env.success(state)
    while not done and steps < env.spec.episode_cap:
        obs_norm = obs_stats.normalize(stack_obs(prev, state))
        actions_norm, report = policy.predict(obs_norm, gen)
        reports.append(report)
        actions = act_stats.denormalize(np.clip(actions_norm, -1.0, 1.0))
        for a in actions[:exec_horizon]:
            prev = state
            state = env.step(state, a)
            steps += 1
            if abs(float(state[0])) > max_abs_x:
                max_abs_x = abs(float(state[0]))
                mode_sign = 1 if state[0] > 0 else -1
            done = env.success(state)
            if done or steps >= env.spec.episode_cap:
                break
    info = {}
    if env.spec.task_id == "multimodal-reach":
        info["mode"] = mode_sign
    return EpisodeResult(success=done, steps=steps, reports=reports, info=info)


@dataclass
class EvalSummary:
    success_rate: float
    stderr: float
    n: int
    mean_nfe: float
    mean_net_ms: float
    mode_fractions: dict | None = None

    def line(self) -> str:
        out = (
            f"success {self.success_rate:.3f} +/- {self.stderr:.4f} over {self.n} seeds"
            f" (NFE {self.mean_nfe:.1f}, net {self.mean_net_ms:.3f} ms)"
        )
        if self.mode_fractions:
            out += f" modes {self.mode_fractions}"
        return out


def binomial_stderr(p: float, n: int) -> float:
    return float(np.sqrt(p * (1.0 - p) / n))


def evaluate(
    env,
    policy,
    obs_stats: NormStats,
    act_stats: NormStats,
    *,
    n_seeds: int = 200,
    exec_horizon: int = 8,
    threads: int = 1,
) -> tuple[EvalSummary, list[EpisodeResult]]:
    """Success over seeds 0..n-1 with the binomial standard error.

    Seeds fan out over worker threads (each with its own policy copy) and the
    results are merged in seed order, so the summary is order-invariant.
    """
    if n_seeds < 2:
        raise ConfigError(f"evaluate needs n >= 2 seeds, got {n_seeds}")

    def run(seed: int, pol) -> EpisodeResult:
        return rollout(env, pol, obs_stats, act_stats, exec_horizon, seed)

    if threads <= 1:
        results = [run(seed, policy) for seed in range(n_seeds)]
    else:
        workers = min(threads, n_seeds)
        copies = [policy] + [copy.deepcopy(policy) for _ in range(workers - 1)]
        chunks = [list(range(w, n_seeds, workers)) for w in range(workers)]

        def run_chunk(pol, seeds: list[int]) -> list[tuple[int, EpisodeResult]]:
            return [(s, run(s, pol)) for s in seeds]

        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(run_chunk, copies[w], chunks[w]) for w in range(workers)
            ]
            by_seed = dict(pair for f in futures for pair in f.result())
        results = [by_seed[s] for s in range(n_seeds)]
    p = float(np.mean([r.success for r in results]))
    reports = [rep for r in results for rep in r.reports]
    summary = EvalSummary(
        success_rate=p,
        stderr=binomial_stderr(p, n_seeds),
        n=n_seeds,
        mean_nfe=float(np.mean([rep.nfe for rep in reports])) if reports else 0.0,
        mean_net_ms=float(np.mean([rep.net_ms for rep in reports])) if reports else 0.0,
    )
    if results and results[0].info.get("mode") is not None:
        signs = [r.info["mode"] for r in results]
        summary.mode_fractions = {
            "left": float(np.mean([s < 0 for s in signs])),
            "right": float(np.mean([s > 0 for s in signs])),
        }
    return summary, results
