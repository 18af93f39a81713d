"""Desk-scale environments with scripted experts.

Both tasks live on the [-1, 1]^2 arena with box-clipped displacement actions
and pure transition functions: all stochasticity (start jitter, the reach
expert's route choice) flows through explicit numpy generators.

multimodal-reach: reach a fixed goal via one of two mirror-symmetric waypoint
routes, chosen 50/50, preserving the multimodality stress of the benchmarks
this stands in for. push-point: push a disc-shaped block to a fixed target
with a smaller circular pusher.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .schedule import ConfigError


@dataclass(frozen=True)
class EnvSpec:
    task_id: str
    state_dim: int
    action_dim: int
    episode_cap: int
    goal_tol: float


def _norm_clip(v: np.ndarray, limit: float) -> np.ndarray:
    """Scale a step so its norm is at most limit (keeps the direction)."""
    n = float(np.linalg.norm(v))
    return v if n <= limit or n == 0.0 else v * (limit / n)


def _unit(v: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(v))
    return v / n if n > 1e-12 else np.array([1.0, 0.0])


class ReachEnv:
    """Point agent; two mirror routes (via (+-0.55, 0)) to the goal at (0, 0.8)."""

    a_max = 0.08
    goal = np.array([0.0, 0.8])
    start = np.array([0.0, -0.8])
    waypoint_x = 0.55
    commit_x = 0.10  # |x| beyond which the route is considered chosen

    spec = EnvSpec(
        task_id="multimodal-reach",
        state_dim=2,
        action_dim=2,
        episode_cap=60,
        goal_tol=0.06,
    )

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        return self.start + rng.uniform(-0.05, 0.05, size=2)

    def step(self, state: np.ndarray, action: np.ndarray) -> np.ndarray:
        a = np.clip(action, -self.a_max, self.a_max)
        nxt = np.clip(state + a, -1.0, 1.0)
        if not np.isfinite(nxt).all():
            raise ConfigError("environment state diverged (non-finite)")
        return nxt

    def success(self, state: np.ndarray) -> bool:
        return float(np.linalg.norm(state - self.goal)) <= self.spec.goal_tol

    def expert_mode(self, state: np.ndarray, rng: np.random.Generator) -> int:
        if abs(float(state[0])) >= self.commit_x:
            return 1 if state[0] > 0 else -1
        return 1 if rng.random() < 0.5 else -1

    def expert_action(self, state: np.ndarray, mode: int) -> np.ndarray:
        waypoint = np.array([mode * self.waypoint_x, 0.0])
        target = waypoint if state[1] < waypoint[1] else self.goal
        return _norm_clip(target - state, self.a_max)


class PushEnv:
    """Circular pusher moves a disc block to the goal; quasi-static contact."""

    a_max = 0.08
    goal = np.array([0.6, 0.6])
    r_push = 0.06
    r_block = 0.10
    contact = r_push + r_block

    spec = EnvSpec(
        task_id="push-point",
        state_dim=4,
        action_dim=2,
        episode_cap=80,
        # block center within 5% of the arena diameter (2*sqrt(2)) of the goal
        goal_tol=0.05 * 2.0 * np.sqrt(2.0),
    )

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        pusher = np.array([-0.7, -0.7]) + rng.uniform(-0.05, 0.05, size=2)
        block = np.array([-0.1, -0.1]) + rng.uniform(-0.15, 0.15, size=2)
        return np.concatenate([pusher, block])

    def step(self, state: np.ndarray, action: np.ndarray) -> np.ndarray:
        pusher, block = state[:2].copy(), state[2:].copy()
        a = np.clip(action, -self.a_max, self.a_max)
        pusher = np.clip(pusher + a, -1.0, 1.0)
        gap = block - pusher
        dist = float(np.linalg.norm(gap))
        if dist < self.contact:
            block = pusher + self.contact * _unit(gap)
            block = np.clip(block, -0.95, 0.95)
        nxt = np.concatenate([pusher, block])
        if not np.isfinite(nxt).all():
            raise ConfigError("environment state diverged (non-finite)")
        return nxt

    def success(self, state: np.ndarray) -> bool:
        return float(np.linalg.norm(state[2:] - self.goal)) <= self.spec.goal_tol

    def expert_mode(self, state: np.ndarray, rng: np.random.Generator) -> int:
        return 0  # single-mode task

    def expert_action(self, state: np.ndarray, mode: int) -> np.ndarray:
        pusher, block = state[:2], state[2:]
        behind_dir = _unit(block - self.goal)  # from goal through block: far side
        rel = pusher - block
        aligned = float(np.dot(_unit(rel), behind_dir)) > 0.85
        near = float(np.linalg.norm(rel)) <= self.contact + 0.06
        if aligned and near:
            target = block + (self.contact - 0.03) * behind_dir
            return _norm_clip(target - pusher, self.a_max)
        target = block + (self.contact + 0.05) * behind_dir
        to_target = target - pusher
        to_block = block - pusher
        blocked = (
            float(np.linalg.norm(to_block)) < self.contact + 0.03
            and float(np.dot(_unit(to_target), _unit(to_block))) > 0.5
        )
        if blocked:
            tangent = np.array([-to_block[1], to_block[0]])
            if float(np.dot(tangent, to_target)) < 0:
                tangent = -tangent
            away = -_unit(to_block)  # slight outward bias keeps clear of the block
            return _norm_clip(_unit(tangent) + 0.3 * away, 1.0) * self.a_max
        return _norm_clip(to_target, self.a_max)


def make_env(task_id: str):
    envs = {"multimodal-reach": ReachEnv, "push-point": PushEnv}
    if task_id not in envs:
        raise ConfigError(f"unknown task {task_id!r}, expected one of {sorted(envs)}")
    return envs[task_id]()


def scripted_expert(
    env, state: np.ndarray, rng: np.random.Generator, horizon: int, mode: int | None = None
) -> np.ndarray:
    """Emit a horizon-step action sequence by simulating the expert controller
    forward from the given state. The reach route is drawn once per call when
    the state has not committed to a side yet."""
    if mode is None:
        mode = env.expert_mode(state, rng)
    actions = np.zeros((horizon, env.spec.action_dim))
    s = np.asarray(state, dtype=float).copy()
    for i in range(horizon):
        a = env.expert_action(s, mode)
        actions[i] = a
        s = env.step(s, a)
    return actions
