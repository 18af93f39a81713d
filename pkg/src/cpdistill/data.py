"""Expert datasets: generation from scripted demonstrations, per-dimension
normalization, the packed binary file format, and the 1D bimodal mixture used
for distributional checks.

File layout (little-endian, CRC rules as in checkpoint.py):

    magic "CPDATA01" | u32 version
    u16 task id length | UTF-8 task id | u32 H | u32 A | u32 obs_dim | u32 count
    f32 obs_low[obs_dim] | f32 obs_high[obs_dim] | f32 act_low[A] | f32 act_high[A]
    count rows of f32 (obs_dim + H*A)
    u32 CRC32 over everything after the version field
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np
import torch

from .checkpoint import CheckpointError

DATA_MAGIC = b"CPDATA01"
DATA_VERSION = 1


@dataclass(frozen=True)
class NormStats:
    """Per-dimension min/max mapping onto [-1, 1]."""

    low: np.ndarray  # float32 (d,)
    high: np.ndarray

    @classmethod
    def from_samples(cls, samples: np.ndarray) -> "NormStats":
        flat = samples.reshape(-1, samples.shape[-1])
        return cls(
            low=flat.min(axis=0).astype(np.float32),
            high=flat.max(axis=0).astype(np.float32),
        )

    @classmethod
    def identity(cls, dim: int) -> "NormStats":
        return cls(low=np.full(dim, -1.0, np.float32), high=np.full(dim, 1.0, np.float32))

    def _span(self) -> np.ndarray:
        return np.maximum(self.high.astype(np.float64) - self.low.astype(np.float64), 1e-8)

    def normalize(self, v: np.ndarray) -> np.ndarray:
        return 2.0 * (np.asarray(v, np.float64) - self.low) / self._span() - 1.0

    def denormalize(self, v: np.ndarray) -> np.ndarray:
        return (np.asarray(v, np.float64) + 1.0) / 2.0 * self._span() + self.low


@dataclass
class ExpertDataset:
    """Normalized (observation, action-sequence) pairs plus their statistics."""

    task_id: str
    horizon: int
    action_dim: int
    obs: np.ndarray  # (n, obs_dim) float32, normalized
    actions: np.ndarray  # (n, H, A) float32, normalized
    obs_stats: NormStats
    act_stats: NormStats

    @property
    def obs_dim(self) -> int:
        return self.obs.shape[1]

    @property
    def flat_dim(self) -> int:
        return self.horizon * self.action_dim

    @property
    def sigma_data(self) -> float:
        """Standard deviation of the normalized actions (data scale)."""
        return float(self.actions.std())

    def pools(self) -> tuple[torch.Tensor, torch.Tensor]:
        x0 = torch.from_numpy(self.actions.reshape(len(self.obs), -1).copy())
        obs = torch.from_numpy(self.obs.copy())
        return x0, obs

    def save(self, path) -> None:
        body = bytearray()
        raw = self.task_id.encode("utf-8")
        body += struct.pack("<H", len(raw)) + raw
        body += struct.pack(
            "<IIII", self.horizon, self.action_dim, self.obs_dim, len(self.obs)
        )
        for arr in (
            self.obs_stats.low, self.obs_stats.high,
            self.act_stats.low, self.act_stats.high,
        ):
            body += arr.astype("<f4").tobytes()
        rows = np.concatenate(
            [self.obs, self.actions.reshape(len(self.obs), -1)], axis=1
        )
        body += rows.astype("<f4").tobytes()
        blob = DATA_MAGIC + struct.pack("<I", DATA_VERSION) + bytes(body)
        blob += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
        with open(path, "wb") as f:
            f.write(blob)

    @classmethod
    def load(cls, path) -> "ExpertDataset":
        with open(path, "rb") as f:
            blob = f.read()
        if len(blob) < len(DATA_MAGIC) + 8:
            raise CheckpointError(f"{path}: truncated header")
        if blob[: len(DATA_MAGIC)] != DATA_MAGIC:
            raise CheckpointError(f"{path}: bad magic bytes")
        (version,) = struct.unpack_from("<I", blob, len(DATA_MAGIC))
        if version != DATA_VERSION:
            raise CheckpointError(f"{path}: unsupported dataset version {version}")
        body = blob[len(DATA_MAGIC) + 4 : -4]
        (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
        if zlib.crc32(body) & 0xFFFFFFFF != crc:
            raise CheckpointError(f"{path}: CRC mismatch, file corrupted")
        try:
            off = 0
            (task_len,) = struct.unpack_from("<H", body, off)
            off += 2
            task_id = body[off : off + task_len].decode("utf-8")
            off += task_len
            horizon, action_dim, obs_dim, count = struct.unpack_from("<IIII", body, off)
            off += 16

            def take(n: int) -> np.ndarray:
                nonlocal off
                chunk = body[off : off + 4 * n]
                if len(chunk) != 4 * n:
                    raise struct.error("payload short")
                off += 4 * n
                return np.frombuffer(chunk, dtype="<f4").copy()

            obs_low, obs_high = take(obs_dim), take(obs_dim)
            act_low, act_high = take(action_dim), take(action_dim)
            rows = take(count * (obs_dim + horizon * action_dim))
        except (struct.error, UnicodeDecodeError) as e:
            raise CheckpointError(f"{path}: truncated or malformed dataset: {e}") from e
        if off != len(body):
            raise CheckpointError(f"{path}: trailing bytes after payload")
        rows = rows.reshape(count, obs_dim + horizon * action_dim)
        return cls(
            task_id=task_id,
            horizon=horizon,
            action_dim=action_dim,
            obs=rows[:, :obs_dim].copy(),
            actions=rows[:, obs_dim:].reshape(count, horizon, action_dim).copy(),
            obs_stats=NormStats(low=obs_low, high=obs_high),
            act_stats=NormStats(low=act_low, high=act_high),
        )


def stack_obs(prev_state: np.ndarray, state: np.ndarray) -> np.ndarray:
    """Two-frame observation: previous state then current state, flattened."""
    return np.concatenate([prev_state, state])


def run_expert_episode(env, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """States (T+1, state_dim) and actions (T, A) of one scripted demo."""
    s = env.reset(rng)
    mode = env.expert_mode(s, rng)
    states, actions = [s], []
    for _ in range(env.spec.episode_cap):
        a = env.expert_action(s, mode)
        s = env.step(s, a)
        states.append(s)
        actions.append(a)
        if env.success(s):
            break
    return np.asarray(states), np.asarray(actions)


def generate_dataset(env, n_episodes: int, seed: int, horizon: int = 16) -> ExpertDataset:
    """Roll scripted demos and slice them into 2-frame-stacked training pairs.

    An episode of T actions yields max(0, T - horizon + 1) windows; the first
    window duplicates the initial state in its observation stack.
    """
    if n_episodes < 1:
        raise CheckpointError(f"need at least one episode, got {n_episodes}")
    rng = np.random.default_rng(seed)
    obs_rows, act_rows = [], []
    for _ in range(n_episodes):
        states, actions = run_expert_episode(env, rng)
        for i in range(len(actions) - horizon + 1):
            obs_rows.append(stack_obs(states[max(i - 1, 0)], states[i]))
            act_rows.append(actions[i : i + horizon])
    obs_raw = np.asarray(obs_rows)
    act_raw = np.asarray(act_rows)
    obs_stats = NormStats.from_samples(obs_raw)
    act_stats = NormStats.from_samples(act_raw)
    return ExpertDataset(
        task_id=env.spec.task_id,
        horizon=horizon,
        action_dim=env.spec.action_dim,
        obs=obs_stats.normalize(obs_raw).astype(np.float32),
        actions=act_stats.normalize(act_raw).astype(np.float32),
        obs_stats=obs_stats,
        act_stats=act_stats,
    )


def bimodal_dataset(
    n: int, seed: int, mu: float = 0.55, sigma: float = 0.04, weight: float = 0.5
) -> ExpertDataset:
    """1D two-mode Gaussian mixture in already-normalized action space.

    Uses identity normalization stats, so normalized and raw values coincide;
    samples are clipped to [-1, 1].
    """
    rng = np.random.default_rng(seed)
    signs = np.where(rng.random(n) < weight, 1.0, -1.0)
    vals = np.clip(signs * mu + sigma * rng.standard_normal(n), -1.0, 1.0)
    return ExpertDataset(
        task_id="bimodal1d",
        horizon=1,
        action_dim=1,
        obs=np.zeros((n, 0), np.float32),
        actions=vals.reshape(n, 1, 1).astype(np.float32),
        obs_stats=NormStats.identity(0),
        act_stats=NormStats.identity(1),
    )
