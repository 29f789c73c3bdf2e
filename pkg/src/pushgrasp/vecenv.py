"""N independent tabletop environments stepped as one batch.

Env ``i`` draws episode ``k`` (shape choice, spawn pose) from
``default_rng([master_seed, i, k])`` so every transcript is a pure function of
the master seed, whatever the worker count.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .shapes import ObjectShape
from .tabletop import EnvConfig, RewardBreakdown, TabletopEnv, render


@dataclass
class StepResult:
    obs: np.ndarray  # (N, obs_dim), post-reset for envs that finished
    rewards: list[RewardBreakdown]
    dones: np.ndarray
    infos: list[dict]
    stages: np.ndarray  # stage of the step just taken, per env


@dataclass
class Throughput:
    steps: int = 0
    seconds: float = 0.0

    @property
    def steps_per_second(self) -> float:
        return self.steps / self.seconds if self.seconds > 0 else 0.0


@dataclass
class EnvBatch:
    n_envs: int
    shapes: list[ObjectShape]
    master_seed: int = 0
    config: EnvConfig = field(default_factory=EnvConfig)
    encoder: object = None
    workers: int = 1
    shape_weights: np.ndarray | None = None

    def __post_init__(self):
        if self.n_envs < 1:
            raise ValueError("n_envs must be positive")
        if not self.shapes:
            raise ValueError("shape pool is empty")
        self.envs = [TabletopEnv(self.config) for _ in range(self.n_envs)]
        self.episode_index = np.zeros(self.n_envs, dtype=np.int64)
        self.episode_shapes: list[list[str]] = [[] for _ in range(self.n_envs)]
        self.throughput = Throughput()
        self._pool = ThreadPoolExecutor(self.workers) if self.workers > 1 else None
        self._blocks = np.array_split(np.arange(self.n_envs), max(1, min(self.workers, self.n_envs)))

    # -- seeding ------------------------------------------------------------

    def episode_rng(self, i: int, episode: int) -> np.random.Generator:
        return np.random.default_rng([self.master_seed, i, episode])

    def _reset_env(self, i: int) -> None:
        rng = self.episode_rng(i, int(self.episode_index[i]))
        if self.shape_weights is None:
            k = int(rng.integers(len(self.shapes)))
        else:
            k = int(rng.choice(len(self.shapes), p=self.shape_weights))
        shape = self.shapes[k]
        self.envs[i].reset(rng, shape)
        self.episode_shapes[i].append(shape.name)

    def reset(self) -> np.ndarray:
        self.episode_index[:] = 0
        self.episode_shapes = [[] for _ in range(self.n_envs)]
        self._run(lambda block: [self._reset_env(i) for i in block])
        return self.observe()

    # -- stepping -----------------------------------------------------------

    def _run(self, fn):
        if self._pool is None:
            return [fn(self._blocks[0])] if len(self._blocks) == 1 else [fn(b) for b in self._blocks]
        return list(self._pool.map(fn, self._blocks))

    def batch_step(self, actions) -> StepResult:
        """Step every env once; finished envs are reset before returning."""
        actions = np.asarray(actions, dtype=float)
        if actions.ndim != 2 or actions.shape[0] != self.n_envs or actions.shape[1] != 3:
            raise ValueError(f"expected actions of shape ({self.n_envs}, 3), got {actions.shape}")
        rewards: list = [None] * self.n_envs
        dones = np.zeros(self.n_envs, dtype=bool)
        infos: list = [None] * self.n_envs
        stages = np.zeros(self.n_envs, dtype=np.int64)

        def work(block):
            for i in block:
                env = self.envs[i]
                _, r, done, info = env.step(actions[i])
                rewards[i], dones[i], infos[i], stages[i] = r, done, info, info["stage"]
                if done:
                    info["shape"] = env.shape.name
                    self.episode_index[i] += 1
                    self._reset_env(i)

        start = time.perf_counter()
        self._run(work)
        self.throughput.seconds += time.perf_counter() - start
        self.throughput.steps += self.n_envs
        return StepResult(self.observe(), rewards, dones, infos, stages)

    # -- observation --------------------------------------------------------

    def observe(self) -> np.ndarray:
        return batch_observe(self.envs, self.encoder)

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None


def batch_observe(envs: list[TabletopEnv], encoder=None) -> np.ndarray:
    """(N, obs_dim) policy states; the encoder, if any, runs once on the stacked renders."""
    if encoder is None:
        return np.stack([env.observe() for env in envs])
    cfg = encoder.config
    images = np.stack([render(env.state, env.shape, cfg.image_size, cfg.channels, env.config)
                       for env in envs])
    mu = encoder.encode_batch(images).mu
    poses = np.stack([env.state.gripper.pose for env in envs])
    return np.concatenate([mu, poses], axis=1)
