"""Clipped-surrogate PPO over the staged tabletop episode.

Switches: one network for every stage or one per stage (``topology``), a shared
or separate actor/critic trunk (``trunk``), and the common or stage-separated
reward (``reward_mode``).

The policy is a tanh-squashed diagonal Gaussian over (dx, dy). The buffer keeps
the pre-squash sample ``u``; the change-of-variables term depends only on ``u``
so it cancels in the probability ratio.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from . import gradcore as gc
from .shapes import ObjectShape
from .tabletop import EPISODE_STEPS, EnvConfig, Stage, TabletopEnv, tie_action
from .vecenv import EnvBatch

TOPOLOGIES = ("onenet", "twonet")
TRUNKS = ("shared", "separate")
REWARD_MODES = ("common", "separate")
EVAL_STREAM = 2**32 - 1  # keeps evaluation episodes apart from training keys [seed, env, episode]
ACTOR_STAGES = (int(Stage.PUSH), int(Stage.GRASP))
LOG2 = math.log(2.0)


@dataclass
class PolicyConfig:
    topology: str = "onenet"
    trunk: str = "shared"
    reward_mode: str = "common"
    hidden_sizes: tuple[int, ...] = (256, 128)
    action_dim: int = 2
    log_std_init: float = -0.7
    gamma: float = 0.99
    clip_epsilon: float = 0.2
    gae_lambda: float = 0.95
    rollout_horizon: int = 320
    update_epochs: int = 5
    minibatch_size: int = 1024
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    learning_rate: float = 3e-4
    max_grad_norm: float = 0.5
    normalize_obs: bool = True
    actor_head_gain: float = 0.01

    def __post_init__(self):
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)
        if self.topology not in TOPOLOGIES:
            raise ValueError(f"topology must be one of {TOPOLOGIES}, got {self.topology!r}")
        if self.trunk not in TRUNKS:
            raise ValueError(f"trunk must be one of {TRUNKS}, got {self.trunk!r}")
        if self.reward_mode not in REWARD_MODES:
            raise ValueError(f"reward_mode must be one of {REWARD_MODES}, got {self.reward_mode!r}")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.clip_epsilon <= 0:
            raise ValueError("clip_epsilon must be positive")
        if self.action_dim != 2:
            raise ValueError("the policy emits exactly two components (dx = dg_x, dy)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# ---------------------------------------------------------------------------
# squashed Gaussian


def squash_log_det(u: np.ndarray) -> np.ndarray:
    """log(1 - tanh(u)^2), summed over the last axis, without overflow."""
    return np.sum(2.0 * (LOG2 - u - np.logaddexp(0.0, -2.0 * u)), axis=-1)


def squashed_log_prob(u: np.ndarray, mu: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    """Log density of a = tanh(u) when u ~ N(mu, exp(log_std)^2)."""
    std = np.exp(log_std)
    gauss = -0.5 * ((u - mu) / std) ** 2 - log_std - 0.5 * math.log(2 * math.pi)
    return np.sum(gauss, axis=-1) - squash_log_det(u)


# ---------------------------------------------------------------------------
# networks


def _dense(rng, n_in, n_out, gain, prefix, params):
    params[f"{prefix}.w"] = gc.Tensor(gc.orthogonal(rng, (n_in, n_out), gain), requires_grad=True)
    params[f"{prefix}.b"] = gc.Tensor(np.zeros(n_out), requires_grad=True)


class ActorCritic:
    """Tanh MLP trunk(s) with a mean head, a value head and a free log-std vector."""

    def __init__(self, obs_dim: int, config: PolicyConfig, rng: np.random.Generator):
        self.obs_dim = obs_dim
        self.config = config
        self.params: dict[str, gc.Tensor] = {}
        trunks = ("trunk",) if config.trunk == "shared" else ("actor", "critic")
        hidden_gain = math.sqrt(2.0)
        for name in trunks:
            n_in = obs_dim
            for k, h in enumerate(config.hidden_sizes):
                _dense(rng, n_in, h, hidden_gain, f"{name}.{k}", self.params)
                n_in = h
        top = config.hidden_sizes[-1]
        _dense(rng, top, config.action_dim, config.actor_head_gain, "pi", self.params)
        _dense(rng, top, 1, 1.0, "v", self.params)
        self.params["log_std"] = gc.Tensor(np.full(config.action_dim, config.log_std_init),
                                           requires_grad=True)
        self._trunks = trunks

    def _trunk(self, x, name):
        for k in range(len(self.config.hidden_sizes)):
            x = gc.tanh(gc.linear(x, self.params[f"{name}.{k}.w"], self.params[f"{name}.{k}.b"]))
        return x

    def forward(self, obs):
        """(mean (N, 2), value (N,)) as graph tensors."""
        x = gc.as_tensor(obs)
        if x.data.ndim != 2 or x.shape[1] != self.obs_dim:
            raise gc.ShapeError(f"policy expects states of length {self.obs_dim}, got shape {x.shape}")
        if len(self._trunks) == 1:
            ha = hc = self._trunk(x, "trunk")
        else:
            ha, hc = self._trunk(x, "actor"), self._trunk(x, "critic")
        mu = gc.linear(ha, self.params["pi.w"], self.params["pi.b"])
        v = gc.reshape(gc.linear(hc, self.params["v.w"], self.params["v.b"]), (x.shape[0],))
        return mu, v

    def head_params(self, head: str) -> list[str]:
        return [k for k in self.params if k.startswith(head + ".")]

    def n_params(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))


@dataclass
class RunningNorm:
    """Per-feature running mean/variance (parallel merge of batch moments)."""

    mean: np.ndarray
    var: np.ndarray
    count: float = 1e-4

    @classmethod
    def create(cls, dim: int) -> "RunningNorm":
        return cls(np.zeros(dim), np.ones(dim))

    def update(self, x: np.ndarray) -> None:
        x = x.reshape(-1, self.mean.shape[0])
        n = x.shape[0]
        bm, bv = x.mean(axis=0), x.var(axis=0)
        total = self.count + n
        delta = bm - self.mean
        self.mean = self.mean + delta * n / total
        m2 = self.var * self.count + bv * n + delta * delta * self.count * n / total
        self.var = m2 / total
        self.count = total

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.clip((x - self.mean) / np.sqrt(self.var + 1e-8), -10.0, 10.0)


class Policy:
    """One or two ActorCritic networks plus observation normalisation."""

    def __init__(self, obs_dim: int, config: PolicyConfig, seed: int = 0):
        self.config = config
        self.obs_dim = obs_dim
        rng = np.random.default_rng([seed, 1])
        n = 2 if config.topology == "twonet" else 1
        self.nets = [ActorCritic(obs_dim, config, rng) for _ in range(n)]
        self.optims = [gc.AdamState(learning_rate=config.learning_rate) for _ in range(n)]
        self.norm = RunningNorm.create(obs_dim)

    def net_index(self, stages: np.ndarray) -> np.ndarray:
        """Which network owns each stage: push-net for Push/Transit, grasp-net for Grasp/Lift."""
        stages = np.asarray(stages)
        if len(self.nets) == 1:
            return np.zeros(stages.shape, dtype=np.int64)
        return (stages >= int(Stage.GRASP)).astype(np.int64)

    def normalize(self, obs: np.ndarray) -> np.ndarray:
        return self.norm(obs) if self.config.normalize_obs else obs

    def evaluate(self, nobs: np.ndarray, stages: np.ndarray):
        """(mu, log_std, value) for already-normalised states, no graph."""
        n = nobs.shape[0]
        mu = np.zeros((n, self.config.action_dim))
        log_std = np.zeros((n, self.config.action_dim))
        value = np.zeros(n)
        which = self.net_index(stages)
        for k, net in enumerate(self.nets):
            rows = np.flatnonzero(which == k)
            if rows.size == 0:
                continue
            m, v = net.forward(nobs[rows])
            mu[rows], value[rows] = m.data, v.data
            log_std[rows] = net.params["log_std"].data
        return mu, log_std, value

    def act(self, obs: np.ndarray, stages: np.ndarray, rng: np.random.Generator | None = None,
            deterministic: bool = False) -> "ActResult":
        obs = np.atleast_2d(np.asarray(obs, dtype=float))
        if obs.shape[1] != self.obs_dim:
            raise ValueError(f"state length {obs.shape[1]} does not match the policy's {self.obs_dim}")
        nobs = self.normalize(obs)
        mu, log_std, value = self.evaluate(nobs, np.atleast_1d(stages))
        if deterministic:
            u = mu.copy()
        else:
            u = mu + np.exp(log_std) * rng.standard_normal(mu.shape)
        action = np.tanh(u)
        gauss = -0.5 * ((u - mu) / np.exp(log_std)) ** 2 - log_std - 0.5 * math.log(2 * math.pi)
        return ActResult(nobs, u, action, squashed_log_prob(u, mu, log_std), value, gauss)

    def param_count(self) -> int:
        return sum(net.n_params() for net in self.nets)


@dataclass
class ActResult:
    nobs: np.ndarray
    u: np.ndarray
    action: np.ndarray  # (N, 2) in [-1, 1]
    log_prob: np.ndarray
    value: np.ndarray
    component_log_prob: np.ndarray  # (N, 2) Gaussian log density of u per component

    @property
    def env_action(self) -> np.ndarray:
        """(N, 3) environment actions with dg_x tied to dp_x."""
        return np.stack([tie_action(a) for a in self.action])


# ---------------------------------------------------------------------------
# rollout storage, reward composition, advantages


def compose_reward(r_p, r_g, r_c, stage, mode: str):
    """Training reward. ``separate`` drops the alignment term from the push stage."""
    r_p, r_g, r_c, stage = map(np.asarray, (r_p, r_g, r_c, stage))
    if mode == "common":
        return r_p + r_g + r_c
    if mode == "separate":
        push = stage == int(Stage.PUSH)
        return np.where(push, r_p, r_p + r_g + r_c)
    raise ValueError(f"unknown reward mode {mode!r}")


@dataclass
class RolloutBuffer:
    horizon: int
    n_envs: int
    obs_dim: int
    action_dim: int = 2

    def __post_init__(self):
        t, n = self.horizon, self.n_envs
        self.obs = np.zeros((t, n, self.obs_dim))  # normalised, as the policy saw them
        self.raw_obs = np.zeros((t, n, self.obs_dim))
        self.u = np.zeros((t, n, self.action_dim))
        self.log_prob = np.zeros((t, n))
        self.component_log_prob = np.zeros((t, n, self.action_dim))
        self.value = np.zeros((t, n))
        self.r_p = np.zeros((t, n))
        self.r_g = np.zeros((t, n))
        self.r_c = np.zeros((t, n))
        self.stage = np.zeros((t, n), dtype=np.int64)
        self.done = np.zeros((t, n), dtype=bool)
        self.next_value = np.zeros((t, n))  # V(s_{t+1}) under the owning net; 0 after done
        self.cut = np.zeros((t, n), dtype=bool)  # stop bootstrapping after this step
        self.advantages = np.zeros((t, n))
        self.returns = np.zeros((t, n))
        self.size = 0

    def add(self, k, nobs, u, log_prob, value, r_p, r_g, r_c, stage, done, component_log_prob=None):
        self.obs[k], self.u[k], self.log_prob[k], self.value[k] = nobs, u, log_prob, value
        if component_log_prob is not None:
            self.component_log_prob[k] = component_log_prob
        self.r_p[k], self.r_g[k], self.r_c[k] = r_p, r_g, r_c
        self.stage[k], self.done[k] = stage, done
        self.size = max(self.size, k + 1)

    def rewards(self, mode: str) -> np.ndarray:
        return compose_reward(self.r_p, self.r_g, self.r_c, self.stage, mode)


def compute_gae(rewards, values, next_values, dones, gamma: float, lam: float, cuts=None):
    """Generalized advantage estimates and returns over (T, N) arrays.

    ``next_values[t]`` is the bootstrap value of the state after step t; it is
    ignored where ``dones`` (or ``cuts``) is set, and the recursion restarts there.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    next_values = np.asarray(next_values, dtype=float)
    stop = np.asarray(dones, dtype=bool)
    if cuts is not None:
        stop = stop | np.asarray(cuts, dtype=bool)
    keep = 1.0 - stop
    adv = np.zeros_like(rewards)
    last = np.zeros(rewards.shape[1:])
    for t in range(rewards.shape[0] - 1, -1, -1):
        delta = rewards[t] + gamma * next_values[t] * keep[t] - values[t]
        last = delta + gamma * lam * keep[t] * last
        adv[t] = last
    return adv, adv + values


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    if adv.size < 2:
        return adv - adv.mean()
    return (adv - adv.mean()) / (adv.std() + 1e-8)


# ---------------------------------------------------------------------------
# update


def clipped_objective(ratio, adv, eps):
    """Per-sample min(r A, clip(r, 1 - eps, 1 + eps) A) on plain arrays."""
    return np.minimum(ratio * adv, np.clip(ratio, 1 - eps, 1 + eps) * adv)


def acting_components(stage: np.ndarray) -> np.ndarray:
    """(N, 2) mask of the action components the environment uses: dy is ignored while grasping."""
    mask = np.ones((len(stage), 2))
    mask[np.asarray(stage) == int(Stage.GRASP), 1] = 0.0
    return mask


def net_loss(net: ActorCritic, config: PolicyConfig, obs, u, old_logp, adv, returns, actor_mask,
             components=None):
    """PPO loss for one network on one minibatch; returns (loss tensor, stats).

    ``old_logp`` is the Gaussian log density of ``u`` summed over ``components``
    (all of them when omitted).
    """
    mu, v = net.forward(obs)
    log_std = net.params["log_std"]
    per = gc.gaussian_logprob(gc.Tensor(u), mu, log_std)
    if components is not None:
        per = gc.mul(per, gc.Tensor(components))
    logp = gc.sum(per, axis=-1)
    n_actor = int(actor_mask.sum())
    loss = gc.mul(gc.mean(gc.square(gc.sub(v, gc.Tensor(returns)))), config.value_coef)
    stats = {"value_loss": float(np.mean((v.data - returns) ** 2)), "n_actor": n_actor}
    if n_actor:
        # the tanh correction depends only on u and cancels in the ratio
        ratio = gc.exp(gc.sub(logp, gc.Tensor(old_logp)))
        a = gc.Tensor(adv * actor_mask)
        eps = config.clip_epsilon
        surr = gc.minimum(gc.mul(ratio, a), gc.mul(gc.clamp(ratio, 1 - eps, 1 + eps), a))
        policy_loss = gc.mul(gc.sum(gc.mul(surr, gc.Tensor(actor_mask.astype(float)))), -1.0 / n_actor)
        loss = gc.add(loss, policy_loss)
        if config.entropy_coef:
            ent = gc.sum(log_std)  # Gaussian entropy up to a constant
            loss = gc.add(loss, gc.mul(ent, -config.entropy_coef))
        stats["policy_loss"] = float(policy_loss.data)
        r = ratio.data[actor_mask]
        stats["clip_frac"] = float(np.mean(np.abs(r - 1) > eps))
    return loss, stats


def ppo_update(buffer: RolloutBuffer, policy: Policy, rng: np.random.Generator) -> dict:
    """Several epochs of minibatch updates on a filled buffer."""
    cfg = policy.config
    if buffer.size == 0:
        raise ValueError("ppo_update on an empty buffer")
    t = buffer.size
    obs = buffer.obs[:t].reshape(-1, policy.obs_dim)
    u = buffer.u[:t].reshape(-1, cfg.action_dim)
    # compare Gaussian densities of u (the squash term cancels) over the components that act
    returns = buffer.returns[:t].reshape(-1)
    stage = buffer.stage[:t].reshape(-1)
    components = acting_components(stage)
    old_logp = np.sum(buffer.component_log_prob[:t].reshape(-1, cfg.action_dim) * components, axis=-1)
    actor = np.isin(stage, ACTOR_STAGES)
    which = policy.net_index(stage)
    adv = buffer.advantages[:t].reshape(-1).copy()
    for k in range(len(policy.nets)):
        sel = actor & (which == k)
        if sel.any():
            adv[sel] = normalize_advantages(adv[sel])
    adv[~actor] = 0.0
    n = obs.shape[0]
    mb = min(cfg.minibatch_size, n)
    history = []
    for _ in range(cfg.update_epochs):
        order = rng.permutation(n)
        for start in range(0, n - mb + 1, mb):
            idx = order[start:start + mb]
            for k, net in enumerate(policy.nets):
                rows = idx[which[idx] == k]
                if rows.size == 0:
                    continue
                gc.zero_grads(net.params.values())
                loss, stats = net_loss(net, cfg, obs[rows], u[rows], old_logp[rows], adv[rows],
                                       returns[rows], actor[rows], components[rows])
                gc.backward(loss)
                grads = {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
                         for name, p in net.params.items()}
                stats["grad_norm"] = gc.clip_grad_norm(grads, cfg.max_grad_norm)
                gc.adam_step(policy.optims[k], net.params, grads)
                stats["net"] = k
                history.append(stats)
    out = {"updates": len(history)}
    for key in ("value_loss", "policy_loss", "clip_frac", "grad_norm"):
        vals = [h[key] for h in history if key in h]
        if vals:
            out[key] = float(np.mean(vals))
    return out


# ---------------------------------------------------------------------------
# rollouts and evaluation


def _stages_of(envs) -> np.ndarray:
    return np.array([int(env.state.clock.stage) for env in envs], dtype=np.int64)


def collect_rollout(batch: EnvBatch, policy: Policy, buffer: RolloutBuffer, obs: np.ndarray,
                    rng: np.random.Generator) -> tuple[np.ndarray, dict]:
    """Fill ``buffer`` with ``horizon`` steps per env; returns the next observations."""
    cfg = policy.config
    episode_returns: list[float] = []
    episode_success: list[bool] = []
    running = getattr(batch, "_running_return", None)
    if running is None:
        running = batch._running_return = np.zeros(batch.n_envs)
    for k in range(buffer.horizon):
        stages = _stages_of(batch.envs)
        res = policy.act(obs, stages, rng)
        step = batch.batch_step(res.env_action)
        r_p = np.array([r.r_p for r in step.rewards])
        r_g = np.array([r.r_g for r in step.rewards])
        r_c = np.array([r.r_c for r in step.rewards])
        buffer.add(k, res.nobs, res.u, res.log_prob, res.value, r_p, r_g, r_c, stages, step.dones,
                   res.component_log_prob)
        buffer.raw_obs[k] = obs
        running += r_p + r_g + r_c
        for i in np.flatnonzero(step.dones):
            episode_returns.append(float(running[i]))
            episode_success.append(bool(step.infos[i]["success"]))
            running[i] = 0.0
        obs = step.obs
        # value of the state after this step, under the net that owns it
        next_stages = _stages_of(batch.envs)
        buffer.next_value[k] = policy.evaluate(policy.normalize(obs), next_stages)[2]
        if cfg.topology == "twonet":
            # the push network's task ends at the transit/grasp boundary
            buffer.cut[k] = (stages != next_stages) & (next_stages == int(Stage.GRASP))
    rewards = buffer.rewards(cfg.reward_mode)
    buffer.advantages, buffer.returns = compute_gae(
        rewards, buffer.value, buffer.next_value, buffer.done, cfg.gamma, cfg.gae_lambda, buffer.cut)
    info = {"episodes": len(episode_returns),
            "train_return": float(np.mean(episode_returns)) if episode_returns else float("nan"),
            "train_success": float(np.mean(episode_success)) if episode_success else float("nan")}
    return obs, info


@dataclass
class EvalResult:
    success_rate: float
    mean_return: float
    zone_rate: float
    fall_rate: float
    episodes: int
    per_shape: dict[str, tuple[int, int]] = field(default_factory=dict)  # name -> (episodes, successes)


Actor = Callable[[np.ndarray, np.ndarray, list], np.ndarray]


def policy_actor(policy: Policy) -> Actor:
    def act(obs, stages, envs):
        return policy.act(obs, stages, deterministic=True).env_action
    return act


def scripted_actor() -> Actor:
    from .tabletop import scripted_action

    def act(obs, stages, envs):
        return np.stack([tie_action(scripted_action(env)) for env in envs])
    return act


def evaluate_policy(actor: Actor | Policy, shapes: list[ObjectShape], episodes: int, seed: int = 0,
                    n_envs: int = 16, config: EnvConfig = EnvConfig(), encoder=None,
                    per_shape: bool = False) -> EvalResult:
    """Deterministic rollouts; success means the object ends above the lifted height.

    With ``per_shape`` every shape gets ``episodes`` episodes, otherwise shapes
    are drawn uniformly from the pool for ``episodes`` episodes in total.
    """
    if isinstance(actor, Policy):
        actor = policy_actor(actor)
    jobs: list[tuple[ObjectShape, np.random.Generator]] = []
    if per_shape:
        for j, shape in enumerate(shapes):
            for e in range(episodes):
                jobs.append((shape, np.random.default_rng([seed, EVAL_STREAM, j, e])))
    else:
        for e in range(episodes):
            rng = np.random.default_rng([seed, EVAL_STREAM, e])
            jobs.append((shapes[int(rng.integers(len(shapes)))], rng))
    from .vecenv import batch_observe

    table: dict[str, list[int]] = {}
    totals = {"success": 0, "zone": 0, "fall": 0, "ret": 0.0}
    for start in range(0, len(jobs), n_envs):
        chunk = jobs[start:start + n_envs]
        envs = [TabletopEnv(config, encoder) for _ in chunk]
        for env, (shape, rng) in zip(envs, chunk):
            env.reset(rng, shape)
        returns = np.zeros(len(envs))
        last_info: list[dict] = [{} for _ in envs]
        for _ in range(EPISODE_STEPS):
            live = [i for i, env in enumerate(envs) if not env.state.done]
            if not live:
                break
            sub = [envs[i] for i in live]
            obs = batch_observe(sub, encoder)
            actions = actor(obs, _stages_of(sub), sub)
            for a, i in zip(actions, live):
                _, r, _, info = envs[i].step(a)
                returns[i] += r.total
                last_info[i] = info
        for i, env in enumerate(envs):
            info = last_info[i]
            name = env.shape.name
            row = table.setdefault(name, [0, 0])
            row[0] += 1
            row[1] += int(info["success"])
            totals["success"] += int(info["success"])
            totals["zone"] += int(info["zone"])
            totals["fall"] += int(info["fallen"])
            totals["ret"] += returns[i]
    n = len(jobs)
    return EvalResult(totals["success"] / n, totals["ret"] / n, totals["zone"] / n, totals["fall"] / n, n,
                      {k: (v[0], v[1]) for k, v in table.items()})


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainSettings:
    total_steps: int = 2_000_000
    n_envs: int = 16
    eval_every: int = 20_000
    eval_episodes: int = 32
    eval_envs: int = 16
    seed: int = 0
    workers: int = 1
    cell: str = "coreward-coac"

    def to_dict(self) -> dict:
        return asdict(self)


METRIC_FIELDS = ("step", "success_rate", "mean_return", "zone_rate", "fall_rate", "seed", "cell")


class Trainer:
    """Alternates rollouts and PPO updates; evaluates on a fixed episode set at a step cadence.

    Everything that influences the future (parameters, optimiser moments,
    normalisation statistics, the sampling RNG and every environment) lives in
    ``state_dict`` so a resumed run continues bit for bit.
    """

    def __init__(self, shapes: list[ObjectShape], policy_config: PolicyConfig,
                 settings: TrainSettings = TrainSettings(), env_config: EnvConfig = EnvConfig(),
                 encoder=None, eval_shapes: list[ObjectShape] | None = None):
        self.shapes = shapes
        self.eval_shapes = eval_shapes or shapes
        self.settings = settings
        self.env_config = env_config
        self.encoder = encoder
        self.batch = EnvBatch(settings.n_envs, shapes, settings.seed, env_config, encoder, settings.workers)
        obs_dim = self.batch.envs[0].obs_dim
        self.policy = Policy(obs_dim, policy_config, settings.seed)
        self.rng = np.random.default_rng([settings.seed, 7])
        self.buffer = RolloutBuffer(policy_config.rollout_horizon, settings.n_envs, obs_dim,
                                    policy_config.action_dim)
        self.steps = 0
        self.next_eval = settings.eval_every
        self.rows: list[dict] = []
        self.last_update: dict = {}
        self.obs = self.batch.reset()

    @property
    def done(self) -> bool:
        return self.steps >= self.settings.total_steps

    def evaluate(self) -> EvalResult:
        s = self.settings
        return evaluate_policy(self.policy, self.eval_shapes, s.eval_episodes, seed=s.seed,
                               n_envs=s.eval_envs, config=self.env_config, encoder=self.encoder)

    def iteration(self) -> list[dict]:
        """One rollout plus one update; returns any metric rows produced."""
        self.obs, info = collect_rollout(self.batch, self.policy, self.buffer, self.obs, self.rng)
        if self.policy.config.normalize_obs:
            self.policy.norm.update(self.buffer.raw_obs)
        self.last_update = {**ppo_update(self.buffer, self.policy, self.rng), **info}
        self.steps += self.buffer.horizon * self.settings.n_envs
        rows = []
        while self.steps >= self.next_eval:
            self.next_eval += self.settings.eval_every
            rows.append(self._row(self.evaluate()))
        if self.done and (not self.rows + rows or (self.rows + rows)[-1]["step"] != self.steps):
            rows.append(self._row(self.evaluate()))
        self.rows.extend(rows)
        return rows

    def _row(self, ev: EvalResult) -> dict:
        return {"step": self.steps, "success_rate": ev.success_rate, "mean_return": ev.mean_return,
                "zone_rate": ev.zone_rate, "fall_rate": ev.fall_rate, "seed": self.settings.seed,
                "cell": self.settings.cell}

    def run(self, until: int | None = None, on_rows: Callable[[list[dict]], None] | None = None) -> list[dict]:
        stop = self.settings.total_steps if until is None else min(until, self.settings.total_steps)
        while self.steps < stop:
            rows = self.iteration()
            if on_rows and rows:
                on_rows(rows)
        return self.rows

    # -- persistence ----------------------------------------------------------

    def state_dict(self) -> tuple[dict, dict[str, np.ndarray]]:
        """(JSON-able metadata, named float arrays)."""
        arrays: dict[str, np.ndarray] = {}
        optims = []
        for k, (net, opt) in enumerate(zip(self.policy.nets, self.policy.optims)):
            for name, p in net.params.items():
                arrays[f"net{k}/{name}"] = p.data
                if name in opt.first_moment:
                    arrays[f"adam{k}/m/{name}"] = opt.first_moment[name]
                    arrays[f"adam{k}/v/{name}"] = opt.second_moment[name]
            optims.append({"step_count": opt.step_count, "learning_rate": opt.learning_rate})
        arrays["norm/mean"] = self.policy.norm.mean
        arrays["norm/var"] = self.policy.norm.var
        arrays["obs"] = self.obs
        arrays["running_return"] = getattr(self.batch, "_running_return", np.zeros(self.batch.n_envs))
        meta = {
            "policy_config": self.policy.config.to_dict(),
            "settings": self.settings.to_dict(),
            "optims": optims,
            "norm_count": self.policy.norm.count,
            "rng": self.rng.bit_generator.state,
            "steps": self.steps,
            "next_eval": self.next_eval,
            "rows": self.rows,
            "episode_index": self.batch.episode_index.tolist(),
            "envs": [_env_to_json(env) for env in self.batch.envs],
        }
        return meta, arrays

    def load_state_dict(self, meta: dict, arrays: dict[str, np.ndarray]) -> None:
        for k, (net, opt) in enumerate(zip(self.policy.nets, self.policy.optims)):
            for name, p in net.params.items():
                p.data = np.array(arrays[f"net{k}/{name}"], dtype=float)
                if f"adam{k}/m/{name}" in arrays:
                    opt.first_moment[name] = np.array(arrays[f"adam{k}/m/{name}"])
                    opt.second_moment[name] = np.array(arrays[f"adam{k}/v/{name}"])
            opt.step_count = int(meta["optims"][k]["step_count"])
        self.policy.norm = RunningNorm(np.array(arrays["norm/mean"]), np.array(arrays["norm/var"]),
                                       float(meta["norm_count"]))
        self.obs = np.array(arrays["obs"])
        self.batch._running_return = np.array(arrays["running_return"])
        self.rng.bit_generator.state = meta["rng"]
        self.steps = int(meta["steps"])
        self.next_eval = int(meta["next_eval"])
        self.rows = [dict(r) for r in meta["rows"]]
        self.batch.episode_index = np.array(meta["episode_index"], dtype=np.int64)
        by_name = {s.name: s for s in self.shapes}
        for env, blob in zip(self.batch.envs, meta["envs"]):
            _env_from_json(env, blob, by_name)


def _env_to_json(env: TabletopEnv) -> dict:
    s = env.state
    return {"shape": env.shape.name, "obj": asdict(s.obj), "gripper": asdict(s.gripper),
            "t": s.clock.t, "danger_fired": s.danger_fired, "zone_reached": s.zone_reached,
            "grasp_z0": s.grasp_z0, "transit_from": list(s.transit_from), "done": s.done}


def _env_from_json(env: TabletopEnv, blob: dict, shapes: dict[str, ObjectShape]) -> None:
    from .tabletop import EnvState, GripperState, ObjectState, StageClock

    g = dict(blob["gripper"])
    g["quat"] = tuple(g["quat"])
    env.shape = shapes[blob["shape"]]
    env.state = EnvState(ObjectState(**blob["obj"]), GripperState(**g), StageClock(blob["t"]),
                         blob["danger_fired"], blob["zone_reached"], blob["grasp_z0"],
                         tuple(blob["transit_from"]), blob["done"])


def train(shapes: list[ObjectShape], policy_config: PolicyConfig, settings: TrainSettings = TrainSettings(),
          env_config: EnvConfig = EnvConfig(), encoder=None,
          on_rows: Callable[[list[dict]], None] | None = None) -> Trainer:
    trainer = Trainer(shapes, policy_config, settings, env_config, encoder)
    trainer.run(on_rows=on_rows)
    return trainer
